//! Reproducible desk-scale fixture for end-to-end runs.
//!
//! Builds the four weight sets of the transfer pipeline from one seed:
//!
//! - `W_AR`: a freshly initialised model.
//! - `τ_diff`: a large random delta on every 2-D tensor, each scaled to
//!   spectral norm `diff_ratio · ‖τ_pref‖₂`; `W_DLLM = W_AR + τ_diff`.
//! - `τ_pref`: a small delta that moves the `lm_head` rows of a set of
//!   preferred tokens along the mean masked-position hidden state of
//!   `W_DLLM`, plus low-norm noise on the other 2-D tensors;
//!   `W_AR_aligned = W_AR + τ_pref`.
//! - Preference pairs whose chosen responses use only preferred tokens.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::checkpoint::{save_checkpoint, write_atomic, Checkpoint, TensorRecord};
use crate::error::{Error, Result};
use crate::model::{self, Mode, ModelConfig, TinyLm, Token};
use crate::reward::{PreferenceBatch, PreferencePair};
use crate::rng;
use crate::spectral::{svd_spectrum, Matrix};
use crate::task_vector::{self, Origin, TaskVector};

const STREAM_DIFF: u64 = 1;
const STREAM_PREF: u64 = 2;
const STREAM_PAIRS: u64 = 3;

#[derive(Debug, Clone, Serialize)]
pub struct SyntheticOptions {
    pub n_pairs: usize,
    /// Row shift applied to each preferred token's `lm_head` row.
    pub kappa: f64,
    /// `‖τ_diff‖₂ / ‖τ_pref‖₂` per 2-D tensor.
    pub diff_ratio: f64,
    /// Spectral norm of the noise part of `τ_pref`, relative to its head part.
    pub pref_noise: f64,
    pub n_preferred: usize,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        Self {
            n_pairs: 64,
            kappa: 0.05,
            diff_ratio: 50.0,
            pref_noise: 0.2,
            n_preferred: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub seed: u64,
    pub seeds: BTreeMap<String, u64>,
    pub options: SyntheticOptions,
    pub config: ModelConfig,
    pub preferred_tokens: Vec<Token>,
    pub pref_head_norm: f64,
    pub pref_noise_norm: f64,
    pub diff_norm: f64,
    pub files: BTreeMap<String, String>,
}

pub struct SyntheticFixture {
    /// Diffusion-mode configuration shared by every checkpoint.
    pub config: ModelConfig,
    pub w_ar: Checkpoint,
    pub w_ar_aligned: Checkpoint,
    pub w_dllm: Checkpoint,
    pub tau_pref: TaskVector,
    pub tau_diff: TaskVector,
    pub batch: PreferenceBatch,
    pub manifest: Manifest,
}

fn gaussian_matrix(rows: usize, cols: usize, seed: u64) -> Vec<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..rows * cols)
        .map(|_| r.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Random matrix rescaled to an exact spectral norm.
fn matrix_with_norm(rows: usize, cols: usize, norm: f64, seed: u64) -> Result<Vec<f32>> {
    let g = gaussian_matrix(rows, cols, seed);
    let s = svd_spectrum(&Matrix::new(rows, cols, g.clone())?, Some(1))?[0];
    Ok(g.iter().map(|v| (v * norm / s) as f32).collect())
}

fn sample_tokens(r: &mut ChaCha8Rng, pool: &[Token], min: usize, max: usize) -> Vec<Token> {
    let len = r.random_range(min..=max);
    (0..len)
        .map(|_| pool[r.random_range(0..pool.len())])
        .collect()
}

pub fn generate(
    config: &ModelConfig,
    seed: u64,
    opts: &SyntheticOptions,
) -> Result<SyntheticFixture> {
    config.validate()?;
    let regular = config.vocab_size - 2;
    if opts.n_preferred == 0 || opts.n_preferred >= regular {
        return Err(Error::invalid(format!(
            "n_preferred must lie in 1..{regular}, got {}",
            opts.n_preferred
        )));
    }
    if config.max_seq < 9 {
        return Err(Error::invalid("synthetic pairs need max_seq >= 9"));
    }
    if opts.n_pairs == 0 {
        return Err(Error::invalid("n_pairs must be positive"));
    }
    if !(opts.kappa > 0.0 && opts.diff_ratio > 0.0 && opts.pref_noise >= 0.0) {
        return Err(Error::invalid(
            "kappa and diff_ratio must be positive, pref_noise >= 0",
        ));
    }
    let config = config.with_mode(Mode::Diffusion);
    let diff_seed = rng::derive_seed(seed, &[STREAM_DIFF]);
    let pref_seed = rng::derive_seed(seed, &[STREAM_PREF]);
    let pairs_seed = rng::derive_seed(seed, &[STREAM_PAIRS]);

    let w_ar = model::init_model(&config, seed)?;

    let pref_head_norm = opts.kappa * (opts.n_preferred as f64).sqrt();
    let pref_noise_norm = opts.pref_noise * pref_head_norm;
    let diff_norm = opts.diff_ratio * pref_head_norm.max(pref_noise_norm);

    let mut diff_records = Vec::new();
    for t in w_ar.tensors() {
        let values = match t.matrix_dims() {
            Some((r, c)) => matrix_with_norm(
                r,
                c,
                diff_norm,
                rng::derive_seed(diff_seed, &[rng::hash_str(&t.name)]),
            )?,
            None => vec![0.0; t.numel()],
        };
        diff_records.push(TensorRecord::new(t.name.clone(), t.shape.clone(), values)?);
    }
    let tau_diff =
        TaskVector::from_records(diff_records, Origin::default())?.with_origin("w_ar", "w_dllm");
    let mut w_dllm = task_vector::apply(&w_ar, &tau_diff, 1.0)?;
    w_dllm.metadata.clear();

    // preference pairs
    let preferred: Vec<Token> = (0..opts.n_preferred as Token).collect();
    let others: Vec<Token> = (opts.n_preferred as Token..regular as Token).collect();
    let all: Vec<Token> = (0..regular as Token).collect();
    let mut r = ChaCha8Rng::seed_from_u64(pairs_seed);
    let pairs: Vec<PreferencePair> = (0..opts.n_pairs)
        .map(|_| PreferencePair {
            prompt: sample_tokens(&mut r, &all, 2, 4),
            chosen: sample_tokens(&mut r, &preferred, 2, 5),
            rejected: sample_tokens(&mut r, &others, 2, 5),
        })
        .collect();
    let batch = PreferenceBatch {
        id: format!("synthetic-{seed}"),
        pairs,
    };

    // mean final hidden state at fully masked response positions
    let dllm = TinyLm::new(config.clone(), &w_dllm)?;
    let d = config.d_model;
    let mut mean = vec![0.0f64; d];
    let mut count = 0usize;
    for pair in &batch.pairs {
        for resp in [&pair.chosen, &pair.rejected] {
            let mut seq = pair.prompt.clone();
            seq.extend(std::iter::repeat_n(config.mask_id(), resp.len()));
            for h in &dllm.hidden_states(&seq, false)[pair.prompt.len()..] {
                mean.iter_mut().zip(h).for_each(|(m, v)| *m += v);
                count += 1;
            }
        }
    }
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    let direction: Vec<f64> = if norm > 0.0 {
        mean.iter().map(|v| v / norm).collect()
    } else {
        let mut e = vec![0.0; d];
        e[0] = 1.0;
        e
    };
    debug_assert!(count > 0);

    let mut pref_records = Vec::new();
    for t in w_ar.tensors() {
        let values = if t.name == "lm_head" {
            let mut v = vec![0.0f32; t.numel()];
            for &tok in &preferred {
                let row = &mut v[tok as usize * d..(tok as usize + 1) * d];
                row.iter_mut()
                    .zip(&direction)
                    .for_each(|(x, u)| *x = (opts.kappa * u) as f32);
            }
            v
        } else if let (Some((rows, cols)), true) = (t.matrix_dims(), pref_noise_norm > 0.0) {
            matrix_with_norm(
                rows,
                cols,
                pref_noise_norm,
                rng::derive_seed(pref_seed, &[rng::hash_str(&t.name)]),
            )?
        } else {
            vec![0.0; t.numel()]
        };
        pref_records.push(TensorRecord::new(t.name.clone(), t.shape.clone(), values)?);
    }
    let tau_pref = TaskVector::from_records(pref_records, Origin::default())?
        .with_origin("w_ar", "w_ar_aligned");
    let mut w_ar_aligned = task_vector::apply(&w_ar, &tau_pref, 1.0)?;
    w_ar_aligned.metadata.clear();

    let files: BTreeMap<String, String> = [
        ("w_ar", "w_ar.safetensors"),
        ("w_ar_aligned", "w_ar_aligned.safetensors"),
        ("w_dllm", "w_dllm.safetensors"),
        ("tau_pref", "tau_pref.safetensors"),
        ("config", "config.json"),
        ("config_ar", "config_ar.json"),
        ("pairs", "pairs.jsonl"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect();
    let manifest = Manifest {
        seed,
        seeds: [
            ("init".to_string(), seed),
            ("tau_diff".to_string(), diff_seed),
            ("tau_pref".to_string(), pref_seed),
            ("pairs".to_string(), pairs_seed),
        ]
        .into_iter()
        .collect(),
        options: opts.clone(),
        config: config.clone(),
        preferred_tokens: preferred,
        pref_head_norm,
        pref_noise_norm,
        diff_norm,
        files,
    };
    Ok(SyntheticFixture {
        config,
        w_ar,
        w_ar_aligned,
        w_dllm,
        tau_pref,
        tau_diff,
        batch,
        manifest,
    })
}

impl SyntheticFixture {
    /// Writes every artefact listed in the manifest plus `manifest.json`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let stamp = |ckpt: &Checkpoint| {
            let mut c = ckpt.clone();
            c.stamp("gen-synthetic");
            c
        };
        save_checkpoint(&stamp(&self.w_ar), dir.join("w_ar.safetensors"))?;
        save_checkpoint(
            &stamp(&self.w_ar_aligned),
            dir.join("w_ar_aligned.safetensors"),
        )?;
        save_checkpoint(&stamp(&self.w_dllm), dir.join("w_dllm.safetensors"))?;
        save_checkpoint(
            &stamp(&self.tau_pref.to_checkpoint()),
            dir.join("tau_pref.safetensors"),
        )?;
        self.config.save_json(dir.join("config.json"))?;
        self.config
            .with_mode(Mode::Ar)
            .save_json(dir.join("config_ar.json"))?;
        write_atomic(&dir.join("pairs.jsonl"), self.batch.to_jsonl().as_bytes())?;
        let manifest = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| Error::Format(e.to_string()))?;
        write_atomic(
            &dir.join("manifest.json"),
            format!("{manifest}\n").as_bytes(),
        )
    }
}
