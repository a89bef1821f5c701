//! A small transformer with two likelihood modes over one weight layout.
//!
//! - AR mode: causal attention, exact `Σ_j log p(y_j | x, y_<j)`.
//! - Diffusion mode: bidirectional attention over `prompt ++ y_t`, where
//!   `y_t` has some response positions replaced by the MASK token; the model
//!   scores `Σ_{j masked} log p(y_j | x, y_t)`.
//!
//! Blocks are pre-norm with learned absolute positions and a GELU MLP.
//! Linear weights are stored `[out, in]`. Tensor names:
//!
//! ```text
//! embed.tok  embed.pos  lm_head  final_ln.{g,b}
//! layers.{i}.attn.{wq,wk,wv,wo}  layers.{i}.mlp.{w1,w2}  layers.{i}.{ln1,ln2}.{g,b}
//! ```
//!
//! The forward pass runs in f64 and log-softmax uses max subtraction.

use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, TensorRecord};
use crate::error::{Error, Result};
use crate::rng;

pub type Token = u32;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
const STREAM_TIMESTEP: u64 = 0x7157;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Ar,
    Diffusion,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Ar => "ar",
            Mode::Diffusion => "diffusion",
        })
    }
}

/// Architecture hyperparameters. The last two vocabulary ids are reserved:
/// `vocab_size − 1` is MASK and `vocab_size − 2` is PAD.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub mode: Mode,
}

impl ModelConfig {
    /// vocab 64, d_model 32, 2 layers, 2 heads, d_ff 128, max_seq 32.
    pub fn tiny(mode: Mode) -> Self {
        Self {
            vocab_size: 64,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            d_ff: 128,
            max_seq: 32,
            mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(Error::model(format!(
                "vocab_size must be >= 4, got {}",
                self.vocab_size
            )));
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::model(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq < 2 {
            return Err(Error::model(format!(
                "max_seq must be >= 2, got {}",
                self.max_seq
            )));
        }
        if self.d_ff == 0 {
            return Err(Error::model("d_ff must be positive"));
        }
        Ok(())
    }

    pub fn mask_id(&self) -> Token {
        (self.vocab_size - 1) as Token
    }

    pub fn pad_id(&self) -> Token {
        (self.vocab_size - 2) as Token
    }

    pub fn with_mode(&self, mode: Mode) -> Self {
        Self {
            mode,
            ..self.clone()
        }
    }

    /// Every tensor name with its shape, in lexicographic order.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (v, d, f) = (self.vocab_size, self.d_model, self.d_ff);
        let mut out = vec![
            ("embed.pos".to_string(), vec![self.max_seq, d]),
            ("embed.tok".to_string(), vec![v, d]),
            ("final_ln.b".to_string(), vec![d]),
            ("final_ln.g".to_string(), vec![d]),
            ("lm_head".to_string(), vec![v, d]),
        ];
        for i in 0..self.n_layers {
            for w in ["wq", "wk", "wv", "wo"] {
                out.push((format!("layers.{i}.attn.{w}"), vec![d, d]));
            }
            for ln in ["ln1", "ln2"] {
                out.push((format!("layers.{i}.{ln}.g"), vec![d]));
                out.push((format!("layers.{i}.{ln}.b"), vec![d]));
            }
            out.push((format!("layers.{i}.mlp.w1"), vec![f, d]));
            out.push((format!("layers.{i}.mlp.w2"), vec![d, f]));
        }
        out.sort();
        out
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        crate::checkpoint::write_atomic(path.as_ref(), format!("{text}\n").as_bytes())
    }
}

/// Deterministic initial weights: N(0, 0.02²) for matrices and embeddings,
/// ones for norm gains, zeros for norm biases. Each tensor draws from its
/// own stream keyed by name.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<Checkpoint> {
    config.validate()?;
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut ckpt = Checkpoint::new();
    for (name, shape) in config.tensor_shapes() {
        let numel: usize = shape.iter().product();
        let values = if name.ends_with(".g") {
            vec![1.0; numel]
        } else if name.ends_with(".b") {
            vec![0.0; numel]
        } else {
            let mut r = ChaCha8Rng::seed_from_u64(rng::derive_seed(seed, &[rng::hash_str(&name)]));
            (0..numel).map(|_| normal.sample(&mut r) as f32).collect()
        };
        ckpt.insert(TensorRecord::new(name, shape, values)?)?;
    }
    Ok(ckpt)
}

/// A response with some positions corrupted to MASK.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSeq {
    pub tokens: Vec<Token>,
    pub mask_flags: Vec<bool>,
    pub t: f64,
}

impl MaskedSeq {
    pub fn masked_count(&self) -> usize {
        self.mask_flags.iter().filter(|&&f| f).count()
    }
}

/// Number of masked positions at timestep `t`: `max(1, round(t·len))`.
pub fn mask_count(t: f64, len: usize) -> usize {
    ((t * len as f64).round() as usize).clamp(1, len.max(1))
}

/// Forward corruption: masks `max(1, round(t·len))` positions chosen
/// uniformly without replacement.
pub fn corrupt(response: &[Token], t: f64, seed: u64, mask_id: Token) -> Result<MaskedSeq> {
    if response.is_empty() {
        return Err(Error::model("cannot corrupt an empty response"));
    }
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::invalid(format!("t must lie in (0, 1], got {t}")));
    }
    let m = mask_count(t, response.len());
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut flags = vec![false; response.len()];
    for i in rand::seq::index::sample(&mut r, response.len(), m) {
        flags[i] = true;
    }
    let tokens = response
        .iter()
        .zip(&flags)
        .map(|(&tok, &f)| if f { mask_id } else { tok })
        .collect();
    Ok(MaskedSeq {
        tokens,
        mask_flags: flags,
        t,
    })
}

/// Monte-Carlo budget for the ELBO: `n_t` timesteps × `n_yt` masks each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElboConfig {
    pub n_t: usize,
    pub n_yt: usize,
    pub antithetic: bool,
    pub seed: u64,
}

impl Default for ElboConfig {
    fn default() -> Self {
        Self {
            n_t: 4,
            n_yt: 1,
            antithetic: true,
            seed: 0,
        }
    }
}

impl ElboConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_t == 0 || self.n_yt == 0 {
            return Err(Error::invalid("n_t and n_yt must be positive"));
        }
        Ok(())
    }

    pub fn budget(&self) -> usize {
        self.n_t * self.n_yt
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..*self }
    }

    /// Timesteps in `(0, 1]`. With `antithetic`, consecutive draws form
    /// pairs `(t, 1 − t)`.
    pub fn timesteps(&self) -> Vec<f64> {
        (0..self.n_t)
            .map(|j| {
                let t = if self.antithetic {
                    let u = rng::counter_unit(self.seed, STREAM_TIMESTEP, (j / 2) as u64);
                    if j % 2 == 0 {
                        1.0 - u
                    } else {
                        u
                    }
                } else {
                    1.0 - rng::counter_unit(self.seed, STREAM_TIMESTEP, j as u64)
                };
                t.clamp(f64::EPSILON, 1.0)
            })
            .collect()
    }

    /// The corruptions used by the estimator, indexed `[timestep][mask]`.
    /// Any two models scored with the same config see identical draws.
    pub fn draws(&self, response: &[Token], mask_id: Token) -> Result<Vec<(f64, Vec<MaskedSeq>)>> {
        self.validate()?;
        self.timesteps()
            .into_iter()
            .enumerate()
            .map(|(j, t)| {
                let masks = (0..self.n_yt)
                    .map(|k| {
                        corrupt(
                            response,
                            t,
                            rng::derive_seed(self.seed, &[j as u64, k as u64]),
                            mask_id,
                        )
                    })
                    .collect::<Result<_>>()?;
                Ok((t, masks))
            })
            .collect()
    }
}

/// Running mean that returns exactly `x` when every sample equals `x`.
#[derive(Debug, Default, Clone, Copy)]
pub(crate) struct RunningMean {
    mean: f64,
    n: usize,
}

impl RunningMean {
    pub(crate) fn push(&mut self, x: f64) {
        self.n += 1;
        self.mean += (x - self.mean) / self.n as f64;
    }

    pub(crate) fn get(&self) -> f64 {
        self.mean
    }
}

struct Block {
    ln1_g: Vec<f64>,
    ln1_b: Vec<f64>,
    wq: Vec<f64>,
    wk: Vec<f64>,
    wv: Vec<f64>,
    wo: Vec<f64>,
    ln2_g: Vec<f64>,
    ln2_b: Vec<f64>,
    w1: Vec<f64>,
    w2: Vec<f64>,
}

/// Weights bound to a configuration, ready for forward passes.
pub struct TinyLm {
    config: ModelConfig,
    tok: Vec<f64>,
    pos: Vec<f64>,
    blocks: Vec<Block>,
    final_g: Vec<f64>,
    final_b: Vec<f64>,
    lm_head: Vec<f64>,
}

impl TinyLm {
    /// Binds `weights` to `config`; every expected tensor must be present
    /// with the expected shape and nothing else may be.
    pub fn new(config: ModelConfig, weights: &Checkpoint) -> Result<Self> {
        config.validate()?;
        let expected = config.tensor_shapes();
        if weights.len() != expected.len() {
            let extra: Vec<String> = weights
                .tensor_names()
                .into_iter()
                .filter(|n| !expected.iter().any(|(e, _)| e == n))
                .collect();
            if !extra.is_empty() {
                return Err(Error::model(format!(
                    "unexpected tensors for this config: {extra:?}"
                )));
            }
        }
        for (name, shape) in &expected {
            let t = weights
                .get(name)
                .ok_or_else(|| Error::model(format!("missing tensor {name:?}")))?;
            if &t.shape != shape {
                return Err(Error::model(format!(
                    "tensor {name:?} has shape {:?}, config expects {shape:?}",
                    t.shape
                )));
            }
        }
        let get = |name: &str| -> Vec<f64> {
            weights
                .get(name)
                .expect("checked")
                .values
                .iter()
                .map(|&v| f64::from(v))
                .collect()
        };
        let blocks = (0..config.n_layers)
            .map(|i| Block {
                ln1_g: get(&format!("layers.{i}.ln1.g")),
                ln1_b: get(&format!("layers.{i}.ln1.b")),
                wq: get(&format!("layers.{i}.attn.wq")),
                wk: get(&format!("layers.{i}.attn.wk")),
                wv: get(&format!("layers.{i}.attn.wv")),
                wo: get(&format!("layers.{i}.attn.wo")),
                ln2_g: get(&format!("layers.{i}.ln2.g")),
                ln2_b: get(&format!("layers.{i}.ln2.b")),
                w1: get(&format!("layers.{i}.mlp.w1")),
                w2: get(&format!("layers.{i}.mlp.w2")),
            })
            .collect();
        Ok(Self {
            tok: get("embed.tok"),
            pos: get("embed.pos"),
            blocks,
            final_g: get("final_ln.g"),
            final_b: get("final_ln.b"),
            lm_head: get("lm_head"),
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn require_mode(&self, expected: Mode) -> Result<()> {
        if self.config.mode != expected {
            return Err(Error::ModeMismatch {
                expected,
                actual: self.config.mode,
            });
        }
        Ok(())
    }

    fn check_tokens(&self, what: &str, tokens: &[Token]) -> Result<()> {
        let mask = self.config.mask_id();
        for &t in tokens {
            if t as usize >= self.config.vocab_size {
                return Err(Error::model(format!(
                    "{what}: token id {t} out of range for vocab {}",
                    self.config.vocab_size
                )));
            }
            if t == mask {
                return Err(Error::model(format!("{what}: MASK id {t} is reserved")));
            }
        }
        Ok(())
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.config.max_seq {
            return Err(Error::model(format!(
                "sequence length {len} exceeds max_seq {}",
                self.config.max_seq
            )));
        }
        Ok(())
    }

    /// Final-norm hidden states for every position.
    pub fn hidden_states(&self, tokens: &[Token], causal: bool) -> Vec<Vec<f64>> {
        let d = self.config.d_model;
        let h = self.config.n_heads;
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let n = tokens.len();

        let mut x: Vec<Vec<f64>> = tokens
            .iter()
            .enumerate()
            .map(|(p, &t)| {
                let te = &self.tok[t as usize * d..(t as usize + 1) * d];
                let pe = &self.pos[p * d..(p + 1) * d];
                te.iter().zip(pe).map(|(a, b)| a + b).collect()
            })
            .collect();

        for b in &self.blocks {
            let a: Vec<Vec<f64>> = x
                .iter()
                .map(|v| layer_norm(v, &b.ln1_g, &b.ln1_b))
                .collect();
            let q: Vec<Vec<f64>> = a.iter().map(|v| matvec(&b.wq, v, d)).collect();
            let k: Vec<Vec<f64>> = a.iter().map(|v| matvec(&b.wk, v, d)).collect();
            let v: Vec<Vec<f64>> = a.iter().map(|v| matvec(&b.wv, v, d)).collect();
            for p in 0..n {
                let mut ctx = vec![0.0; d];
                let visible = if causal { p + 1 } else { n };
                for head in 0..h {
                    let r = head * dh..(head + 1) * dh;
                    let scores: Vec<f64> = (0..visible)
                        .map(|s| dot(&q[p][r.clone()], &k[s][r.clone()]) * scale)
                        .collect();
                    let weights = softmax(&scores);
                    for (s, w) in weights.iter().enumerate() {
                        for (c, vv) in ctx[r.clone()].iter_mut().zip(&v[s][r.clone()]) {
                            *c += w * vv;
                        }
                    }
                }
                let out = matvec(&b.wo, &ctx, d);
                x[p].iter_mut().zip(&out).for_each(|(xi, o)| *xi += o);
            }
            for xp in x.iter_mut() {
                let a = layer_norm(xp, &b.ln2_g, &b.ln2_b);
                let hidden: Vec<f64> = matvec(&b.w1, &a, d).into_iter().map(gelu).collect();
                let out = matvec(&b.w2, &hidden, self.config.d_ff);
                xp.iter_mut().zip(&out).for_each(|(xi, o)| *xi += o);
            }
        }
        x.iter()
            .map(|v| layer_norm(v, &self.final_g, &self.final_b))
            .collect()
    }

    /// Log-softmax over the vocabulary for every position.
    pub fn position_log_probs(&self, tokens: &[Token], causal: bool) -> Vec<Vec<f64>> {
        self.hidden_states(tokens, causal)
            .iter()
            .map(|h| log_softmax(&matvec(&self.lm_head, h, self.config.d_model)))
            .collect()
    }

    /// `Σ_j log p(response_j | prompt, response_<j)` under causal attention.
    /// An empty prompt is replaced by a single PAD token acting as BOS.
    pub fn ar_log_likelihood(&self, prompt: &[Token], response: &[Token]) -> Result<f64> {
        self.require_mode(Mode::Ar)?;
        self.check_tokens("prompt", prompt)?;
        self.check_tokens("response", response)?;
        if response.is_empty() {
            return Err(Error::model("response must be non-empty"));
        }
        let bos = [self.config.pad_id()];
        let ctx: &[Token] = if prompt.is_empty() { &bos } else { prompt };
        self.check_len(ctx.len() + response.len())?;
        let mut seq = ctx.to_vec();
        seq.extend_from_slice(&response[..response.len() - 1]);
        let lp = self.position_log_probs(&seq, true);
        Ok(response
            .iter()
            .enumerate()
            .map(|(j, &y)| lp[ctx.len() - 1 + j][y as usize])
            .sum())
    }

    /// `Σ_{j masked} log p(original_j | prompt, ms.tokens)` under
    /// bidirectional attention.
    pub fn masked_log_prob(
        &self,
        prompt: &[Token],
        ms: &MaskedSeq,
        original: &[Token],
    ) -> Result<f64> {
        self.require_mode(Mode::Diffusion)?;
        self.check_tokens("prompt", prompt)?;
        self.check_tokens("response", original)?;
        if ms.tokens.len() != original.len() || ms.mask_flags.len() != original.len() {
            return Err(Error::model(format!(
                "masked sequence length {} / {} does not match response length {}",
                ms.tokens.len(),
                ms.mask_flags.len(),
                original.len()
            )));
        }
        if ms.masked_count() == 0 {
            return Err(Error::model("masked sequence has no masked positions"));
        }
        let mask = self.config.mask_id();
        for (j, (&tok, &flag)) in ms.tokens.iter().zip(&ms.mask_flags).enumerate() {
            let ok = if flag {
                tok == mask
            } else {
                tok == original[j]
            };
            if !ok {
                return Err(Error::model(format!(
                    "masked sequence inconsistent at position {j}"
                )));
            }
        }
        self.check_len(prompt.len() + original.len())?;
        let mut seq = prompt.to_vec();
        seq.extend_from_slice(&ms.tokens);
        let lp = self.position_log_probs(&seq, false);
        Ok(ms
            .mask_flags
            .iter()
            .enumerate()
            .filter(|(_, &f)| f)
            .map(|(j, _)| lp[prompt.len() + j][original[j] as usize])
            .sum())
    }

    /// Per-timestep ELBO samples: for each timestep draw, the mean over its
    /// masks of `(len / m) · Σ_{masked} log p`.
    pub fn elbo_samples(
        &self,
        prompt: &[Token],
        response: &[Token],
        cfg: &ElboConfig,
    ) -> Result<Vec<f64>> {
        if response.is_empty() {
            return Err(Error::model("response must be non-empty"));
        }
        let len = response.len() as f64;
        cfg.draws(response, self.config.mask_id())?
            .iter()
            .map(|(_, masks)| {
                let mut mean = RunningMean::default();
                for ms in masks {
                    let lp = self.masked_log_prob(prompt, ms, response)?;
                    mean.push(len / ms.masked_count() as f64 * lp);
                }
                Ok(mean.get())
            })
            .collect()
    }

    /// Doubly Monte-Carlo ELBO estimate, deterministic given `cfg.seed`.
    pub fn elbo_estimate(
        &self,
        prompt: &[Token],
        response: &[Token],
        cfg: &ElboConfig,
    ) -> Result<f64> {
        let mut mean = RunningMean::default();
        for s in self.elbo_samples(prompt, response, cfg)? {
            mean.push(s);
        }
        Ok(mean.get())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `W x` for row-major `W` of shape `[out, cols]`.
fn matvec(w: &[f64], x: &[f64], cols: usize) -> Vec<f64> {
    w.chunks_exact(cols).map(|row| dot(row, x)).collect()
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    x.iter()
        .zip(g.iter().zip(b))
        .map(|(v, (g, b))| (v - mean) * inv * g + b)
        .collect()
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}
