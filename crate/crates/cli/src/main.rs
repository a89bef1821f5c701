use std::path::{Path, PathBuf};
use std::process::ExitCode;

use armap::checkpoint::{load_checkpoint, save_checkpoint};
use armap::model::{init_model, ElboConfig};
use armap::reward::{self, PreferenceBatch, RewardConfig, DEFAULT_BATCH_CAP, DEFAULT_GAMMA_CAP};
use armap::spectral::{self, DEFAULT_TOP_K};
use armap::synthetic::{self, SyntheticOptions};
use armap::task_vector::{self, MergePlan};
use armap::{Checkpoint, Error, Mode, ModelConfig, TaskVector, TinyLm};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

const EXIT_INTERNAL: u8 = 1;
const EXIT_COMPAT: u8 = 2;
const EXIT_INPUT: u8 = 3;

/// Task-vector merging, spectral diagnostics and reward-guided scale search
/// for small transformer checkpoints.
#[derive(Parser)]
#[command(name = "armap", version)]
struct Cli {
    #[command(flatten)]
    shared: Shared,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Shared {
    /// Master seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Emit JSON reports (default).
    #[arg(long, global = true, conflicts_with = "csv")]
    json: bool,
    /// Emit CSV instead of JSON where the report is tabular.
    #[arg(long, global = true)]
    csv: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Summarise the tensors and metadata of a checkpoint.
    Inspect { path: PathBuf },
    /// Write the task vector `target − base`.
    Diff {
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write `base + Σ γ_i·τ_i`.
    Merge {
        #[arg(long)]
        base: PathBuf,
        /// Task vector file; repeat for several terms.
        #[arg(long = "tv", required = true)]
        tvs: Vec<PathBuf>,
        /// One coefficient per task vector, or a single one shared by all.
        #[arg(long = "gamma", default_values_t = [1.0])]
        gammas: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// TIES merge of several task vectors, optionally applied to a base.
    Ties {
        #[arg(long = "tv", required = true)]
        tvs: Vec<PathBuf>,
        /// Fraction of entries kept per tensor, in (0, 1].
        #[arg(long, default_value_t = 0.1)]
        retain: f64,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        /// Apply the merged vector to this checkpoint instead of writing it.
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// DARE drop-and-rescale of a task vector, optionally applied to a base.
    Dare {
        #[arg(long)]
        tv: PathBuf,
        /// Drop probability, in [0, 1).
        #[arg(long, default_value_t = 0.5)]
        p: f64,
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-tensor singular values of every 2-D tensor.
    Svd {
        path: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TOP_K)]
        top_k: usize,
    },
    /// Spectral shadowing report for `τ_diff + γ·τ_pref`.
    Shadow {
        #[arg(long)]
        tau_diff: PathBuf,
        #[arg(long)]
        tau_pref: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
    },
    /// Batch reward accuracy of a policy against a reference.
    RewardAcc {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[command(flatten)]
        data: BatchArgs,
    },
    /// Scale search for `base_dllm + γ·τ_pref`.
    Search {
        #[arg(long)]
        base_dllm: PathBuf,
        #[arg(long)]
        tau_pref: PathBuf,
        #[command(flatten)]
        data: BatchArgs,
        #[arg(long, default_value_t = DEFAULT_GAMMA_CAP)]
        gamma_cap: u32,
        /// Also write the checkpoint merged at the selected γ.
        #[arg(long)]
        save_merged: Option<PathBuf>,
    },
    /// Write a randomly initialised checkpoint.
    InitModel {
        /// Model configuration JSON (default: the tiny configuration).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic end-to-end fixture into a directory.
    GenSynthetic {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 64)]
        vocab_size: usize,
        #[arg(long, default_value_t = 32)]
        d_model: usize,
        #[arg(long, default_value_t = 2)]
        n_layers: usize,
        #[arg(long, default_value_t = 2)]
        n_heads: usize,
        #[arg(long, default_value_t = 128)]
        d_ff: usize,
        #[arg(long, default_value_t = 32)]
        max_seq: usize,
        #[arg(long, default_value_t = 64)]
        n_pairs: usize,
        #[arg(long, default_value_t = 0.05)]
        kappa: f64,
        #[arg(long, default_value_t = 50.0)]
        diff_ratio: f64,
        #[arg(long, default_value_t = 0.2)]
        pref_noise: f64,
        #[arg(long, default_value_t = 8)]
        n_preferred: usize,
    },
}

#[derive(Args)]
struct BatchArgs {
    /// Model configuration JSON.
    #[arg(long)]
    config: PathBuf,
    /// Preference pairs, one JSON object per line.
    #[arg(long)]
    pairs: PathBuf,
    /// Read `text_*` fields as raw bytes.
    #[arg(long)]
    byte_tokens: bool,
    #[arg(long, default_value_t = DEFAULT_BATCH_CAP)]
    batch_cap: usize,
    /// Timesteps per ELBO estimate.
    #[arg(long, default_value_t = 4)]
    n_t: usize,
    /// Masks per timestep.
    #[arg(long, default_value_t = 1)]
    n_yt: usize,
    /// Disable antithetic timestep pairs.
    #[arg(long)]
    no_antithetic: bool,
}

enum Failure {
    Lib(Error),
    Input(String),
    Internal(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Input(_) => EXIT_INPUT,
            Failure::Internal(_) => EXIT_INTERNAL,
            Failure::Lib(e) => match e {
                Error::Incompatible(_) | Error::Shape(_) | Error::ModeMismatch { .. } => {
                    EXIT_COMPAT
                }
                Error::Format(_)
                | Error::Integrity(_)
                | Error::Dtype(_)
                | Error::NonFinite(_)
                | Error::DuplicateTensor(_)
                | Error::InvalidArgument(_)
                | Error::Model(_) => EXIT_INPUT,
                Error::Io(_) => EXIT_INTERNAL,
            },
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Lib(e) => write!(f, "{e}"),
            Failure::Input(m) | Failure::Internal(m) => f.write_str(m),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Input(msg.into())
}

fn finite(name: &str, v: f64) -> CliResult {
    if v.is_finite() {
        Ok(())
    } else {
        Err(usage(format!("--{name} must be finite, got {v}")))
    }
}

fn load_tv(path: &Path) -> CliResult<TaskVector> {
    Ok(TaskVector::from_checkpoint(load_checkpoint(path)?))
}

fn save_stamped(mut ckpt: Checkpoint, path: &Path, command: &str) -> CliResult {
    ckpt.stamp(command);
    save_checkpoint(&ckpt, path)?;
    Ok(())
}

fn print_json<T: Serialize>(value: &T) -> CliResult {
    let s = serde_json::to_string_pretty(value).map_err(|e| Failure::Internal(e.to_string()))?;
    emit(&format!("{s}\n"))
}

/// Writes to stdout; a closed pipe on the reading side is not an error.
fn emit(text: &str) -> CliResult {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => {
            Err(Failure::Internal(e.to_string()))
        }
        _ => Ok(()),
    }
}

#[derive(Serialize)]
struct TensorSummary {
    name: String,
    shape: Vec<usize>,
    numel: usize,
    finite: bool,
    max_abs: f64,
    l2_norm: f64,
}

#[derive(Serialize)]
struct InspectReport {
    path: String,
    n_tensors: usize,
    num_params: usize,
    metadata: std::collections::BTreeMap<String, String>,
    tensors: Vec<TensorSummary>,
}

fn run_inspect(path: &Path, csv: bool) -> CliResult {
    let ckpt = armap::checkpoint::load_checkpoint_with(
        path,
        armap::checkpoint::LoadOptions {
            allow_non_finite: true,
        },
    )?;
    let tensors: Vec<TensorSummary> = ckpt
        .tensors()
        .map(|t| TensorSummary {
            name: t.name.clone(),
            shape: t.shape.clone(),
            numel: t.numel(),
            finite: t.is_finite(),
            max_abs: t
                .values
                .iter()
                .fold(0.0f64, |m, &v| m.max(f64::from(v).abs())),
            l2_norm: t
                .values
                .iter()
                .map(|&v| f64::from(v).powi(2))
                .sum::<f64>()
                .sqrt(),
        })
        .collect();
    if csv {
        let mut out = String::from("name,shape,numel,finite,max_abs,l2_norm\n");
        for t in &tensors {
            let shape: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
            out.push_str(&format!(
                "{},{},{},{},{:e},{:e}\n",
                t.name,
                shape.join("x"),
                t.numel,
                t.finite,
                t.max_abs,
                t.l2_norm
            ));
        }
        return emit(&out);
    }
    print_json(&InspectReport {
        path: path.display().to_string(),
        n_tensors: ckpt.len(),
        num_params: ckpt.num_params(),
        metadata: ckpt.metadata.clone(),
        tensors,
    })
}

fn run_diff(target: &Path, base: &Path, out: &Path) -> CliResult {
    let t = load_checkpoint(target)?;
    let b = load_checkpoint(base)?;
    let tv = task_vector::diff(&t, &b)?
        .with_origin(base.display().to_string(), target.display().to_string());
    save_stamped(tv.to_checkpoint(), out, "diff")
}

fn run_merge(base: &Path, tvs: &[PathBuf], gammas: &[f64], out: &Path) -> CliResult {
    for &g in gammas {
        finite("gamma", g)?;
    }
    if gammas.len() != 1 && gammas.len() != tvs.len() {
        return Err(usage(format!(
            "got {} --gamma values for {} task vectors; pass one or one per --tv",
            gammas.len(),
            tvs.len()
        )));
    }
    let b = load_checkpoint(base)?;
    let loaded: Vec<TaskVector> = tvs.iter().map(|p| load_tv(p)).collect::<CliResult<_>>()?;
    let merged = if loaded.len() == 1 {
        task_vector::apply(&b, &loaded[0], gammas[0])?
    } else {
        let plan = loaded
            .iter()
            .enumerate()
            .fold(MergePlan::new(&b), |plan, (i, tv)| {
                plan.term(
                    tv,
                    if gammas.len() == 1 {
                        gammas[0]
                    } else {
                        gammas[i]
                    },
                )
            });
        task_vector::linear_merge(&plan)?
    };
    save_stamped(merged, out, "merge")
}

fn write_tv_or_applied(
    tv: TaskVector,
    base: Option<&Path>,
    gamma: f64,
    out: &Path,
    command: &str,
    params: &[(&str, String)],
) -> CliResult {
    let mut ckpt = match base {
        Some(b) => task_vector::apply(&load_checkpoint(b)?, &tv, gamma)?,
        None => tv.to_checkpoint(),
    };
    for (k, v) in params {
        ckpt.metadata
            .insert(format!("armap.{command}.{k}"), v.clone());
    }
    save_stamped(ckpt, out, command)
}

fn run_ties(
    tvs: &[PathBuf],
    retain: f64,
    lambda: f64,
    base: Option<&Path>,
    gamma: f64,
    out: &Path,
) -> CliResult {
    if !(retain > 0.0 && retain <= 1.0) {
        return Err(usage(format!("--retain must lie in (0, 1], got {retain}")));
    }
    finite("lambda", lambda)?;
    finite("gamma", gamma)?;
    let loaded: Vec<TaskVector> = tvs.iter().map(|p| load_tv(p)).collect::<CliResult<_>>()?;
    let merged = task_vector::ties_merge(&loaded, retain, lambda)?;
    let params = [
        ("trim", "per_tensor".to_string()),
        ("retain", retain.to_string()),
        ("lambda", lambda.to_string()),
    ];
    write_tv_or_applied(merged, base, gamma, out, "ties", &params)
}

fn run_dare(
    tv: &Path,
    p: f64,
    seed: u64,
    base: Option<&Path>,
    gamma: f64,
    out: &Path,
) -> CliResult {
    if !(0.0..1.0).contains(&p) {
        return Err(usage(format!("--p must lie in [0, 1), got {p}")));
    }
    finite("gamma", gamma)?;
    let dropped = task_vector::dare(&load_tv(tv)?, p, seed)?;
    let params = [("p", p.to_string()), ("seed", seed.to_string())];
    write_tv_or_applied(dropped, base, gamma, out, "dare", &params)
}

fn run_svd(path: &Path, top_k: usize, csv: bool) -> CliResult {
    if top_k == 0 {
        return Err(usage("--top-k must be at least 1"));
    }
    let report = spectral::layer_report(&load_tv(path)?, top_k)?;
    if csv {
        emit(&report.to_csv())
    } else {
        print_json(&report)
    }
}

fn run_shadow(tau_diff: &Path, tau_pref: &Path, gamma: f64, csv: bool) -> CliResult {
    if !(gamma.is_finite() && gamma >= 0.0) {
        return Err(usage(format!(
            "--gamma must be finite and >= 0, got {gamma}"
        )));
    }
    let report = spectral::shadowing_report(&load_tv(tau_diff)?, &load_tv(tau_pref)?, gamma)?;
    if csv {
        emit(&report.to_csv())
    } else {
        print_json(&report)
    }
}

struct Loaded {
    config: ModelConfig,
    batch: PreferenceBatch,
    reward: RewardConfig,
}

fn load_batch(args: &BatchArgs, seed: u64) -> CliResult<Loaded> {
    if args.batch_cap == 0 {
        return Err(usage("--batch-cap must be at least 1"));
    }
    let elbo = ElboConfig {
        n_t: args.n_t,
        n_yt: args.n_yt,
        antithetic: !args.no_antithetic,
        seed,
    };
    elbo.validate()?;
    let config = ModelConfig::load_json(&args.config)?;
    if config.mode != Mode::Diffusion {
        return Err(Error::ModeMismatch {
            expected: Mode::Diffusion,
            actual: config.mode,
        }
        .into());
    }
    let batch = PreferenceBatch::load_jsonl(&args.pairs, args.byte_tokens)?.capped(args.batch_cap);
    if batch.is_empty() {
        return Err(usage(format!(
            "{}: preference batch is empty",
            args.pairs.display()
        )));
    }
    Ok(Loaded {
        config,
        batch,
        reward: RewardConfig {
            elbo,
            ..Default::default()
        },
    })
}

#[derive(Serialize)]
struct AccuracyReport<'a> {
    batch: &'a str,
    n_pairs: usize,
    accuracy: f64,
    rewards: Vec<reward::PairRewards>,
}

fn run_reward_acc(
    policy: &Path,
    reference: &Path,
    args: &BatchArgs,
    seed: u64,
    csv: bool,
) -> CliResult {
    let l = load_batch(args, seed)?;
    let p = TinyLm::new(l.config.clone(), &load_checkpoint(policy)?)?;
    let r = TinyLm::new(l.config.clone(), &load_checkpoint(reference)?)?;
    let rewards = reward::pair_rewards(&p, &r, &l.batch, &l.reward)?;
    let wins = rewards.iter().filter(|x| x.wins()).count();
    let accuracy = wins as f64 / rewards.len() as f64;
    if csv {
        let mut out = String::from("pair,chosen,rejected,win\n");
        for (i, x) in rewards.iter().enumerate() {
            out.push_str(&format!(
                "{i},{:e},{:e},{}\n",
                x.chosen,
                x.rejected,
                x.wins()
            ));
        }
        return emit(&out);
    }
    print_json(&AccuracyReport {
        batch: &l.batch.id,
        n_pairs: l.batch.len(),
        accuracy,
        rewards,
    })
}

fn run_search(
    base_dllm: &Path,
    tau_pref: &Path,
    args: &BatchArgs,
    gamma_cap: u32,
    save_merged: Option<&Path>,
    seed: u64,
    csv: bool,
) -> CliResult {
    if gamma_cap == 0 {
        return Err(usage("--gamma-cap must be at least 1"));
    }
    let l = load_batch(args, seed)?;
    let base = load_checkpoint(base_dllm)?;
    let tau = load_tv(tau_pref)?;
    let trace = reward::search_gamma(&l.config, &base, &tau, &l.batch, &l.reward, gamma_cap)?;
    if let Some(path) = save_merged {
        save_stamped(
            task_vector::apply(&base, &tau, trace.gamma_hat)?,
            path,
            "search",
        )?;
    }
    if csv {
        let mut out = String::from("gamma,accuracy\n");
        for p in &trace.visited {
            out.push_str(&format!("{},{}\n", p.gamma, p.accuracy));
        }
        return emit(&out);
    }
    print_json(&trace)
}

fn run_init_model(config: Option<&Path>, seed: u64, out: &Path) -> CliResult {
    let cfg = match config {
        Some(p) => ModelConfig::load_json(p)?,
        None => ModelConfig::tiny(Mode::Ar),
    };
    save_stamped(init_model(&cfg, seed)?, out, "init-model")
}

fn run(cli: Cli) -> CliResult {
    let shared = &cli.shared;
    if let Some(n) = shared.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Internal(e.to_string()))?;
    }
    let csv = shared.csv;
    let seed = shared.seed;
    match &cli.command {
        Command::Inspect { path } => run_inspect(path, csv),
        Command::Diff { target, base, out } => run_diff(target, base, out),
        Command::Merge {
            base,
            tvs,
            gammas,
            out,
        } => run_merge(base, tvs, gammas, out),
        Command::Ties {
            tvs,
            retain,
            lambda,
            base,
            gamma,
            out,
        } => run_ties(tvs, *retain, *lambda, base.as_deref(), *gamma, out),
        Command::Dare {
            tv,
            p,
            base,
            gamma,
            out,
        } => run_dare(tv, *p, seed, base.as_deref(), *gamma, out),
        Command::Svd { path, top_k } => run_svd(path, *top_k, csv),
        Command::Shadow {
            tau_diff,
            tau_pref,
            gamma,
        } => run_shadow(tau_diff, tau_pref, *gamma, csv),
        Command::RewardAcc {
            policy,
            reference,
            data,
        } => run_reward_acc(policy, reference, data, seed, csv),
        Command::Search {
            base_dllm,
            tau_pref,
            data,
            gamma_cap,
            save_merged,
        } => run_search(
            base_dllm,
            tau_pref,
            data,
            *gamma_cap,
            save_merged.as_deref(),
            seed,
            csv,
        ),
        Command::InitModel { config, out } => run_init_model(config.as_deref(), seed, out),
        Command::GenSynthetic {
            out_dir,
            vocab_size,
            d_model,
            n_layers,
            n_heads,
            d_ff,
            max_seq,
            n_pairs,
            kappa,
            diff_ratio,
            pref_noise,
            n_preferred,
        } => {
            let cfg = ModelConfig {
                vocab_size: *vocab_size,
                d_model: *d_model,
                n_layers: *n_layers,
                n_heads: *n_heads,
                d_ff: *d_ff,
                max_seq: *max_seq,
                mode: Mode::Diffusion,
            };
            let opts = SyntheticOptions {
                n_pairs: *n_pairs,
                kappa: *kappa,
                diff_ratio: *diff_ratio,
                pref_noise: *pref_noise,
                n_preferred: *n_preferred,
            };
            let fixture = synthetic::generate(&cfg, seed, &opts)?;
            fixture.write_to(out_dir)?;
            print_json(&fixture.manifest)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
