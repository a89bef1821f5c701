//! Implicit diffusion rewards and the scale search built on them.
//!
//! The reward of a merged policy on `(x, y)` is the expected difference of
//! masked-reconstruction log-probabilities against a reference model, with
//! both models scored on identical corruptions of `y`:
//!
//! ```text
//! r(x, y) = E_t[ log π(y | y_t, x) − log π_ref(y | y_t, x) ]
//! ```
//!
//! Batch reward accuracy is the fraction of pairs with `r(x, y_w) > r(x, y_l)`
//! (ties fail). [`search_gamma`] scans odd scales 1, 3, 5, … until accuracy
//! drops below the best so far (or a cap is hit), checks one step back, and
//! returns the best scale seen.

use std::io::BufRead;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::{ElboConfig, ModelConfig, RunningMean, TinyLm, Token};
use crate::rng;
use crate::task_vector::{self, TaskVector};

/// Validation batch cap.
pub const DEFAULT_BATCH_CAP: usize = 4096;
pub const DEFAULT_GAMMA_CAP: u32 = 15;
/// SimPO defaults: β = 2.5 and target margin 1.5.
pub const SIMPO_BETA: f64 = 2.5;
pub const SIMPO_MARGIN: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: Vec<Token>,
    pub chosen: Vec<Token>,
    pub rejected: Vec<Token>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PreferenceBatch {
    pub id: String,
    pub pairs: Vec<PreferencePair>,
}

#[derive(Deserialize)]
struct PairLine {
    prompt: Option<Vec<Token>>,
    chosen: Option<Vec<Token>>,
    rejected: Option<Vec<Token>>,
    text_prompt: Option<String>,
    text_chosen: Option<String>,
    text_rejected: Option<String>,
}

fn bytes_to_tokens(s: &str) -> Vec<Token> {
    s.bytes().map(Token::from).collect()
}

impl PreferenceBatch {
    /// Parses JSON-Lines. Blank lines are skipped. With `byte_tokens`, the
    /// optional `text_*` fields stand in for missing id arrays (byte value =
    /// token id). Errors carry the 1-based line number.
    pub fn from_reader(
        id: impl Into<String>,
        reader: impl BufRead,
        byte_tokens: bool,
    ) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let lineno = i + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let raw: PairLine = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("line {lineno}: {e}")))?;
            let field =
                |ids: Option<Vec<Token>>, text: Option<String>, name: &str| -> Result<Vec<Token>> {
                    match (ids, text) {
                        (Some(ids), _) => Ok(ids),
                        (None, Some(text)) if byte_tokens => Ok(bytes_to_tokens(&text)),
                        _ => Err(Error::Format(format!(
                            "line {lineno}: missing field {name:?}"
                        ))),
                    }
                };
            let pair = PreferencePair {
                prompt: field(raw.prompt, raw.text_prompt, "prompt")?,
                chosen: field(raw.chosen, raw.text_chosen, "chosen")?,
                rejected: field(raw.rejected, raw.text_rejected, "rejected")?,
            };
            if pair.chosen.is_empty() || pair.rejected.is_empty() {
                return Err(Error::Format(format!(
                    "line {lineno}: chosen and rejected must be non-empty"
                )));
            }
            pairs.push(pair);
        }
        Ok(Self {
            id: id.into(),
            pairs,
        })
    }

    pub fn load_jsonl(path: impl AsRef<Path>, byte_tokens: bool) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path)?;
        Self::from_reader(
            path.display().to_string(),
            std::io::BufReader::new(file),
            byte_tokens,
        )
    }

    pub fn to_jsonl(&self) -> String {
        self.pairs
            .iter()
            .map(|p| serde_json::to_string(p).expect("serialisable") + "\n")
            .collect()
    }

    /// Keeps at most the first `cap` pairs.
    pub fn capped(mut self, cap: usize) -> Self {
        self.pairs.truncate(cap);
        self
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TiePolicy {
    /// `r(y_w) = r(y_l)` counts as a miss.
    #[default]
    CountAsFailure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceChoice {
    /// The unmerged diffusion checkpoint.
    #[default]
    BaseDllm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RewardConfig {
    pub elbo: ElboConfig,
    pub tie_policy: TiePolicy,
    pub reference: ReferenceChoice,
}

/// Corruption config for one side of one pair. Depends only on the master
/// seed and `(pair index, side)`, never on the model being scored.
fn side_config(cfg: &RewardConfig, pair_index: usize, side: u64) -> ElboConfig {
    cfg.elbo
        .with_seed(rng::derive_seed(cfg.elbo.seed, &[pair_index as u64, side]))
}

const CHOSEN: u64 = 0;
const REJECTED: u64 = 1;

/// Masked log-probabilities for every draw, `[timestep][mask]`.
fn draw_log_probs(
    model: &TinyLm,
    prompt: &[Token],
    response: &[Token],
    elbo: &ElboConfig,
) -> Result<Vec<Vec<f64>>> {
    if response.is_empty() {
        return Err(Error::model("response must be non-empty"));
    }
    elbo.draws(response, model.config().mask_id())?
        .iter()
        .map(|(_, masks)| {
            masks
                .iter()
                .map(|ms| model.masked_log_prob(prompt, ms, response))
                .collect()
        })
        .collect()
}

fn reward_from_draws(policy: &[Vec<f64>], reference: &[Vec<f64>]) -> f64 {
    let mut outer = RunningMean::default();
    for (p, r) in policy.iter().zip(reference) {
        let mut inner = RunningMean::default();
        for (a, b) in p.iter().zip(r) {
            inner.push(a - b);
        }
        outer.push(inner.get());
    }
    outer.get()
}

fn check_pair_models(policy: &TinyLm, reference: &TinyLm) -> Result<()> {
    if policy.config() != reference.config() {
        return Err(Error::model(
            "policy and reference must share one model configuration",
        ));
    }
    Ok(())
}

/// Monte-Carlo implicit reward of `response` under `policy` relative to
/// `reference`, both scored on the draws of `elbo`.
pub fn implicit_reward_with(
    policy: &TinyLm,
    reference: &TinyLm,
    prompt: &[Token],
    response: &[Token],
    elbo: &ElboConfig,
) -> Result<f64> {
    check_pair_models(policy, reference)?;
    let p = draw_log_probs(policy, prompt, response, elbo)?;
    let r = draw_log_probs(reference, prompt, response, elbo)?;
    Ok(reward_from_draws(&p, &r))
}

pub fn implicit_reward(
    policy: &TinyLm,
    reference: &TinyLm,
    prompt: &[Token],
    response: &[Token],
    cfg: &RewardConfig,
) -> Result<f64> {
    implicit_reward_with(policy, reference, prompt, response, &cfg.elbo)
}

/// Rewards of one pair: `(r(x, y_w), r(x, y_l))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairRewards {
    pub chosen: f64,
    pub rejected: f64,
}

impl PairRewards {
    pub fn wins(&self) -> bool {
        self.chosen > self.rejected
    }
}

/// Reference-side log-probabilities, reusable across policies.
pub struct ReferenceCache {
    sides: Vec<[Vec<Vec<f64>>; 2]>,
}

impl ReferenceCache {
    pub fn build(reference: &TinyLm, batch: &PreferenceBatch, cfg: &RewardConfig) -> Result<Self> {
        let sides = batch
            .pairs
            .par_iter()
            .enumerate()
            .map(|(i, pair)| {
                Ok([
                    draw_log_probs(
                        reference,
                        &pair.prompt,
                        &pair.chosen,
                        &side_config(cfg, i, CHOSEN),
                    )?,
                    draw_log_probs(
                        reference,
                        &pair.prompt,
                        &pair.rejected,
                        &side_config(cfg, i, REJECTED),
                    )?,
                ])
            })
            .collect::<Result<_>>()?;
        Ok(Self { sides })
    }
}

/// Per-pair rewards against a cached reference.
pub fn pair_rewards_cached(
    policy: &TinyLm,
    cache: &ReferenceCache,
    batch: &PreferenceBatch,
    cfg: &RewardConfig,
) -> Result<Vec<PairRewards>> {
    if cache.sides.len() != batch.len() {
        return Err(Error::invalid(
            "reference cache was built for a different batch",
        ));
    }
    batch
        .pairs
        .par_iter()
        .enumerate()
        .map(|(i, pair)| {
            let w = draw_log_probs(
                policy,
                &pair.prompt,
                &pair.chosen,
                &side_config(cfg, i, CHOSEN),
            )?;
            let l = draw_log_probs(
                policy,
                &pair.prompt,
                &pair.rejected,
                &side_config(cfg, i, REJECTED),
            )?;
            Ok(PairRewards {
                chosen: reward_from_draws(&w, &cache.sides[i][0]),
                rejected: reward_from_draws(&l, &cache.sides[i][1]),
            })
        })
        .collect()
}

pub fn pair_rewards(
    policy: &TinyLm,
    reference: &TinyLm,
    batch: &PreferenceBatch,
    cfg: &RewardConfig,
) -> Result<Vec<PairRewards>> {
    check_pair_models(policy, reference)?;
    let cache = ReferenceCache::build(reference, batch, cfg)?;
    pair_rewards_cached(policy, &cache, batch, cfg)
}

fn accuracy_of(rewards: &[PairRewards]) -> f64 {
    let wins = rewards.iter().filter(|r| r.wins()).count();
    wins as f64 / rewards.len() as f64
}

/// Fraction of pairs whose chosen response earns a strictly higher reward.
pub fn batch_reward_accuracy(
    policy: &TinyLm,
    reference: &TinyLm,
    batch: &PreferenceBatch,
    cfg: &RewardConfig,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("preference batch is empty"));
    }
    Ok(accuracy_of(&pair_rewards(policy, reference, batch, cfg)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    AccuracyDrop,
    GammaCap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchPoint {
    pub gamma: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub visited: Vec<SearchPoint>,
    pub gamma_hat: f64,
    pub stopped_reason: StopReason,
}

impl SearchTrace {
    pub fn accuracy_at(&self, gamma: f64) -> Option<f64> {
        self.visited
            .iter()
            .find(|p| p.gamma == gamma)
            .map(|p| p.accuracy)
    }
}

/// Coarse/fine scale search over an arbitrary accuracy oracle.
///
/// Coarse phase: γ = 1, 3, 5, … while `γ ≤ gamma_cap`, stopping right after
/// the first γ whose accuracy is strictly below the best so far. Fine phase:
/// evaluate one below the last coarse γ. Returns the first-visited argmax.
pub fn search_with<F>(gamma_cap: u32, mut accuracy: F) -> Result<SearchTrace>
where
    F: FnMut(f64) -> Result<f64>,
{
    if gamma_cap < 1 {
        return Err(Error::invalid("gamma_cap must be >= 1"));
    }
    let mut visited = Vec::new();
    let mut best = 0.0;
    let mut gamma: u32 = 1;
    let stopped_reason = loop {
        let acc = accuracy(f64::from(gamma))?;
        visited.push(SearchPoint {
            gamma: f64::from(gamma),
            accuracy: acc,
        });
        if acc < best {
            break StopReason::AccuracyDrop;
        }
        best = acc;
        if gamma + 2 > gamma_cap {
            break StopReason::GammaCap;
        }
        gamma += 2;
    };
    let fine = f64::from(gamma - 1);
    visited.push(SearchPoint {
        gamma: fine,
        accuracy: accuracy(fine)?,
    });
    let best_point = visited.iter().fold(visited[0], |best, p| {
        if p.accuracy > best.accuracy {
            *p
        } else {
            best
        }
    });
    Ok(SearchTrace {
        gamma_hat: best_point.gamma,
        visited,
        stopped_reason,
    })
}

/// Evaluates merged policies `base + γ·τ_pref` against `base` on a batch.
pub struct MergedEvaluator<'a> {
    config: &'a ModelConfig,
    base: &'a Checkpoint,
    tau_pref: &'a TaskVector,
    batch: &'a PreferenceBatch,
    cfg: RewardConfig,
    cache: ReferenceCache,
}

impl<'a> MergedEvaluator<'a> {
    pub fn new(
        config: &'a ModelConfig,
        base: &'a Checkpoint,
        tau_pref: &'a TaskVector,
        batch: &'a PreferenceBatch,
        cfg: RewardConfig,
    ) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::invalid("preference batch is empty"));
        }
        crate::checkpoint::validate_compatible(base, &tau_pref.to_checkpoint()).into_result()?;
        let reference = TinyLm::new(config.clone(), base)?;
        let cache = ReferenceCache::build(&reference, batch, &cfg)?;
        Ok(Self {
            config,
            base,
            tau_pref,
            batch,
            cfg,
            cache,
        })
    }

    pub fn rewards(&self, gamma: f64) -> Result<Vec<PairRewards>> {
        let merged = task_vector::apply(self.base, self.tau_pref, gamma)?;
        let policy = TinyLm::new(self.config.clone(), &merged)?;
        pair_rewards_cached(&policy, &self.cache, self.batch, &self.cfg)
    }

    pub fn accuracy(&self, gamma: f64) -> Result<f64> {
        Ok(accuracy_of(&self.rewards(gamma)?))
    }
}

/// Scale search for `base_dllm + γ·τ_pref`, with the unmerged checkpoint as
/// reference and identical corruption draws at every γ.
pub fn search_gamma(
    config: &ModelConfig,
    base_dllm: &Checkpoint,
    tau_pref: &TaskVector,
    batch: &PreferenceBatch,
    cfg: &RewardConfig,
    gamma_cap: u32,
) -> Result<SearchTrace> {
    let eval = MergedEvaluator::new(config, base_dllm, tau_pref, batch, *cfg)?;
    search_with(gamma_cap, |g| eval.accuracy(g))
}

/// `−log σ(z)`, stable for large `|z|`.
pub fn neg_log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

/// DPO loss value `−log σ(β·[(log π_w − log π_ref,w) − (log π_l − log π_ref,l)])`
/// with exact autoregressive likelihoods.
pub fn dpo_loss_value(
    policy: &TinyLm,
    reference: &TinyLm,
    pair: &PreferencePair,
    beta: f64,
) -> Result<f64> {
    check_pair_models(policy, reference)?;
    let dw = policy.ar_log_likelihood(&pair.prompt, &pair.chosen)?
        - reference.ar_log_likelihood(&pair.prompt, &pair.chosen)?;
    let dl = policy.ar_log_likelihood(&pair.prompt, &pair.rejected)?
        - reference.ar_log_likelihood(&pair.prompt, &pair.rejected)?;
    Ok(neg_log_sigmoid(beta * (dw - dl)))
}

/// ELBO-based DPO loss value, difference form, with ELBOs estimated on draws
/// shared between policy and reference.
pub fn elbo_dpo_loss_value(
    policy: &TinyLm,
    reference: &TinyLm,
    pair: &PreferencePair,
    beta: f64,
    cfg: &ElboConfig,
) -> Result<f64> {
    check_pair_models(policy, reference)?;
    let w_cfg = cfg.with_seed(rng::derive_seed(cfg.seed, &[CHOSEN]));
    let l_cfg = cfg.with_seed(rng::derive_seed(cfg.seed, &[REJECTED]));
    let bw = policy.elbo_estimate(&pair.prompt, &pair.chosen, &w_cfg)?
        - reference.elbo_estimate(&pair.prompt, &pair.chosen, &w_cfg)?;
    let bl = policy.elbo_estimate(&pair.prompt, &pair.rejected, &l_cfg)?
        - reference.elbo_estimate(&pair.prompt, &pair.rejected, &l_cfg)?;
    Ok(neg_log_sigmoid(beta * bw - beta * bl))
}

/// Reference-free SimPO loss value with length-normalised log-likelihoods.
pub fn simpo_loss_value(
    policy: &TinyLm,
    pair: &PreferencePair,
    beta: f64,
    margin: f64,
) -> Result<f64> {
    let rw =
        beta / pair.chosen.len() as f64 * policy.ar_log_likelihood(&pair.prompt, &pair.chosen)?;
    let rl = beta / pair.rejected.len() as f64
        * policy.ar_log_likelihood(&pair.prompt, &pair.rejected)?;
    Ok(neg_log_sigmoid(rw - rl - margin))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scripted(table: &'static [(f64, f64)]) -> impl FnMut(f64) -> Result<f64> {
        move |g| {
            table
                .iter()
                .find(|(x, _)| *x == g)
                .map(|(_, a)| *a)
                .ok_or_else(|| Error::invalid(format!("unscripted gamma {g}")))
        }
    }

    fn gammas(t: &SearchTrace) -> Vec<f64> {
        t.visited.iter().map(|p| p.gamma).collect()
    }

    #[test]
    fn unimodal_trace() {
        let t = search_with(
            15,
            scripted(&[(1.0, 0.60), (3.0, 0.70), (5.0, 0.65), (4.0, 0.72)]),
        )
        .unwrap();
        assert_eq!(gammas(&t), vec![1.0, 3.0, 5.0, 4.0]);
        assert_eq!(t.gamma_hat, 4.0);
        assert_eq!(t.stopped_reason, StopReason::AccuracyDrop);
    }

    #[test]
    fn decreasing_trace() {
        let t = search_with(15, scripted(&[(1.0, 0.9), (3.0, 0.5), (2.0, 0.7)])).unwrap();
        assert_eq!(gammas(&t), vec![1.0, 3.0, 2.0]);
        assert_eq!(t.gamma_hat, 1.0);
    }

    #[test]
    fn cap_trace() {
        let t = search_with(
            7,
            scripted(&[(1.0, 0.1), (3.0, 0.2), (5.0, 0.3), (7.0, 0.4), (6.0, 0.45)]),
        )
        .unwrap();
        assert_eq!(gammas(&t), vec![1.0, 3.0, 5.0, 7.0, 6.0]);
        assert_eq!(t.stopped_reason, StopReason::GammaCap);
        assert_eq!(t.gamma_hat, 6.0);
    }

    #[test]
    fn plateau_continues_and_first_wins() {
        let t = search_with(
            9,
            scripted(&[(1.0, 0.5), (3.0, 0.5), (5.0, 0.5), (7.0, 0.4), (6.0, 0.5)]),
        )
        .unwrap();
        assert_eq!(gammas(&t), vec![1.0, 3.0, 5.0, 7.0, 6.0]);
        assert_eq!(t.gamma_hat, 1.0);
    }

    #[test]
    fn cap_one_checks_zero() {
        let t = search_with(1, scripted(&[(1.0, 0.3), (0.0, 0.0)])).unwrap();
        assert_eq!(gammas(&t), vec![1.0, 0.0]);
        assert_eq!(t.gamma_hat, 1.0);
        assert!(search_with(0, scripted(&[])).is_err());
    }

    #[test]
    fn trace_json_shape() {
        let t = search_with(3, scripted(&[(1.0, 0.5), (3.0, 0.25), (2.0, 0.5)])).unwrap();
        let json = serde_json::to_string(&t).unwrap();
        assert_eq!(
            json,
            r#"{"visited":[{"gamma":1.0,"accuracy":0.5},{"gamma":3.0,"accuracy":0.25},{"gamma":2.0,"accuracy":0.5}],"gamma_hat":1.0,"stopped_reason":"accuracy_drop"}"#
        );
    }

    #[test]
    fn neg_log_sigmoid_values() {
        assert!((neg_log_sigmoid(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((neg_log_sigmoid(-1.5) - (1.0 + 1.5f64.exp()).ln()).abs() < 1e-14);
        assert!(neg_log_sigmoid(800.0) >= 0.0);
        assert!((neg_log_sigmoid(-800.0) - 800.0).abs() < 1e-9);
    }

    #[test]
    fn jsonl_parsing() {
        let text = "{\"prompt\":[1],\"chosen\":[2,3],\"rejected\":[4]}\n\n{\"prompt\":[],\"chosen\":[5],\"rejected\":[6]}\n";
        let b = PreferenceBatch::from_reader("t", text.as_bytes(), false).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b.pairs[0].chosen, vec![2, 3]);
        assert_eq!(
            PreferenceBatch::from_reader("t", b.to_jsonl().as_bytes(), false).unwrap(),
            b
        );

        let bad = "{\"prompt\":[1],\"chosen\":[2],\"rejected\":[4]}\n{oops}\n";
        match PreferenceBatch::from_reader("t", bad.as_bytes(), false) {
            Err(Error::Format(m)) => assert!(m.starts_with("line 2"), "{m}"),
            other => panic!("{other:?}"),
        }
        let empty_side = "{\"prompt\":[1],\"chosen\":[],\"rejected\":[4]}\n";
        assert!(PreferenceBatch::from_reader("t", empty_side.as_bytes(), false).is_err());

        let text = "{\"text_prompt\":\"hi\",\"text_chosen\":\"A\",\"rejected\":[7]}\n";
        assert!(PreferenceBatch::from_reader("t", text.as_bytes(), false).is_err());
        let b = PreferenceBatch::from_reader("t", text.as_bytes(), true).unwrap();
        assert_eq!(b.pairs[0].prompt, vec![104, 105]);
        assert_eq!(b.pairs[0].chosen, vec![65]);
        assert_eq!(b.capped(0).len(), 0);
    }
}
