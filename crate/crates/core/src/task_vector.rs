//! Task vectors and the merges built on them.
//!
//! A task vector is the elementwise difference between two checkpoints with
//! the same skeleton. Merges add scaled task vectors back onto a base:
//!
//! ```text
//! W_new = W_0 + Σ_i c_i · τ_i
//! ```
//!
//! All arithmetic is done per element in `f64` and rounded once to `f32`,
//! so results do not depend on how tensors are scheduled across threads.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::checkpoint::{compare_maps, Checkpoint, TensorRecord};
use crate::error::{Error, Result};
use crate::rng;

const KIND_KEY: &str = "armap.kind";
const ORIGIN_BASE_KEY: &str = "armap.origin.base";
const ORIGIN_TARGET_KEY: &str = "armap.origin.target";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Origin {
    pub base: String,
    pub target: String,
}

impl Default for Origin {
    fn default() -> Self {
        Self {
            base: "base".into(),
            target: "target".into(),
        }
    }
}

/// A checkpoint-shaped delta `target − base`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    tensors: BTreeMap<String, TensorRecord>,
    pub origin: Origin,
}

impl TaskVector {
    pub fn from_records(
        records: impl IntoIterator<Item = TensorRecord>,
        origin: Origin,
    ) -> Result<Self> {
        let ckpt = Checkpoint::from_records(records)?;
        Ok(Self {
            tensors: ckpt.tensor_map().clone(),
            origin,
        })
    }

    /// All-zero task vector over the skeleton of `like`.
    pub fn zeros_like(like: &Checkpoint) -> Self {
        Self {
            tensors: like
                .tensors()
                .map(|t| {
                    (
                        t.name.clone(),
                        TensorRecord::zeros(t.name.clone(), t.shape.clone()),
                    )
                })
                .collect(),
            origin: Origin::default(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.get(name)
    }

    pub fn tensors(&self) -> impl ExactSizeIterator<Item = &TensorRecord> {
        self.tensors.values()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn with_origin(mut self, base: impl Into<String>, target: impl Into<String>) -> Self {
        self.origin = Origin {
            base: base.into(),
            target: target.into(),
        };
        self
    }

    /// Reads a task vector stored as a checkpoint file.
    pub fn from_checkpoint(ckpt: Checkpoint) -> Self {
        let origin = Origin {
            base: ckpt
                .metadata
                .get(ORIGIN_BASE_KEY)
                .cloned()
                .unwrap_or_else(|| "base".into()),
            target: ckpt
                .metadata
                .get(ORIGIN_TARGET_KEY)
                .cloned()
                .unwrap_or_else(|| "target".into()),
        };
        Self {
            tensors: ckpt.tensor_map().clone(),
            origin,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::from_records(self.tensors.values().cloned())
            .expect("task vector names are unique");
        ckpt.metadata.insert(KIND_KEY.into(), "task_vector".into());
        ckpt.metadata
            .insert(ORIGIN_BASE_KEY.into(), self.origin.base.clone());
        ckpt.metadata
            .insert(ORIGIN_TARGET_KEY.into(), self.origin.target.clone());
        ckpt
    }

    /// Elementwise `c · τ`.
    pub fn scaled(&self, c: f64) -> Self {
        self.map_tensors(|t| {
            t.values
                .iter()
                .map(|&v| (c * f64::from(v)) as f32)
                .collect()
        })
    }

    fn map_tensors<F>(&self, f: F) -> Self
    where
        F: Fn(&TensorRecord) -> Vec<f32> + Sync,
    {
        let tensors = par_map(&self.tensors, |t| t.with_values(f(t)));
        Self {
            tensors,
            origin: self.origin.clone(),
        }
    }
}

fn par_map<F>(map: &BTreeMap<String, TensorRecord>, f: F) -> BTreeMap<String, TensorRecord>
where
    F: Fn(&TensorRecord) -> TensorRecord + Sync,
{
    let records: Vec<&TensorRecord> = map.values().collect();
    records
        .into_par_iter()
        .map(|t| {
            let out = f(t);
            (out.name.clone(), out)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

fn check_compat(
    a: &BTreeMap<String, TensorRecord>,
    b: &BTreeMap<String, TensorRecord>,
) -> Result<()> {
    compare_maps(a, b).into_result()
}

/// Per-element sign for each tensor: -1, 0 or +1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignMask {
    pub tensors: BTreeMap<String, Vec<i8>>,
}

/// A base checkpoint plus weighted task vectors.
#[derive(Debug, Clone)]
pub struct MergePlan<'a> {
    pub base: &'a Checkpoint,
    pub terms: Vec<(&'a TaskVector, f64)>,
}

impl<'a> MergePlan<'a> {
    pub fn new(base: &'a Checkpoint) -> Self {
        Self {
            base,
            terms: Vec::new(),
        }
    }

    pub fn term(mut self, tv: &'a TaskVector, coefficient: f64) -> Self {
        self.terms.push((tv, coefficient));
        self
    }
}

/// `τ = target − base`.
pub fn diff(target: &Checkpoint, base: &Checkpoint) -> Result<TaskVector> {
    check_compat(target.tensor_map(), base.tensor_map())?;
    let tensors = par_map(target.tensor_map(), |t| {
        let b = &base.tensor_map()[&t.name];
        t.with_values(t.values.iter().zip(&b.values).map(|(x, y)| x - y).collect())
    });
    Ok(TaskVector {
        tensors,
        origin: Origin::default(),
    })
}

/// `base + γ·τ`.
pub fn apply(base: &Checkpoint, tv: &TaskVector, gamma: f64) -> Result<Checkpoint> {
    if !gamma.is_finite() {
        return Err(Error::invalid(format!("gamma must be finite, got {gamma}")));
    }
    let mut out = linear_merge(&MergePlan::new(base).term(tv, gamma))?;
    out.metadata
        .insert("armap.gamma".into(), format!("{gamma}"));
    Ok(out)
}

/// `W_0 + Σ c_i·τ_i`, terms accumulated in plan order.
pub fn linear_merge(plan: &MergePlan<'_>) -> Result<Checkpoint> {
    for (tv, c) in &plan.terms {
        if !c.is_finite() {
            return Err(Error::invalid(format!(
                "merge coefficient must be finite, got {c}"
            )));
        }
        check_compat(plan.base.tensor_map(), &tv.tensors)?;
    }
    let tensors = par_map(plan.base.tensor_map(), |b| {
        let deltas: Vec<(&[f32], f64)> = plan
            .terms
            .iter()
            .map(|(tv, c)| (tv.tensors[&b.name].values.as_slice(), *c))
            .collect();
        let values = b
            .values
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let acc = deltas
                    .iter()
                    .fold(f64::from(w), |acc, (d, c)| acc + c * f64::from(d[i]));
                acc as f32
            })
            .collect();
        b.with_values(values)
    });
    let mut out = Checkpoint::from_records(tensors.into_values())?;
    out.metadata = plan.base.metadata.clone();
    Ok(out)
}

/// Number of elements kept by a top-`retain` trim of `n` elements.
pub fn retained_count(retain: f64, n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    let x = retain * n as f64;
    // absorb representation noise such as (2/3)·3 = 2.0000000000000004
    let k = if (x - x.round()).abs() < 1e-9 {
        x.round()
    } else {
        x.ceil()
    };
    (k as usize).clamp(1, n)
}

fn check_retain(retain: f64) -> Result<()> {
    if !(retain > 0.0 && retain <= 1.0) {
        return Err(Error::invalid(format!(
            "retain must lie in (0, 1], got {retain}"
        )));
    }
    Ok(())
}

/// Keeps the `ceil(retain·n)` largest-magnitude entries of each tensor and
/// zeroes the rest. At equal magnitude the lower flat index wins.
pub fn ties_trim(tv: &TaskVector, retain: f64) -> Result<TaskVector> {
    check_retain(retain)?;
    Ok(tv.map_tensors(|t| trim_values(&t.values, retain)))
}

fn trim_values(values: &[f32], retain: f64) -> Vec<f32> {
    let k = retained_count(retain, values.len());
    if k == values.len() {
        return values.to_vec();
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[j].abs().total_cmp(&values[i].abs()).then(i.cmp(&j)));
    let mut out = vec![0.0; values.len()];
    for &i in &order[..k] {
        out[i] = values[i];
    }
    out
}

fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

fn check_all_compat(tvs: &[TaskVector]) -> Result<&TaskVector> {
    let first = tvs
        .first()
        .ok_or_else(|| Error::invalid("at least one task vector is required"))?;
    for tv in &tvs[1..] {
        check_compat(&first.tensors, &tv.tensors)?;
    }
    Ok(first)
}

/// Elementwise sign of `Σ_t τ_t`; an exact zero sum elects 0.
pub fn ties_elect_sign(tvs: &[TaskVector]) -> Result<SignMask> {
    let first = check_all_compat(tvs)?;
    let tensors = first
        .tensors
        .keys()
        .map(|name| {
            let cols: Vec<&[f32]> = tvs
                .iter()
                .map(|tv| tv.tensors[name].values.as_slice())
                .collect();
            let n = cols[0].len();
            let signs = (0..n)
                .map(|i| sign(cols.iter().map(|c| f64::from(c[i])).sum()))
                .collect();
            (name.clone(), signs)
        })
        .collect();
    Ok(SignMask { tensors })
}

/// TIES merge: trim each vector, elect a sign per element on the trimmed
/// vectors, average the trimmed values that agree with the elected sign,
/// then scale by `lambda`.
pub fn ties_merge(tvs: &[TaskVector], retain: f64, lambda: f64) -> Result<TaskVector> {
    check_retain(retain)?;
    if !lambda.is_finite() {
        return Err(Error::invalid(format!(
            "lambda must be finite, got {lambda}"
        )));
    }
    check_all_compat(tvs)?;
    let trimmed: Vec<TaskVector> = tvs
        .iter()
        .map(|tv| ties_trim(tv, retain))
        .collect::<Result<_>>()?;
    let signs = ties_elect_sign(&trimmed)?;
    let merged = trimmed[0].map_tensors(|t| {
        let elected = &signs.tensors[&t.name];
        let cols: Vec<&[f32]> = trimmed
            .iter()
            .map(|tv| tv.tensors[&t.name].values.as_slice())
            .collect();
        (0..t.numel())
            .map(|i| {
                let s = elected[i];
                if s == 0 {
                    return 0.0;
                }
                let (sum, count) = cols
                    .iter()
                    .map(|c| f64::from(c[i]))
                    .filter(|&v| sign(v) == s)
                    .fold((0.0, 0usize), |(sum, n), v| (sum + v, n + 1));
                if count == 0 {
                    0.0
                } else {
                    (lambda * (sum / count as f64)) as f32
                }
            })
            .collect()
    });
    Ok(merged.with_origin(tvs[0].origin.base.clone(), "ties"))
}

/// DARE: drop each element with probability `p` and rescale survivors by
/// `1/(1−p)`. The keep decision for element `i` of tensor `name` depends
/// only on `(seed, name, i)`.
pub fn dare(tv: &TaskVector, p: f64, seed: u64) -> Result<TaskVector> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!(
            "drop probability must lie in [0, 1), got {p}"
        )));
    }
    let scale = 1.0 / (1.0 - p);
    Ok(tv.map_tensors(|t| {
        let stream = rng::hash_str(&t.name);
        t.values
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if rng::counter_unit(seed, stream, i as u64) < p {
                    0.0
                } else {
                    (f64::from(v) * scale) as f32
                }
            })
            .collect()
    }))
}
