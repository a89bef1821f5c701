//! Spectral measurements of task vectors.
//!
//! Each 2-D tensor is treated as a linear operator. Singular spectra come
//! from a dense Golub–Kahan SVD for matrices up to [`DENSE_LIMIT`] on a side
//! and from deflated power iteration above that. The shadowing report checks
//! the chain
//!
//! ```text
//! ‖τ_diff + γ·τ_pref‖₂ ≤ ‖τ_diff‖₂ + γ·‖τ_pref‖₂ ≤ (1 + γ·ε)·‖τ_diff‖₂
//! ```
//!
//! per tensor, with `ε = ‖τ_pref‖₂ / ‖τ_diff‖₂`.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint::{compare_maps, TensorRecord};
use crate::error::{Error, Result};
use crate::rng;
use crate::task_vector::TaskVector;

/// Largest side length handled by the dense SVD.
pub const DENSE_LIMIT: usize = 2048;
pub const DEFAULT_TOP_K: usize = 64;
pub const POWER_TOL: f64 = 1e-6;
pub const POWER_MAX_ITERS: usize = 1000;

/// Relative slack for the bound comparison; SVD results in f64 carry a few
/// ulps of error relative to σ₁.
const BOUND_REL_SLACK: f64 = 1e-10;

/// Row-major matrix in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_tensor(t: &TensorRecord) -> Result<Self> {
        let (rows, cols) = t.matrix_dims().ok_or_else(|| {
            Error::Shape(format!("tensor {:?} is not 2-D: {:?}", t.name, t.shape))
        })?;
        Self::new(rows, cols, t.values.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn transpose(&self) -> Self {
        let mut data = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    /// `y = A x`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        self.data
            .chunks_exact(self.cols.max(1))
            .take(self.rows)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `y = Aᵀ x`.
    pub fn tmul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.cols];
        for (r, &xr) in x.iter().enumerate().take(self.rows) {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            for (yc, a) in y.iter_mut().zip(row) {
                *yc += a * xr;
            }
        }
        y
    }

    fn check(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Shape(format!(
                "matrix must have both dimensions >= 1, got {}x{}",
                self.rows, self.cols
            )));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix".into()));
        }
        Ok(())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Descending singular values; `top_k = None` returns all `min(rows, cols)`.
pub fn svd_spectrum(m: &Matrix, top_k: Option<usize>) -> Result<Vec<f64>> {
    svd_spectrum_with_limit(m, top_k, DENSE_LIMIT)
}

pub(crate) fn svd_spectrum_with_limit(
    m: &Matrix,
    top_k: Option<usize>,
    dense_limit: usize,
) -> Result<Vec<f64>> {
    m.check()?;
    let r = m.rows.min(m.cols);
    let k = top_k.map_or(r, |k| k.min(r));
    if m.rows.max(m.cols) <= dense_limit {
        let dense = DMatrix::from_row_slice(m.rows, m.cols, &m.data);
        let mut sv: Vec<f64> = dense.singular_values().iter().map(|s| s.max(0.0)).collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        sv.truncate(k);
        Ok(sv)
    } else {
        Ok(deflated_power_spectrum(m, k))
    }
}

/// Top-`k` singular values by power iteration on `AᵀA`, re-orthogonalising
/// against the right singular vectors already found.
fn deflated_power_spectrum(m: &Matrix, k: usize) -> Vec<f64> {
    let mut found: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut values = Vec::with_capacity(k);
    for i in 0..k {
        let (sigma, v) = power_iterate(m, &found, i as u64);
        values.push(sigma);
        found.push(v);
    }
    values.sort_by(|a, b| b.total_cmp(a));
    values
}

fn project_out(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
    }
}

/// Returns `(σ, v)` for the dominant right singular pair of `A` restricted
/// to the complement of `basis`.
fn power_iterate(m: &Matrix, basis: &[Vec<f64>], stream: u64) -> (f64, Vec<f64>) {
    let mut v: Vec<f64> = (0..m.cols)
        .map(|i| rng::counter_unit(0x5EED, stream, i as u64) - 0.5)
        .collect();
    project_out(&mut v, basis);
    if normalize(&mut v) == 0.0 {
        return (0.0, v);
    }
    for _ in 0..POWER_MAX_ITERS {
        let mut w = m.tmul_vec(&m.mul_vec(&v));
        project_out(&mut w, basis);
        let lambda: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
        if lambda <= 0.0 {
            return (0.0, v);
        }
        // ‖AᵀA v − λ v‖ / λ bounds the relative eigenvalue error
        let resid = w
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - lambda * b).powi(2))
            .sum::<f64>()
            .sqrt();
        normalize(&mut w);
        v = w;
        if resid <= POWER_TOL * lambda {
            break;
        }
    }
    (norm(&m.mul_vec(&v)), v)
}

/// Largest singular value by power iteration (tolerance [`POWER_TOL`], at
/// most [`POWER_MAX_ITERS`] steps).
pub fn spectral_norm(m: &Matrix) -> Result<f64> {
    m.check()?;
    // iterate on the smaller Gram matrix
    let op = if m.rows < m.cols {
        m.transpose()
    } else {
        m.clone()
    };
    Ok(power_iterate(&op, &[], 0).0)
}

/// Dense σ₁ when affordable, power iteration otherwise.
fn top_singular_value(m: &Matrix) -> Result<f64> {
    Ok(svd_spectrum(m, Some(1))?.first().copied().unwrap_or(0.0))
}

/// Layer index encoded as `layers.{i}.…`; anything else maps to -1.
pub fn layer_index(name: &str) -> i64 {
    name.strip_prefix("layers.")
        .and_then(|rest| rest.split('.').next())
        .and_then(|i| i.parse::<i64>().ok())
        .unwrap_or(-1)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectrumEntry {
    pub name: String,
    pub layer: i64,
    pub singular_values: Vec<f64>,
    pub rank_computed: usize,
}

impl SpectrumEntry {
    pub fn sigma_max(&self) -> f64 {
        self.singular_values.first().copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerAggregate {
    pub layer: i64,
    pub max_sigma1: f64,
    pub min_sigma1: f64,
    pub mean_sigma1: f64,
    pub tensors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralReport {
    pub top_k: usize,
    pub entries: Vec<SpectrumEntry>,
    pub layer_aggregates: Vec<LayerAggregate>,
    pub skipped: Vec<String>,
}

impl SpectralReport {
    pub fn layer(&self, layer: i64) -> Option<&LayerAggregate> {
        self.layer_aggregates.iter().find(|a| a.layer == layer)
    }

    /// One row per tensor: name, layer, rank, then the singular values.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,layer,rank_computed,sigma_1,singular_values\n");
        for e in &self.entries {
            let sv: Vec<String> = e.singular_values.iter().map(|s| format!("{s:e}")).collect();
            out.push_str(&format!(
                "{},{},{},{:e},{}\n",
                e.name,
                e.layer,
                e.rank_computed,
                e.sigma_max(),
                sv.join(";")
            ));
        }
        out
    }
}

fn aggregate_layers<'a>(items: impl Iterator<Item = (i64, f64)> + 'a) -> Vec<LayerAggregate> {
    let mut by_layer: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
    for (layer, s) in items {
        by_layer.entry(layer).or_default().push(s);
    }
    by_layer
        .into_iter()
        .map(|(layer, s)| LayerAggregate {
            layer,
            max_sigma1: s.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            min_sigma1: s.iter().copied().fold(f64::INFINITY, f64::min),
            mean_sigma1: s.iter().sum::<f64>() / s.len() as f64,
            tensors: s.len(),
        })
        .collect()
}

/// Singular spectra of every 2-D tensor, grouped by layer.
pub fn layer_report(tv: &TaskVector, top_k: usize) -> Result<SpectralReport> {
    let (matrices, skipped): (Vec<&TensorRecord>, Vec<&TensorRecord>) =
        tv.tensors().partition(|t| t.matrix_dims().is_some());
    let entries: Vec<SpectrumEntry> = matrices
        .par_iter()
        .map(|t| {
            let m = Matrix::from_tensor(t)?;
            let singular_values = svd_spectrum(&m, Some(top_k))?;
            Ok(SpectrumEntry {
                name: t.name.clone(),
                layer: layer_index(&t.name),
                rank_computed: singular_values.len(),
                singular_values,
            })
        })
        .collect::<Result<_>>()?;
    let layer_aggregates = aggregate_layers(entries.iter().map(|e| (e.layer, e.sigma_max())));
    Ok(SpectralReport {
        top_k,
        entries,
        layer_aggregates,
        skipped: skipped.into_iter().map(|t| t.name.clone()).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShadowingEntry {
    pub name: String,
    pub layer: i64,
    pub norm_diff: f64,
    pub norm_pref: f64,
    /// `norm_pref / norm_diff`; +∞ (serialised as null) when `norm_diff = 0`.
    pub epsilon: f64,
    pub combined_norm: f64,
    /// `norm_diff + γ·norm_pref`.
    pub triangle_bound: f64,
    /// `(1 + γ·ε)·norm_diff`.
    pub bound: f64,
    /// `None` when the check is skipped because `norm_diff = 0`.
    pub bound_holds: Option<bool>,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerGap {
    pub layer: i64,
    pub max_norm_diff: f64,
    pub max_norm_pref: f64,
    /// `max_norm_diff / max_norm_pref`; +∞ (null) when the preference side is zero.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShadowingReport {
    pub gamma: f64,
    pub entries: Vec<ShadowingEntry>,
    /// Max ε over non-degenerate tensors.
    pub global_epsilon: f64,
    pub layers: Vec<LayerGap>,
    pub all_bounds_hold: bool,
    pub degenerate: Vec<String>,
}

impl ShadowingReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "name,layer,norm_diff,norm_pref,epsilon,combined_norm,triangle_bound,bound,bound_holds\n",
        );
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{:e},{:e},{:e},{:e},{:e},{:e},{}\n",
                e.name,
                e.layer,
                e.norm_diff,
                e.norm_pref,
                e.epsilon,
                e.combined_norm,
                e.triangle_bound,
                e.bound,
                e.bound_holds
                    .map_or("skipped".to_string(), |b| b.to_string())
            ));
        }
        out
    }
}

fn within(lhs: f64, rhs: f64) -> bool {
    lhs <= rhs + BOUND_REL_SLACK * rhs.abs().max(lhs.abs())
}

/// Per-tensor shadowing check for `τ_diff + γ·τ_pref` over 2-D tensors.
pub fn shadowing_report(
    tau_diff: &TaskVector,
    tau_pref: &TaskVector,
    gamma: f64,
) -> Result<ShadowingReport> {
    if !(gamma.is_finite() && gamma >= 0.0) {
        return Err(Error::invalid(format!(
            "gamma must be finite and >= 0, got {gamma}"
        )));
    }
    let dmap: BTreeMap<String, TensorRecord> = tau_diff
        .tensors()
        .map(|t| (t.name.clone(), t.clone()))
        .collect();
    let pmap: BTreeMap<String, TensorRecord> = tau_pref
        .tensors()
        .map(|t| (t.name.clone(), t.clone()))
        .collect();
    compare_maps(&dmap, &pmap).into_result()?;

    let matrices: Vec<&TensorRecord> = tau_diff
        .tensors()
        .filter(|t| t.matrix_dims().is_some())
        .collect();
    let entries: Vec<ShadowingEntry> = matrices
        .par_iter()
        .map(|d| {
            let p = &pmap[&d.name];
            let md = Matrix::from_tensor(d)?;
            let mp = Matrix::from_tensor(p)?;
            let combined = Matrix {
                rows: md.rows,
                cols: md.cols,
                data: md
                    .data
                    .iter()
                    .zip(&mp.data)
                    .map(|(a, b)| a + gamma * b)
                    .collect(),
            };
            let norm_diff = top_singular_value(&md)?;
            let norm_pref = top_singular_value(&mp)?;
            let combined_norm = top_singular_value(&combined)?;
            let triangle_bound = norm_diff + gamma * norm_pref;
            let degenerate = norm_diff == 0.0;
            let (epsilon, bound, bound_holds) = if degenerate {
                (f64::INFINITY, f64::INFINITY, None)
            } else {
                let eps = norm_pref / norm_diff;
                let bound = (1.0 + gamma * eps) * norm_diff;
                let holds = within(combined_norm, triangle_bound) && within(triangle_bound, bound);
                (eps, bound, Some(holds))
            };
            Ok(ShadowingEntry {
                name: d.name.clone(),
                layer: layer_index(&d.name),
                norm_diff,
                norm_pref,
                epsilon,
                combined_norm,
                triangle_bound,
                bound,
                bound_holds,
                degenerate,
            })
        })
        .collect::<Result<_>>()?;

    let global_epsilon = entries
        .iter()
        .filter(|e| !e.degenerate)
        .map(|e| e.epsilon)
        .fold(0.0, f64::max);
    let mut by_layer: BTreeMap<i64, (f64, f64)> = BTreeMap::new();
    for e in &entries {
        let slot = by_layer.entry(e.layer).or_insert((0.0, 0.0));
        slot.0 = slot.0.max(e.norm_diff);
        slot.1 = slot.1.max(e.norm_pref);
    }
    let layers = by_layer
        .into_iter()
        .map(|(layer, (d, p))| LayerGap {
            layer,
            max_norm_diff: d,
            max_norm_pref: p,
            ratio: if p == 0.0 { f64::INFINITY } else { d / p },
        })
        .collect();
    Ok(ShadowingReport {
        gamma,
        all_bounds_hold: entries.iter().all(|e| e.bound_holds != Some(false)),
        degenerate: entries
            .iter()
            .filter(|e| e.degenerate)
            .map(|e| e.name.clone())
            .collect(),
        entries,
        global_epsilon,
        layers,
    })
}
