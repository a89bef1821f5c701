//! Independent reference implementations used by the integration and
//! acceptance tests. Nothing here calls into the library's numerics.

#![allow(dead_code, clippy::needless_range_loop)]

use armap::{Checkpoint, ModelConfig, TensorRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Singular values by one-sided Jacobi rotations, descending.
pub fn jacobi_singular_values(rows: usize, cols: usize, data: &[f64]) -> Vec<f64> {
    // work on the orientation with more rows than columns
    let (m, n, mut a) = if rows >= cols {
        (rows, cols, data.to_vec())
    } else {
        let mut t = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = data[i * cols + j];
            }
        }
        (cols, rows, t)
    };
    let col = |a: &[f64], j: usize| -> Vec<f64> { (0..m).map(|i| a[i * n + j]).collect() };
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                let (cp, cq) = (col(&a, p), col(&a, q));
                let alpha: f64 = cp.iter().map(|x| x * x).sum();
                let beta: f64 = cq.iter().map(|x| x * x).sum();
                let gamma: f64 = cp.iter().zip(&cq).map(|(x, y)| x * y).sum();
                if gamma == 0.0 {
                    continue;
                }
                off = off.max(gamma.abs() / (alpha * beta).sqrt());
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let x = a[i * n + p];
                    let y = a[i * n + q];
                    a[i * n + p] = c * x - s * y;
                    a[i * n + q] = s * x + c * y;
                }
            }
        }
        if off < 1e-13 {
            break;
        }
    }
    let mut s: Vec<f64> = (0..n)
        .map(|j| col(&a, j).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

pub fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    (0..rows * cols)
        .map(|_| r.random_range(-1.0..1.0))
        .collect()
}

// ---------------------------------------------------------------------------
// TIES / DARE, written out element by element

pub fn brute_trim(v: &[f32], retain: f64) -> Vec<f32> {
    let n = v.len();
    let target = retain * n as f64;
    let k = (1..=n).find(|&k| k as f64 >= target - 1e-9).unwrap_or(n);
    (0..n)
        .map(|i| {
            let rank = (0..n)
                .filter(|&j| v[j].abs() > v[i].abs() || (v[j].abs() == v[i].abs() && j < i))
                .count();
            if rank < k {
                v[i]
            } else {
                0.0
            }
        })
        .collect()
}

pub fn brute_sign(vs: &[Vec<f32>]) -> Vec<i8> {
    (0..vs[0].len())
        .map(|i| {
            let s: f64 = vs.iter().map(|v| v[i] as f64).sum();
            if s > 0.0 {
                1
            } else if s < 0.0 {
                -1
            } else {
                0
            }
        })
        .collect()
}

pub fn brute_ties(vs: &[Vec<f32>], retain: f64, lambda: f64) -> Vec<f32> {
    let trimmed: Vec<Vec<f32>> = vs.iter().map(|v| brute_trim(v, retain)).collect();
    let signs = brute_sign(&trimmed);
    (0..vs[0].len())
        .map(|i| {
            let agree: Vec<f64> = trimmed
                .iter()
                .map(|v| v[i] as f64)
                .filter(|&x| (signs[i] > 0 && x > 0.0) || (signs[i] < 0 && x < 0.0))
                .collect();
            if agree.is_empty() {
                0.0
            } else {
                (lambda * (agree.iter().sum::<f64>() / agree.len() as f64)) as f32
            }
        })
        .collect()
}

/// Values on a coarse grid so that magnitude ties and zero sums occur often.
pub fn gridded_vector(r: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| r.random_range(-4i32..=4) as f32 * 0.25)
        .collect()
}

// ---------------------------------------------------------------------------
// Forward pass, written with explicit loops over named weights

pub struct NaiveLm<'a> {
    pub cfg: &'a ModelConfig,
    pub w: &'a Checkpoint,
}

fn row(w: &TensorRecord, r: usize) -> Vec<f64> {
    let c = w.shape[1];
    w.values[r * c..(r + 1) * c]
        .iter()
        .map(|&x| x as f64)
        .collect()
}

fn lin(w: &TensorRecord, x: &[f64]) -> Vec<f64> {
    (0..w.shape[0])
        .map(|r| row(w, r).iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn norm(x: &[f64], g: &TensorRecord, b: &TensorRecord) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mu) / (var + 1e-5).sqrt() * g.values[i] as f64 + b.values[i] as f64)
        .collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

impl NaiveLm<'_> {
    fn t(&self, name: &str) -> &TensorRecord {
        self.w.get(name).expect(name)
    }

    pub fn logits(&self, tokens: &[u32], causal: bool) -> Vec<Vec<f64>> {
        let d = self.cfg.d_model;
        let dh = d / self.cfg.n_heads;
        let mut x: Vec<Vec<f64>> = tokens
            .iter()
            .enumerate()
            .map(|(p, &tok)| {
                let e = row(self.t("embed.tok"), tok as usize);
                let q = row(self.t("embed.pos"), p);
                e.iter().zip(&q).map(|(a, b)| a + b).collect()
            })
            .collect();
        for l in 0..self.cfg.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            let h: Vec<Vec<f64>> = x
                .iter()
                .map(|v| norm(v, self.t(&p("ln1.g")), self.t(&p("ln1.b"))))
                .collect();
            let q: Vec<Vec<f64>> = h.iter().map(|v| lin(self.t(&p("attn.wq")), v)).collect();
            let k: Vec<Vec<f64>> = h.iter().map(|v| lin(self.t(&p("attn.wk")), v)).collect();
            let v: Vec<Vec<f64>> = h.iter().map(|v| lin(self.t(&p("attn.wv")), v)).collect();
            let mut attn_out = Vec::new();
            for i in 0..tokens.len() {
                let mut ctx = vec![0.0; d];
                for head in 0..self.cfg.n_heads {
                    let lo = head * dh;
                    let mut s = Vec::new();
                    for j in 0..tokens.len() {
                        if causal && j > i {
                            continue;
                        }
                        let mut acc = 0.0;
                        for c in lo..lo + dh {
                            acc += q[i][c] * k[j][c];
                        }
                        s.push((j, acc / (dh as f64).sqrt()));
                    }
                    let mx = s.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = s.iter().map(|x| (x.1 - mx).exp()).sum();
                    for (j, sc) in s {
                        let a = (sc - mx).exp() / z;
                        for c in lo..lo + dh {
                            ctx[c] += a * v[j][c];
                        }
                    }
                }
                attn_out.push(lin(self.t(&p("attn.wo")), &ctx));
            }
            for i in 0..tokens.len() {
                for c in 0..d {
                    x[i][c] += attn_out[i][c];
                }
                let h = norm(&x[i], self.t(&p("ln2.g")), self.t(&p("ln2.b")));
                let up: Vec<f64> = lin(self.t(&p("mlp.w1")), &h)
                    .into_iter()
                    .map(gelu)
                    .collect();
                let down = lin(self.t(&p("mlp.w2")), &up);
                for c in 0..d {
                    x[i][c] += down[c];
                }
            }
        }
        x.iter()
            .map(|v| {
                lin(
                    self.t("lm_head"),
                    &norm(v, self.t("final_ln.g"), self.t("final_ln.b")),
                )
            })
            .collect()
    }

    pub fn log_prob(&self, tokens: &[u32], causal: bool, pos: usize, target: u32) -> f64 {
        let z = &self.logits(tokens, causal)[pos];
        let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + z.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        z[target as usize] - lse
    }

    /// Sum of next-token log-probabilities, recomputing the prefix each step.
    pub fn ar(&self, prompt: &[u32], response: &[u32]) -> f64 {
        let mut ctx: Vec<u32> = if prompt.is_empty() {
            vec![self.cfg.vocab_size as u32 - 2]
        } else {
            prompt.to_vec()
        };
        let mut total = 0.0;
        for &y in response {
            total += self.log_prob(&ctx, true, ctx.len() - 1, y);
            ctx.push(y);
        }
        total
    }

    pub fn masked(&self, prompt: &[u32], response: &[u32], masked: &[usize]) -> f64 {
        let mask = self.cfg.vocab_size as u32 - 1;
        let mut seq = prompt.to_vec();
        for (j, &y) in response.iter().enumerate() {
            seq.push(if masked.contains(&j) { mask } else { y });
        }
        masked
            .iter()
            .map(|&j| self.log_prob(&seq, false, prompt.len() + j, response[j]))
            .sum()
    }
}

/// A checkpoint for `cfg` with i.i.d. N(0, std²)-ish weights (uniform with
/// matching variance) and unit-centred norm gains.
pub fn random_weights(cfg: &ModelConfig, seed: u64, std: f64) -> Checkpoint {
    let mut r = rng(seed);
    let half = std * 3f64.sqrt();
    Checkpoint::from_records(cfg.tensor_shapes().into_iter().map(|(name, shape)| {
        let n: usize = shape.iter().product();
        let values = (0..n)
            .map(|_| {
                let v = r.random_range(-half..half);
                if name.ends_with(".g") {
                    (1.0 + v) as f32
                } else {
                    v as f32
                }
            })
            .collect();
        TensorRecord::new(name, shape, values).unwrap()
    }))
    .unwrap()
}

/// All-zero weights except `final_ln.b = e₀` and `lm_head[:, 0] = logits`,
/// which makes every position emit exactly `logits`.
pub fn forced_logits(cfg: &ModelConfig, logits: &[f64]) -> Checkpoint {
    assert_eq!(logits.len(), cfg.vocab_size);
    let mut c = Checkpoint::new();
    for (name, shape) in cfg.tensor_shapes() {
        let mut t = TensorRecord::zeros(name.clone(), shape);
        if name == "final_ln.b" {
            t.values[0] = 1.0;
        }
        if name == "lm_head" {
            for (v, &z) in logits.iter().enumerate() {
                t.values[v * cfg.d_model] = z as f32;
            }
        }
        c.insert(t).unwrap();
    }
    c
}

// ---------------------------------------------------------------------------
// ELBO enumeration

/// Probability that `max(1, round(t·len))` equals `m` for `t ~ U(0, 1]`.
pub fn mask_count_prob(len: usize, m: usize) -> f64 {
    let lo = if m == 1 {
        0.0
    } else {
        (m as f64 - 0.5) / len as f64
    };
    let hi = if m == len {
        1.0
    } else {
        (m as f64 + 0.5) / len as f64
    };
    (hi.min(1.0) - lo.max(0.0)).max(0.0)
}

pub fn subsets(len: usize, m: usize) -> Vec<Vec<usize>> {
    (0u32..1 << len)
        .filter(|b| b.count_ones() as usize == m)
        .map(|b| (0..len).filter(|&j| b >> j & 1 == 1).collect())
        .collect()
}

/// `E_t E_{mask} [(len/m) Σ_{masked} log p]` computed exactly.
pub fn elbo_expectation(lm: &NaiveLm<'_>, prompt: &[u32], response: &[u32]) -> f64 {
    let len = response.len();
    (1..=len)
        .map(|m| {
            let sets = subsets(len, m);
            let mean = sets
                .iter()
                .map(|s| len as f64 / m as f64 * lm.masked(prompt, response, s))
                .sum::<f64>()
                / sets.len() as f64;
            mask_count_prob(len, m) * mean
        })
        .sum()
}

pub fn ulp_distance(a: f32, b: f32) -> u32 {
    let key = |x: f32| {
        let i = x.to_bits() as i32;
        if i < 0 {
            i32::MIN - i
        } else {
            i
        }
    };
    (key(a) as i64 - key(b) as i64).unsigned_abs() as u32
}
