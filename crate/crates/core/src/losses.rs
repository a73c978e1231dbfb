//! Identity classification head and training objectives.
//!
//! The objective is label-smoothed cross-entropy on classifier logits plus a
//! supervised contrastive term on the final features. A batch-hard triplet
//! term exists only so the loss ablation can swap it in for the contrastive
//! term.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;
use crate::tape::{Backward, GradSink, Tape, Var};
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricLoss {
    Supcon,
    Triplet,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub label_smoothing: f64,
    pub temperature: f64,
    pub metric: MetricLoss,
    pub triplet_margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            label_smoothing: 0.1,
            temperature: 0.07,
            metric: MetricLoss::Supcon,
            triplet_margin: 0.3,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "loss.label_smoothing must be in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("loss.temperature must be > 0, got {}", self.temperature)));
        }
        if !(self.triplet_margin >= 0.0) {
            return Err(Error::Config(format!("loss.triplet_margin must be >= 0, got {}", self.triplet_margin)));
        }
        Ok(())
    }
}

/// Bias-free linear classifier: `logits = T·W_cls`.
pub fn classify(tape: &mut Tape, features: Var, w_cls: Var) -> Result<Var> {
    ops::linear(tape, features, w_cls, None)
}

fn scalar(v: f64) -> Tensor {
    Tensor::new(vec![1], vec![v]).expect("scalar")
}

/// Label-smoothed cross-entropy, averaged over the batch.
///
/// Targets put `1 − ε` on the true class and `ε / (C − 1)` on every other.
pub fn smooth_ce(tape: &mut Tape, logits: Var, labels: &[usize], eps: f64) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape("smooth_ce", &shape, &[labels.len()]));
    }
    let (n, c) = (shape[0], shape[1]);
    if c < 2 {
        return Err(Error::invalid(format!("smooth_ce needs at least 2 classes, got {c}")));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::InvalidLabel { label: bad, classes: c });
    }
    let off = eps / (c - 1) as f64;
    let on = 1.0 - eps;
    let ld = tape.value(logits).data();
    let mut probs = vec![0.0; n * c];
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = &ld[i * c..(i + 1) * c];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let lse = m + z.ln();
        for k in 0..c {
            let logp = row[k] - lse;
            let q = if k == y { on } else { off };
            total -= q * logp;
            probs[i * c + k] = logp.exp();
        }
    }
    let loss = total / n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("smooth_ce".into()));
    }
    Ok(tape.record(
        scalar(loss),
        &[logits],
        SmoothCeBackward {
            logits,
            probs,
            labels: labels.to_vec(),
            on,
            off,
            c,
        },
    ))
}

struct SmoothCeBackward {
    logits: Var,
    probs: Vec<f64>,
    labels: Vec<usize>,
    on: f64,
    off: f64,
    c: usize,
}

impl Backward for SmoothCeBackward {
    fn name(&self) -> &'static str {
        "smooth_ce"
    }

    fn backward(&self, dy: &[f64], sink: &mut GradSink<'_>) {
        if !sink.wants(self.logits) {
            return;
        }
        let c = self.c;
        let scale = dy[0] / self.labels.len() as f64;
        let dl = sink.slot(self.logits);
        for (i, &y) in self.labels.iter().enumerate() {
            for k in 0..c {
                let q = if k == y { self.on } else { self.off };
                dl[i * c + k] += scale * (self.probs[i * c + k] - q);
            }
        }
    }
}

fn normalize_rows(x: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut u = Vec::with_capacity(x.len());
    let mut norms = Vec::with_capacity(x.len() / d.max(1));
    for row in x.chunks_exact(d) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        norms.push(norm);
        let denom = norm.max(NORM_EPS);
        u.extend(row.iter().map(|v| v / denom));
    }
    (u, norms)
}

/// Pulls the gradient w.r.t. normalized rows back to the raw rows.
fn unnormalize_grad(du: &[f64], u: &[f64], norms: &[f64], d: usize, out: &mut [f64]) {
    for (r, &norm) in norms.iter().enumerate() {
        let ur = &u[r * d..(r + 1) * d];
        let gr = &du[r * d..(r + 1) * d];
        let o = &mut out[r * d..(r + 1) * d];
        if norm > NORM_EPS {
            let dot: f64 = ur.iter().zip(gr).map(|(a, b)| a * b).sum();
            for j in 0..d {
                o[j] += (gr[j] - ur[j] * dot) / norm;
            }
        } else {
            for j in 0..d {
                o[j] += gr[j] / NORM_EPS;
            }
        }
    }
}

fn gram(u: &[f64], n: usize, d: usize) -> Vec<f64> {
    use crate::linalg::{gemm, MatRef};
    let mut s = vec![0.0; n * n];
    let m = MatRef::new(u, n, d);
    gemm(1.0, m, m.t(), 0.0, &mut s);
    s
}

/// Supervised contrastive loss on cosine similarities at temperature `tau`.
///
/// For anchor `i` and each positive `p` the term is
/// `−log(e^{s_ip/τ} / (e^{s_ip/τ} + Σ_{j∈neg(i)} e^{s_ij/τ}))`; terms are
/// averaged over an anchor's positives, then over anchors.
pub fn supcon(tape: &mut Tape, features: Var, labels: &[usize], tau: f64) -> Result<Var> {
    let shape = tape.shape(features).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape("supcon", &shape, &[labels.len()]));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    let (n, d) = (shape[0], shape[1]);
    for i in 0..n {
        if !(0..n).any(|p| p != i && labels[p] == labels[i]) {
            return Err(Error::NoPositive(i));
        }
    }
    let (u, norms) = normalize_rows(tape.value(features).data(), d);
    let s = gram(&u, n, d);
    // ds[i*n + j]: d loss / d s_ij
    let mut ds = vec![0.0; n * n];
    let mut total = 0.0;
    let mut logits = Vec::with_capacity(n);
    for i in 0..n {
        let negs: Vec<usize> = (0..n).filter(|&j| labels[j] != labels[i]).collect();
        let pos: Vec<usize> = (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect();
        let w = 1.0 / (pos.len() as f64 * n as f64);
        for &p in &pos {
            logits.clear();
            logits.push(s[i * n + p] / tau);
            logits.extend(negs.iter().map(|&j| s[i * n + j] / tau));
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
            let lse = m + z.ln();
            total += w * (lse - logits[0]);
            let pi_p = (logits[0] - lse).exp();
            ds[i * n + p] += w * (pi_p - 1.0) / tau;
            for (k, &j) in negs.iter().enumerate() {
                ds[i * n + j] += w * (logits[k + 1] - lse).exp() / tau;
            }
        }
    }
    if !total.is_finite() {
        return Err(Error::NonFinite("supcon".into()));
    }
    Ok(tape.record(
        scalar(total),
        &[features],
        PairwiseBackward {
            features,
            ds,
            u,
            norms,
            n,
            d,
            name: "supcon",
        },
    ))
}

/// Backward shared by losses that are functions of the cosine Gram matrix.
struct PairwiseBackward {
    features: Var,
    ds: Vec<f64>,
    u: Vec<f64>,
    norms: Vec<f64>,
    n: usize,
    d: usize,
    name: &'static str,
}

impl Backward for PairwiseBackward {
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(&self, dy: &[f64], sink: &mut GradSink<'_>) {
        use crate::linalg::{gemm, MatRef};
        if !sink.wants(self.features) {
            return;
        }
        let (n, d) = (self.n, self.d);
        // s = U·Uᵀ  ⇒  dU = (G + Gᵀ)·U
        let mut sym = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                sym[i * n + j] = dy[0] * (self.ds[i * n + j] + self.ds[j * n + i]);
            }
        }
        let mut du = vec![0.0; n * d];
        gemm(1.0, MatRef::new(&sym, n, n), MatRef::new(&self.u, n, d), 0.0, &mut du);
        let out = sink.slot(self.features);
        unnormalize_grad(&du, &self.u, &self.norms, d, out);
    }
}

/// Batch-hard triplet loss on Euclidean distances between L2-normalized
/// features: `mean_i max(0, max_p d_ip − min_n d_in + margin)`.
pub fn triplet(tape: &mut Tape, features: Var, labels: &[usize], margin: f64) -> Result<Var> {
    let shape = tape.shape(features).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape("triplet", &shape, &[labels.len()]));
    }
    let (n, d) = (shape[0], shape[1]);
    let (u, norms) = normalize_rows(tape.value(features).data(), d);
    let s = gram(&u, n, d);
    // ‖u_i − u_j‖² = 2 − 2 s_ij for unit rows; zero rows are handled by the
    // general form.
    let sq = |i: usize, j: usize| (s[i * n + i] + s[j * n + j] - 2.0 * s[i * n + j]).max(0.0);
    let dist = |i: usize, j: usize| sq(i, j).max(1e-12).sqrt();
    let mut ds = vec![0.0; n * n];
    let mut total = 0.0;
    for i in 0..n {
        let hard_pos = (0..n)
            .filter(|&p| p != i && labels[p] == labels[i])
            .max_by(|&a, &b| dist(i, a).total_cmp(&dist(i, b)));
        let hard_neg = (0..n)
            .filter(|&j| labels[j] != labels[i])
            .min_by(|&a, &b| dist(i, a).total_cmp(&dist(i, b)));
        let Some(p) = hard_pos else {
            return Err(Error::NoPositive(i));
        };
        let Some(q) = hard_neg else { continue };
        let v = dist(i, p) - dist(i, q) + margin;
        if v <= 0.0 {
            continue;
        }
        total += v / n as f64;
        let w = 1.0 / n as f64;
        // d dist(i,j) / d s_ij = −1 / dist, d/ds_ii = d/ds_jj = 1 / (2 dist)
        for (j, sign) in [(p, 1.0), (q, -1.0)] {
            let dd = dist(i, j);
            if sq(i, j) > 1e-12 {
                ds[i * n + j] -= sign * w / dd;
                ds[i * n + i] += sign * w / (2.0 * dd);
                ds[j * n + j] += sign * w / (2.0 * dd);
            }
        }
    }
    Ok(tape.record(
        scalar(total),
        &[features],
        PairwiseBackward {
            features,
            ds,
            u,
            norms,
            n,
            d,
            name: "triplet",
        },
    ))
}

/// Sum of two scalars.
pub fn add_scalars(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    ops::add(tape, a, b)
}

pub struct LossTerms {
    pub total: Var,
    pub ce: Var,
    pub metric: Option<Var>,
}

/// `L = L_CE + L_metric`, unweighted.
pub fn total_loss(tape: &mut Tape, logits: Var, features: Var, labels: &[usize], cfg: &LossConfig) -> Result<LossTerms> {
    let ce = smooth_ce(tape, logits, labels, cfg.label_smoothing)?;
    let metric = match cfg.metric {
        MetricLoss::Supcon => Some(supcon(tape, features, labels, cfg.temperature)?),
        MetricLoss::Triplet => Some(triplet(tape, features, labels, cfg.triplet_margin)?),
        MetricLoss::None => None,
    };
    let total = match metric {
        Some(m) => add_scalars(tape, ce, m)?,
        None => ce,
    };
    Ok(LossTerms { total, ce, metric })
}
