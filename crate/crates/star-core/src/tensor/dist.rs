//! Diagonal Gaussians and categoricals, in plain and taped form.
//!
//! Plain structs hold batched parameters as tensors and serve frozen
//! components (sampling, scoring, closed-form KL). The `nodes_*`
//! functions build the same quantities inside a [`Graph`] for training
//! losses. KL of a categorical against an externally supplied
//! distribution floors the reference side at [`EPS_P`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Graph, NodeId, Tensor, EPS_P, LOGVAR_MAX, LOGVAR_MIN};

pub const LN_2PI: f64 = 1.8378770664093453;

// ── plain diagonal Gaussian ─────────────────────────────────────────

/// Batched diagonal Gaussian: one distribution per row.
#[derive(Debug, Clone)]
pub struct GaussDist {
    pub mean: Tensor,
    pub logvar: Tensor,
}

impl GaussDist {
    /// Splits a `[B, 2d]` head into mean and clamped log-variance.
    pub fn from_head(head: &Tensor) -> Self {
        assert!(head.cols % 2 == 0, "gaussian head must have even width");
        let d = head.cols / 2;
        let mut mean = Tensor::zeros(head.rows, d);
        let mut logvar = Tensor::zeros(head.rows, d);
        for r in 0..head.rows {
            for c in 0..d {
                mean.data[r * d + c] = head.at(r, c);
                logvar.data[r * d + c] = head.at(r, c + d).clamp(LOGVAR_MIN, LOGVAR_MAX);
            }
        }
        GaussDist { mean, logvar }
    }

    pub fn dim(&self) -> usize {
        self.mean.cols
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Tensor {
        let mut out = self.mean.clone();
        for (i, v) in out.data.iter_mut().enumerate() {
            let e: f64 = rng.sample(StandardNormal);
            *v += (0.5 * self.logvar.data[i]).exp() * e;
        }
        out
    }

    /// Per-row `KL(self || other)`, summed over dimensions.
    pub fn kl_to(&self, other: &GaussDist) -> Vec<f64> {
        assert_eq!(self.mean.shape(), other.mean.shape(), "kl dims");
        (0..self.mean.rows)
            .map(|r| {
                let mut acc = 0.0;
                for c in 0..self.mean.cols {
                    let lv1 = self.logvar.at(r, c);
                    let lv2 = other.logvar.at(r, c);
                    let dm = self.mean.at(r, c) - other.mean.at(r, c);
                    acc += 0.5 * ((lv1 - lv2).exp() + dm * dm * (-lv2).exp() - 1.0 + lv2 - lv1);
                }
                acc
            })
            .collect()
    }

    /// Per-row `KL(self || N(0, I))`.
    pub fn kl_to_std(&self) -> Vec<f64> {
        (0..self.mean.rows)
            .map(|r| {
                let mut acc = 0.0;
                for c in 0..self.mean.cols {
                    let lv = self.logvar.at(r, c);
                    let m = self.mean.at(r, c);
                    acc += 0.5 * (lv.exp() + m * m - 1.0 - lv);
                }
                acc
            })
            .collect()
    }

    /// Per-row log density of `x`.
    pub fn log_pdf(&self, x: &Tensor) -> Vec<f64> {
        (0..self.mean.rows)
            .map(|r| {
                let mut acc = 0.0;
                for c in 0..self.mean.cols {
                    let lv = self.logvar.at(r, c);
                    let d = x.at(r, c) - self.mean.at(r, c);
                    acc += -0.5 * (d * d * (-lv).exp() + lv + LN_2PI);
                }
                acc
            })
            .collect()
    }
}

// ── plain categorical ───────────────────────────────────────────────

/// Batched categorical over logits: one distribution per row.
#[derive(Debug, Clone)]
pub struct CatDist {
    pub logits: Tensor,
}

impl CatDist {
    pub fn new(logits: Tensor) -> Self {
        CatDist { logits }
    }

    pub fn k(&self) -> usize {
        self.logits.cols
    }

    pub fn log_probs_row(&self, r: usize) -> Vec<f64> {
        log_softmax(self.logits.row(r))
    }

    pub fn probs_row(&self, r: usize) -> Vec<f64> {
        self.log_probs_row(r).iter().map(|v| v.exp()).collect()
    }

    pub fn sample_row(&self, r: usize, rng: &mut ChaCha8Rng) -> usize {
        let p = self.probs_row(r);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, &pi) in p.iter().enumerate() {
            acc += pi;
            if u < acc {
                return i;
            }
        }
        p.len() - 1
    }

    pub fn argmax_row(&self, r: usize) -> usize {
        let row = self.logits.row(r);
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        best
    }

    /// Per-row `KL(self || other)`.
    pub fn kl_to(&self, other: &CatDist) -> Vec<f64> {
        assert_eq!(self.logits.shape(), other.logits.shape(), "kl dims");
        (0..self.logits.rows)
            .map(|r| {
                let lp = self.log_probs_row(r);
                let lq = other.log_probs_row(r);
                lp.iter().zip(&lq).map(|(&a, &b)| a.exp() * (a - b)).sum()
            })
            .collect()
    }
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|&v| v - lse).collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    log_softmax(row).iter().map(|v| v.exp()).collect()
}

/// `KL(p || q)` between probability vectors with the reference side
/// floored at `EPS_P`; `0 ln 0 = 0`.
pub fn kl_categorical_probs(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            acc += pi * (pi.ln() - qi.max(EPS_P).ln());
        }
    }
    acc
}

/// Cross-entropy `-sum_k p_k ln q_k` with `q` floored like the KL.
pub fn ce_categorical_probs(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            acc -= pi * qi.max(EPS_P).ln();
        }
    }
    acc
}

// ── squashed Gaussian sampling ──────────────────────────────────────

/// Plain reparameterized sample squashed through `bound * tanh`.
/// Returns `(squashed, pre_squash)`.
pub fn sample_squashed(
    dist: &GaussDist,
    bound: f64,
    rng: &mut ChaCha8Rng,
) -> (Tensor, Tensor) {
    let u = dist.sample(rng);
    let mut z = u.clone();
    for v in &mut z.data {
        *v = bound * v.tanh();
    }
    (z, u)
}

/// Per-row log density of the squashed sample, evaluated at the
/// pre-squash values `u`: `log N(u) - sum_i log(bound (1 - tanh^2 u_i))`
/// with the correction in the numerically stable softplus form.
pub fn squashed_log_prob(dist: &GaussDist, u: &Tensor, bound: f64) -> Vec<f64> {
    let base = dist.log_pdf(u);
    (0..u.rows)
        .map(|r| {
            let mut corr = 0.0;
            for &ui in u.row(r) {
                // log(1 - tanh^2 u) = 2 (ln 2 - u - softplus(-2u))
                let sp = if -2.0 * ui > 0.0 {
                    -2.0 * ui + (2.0 * ui).exp().ln_1p()
                } else {
                    (-2.0 * ui).exp().ln_1p()
                };
                corr += bound.ln() + 2.0 * (std::f64::consts::LN_2 - ui - sp);
            }
            base[r] - corr
        })
        .collect()
}

// ── taped composites ────────────────────────────────────────────────

/// Splits a `[B, 2d]` head node into `(mean, clamped logvar)` nodes.
pub fn nodes_gauss_head(g: &mut Graph, head: NodeId) -> (NodeId, NodeId) {
    let w = g.shape(head).1;
    assert!(w % 2 == 0, "gaussian head width");
    let mean = g.slice_cols(head, 0, w / 2);
    let raw_lv = g.slice_cols(head, w / 2, w);
    let logvar = g.clamp(raw_lv, LOGVAR_MIN, LOGVAR_MAX);
    (mean, logvar)
}

/// `[B,1]` per-row `KL(p || q)` between diagonal Gaussian nodes.
pub fn nodes_gauss_kl(
    g: &mut Graph,
    (m1, lv1): (NodeId, NodeId),
    (m2, lv2): (NodeId, NodeId),
) -> NodeId {
    let dlv = g.sub(lv1, lv2);
    let ratio = g.exp(dlv);
    let dm = g.sub(m2, m1);
    let dm2 = g.square(dm);
    let nlv2 = g.neg(lv2);
    let inv2 = g.exp(nlv2);
    let quad = g.mul(dm2, inv2);
    let a = g.add(ratio, quad);
    let b = g.sub(lv2, lv1);
    let c = g.add(a, b);
    let d = g.add_scalar(c, -1.0);
    let summed = g.sum_rows(d);
    g.scale(summed, 0.5)
}

/// `[B,1]` per-row `KL(q || N(0, I))` for a Gaussian head.
pub fn nodes_gauss_kl_std(g: &mut Graph, (m, lv): (NodeId, NodeId)) -> NodeId {
    let e = g.exp(lv);
    let m2 = g.square(m);
    let a = g.add(e, m2);
    let b = g.sub(a, lv);
    let c = g.add_scalar(b, -1.0);
    let summed = g.sum_rows(c);
    g.scale(summed, 0.5)
}

/// `[B,1]` per-row Gaussian negative log-likelihood of a constant target.
pub fn nodes_gauss_nll(g: &mut Graph, mean: NodeId, logvar: NodeId, target: NodeId) -> NodeId {
    let d = g.sub(target, mean);
    let d2 = g.square(d);
    let nlv = g.neg(logvar);
    let inv = g.exp(nlv);
    let quad = g.mul(d2, inv);
    let a = g.add(quad, logvar);
    let b = g.add_scalar(a, LN_2PI);
    let summed = g.sum_rows(b);
    g.scale(summed, 0.5)
}

/// `[B,1]` per-row `KL(softmax(logits) || exp(log_q))` where `log_q`
/// is a constant log-probability table.
pub fn nodes_cat_kl(g: &mut Graph, logits: NodeId, log_q: NodeId) -> NodeId {
    let lp = g.log_softmax_rows(logits);
    let p = g.exp(lp);
    let diff = g.sub(lp, log_q);
    let w = g.mul(p, diff);
    g.sum_rows(w)
}

/// Reparameterized draw `mean + exp(logvar/2) * eps` for a constant
/// noise node, keeping gradients flowing into `mean`/`logvar`.
pub fn nodes_reparam(g: &mut Graph, mean: NodeId, logvar: NodeId, eps: NodeId) -> NodeId {
    let half = g.scale(logvar, 0.5);
    let sd = g.exp(half);
    let scaled = g.mul(sd, eps);
    g.add(mean, scaled)
}

/// `bound * tanh(u)`.
pub fn nodes_squash(g: &mut Graph, u: NodeId, bound: f64) -> NodeId {
    let t = g.tanh(u);
    g.scale(t, bound)
}

/// Converts a probability table into floored log-probabilities.
pub fn floored_log(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    for v in &mut out.data {
        *v = v.max(EPS_P).ln();
    }
    out
}
