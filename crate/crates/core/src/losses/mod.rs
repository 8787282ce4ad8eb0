//! Contrastive objectives over a batch of matched (shape, image) pairs.
//!
//! Both losses work on the similarity matrix `S[i][j] = <shape_i, image_j>`
//! with logits `S / tau`, and return exact gradients with respect to every
//! embedding and to `log tau`.

use serde::{Deserialize, Serialize};

use crate::encoders::{Embedding, UNIT_TOL};
use crate::{Error, Result};

pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 1.0;
pub const TAU_INIT: f64 = 0.07;

/// Temperature (stored as its logarithm) and vMF concentration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub log_tau: f64,
    pub beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            log_tau: TAU_INIT.ln(),
            beta: 0.5,
        }
    }
}

impl LossConfig {
    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }

    /// Clamps the temperature into `[TAU_MIN, TAU_MAX]`.
    pub fn clamp(&mut self) {
        self.log_tau = self.log_tau.clamp(TAU_MIN.ln(), TAU_MAX.ln());
    }

    /// Negatives per anchor for a batch of `n` pairs.
    pub fn q_count(n: usize) -> usize {
        n.saturating_sub(1)
    }
}

/// Loss value plus gradients. `d_shape[i]` / `d_image[i]` are the partial
/// derivatives with respect to the `i`-th shape / image embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub d_shape: Vec<Vec<f64>>,
    pub d_image: Vec<Vec<f64>>,
    pub d_log_tau: f64,
}

fn check_batch(shapes: &[Embedding], images: &[Embedding], min_n: usize) -> Result<usize> {
    let n = shapes.len();
    if n < min_n {
        return Err(Error::param(format!("batch needs at least {min_n} pairs, got {n}")));
    }
    if images.len() != n {
        return Err(Error::param(format!("{n} shapes but {} images", images.len())));
    }
    let dim = shapes[0].dim();
    for e in shapes.iter().chain(images) {
        if e.dim() != dim {
            return Err(Error::Dimension {
                expected: dim,
                actual: e.dim(),
            });
        }
        let norm = e.dot(e).sqrt();
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(Error::Precondition(format!("embedding norm {norm} is not 1")));
        }
    }
    Ok(n)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn similarity<E: AsRef<[f64]>>(shapes: &[E], images: &[E]) -> Vec<Vec<f64>> {
    shapes
        .iter()
        .map(|s| images.iter().map(|m| dot(s.as_ref(), m.as_ref())).collect())
        .collect()
}

/// `(max, ln sum exp(x - max))` so that `lse = max + ln_sum`.
fn lse_parts(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = xs.map(|x| (x - m).exp()).sum();
    (m, s.ln())
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Maps `dL/dS` and `dL/dlogits` onto embedding gradients.
fn embedding_grads<E: AsRef<[f64]>>(
    ds: &[Vec<f64>],
    shapes: &[E],
    images: &[E],
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = shapes.len();
    let dim = shapes[0].as_ref().len();
    let mut d_shape = vec![vec![0.0; dim]; n];
    let mut d_image = vec![vec![0.0; dim]; n];
    for i in 0..n {
        for j in 0..n {
            let g = ds[i][j];
            if g == 0.0 {
                continue;
            }
            for (acc, v) in d_shape[i].iter_mut().zip(images[j].as_ref()) {
                *acc += g * v;
            }
            for (acc, v) in d_image[j].iter_mut().zip(shapes[i].as_ref()) {
                *acc += g * v;
            }
        }
    }
    (d_shape, d_image)
}

/// Symmetric multi-modal InfoNCE:
/// `1/N sum_i [ -1/2 log softmax_j(S_ij/tau)_i - 1/2 log softmax_j(S_ji/tau)_i ]`.
pub fn info_nce(shapes: &[Embedding], images: &[Embedding], log_tau: f64) -> Result<LossOutput> {
    check_batch(shapes, images, 1)?;
    Ok(info_nce_unchecked(shapes, images, log_tau))
}

/// [`info_nce`] on raw vectors, without the batch and unit-norm checks.
/// Callers must pass equally sized, non-empty batches.
pub fn info_nce_unchecked<E: AsRef<[f64]>>(shapes: &[E], images: &[E], log_tau: f64) -> LossOutput {
    let n = shapes.len();
    let inv_tau = (-log_tau).exp();
    let s = similarity(shapes, images);
    let logits: Vec<Vec<f64>> = s.iter().map(|r| r.iter().map(|v| v * inv_tau).collect()).collect();
    let nf = n as f64;

    let mut loss = 0.0;
    // dL/dlogits
    let mut dl = vec![vec![0.0; n]; n];
    for i in 0..n {
        // shape i against all images
        let (m, ls) = lse_parts(logits[i].iter().copied());
        loss += -0.5 * ((logits[i][i] - m) - ls);
        for j in 0..n {
            let p = (logits[i][j] - m - ls).exp();
            dl[i][j] += 0.5 * (p - f64::from(u8::from(i == j))) / nf;
        }
        // image i against all shapes
        let (m, ls) = lse_parts((0..n).map(|k| logits[k][i]));
        loss += -0.5 * ((logits[i][i] - m) - ls);
        for k in 0..n {
            let p = (logits[k][i] - m - ls).exp();
            dl[k][i] += 0.5 * (p - f64::from(u8::from(k == i))) / nf;
        }
    }
    loss /= nf;

    let mut d_log_tau = 0.0;
    let ds: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    d_log_tau -= dl[i][j] * logits[i][j];
                    dl[i][j] * inv_tau
                })
                .collect()
        })
        .collect();
    let (d_shape, d_image) = embedding_grads(&ds, shapes, images);
    LossOutput {
        loss,
        d_shape,
        d_image,
        d_log_tau,
    }
}

/// Self-normalized vMF weights `w_j ∝ exp(beta <anchor, neg_j>)` over the
/// in-batch negatives. The empirical marginal is uniform and cancels.
pub fn vmf_weights(anchor: &Embedding, negatives: &[Embedding], beta: f64) -> Result<Vec<f64>> {
    if negatives.is_empty() {
        return Err(Error::param("vMF weighting needs at least one negative"));
    }
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::param(format!("beta must be finite and non-negative, got {beta}")));
    }
    let sims: Vec<f64> = negatives.iter().map(|n| anchor.dot(n)).collect();
    Ok(weights_from_similarities(&sims, beta))
}

pub fn weights_from_similarities(sims: &[f64], beta: f64) -> Vec<f64> {
    let scaled: Vec<f64> = sims.iter().map(|s| beta * s).collect();
    softmax(&scaled)
}

/// Shannon entropy (nats) of a weight vector.
pub fn entropy(weights: &[f64]) -> f64 {
    -weights.iter().filter(|&&w| w > 0.0).map(|w| w * w.ln()).sum::<f64>()
}

/// One directional HCL term for anchor `i`:
/// `-1/2 log( e^{pos} / (e^{pos} + Q sum_j w_j e^{l_j}) )` with
/// `w = softmax(beta * sims)`. Returns the term, `d/dpos`, `d/dsims` and the
/// `log tau` partial (excluding the positive's, which the caller adds).
struct DirTerm {
    value: f64,
    d_pos_logit: f64,
    d_neg_sims: Vec<f64>,
    d_log_tau_neg: f64,
}

fn hcl_direction(pos_logit: f64, neg_sims: &[f64], inv_tau: f64, beta: f64) -> DirTerm {
    let q = neg_sims.len() as f64;
    let a: Vec<f64> = neg_sims.iter().map(|s| (beta + inv_tau) * s).collect();
    let b: Vec<f64> = neg_sims.iter().map(|s| beta * s).collect();
    let (ma, la) = lse_parts(a.iter().copied());
    let (mb, lb) = lse_parts(b.iter().copied());
    // log(Q E_q[exp(l)])
    let log_neg = q.ln() + (ma - mb) + (la - lb);
    let top = pos_logit.max(log_neg);
    let log_denom = top + ((pos_logit - top).exp() + (log_neg - top).exp()).ln();
    let value = -0.5 * (pos_logit - log_denom);
    let p_pos = (pos_logit - log_denom).exp();
    let p_neg = (log_neg - log_denom).exp();

    let sa = softmax(&a);
    let sb = softmax(&b);
    let d_neg_sims = sa
        .iter()
        .zip(&sb)
        .map(|(wa, wb)| 0.5 * p_neg * (wa * (beta + inv_tau) - wb * beta))
        .collect();
    let d_log_tau_neg = -0.5
        * p_neg
        * sa.iter()
            .zip(neg_sims)
            .map(|(wa, s)| wa * s * inv_tau)
            .sum::<f64>();
    DirTerm {
        value,
        d_pos_logit: -0.5 + 0.5 * p_pos,
        d_neg_sims,
        d_log_tau_neg,
    }
}

/// Multi-modal hard contrastive loss. For each pair `i`, the image-negative
/// term reweights images `j != i` by `exp(beta <shape_i, image_j>)` and the
/// shape-negative term reweights shapes `j != i` by `exp(beta <shape_j, image_i>)`.
/// With `beta = 0` this is exactly [`info_nce`].
pub fn hcl(shapes: &[Embedding], images: &[Embedding], log_tau: f64, beta: f64) -> Result<LossOutput> {
    check_batch(shapes, images, 2)?;
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::param(format!("beta must be finite and non-negative, got {beta}")));
    }
    Ok(hcl_unchecked(shapes, images, log_tau, beta))
}

/// [`hcl`] on raw vectors, without the batch, unit-norm and beta checks.
/// Callers must pass equally sized batches of at least two pairs.
pub fn hcl_unchecked<E: AsRef<[f64]>>(shapes: &[E], images: &[E], log_tau: f64, beta: f64) -> LossOutput {
    let n = shapes.len();
    let inv_tau = (-log_tau).exp();
    let s = similarity(shapes, images);
    let nf = n as f64;

    let mut loss = 0.0;
    let mut d_log_tau = 0.0;
    let mut ds = vec![vec![0.0; n]; n];
    for i in 0..n {
        let pos = s[i][i] * inv_tau;
        let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();

        let row: Vec<f64> = others.iter().map(|&j| s[i][j]).collect();
        let t = hcl_direction(pos, &row, inv_tau, beta);
        loss += t.value;
        ds[i][i] += t.d_pos_logit * inv_tau / nf;
        d_log_tau += (-t.d_pos_logit * pos + t.d_log_tau_neg) / nf;
        for (&j, g) in others.iter().zip(&t.d_neg_sims) {
            ds[i][j] += g / nf;
        }

        let col: Vec<f64> = others.iter().map(|&j| s[j][i]).collect();
        let t = hcl_direction(pos, &col, inv_tau, beta);
        loss += t.value;
        ds[i][i] += t.d_pos_logit * inv_tau / nf;
        d_log_tau += (-t.d_pos_logit * pos + t.d_log_tau_neg) / nf;
        for (&j, g) in others.iter().zip(&t.d_neg_sims) {
            ds[j][i] += g / nf;
        }
    }
    loss /= nf;
    let (d_shape, d_image) = embedding_grads(&ds, shapes, images);
    LossOutput {
        loss,
        d_shape,
        d_image,
        d_log_tau,
    }
}

/// Stagewise concentration ladder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaSchedule {
    pub stage_values: Vec<f64>,
    pub total_epochs: usize,
}

pub const BETA0: f64 = 0.5;
pub const BETA_STAGES: usize = 5;

impl BetaSchedule {
    /// Five equal stages stepping `beta0` down linearly to `beta0 / 5`
    /// (0.5, 0.4, 0.3, 0.2, 0.1 for the default `beta0 = 0.5`).
    pub fn annealed(beta0: f64, total_epochs: usize) -> Self {
        let stage_values = (0..BETA_STAGES)
            .map(|k| beta0 * (BETA_STAGES - k) as f64 / BETA_STAGES as f64)
            .collect();
        Self {
            stage_values,
            total_epochs,
        }
    }

    pub fn constant(beta: f64, total_epochs: usize) -> Self {
        Self {
            stage_values: vec![beta; BETA_STAGES],
            total_epochs,
        }
    }

    pub fn beta0(&self) -> f64 {
        self.stage_values[0]
    }

    /// Stage of `epoch`: equal blocks of `total / stages` epochs, the last
    /// block absorbing the remainder.
    pub fn stage(&self, epoch: usize) -> usize {
        let stages = self.stage_values.len();
        let block = self.total_epochs / stages;
        if block == 0 {
            epoch.min(stages - 1)
        } else {
            (epoch / block).min(stages - 1)
        }
    }
}

pub fn anneal_beta(epoch: usize, schedule: &BetaSchedule) -> Result<f64> {
    if schedule.stage_values.is_empty() {
        return Err(Error::param("beta schedule has no stages"));
    }
    if epoch >= schedule.total_epochs {
        return Err(Error::param(format!(
            "epoch {epoch} outside schedule of {} epochs",
            schedule.total_epochs
        )));
    }
    Ok(schedule.stage_values[schedule.stage(epoch)])
}
