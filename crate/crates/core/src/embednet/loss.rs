//! Dice loss and the discriminative (pull/push) embedding loss.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{EmbeddingField, ImageGrid, LabelMap, Mask};

/// Dice smoothing constant.
pub const DICE_EPS: f64 = 1.0;

/// Margins and weights of the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Pull margin: embeddings closer than this to their cluster mean are not penalized.
    pub delta_v: f64,
    /// Push margin: cluster means farther apart than this are not penalized.
    pub delta_d: f64,
    pub w_var: f64,
    pub w_dist: f64,
    pub w_dice: f64,
    pub w_disc: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            delta_v: 0.5,
            delta_d: 3.0,
            w_var: 1.0,
            w_dist: 1.0,
            w_dice: 0.3,
            w_disc: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta_v.is_finite() && self.delta_v > 0.0) {
            return Err(Error::invalid("delta_v must be positive"));
        }
        if !(self.delta_d.is_finite() && self.delta_d > 2.0 * self.delta_v) {
            return Err(Error::invalid("delta_d must exceed 2 * delta_v"));
        }
        let weights = [self.w_var, self.w_dist, self.w_dice, self.w_disc];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("loss weights must be finite and non-negative"));
        }
        Ok(())
    }
}

/// `1 - (2 Σ p t + ε) / (Σ p + Σ t + ε)` with ε = [`DICE_EPS`].
pub fn dice_loss(prob: &ImageGrid, target: &Mask) -> Result<f64> {
    dice_loss_with_grad(prob, target).map(|(l, _)| l)
}

pub(crate) fn dice_loss_with_grad(prob: &ImageGrid, target: &Mask) -> Result<(f64, Vec<f64>)> {
    if prob.dims() != target.dims() {
        return Err(Error::invalid(format!(
            "dice: prob dims {:?} vs target dims {:?}",
            prob.dims(),
            target.dims()
        )));
    }
    let mut inter = 0.0;
    let mut sum_p = 0.0;
    let mut sum_t = 0.0;
    for (&p, &t) in prob.values().iter().zip(target.bits()) {
        sum_p += p;
        if t {
            inter += p;
            sum_t += 1.0;
        }
    }
    let num = 2.0 * inter + DICE_EPS;
    let den = sum_p + sum_t + DICE_EPS;
    let grad = target
        .bits()
        .iter()
        .map(|&t| {
            let t = if t { 1.0 } else { 0.0 };
            -(2.0 * t * den - num) / (den * den)
        })
        .collect();
    Ok((1.0 - num / den, grad))
}

fn hinge(x: f64) -> f64 {
    x.max(0.0)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Pull/push hinge loss over the labelled (non-zero) pixels.
///
/// Returns `w_var * L_var + w_dist * L_dist` and its exact gradient with
/// respect to every embedding vector, cluster means included. With no
/// labelled pixels the loss and gradient are zero.
pub fn discriminative_loss(
    emb: &EmbeddingField,
    labels: &LabelMap,
    cfg: &LossConfig,
) -> Result<(f64, EmbeddingField)> {
    if emb.dims() != labels.dims() {
        return Err(Error::invalid(format!(
            "embedding dims {:?} vs label dims {:?}",
            emb.dims(),
            labels.dims()
        )));
    }
    let dim = emb.dim();
    let (h, w) = emb.dims();
    let mut grad = vec![0.0; h * w * dim];

    let mut clusters: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.labels().iter().enumerate() {
        if l != 0 {
            clusters.entry(l).or_default().push(i);
        }
    }
    let c = clusters.len();
    if c == 0 {
        return Ok((0.0, EmbeddingField::new(h, w, dim, grad)?));
    }
    let x = emb.values();
    let members: Vec<&Vec<usize>> = clusters.values().collect();
    let means: Vec<Vec<f64>> = members
        .iter()
        .map(|idx| {
            let mut m = vec![0.0; dim];
            for &i in idx.iter() {
                for (k, mk) in m.iter_mut().enumerate() {
                    *mk += x[i * dim + k];
                }
            }
            m.iter_mut().for_each(|v| *v /= idx.len() as f64);
            m
        })
        .collect();

    // dL/dμ_c, pushed to members through μ_c = mean(x_i) at the end.
    let mut d_mean = vec![vec![0.0; dim]; c];
    let mut diff = vec![0.0; dim];

    let mut l_var = 0.0;
    for (ci, idx) in members.iter().enumerate() {
        let n_c = idx.len() as f64;
        let mut cluster_sum = 0.0;
        for &i in idx.iter() {
            for k in 0..dim {
                diff[k] = x[i * dim + k] - means[ci][k];
            }
            let d = norm(&diff);
            let active = hinge(d - cfg.delta_v);
            cluster_sum += active * active;
            if active > 0.0 && d > 0.0 {
                let coef = cfg.w_var * 2.0 * active / (c as f64 * n_c * d);
                for k in 0..dim {
                    grad[i * dim + k] += coef * diff[k];
                    d_mean[ci][k] -= coef * diff[k];
                }
            }
        }
        l_var += cluster_sum / n_c;
    }
    l_var /= c as f64;

    let mut l_dist = 0.0;
    if c > 1 {
        let pairs = (c * (c - 1)) as f64;
        for a in 0..c {
            for b in 0..c {
                if a == b {
                    continue;
                }
                for k in 0..dim {
                    diff[k] = means[a][k] - means[b][k];
                }
                let d = norm(&diff);
                let active = hinge(cfg.delta_d - d);
                l_dist += active * active;
                if active > 0.0 && d > 0.0 {
                    // Ordered pair (a, b) moves both means.
                    let coef = cfg.w_dist * 2.0 * active / (pairs * d);
                    for k in 0..dim {
                        d_mean[a][k] -= coef * diff[k];
                        d_mean[b][k] += coef * diff[k];
                    }
                }
            }
        }
        l_dist /= pairs;
    }

    for (ci, idx) in members.iter().enumerate() {
        let n_c = idx.len() as f64;
        for &i in idx.iter() {
            for k in 0..dim {
                grad[i * dim + k] += d_mean[ci][k] / n_c;
            }
        }
    }
    let loss = cfg.w_var * l_var + cfg.w_dist * l_dist;
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("discriminative loss is not finite ({loss})")));
    }
    Ok((loss, EmbeddingField::new(h, w, dim, grad)?))
}
