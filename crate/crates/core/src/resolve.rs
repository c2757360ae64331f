//! Intersection resolution.
//!
//! For a pixel with sorted center distances `d1 <= d2 <= ... <= dn`, the
//! similarity to the runner-up cluster `i` is
//! `s_i = exp(-β d1) / (exp(-β d1) + exp(-β di))`. Whenever `s_i < a` the
//! pixel is considered shared by clusters 1 and `i` and is assigned to both.
//! Since `s_i = 1 / (1 + exp(-β (di - d1)))`, the rule is equivalent to the
//! gap test `di - d1 < ln(a / (1 - a)) / β`.

use serde::{Deserialize, Serialize};

use crate::cluster::{dist_sq, ClusterModel, ForegroundEmbeddings, Vector};
use crate::error::{Error, Result};
use crate::imagecore::{ImageGrid, InstanceSet, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResolveConfig {
    pub beta: f64,
    pub threshold_a: f64,
}

impl Default for ResolveConfig {
    fn default() -> Self {
        Self {
            beta: 2.0,
            threshold_a: 0.7,
        }
    }
}

impl ResolveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::invalid("beta must be positive"));
        }
        if !(self.threshold_a > 0.5 && self.threshold_a < 1.0) {
            return Err(Error::invalid("threshold_a must lie in (0.5, 1)"));
        }
        Ok(())
    }

    /// Largest distance gap that still counts as an intersection.
    pub fn gap_threshold(&self) -> f64 {
        (self.threshold_a / (1.0 - self.threshold_a)).ln() / self.beta
    }
}

/// `s_2..s_n` for ascending distances `d_1..d_n`, in the overflow-free
/// logistic form.
pub fn similarity_scores(distances: &[f64], beta: f64) -> Result<Vec<f64>> {
    if distances.len() < 2 {
        return Err(Error::invalid("need at least two distances"));
    }
    if distances.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
        return Err(Error::invalid("distances must be finite and non-negative"));
    }
    if distances.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::invalid("distances must be sorted ascending"));
    }
    let d1 = distances[0];
    Ok(distances[1..].iter().map(|&di| logistic(beta * (di - d1))).collect())
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Clusters a vector belongs to, nearest first: the nearest center plus every
/// center whose similarity score falls below the threshold. Also returns the
/// smallest score seen (1.0 when there is a single center).
fn resolve_with_score(v: &Vector, centers: &[Vector], cfg: &ResolveConfig) -> (Vec<usize>, f64) {
    let mut ranked: Vec<(f64, usize)> = centers.iter().enumerate().map(|(i, c)| (dist_sq(v, c).sqrt(), i)).collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let (d1, nearest) = ranked[0];
    let mut members = vec![nearest];
    let mut min_score = 1.0f64;
    for &(di, i) in &ranked[1..] {
        let s = logistic(cfg.beta * (di - d1));
        min_score = min_score.min(s);
        if s < cfg.threshold_a {
            members.push(i);
        }
    }
    (members, min_score)
}

/// Cluster indices a pixel embedding belongs to; the nearest cluster comes first.
pub fn resolve_pixel(embedding: &Vector, centers: &[Vector], cfg: &ResolveConfig) -> Result<Vec<usize>> {
    if centers.is_empty() {
        return Err(Error::invalid("resolve_pixel needs at least one center"));
    }
    Ok(resolve_with_score(embedding, centers, cfg).0)
}

/// Instance masks plus the per-pixel minimum similarity score.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolution {
    pub instances: InstanceSet,
    /// Min over `i` of `s_i` at foreground pixels, 1.0 elsewhere.
    pub min_similarity: ImageGrid,
}

/// One mask per cluster; pixel `p` is set in mask `c` iff `c` is in
/// `resolve_pixel(p)`.
pub fn build_instances(fe: &ForegroundEmbeddings, cm: &ClusterModel, cfg: &ResolveConfig) -> Result<Resolution> {
    cfg.validate()?;
    let (h, w) = (fe.height, fe.width);
    if fe.pixels.len() != fe.vectors.len() {
        return Err(Error::invalid("foreground pixel and vector counts differ"));
    }
    if !fe.is_empty() && cm.centers.is_empty() {
        return Err(Error::invalid("no cluster centers for a non-empty foreground"));
    }
    let mut masks = vec![Mask::empty(h, w); cm.centers.len()];
    let mut min_similarity = vec![1.0; h * w];
    for (&(r, c), v) in fe.pixels.iter().zip(&fe.vectors) {
        let (members, score) = resolve_with_score(v, &cm.centers, cfg);
        for k in members {
            masks[k].set(r, c, true);
        }
        min_similarity[r * w + c] = score;
    }
    Ok(Resolution {
        instances: InstanceSet::new(h, w, masks)?,
        min_similarity: ImageGrid::new(h, w, min_similarity)?,
    })
}
