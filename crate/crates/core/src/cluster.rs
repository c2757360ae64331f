//! Coordinate augmentation and flat-kernel mean shift over foreground pixels.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{EmbeddingField, Mask};

/// Learned embedding dims plus two spatial coordinates.
pub const AUGMENTED_DIM: usize = 5;

pub type Vector = [f64; AUGMENTED_DIM];

/// Foreground pixels in raster order with their 5-d vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ForegroundEmbeddings {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<(usize, usize)>,
    pub vectors: Vec<Vector>,
}

impl ForegroundEmbeddings {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

/// Append `(row / (H-1), col / (W-1)) * coord_scale` to the 3-d embedding of
/// every foreground pixel.
pub fn augment_coordinates(emb: &EmbeddingField, fg_mask: &Mask, coord_scale: f64) -> Result<ForegroundEmbeddings> {
    if emb.dims() != fg_mask.dims() {
        return Err(Error::invalid(format!(
            "embedding dims {:?} vs mask dims {:?}",
            emb.dims(),
            fg_mask.dims()
        )));
    }
    if emb.dim() != AUGMENTED_DIM - 2 {
        return Err(Error::invalid(format!(
            "expected {}-d embeddings, got {}",
            AUGMENTED_DIM - 2,
            emb.dim()
        )));
    }
    let (h, w) = emb.dims();
    let norm = |i: usize, n: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
    let mut pixels = Vec::new();
    let mut vectors = Vec::new();
    for idx in fg_mask.indices() {
        let (r, c) = (idx / w, idx % w);
        let e = emb.vector(r, c);
        pixels.push((r, c));
        vectors.push([e[0], e[1], e[2], norm(r, h) * coord_scale, norm(c, w) * coord_scale]);
    }
    Ok(ForegroundEmbeddings {
        height: h,
        width: w,
        pixels,
        vectors,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MeanShiftConfig {
    /// Flat kernel radius.
    pub bandwidth: f64,
    pub max_iterations: usize,
    pub convergence_tol: f64,
    /// Converged modes closer than this are merged.
    pub merge_radius: f64,
    /// At most this many seeds; larger inputs are subsampled.
    pub seed_cap: usize,
    pub rng_seed: u64,
    /// Multiplier on the normalized pixel coordinates.
    pub coord_scale: f64,
    /// Clusters owning fewer than this fraction of the points are dissolved
    /// into their nearest neighbours. The largest cluster always survives.
    pub min_cluster_fraction: f64,
}

impl Default for MeanShiftConfig {
    fn default() -> Self {
        let bandwidth = 1.5 * 0.5;
        Self {
            bandwidth,
            max_iterations: 300,
            convergence_tol: 1e-6,
            merge_radius: bandwidth / 2.0,
            seed_cap: 1024,
            rng_seed: 0,
            coord_scale: 1.0,
            min_cluster_fraction: 0.05,
        }
    }
}

impl MeanShiftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth.is_finite() && self.bandwidth > 0.0) {
            return Err(Error::invalid("bandwidth must be positive"));
        }
        if !(self.merge_radius.is_finite() && self.merge_radius > 0.0) {
            return Err(Error::invalid("merge_radius must be positive"));
        }
        if self.seed_cap == 0 {
            return Err(Error::invalid("seed_cap must be at least 1"));
        }
        if !(self.convergence_tol.is_finite() && self.convergence_tol >= 0.0) {
            return Err(Error::invalid("convergence_tol must be non-negative"));
        }
        if !(self.coord_scale.is_finite() && self.coord_scale >= 0.0) {
            return Err(Error::invalid("coord_scale must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.min_cluster_fraction) {
            return Err(Error::invalid("min_cluster_fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Cluster centers and the hard nearest-center assignment of every point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub centers: Vec<Vector>,
    pub assignment: Vec<usize>,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centers.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.centers.len()];
        for &a in &self.assignment {
            counts[a] += 1;
        }
        counts
    }
}

pub(crate) fn dist_sq(a: &Vector, b: &Vector) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean of the points within `bandwidth` of `z`, with the window population.
pub fn shift_once(points: &[Vector], z: &Vector, bandwidth: f64) -> Option<(Vector, usize)> {
    let h2 = bandwidth * bandwidth;
    // Offsets from `z` keep the mean of identical points exact.
    let mut offset = [0.0; AUGMENTED_DIM];
    let mut n = 0usize;
    for p in points {
        if dist_sq(p, z) <= h2 {
            for ((o, v), zi) in offset.iter_mut().zip(p).zip(z) {
                *o += v - zi;
            }
            n += 1;
        }
    }
    (n > 0).then(|| {
        let mut mean = *z;
        for (m, o) in mean.iter_mut().zip(offset) {
            *m += o / n as f64;
        }
        (mean, n)
    })
}

fn climb(points: &[Vector], start: Vector, cfg: &MeanShiftConfig) -> (Vector, usize) {
    let mut z = start;
    let mut support = 0;
    for _ in 0..cfg.max_iterations {
        let Some((next, n)) = shift_once(points, &z, cfg.bandwidth) else {
            break;
        };
        let moved = dist_sq(&next, &z).sqrt();
        z = next;
        support = n;
        if moved < cfg.convergence_tol {
            break;
        }
    }
    (z, support)
}

/// Index of the nearest center; ties go to the lowest index.
pub fn nearest(centers: &[Vector], v: &Vector) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centers.iter().enumerate() {
        let d = dist_sq(c, v);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

fn lexicographic(a: &Vector, b: &Vector) -> std::cmp::Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}

/// Greedy merge of modes, strongest first. Each surviving center is the
/// centroid of the modes folded into it.
fn merge_modes(mut modes: Vec<(Vector, usize)>, radius: f64) -> Vec<(Vector, usize)> {
    modes.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| lexicographic(&a.0, &b.0)));
    let r2 = radius * radius;
    let mut groups: Vec<(Vector, Vec<Vector>, usize)> = Vec::new();
    for (mode, support) in modes {
        match groups.iter_mut().find(|(anchor, _, _)| dist_sq(anchor, &mode) <= r2) {
            Some((_, members, _)) => members.push(mode),
            None => groups.push((mode, vec![mode], support)),
        }
    }
    groups
        .into_iter()
        .map(|(anchor, members, support)| {
            let mut c = anchor;
            for m in &members {
                for ((ci, v), a) in c.iter_mut().zip(m).zip(&anchor) {
                    *ci += (v - a) / members.len() as f64;
                }
            }
            (c, support)
        })
        .collect()
}

/// A mode made of pixels shared by crossing instances: its learned-embedding
/// part sits at the mean of two or three larger clusters. Such pixels are
/// handed back to those clusters and recovered by intersection resolution.
fn is_crossing_mode(centers: &[Vector], counts: &[usize], i: usize, radius: f64) -> bool {
    const EMB: usize = AUGMENTED_DIM - 2;
    let parents: Vec<usize> = (0..centers.len()).filter(|&j| j != i && counts[j] > counts[i]).collect();
    let near = |members: &[usize]| {
        let d2: f64 = (0..EMB)
            .map(|d| {
                let mean = members.iter().map(|&j| centers[j][d]).sum::<f64>() / members.len() as f64;
                (centers[i][d] - mean).powi(2)
            })
            .sum();
        d2 <= radius * radius
    };
    for (x, &a) in parents.iter().enumerate() {
        for (y, &b) in parents.iter().enumerate().skip(x + 1) {
            if near(&[a, b]) || parents[y + 1..].iter().any(|&c| near(&[a, b, c])) {
                return true;
            }
        }
    }
    false
}

/// Flat-kernel mean shift: climb from each seed, merge nearby modes, polish
/// the merged centers back onto fixed points, dissolve undersized clusters and
/// crossing modes, and assign every point to its nearest surviving center.
pub fn mean_shift(fe: &ForegroundEmbeddings, cfg: &MeanShiftConfig) -> Result<ClusterModel> {
    cfg.validate()?;
    let points = &fe.vectors;
    if points.is_empty() {
        return Err(Error::invalid("mean shift needs at least one point"));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("mean shift input must be finite"));
    }
    let seeds: Vec<Vector> = if points.len() <= cfg.seed_cap {
        points.clone()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        let mut idx = sample(&mut rng, points.len(), cfg.seed_cap).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| points[i]).collect()
    };

    let modes: Vec<(Vector, usize)> = seeds.par_iter().map(|&s| climb(points, s, cfg)).collect();
    let mut centers = merge_modes(modes, cfg.merge_radius);
    // Centroids of merged modes need not be fixed points; re-climb and re-merge.
    for _ in 0..8 {
        let polished: Vec<(Vector, usize)> = centers.par_iter().map(|&(c, _)| climb(points, c, cfg)).collect();
        let merged = merge_modes(polished.clone(), cfg.merge_radius);
        let stable = merged.len() == polished.len();
        centers = if stable { polished } else { merged };
        if stable {
            break;
        }
    }
    centers.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| lexicographic(&a.0, &b.0)));
    let mut centers: Vec<Vector> = centers.into_iter().map(|(c, _)| c).collect();

    let min_size = (cfg.min_cluster_fraction * points.len() as f64).ceil() as usize;
    loop {
        let assignment: Vec<usize> = points.iter().map(|p| nearest(&centers, p)).collect();
        let mut counts = vec![0usize; centers.len()];
        for &a in &assignment {
            counts[a] += 1;
        }
        let largest = (0..centers.len()).max_by_key(|&i| (counts[i], std::cmp::Reverse(i))).unwrap_or(0);
        let weakest = (0..centers.len())
            .filter(|&i| i != largest && (counts[i] < min_size || is_crossing_mode(&centers, &counts, i, cfg.merge_radius)))
            .min_by_key(|&i| (counts[i], i));
        match weakest {
            Some(i) => {
                centers.remove(i);
            }
            None => {
                // Renumber so that center order follows first appearance in raster order.
                let mut order: Vec<usize> = Vec::with_capacity(centers.len());
                for &a in &assignment {
                    if !order.contains(&a) {
                        order.push(a);
                    }
                }
                let centers: Vec<Vector> = order.iter().map(|&i| centers[i]).collect();
                let assignment = points.iter().map(|p| nearest(&centers, p)).collect();
                return Ok(ClusterModel { centers, assignment });
            }
        }
    }
}
