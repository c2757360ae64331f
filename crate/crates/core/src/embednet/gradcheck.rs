//! Finite-difference verification of the hand-written gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{discriminative_loss, total_loss, total_loss_and_grad, LossConfig, ModelParams};
use crate::derive_seed;
use crate::error::Result;
use crate::imagecore::{EmbeddingField, ImageGrid, LabelMap};

/// Absolute floor under the relative-error denominator, for gradients that
/// vanish identically (e.g. the embedding-head bias).
const FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub fixtures: usize,
    pub step: f64,
    /// Worst `‖a − n‖ / max(‖a‖, ‖n‖)` over fixtures for the embedding gradient.
    pub discriminative_max_rel_error: f64,
    /// Worst per-tensor relative error over fixtures for the parameter gradient.
    pub total_max_rel_error: f64,
}

fn norm_rel_error(a: &[f64], n: &[f64]) -> f64 {
    let l2 = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = l2(&mut a.iter().zip(n).map(|(x, y)| x - y));
    diff / l2(&mut a.iter().copied()).max(l2(&mut n.iter().copied())).max(FLOOR)
}

/// 16×16 image with `k` labelled vertical bands at the 8×8 head resolution.
fn fixture(seed: u64) -> Result<(ImageGrid, LabelMap)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(2..=3u32);
    let image = ImageGrid::new(16, 16, (0..256).map(|_| rng.random::<f64>()).collect())?;
    let labels = (0..64)
        .map(|i| {
            let c = i % 8;
            if c == 0 || rng.random_bool(0.1) {
                0
            } else {
                ((c as u32 - 1) * k) / 7 + 1
            }
        })
        .collect();
    Ok((image, LabelMap::new(8, 8, labels)?))
}

fn disc_error(labels: &LabelMap, cfg: &LossConfig, step: f64, rng: &mut ChaCha8Rng) -> Result<f64> {
    let (h, w) = labels.dims();
    let offsets: Vec<[f64; 3]> = (0..4).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
    let values = labels
        .labels()
        .iter()
        .flat_map(|&l| offsets[l as usize].map(|o| o + rng.random_range(-1.0..1.0)))
        .collect();
    let emb = EmbeddingField::new(h, w, 3, values)?;
    let (_, grad) = discriminative_loss(&emb, labels, cfg)?;
    let mut numeric = Vec::with_capacity(emb.values().len());
    for i in 0..emb.values().len() {
        let mut plus = emb.clone();
        plus.values_mut()[i] += step;
        let mut minus = emb.clone();
        minus.values_mut()[i] -= step;
        numeric.push((discriminative_loss(&plus, labels, cfg)?.0 - discriminative_loss(&minus, labels, cfg)?.0) / (2.0 * step));
    }
    Ok(norm_rel_error(grad.values(), &numeric))
}

fn total_error(params: &ModelParams, image: &ImageGrid, labels: &LabelMap, cfg: &LossConfig, step: f64) -> Result<f64> {
    let seg = labels.foreground();
    let (_, grad) = total_loss_and_grad(params, image, &seg, labels, cfg)?;
    let base = params.to_flat();
    let mut probe = params.clone();
    let mut numeric = vec![0.0; base.len()];
    for (i, slot) in numeric.iter_mut().enumerate() {
        let mut flat = base.clone();
        flat[i] = base[i] + step;
        probe.set_flat(&flat)?;
        let lp = total_loss(&probe, image, &seg, labels, cfg)?.total;
        flat[i] = base[i] - step;
        probe.set_flat(&flat)?;
        let lm = total_loss(&probe, image, &seg, labels, cfg)?.total;
        *slot = (lp - lm) / (2.0 * step);
    }
    let mut numeric_params = ModelParams::zeros();
    numeric_params.set_flat(&numeric)?;
    Ok(grad
        .named_tensors()
        .iter()
        .zip(numeric_params.named_tensors().iter())
        .map(|((_, _, a), (_, _, n))| norm_rel_error(a, n))
        .fold(0.0, f64::max))
}

/// Compare analytic and central-difference gradients of the discriminative
/// loss (w.r.t. embeddings) and of the total loss (w.r.t. every parameter)
/// on `fixtures` random 16×16 scenes with 2–3 instances.
pub fn run_gradcheck(fixtures: usize, seed: u64, step: f64, cfg: &LossConfig) -> Result<GradcheckReport> {
    let mut report = GradcheckReport {
        fixtures,
        step,
        discriminative_max_rel_error: 0.0,
        total_max_rel_error: 0.0,
    };
    for f in 0..fixtures {
        let fseed = derive_seed(seed, f as u64);
        let (image, labels) = fixture(fseed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(fseed ^ 1);
        let d = disc_error(&labels, cfg, step, &mut rng)?;
        let t = total_error(&ModelParams::init(fseed), &image, &labels, cfg, step)?;
        report.discriminative_max_rel_error = report.discriminative_max_rel_error.max(d);
        report.total_max_rel_error = report.total_max_rel_error.max(t);
    }
    Ok(report)
}
