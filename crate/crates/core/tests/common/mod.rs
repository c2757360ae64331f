#![allow(dead_code)]

use curvseg::embednet::{discriminative_loss, total_loss, total_loss_and_grad, LossConfig, ModelParams};
use curvseg::{EmbeddingField, ImageGrid, LabelMap, Mask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;

/// Gradients smaller than this are compared absolutely rather than relatively
/// (the embedding-head bias gradient, for one, is exactly zero).
pub const GRAD_FLOOR: f64 = 1e-6;

/// `‖a − n‖ / max(‖a‖, ‖n‖, GRAD_FLOOR)` for one gradient tensor.
pub fn norm_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let l2 = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = l2(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = l2(&mut analytic.iter().copied()).max(l2(&mut numeric.iter().copied()));
    diff / scale.max(GRAD_FLOOR)
}

/// Worst entrywise `|a − n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn entry_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(GRAD_FLOOR))
        .fold(0.0, f64::max)
}

/// Label map with `k` vertical bands plus a background border column.
pub fn band_labels(h: usize, w: usize, k: usize, rng: &mut ChaCha8Rng) -> LabelMap {
    let labels = (0..h * w)
        .map(|i| {
            let c = i % w;
            if c == 0 || rng.random_bool(0.1) {
                0
            } else {
                (((c - 1) * k) / (w - 1)) as u32 + 1
            }
        })
        .collect();
    LabelMap::new(h, w, labels).unwrap()
}

/// Random embeddings: a per-instance offset of size `spread` plus jitter.
pub fn random_embeddings(labels: &LabelMap, spread: f64, jitter: f64, rng: &mut ChaCha8Rng) -> EmbeddingField {
    let (h, w) = labels.dims();
    let offsets: Vec<[f64; 3]> = (0..8)
        .map(|_| std::array::from_fn(|_| rng.random_range(-spread..spread)))
        .collect();
    let mut values = Vec::with_capacity(h * w * 3);
    for &l in labels.labels() {
        for d in 0..3 {
            values.push(offsets[l as usize][d] + rng.random_range(-jitter..jitter));
        }
    }
    EmbeddingField::new(h, w, 3, values).unwrap()
}

/// Analytic discriminative-loss gradient and its central finite-difference
/// estimate with the given step.
pub fn disc_gradients(emb: &EmbeddingField, labels: &LabelMap, cfg: &LossConfig, step: f64) -> (Vec<f64>, Vec<f64>) {
    let (_, grad) = discriminative_loss(emb, labels, cfg).unwrap();
    let numeric = (0..emb.values().len())
        .map(|i| {
            let mut plus = emb.clone();
            plus.values_mut()[i] += step;
            let mut minus = emb.clone();
            minus.values_mut()[i] -= step;
            let lp = discriminative_loss(&plus, labels, cfg).unwrap().0;
            let lm = discriminative_loss(&minus, labels, cfg).unwrap().0;
            (lp - lm) / (2.0 * step)
        })
        .collect();
    (grad.values().to_vec(), numeric)
}

pub struct NetFixture {
    pub params: ModelParams,
    pub image: ImageGrid,
    pub seg_target: Mask,
    pub labels: LabelMap,
}

/// Random 16×16 image with 2–3 instances at the 8×8 head resolution.
pub fn net_fixture(seed: u64) -> NetFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(2..=3);
    let image = ImageGrid::new(16, 16, (0..256).map(|_| rng.random::<f64>()).collect()).unwrap();
    let labels = band_labels(8, 8, k, &mut rng);
    NetFixture {
        params: ModelParams::init(seed),
        image,
        seg_target: labels.foreground(),
        labels,
    }
}

/// Analytic parameter gradient of the total loss and its central
/// finite-difference estimate, both flattened in parameter order.
pub fn total_gradients(fx: &NetFixture, cfg: &LossConfig, step: f64) -> (ModelParams, ModelParams) {
    let (_, grad) = total_loss_and_grad(&fx.params, &fx.image, &fx.seg_target, &fx.labels, cfg).unwrap();
    let base = fx.params.to_flat();
    let mut params = fx.params.clone();
    let mut numeric = vec![0.0; base.len()];
    for (i, slot) in numeric.iter_mut().enumerate() {
        let mut flat = base.clone();
        flat[i] = base[i] + step;
        params.set_flat(&flat).unwrap();
        let lp = total_loss(&params, &fx.image, &fx.seg_target, &fx.labels, cfg).unwrap().total;
        flat[i] = base[i] - step;
        params.set_flat(&flat).unwrap();
        let lm = total_loss(&params, &fx.image, &fx.seg_target, &fx.labels, cfg).unwrap().total;
        *slot = (lp - lm) / (2.0 * step);
    }
    let mut numeric_params = ModelParams::zeros();
    numeric_params.set_flat(&numeric).unwrap();
    (grad, numeric_params)
}

/// Worst per-tensor norm relative error of the total-loss gradient.
pub fn total_tensor_error(analytic: &ModelParams, numeric: &ModelParams) -> f64 {
    analytic
        .named_tensors()
        .iter()
        .zip(numeric.named_tensors().iter())
        .map(|((_, _, a), (_, _, n))| norm_rel_error(a, n))
        .fold(0.0, f64::max)
}

/// Adjusted Rand index between two labelings of the same points.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0usize; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let pairs = |c: usize| (c * c.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().flatten().map(|&c| pairs(c)).sum();
    let rows: f64 = table.iter().map(|r| pairs(r.iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| pairs(table.iter().map(|r| r[j]).sum())).sum();
    let expected = rows * cols / pairs(a.len());
    let max = (rows + cols) / 2.0;
    if max == expected {
        // Both labelings are a single cluster (or all singletons).
        return if index == expected { 1.0 } else { 0.0 };
    }
    (index - expected) / (max - expected)
}

/// `k` blobs of `per_blob` points each, centers on distinct axes at least
/// `separation` apart, points within `radius` of their center.
pub fn blobs(k: usize, per_blob: usize, separation: f64, radius: f64, rng: &mut ChaCha8Rng) -> (Vec<[f64; 5]>, Vec<[f64; 5]>, Vec<usize>) {
    let centers: Vec<[f64; 5]> = (0..k)
        .map(|i| std::array::from_fn(|d| if d == i % 5 { separation * (1 + i / 5) as f64 } else { 0.0 }))
        .collect();
    let mut points = Vec::new();
    let mut truth = Vec::new();
    for (ci, c) in centers.iter().enumerate() {
        for _ in 0..per_blob {
            let dir: [f64; 5] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let len = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            let r = radius * rng.random::<f64>();
            points.push(std::array::from_fn(|d| c[d] + dir[d] / len * r));
            truth.push(ci);
        }
    }
    (points, centers, truth)
}

/// Ground-truth network outputs for an instance set: probability 1 on the
/// foreground, a constant embedding per instance (`spacing` apart along the
/// axes), and the mean of the involved embeddings on shared pixels.
pub fn oracle_maps(gt: &curvseg::InstanceSet, spacing: f64) -> (ImageGrid, EmbeddingField) {
    let (h, w) = gt.dims();
    let code = |k: usize| -> [f64; 3] { std::array::from_fn(|d| if d == k % 3 { spacing * (1 + k / 3) as f64 } else { 0.0 }) };
    let mut prob = vec![0.0; h * w];
    let mut emb = vec![0.0; h * w * 3];
    for i in 0..h * w {
        let members: Vec<usize> = (0..gt.len()).filter(|&k| gt.masks()[k].bits()[i]).collect();
        if members.is_empty() {
            continue;
        }
        prob[i] = 1.0;
        for &k in &members {
            for (d, v) in code(k).iter().enumerate() {
                emb[i * 3 + d] += v / members.len() as f64;
            }
        }
    }
    (ImageGrid::new(h, w, prob).unwrap(), EmbeddingField::new(h, w, 3, emb).unwrap())
}

/// Same instance sets up to a permutation of their masks.
pub fn same_instances(a: &curvseg::InstanceSet, b: &curvseg::InstanceSet) -> bool {
    let mut x: Vec<&[bool]> = a.masks().iter().map(|m| m.bits()).collect();
    let mut y: Vec<&[bool]> = b.masks().iter().map(|m| m.bits()).collect();
    x.sort();
    y.sort();
    a.dims() == b.dims() && x == y
}
