//! Semantic and instance metrics, and the connected-components baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{InstanceSet, Mask};

/// IoU thresholds 0.20, 0.25, ..., 0.60.
pub fn iou_thresholds() -> Vec<f64> {
    (0..9).map(|k| (20 + 5 * k) as f64 / 100.0).collect()
}

fn check_same(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!("dims {a:?} and {b:?} differ")));
    }
    Ok(())
}

/// `|a ∩ b| / |a ∪ b|`; two empty masks score 1.
pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64> {
    check_same(a.dims(), b.dims())?;
    let inter = a.intersection_count(b);
    let union = a.count() + b.count() - inter;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// `2 |a ∩ b| / (|a| + |b|)`; two empty masks score 1.
pub fn mask_dice(a: &Mask, b: &Mask) -> Result<f64> {
    check_same(a.dims(), b.dims())?;
    let inter = a.intersection_count(b);
    let total = a.count() + b.count();
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl MatchCounts {
    /// Precision with the empty-set conventions (nothing predicted, nothing present → 1).
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp, self.fn_ == 0)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_, self.fp == 0)
    }

    fn add(&mut self, other: &MatchCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

fn ratio(num: usize, den: usize, other_side_empty: bool) -> f64 {
    if den == 0 {
        if other_side_empty {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdScore {
    pub t: f64,
    pub ap: f64,
    pub ar: f64,
}

/// Instance scores of a single image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceScores {
    pub ap: f64,
    pub ar: f64,
    pub per_threshold: Vec<ThresholdScore>,
    pub counts: Vec<MatchCounts>,
}

/// Pairwise IoU, `[pred][gt]`.
pub fn iou_matrix(pred: &InstanceSet, gt: &InstanceSet) -> Result<Vec<Vec<f64>>> {
    check_same(pred.dims(), gt.dims())?;
    pred.masks()
        .iter()
        .map(|p| gt.masks().iter().map(|g| mask_iou(p, g)).collect())
        .collect()
}

/// Greedy one-to-one matching in descending IoU order among pairs with IoU ≥ `t`.
/// Ties go to the lowest (pred, gt) index pair.
pub fn match_at(ious: &[Vec<f64>], n_gt: usize, t: f64) -> MatchCounts {
    let pred_rank: Vec<usize> = (0..ious.len()).collect();
    let gt_rank: Vec<usize> = (0..n_gt).collect();
    match_ranked(ious, &pred_rank, &gt_rank, t)
}

fn match_ranked(ious: &[Vec<f64>], pred_rank: &[usize], gt_rank: &[usize], t: f64) -> MatchCounts {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (p, row) in ious.iter().enumerate() {
        for (g, &iou) in row.iter().enumerate() {
            if iou >= t && iou > 0.0 {
                pairs.push((iou, p, g));
            }
        }
    }
    pairs.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then(pred_rank[a.1].cmp(&pred_rank[b.1]))
            .then(gt_rank[a.2].cmp(&gt_rank[b.2]))
    });
    let mut pred_used = vec![false; ious.len()];
    let mut gt_used = vec![false; gt_rank.len()];
    let mut tp = 0;
    for (_, p, g) in pairs {
        if !pred_used[p] && !gt_used[g] {
            pred_used[p] = true;
            gt_used[g] = true;
            tp += 1;
        }
    }
    MatchCounts {
        tp,
        fp: ious.len() - tp,
        fn_: gt_rank.len() - tp,
    }
}

/// Position of each mask in the order of mask contents. Used to break IoU ties
/// independently of instance order; identical masks share a rank.
fn content_rank(set: &InstanceSet) -> Vec<usize> {
    let masks = set.masks();
    let mut order: Vec<usize> = (0..masks.len()).collect();
    order.sort_by(|&a, &b| masks[a].bits().cmp(masks[b].bits()));
    let mut rank = vec![0; masks.len()];
    for (pos, &i) in order.iter().enumerate() {
        rank[i] = if pos > 0 && masks[order[pos - 1]].bits() == masks[i].bits() {
            rank[order[pos - 1]]
        } else {
            pos
        };
    }
    rank
}

/// Per-threshold precision/recall of `pred` against `gt` and their means.
/// IoU ties are broken by mask content, so the result does not depend on the
/// order of instances in either set.
pub fn instance_ap_ar(pred: &InstanceSet, gt: &InstanceSet, thresholds: &[f64]) -> Result<InstanceScores> {
    let ious = iou_matrix(pred, gt)?;
    let (pred_rank, gt_rank) = (content_rank(pred), content_rank(gt));
    let counts: Vec<MatchCounts> = thresholds
        .iter()
        .map(|&t| match_ranked(&ious, &pred_rank, &gt_rank, t))
        .collect();
    Ok(scores_from_counts(thresholds, counts))
}

fn scores_from_counts(thresholds: &[f64], counts: Vec<MatchCounts>) -> InstanceScores {
    let per_threshold: Vec<ThresholdScore> = thresholds
        .iter()
        .zip(&counts)
        .map(|(&t, c)| ThresholdScore {
            t,
            ap: c.precision(),
            ar: c.recall(),
        })
        .collect();
    let n = per_threshold.len().max(1) as f64;
    InstanceScores {
        ap: per_threshold.iter().map(|s| s.ap).sum::<f64>() / n,
        ar: per_threshold.iter().map(|s| s.ar).sum::<f64>() / n,
        per_threshold,
        counts,
    }
}

/// Per-image macro averages, reported alongside the micro-averaged values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroAverages {
    pub iou: f64,
    pub dice: f64,
    pub ap: f64,
    pub ar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCounts {
    pub t: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Dataset-level report. Semantic IoU/Dice and instance counts are pooled over
/// images before dividing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub iou: f64,
    pub dice: f64,
    pub ap: f64,
    pub ar: f64,
    pub per_threshold: Vec<ThresholdScore>,
    pub counts: CountsSummary,
    pub images: usize,
    #[serde(rename = "macro")]
    pub macro_avg: MacroAverages,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountsSummary {
    pub per_threshold: Vec<ThresholdCounts>,
}

/// One image's row in an evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub iou: f64,
    pub dice: f64,
    pub ap: f64,
    pub ar: f64,
    pub predicted_instances: usize,
    pub gt_instances: usize,
}

/// Accumulates per-image results into a micro-averaged [`MetricReport`].
#[derive(Debug, Clone)]
pub struct MetricAccumulator {
    thresholds: Vec<f64>,
    inter: usize,
    union: usize,
    sum_sizes: usize,
    counts: Vec<MatchCounts>,
    rows: Vec<ImageScores>,
}

impl MetricAccumulator {
    pub fn new(thresholds: Vec<f64>) -> Self {
        let counts = vec![MatchCounts::default(); thresholds.len()];
        Self {
            thresholds,
            inter: 0,
            union: 0,
            sum_sizes: 0,
            counts,
            rows: Vec::new(),
        }
    }

    /// Score one image. Semantic masks are the unions of the instance sets.
    pub fn add(&mut self, pred: &InstanceSet, gt: &InstanceSet) -> Result<ImageScores> {
        self.add_with_semantic(pred, &pred.union(), gt)
    }

    pub fn add_with_semantic(&mut self, pred: &InstanceSet, pred_semantic: &Mask, gt: &InstanceSet) -> Result<ImageScores> {
        let gt_semantic = gt.union();
        check_same(pred_semantic.dims(), gt_semantic.dims())?;
        let scores = instance_ap_ar(pred, gt, &self.thresholds)?;
        let inter = pred_semantic.intersection_count(&gt_semantic);
        let (a, b) = (pred_semantic.count(), gt_semantic.count());
        self.inter += inter;
        self.union += a + b - inter;
        self.sum_sizes += a + b;
        for (acc, c) in self.counts.iter_mut().zip(&scores.counts) {
            acc.add(c);
        }
        let row = ImageScores {
            iou: mask_iou(pred_semantic, &gt_semantic)?,
            dice: mask_dice(pred_semantic, &gt_semantic)?,
            ap: scores.ap,
            ar: scores.ar,
            predicted_instances: pred.len(),
            gt_instances: gt.len(),
        };
        self.rows.push(row.clone());
        Ok(row)
    }

    pub fn rows(&self) -> &[ImageScores] {
        &self.rows
    }

    pub fn finish(&self) -> MetricReport {
        let scores = scores_from_counts(&self.thresholds, self.counts.clone());
        let n = self.rows.len();
        let mean = |f: fn(&ImageScores) -> f64| {
            if n == 0 {
                1.0
            } else {
                self.rows.iter().map(f).sum::<f64>() / n as f64
            }
        };
        MetricReport {
            iou: if self.union == 0 { 1.0 } else { self.inter as f64 / self.union as f64 },
            dice: if self.sum_sizes == 0 {
                1.0
            } else {
                2.0 * self.inter as f64 / self.sum_sizes as f64
            },
            ap: scores.ap,
            ar: scores.ar,
            per_threshold: scores.per_threshold,
            counts: CountsSummary {
                per_threshold: self
                    .thresholds
                    .iter()
                    .zip(&self.counts)
                    .map(|(&t, c)| ThresholdCounts {
                        t,
                        tp: c.tp,
                        fp: c.fp,
                        fn_: c.fn_,
                    })
                    .collect(),
            },
            images: n,
            macro_avg: MacroAverages {
                iou: mean(|r| r.iou),
                dice: mean(|r| r.dice),
                ap: mean(|r| r.ap),
                ar: mean(|r| r.ar),
            },
        }
    }
}

/// 8-connected components, one mask per component, ordered by the raster
/// position of each component's first pixel.
pub fn connected_components(fg: &Mask) -> InstanceSet {
    let (h, w) = fg.dims();
    let mut label = vec![usize::MAX; h * w];
    let mut masks = Vec::new();
    let mut stack = Vec::new();
    for start in fg.indices() {
        if label[start] != usize::MAX {
            continue;
        }
        let id = masks.len();
        let mut mask = Mask::empty(h, w);
        label[start] = id;
        stack.push(start);
        while let Some(i) = stack.pop() {
            mask.set_index(i, true);
            let (r, c) = ((i / w) as isize, (i % w) as isize);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let j = nr as usize * w + nc as usize;
                    if fg.bits()[j] && label[j] == usize::MAX {
                        label[j] = id;
                        stack.push(j);
                    }
                }
            }
        }
        masks.push(mask);
    }
    InstanceSet::new(h, w, masks).expect("masks share the input dims")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(h: usize, w: usize, idx: &[usize]) -> Mask {
        let mut m = Mask::empty(h, w);
        for &i in idx {
            m.set_index(i, true);
        }
        m
    }

    #[test]
    fn thresholds_grid() {
        let t = iou_thresholds();
        assert_eq!(t.len(), 9);
        assert_eq!(t[0], 0.2);
        assert_eq!(t[8], 0.6);
        assert_eq!(t[4], 0.4);
    }

    #[test]
    fn iou_and_dice_counting() {
        let a = mask_from(5, 5, &(0..10).collect::<Vec<_>>());
        let b = mask_from(5, 5, &(5..15).collect::<Vec<_>>());
        assert!((mask_iou(&a, &b).unwrap() - 5.0 / 15.0).abs() < 1e-15);
        assert_eq!(mask_dice(&a, &b).unwrap(), 0.5);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        let c = mask_from(5, 5, &[20, 21]);
        assert_eq!(mask_iou(&a, &c).unwrap(), 0.0);
        assert_eq!(mask_dice(&a, &c).unwrap(), 0.0);
        let e = Mask::empty(5, 5);
        assert_eq!(mask_iou(&e, &e).unwrap(), 1.0);
        assert_eq!(mask_dice(&e, &e).unwrap(), 1.0);
        assert!(mask_iou(&a, &Mask::empty(4, 5)).is_err());
    }

    #[test]
    fn missed_instance() {
        let g1 = mask_from(4, 4, &[0, 1, 2]);
        let g2 = mask_from(4, 4, &[12, 13, 14]);
        let gt = InstanceSet::new(4, 4, vec![g1.clone(), g2]).unwrap();
        let pred = InstanceSet::new(4, 4, vec![g1]).unwrap();
        let s = instance_ap_ar(&pred, &gt, &iou_thresholds()).unwrap();
        assert!(s.per_threshold.iter().all(|t| t.ap == 1.0 && t.ar == 0.5));
    }

    #[test]
    fn partial_overlap_sweep() {
        // IoU = 4 / 10.
        let g = mask_from(4, 4, &[0, 1, 2, 3, 4, 5, 6]);
        let p = mask_from(4, 4, &[3, 4, 5, 6, 7, 8, 9]);
        let gt = InstanceSet::new(4, 4, vec![g]).unwrap();
        let pred = InstanceSet::new(4, 4, vec![p]).unwrap();
        let s = instance_ap_ar(&pred, &gt, &iou_thresholds()).unwrap();
        let tp: Vec<usize> = s.counts.iter().map(|c| c.tp).collect();
        assert_eq!(tp, vec![1, 1, 1, 1, 1, 0, 0, 0, 0]);
        assert!((s.ap - 5.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn empty_conventions() {
        let empty = InstanceSet::empty(3, 3);
        let s = instance_ap_ar(&empty, &empty, &iou_thresholds()).unwrap();
        assert_eq!((s.ap, s.ar), (1.0, 1.0));
        let one = InstanceSet::new(3, 3, vec![mask_from(3, 3, &[0])]).unwrap();
        let s = instance_ap_ar(&one, &empty, &iou_thresholds()).unwrap();
        assert_eq!((s.ap, s.ar), (0.0, 0.0));
        let s = instance_ap_ar(&empty, &one, &iou_thresholds()).unwrap();
        assert_eq!((s.ap, s.ar), (0.0, 0.0));
    }

    #[test]
    fn components() {
        assert!(connected_components(&Mask::empty(4, 4)).is_empty());
        let fg = mask_from(4, 4, &[0, 5, 3, 7, 13]);
        let cc = connected_components(&fg);
        // Diagonal pair 0-5, vertical pair 3-7, isolated 13.
        assert_eq!(cc.len(), 3);
        assert_eq!(cc.masks()[0].count(), 2);
        assert_eq!(cc.masks()[1].count(), 2);
        assert!(cc.masks()[1].get(0, 3));
        assert_eq!(cc.union(), fg);
    }

    #[test]
    fn accumulator_micro_averages() {
        let g = InstanceSet::new(2, 2, vec![mask_from(2, 2, &[0, 1])]).unwrap();
        let mut acc = MetricAccumulator::new(iou_thresholds());
        acc.add(&g, &g).unwrap();
        acc.add(&InstanceSet::empty(2, 2), &g).unwrap();
        let r = acc.finish();
        assert_eq!(r.images, 2);
        assert!((r.iou - 0.5).abs() < 1e-15);
        assert!((r.ap - 1.0).abs() < 1e-15);
        assert!((r.ar - 0.5).abs() < 1e-15);
        assert!((r.macro_avg.ap - 0.5).abs() < 1e-15);
        let json = serde_json::to_value(&r).unwrap();
        for key in ["iou", "dice", "ap", "ar", "per_threshold", "counts"] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }
}
