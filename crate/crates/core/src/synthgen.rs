//! Ground-truth construction: polyline rasterization, synthetic crossing-curve
//! scenes, and single-label training targets.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{ImageGrid, InstanceSet, LabelMap, Mask};

/// One device: ordered control points `(x = column, y = row)` and a stroke width.
#[derive(Debug, Clone, PartialEq)]
pub struct PolylineAnnotation {
    pub points: Vec<(f64, f64)>,
    pub width: f64,
}

/// Squared distance from `p` to the closed segment `a`–`b`.
pub(crate) fn segment_distance_sq(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    (p.0 - qx) * (p.0 - qx) + (p.1 - qy) * (p.1 - qy)
}

/// Marks every pixel whose center `(col, row)` lies within `width / 2` of the
/// piecewise-linear curve (round caps and joins), clipped to the frame.
pub fn rasterize_polyline(ann: &PolylineAnnotation, height: usize, width: usize) -> Result<Mask> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("raster dims must be positive"));
    }
    if ann.points.is_empty() {
        return Err(Error::invalid("polyline has no points"));
    }
    if !(ann.width.is_finite() && ann.width > 0.0) {
        return Err(Error::invalid(format!("stroke width {} must be positive", ann.width)));
    }
    let radius = ann.width / 2.0;
    let r2 = radius * radius;
    let mut mask = Mask::empty(height, width);
    let first = ann.points[0];
    let segments: Vec<((f64, f64), (f64, f64))> = if ann.points.len() == 1 {
        vec![(first, first)]
    } else {
        ann.points.windows(2).map(|w| (w[0], w[1])).collect()
    };
    for (a, b) in segments {
        let col_lo = (a.0.min(b.0) - radius).floor().max(0.0);
        let col_hi = (a.0.max(b.0) + radius).ceil().min(width as f64 - 1.0);
        let row_lo = (a.1.min(b.1) - radius).floor().max(0.0);
        let row_hi = (a.1.max(b.1) + radius).ceil().min(height as f64 - 1.0);
        if col_lo > col_hi || row_lo > row_hi {
            continue;
        }
        for row in row_lo as usize..=row_hi as usize {
            for col in col_lo as usize..=col_hi as usize {
                if segment_distance_sq((col as f64, row as f64), a, b) <= r2 {
                    mask.set(row, col, true);
                }
            }
        }
    }
    Ok(mask)
}

/// Parameters of the synthetic scene generator. Pairs are inclusive `[min, max]` ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub instance_count: [usize; 2],
    pub stroke_width: [f64; 2],
    pub control_points: [usize; 2],
    /// Maximum heading change between consecutive segments.
    pub max_turn_degrees: f64,
    /// Curve brightness above background.
    pub contrast: [f64; 2],
    pub background: [f64; 2],
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    /// Route every curve after the first through a point of the first curve.
    pub force_crossing: bool,
    /// Minimum angle between crossing curves when `force_crossing` is set.
    pub min_crossing_degrees: f64,
    pub rng_seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            instance_count: [1, 3],
            stroke_width: [3.0, 5.0],
            control_points: [4, 8],
            max_turn_degrees: 20.0,
            contrast: [0.3, 0.6],
            background: [0.1, 0.3],
            noise: 0.05,
            force_crossing: false,
            min_crossing_degrees: 60.0,
            rng_seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("scene spec: {m}")));
        if self.height < 8 || self.width < 8 {
            return bad("frame must be at least 8x8");
        }
        if self.instance_count[0] < 1 || self.instance_count[0] > self.instance_count[1] {
            return bad("instance_count must be a non-empty range starting at >= 1");
        }
        let [w0, w1] = self.stroke_width;
        if !(w0.is_finite() && w1.is_finite() && w0 > 0.0 && w0 <= w1) {
            return bad("stroke_width must be a non-empty positive range");
        }
        if w1 > self.height.min(self.width) as f64 / 2.0 {
            return bad("stroke_width exceeds half the frame");
        }
        if self.control_points[0] < 2 || self.control_points[0] > self.control_points[1] {
            return bad("control_points must be a non-empty range starting at >= 2");
        }
        for (name, [lo, hi]) in [("contrast", self.contrast), ("background", self.background)] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return bad(&format!("{name} must be a non-empty range"));
            }
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return bad("noise must be non-negative");
        }
        if !(self.max_turn_degrees.is_finite() && self.max_turn_degrees >= 0.0) {
            return bad("max_turn_degrees must be non-negative");
        }
        if !(0.0..=90.0).contains(&self.min_crossing_degrees) {
            return bad("min_crossing_degrees must lie in [0, 90]");
        }
        Ok(())
    }
}

/// A rendered scene with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: ImageGrid,
    pub instances: InstanceSet,
    pub annotations: Vec<PolylineAnnotation>,
    /// Some pixel belongs to two or more instances.
    pub has_crossing: bool,
}

const MAX_ATTEMPTS: usize = 64;

/// Render a random scene of smooth bright curves on a noisy background.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let count = rng.random_range(spec.instance_count[0]..=spec.instance_count[1]);

    let mut annotations = Vec::with_capacity(count);
    let mut masks = Vec::with_capacity(count);
    'curves: for k in 0..count {
        for _ in 0..MAX_ATTEMPTS {
            let stroke = rng.random_range(spec.stroke_width[0]..=spec.stroke_width[1]);
            let n_points = rng.random_range(spec.control_points[0]..=spec.control_points[1]);
            let (anchor, heading) = if spec.force_crossing && k > 0 {
                let (p, base) = point_on_curve(&annotations[0], &mut rng);
                let jitter = (90.0 - spec.min_crossing_degrees).max(0.0);
                let offset = 90.0 + rng.random_range(-jitter..=jitter);
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                (p, base + sign * offset.to_radians())
            } else {
                let margin = 0.3;
                let ax = rng.random_range(margin..=1.0 - margin) * (w - 1) as f64;
                let ay = rng.random_range(margin..=1.0 - margin) * (h - 1) as f64;
                ((ax, ay), rng.random_range(0.0..std::f64::consts::TAU))
            };
            let points = walk_curve(anchor, heading, n_points, spec.max_turn_degrees, (h, w), &mut rng);
            let ann = PolylineAnnotation { points, width: stroke };
            let mask = rasterize_polyline(&ann, h, w)?;
            let min_pixels = h.min(w) / 2;
            if mask.count() >= min_pixels {
                annotations.push(ann);
                masks.push(mask);
                continue 'curves;
            }
        }
        return Err(Error::Generation(format!(
            "could not place curve {k} in a {h}x{w} frame after {MAX_ATTEMPTS} attempts"
        )));
    }

    let instances = InstanceSet::new(h, w, masks)?;
    let has_crossing = instances.multi_assigned_count() > 0;

    let background = rng.random_range(spec.background[0]..=spec.background[1]);
    let mut values = vec![background; h * w];
    for mask in instances.masks() {
        let level = background + rng.random_range(spec.contrast[0]..=spec.contrast[1]);
        for i in mask.indices() {
            values[i] = values[i].max(level);
        }
    }
    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise).map_err(|e| Error::invalid(e.to_string()))?;
        for v in &mut values {
            *v += normal.sample(&mut rng);
        }
    }
    for v in &mut values {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(Scene {
        image: ImageGrid::new(h, w, values)?,
        instances,
        annotations,
        has_crossing,
    })
}

/// A point along the middle part of the polyline and the local heading there.
fn point_on_curve(ann: &PolylineAnnotation, rng: &mut impl Rng) -> ((f64, f64), f64) {
    let pts = &ann.points;
    if pts.len() < 2 {
        return (pts[0], 0.0);
    }
    let lengths: Vec<f64> = pts
        .windows(2)
        .map(|s| ((s[1].0 - s[0].0).powi(2) + (s[1].1 - s[0].1).powi(2)).sqrt())
        .collect();
    let total: f64 = lengths.iter().sum();
    let mut target = rng.random_range(0.35..=0.65) * total;
    for (seg, &len) in pts.windows(2).zip(&lengths) {
        if target <= len && len > 0.0 {
            let t = target / len;
            let p = (seg[0].0 + t * (seg[1].0 - seg[0].0), seg[0].1 + t * (seg[1].1 - seg[0].1));
            return (p, (seg[1].1 - seg[0].1).atan2(seg[1].0 - seg[0].0));
        }
        target -= len;
    }
    let n = pts.len();
    (pts[n - 1], (pts[n - 1].1 - pts[n - 2].1).atan2(pts[n - 1].0 - pts[n - 2].0))
}

/// Random walk from `anchor` in both directions until the frame is left or
/// the control point budget is spent. The exiting segment is clipped to the
/// frame border.
fn walk_curve(
    anchor: (f64, f64),
    heading: f64,
    n_points: usize,
    max_turn_degrees: f64,
    (h, w): (usize, usize),
    rng: &mut impl Rng,
) -> Vec<(f64, f64)> {
    let diag = ((h * h + w * w) as f64).sqrt();
    let step = diag / (n_points - 1) as f64;
    let turn = max_turn_degrees.to_radians();
    let per_side = (n_points - 1).div_ceil(2);
    let mut walk = |start_heading: f64| {
        let mut pts = Vec::new();
        let mut at = anchor;
        let mut dir = start_heading;
        for _ in 0..per_side {
            let next = (at.0 + step * dir.cos(), at.1 + step * dir.sin());
            match clip_to_frame(at, next, (h, w)) {
                Some(end) if end != next => {
                    pts.push(end);
                    break;
                }
                Some(_) => pts.push(next),
                None => break,
            }
            at = next;
            if turn > 0.0 {
                dir += rng.random_range(-turn..=turn);
            }
        }
        pts
    };
    let forward = walk(heading);
    let mut backward = walk(heading + std::f64::consts::PI);
    backward.reverse();
    backward.push(anchor);
    backward.extend(forward);
    backward
}

/// End of the part of segment `from`→`to` inside the frame, `from` being inside.
fn clip_to_frame(from: (f64, f64), to: (f64, f64), (h, w): (usize, usize)) -> Option<(f64, f64)> {
    let (xmax, ymax) = ((w - 1) as f64, (h - 1) as f64);
    let inside = |p: (f64, f64)| p.0 >= 0.0 && p.1 >= 0.0 && p.0 <= xmax && p.1 <= ymax;
    if !inside(from) {
        return None;
    }
    if inside(to) {
        return Some(to);
    }
    let (dx, dy) = (to.0 - from.0, to.1 - from.1);
    let mut t_exit: f64 = 1.0;
    for (d, p, lim) in [(dx, from.0, xmax), (dy, from.1, ymax)] {
        if d > 0.0 {
            t_exit = t_exit.min((lim - p) / d);
        } else if d < 0.0 {
            t_exit = t_exit.min(-p / d);
        }
    }
    let t_exit = t_exit.max(0.0);
    Some((
        (from.0 + t_exit * dx).clamp(0.0, xmax),
        (from.1 + t_exit * dy).clamp(0.0, ymax),
    ))
}

/// Single-instance label map for training. Pixels covered by several masks
/// receive a uniformly drawn member of their instance set.
pub fn make_training_labels(gt: &InstanceSet, rng_seed: u64) -> LabelMap {
    let (h, w) = gt.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut members: Vec<u32> = Vec::new();
    let labels = (0..h * w)
        .map(|i| {
            members.clear();
            members.extend(
                gt.masks()
                    .iter()
                    .enumerate()
                    .filter(|(_, m)| m.bits()[i])
                    .map(|(k, _)| k as u32 + 1),
            );
            match members.len() {
                0 => 0,
                1 => members[0],
                _ => *members.choose(&mut rng).expect("non-empty"),
            }
        })
        .collect();
    LabelMap::new(h, w, labels).expect("dims taken from a valid instance set")
}

/// Annotation file layout: `{"height", "width", "instances": [{"points": [[x, y], ..], "width"}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationDocument {
    pub height: usize,
    pub width: usize,
    pub instances: Vec<AnnotationEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationEntry {
    pub points: Vec<[f64; 2]>,
    pub width: f64,
}

impl AnnotationDocument {
    pub fn from_annotations(height: usize, width: usize, anns: &[PolylineAnnotation]) -> Self {
        Self {
            height,
            width,
            instances: anns
                .iter()
                .map(|a| AnnotationEntry {
                    points: a.points.iter().map(|&(x, y)| [x, y]).collect(),
                    width: a.width,
                })
                .collect(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let doc: AnnotationDocument =
            serde_json::from_str(text).map_err(|e| Error::Parse(format!("annotation document: {e}")))?;
        doc.validate()?;
        Ok(doc)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Parse("annotation document: dims must be positive".into()));
        }
        let max_width = self.height.max(self.width) as f64;
        for (i, inst) in self.instances.iter().enumerate() {
            if inst.points.is_empty() {
                return Err(Error::Parse(format!("instance {i}: empty point list")));
            }
            if inst.points.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Parse(format!("instance {i}: non-finite coordinate")));
            }
            if !(inst.width.is_finite() && inst.width > 0.0 && inst.width <= max_width) {
                return Err(Error::Parse(format!(
                    "instance {i}: width {} outside (0, {max_width}]",
                    inst.width
                )));
            }
        }
        Ok(())
    }

    pub fn annotations(&self) -> Vec<PolylineAnnotation> {
        self.instances
            .iter()
            .map(|inst| PolylineAnnotation {
                points: inst.points.iter().map(|p| (p[0], p[1])).collect(),
                width: inst.width,
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("annotation documents always serialize")
    }
}

/// Parse an annotation JSON document into polylines, in file order.
pub fn parse_annotations(document: &str) -> Result<Vec<PolylineAnnotation>> {
    Ok(AnnotationDocument::parse(document)?.annotations())
}
