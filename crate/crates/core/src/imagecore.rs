//! Dense grid primitives, align-corners bilinear resampling and the
//! training-time augmentations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// H×W scalar field stored row-major (intensity or probability map).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        check_dims(height, width)?;
        if values.len() != height * width {
            return Err(Error::invalid(format!(
                "grid {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("grid values must be finite"));
        }
        Ok(Self { height, width, values })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.values[row * self.width + col] = value;
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Pixels with value `>= threshold`.
    pub fn threshold(&self, threshold: f64) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            bits: self.values.iter().map(|&v| v >= threshold).collect(),
        }
    }
}

/// H×W field of `dim`-dimensional vectors, pixel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingField {
    height: usize,
    width: usize,
    dim: usize,
    values: Vec<f64>,
}

impl EmbeddingField {
    pub fn new(height: usize, width: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        check_dims(height, width)?;
        if dim == 0 {
            return Err(Error::invalid("embedding dimension must be positive"));
        }
        if values.len() != height * width * dim {
            return Err(Error::invalid(format!(
                "embedding field {height}x{width}x{dim} needs {} values, got {}",
                height * width * dim,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("embedding values must be finite"));
        }
        Ok(Self { height, width, dim, values })
    }

    pub fn zeros(height: usize, width: usize, dim: usize) -> Result<Self> {
        Self::new(height, width, dim, vec![0.0; height * width * dim])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn vector(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.dim;
        &self.values[start..start + self.dim]
    }

    pub fn vector_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let start = (row * self.width + col) * self.dim;
        &mut self.values[start..start + self.dim]
    }
}

/// Binary H×W mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        check_dims(height, width)?;
        if bits.len() != height * width {
            return Err(Error::invalid(format!(
                "mask {height}x{width} needs {} bits, got {}",
                height * width,
                bits.len()
            )));
        }
        Ok(Self { height, width, bits })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    pub fn set_index(&mut self, index: usize, value: bool) {
        self.bits[index] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn intersection_count(&self, other: &Mask) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(&a, &b)| a && b)
            .count()
    }

    pub fn union_with(&mut self, other: &Mask) {
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
    }

    /// Row-major indices of set pixels.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
    }

    pub fn to_grid(&self) -> ImageGrid {
        ImageGrid {
            height: self.height,
            width: self.width,
            values: self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// Nearest-neighbour downsampling under the align-corners mapping used by
    /// [`upsample_bilinear`], so that a downsampled target lines up with the
    /// grid the upsampler interpolates from.
    pub fn downsample_nearest(&self, height: usize, width: usize) -> Result<Mask> {
        let rows = nearest_source(self.height, height)?;
        let cols = nearest_source(self.width, width)?;
        let mut out = Mask::empty(height, width);
        for (r, &sr) in rows.iter().enumerate() {
            for (c, &sc) in cols.iter().enumerate() {
                out.set(r, c, self.get(sr, sc));
            }
        }
        Ok(out)
    }
}

/// Per-instance binary masks over a common grid. Masks may overlap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceSet {
    height: usize,
    width: usize,
    masks: Vec<Mask>,
}

impl InstanceSet {
    pub fn new(height: usize, width: usize, masks: Vec<Mask>) -> Result<Self> {
        check_dims(height, width)?;
        if let Some(i) = masks.iter().position(|m| m.dims() != (height, width)) {
            return Err(Error::invalid(format!(
                "mask {i} has dims {:?}, expected {:?}",
                masks[i].dims(),
                (height, width)
            )));
        }
        Ok(Self { height, width, masks })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            masks: Vec::new(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn masks(&self) -> &[Mask] {
        &self.masks
    }

    pub fn into_masks(self) -> Vec<Mask> {
        self.masks
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn union(&self) -> Mask {
        let mut out = Mask::empty(self.height, self.width);
        for m in &self.masks {
            out.union_with(m);
        }
        out
    }

    /// Number of masks containing each pixel.
    pub fn membership_counts(&self) -> Vec<u32> {
        let mut counts = vec![0u32; self.height * self.width];
        for m in &self.masks {
            for i in m.indices() {
                counts[i] += 1;
            }
        }
        counts
    }

    /// Pixels set in two or more masks.
    pub fn multi_assigned_count(&self) -> usize {
        self.membership_counts().iter().filter(|&&c| c >= 2).count()
    }
}

/// Per-pixel single instance id: 0 is background, instance `k` is `k + 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        check_dims(height, width)?;
        if labels.len() != height * width {
            return Err(Error::invalid("label count does not match dims"));
        }
        Ok(Self { height, width, labels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.labels[row * self.width + col]
    }

    pub fn foreground(&self) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            bits: self.labels.iter().map(|&l| l != 0).collect(),
        }
    }

    pub fn downsample_nearest(&self, height: usize, width: usize) -> Result<LabelMap> {
        let rows = nearest_source(self.height, height)?;
        let cols = nearest_source(self.width, width)?;
        let mut labels = Vec::with_capacity(height * width);
        for &sr in &rows {
            for &sc in &cols {
                labels.push(self.get(sr, sc));
            }
        }
        Ok(LabelMap { height, width, labels })
    }
}

fn check_dims(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::invalid(format!(
            "grid dims must be positive, got {height}x{width}"
        )));
    }
    Ok(())
}

/// Source coordinate of each target index under align-corners sampling.
fn corner_aligned(src: usize, dst: usize) -> Vec<f64> {
    if dst == 1 || src == 1 {
        return vec![0.0; dst];
    }
    let scale = (src - 1) as f64 / (dst - 1) as f64;
    (0..dst).map(|i| i as f64 * scale).collect()
}

fn nearest_source(src: usize, dst: usize) -> Result<Vec<usize>> {
    if dst == 0 || dst > src {
        return Err(Error::invalid(format!(
            "cannot downsample extent {src} to {dst}"
        )));
    }
    Ok(corner_aligned(src, dst)
        .into_iter()
        .map(|x| (x.round() as usize).min(src - 1))
        .collect())
}

/// Fields that can be upsampled with align-corners bilinear interpolation.
pub trait Bilinear: Sized {
    fn upsample_bilinear(&self, target_height: usize, target_width: usize) -> Result<Self>;
}

/// Upsample `src` to `target_height`×`target_width`. Corner pixels of the
/// source map exactly onto corner pixels of the target.
pub fn upsample_bilinear<T: Bilinear>(src: &T, target_height: usize, target_width: usize) -> Result<T> {
    src.upsample_bilinear(target_height, target_width)
}

fn resample_channels(
    values: &[f64],
    (h, w): (usize, usize),
    channels: usize,
    (th, tw): (usize, usize),
) -> Result<Vec<f64>> {
    if th == 0 || tw == 0 {
        return Err(Error::invalid("upsample target must be non-empty"));
    }
    if th < h || tw < w {
        return Err(Error::invalid(format!(
            "upsample target {th}x{tw} is smaller than source {h}x{w}"
        )));
    }
    let ys = corner_aligned(h, th);
    let xs = corner_aligned(w, tw);
    let split = |x: f64, n: usize| -> (usize, usize, f64) {
        let i0 = (x.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, x - i0 as f64)
    };
    let mut out = Vec::with_capacity(th * tw * channels);
    for &y in &ys {
        let (y0, y1, fy) = split(y, h);
        for &x in &xs {
            let (x0, x1, fx) = split(x, w);
            for ch in 0..channels {
                let at = |r: usize, c: usize| values[(r * w + c) * channels + ch];
                let top = at(y0, x0) + (at(y0, x1) - at(y0, x0)) * fx;
                let bottom = at(y1, x0) + (at(y1, x1) - at(y1, x0)) * fx;
                out.push(top + (bottom - top) * fy);
            }
        }
    }
    Ok(out)
}

impl Bilinear for ImageGrid {
    fn upsample_bilinear(&self, th: usize, tw: usize) -> Result<Self> {
        let values = resample_channels(&self.values, self.dims(), 1, (th, tw))?;
        Ok(ImageGrid {
            height: th,
            width: tw,
            values,
        })
    }
}

impl Bilinear for EmbeddingField {
    fn upsample_bilinear(&self, th: usize, tw: usize) -> Result<Self> {
        let values = resample_channels(&self.values, self.dims(), self.dim, (th, tw))?;
        Ok(EmbeddingField {
            height: th,
            width: tw,
            dim: self.dim,
            values,
        })
    }
}

/// Augmentation ranges. Each transform fires independently with
/// `per_transform_probability`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentParams {
    pub rotation_degrees: f64,
    pub flip: bool,
    pub brightness_delta: f64,
    pub contrast_delta: f64,
    pub per_transform_probability: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            rotation_degrees: 10.0,
            flip: true,
            brightness_delta: 0.3,
            contrast_delta: 0.3,
            per_transform_probability: 0.2,
        }
    }
}

impl AugmentParams {
    /// Parameters under which [`augment`] is the identity.
    pub fn disabled() -> Self {
        Self {
            per_transform_probability: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.rotation_degrees)
            || !finite_nonneg(self.brightness_delta)
            || !finite_nonneg(self.contrast_delta)
        {
            return Err(Error::invalid("augmentation ranges must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.per_transform_probability) {
            return Err(Error::invalid("augmentation probability must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Random flip / rotation (shared by image and masks) followed by
/// brightness / contrast jitter on the image only.
pub fn augment(
    image: &ImageGrid,
    labels: &InstanceSet,
    params: &AugmentParams,
    rng_seed: u64,
) -> Result<(ImageGrid, InstanceSet)> {
    params.validate()?;
    if image.dims() != labels.dims() {
        return Err(Error::invalid(format!(
            "image dims {:?} differ from label dims {:?}",
            image.dims(),
            labels.dims()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let p = params.per_transform_probability;
    // Every draw happens unconditionally so the stream layout is fixed.
    let do_flip = rng.random::<f64>() < p && params.flip;
    let do_rotate = rng.random::<f64>() < p && params.rotation_degrees > 0.0;
    let angle = rng.random_range(-1.0..=1.0) * params.rotation_degrees;
    let do_brightness = rng.random::<f64>() < p && params.brightness_delta > 0.0;
    let brightness = rng.random_range(-1.0..=1.0) * params.brightness_delta;
    let do_contrast = rng.random::<f64>() < p && params.contrast_delta > 0.0;
    let contrast = rng.random_range(-1.0..=1.0) * params.contrast_delta;

    let mut img = image.clone();
    let mut masks: Vec<Mask> = labels.masks().to_vec();
    if do_flip {
        img = flip_image(&img);
        masks = masks.iter().map(flip_mask).collect();
    }
    if do_rotate {
        img = rotate_image(&img, angle);
        masks = masks.iter().map(|m| rotate_mask(m, angle)).collect();
    }
    if do_brightness {
        for v in img.values_mut() {
            *v += brightness;
        }
    }
    if do_contrast {
        let mean = img.mean();
        for v in img.values_mut() {
            *v = (*v - mean) * (1.0 + contrast) + mean;
        }
    }
    if do_brightness || do_contrast {
        for v in img.values_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    let (h, w) = labels.dims();
    Ok((img, InstanceSet::new(h, w, masks)?))
}

pub fn flip_image(image: &ImageGrid) -> ImageGrid {
    let (h, w) = image.dims();
    let mut out = image.clone();
    for r in 0..h {
        for c in 0..w {
            out.set(r, c, image.get(r, w - 1 - c));
        }
    }
    out
}

pub fn flip_mask(mask: &Mask) -> Mask {
    let (h, w) = mask.dims();
    let mut out = Mask::empty(h, w);
    for r in 0..h {
        for c in 0..w {
            out.set(r, c, mask.get(r, w - 1 - c));
        }
    }
    out
}

/// Source position (row, col) of output pixel (r, c) under a rotation of
/// `degrees` about the image center.
fn rotation_source(dims: (usize, usize), degrees: f64) -> impl Fn(usize, usize) -> (f64, f64) {
    let (h, w) = dims;
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let (sin, cos) = degrees.to_radians().sin_cos();
    move |r, c| {
        let dx = c as f64 - cx;
        let dy = r as f64 - cy;
        let sx = cos * dx + sin * dy + cx;
        let sy = -sin * dx + cos * dy + cy;
        (sy, sx)
    }
}

/// Bilinear rotation about the center; out-of-frame samples read as 0.
pub fn rotate_image(image: &ImageGrid, degrees: f64) -> ImageGrid {
    let (h, w) = image.dims();
    let source = rotation_source((h, w), degrees);
    let mut out = image.clone();
    for r in 0..h {
        for c in 0..w {
            let (sy, sx) = source(r, c);
            let inside = sy >= 0.0 && sx >= 0.0 && sy <= (h - 1) as f64 && sx <= (w - 1) as f64;
            let v = if inside {
                let y0 = sy.floor() as usize;
                let x0 = sx.floor() as usize;
                let y1 = (y0 + 1).min(h - 1);
                let x1 = (x0 + 1).min(w - 1);
                let fy = sy - y0 as f64;
                let fx = sx - x0 as f64;
                let top = image.get(y0, x0) * (1.0 - fx) + image.get(y0, x1) * fx;
                let bottom = image.get(y1, x0) * (1.0 - fx) + image.get(y1, x1) * fx;
                top * (1.0 - fy) + bottom * fy
            } else {
                0.0
            };
            out.set(r, c, v);
        }
    }
    out
}

/// Nearest-neighbour rotation about the center, keeping the mask binary.
pub fn rotate_mask(mask: &Mask, degrees: f64) -> Mask {
    let (h, w) = mask.dims();
    let source = rotation_source((h, w), degrees);
    let mut out = Mask::empty(h, w);
    for r in 0..h {
        for c in 0..w {
            let (sy, sx) = source(r, c);
            let (ry, rx) = (sy.round(), sx.round());
            if ry >= 0.0 && rx >= 0.0 && ry < h as f64 && rx < w as f64 {
                out.set(r, c, mask.get(ry as usize, rx as usize));
            }
        }
    }
    out
}
