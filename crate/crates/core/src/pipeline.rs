//! Inference: network → upsample → threshold → cluster → resolve, plus the
//! connected-components baseline sharing the same semantic front half.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cluster::{augment_coordinates, mean_shift, MeanShiftConfig};
use crate::embednet::{forward, ModelParams};
use crate::error::{Error, Result};
use crate::evalx::connected_components;
use crate::imagecore::{upsample_bilinear, EmbeddingField, ImageGrid, InstanceSet, Mask};
use crate::resolve::{build_instances, ResolveConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Pixels with probability `>= seg_threshold` are foreground.
    pub seg_threshold: f64,
    pub mean_shift: MeanShiftConfig,
    pub resolve: ResolveConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seg_threshold: 0.5,
            mean_shift: MeanShiftConfig::default(),
            resolve: ResolveConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.seg_threshold > 0.0 && self.seg_threshold < 1.0) {
            return Err(Error::invalid("seg_threshold must lie in (0, 1)"));
        }
        self.mean_shift.validate()?;
        self.resolve.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct StageTimings {
    pub forward_ms: f64,
    pub upsample_ms: f64,
    pub cluster_ms: f64,
    pub resolve_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub clusters: usize,
    pub fg_pixels: usize,
    pub multi_assigned_pixels: usize,
    pub timings: StageTimings,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub instances: InstanceSet,
    pub semantic: Mask,
    /// Per-pixel minimum similarity score (1.0 off the foreground).
    pub min_similarity: ImageGrid,
    pub diagnostics: Diagnostics,
}

fn elapsed_ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Upsampled probability map and embeddings at the input resolution.
fn upsample_maps(prob: &ImageGrid, emb: &EmbeddingField, dims: (usize, usize)) -> Result<(ImageGrid, EmbeddingField)> {
    Ok((upsample_bilinear(prob, dims.0, dims.1)?, upsample_bilinear(emb, dims.0, dims.1)?))
}

/// Full instance pipeline on one image.
pub fn infer(params: &ModelParams, image: &ImageGrid, cfg: &PipelineConfig) -> Result<Inference> {
    cfg.validate()?;
    let t = Instant::now();
    let (prob, emb) = forward(params, image)?;
    let forward_ms = elapsed_ms(t);
    let mut out = infer_from_maps(&prob, &emb, image.dims(), cfg)?;
    out.diagnostics.timings.forward_ms = forward_ms;
    Ok(out)
}

/// Back half of [`infer`] starting from network outputs, which may be
/// injected directly (any resolution up to `dims`).
pub fn infer_from_maps(prob: &ImageGrid, emb: &EmbeddingField, dims: (usize, usize), cfg: &PipelineConfig) -> Result<Inference> {
    cfg.validate()?;
    if prob.dims() != emb.dims() {
        return Err(Error::invalid("probability and embedding maps differ in size"));
    }
    let t = Instant::now();
    let (prob, emb) = upsample_maps(prob, emb, dims)?;
    let upsample_ms = elapsed_ms(t);
    let semantic = prob.threshold(cfg.seg_threshold);

    let t = Instant::now();
    let fe = augment_coordinates(&emb, &semantic, cfg.mean_shift.coord_scale)?;
    if fe.is_empty() {
        return Ok(Inference {
            instances: InstanceSet::empty(dims.0, dims.1),
            semantic,
            min_similarity: ImageGrid::filled(dims.0, dims.1, 1.0)?,
            diagnostics: Diagnostics {
                clusters: 0,
                fg_pixels: 0,
                multi_assigned_pixels: 0,
                timings: StageTimings {
                    upsample_ms,
                    ..StageTimings::default()
                },
            },
        });
    }
    let model = mean_shift(&fe, &cfg.mean_shift)?;
    let cluster_ms = elapsed_ms(t);

    let t = Instant::now();
    let resolution = build_instances(&fe, &model, &cfg.resolve)?;
    let resolve_ms = elapsed_ms(t);

    let diagnostics = Diagnostics {
        clusters: model.k(),
        fg_pixels: fe.len(),
        multi_assigned_pixels: resolution.instances.multi_assigned_count(),
        timings: StageTimings {
            forward_ms: 0.0,
            upsample_ms,
            cluster_ms,
            resolve_ms,
        },
    };
    Ok(Inference {
        instances: resolution.instances,
        semantic,
        min_similarity: resolution.min_similarity,
        diagnostics,
    })
}

/// Semantic mask of the network at input resolution (the part shared with [`infer`]).
pub fn semantic_mask(params: &ModelParams, image: &ImageGrid, seg_threshold: f64) -> Result<Mask> {
    let (prob, _) = forward(params, image)?;
    Ok(upsample_bilinear(&prob, image.height(), image.width())?.threshold(seg_threshold))
}

/// Baseline: every 8-connected foreground region is one instance.
pub fn infer_cc_baseline(params: &ModelParams, image: &ImageGrid, seg_threshold: f64) -> Result<(InstanceSet, Mask)> {
    if !(seg_threshold > 0.0 && seg_threshold < 1.0) {
        return Err(Error::invalid("seg_threshold must lie in (0, 1)"));
    }
    let semantic = semantic_mask(params, image, seg_threshold)?;
    Ok((connected_components(&semantic), semantic))
}

/// Baseline from injected probability maps.
pub fn cc_from_map(prob: &ImageGrid, dims: (usize, usize), seg_threshold: f64) -> Result<(InstanceSet, Mask)> {
    let semantic = upsample_bilinear(prob, dims.0, dims.1)?.threshold(seg_threshold);
    Ok((connected_components(&semantic), semantic))
}
