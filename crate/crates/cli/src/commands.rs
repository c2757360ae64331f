//! Subcommand implementations. Every artifact is written atomically and
//! depends only on the configuration, the seed and the inputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use curvseg::embednet::{run_gradcheck, split_train_val, train, Architecture, GradcheckReport, ModelParams, Sample};
use curvseg::evalx::{iou_thresholds, ImageScores, MetricAccumulator, MetricReport};
use curvseg::io::{
    decode_pgm, encode_pgm, encode_ppm, grid_to_container, instances_from_container, instances_to_container,
    params_from_container, params_to_container, read_file, write_atomic, TensorContainer,
};
use curvseg::pipeline::{infer, infer_cc_baseline, Diagnostics};
use curvseg::render::render_overlay;
use curvseg::synthgen::{generate_scene, AnnotationDocument};
use curvseg::{derive_seed, Error, ImageGrid, InstanceSet, Result};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::{load_dataset, scene_stem, LoadedScene, Manifest, ManifestEntry, MANIFEST};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Method {
    /// Mean shift on embeddings plus intersection resolution.
    Embedding,
    /// Connected components of the semantic mask.
    Cc,
    /// Ground truth scored against itself (no checkpoint).
    Oracle,
}

impl Method {
    fn name(self) -> &'static str {
        match self {
            Method::Embedding => "embedding",
            Method::Cc => "cc",
            Method::Oracle => "oracle",
        }
    }
}

/// Sidecar written next to a checkpoint's tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub architecture: Architecture,
    pub image_height: usize,
    pub image_width: usize,
    pub seed: u64,
    pub loss: curvseg::embednet::LossConfig,
    pub optim: curvseg::embednet::OptimConfig,
    pub augment: curvseg::imagecore::AugmentParams,
    pub best_epoch: Option<usize>,
    pub train_scenes: Vec<String>,
    pub val_scenes: Vec<String>,
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_slice(&read_file(path)?).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

pub fn cmd_synth(cfg: &RunConfig, count: usize, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    create_dir(out)?;
    let mut scenes = Vec::with_capacity(count);
    for index in 0..count {
        let seed = derive_seed(cfg.seed, index as u64);
        let mut spec = cfg.scene.clone();
        spec.rng_seed = seed;
        let scene = generate_scene(&spec)?;
        let stem = scene_stem(index);
        let entry = ManifestEntry {
            index,
            seed,
            image: format!("{stem}.pgm"),
            annotations: format!("{stem}.json"),
            masks: format!("{stem}.segt"),
            instances: scene.instances.len(),
            has_crossing: scene.has_crossing,
        };
        write_atomic(&out.join(&entry.image), &encode_pgm(&scene.image))?;
        let doc = AnnotationDocument::from_annotations(spec.height, spec.width, &scene.annotations);
        write_atomic(&out.join(&entry.annotations), format!("{}\n", doc.to_json()).as_bytes())?;
        write_atomic(&out.join(&entry.masks), &instances_to_container(&scene.instances).encode())?;
        scenes.push(entry);
    }
    let manifest = Manifest {
        seed: cfg.seed,
        scene: cfg.scene.clone(),
        scenes,
    };
    write_json(&out.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

fn common_dims(scenes: &[LoadedScene]) -> Result<(usize, usize)> {
    let dims = scenes[0].sample.image.dims();
    if let Some(s) = scenes.iter().find(|s| s.sample.image.dims() != dims) {
        return Err(Error::Config(format!(
            "{} is {:?}, expected {:?} like the rest of the dataset",
            s.name,
            s.sample.image.dims(),
            dims
        )));
    }
    Ok(dims)
}

pub struct TrainSummary {
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    pub final_val_loss: Option<f64>,
}

pub fn cmd_train(cfg: &RunConfig, dataset: &Path, out: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    let scenes = load_dataset(dataset)?;
    if scenes.len() < 2 {
        return Err(Error::Config(format!(
            "{} holds {} scenes; training needs at least 2 for the train/validation split",
            dataset.display(),
            scenes.len()
        )));
    }
    let (height, width) = common_dims(&scenes)?;
    let (train_idx, val_idx) = split_train_val(scenes.len(), derive_seed(cfg.seed, 2));
    let pick = |idx: &[usize]| -> Vec<Sample> { idx.iter().map(|&i| scenes[i].sample.clone()).collect() };
    let names = |idx: &[usize]| -> Vec<String> { idx.iter().map(|&i| scenes[i].name.clone()).collect() };
    let outcome = train(&pick(&train_idx), &pick(&val_idx), &cfg.train_config()).map_err(|e| match e {
        Error::InvalidArgument(m) => Error::Config(m),
        other => other,
    })?;

    create_dir(out)?;
    write_atomic(&out.join("checkpoint.segt"), &params_to_container(&outcome.params).encode())?;
    let info = CheckpointInfo {
        architecture: Architecture::default(),
        image_height: height,
        image_width: width,
        seed: cfg.seed,
        loss: cfg.loss,
        optim: cfg.optim,
        augment: cfg.augment,
        best_epoch: outcome.best_epoch,
        train_scenes: names(&train_idx),
        val_scenes: names(&val_idx),
    };
    write_json(&out.join("checkpoint.json"), &info)?;
    let mut csv = String::from("epoch,train_loss,val_loss\n");
    for row in &outcome.log {
        writeln!(csv, "{},{},{}", row.epoch, row.train_loss, row.val_loss).expect("writing to a String");
    }
    write_atomic(&out.join("loss_log.csv"), csv.as_bytes())?;
    Ok(TrainSummary {
        epochs: outcome.log.len(),
        best_epoch: outcome.best_epoch,
        final_val_loss: outcome.log.last().map(|l| l.val_loss),
    })
}

/// Checkpoint tensors plus the sidecar, when present next to them.
fn load_checkpoint(path: &Path) -> Result<(ModelParams, Option<CheckpointInfo>)> {
    let container = TensorContainer::decode(&read_file(path)?).map_err(|e| match e {
        Error::Parse(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })?;
    let params = params_from_container(&container)?;
    let sidecar = path.with_extension("json");
    let info = if sidecar.exists() {
        let info: CheckpointInfo = read_json(&sidecar)?;
        if info.architecture != Architecture::default() {
            return Err(Error::Config(format!(
                "{} describes a different architecture",
                sidecar.display()
            )));
        }
        Some(info)
    } else {
        None
    };
    Ok((params, info))
}

fn check_dims(info: Option<&CheckpointInfo>, dims: (usize, usize), what: &str) -> Result<()> {
    if let Some(info) = info {
        if (info.image_height, info.image_width) != dims {
            return Err(Error::Config(format!(
                "checkpoint was trained on {}x{} images but {what} is {}x{}",
                info.image_height, info.image_width, dims.0, dims.1
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub scene: String,
    #[serde(flatten)]
    pub scores: ImageScores,
}

fn config_on_invalid(e: Error) -> Error {
    match e {
        Error::InvalidArgument(m) => Error::Config(m),
        other => other,
    }
}

/// Instance prediction and semantic mask for one image.
fn predict(params: &ModelParams, image: &ImageGrid, cfg: &RunConfig, method: Method) -> Result<(InstanceSet, curvseg::Mask, Option<Diagnostics>, Option<ImageGrid>)> {
    match method {
        Method::Embedding => {
            let out = infer(params, image, &cfg.pipeline).map_err(config_on_invalid)?;
            Ok((out.instances, out.semantic, Some(out.diagnostics), Some(out.min_similarity)))
        }
        Method::Cc => {
            let (instances, semantic) =
                infer_cc_baseline(params, image, cfg.pipeline.seg_threshold).map_err(config_on_invalid)?;
            Ok((instances, semantic, None, None))
        }
        Method::Oracle => Err(Error::Config("oracle mode needs ground truth; use it with eval".into())),
    }
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>, dataset: &Path, method: Method, out: &Path) -> Result<MetricReport> {
    cfg.validate()?;
    let scenes = load_dataset(dataset)?;
    let model = match (method, checkpoint) {
        (Method::Oracle, _) => None,
        (_, Some(path)) => Some(load_checkpoint(path)?),
        (_, None) => return Err(Error::Config(format!("--checkpoint is required for --method {}", method.name()))),
    };
    let mut acc = MetricAccumulator::new(iou_thresholds());
    let mut rows = Vec::with_capacity(scenes.len());
    for scene in &scenes {
        let gt = &scene.sample.instances;
        let scores = match &model {
            None => acc.add(gt, gt)?,
            Some((params, info)) => {
                check_dims(info.as_ref(), scene.sample.image.dims(), &scene.name)?;
                let (pred, semantic, _, _) = predict(params, &scene.sample.image, cfg, method)?;
                acc.add_with_semantic(&pred, &semantic, gt)?
            }
        };
        rows.push(EvalRow {
            scene: scene.name.clone(),
            scores,
        });
    }
    let report = acc.finish();
    create_dir(out)?;
    write_json(&out.join(format!("metrics_{}.json", method.name())), &report)?;
    write_atomic(&out.join(format!("per_image_{}.csv", method.name())), per_image_csv(&rows).as_bytes())?;
    Ok(report)
}

fn per_image_csv(rows: &[EvalRow]) -> String {
    let mut csv = String::from("scene,iou,dice,ap,ar,predicted_instances,gt_instances\n");
    for r in rows {
        let s = &r.scores;
        writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.scene, s.iou, s.dice, s.ap, s.ar, s.predicted_instances, s.gt_instances
        )
        .expect("writing to a String");
    }
    csv
}

pub fn cmd_infer(cfg: &RunConfig, checkpoint: &Path, image_path: &Path, method: Method, out: &Path) -> Result<usize> {
    cfg.validate()?;
    let (params, info) = load_checkpoint(checkpoint)?;
    let image = decode_pgm(&read_file(image_path)?)?;
    check_dims(info.as_ref(), image.dims(), &image_path.display().to_string())?;
    let (instances, semantic, diagnostics, min_similarity) = predict(&params, &image, cfg, method)?;
    create_dir(out)?;
    write_atomic(&out.join("instances.segt"), &instances_to_container(&instances).encode())?;
    write_atomic(&out.join("semantic.segt"), &grid_to_container("semantic", &semantic.to_grid()).encode())?;
    if let Some(sim) = min_similarity {
        write_atomic(&out.join("min_similarity.segt"), &grid_to_container("min_similarity", &sim).encode())?;
    }
    if let Some(d) = diagnostics {
        write_json(&out.join("diagnostics.json"), &d)?;
    }
    let rgb = render_overlay(&image, &instances)?;
    write_atomic(&out.join("overlay.ppm"), &encode_ppm(image.width(), image.height(), &rgb)?)?;
    Ok(instances.len())
}

pub fn cmd_render(image_path: &Path, instances_path: &Path, out: &Path) -> Result<PathBuf> {
    let image = decode_pgm(&read_file(image_path)?)?;
    let instances = instances_from_container(&TensorContainer::decode(&read_file(instances_path)?)?)?;
    let rgb = render_overlay(&image, &instances).map_err(config_on_invalid)?;
    create_dir(out)?;
    let path = out.join("overlay.ppm");
    write_atomic(&path, &encode_ppm(image.width(), image.height(), &rgb)?)?;
    Ok(path)
}

/// Maximum relative error accepted by the `gradcheck` command.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

pub fn cmd_gradcheck(cfg: &RunConfig, fixtures: usize, out: &Path) -> Result<GradcheckReport> {
    cfg.loss.validate().map_err(config_on_invalid)?;
    let report = run_gradcheck(fixtures, cfg.seed, 1e-3, &cfg.loss)?;
    create_dir(out)?;
    write_json(&out.join("gradcheck.json"), &report)?;
    Ok(report)
}
