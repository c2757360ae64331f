//! On-disk scene datasets: `scene_NNNN.{pgm,json,segt}` plus `manifest.json`.

use std::path::{Path, PathBuf};

use curvseg::embednet::Sample;
use curvseg::io::{decode_pgm, instances_from_container, read_file, TensorContainer};
use curvseg::synthgen::SceneSpec;
use curvseg::{Error, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub seed: u64,
    pub image: String,
    pub annotations: String,
    pub masks: String,
    pub instances: usize,
    pub has_crossing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub scene: SceneSpec,
    pub scenes: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let bytes = read_file(&path)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }
}

pub fn scene_stem(index: usize) -> String {
    format!("scene_{index:04}")
}

/// A loaded scene with its file stem, for per-image reporting.
pub struct LoadedScene {
    pub name: String,
    pub sample: Sample,
}

fn parse_err(path: &Path, e: Error) -> Error {
    match e {
        Error::Parse(m) | Error::InvalidArgument(m) => Error::Parse(format!("{}: {m}", path.display())),
        other => other,
    }
}

fn load_entry(dir: &Path, entry: &ManifestEntry) -> Result<LoadedScene> {
    let image_path: PathBuf = dir.join(&entry.image);
    let image = decode_pgm(&read_file(&image_path)?).map_err(|e| parse_err(&image_path, e))?;
    let masks_path = dir.join(&entry.masks);
    let instances = TensorContainer::decode(&read_file(&masks_path)?)
        .and_then(|c| instances_from_container(&c))
        .map_err(|e| parse_err(&masks_path, e))?;
    if instances.dims() != image.dims() {
        return Err(Error::Config(format!(
            "{}: masks are {:?} but the image is {:?}",
            entry.masks,
            instances.dims(),
            image.dims()
        )));
    }
    if instances.len() != entry.instances {
        return Err(Error::Config(format!(
            "{}: manifest declares {} instances, file holds {}",
            entry.masks,
            entry.instances,
            instances.len()
        )));
    }
    Ok(LoadedScene {
        name: entry.image.trim_end_matches(".pgm").to_string(),
        sample: Sample { image, instances },
    })
}

/// Every scene listed in the manifest, in manifest order.
pub fn load_dataset(dir: &Path) -> Result<Vec<LoadedScene>> {
    let manifest = Manifest::load(dir)?;
    manifest.scenes.iter().map(|e| load_entry(dir, e)).collect()
}
