//! Scene manifests and dataset indexes on disk.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Instance, Scene, SceneConfig, SpecimenClass, SplitRatios};
use crate::error::{CoreError, Result};
use crate::mask::{Mask, PixelBox};
use crate::morph::MorphometricRecord;
use crate::pnm::{read_pgm, write_pgm};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceEntry {
    pub id: u32,
    pub class: String,
    pub class_index: usize,
    pub bbox: PixelBox,
    pub complete: bool,
    /// Bbox-sized PGM, relative to the manifest.
    pub mask: String,
    pub analytic: MorphometricRecord,
    pub shape: super::Shape,
    pub center: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub image: String,
    pub placement_failures: usize,
    pub instances: Vec<InstanceEntry>,
}

/// Writes `<id>.pgm`, one mask PGM per instance and `<id>.json` into `dir`.
/// Returns the manifest path.
pub fn write_scene(dir: impl AsRef<Path>, scene: &Scene) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let image = format!("{}.pgm", scene.id);
    write_pgm(dir.join(&image), &scene.image)?;
    let mut instances = Vec::with_capacity(scene.instances.len());
    for inst in &scene.instances {
        let mask = format!("{}_mask_{:03}.pgm", scene.id, inst.id);
        let img = image::GrayImage::from_raw(inst.mask.width() as u32, inst.mask.height() as u32, inst.mask.to_bytes())
            .expect("mask buffer matches its size");
        write_pgm(dir.join(&mask), &img)?;
        instances.push(InstanceEntry {
            id: inst.id,
            class: inst.class.clone(),
            class_index: inst.class_index,
            bbox: inst.bbox,
            complete: inst.complete,
            mask,
            analytic: inst.analytic.clone(),
            shape: inst.shape.clone(),
            center: inst.center,
        });
    }
    let manifest = SceneManifest {
        id: scene.id.clone(),
        width: scene.width(),
        height: scene.height(),
        image,
        placement_failures: scene.placement_failures,
        instances,
    };
    let path = dir.join(format!("{}.json", scene.id));
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

pub fn read_scene(manifest_path: impl AsRef<Path>) -> Result<Scene> {
    let path = manifest_path.as_ref();
    let dir = path.parent().unwrap_or(Path::new("."));
    let m: SceneManifest = serde_json::from_str(&fs::read_to_string(path)?)
        .map_err(|e| CoreError::Format { path: path.to_path_buf(), detail: e.to_string() })?;
    let image = read_pgm(dir.join(&m.image))?;
    if (image.width() as usize, image.height() as usize) != (m.width, m.height) {
        return Err(CoreError::Format { path: path.to_path_buf(), detail: "image size differs from manifest".into() });
    }
    let mut instances = Vec::with_capacity(m.instances.len());
    for e in m.instances {
        let img = read_pgm(dir.join(&e.mask))?;
        if (img.width() as usize, img.height() as usize) != (e.bbox.w, e.bbox.h) {
            return Err(CoreError::Format { path: dir.join(&e.mask), detail: "mask size differs from its bbox".into() });
        }
        let mask = Mask::from_bytes(e.bbox.w, e.bbox.h, img.as_raw()).expect("size checked above");
        instances.push(Instance {
            id: e.id,
            class: e.class,
            class_index: e.class_index,
            bbox: e.bbox,
            complete: e.complete,
            mask,
            analytic: e.analytic,
            shape: e.shape,
            center: e.center,
        });
    }
    Ok(Scene { id: m.id, image, instances, placement_failures: m.placement_failures })
}

/// Everything needed to regenerate or reload a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub seed: u64,
    pub ratios: SplitRatios,
    pub classes: Vec<SpecimenClass>,
    pub scene: SceneConfig,
    /// Manifest paths relative to the index file.
    pub scenes: Vec<String>,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

pub const INDEX_FILE: &str = "dataset.json";

pub fn write_index(dir: impl AsRef<Path>, index: &DatasetIndex) -> Result<PathBuf> {
    let path = dir.as_ref().join(INDEX_FILE);
    fs::write(&path, serde_json::to_string_pretty(index)?)?;
    Ok(path)
}

pub fn read_index(path: impl AsRef<Path>) -> Result<DatasetIndex> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| CoreError::Format { path: path.to_path_buf(), detail: e.to_string() })?;
    serde_json::from_str(&text).map_err(|e| CoreError::Format { path: path.to_path_buf(), detail: e.to_string() })
}

/// Loaded dataset: scenes in index order plus the split as positions into them.
pub struct Dataset {
    pub index: DatasetIndex,
    pub scenes: Vec<Scene>,
    pub split: super::DatasetSplit,
}

pub fn load_dataset(index_path: impl AsRef<Path>) -> Result<Dataset> {
    let index_path = index_path.as_ref();
    let index = read_index(index_path)?;
    let dir = index_path.parent().unwrap_or(Path::new("."));
    let scenes = index.scenes.iter().map(|s| read_scene(dir.join(s))).collect::<Result<Vec<_>>>()?;
    let pos = |names: &[String]| -> Result<Vec<usize>> {
        names
            .iter()
            .map(|n| {
                index.scenes.iter().position(|s| s == n).ok_or_else(|| CoreError::Format {
                    path: index_path.to_path_buf(),
                    detail: format!("split references unknown scene `{n}`"),
                })
            })
            .collect()
    };
    let split = super::DatasetSplit { train: pos(&index.train)?, validation: pos(&index.validation)?, test: pos(&index.test)? };
    Ok(Dataset { index, scenes, split })
}
