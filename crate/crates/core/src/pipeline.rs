//! The composed detect → crop → classify → segment pipeline, scene
//! reconstruction, scene-level scoring, and the whole-scene baseline.

use std::fs;
use std::path::{Path, PathBuf};

use darwin_nn::{load_model, Model, TrainConfig, TrainHistory};
use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::classify::{classify_many, ClassPrediction};
use crate::detect::{crop_instances, detect, detector_geometry, BoundingBox, CropGeometry, DetectParams};
use crate::error::{invalid, CoreError, Result};
use crate::mask::Mask;
use crate::pnm::{write_pgm16, write_ppm};
use crate::segment::{label_map, segment_many, segmenter_layers, train_pixels, PixelSet};
use crate::synth::Scene;

/// A frozen composition of one model per stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub detector: PathBuf,
    pub classifier: PathBuf,
    pub segmenter: PathBuf,
    pub classes: Vec<String>,
    pub scene_size: usize,
    pub patch_size: usize,
    pub margin: f64,
    pub detect: DetectParams,
}

impl PipelineConfig {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| CoreError::Format { path: path.into(), detail: e.to_string() })
    }

    /// Model paths resolved against `base` when relative.
    fn resolved(&self, base: &Path) -> [PathBuf; 3] {
        [&self.detector, &self.classifier, &self.segmenter].map(|p| if p.is_absolute() { p.clone() } else { base.join(p) })
    }
}

/// Checks that the three models fit together and with the configuration.
pub fn check_compatible(config: &PipelineConfig, detector: &Model, classifier: &Model, segmenter: &Model) -> Result<()> {
    config.detect.validate()?;
    if !(config.margin >= 0.0) {
        return invalid("crop margin must be >= 0");
    }
    let (size, _) = detector_geometry(detector)?;
    if size != config.scene_size {
        return Err(CoreError::Mismatch(format!("detector takes {size}px scenes, pipeline expects {}", config.scene_size)));
    }
    let p = config.patch_size;
    if classifier.input_shape() != [1, p, p] || segmenter.input_shape() != [1, p, p] {
        return Err(CoreError::Mismatch(format!(
            "patch size {p} vs classifier input {:?} and segmenter input {:?}",
            classifier.input_shape(),
            segmenter.input_shape()
        )));
    }
    if segmenter.output_shape() != [2, p, p] {
        return Err(CoreError::Mismatch(format!("segmenter output {:?} is not a 2-channel {p}x{p} map", segmenter.output_shape())));
    }
    let k = config.classes.len();
    if classifier.output_shape() != [k] {
        return Err(CoreError::Mismatch(format!("classifier has {:?} outputs, roster has {k} classes", classifier.output_shape())));
    }
    if !classifier.meta.classes.is_empty() && classifier.meta.classes != config.classes {
        return Err(CoreError::Mismatch(format!("classifier roster {:?} differs from {:?}", classifier.meta.classes, config.classes)));
    }
    Ok(())
}

/// Composes the stage winners into a pipeline configuration after checking
/// that rosters and patch sizes agree.
#[allow(clippy::too_many_arguments)]
pub fn assemble_dnn(
    winners: [(&Model, PathBuf); 3],
    classes: &[String],
    margin: f64,
    detect: DetectParams,
) -> Result<PipelineConfig> {
    let [(d, dp), (c, cp), (s, sp)] = winners;
    let (scene_size, _) = detector_geometry(d)?;
    let patch_size = c.input_shape().get(1).copied().unwrap_or(0);
    let config = PipelineConfig {
        detector: dp,
        classifier: cp,
        segmenter: sp,
        classes: classes.to_vec(),
        scene_size,
        patch_size,
        margin,
        detect,
    };
    check_compatible(&config, d, c, s)?;
    Ok(config)
}

pub struct Pipeline {
    pub config: PipelineConfig,
    pub detector: Model,
    pub classifier: Model,
    pub segmenter: Model,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, detector: Model, classifier: Model, segmenter: Model) -> Result<Self> {
        check_compatible(&config, &detector, &classifier, &segmenter)?;
        Ok(Self { config, detector, classifier, segmenter })
    }

    /// Loads the three model files, relative paths taken against `base`. All
    /// missing files are reported before anything is read.
    pub fn load(config: PipelineConfig, base: impl AsRef<Path>) -> Result<Self> {
        let paths = config.resolved(base.as_ref());
        let missing: Vec<PathBuf> = paths.iter().filter(|p| !p.is_file()).cloned().collect();
        if !missing.is_empty() {
            return Err(CoreError::Missing(missing));
        }
        let [d, c, s] = paths;
        Self::new(config, load_model(d)?, load_model(c)?, load_model(s)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceRecord {
    /// 1-based; 0 is background in instance maps.
    pub id: u16,
    pub bbox: BoundingBox,
    pub prediction: ClassPrediction,
    /// Foreground on the patch grid.
    pub mask: Mask,
    pub geometry: CropGeometry,
}

impl InstanceRecord {
    pub fn confidence(&self) -> f64 {
        self.prediction.probabilities[self.prediction.class_index]
    }
}

pub fn run_pipeline(p: &Pipeline, image: &GrayImage) -> Result<Vec<InstanceRecord>> {
    let boxes = detect(&p.detector, image, &p.config.detect)?;
    let crops = crop_instances(image, &boxes, p.config.margin, p.config.patch_size)?;
    if crops.len() >= u16::MAX as usize {
        return invalid(format!("{} instances do not fit a 16-bit instance map", crops.len()));
    }
    let patches: Vec<&GrayImage> = crops.iter().map(|c| &c.patch).collect();
    let predictions = classify_many(&p.classifier, &patches)?;
    let masks = segment_many(&p.segmenter, &patches)?;
    Ok(crops
        .into_iter()
        .zip(predictions)
        .zip(masks)
        .enumerate()
        .map(|(i, ((crop, prediction), mask))| InstanceRecord { id: i as u16 + 1, bbox: crop.source, prediction, mask, geometry: crop.geometry })
        .collect())
}

/// Scene-sized instance labeling with the records it was built from.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceMap {
    pub width: usize,
    pub height: usize,
    /// Instance id per pixel, 0 for background.
    pub ids: Vec<u16>,
    pub records: Vec<InstanceRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceEntry {
    pub id: u16,
    pub class: String,
    pub class_index: usize,
    pub probability: f64,
    pub probabilities: Vec<f64>,
    pub bbox: BoundingBox,
    pub offset: (f64, f64),
    pub scale: (f64, f64),
    pub pixels: usize,
}

/// Fixed overlay colors, cycled by class index.
pub const CLASS_COLORS: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
];

impl InstanceMap {
    fn record(&self, id: u16) -> Option<&InstanceRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Per-pixel class label: 0 background, class index + 1 otherwise.
    pub fn class_labels(&self) -> Vec<u16> {
        let lut: std::collections::HashMap<u16, u16> =
            self.records.iter().map(|r| (r.id, r.prediction.class_index as u16 + 1)).collect();
        self.ids.iter().map(|&id| if id == 0 { 0 } else { lut[&id] }).collect()
    }

    pub fn instance_mask(&self, id: u16) -> Mask {
        Mask::from_fn(self.width, self.height, |x, y| self.ids[y * self.width + x] == id)
    }

    pub fn entries(&self) -> Vec<InstanceEntry> {
        self.records
            .iter()
            .map(|r| InstanceEntry {
                id: r.id,
                class: r.prediction.class.clone(),
                class_index: r.prediction.class_index,
                probability: r.confidence(),
                probabilities: r.prediction.probabilities.clone(),
                bbox: r.bbox,
                offset: r.geometry.offset,
                scale: r.geometry.scale,
                pixels: self.ids.iter().filter(|&&i| i == r.id).count(),
            })
            .collect()
    }

    /// Gray scene with each labeled pixel tinted by its class color.
    pub fn overlay(&self, image: &GrayImage) -> RgbImage {
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let g = image.get_pixel(x, y).0[0] as f64;
            let id = self.ids[y as usize * self.width + x as usize];
            match self.record(id).filter(|_| id != 0) {
                None => image::Rgb([g as u8; 3]),
                Some(r) => {
                    let c = CLASS_COLORS[r.prediction.class_index % CLASS_COLORS.len()];
                    image::Rgb(c.map(|v| (0.45 * g + 0.55 * v as f64).round() as u8))
                }
            }
        })
    }

    /// Writes `<stem>.pgm` (16-bit ids), `<stem>.json` and `<stem>_overlay.ppm`.
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str, image: &GrayImage) -> Result<[PathBuf; 3]> {
        let dir = dir.as_ref();
        let paths = [dir.join(format!("{stem}.pgm")), dir.join(format!("{stem}.json")), dir.join(format!("{stem}_overlay.ppm"))];
        write_pgm16(&paths[0], self.width as u32, self.height as u32, &self.ids)?;
        fs::write(&paths[1], serde_json::to_string_pretty(&self.entries())?)?;
        write_ppm(&paths[2], &self.overlay(image))?;
        Ok(paths)
    }
}

/// Warps each patch mask back into the scene (nearest neighbour at pixel
/// centers). A pixel claimed by several instances goes to the one with the
/// higher class probability, then the lower id.
pub fn reconstruct(width: usize, height: usize, records: &[InstanceRecord]) -> Result<InstanceMap> {
    let mut ids = vec![0u16; width * height];
    let mut owner_conf = vec![f64::NEG_INFINITY; width * height];
    let mut seen = std::collections::BTreeSet::new();
    for r in records {
        if r.id == 0 || !seen.insert(r.id) {
            return invalid(format!("instance id {} is zero or repeated", r.id));
        }
        let g = &r.geometry;
        if r.mask.width() != g.size || r.mask.height() != g.size {
            return Err(CoreError::Mismatch(format!("instance {} mask does not match its {}px crop", r.id, g.size)));
        }
        if r.prediction.class_index >= r.prediction.probabilities.len() {
            return invalid(format!("instance {} has class index outside its probabilities", r.id));
        }
        let padded = g.padded_box();
        let Some(clip) = padded.clip(width, height) else {
            return invalid(format!("instance {} crop {padded:?} lies outside the {width}x{height} scene", r.id));
        };
        let conf = r.confidence();
        let (x0, y0) = (clip.x.floor() as usize, clip.y.floor() as usize);
        let (x1, y1) = (((clip.x + clip.w).ceil() as usize).min(width), ((clip.y + clip.h).ceil() as usize).min(height));
        for y in y0..y1 {
            for x in x0..x1 {
                let (px, py) = g.to_patch(x as f64 + 0.5, y as f64 + 0.5);
                if px < 0.0 || py < 0.0 || px >= g.size as f64 || py >= g.size as f64 || !r.mask.get(px as usize, py as usize) {
                    continue;
                }
                let k = y * width + x;
                let wins = ids[k] == 0 || conf > owner_conf[k] || (conf == owner_conf[k] && r.id < ids[k]);
                if wins {
                    ids[k] = r.id;
                    owner_conf[k] = conf;
                }
            }
        }
    }
    Ok(InstanceMap { width, height, ids, records: records.to_vec() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassOverlap {
    pub class: String,
    pub intersection: usize,
    pub union: usize,
    /// `None` when the class is absent from both prediction and truth.
    pub jaccard: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineEval {
    /// Σ_c |P_c ∩ T_c| / Σ_c |P_c ∪ T_c| over foreground classes.
    pub jaccard: f64,
    pub global_accuracy: f64,
    pub degenerate: bool,
    pub scored_pixels: usize,
    pub ignored_pixels: usize,
    pub per_class: Vec<ClassOverlap>,
}

/// Truth label per pixel (0 background, class index + 1) over every instance;
/// where instances overlap the later one wins.
pub fn all_instance_labels(scene: &Scene) -> Vec<u16> {
    let w = scene.width();
    let mut labels = vec![0u16; w * scene.height()];
    for inst in &scene.instances {
        for (x, y) in inst.mask.iter_set() {
            labels[(inst.bbox.y + y) * w + inst.bbox.x + x] = inst.class_index as u16 + 1;
        }
    }
    labels
}

/// Which instances count as scene truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruthScope {
    /// Complete instances only; pixels of incomplete ones are background, the
    /// same target definition the detector is trained on.
    #[default]
    Complete,
    /// Complete instances, with incomplete-instance pixels left out of scoring.
    IgnoreIncomplete,
    /// Every instance.
    All,
}

impl TruthScope {
    /// Truth labels of a scene and the pixels excluded from scoring.
    pub fn labels(self, scene: &Scene) -> (Vec<u16>, Option<Mask>) {
        match self {
            TruthScope::Complete => (scene.truth_labels().0, None),
            TruthScope::IgnoreIncomplete => {
                let (t, m) = scene.truth_labels();
                (t, Some(m))
            }
            TruthScope::All => (all_instance_labels(scene), None),
        }
    }
}

/// Class-aware scene scoring against the truth selected by `scope`.
pub fn evaluate_labels(predicted: &[&[u16]], scenes: &[&Scene], classes: &[String], scope: TruthScope) -> Result<PipelineEval> {
    if predicted.len() != scenes.len() {
        return invalid(format!("{} predictions for {} scenes", predicted.len(), scenes.len()));
    }
    let k = classes.len();
    let (mut inter, mut union) = (vec![0usize; k], vec![0usize; k]);
    let (mut correct, mut scored, mut ignored) = (0usize, 0usize, 0usize);
    for (pred, scene) in predicted.iter().zip(scenes) {
        if pred.len() != scene.width() * scene.height() {
            return Err(CoreError::Mismatch(format!("prediction of {} pixels for scene {}", pred.len(), scene.id)));
        }
        let (truth, ignore) = scope.labels(scene);
        for (i, (&p, &t)) in pred.iter().zip(&truth).enumerate() {
            if ignore.as_ref().is_some_and(|m| m.bits()[i]) {
                ignored += 1;
                continue;
            }
            if p as usize > k {
                return invalid(format!("predicted label {p} outside {k} classes"));
            }
            scored += 1;
            correct += (p == t) as usize;
            for c in 1..=k as u16 {
                let (a, b) = (p == c, t == c);
                inter[c as usize - 1] += (a && b) as usize;
                union[c as usize - 1] += (a || b) as usize;
            }
        }
    }
    let (si, su): (usize, usize) = (inter.iter().sum(), union.iter().sum());
    Ok(PipelineEval {
        jaccard: if su == 0 { 1.0 } else { si as f64 / su as f64 },
        global_accuracy: if scored == 0 { 1.0 } else { correct as f64 / scored as f64 },
        degenerate: su == 0,
        scored_pixels: scored,
        ignored_pixels: ignored,
        per_class: classes
            .iter()
            .enumerate()
            .map(|(c, name)| ClassOverlap {
                class: name.clone(),
                intersection: inter[c],
                union: union[c],
                jaccard: (union[c] > 0).then(|| inter[c] as f64 / union[c] as f64),
            })
            .collect(),
    })
}

pub fn evaluate_pipeline(maps: &[&InstanceMap], scenes: &[&Scene], classes: &[String], scope: TruthScope) -> Result<PipelineEval> {
    let labels: Vec<Vec<u16>> = maps.iter().map(|m| m.class_labels()).collect();
    let refs: Vec<&[u16]> = labels.iter().map(|l| l.as_slice()).collect();
    evaluate_labels(&refs, scenes, classes, scope)
}

pub const BASELINE_PRESET: &str = "unet_large";

/// Layer stack of the whole-scene segmenter: the large U-Net with one output
/// channel per class plus background.
pub fn baseline_model(size: usize, classes: usize, seed: u64) -> Result<Model> {
    let meta = darwin_nn::ModelMeta { candidate_id: "baseline".into(), stage: "baseline".into(), seed, classes: vec![] };
    Ok(Model::new(&[1, size, size], segmenter_layers(BASELINE_PRESET, classes + 1)?, seed, meta)?)
}

/// Trains the whole-scene segmenter on the truth labels of `scope`.
pub fn train_baseline(model: &mut Model, train: &[&Scene], validation: &[&Scene], scope: TruthScope, cfg: &TrainConfig) -> Result<TrainHistory> {
    let size = model.input_shape().get(1).copied().unwrap_or(0);
    let set = |scenes: &[&Scene]| -> Result<PixelSet> {
        let imgs: Vec<&GrayImage> = scenes.iter().map(|s| &s.image).collect();
        let labels = scenes.iter().map(|s| scope.labels(s).0.into_iter().map(usize::from).collect()).collect();
        PixelSet::new(&imgs, labels, size)
    };
    train_pixels(model, &set(train)?, &set(validation)?, cfg)
}

/// Per-pixel class labels from the whole-scene segmenter.
pub fn baseline_labels(model: &Model, scenes: &[&Scene]) -> Result<Vec<Vec<u16>>> {
    let imgs: Vec<&GrayImage> = scenes.iter().map(|s| &s.image).collect();
    Ok(label_map(model, &imgs)?.into_iter().map(|l| l.into_iter().map(|v| v as u16).collect()).collect())
}
