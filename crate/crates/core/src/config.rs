//! Experiment configuration: one TOML file drives generation, tournaments,
//! inference and analysis. Unknown keys are rejected and everything is
//! validated before any work starts.

use std::path::{Path, PathBuf};

use darwin_nn::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::classify::classifier_layers;
use crate::crops::CropSource;
use crate::detect::{detector_layers, DetectParams, DEFAULT_GRID, PATCH_SIZE};
use crate::error::{invalid, CoreError, Result};
use crate::pipeline::TruthScope;
use crate::segment::segmenter_layers;
use crate::synth::{cell_classes, virus_classes, SceneConfig, SpecimenClass, SplitRatios};
use crate::tournament::{CandidateSpec, SelectionMetric, Stage};

/// Either a built-in roster name (`"virus"`, `"cell"`) or explicit classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Roster {
    Named(String),
    Custom(Vec<SpecimenClass>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub classes: Roster,
    /// Multiplies every class diameter.
    #[serde(default = "one")]
    pub scale: f64,
    pub scenes: usize,
    #[serde(default = "default_ratios")]
    pub ratios: SplitRatios,
    #[serde(default)]
    pub scene: SceneConfig,
}

fn one() -> f64 {
    1.0
}

fn default_ratios() -> SplitRatios {
    "6:3:1".parse().expect("valid literal")
}

impl DatasetSection {
    pub fn resolve_classes(&self) -> Result<Vec<SpecimenClass>> {
        let base = match &self.classes {
            Roster::Named(n) if n == "virus" => virus_classes(),
            Roster::Named(n) if n == "cell" => cell_classes(),
            Roster::Named(n) => return invalid(format!("unknown class roster `{n}` (virus, cell, or a list of classes)")),
            Roster::Custom(c) => c.clone(),
        };
        if !(self.scale > 0.0) {
            return invalid("dataset.scale must be > 0");
        }
        let classes: Vec<_> = base.iter().map(|c| c.scaled(self.scale)).collect();
        for c in &classes {
            c.validate()?;
        }
        if classes.len() < 2 {
            return invalid("need at least 2 classes");
        }
        Ok(classes)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectSection {
    pub candidates: Vec<CandidateSpec>,
    #[serde(default = "default_grid")]
    pub grid: usize,
    #[serde(default = "ap")]
    pub metric: SelectionMetric,
    #[serde(default = "detect_train")]
    pub train: TrainConfig,
    #[serde(default = "box_weight")]
    pub box_weight: f64,
    /// Post-processing while scoring candidates.
    #[serde(default = "eval_params")]
    pub eval: DetectParams,
    #[serde(default = "half")]
    pub iou_match: f64,
}

fn default_grid() -> usize {
    DEFAULT_GRID
}
fn ap() -> SelectionMetric {
    SelectionMetric::Ap
}
fn detect_train() -> TrainConfig {
    crate::detect::DetectorHyper::default().train
}
fn box_weight() -> f64 {
    crate::detect::DetectorHyper::default().box_weight
}
fn eval_params() -> DetectParams {
    DetectParams { conf_threshold: 0.05, nms_iou: 0.3 }
}
fn half() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifySection {
    pub candidates: Vec<CandidateSpec>,
    #[serde(default = "accuracy")]
    pub metric: SelectionMetric,
    #[serde(default = "patch_train")]
    pub train: TrainConfig,
    #[serde(default)]
    pub crop_source: CropSource,
    /// Iterations at which activation maps of the winner are saved.
    #[serde(default)]
    pub snapshot_iterations: Vec<u64>,
}

fn accuracy() -> SelectionMetric {
    SelectionMetric::Accuracy
}

pub fn patch_train() -> TrainConfig {
    TrainConfig { epochs: 30, batch_size: 16, lr: 0.01, momentum: 0.9, patience: 6, seed: 0 }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentSection {
    pub candidates: Vec<CandidateSpec>,
    #[serde(default = "jaccard")]
    pub metric: SelectionMetric,
    #[serde(default = "patch_train")]
    pub train: TrainConfig,
    #[serde(default)]
    pub crop_source: CropSource,
}

fn jaccard() -> SelectionMetric {
    SelectionMetric::Jaccard
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSection {
    pub conf_threshold: f64,
    pub nms_iou: f64,
    pub margin: f64,
    pub patch_size: usize,
    /// Instances that count as scene truth for scoring and for the baseline.
    pub truth: TruthScope,
    pub alpha: f64,
}

impl Default for PipelineSection {
    fn default() -> Self {
        let d = DetectParams::default();
        Self { conf_threshold: d.conf_threshold, nms_iou: d.nms_iou, margin: 0.1, patch_size: PATCH_SIZE, truth: TruthScope::Complete, alpha: 0.05 }
    }
}

impl PipelineSection {
    pub fn detect_params(&self) -> DetectParams {
        DetectParams { conf_threshold: self.conf_threshold, nms_iou: self.nms_iou }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSection {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default = "baseline_train")]
    pub train: TrainConfig,
}

impl Default for BaselineSection {
    fn default() -> Self {
        Self { enabled: true, train: baseline_train() }
    }
}

fn yes() -> bool {
    true
}

fn baseline_train() -> TrainConfig {
    TrainConfig { epochs: 30, batch_size: 8, lr: 0.01, momentum: 0.9, patience: 6, seed: 0 }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetSection,
    pub detect: DetectSection,
    pub classify: ClassifySection,
    pub segment: SegmentSection,
    #[serde(default)]
    pub pipeline: PipelineSection,
    #[serde(default)]
    pub baseline: BaselineSection,
}

fn check_candidates(stage: Stage, metric: SelectionMetric, cands: &[CandidateSpec], build: impl Fn(&str) -> Result<()>) -> Result<()> {
    if cands.len() < 2 {
        return invalid(format!("{} needs at least 2 candidates", stage.name()));
    }
    if !metric.valid_for(stage) {
        return invalid(format!("metric {metric:?} cannot rank the {} stage", stage.name()));
    }
    let mut ids = std::collections::BTreeSet::new();
    for c in cands {
        if c.id.is_empty() || c.id.contains(['/', '\\']) || !ids.insert(&c.id) {
            return invalid(format!("{} candidate id `{}` is empty, contains a path separator, or is repeated", stage.name(), c.id));
        }
        build(&c.preset)?;
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CoreError::Invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::Format { path: path.into(), detail: e.to_string() })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        let classes = d.resolve_classes()?;
        d.scene.validate()?;
        if d.scene.width != d.scene.height {
            return invalid("scenes must be square for the detector");
        }
        if d.scenes < 3 {
            return invalid("dataset.scenes must be >= 3 so every split part is non-empty");
        }
        if crate::synth::split::split_sizes(d.scenes, d.ratios).contains(&0) {
            return invalid(format!("{} scenes leave a split part empty at {:?}", d.scenes, d.ratios));
        }
        let size = d.scene.width;
        let p = &self.pipeline;
        p.detect_params().validate()?;
        self.detect.eval.validate()?;
        if !(p.margin >= 0.0) || !(p.alpha > 0.0 && p.alpha < 1.0) || !(self.detect.iou_match > 0.0 && self.detect.iou_match <= 1.0) {
            return invalid("pipeline.margin must be >= 0, pipeline.alpha in (0, 1), detect.iou_match in (0, 1]");
        }
        for t in [&self.detect.train, &self.classify.train, &self.segment.train, &self.baseline.train] {
            t.validate()?;
        }
        check_candidates(Stage::Detect, self.detect.metric, &self.detect.candidates, |pr| {
            detector_layers(pr, size, self.detect.grid).map(|_| ())
        })?;
        check_candidates(Stage::Classify, self.classify.metric, &self.classify.candidates, |pr| {
            classifier_layers(pr, p.patch_size, classes.len()).map(|_| ())
        })?;
        check_candidates(Stage::Segment, self.segment.metric, &self.segment.candidates, |pr| segmenter_layers(pr, 2).map(|_| ()))?;
        if p.patch_size % 8 != 0 {
            return invalid("pipeline.patch_size must be a multiple of 8");
        }
        if self.baseline.enabled && size % 8 != 0 {
            return invalid("baseline needs a scene size divisible by 8");
        }
        Ok(())
    }
}
