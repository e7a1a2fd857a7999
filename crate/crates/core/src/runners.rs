//! Tournament adapters for the three stages.

use darwin_nn::{Model, TrainConfig, TrainHistory};
use image::GrayImage;

use crate::classify::{build_classifier, evaluate_classifier, train_classifier, LabeledPatches};
use crate::crops::InstanceCrop;
use crate::detect::{build_detector, evaluate_detector, train_detector, DetectParams, DetectorHyper};
use crate::error::Result;
use crate::mask::Mask;
use crate::segment::{build_segmenter, evaluate_segmentation, segment_many, train_segmenter, MaskedPatches};
use crate::synth::{DatasetSplit, Scene};
use crate::tournament::{CandidateSpec, Stage, StageMetrics, StageRunner};

fn seeded(cfg: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig { seed, ..cfg.clone() }
}

pub struct DetectRunner<'a> {
    pub scenes: &'a [Scene],
    pub split: &'a DatasetSplit,
    pub size: usize,
    pub grid: usize,
    pub hyper: DetectorHyper,
    /// Post-processing used when scoring; a low threshold traces the full PR curve.
    pub eval: DetectParams,
    pub iou_match: f64,
}

impl DetectRunner<'_> {
    fn pick(&self, idx: &[usize]) -> Vec<&Scene> {
        idx.iter().map(|&i| &self.scenes[i]).collect()
    }

    fn metrics(&self, model: &Model, idx: &[usize]) -> Result<StageMetrics> {
        let e = evaluate_detector(model, &self.pick(idx), &self.eval, self.iou_match)?;
        Ok(StageMetrics { ap: Some(e.ap), ..Default::default() })
    }
}

impl StageRunner for DetectRunner<'_> {
    fn stage(&self) -> Stage {
        Stage::Detect
    }

    fn build(&self, spec: &CandidateSpec) -> Result<Model> {
        build_detector(&spec.preset, self.size, self.grid, spec.seed, &spec.id)
    }

    fn train(&self, model: &mut Model, seed: u64) -> Result<TrainHistory> {
        let hyper = DetectorHyper { train: seeded(&self.hyper.train, seed), ..self.hyper.clone() };
        train_detector(model, &self.pick(&self.split.train), &self.pick(&self.split.validation), &hyper)
    }

    fn train_len(&self) -> usize {
        self.split.train.len()
    }

    fn evaluate_validation(&self, model: &Model) -> Result<StageMetrics> {
        self.metrics(model, &self.split.validation)
    }

    fn evaluate_test(&self, model: &Model) -> Result<StageMetrics> {
        self.metrics(model, &self.split.test)
    }
}

/// Crops of the three splits.
pub struct CropSplits {
    pub train: Vec<InstanceCrop>,
    pub validation: Vec<InstanceCrop>,
    pub test: Vec<InstanceCrop>,
}

pub fn labeled(c: &[InstanceCrop]) -> LabeledPatches<'_> {
    LabeledPatches { patches: c.iter().map(|x| &x.crop.patch).collect(), labels: c.iter().map(|x| x.class_index).collect() }
}

pub fn masked(c: &[InstanceCrop]) -> MaskedPatches<'_> {
    MaskedPatches { patches: c.iter().map(|x| &x.crop.patch).collect(), masks: c.iter().map(|x| &x.mask).collect() }
}

pub struct ClassifyRunner<'a> {
    pub crops: &'a CropSplits,
    pub classes: Vec<String>,
    pub size: usize,
    pub train_cfg: TrainConfig,
}

impl ClassifyRunner<'_> {
    fn metrics(&self, model: &Model, c: &[InstanceCrop]) -> Result<StageMetrics> {
        let (e, _) = evaluate_classifier(model, &labeled(c))?;
        Ok(StageMetrics { accuracy: Some(e.accuracy), ..Default::default() })
    }
}

impl StageRunner for ClassifyRunner<'_> {
    fn stage(&self) -> Stage {
        Stage::Classify
    }

    fn build(&self, spec: &CandidateSpec) -> Result<Model> {
        build_classifier(&spec.preset, self.size, &self.classes, spec.seed, &spec.id)
    }

    fn train(&self, model: &mut Model, seed: u64) -> Result<TrainHistory> {
        train_classifier(model, &labeled(&self.crops.train), &labeled(&self.crops.validation), &seeded(&self.train_cfg, seed))
    }

    fn train_len(&self) -> usize {
        self.crops.train.len()
    }

    fn evaluate_validation(&self, model: &Model) -> Result<StageMetrics> {
        self.metrics(model, &self.crops.validation)
    }

    fn evaluate_test(&self, model: &Model) -> Result<StageMetrics> {
        self.metrics(model, &self.crops.test)
    }
}

pub struct SegmentRunner<'a> {
    pub crops: &'a CropSplits,
    pub size: usize,
    pub train_cfg: TrainConfig,
}

impl SegmentRunner<'_> {
    fn metrics(&self, model: &Model, c: &[InstanceCrop]) -> Result<StageMetrics> {
        let patches: Vec<&GrayImage> = c.iter().map(|x| &x.crop.patch).collect();
        let pred = segment_many(model, &patches)?;
        let pred: Vec<&Mask> = pred.iter().collect();
        let truth: Vec<&Mask> = c.iter().map(|x| &x.mask).collect();
        let e = evaluate_segmentation(&pred, &truth)?;
        Ok(StageMetrics { jaccard: Some(e.jaccard), global_accuracy: Some(e.global_accuracy), ..Default::default() })
    }
}

impl StageRunner for SegmentRunner<'_> {
    fn stage(&self) -> Stage {
        Stage::Segment
    }

    fn build(&self, spec: &CandidateSpec) -> Result<Model> {
        build_segmenter(&spec.preset, self.size, spec.seed, &spec.id)
    }

    fn train(&self, model: &mut Model, seed: u64) -> Result<TrainHistory> {
        train_segmenter(model, &masked(&self.crops.train), &masked(&self.crops.validation), &seeded(&self.train_cfg, seed))
    }

    fn train_len(&self) -> usize {
        self.crops.train.len()
    }

    fn evaluate_validation(&self, model: &Model) -> Result<StageMetrics> {
        self.metrics(model, &self.crops.validation)
    }

    fn evaluate_test(&self, model: &Model) -> Result<StageMetrics> {
        self.metrics(model, &self.crops.test)
    }
}
