//! Finite-difference checks of every shipped preset under its training loss.

use std::time::Instant;

use darwin_nn::{grad_check, grad_check_softmax, loss_pixel_ce, LabelMap, Model, ModelMeta, Tensor};
use image::GrayImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classify::{classifier_layers, CLASSIFIER_PRESETS};
use crate::detect::{detection_loss, detector_layers, encode_targets, truth_boxes, DETECTOR_PRESETS};
use crate::error::{invalid, Result};
use crate::imgops::image_to_input;
use crate::segment::{segmenter_layers, SEGMENTER_PRESETS};
use crate::synth::{generate_scene, virus_classes, SceneConfig};
use crate::tournament::Stage;

/// Scene side and grid used for detector checks.
pub const CHECK_SCENE: (usize, usize) = (64, 4);
/// Patch side used for classifier and segmenter checks.
pub const CHECK_PATCH: usize = 16;
pub const CHECK_CLASSES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PresetCheck {
    pub stage: Stage,
    pub preset: String,
    pub params: usize,
    pub checked: usize,
    pub kinks: usize,
    pub max_relative_error: f64,
    pub seconds: f64,
}

pub fn all_presets() -> Vec<(Stage, &'static str)> {
    let mut v: Vec<(Stage, &str)> = DETECTOR_PRESETS.iter().map(|&p| (Stage::Detect, p)).collect();
    v.extend(CLASSIFIER_PRESETS.iter().map(|&p| (Stage::Classify, p)));
    v.extend(SEGMENTER_PRESETS.iter().map(|&p| (Stage::Segment, p)));
    v
}

/// A disk on a textured background, as an engine input.
fn textured_disk(size: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = size as f64 / 2.0;
    let img = GrayImage::from_fn(size as u32, size as u32, |x, y| {
        let inside = (x as f64 + 0.5 - c).hypot(y as f64 + 0.5 - c) < size as f64 / 3.0;
        let base = if inside { 180.0 } else { 70.0 };
        image::Luma([(base + rng.random_range(-30.0..30.0f64)) as u8])
    });
    image_to_input(&img)
}

fn meta(stage: Stage, preset: &str) -> ModelMeta {
    ModelMeta { candidate_id: preset.into(), stage: stage.name().into(), seed: 7, classes: vec![] }
}

/// Checks one preset at the reduced check geometry (same layer stack, smaller
/// input) with batch 2.
pub fn check_preset(stage: Stage, preset: &str, epsilon: f64) -> Result<PresetCheck> {
    let start = Instant::now();
    let (model, report) = match stage {
        Stage::Detect => {
            let (size, grid) = CHECK_SCENE;
            let model = Model::new(&[1, size, size], detector_layers(preset, size, grid)?, 7, meta(stage, preset))?;
            let classes: Vec<_> = virus_classes().iter().map(|c| c.scaled(0.5)).collect();
            let cfg = SceneConfig { width: size, height: size, count_target: 3, ..Default::default() };
            let scenes = [generate_scene(&classes, &cfg, 11)?, generate_scene(&classes, &cfg, 12)?];
            let mut data = Vec::new();
            for s in &scenes {
                data.extend(image_to_input(&s.image));
            }
            let targets: Vec<_> = scenes.iter().map(|s| encode_targets(&truth_boxes(s), size, grid)).collect();
            let batch = Tensor::new(vec![2, 1, size, size], data)?;
            let r = grad_check(&model, &batch, |out| detection_loss(out, &targets, 2.0).map_err(|e| darwin_nn::NnError::Invalid(e.to_string())), epsilon)?;
            (model, r)
        }
        Stage::Classify => {
            let s = CHECK_PATCH;
            let model = Model::new(&[1, s, s], classifier_layers(preset, s, CHECK_CLASSES)?, 7, meta(stage, preset))?;
            let mut data = textured_disk(s, 1);
            data.extend(textured_disk(s, 2));
            let r = grad_check_softmax(&model, &Tensor::new(vec![2, 1, s, s], data)?, &[0, 2], epsilon)?;
            (model, r)
        }
        Stage::Segment => {
            let s = CHECK_PATCH;
            let model = Model::new(&[1, s, s], segmenter_layers(preset, 2)?, 7, meta(stage, preset))?;
            let mut data = textured_disk(s, 3);
            data.extend(textured_disk(s, 4));
            let c = s as f64 / 2.0;
            let one: Vec<usize> =
                (0..s * s).map(|i| ((((i % s) as f64 + 0.5 - c).hypot((i / s) as f64 + 0.5 - c)) < s as f64 / 3.0) as usize).collect();
            let labels = LabelMap::new([2, s, s], [one.clone(), one].concat())?;
            let r = grad_check(&model, &Tensor::new(vec![2, 1, s, s], data)?, |out| loss_pixel_ce(out, &labels), epsilon)?;
            (model, r)
        }
    };
    if report.checked == 0 {
        return invalid(format!("{} preset `{preset}`: no parameter could be checked", stage.name()));
    }
    Ok(PresetCheck {
        stage,
        preset: preset.into(),
        params: model.param_count(),
        checked: report.checked,
        kinks: report.kinks,
        max_relative_error: report.max_relative_error,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn check_all_presets(epsilon: f64) -> Result<Vec<PresetCheck>> {
    all_presets().into_iter().map(|(stage, p)| check_preset(stage, p, epsilon)).collect()
}
