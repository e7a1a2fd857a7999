//! Classification stage: patch → class, with channel-mean activation maps of
//! the last ReLU for inspecting what the network attends to.

use darwin_nn::{fit_with_hook, forward, loss_softmax_ce, predict, LayerSpec, Model, ModelMeta, Tensor, TrainConfig, TrainHistory, TrainingSet};
use image::GrayImage;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, CoreError, Result};
use crate::imgops::{dihedral_planes, image_to_input};

pub const CLASSIFIER_PRESETS: &[&str] = &["two_conv", "four_conv", "four_conv_wide"];

pub fn classifier_layers(preset: &str, size: usize, classes: usize) -> Result<Vec<LayerSpec>> {
    if size % 8 != 0 || size == 0 {
        return invalid(format!("classifier input {size} must be a multiple of 8"));
    }
    if classes < 2 {
        return invalid("a classifier needs at least 2 classes");
    }
    let (conv, pool, relu) = (LayerSpec::conv, LayerSpec::pool, LayerSpec::Relu);
    let flat = 16 * (size / 8) * (size / 8);
    let four = |first: usize| {
        vec![
            conv(1, first, 3), relu, pool(2),
            conv(first, 16, 3), relu, pool(2),
            conv(16, 16, 3), relu, conv(16, 16, 3), relu, pool(2),
            LayerSpec::dense(flat, classes),
        ]
    };
    Ok(match preset {
        "two_conv" => vec![
            conv(1, 8, 3), relu, pool(2),
            conv(8, 16, 3), relu, pool(2), pool(2),
            LayerSpec::dense(flat, classes),
        ],
        "four_conv" => four(8),
        "four_conv_wide" => four(12),
        other => return Err(CoreError::UnknownPreset { stage: "classify".into(), preset: other.into() }),
    })
}

pub fn build_classifier(preset: &str, size: usize, classes: &[String], seed: u64, candidate_id: &str) -> Result<Model> {
    let meta = ModelMeta { candidate_id: candidate_id.into(), stage: "classify".into(), seed, classes: classes.to_vec() };
    Ok(Model::new(&[1, size, size], classifier_layers(preset, size, classes.len())?, seed, meta)?)
}

fn patch_size(model: &Model) -> Result<usize> {
    match model.input_shape() {
        [1, h, w] if h == w => Ok(*h),
        s => Err(CoreError::Mismatch(format!("expected a square single-channel input, model takes {s:?}"))),
    }
}

fn check_patch(model: &Model, patch: &GrayImage) -> Result<usize> {
    let s = patch_size(model)?;
    if patch.width() as usize != s || patch.height() as usize != s {
        return Err(CoreError::Mismatch(format!("patch {}x{} vs model input {s}x{s}", patch.width(), patch.height())));
    }
    Ok(s)
}

/// Patches with class labels; training draws a random right-angle rotation
/// and mirror per patch.
pub struct PatchSet {
    inputs: Vec<Vec<f32>>,
    labels: Vec<usize>,
    size: usize,
}

impl PatchSet {
    pub fn new(patches: &[&GrayImage], labels: &[usize], size: usize) -> Result<Self> {
        if patches.len() != labels.len() {
            return invalid(format!("{} patches but {} labels", patches.len(), labels.len()));
        }
        if let Some(p) = patches.iter().find(|p| p.width() as usize != size || p.height() as usize != size) {
            return Err(CoreError::Mismatch(format!("patch {}x{} vs {size}x{size}", p.width(), p.height())));
        }
        Ok(Self { inputs: patches.iter().map(|p| image_to_input(p)).collect(), labels: labels.to_vec(), size })
    }
}

impl TrainingSet for PatchSet {
    type Target = Vec<usize>;

    fn len(&self) -> usize {
        self.inputs.len()
    }

    fn batch(&self, indices: &[usize], mut augment: Option<&mut ChaCha8Rng>) -> darwin_nn::Result<(Tensor, Vec<usize>)> {
        let s = self.size;
        let mut data = Vec::with_capacity(indices.len() * s * s);
        for &i in indices {
            match augment.as_deref_mut().map_or(0, |rng| rng.random_range(0..8)) {
                0 => data.extend_from_slice(&self.inputs[i]),
                k => data.extend(dihedral_planes(&self.inputs[i], s, k)),
            }
        }
        Ok((Tensor::new(vec![indices.len(), 1, s, s], data)?, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    fn loss(&self, output: &Tensor, target: &Vec<usize>) -> darwin_nn::Result<(f64, Tensor)> {
        loss_softmax_ce(output, target)
    }
}

/// Labeled patches for one split.
pub struct LabeledPatches<'a> {
    pub patches: Vec<&'a GrayImage>,
    pub labels: Vec<usize>,
}

pub fn train_classifier(model: &mut Model, train: &LabeledPatches, validation: &LabeledPatches, cfg: &TrainConfig) -> Result<TrainHistory> {
    train_classifier_with_hook(model, train, validation, cfg, &mut |_, _| {})
}

/// As [`train_classifier`], calling `hook(iteration, model)` after every step.
pub fn train_classifier_with_hook(
    model: &mut Model,
    train: &LabeledPatches,
    validation: &LabeledPatches,
    cfg: &TrainConfig,
    hook: &mut dyn FnMut(u64, &Model),
) -> Result<TrainHistory> {
    let k = model.output_shape().first().copied().unwrap_or(0);
    if model.output_shape().len() != 1 || k < 2 {
        return Err(CoreError::Mismatch(format!("classifier output {:?} is not a vector of >= 2 logits", model.output_shape())));
    }
    let mut counts = vec![0usize; k];
    for &l in &train.labels {
        if l >= k {
            return invalid(format!("label {l} outside {k} classes"));
        }
        counts[l] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return invalid(format!("class {c} has no training crops"));
    }
    if counts.iter().any(|&n| n < 10) {
        log::warn!("some classes have fewer than 10 training crops: {counts:?}");
    }
    let size = patch_size(model)?;
    let train_set = PatchSet::new(&train.patches, &train.labels, size)?;
    let val_set = PatchSet::new(&validation.patches, &validation.labels, size)?;
    Ok(fit_with_hook(model, &train_set, &val_set, cfg, hook)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPrediction {
    pub class_index: usize,
    pub class: String,
    pub probabilities: Vec<f64>,
}

/// Softmax of one logit vector, in f64.
pub fn softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let exps: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn prediction(model: &Model, probabilities: Vec<f64>) -> ClassPrediction {
    let class_index = argmax(&probabilities);
    let class = model.meta.classes.get(class_index).cloned().unwrap_or_else(|| format!("class_{class_index}"));
    ClassPrediction { class_index, class, probabilities }
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

pub fn classify_many(model: &Model, patches: &[&GrayImage]) -> Result<Vec<ClassPrediction>> {
    let mut out = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(64) {
        let mut data = Vec::new();
        let mut s = 0;
        for p in chunk {
            s = check_patch(model, p)?;
            data.extend(image_to_input(p));
        }
        let logits = predict(model, &Tensor::new(vec![chunk.len(), 1, s, s], data)?)?;
        out.extend((0..chunk.len()).map(|i| prediction(model, softmax(logits.item(i)))));
    }
    Ok(out)
}

pub fn classify(model: &Model, patch: &GrayImage) -> Result<ClassPrediction> {
    Ok(classify_many(model, &[patch])?.remove(0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierEval {
    pub accuracy: f64,
    pub total: usize,
    /// Rows are true classes, columns predicted classes.
    pub confusion: Vec<Vec<usize>>,
}

pub fn confusion_matrix(truth: &[usize], predicted: &[usize], classes: usize) -> Result<ClassifierEval> {
    if truth.is_empty() || truth.len() != predicted.len() {
        return invalid(format!("need equal non-empty label lists, got {} and {}", truth.len(), predicted.len()));
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= classes || p >= classes {
            return invalid(format!("label outside {classes} classes"));
        }
        confusion[t][p] += 1;
    }
    let trace: usize = (0..classes).map(|i| confusion[i][i]).sum();
    Ok(ClassifierEval { accuracy: trace as f64 / truth.len() as f64, total: truth.len(), confusion })
}

pub fn evaluate_classifier(model: &Model, test: &LabeledPatches) -> Result<(ClassifierEval, Vec<ClassPrediction>)> {
    let preds = classify_many(model, &test.patches)?;
    let predicted: Vec<usize> = preds.iter().map(|p| p.class_index).collect();
    let k = model.output_shape()[0];
    Ok((confusion_matrix(&test.labels, &predicted, k)?, preds))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationMap {
    pub width: usize,
    pub height: usize,
    /// Row-major values in [0, 1].
    pub values: Vec<f64>,
    /// Index of the ReLU layer the map was taken from.
    pub layer: usize,
}

impl ActivationMap {
    pub fn to_image(&self) -> GrayImage {
        let px: Vec<u8> = self.values.iter().map(|v| (v * 255.0).round() as u8).collect();
        GrayImage::from_raw(self.width as u32, self.height as u32, px).expect("map dimensions match its values")
    }
}

/// Channel mean of the last ReLU output, nearest-upsampled to the patch and
/// min-max normalized. A constant map becomes all zeros.
pub fn activation_map(model: &Model, patch: &GrayImage) -> Result<ActivationMap> {
    let layer = model.last_relu().ok_or_else(|| CoreError::Mismatch("model has no ReLU layer".into()))?;
    let s = check_patch(model, patch)?;
    let acts = forward(model, &Tensor::new(vec![1, 1, s, s], image_to_input(patch))?)?;
    let out = &acts.outputs()[layer];
    let (c, h, w) = match *out.shape() {
        [1, c, h, w] => (c, h, w),
        ref other => return Err(CoreError::Mismatch(format!("last ReLU output {other:?} is not a feature map"))),
    };
    if s % h != 0 || s % w != 0 {
        return Err(CoreError::Mismatch(format!("feature map {h}x{w} does not tile patch {s}")));
    }
    let data = out.item(0);
    let mean: Vec<f64> = (0..h * w).map(|i| (0..c).map(|ch| data[ch * h * w + i] as f64).sum::<f64>() / c as f64).collect();
    let (lo, hi) = mean.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &v| (l.min(v), u.max(v)));
    let (fy, fx) = (s / h, s / w);
    let values = (0..s * s)
        .map(|i| {
            let v = mean[(i / s / fy) * w + (i % s) / fx];
            if hi > lo {
                (v - lo) / (hi - lo)
            } else {
                0.0
            }
        })
        .collect();
    Ok(ActivationMap { width: s, height: s, values, layer })
}
