//! Detection stage: a single-shot grid detector that only fires on complete
//! instances, plus the box utilities and crop extraction around it.
//!
//! The network maps a `1 × S × S` image to a `5 × G × G` grid. Channel 0 is an
//! objectness logit; channels 1–4 regress the box center within its cell and
//! the log of its size in cell units.

mod ap;
mod boxes;
mod crop;

use darwin_nn::{bce_with_logit, predict, LayerSpec, Model, ModelMeta, Scalar, Tensor, TrainConfig, TrainHistory, TrainingSet};
use image::GrayImage;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use ap::{evaluate_detection, match_predictions, trapezoid_ap, write_detections_csv, write_pr_csv, DetectionEval, PrPoint};
pub use boxes::{iou, nms, score_order, BoundingBox};
pub use crop::{crop_geometry, crop_instances, extract_patch, CropGeometry, CropRecord, PATCH_SIZE};

use crate::error::{invalid, CoreError, Result};
use crate::imgops::{dihedral_planes, dihedral_point, image_to_input};
use crate::synth::Scene;

pub const DETECTOR_PRESETS: &[&str] = &["shallow", "deep"];

pub const DEFAULT_GRID: usize = 8;

fn pools_needed(size: usize, grid: usize) -> Result<usize> {
    if grid == 0 || size % grid != 0 || !(size / grid).is_power_of_two() {
        return invalid(format!("input {size} is not a power-of-two multiple of grid {grid}"));
    }
    Ok((size / grid).trailing_zeros() as usize)
}

/// Layer stack for a detector preset on `size × size` input with a `grid × grid` head.
pub fn detector_layers(preset: &str, size: usize, grid: usize) -> Result<Vec<LayerSpec>> {
    let pools = pools_needed(size, grid)?;
    let (conv, pool, relu) = (LayerSpec::conv, LayerSpec::pool, LayerSpec::Relu);
    let (body, inner_pools) = match preset {
        "shallow" => (
            vec![
                conv(1, 8, 3), relu, pool(2),
                conv(8, 16, 3), relu, pool(2),
                conv(16, 16, 3), relu, pool(2),
                conv(16, 5, 3),
            ],
            3,
        ),
        "deep" => (
            vec![
                conv(1, 8, 3), relu, conv(8, 8, 3), relu, pool(2),
                conv(8, 16, 3), relu, pool(2),
                conv(16, 16, 3), relu, pool(2),
                conv(16, 24, 3), relu, pool(2),
                conv(24, 5, 3),
            ],
            4,
        ),
        other => return Err(CoreError::UnknownPreset { stage: "detect".into(), preset: other.into() }),
    };
    if pools < inner_pools {
        return invalid(format!("preset `{preset}` needs input at least {} times the grid", 1 << inner_pools));
    }
    let mut layers = vec![pool(2); pools - inner_pools];
    layers.extend(body);
    Ok(layers)
}

pub fn build_detector(preset: &str, size: usize, grid: usize, seed: u64, candidate_id: &str) -> Result<Model> {
    let meta = ModelMeta { candidate_id: candidate_id.into(), stage: "detect".into(), seed, classes: vec![] };
    Ok(Model::new(&[1, size, size], detector_layers(preset, size, grid)?, seed, meta)?)
}

/// `(size, grid)` of a detector model, checking its shapes.
pub fn detector_geometry(model: &Model) -> Result<(usize, usize)> {
    match (model.input_shape(), model.output_shape()) {
        ([1, s, s2], [5, g, g2]) if s == s2 && g == g2 && s % g == 0 => Ok((*s, *g)),
        (i, o) => Err(CoreError::Mismatch(format!("not a detector: input {i:?}, output {o:?}"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorHyper {
    pub train: TrainConfig,
    /// Weight of the box regression term against objectness.
    pub box_weight: f64,
}

impl Default for DetectorHyper {
    fn default() -> Self {
        Self { train: TrainConfig { epochs: 60, batch_size: 8, lr: 0.002, momentum: 0.9, patience: 8, seed: 0 }, box_weight: 2.0 }
    }
}

/// Boxes of the complete instances of a scene, score 1.
pub fn truth_boxes(scene: &Scene) -> Vec<BoundingBox> {
    scene.complete().map(|i| BoundingBox::from_pixels(i.bbox, 1.0)).collect()
}

/// Grid targets for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct GridTarget {
    /// Objectness per cell, row-major `G × G`.
    pub objectness: Vec<f32>,
    /// `(tx, ty, tw, th)` per cell; meaningful only where objectness is 1.
    pub offsets: Vec<[f32; 4]>,
}

/// Cells holding a box center get objectness 1 with offset targets. When two
/// centers share a cell the larger box keeps it.
pub fn encode_targets(boxes: &[BoundingBox], size: usize, grid: usize) -> GridTarget {
    let cell = (size / grid) as f64;
    let mut t = GridTarget { objectness: vec![0.0; grid * grid], offsets: vec![[0.0; 4]; grid * grid] };
    let mut order: Vec<&BoundingBox> = boxes.iter().collect();
    order.sort_by(|a, b| b.area().total_cmp(&a.area()).then(score_order(a, b)));
    for b in order {
        let (cx, cy) = b.center();
        let (gx, gy) = ((cx / cell).floor(), (cy / cell).floor());
        if gx < 0.0 || gy < 0.0 || gx >= grid as f64 || gy >= grid as f64 {
            continue;
        }
        let k = gy as usize * grid + gx as usize;
        if t.objectness[k] == 1.0 {
            continue;
        }
        t.objectness[k] = 1.0;
        t.offsets[k] = [(cx / cell - gx) as f32, (cy / cell - gy) as f32, (b.w / cell).ln() as f32, (b.h / cell).ln() as f32];
    }
    t
}

/// Objectness BCE summed over cells plus `box_weight` times the squared error of
/// the four offsets on positive cells, averaged over the batch.
pub fn detection_loss<T: Scalar>(output: &Tensor<T>, targets: &[GridTarget], box_weight: f64) -> Result<(f64, Tensor<T>)> {
    let n = targets.len();
    let cells = targets.first().map_or(0, |t| t.objectness.len());
    if output.shape().len() != 4 || output.batch() != n || output.item_len() != 5 * cells {
        return Err(CoreError::Mismatch(format!("detector output {:?} vs {n} targets of {cells} cells", output.shape())));
    }
    let mut grad = Tensor::<T>::zeros(output.shape().to_vec());
    let mut loss = 0.0;
    let inv_n = 1.0 / n as f64;
    for (i, t) in targets.iter().enumerate() {
        let out = output.item(i);
        let base = i * 5 * cells;
        for c in 0..cells {
            let (l, g) = bce_with_logit(out[c].as_f64(), t.objectness[c] as f64);
            loss += l;
            grad.data_mut()[base + c] = T::of_f64(g * inv_n);
            if t.objectness[c] == 1.0 {
                for j in 0..4 {
                    let d = out[(j + 1) * cells + c].as_f64() - t.offsets[c][j] as f64;
                    loss += box_weight * d * d;
                    grad.data_mut()[base + (j + 1) * cells + c] = T::of_f64(2.0 * box_weight * d * inv_n);
                }
            }
        }
    }
    Ok((loss * inv_n, grad))
}

/// Scenes prepared for detector training. Augmentation draws one of the eight
/// right-angle symmetries per image and moves the boxes with it.
pub struct DetectionSet {
    inputs: Vec<Vec<f32>>,
    boxes: Vec<Vec<BoundingBox>>,
    size: usize,
    grid: usize,
    box_weight: f64,
}

impl DetectionSet {
    pub fn new(scenes: &[&Scene], size: usize, grid: usize, box_weight: f64) -> Result<Self> {
        pools_needed(size, grid)?;
        for s in scenes {
            if s.width() != size || s.height() != size {
                return Err(CoreError::Mismatch(format!("scene {} is {}x{}, detector expects {size}x{size}", s.id, s.width(), s.height())));
            }
        }
        Ok(Self {
            inputs: scenes.iter().map(|s| image_to_input(&s.image)).collect(),
            boxes: scenes.iter().map(|s| truth_boxes(s)).collect(),
            size,
            grid,
            box_weight,
        })
    }
}

fn transform_box(b: &BoundingBox, k: usize, s: f64) -> BoundingBox {
    let (u0, v0) = dihedral_point(k, b.x, b.y, s);
    let (u1, v1) = dihedral_point(k, b.x + b.w, b.y + b.h, s);
    BoundingBox::new(u0.min(u1), v0.min(v1), (u1 - u0).abs(), (v1 - v0).abs(), b.score)
}

impl TrainingSet for DetectionSet {
    type Target = Vec<GridTarget>;

    fn len(&self) -> usize {
        self.inputs.len()
    }

    fn batch(&self, indices: &[usize], mut augment: Option<&mut ChaCha8Rng>) -> darwin_nn::Result<(Tensor, Self::Target)> {
        let s = self.size;
        let mut data = Vec::with_capacity(indices.len() * s * s);
        let mut targets = Vec::with_capacity(indices.len());
        for &i in indices {
            let k = augment.as_deref_mut().map_or(0, |rng| rng.random_range(0..8));
            if k == 0 {
                data.extend_from_slice(&self.inputs[i]);
                targets.push(encode_targets(&self.boxes[i], s, self.grid));
            } else {
                data.extend(dihedral_planes(&self.inputs[i], s, k));
                let moved: Vec<_> = self.boxes[i].iter().map(|b| transform_box(b, k, s as f64)).collect();
                targets.push(encode_targets(&moved, s, self.grid));
            }
        }
        Ok((Tensor::new(vec![indices.len(), 1, s, s], data)?, targets))
    }

    fn loss(&self, output: &Tensor, target: &Self::Target) -> darwin_nn::Result<(f64, Tensor)> {
        detection_loss(output, target, self.box_weight).map_err(|e| darwin_nn::NnError::Invalid(e.to_string()))
    }
}

/// Trains on the given training scenes, early-stopping on the validation scenes.
pub fn train_detector(model: &mut Model, train: &[&Scene], validation: &[&Scene], hyper: &DetectorHyper) -> Result<TrainHistory> {
    if train.is_empty() {
        return invalid("detector training split is empty");
    }
    let (size, grid) = detector_geometry(model)?;
    let train_set = DetectionSet::new(train, size, grid, hyper.box_weight)?;
    let val_set = DetectionSet::new(validation, size, grid, hyper.box_weight)?;
    Ok(darwin_nn::fit(model, &train_set, &val_set, &hyper.train)?)
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Boxes for every cell of one output item with objectness at least `threshold`,
/// clipped to the image, before suppression.
pub fn decode_grid(item: &[f32], size: usize, grid: usize, threshold: f64) -> Vec<BoundingBox> {
    let cells = grid * grid;
    let cell = (size / grid) as f64;
    let max_log = (size as f64 / cell).ln();
    let mut out = Vec::new();
    for c in 0..cells {
        let score = sigmoid(item[c] as f64);
        if score < threshold {
            continue;
        }
        let (gx, gy) = ((c % grid) as f64, (c / grid) as f64);
        let at = |j: usize| item[j * cells + c] as f64;
        let cx = (gx + at(1).clamp(0.0, 1.0)) * cell;
        let cy = (gy + at(2).clamp(0.0, 1.0)) * cell;
        let w = at(3).clamp(-4.0, max_log).exp() * cell;
        let h = at(4).clamp(-4.0, max_log).exp() * cell;
        if let Some(b) = BoundingBox::new(cx - w / 2.0, cy - h / 2.0, w, h, score).clip(size, size) {
            out.push(b);
        }
    }
    out
}

/// Detection settings applied after the network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectParams {
    pub conf_threshold: f64,
    pub nms_iou: f64,
}

impl Default for DetectParams {
    fn default() -> Self {
        Self { conf_threshold: 0.5, nms_iou: 0.3 }
    }
}

impl DetectParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.conf_threshold > 0.0 && self.conf_threshold <= 1.0) || !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return invalid(format!("conf_threshold must be in (0, 1] and nms_iou in (0, 1), got {self:?}"));
        }
        Ok(())
    }
}

/// Detects on several images at once, in batches.
pub fn detect_many(model: &Model, images: &[&GrayImage], params: &DetectParams) -> Result<Vec<Vec<BoundingBox>>> {
    params.validate()?;
    let (size, grid) = detector_geometry(model)?;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(16) {
        let mut data = Vec::with_capacity(chunk.len() * size * size);
        for img in chunk {
            if img.width() as usize != size || img.height() as usize != size {
                return Err(CoreError::Mismatch(format!("image {}x{} vs detector input {size}x{size}", img.width(), img.height())));
            }
            data.extend(image_to_input(img));
        }
        let pred = predict(model, &Tensor::new(vec![chunk.len(), 1, size, size], data)?)?;
        for i in 0..chunk.len() {
            out.push(nms(&decode_grid(pred.item(i), size, grid, params.conf_threshold), params.nms_iou));
        }
    }
    Ok(out)
}

pub fn detect(model: &Model, image: &GrayImage, params: &DetectParams) -> Result<Vec<BoundingBox>> {
    Ok(detect_many(model, &[image], params)?.remove(0))
}

/// Validation-style evaluation: detect at a low threshold to trace the whole
/// precision-recall curve, then score against complete-instance boxes.
pub fn evaluate_detector(model: &Model, scenes: &[&Scene], params: &DetectParams, iou_match: f64) -> Result<DetectionEval> {
    let images: Vec<&GrayImage> = scenes.iter().map(|s| &s.image).collect();
    let preds = detect_many(model, &images, params)?;
    let truths: Vec<_> = scenes.iter().map(|s| truth_boxes(s)).collect();
    Ok(evaluate_detection(&preds, &truths, iou_match))
}
