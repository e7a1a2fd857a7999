//! Segmentation stage: small U-Nets that split a patch into foreground and
//! background.

use darwin_nn::{fit, loss_pixel_ce, predict, LabelMap, LayerSpec, Model, ModelMeta, Tensor, TrainConfig, TrainHistory, TrainingSet};
use image::GrayImage;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, CoreError, Result};
use crate::imgops::{dihedral_planes, image_to_input};
use crate::mask::Mask;

pub const SEGMENTER_PRESETS: &[&str] = &["unet_small", "unet_large"];

/// Encoder-decoder layer stack with `widths.len()` pooling levels below the
/// first block. `widths[0]` is the full-resolution width and the last entry
/// the bottleneck. Decoder blocks mirror the encoder widths.
fn unet(widths: &[usize], out_channels: usize) -> Vec<LayerSpec> {
    let (conv, relu) = (LayerSpec::conv, LayerSpec::Relu);
    let mut layers = Vec::new();
    let mut skips = Vec::new();
    let mut prev = 1;
    let levels = widths.len() - 1;
    for &w in &widths[..levels] {
        layers.extend([conv(prev, w, 3), relu]);
        skips.push((layers.len() - 1, w));
        layers.push(LayerSpec::pool(2));
        prev = w;
    }
    layers.extend([conv(prev, widths[levels], 3), relu]);
    prev = widths[levels];
    for &(skip, w) in skips.iter().rev() {
        layers.extend([LayerSpec::Upsample2d { factor: 2 }, LayerSpec::Concat { skip }, conv(prev + w, w, 3), relu]);
        prev = w;
    }
    layers.push(conv(prev, out_channels, 1));
    layers
}

pub fn segmenter_layers(preset: &str, out_channels: usize) -> Result<Vec<LayerSpec>> {
    match preset {
        "unet_small" => Ok(unet(&[8, 12, 16], out_channels)),
        "unet_large" => Ok(unet(&[8, 12, 12, 8], out_channels)),
        other => Err(CoreError::UnknownPreset { stage: "segment".into(), preset: other.into() }),
    }
}

pub fn build_segmenter(preset: &str, size: usize, seed: u64, candidate_id: &str) -> Result<Model> {
    let meta = ModelMeta { candidate_id: candidate_id.into(), stage: "segment".into(), seed, classes: vec![] };
    Ok(Model::new(&[1, size, size], segmenter_layers(preset, 2)?, seed, meta)?)
}

/// Patches with per-pixel labels; training applies the same random
/// right-angle symmetry to a patch and its labels.
pub struct PixelSet {
    inputs: Vec<Vec<f32>>,
    labels: Vec<Vec<usize>>,
    size: usize,
}

impl PixelSet {
    pub fn new(images: &[&GrayImage], labels: Vec<Vec<usize>>, size: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return invalid(format!("{} images but {} label maps", images.len(), labels.len()));
        }
        for (img, l) in images.iter().zip(&labels) {
            if img.width() as usize != size || img.height() as usize != size || l.len() != size * size {
                return Err(CoreError::Mismatch(format!(
                    "image {}x{} with {} labels vs {size}x{size}",
                    img.width(),
                    img.height(),
                    l.len()
                )));
            }
        }
        Ok(Self { inputs: images.iter().map(|i| image_to_input(i)).collect(), labels, size })
    }

    pub fn from_masks(images: &[&GrayImage], masks: &[&Mask], size: usize) -> Result<Self> {
        if masks.iter().any(|m| m.width() != size || m.height() != size) {
            return Err(CoreError::Mismatch(format!("mask shape differs from {size}x{size}")));
        }
        Self::new(images, masks.iter().map(|m| m.bits().iter().map(|&b| b as usize).collect()).collect(), size)
    }
}

impl TrainingSet for PixelSet {
    type Target = LabelMap;

    fn len(&self) -> usize {
        self.inputs.len()
    }

    fn batch(&self, indices: &[usize], mut augment: Option<&mut ChaCha8Rng>) -> darwin_nn::Result<(Tensor, LabelMap)> {
        let s = self.size;
        let mut data = Vec::with_capacity(indices.len() * s * s);
        let mut labels = Vec::with_capacity(indices.len() * s * s);
        for &i in indices {
            match augment.as_deref_mut().map_or(0, |rng| rng.random_range(0..8)) {
                0 => {
                    data.extend_from_slice(&self.inputs[i]);
                    labels.extend_from_slice(&self.labels[i]);
                }
                k => {
                    data.extend(dihedral_planes(&self.inputs[i], s, k));
                    labels.extend(dihedral_planes(&self.labels[i], s, k));
                }
            }
        }
        Ok((Tensor::new(vec![indices.len(), 1, s, s], data)?, LabelMap::new([indices.len(), s, s], labels)?))
    }

    fn loss(&self, output: &Tensor, target: &LabelMap) -> darwin_nn::Result<(f64, Tensor)> {
        loss_pixel_ce(output, target)
    }
}

pub fn train_pixels(model: &mut Model, train: &PixelSet, validation: &PixelSet, cfg: &TrainConfig) -> Result<TrainHistory> {
    if train.is_empty() {
        return invalid("segmenter training split is empty");
    }
    if model.input_shape() != [1, train.size, train.size] {
        return Err(CoreError::Mismatch(format!("model input {:?} vs patches of {}", model.input_shape(), train.size)));
    }
    Ok(fit(model, train, validation, cfg)?)
}

/// Patches with their foreground masks for one split.
pub struct MaskedPatches<'a> {
    pub patches: Vec<&'a GrayImage>,
    pub masks: Vec<&'a Mask>,
}

pub fn train_segmenter(model: &mut Model, train: &MaskedPatches, validation: &MaskedPatches, cfg: &TrainConfig) -> Result<TrainHistory> {
    let s = model.input_shape().get(1).copied().unwrap_or(0);
    let train_set = PixelSet::from_masks(&train.patches, &train.masks, s)?;
    let val_set = PixelSet::from_masks(&validation.patches, &validation.masks, s)?;
    train_pixels(model, &train_set, &val_set, cfg)
}

/// Per-pixel argmax over the output channels (ties to the lower channel).
pub fn label_map(model: &Model, images: &[&GrayImage]) -> Result<Vec<Vec<usize>>> {
    let (h, w) = match model.input_shape() {
        [1, h, w] => (*h, *w),
        s => return Err(CoreError::Mismatch(format!("segmenter input {s:?}"))),
    };
    let k = model.output_shape()[0];
    let plane = h * w;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(16) {
        let mut data = Vec::with_capacity(chunk.len() * plane);
        for img in chunk {
            if img.width() as usize != w || img.height() as usize != h {
                return Err(CoreError::Mismatch(format!("image {}x{} vs segmenter input {w}x{h}", img.width(), img.height())));
            }
            data.extend(image_to_input(img));
        }
        let logits = predict(model, &Tensor::new(vec![chunk.len(), 1, h, w], data)?)?;
        for i in 0..chunk.len() {
            let item = logits.item(i);
            out.push(
                (0..plane)
                    .map(|p| (1..k).fold(0, |best, c| if item[c * plane + p] > item[best * plane + p] { c } else { best }))
                    .collect(),
            );
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationMask {
    pub mask: Mask,
    /// Class assigned upstream by the classifier, if any.
    pub class: Option<String>,
}

pub fn segment_many(model: &Model, patches: &[&GrayImage]) -> Result<Vec<Mask>> {
    let s = model.input_shape().get(1).copied().unwrap_or(0);
    Ok(label_map(model, patches)?
        .into_iter()
        .map(|l| Mask::from_fn(s, s, |x, y| l[y * s + x] == 1))
        .collect())
}

pub fn segment(model: &Model, patch: &GrayImage) -> Result<SegmentationMask> {
    Ok(SegmentationMask { mask: segment_many(model, &[patch])?.remove(0), class: None })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapScore {
    pub jaccard: f64,
    pub global_accuracy: f64,
    /// Empty union: Jaccard is reported as 1.
    pub degenerate: bool,
}

impl OverlapScore {
    pub fn from_counts(intersection: usize, union: usize, correct: usize, total: usize) -> Self {
        let degenerate = union == 0;
        OverlapScore {
            jaccard: if degenerate { 1.0 } else { intersection as f64 / union as f64 },
            global_accuracy: if total == 0 { 1.0 } else { correct as f64 / total as f64 },
            degenerate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationEval {
    /// Pooled over every pixel of the set.
    pub jaccard: f64,
    pub global_accuracy: f64,
    pub degenerate: bool,
    pub intersection: usize,
    pub union: usize,
    pub mean_image_jaccard: f64,
    pub per_image: Vec<OverlapScore>,
}

pub fn evaluate_segmentation(predicted: &[&Mask], truth: &[&Mask]) -> Result<SegmentationEval> {
    if predicted.len() != truth.len() {
        return invalid(format!("{} predicted masks vs {} truth masks", predicted.len(), truth.len()));
    }
    let (mut inter, mut union, mut correct, mut total) = (0, 0, 0, 0);
    let mut per_image = Vec::with_capacity(truth.len());
    for (p, t) in predicted.iter().zip(truth) {
        if p.width() != t.width() || p.height() != t.height() {
            return Err(CoreError::Mismatch(format!("mask {}x{} vs {}x{}", p.width(), p.height(), t.width(), t.height())));
        }
        let (mut i, mut u, mut c) = (0, 0, 0);
        for (&a, &b) in p.bits().iter().zip(t.bits()) {
            i += (a && b) as usize;
            u += (a || b) as usize;
            c += (a == b) as usize;
        }
        per_image.push(OverlapScore::from_counts(i, u, c, t.bits().len()));
        inter += i;
        union += u;
        correct += c;
        total += t.bits().len();
    }
    let pooled = OverlapScore::from_counts(inter, union, correct, total);
    let mean_image_jaccard = if per_image.is_empty() { 1.0 } else { per_image.iter().map(|s| s.jaccard).sum::<f64>() / per_image.len() as f64 };
    Ok(SegmentationEval {
        jaccard: pooled.jaccard,
        global_accuracy: pooled.global_accuracy,
        degenerate: pooled.degenerate,
        intersection: inter,
        union,
        mean_image_jaccard,
        per_image,
    })
}
