//! Labeled patches for training and evaluating the classifier and segmenter.

use serde::{Deserialize, Serialize};

use crate::detect::{crop_geometry, detect_many, extract_patch, iou, truth_boxes, BoundingBox, CropRecord, DetectParams};
use crate::error::Result;
use crate::mask::Mask;
use crate::synth::{Instance, Scene};
use darwin_nn::Model;

/// Where training crops come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropSource {
    /// Boxes of the complete ground-truth instances.
    #[default]
    GroundTruth,
    /// Detector output matched to ground truth at IoU >= 0.5; unmatched detections are dropped.
    Detector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceCrop {
    pub scene: usize,
    pub instance_id: u32,
    pub class_index: usize,
    pub crop: CropRecord,
    /// The instance's own mask on the patch grid.
    pub mask: Mask,
}

fn instance_crop(scene_index: usize, scene: &Scene, inst: &Instance, b: &BoundingBox, margin: f64, size: usize) -> InstanceCrop {
    let geometry = crop_geometry(b, margin, size);
    let (bx, by) = (inst.bbox.x as i64, inst.bbox.y as i64);
    InstanceCrop {
        scene: scene_index,
        instance_id: inst.id,
        class_index: inst.class_index,
        crop: CropRecord { patch: extract_patch(&scene.image, &geometry), source: *b, geometry },
        mask: geometry.sample_mask(|x, y| inst.mask.get_signed(x - bx, y - by)),
    }
}

/// One crop per complete instance of the listed scenes.
pub fn ground_truth_crops(scenes: &[Scene], indices: &[usize], margin: f64, size: usize) -> Vec<InstanceCrop> {
    let mut out = Vec::new();
    for &si in indices {
        let scene = &scenes[si];
        for inst in scene.complete() {
            out.push(instance_crop(si, scene, inst, &BoundingBox::from_pixels(inst.bbox, 1.0), margin, size));
        }
    }
    out
}

/// Crops around detector boxes, each labeled by the complete instance it
/// overlaps best (greedy by descending IoU, at least 0.5).
pub fn detector_crops(
    detector: &Model,
    scenes: &[Scene],
    indices: &[usize],
    params: &DetectParams,
    margin: f64,
    size: usize,
) -> Result<Vec<InstanceCrop>> {
    let images: Vec<_> = indices.iter().map(|&i| &scenes[i].image).collect();
    let detections = detect_many(detector, &images, params)?;
    let mut out = Vec::new();
    for (&si, boxes) in indices.iter().zip(&detections) {
        let scene = &scenes[si];
        let complete: Vec<&Instance> = scene.complete().collect();
        let truths = truth_boxes(scene);
        for (p, t) in associate(boxes, &truths, 0.5) {
            out.push(instance_crop(si, scene, complete[t], &boxes[p], margin, size));
        }
    }
    Ok(out)
}

/// Greedy one-to-one pairing by descending IoU (ties by lower indices), keeping
/// pairs with IoU at least `min_iou`. Returns `(a index, b index)` pairs.
pub fn associate(a: &[BoundingBox], b: &[BoundingBox], min_iou: f64) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            let v = iou(x, y);
            if v >= min_iou {
                pairs.push((v, i, j));
            }
        }
    }
    pairs.sort_by(|p, q| q.0.total_cmp(&p.0).then(p.1.cmp(&q.1)).then(p.2.cmp(&q.2)));
    let (mut used_a, mut used_b) = (vec![false; a.len()], vec![false; b.len()]);
    let mut out = Vec::new();
    for (_, i, j) in pairs {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            out.push((i, j));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scene, virus_classes, SceneConfig};

    #[test]
    fn crop_masks_cover_the_instance() {
        let cfg = SceneConfig { width: 128, height: 128, count_target: 5, ..Default::default() };
        let scene = generate_scene(&virus_classes(), &cfg, 3).unwrap();
        let crops = ground_truth_crops(std::slice::from_ref(&scene), &[0], 0.1, 48);
        assert_eq!(crops.len(), scene.complete().count());
        for c in &crops {
            let fg = c.mask.count() as f64 / (48.0 * 48.0);
            // A box-filling shape covers at most π/4 of the box, which spans 1/1.2² of the patch.
            assert!(fg > 0.2 && fg < 0.6, "foreground fraction {fg}");
        }
    }

    #[test]
    fn association_is_one_to_one_by_best_overlap() {
        let a = [BoundingBox::new(0.0, 0.0, 10.0, 10.0, 1.0), BoundingBox::new(1.0, 0.0, 10.0, 10.0, 1.0)];
        let b = [BoundingBox::new(1.0, 0.0, 10.0, 10.0, 1.0)];
        assert_eq!(associate(&a, &b, 0.5), vec![(1, 0)]);
        assert!(associate(&a, &[], 0.5).is_empty());
    }
}
