use image::GrayImage;
use serde::{Deserialize, Serialize};

use super::boxes::BoundingBox;
use crate::error::{invalid, Result};
use crate::imgops::sample_bilinear;
use crate::mask::Mask;
use crate::synth::equalize_histogram;

/// Side of the square patches fed to the classifier and segmenter.
pub const PATCH_SIZE: usize = 48;

/// Geometry of one crop: patch pixel `(i, j)` covers the scene rectangle
/// starting at `offset + (i, j) * scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropGeometry {
    pub offset: (f64, f64),
    pub scale: (f64, f64),
    pub size: usize,
}

impl CropGeometry {
    pub fn to_scene(&self, px: f64, py: f64) -> (f64, f64) {
        (self.offset.0 + px * self.scale.0, self.offset.1 + py * self.scale.1)
    }

    pub fn to_patch(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.offset.0) / self.scale.0, (y - self.offset.1) / self.scale.1)
    }

    /// The padded scene box the patch was resampled from.
    pub fn padded_box(&self) -> BoundingBox {
        let s = self.size as f64;
        BoundingBox::new(self.offset.0, self.offset.1, s * self.scale.0, s * self.scale.1, 1.0)
    }

    /// Nearest-neighbour resampling of a scene-space predicate onto the patch grid.
    pub fn sample_mask(&self, inside: impl Fn(i64, i64) -> bool) -> Mask {
        Mask::from_fn(self.size, self.size, |i, j| {
            let (x, y) = self.to_scene(i as f64 + 0.5, j as f64 + 0.5);
            inside(x.floor() as i64, y.floor() as i64)
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CropRecord {
    /// Equalized patch, `size × size`.
    pub patch: GrayImage,
    pub source: BoundingBox,
    pub geometry: CropGeometry,
}

/// Square window around a box: the longer side grows by `margin` on each
/// side and the window keeps the box center.
pub fn crop_geometry(b: &BoundingBox, margin: f64, size: usize) -> CropGeometry {
    let side = b.w.max(b.h) * (1.0 + 2.0 * margin);
    let (cx, cy) = b.center();
    let scale = side / size as f64;
    CropGeometry { offset: (cx - side / 2.0, cy - side / 2.0), scale: (scale, scale), size }
}

/// Resamples the patch for one window (bilinear, mirrored past the border)
/// and equalizes its histogram.
pub fn extract_patch(image: &GrayImage, g: &CropGeometry) -> GrayImage {
    let n = g.size as u32;
    let raw = GrayImage::from_fn(n, n, |i, j| {
        let (u, v) = g.to_scene(i as f64 + 0.5, j as f64 + 0.5);
        image::Luma([sample_bilinear(image, u, v).round().clamp(0.0, 255.0) as u8])
    });
    equalize_histogram(&raw)
}

/// One crop per box. Boxes that miss the image entirely, or have no area, are
/// skipped with a warning.
pub fn crop_instances(image: &GrayImage, boxes: &[BoundingBox], margin: f64, size: usize) -> Result<Vec<CropRecord>> {
    if !(margin >= 0.0) || size == 0 {
        return invalid(format!("crop margin {margin} must be >= 0 and size {size} >= 1"));
    }
    let (w, h) = (image.width() as usize, image.height() as usize);
    let mut out = Vec::with_capacity(boxes.len());
    for b in boxes {
        if !(b.w > 0.0 && b.h > 0.0) || b.clip(w, h).is_none() {
            log::warn!("skipping box {b:?}: empty after clipping to {w}x{h}");
            continue;
        }
        let geometry = crop_geometry(b, margin, size);
        out.push(CropRecord { patch: extract_patch(image, &geometry), source: *b, geometry });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: u32, h: u32) -> GrayImage {
        GrayImage::from_fn(w, h, |x, y| image::Luma([((x * 7 + y * 13) % 256) as u8]))
    }

    #[test]
    fn unit_scale_crop_is_the_equalized_source() {
        let img = ramp(100, 80);
        let b = BoundingBox::new(10.0, 20.0, 48.0, 48.0, 1.0);
        let c = &crop_instances(&img, &[b], 0.0, 48).unwrap()[0];
        let direct = image::imageops::crop_imm(&img, 10, 20, 48, 48).to_image();
        assert_eq!(c.patch, equalize_histogram(&direct));
    }

    #[test]
    fn corner_box_is_mirror_padded() {
        let img = ramp(64, 64);
        let b = BoundingBox::new(-4.0, -4.0, 12.0, 12.0, 1.0);
        let c = crop_instances(&img, &[b], 0.5, 48).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].patch.dimensions(), (48, 48));
    }

    #[test]
    fn outside_or_empty_boxes_are_skipped() {
        let img = ramp(32, 32);
        let boxes = [BoundingBox::new(40.0, 0.0, 5.0, 5.0, 1.0), BoundingBox::new(3.0, 3.0, 0.0, 5.0, 1.0)];
        assert!(crop_instances(&img, &boxes, 0.1, 48).unwrap().is_empty());
        assert!(crop_instances(&img, &[], -0.1, 48).is_err());
    }

    #[test]
    fn corners_round_trip_to_the_padded_box() {
        let b = BoundingBox::new(13.25, 40.5, 21.0, 9.0, 0.7);
        let g = crop_geometry(&b, 0.1, 48);
        let side = 21.0 * 1.2;
        let (x0, y0) = g.to_scene(0.0, 0.0);
        let (x1, y1) = g.to_scene(48.0, 48.0);
        assert!((x0 - (23.75 - side / 2.0)).abs() < 1e-12 && (y0 - (45.0 - side / 2.0)).abs() < 1e-12);
        assert!((x1 - x0 - side).abs() < 1e-12 && (y1 - y0 - side).abs() < 1e-12);
        let (px, py) = g.to_patch(x1, y1);
        assert!((px - 48.0).abs() < 1e-9 && (py - 48.0).abs() < 1e-9);
    }
}
