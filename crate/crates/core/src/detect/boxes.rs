use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::mask::PixelBox;

/// Axis-aligned box in continuous pixel coordinates: it spans
/// `[x, x+w) × [y, y+h)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64, score: f64) -> Self {
        Self { x, y, w, h, score }
    }

    pub fn from_pixels(b: PixelBox, score: f64) -> Self {
        Self::new(b.x as f64, b.y as f64, b.w as f64, b.h as f64, score)
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn intersection(&self, o: &BoundingBox) -> f64 {
        let iw = (self.x + self.w).min(o.x + o.w) - self.x.max(o.x);
        let ih = (self.y + self.h).min(o.y + o.h) - self.y.max(o.y);
        iw.max(0.0) * ih.max(0.0)
    }

    /// Intersection with `[0, width) × [0, height)`, or `None` when that is empty.
    pub fn clip(&self, width: usize, height: usize) -> Option<BoundingBox> {
        let x0 = self.x.max(0.0);
        let y0 = self.y.max(0.0);
        let x1 = (self.x + self.w).min(width as f64);
        let y1 = (self.y + self.h).min(height as f64);
        (x1 > x0 && y1 > y0).then(|| BoundingBox::new(x0, y0, x1 - x0, y1 - y0, self.score))
    }
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Descending score, then ascending x, then ascending y.
pub fn score_order(a: &BoundingBox, b: &BoundingBox) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.x.total_cmp(&b.x))
        .then(a.y.total_cmp(&b.y))
}

/// Greedy suppression: walk boxes in [`score_order`] and keep each one whose IoU
/// with every kept box is at most `iou_threshold`.
pub fn nms(boxes: &[BoundingBox], iou_threshold: f64) -> Vec<BoundingBox> {
    let mut sorted = boxes.to_vec();
    sorted.sort_by(score_order);
    let mut kept: Vec<BoundingBox> = Vec::with_capacity(sorted.len());
    for b in sorted {
        if kept.iter().all(|k| iou(k, &b) <= iou_threshold) {
            kept.push(b);
        }
    }
    kept
}
