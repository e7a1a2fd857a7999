//! Binary masks and integer pixel boxes.

use serde::{Deserialize, Serialize};

/// Axis-aligned pixel rectangle `[x, y, w, h]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 4]", into = "[usize; 4]")]
pub struct PixelBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl From<[usize; 4]> for PixelBox {
    fn from([x, y, w, h]: [usize; 4]) -> Self {
        Self { x, y, w, h }
    }
}

impl From<PixelBox> for [usize; 4] {
    fn from(b: PixelBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl PixelBox {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && y >= self.y && x < self.x + self.w && y < self.y + self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x as f64 + self.w as f64 / 2.0, self.y as f64 + self.h as f64 / 2.0)
    }
}

/// Row-major binary image.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, bits: vec![false; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self { width, height, bits }
    }

    /// Builds a mask from `0/1` (or any nonzero) bytes.
    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Option<Self> {
        (bytes.len() == width * height)
            .then(|| Self { width, height, bits: bytes.iter().map(|&b| b != 0).collect() })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    /// Like `get`, but coordinates outside the mask read as unset.
    pub fn get_signed(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height && self.get(x as usize, y as usize)
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Set pixels in row-major order.
    pub fn iter_set(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(move |(i, _)| (i % self.width, i / self.width))
    }

    /// Tight box around the set pixels.
    pub fn bbox(&self) -> Option<PixelBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for (x, y) in self.iter_set() {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        (x0 != usize::MAX).then(|| PixelBox::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1))
    }

    /// Copies out the region `b`, which must lie inside the mask.
    pub fn crop(&self, b: PixelBox) -> Mask {
        Mask::from_fn(b.w, b.h, |x, y| self.get(b.x + x, b.y + y))
    }

    /// Writes `local` into this mask with its origin at `(ox, oy)`, clipping at the edges.
    pub fn paste_or(&mut self, local: &Mask, ox: i64, oy: i64) {
        for (x, y) in local.iter_set() {
            let (gx, gy) = (ox + x as i64, oy + y as i64);
            if gx >= 0 && gy >= 0 && (gx as usize) < self.width && (gy as usize) < self.height {
                self.set(gx as usize, gy as usize, true);
            }
        }
    }

    pub fn intersection_count(&self, other: &Mask) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(&a, &b)| a && b).count()
    }

    /// 0/255 bytes, row-major.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bbox_and_crop() {
        let m = Mask::from_fn(6, 5, |x, y| (2..4).contains(&x) && (1..4).contains(&y));
        let b = m.bbox().unwrap();
        assert_eq!(b, PixelBox::new(2, 1, 2, 3));
        assert_eq!(m.crop(b).count(), 6);
        assert!(Mask::new(3, 3).bbox().is_none());
    }

    #[test]
    fn paste_clips() {
        let mut m = Mask::new(4, 4);
        m.paste_or(&Mask::from_fn(3, 3, |_, _| true), -1, 2);
        assert_eq!(m.count(), 4);
    }

    #[test]
    fn pixel_box_serializes_as_array() {
        let s = serde_json::to_string(&PixelBox::new(1, 2, 3, 4)).unwrap();
        assert_eq!(s, "[1,2,3,4]");
    }
}
