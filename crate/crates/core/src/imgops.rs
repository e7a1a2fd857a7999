//! Pixel plumbing shared by the stages: network input scaling, the eight
//! right-angle symmetries of a square, and mirror-padded resampling.

use image::GrayImage;

/// Gray level to network input.
pub fn input_value(v: u8) -> f32 {
    (v as f32 - 128.0) / 64.0
}

pub fn image_to_input(img: &GrayImage) -> Vec<f32> {
    img.as_raw().iter().map(|&v| input_value(v)).collect()
}

/// Maps a continuous point of an `s × s` square under symmetry `k` (0..8):
/// mirror `x` when `k >= 4`, then `k % 4` quarter turns.
pub fn dihedral_point(k: usize, u: f64, v: f64, s: f64) -> (f64, f64) {
    let (mut u, mut v) = if k >= 4 { (s - u, v) } else { (u, v) };
    for _ in 0..k % 4 {
        (u, v) = (v, s - u);
    }
    (u, v)
}

/// Applies symmetry `k` to each `s × s` plane of `planes`. Pixel centers map
/// onto pixel centers, so this is an exact permutation.
pub fn dihedral_planes<T: Copy + Default>(data: &[T], s: usize, k: usize) -> Vec<T> {
    let plane = s * s;
    let mut out = vec![T::default(); data.len()];
    let sf = s as f64;
    for y in 0..s {
        for x in 0..s {
            let (u, v) = dihedral_point(k, x as f64 + 0.5, y as f64 + 0.5, sf);
            let dst = (v - 0.5) as usize * s + (u - 0.5) as usize;
            for (src, out) in data.chunks(plane).zip(out.chunks_mut(plane)) {
                out[dst] = src[y * s + x];
            }
        }
    }
    out
}

/// Symmetric reflection of an index into `0..n` (`-1 -> 0`, `n -> n - 1`).
pub fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Bilinear sample at continuous position `(u, v)`, where pixel `(x, y)`
/// covers `[x, x+1) × [y, y+1)`. Out-of-range taps are mirrored.
pub fn sample_bilinear(img: &GrayImage, u: f64, v: f64) -> f64 {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (fx, fy) = (u - 0.5, v - 0.5);
    let (x0, y0) = (fx.floor(), fy.floor());
    let (tx, ty) = (fx - x0, fy - y0);
    let px = |x: i64, y: i64| img.as_raw()[reflect(y, h) * w + reflect(x, w)] as f64;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let top = px(x0, y0) * (1.0 - tx) + px(x0 + 1, y0) * tx;
    if ty == 0.0 {
        return top;
    }
    let bottom = px(x0, y0 + 1) * (1.0 - tx) + px(x0 + 1, y0 + 1) * tx;
    top * (1.0 - ty) + bottom * ty
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dihedral_group_closes() {
        let s = 5;
        let data: Vec<u32> = (0..(s * s) as u32).collect();
        for k in 0..8 {
            let once = dihedral_planes(&data, s, k);
            let mut sorted = once.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, data, "k={k} not a permutation");
        }
        // Four quarter turns and two mirrors are the identity.
        let mut d = data.clone();
        for _ in 0..4 {
            d = dihedral_planes(&d, s, 1);
        }
        assert_eq!(d, data);
        assert_eq!(dihedral_planes(&dihedral_planes(&data, s, 4), s, 4), data);
    }

    #[test]
    fn quarter_turn_moves_top_left_to_bottom_left() {
        let data = [1u8, 2, 3, 4];
        // (0,0) -> (0,1)
        assert_eq!(dihedral_planes(&data, 2, 1), vec![2, 4, 1, 3]);
    }

    #[test]
    fn reflect_is_symmetric() {
        assert_eq!(reflect(-1, 4), 0);
        assert_eq!(reflect(-2, 4), 1);
        assert_eq!(reflect(4, 4), 3);
        assert_eq!(reflect(9, 4), 1);
        assert_eq!(reflect(-100, 4), reflect(99, 4));
    }

    #[test]
    fn bilinear_hits_pixel_centers_exactly() {
        let img = GrayImage::from_fn(4, 3, |x, y| image::Luma([(x * 10 + y * 50) as u8]));
        for y in 0..3 {
            for x in 0..4 {
                let s = sample_bilinear(&img, x as f64 + 0.5, y as f64 + 0.5);
                assert_eq!(s, img.get_pixel(x, y).0[0] as f64);
            }
        }
        assert_eq!(sample_bilinear(&img, 1.0, 0.5), 5.0);
    }
}
