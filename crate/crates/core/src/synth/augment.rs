//! Image-level transforms: arbitrary-angle rotation with mirrored borders and
//! histogram equalization.

use image::GrayImage;

/// Index into `0..n` after mirroring about the image edges (edge pixels repeat).
fn reflect(i: i64, n: i64) -> usize {
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Rotates about the image center by `angle_degrees` (counterclockwise on
/// screen) with bilinear sampling; samples falling outside are mirrored back
/// in, so the corners are filled with reflected content.
pub fn augment_rotate_mirror(img: &GrayImage, angle_degrees: f64) -> GrayImage {
    if angle_degrees == 0.0 {
        return img.clone();
    }
    let (w, h) = (img.width() as i64, img.height() as i64);
    let (cx, cy) = ((w - 1) as f64 / 2.0, (h - 1) as f64 / 2.0);
    let (s, c) = angle_degrees.to_radians().sin_cos();
    let src = img.as_raw();
    let at = |x: i64, y: i64| src[reflect(y, h) * w as usize + reflect(x, w)] as f64;
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            // Inverse map: a screen-counterclockwise rotation has y pointing down.
            let sx = cx + c * dx - s * dy;
            let sy = cy + s * dx + c * dy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as i64, y0 as i64);
            let v = (1.0 - fy) * ((1.0 - fx) * at(x0, y0) + fx * at(x0 + 1, y0))
                + fy * ((1.0 - fx) * at(x0, y0 + 1) + fx * at(x0 + 1, y0 + 1));
            out.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    GrayImage::from_raw(w as u32, h as u32, out).expect("same size as input")
}

/// Classic CDF remap `round(255·(cdf(v) − cdf_min)/(N − cdf_min))`. A constant
/// image is returned unchanged.
pub fn equalize_histogram(img: &GrayImage) -> GrayImage {
    let mut hist = [0usize; 256];
    for &v in img.as_raw() {
        hist[v as usize] += 1;
    }
    let n = img.as_raw().len();
    let mut cdf = [0usize; 256];
    let mut acc = 0;
    for (c, &h) in cdf.iter_mut().zip(&hist) {
        acc += h;
        *c = acc;
    }
    let cdf_min = cdf.iter().copied().find(|&c| c > 0).unwrap_or(0);
    if n == cdf_min {
        return img.clone();
    }
    let denom = (n - cdf_min) as f64;
    let lut: Vec<u8> = cdf
        .iter()
        .map(|&c| (255.0 * (c.saturating_sub(cdf_min)) as f64 / denom).round() as u8)
        .collect();
    let data = img.as_raw().iter().map(|&v| lut[v as usize]).collect();
    GrayImage::from_raw(img.width(), img.height(), data).expect("same size as input")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smooth(w: u32, h: u32) -> GrayImage {
        GrayImage::from_fn(w, h, |x, y| image::Luma([(128.0 + 60.0 * ((x as f64) * 0.15).sin() * ((y as f64) * 0.11).cos()) as u8]))
    }

    #[test]
    fn zero_angle_is_identity() {
        let img = smooth(40, 30);
        assert_eq!(augment_rotate_mirror(&img, 0.0), img);
    }

    #[test]
    fn constant_stays_constant() {
        let img = GrayImage::from_pixel(33, 21, image::Luma([77]));
        for a in [13.0, 90.0, 211.5] {
            assert!(augment_rotate_mirror(&img, a).as_raw().iter().all(|&v| v == 77));
        }
    }

    #[test]
    fn near_full_turn_round_trip() {
        let img = smooth(64, 64);
        let eps = 0.7;
        let back = augment_rotate_mirror(&augment_rotate_mirror(&img, 360.0 - eps), eps);
        let mad: f64 = img.as_raw().iter().zip(back.as_raw()).map(|(&a, &b)| (a as f64 - b as f64).abs()).sum::<f64>()
            / img.as_raw().len() as f64;
        assert!(mad < 2.0, "mean abs diff {mad}");
    }

    #[test]
    fn right_angle_rotation_is_exact_permutation() {
        let img = smooth(16, 16);
        let r = augment_rotate_mirror(&img, 90.0);
        // Screen-counterclockwise: the right column becomes the top row.
        for i in 0..16 {
            assert_eq!(r.get_pixel(i, 0), img.get_pixel(15, i));
        }
    }

    #[test]
    fn reflect_indices() {
        assert_eq!((0..12).map(|i| reflect(i - 3, 3)).collect::<Vec<_>>(), vec![2, 1, 0, 0, 1, 2, 2, 1, 0, 0, 1, 2]);
    }

    #[test]
    fn equalization_fixtures() {
        let constant = GrayImage::from_pixel(4, 4, image::Luma([9]));
        assert_eq!(equalize_histogram(&constant), constant);
        let two = GrayImage::from_fn(4, 4, |x, _| image::Luma([if x < 2 { 40 } else { 90 }]));
        let eq = equalize_histogram(&two);
        let mut levels: Vec<u8> = eq.as_raw().to_vec();
        levels.sort_unstable();
        levels.dedup();
        assert_eq!(levels, vec![0, 255]);
        let uniform = GrayImage::from_fn(256, 2, |x, _| image::Luma([x as u8]));
        let eq = equalize_histogram(&uniform);
        assert!(uniform.as_raw().iter().zip(eq.as_raw()).all(|(&a, &b)| (a as i32 - b as i32).abs() <= 1));
    }
}
