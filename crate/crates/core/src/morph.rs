//! Region properties of binary masks: connected components, corner-point
//! convex hull, corrected second moments, and the four shape descriptors
//! (area, eccentricity, circularity, solidity).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::mask::{Mask, PixelBox};

/// One 8-connected set of pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Region {
    /// `(x, y)` in row-major scan order.
    pixels: Vec<(i64, i64)>,
    bbox: PixelBox,
}

impl Region {
    /// Builds a region from arbitrary pixels; duplicates are removed. Returns
    /// `None` for an empty set. Connectivity is not checked.
    pub fn from_pixels(mut pixels: Vec<(i64, i64)>) -> Option<Self> {
        if pixels.is_empty() {
            return None;
        }
        pixels.sort_by_key(|&(x, y)| (y, x));
        pixels.dedup();
        let x0 = pixels.iter().map(|p| p.0).min()?;
        let x1 = pixels.iter().map(|p| p.0).max()?;
        let y0 = pixels[0].1;
        let y1 = pixels[pixels.len() - 1].1;
        // Negative coordinates only arise for synthetic test regions; the box is
        // reported relative to the clamped origin in that case.
        let bbox = PixelBox::new(x0.max(0) as usize, y0.max(0) as usize, (x1 - x0 + 1) as usize, (y1 - y0 + 1) as usize);
        Some(Self { pixels, bbox })
    }

    pub fn pixels(&self) -> &[(i64, i64)] {
        &self.pixels
    }

    pub fn bbox(&self) -> PixelBox {
        self.bbox
    }

    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    /// Leftmost and rightmost pixel x for every occupied row.
    fn row_extents(&self) -> Vec<(i64, i64, i64)> {
        let mut rows: Vec<(i64, i64, i64)> = Vec::new();
        for &(x, y) in &self.pixels {
            match rows.last_mut() {
                Some(r) if r.0 == y => {
                    r.1 = r.1.min(x);
                    r.2 = r.2.max(x);
                }
                _ => rows.push((y, x, x)),
            }
        }
        rows
    }
}

/// 8-connected components, largest first. Equal sizes keep scan order of their
/// first pixel.
pub fn connected_components(mask: &Mask) -> Vec<Region> {
    let (w, h) = (mask.width(), mask.height());
    let mut label = vec![usize::MAX; w * h];
    let mut regions = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !mask.bits()[start] || label[start] != usize::MAX {
            continue;
        }
        let id = regions.len();
        label[start] = id;
        stack.push(start);
        let mut pixels = Vec::new();
        while let Some(i) = stack.pop() {
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            pixels.push((x, y));
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask.bits()[j] && label[j] == usize::MAX {
                        label[j] = id;
                        stack.push(j);
                    }
                }
            }
        }
        regions.push(Region::from_pixels(pixels).expect("component has its seed pixel"));
    }
    // Stable sort keeps discovery (scan) order among equal sizes.
    regions.sort_by(|a, b| b.area().cmp(&a.area()));
    regions
}

/// Convex polygon with counterclockwise vertices (y pointing down, so
/// "counterclockwise" is with respect to the usual mathematical axes after
/// flipping y; the shoelace sum is positive).
#[derive(Clone, Debug, PartialEq)]
pub struct Polygon {
    pub vertices: Vec<(f64, f64)>,
}

impl Polygon {
    pub fn area(&self) -> f64 {
        shoelace(&self.vertices).abs()
    }

    pub fn perimeter(&self) -> f64 {
        let n = self.vertices.len();
        (0..n)
            .map(|i| {
                let (a, b) = (self.vertices[i], self.vertices[(i + 1) % n]);
                (b.0 - a.0).hypot(b.1 - a.1)
            })
            .sum()
    }
}

/// Signed shoelace area.
pub fn shoelace(v: &[(f64, f64)]) -> f64 {
    let n = v.len();
    let mut s = 0.0;
    for i in 0..n {
        let (a, b) = (v[i], v[(i + 1) % n]);
        s += a.0 * b.1 - b.0 * a.1;
    }
    s / 2.0
}

fn cross(o: (i64, i64), a: (i64, i64), b: (i64, i64)) -> i64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Andrew's monotone chain on integer points. Collinear points are dropped.
fn monotone_chain(mut pts: Vec<(i64, i64)>) -> Vec<(i64, i64)> {
    pts.sort_unstable();
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<(i64, i64)> = Vec::with_capacity(2 * pts.len());
    for &p in &pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower_len = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower_len && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

fn hull_corners(region: &Region) -> Vec<(i64, i64)> {
    // Only the outermost pixel of each row can contribute hull corners.
    let mut pts = Vec::new();
    for (y, x0, x1) in region.row_extents() {
        pts.extend([(x0, y), (x0, y + 1), (x1 + 1, y), (x1 + 1, y + 1)]);
    }
    monotone_chain(pts)
}

/// Convex hull of the four corner points of every pixel.
pub fn convex_hull(region: &Region) -> Polygon {
    Polygon { vertices: hull_corners(region).into_iter().map(|(x, y)| (x as f64, y as f64)).collect() }
}

/// Hull of the pixel coordinates themselves (pixel centers, shifted by −½).
fn center_hull(region: &Region) -> Vec<(i64, i64)> {
    let mut pts = Vec::new();
    for (y, x0, x1) in region.row_extents() {
        pts.push((x0, y));
        pts.push((x1, y));
    }
    monotone_chain(pts)
}

/// Lattice points inside or on a convex polygon with integer vertices.
fn lattice_points_in_hull(hull: &[(i64, i64)]) -> usize {
    match hull.len() {
        0 => return 0,
        1 => return 1,
        2 => {
            let (a, b) = (hull[0], hull[1]);
            return gcd((b.0 - a.0).abs(), (b.1 - a.1).abs()) as usize + 1;
        }
        _ => {}
    }
    let ymin = hull.iter().map(|p| p.1).min().expect("non-empty");
    let ymax = hull.iter().map(|p| p.1).max().expect("non-empty");
    let n = hull.len();
    let mut count = 0usize;
    for y in ymin..=ymax {
        let (mut lo, mut hi) = (i64::MAX, i64::MIN);
        for i in 0..n {
            let (a, b) = (hull[i], hull[(i + 1) % n]);
            if (a.1 <= y && y <= b.1) || (b.1 <= y && y <= a.1) {
                if a.1 == b.1 {
                    lo = lo.min(a.0.min(b.0));
                    hi = hi.max(a.0.max(b.0));
                    continue;
                }
                // x = a.x + (y − a.y)(b.x − a.x)/(b.y − a.y), kept rational.
                let (mut num, mut den) = ((y - a.1) * (b.0 - a.0), b.1 - a.1);
                if den < 0 {
                    num = -num;
                    den = -den;
                }
                lo = lo.min(a.0 + (num + den - 1).div_euclid(den));
                hi = hi.max(a.0 + num.div_euclid(den));
            }
        }
        if hi >= lo {
            count += (hi - lo + 1) as usize;
        }
    }
    count
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Centroid and central second moments with the unit-pixel `1/12` term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Moments {
    pub centroid: (f64, f64),
    pub m20: f64,
    pub m02: f64,
    pub m11: f64,
}

/// Moments scaled by `12·A²` so they are exact integers.
struct ScaledMoments {
    s20: i128,
    s02: i128,
    s11: i128,
    denom: i128,
}

fn scaled_moments(region: &Region) -> (ScaledMoments, (f64, f64)) {
    let a = region.area() as i128;
    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0i128, 0i128, 0i128, 0i128, 0i128);
    for &(x, y) in region.pixels() {
        let (x, y) = (x as i128, y as i128);
        sx += x;
        sy += y;
        sxx += x * x;
        syy += y * y;
        sxy += x * y;
    }
    let s = ScaledMoments {
        s20: 12 * (a * sxx - sx * sx) + a * a,
        s02: 12 * (a * syy - sy * sy) + a * a,
        s11: 12 * (a * sxy - sx * sy),
        denom: 12 * a * a,
    };
    // Pixel centers sit at integer + 1/2.
    let centroid = (sx as f64 / a as f64 + 0.5, sy as f64 / a as f64 + 0.5);
    (s, centroid)
}

pub fn region_moments(region: &Region) -> Moments {
    let (s, centroid) = scaled_moments(region);
    let d = s.denom as f64;
    Moments { centroid, m20: s.s20 as f64 / d, m02: s.s02 as f64 / d, m11: s.s11 as f64 / d }
}

/// `sqrt(1 - λ₋/λ₊)` of a symmetric 2×2 second-moment matrix.
pub fn eccentricity_from_moments(m20: f64, m02: f64, m11: f64) -> f64 {
    let mean = (m20 + m02) / 2.0;
    let rad = ((m20 - m02) / 2.0).hypot(m11);
    let (hi, lo) = (mean + rad, mean - rad);
    if hi <= 0.0 {
        return 0.0;
    }
    (1.0 - (lo / hi).max(0.0)).clamp(0.0, 1.0).sqrt()
}

fn eccentricity_scaled(s: &ScaledMoments) -> f64 {
    if s.s11 == 0 {
        // Diagonal matrix: the eigenvalue ratio is an exact quotient.
        let (hi, lo) = if s.s20 >= s.s02 { (s.s20, s.s02) } else { (s.s02, s.s20) };
        return (1.0 - lo as f64 / hi as f64).sqrt();
    }
    eccentricity_from_moments(s.s20 as f64, s.s02 as f64, s.s11 as f64)
}

/// Shape descriptors of one region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MorphometricRecord {
    pub instance_id: u32,
    pub class: String,
    pub area: f64,
    pub eccentricity: f64,
    pub circularity: f64,
    pub solidity: f64,
}

/// The four descriptors with an empty label.
///
/// Circularity uses the perimeter of the corner-point hull. Solidity is the
/// fraction of pixels inside the convex hull of the region's pixel centers
/// that belong to the region, so a digitally convex region scores exactly 1.
pub fn morphometrics(region: &Region) -> MorphometricRecord {
    let hull = hull_corners(region);
    let poly = Polygon { vertices: hull.iter().map(|&(x, y)| (x as f64, y as f64)).collect() };
    let area = region.area() as f64;
    let perimeter = poly.perimeter();
    let (s, _) = scaled_moments(region);
    let hull_pixels = lattice_points_in_hull(&center_hull(region)).max(region.area());
    MorphometricRecord {
        instance_id: 0,
        class: String::new(),
        area,
        eccentricity: eccentricity_scaled(&s),
        circularity: 4.0 * PI * area / (perimeter * perimeter),
        solidity: area / hull_pixels as f64,
    }
}

/// One mask to analyze, with its label.
#[derive(Clone, Debug)]
pub struct LabeledMask {
    pub instance_id: u32,
    pub class: String,
    pub mask: Mask,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MorphTable {
    pub records: Vec<MorphometricRecord>,
    /// Instances skipped because their mask was empty.
    pub empty: usize,
    /// Instances whose mask had more than one component.
    pub fragmented: usize,
}

/// Analyzes the largest component of each mask. `area_scale` multiplies the
/// pixel-count area (1.0 keeps pixels).
pub fn morphometrics_table(items: &[LabeledMask], area_scale: f64) -> MorphTable {
    let mut table = MorphTable::default();
    for item in items {
        let mut comps = connected_components(&item.mask);
        if comps.is_empty() {
            log::warn!("instance {} has an empty mask; skipped", item.instance_id);
            table.empty += 1;
            continue;
        }
        if comps.len() > 1 {
            log::warn!("instance {} has {} components; using the largest", item.instance_id, comps.len());
            table.fragmented += 1;
        }
        let mut rec = morphometrics(&comps.swap_remove(0));
        rec.instance_id = item.instance_id;
        rec.class = item.class.clone();
        rec.area *= area_scale;
        table.records.push(rec);
    }
    table
}

/// Writes the table as CSV with a header row.
pub fn write_morph_csv<W: std::io::Write>(records: &[MorphometricRecord], w: W) -> crate::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_morph_csv<R: std::io::Read>(r: R) -> crate::Result<Vec<MorphometricRecord>> {
    let mut rdr = csv::Reader::from_reader(r);
    Ok(rdr.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn region(pixels: &[(i64, i64)]) -> Region {
        Region::from_pixels(pixels.to_vec()).unwrap()
    }

    fn disk(r: f64) -> Region {
        let n = (2.0 * r).ceil() as i64 + 2;
        let c = n as f64 / 2.0;
        let mut px = Vec::new();
        for y in 0..n {
            for x in 0..n {
                if (x as f64 + 0.5 - c).hypot(y as f64 + 0.5 - c) <= r {
                    px.push((x, y));
                }
            }
        }
        region(&px)
    }

    #[test]
    fn single_pixel_fixture() {
        let r = region(&[(5, 7)]);
        let hull = convex_hull(&r);
        assert_eq!(hull.area(), 1.0);
        assert_eq!(hull.perimeter(), 4.0);
        let m = region_moments(&r);
        assert_eq!((m.m20, m.m02, m.m11), (1.0 / 12.0, 1.0 / 12.0, 0.0));
        let rec = morphometrics(&r);
        assert_eq!(rec.eccentricity, 0.0);
        assert_eq!(rec.solidity, 1.0);
        assert_eq!(rec.circularity, PI / 4.0);
    }

    #[test]
    fn row_fixtures() {
        let row3 = region(&[(0, 0), (1, 0), (2, 0)]);
        let hull = convex_hull(&row3);
        assert_eq!(hull.area(), 3.0);
        assert_eq!(hull.perimeter(), 8.0);
        // (N² − 1)/12 + 1/12 = N²/12.
        for n in 1..30i64 {
            let r = region(&(0..n).map(|x| (x, 4)).collect::<Vec<_>>());
            let m = region_moments(&r);
            assert!((m.m20 - (n * n) as f64 / 12.0).abs() < 1e-12 * (n * n) as f64);
            assert_eq!(m.m02, 1.0 / 12.0);
        }
        let e = morphometrics(&region(&[(0, 0), (1, 0)])).eccentricity;
        assert_eq!(e, 3f64.sqrt() / 2.0);
    }

    #[test]
    fn diagonal_pair_is_one_component_under_8_connectivity() {
        let m = Mask::from_fn(2, 2, |x, y| x == y);
        assert_eq!(connected_components(&m).len(), 1);
        // 4-connectivity oracle: neither pixel has an edge neighbour.
        let four: usize = m
            .iter_set()
            .filter(|&(x, y)| {
                let (x, y) = (x as i64, y as i64);
                ![(1, 0), (-1, 0), (0, 1), (0, -1)].iter().any(|(dx, dy)| m.get_signed(x + dx, y + dy))
            })
            .count();
        assert_eq!(four, 2);
    }

    #[test]
    fn components_sorted_by_size() {
        let m = Mask::from_fn(10, 3, |x, y| (x < 2 && y == 0) || (x >= 5 && y >= 1));
        let comps = connected_components(&m);
        assert_eq!(comps.iter().map(Region::area).collect::<Vec<_>>(), vec![10, 2]);
        assert!(connected_components(&Mask::new(4, 4)).is_empty());
    }

    #[test]
    fn disk_r32_descriptors() {
        let rec = morphometrics(&disk(32.0));
        assert!(rec.eccentricity <= 0.1, "{rec:?}");
        assert!((0.95..=1.05).contains(&rec.circularity), "{rec:?}");
        assert!(rec.solidity >= 0.98, "{rec:?}");
    }

    #[test]
    fn disk_hull_perimeter_close_to_circle() {
        // The corner-point hull encloses every pixel square, so it runs about
        // half a pixel outside the circle: perimeter ≈ 2π(r + ~0.5).
        let p = convex_hull(&disk(32.0)).perimeter();
        let rel = p / (2.0 * PI * 32.0) - 1.0;
        assert!(rel > 0.0 && rel < 0.025, "relative excess {rel}");
    }

    #[test]
    fn hull_lattice_count_matches_brute_force() {
        let r = region(&[(0, 0), (4, 1), (2, 5), (1, 3), (3, 3)]);
        let hull = center_hull(&r);
        let poly: Vec<(f64, f64)> = hull.iter().map(|&(x, y)| (x as f64, y as f64)).collect();
        let mut brute = 0;
        for y in -1..8 {
            for x in -1..8 {
                let c = (x as f64, y as f64);
                let n = poly.len();
                let inside = (0..n).all(|i| {
                    let (a, b) = (poly[i], poly[(i + 1) % n]);
                    (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0) >= -1e-12
                });
                brute += inside as usize;
            }
        }
        assert_eq!(lattice_points_in_hull(&hull), brute);
        assert_eq!(lattice_points_in_hull(&[(0, 0), (4, 2)]), 3);
        assert_eq!(lattice_points_in_hull(&[(3, 3)]), 1);
    }

    #[test]
    fn disk_scale_trend() {
        let recs: Vec<_> = [8.0, 16.0, 32.0, 64.0].iter().map(|&r| morphometrics(&disk(r))).collect();
        for w in recs.windows(2) {
            assert!((1.0 - w[1].circularity).abs() <= (1.0 - w[0].circularity).abs() + 1e-12);
            assert!(w[1].eccentricity <= w[0].eccentricity + 1e-12);
        }
    }

    #[test]
    fn table_skips_empty_and_picks_largest() {
        let frag = Mask::from_fn(8, 8, |x, y| (x < 3 && y < 3) || (x == 7 && y == 7));
        let items = vec![
            LabeledMask { instance_id: 1, class: "a".into(), mask: frag.clone() },
            LabeledMask { instance_id: 2, class: "a".into(), mask: Mask::new(8, 8) },
            LabeledMask { instance_id: 3, class: "b".into(), mask: frag },
        ];
        let t = morphometrics_table(&items, 1.0);
        assert_eq!(t.records.len(), 2);
        assert_eq!((t.empty, t.fragmented), (1, 2));
        assert_eq!(t.records[0].area, 9.0);
        assert_eq!(t.records[0].eccentricity, t.records[1].eccentricity);
    }

    #[test]
    fn csv_round_trip() {
        let recs = vec![MorphometricRecord {
            instance_id: 4,
            class: "x".into(),
            area: 12.0,
            eccentricity: 0.25,
            circularity: 0.5,
            solidity: 1.0,
        }];
        let mut buf = Vec::new();
        write_morph_csv(&recs, &mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("instance_id,class,area,eccentricity,circularity,solidity"));
        assert_eq!(read_morph_csv(&buf[..]).unwrap(), recs);
    }
}
