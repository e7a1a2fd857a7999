//! Continuous specimen outlines, their pixel-center rasterization, and exact
//! or high-resolution morphometrics of the continuous outline.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::mask::Mask;
use crate::morph::{shoelace, MorphometricRecord};

/// Vertices used for the polygonal description of star-shaped outlines.
pub const OUTLINE_VERTICES: usize = 4096;

/// Radial modulation of a star-shaped outline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "profile", rename_all = "snake_case")]
pub enum Profile {
    /// `1 + length·|cos(count·φ/2)|^sharpness`: `count` narrow projections.
    Spikes { count: u32, length: f64, sharpness: f64 },
    /// `1 + depth·cos(count·φ)`.
    Lobes { count: u32, depth: f64 },
}

impl Profile {
    fn factor(&self, phi: f64) -> f64 {
        match *self {
            Profile::Spikes { count, length, sharpness } => {
                1.0 + length * (count as f64 * phi / 2.0).cos().abs().powf(sharpness)
            }
            Profile::Lobes { count, depth } => 1.0 + depth * (count as f64 * phi).cos(),
        }
    }

    fn max_factor(&self) -> f64 {
        match *self {
            Profile::Spikes { length, .. } => 1.0 + length,
            Profile::Lobes { depth, .. } => 1.0 + depth,
        }
    }
}

/// A closed outline centered on the origin, in pixel units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    /// Semi-axes `a ≥ b`, major axis at angle `theta`.
    Ellipse { a: f64, b: f64, theta: f64 },
    /// `r(φ) = radius · profile(φ − theta)`.
    Star { radius: f64, theta: f64, profile: Profile },
}

impl Shape {
    pub fn ellipse(a: f64, b: f64, theta: f64) -> Result<Self> {
        if !(a.is_finite() && b.is_finite() && a > 0.0 && b > 0.0) {
            return invalid(format!("ellipse semi-axes must be positive, got a={a} b={b}"));
        }
        let (a, b) = if a >= b { (a, b) } else { (b, a) };
        Ok(Shape::Ellipse { a, b, theta })
    }

    pub fn star(radius: f64, theta: f64, profile: Profile) -> Result<Self> {
        if !(radius.is_finite() && radius > 0.0) {
            return invalid(format!("radius must be positive, got {radius}"));
        }
        match profile {
            Profile::Spikes { count, length, sharpness } => {
                if count == 0 || !(length >= 0.0) || !(sharpness >= 1.0) {
                    return invalid("spikes need count >= 1, length >= 0, sharpness >= 1");
                }
            }
            Profile::Lobes { count, depth } => {
                if count == 0 || !(0.0..1.0).contains(&depth) {
                    return invalid("lobes need count >= 1 and depth in [0, 1)");
                }
            }
        }
        Ok(Shape::Star { radius, theta, profile })
    }

    /// Rescales the outline so its area is `π·d²/4`.
    pub fn with_equivalent_diameter(self, d: f64) -> Result<Self> {
        if !(d.is_finite() && d > 0.0) {
            return invalid(format!("equivalent diameter must be positive, got {d}"));
        }
        let factor = (PI * d * d / 4.0 / self.area()).sqrt();
        Ok(match self {
            Shape::Ellipse { a, b, theta } => Shape::Ellipse { a: a * factor, b: b * factor, theta },
            Shape::Star { radius, theta, profile } => Shape::Star { radius: radius * factor, theta, profile },
        })
    }

    /// Largest distance from the center to the outline.
    pub fn extent(&self) -> f64 {
        match self {
            Shape::Ellipse { a, .. } => *a,
            Shape::Star { radius, profile, .. } => radius * profile.max_factor(),
        }
    }

    /// Whether the point `(u, v)` relative to the center is inside or on the outline.
    pub fn contains(&self, u: f64, v: f64) -> bool {
        match self {
            Shape::Ellipse { a, b, theta } => {
                let (s, c) = theta.sin_cos();
                let (p, q) = (u * c + v * s, -u * s + v * c);
                (p / a).powi(2) + (q / b).powi(2) <= 1.0
            }
            Shape::Star { radius, theta, profile } => {
                let r = u.hypot(v);
                r <= radius * profile.factor(v.atan2(u) - theta)
            }
        }
    }

    pub fn area(&self) -> f64 {
        match self {
            Shape::Ellipse { a, b, .. } => PI * a * b,
            Shape::Star { .. } => shoelace(&self.outline(OUTLINE_VERTICES)),
        }
    }

    /// Counterclockwise boundary samples (exact vertices on the outline).
    pub fn outline(&self, n: usize) -> Vec<(f64, f64)> {
        (0..n)
            .map(|i| {
                let phi = 2.0 * PI * i as f64 / n as f64;
                match self {
                    Shape::Ellipse { a, b, theta } => {
                        let (s, c) = theta.sin_cos();
                        let (p, q) = (a * phi.cos(), b * phi.sin());
                        (p * c - q * s, p * s + q * c)
                    }
                    Shape::Star { radius, theta, profile } => {
                        let r = radius * profile.factor(phi);
                        let ang = phi + theta;
                        (r * ang.cos(), r * ang.sin())
                    }
                }
            })
            .collect()
    }

    /// Morphometrics of the continuous outline: closed forms for ellipses,
    /// otherwise integrals over a dense polygon.
    pub fn analytic(&self) -> MorphometricRecord {
        let (area, eccentricity, circularity, solidity) = match *self {
            Shape::Ellipse { a, b, .. } => {
                let area = PI * a * b;
                let p = ellipse_perimeter(a, b);
                (area, (1.0 - (b / a).powi(2)).max(0.0).sqrt(), 4.0 * PI * area / (p * p), 1.0)
            }
            Shape::Star { .. } => {
                let poly = self.outline(OUTLINE_VERTICES);
                let (area, m20, m02, m11) = polygon_moments(&poly);
                let hull = hull_f64(poly);
                let hp = perimeter(&hull);
                let ecc = crate::morph::eccentricity_from_moments(m20, m02, m11);
                (area, ecc, 4.0 * PI * area / (hp * hp), area / shoelace(&hull))
            }
        };
        MorphometricRecord { instance_id: 0, class: String::new(), area, eccentricity, circularity, solidity }
    }

    /// Pixels whose centers lie inside the outline when it is centered at
    /// `(cx, cy)`. `None` if no pixel center is covered.
    pub fn rasterize(&self, cx: f64, cy: f64) -> Option<Raster> {
        let r = self.extent();
        let (x0, x1) = ((cx - r).floor() as i64 - 1, (cx + r).ceil() as i64 + 1);
        let (y0, y1) = ((cy - r).floor() as i64 - 1, (cy + r).ceil() as i64 + 1);
        let (w, h) = ((x1 - x0 + 1) as usize, (y1 - y0 + 1) as usize);
        let full = Mask::from_fn(w, h, |x, y| {
            self.contains(x0 as f64 + x as f64 + 0.5 - cx, y0 as f64 + y as f64 + 0.5 - cy)
        });
        let b = full.bbox()?;
        Some(Raster { origin: (x0 + b.x as i64, y0 + b.y as i64), mask: full.crop(b) })
    }
}

/// A rasterized shape: a tight mask whose top-left pixel sits at `origin` in
/// scene coordinates (which may be negative or beyond the scene).
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub origin: (i64, i64),
    pub mask: Mask,
}

/// Exact ellipse perimeter via the arithmetic–geometric mean.
pub fn ellipse_perimeter(a: f64, b: f64) -> f64 {
    let (a, b) = if a >= b { (a, b) } else { (b, a) };
    // P = 2π·(a² − Σ 2ⁿ⁻¹ cₙ²)/AGM(a, b) with c₀² = a² − b².
    let (mut an, mut bn) = (a, b);
    let mut sum = 0.5 * (a * a - b * b);
    let mut pow = 0.5;
    for _ in 0..64 {
        let c = 0.5 * (an - bn);
        pow *= 2.0;
        sum += pow * c * c;
        let next = (0.5 * (an + bn), (an * bn).sqrt());
        an = next.0;
        bn = next.1;
        if c.abs() < 1e-16 * a {
            break;
        }
    }
    2.0 * PI * (a * a - sum) / an
}

/// Signed area and central second moments (per unit area) of a simple polygon.
fn polygon_moments(v: &[(f64, f64)]) -> (f64, f64, f64, f64) {
    let n = v.len();
    let (mut a, mut cx, mut cy, mut ixx, mut iyy, mut ixy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        let ((x0, y0), (x1, y1)) = (v[i], v[(i + 1) % n]);
        let c = x0 * y1 - x1 * y0;
        a += c;
        cx += (x0 + x1) * c;
        cy += (y0 + y1) * c;
        ixx += (x0 * x0 + x0 * x1 + x1 * x1) * c;
        iyy += (y0 * y0 + y0 * y1 + y1 * y1) * c;
        ixy += (x0 * y1 + 2.0 * x0 * y0 + 2.0 * x1 * y1 + x1 * y0) * c;
    }
    a /= 2.0;
    let (cx, cy) = (cx / (6.0 * a), cy / (6.0 * a));
    let m20 = ixx / (12.0 * a) - cx * cx;
    let m02 = iyy / (12.0 * a) - cy * cy;
    let m11 = ixy / (24.0 * a) - cx * cy;
    (a.abs(), m20, m02, m11)
}

fn hull_f64(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.partial_cmp(b).expect("finite outline"));
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    let mut hull: Vec<(f64, f64)> = Vec::new();
    for &p in &pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

fn perimeter(v: &[(f64, f64)]) -> f64 {
    let n = v.len();
    (0..n).map(|i| (v[(i + 1) % n].0 - v[i].0).hypot(v[(i + 1) % n].1 - v[i].1)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn circle_closed_forms() {
        let rec = Shape::ellipse(20.0, 20.0, 0.3).unwrap().analytic();
        assert_eq!(rec.eccentricity, 0.0);
        assert_eq!(rec.solidity, 1.0);
        assert!((rec.circularity - 1.0).abs() < 1e-14);
    }

    #[test]
    fn two_to_one_ellipse_eccentricity() {
        let rec = Shape::ellipse(20.0, 10.0, 0.0).unwrap().analytic();
        assert!((rec.eccentricity - 3f64.sqrt() / 2.0).abs() < 1e-15);
    }

    #[test]
    fn agm_perimeter_matches_polygon_sum() {
        for (a, b) in [(3.0, 1.0), (10.0, 9.0), (50.0, 2.0)] {
            let poly = Shape::ellipse(a, b, 0.0).unwrap().outline(200_000);
            let p = perimeter(&poly);
            assert!((ellipse_perimeter(a, b) - p).abs() < 1e-6 * p, "{a} {b}");
        }
    }

    #[test]
    fn polygon_moments_of_ellipse() {
        // Central moments of a solid ellipse: a²/4 and b²/4 along its axes.
        let poly = Shape::ellipse(8.0, 2.0, 0.0).unwrap().outline(20_000);
        let (area, m20, m02, m11) = polygon_moments(&poly);
        assert!((area - PI * 16.0).abs() < 1e-3);
        assert!((m20 - 16.0).abs() < 1e-3 && (m02 - 1.0).abs() < 1e-3 && m11.abs() < 1e-9);
    }

    #[test]
    fn equivalent_diameter_scales_area() {
        let lobes = Profile::Lobes { count: 3, depth: 0.3 };
        let s = Shape::star(1.0, 0.0, lobes).unwrap().with_equivalent_diameter(30.0).unwrap();
        assert!((s.area() - PI * 225.0).abs() < 1e-6);
        // ½∫(1 + d cos 3φ)² dφ = π(1 + d²/2).
        let Shape::Star { radius, .. } = s else { panic!() };
        assert!((PI * radius * radius * (1.0 + 0.045) - s.area()).abs() < 1e-3);
    }

    #[test]
    fn degenerate_parameters_rejected() {
        assert!(Shape::ellipse(0.0, 1.0, 0.0).is_err());
        assert!(Shape::star(-1.0, 0.0, Profile::Lobes { count: 2, depth: 0.1 }).is_err());
        assert!(Shape::star(1.0, 0.0, Profile::Lobes { count: 2, depth: 1.0 }).is_err());
    }

    #[test]
    fn raster_origin_is_tight() {
        let r = Shape::ellipse(5.0, 5.0, 0.0).unwrap().rasterize(10.0, 10.0).unwrap();
        assert_eq!(r.origin, (5, 5));
        assert_eq!((r.mask.width(), r.mask.height()), (10, 10));
    }
}
