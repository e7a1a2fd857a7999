//! Procedural specimen scenes with per-instance ground truth.

pub mod augment;
pub mod io;
pub mod shape;
pub mod split;

use std::f64::consts::PI;

use image::GrayImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::mask::{Mask, PixelBox};
use crate::morph::MorphometricRecord;
pub use augment::{augment_rotate_mirror, equalize_histogram};
pub use shape::{Profile, Raster, Shape};
pub use split::{split_dataset, DatasetSplit, SplitRatios};

/// Outline family with its morphology parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShapeFamily {
    /// Aspect ratio (major/minor) drawn uniformly from `[aspect_min, aspect_max]`.
    SmoothEllipse { aspect_min: f64, aspect_max: f64 },
    SpikyDisk { spikes: u32, spike_length: f64, sharpness: f64 },
    LobedBlob { lobes: u32, depth: f64 },
}

/// Gray levels of an instance: its mean is drawn from `N(mean, std)` and every
/// pixel adds `N(0, texture)` noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intensity {
    pub mean: f64,
    pub std: f64,
    pub texture: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecimenClass {
    pub name: String,
    pub shape: ShapeFamily,
    /// Equivalent diameter in pixels.
    pub diameter_mean: f64,
    pub diameter_std: f64,
    pub intensity: Intensity,
}

/// Smallest equivalent diameter a class may produce; its disk covers well over
/// eight pixel centers.
pub const MIN_DIAMETER: f64 = 4.0;

impl SpecimenClass {
    pub fn validate(&self) -> Result<()> {
        if !(self.diameter_mean > 0.0) || !(self.diameter_std >= 0.0) {
            return invalid(format!("class `{}`: diameter mean must be > 0 and std >= 0", self.name));
        }
        if self.diameter_range().0 < MIN_DIAMETER {
            return invalid(format!(
                "class `{}`: diameters down to {:.1} px are too small (minimum {MIN_DIAMETER})",
                self.name,
                self.diameter_range().0
            ));
        }
        if !(self.intensity.std >= 0.0 && self.intensity.texture >= 0.0) {
            return invalid(format!("class `{}`: intensity spreads must be >= 0", self.name));
        }
        self.draw_shape(&mut ChaCha8Rng::seed_from_u64(0)).map(|_| ())
    }

    /// Diameters are drawn from a normal truncated at ±2.5 SD.
    pub fn diameter_range(&self) -> (f64, f64) {
        (self.diameter_mean - 2.5 * self.diameter_std, self.diameter_mean + 2.5 * self.diameter_std)
    }

    pub fn draw_shape(&self, rng: &mut ChaCha8Rng) -> Result<Shape> {
        let (lo, hi) = self.diameter_range();
        let d = if self.diameter_std > 0.0 {
            let n = Normal::new(self.diameter_mean, self.diameter_std).expect("std > 0");
            n.sample(rng).clamp(lo, hi)
        } else {
            self.diameter_mean
        };
        let theta = rng.random_range(0.0..2.0 * PI);
        let unit = match self.shape {
            ShapeFamily::SmoothEllipse { aspect_min, aspect_max } => {
                if !(aspect_min >= 1.0 && aspect_max >= aspect_min) {
                    return invalid(format!("class `{}`: need 1 <= aspect_min <= aspect_max", self.name));
                }
                let aspect = if aspect_max > aspect_min { rng.random_range(aspect_min..=aspect_max) } else { aspect_min };
                Shape::ellipse(aspect, 1.0, theta)?
            }
            ShapeFamily::SpikyDisk { spikes, spike_length, sharpness } => {
                Shape::star(1.0, theta, Profile::Spikes { count: spikes, length: spike_length, sharpness })?
            }
            ShapeFamily::LobedBlob { lobes, depth } => Shape::star(1.0, theta, Profile::Lobes { count: lobes, depth })?,
        };
        unit.with_equivalent_diameter(d)
    }

    /// Same class with every length multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self { diameter_mean: self.diameter_mean * factor, diameter_std: self.diameter_std * factor, ..self.clone() }
    }
}

fn class(name: &str, shape: ShapeFamily, d: (f64, f64), mean: f64, texture: f64) -> SpecimenClass {
    SpecimenClass {
        name: name.into(),
        shape,
        diameter_mean: d.0,
        diameter_std: d.1,
        intensity: Intensity { mean, std: 8.0, texture },
    }
}

/// Two spiky virus analogues. Sizes are separated by well over two pooled
/// standard deviations of area.
pub fn virus_classes() -> Vec<SpecimenClass> {
    vec![
        class("covid_like", ShapeFamily::SpikyDisk { spikes: 16, spike_length: 0.18, sharpness: 6.0 }, (36.0, 2.5), 175.0, 5.0),
        class("mers_like", ShapeFamily::SpikyDisk { spikes: 7, spike_length: 0.35, sharpness: 10.0 }, (24.0, 2.0), 175.0, 5.0),
    ]
}

/// Five cell analogues distinguished by outline and texture.
pub fn cell_classes() -> Vec<SpecimenClass> {
    vec![
        class("raw_m1", ShapeFamily::SmoothEllipse { aspect_min: 1.0, aspect_max: 1.15 }, (30.0, 3.0), 170.0, 4.0),
        class("raw_m2", ShapeFamily::SmoothEllipse { aspect_min: 2.2, aspect_max: 2.8 }, (32.0, 3.0), 170.0, 4.0),
        class("thp1_m1", ShapeFamily::LobedBlob { lobes: 3, depth: 0.3 }, (34.0, 3.0), 170.0, 4.0),
        class("thp1_m2", ShapeFamily::LobedBlob { lobes: 6, depth: 0.22 }, (34.0, 3.0), 170.0, 4.0),
        class("bmdm", ShapeFamily::SmoothEllipse { aspect_min: 1.0, aspect_max: 1.15 }, (36.0, 3.0), 170.0, 28.0),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub count_target: usize,
    /// Target fraction of instances that overlap another instance.
    pub overlap_fraction: f64,
    /// Probability that a placement deliberately crosses the image border.
    pub border_fraction: f64,
    pub background_mean: f64,
    pub background_noise: f64,
    /// Minimum free gap between non-overlapping placements, in pixels.
    pub gap: f64,
    pub max_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 256,
            height: 256,
            count_target: 20,
            overlap_fraction: 0.25,
            border_fraction: 0.05,
            background_mean: 70.0,
            background_noise: 6.0,
            gap: 2.0,
            max_attempts: 200,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 64 || self.height < 64 {
            return invalid(format!("scene size {}x{} is below 64x64", self.width, self.height));
        }
        if self.count_target == 0 {
            return invalid("count_target must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.overlap_fraction) || !(0.0..=1.0).contains(&self.border_fraction) {
            return invalid("overlap_fraction and border_fraction must be in [0, 1]");
        }
        if self.max_attempts == 0 || !(self.gap >= 0.0) {
            return invalid("max_attempts must be >= 1 and gap >= 0");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub id: u32,
    pub class: String,
    pub class_index: usize,
    /// Box of the mask, clipped to the image.
    pub bbox: PixelBox,
    /// No overlap with another instance and no contact with the image border.
    pub complete: bool,
    /// Bbox-local mask.
    pub mask: Mask,
    /// Morphometrics of the continuous outline.
    pub analytic: MorphometricRecord,
    pub shape: Shape,
    pub center: (f64, f64),
}

impl Instance {
    /// The mask expanded to scene size.
    pub fn scene_mask(&self, width: usize, height: usize) -> Mask {
        let mut m = Mask::new(width, height);
        m.paste_or(&self.mask, self.bbox.x as i64, self.bbox.y as i64);
        m
    }

    pub fn area(&self) -> usize {
        self.mask.count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: String,
    pub image: GrayImage,
    pub instances: Vec<Instance>,
    /// Placements abandoned after `max_attempts`.
    pub placement_failures: usize,
}

impl Scene {
    pub fn width(&self) -> usize {
        self.image.width() as usize
    }

    pub fn height(&self) -> usize {
        self.image.height() as usize
    }

    pub fn complete(&self) -> impl Iterator<Item = &Instance> {
        self.instances.iter().filter(|i| i.complete)
    }

    /// Fraction of instances flagged incomplete.
    pub fn overlap_fraction(&self) -> f64 {
        if self.instances.is_empty() {
            return 0.0;
        }
        self.instances.iter().filter(|i| !i.complete).count() as f64 / self.instances.len() as f64
    }

    /// Per-pixel label (0 background, class index + 1) of complete instances,
    /// and a mask of pixels covered by incomplete instances.
    pub fn truth_labels(&self) -> (Vec<u16>, Mask) {
        let (w, h) = (self.width(), self.height());
        let mut labels = vec![0u16; w * h];
        let mut ignore = Mask::new(w, h);
        for inst in &self.instances {
            for (x, y) in inst.mask.iter_set() {
                let (gx, gy) = (inst.bbox.x + x, inst.bbox.y + y);
                if inst.complete {
                    labels[gy * w + gx] = inst.class_index as u16 + 1;
                } else {
                    ignore.set(gx, gy, true);
                }
            }
        }
        (labels, ignore)
    }
}

/// Recomputes completeness from masks alone: an instance is complete iff its
/// mask shares no pixel with another instance and touches no image edge.
pub fn completeness_flags(instances: &[Instance], width: usize, height: usize) -> Vec<bool> {
    let touches_border = |i: &Instance| {
        i.mask.iter_set().any(|(x, y)| {
            let (gx, gy) = (i.bbox.x + x, i.bbox.y + y);
            gx == 0 || gy == 0 || gx + 1 == width || gy + 1 == height
        })
    };
    let overlaps = |a: &Instance, b: &Instance| {
        let (ax1, ay1) = (a.bbox.x + a.bbox.w, a.bbox.y + a.bbox.h);
        let (bx1, by1) = (b.bbox.x + b.bbox.w, b.bbox.y + b.bbox.h);
        if a.bbox.x >= bx1 || b.bbox.x >= ax1 || a.bbox.y >= by1 || b.bbox.y >= ay1 {
            return false;
        }
        a.mask.iter_set().any(|(x, y)| {
            let (gx, gy) = (a.bbox.x + x, a.bbox.y + y);
            b.bbox.contains(gx, gy) && b.mask.get(gx - b.bbox.x, gy - b.bbox.y)
        })
    };
    instances
        .iter()
        .enumerate()
        .map(|(i, a)| !touches_border(a) && !instances.iter().enumerate().any(|(j, b)| i != j && overlaps(a, b)))
        .collect()
}

fn equivalent_radius(s: &Shape) -> f64 {
    (s.area() / PI).sqrt()
}

struct Placed {
    class_index: usize,
    shape: Shape,
    center: (f64, f64),
    overlapped: bool,
}

/// Generates one scene. Fewer than `count_target` instances are placed when the
/// rejection sampler runs out of attempts; the shortfall is recorded.
pub fn generate_scene(classes: &[SpecimenClass], cfg: &SceneConfig, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    if classes.is_empty() {
        return invalid("at least one specimen class is required");
    }
    for c in classes {
        c.validate()?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let mut placed: Vec<Placed> = Vec::new();
    let mut failures = 0;
    // Each overlap event usually flags two instances.
    let p_overlap = cfg.overlap_fraction / 2.0;

    for _ in 0..cfg.count_target {
        let ci = rng.random_range(0..classes.len());
        let shape = classes[ci].draw_shape(&mut rng)?;
        let r = shape.extent();
        let mode: f64 = rng.random();
        let mut found = None;
        for _ in 0..cfg.max_attempts {
            let inside = |c: (f64, f64)| c.0 - r >= 1.0 && c.1 - r >= 1.0 && c.0 + r <= w - 1.0 && c.1 + r <= h - 1.0;
            let clear_of = |c: (f64, f64), skip: Option<usize>| {
                placed.iter().enumerate().all(|(j, p)| {
                    Some(j) == skip || (p.center.0 - c.0).hypot(p.center.1 - c.1) >= r + p.shape.extent() + cfg.gap
                })
            };
            if !placed.is_empty() && mode < p_overlap {
                // Pick a partner, preferring instances not yet overlapped.
                let fresh: Vec<usize> = (0..placed.len()).filter(|&j| !placed[j].overlapped).collect();
                let j = if fresh.is_empty() { rng.random_range(0..placed.len()) } else { fresh[rng.random_range(0..fresh.len())] };
                let partner = &placed[j];
                let d = rng.random_range(0.5..0.9) * (equivalent_radius(&shape) + equivalent_radius(&partner.shape));
                let ang = rng.random_range(0.0..2.0 * PI);
                let c = (partner.center.0 + d * ang.cos(), partner.center.1 + d * ang.sin());
                if inside(c) && clear_of(c, Some(j)) {
                    found = Some((c, Some(j)));
                    break;
                }
            } else if mode < p_overlap + cfg.border_fraction * (1.0 - p_overlap) {
                // Straddle a random edge.
                let along = rng.random_range(0.0..1.0);
                let off = rng.random_range(-0.6..0.6) * r;
                let c = match rng.random_range(0..4) {
                    0 => (off, along * h),
                    1 => (w - off, along * h),
                    2 => (along * w, off),
                    _ => (along * w, h - off),
                };
                if clear_of(c, None) {
                    found = Some((c, None));
                    break;
                }
            } else {
                let c = (rng.random_range(r + 1.0..=(w - r - 1.0).max(r + 1.0)), rng.random_range(r + 1.0..=(h - r - 1.0).max(r + 1.0)));
                if inside(c) && clear_of(c, None) {
                    found = Some((c, None));
                    break;
                }
            }
        }
        match found {
            Some((center, partner)) => {
                if let Some(j) = partner {
                    placed[j].overlapped = true;
                }
                placed.push(Placed { class_index: ci, shape, center, overlapped: partner.is_some() });
            }
            None => failures += 1,
        }
    }
    if failures > 0 {
        log::warn!("scene seed {seed}: {failures} placement(s) failed after {} attempts", cfg.max_attempts);
    }
    render(classes, cfg, placed, failures, &mut rng, seed)
}

fn render(classes: &[SpecimenClass], cfg: &SceneConfig, placed: Vec<Placed>, failures: usize, rng: &mut ChaCha8Rng, seed: u64) -> Result<Scene> {
    let (w, h) = (cfg.width, cfg.height);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut canvas: Vec<f64> = (0..w * h).map(|_| cfg.background_mean + cfg.background_noise * noise.sample(rng)).collect();
    let mut instances = Vec::new();
    for (k, p) in placed.into_iter().enumerate() {
        let class = &classes[p.class_index];
        let Some(raster) = p.shape.rasterize(p.center.0, p.center.1) else { continue };
        let level = class.intensity.mean + class.intensity.std * noise.sample(rng);
        // Clip the raster to the scene.
        let (ox, oy) = raster.origin;
        let x0 = ox.max(0);
        let y0 = oy.max(0);
        let x1 = (ox + raster.mask.width() as i64).min(w as i64);
        let y1 = (oy + raster.mask.height() as i64).min(h as i64);
        if x1 <= x0 || y1 <= y0 {
            continue;
        }
        let clipped = Mask::from_fn((x1 - x0) as usize, (y1 - y0) as usize, |x, y| {
            raster.mask.get((x0 - ox) as usize + x, (y0 - oy) as usize + y)
        });
        let Some(b) = clipped.bbox() else { continue };
        let mask = clipped.crop(b);
        let bbox = PixelBox::new(x0 as usize + b.x, y0 as usize + b.y, b.w, b.h);
        for (x, y) in mask.iter_set() {
            canvas[(bbox.y + y) * w + bbox.x + x] = level + class.intensity.texture * noise.sample(rng);
        }
        let id = k as u32 + 1;
        let mut analytic = p.shape.analytic();
        analytic.instance_id = id;
        analytic.class = class.name.clone();
        instances.push(Instance {
            id,
            class: class.name.clone(),
            class_index: p.class_index,
            bbox,
            complete: true,
            mask,
            analytic,
            shape: p.shape,
            center: p.center,
        });
    }
    let flags = completeness_flags(&instances, w, h);
    for (inst, f) in instances.iter_mut().zip(flags) {
        inst.complete = f;
    }
    let pixels: Vec<u8> = canvas.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    let image = GrayImage::from_raw(w as u32, h as u32, pixels).expect("buffer sized to the scene");
    Ok(Scene { id: format!("scene_{seed:08x}"), image, instances, placement_failures: failures })
}

/// Scene whose instances are given explicitly: `(class index, shape, center)`.
/// Completeness is computed from the rasterized masks.
pub fn compose_scene(classes: &[SpecimenClass], cfg: &SceneConfig, items: Vec<(usize, Shape, (f64, f64))>, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    if let Some((ci, ..)) = items.iter().find(|(ci, ..)| *ci >= classes.len()) {
        return invalid(format!("class index {ci} out of range"));
    }
    let placed = items.into_iter().map(|(class_index, shape, center)| Placed { class_index, shape, center, overlapped: false }).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    render(classes, cfg, placed, 0, &mut rng, seed)
}

/// `count` scenes with seeds derived from `base_seed`, numbered in order.
pub fn generate_scenes(classes: &[SpecimenClass], cfg: &SceneConfig, count: usize, base_seed: u64) -> Result<Vec<Scene>> {
    (0..count)
        .map(|i| {
            let mut s = generate_scene(classes, cfg, scene_seed(base_seed, i))?;
            s.id = format!("scene_{i:04}");
            Ok(s)
        })
        .collect()
}

/// Per-scene seed: the base seed mixed with the scene index (SplitMix64 finalizer).
pub fn scene_seed(base: u64, index: usize) -> u64 {
    let mut z = base.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SceneConfig {
        SceneConfig { width: 128, height: 128, count_target: 8, ..SceneConfig::default() }
    }

    #[test]
    fn rosters_validate() {
        for c in virus_classes().iter().chain(&cell_classes()) {
            c.validate().unwrap();
        }
        assert_eq!((virus_classes().len(), cell_classes().len()), (2, 5));
    }

    #[test]
    fn single_instance_is_complete() {
        let c = SceneConfig { count_target: 1, border_fraction: 0.0, ..SceneConfig::default() };
        let s = generate_scene(&virus_classes(), &c, 3).unwrap();
        assert_eq!(s.instances.len(), 1);
        assert!(s.instances[0].complete);
    }

    #[test]
    fn coincident_centers_are_both_incomplete() {
        let classes = cell_classes();
        let shape = Shape::ellipse(10.0, 10.0, 0.0).unwrap();
        let s = compose_scene(&classes, &cfg(), vec![(0, shape.clone(), (60.0, 60.0)), (1, shape, (60.0, 60.0))], 1).unwrap();
        assert!(s.instances.iter().all(|i| !i.complete));
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_scene(&cell_classes(), &cfg(), 11).unwrap();
        let b = generate_scene(&cell_classes(), &cfg(), 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.image, generate_scene(&cell_classes(), &cfg(), 12).unwrap().image);
    }

    #[test]
    fn masks_inside_boxes_and_ids_unique() {
        let s = generate_scene(&cell_classes(), &cfg(), 5).unwrap();
        let mut ids: Vec<u32> = s.instances.iter().map(|i| i.id).collect();
        ids.dedup();
        assert_eq!(ids.len(), s.instances.len());
        for i in &s.instances {
            assert_eq!((i.mask.width(), i.mask.height()), (i.bbox.w, i.bbox.h));
            assert!(i.bbox.x + i.bbox.w <= 128 && i.bbox.y + i.bbox.h <= 128);
            assert_eq!(i.mask.bbox(), Some(PixelBox::new(0, 0, i.bbox.w, i.bbox.h)));
        }
    }

    #[test]
    fn undersized_class_rejected() {
        let mut c = virus_classes()[0].clone();
        c.diameter_mean = 3.0;
        c.diameter_std = 0.0;
        assert!(c.validate().is_err());
        assert!(SceneConfig { width: 32, ..SceneConfig::default() }.validate().is_err());
    }
}
