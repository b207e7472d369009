//! Synthetic labeled cell images.
//!
//! Each image shows elliptical "cells" on a noisy background. Normal cells
//! (category 2) appear in every image; cancer cells (category 1: larger, with
//! a larger and darker nucleus) appear only in positive images. The mask
//! marks every cell's full ellipse with its category, so the image class
//! always agrees with [`derive_bag_label`].
//!
//! Every image also receives a photometric perturbation (brightness,
//! contrast, saturation, hue offsets). In the confound modes these offsets
//! are tied to the class in the train and validation splits and untied or
//! inverted in the test split.

mod augment;
mod disk;

pub use augment::{
    augment, center_crop, color_jitter, hsv_to_rgb, resize_image, resize_mask, rgb_to_hsv, rotate,
    AugConfig, JitterFactors, Rotation,
};
pub use disk::{load_split, read_manifest, write_dataset, Manifest};

use crate::bagging::{derive_bag_label, LabeledImage, POSITIVE_CATEGORY};
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::rng;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const NORMAL_CATEGORY: u8 = 2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Confound {
    /// Offsets independent of class everywhere.
    #[default]
    None,
    /// Tied to class in train/val, independent in test.
    Correlated,
    /// Tied to class in train/val, inverted in test.
    AntiCorrelated,
}

/// Maximum absolute photometric offsets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl Default for Perturbation {
    fn default() -> Self {
        Self {
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            hue: 0.03,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub background: [f32; 3],
    pub normal_body: [f32; 3],
    pub normal_nucleus: [f32; 3],
    pub cancer_body: [f32; 3],
    pub cancer_nucleus: [f32; 3],
}

impl Default for Palette {
    fn default() -> Self {
        Self {
            background: [0.90, 0.86, 0.88],
            normal_body: [0.80, 0.58, 0.72],
            normal_nucleus: [0.45, 0.28, 0.58],
            cancer_body: [0.78, 0.55, 0.72],
            cancer_nucleus: [0.32, 0.16, 0.48],
        }
    }
}

/// Per-class sample counts for each split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub image_side: usize,
    /// Inclusive range of normal cells per image.
    pub normal_cells: (usize, usize),
    /// Inclusive range of cancer cells per positive image.
    pub cancer_cells: (usize, usize),
    pub normal_radius: (f64, f64),
    pub cancer_radius: (f64, f64),
    pub normal_nucleus_ratio: f64,
    pub cancer_nucleus_ratio: f64,
    pub palette: Palette,
    /// Standard deviation of per-pixel background noise.
    pub noise: f64,
    pub perturbation: Perturbation,
    pub confound: Confound,
    pub seed: u64,
    /// Samples per class; split 7:1:2 unless `split_sizes` is given.
    pub counts_per_class: usize,
    pub split_sizes: Option<SplitSizes>,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            image_side: 96,
            normal_cells: (4, 8),
            cancer_cells: (1, 3),
            normal_radius: (5.0, 8.0),
            cancer_radius: (8.0, 12.0),
            normal_nucleus_ratio: 0.35,
            cancer_nucleus_ratio: 0.65,
            palette: Palette::default(),
            noise: 0.03,
            perturbation: Perturbation::default(),
            confound: Confound::None,
            seed: 0,
            counts_per_class: 50,
            split_sizes: None,
        }
    }
}

impl GenConfig {
    /// Full-size 1038-pixel sources whose cells land at desk-scale sizes
    /// after a 700-pixel center crop and resize to 384.
    pub fn full_geometry() -> Self {
        Self {
            image_side: 1038,
            normal_cells: (30, 60),
            cancer_cells: (4, 10),
            normal_radius: (18.0, 30.0),
            cancer_radius: (30.0, 45.0),
            ..Self::default()
        }
    }

    /// Checks counts and ranges.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_side == 0 {
            return bad("image_side must be positive".into());
        }
        match self.split_sizes {
            Some(s) if s.train == 0 || s.val == 0 || s.test == 0 => {
                return bad("every split size must be positive".into())
            }
            None if self.counts_per_class < 10 => {
                return bad(format!("counts_per_class must be >= 10, got {}", self.counts_per_class))
            }
            _ => {}
        }
        for (name, (lo, hi)) in [("normal_cells", self.normal_cells), ("cancer_cells", self.cancer_cells)] {
            if lo > hi {
                return bad(format!("{name} range is empty"));
            }
        }
        if self.cancer_cells.0 == 0 {
            return bad("positive images need at least one cancer cell".into());
        }
        for (name, (a, b)) in [("normal_radius", self.normal_radius), ("cancer_radius", self.cancer_radius)] {
            if !(a > 0.0 && a <= b) {
                return bad(format!("{name} ({a}, {b}) is not a positive range"));
            }
        }
        if !(self.noise >= 0.0) {
            return bad("noise must be nonnegative".into());
        }
        Ok(())
    }

    /// Checks that cell radii, scaled by `output_scale`, lie within
    /// `[p/4, 2p]` for patch side `p`.
    pub fn check_radius(&self, patch_side: usize, output_scale: f64) -> Result<()> {
        let (lo, hi) = (patch_side as f64 / 4.0, 2.0 * patch_side as f64);
        for (name, (a, b)) in [("normal_radius", self.normal_radius), ("cancer_radius", self.cancer_radius)] {
            if a * output_scale < lo || b * output_scale > hi {
                return Err(Error::Config(format!(
                    "{name} ({a}, {b}) scaled by {output_scale} leaves [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    fn sizes(&self) -> SplitSizes {
        self.split_sizes.unwrap_or_else(|| {
            let c = self.counts_per_class;
            let val = c / 10;
            let test = c / 5;
            SplitSizes {
                train: c - val - test,
                val,
                test,
            }
        })
    }
}

/// Generation record stored alongside each sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub id: u64,
    pub class: u8,
    pub seed: u64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: LabeledImage,
    pub meta: SampleMeta,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn images(split: &[Sample]) -> Vec<LabeledImage> {
        split.iter().map(|s| s.image.clone()).collect()
    }
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    sin: f64,
    cos: f64,
}

impl Ellipse {
    fn random<R: Rng>(side: usize, (rlo, rhi): (f64, f64), rng: &mut R) -> Self {
        let r = if rhi > rlo { rng.random_range(rlo..=rhi) } else { rlo };
        let aspect = rng.random_range(0.75..=1.0);
        let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let margin = (r * 0.5).min(side as f64 / 2.0 - 1.0).max(0.0);
        let s = side as f64;
        Self {
            cy: rng.random_range(margin..=s - margin),
            cx: rng.random_range(margin..=s - margin),
            ry: r * aspect,
            rx: r,
            sin: angle.sin(),
            cos: angle.cos(),
        }
    }

    /// Normalised radial distance of the pixel center (≤ 1 inside).
    fn dist(&self, y: usize, x: usize) -> f64 {
        let dy = y as f64 + 0.5 - self.cy;
        let dx = x as f64 + 0.5 - self.cx;
        let u = (dx * self.cos + dy * self.sin) / self.rx;
        let v = (-dx * self.sin + dy * self.cos) / self.ry;
        (u * u + v * v).sqrt()
    }

    fn bbox(&self, side: usize) -> (usize, usize, usize, usize) {
        let r = self.rx.max(self.ry) + 1.0;
        let clamp = |v: f64| v.max(0.0).min(side as f64) as usize;
        (clamp(self.cy - r), clamp(self.cy + r + 1.0), clamp(self.cx - r), clamp(self.cx + r + 1.0))
    }
}

fn draw_cell(
    img: &mut Image,
    mask: &mut Mask,
    cell: &Ellipse,
    body: [f32; 3],
    nucleus: [f32; 3],
    nucleus_ratio: f64,
    category: u8,
) -> usize {
    let (y0, y1, x0, x1) = cell.bbox(img.height);
    let mut painted = 0;
    for y in y0..y1 {
        for x in x0..x1 {
            let d = cell.dist(y, x);
            if d > 1.0 {
                continue;
            }
            let color = if d <= nucleus_ratio { nucleus } else { body };
            img.pixel_mut(y, x).copy_from_slice(&color);
            mask.set(y, x, category);
            painted += 1;
        }
    }
    painted
}

/// Renders one sample with explicit photometric offsets.
pub fn render_sample(
    cfg: &GenConfig,
    seed: u64,
    class: u8,
    offsets: JitterFactors,
    id: u64,
) -> Result<LabeledImage> {
    if class > 1 {
        return Err(Error::Config(format!("class must be 0 or 1, got {class}")));
    }
    let side = cfg.image_side;
    let mut rng = rng::stream(seed, &[rng::tag::SAMPLE]);
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let bg = cfg.palette.background;
    let mut img = Image::filled(side, side, 3, 0.0);
    for p in img.data.chunks_mut(3) {
        let n = noise.sample(&mut rng) as f32;
        for (v, b) in p.iter_mut().zip(bg) {
            *v = b + n;
        }
    }
    let mut mask = Mask::zeros(side, side);

    let n_normal = rng.random_range(cfg.normal_cells.0..=cfg.normal_cells.1);
    for _ in 0..n_normal {
        let cell = Ellipse::random(side, cfg.normal_radius, &mut rng);
        draw_cell(
            &mut img,
            &mut mask,
            &cell,
            cfg.palette.normal_body,
            cfg.palette.normal_nucleus,
            cfg.normal_nucleus_ratio,
            NORMAL_CATEGORY,
        );
    }
    if class == 1 {
        let n_cancer = rng.random_range(cfg.cancer_cells.0..=cfg.cancer_cells.1);
        for _ in 0..n_cancer {
            let cell = Ellipse::random(side, cfg.cancer_radius, &mut rng);
            draw_cell(
                &mut img,
                &mut mask,
                &cell,
                cfg.palette.cancer_body,
                cfg.palette.cancer_nucleus,
                cfg.cancer_nucleus_ratio,
                POSITIVE_CATEGORY,
            );
        }
    }
    for v in &mut img.data {
        *v = v.clamp(0.0, 1.0);
    }
    offsets.apply(&mut img);
    img.quantize_u8();
    let out = LabeledImage::new(id, img, mask)?;
    debug_assert_eq!(out.class_label, class);
    Ok(out)
}

fn untied_offsets<R: Rng>(p: &Perturbation, rng: &mut R) -> JitterFactors {
    let mut u = |m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
    JitterFactors {
        brightness: 1.0 + u(p.brightness),
        contrast: 1.0 + u(p.contrast),
        saturation: 1.0 + u(p.saturation),
        hue: u(p.hue),
    }
}

/// Offsets of sign `sign` with magnitude in `[0.6, 1.0]` of the maximum.
fn tied_offsets<R: Rng>(p: &Perturbation, sign: f64, rng: &mut R) -> JitterFactors {
    let mut u = |m: f64| sign * m * rng.random_range(0.6..=1.0);
    JitterFactors {
        brightness: 1.0 + u(p.brightness),
        contrast: 1.0 + u(p.contrast),
        saturation: 1.0 + u(p.saturation),
        hue: u(p.hue),
    }
}

/// One sample with class-independent offsets drawn from `seed`.
pub fn generate_sample(cfg: &GenConfig, seed: u64, class: u8) -> Result<LabeledImage> {
    let mut rng = rng::stream(seed, &[rng::tag::PERTURB]);
    let offsets = untied_offsets(&cfg.perturbation, &mut rng);
    render_sample(cfg, seed, class, offsets, seed)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum SplitKind {
    Train,
    Val,
    Test,
}

fn offsets_for(cfg: &GenConfig, split: SplitKind, class: u8, seed: u64) -> JitterFactors {
    let mut rng = rng::stream(seed, &[rng::tag::PERTURB]);
    let sign = if class == 1 { 1.0 } else { -1.0 };
    match (cfg.confound, split) {
        (Confound::None, _) | (Confound::Correlated, SplitKind::Test) => {
            untied_offsets(&cfg.perturbation, &mut rng)
        }
        (Confound::AntiCorrelated, SplitKind::Test) => tied_offsets(&cfg.perturbation, -sign, &mut rng),
        _ => tied_offsets(&cfg.perturbation, sign, &mut rng),
    }
}

/// Generates stratified train/val/test splits (7:1:2 per class by default,
/// with rounding remainders going to train).
pub fn generate_dataset(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let sizes = cfg.sizes();
    let mut next_id = 0u64;
    let mut make = |split: SplitKind, count: usize| -> Result<Vec<Sample>> {
        let mut out = Vec::with_capacity(2 * count);
        for class in 0..=1u8 {
            for _ in 0..count {
                let id = next_id;
                next_id += 1;
                let seed = rng::derive_seed(cfg.seed, &[rng::tag::SAMPLE, id]);
                let offsets = offsets_for(cfg, split, class, seed);
                let image = render_sample(cfg, seed, class, offsets, id)?;
                if derive_bag_label(&image.mask) != class {
                    return Err(Error::Config(format!("sample {id} lost its class")));
                }
                out.push(Sample {
                    image,
                    meta: SampleMeta {
                        id,
                        class,
                        seed,
                        brightness: offsets.brightness - 1.0,
                        contrast: offsets.contrast - 1.0,
                        saturation: offsets.saturation - 1.0,
                        hue: offsets.hue,
                    },
                });
            }
        }
        Ok(out)
    };
    Ok(Dataset {
        train: make(SplitKind::Train, sizes.train)?,
        val: make(SplitKind::Val, sizes.val)?,
        test: make(SplitKind::Test, sizes.test)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let cov: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
        cov / (vx * vy).sqrt()
    }

    fn corr(split: &[Sample]) -> f64 {
        let c: Vec<f64> = split.iter().map(|s| s.meta.class as f64).collect();
        let b: Vec<f64> = split.iter().map(|s| s.meta.brightness).collect();
        pearson(&c, &b)
    }

    #[test]
    fn negative_sample_has_no_cancer_pixels() {
        let cfg = GenConfig::default();
        for seed in 0..10 {
            let s = generate_sample(&cfg, seed, 0).unwrap();
            assert!(!s.mask.data.contains(&POSITIVE_CATEGORY));
            assert!(s.mask.data.contains(&NORMAL_CATEGORY));
            assert_eq!(s.class_label, 0);
        }
    }

    #[test]
    fn positive_sample_is_labeled_positive() {
        let cfg = GenConfig::default();
        for seed in 0..10 {
            let s = generate_sample(&cfg, seed, 1).unwrap();
            assert_eq!(derive_bag_label(&s.mask), 1);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = GenConfig::default();
        assert_eq!(generate_sample(&cfg, 3, 1).unwrap(), generate_sample(&cfg, 3, 1).unwrap());
    }

    #[test]
    fn hundred_samples_split_seventy_ten_twenty() {
        let d = generate_dataset(&GenConfig { counts_per_class: 50, ..GenConfig::default() }).unwrap();
        assert_eq!((d.train.len(), d.val.len(), d.test.len()), (70, 10, 20));
        for split in [&d.train, &d.val, &d.test] {
            let pos = split.iter().filter(|s| s.meta.class == 1).count();
            assert!((pos as f64 - split.len() as f64 / 2.0).abs() <= 1.0);
        }
    }

    #[test]
    fn remainders_go_to_train() {
        let d = generate_dataset(&GenConfig { counts_per_class: 13, ..GenConfig::default() }).unwrap();
        assert_eq!((d.train.len(), d.val.len(), d.test.len()), (20, 2, 4));
    }

    #[test]
    fn too_few_samples_is_an_error() {
        assert!(generate_dataset(&GenConfig { counts_per_class: 5, ..GenConfig::default() }).is_err());
    }

    #[test]
    fn anti_correlated_confound_flips_in_test() {
        let cfg = GenConfig { confound: Confound::AntiCorrelated, counts_per_class: 40, ..GenConfig::default() };
        let d = generate_dataset(&cfg).unwrap();
        assert!(corr(&d.train) >= 0.9, "{}", corr(&d.train));
        assert!(corr(&d.test) <= -0.9, "{}", corr(&d.test));
    }

    #[test]
    fn correlated_confound_unties_in_test() {
        let cfg = GenConfig { confound: Confound::Correlated, counts_per_class: 60, ..GenConfig::default() };
        let d = generate_dataset(&cfg).unwrap();
        assert!(corr(&d.train) >= 0.9);
        assert!(corr(&d.test).abs() < 0.6);
    }

    #[test]
    fn default_radii_fit_patch_16() {
        GenConfig::default().check_radius(16, 1.0).unwrap();
        GenConfig::full_geometry().check_radius(32, 384.0 / 700.0).unwrap();
        assert!(GenConfig { normal_radius: (1.0, 3.0), ..GenConfig::default() }.check_radius(16, 1.0).is_err());
    }

    #[test]
    fn pure_resize_keeps_cells_in_place() {
        let s = generate_sample(&GenConfig::default(), 11, 1).unwrap();
        let up = resize_mask(&s.mask, 128);
        let back = resize_mask(&up, 96);
        let inter = s.mask.data.iter().zip(&back.data).filter(|(a, b)| **a != 0 && **b != 0).count();
        let union = s.mask.data.iter().zip(&back.data).filter(|(a, b)| **a != 0 || **b != 0).count();
        assert!(inter as f64 / union as f64 >= 0.9);
    }
}
