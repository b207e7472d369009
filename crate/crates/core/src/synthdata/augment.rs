//! Geometric and photometric augmentation.
//!
//! Pipeline order: rotation, center crop, resize, flips, color jitter.
//! Geometric steps move the mask with nearest-neighbour sampling; the
//! photometric step never touches it.

use crate::bagging::LabeledImage;
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::rng;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rotation {
    #[default]
    None,
    /// A uniformly chosen multiple of 90°; exact on pixels and mask.
    RightAngle,
    /// Uniform angle in `[0°, 360°)`, bilinear pixels, nearest mask, zero fill.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugConfig {
    pub rotation: Rotation,
    /// Side of the retained center square as a fraction of the shorter side.
    pub crop_fraction: f64,
    /// Output side after cropping; equal to the cropped side means no resize.
    pub resize: usize,
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self::desk(96)
    }
}

impl AugConfig {
    /// Training augmentation for desk-scale images of side `side`.
    pub fn desk(side: usize) -> Self {
        Self {
            rotation: Rotation::RightAngle,
            crop_fraction: 1.0,
            resize: side,
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            brightness: 0.15,
            contrast: 0.3,
            saturation: 0.3,
            hue: 0.06,
        }
    }

    /// Full-geometry training augmentation: 1038-pixel sources, 700-pixel
    /// center crop, 384-pixel output.
    pub fn full() -> Self {
        Self {
            rotation: Rotation::Uniform,
            crop_fraction: 700.0 / 1038.0,
            resize: 384,
            ..Self::desk(384)
        }
    }

    /// No-op pipeline for images of side `side`.
    pub fn identity(side: usize) -> Self {
        Self {
            rotation: Rotation::None,
            crop_fraction: 1.0,
            resize: side,
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
        }
    }

    /// Validation/test pipeline: the same crop and resize, nothing random.
    pub fn eval(&self) -> Self {
        Self {
            crop_fraction: self.crop_fraction,
            resize: self.resize,
            ..Self::identity(self.resize)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.crop_fraction > 0.0
            && self.crop_fraction <= 1.0
            && self.resize > 0
            && (0.0..=1.0).contains(&self.hflip_prob)
            && (0.0..=1.0).contains(&self.vflip_prob)
            && [self.brightness, self.contrast, self.saturation, self.hue]
                .iter()
                .all(|v| *v >= 0.0 && v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid augmentation config {self:?}")))
        }
    }
}

/// Concrete jitter factors, applied in the order brightness, contrast,
/// saturation, hue, clamping to `[0, 1]` after each step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JitterFactors {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Fraction of the hue circle.
    pub hue: f64,
}

impl JitterFactors {
    pub const IDENTITY: Self = Self {
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
        hue: 0.0,
    };

    /// Brightness factor from `[max(0, 1−b), 1+b]`, contrast from `[1−c, 1+c]`,
    /// saturation from `[1−s, 1+s]`, hue shift from `[−h, h]`.
    pub fn sample<R: Rng>(b: f64, c: f64, s: f64, h: f64, rng: &mut R) -> Self {
        let mut draw = |lo: f64, hi: f64| if hi > lo { rng.random_range(lo..=hi) } else { lo };
        Self {
            brightness: draw((1.0 - b).max(0.0), 1.0 + b),
            contrast: draw((1.0 - c).max(0.0), 1.0 + c),
            saturation: draw((1.0 - s).max(0.0), 1.0 + s),
            hue: draw(-h, h),
        }
    }

    pub fn apply(&self, img: &mut Image) {
        if self.brightness != 1.0 {
            let f = self.brightness as f32;
            for v in &mut img.data {
                *v = (*v * f).clamp(0.0, 1.0);
            }
        }
        if img.channels != 3 {
            return;
        }
        if self.contrast != 1.0 {
            let mean = img
                .data
                .chunks(3)
                .map(|p| gray(p) as f64)
                .sum::<f64>()
                / (img.height * img.width) as f64;
            blend(img, self.contrast as f32, |_| mean as f32);
        }
        if self.saturation != 1.0 {
            blend(img, self.saturation as f32, gray);
        }
        if self.hue != 0.0 {
            for p in img.data.chunks_mut(3) {
                let (h, s, v) = rgb_to_hsv(p[0], p[1], p[2]);
                let h = (h + self.hue as f32).rem_euclid(1.0);
                let (r, g, b) = hsv_to_rgb(h, s, v);
                p[0] = r.clamp(0.0, 1.0);
                p[1] = g.clamp(0.0, 1.0);
                p[2] = b.clamp(0.0, 1.0);
            }
        }
    }
}

fn gray(p: &[f32]) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn blend(img: &mut Image, factor: f32, base: impl Fn(&[f32]) -> f32) {
    for p in img.data.chunks_mut(3) {
        let b = base(p);
        for v in p.iter_mut() {
            *v = (factor * *v + (1.0 - factor) * b).clamp(0.0, 1.0);
        }
    }
}

/// RGB in `[0,1]` to (hue in `[0,1)`, saturation, value).
pub fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    if delta == 0.0 {
        return (0.0, s, v);
    }
    let h = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    ((h / 6.0).rem_euclid(1.0), s, v)
}

pub fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Random color jitter with the given strengths.
pub fn color_jitter(pixels: &Image, b: f64, c: f64, s: f64, h: f64, seed: u64) -> Image {
    let mut rng = rng::rng_from_seed(seed);
    let f = JitterFactors::sample(b, c, s, h, &mut rng);
    let mut out = pixels.clone();
    f.apply(&mut out);
    out
}

fn rotate_right_angle(img: &Image, mask: &Mask, quarter_turns: u32) -> (Image, Mask) {
    let (h, w, c) = (img.height, img.width, img.channels);
    let (nh, nw) = if quarter_turns % 2 == 1 { (w, h) } else { (h, w) };
    let mut out = Image::filled(nh, nw, c, 0.0);
    let mut m = Mask::zeros(nh, nw);
    for y in 0..nh {
        for x in 0..nw {
            // clockwise quarter turns
            let (sy, sx) = match quarter_turns % 4 {
                0 => (y, x),
                1 => (h - 1 - x, y),
                2 => (h - 1 - y, w - 1 - x),
                _ => (x, w - 1 - y),
            };
            out.pixel_mut(y, x).copy_from_slice(img.pixel(sy, sx));
            m.set(y, x, mask.get(sy, sx));
        }
    }
    (out, m)
}

fn bilinear(img: &Image, fy: f64, fx: f64, out: &mut [f32]) {
    let (h, w) = (img.height as f64, img.width as f64);
    let y = fy.clamp(0.0, h - 1.0);
    let x = fx.clamp(0.0, w - 1.0);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(img.height - 1), (x0 + 1).min(img.width - 1));
    let (dy, dx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
    for ch in 0..img.channels {
        let a = img.pixel(y0, x0)[ch];
        let b = img.pixel(y0, x1)[ch];
        let c = img.pixel(y1, x0)[ch];
        let d = img.pixel(y1, x1)[ch];
        out[ch] = (a * (1.0 - dx) + b * dx) * (1.0 - dy) + (c * (1.0 - dx) + d * dx) * dy;
    }
}

/// Rotation by `degrees` about the image center.
pub fn rotate(img: &Image, mask: &Mask, degrees: f64) -> (Image, Mask) {
    let (h, w) = (img.height, img.width);
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let (sin, cos) = degrees.to_radians().sin_cos();
    let mut out = Image::filled(h, w, img.channels, 0.0);
    let mut m = Mask::zeros(h, w);
    let mut buf = vec![0.0f32; img.channels];
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            // inverse rotation to find the source location
            let sx = cos * px + sin * py + cx;
            let sy = -sin * px + cos * py + cy;
            if sx < 0.0 || sy < 0.0 || sx >= w as f64 || sy >= h as f64 {
                continue;
            }
            bilinear(img, sy - 0.5, sx - 0.5, &mut buf);
            out.pixel_mut(y, x).copy_from_slice(&buf);
            m.set(y, x, mask.get(sy as usize, sx as usize));
        }
    }
    (out, m)
}

pub fn center_crop(img: &Image, mask: &Mask, fraction: f64) -> (Image, Mask) {
    let side = ((img.height.min(img.width) as f64 * fraction).round() as usize).max(1);
    if side == img.height && side == img.width {
        return (img.clone(), mask.clone());
    }
    let top = (img.height - side) / 2;
    let left = (img.width - side) / 2;
    let mut out = Image::filled(side, side, img.channels, 0.0);
    let mut m = Mask::zeros(side, side);
    for y in 0..side {
        let src = img.idx(top + y, left);
        let dst = out.idx(y, 0);
        let c = img.channels;
        out.data[dst..dst + side * c].copy_from_slice(&img.data[src..src + side * c]);
        for x in 0..side {
            m.set(y, x, mask.get(top + y, left + x));
        }
    }
    (out, m)
}

/// Bilinear resize (half-pixel centers) of the pixels.
pub fn resize_image(img: &Image, side: usize) -> Image {
    if img.height == side && img.width == side {
        return img.clone();
    }
    let sy = img.height as f64 / side as f64;
    let sx = img.width as f64 / side as f64;
    let mut out = Image::filled(side, side, img.channels, 0.0);
    let mut buf = vec![0.0f32; img.channels];
    for y in 0..side {
        for x in 0..side {
            bilinear(img, (y as f64 + 0.5) * sy - 0.5, (x as f64 + 0.5) * sx - 0.5, &mut buf);
            out.pixel_mut(y, x).copy_from_slice(&buf);
        }
    }
    out
}

/// Nearest-neighbour resize of a mask.
pub fn resize_mask(mask: &Mask, side: usize) -> Mask {
    if mask.height == side && mask.width == side {
        return mask.clone();
    }
    let mut out = Mask::zeros(side, side);
    for y in 0..side {
        let sy = (((y as f64 + 0.5) * mask.height as f64 / side as f64) as usize).min(mask.height - 1);
        for x in 0..side {
            let sx = (((x as f64 + 0.5) * mask.width as f64 / side as f64) as usize).min(mask.width - 1);
            out.set(y, x, mask.get(sy, sx));
        }
    }
    out
}

fn flip(img: &mut Image, mask: &mut Mask, horizontal: bool) {
    let (h, w) = (img.height, img.width);
    let src_img = img.clone();
    let src_mask = mask.clone();
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = if horizontal { (y, w - 1 - x) } else { (h - 1 - y, x) };
            img.pixel_mut(y, x).copy_from_slice(src_img.pixel(sy, sx));
            mask.set(y, x, src_mask.get(sy, sx));
        }
    }
}

/// Applies the augmentation pipeline with draws from `seed`.
pub fn augment(img: &LabeledImage, cfg: &AugConfig, seed: u64) -> Result<LabeledImage> {
    cfg.validate()?;
    let mut rng = rng::rng_from_seed(seed);
    let (mut px, mut mask) = match cfg.rotation {
        Rotation::None => (img.pixels.clone(), img.mask.clone()),
        Rotation::RightAngle => {
            rotate_right_angle(&img.pixels, &img.mask, rng.random_range(0..4u32))
        }
        Rotation::Uniform => rotate(&img.pixels, &img.mask, rng.random_range(0.0..360.0)),
    };
    if cfg.crop_fraction < 1.0 {
        (px, mask) = center_crop(&px, &mask, cfg.crop_fraction);
    }
    px = resize_image(&px, cfg.resize);
    mask = resize_mask(&mask, cfg.resize);
    if cfg.hflip_prob > 0.0 && rng.random_bool(cfg.hflip_prob) {
        flip(&mut px, &mut mask, true);
    }
    if cfg.vflip_prob > 0.0 && rng.random_bool(cfg.vflip_prob) {
        flip(&mut px, &mut mask, false);
    }
    let f = JitterFactors::sample(cfg.brightness, cfg.contrast, cfg.saturation, cfg.hue, &mut rng);
    f.apply(&mut px);
    Ok(LabeledImage {
        id: img.id,
        pixels: px,
        mask,
        class_label: img.class_label,
    })
}
