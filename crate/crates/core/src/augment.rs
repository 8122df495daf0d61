//! Training-time image transforms and resampling to branch resolutions.
//!
//! Every transform keeps values in `[0, 1]` and, with its probability, delta
//! or sigma set to zero, returns the input unchanged.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::rng::Rng;

/// Luminance weights for RGB → gray.
pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

pub const ERASING_ATTEMPTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ErasingConfig {
    pub probability: f64,
    pub area_range: (f64, f64),
    pub aspect_range: (f64, f64),
}

impl Default for ErasingConfig {
    fn default() -> Self {
        ErasingConfig {
            probability: 0.5,
            area_range: (0.02, 0.4),
            aspect_range: (0.3, 3.33),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JitterConfig {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl Default for JitterConfig {
    fn default() -> Self {
        JitterConfig {
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub crop_padding: usize,
    pub erasing: ErasingConfig,
    pub flip_probability: f64,
    pub jitter: JitterConfig,
    pub pca_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_padding: 8,
            erasing: ErasingConfig::default(),
            flip_probability: 0.5,
            jitter: JitterConfig::default(),
            pca_sigma: 0.1,
        }
    }
}

impl AugmentConfig {
    /// Defaults with the crop padding scaled to 64-pixel-tall inputs.
    pub fn toy() -> Self {
        AugmentConfig {
            crop_padding: 2,
            ..AugmentConfig::default()
        }
    }

    /// Every transform switched off.
    pub fn disabled() -> Self {
        AugmentConfig {
            crop_padding: 0,
            erasing: ErasingConfig {
                probability: 0.0,
                ..ErasingConfig::default()
            },
            flip_probability: 0.0,
            jitter: JitterConfig {
                brightness: 0.0,
                contrast: 0.0,
                saturation: 0.0,
            },
            pca_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        let e = &self.erasing;
        let (alo, ahi) = e.area_range;
        let (rlo, rhi) = e.aspect_range;
        let j = &self.jitter;
        let msg = if !prob(e.probability) || !prob(self.flip_probability) {
            "probabilities must lie in [0, 1]"
        } else if !(alo > 0.0 && alo <= ahi && ahi < 1.0) {
            "erasing area range must satisfy 0 < lo <= hi < 1"
        } else if !(rlo > 0.0 && rlo <= rhi && rhi.is_finite()) {
            "erasing aspect range must be positive and ordered"
        } else if [j.brightness, j.contrast, j.saturation, self.pca_sigma]
            .iter()
            .any(|v| !(*v >= 0.0 && v.is_finite()))
        {
            "jitter deltas and pca sigma must be non-negative"
        } else {
            return Ok(());
        };
        Err(Error::Config(msg.into()))
    }
}

/// Crop of the zero-padded image at offset `(oy, ox)` in padded coordinates.
pub fn crop_at(img: &ImageBuffer, padding: usize, oy: usize, ox: usize) -> ImageBuffer {
    let (h, w) = img.dims();
    ImageBuffer::from_fn(h, w, |y, x| {
        let sy = (y + oy).wrapping_sub(padding);
        let sx = (x + ox).wrapping_sub(padding);
        if sy < h && sx < w {
            img.pixel(sy, sx)
        } else {
            [0.0; 3]
        }
    })
}

pub fn random_crop(img: &ImageBuffer, padding: usize, rng: &mut Rng) -> ImageBuffer {
    if padding == 0 {
        return img.clone();
    }
    let oy = rng.int_inclusive(0, 2 * padding);
    let ox = rng.int_inclusive(0, 2 * padding);
    crop_at(img, padding, oy, ox)
}

pub fn flip_horizontal(img: &ImageBuffer) -> ImageBuffer {
    let w = img.width();
    ImageBuffer::from_fn(img.height(), w, |y, x| img.pixel(y, w - 1 - x))
}

pub fn random_flip(img: &ImageBuffer, p: f64, rng: &mut Rng) -> ImageBuffer {
    if p > 0.0 && rng.bernoulli(p) {
        flip_horizontal(img)
    } else {
        img.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub y: usize,
    pub x: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y..self.y + self.height).contains(&y) && (self.x..self.x + self.width).contains(&x)
    }
}

/// Returns the erased image and the overwritten rectangle, if erasing fired.
///
/// A candidate is rejected unless it fits and its rounded area fraction stays
/// inside the configured range; after [`ERASING_ATTEMPTS`] rejections the
/// image is returned unchanged.
pub fn random_erasing(
    img: &ImageBuffer,
    cfg: &ErasingConfig,
    rng: &mut Rng,
) -> (ImageBuffer, Option<Rect>) {
    if cfg.probability <= 0.0 || !rng.bernoulli(cfg.probability) {
        return (img.clone(), None);
    }
    let (h, w) = img.dims();
    let total = (h * w) as f64;
    for _ in 0..ERASING_ATTEMPTS {
        let area = rng.uniform_range(cfg.area_range.0, cfg.area_range.1) * total;
        let aspect = rng.uniform_range(cfg.aspect_range.0, cfg.aspect_range.1);
        let eh = (area * aspect).sqrt().round() as usize;
        let ew = (area / aspect).sqrt().round() as usize;
        if eh == 0 || ew == 0 || eh > h || ew > w {
            continue;
        }
        let frac = (eh * ew) as f64 / total;
        if frac < cfg.area_range.0 || frac > cfg.area_range.1 {
            continue;
        }
        let rect = Rect {
            y: rng.below(h - eh + 1),
            x: rng.below(w - ew + 1),
            height: eh,
            width: ew,
        };
        let mut out = img.clone();
        for c in 0..3 {
            for y in rect.y..rect.y + eh {
                for x in rect.x..rect.x + ew {
                    out.set(c, y, x, rng.uniform() as f32);
                }
            }
        }
        return (out, Some(rect));
    }
    (img.clone(), None)
}

fn gray(p: [f32; 3]) -> f32 {
    LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2]
}

pub fn adjust_brightness(img: &ImageBuffer, factor: f32) -> ImageBuffer {
    let mut out = img.clone();
    for v in out.data_mut() {
        *v *= factor;
    }
    out.clamp();
    out
}

/// Blend with the image's mean luminance: `m + factor · (v − m)`.
pub fn adjust_contrast(img: &ImageBuffer, factor: f32) -> ImageBuffer {
    let (h, w) = img.dims();
    let mut sum = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            sum += gray(img.pixel(y, x)) as f64;
        }
    }
    let mean = (sum / (h * w) as f64) as f32;
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = mean + factor * (*v - mean);
    }
    out.clamp();
    out
}

/// Blend with each pixel's own gray value.
pub fn adjust_saturation(img: &ImageBuffer, factor: f32) -> ImageBuffer {
    let mut out = img.clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            let p = img.pixel(y, x);
            let g = gray(p);
            out.set_pixel(y, x, p.map(|v| (g + factor * (v - g)).clamp(0.0, 1.0)));
        }
    }
    out
}

pub fn color_jitter(img: &ImageBuffer, cfg: &JitterConfig, rng: &mut Rng) -> ImageBuffer {
    let mut order = [0usize, 1, 2];
    rng.shuffle(&mut order);
    let mut out = img.clone();
    for op in order {
        let delta = [cfg.brightness, cfg.contrast, cfg.saturation][op];
        if delta == 0.0 {
            continue;
        }
        let factor = (1.0 + rng.uniform_range(-delta, delta)) as f32;
        out = match op {
            0 => adjust_brightness(&out, factor),
            1 => adjust_contrast(&out, factor),
            _ => adjust_saturation(&out, factor),
        };
    }
    out
}

pub fn rgb_covariance(img: &ImageBuffer) -> [[f64; 3]; 3] {
    let (h, w) = img.dims();
    let n = (h * w) as f64;
    let mut mean = [0.0; 3];
    for (c, m) in mean.iter_mut().enumerate() {
        *m = img.data()[c * h * w..(c + 1) * h * w]
            .iter()
            .map(|&v| v as f64)
            .sum::<f64>()
            / n;
    }
    let mut cov = [[0.0; 3]; 3];
    for y in 0..h {
        for x in 0..w {
            let p = img.pixel(y, x);
            let d = [0, 1, 2].map(|c| p[c] as f64 - mean[c]);
            for i in 0..3 {
                for j in 0..3 {
                    cov[i][j] += d[i] * d[j];
                }
            }
        }
    }
    cov.map(|row| row.map(|v| v / n))
}

/// Eigen-decomposition of a symmetric 3×3 matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and the matching unit eigenvectors (`vectors[i]` is the
/// i-th eigenvector).
pub fn symmetric_eigen3(m: [[f64; 3]; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
    let mut a = m;
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for _ in 0..64 {
        let off = a[0][1].powi(2) + a[0][2].powi(2) + a[1][2].powi(2);
        let scale = a[0][0].powi(2) + a[1][1].powi(2) + a[2][2].powi(2) + off;
        if off <= 1e-30 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            if a[p][q] == 0.0 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            for k in 0..3 {
                let (akp, akq) = (a[k][p], a[k][q]);
                a[k][p] = c * akp - s * akq;
                a[k][q] = s * akp + c * akq;
            }
            for k in 0..3 {
                let (apk, aqk) = (a[p][k], a[q][k]);
                a[p][k] = c * apk - s * aqk;
                a[q][k] = s * apk + c * aqk;
            }
            for row in &mut v {
                let (vp, vq) = (row[p], row[q]);
                row[p] = c * vp - s * vq;
                row[q] = s * vp + c * vq;
            }
        }
    }
    let values = [a[0][0], a[1][1], a[2][2]];
    let vectors = [0, 1, 2].map(|i| [v[0][i], v[1][i], v[2][i]]);
    (values, vectors)
}

/// Adds `Σ α_i λ_i e_i` with `α_i ~ N(0, sigma)` from this image's RGB covariance.
pub fn color_pca(img: &ImageBuffer, sigma: f64, rng: &mut Rng) -> ImageBuffer {
    if sigma == 0.0 {
        return img.clone();
    }
    let (values, vectors) = symmetric_eigen3(rgb_covariance(img));
    let mut shift = [0.0f64; 3];
    for (lambda, e) in values.iter().zip(&vectors) {
        let alpha = rng.normal(0.0, sigma);
        for c in 0..3 {
            shift[c] += alpha * lambda.max(0.0) * e[c];
        }
    }
    let mut out = img.clone();
    if shift.iter().all(|&s| s == 0.0) {
        return out;
    }
    let plane = img.height() * img.width();
    for (c, s) in shift.iter().enumerate() {
        for v in &mut out.data_mut()[c * plane..(c + 1) * plane] {
            *v = (*v + *s as f32).clamp(0.0, 1.0);
        }
    }
    out
}

/// Bilinear resampling with pixel-center alignment and edge clamping.
pub fn resize_bilinear(img: &ImageBuffer, target_h: usize, target_w: usize) -> ImageBuffer {
    let (h, w) = img.dims();
    if (h, w) == (target_h, target_w) {
        return img.clone();
    }
    let axis = |dst: usize, src: usize| -> Vec<(usize, usize, f32)> {
        let ratio = src as f64 / dst as f64;
        (0..dst)
            .map(|i| {
                let s = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, (s - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = axis(target_h, h);
    let xs = axis(target_w, w);
    let mut out = ImageBuffer::filled(target_h, target_w, [0.0; 3]);
    for c in 0..3 {
        for (ty, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (tx, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = img.get(c, y0, x0) * (1.0 - fx) + img.get(c, y0, x1) * fx;
                let bottom = img.get(c, y1, x0) * (1.0 - fx) + img.get(c, y1, x1) * fx;
                out.set(c, ty, tx, (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
            }
        }
    }
    out
}

pub fn resize_to_scales(img: &ImageBuffer, scales: &[(usize, usize)]) -> Vec<ImageBuffer> {
    scales
        .iter()
        .map(|&(h, w)| resize_bilinear(img, h, w))
        .collect()
}

fn largest(scales: &[(usize, usize)]) -> (usize, usize) {
    scales.iter().copied().max_by_key(|(h, w)| h * w).unwrap_or((1, 1))
}

/// Augmented image at the largest scale, before per-branch resizing.
pub fn augment_once(img: &ImageBuffer, cfg: &AugmentConfig, largest_hw: (usize, usize), rng: &Rng) -> ImageBuffer {
    let base = resize_bilinear(img, largest_hw.0, largest_hw.1);
    let x = random_crop(&base, cfg.crop_padding, &mut rng.split("crop"));
    let (x, _) = random_erasing(&x, &cfg.erasing, &mut rng.split("erasing"));
    let x = random_flip(&x, cfg.flip_probability, &mut rng.split("flip"));
    let x = color_jitter(&x, &cfg.jitter, &mut rng.split("jitter"));
    color_pca(&x, cfg.pca_sigma, &mut rng.split("pca"))
}

/// Crop, erasing, flip, jitter and PCA applied once at the largest scale, then
/// resized to every branch resolution.
pub fn compose(
    img: &ImageBuffer,
    cfg: &AugmentConfig,
    scales: &[(usize, usize)],
    rng: &Rng,
) -> Vec<ImageBuffer> {
    let augmented = augment_once(img, cfg, largest(scales), rng);
    resize_to_scales(&augmented, scales)
}
