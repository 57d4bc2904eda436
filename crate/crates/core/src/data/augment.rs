//! Image augmentations for training frames. Each augmentation fires with its
//! own probability; every random draw comes from the caller's RNG, so a
//! `(frame, seed)` pair always produces the same output.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::trajectory::Frame;
use crate::error::DataError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialTransform {
    pub p: f64,
    /// Rotation angle is drawn from `U(-max, +max)` degrees.
    pub max_rotation_deg: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorPerturbation {
    pub p: f64,
    /// Brightness, contrast, saturation and hue shifts are drawn from `U(0, max_shift)`.
    pub max_shift: f64,
}

/// Approximated by warm/cool channel-gain jitter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanckianJitter {
    pub p: f64,
    pub presets: Vec<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsoNoise {
    pub p: f64,
    pub color_shift: [f64; 2],
    pub intensity: [f64; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomBlur {
    pub p: f64,
    /// Odd kernel sizes in `[min, max]`.
    pub kernel: [usize; 2],
    pub gaussian_sigma: [f64; 2],
    /// Probability of Gaussian blur; motion blur otherwise.
    pub gaussian_prob: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sharpening {
    pub p: f64,
    pub factor: [f64; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Translation {
    pub p: f64,
    /// Maximum horizontal shift as a fraction of the image width.
    pub max_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub spatial_transform: SpatialTransform,
    pub color_perturbation: ColorPerturbation,
    pub planckian_jitter: PlanckianJitter,
    pub iso_noise: IsoNoise,
    pub random_blur: RandomBlur,
    pub sharpening: Sharpening,
    pub translation: Translation,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            spatial_transform: SpatialTransform { p: 1.0, max_rotation_deg: 3.0 },
            color_perturbation: ColorPerturbation { p: 0.25, max_shift: 0.2 },
            planckian_jitter: PlanckianJitter { p: 0.25, presets: vec![6, 12, 18, 24] },
            iso_noise: IsoNoise { p: 0.1, color_shift: [0.01, 0.2], intensity: [0.1, 0.6] },
            random_blur: RandomBlur { p: 0.2, kernel: [3, 7], gaussian_sigma: [0.1, 2.0], gaussian_prob: 0.5 },
            sharpening: Sharpening { p: 0.15, factor: [0.5, 1.5] },
            translation: Translation { p: 0.25, max_fraction: 0.03 },
        }
    }
}

impl AugmentConfig {
    /// Every probability zero: `augment` becomes the identity.
    pub fn disabled() -> Self {
        let mut c = AugmentConfig::default();
        c.spatial_transform.p = 0.0;
        c.color_perturbation.p = 0.0;
        c.planckian_jitter.p = 0.0;
        c.iso_noise.p = 0.0;
        c.random_blur.p = 0.0;
        c.sharpening.p = 0.0;
        c.translation.p = 0.0;
        c
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let probs = [
            self.spatial_transform.p,
            self.color_perturbation.p,
            self.planckian_jitter.p,
            self.iso_noise.p,
            self.random_blur.p,
            self.sharpening.p,
            self.translation.p,
            self.random_blur.gaussian_prob,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(DataError::Config("augmentation probabilities must lie in [0, 1]".into()));
        }
        let ranges = [self.iso_noise.color_shift, self.iso_noise.intensity, self.random_blur.gaussian_sigma, self.sharpening.factor];
        if ranges.iter().any(|r| r[0] > r[1]) || self.random_blur.kernel[0] > self.random_blur.kernel[1] {
            return Err(DataError::Config("augmentation ranges must be nonempty".into()));
        }
        if self.random_blur.kernel[0] == 0 || self.planckian_jitter.presets.is_empty() {
            return Err(DataError::Config("blur kernel and jitter presets must be nonempty".into()));
        }
        if self.spatial_transform.max_rotation_deg < 0.0 || self.color_perturbation.max_shift < 0.0 || self.translation.max_fraction < 0.0 {
            return Err(DataError::Config("augmentation magnitudes must be non-negative".into()));
        }
        Ok(())
    }
}

/// Float working copy, channel-interleaved.
struct Img {
    w: usize,
    h: usize,
    px: Vec<f64>,
}

impl Img {
    fn at(&self, x: isize, y: isize, c: usize) -> f64 {
        let x = x.clamp(0, self.w as isize - 1) as usize;
        let y = y.clamp(0, self.h as isize - 1) as usize;
        self.px[3 * (y * self.w + x) + c]
    }

    fn bilinear(&self, x: f64, y: f64, c: usize) -> f64 {
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let (x0, y0) = (x0 as isize, y0 as isize);
        let top = self.at(x0, y0, c) * (1.0 - fx) + self.at(x0 + 1, y0, c) * fx;
        let bot = self.at(x0, y0 + 1, c) * (1.0 - fx) + self.at(x0 + 1, y0 + 1, c) * fx;
        top * (1.0 - fy) + bot * fy
    }

    fn convolve(&self, kernel: &[f64], k: usize) -> Img {
        let r = (k / 2) as isize;
        let mut out = vec![0.0; self.px.len()];
        for y in 0..self.h {
            for x in 0..self.w {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        for kx in 0..k {
                            let wgt = kernel[ky * k + kx];
                            if wgt != 0.0 {
                                acc += wgt * self.at(x as isize + kx as isize - r, y as isize + ky as isize - r, c);
                            }
                        }
                    }
                    out[3 * (y * self.w + x) + c] = acc;
                }
            }
        }
        Img { w: self.w, h: self.h, px: out }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Magnitude from `U(0, max)` with a random sign.
fn signed<R: Rng + ?Sized>(rng: &mut R, max: f64) -> f64 {
    let mag = uniform(rng, 0.0, max);
    if rng.random::<bool>() {
        mag
    } else {
        -mag
    }
}

fn rotate(img: &Img, deg: f64) -> Img {
    let (s, c) = deg.to_radians().sin_cos();
    let (cx, cy) = ((img.w as f64 - 1.0) / 2.0, (img.h as f64 - 1.0) / 2.0);
    let mut px = vec![0.0; img.px.len()];
    for y in 0..img.h {
        for x in 0..img.w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let sx = c * dx + s * dy + cx;
            let sy = -s * dx + c * dy + cy;
            for ch in 0..3 {
                px[3 * (y * img.w + x) + ch] = img.bilinear(sx, sy, ch);
            }
        }
    }
    Img { w: img.w, h: img.h, px }
}

fn luma(p: &[f64]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn color_perturb<R: Rng + ?Sized>(img: &mut Img, max: f64, rng: &mut R) {
    let brightness = 1.0 + signed(rng, max);
    let contrast = 1.0 + signed(rng, max);
    let saturation = 1.0 + signed(rng, max);
    // Hue shift as a fraction of a half turn, applied as a rotation in YIQ chroma.
    let hue = signed(rng, max) * std::f64::consts::PI;
    let mean = img.px.chunks(3).map(luma).sum::<f64>() / (img.w * img.h) as f64;
    let (hs, hc) = hue.sin_cos();
    for p in img.px.chunks_mut(3) {
        for v in p.iter_mut() {
            *v *= brightness;
        }
        for v in p.iter_mut() {
            *v = (*v - mean) * contrast + mean;
        }
        let g = luma(p);
        for v in p.iter_mut() {
            *v = g + (*v - g) * saturation;
        }
        let y = luma(p);
        let i = 0.596 * p[0] - 0.274 * p[1] - 0.322 * p[2];
        let q = 0.211 * p[0] - 0.523 * p[1] + 0.312 * p[2];
        let (i, q) = (i * hc - q * hs, i * hs + q * hc);
        p[0] = y + 0.956 * i + 0.621 * q;
        p[1] = y - 0.272 * i - 0.647 * q;
        p[2] = y - 1.106 * i + 1.703 * q;
    }
}

fn planckian<R: Rng + ?Sized>(img: &mut Img, presets: &[u32], rng: &mut R) {
    let preset = presets[rng.random_range(0..presets.len())] as f64;
    let strength = if rng.random::<bool>() { preset / 100.0 } else { -preset / 100.0 };
    let gains = [1.0 + strength, 1.0, 1.0 - strength];
    for p in img.px.chunks_mut(3) {
        for (v, g) in p.iter_mut().zip(gains) {
            *v *= g;
        }
    }
}

fn iso_noise<R: Rng + ?Sized>(img: &mut Img, cfg: &IsoNoise, rng: &mut R) {
    let shift = uniform(rng, cfg.color_shift[0], cfg.color_shift[1]);
    let intensity = uniform(rng, cfg.intensity[0], cfg.intensity[1]);
    for p in img.px.chunks_mut(3) {
        let lum = deskbc_nn::params::standard_normal(rng) * intensity * 20.0;
        for v in p.iter_mut() {
            let chroma = deskbc_nn::params::standard_normal(rng) * shift * 255.0 * 0.25;
            *v += lum + chroma;
        }
    }
}

fn blur<R: Rng + ?Sized>(img: &Img, cfg: &RandomBlur, rng: &mut R) -> Img {
    let lo = cfg.kernel[0].div_ceil(2);
    let hi = cfg.kernel[1].saturating_sub(1) / 2;
    let half = if hi >= lo { rng.random_range(lo..=hi) } else { lo };
    let k = 2 * half + 1;
    let r = half as f64;
    let mut kernel = vec![0.0; k * k];
    if rng.random::<f64>() < cfg.gaussian_prob {
        let sigma = uniform(rng, cfg.gaussian_sigma[0], cfg.gaussian_sigma[1]);
        for y in 0..k {
            for x in 0..k {
                let (dx, dy) = (x as f64 - r, y as f64 - r);
                kernel[y * k + x] = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            }
        }
    } else {
        let angle = uniform(rng, 0.0, 360.0).to_radians();
        let direction = uniform(rng, -1.0, 1.0);
        let (s, c) = angle.sin_cos();
        for i in 0..k {
            let t = i as f64 - r;
            let x = (r + t * c).round() as usize;
            let y = (r + t * s).round() as usize;
            // `direction` biases weight toward one end of the streak.
            kernel[y.min(k - 1) * k + x.min(k - 1)] += 1.0 + direction * t / r.max(1.0);
        }
    }
    let sum: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|v| *v /= sum);
    img.convolve(&kernel, k)
}

fn sharpen(img: &Img, factor: f64) -> Img {
    // Blend between a smoothed copy (factor 0) and the original (factor 1);
    // factors above 1 extrapolate away from the smoothed copy.
    let smooth = [1.0, 1.0, 1.0, 1.0, 5.0, 1.0, 1.0, 1.0, 1.0].map(|v| v / 13.0);
    let blurred = img.convolve(&smooth, 3);
    let px = img.px.iter().zip(&blurred.px).map(|(o, b)| b + factor * (o - b)).collect();
    Img { w: img.w, h: img.h, px }
}

fn translate(img: &Img, shift: isize) -> Img {
    let mut px = vec![0.0; img.px.len()];
    for y in 0..img.h {
        for x in 0..img.w {
            for c in 0..3 {
                px[3 * (y * img.w + x) + c] = img.at(x as isize - shift, y as isize, c);
            }
        }
    }
    Img { w: img.w, h: img.h, px }
}

pub fn augment<R: Rng + ?Sized>(frame: &Frame, cfg: &AugmentConfig, rng: &mut R) -> Frame {
    let mut img = Img { w: frame.width, h: frame.height, px: frame.pixels.iter().map(|&v| v as f64).collect() };
    let mut touched = false;
    if rng.random::<f64>() < cfg.spatial_transform.p {
        let m = cfg.spatial_transform.max_rotation_deg;
        let deg = uniform(rng, -m, m);
        if deg != 0.0 {
            img = rotate(&img, deg);
            touched = true;
        }
    }
    if rng.random::<f64>() < cfg.color_perturbation.p {
        color_perturb(&mut img, cfg.color_perturbation.max_shift, rng);
        touched = true;
    }
    if rng.random::<f64>() < cfg.planckian_jitter.p {
        planckian(&mut img, &cfg.planckian_jitter.presets, rng);
        touched = true;
    }
    if rng.random::<f64>() < cfg.iso_noise.p {
        iso_noise(&mut img, &cfg.iso_noise, rng);
        touched = true;
    }
    if rng.random::<f64>() < cfg.random_blur.p {
        img = blur(&img, &cfg.random_blur, rng);
        touched = true;
    }
    if rng.random::<f64>() < cfg.sharpening.p {
        img = sharpen(&img, uniform(rng, cfg.sharpening.factor[0], cfg.sharpening.factor[1]));
        touched = true;
    }
    if rng.random::<f64>() < cfg.translation.p {
        let max = (cfg.translation.max_fraction * frame.width as f64).floor() as isize;
        if max > 0 {
            let shift = rng.random_range(0..=2 * max as i64) as isize - max;
            if shift != 0 {
                img = translate(&img, shift);
                touched = true;
            }
        }
    }
    if !touched {
        return frame.clone();
    }
    let pixels = img.px.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    Frame { width: frame.width, height: frame.height, pixels }
}
