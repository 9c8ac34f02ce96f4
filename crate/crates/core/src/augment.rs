//! Two-view stochastic augmentation: random resized crop, horizontal flip,
//! color jitter, random grayscale and Gaussian blur, applied in that order.
//!
//! Every view draws its parameters from its own stream derived from the pair
//! seed, so the two views are independent and each is reproducible.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{rng_for, Rng as StreamRng};
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AugmentError {
    #[error("image {height}x{width} is smaller than the output size {out_h}x{out_w}")]
    TooSmall { height: usize, width: usize, out_h: usize, out_w: usize },
    #[error("expected an image shaped [1 or 3, H, W], got {0:?}")]
    BadShape(Vec<usize>),
    #[error("invalid augmentation policy: {0}")]
    Policy(String),
    #[error("blur sigma must be positive, got {0}")]
    Sigma(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationPolicy {
    /// Crop area as a fraction of the source area.
    pub crop_area_range: (f64, f64),
    /// Crop width / height, sampled log-uniformly.
    pub aspect_ratio_range: (f64, f64),
    pub flip_probability: f64,
    /// Brightness, contrast and saturation factors lie in `1 ± 0.8·s`, hue shifts in `±0.2·s` turns.
    pub jitter_strength: f64,
    pub jitter_probability: f64,
    pub grayscale_probability: f64,
    pub blur_probability: f64,
    pub blur_sigma_range: (f64, f64),
    /// `(height, width)` of both views.
    pub output_size: (usize, usize),
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            crop_area_range: (0.2, 1.0),
            aspect_ratio_range: (3.0 / 4.0, 4.0 / 3.0),
            flip_probability: 0.5,
            jitter_strength: 0.5,
            jitter_probability: 0.8,
            grayscale_probability: 0.2,
            blur_probability: 0.5,
            blur_sigma_range: (0.1, 2.0),
            output_size: (32, 32),
        }
    }
}

impl AugmentationPolicy {
    /// A policy whose views are the source resized to `output_size`.
    pub fn identity(output_size: (usize, usize)) -> Self {
        Self {
            crop_area_range: (1.0, 1.0),
            aspect_ratio_range: (1.0, 1.0),
            flip_probability: 0.0,
            jitter_strength: 0.0,
            jitter_probability: 0.0,
            grayscale_probability: 0.0,
            blur_probability: 0.0,
            output_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let bad = |m: &str| Err(AugmentError::Policy(m.to_string()));
        let (lo, hi) = self.crop_area_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad("crop_area_range must satisfy 0 < low <= high <= 1");
        }
        let (rlo, rhi) = self.aspect_ratio_range;
        if !(rlo > 0.0 && rlo <= rhi && rhi.is_finite()) {
            return bad("aspect_ratio_range must satisfy 0 < low <= high");
        }
        for (name, p) in [
            ("flip_probability", self.flip_probability),
            ("jitter_probability", self.jitter_probability),
            ("grayscale_probability", self.grayscale_probability),
            ("blur_probability", self.blur_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(AugmentError::Policy(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if !(self.jitter_strength >= 0.0 && self.jitter_strength.is_finite()) {
            return bad("jitter_strength must be non-negative");
        }
        let (slo, shi) = self.blur_sigma_range;
        if !(slo > 0.0 && slo <= shi && shi.is_finite()) {
            return bad("blur_sigma_range must satisfy 0 < low <= high");
        }
        if self.output_size.0 == 0 || self.output_size.1 == 0 {
            return bad("output_size must be positive");
        }
        Ok(())
    }
}

/// Multiplicative color factors and an additive hue shift (in turns).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColorFactors {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl ColorFactors {
    pub const IDENTITY: Self = Self { brightness: 1.0, contrast: 1.0, saturation: 1.0, hue: 0.0 };

    pub fn sample(strength: f64, rng: &mut impl Rng) -> Self {
        if strength == 0.0 {
            return Self::IDENTITY;
        }
        let s = 0.8 * strength;
        let factor = |rng: &mut _| uniform(rng, (1.0 - s).max(0.0), 1.0 + s);
        let brightness = factor(rng);
        let contrast = factor(rng);
        let saturation = factor(rng);
        let h = 0.2 * strength;
        Self { brightness, contrast, saturation, hue: uniform(rng, -h, h) }
    }
}

/// Crop window in source pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// All random decisions behind one view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewParams {
    pub crop: CropBox,
    pub flip: bool,
    pub color: Option<ColorFactors>,
    pub grayscale: bool,
    pub blur_sigma: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub x_m: Tensor,
    pub x_n: Tensor,
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn dims(image: &Tensor) -> Result<(usize, usize, usize), AugmentError> {
    match *image.shape() {
        [c, h, w] if c == 1 || c == 3 => Ok((c, h, w)),
        _ => Err(AugmentError::BadShape(image.shape().to_vec())),
    }
}

/// Crop box with area fraction and aspect ratio drawn from the policy; after
/// ten rejected draws the largest centered box within the ratio range is used.
pub fn sample_crop(height: usize, width: usize, policy: &AugmentationPolicy, rng: &mut impl Rng) -> CropBox {
    let area = (height * width) as f64;
    let (rlo, rhi) = policy.aspect_ratio_range;
    for _ in 0..10 {
        let target = area * uniform(rng, policy.crop_area_range.0, policy.crop_area_range.1);
        let ratio = uniform(rng, rlo.ln(), rhi.ln()).exp();
        let w = (target * ratio).sqrt().round() as usize;
        let h = (target / ratio).sqrt().round() as usize;
        if w > 0 && h > 0 && w <= width && h <= height {
            let top = rng.random_range(0..=height - h);
            let left = rng.random_range(0..=width - w);
            return CropBox { top, left, height: h, width: w };
        }
    }
    let in_ratio = width as f64 / height as f64;
    let (h, w) = if in_ratio < rlo {
        (((width as f64 / rlo).round() as usize).clamp(1, height), width)
    } else if in_ratio > rhi {
        (height, ((height as f64 * rhi).round() as usize).clamp(1, width))
    } else {
        (height, width)
    };
    CropBox { top: (height - h) / 2, left: (width - w) / 2, height: h, width: w }
}

/// Draws view parameters in pipeline order from `rng`.
pub fn sample_view(height: usize, width: usize, policy: &AugmentationPolicy, rng: &mut impl Rng) -> ViewParams {
    let crop = sample_crop(height, width, policy, rng);
    let flip = rng.random_bool(policy.flip_probability);
    let color = rng.random_bool(policy.jitter_probability).then(|| ColorFactors::sample(policy.jitter_strength, rng));
    let grayscale = rng.random_bool(policy.grayscale_probability);
    let blur_sigma = rng.random_bool(policy.blur_probability).then(|| uniform(rng, policy.blur_sigma_range.0, policy.blur_sigma_range.1));
    ViewParams { crop, flip, color, grayscale, blur_sigma }
}

/// Bilinear resize of a crop window with half-pixel centers and edge clamping.
pub fn crop_resize(image: &Tensor, crop: CropBox, out_h: usize, out_w: usize) -> Result<Tensor, AugmentError> {
    let (c, h, w) = dims(image)?;
    if crop.height == 0 || crop.width == 0 || crop.top + crop.height > h || crop.left + crop.width > w || out_h == 0 || out_w == 0 {
        return Err(AugmentError::Policy(format!("crop {crop:?} outside a {h}x{w} image")));
    }
    let src = image.data();
    let axis = |out: usize, len: usize, offset: usize| -> Vec<(usize, usize, f32)> {
        let scale = len as f64 / out as f64;
        (0..out)
            .map(|o| {
                let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
                let i0 = pos.floor() as usize;
                let i1 = (i0 + 1).min(len - 1);
                (offset + i0, offset + i1, (pos - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = axis(out_h, crop.height, crop.top);
    let xs = axis(out_w, crop.width, crop.left);
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Ok(Tensor::new([c, out_h, out_w], out).expect("positive extents"))
}

pub fn hflip(image: &Tensor) -> Tensor {
    let w = *image.shape().last().expect("rank 3");
    let mut out = image.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn clamp01(v: &mut [f32]) {
    for x in v {
        *x = x.clamp(0.0, 1.0);
    }
}

pub fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

pub fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = (h6.floor() as i32).rem_euclid(6);
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Brightness, contrast, saturation, then hue; clamped to `[0, 1]` after each.
pub fn apply_color(image: &Tensor, f: &ColorFactors) -> Tensor {
    let (c, h, w) = dims(image).expect("image shaped [C, H, W]");
    let n = h * w;
    let mut out = image.clone();
    let data = out.data_mut();
    if f.brightness != 1.0 {
        for x in data.iter_mut() {
            *x *= f.brightness as f32;
        }
        clamp01(data);
    }
    let gray = |d: &[f32], i: usize| if c == 3 { luma(d[i], d[n + i], d[2 * n + i]) } else { d[i] };
    if f.contrast != 1.0 {
        let mean = (0..n).map(|i| gray(data, i) as f64).sum::<f64>() / n as f64;
        let (k, m) = (f.contrast as f32, mean as f32);
        for x in data.iter_mut() {
            *x = k * *x + (1.0 - k) * m;
        }
        clamp01(data);
    }
    if c == 3 && f.saturation != 1.0 {
        let k = f.saturation as f32;
        for i in 0..n {
            let g = gray(data, i);
            for ch in 0..3 {
                data[ch * n + i] = (k * data[ch * n + i] + (1.0 - k) * g).clamp(0.0, 1.0);
            }
        }
    }
    if c == 3 && f.hue != 0.0 {
        for i in 0..n {
            let (hh, s, v) = rgb_to_hsv(data[i], data[n + i], data[2 * n + i]);
            let (r, g, b) = hsv_to_rgb(hh + f.hue as f32, s, v);
            data[i] = r.clamp(0.0, 1.0);
            data[n + i] = g.clamp(0.0, 1.0);
            data[2 * n + i] = b.clamp(0.0, 1.0);
        }
    }
    out
}

/// Random color jitter with factors drawn from `strength`-scaled ranges.
pub fn color_distortion(image: &Tensor, strength: f64, rng: &mut impl Rng) -> Tensor {
    apply_color(image, &ColorFactors::sample(strength.max(0.0), rng))
}

pub fn grayscale(image: &Tensor) -> Tensor {
    let (c, h, w) = dims(image).expect("image shaped [C, H, W]");
    if c == 1 {
        return image.clone();
    }
    let n = h * w;
    let d = image.data();
    let g: Vec<f32> = (0..n).map(|i| luma(d[i], d[n + i], d[2 * n + i]).clamp(0.0, 1.0)).collect();
    Tensor::new([3, h, w], [g.as_slice(), &g, &g].concat()).expect("shape")
}

/// Normalized 1-D Gaussian weights on `-r..=r` with `r = ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / z).collect()
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`), which
/// keeps every pixel's total outgoing weight at 1 and hence the mean exact.
fn reflect(i: i64, n: usize) -> usize {
    let period = 2 * n as i64;
    let m = i.rem_euclid(period);
    (if m < n as i64 { m } else { period - 1 - m }) as usize
}

/// Separable Gaussian blur with reflect padding.
pub fn gaussian_blur(image: &Tensor, sigma: f64) -> Result<Tensor, AugmentError> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(AugmentError::Sigma(sigma));
    }
    let (c, h, w) = dims(image)?;
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let mut tmp = vec![0.0f64; h * w];
    let mut out = Vec::with_capacity(c * h * w);
    for plane in image.data().chunks(h * w) {
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = k.iter().enumerate().map(|(t, &kv)| kv * plane[y * w + reflect(x as i64 + t as i64 - r, w)] as f64).sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                let v: f64 = k.iter().enumerate().map(|(t, &kv)| kv * tmp[reflect(y as i64 + t as i64 - r, h) * w + x]).sum();
                out.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Ok(Tensor::new([c, h, w], out).expect("shape"))
}

/// Applies one view's parameters to the source image.
pub fn apply_view(image: &Tensor, params: &ViewParams, policy: &AugmentationPolicy) -> Result<Tensor, AugmentError> {
    let (oh, ow) = policy.output_size;
    let mut x = crop_resize(image, params.crop, oh, ow)?;
    if params.flip {
        x = hflip(&x);
    }
    if let Some(f) = &params.color {
        x = apply_color(&x, f);
    }
    if params.grayscale {
        x = grayscale(&x);
    }
    if let Some(sigma) = params.blur_sigma {
        x = gaussian_blur(&x, sigma)?;
    }
    clamp01(x.data_mut());
    Ok(x)
}

fn view_stream(seed: u64, view: u64) -> StreamRng {
    rng_for(seed, &[0xA06, view])
}

/// One augmented view drawn from stream `view` of `seed`.
pub fn augment_view(image: &Tensor, policy: &AugmentationPolicy, seed: u64, view: u64) -> Result<Tensor, AugmentError> {
    policy.validate()?;
    let (_, h, w) = dims(image)?;
    let (oh, ow) = policy.output_size;
    if h < oh || w < ow {
        return Err(AugmentError::TooSmall { height: h, width: w, out_h: oh, out_w: ow });
    }
    let params = sample_view(h, w, policy, &mut view_stream(seed, view));
    apply_view(image, &params, policy)
}

/// Parameters that [`augment_pair`] would draw for the given view.
pub fn view_params(height: usize, width: usize, policy: &AugmentationPolicy, seed: u64, view: u64) -> ViewParams {
    sample_view(height, width, policy, &mut view_stream(seed, view))
}

pub fn augment_pair(image: &Tensor, policy: &AugmentationPolicy, seed: u64) -> Result<ViewPair, AugmentError> {
    Ok(ViewPair { x_m: augment_view(image, policy, seed, 0)?, x_n: augment_view(image, policy, seed, 1)? })
}
