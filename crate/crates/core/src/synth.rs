//! Procedural 10-class shape corpus for desk-scale end-to-end runs.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use image::ImageEncoder;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::hsv_to_rgb;
use crate::fewshot::{LabeledDataset, LabeledItem};
use crate::rng::rng_for;
use crate::tensor::Tensor;

pub const SHAPE_CLASSES: [&str; 10] = ["circle", "square", "triangle", "cross", "ring", "corner", "stripes", "star", "crescent", "pair"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeStyle {
    /// Colored, textured foreground on a colored, textured background.
    ColoredTexture,
    /// White shape on black.
    Binarized,
}

impl std::str::FromStr for ShapeStyle {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "colored-texture" => Ok(ShapeStyle::ColoredTexture),
            "binarized" => Ok(ShapeStyle::Binarized),
            other => Err(format!("unknown style `{other}` (expected colored-texture or binarized)")),
        }
    }
}

fn inside(class: usize, x: f64, y: f64) -> bool {
    let r = x.hypot(y);
    match class {
        0 => r < 0.9,
        1 => x.abs().max(y.abs()) < 0.75,
        2 => y > -0.6 && y < 0.85 && x.abs() < (0.85 - y) * 0.62,
        3 => (x.abs() < 0.28 && y.abs() < 0.9) || (y.abs() < 0.28 && x.abs() < 0.9),
        4 => r > 0.5 && r < 0.9,
        5 => (x > -0.8 && x < -0.25 && y.abs() < 0.8) || (y > 0.25 && y < 0.8 && x.abs() < 0.8),
        6 => x.abs() < 0.85 && y.abs() < 0.85 && ((y + 0.85) / 0.34).floor() as i64 % 2 == 0,
        7 => r < 0.5 + 0.4 * (5.0 * y.atan2(x)).cos(),
        8 => r < 0.9 && (x - 0.45).hypot(y) > 0.7,
        _ => (x - 0.5).hypot(y) < 0.38 || (x + 0.5).hypot(y) < 0.38,
    }
}

const PALETTE: u32 = 6;

struct Texture {
    color: [f64; 3],
    freq: f64,
    angle: f64,
    phase: f64,
    amp: f64,
}

impl Texture {
    /// Hue from a six-color palette; saturation and value from the given ranges.
    fn sample(rng: &mut impl Rng, sat: (f64, f64), val: (f64, f64)) -> Self {
        let h = rng.random_range(0..PALETTE) as f32 / PALETTE as f32;
        let (s, v) = (rng.random_range(sat.0..sat.1) as f32, rng.random_range(val.0..val.1) as f32);
        Self {
            color: {
                let (r, g, b) = hsv_to_rgb(h, s, v);
                [f64::from(r), f64::from(g), f64::from(b)]
            },
            freq: rng.random_range(2.0..8.0),
            angle: rng.random_range(0.0..PI),
            phase: rng.random_range(0.0..2.0 * PI),
            amp: rng.random_range(0.03..0.1),
        }
    }

    fn at(&self, x: f64, y: f64) -> [f64; 3] {
        let t = self.amp * (self.freq * (x * self.angle.cos() + y * self.angle.sin()) * PI + self.phase).sin();
        self.color.map(|c| (c + t).clamp(0.0, 1.0))
    }
}

/// One `[3, size, size]` image of shape `class` with random pose and colors.
pub fn render_shape(class: usize, style: ShapeStyle, size: usize, seed: u64) -> Tensor {
    let mut rng = rng_for(seed, &[0x5A4E, class as u64]);
    let theta = rng.random_range(0.0..2.0 * PI);
    let scale = rng.random_range(0.55..0.85);
    let (dx, dy) = (rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15));
    let (fg, bg) = match style {
        ShapeStyle::ColoredTexture => {
            // Bright saturated shape on a darker, duller background.
            let fg = Texture::sample(&mut rng, (0.7, 0.9), (0.75, 0.95));
            let bg = Texture::sample(&mut rng, (0.3, 0.5), (0.2, 0.4));
            (fg, bg)
        }
        ShapeStyle::Binarized => (
            Texture { color: [1.0; 3], freq: 0.0, angle: 0.0, phase: 0.0, amp: 0.0 },
            Texture { color: [0.0; 3], freq: 0.0, angle: 0.0, phase: 0.0, amp: 0.0 },
        ),
    };
    let (c, s) = (theta.cos(), theta.sin());
    let n = size * size;
    let mut data = vec![0.0f32; 3 * n];
    const SS: usize = 2;
    for row in 0..size {
        for col in 0..size {
            let mut acc = [0.0; 3];
            for sy in 0..SS {
                for sx in 0..SS {
                    let u = 2.0 * (col as f64 + (sx as f64 + 0.5) / SS as f64) / size as f64 - 1.0;
                    let v = 2.0 * (row as f64 + (sy as f64 + 0.5) / SS as f64) / size as f64 - 1.0;
                    let (px, py) = ((u - dx) / scale, (v - dy) / scale);
                    let (lx, ly) = (c * px + s * py, -s * px + c * py);
                    let rgb = if inside(class, lx, ly) { fg.at(lx, ly) } else { bg.at(u, v) };
                    for k in 0..3 {
                        acc[k] += rgb[k];
                    }
                }
            }
            for k in 0..3 {
                data[k * n + row * size + col] = (acc[k] / (SS * SS) as f64) as f32;
            }
        }
    }
    Tensor::new([3, size, size], data).expect("size > 0")
}

/// `per_class` images for each of the ten classes, ids `<class>/<index>.png`.
pub fn generate(style: ShapeStyle, per_class: usize, size: usize, seed: u64) -> LabeledDataset {
    let mut items = Vec::with_capacity(per_class * SHAPE_CLASSES.len());
    for (class, name) in SHAPE_CLASSES.iter().enumerate() {
        for i in 0..per_class {
            let image = render_shape(class, style, size, rng_for(seed, &[i as u64]).random());
            items.push(LabeledItem { id: format!("{name}/{i:05}.png"), class, image });
        }
    }
    LabeledDataset { items, class_names: SHAPE_CLASSES.iter().map(|s| s.to_string()).collect() }
}

/// 8-bit RGB PNG of a `[3, H, W]` tensor in `[0, 1]`.
pub fn encode_png(image: &Tensor) -> Vec<u8> {
    let s = image.shape();
    let (h, w) = (s[1], s[2]);
    let d = image.data();
    let mut raw = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            raw.push((d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(&raw, w as u32, h as u32, image::ExtendedColorType::Rgb8)
        .expect("in-memory PNG encoding");
    out
}

/// Writes `root/<class>/<index>.png` for every item.
pub fn write_dataset(dataset: &LabeledDataset, root: &Path) -> std::io::Result<()> {
    for item in &dataset.items {
        let path = root.join(&item.id);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, encode_png(&item.image))?;
    }
    Ok(())
}
