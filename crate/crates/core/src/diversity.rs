//! Dataset diversity as the Shannon entropy of per-image statistics: each
//! image is reduced to one number in `[0, 255]`, quantized to 256 bins, and
//! the entropy (bits) of the resulting histogram is reported.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DiversityError {
    #[error("dataset `{0}` has no images")]
    Empty(String),
    #[error("expected an RGB image shaped [3, H, W], got {0:?}")]
    BadShape(Vec<usize>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MetricKind {
    #[serde(rename = "HSV_H")]
    HsvH,
    #[serde(rename = "HSV_S")]
    HsvS,
    #[serde(rename = "HSV_V")]
    HsvV,
    Median,
    Mean,
    #[serde(rename = "SD")]
    Sd,
}

impl MetricKind {
    pub const ALL: [MetricKind; 6] = [MetricKind::HsvH, MetricKind::HsvS, MetricKind::HsvV, MetricKind::Median, MetricKind::Mean, MetricKind::Sd];

    pub fn label(self) -> &'static str {
        match self {
            MetricKind::HsvH => "HSV_H",
            MetricKind::HsvS => "HSV_S",
            MetricKind::HsvV => "HSV_V",
            MetricKind::Median => "Median",
            MetricKind::Mean => "Mean",
            MetricKind::Sd => "SD",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for MetricKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL.into_iter().find(|m| m.label().eq_ignore_ascii_case(s)).ok_or_else(|| format!("unknown metric `{s}`"))
    }
}

/// HSV with all three channels in `[0, 1]` (hue in turns).
fn hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let d = max - r.min(g).min(b);
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    (h, if max == 0.0 { 0.0 } else { d / max }, max)
}

fn rgb_planes(image: &Tensor) -> Result<(&[f32], &[f32], &[f32]), DiversityError> {
    match *image.shape() {
        [3, h, w] => {
            let n = h * w;
            let d = image.data();
            Ok((&d[..n], &d[n..2 * n], &d[2 * n..]))
        }
        _ => Err(DiversityError::BadShape(image.shape().to_vec())),
    }
}

/// All six statistics of one image, in [`MetricKind::ALL`] order, on a 0–255 scale.
pub fn image_statistics(image: &Tensor) -> Result<[f64; 6], DiversityError> {
    let (r, g, b) = rgb_planes(image)?;
    let n = r.len() as f64;
    let (mut sh, mut ss, mut sv) = (0.0, 0.0, 0.0);
    for i in 0..r.len() {
        let (h, s, v) = hsv(r[i] as f64, g[i] as f64, b[i] as f64);
        sh += h;
        ss += s;
        sv += v;
    }
    let mut values: Vec<f64> = image.data().iter().map(|&v| v as f64 * 255.0).collect();
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    let sd = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m).sqrt();
    values.sort_by(f64::total_cmp);
    let k = values.len();
    let median = if k % 2 == 1 { values[k / 2] } else { 0.5 * (values[k / 2 - 1] + values[k / 2]) };
    Ok([sh / n * 255.0, ss / n * 255.0, sv / n * 255.0, median, mean, sd])
}

pub fn image_statistic(image: &Tensor, metric: MetricKind) -> Result<f64, DiversityError> {
    let all = image_statistics(image)?;
    Ok(all[MetricKind::ALL.iter().position(|&m| m == metric).expect("closed enumeration")])
}

/// Clamp to `[0, 255]`, then round half away from zero.
pub fn quantize(x: f64) -> u8 {
    if x.is_nan() {
        return 0;
    }
    x.clamp(0.0, 255.0).round() as u8
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Histogram256 {
    pub counts: [u64; 256],
    pub total: u64,
}

impl Default for Histogram256 {
    fn default() -> Self {
        Self { counts: [0; 256], total: 0 }
    }
}

impl Histogram256 {
    pub fn add(&mut self, bin: u8) {
        self.counts[bin as usize] += 1;
        self.total += 1;
    }

    pub fn merge(&mut self, other: &Histogram256) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.total += other.total;
    }

    /// `-Σ p log2 p` with `0 log 0 = 0`.
    pub fn entropy(&self) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        let t = self.total as f64;
        let h: f64 = self.counts.iter().filter(|&&c| c > 0).map(|&c| {
            let p = c as f64 / t;
            -p * p.log2()
        }).sum();
        h.max(0.0)
    }
}

pub fn dataset_entropy<'a>(images: impl IntoIterator<Item = &'a Tensor>, metric: MetricKind) -> Result<f64, DiversityError> {
    let mut hist = Histogram256::default();
    for img in images {
        hist.add(quantize(image_statistic(img, metric)?));
    }
    if hist.total == 0 {
        return Err(DiversityError::Empty(String::new()));
    }
    Ok(hist.entropy())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub dataset: String,
    pub image_count: usize,
    /// Entropy in bits per metric, in [`MetricKind::ALL`] order.
    pub entropies: Vec<(MetricKind, f64)>,
}

impl DiversityReport {
    pub fn entropy(&self, metric: MetricKind) -> f64 {
        self.entropies.iter().find(|(m, _)| *m == metric).map(|e| e.1).expect("all metrics present")
    }
}

/// Accumulates the six histograms image by image.
#[derive(Clone, Debug, Default)]
pub struct Analyzer {
    hists: [Histogram256; 6],
}

impl Analyzer {
    pub fn add(&mut self, image: &Tensor) -> Result<(), DiversityError> {
        for (h, v) in self.hists.iter_mut().zip(image_statistics(image)?) {
            h.add(quantize(v));
        }
        Ok(())
    }

    pub fn histogram(&self, metric: MetricKind) -> &Histogram256 {
        &self.hists[MetricKind::ALL.iter().position(|&m| m == metric).expect("closed enumeration")]
    }

    pub fn report(&self, dataset: &str) -> Result<DiversityReport, DiversityError> {
        let n = self.hists[0].total as usize;
        if n == 0 {
            return Err(DiversityError::Empty(dataset.to_string()));
        }
        Ok(DiversityReport { dataset: dataset.to_string(), image_count: n, entropies: MetricKind::ALL.iter().zip(&self.hists).map(|(&m, h)| (m, h.entropy())).collect() })
    }
}

pub fn analyze<'a>(dataset: &str, images: impl IntoIterator<Item = &'a Tensor>) -> Result<DiversityReport, DiversityError> {
    let mut a = Analyzer::default();
    for img in images {
        a.add(img)?;
    }
    a.report(dataset)
}

/// CSV `metric,H` for one dataset.
pub fn write_report_csv(report: &DiversityReport, mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "metric,H")?;
    for (m, h) in &report.entropies {
        writeln!(w, "{m},{h:.12}")?;
    }
    Ok(())
}

/// CSV `metric,H_a,H_b` comparing two datasets.
pub fn write_comparison_csv(a: &DiversityReport, b: &DiversityReport, mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "metric,H_a,H_b")?;
    for m in MetricKind::ALL {
        writeln!(w, "{m},{:.12},{:.12}", a.entropy(m), b.entropy(m))?;
    }
    Ok(())
}

pub fn compare_report<'a, 'b>(
    a: (&str, impl IntoIterator<Item = &'a Tensor>),
    b: (&str, impl IntoIterator<Item = &'b Tensor>),
) -> Result<(DiversityReport, DiversityReport, String), DiversityError> {
    let ra = analyze(a.0, a.1)?;
    let rb = analyze(b.0, b.1)?;
    let mut csv = Vec::new();
    write_comparison_csv(&ra, &rb, &mut csv).expect("writing to memory");
    Ok((ra, rb, String::from_utf8(csv).expect("ascii")))
}
