use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::FewshotError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ClassifierKind {
    #[serde(rename = "LR")]
    Lr,
    #[serde(rename = "SVM")]
    Svm,
    #[serde(rename = "NN")]
    Nn,
    Cosine,
    Proto,
}

impl ClassifierKind {
    pub const ALL: [ClassifierKind; 5] = [ClassifierKind::Lr, ClassifierKind::Svm, ClassifierKind::Nn, ClassifierKind::Cosine, ClassifierKind::Proto];

    pub fn label(self) -> &'static str {
        match self {
            ClassifierKind::Lr => "LR",
            ClassifierKind::Svm => "SVM",
            ClassifierKind::Nn => "NN",
            ClassifierKind::Cosine => "Cosine",
            ClassifierKind::Proto => "Proto",
        }
    }
}

impl fmt::Display for ClassifierKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ClassifierKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL.into_iter().find(|k| k.label().eq_ignore_ascii_case(s)).ok_or_else(|| format!("unknown classifier `{s}`"))
    }
}

/// Settings of the iterative (LR, SVM) heads.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSettings {
    /// L2 penalty `reg/2 · ‖W‖²` (bias unpenalized).
    pub reg: f64,
    /// Stop once the largest gradient component falls below this.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self { reg: 1.0, tolerance: 1e-6, max_iterations: 1000 }
    }
}

/// A fitted head. Linear heads score `W x + b`; the others compare against
/// stored points or class means.
#[derive(Clone, Debug, PartialEq)]
pub enum Classifier {
    Linear { kind: ClassifierKind, weights: Vec<Vec<f64>>, bias: Vec<f64> },
    Nearest { points: Vec<Vec<f64>>, labels: Vec<usize> },
    Cosine { means: Vec<Vec<f64>> },
    Proto { prototypes: Vec<Vec<f64>> },
}

pub fn l2_normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the largest score; the lowest index wins ties.
fn argmax(scores: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, s) in scores.into_iter().enumerate() {
        if s > best.1 || (i == 0 && s.is_nan()) {
            best = (i, s);
        }
    }
    best.0
}

fn class_means(x: &[Vec<f64>], y: &[usize], classes: usize) -> Vec<Vec<f64>> {
    let d = x[0].len();
    let mut sums = vec![vec![0.0; d]; classes];
    let mut counts = vec![0usize; classes];
    for (v, &c) in x.iter().zip(y) {
        counts[c] += 1;
        for (s, a) in sums[c].iter_mut().zip(v) {
            *s += a;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        for a in s.iter_mut() {
            *a /= n as f64;
        }
    }
    sums
}

/// Largest eigenvalue of `X̃ X̃ᵀ` with `X̃ = [X, 1]`, by power iteration.
fn gram_spectral_norm(x: &[Vec<f64>]) -> f64 {
    let n = x.len();
    let g: Vec<Vec<f64>> = x.iter().map(|a| x.iter().map(|b| dot(a, b) + 1.0).collect()).collect();
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut lambda = 0.0;
    for _ in 0..200 {
        let w: Vec<f64> = g.iter().map(|row| dot(row, &v)).collect();
        let norm = w.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm;
        v = w.into_iter().map(|a| a / norm).collect();
    }
    lambda
}

/// Smooth objective over a flat parameter vector: returns `(f, ∇f)`.
type Objective<'a> = dyn Fn(&[f64]) -> (f64, Vec<f64>) + 'a;

/// Nesterov-accelerated gradient descent with step `1/L` and function-value restarts.
fn minimize(f: &Objective, x0: Vec<f64>, lipschitz: f64, s: &FitSettings) -> Vec<f64> {
    let step = 1.0 / lipschitz.max(1e-12);
    let mut x = x0;
    let (mut fx, mut gx) = f(&x);
    let mut y = x.clone();
    let mut t = 1.0f64;
    for _ in 0..s.max_iterations {
        if gx.iter().fold(0.0f64, |m, g| m.max(g.abs())) < s.tolerance {
            break;
        }
        let (_, gy) = f(&y);
        let next: Vec<f64> = y.iter().zip(&gy).map(|(a, g)| a - step * g).collect();
        let (fn_, gn) = f(&next);
        if fn_ > fx {
            // Momentum overshot: restart from a plain gradient step at x.
            t = 1.0;
            y = x.clone();
            let plain: Vec<f64> = x.iter().zip(&gx).map(|(a, g)| a - step * g).collect();
            let (fp, gp) = f(&plain);
            if fp <= fx {
                x = plain;
                fx = fp;
                gx = gp;
                y = x.clone();
            }
            continue;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let beta = (t - 1.0) / t_next;
        y = next.iter().zip(&x).map(|(n, o)| n + beta * (n - o)).collect();
        x = next;
        fx = fn_;
        gx = gn;
        t = t_next;
    }
    x
}

fn split(theta: &[f64], classes: usize, d: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let w = theta[..classes * d].chunks(d).map(<[f64]>::to_vec).collect();
    (w, theta[classes * d..].to_vec())
}

/// Multinomial logistic regression: `Σ CE + reg/2 ‖W‖²`.
pub fn lr_objective(x: &[Vec<f64>], y: &[usize], classes: usize, reg: f64, theta: &[f64]) -> (f64, Vec<f64>) {
    let d = x[0].len();
    let (w, b) = split(theta, classes, d);
    let mut grad = vec![0.0; theta.len()];
    let mut f = 0.5 * reg * theta[..classes * d].iter().map(|a| a * a).sum::<f64>();
    for (i, g) in grad[..classes * d].iter_mut().enumerate() {
        *g = reg * theta[i];
    }
    for (xi, &yi) in x.iter().zip(y) {
        let z: Vec<f64> = (0..classes).map(|c| dot(&w[c], xi) + b[c]).collect();
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        f += lse - z[yi];
        for c in 0..classes {
            let r = (z[c] - lse).exp() - if c == yi { 1.0 } else { 0.0 };
            for (j, &xv) in xi.iter().enumerate() {
                grad[c * d + j] += r * xv;
            }
            grad[classes * d + c] += r;
        }
    }
    (f, grad)
}

/// One-vs-rest squared hinge: `Σ_c Σ_i max(0, 1 − y_ic s_ic)² + reg/2 ‖W‖²`.
pub fn svm_objective(x: &[Vec<f64>], y: &[usize], classes: usize, reg: f64, theta: &[f64]) -> (f64, Vec<f64>) {
    let d = x[0].len();
    let (w, b) = split(theta, classes, d);
    let mut grad = vec![0.0; theta.len()];
    let mut f = 0.5 * reg * theta[..classes * d].iter().map(|a| a * a).sum::<f64>();
    for (i, g) in grad[..classes * d].iter_mut().enumerate() {
        *g = reg * theta[i];
    }
    for (xi, &yi) in x.iter().zip(y) {
        for c in 0..classes {
            let sign = if c == yi { 1.0 } else { -1.0 };
            let margin = 1.0 - sign * (dot(&w[c], xi) + b[c]);
            if margin > 0.0 {
                f += margin * margin;
                let r = -2.0 * sign * margin;
                for (j, &xv) in xi.iter().enumerate() {
                    grad[c * d + j] += r * xv;
                }
                grad[classes * d + c] += r;
            }
        }
    }
    (f, grad)
}

/// Fits a head on support embeddings with labels in `0..classes`.
pub fn fit_classifier(x: &[Vec<f64>], y: &[usize], classes: usize, kind: ClassifierKind, settings: &FitSettings) -> Result<Classifier, FewshotError> {
    if x.is_empty() || x.len() != y.len() {
        return Err(FewshotError::Protocol(format!("{} support embeddings for {} labels", x.len(), y.len())));
    }
    let d = x[0].len();
    if d == 0 || x.iter().any(|v| v.len() != d) {
        return Err(FewshotError::Protocol("support embeddings must share a positive dimension".into()));
    }
    if y.iter().any(|&c| c >= classes) || (0..classes).any(|c| !y.contains(&c)) {
        return Err(FewshotError::Protocol(format!("every class in 0..{classes} needs a support example")));
    }
    Ok(match kind {
        ClassifierKind::Lr | ClassifierKind::Svm => {
            let gram = gram_spectral_norm(x);
            let (lipschitz, obj): (f64, Box<Objective>) = if kind == ClassifierKind::Lr {
                (0.5 * gram + settings.reg, Box::new(|t: &[f64]| lr_objective(x, y, classes, settings.reg, t)))
            } else {
                (2.0 * gram + settings.reg, Box::new(|t: &[f64]| svm_objective(x, y, classes, settings.reg, t)))
            };
            let theta = minimize(&*obj, vec![0.0; classes * (d + 1)], lipschitz, settings);
            let (weights, bias) = split(&theta, classes, d);
            Classifier::Linear { kind, weights, bias }
        }
        ClassifierKind::Nn => Classifier::Nearest { points: x.iter().map(|v| l2_normalized(v)).collect(), labels: y.to_vec() },
        ClassifierKind::Cosine => {
            let normalized: Vec<Vec<f64>> = x.iter().map(|v| l2_normalized(v)).collect();
            Classifier::Cosine { means: class_means(&normalized, y, classes) }
        }
        ClassifierKind::Proto => Classifier::Proto { prototypes: class_means(x, y, classes) },
    })
}

impl Classifier {
    pub fn dim(&self) -> usize {
        match self {
            Classifier::Linear { weights, .. } => weights[0].len(),
            Classifier::Nearest { points, .. } => points[0].len(),
            Classifier::Cosine { means } => means[0].len(),
            Classifier::Proto { prototypes } => prototypes[0].len(),
        }
    }

    /// Per-class scores; larger is better.
    pub fn scores(&self, q: &[f64]) -> Vec<f64> {
        match self {
            Classifier::Linear { weights, bias, .. } => weights.iter().zip(bias).map(|(w, b)| dot(w, q) + b).collect(),
            Classifier::Nearest { points, labels } => {
                let q = l2_normalized(q);
                let classes = labels.iter().max().map_or(0, |m| m + 1);
                let mut best = vec![f64::NEG_INFINITY; classes];
                for (p, &l) in points.iter().zip(labels) {
                    best[l] = best[l].max(-sq_dist(p, &q));
                }
                best
            }
            Classifier::Cosine { means } => {
                let q = l2_normalized(q);
                means.iter().map(|m| {
                    let n = dot(m, m).sqrt();
                    if n > 0.0 { dot(m, &q) / n } else { 0.0 }
                }).collect()
            }
            Classifier::Proto { prototypes } => prototypes.iter().map(|p| -sq_dist(p, q)).collect(),
        }
    }

    pub fn predict(&self, queries: &[Vec<f64>]) -> Result<Vec<usize>, FewshotError> {
        let d = self.dim();
        if let Some(bad) = queries.iter().find(|q| q.len() != d) {
            return Err(FewshotError::Protocol(format!("query dim {} does not match {d}", bad.len())));
        }
        Ok(queries.iter().map(|q| argmax(self.scores(q))).collect())
    }
}
