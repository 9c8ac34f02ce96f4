//! Batch, instance and batch-instance normalization.
//!
//! The mixed layer computes `scale * (γ·BN(x) + (1 − γ)·IN(x)) + shift`: both
//! branches are normalized without affine, mixed, then one shared per-channel
//! affine is applied. At γ = 1 and γ = 0 the unused branch is skipped so the
//! endpoints reproduce the single-branch layers bit for bit.

use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, NormStats, Real, TensorError, Var};

type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormKind {
    #[serde(rename = "BN")]
    Batch,
    #[serde(rename = "IN")]
    Instance,
    #[serde(rename = "BIN")]
    BatchInstance,
}

impl NormKind {
    pub fn label(self) -> &'static str {
        match self {
            NormKind::Batch => "BN",
            NormKind::Instance => "IN",
            NormKind::BatchInstance => "BIN",
        }
    }
}

impl std::str::FromStr for NormKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_uppercase().as_str() {
            "BN" => Ok(NormKind::Batch),
            "IN" => Ok(NormKind::Instance),
            "BIN" => Ok(NormKind::BatchInstance),
            other => Err(format!("unknown norm kind {other:?} (expected BN, IN or BIN)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    /// Uses running statistics and never updates them.
    Eval,
}

/// Hyperparameters shared by every normalization layer of a network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormSettings {
    /// Balance factor between the batch and instance branches.
    pub gamma: f64,
    pub eps: f64,
    pub running_momentum: f64,
}

impl Default for NormSettings {
    fn default() -> Self {
        Self { gamma: 0.5, eps: 1e-5, running_momentum: 0.1 }
    }
}

impl NormSettings {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        if !(self.eps >= 0.0) {
            return Err(format!("eps must be non-negative, got {}", self.eps));
        }
        if !(self.running_momentum > 0.0 && self.running_momentum < 1.0) {
            return Err(format!("running_momentum must lie in (0, 1), got {}", self.running_momentum));
        }
        Ok(())
    }
}

/// Non-trainable state of one normalization layer. The affine scale and
/// shift are trainable and live in the owning network's parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct NormState<T: Real = f32> {
    pub channels: usize,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub running_momentum: f64,
    pub eps: f64,
    pub balance_gamma: f64,
}

impl<T: Real> NormState<T> {
    pub fn new(channels: usize, settings: &NormSettings) -> Self {
        Self {
            channels,
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            running_momentum: settings.running_momentum,
            eps: settings.eps,
            balance_gamma: settings.gamma,
        }
    }

    /// `r <- (1 - m) r + m * batch_stat` for mean and variance.
    pub fn commit(&mut self, stats: &NormStats<T>) {
        let m = T::of_f64(self.running_momentum);
        let keep = T::one() - m;
        for (r, &s) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * s;
        }
        for (r, &s) in self.running_var.iter_mut().zip(&stats.var) {
            *r = (keep * *r + m * s).max(T::zero());
        }
    }

    pub fn cast<U: Real>(&self) -> NormState<U> {
        NormState {
            channels: self.channels,
            running_mean: self.running_mean.iter().map(|v| U::of_f64(v.as_f64())).collect(),
            running_var: self.running_var.iter().map(|v| U::of_f64(v.as_f64())).collect(),
            running_momentum: self.running_momentum,
            eps: self.eps,
            balance_gamma: self.balance_gamma,
        }
    }

    fn check_channels(&self, g: &Graph<T>, x: Var) -> Result<()> {
        match g.shape(x).get(1) {
            Some(&c) if c == self.channels => Ok(()),
            _ => Err(TensorError::ShapeMismatch {
                op: "norm",
                detail: format!("layer has {} channels, input {:?}", self.channels, g.shape(x)),
            }),
        }
    }
}

/// Batch normalization without affine. In training mode also returns the
/// batch statistics to be committed to the running estimates.
pub fn batch_norm<T: Real>(g: &mut Graph<T>, x: Var, state: &NormState<T>, mode: Mode) -> Result<(Var, Option<NormStats<T>>)> {
    state.check_channels(g, x)?;
    let eps = T::of_f64(state.eps);
    match mode {
        Mode::Train => {
            let (y, stats) = g.batch_norm_train(x, eps)?;
            Ok((y, Some(stats)))
        }
        Mode::Eval => Ok((g.batch_norm_eval(x, &state.running_mean, &state.running_var, eps)?, None)),
    }
}

/// Instance normalization without affine; no running statistics.
pub fn instance_norm<T: Real>(g: &mut Graph<T>, x: Var, eps: f64) -> Result<Var> {
    g.instance_norm(x, T::of_f64(eps))
}

/// Batch-instance normalization followed by the shared affine.
pub fn bin<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    scale: Var,
    shift: Var,
    state: &NormState<T>,
    mode: Mode,
) -> Result<(Var, Option<NormStats<T>>)> {
    state.check_channels(g, x)?;
    let gamma = state.balance_gamma;
    let (mixed, stats) = if gamma == 1.0 {
        batch_norm(g, x, state, mode)?
    } else if gamma == 0.0 {
        (instance_norm(g, x, state.eps)?, None)
    } else {
        let (b, stats) = batch_norm(g, x, state, mode)?;
        let i = instance_norm(g, x, state.eps)?;
        let b = g.scale(b, T::of_f64(gamma))?;
        let i = g.scale(i, T::of_f64(1.0 - gamma))?;
        (g.add(b, i)?, stats)
    };
    Ok((g.channel_affine(mixed, scale, shift)?, stats))
}

/// Normalization of the requested kind: BN and IN are the γ = 1 and γ = 0
/// endpoints of the mixed layer.
pub fn norm_layer<T: Real>(
    g: &mut Graph<T>,
    kind: NormKind,
    x: Var,
    scale: Var,
    shift: Var,
    state: &NormState<T>,
    mode: Mode,
) -> Result<(Var, Option<NormStats<T>>)> {
    let mut effective;
    let state = match kind {
        NormKind::BatchInstance => state,
        NormKind::Batch | NormKind::Instance => {
            effective = state.clone();
            effective.balance_gamma = if kind == NormKind::Batch { 1.0 } else { 0.0 };
            &effective
        }
    };
    bin(g, x, scale, shift, state, mode)
}
