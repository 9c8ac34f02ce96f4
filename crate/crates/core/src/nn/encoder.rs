//! Small residual convolutional encoder.
//!
//! Each stage is a sequence of residual blocks
//! `relu(norm(conv3x3(relu(norm(conv3x3(x))))) + shortcut(x))`, where the
//! shortcut is a normalized 1x1 convolution whenever the channel count
//! changes. Every stage but the last ends with a 2x2 max pool; the network
//! finishes with global average pooling and a linear map to `embed_dim`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::norm::{norm_layer, Mode, NormKind, NormSettings, NormState};
use super::params::ParamSet;
use crate::rng::rng_for;
use crate::tensor::{Graph, LeafKind, NormStats, Real, Tensor, TensorError, Var};

type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub channels: usize,
    pub blocks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub stages: Vec<StageConfig>,
    /// `(channels, height, width)` of the input images.
    pub input_size: [usize; 3],
    pub embed_dim: usize,
    pub norm_kind: NormKind,
    pub norm: NormSettings,
}

impl Default for EncoderConfig {
    /// Four single-block stages of 16/32/64/128 channels on 3x32x32 inputs.
    fn default() -> Self {
        Self {
            stages: [16, 32, 64, 128].into_iter().map(|channels| StageConfig { channels, blocks: 1 }).collect(),
            input_size: [3, 32, 32],
            embed_dim: 128,
            norm_kind: NormKind::BatchInstance,
            norm: NormSettings::default(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.stages.is_empty() {
            return Err("encoder needs at least one stage".into());
        }
        if self.stages.iter().any(|s| s.channels == 0 || s.blocks == 0) {
            return Err("stage channels and block counts must be positive".into());
        }
        if self.embed_dim == 0 {
            return Err("embed_dim must be positive".into());
        }
        if self.input_size.contains(&0) {
            return Err("input_size extents must be positive".into());
        }
        let shrink = 1usize << (self.stages.len() - 1);
        if self.input_size[1] / shrink < 1 || self.input_size[2] / shrink < 1 {
            return Err(format!("input {:?} too small for {} pooling stages", self.input_size, self.stages.len() - 1));
        }
        if self.norm_kind != NormKind::Batch && (self.input_size[1] / shrink) * (self.input_size[2] / shrink) < 2 {
            return Err("instance normalization needs at least 2 spatial positions in the last stage".into());
        }
        self.norm.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct ConvNorm {
    weight: usize,
    scale: usize,
    shift: usize,
    norm: usize,
    padding: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    conv1: ConvNorm,
    conv2: ConvNorm,
    shortcut: Option<ConvNorm>,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    stages: Vec<Vec<Block>>,
    fc_weight: usize,
    fc_bias: usize,
}

fn uniform<T: Real>(shape: &[usize], bound: f64, seed: u64, index: usize) -> Tensor<T> {
    let mut rng = rng_for(seed, &[0xE1C0, index as u64]);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::of_f64(rng.random_range(-bound..=bound))).collect()).expect("shape")
}

/// `sqrt(6 / fan_in)` for convolutions, `1 / sqrt(fan_in)` for linear maps.
pub fn conv_init_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

pub fn linear_init_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

struct Builder<T: Real> {
    params: ParamSet<T>,
    norms: Vec<NormState<T>>,
    settings: NormSettings,
    seed: u64,
}

impl<T: Real> Builder<T> {
    fn conv_norm(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> ConvNorm {
        let fan_in = cin * k * k;
        let idx = self.params.len();
        let weight = self.params.push(format!("{name}.weight"), uniform(&[cout, cin, k, k], conv_init_bound(fan_in), self.seed, idx));
        let scale = self.params.push(format!("{name}.norm.scale"), Tensor::full([cout], T::one()));
        let shift = self.params.push(format!("{name}.norm.shift"), Tensor::zeros([cout]));
        self.norms.push(NormState::new(cout, &self.settings));
        ConvNorm { weight, scale, shift, norm: self.norms.len() - 1, padding: k / 2 }
    }
}

/// Residual encoder with its parameters and normalization state.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T: Real = f32> {
    config: EncoderConfig,
    params: ParamSet<T>,
    norms: Vec<NormState<T>>,
    layout: Layout,
    frozen: bool,
}

impl<T: Real> Encoder<T> {
    /// Deterministic initialization: weights from a fan-in-scaled uniform
    /// distribution, affine at (1, 0), running statistics at (0, 1).
    pub fn init(config: &EncoderConfig, seed: u64) -> std::result::Result<Self, String> {
        config.validate()?;
        let mut b = Builder { params: ParamSet::new(), norms: Vec::new(), settings: config.norm, seed };
        let mut cin = config.input_size[0];
        let mut stages = Vec::new();
        for (si, stage) in config.stages.iter().enumerate() {
            let mut blocks = Vec::new();
            for bi in 0..stage.blocks {
                let prefix = format!("stage{si}.block{bi}");
                let conv1 = b.conv_norm(&format!("{prefix}.conv1"), cin, stage.channels, 3);
                let conv2 = b.conv_norm(&format!("{prefix}.conv2"), stage.channels, stage.channels, 3);
                let shortcut = (cin != stage.channels).then(|| b.conv_norm(&format!("{prefix}.shortcut"), cin, stage.channels, 1));
                blocks.push(Block { conv1, conv2, shortcut });
                cin = stage.channels;
            }
            stages.push(blocks);
        }
        let idx = b.params.len();
        let fc_weight = b.params.push("fc.weight", uniform(&[config.embed_dim, cin], linear_init_bound(cin), seed, idx));
        let fc_bias = b.params.push("fc.bias", Tensor::zeros([config.embed_dim]));
        Ok(Self { config: config.clone(), params: b.params, norms: b.norms, layout: Layout { stages, fc_weight, fc_bias }, frozen: false })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn norms(&self) -> &[NormState<T>] {
        &self.norms
    }

    pub fn norms_mut(&mut self) -> &mut [NormState<T>] {
        &mut self.norms
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Marks the encoder as a fixed feature extractor.
    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn cast<U: Real>(&self) -> Encoder<U> {
        Encoder {
            config: self.config.clone(),
            params: self.params.cast(),
            norms: self.norms.iter().map(NormState::cast).collect(),
            layout: self.layout.clone(),
            frozen: self.frozen,
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, kind: LeafKind) -> Vec<Var> {
        self.params.bind(g, kind)
    }

    fn conv_norm(&self, g: &mut Graph<T>, p: &[Var], x: Var, cn: &ConvNorm, mode: Mode, stats: &mut [Option<NormStats<T>>]) -> Result<Var> {
        let h = g.conv2d(x, p[cn.weight], 1, cn.padding)?;
        let (y, s) = norm_layer(g, self.config.norm_kind, h, p[cn.scale], p[cn.shift], &self.norms[cn.norm], mode)?;
        stats[cn.norm] = s;
        Ok(y)
    }

    /// Forward pass on `[B, C, H, W]` images giving `[B, embed_dim]`.
    ///
    /// Training-mode batch statistics are returned per normalization layer
    /// (see [`Encoder::commit_stats`]); nothing is mutated here.
    pub fn forward(&self, g: &mut Graph<T>, p: &[Var], images: Var, mode: Mode) -> Result<(Var, Vec<Option<NormStats<T>>>)> {
        let shape = g.shape(images);
        if shape.len() != 4 || shape[1..] != self.config.input_size {
            return Err(TensorError::ShapeMismatch {
                op: "encoder",
                detail: format!("expected [B, {:?}], got {shape:?}", self.config.input_size),
            });
        }
        if p.len() != self.params.len() {
            return Err(TensorError::ShapeMismatch { op: "encoder", detail: format!("{} bound params, expected {}", p.len(), self.params.len()) });
        }
        let mut stats = vec![None; self.norms.len()];
        let mut x = images;
        let last = self.layout.stages.len() - 1;
        for (si, blocks) in self.layout.stages.iter().enumerate() {
            for block in blocks {
                let h = self.conv_norm(g, p, x, &block.conv1, mode, &mut stats)?;
                let h = g.relu(h)?;
                let h = self.conv_norm(g, p, h, &block.conv2, mode, &mut stats)?;
                let skip = match &block.shortcut {
                    Some(cn) => self.conv_norm(g, p, x, cn, mode, &mut stats)?,
                    None => x,
                };
                let sum = g.add(h, skip)?;
                x = g.relu(sum)?;
            }
            if si < last {
                x = g.max_pool2d(x, 2, 2)?;
            }
        }
        let pooled = g.global_avg_pool(x)?;
        let v = g.linear(pooled, p[self.layout.fc_weight], Some(p[self.layout.fc_bias]))?;
        Ok((v, stats))
    }

    pub fn commit_stats(&mut self, stats: &[Option<NormStats<T>>]) {
        for (state, s) in self.norms.iter_mut().zip(stats) {
            if let Some(s) = s {
                state.commit(s);
            }
        }
    }

    /// Inference-mode embeddings of a `[B, C, H, W]` batch.
    pub fn infer(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, LeafKind::Constant);
        let x = g.constant(images.clone());
        let (v, _) = self.forward(&mut g, &p, x, Mode::Eval)?;
        Ok(g.value(v).clone())
    }

    /// SHA-256 over parameters and running statistics.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        self.params.hash_into(&mut h);
        for n in &self.norms {
            for v in n.running_mean.iter().chain(&n.running_var) {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Running statistics as named tensors (`<layer>.running_mean`, `<layer>.running_var`).
    pub fn buffers(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (i, n) in self.norms.iter().enumerate() {
            out.push((format!("norm{i}.running_mean"), Tensor::new([n.channels], n.running_mean.clone()).expect("channels > 0")));
            out.push((format!("norm{i}.running_var"), Tensor::new([n.channels], n.running_var.clone()).expect("channels > 0")));
        }
        out
    }

    pub fn set_buffers(&mut self, buffers: &[(String, Tensor<T>)]) -> std::result::Result<(), String> {
        for (i, n) in self.norms.iter_mut().enumerate() {
            for (suffix, dst) in [("running_mean", &mut n.running_mean), ("running_var", &mut n.running_var)] {
                let name = format!("norm{i}.{suffix}");
                let t = buffers.iter().find(|(nm, _)| *nm == name).map(|(_, t)| t).ok_or_else(|| format!("missing buffer {name}"))?;
                if t.numel() != dst.len() {
                    return Err(format!("buffer {name} has {} values, expected {}", t.numel(), dst.len()));
                }
                dst.copy_from_slice(t.data());
            }
        }
        Ok(())
    }
}
