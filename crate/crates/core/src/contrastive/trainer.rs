use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use super::loss::info_nce_batch;
use super::momentum::momentum_update;
use super::queue::EmbeddingQueue;
use super::sgd::Sgd;
use crate::augment::{augment_pair, AugmentError, AugmentationPolicy};
use crate::data::Checkpoint;
use crate::nn::{Encoder, EncoderConfig, Head, HeadConfig, Mode, ParamSet};
use crate::rng::{derive_seed, rng_for};
use crate::tensor::{Graph, LeafKind, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("empty data: {0}")]
    Data(String),
    #[error("numeric fault at step {step}: {detail}")]
    Numeric { step: u64, detail: String },
    #[error("augmentation failed at step {step}: {source}")]
    Augment { step: u64, source: AugmentError },
    #[error("checkpoint persistence failed at step {step}: {detail}")]
    Persist { step: u64, detail: String },
    #[error("incompatible checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// InfoNCE temperature τ.
    pub temperature: f64,
    /// Target-network momentum η.
    pub momentum: f64,
    pub learning_rate: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub queue_capacity: usize,
    pub total_steps: u64,
    pub lr_schedule: LrSchedule,
    /// Leave the positive out of the InfoNCE denominator.
    pub exclusive_denominator: bool,
    /// Steps between periodic checkpoints; 0 keeps only the final one.
    pub checkpoint_every: u64,
    /// Set from the run-level seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            momentum: 0.99,
            learning_rate: 0.03,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 64,
            queue_capacity: 4096,
            total_steps: 1000,
            lr_schedule: LrSchedule::Constant,
            exclusive_denominator: false,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(format!("momentum must lie in [0, 1], got {}", self.momentum));
        }
        for (name, v) in [("learning_rate", self.learning_rate), ("sgd_momentum", self.sgd_momentum), ("weight_decay", self.weight_decay)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("{name} must be a non-negative number, got {v}"));
            }
        }
        if self.batch_size == 0 || self.queue_capacity == 0 {
            return Err("batch_size and queue_capacity must be positive".into());
        }
        if self.batch_size > self.queue_capacity {
            return Err(format!("batch_size {} exceeds queue_capacity {}", self.batch_size, self.queue_capacity));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let t = step as f64 / self.total_steps.max(1) as f64;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
            }
        }
    }
}

/// Online and target networks. The target is written only by the momentum update.
#[derive(Clone, Debug, PartialEq)]
pub struct DualEncoderState {
    pub online_encoder: Encoder,
    pub online_head: Head,
    pub target_encoder: Encoder,
    pub target_head: Head,
    pub step_count: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f32,
    pub lr: f64,
    pub queue_fill: usize,
}

/// Pool indices used by `step`: consecutive slices of per-epoch permutations,
/// so any step can be recomputed from `(seed, step)` alone.
pub fn batch_indices(pool_len: usize, batch_size: usize, step: u64, seed: u64) -> Vec<usize> {
    let start = step as usize * batch_size;
    let mut out = Vec::with_capacity(batch_size);
    let mut cached: Option<(usize, Vec<usize>)> = None;
    for t in start..start + batch_size {
        let epoch = t / pool_len;
        if cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut perm: Vec<usize> = (0..pool_len).collect();
            perm.shuffle(&mut rng_for(seed, &[0xE90C, epoch as u64]));
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().expect("just set").1[t % pool_len]);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub config: TrainConfig,
    pub policy: AugmentationPolicy,
    state: DualEncoderState,
    queue: EmbeddingQueue,
    sgd_encoder: Sgd,
    sgd_head: Sgd,
}

fn numeric(step: u64) -> impl Fn(TensorError) -> TrainError {
    move |e| TrainError::Numeric { step, detail: e.to_string() }
}

impl Trainer {
    /// Fresh online networks; the target starts as an exact copy.
    pub fn new(encoder: &EncoderConfig, head: HeadConfig, config: TrainConfig, policy: AugmentationPolicy) -> Result<Self, TrainError> {
        config.validate().map_err(TrainError::Config)?;
        policy.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        if policy.output_size != (encoder.input_size[1], encoder.input_size[2]) {
            return Err(TrainError::Config(format!(
                "augmentation output {:?} does not match encoder input {:?}",
                policy.output_size, encoder.input_size
            )));
        }
        let online_encoder = Encoder::init(encoder, derive_seed(config.seed, &[0xE4C]))
            .map_err(TrainError::Config)?;
        let online_head = Head::init(head, encoder.embed_dim, derive_seed(config.seed, &[0x4EAD])).map_err(TrainError::Config)?;
        let queue = EmbeddingQueue::new(config.queue_capacity, head.out_dim).map_err(|e| TrainError::Config(e.to_string()))?;
        let sgd_encoder = Sgd::new(config.sgd_momentum, config.weight_decay, online_encoder.params());
        let sgd_head = Sgd::new(config.sgd_momentum, config.weight_decay, online_head.params());
        let state = DualEncoderState {
            target_encoder: online_encoder.clone(),
            target_head: online_head.clone(),
            online_encoder,
            online_head,
            step_count: 0,
        };
        Ok(Self { config, policy, state, queue, sgd_encoder, sgd_head })
    }

    pub fn state(&self) -> &DualEncoderState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut DualEncoderState {
        &mut self.state
    }

    pub fn queue(&self) -> &EmbeddingQueue {
        &self.queue
    }

    pub fn queue_mut(&mut self) -> &mut EmbeddingQueue {
        &mut self.queue
    }

    pub fn step_count(&self) -> u64 {
        self.state.step_count
    }

    /// Seed of the augmentation stream for pool image `position` of `step`.
    pub fn view_seed(&self, step: u64, position: usize) -> u64 {
        derive_seed(self.config.seed, &[0xA06, step, position as u64])
    }

    /// One optimization step on `images`. On error no state is modified.
    pub fn train_step(&mut self, images: &[&Tensor]) -> Result<StepRecord, TrainError> {
        let step = self.state.step_count;
        let b = images.len();
        if b == 0 {
            return Err(TrainError::Data("empty batch".into()));
        }
        if b > self.queue.capacity() {
            return Err(TrainError::Config(format!("batch of {b} exceeds queue capacity {}", self.queue.capacity())));
        }
        let (mut xm, mut xn) = (Vec::with_capacity(b), Vec::with_capacity(b));
        for (i, img) in images.iter().enumerate() {
            let pair = augment_pair(img, &self.policy, self.view_seed(step, i)).map_err(|source| TrainError::Augment { step, source })?;
            xm.push(pair.x_m);
            xn.push(pair.x_n);
        }
        let num = numeric(step);
        let xm = Tensor::stack(&xm).map_err(&num)?;
        let xn = Tensor::stack(&xn).map_err(&num)?;

        let mut next = self.clone();
        let st = &mut next.state;

        // Target path: constants only, so nothing flows back into it.
        let mut gt = Graph::new();
        let pte = st.target_encoder.bind(&mut gt, LeafKind::Constant);
        let pth = st.target_head.bind(&mut gt, LeafKind::Constant);
        let x = gt.constant(xm);
        let (v, target_stats) = st.target_encoder.forward(&mut gt, &pte, x, Mode::Train).map_err(&num)?;
        let e1 = st.target_head.forward(&mut gt, &pth, v).map_err(&num)?;
        let e1 = gt.value(e1).clone();
        drop(gt);
        next.queue.enqueue_rows(&e1).map_err(&num)?;

        let d = next.queue.dim();
        let k = next.queue.len();
        let keys = Tensor::new([k, d], next.queue.to_rows()).map_err(&num)?;
        let targets: Vec<usize> = (k - b..k).collect();

        let mut go = Graph::new();
        let poe = st.online_encoder.bind(&mut go, LeafKind::Trainable);
        let poh = st.online_head.bind(&mut go, LeafKind::Trainable);
        let x = go.constant(xn);
        let (v, online_stats) = st.online_encoder.forward(&mut go, &poe, x, Mode::Train).map_err(&num)?;
        let e2 = st.online_head.forward(&mut go, &poh, v).map_err(&num)?;
        let tau = self.config.temperature as f32;
        let loss = info_nce_batch(&mut go, e2, &keys, &targets, tau, self.config.exclusive_denominator).map_err(&num)?;
        let loss_value = go.value(loss).item();
        if !loss_value.is_finite() {
            return Err(TrainError::Numeric { step, detail: format!("loss is {loss_value}") });
        }
        let mut grads = go.backward(loss).map_err(&num)?;
        let mut take = |vars: &[crate::tensor::Var]| -> Result<Vec<Tensor>, TrainError> {
            vars.iter()
                .map(|&v| {
                    let g = grads.take(v).expect("trainable leaf");
                    if g.is_finite() {
                        Ok(g)
                    } else {
                        Err(TrainError::Numeric { step, detail: "non-finite gradient".into() })
                    }
                })
                .collect()
        };
        let ge = take(&poe)?;
        let gh = take(&poh)?;
        drop(go);

        let lr = self.config.lr_at(step);
        next.sgd_encoder.step(st.online_encoder.params_mut(), &ge, lr).map_err(&num)?;
        next.sgd_head.step(st.online_head.params_mut(), &gh, lr).map_err(&num)?;
        st.online_encoder.commit_stats(&online_stats);
        st.target_encoder.commit_stats(&target_stats);
        let eta = self.config.momentum;
        momentum_update(st.target_encoder.params_mut(), st.online_encoder.params(), eta).map_err(&num)?;
        momentum_update(st.target_head.params_mut(), st.online_head.params(), eta).map_err(&num)?;
        let finite = |p: &ParamSet| p.iter().all(|(_, t)| t.is_finite());
        if !(finite(st.online_encoder.params()) && finite(st.online_head.params())) {
            return Err(TrainError::Numeric { step, detail: "parameters became non-finite".into() });
        }
        st.step_count += 1;
        let record = StepRecord { step, loss: loss_value, lr, queue_fill: next.queue.len() };
        *self = next;
        Ok(record)
    }

    /// Trains until `config.total_steps`, calling `sink` after every step.
    pub fn run(
        &mut self,
        pool: &[Tensor],
        mut sink: impl FnMut(&Trainer, &StepRecord) -> Result<(), String>,
    ) -> Result<Vec<StepRecord>, TrainError> {
        if pool.is_empty() {
            return Err(TrainError::Data("pool is empty".into()));
        }
        let mut records = Vec::new();
        while self.state.step_count < self.config.total_steps {
            let idx = batch_indices(pool.len(), self.config.batch_size, self.state.step_count, self.config.seed);
            let batch: Vec<&Tensor> = idx.iter().map(|&i| &pool[i]).collect();
            let r = self.train_step(&batch)?;
            sink(self, &r).map_err(|detail| TrainError::Persist { step: r.step, detail })?;
            records.push(r);
        }
        Ok(records)
    }

    /// Online encoder marked frozen; target and heads are dropped.
    pub fn into_frozen_encoder(self) -> Encoder {
        self.state.online_encoder.freeze()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let s = &self.state;
        let mut tensors = Vec::new();
        let mut put = |prefix: &str, set: &ParamSet| {
            for (n, t) in set.iter() {
                tensors.push((format!("{prefix}.{n}"), t.clone()));
            }
        };
        put("online.encoder", s.online_encoder.params());
        put("online.head", s.online_head.params());
        put("target.encoder", s.target_encoder.params());
        put("target.head", s.target_head.params());
        for (prefix, enc) in [("online.buffers", &s.online_encoder), ("target.buffers", &s.target_encoder)] {
            for (n, t) in enc.buffers() {
                tensors.push((format!("{prefix}.{n}"), t));
            }
        }
        for (prefix, sgd, set) in [
            ("sgd.encoder", &self.sgd_encoder, s.online_encoder.params()),
            ("sgd.head", &self.sgd_head, s.online_head.params()),
        ] {
            for ((n, _), v) in set.iter().zip(sgd.velocity()) {
                tensors.push((format!("{prefix}.{n}"), v.clone()));
            }
        }
        if !self.queue.is_empty() {
            let t = Tensor::new([self.queue.len(), self.queue.dim()], self.queue.to_rows()).expect("non-empty queue");
            tensors.push(("queue.entries".into(), t));
        }
        let mut meta = encoder_meta(&s.online_encoder);
        meta.insert("kind".into(), Value::from("trainer"));
        meta.insert("head".into(), serde_json::to_value(s.online_head.config()).expect("serializable"));
        meta.insert("train".into(), serde_json::to_value(&self.config).expect("serializable"));
        meta.insert("augment".into(), serde_json::to_value(&self.policy).expect("serializable"));
        meta.insert("seed".into(), Value::from(self.config.seed));
        meta.insert("step_count".into(), Value::from(s.step_count));
        Checkpoint { tensors, meta }
    }

    /// Restores the complete training state written by [`Trainer::to_checkpoint`].
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, TrainError> {
        let bad = |m: String| TrainError::Checkpoint(m);
        if ckpt.meta.get("kind").and_then(Value::as_str) != Some("trainer") {
            return Err(bad("not a trainer checkpoint".into()));
        }
        let enc_cfg: EncoderConfig = meta_field(ckpt, "encoder")?;
        let head_cfg: HeadConfig = meta_field(ckpt, "head")?;
        let mut config: TrainConfig = meta_field(ckpt, "train")?;
        config.seed = meta_field(ckpt, "seed")?;
        let policy: AugmentationPolicy = meta_field(ckpt, "augment")?;
        let step_count: u64 = meta_field(ckpt, "step_count")?;
        let mut t = Trainer::new(&enc_cfg, head_cfg, config, policy)?;
        let s = &mut t.state;
        load_params(s.online_encoder.params_mut(), ckpt, "online.encoder.")?;
        load_params(s.online_head.params_mut(), ckpt, "online.head.")?;
        load_params(s.target_encoder.params_mut(), ckpt, "target.encoder.")?;
        load_params(s.target_head.params_mut(), ckpt, "target.head.")?;
        s.online_encoder.set_buffers(&ckpt.with_prefix("online.buffers.")).map_err(bad)?;
        s.target_encoder.set_buffers(&ckpt.with_prefix("target.buffers.")).map_err(bad)?;
        let velocity = |set: &ParamSet, prefix: &str| -> Result<Vec<Tensor>, TrainError> {
            set.iter()
                .map(|(n, _)| ckpt.get(&format!("{prefix}.{n}")).cloned().ok_or_else(|| bad(format!("missing {prefix}.{n}"))))
                .collect()
        };
        let ve = velocity(s.online_encoder.params(), "sgd.encoder")?;
        let vh = velocity(s.online_head.params(), "sgd.head")?;
        t.sgd_encoder.set_velocity(ve).map_err(|e| bad(e.to_string()))?;
        t.sgd_head.set_velocity(vh).map_err(|e| bad(e.to_string()))?;
        let rows = ckpt.get("queue.entries").map(|q| q.data().to_vec()).unwrap_or_default();
        t.queue = EmbeddingQueue::from_rows(t.config.queue_capacity, head_cfg.out_dim, &rows).map_err(|e| bad(e.to_string()))?;
        t.state.step_count = step_count;
        Ok(t)
    }
}

fn encoder_meta(enc: &Encoder) -> Map<String, Value> {
    let mut meta = Map::new();
    meta.insert("encoder".into(), serde_json::to_value(enc.config()).expect("serializable"));
    meta
}

fn meta_field<T: serde::de::DeserializeOwned>(ckpt: &Checkpoint, key: &str) -> Result<T, TrainError> {
    let v = ckpt.meta.get(key).ok_or_else(|| TrainError::Checkpoint(format!("metadata lacks `{key}`")))?;
    serde_json::from_value(v.clone()).map_err(|e| TrainError::Checkpoint(format!("metadata `{key}`: {e}")))
}

fn load_params(set: &mut ParamSet, ckpt: &Checkpoint, prefix: &str) -> Result<(), TrainError> {
    let mut values = Vec::with_capacity(set.len());
    for (n, t) in set.iter() {
        let v = ckpt.get(&format!("{prefix}{n}")).ok_or_else(|| TrainError::Checkpoint(format!("missing {prefix}{n}")))?;
        if v.shape() != t.shape() {
            return Err(TrainError::Checkpoint(format!("{prefix}{n} has shape {:?}, expected {:?}", v.shape(), t.shape())));
        }
        values.push(v.clone());
    }
    set.set_values(values).map_err(|e| TrainError::Checkpoint(e.to_string()))
}

/// Checkpoint holding only a (frozen) encoder.
pub fn encoder_checkpoint(enc: &Encoder) -> Checkpoint {
    let mut tensors: Vec<(String, Tensor)> = enc.params().iter().map(|(n, t)| (format!("encoder.{n}"), t.clone())).collect();
    tensors.extend(enc.buffers().into_iter().map(|(n, t)| (format!("buffers.{n}"), t)));
    let mut meta = encoder_meta(enc);
    meta.insert("kind".into(), Value::from("encoder"));
    meta.insert("frozen".into(), Value::from(enc.is_frozen()));
    Checkpoint { tensors, meta }
}

/// Reads the encoder from an encoder or trainer checkpoint (the online encoder
/// in the latter case). The result is frozen.
pub fn encoder_from_checkpoint(ckpt: &Checkpoint) -> Result<Encoder, TrainError> {
    let cfg: EncoderConfig = meta_field(ckpt, "encoder")?;
    let (params, buffers) = match ckpt.meta.get("kind").and_then(Value::as_str) {
        Some("encoder") => ("encoder.", "buffers."),
        Some("trainer") => ("online.encoder.", "online.buffers."),
        other => return Err(TrainError::Checkpoint(format!("unknown checkpoint kind {other:?}"))),
    };
    let mut enc = Encoder::init(&cfg, 0).map_err(TrainError::Checkpoint)?;
    load_params(enc.params_mut(), ckpt, params)?;
    enc.set_buffers(&ckpt.with_prefix(buffers)).map_err(TrainError::Checkpoint)?;
    Ok(enc.freeze())
}

/// Runs the full pretraining loop and returns the frozen online encoder.
pub fn pretrain(
    pool: &[Tensor],
    trainer: &mut Trainer,
    sink: impl FnMut(&Trainer, &StepRecord) -> Result<(), String>,
) -> Result<(Encoder, Vec<StepRecord>), TrainError> {
    if pool.is_empty() {
        return Err(TrainError::Data("pool is empty".into()));
    }
    let records = trainer.run(pool, sink)?;
    Ok((trainer.state.online_encoder.clone().freeze(), records))
}

/// Loss log with header `step,loss,lr,queue_fill`.
pub fn write_loss_csv(records: &[StepRecord], mut w: impl std::io::Write) -> std::io::Result<()> {
    writeln!(w, "step,loss,lr,queue_fill")?;
    for r in records {
        write_loss_row(r, &mut w)?;
    }
    Ok(())
}

pub fn write_loss_row(r: &StepRecord, mut w: impl std::io::Write) -> std::io::Result<()> {
    writeln!(w, "{},{},{},{}", r.step, r.loss, r.lr, r.queue_fill)
}
