//! Learning-rate schedule, optimizer, training loop and checkpoints.

mod checkpoint;
mod optim;

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use optim::{clip_by_global_norm, global_norm, AdamState, AdamW};

use crate::datagen::Example;
use crate::error::{Error, Result};
use crate::model::{bind, init_params, init_tensor, param_specs, ModelConfig, Objective, Params};
use crate::objective::{caption_loss, caption_loss_from, clip_loss, encode_images, Batch, Mixing};
use crate::rng::{stream_rng, Stream};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};
use crate::tok::{encode_truncating, TokenSeq, Vocab};

/// Which parameters receive no updates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FreezeMode {
    #[default]
    None,
    /// The image encoder.
    Encoder,
    /// Every decoder tensor except cross-attention.
    DecoderExceptXattn,
    /// Both of the above: only cross-attention trains.
    EncoderAndDecoderExceptXattn,
}

impl FreezeMode {
    pub const ALL: [FreezeMode; 4] = [
        FreezeMode::None,
        FreezeMode::Encoder,
        FreezeMode::DecoderExceptXattn,
        FreezeMode::EncoderAndDecoderExceptXattn,
    ];

    pub fn freezes_encoder(self) -> bool {
        matches!(self, FreezeMode::Encoder | FreezeMode::EncoderAndDecoderExceptXattn)
    }

    pub fn is_frozen(self, name: &str) -> bool {
        let enc = name.starts_with("enc.");
        let dec = name.starts_with("dec.") && !is_xattn(name);
        match self {
            FreezeMode::None => false,
            FreezeMode::Encoder => enc,
            FreezeMode::DecoderExceptXattn => dec,
            FreezeMode::EncoderAndDecoderExceptXattn => enc || dec,
        }
    }
}

/// Cross-attention tensors of the decoder.
pub fn is_xattn(name: &str) -> bool {
    name.starts_with("dec.") && name.contains(".cross.")
}

impl fmt::Display for FreezeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FreezeMode::None => "none",
            FreezeMode::Encoder => "encoder",
            FreezeMode::DecoderExceptXattn => "decoder_except_xattn",
            FreezeMode::EncoderAndDecoderExceptXattn => "encoder_and_decoder_except_xattn",
        })
    }
}

impl FromStr for FreezeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown freeze mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub seed: u64,
    pub freeze_mode: FreezeMode,
    pub reinit_xattn: bool,
    /// Replace encoder outputs by zeros: language-only training.
    pub blind: bool,
    pub mixing: Mixing,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
}

impl TrainConfig {
    /// Defaults: lr 1e-3, decay 1e-4, batch 64, warmup 2% of `steps`.
    pub fn new(steps: u64) -> Self {
        Self {
            steps,
            batch_size: 64,
            base_lr: 1e-3,
            weight_decay: 1e-4,
            warmup_steps: default_warmup(steps),
            seed: 0,
            freeze_mode: FreezeMode::None,
            reinit_xattn: false,
            blind: false,
            mixing: Mixing::Example,
            clip_norm: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.steps == 0 {
            return fail("steps must be positive".into());
        }
        if self.warmup_steps >= self.steps {
            return fail(format!("warmup_steps {} must be below steps {}", self.warmup_steps, self.steps));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return fail(format!("base_lr {} must be positive", self.base_lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay < 1.0) {
            return fail(format!("weight_decay {} outside [0, 1)", self.weight_decay));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return fail(format!("clip_norm {} must be positive", self.clip_norm));
        }
        Ok(())
    }

    pub const KEYS: [&'static str; 11] = [
        "steps",
        "batch_size",
        "base_lr",
        "weight_decay",
        "warmup_steps",
        "seed",
        "freeze",
        "reinit_xattn",
        "blind",
        "mixing",
        "clip_norm",
    ];

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("steps".into(), self.steps.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("base_lr".into(), self.base_lr.to_string()),
            ("weight_decay".into(), self.weight_decay.to_string()),
            ("warmup_steps".into(), self.warmup_steps.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("freeze".into(), self.freeze_mode.to_string()),
            ("reinit_xattn".into(), self.reinit_xattn.to_string()),
            ("blind".into(), self.blind.to_string()),
            ("mixing".into(), self.mixing.to_string()),
            ("clip_norm".into(), self.clip_norm.to_string()),
        ]
    }

    /// Applies one override; unknown keys are rejected.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
            value.trim().parse().map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
        }
        match key {
            "steps" => self.steps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "base_lr" => self.base_lr = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "warmup_steps" => self.warmup_steps = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "freeze" => self.freeze_mode = value.trim().parse()?,
            "reinit_xattn" => self.reinit_xattn = parse(key, value)?,
            "blind" => self.blind = parse(key, value)?,
            "mixing" => self.mixing = value.trim().parse()?,
            "clip_norm" => self.clip_norm = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown training key {key:?}"))),
        }
        Ok(())
    }
}

/// 2% of `steps`, kept below `steps`.
pub fn default_warmup(steps: u64) -> u64 {
    ((steps as f64 * 0.02).round() as u64).min(steps.saturating_sub(1))
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to 0 at `steps`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    let step = step.min(cfg.steps);
    if step < cfg.warmup_steps {
        return cfg.base_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = (cfg.steps - cfg.warmup_steps).max(1) as f64;
    let progress = (step - cfg.warmup_steps) as f64 / span;
    cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Names of parameters under weight decay for `cfg`.
pub fn decay_set(cfg: &ModelConfig) -> BTreeSet<String> {
    param_specs(cfg).into_iter().filter(|s| s.kind.decays()).map(|s| s.name).collect()
}

/// Re-draws every decoder cross-attention tensor.
pub fn reinit_cross_attention<T: Scalar>(params: &mut Params<T>, cfg: &ModelConfig, seed: u64) {
    for spec in param_specs(cfg).into_iter().filter(|s| is_xattn(&s.name)) {
        params.insert(spec.name.clone(), init_tensor(&spec, seed, 1));
    }
}

/// Images and tokenized captions ready for batching.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub images: Vec<Tensor<f32>>,
    pub captions: Vec<TokenSeq>,
}

impl TrainData {
    pub fn new(images: Vec<Tensor<f32>>, captions: Vec<TokenSeq>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Config("training data is empty".into()));
        }
        if images.len() != captions.len() {
            return Err(Error::CountMismatch(images.len(), captions.len()));
        }
        Ok(Self { images, captions })
    }

    pub fn from_examples(examples: &[Example], vocab: &Vocab, max_len: usize) -> Result<Self> {
        let captions =
            examples.iter().map(|e| encode_truncating(&e.caption, vocab, max_len)).collect::<Result<Vec<_>>>()?;
        Self::new(examples.iter().map(|e| e.image.clone()).collect(), captions)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Example indices for `step`: distinct while the batch fits the data,
/// topped up with replacement otherwise.
pub fn batch_indices(seed: u64, step: u64, n: usize, batch: usize) -> Vec<usize> {
    let mut rng = stream_rng(seed, Stream::Batch, &[step]);
    let mut idx = sample(&mut rng, n, batch.min(n)).into_vec();
    while idx.len() < batch {
        idx.push(rng.gen_range(0..n));
    }
    idx
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub loss_causal: Option<f64>,
    pub loss_parallel: Option<f64>,
}

pub const METRICS_HEADER: &str = "step,lr,loss,loss_causal,loss_parallel";

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!("{},{},{},{},{}", self.step, self.lr, self.loss, opt(self.loss_causal), opt(self.loss_parallel))
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(metrics_csv(rows).as_bytes())?;
    Ok(())
}

/// Mutable training state: everything a checkpoint must carry.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub params: Params<T>,
    pub opt: AdamState<T>,
    pub step: u64,
}

/// Owns parameters and optimizer state and advances them one step at a time.
pub struct Trainer<'a, T> {
    pub model: ModelConfig,
    pub cfg: TrainConfig,
    pub state: TrainState<T>,
    data: &'a TrainData,
    optimizer: AdamW,
    decays: BTreeSet<String>,
    /// Frozen-encoder outputs, one `[M, D]` block per example.
    enc_cache: Option<Vec<Tensor<T>>>,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    /// Fresh parameters drawn from `cfg.seed`.
    pub fn new(model: ModelConfig, cfg: TrainConfig, data: &'a TrainData) -> Result<Self> {
        let params = init_params(&model, cfg.seed)?;
        Self::with_params(model, cfg, data, params)
    }

    /// Starts from `params` (e.g. a pretrained model), applying
    /// `reinit_xattn` if set.
    pub fn with_params(
        model: ModelConfig,
        cfg: TrainConfig,
        data: &'a TrainData,
        mut params: Params<T>,
    ) -> Result<Self> {
        if cfg.reinit_xattn {
            reinit_cross_attention(&mut params, &model, cfg.seed);
        }
        let state = TrainState { params, opt: AdamState::default(), step: 0 };
        Self::resume(model, cfg, data, state)
    }

    /// Continues from a saved state.
    pub fn resume(model: ModelConfig, cfg: TrainConfig, data: &'a TrainData, state: TrainState<T>) -> Result<Self> {
        model.validate()?;
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::Config("training data is empty".into()));
        }
        if cfg.blind && !model.objective.is_captioning() {
            return Err(Error::Config("blind training needs a captioning objective".into()));
        }
        if model.objective == Objective::Clip && cfg.batch_size < 2 {
            return Err(Error::BatchTooSmall(cfg.batch_size));
        }
        for spec in param_specs(&model) {
            let t = state.params.require(&spec.name)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Shape(format!("parameter {} has shape {:?}", spec.name, t.shape())));
            }
        }
        let enc_cache = if model.objective.is_captioning() && cfg.freeze_mode.freezes_encoder() && !cfg.blind {
            Some(encode_all(&model, &state.params, &data.images)?)
        } else {
            None
        };
        let decays = decay_set(&model);
        Ok(Self { model, cfg, state, data, optimizer: AdamW::default(), decays, enc_cache })
    }

    pub fn params(&self) -> &Params<T> {
        &self.state.params
    }

    pub fn into_state(self) -> TrainState<T> {
        self.state
    }

    pub fn done(&self) -> bool {
        self.state.step >= self.cfg.steps
    }

    /// One optimizer update; the lr used is `lr_at(step + 1)`.
    pub fn step(&mut self) -> Result<MetricsRow> {
        let s = self.state.step;
        let idx = batch_indices(self.cfg.seed, s, self.data.len(), self.cfg.batch_size);
        let images: Vec<Tensor<f32>> = idx.iter().map(|&i| self.data.images[i].clone()).collect();
        let captions: Vec<TokenSeq> = idx.iter().map(|&i| self.data.captions[i].clone()).collect();
        let batch = Batch::draw(&self.model, images, captions, self.cfg.seed, s, self.cfg.mixing)?;

        let mut tape = Tape::new();
        let (freeze, blind) = (self.cfg.freeze_mode, self.cfg.blind);
        // A blind run never reads the encoder, so it is not trained either.
        let p = bind(&mut tape, &self.state.params, |n| !freeze.is_frozen(n) && !(blind && n.starts_with("enc.")));
        let (loss, causal, parallel) = if self.model.objective.is_captioning() {
            let l = match &self.enc_cache {
                Some(cache) => {
                    let rows: Vec<Tensor<T>> = idx.iter().map(|&i| cache[i].clone()).collect();
                    let enc = tape.constant(Tensor::stack(&rows)?);
                    caption_loss_from(&mut tape, &p, &self.model, enc, &batch.captions, &batch.modes)?
                }
                None => caption_loss(&mut tape, &p, &self.model, &batch, self.cfg.blind)?,
            };
            (l.loss, l.loss_causal, l.loss_parallel)
        } else {
            (clip_loss(&mut tape, &p, &self.model, &batch)?, None, None)
        };
        let loss_value = tape.value(loss).item().to_f64_lossy();
        if !loss_value.is_finite() {
            return Err(Error::Diverged(s));
        }
        let mut grads = tape.backward(loss)?;
        let mut g = p.grads(&tape, &mut grads);
        drop(tape);
        clip_by_global_norm(&mut g, self.cfg.clip_norm);
        let lr = lr_at(s + 1, &self.cfg);
        let wd = self.cfg.weight_decay * lr / self.cfg.base_lr;
        let decays = &self.decays;
        self.optimizer.step(&mut self.state.params, &g, &mut self.state.opt, lr, wd, |n| decays.contains(n))?;
        self.state.step += 1;
        Ok(MetricsRow { step: s, lr, loss: loss_value, loss_causal: causal, loss_parallel: parallel })
    }

    /// Runs until `cfg.steps` (or `until`, if smaller), returning the rows.
    pub fn run_until(&mut self, until: u64) -> Result<Vec<MetricsRow>> {
        let mut rows = Vec::new();
        while self.state.step < until.min(self.cfg.steps) {
            rows.push(self.step()?);
        }
        Ok(rows)
    }

    pub fn run(&mut self) -> Result<Vec<MetricsRow>> {
        self.run_until(self.cfg.steps)
    }

    pub fn checkpoint(&self, vocab: &Vocab) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            train: self.cfg.clone(),
            vocab: vocab.clone(),
            params: self.state.params.cast(),
            opt: self.state.opt.cast(),
            step: self.state.step,
        }
    }
}

fn encode_all<T: Scalar>(cfg: &ModelConfig, params: &Params<T>, images: &[Tensor<f32>]) -> Result<Vec<Tensor<T>>> {
    let (m, d) = (cfg.num_patches(), cfg.width);
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(32) {
        let refs: Vec<&Tensor<f32>> = chunk.iter().collect();
        let enc = encode_images(cfg, params, &refs, false)?;
        for row in enc.data().chunks(m * d) {
            out.push(Tensor::new(vec![m, d], row.to_vec())?);
        }
    }
    Ok(out)
}

/// Trains from scratch and returns the final parameters and metrics.
pub fn train<T: Scalar>(
    model: &ModelConfig,
    cfg: &TrainConfig,
    data: &TrainData,
) -> Result<(Params<T>, Vec<MetricsRow>)> {
    let mut t = Trainer::new(model.clone(), cfg.clone(), data)?;
    let rows = t.run()?;
    Ok((t.into_state().params, rows))
}

#[cfg(test)]
mod tests;
