use std::collections::BTreeSet;

use super::encode_sequences;
use crate::error::{Error, Result};
use crate::model::{
    bind, encode_text_tower, init_map_head, init_params, param_specs, MapHead, ModelConfig, Objective, Params,
};
use crate::objective::contrastive_loss;
use crate::scalar::Scalar;
use crate::tensor::{shape_err, Tape, Tensor};
use crate::tok::TokenSeq;
use crate::train::{batch_indices, clip_by_global_norm, lr_at, AdamState, AdamW, TrainConfig};

const HEAD_PREFIX: &str = "lit.map";

#[derive(Clone, Debug, PartialEq)]
pub struct LitConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl LitConfig {
    pub fn new(steps: u64) -> Self {
        Self { steps, batch_size: 32, base_lr: 1e-3, weight_decay: 1e-4, seed: 0 }
    }
}

/// A text tower and a MAP head mapping frozen encoder sequences into a
/// shared embedding space.
#[derive(Clone, Debug)]
pub struct LitModel<T> {
    pub text_cfg: ModelConfig,
    pub head: MapHead,
    /// `txt.*`, `log_temp` and the head's tensors.
    pub params: Params<T>,
}

impl<T: Scalar> LitModel<T> {
    /// Image embeddings `[K, D]` from encoder sequences `[K, M, D]`.
    pub fn embed_sequences(&self, seqs: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = bind(&mut tape, &self.params, |_| false);
        let x = tape.constant(seqs.clone());
        let e = self.head.pool(&mut tape, &p, x)?;
        Ok(tape.value(e).clone())
    }

    pub fn embed_images(
        &self,
        enc_cfg: &ModelConfig,
        enc_params: &Params<T>,
        images: &[Tensor<f32>],
    ) -> Result<Tensor<T>> {
        self.embed_sequences(&encode_sequences(enc_cfg, enc_params, images)?)
    }

    pub fn embed_texts(&self, captions: &[TokenSeq]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = bind(&mut tape, &self.params, |_| false);
        let e = encode_text_tower(&mut tape, &p, &self.text_cfg, "txt", captions)?;
        Ok(tape.value(e).clone())
    }
}

/// Contrastive training of a fresh text tower and MAP head against the
/// frozen encoder of `enc_params`, with in-batch negatives. Returns the
/// aligned components and the per-step losses.
pub fn lit_align<T: Scalar>(
    enc_cfg: &ModelConfig,
    enc_params: &Params<T>,
    images: &[Tensor<f32>],
    captions: &[TokenSeq],
    cfg: &LitConfig,
) -> Result<(LitModel<T>, Vec<f64>)> {
    if images.len() != captions.len() {
        return Err(Error::CountMismatch(images.len(), captions.len()));
    }
    if cfg.batch_size < 2 {
        return Err(Error::BatchTooSmall(cfg.batch_size));
    }
    if images.is_empty() || cfg.steps == 0 || cfg.base_lr <= 0.0 {
        return Err(Error::Config("LiT needs data, steps and a positive learning rate".into()));
    }
    if let Some(c) = captions.iter().find(|c| c.len() != enc_cfg.max_len) {
        return shape_err(format!("caption of length {} for max_len {}", c.len(), enc_cfg.max_len));
    }
    let text_cfg =
        ModelConfig { objective: Objective::Clip, parallel_fraction: 0.0, reverse_prob: 0.0, ..enc_cfg.clone() };
    let head = MapHead::new(HEAD_PREFIX, enc_cfg.width, enc_cfg.heads);
    let full = init_params::<T>(&text_cfg, cfg.seed)?;
    let mut params = init_map_head(&head, cfg.seed);
    params.copy_prefix_from(&full, "txt.");
    params.copy_prefix_from(&full, "log_temp");
    let decays: BTreeSet<String> = param_specs(&text_cfg)
        .into_iter()
        .chain(head.specs())
        .filter(|s| s.kind.decays() && params.get(&s.name).is_some())
        .map(|s| s.name)
        .collect();

    let seqs = encode_sequences(enc_cfg, enc_params, images)?;
    let block = seqs.numel() / images.len();
    let mut sched = TrainConfig::new(cfg.steps);
    sched.base_lr = cfg.base_lr;
    let mut opt = AdamState::default();
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    for s in 0..cfg.steps {
        let idx = batch_indices(cfg.seed, s, images.len(), cfg.batch_size);
        let rows: Vec<T> = idx.iter().flat_map(|&i| seqs.data()[i * block..(i + 1) * block].iter().copied()).collect();
        let caps: Vec<TokenSeq> = idx.iter().map(|&i| captions[i].clone()).collect();
        let mut tape = Tape::new();
        let p = bind(&mut tape, &params, |_| true);
        let x = tape.constant(Tensor::new(vec![idx.len(), enc_cfg.num_patches(), enc_cfg.width], rows)?);
        let img = head.pool(&mut tape, &p, x)?;
        let txt = encode_text_tower(&mut tape, &p, &text_cfg, "txt", &caps)?;
        let loss = contrastive_loss(&mut tape, img, txt, p.get("log_temp")?)?;
        let value = tape.value(loss).item().to_f64_lossy();
        if !value.is_finite() {
            return Err(Error::Diverged(s));
        }
        losses.push(value);
        let mut grads = tape.backward(loss)?;
        let mut g = p.grads(&tape, &mut grads);
        drop(tape);
        clip_by_global_norm(&mut g, 1.0);
        let lr = lr_at(s + 1, &sched);
        AdamW::default()
            .step(&mut params, &g, &mut opt, lr, cfg.weight_decay * lr / cfg.base_lr, |n| decays.contains(n))?;
    }
    Ok((LitModel { text_cfg, head, params }, losses))
}
