//! Training losses and log-likelihood scoring.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{
    bind, decode_text, decoder_inputs, encode_image, encode_text_tower, patchify_batch, pool_gap, text_valid_len,
    Bound, DecodeMode, DecoderMaskKind, ModelConfig, Params,
};
use crate::rng::{stream_rng, Stream};
use crate::scalar::Scalar;
use crate::tensor::{shape_err, token_log_probs, Tape, Tensor, Var};
use crate::tok::{TokenSeq, BOS, EOS, PAD, SPECIALS};

/// Granularity of the causal/parallel draw in CapPa training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Mixing {
    /// Every example draws its own mode.
    #[default]
    Example,
    /// One draw per batch; all examples share the mode.
    Batch,
}

impl std::str::FromStr for Mixing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "example" => Ok(Mixing::Example),
            "batch" => Ok(Mixing::Batch),
            _ => Err(Error::Config(format!("unknown mixing {s:?}; expected example or batch"))),
        }
    }
}

impl std::fmt::Display for Mixing {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mixing::Example => "example",
            Mixing::Batch => "batch",
        })
    }
}

fn bernoulli(seed: u64, stream: Stream, keys: &[u64], p: f64) -> bool {
    p > 0.0 && stream_rng(seed, stream, keys).gen::<f64>() < p
}

/// Decoding mode per example for training step `step`; Bernoulli(`p`) picks
/// parallel. Keyed by (seed, step, index), so `p = 0` never consumes state.
pub fn draw_modes(seed: u64, step: u64, batch: usize, p: f64, mixing: Mixing) -> Vec<DecodeMode> {
    let pick = |par: bool| if par { DecodeMode::Parallel } else { DecodeMode::Causal };
    match mixing {
        Mixing::Example => (0..batch as u64).map(|i| pick(bernoulli(seed, Stream::Mode, &[step, i], p))).collect(),
        Mixing::Batch => vec![pick(bernoulli(seed, Stream::Mode, &[step, u64::MAX], p)); batch],
    }
}

/// Per-example caption reversal flags, Bernoulli(`p`) keyed like [`draw_modes`].
pub fn draw_reversals(seed: u64, step: u64, batch: usize, p: f64) -> Vec<bool> {
    (0..batch as u64).map(|i| bernoulli(seed, Stream::Reverse, &[step, i], p)).collect()
}

/// A training batch: images, fixed-length captions and per-example modes.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Vec<Tensor<f32>>,
    pub captions: Vec<TokenSeq>,
    pub modes: Vec<DecodeMode>,
}

impl Batch {
    pub fn new(images: Vec<Tensor<f32>>, captions: Vec<TokenSeq>, modes: Vec<DecodeMode>) -> Result<Self> {
        let b = images.len();
        if b == 0 || captions.len() != b || modes.len() != b {
            return shape_err(format!("batch of {b} images, {} captions, {} modes", captions.len(), modes.len()));
        }
        let n = captions[0].len();
        if captions.iter().any(|c| c.len() != n) {
            return shape_err("captions in a batch must share one length");
        }
        Ok(Self { images, captions, modes })
    }

    /// Builds the batch for `step`, drawing modes and reversals from `seed`.
    pub fn draw(
        cfg: &ModelConfig,
        images: Vec<Tensor<f32>>,
        captions: Vec<TokenSeq>,
        seed: u64,
        step: u64,
        mixing: Mixing,
    ) -> Result<Self> {
        let b = images.len();
        let p = if cfg.objective == crate::model::Objective::CapPa { cfg.parallel_fraction } else { 0.0 };
        let modes = draw_modes(seed, step, b, p, mixing);
        let flips = draw_reversals(seed, step, b, cfg.reverse_prob);
        let captions = captions.into_iter().zip(flips).map(|(c, f)| if f { c.reversed() } else { c }).collect();
        Self::new(images, captions, modes)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Target ids (`ids[1..] ++ [PAD]`) and 0/1 weights covering positions up to
/// and including the first EOS target.
pub fn caption_targets<T: Scalar>(seq: &TokenSeq) -> (Vec<usize>, Vec<T>) {
    let n = seq.len();
    let last = text_valid_len(seq).saturating_sub(1);
    let targets = (0..n).map(|t| if t + 1 < n { seq.ids()[t + 1] as usize } else { PAD as usize }).collect();
    let weights = (0..n).map(|t| if t < last { T::one() } else { T::zero() }).collect();
    (targets, weights)
}

/// Encoder output `[B, M, D]` for `images`, or zeros when `blind`.
pub fn encode_images_on<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    cfg: &ModelConfig,
    images: &[&Tensor<f32>],
    blind: bool,
) -> Result<Var> {
    if blind {
        return Ok(tape.constant(Tensor::zeros(vec![images.len(), cfg.num_patches(), cfg.width])));
    }
    let x = tape.constant(patchify_batch(cfg, images)?);
    encode_image(tape, p, cfg, x)
}

/// Result of a captioning loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct CaptionLoss {
    pub loss: Var,
    pub mask: DecoderMaskKind,
    /// Mean token CE over causal-mode examples; `None` if there were none.
    pub loss_causal: Option<f64>,
    /// Mean token CE over parallel-mode examples; `None` if there were none.
    pub loss_parallel: Option<f64>,
    pub tokens: usize,
}

/// Teacher-forced captioning loss over `captions` given encoder output
/// `enc`, mean token CE over all valid targets in the batch.
pub fn caption_loss_from<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    cfg: &ModelConfig,
    enc: Var,
    captions: &[TokenSeq],
    modes: &[DecodeMode],
) -> Result<CaptionLoss> {
    if !cfg.objective.is_captioning() {
        return Err(Error::Config(format!("caption loss needs a captioning objective, not {}", cfg.objective)));
    }
    let inputs: Vec<Vec<u32>> = captions.iter().zip(modes).map(|(c, &m)| decoder_inputs(c, m)).collect();
    let (logits, mask) = decode_text(tape, p, cfg, enc, &inputs, modes)?;
    let mut targets = Vec::new();
    let mut weights: Vec<T> = Vec::new();
    for c in captions {
        let (t, w) = caption_targets::<T>(c);
        targets.extend(t);
        weights.extend(w);
    }
    let v = cfg.vocab;
    let rows = targets.len();
    let flat = tape.reshape(logits, &[rows, v])?;
    let loss = tape.cross_entropy(flat, &targets, &weights)?;
    let lp = token_log_probs(tape.value(flat), &targets);
    let n = captions[0].len();
    let mut sums = [(0.0f64, 0usize); 2];
    for (i, &m) in modes.iter().enumerate() {
        let slot = &mut sums[usize::from(m == DecodeMode::Parallel)];
        for t in i * n..(i + 1) * n {
            if weights[t] > T::zero() {
                slot.0 -= lp[t].to_f64_lossy();
                slot.1 += 1;
            }
        }
    }
    let mean = |(s, c): (f64, usize)| (c > 0).then(|| s / c as f64);
    Ok(CaptionLoss {
        loss,
        mask,
        loss_causal: mean(sums[0]),
        loss_parallel: mean(sums[1]),
        tokens: sums[0].1 + sums[1].1,
    })
}

/// Captioning loss for a batch; `blind` replaces the encoder output by zeros.
pub fn caption_loss<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    cfg: &ModelConfig,
    batch: &Batch,
    blind: bool,
) -> Result<CaptionLoss> {
    let images: Vec<&Tensor<f32>> = batch.images.iter().collect();
    let enc = encode_images_on(tape, p, cfg, &images, blind)?;
    caption_loss_from(tape, p, cfg, enc, &batch.captions, &batch.modes)
}

/// Symmetric InfoNCE over L2-normalized `img` and `txt` `[B, D]` with
/// logits scaled by `exp(-log_temp)`.
pub fn contrastive_loss<T: Scalar>(tape: &mut Tape<T>, img: Var, txt: Var, log_temp: Var) -> Result<Var> {
    let (si, st) = (tape.shape(img).to_vec(), tape.shape(txt).to_vec());
    if si.len() != 2 || si != st {
        return shape_err(format!("contrastive embeddings {si:?} and {st:?}"));
    }
    let b = si[0];
    if b < 2 {
        return Err(Error::BatchTooSmall(b));
    }
    let i = tape.l2_normalize(img);
    let t = tape.l2_normalize(txt);
    let tt = tape.transpose(t)?;
    let sim = tape.matmul(i, tt)?;
    let neg = tape.scale(log_temp, -T::one());
    let inv_temp = tape.exp(neg);
    let logits = tape.mul(sim, inv_temp)?;
    let diag: Vec<usize> = (0..b).collect();
    let ones = vec![T::one(); b];
    let rows = tape.cross_entropy(logits, &diag, &ones)?;
    let lt = tape.transpose(logits)?;
    let cols = tape.cross_entropy(lt, &diag, &ones)?;
    let sum = tape.add(rows, cols)?;
    Ok(tape.scale(sum, T::lit(0.5)))
}

/// Image embeddings `[B, D]` of the contrastive image tower (GAP, projection).
pub fn clip_image_embed<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    cfg: &ModelConfig,
    images: &[&Tensor<f32>],
) -> Result<Var> {
    let enc = encode_images_on(tape, p, cfg, images, false)?;
    let pooled = pool_gap(tape, enc)?;
    tape.matmul(pooled, p.get("img.proj")?)
}

/// Text embeddings `[B, D]` of the contrastive text tower.
pub fn clip_text_embed<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    cfg: &ModelConfig,
    captions: &[TokenSeq],
) -> Result<Var> {
    encode_text_tower(tape, p, cfg, "txt", captions)
}

/// Contrastive loss for a batch of image/caption pairs.
pub fn clip_loss<T: Scalar>(tape: &mut Tape<T>, p: &Bound, cfg: &ModelConfig, batch: &Batch) -> Result<Var> {
    let images: Vec<&Tensor<f32>> = batch.images.iter().collect();
    let img = clip_image_embed(tape, p, cfg, &images)?;
    let txt = clip_text_embed(tape, p, cfg, &batch.captions)?;
    contrastive_loss(tape, img, txt, p.get("log_temp")?)
}

/// Encoder outputs `[B, M, D]` as plain values (no gradient).
pub fn encode_images<T: Scalar>(
    cfg: &ModelConfig,
    params: &Params<T>,
    images: &[&Tensor<f32>],
    blind: bool,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let p = bind(&mut tape, params, |_| false);
    let enc = encode_images_on(&mut tape, &p, cfg, images, blind)?;
    Ok(tape.value(enc).clone())
}

/// Sum of target log-probs for row `i` of `captions` against row `i` of the
/// encoder output `enc` `[B, M, D]`, from one decoder pass per mode.
pub fn score_encoded<T: Scalar>(
    cfg: &ModelConfig,
    params: &Params<T>,
    enc: &Tensor<T>,
    captions: &[TokenSeq],
    mode: DecodeMode,
) -> Result<Vec<f64>> {
    if enc.ndim() != 3 || enc.shape()[0] != captions.len() {
        return shape_err(format!("encoder output {:?} for {} captions", enc.shape(), captions.len()));
    }
    let mut tape = Tape::new();
    let p = bind(&mut tape, params, |_| false);
    let e = tape.constant(enc.clone());
    let modes = vec![mode; captions.len()];
    let inputs: Vec<Vec<u32>> = captions.iter().map(|c| decoder_inputs(c, mode)).collect();
    let (logits, _) = decode_text(&mut tape, &p, cfg, e, &inputs, &modes)?;
    let lv = tape.value(logits);
    let n = captions.first().map_or(0, TokenSeq::len);
    let rows = lv.data().chunks(n * cfg.vocab);
    Ok(rows
        .zip(captions)
        .map(|(row, c)| {
            let (targets, weights) = caption_targets::<f64>(c);
            let row = Tensor::new(vec![n, cfg.vocab], row.to_vec()).expect("row shape");
            token_log_probs(&row, &targets)
                .into_iter()
                .zip(weights)
                .filter(|&(_, w)| w > 0.0)
                .map(|(lp, _)| lp.to_f64_lossy())
                .sum()
        })
        .collect())
}

fn repeat_rows<T: Scalar>(enc: &Tensor<T>, times: usize) -> Tensor<T> {
    let row = &enc.data()[..enc.numel() / enc.shape()[0]];
    let mut shape = enc.shape().to_vec();
    shape[0] = times;
    Tensor::new(shape, row.repeat(times)).expect("repeat shape")
}

/// Log-likelihood of each candidate caption for one image, batched.
pub fn score_candidates<T: Scalar>(
    cfg: &ModelConfig,
    params: &Params<T>,
    image: &Tensor<f32>,
    candidates: &[TokenSeq],
    mode: DecodeMode,
    blind: bool,
) -> Result<Vec<f64>> {
    if candidates.is_empty() {
        return Ok(Vec::new());
    }
    let enc = encode_images(cfg, params, &[image], blind)?;
    score_encoded(cfg, params, &repeat_rows(&enc, candidates.len()), candidates, mode)
}

/// Log-likelihood of `caption` given `image`.
pub fn score_caption<T: Scalar>(
    cfg: &ModelConfig,
    params: &Params<T>,
    image: &Tensor<f32>,
    caption: &TokenSeq,
    mode: DecodeMode,
) -> Result<f64> {
    Ok(score_candidates(cfg, params, image, std::slice::from_ref(caption), mode, false)?[0])
}

/// [`score_caption`] with the encoder output replaced by zeros; the image
/// plays no role.
pub fn blind_score<T: Scalar>(
    cfg: &ModelConfig,
    params: &Params<T>,
    caption: &TokenSeq,
    mode: DecodeMode,
) -> Result<f64> {
    let enc = Tensor::zeros(vec![1, cfg.num_patches(), cfg.width]);
    Ok(score_encoded(cfg, params, &enc, std::slice::from_ref(caption), mode)?[0])
}

/// Causal score computed one token at a time: each step re-runs the decoder
/// on the prefix and reads the last position.
pub fn score_stepwise<T: Scalar>(
    cfg: &ModelConfig,
    params: &Params<T>,
    image: &Tensor<f32>,
    caption: &TokenSeq,
) -> Result<f64> {
    let enc = encode_images(cfg, params, &[image], false)?;
    let ids = caption.ids();
    let steps = text_valid_len(caption).saturating_sub(1);
    let mut total = 0.0;
    for t in 0..steps {
        let lp = next_token_log_probs(cfg, params, &enc, &ids[..=t])?;
        total += lp[ids[t + 1] as usize].to_f64_lossy();
    }
    Ok(total)
}

fn next_token_log_probs<T: Scalar>(
    cfg: &ModelConfig,
    params: &Params<T>,
    enc: &Tensor<T>,
    prefix: &[u32],
) -> Result<Vec<T>> {
    let mut tape = Tape::new();
    let p = bind(&mut tape, params, |_| false);
    let e = tape.constant(enc.clone());
    let (logits, _) = decode_text(&mut tape, &p, cfg, e, &[prefix.to_vec()], &[DecodeMode::Causal])?;
    let v = cfg.vocab;
    let last = &tape.value(logits).data()[(prefix.len() - 1) * v..prefix.len() * v];
    let row = Tensor::new(vec![1, v], last.to_vec())?;
    Ok((0..v).map(|k| token_log_probs(&row, &[k])[0]).collect())
}

/// Greedy autoregressive decoding from BOS; only EOS and content words are
/// eligible, and EOS is forced at `max_len`.
pub fn greedy_decode<T: Scalar>(cfg: &ModelConfig, params: &Params<T>, enc: &Tensor<T>) -> Result<TokenSeq> {
    greedy_decode_from(cfg, params, enc, &[BOS])
}

/// [`greedy_decode`] continuing a given prefix, which must start with BOS.
pub fn greedy_decode_from<T: Scalar>(
    cfg: &ModelConfig,
    params: &Params<T>,
    enc: &Tensor<T>,
    prefix: &[u32],
) -> Result<TokenSeq> {
    if enc.ndim() != 3 || enc.shape()[0] != 1 {
        return shape_err(format!("greedy decoding takes one encoder output, got {:?}", enc.shape()));
    }
    if prefix.first() != Some(&BOS) || prefix.len() + 1 > cfg.max_len {
        return shape_err(format!("prefix must start with BOS and leave room for EOS, got {prefix:?}"));
    }
    let mut ids = prefix.to_vec();
    while ids.len() + 1 < cfg.max_len {
        let lp = next_token_log_probs(cfg, params, enc, &ids)?;
        let scores: Vec<f64> = lp
            .iter()
            .enumerate()
            .map(|(k, x)| if k == EOS as usize || k >= SPECIALS.len() { x.to_f64_lossy() } else { f64::NEG_INFINITY })
            .collect();
        let next = argmax(&scores) as u32;
        if next == EOS {
            break;
        }
        ids.push(next);
    }
    ids.push(EOS);
    ids.resize(cfg.max_len, PAD);
    TokenSeq::from_ids(ids)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Index of the candidate caption with the highest log-likelihood.
pub fn zero_shot_classify<T: Scalar>(
    cfg: &ModelConfig,
    params: &Params<T>,
    image: &Tensor<f32>,
    candidates: &[TokenSeq],
    mode: DecodeMode,
) -> Result<usize> {
    if candidates.len() < 2 {
        return Err(Error::Config(format!("zero-shot needs at least 2 candidates, got {}", candidates.len())));
    }
    Ok(argmax(&score_candidates(cfg, params, image, candidates, mode, false)?))
}

/// Cosine similarity of `query` `[D]` against each row of `keys` `[K, D]`.
pub fn cosine_scores<T: Scalar>(query: &[T], keys: &Tensor<T>) -> Vec<f64> {
    let d = query.len();
    let norm = |v: &[T]| v.iter().map(|x| x.to_f64_lossy().powi(2)).sum::<f64>().sqrt().max(1e-12);
    let qn = norm(query);
    keys.data()
        .chunks(d)
        .map(|k| {
            let dot: f64 = k.iter().zip(query).map(|(a, b)| a.to_f64_lossy() * b.to_f64_lossy()).sum();
            dot / (qn * norm(k))
        })
        .collect()
}

/// Contrastive zero-shot: index of the candidate text embedding with the
/// highest cosine similarity to `image_emb`; ties go to the lowest index.
pub fn zero_shot_cosine<T: Scalar>(image_emb: &[T], text_embs: &Tensor<T>) -> Result<usize> {
    if text_embs.ndim() != 2 || text_embs.shape()[0] < 2 || text_embs.shape()[1] != image_emb.len() {
        return Err(Error::Config(format!("zero-shot needs at least 2 candidates of width {}", image_emb.len())));
    }
    Ok(argmax(&cosine_scores(image_emb, text_embs)))
}

#[cfg(test)]
mod tests;
