//! Evaluation protocols over frozen parameters: feature probes, LiT-style
//! alignment, fresh-decoder transfer, retrieval and the perturbation
//! benchmark.

mod lit;
mod perturbation;
mod probe;
mod retrieval;
mod transfer;

pub use lit::{lit_align, LitConfig, LitModel};
pub use perturbation::{
    perturbation_benchmark, perturbation_pairs, CaptionScorer, ContrastiveScorer, PerturbReport, PerturbRow, Scorer,
    PERTURB_HEADER,
};
pub use probe::{
    kshot_probe, kshot_probe_with, probe_csv, Features, ProbeConfig, ProbeKind, ProbeResult, PROBE_HEADER,
};
pub use retrieval::{retrieval_eval, Recall, RETRIEVAL_HEADER};
pub use transfer::{
    class_text, fresh_decoder_transfer, parse_class_text, transfer_vocab, TransferConfig, TransferResult, CLASS_PREFIX,
};

use crate::error::{Error, Result};
use crate::model::{bind, pool_gap, ModelConfig, Objective, Params};
use crate::objective::encode_images_on;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

/// Images per encoder pass when embedding a whole set.
const CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureMode {
    /// Mean of the encoder output sequence.
    Gap,
    /// The contrastive model's image embedding before normalization.
    Prelogits,
}

impl std::str::FromStr for FeatureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gap" => Ok(FeatureMode::Gap),
            "prelogits" => Ok(FeatureMode::Prelogits),
            _ => Err(Error::Config(format!("unknown feature mode {s:?} (expected gap or prelogits)"))),
        }
    }
}

/// Encoder output sequences `[K, M, D]`, computed without gradients.
pub fn encode_sequences<T: Scalar>(cfg: &ModelConfig, params: &Params<T>, images: &[Tensor<f32>]) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(images.len() * cfg.num_patches() * cfg.width);
    for chunk in images.chunks(CHUNK) {
        let refs: Vec<&Tensor<f32>> = chunk.iter().collect();
        data.extend_from_slice(crate::objective::encode_images(cfg, params, &refs, false)?.data());
    }
    Tensor::new(vec![images.len(), cfg.num_patches(), cfg.width], data)
}

/// One pooled feature row `[K, D]` per image from the frozen encoder.
pub fn extract_features<T: Scalar>(
    cfg: &ModelConfig,
    params: &Params<T>,
    images: &[Tensor<f32>],
    mode: FeatureMode,
) -> Result<Tensor<T>> {
    if mode == FeatureMode::Prelogits && cfg.objective != Objective::Clip {
        return Err(Error::Config(format!("{} models have no pre-logit image embedding; use gap", cfg.objective)));
    }
    let mut data = Vec::with_capacity(images.len() * cfg.width);
    for chunk in images.chunks(CHUNK) {
        let refs: Vec<&Tensor<f32>> = chunk.iter().collect();
        let mut tape = Tape::new();
        let p = bind(&mut tape, params, |_| false);
        let enc = encode_images_on(&mut tape, &p, cfg, &refs, false)?;
        let mut out = pool_gap(&mut tape, enc)?;
        if mode == FeatureMode::Prelogits {
            out = tape.matmul(out, p.get("img.proj")?)?;
        }
        data.extend_from_slice(tape.value(out).data());
    }
    Tensor::new(vec![images.len(), cfg.width], data)
}

/// Rows of `x` `[K, D]` scaled to unit L2 norm, in `f64`.
fn unit_rows<T: Scalar>(x: &Tensor<T>) -> Vec<Vec<f64>> {
    x.data()
        .chunks(x.last_dim())
        .map(|r| {
            let r: Vec<f64> = r.iter().map(|v| v.to_f64_lossy()).collect();
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            r.into_iter().map(|v| v / n).collect()
        })
        .collect()
}
