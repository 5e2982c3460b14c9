use super::config::ModelConfig;
use super::layers::{encoder_block, linear, norm};
use super::params::Bound;
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{shape_err, Tape, Tensor, Var, NEG_INF};
use crate::tok::{TokenSeq, EOS};

/// Positions up to and including the first EOS.
pub fn text_valid_len(seq: &TokenSeq) -> usize {
    seq.ids().iter().position(|&t| t == EOS).map_or(seq.len(), |i| i + 1)
}

/// Contrastive text tower: encoder blocks with key-padding masks, average
/// over valid positions, linear projection. Returns `[B, D]`, not yet
/// L2-normalized.
pub fn encode_text_tower<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    cfg: &ModelConfig,
    prefix: &str,
    seqs: &[TokenSeq],
) -> Result<Var> {
    let b = seqs.len();
    let n = seqs.first().map_or(0, TokenSeq::len);
    if b == 0 || n == 0 || n > cfg.max_len || seqs.iter().any(|s| s.len() != n) {
        return shape_err(format!("text tower needs equal-length sequences of at most {}", cfg.max_len));
    }
    let valid: Vec<usize> = seqs.iter().map(text_valid_len).collect();
    let ids: Vec<usize> = seqs.iter().flat_map(|s| s.ids().iter().map(|&t| t as usize)).collect();
    let x = tape.embedding(p.get(&format!("{prefix}.embed"))?, &ids, &[b, n])?;
    let pos = tape.slice(p.get(&format!("{prefix}.pos"))?, 0, 0, n)?;
    let mut x = tape.add(x, pos)?;
    let h = cfg.heads;
    let mask = Tensor::<T>::from_fn(vec![b, h, n, n], |i| {
        if i % n >= valid[i / (h * n * n)] {
            T::lit(NEG_INF)
        } else {
            T::zero()
        }
    });
    let mask = tape.constant(mask);
    for l in 0..cfg.enc_layers {
        x = encoder_block(tape, p, &format!("{prefix}.l{l}"), x, cfg.heads, Some(mask))?;
    }
    let x = norm(tape, p, &format!("{prefix}.ln"), x)?;
    let weights = Tensor::<T>::from_fn(vec![b, 1, n], |i| {
        let (row, col) = (i / n, i % n);
        if col < valid[row] {
            T::one() / T::from_usize(valid[row]).expect("len")
        } else {
            T::zero()
        }
    });
    let w = tape.constant(weights);
    let pooled = tape.matmul(w, x)?;
    let pooled = tape.reshape(pooled, &[b, cfg.width])?;
    linear(tape, p, &format!("{prefix}.proj"), pooled)
}
