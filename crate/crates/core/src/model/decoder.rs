use super::config::ModelConfig;
use super::layers::{decoder_block, norm};
use super::params::Bound;
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{causal_mask, shape_err, Tape, Tensor, Var, NEG_INF};
use crate::tok::{TokenSeq, MASK};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DecodeMode {
    /// Teacher-forced, lower-triangular self-attention.
    Causal,
    /// All-MASK inputs, unmasked self-attention.
    Parallel,
}

impl std::fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DecodeMode::Causal => "causal",
            DecodeMode::Parallel => "parallel",
        })
    }
}

impl std::str::FromStr for DecodeMode {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "causal" => Ok(DecodeMode::Causal),
            "parallel" => Ok(DecodeMode::Parallel),
            _ => Err(crate::error::Error::Config(format!("unknown decode mode {s:?} (expected causal or parallel)"))),
        }
    }
}

/// Which self-attention mask a decoder call applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderMaskKind {
    None,
    Causal,
    /// Per-example masks for a batch mixing both modes.
    Mixed,
}

/// Decoder input ids for one caption: the sequence itself (its BOS shifts
/// the targets by one) in causal mode, all MASK in parallel mode.
pub fn decoder_inputs(seq: &TokenSeq, mode: DecodeMode) -> Vec<u32> {
    match mode {
        DecodeMode::Causal => seq.ids().to_vec(),
        DecodeMode::Parallel => vec![MASK; seq.len()],
    }
}

fn self_mask<T: Scalar>(
    tape: &mut Tape<T>,
    modes: &[DecodeMode],
    heads: usize,
    n: usize,
) -> (Option<Var>, DecoderMaskKind) {
    let causal = modes.iter().filter(|&&m| m == DecodeMode::Causal).count();
    if causal == 0 {
        (None, DecoderMaskKind::None)
    } else if causal == modes.len() {
        (Some(tape.constant(causal_mask(n))), DecoderMaskKind::Causal)
    } else {
        let per = n * n;
        let m = Tensor::from_fn(vec![modes.len(), heads, n, n], |i| {
            let (b, cell) = (i / (heads * per), i % per);
            if modes[b] == DecodeMode::Causal && cell % n > cell / n {
                T::lit(NEG_INF)
            } else {
                T::zero()
            }
        });
        (Some(tape.constant(m)), DecoderMaskKind::Mixed)
    }
}

/// Text decoder over `inputs` (`B` rows of equal length `n <= max_len`)
/// cross-attending to `enc` `[B, M, D]`. Returns logits `[B, n, V]`.
pub fn decode_text<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    cfg: &ModelConfig,
    enc: Var,
    inputs: &[Vec<u32>],
    modes: &[DecodeMode],
) -> Result<(Var, DecoderMaskKind)> {
    let b = inputs.len();
    let n = inputs.first().map_or(0, Vec::len);
    let es = tape.shape(enc).to_vec();
    if b == 0 || modes.len() != b || n == 0 || n > cfg.max_len || inputs.iter().any(|r| r.len() != n) {
        return shape_err(format!("decoder inputs must be {} rows of equal length <= {}", modes.len(), cfg.max_len));
    }
    if es.len() != 3 || es[0] != b || es[2] != cfg.width {
        return shape_err(format!("encoder output {es:?} for batch {b}"));
    }
    let ids: Vec<usize> = inputs.iter().flatten().map(|&t| t as usize).collect();
    let x = tape.embedding(p.get("dec.embed")?, &ids, &[b, n])?;
    let pos = tape.slice(p.get("dec.pos")?, 0, 0, n)?;
    let mut x = tape.add(x, pos)?;
    let (mask, kind) = self_mask(tape, modes, cfg.heads, n);
    for l in 0..cfg.dec_layers {
        x = decoder_block(tape, p, &format!("dec.l{l}"), x, enc, cfg.heads, mask)?;
    }
    let x = norm(tape, p, "dec.ln", x)?;
    let out = if cfg.share_dec_embeddings { tape.transpose(p.get("dec.embed")?)? } else { p.get("dec.out")? };
    let mut logits = tape.matmul(x, out)?;
    if p.has("dec.out.bias") {
        logits = tape.add(logits, p.get("dec.out.bias")?)?;
    }
    Ok((logits, kind))
}
