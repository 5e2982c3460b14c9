//! Shared transformer building blocks. Biases are used only when the
//! corresponding `.bias` tensor is bound.

use super::params::Bound;
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{attention, Tape, Var};

pub(crate) fn linear<T: Scalar>(tape: &mut Tape<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let y = tape.matmul(x, p.get(name)?)?;
    let bias = format!("{name}.bias");
    if p.has(&bias) {
        tape.add(y, p.get(&bias)?)
    } else {
        Ok(y)
    }
}

pub(crate) fn norm<T: Scalar>(tape: &mut Tape<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let y = tape.layer_norm(x, p.get(name)?)?;
    let bias = format!("{name}.bias");
    if p.has(&bias) {
        tape.add(y, p.get(&bias)?)
    } else {
        Ok(y)
    }
}

/// `[B, N, D] -> [B, H, N, D/H]`
pub(crate) fn split_heads<T: Scalar>(tape: &mut Tape<T>, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, n, d) = (s[0], s[1], s[2]);
    let r = tape.reshape(x, &[b, n, heads, d / heads])?;
    tape.permute(r, &[0, 2, 1, 3])
}

/// `[B, H, N, Dh] -> [B, N, H * Dh]`
pub(crate) fn merge_heads<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let p = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(p, &[s[0], s[2], s[1] * s[3]])
}

/// Multihead attention with projections `{prefix}.{q,k,v,o}`.
pub(crate) fn mha<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    prefix: &str,
    x_q: Var,
    x_kv: Var,
    heads: usize,
    mask: Option<Var>,
) -> Result<Var> {
    let q = linear(tape, p, &format!("{prefix}.q"), x_q)?;
    let k = linear(tape, p, &format!("{prefix}.k"), x_kv)?;
    let v = linear(tape, p, &format!("{prefix}.v"), x_kv)?;
    let (q, k, v) = (split_heads(tape, q, heads)?, split_heads(tape, k, heads)?, split_heads(tape, v, heads)?);
    let a = attention(tape, q, k, v, mask)?;
    let merged = merge_heads(tape, a)?;
    linear(tape, p, &format!("{prefix}.o"), merged)
}

pub(crate) fn mlp<T: Scalar>(tape: &mut Tape<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let h = norm(tape, p, &format!("{prefix}.ln"), x)?;
    let h = linear(tape, p, &format!("{prefix}.fc1"), h)?;
    let h = tape.gelu(h);
    linear(tape, p, &format!("{prefix}.fc2"), h)
}

/// Pre-norm self-attention block followed by a GELU MLP, with residuals.
pub(crate) fn encoder_block<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    prefix: &str,
    x: Var,
    heads: usize,
    mask: Option<Var>,
) -> Result<Var> {
    let h = norm(tape, p, &format!("{prefix}.attn.ln"), x)?;
    let a = mha(tape, p, &format!("{prefix}.attn"), h, h, heads, mask)?;
    let x = tape.add(x, a)?;
    let m = mlp(tape, p, &format!("{prefix}.mlp"), x)?;
    tape.add(x, m)
}

/// Self-attention, cross-attention to `memory`, then MLP; all pre-norm.
pub(crate) fn decoder_block<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    prefix: &str,
    x: Var,
    memory: Var,
    heads: usize,
    self_mask: Option<Var>,
) -> Result<Var> {
    let h = norm(tape, p, &format!("{prefix}.self.ln"), x)?;
    let a = mha(tape, p, &format!("{prefix}.self"), h, h, heads, self_mask)?;
    let x = tape.add(x, a)?;
    let h = norm(tape, p, &format!("{prefix}.cross.ln"), x)?;
    let c = mha(tape, p, &format!("{prefix}.cross"), h, memory, heads, None)?;
    let x = tape.add(x, c)?;
    let m = mlp(tape, p, &format!("{prefix}.mlp"), x)?;
    tape.add(x, m)
}
