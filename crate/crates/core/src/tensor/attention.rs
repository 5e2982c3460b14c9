use super::{shape_err, Tape, Tensor, Var};
use crate::error::Result;
use crate::scalar::Scalar;

/// Additive mask value for blocked positions.
pub const NEG_INF: f64 = -1e9;

/// Masked scaled dot-product attention:
/// `softmax(q k^T / sqrt(d_h) + mask) v` over `[.., N, d_h]` operands.
///
/// `mask` is additive (0 or [`NEG_INF`]) and broadcasts over leading axes.
pub fn attention<T: Scalar>(tape: &mut Tape<T>, q: Var, k: Var, v: Var, mask: Option<Var>) -> Result<Var> {
    let (qs, ks, vs) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
    let dh = *qs.last().unwrap_or(&0);
    if qs.len() < 2 || ks.last() != Some(&dh) || ks[..ks.len() - 2] != qs[..qs.len() - 2] {
        return shape_err(format!("attention q {qs:?} vs k {ks:?}"));
    }
    if vs.len() != ks.len() || vs[..vs.len() - 1] != ks[..ks.len() - 1] {
        return shape_err(format!("attention k {ks:?} vs v {vs:?}"));
    }
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, T::one() / T::from_usize(dh).expect("dh").sqrt());
    let logits = match mask {
        Some(m) => tape.add(scaled, m)?,
        None => scaled,
    };
    let weights = tape.softmax(logits);
    tape.matmul(weights, v)
}

/// `[n, n]` lower-triangular additive mask: row `t` sees columns `0..=t`.
pub fn causal_mask<T: Scalar>(n: usize) -> Tensor<T> {
    Tensor::from_fn(vec![n, n], |i| if i % n > i / n { T::lit(NEG_INF) } else { T::zero() })
}
