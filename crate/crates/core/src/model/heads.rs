use super::layers::{linear, merge_heads, split_heads};
use super::params::{init_tensor, Bound, ParamKind, ParamSpec, Params};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{attention, shape_err, Tape, Tensor, Var};

/// Global average pooling `[B, M, D] -> [B, D]`.
pub fn pool_gap<T: Scalar>(tape: &mut Tape<T>, enc: Var) -> Result<Var> {
    tape.mean_axis(enc, 1)
}

/// Multihead attention pooling: one learned query attends over the
/// sequence, followed by an output projection. Parameters live under
/// `prefix`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MapHead {
    pub prefix: String,
    pub width: usize,
    pub heads: usize,
}

impl MapHead {
    pub fn new(prefix: impl Into<String>, width: usize, heads: usize) -> Self {
        Self { prefix: prefix.into(), width, heads }
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let d = self.width;
        let mut v =
            vec![ParamSpec { name: format!("{}.query", self.prefix), shape: vec![1, d], kind: ParamKind::Embedding }];
        for p in ["q", "k", "v", "o"] {
            v.push(ParamSpec { name: format!("{}.{p}", self.prefix), shape: vec![d, d], kind: ParamKind::Weight });
        }
        v
    }

    pub fn pool<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, enc: Var) -> Result<Var> {
        pool_map(tape, p, self, enc)
    }
}

pub fn init_map_head<T: Scalar>(head: &MapHead, seed: u64) -> Params<T> {
    let mut p = Params::new();
    for spec in head.specs() {
        let t = init_tensor(&spec, seed, 0);
        p.insert(spec.name, t);
    }
    p
}

/// `[B, M, D] -> [B, D]` through `head`.
pub fn pool_map<T: Scalar>(tape: &mut Tape<T>, p: &Bound, head: &MapHead, enc: Var) -> Result<Var> {
    let s = tape.shape(enc).to_vec();
    if s.len() != 3 || s[2] != head.width {
        return shape_err(format!("MAP head of width {} over {s:?}", head.width));
    }
    let (b, d, h) = (s[0], head.width, head.heads);
    let pre = &head.prefix;
    let q = linear(tape, p, &format!("{pre}.q"), p.get(&format!("{pre}.query"))?)?;
    // [1, D] is head-major, so it reshapes directly to [H, 1, Dh].
    let q = tape.reshape(q, &[h, 1, d / h])?;
    let expand = tape.constant(Tensor::zeros(vec![b, h, 1, d / h]));
    let q = tape.add(expand, q)?;
    let k = linear(tape, p, &format!("{pre}.k"), enc)?;
    let v = linear(tape, p, &format!("{pre}.v"), enc)?;
    let (k, v) = (split_heads(tape, k, h)?, split_heads(tape, v, h)?);
    let a = attention(tape, q, k, v, None)?;
    let merged = merge_heads(tape, a)?;
    let merged = tape.reshape(merged, &[b, d])?;
    linear(tape, p, &format!("{pre}.o"), merged)
}
