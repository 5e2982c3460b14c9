use super::{shape_err, Tensor};
use crate::error::Result;
use crate::scalar::Scalar;

/// Batched GEMM. A stride of 0 means the operand is shared by every batch
/// entry; a zero `c_stride` accumulates all entries into one output.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_batched<T: Scalar>(
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_stride: usize,
    trans_a: bool,
    b: &[T],
    b_stride: usize,
    trans_b: bool,
    c: &mut [T],
    c_stride: usize,
    beta: T,
) {
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    for i in 0..batch {
        let beta = if c_stride == 0 && i > 0 { T::one() } else { beta };
        let a = &a[i * a_stride..];
        let b = &b[i * b_stride..];
        let c = &mut c[i * c_stride..];
        T::gemm(m, k, n, a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
    }
}

pub(crate) struct MatmulDims {
    pub batch_shape: Vec<usize>,
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub a_batched: bool,
    pub b_batched: bool,
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatmulDims> {
    if a.len() < 2 || b.len() < 2 {
        return shape_err(format!("matmul needs rank >= 2, got {a:?} @ {b:?}"));
    }
    let (ab, am) = a.split_at(a.len() - 2);
    let (bb, bm) = b.split_at(b.len() - 2);
    if am[1] != bm[0] {
        return shape_err(format!("matmul inner extents differ: {a:?} @ {b:?}"));
    }
    let batch_shape = if ab == bb || bb.is_empty() {
        ab.to_vec()
    } else if ab.is_empty() {
        bb.to_vec()
    } else {
        return shape_err(format!("matmul batch extents differ: {a:?} @ {b:?}"));
    };
    Ok(MatmulDims {
        batch: batch_shape.iter().product(),
        batch_shape,
        m: am[0],
        k: am[1],
        n: bm[1],
        a_batched: !ab.is_empty(),
        b_batched: !bb.is_empty(),
    })
}

/// Plain (untracked) matrix product with leading batch extents.
pub fn matmul_values<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let d = matmul_dims(a.shape(), b.shape())?;
    let mut shape = d.batch_shape.clone();
    shape.extend([d.m, d.n]);
    let mut out = vec![T::zero(); d.batch * d.m * d.n];
    if d.a_batched && !d.b_batched {
        // One tall product instead of `batch` small ones.
        gemm_batched(1, d.batch * d.m, d.k, d.n, a.data(), 0, false, b.data(), 0, false, &mut out, 0, T::zero());
    } else {
        let sa = if d.a_batched { d.m * d.k } else { 0 };
        let sb = if d.b_batched { d.k * d.n } else { 0 };
        gemm_batched(d.batch, d.m, d.k, d.n, a.data(), sa, false, b.data(), sb, false, &mut out, d.m * d.n, T::zero());
    }
    Tensor::new(shape, out)
}
