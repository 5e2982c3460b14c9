use super::config::ModelConfig;
use super::layers::{encoder_block, norm};
use super::params::Bound;
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{shape_err, Tape, Tensor, Var};

/// `[3, R, R] -> [M, 3 * patch^2]`. Patches are taken in row-major grid
/// order and flattened channel-major (`c, dy, dx`).
pub fn patchify<T: Scalar>(image: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 || s[1] != s[2] || patch == 0 || !s[1].is_multiple_of(patch) {
        return shape_err(format!("cannot split image {s:?} into {patch}px patches"));
    }
    let res = s[1];
    let side = res / patch;
    let pd = 3 * patch * patch;
    let src = image.data();
    let mut out = Vec::with_capacity(side * side * pd);
    for gy in 0..side {
        for gx in 0..side {
            for c in 0..3 {
                for dy in 0..patch {
                    let row = (c * res + gy * patch + dy) * res + gx * patch;
                    out.extend_from_slice(&src[row..row + patch]);
                }
            }
        }
    }
    Tensor::new(vec![side * side, pd], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(patches: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let s = patches.shape();
    let side = (s.first().copied().unwrap_or(0) as f64).sqrt() as usize;
    if s.len() != 2 || side * side != s[0] || s[1] != 3 * patch * patch {
        return shape_err(format!("patch table {s:?} is not a square grid of {patch}px patches"));
    }
    let res = side * patch;
    let mut out = vec![T::zero(); 3 * res * res];
    let mut it = patches.data().iter();
    for gy in 0..side {
        for gx in 0..side {
            for c in 0..3 {
                for dy in 0..patch {
                    for dx in 0..patch {
                        out[(c * res + gy * patch + dy) * res + gx * patch + dx] = *it.next().expect("len");
                    }
                }
            }
        }
    }
    Tensor::new(vec![3, res, res], out)
}

/// Patchifies a batch of `f32` images into `[B, M, 3 * patch^2]`.
pub fn patchify_batch<T: Scalar>(cfg: &ModelConfig, images: &[&Tensor<f32>]) -> Result<Tensor<T>> {
    let mut rows = Vec::with_capacity(images.len());
    for img in images {
        if img.shape() != [3, cfg.image_res, cfg.image_res] {
            return shape_err(format!("image {:?} does not match resolution {}", img.shape(), cfg.image_res));
        }
        rows.push(patchify(&img.cast::<T>(), cfg.patch_size)?);
    }
    Tensor::stack(&rows)
}

/// ViT encoder: linear patch embedding plus learned positions, pre-norm
/// blocks, final norm. Returns `[B, M, D]`.
pub fn encode_image<T: Scalar>(tape: &mut Tape<T>, p: &Bound, cfg: &ModelConfig, patches: Var) -> Result<Var> {
    let s = tape.shape(patches).to_vec();
    if s.len() != 3 || s[1] != cfg.num_patches() || s[2] != cfg.patch_dim() {
        return shape_err(format!("patches {s:?} do not match config"));
    }
    let x = tape.matmul(patches, p.get("enc.patch")?)?;
    let mut x = tape.add(x, p.get("enc.pos")?)?;
    for l in 0..cfg.enc_layers {
        x = encoder_block(tape, p, &format!("enc.l{l}"), x, cfg.heads, None)?;
    }
    norm(tape, p, "enc.ln", x)
}
