use crate::error::Result;
use crate::model::Params;
use crate::scalar::Scalar;
use crate::tensor::{shape_err, Tensor};

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moments per parameter name and the update count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Params<T>,
    pub v: Params<T>,
    pub t: u64,
}

impl<T: Scalar> Default for AdamState<T> {
    fn default() -> Self {
        Self { m: Params::new(), v: Params::new(), t: 0 }
    }
}

impl<T: Scalar> AdamState<T> {
    pub fn cast<U: Scalar>(&self) -> AdamState<U> {
        AdamState { m: self.m.cast(), v: self.v.cast(), t: self.t }
    }
}

impl AdamW {
    /// One update of every parameter present in `grads`; parameters absent
    /// from `grads` (frozen ones) are left untouched, moments included.
    ///
    /// `p <- p - lr * m_hat / (sqrt(v_hat) + eps) - wd * p`, the decay term
    /// only where `decays(name)`.
    pub fn step<T: Scalar>(
        &self,
        params: &mut Params<T>,
        grads: &Params<T>,
        state: &mut AdamState<T>,
        lr: f64,
        wd: f64,
        decays: impl Fn(&str) -> bool,
    ) -> Result<()> {
        for (name, g) in grads.iter() {
            let p = params.require(name)?;
            if p.shape() != g.shape() {
                return shape_err(format!("gradient {:?} for parameter {name} of shape {:?}", g.shape(), p.shape()));
            }
        }
        state.t += 1;
        let t = state.t as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(t));
        let c2 = T::lit(1.0 - self.beta2.powi(t));
        let (lr_t, eps) = (T::lit(lr), T::lit(self.eps));
        for (name, g) in grads.iter() {
            let shape = g.shape().to_vec();
            if state.m.get(name).is_none() {
                state.m.insert(name.clone(), Tensor::zeros(shape.clone()));
                state.v.insert(name.clone(), Tensor::zeros(shape));
            }
            let wd_t = if decays(name) { T::lit(wd) } else { T::zero() };
            let m = state.m.get_mut(name).expect("moment").data_mut();
            let v = state.v.get_mut(name).expect("moment").data_mut();
            let p = params.get_mut(name).expect("checked").data_mut();
            for (((pi, mi), vi), &gi) in p.iter_mut().zip(m).zip(v).zip(g.data()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + eps);
                *pi = *pi - lr_t * update - wd_t * *pi;
            }
        }
        Ok(())
    }
}

/// Global L2 norm of all gradients.
pub fn global_norm<T: Scalar>(grads: &Params<T>) -> f64 {
    grads.iter().flat_map(|(_, g)| g.data().iter()).map(|x| x.to_f64_lossy().powi(2)).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_by_global_norm<T: Scalar>(grads: &mut Params<T>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = T::lit(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}
