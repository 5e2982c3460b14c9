use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::scalar::Scalar;
use crate::tensor::{Grads, Tape, Tensor, Var};

/// Standard deviation of the truncated-normal initializer.
pub const INIT_STD: f64 = 0.02;
/// Initial contrastive temperature.
pub const INIT_TEMPERATURE: f64 = 0.07;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Embedding,
    Norm,
    Bias,
    Temperature,
}

impl ParamKind {
    /// Norm scales, biases and the temperature are excluded from weight decay.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::Embedding)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamSpec {
    fn new(name: impl Into<String>, shape: &[usize], kind: ParamKind) -> Self {
        Self { name: name.into(), shape: shape.to_vec(), kind }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

fn attn_specs(out: &mut Vec<ParamSpec>, prefix: &str, d: usize, biases: bool) {
    out.push(ParamSpec::new(format!("{prefix}.ln"), &[d], ParamKind::Norm));
    if biases {
        out.push(ParamSpec::new(format!("{prefix}.ln.bias"), &[d], ParamKind::Bias));
    }
    for p in ["q", "k", "v", "o"] {
        out.push(ParamSpec::new(format!("{prefix}.{p}"), &[d, d], ParamKind::Weight));
        if biases {
            out.push(ParamSpec::new(format!("{prefix}.{p}.bias"), &[d], ParamKind::Bias));
        }
    }
}

fn mlp_specs(out: &mut Vec<ParamSpec>, prefix: &str, d: usize, hidden: usize, biases: bool) {
    out.push(ParamSpec::new(format!("{prefix}.ln"), &[d], ParamKind::Norm));
    if biases {
        out.push(ParamSpec::new(format!("{prefix}.ln.bias"), &[d], ParamKind::Bias));
    }
    out.push(ParamSpec::new(format!("{prefix}.fc1"), &[d, hidden], ParamKind::Weight));
    if biases {
        out.push(ParamSpec::new(format!("{prefix}.fc1.bias"), &[hidden], ParamKind::Bias));
    }
    out.push(ParamSpec::new(format!("{prefix}.fc2"), &[hidden, d], ParamKind::Weight));
    if biases {
        out.push(ParamSpec::new(format!("{prefix}.fc2.bias"), &[d], ParamKind::Bias));
    }
}

/// Bias-free pre-norm encoder stack under `prefix`.
fn encoder_stack(out: &mut Vec<ParamSpec>, prefix: &str, cfg: &ModelConfig) {
    for l in 0..cfg.enc_layers {
        attn_specs(out, &format!("{prefix}.l{l}.attn"), cfg.width, false);
        mlp_specs(out, &format!("{prefix}.l{l}.mlp"), cfg.width, cfg.mlp_dim, false);
    }
    out.push(ParamSpec::new(format!("{prefix}.ln"), &[cfg.width], ParamKind::Norm));
}

/// Every learned tensor of `cfg`, in a fixed order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.width;
    let mut out = vec![
        ParamSpec::new("enc.patch", &[cfg.patch_dim(), d], ParamKind::Weight),
        ParamSpec::new("enc.pos", &[cfg.num_patches(), d], ParamKind::Embedding),
    ];
    encoder_stack(&mut out, "enc", cfg);
    if cfg.objective.is_captioning() {
        let b = cfg.dec_biases;
        out.push(ParamSpec::new("dec.embed", &[cfg.vocab, d], ParamKind::Embedding));
        out.push(ParamSpec::new("dec.pos", &[cfg.max_len, d], ParamKind::Embedding));
        for l in 0..cfg.dec_layers {
            attn_specs(&mut out, &format!("dec.l{l}.self"), d, b);
            attn_specs(&mut out, &format!("dec.l{l}.cross"), d, b);
            mlp_specs(&mut out, &format!("dec.l{l}.mlp"), d, cfg.mlp_dim, b);
        }
        out.push(ParamSpec::new("dec.ln", &[d], ParamKind::Norm));
        if b {
            out.push(ParamSpec::new("dec.ln.bias", &[d], ParamKind::Bias));
        }
        if !cfg.share_dec_embeddings {
            out.push(ParamSpec::new("dec.out", &[d, cfg.vocab], ParamKind::Weight));
        }
        if b {
            out.push(ParamSpec::new("dec.out.bias", &[cfg.vocab], ParamKind::Bias));
        }
    } else {
        out.push(ParamSpec::new("img.proj", &[d, d], ParamKind::Weight));
        out.push(ParamSpec::new("txt.embed", &[cfg.vocab, d], ParamKind::Embedding));
        out.push(ParamSpec::new("txt.pos", &[cfg.max_len, d], ParamKind::Embedding));
        encoder_stack(&mut out, "txt", cfg);
        out.push(ParamSpec::new("txt.proj", &[d, d], ParamKind::Weight));
        out.push(ParamSpec::new("log_temp", &[], ParamKind::Temperature));
    }
    out
}

fn name_key(name: &str) -> u64 {
    // FNV-1a, so a tensor's init depends on its name and not its position.
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// Draws one tensor. `salt` separates re-draws of the same name.
pub(crate) fn init_tensor<T: Scalar>(spec: &ParamSpec, seed: u64, salt: u64) -> Tensor<T> {
    match spec.kind {
        ParamKind::Norm => Tensor::ones(spec.shape.clone()),
        ParamKind::Bias => Tensor::zeros(spec.shape.clone()),
        ParamKind::Temperature => Tensor::full(spec.shape.clone(), T::lit(INIT_TEMPERATURE.ln())),
        ParamKind::Weight | ParamKind::Embedding => {
            let mut rng = stream_rng(seed, Stream::Init, &[name_key(&spec.name), salt]);
            Tensor::from_fn(spec.shape.clone(), |_| loop {
                let z: f64 = rng.sample(StandardNormal);
                if z.abs() <= 2.0 {
                    break T::lit(z * INIT_STD);
                }
            })
        }
    }
}

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for Params<T> {
    fn default() -> Self {
        Self { tensors: BTreeMap::new() }
    }
}

impl<T: Scalar> Params<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Option<Tensor<T>> {
        self.tensors.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name).ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// Copies every tensor whose name starts with `prefix` from `other`.
    pub fn copy_prefix_from(&mut self, other: &Params<T>, prefix: &str) {
        for (k, v) in other.iter().filter(|(k, _)| k.starts_with(prefix)) {
            self.tensors.insert(k.clone(), v.clone());
        }
    }
}

/// Seed-deterministic initialization of every tensor in [`param_specs`].
pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<Params<T>> {
    cfg.validate()?;
    let mut p = Params::new();
    for spec in param_specs(cfg) {
        let t = init_tensor(&spec, seed, 0);
        p.insert(spec.name, t);
    }
    Ok(p)
}

/// Parameters placed on a tape, looked up by name.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::Config(format!("parameter {name} not bound")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Collects per-name gradients for every trainable binding.
    pub fn grads<T: Scalar>(&self, tape: &Tape<T>, grads: &mut Grads<T>) -> Params<T> {
        let mut out = Params::new();
        for (name, &v) in &self.vars {
            if !tape.requires_grad(v) {
                continue;
            }
            let g = grads.take(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v).to_vec()));
            out.insert(name.clone(), g);
        }
        out
    }
}

/// Puts every parameter on `tape`; names for which `trainable` is false are
/// recorded as constants.
pub fn bind<T: Scalar>(tape: &mut Tape<T>, params: &Params<T>, trainable: impl Fn(&str) -> bool) -> Bound {
    let vars = params
        .iter()
        .map(|(name, t)| {
            let v = if trainable(name) { tape.param(t.clone()) } else { tape.constant(t.clone()) };
            (name.clone(), v)
        })
        .collect();
    Bound { vars }
}
