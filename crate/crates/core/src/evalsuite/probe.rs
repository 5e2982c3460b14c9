use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::model::{bind, init_map_head, init_tensor, Bound, MapHead, ParamKind, ParamSpec, Params};
use crate::rng::{stream_rng, Stream};
use crate::scalar::Scalar;
use crate::tensor::{shape_err, Tape, Tensor, Var};
use crate::train::{clip_by_global_norm, lr_at, AdamState, AdamW, TrainConfig};

pub const PROBE_HEADER: &str = "kind,shots,class,accuracy";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ProbeKind {
    Linear,
    /// One GELU hidden layer.
    Mlp,
    /// Attention pooling over the un-pooled sequence, then a linear layer.
    Map,
}

impl fmt::Display for ProbeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProbeKind::Linear => "linear",
            ProbeKind::Mlp => "mlp",
            ProbeKind::Map => "map",
        })
    }
}

impl FromStr for ProbeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ProbeKind::Linear),
            "mlp" => Ok(ProbeKind::Mlp),
            "map" => Ok(ProbeKind::Map),
            _ => Err(Error::Config(format!("unknown probe kind {s:?} (expected linear, mlp or map)"))),
        }
    }
}

/// Frozen features: pooled `[K, D]` or sequences `[K, M, D]`.
#[derive(Clone, Debug, PartialEq)]
pub enum Features<T> {
    Pooled(Tensor<T>),
    Sequence(Tensor<T>),
}

impl<T: Scalar> Features<T> {
    pub fn len(&self) -> usize {
        self.tensor().shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn tensor(&self) -> &Tensor<T> {
        match self {
            Features::Pooled(t) | Features::Sequence(t) => t,
        }
    }

    fn width(&self) -> usize {
        self.tensor().last_dim()
    }

    /// Block of one example: `D` or `M * D` values.
    fn row(&self, i: usize) -> &[T] {
        let t = self.tensor();
        let n = t.numel() / t.shape()[0];
        &t.data()[i * n..(i + 1) * n]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    /// Each seed draws its own split; results are averaged.
    pub seeds: usize,
    pub steps: u64,
    pub lrs: Vec<f64>,
    pub weight_decays: Vec<f64>,
    pub hidden: usize,
    pub heads: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { seeds: 3, steps: 300, lrs: vec![1e-2, 1e-3], weight_decays: vec![0.0, 1e-3], hidden: 256, heads: 4 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub kind: ProbeKind,
    /// Training examples per class.
    pub shots: usize,
    /// Mean test accuracy over seeds.
    pub accuracy: f64,
    pub per_class: Vec<f64>,
    pub per_seed: Vec<f64>,
}

/// CSV rows for `results`: one per class and one `all` row per result.
pub fn probe_csv(results: &[ProbeResult]) -> String {
    let mut s = format!("{PROBE_HEADER}\n");
    for r in results {
        for (c, a) in r.per_class.iter().enumerate() {
            s.push_str(&format!("{},{},{c},{a}\n", r.kind, r.shots));
        }
        s.push_str(&format!("{},{},all,{}\n", r.kind, r.shots, r.accuracy));
    }
    s
}

/// `k`-shot probe with the default [`ProbeConfig`].
pub fn kshot_probe<T: Scalar>(
    features: &Features<T>,
    labels: &[usize],
    k: usize,
    kind: ProbeKind,
    seed: u64,
) -> Result<ProbeResult> {
    kshot_probe_with(features, labels, k, kind, seed, &ProbeConfig::default())
}

struct Split {
    train: Vec<usize>,
    val: Vec<usize>,
    test: Vec<usize>,
}

/// Per class: `k` shuffled examples for training, the rest alternating
/// between validation and test.
fn split(labels: &[usize], classes: usize, k: usize, seed: u64, round: u64) -> Result<Split> {
    let mut s = Split { train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.len() < k + 2 {
            return Err(Error::InsufficientShots { class: c, have: idx.len(), need: k + 2 });
        }
        idx.shuffle(&mut stream_rng(seed, Stream::Probe, &[round, c as u64]));
        s.train.extend_from_slice(&idx[..k]);
        for (j, &i) in idx[k..].iter().enumerate() {
            if j % 2 == 0 { &mut s.val } else { &mut s.test }.push(i);
        }
    }
    Ok(s)
}

/// Per-dimension mean and inverse standard deviation over the rows of
/// `train` (each row of `width`-sized vectors).
fn standardizer<T: Scalar>(features: &Features<T>, train: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let d = features.width();
    let (mut sum, mut sq, mut n) = (vec![0.0; d], vec![0.0; d], 0.0);
    for &i in train {
        for v in features.row(i).chunks(d) {
            for (j, x) in v.iter().enumerate() {
                let x = x.to_f64_lossy();
                sum[j] += x;
                sq[j] += x * x;
            }
            n += 1.0;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let inv = sq.iter().zip(&mean).map(|(q, m)| 1.0 / (q / n - m * m).max(0.0).sqrt().max(1e-6)).collect();
    (mean, inv)
}

struct Probe {
    kind: ProbeKind,
    classes: usize,
    map: Option<MapHead>,
}

impl Probe {
    fn init<T: Scalar>(&self, width: usize, hidden: usize, seed: u64) -> Params<T> {
        let spec = |name: &str, shape: Vec<usize>, kind| ParamSpec { name: name.into(), shape, kind };
        let mut specs = Vec::new();
        let top = match self.kind {
            ProbeKind::Mlp => {
                specs.push(spec("probe.fc1", vec![width, hidden], ParamKind::Weight));
                specs.push(spec("probe.fc1.bias", vec![hidden], ParamKind::Bias));
                hidden
            }
            _ => width,
        };
        specs.push(spec("probe.out", vec![top, self.classes], ParamKind::Weight));
        specs.push(spec("probe.out.bias", vec![self.classes], ParamKind::Bias));
        let mut p = match &self.map {
            Some(h) => init_map_head(h, seed),
            None => Params::new(),
        };
        for s in specs {
            let t = init_tensor(&s, seed, 0);
            p.insert(s.name, t);
        }
        p
    }

    fn logits<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let mut h = match &self.map {
            Some(head) => head.pool(tape, p, x)?,
            None => x,
        };
        if self.kind == ProbeKind::Mlp {
            let y = tape.matmul(h, p.get("probe.fc1")?)?;
            let y = tape.add(y, p.get("probe.fc1.bias")?)?;
            h = tape.gelu(y);
        }
        let y = tape.matmul(h, p.get("probe.out")?)?;
        tape.add(y, p.get("probe.out.bias")?)
    }
}

/// Standardized feature block for `rows`, shaped for the probe input.
fn gather<T: Scalar>(features: &Features<T>, rows: &[usize], norm: &(Vec<f64>, Vec<f64>)) -> Result<Tensor<T>> {
    let d = features.width();
    let mut data = Vec::with_capacity(rows.len() * features.row(0).len());
    for &i in rows {
        for (j, x) in features.row(i).iter().enumerate() {
            data.push(T::lit((x.to_f64_lossy() - norm.0[j % d]) * norm.1[j % d]));
        }
    }
    let mut shape = features.tensor().shape().to_vec();
    shape[0] = rows.len();
    Tensor::new(shape, data)
}

fn predict<T: Scalar>(probe: &Probe, params: &Params<T>, x: &Tensor<T>) -> Result<Vec<usize>> {
    let mut tape = Tape::new();
    let p = bind(&mut tape, params, |_| false);
    let xv = tape.constant(x.clone());
    let logits = probe.logits(&mut tape, &p, xv)?;
    let lv = tape.value(logits);
    Ok(lv
        .data()
        .chunks(probe.classes)
        .map(|r| {
            let s: Vec<f64> = r.iter().map(|v| v.to_f64_lossy()).collect();
            crate::objective::argmax(&s)
        })
        .collect())
}

fn fit<T: Scalar>(
    probe: &Probe,
    x: &Tensor<T>,
    y: &[usize],
    lr: f64,
    wd: f64,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<Params<T>> {
    let mut params = probe.init(x.last_dim(), cfg.hidden, seed);
    let mut opt = AdamState::default();
    let mut sched = TrainConfig::new(cfg.steps);
    sched.base_lr = lr;
    let ones = vec![T::one(); y.len()];
    for s in 0..cfg.steps {
        let mut tape = Tape::new();
        let p = bind(&mut tape, &params, |_| true);
        let xv = tape.constant(x.clone());
        let logits = probe.logits(&mut tape, &p, xv)?;
        let loss = tape.cross_entropy(logits, y, &ones)?;
        let mut grads = tape.backward(loss)?;
        let mut g = p.grads(&tape, &mut grads);
        drop(tape);
        clip_by_global_norm(&mut g, 1.0);
        let lr_s = lr_at(s + 1, &sched);
        AdamW::default().step(&mut params, &g, &mut opt, lr_s, wd * lr_s / lr, |n| {
            !n.ends_with(".bias") && !n.ends_with(".query")
        })?;
    }
    Ok(params)
}

fn accuracy(pred: &[usize], rows: &[usize], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(rows).filter(|&(p, &i)| *p == labels[i]).count();
    hits as f64 / rows.len() as f64
}

/// Trains a probe on `k` examples per class of frozen `features` and reports
/// held-out accuracy. Learning rate and weight decay are picked per seed on
/// a validation split disjoint from the test split.
pub fn kshot_probe_with<T: Scalar>(
    features: &Features<T>,
    labels: &[usize],
    k: usize,
    kind: ProbeKind,
    seed: u64,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    if features.len() != labels.len() {
        return Err(Error::CountMismatch(features.len(), labels.len()));
    }
    let t = features.tensor();
    match (features, kind) {
        (Features::Sequence(_), ProbeKind::Map) if t.ndim() == 3 => {}
        (Features::Pooled(_), ProbeKind::Linear | ProbeKind::Mlp) if t.ndim() == 2 => {}
        _ => return shape_err(format!("{kind} probe cannot use features of shape {:?}", t.shape())),
    }
    if k == 0 || cfg.seeds == 0 || cfg.steps == 0 || cfg.lrs.is_empty() || cfg.weight_decays.is_empty() {
        return Err(Error::Config("probe needs k, seeds, steps and a non-empty sweep".into()));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let d = features.width();
    if kind == ProbeKind::Map && (cfg.heads == 0 || !d.is_multiple_of(cfg.heads)) {
        return Err(Error::Config(format!("MAP probe heads {} must divide width {d}", cfg.heads)));
    }
    let probe = Probe { kind, classes, map: (kind == ProbeKind::Map).then(|| MapHead::new("probe.map", d, cfg.heads)) };
    let (mut per_seed, mut per_class) = (Vec::new(), vec![0.0; classes]);
    for round in 0..cfg.seeds as u64 {
        let sp = split(labels, classes, k, seed, round)?;
        let norm = standardizer(features, &sp.train);
        let (xtr, xva, xte) = (
            gather(features, &sp.train, &norm)?,
            gather(features, &sp.val, &norm)?,
            gather(features, &sp.test, &norm)?,
        );
        let ytr: Vec<usize> = sp.train.iter().map(|&i| labels[i]).collect();
        let mut best: Option<(f64, Params<T>)> = None;
        for &lr in &cfg.lrs {
            for &wd in &cfg.weight_decays {
                let params = fit(&probe, &xtr, &ytr, lr, wd, cfg, seed ^ round)?;
                let val = accuracy(&predict(&probe, &params, &xva)?, &sp.val, labels);
                if best.as_ref().is_none_or(|(b, _)| val > *b) {
                    best = Some((val, params));
                }
            }
        }
        let (_, params) = best.expect("non-empty sweep");
        let pred = predict(&probe, &params, &xte)?;
        per_seed.push(accuracy(&pred, &sp.test, labels));
        for (c, slot) in per_class.iter_mut().enumerate() {
            let rows: Vec<usize> = (0..sp.test.len()).filter(|&j| labels[sp.test[j]] == c).collect();
            let hits = rows.iter().filter(|&&j| pred[j] == c).count();
            *slot += hits as f64 / rows.len() as f64 / cfg.seeds as f64;
        }
    }
    let accuracy = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
    Ok(ProbeResult { kind, shots: k, accuracy, per_class, per_seed })
}
