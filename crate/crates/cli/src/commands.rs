use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use cappa_core::datagen::{
    generate, grammar_corpus, read_dataset, write_dataset, Example, GenOptions, PerturbKind, NUM_CLASSES,
};
use cappa_core::evalsuite::{
    encode_sequences, extract_features, kshot_probe_with, perturbation_benchmark, probe_csv, retrieval_eval,
    CaptionScorer, ContrastiveScorer, FeatureMode, Features, ProbeConfig, ProbeKind, Scorer,
};
use cappa_core::model::{bind, DecodeMode, ModelConfig, Objective};
use cappa_core::objective::{argmax, clip_text_embed};
use cappa_core::tensor::Tape;
use cappa_core::tok::{encode, Vocab};
use cappa_core::train::{
    load_checkpoint, save_checkpoint, Checkpoint, TrainConfig, TrainData, TrainState, Trainer, METRICS_HEADER,
};
use cappa_core::Tensor;

use crate::settings::{existing, print_header, writable, Settings};
use crate::{CliError, EvalArgs, GenDataArgs, ProbeArgs, ScoreArgs, TrainArgs};

type Res<T = ()> = Result<T, CliError>;

fn flag<V: ToString>(key: &'static str, v: Option<V>) -> (&'static str, Option<String>) {
    (key, v.map(|v| v.to_string()))
}

fn path_flag(key: &'static str, v: Option<PathBuf>) -> (&'static str, Option<String>) {
    (key, v.map(|p| p.display().to_string()))
}

fn switch(key: &'static str, on: bool) -> (&'static str, Option<String>) {
    (key, on.then(|| "true".to_owned()))
}

fn entry(k: &str, v: impl ToString) -> (String, String) {
    (k.to_owned(), v.to_string())
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Internal(format!("{}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Res {
    std::fs::write(path, text).map_err(io_err(path))
}

fn load_examples(path: &Path) -> Res<Vec<Example>> {
    let ex = read_dataset(path)?;
    if ex.is_empty() {
        return Err(CliError::BadInput(format!("{} holds no examples", path.display())));
    }
    Ok(ex)
}

fn check_resolution(ex: &[Example], model: &ModelConfig) -> Res {
    match ex.iter().find(|e| e.resolution() != model.image_res) {
        Some(e) => Err(CliError::BadInput(format!(
            "images are {}px but the model expects {}px",
            e.resolution(),
            model.image_res
        ))),
        None => Ok(()),
    }
}

const GEN_KEYS: [&str; 7] = ["n", "seed", "resolution", "min_objects", "max_objects", "noise", "out"];

pub fn gen_data(a: GenDataArgs) -> Res {
    let flags = vec![
        flag("n", a.n),
        flag("seed", a.seed),
        flag("resolution", a.resolution),
        flag("noise", a.noise),
        path_flag("out", a.out),
    ];
    let s = Settings::load(&GEN_KEYS, a.common.config.as_deref(), flags, &a.common.set)?;
    let n: usize = s.parse("n", 0)?;
    if n == 0 {
        return Err(CliError::BadInput("n must be at least 1 (pass --n)".into()));
    }
    let mut opts =
        GenOptions::new(n, s.parse("seed", 0)?, s.parse("resolution", cappa_core::datagen::DEFAULT_RESOLUTION)?);
    let (lo, hi) = (s.parse("min_objects", opts.min_objects)?, s.parse("max_objects", opts.max_objects)?);
    opts = opts.objects(lo, hi);
    opts = opts.noise(s.parse("noise", 0.0)?);
    let out = s.path("out").ok_or_else(|| CliError::BadInput("missing required setting out".into()))?;
    writable(&out)?;
    print_header(
        "gen-data",
        &[
            entry("n", opts.n),
            entry("seed", opts.seed),
            entry("resolution", opts.resolution),
            entry("min_objects", opts.min_objects),
            entry("max_objects", opts.max_objects),
            entry("noise", opts.noise),
            entry("out", out.display()),
        ],
    );
    let ex = generate(&opts)?;
    write_dataset(&out, &ex)?;
    let vocab = Vocab::build(&grammar_corpus());
    println!("examples={} vocab={} classes={NUM_CLASSES} out={}", ex.len(), vocab.len(), out.display());
    Ok(())
}

const TRAIN_EXTRA: [&str; 7] = ["data", "out", "metrics", "init", "resume", "log_every", "until"];

fn train_keys() -> Vec<&'static str> {
    ModelConfig::KEYS.iter().chain(&TrainConfig::KEYS).chain(&TRAIN_EXTRA).copied().collect()
}

/// The model and training configuration a train run uses, plus the
/// checkpoint it starts from, if any.
fn resolve_train(s: &Settings) -> Res<(ModelConfig, TrainConfig, Vocab, Option<Checkpoint>)> {
    let (init, resume) = (s.path("init"), s.path("resume"));
    if init.is_some() && resume.is_some() {
        return Err(CliError::BadInput("init and resume are exclusive".into()));
    }
    let ckpt = match init.as_ref().or(resume.as_ref()) {
        Some(_) => Some(load_checkpoint(&existing(s, if init.is_some() { "init" } else { "resume" })?)?),
        None => None,
    };
    let vocab = ckpt.as_ref().map_or_else(|| Vocab::build(&grammar_corpus()), |c| c.vocab.clone());
    let model_overrides: Vec<&str> = ModelConfig::KEYS.iter().copied().filter(|k| s.get(k).is_some()).collect();
    let mut model = match &ckpt {
        Some(c) => {
            if resume.is_some() && !model_overrides.is_empty() {
                return Err(CliError::BadInput(format!(
                    "a resumed run keeps its checkpoint's model; drop {}",
                    model_overrides.join(", ")
                )));
            }
            c.model.clone()
        }
        None => ModelConfig::desk(s.parse("objective", Objective::Cap)?, vocab.len()),
    };
    for k in model_overrides.iter().filter(|&&k| k != "vocab") {
        model.apply_kv(k, s.get(k).expect("present"))?;
    }
    if let Some(v) = s.get("vocab") {
        if v != vocab.len().to_string() {
            return Err(CliError::BadInput(format!("vocab is fixed by the tokenizer at {}, got {v}", vocab.len())));
        }
    }
    model.validate()?;
    let mut cfg = match (&ckpt, resume.is_some()) {
        (Some(c), true) => c.train.clone(),
        _ => TrainConfig::new(s.parse("steps", 1000)?),
    };
    for k in TrainConfig::KEYS {
        if let Some(v) = s.get(k) {
            cfg.apply_kv(k, v)?;
        }
    }
    if s.get("steps").is_some() && s.get("warmup_steps").is_none() && resume.is_none() {
        cfg.warmup_steps = cappa_core::train::default_warmup(cfg.steps);
    }
    cfg.validate()?;
    Ok((model, cfg, vocab, ckpt))
}

pub fn train(a: TrainArgs) -> Res {
    let flags = vec![
        path_flag("data", a.data),
        path_flag("out", a.out),
        path_flag("metrics", a.metrics),
        path_flag("init", a.init),
        path_flag("resume", a.resume),
        flag("objective", a.objective),
        flag("steps", a.steps),
        flag("batch_size", a.batch_size),
        flag("base_lr", a.lr),
        flag("weight_decay", a.weight_decay),
        flag("seed", a.seed),
        flag("parallel_fraction", a.parallel_fraction),
        flag("reverse_prob", a.reverse_prob),
        flag("freeze", a.freeze),
        flag("dec_layers", a.dec_layers),
        switch("share_dec_embeddings", a.share_embeddings),
        switch("dec_biases", a.dec_biases),
        switch("reinit_xattn", a.reinit_xattn),
        switch("blind", a.blind),
        flag("mixing", a.mixing),
    ];
    let s = Settings::load(&train_keys(), a.common.config.as_deref(), flags, &a.common.set)?;
    let data_path = existing(&s, "data")?;
    let out = s.path("out").ok_or_else(|| CliError::BadInput("missing required setting out".into()))?;
    writable(&out)?;
    let metrics = s.path("metrics").unwrap_or_else(|| PathBuf::from(format!("{}.metrics.csv", out.display())));
    writable(&metrics)?;
    let log_every: u64 = s.parse("log_every", 100)?;
    let (model, cfg, vocab, ckpt) = resolve_train(&s)?;
    let until: u64 = s.parse("until", cfg.steps)?;

    let mut header: Vec<(String, String)> = model.to_kv().into_iter().chain(cfg.to_kv()).collect();
    header.push(entry("data", data_path.display()));
    header.push(entry("out", out.display()));
    header.push(entry("metrics", metrics.display()));
    for k in ["init", "resume"] {
        if let Some(p) = s.get(k) {
            header.push(entry(k, p));
        }
    }
    header.push(entry("log_every", log_every));
    header.push(entry("until", until));
    print_header("train", &header);

    let ex = load_examples(&data_path)?;
    check_resolution(&ex, &model)?;
    let data = TrainData::from_examples(&ex, &vocab, model.max_len)?;
    let resuming = s.get("resume").is_some();
    let mut trainer = match ckpt {
        Some(c) if resuming => {
            let state = TrainState { params: c.params, opt: c.opt, step: c.step };
            Trainer::<f32>::resume(model, cfg, &data, state)?
        }
        Some(c) => Trainer::with_params(model, cfg, &data, c.params)?,
        None => Trainer::new(model, cfg, &data)?,
    };
    let file = File::create(&metrics).map_err(io_err(&metrics))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{METRICS_HEADER}").map_err(io_err(&metrics))?;
    let mut last = None;
    while !trainer.done() && trainer.state.step < until {
        let row = trainer.step()?;
        writeln!(w, "{}", row.csv_line()).map_err(io_err(&metrics))?;
        if log_every > 0 && row.step % log_every == 0 {
            w.flush().map_err(io_err(&metrics))?;
            eprintln!("step {} lr {:.3e} loss {:.4}", row.step, row.lr, row.loss);
        }
        last = Some(row);
    }
    w.flush().map_err(io_err(&metrics))?;
    save_checkpoint(&out, &trainer.checkpoint(&vocab))?;
    match last {
        Some(r) => println!("steps={} final_loss={} checkpoint={}", trainer.state.step, r.loss, out.display()),
        None => println!("steps={} (nothing to do) checkpoint={}", trainer.state.step, out.display()),
    }
    Ok(())
}

fn parse_kinds(list: &str) -> Res<Vec<PerturbKind>> {
    list.split(',')
        .map(str::trim)
        .filter(|k| !k.is_empty())
        .map(|k| {
            PerturbKind::from_name(k).ok_or_else(|| {
                let names: Vec<&str> = PerturbKind::ALL.iter().map(|k| k.name()).collect();
                CliError::BadInput(format!("unknown perturbation kind {k:?} (expected {})", names.join(", ")))
            })
        })
        .collect()
}

fn take_n(mut ex: Vec<Example>, n: usize) -> Vec<Example> {
    if n > 0 {
        ex.truncate(n);
    }
    ex
}

const EVAL_KEYS: [&str; 8] = ["ckpt", "data", "n", "kinds", "seed", "out", "blind_ckpt", "retrieval_out"];

pub fn eval(a: EvalArgs) -> Res {
    let flags = vec![
        path_flag("ckpt", a.ckpt),
        path_flag("data", a.data),
        flag("n", a.n),
        flag("kinds", a.kinds),
        flag("seed", a.seed),
        path_flag("out", a.out),
        path_flag("blind_ckpt", a.blind_ckpt),
        path_flag("retrieval_out", a.retrieval_out),
    ];
    let s = Settings::load(&EVAL_KEYS, a.common.config.as_deref(), flags, &a.common.set)?;
    let ckpt_path = existing(&s, "ckpt")?;
    let data_path = existing(&s, "data")?;
    let blind_path = s.get("blind_ckpt").map(|_| existing(&s, "blind_ckpt")).transpose()?;
    let all: Vec<&str> = PerturbKind::ALL.iter().map(|k| k.name()).collect();
    let kinds = parse_kinds(s.get("kinds").unwrap_or(&all.join(",")))?;
    let (n, seed): (usize, u64) = (s.parse("n", 0)?, s.parse("seed", 0)?);
    let (out, retrieval_out) = (s.path("out"), s.path("retrieval_out"));
    for p in out.iter().chain(&retrieval_out) {
        writable(p)?;
    }
    let mut header = vec![
        entry("ckpt", ckpt_path.display()),
        entry("data", data_path.display()),
        entry("n", n),
        entry("kinds", kinds.iter().map(|k| k.name()).collect::<Vec<_>>().join(",")),
        entry("seed", seed),
    ];
    for (k, p) in [("out", &out), ("blind_ckpt", &blind_path), ("retrieval_out", &retrieval_out)] {
        if let Some(p) = p {
            header.push(entry(k, p.display()));
        }
    }
    print_header("eval", &header);

    let ckpt = load_checkpoint(&ckpt_path)?;
    let blind_ckpt = blind_path.as_deref().map(load_checkpoint).transpose()?;
    let ex = take_n(load_examples(&data_path)?, n);
    check_resolution(&ex, &ckpt.model)?;
    let (model, params, vocab) = (&ckpt.model, &ckpt.params, &ckpt.vocab);
    let mut scorers: Vec<Box<dyn Scorer + '_>> = Vec::new();
    if model.objective.is_captioning() {
        scorers.push(Box::new(CaptionScorer::new(model, params, vocab, DecodeMode::Causal)));
        scorers.push(Box::new(CaptionScorer::new(model, params, vocab, DecodeMode::Parallel)));
        scorers.push(Box::new(CaptionScorer::new(model, params, vocab, DecodeMode::Causal).blind()));
    } else {
        scorers.push(Box::new(ContrastiveScorer::new(model, params, vocab)?));
    }
    if let Some(b) = &blind_ckpt {
        if !b.model.objective.is_captioning() {
            return Err(CliError::BadInput("blind_ckpt must be a captioning checkpoint".into()));
        }
        if model.objective.is_captioning() {
            scorers.pop();
        }
        scorers.push(Box::new(CaptionScorer::new(&b.model, &b.params, &b.vocab, DecodeMode::Causal).blind()));
    }
    let refs: Vec<&dyn Scorer> = scorers.iter().map(|b| b.as_ref()).collect();
    let report = perturbation_benchmark(&refs, &ex, &kinds, seed)?;
    let csv = report.to_csv();
    print!("{csv}");
    if let Some(p) = &out {
        write_text(p, &csv)?;
    }

    if let Some(p) = &retrieval_out {
        if model.objective != Objective::Clip {
            return Err(CliError::BadInput("retrieval needs a contrastive (clip) checkpoint".into()));
        }
        // Retrieval over distinct captions only: duplicates would tie.
        let mut seen = HashSet::new();
        let uniq: Vec<&Example> = ex.iter().filter(|e| seen.insert(e.caption.clone())).collect();
        let images: Vec<Tensor<f32>> = uniq.iter().map(|e| e.image.clone()).collect();
        let seqs = uniq.iter().map(|e| encode(&e.caption, vocab, model.max_len)).collect::<Result<Vec<_>, _>>()?;
        let img = extract_features(model, params, &images, FeatureMode::Prelogits)?;
        let mut tape = Tape::new();
        let bound = bind(&mut tape, params, |_| false);
        let txt = clip_text_embed(&mut tape, &bound, model, &seqs)?;
        let recall = retrieval_eval(&img, tape.value(txt))?;
        print!("{}", recall.to_csv());
        write_text(p, &recall.to_csv())?;
    }
    Ok(())
}

const PROBE_KEYS: [&str; 8] = ["ckpt", "data", "k", "kind", "seeds", "steps", "seed", "out"];

pub fn probe(a: ProbeArgs) -> Res {
    let flags = vec![
        path_flag("ckpt", a.ckpt),
        path_flag("data", a.data),
        flag("k", a.k),
        flag("kind", a.kind),
        flag("seed", a.seed),
        path_flag("out", a.out),
    ];
    let s = Settings::load(&PROBE_KEYS, a.common.config.as_deref(), flags, &a.common.set)?;
    let ckpt_path = existing(&s, "ckpt")?;
    let data_path = existing(&s, "data")?;
    let defaults = ProbeConfig::default();
    let pc =
        ProbeConfig { seeds: s.parse("seeds", defaults.seeds)?, steps: s.parse("steps", defaults.steps)?, ..defaults };
    let k: usize = s.parse("k", 10)?;
    let seed: u64 = s.parse("seed", 0)?;
    let kind = s.get("kind").unwrap_or("all").to_owned();
    let kinds: Vec<ProbeKind> =
        if kind == "all" { vec![ProbeKind::Linear, ProbeKind::Mlp, ProbeKind::Map] } else { vec![kind.parse()?] };
    let out = s.path("out");
    if let Some(p) = &out {
        writable(p)?;
    }
    let mut header = vec![
        entry("ckpt", ckpt_path.display()),
        entry("data", data_path.display()),
        entry("k", k),
        entry("kind", &kind),
        entry("seeds", pc.seeds),
        entry("steps", pc.steps),
        entry("seed", seed),
    ];
    if let Some(p) = &out {
        header.push(entry("out", p.display()));
    }
    print_header("probe", &header);

    let ckpt = load_checkpoint(&ckpt_path)?;
    let ex = load_examples(&data_path)?;
    check_resolution(&ex, &ckpt.model)?;
    let images: Vec<Tensor<f32>> = ex.iter().map(|e| e.image.clone()).collect();
    let labels: Vec<usize> = ex.iter().map(|e| e.scene.class_label()).collect();
    let pooled_mode = if ckpt.model.objective.is_captioning() { FeatureMode::Gap } else { FeatureMode::Prelogits };
    let mut results = Vec::new();
    for kind in kinds {
        let features = if kind == ProbeKind::Map {
            Features::Sequence(encode_sequences(&ckpt.model, &ckpt.params, &images)?)
        } else {
            Features::Pooled(extract_features(&ckpt.model, &ckpt.params, &images, pooled_mode)?)
        };
        results.push(kshot_probe_with(&features, &labels, k, kind, seed, &pc)?);
    }
    let csv = probe_csv(&results);
    print!("{csv}");
    if let Some(p) = &out {
        write_text(p, &csv)?;
    }
    Ok(())
}

/// `[3, R, R]` in `[0, 1]` from a PNG or PPM file.
fn read_image(path: &Path) -> Res<Tensor<f32>> {
    let img = image::open(path).map_err(|e| CliError::BadInput(format!("{}: {e}", path.display())))?.to_rgb8();
    let (w, h) = img.dimensions();
    if w != h {
        return Err(CliError::BadInput(format!("{}: image must be square, got {w}x{h}", path.display())));
    }
    let r = w as usize;
    Ok(Tensor::from_fn(vec![3, r, r], |i| {
        let (c, p) = (i / (r * r), i % (r * r));
        f32::from(img.get_pixel((p % r) as u32, (p / r) as u32)[c]) / 255.0
    }))
}

const SCORE_KEYS: [&str; 7] = ["ckpt", "data", "index", "image", "captions", "mode", "blind"];

pub fn score(a: ScoreArgs) -> Res {
    let flags = vec![
        path_flag("ckpt", a.ckpt),
        path_flag("data", a.data),
        flag("index", a.index),
        path_flag("image", a.image),
        ("captions", (!a.captions.is_empty()).then(|| a.captions.join("|"))),
        flag("mode", a.mode),
        switch("blind", a.blind),
    ];
    let s = Settings::load(&SCORE_KEYS, a.common.config.as_deref(), flags, &a.common.set)?;
    let ckpt_path = existing(&s, "ckpt")?;
    let mode: DecodeMode = s.parse("mode", DecodeMode::Causal)?;
    let blind: bool = s.parse("blind", false)?;
    let captions: Vec<String> = s
        .get("captions")
        .unwrap_or("")
        .split('|')
        .map(str::trim)
        .filter(|c| !c.is_empty())
        .map(str::to_owned)
        .collect();
    if captions.is_empty() {
        return Err(CliError::BadInput("give at least one --caption".into()));
    }
    let source = match (s.get("image"), s.get("data")) {
        (Some(_), None) => existing(&s, "image")?,
        (None, Some(_)) => existing(&s, "data")?,
        _ => return Err(CliError::BadInput("give either image or data with index".into())),
    };
    let index: Option<usize> = s.get("index").map(|_| s.parse("index", 0)).transpose()?;
    if s.get("data").is_some() && index.is_none() {
        return Err(CliError::BadInput("data needs an index".into()));
    }
    let mut header = vec![entry("ckpt", ckpt_path.display())];
    match index {
        Some(i) => {
            header.push(entry("data", source.display()));
            header.push(entry("index", i));
        }
        None => header.push(entry("image", source.display())),
    }
    header.push(entry("captions", captions.join("|")));
    header.push(entry("mode", mode));
    header.push(entry("blind", blind));
    print_header("score", &header);

    let ckpt = load_checkpoint(&ckpt_path)?;
    let image = match index {
        Some(i) => {
            let ex = load_examples(&source)?;
            ex.get(i)
                .ok_or_else(|| CliError::BadInput(format!("index {i} outside dataset of {}", ex.len())))?
                .image
                .clone()
        }
        None => read_image(&source)?,
    };
    if image.shape()[1] != ckpt.model.image_res {
        return Err(CliError::BadInput(format!(
            "image is {}px but the model expects {}px",
            image.shape()[1],
            ckpt.model.image_res
        )));
    }
    let (scores, column) = if ckpt.model.objective.is_captioning() {
        let scorer = CaptionScorer { blind, ..CaptionScorer::new(&ckpt.model, &ckpt.params, &ckpt.vocab, mode) };
        (scorer.score(&image, &captions)?, "log_likelihood")
    } else {
        if blind {
            return Err(CliError::BadInput("blind scoring needs a captioning checkpoint".into()));
        }
        (ContrastiveScorer::new(&ckpt.model, &ckpt.params, &ckpt.vocab)?.score(&image, &captions)?, "cosine")
    };
    println!("candidate,{column},caption");
    for (i, (sc, c)) in scores.iter().zip(&captions).enumerate() {
        println!("{i},{sc},{c}");
    }
    let best = argmax(&scores);
    println!("winner={best} {}", captions[best]);
    Ok(())
}
