use proptest::prelude::*;

use super::*;
use crate::datagen::{gen_dataset, grammar_corpus};
use crate::model::Objective;

fn tiny(objective: Objective) -> ModelConfig {
    ModelConfig {
        patch_size: 8,
        image_res: 16,
        width: 8,
        enc_layers: 1,
        dec_layers: 1,
        heads: 2,
        mlp_dim: 16,
        max_len: 12,
        ..ModelConfig::desk(objective, 18)
    }
}

fn toy_data(n: usize) -> (TrainData, Vocab) {
    let vocab = Vocab::build(&grammar_corpus());
    let ex = gen_dataset(n, 3, 16).unwrap();
    (TrainData::from_examples(&ex, &vocab, 12).unwrap(), vocab)
}

fn short(steps: u64, batch: usize) -> TrainConfig {
    TrainConfig { batch_size: batch, seed: 5, ..TrainConfig::new(steps) }
}

#[test]
fn schedule_endpoints() {
    let cfg = TrainConfig { warmup_steps: 10, ..TrainConfig::new(100) };
    assert_eq!(lr_at(0, &cfg), 0.0);
    assert!((lr_at(5, &cfg) - 5e-4).abs() < 1e-15);
    assert_eq!(lr_at(10, &cfg), 1e-3);
    assert!(lr_at(100, &cfg).abs() < 1e-12);
    assert!((lr_at(55, &cfg) - 5e-4).abs() < 1e-12);
    let mut prev = f64::INFINITY;
    for s in 10..=100 {
        assert!(lr_at(s, &cfg) <= prev);
        prev = lr_at(s, &cfg);
    }
    assert_eq!(TrainConfig::new(2000).warmup_steps, 40);
    assert_eq!(default_warmup(1), 0);
}

#[test]
fn config_validation() {
    assert!(TrainConfig { warmup_steps: 100, ..TrainConfig::new(100) }.validate().is_err());
    assert!(TrainConfig { batch_size: 0, ..TrainConfig::new(100) }.validate().is_err());
    assert!(TrainConfig::new(0).validate().is_err());
    assert!(TrainConfig::new(100).validate().is_ok());
}

#[test]
fn config_kv_roundtrip() {
    let cfg = TrainConfig {
        freeze_mode: FreezeMode::EncoderAndDecoderExceptXattn,
        reinit_xattn: true,
        mixing: Mixing::Batch,
        base_lr: 3e-4,
        ..TrainConfig::new(77)
    };
    let mut back = TrainConfig::new(1);
    for (k, v) in cfg.to_kv() {
        back.apply_kv(&k, &v).unwrap();
    }
    assert_eq!(back, cfg);
    assert!(back.apply_kv("learning_rate", "1").is_err());
    assert!(back.apply_kv("freeze", "all").is_err());
    assert_eq!(cfg.to_kv().len(), TrainConfig::KEYS.len());
}

#[test]
fn zero_gradient_without_decay_is_a_no_op() {
    let mut p = Params::new();
    p.insert("w", Tensor::new(vec![2], vec![0.5f64, -1.5]).unwrap());
    let before = p.clone();
    let g = {
        let mut g = Params::new();
        g.insert("w", Tensor::zeros(vec![2]));
        g
    };
    let mut st = AdamState::default();
    AdamW::default().step(&mut p, &g, &mut st, 1e-2, 0.0, |_| true).unwrap();
    assert_eq!(p, before);
}

#[test]
fn one_step_descends_on_square() {
    let mut p = Params::new();
    p.insert("x", Tensor::scalar(1.0f64));
    let mut g = Params::new();
    g.insert("x", Tensor::scalar(2.0));
    let mut st = AdamState::default();
    AdamW::default().step(&mut p, &g, &mut st, 0.1, 0.0, |_| false).unwrap();
    assert!(p.get("x").unwrap().item().abs() < 1.0);
}

#[test]
fn three_steps_match_scalar_reimplementation() {
    // f(x, y) = (x - 1)^2 + 3 y^2 + x y; decay on x only.
    let grad = |x: f64, y: f64| (2.0 * (x - 1.0) + y, 6.0 * y + x);
    let (lr, wd, b1, b2, eps) = (0.05, 0.01, 0.9, 0.999, 1e-8);
    let (mut x, mut y) = (0.3f64, -0.7f64);
    let (mut mx, mut my, mut vx, mut vy) = (0.0, 0.0, 0.0, 0.0);
    let mut p = Params::new();
    p.insert("x", Tensor::scalar(x));
    p.insert("y", Tensor::scalar(y));
    let mut st = AdamState::default();
    for t in 1..=3 {
        let (gx, gy) = grad(x, y);
        mx = b1 * mx + (1.0 - b1) * gx;
        my = b1 * my + (1.0 - b1) * gy;
        vx = b2 * vx + (1.0 - b2) * gx * gx;
        vy = b2 * vy + (1.0 - b2) * gy * gy;
        let (c1, c2) = (1.0 - b1f(b1, t), 1.0 - b1f(b2, t));
        x -= lr * (mx / c1) / ((vx / c2).sqrt() + eps) + wd * x;
        y -= lr * (my / c1) / ((vy / c2).sqrt() + eps);

        let (px, py) = (p.get("x").unwrap().item(), p.get("y").unwrap().item());
        let (gx, gy) = grad(px, py);
        let mut g = Params::new();
        g.insert("x", Tensor::scalar(gx));
        g.insert("y", Tensor::scalar(gy));
        AdamW::default().step(&mut p, &g, &mut st, lr, wd, |n| n == "x").unwrap();
    }
    assert!((p.get("x").unwrap().item() - x).abs() < 1e-7);
    assert!((p.get("y").unwrap().item() - y).abs() < 1e-7);
    assert_eq!(st.t, 3);
}

fn b1f(b: f64, t: i32) -> f64 {
    (0..t).fold(1.0, |acc, _| acc * b)
}

#[test]
fn optimizer_rejects_mismatched_shapes_and_skips_absent() {
    let mut p = Params::new();
    p.insert("a", Tensor::<f64>::ones(vec![2]));
    p.insert("b", Tensor::<f64>::ones(vec![2]));
    let mut g = Params::new();
    g.insert("a", Tensor::ones(vec![3]));
    let mut st = AdamState::default();
    assert!(matches!(AdamW::default().step(&mut p, &g, &mut st, 0.1, 0.1, |_| true), Err(Error::Shape(_))));
    let mut g = Params::new();
    g.insert("a", Tensor::ones(vec![2]));
    AdamW::default().step(&mut p, &g, &mut st, 0.1, 0.1, |_| true).unwrap();
    assert_eq!(p.get("b").unwrap().data(), &[1.0, 1.0]);
    assert!(st.m.get("b").is_none());
}

#[test]
fn clipping_rescales_to_max_norm() {
    let mut g = Params::new();
    g.insert("a", Tensor::new(vec![2], vec![3.0f64, 4.0]).unwrap());
    assert_eq!(clip_by_global_norm(&mut g, 1.0), 5.0);
    assert!((g.get("a").unwrap().data()[0] - 0.6).abs() < 1e-15);
    assert_eq!(clip_by_global_norm(&mut g, 10.0), global_norm(&g));
    assert!((global_norm(&g) - 1.0).abs() < 1e-15);
}

#[test]
fn freeze_modes_select_expected_tensors() {
    let cases = [
        ("enc.l0.attn.q", [false, true, false, true]),
        ("dec.l0.self.q", [false, false, true, true]),
        ("dec.l0.cross.k", [false, false, false, false]),
        ("dec.embed", [false, false, true, true]),
        ("txt.proj", [false, false, false, false]),
    ];
    for (name, want) in cases {
        for (mode, w) in FreezeMode::ALL.into_iter().zip(want) {
            assert_eq!(mode.is_frozen(name), w, "{mode} {name}");
        }
    }
    for m in FreezeMode::ALL {
        assert_eq!(m.to_string().parse::<FreezeMode>().unwrap(), m);
    }
}

#[test]
fn batch_indices_are_deterministic_and_distinct() {
    let a = batch_indices(1, 7, 32, 8);
    assert_eq!(a, batch_indices(1, 7, 32, 8));
    assert_ne!(a, batch_indices(1, 8, 32, 8));
    let mut s = a.clone();
    s.sort_unstable();
    s.dedup();
    assert_eq!(s.len(), 8);
    let big = batch_indices(1, 0, 4, 10);
    assert_eq!(big.len(), 10);
    assert!(big.iter().all(|&i| i < 4));
}

#[test]
fn same_seed_same_log_and_finite_losses() {
    let (data, _) = toy_data(12);
    let model = tiny(Objective::CapPa);
    let run = || train::<f32>(&model, &short(15, 4), &data).unwrap();
    let (pa, la) = run();
    let (pb, lb) = run();
    assert_eq!(metrics_csv(&la), metrics_csv(&lb));
    assert_eq!(pa, pb);
    assert!(la.iter().all(|r| r.loss.is_finite()));
    assert!(la.last().unwrap().loss < la[0].loss);
}

#[test]
fn metrics_csv_schema() {
    let (data, _) = toy_data(8);
    let (_, rows) = train::<f32>(&tiny(Objective::Cap), &short(3, 4), &data).unwrap();
    let csv = metrics_csv(&rows);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 4);
    for (i, l) in lines[1..].iter().enumerate() {
        let f: Vec<&str> = l.split(',').collect();
        assert_eq!(f.len(), 5);
        assert_eq!(f[0], i.to_string());
        assert!(!f[3].is_empty());
        assert!(f[4].is_empty());
    }
}

#[test]
fn frozen_encoder_stays_bitwise_fixed() {
    let (data, _) = toy_data(8);
    let model = tiny(Objective::Cap);
    let init = init_params::<f32>(&model, 5).unwrap();
    let cfg = TrainConfig { freeze_mode: FreezeMode::Encoder, ..short(5, 4) };
    let (p, _) = train::<f32>(&model, &cfg, &data).unwrap();
    for (name, t) in init.iter() {
        assert_eq!(name.starts_with("enc."), p.get(name).unwrap() == t, "{name}");
    }
}

#[test]
fn frozen_encoder_cache_matches_live_encoder() {
    let (data, _) = toy_data(8);
    let model = tiny(Objective::Cap);
    let cfg = TrainConfig { freeze_mode: FreezeMode::Encoder, ..short(4, 4) };
    let mut cached = Trainer::<f64>::new(model.clone(), cfg.clone(), &data).unwrap();
    let mut live = Trainer::<f64>::new(model, cfg, &data).unwrap();
    live.enc_cache = None;
    for _ in 0..4 {
        let (a, b) = (cached.step().unwrap(), live.step().unwrap());
        assert!((a.loss - b.loss).abs() < 1e-12);
    }
}

#[test]
fn cross_attention_only_training() {
    let (data, _) = toy_data(8);
    let model = tiny(Objective::Cap);
    let init = init_params::<f32>(&model, 5).unwrap();
    let cfg = TrainConfig { freeze_mode: FreezeMode::EncoderAndDecoderExceptXattn, reinit_xattn: true, ..short(5, 4) };
    let t = Trainer::<f32>::with_params(model.clone(), cfg.clone(), &data, init.clone()).unwrap();
    let reinit = t.params().clone();
    for (name, v) in init.iter() {
        let redrawn = is_xattn(name) && !name.ends_with(".ln");
        assert_eq!(reinit.get(name).unwrap() != v, redrawn, "{name}");
    }
    let (p, _) = {
        let mut t = t;
        let rows = t.run().unwrap();
        (t.into_state().params, rows)
    };
    for (name, v) in reinit.iter() {
        assert_eq!(p.get(name).unwrap() != v, is_xattn(name), "{name}");
    }
}

#[test]
fn blind_training_leaves_encoder_alone() {
    let (data, _) = toy_data(8);
    let model = tiny(Objective::Cap);
    let init = init_params::<f32>(&model, 5).unwrap();
    let (p, _) = train::<f32>(&model, &TrainConfig { blind: true, ..short(4, 4) }, &data).unwrap();
    assert_eq!(p.get("enc.patch"), init.get("enc.patch"));
    assert_ne!(p.get("dec.out"), init.get("dec.out"));
    assert!(train::<f32>(&tiny(Objective::Clip), &TrainConfig { blind: true, ..short(4, 4) }, &data).is_err());
}

#[test]
fn contrastive_training_runs() {
    let (data, _) = toy_data(8);
    let (p, rows) = train::<f32>(&tiny(Objective::Clip), &short(6, 4), &data).unwrap();
    assert!(rows.iter().all(|r| r.loss.is_finite() && r.loss_causal.is_none()));
    assert!(p.all_finite());
    assert!(matches!(Trainer::<f32>::new(tiny(Objective::Clip), short(6, 1), &data), Err(Error::BatchTooSmall(1))));
}

fn sample_checkpoint() -> Checkpoint {
    let (data, vocab) = toy_data(8);
    let mut t = Trainer::<f32>::new(tiny(Objective::CapPa), short(6, 4), &data).unwrap();
    t.run_until(3).unwrap();
    t.checkpoint(&vocab)
}

#[test]
fn checkpoint_roundtrip_is_exact() {
    let ck = sample_checkpoint();
    let bytes = encode_checkpoint(&ck);
    let back = decode_checkpoint(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(encode_checkpoint(&back), bytes);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.capc");
    save_checkpoint(&path, &ck).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), ck);
}

#[test]
fn checkpoint_rejects_damage() {
    let bytes = encode_checkpoint(&sample_checkpoint());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(decode_checkpoint(&bad), Err(Error::Version { found: 9, expected: 1 })));
    assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
    let mut bad = bytes.clone();
    bad.push(0);
    assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
    assert!(matches!(decode_checkpoint(&bytes[..10]), Err(Error::Format(_))));
}

#[test]
fn resume_equals_continuous() {
    let (data, vocab) = toy_data(8);
    let model = tiny(Objective::CapPa);
    let cfg = short(20, 4);
    let mut whole = Trainer::<f32>::new(model.clone(), cfg.clone(), &data).unwrap();
    let log_whole = whole.run().unwrap();

    let mut first = Trainer::<f32>::new(model, cfg, &data).unwrap();
    let mut log_split = first.run_until(10).unwrap();
    let ck = decode_checkpoint(&encode_checkpoint(&first.checkpoint(&vocab))).unwrap();
    let state = TrainState { params: ck.params, opt: ck.opt, step: ck.step };
    let mut second = Trainer::resume(ck.model, ck.train, &data, state).unwrap();
    log_split.extend(second.run().unwrap());
    assert_eq!(second.state, whole.state);
    assert_eq!(metrics_csv(&log_split), metrics_csv(&log_whole));
}

proptest! {
    #[test]
    fn lr_stays_within_bounds(steps in 2u64..5000, frac in 0.0f64..1.0, at in 0.0f64..=1.0) {
        let warmup = ((steps - 1) as f64 * frac) as u64;
        let cfg = TrainConfig { warmup_steps: warmup, ..TrainConfig::new(steps) };
        let lr = lr_at((steps as f64 * at) as u64, &cfg);
        prop_assert!((0.0..=cfg.base_lr).contains(&lr));
    }
}
