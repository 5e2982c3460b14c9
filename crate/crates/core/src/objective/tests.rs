use proptest::prelude::*;

use super::*;
use crate::model::{init_params, Objective};
use crate::tok::MASK;

fn tiny(objective: Objective, vocab: usize) -> ModelConfig {
    ModelConfig {
        patch_size: 4,
        image_res: 8,
        width: 8,
        enc_layers: 1,
        dec_layers: 1,
        heads: 2,
        mlp_dim: 16,
        max_len: 6,
        ..ModelConfig::desk(objective, vocab)
    }
}

fn image(seed: u32, res: usize) -> Tensor<f32> {
    Tensor::from_fn(vec![3, res, res], |i| (((i as u32).wrapping_mul(2654435761) ^ seed) % 1000) as f32 / 1000.0)
}

fn seq(ids: &[u32]) -> TokenSeq {
    TokenSeq::from_ids(ids.to_vec()).unwrap()
}

fn loss_value<T: Scalar>(cfg: &ModelConfig, params: &Params<T>, batch: &Batch) -> (T, CaptionLoss) {
    let mut tape = Tape::new();
    let p = bind(&mut tape, params, |_| true);
    let l = caption_loss(&mut tape, &p, cfg, batch, false).unwrap();
    (tape.value(l.loss).item(), l)
}

// Scalar-arithmetic forward pass, written without the tape.
mod oracle {
    use crate::model::Params;

    pub type M = Vec<Vec<f64>>;

    pub fn w(p: &Params<f64>, name: &str) -> M {
        let t = p.get(name).unwrap();
        let cols = t.shape()[1];
        t.data().chunks(cols).map(<[f64]>::to_vec).collect()
    }

    pub fn vecp(p: &Params<f64>, name: &str) -> Vec<f64> {
        p.get(name).unwrap().data().to_vec()
    }

    pub fn mm(x: &M, w: &M) -> M {
        x.iter().map(|r| (0..w[0].len()).map(|j| r.iter().zip(w).map(|(a, row)| a * row[j]).sum()).collect()).collect()
    }

    pub fn add(a: &M, b: &M) -> M {
        a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
    }

    pub fn ln(x: &M, scale: &[f64]) -> M {
        x.iter()
            .map(|r| {
                let n = r.len() as f64;
                let mean = r.iter().sum::<f64>() / n;
                let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                r.iter().zip(scale).map(|(v, s)| (v - mean) / (var + 1e-6).sqrt() * s).collect()
            })
            .collect()
    }

    pub fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
    }

    /// Single-head attention; causal rows see keys `j <= i` only.
    pub fn attn(q: &M, k: &M, v: &M, causal: bool) -> M {
        let d = q[0].len() as f64;
        q.iter()
            .enumerate()
            .map(|(i, qi)| {
                let keys = if causal { i + 1 } else { k.len() };
                let s: Vec<f64> =
                    (0..keys).map(|j| qi.iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / d.sqrt()).collect();
                let mx = s.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                (0..v[0].len()).map(|c| (0..keys).map(|j| e[j] / z * v[j][c]).sum()).collect()
            })
            .collect()
    }

    pub fn mha(p: &Params<f64>, pre: &str, xq: &M, xkv: &M, causal: bool) -> M {
        let q = mm(xq, &w(p, &format!("{pre}.q")));
        let k = mm(xkv, &w(p, &format!("{pre}.k")));
        let v = mm(xkv, &w(p, &format!("{pre}.v")));
        mm(&attn(&q, &k, &v, causal), &w(p, &format!("{pre}.o")))
    }

    pub fn mlp(p: &Params<f64>, pre: &str, x: &M) -> M {
        let h = ln(x, &vecp(p, &format!("{pre}.ln")));
        let h = mm(&h, &w(p, &format!("{pre}.fc1")));
        let h: M = h.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
        mm(&h, &w(p, &format!("{pre}.fc2")))
    }

    /// Mean CE of one caption, one head, one encoder and one decoder layer.
    pub fn caption_ce(p: &Params<f64>, patches: &M, ids: &[usize], targets: &[(usize, usize)]) -> f64 {
        let mut x = add(&mm(patches, &w(p, "enc.patch")), &w(p, "enc.pos"));
        let h = ln(&x, &vecp(p, "enc.l0.attn.ln"));
        x = add(&x, &mha(p, "enc.l0.attn", &h, &h, false));
        x = add(&x, &mlp(p, "enc.l0.mlp", &x));
        let enc = ln(&x, &vecp(p, "enc.ln"));

        let embed = w(p, "dec.embed");
        let pos = w(p, "dec.pos");
        let mut y: M = ids
            .iter()
            .enumerate()
            .map(|(t, &id)| embed[id].iter().zip(&pos[t]).map(|(a, b)| a + b).collect())
            .collect();
        let h = ln(&y, &vecp(p, "dec.l0.self.ln"));
        y = add(&y, &mha(p, "dec.l0.self", &h, &h, true));
        let h = ln(&y, &vecp(p, "dec.l0.cross.ln"));
        y = add(&y, &mha(p, "dec.l0.cross", &h, &enc, false));
        y = add(&y, &mlp(p, "dec.l0.mlp", &y));
        let logits = mm(&ln(&y, &vecp(p, "dec.ln")), &w(p, "dec.out"));
        let total: f64 = targets
            .iter()
            .map(|&(pos, tgt)| {
                let row = &logits[pos];
                let z: f64 = row.iter().map(|v| v.exp()).sum();
                z.ln() - row[tgt]
            })
            .sum();
        total / targets.len() as f64
    }
}

#[test]
fn loss_matches_scalar_oracle_on_hand_sized_model() {
    let cfg = ModelConfig {
        patch_size: 2,
        image_res: 2,
        width: 2,
        enc_layers: 1,
        dec_layers: 1,
        heads: 1,
        mlp_dim: 2,
        max_len: 3,
        ..ModelConfig::desk(Objective::Cap, 6)
    };
    let mut params = init_params::<f64>(&cfg, 21).unwrap();
    // Blow weights up from the 0.02 init scale so every path matters.
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    for (k, name) in names.iter().enumerate() {
        let t = params.get_mut(name).unwrap();
        for (j, v) in t.data_mut().iter_mut().enumerate() {
            *v = if name.ends_with("ln") {
                0.5 + 0.1 * ((k + j) % 7) as f64
            } else {
                *v * 40.0 + 0.05 * ((k * 3 + j) % 5) as f64 - 0.1
            };
        }
    }
    let img = image(7, 2);
    let caption = seq(&[BOS, 4, EOS]);
    let batch = Batch::new(vec![img.clone()], vec![caption], vec![DecodeMode::Causal]).unwrap();
    let (got, _) = loss_value(&cfg, &params, &batch);
    let patches: oracle::M = vec![crate::model::patchify(&img.cast::<f64>(), 2).unwrap().data().to_vec()];
    let want = oracle::caption_ce(&params, &patches, &[0, 4, 1], &[(0, 4), (1, 1)]);
    assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    assert!(want > 0.1);
}

#[test]
fn uniform_logits_give_log_vocab() {
    let cfg = ModelConfig { share_dec_embeddings: false, ..tiny(Objective::Cap, 18) };
    let mut params = init_params::<f64>(&cfg, 1).unwrap();
    *params.get_mut("dec.out").unwrap() = Tensor::zeros(vec![cfg.width, 18]);
    let batch = Batch::new(
        vec![image(1, 8), image(2, 8)],
        vec![seq(&[BOS, 5, 6, EOS, PAD, PAD]), seq(&[BOS, 7, EOS, PAD, PAD, PAD])],
        vec![DecodeMode::Causal, DecodeMode::Parallel],
    )
    .unwrap();
    let (loss, l) = loss_value(&cfg, &params, &batch);
    assert!((loss - 18f64.ln()).abs() < 1e-12);
    assert_eq!(l.tokens, 5);
    assert!((l.loss_causal.unwrap() - 18f64.ln()).abs() < 1e-12);
    assert!((l.loss_parallel.unwrap() - 18f64.ln()).abs() < 1e-12);
}

#[test]
fn zero_fraction_cappa_is_bitwise_cap() {
    let cap = tiny(Objective::Cap, 18);
    let cappa = ModelConfig { parallel_fraction: 0.0, ..tiny(Objective::CapPa, 18) };
    let params = init_params::<f32>(&cap, 3).unwrap();
    assert_eq!(params, init_params::<f32>(&cappa, 3).unwrap());
    let caps = vec![seq(&[BOS, 5, 6, EOS, PAD, PAD]); 4];
    let imgs: Vec<_> = (0..4).map(|i| image(i, 8)).collect();
    for step in 0..20 {
        let a = Batch::draw(&cap, imgs.clone(), caps.clone(), 9, step, Mixing::Example).unwrap();
        let b = Batch::draw(&cappa, imgs.clone(), caps.clone(), 9, step, Mixing::Example).unwrap();
        assert_eq!(a, b);
        let (la, ma) = loss_value(&cap, &params, &a);
        let (lb, mb) = loss_value(&cappa, &params, &b);
        assert_eq!(la.to_bits(), lb.to_bits());
        assert_eq!(ma.mask, DecoderMaskKind::Causal);
        assert_eq!(mb.mask, DecoderMaskKind::Causal);
        assert!(mb.loss_parallel.is_none());
    }
}

#[test]
fn full_parallel_fraction_never_masks() {
    let cfg = ModelConfig { parallel_fraction: 1.0, ..tiny(Objective::CapPa, 18) };
    let params = init_params::<f32>(&cfg, 3).unwrap();
    let caps = vec![seq(&[BOS, 5, 6, EOS, PAD, PAD]); 3];
    let imgs: Vec<_> = (0..3).map(|i| image(i, 8)).collect();
    for step in 0..10 {
        for mixing in [Mixing::Example, Mixing::Batch] {
            let b = Batch::draw(&cfg, imgs.clone(), caps.clone(), 1, step, mixing).unwrap();
            assert!(b.modes.iter().all(|&m| m == DecodeMode::Parallel));
            assert_eq!(loss_value(&cfg, &params, &b).1.mask, DecoderMaskKind::None);
        }
    }
}

#[test]
fn tokens_after_eos_do_not_change_loss() {
    let cfg = tiny(Objective::CapPa, 18);
    let params = init_params::<f32>(&cfg, 4).unwrap();
    let a = seq(&[BOS, 5, EOS, PAD, PAD, PAD]);
    let b = seq(&[BOS, 5, EOS, 9, 11, 4]);
    for mode in [DecodeMode::Causal, DecodeMode::Parallel] {
        let la = loss_value(&cfg, &params, &Batch::new(vec![image(1, 8)], vec![a.clone()], vec![mode]).unwrap()).0;
        let lb = loss_value(&cfg, &params, &Batch::new(vec![image(1, 8)], vec![b.clone()], vec![mode]).unwrap()).0;
        assert_eq!(la.to_bits(), lb.to_bits(), "{mode:?}");
    }
}

#[test]
fn empty_targets_error() {
    let cfg = tiny(Objective::Cap, 18);
    let params = init_params::<f32>(&cfg, 4).unwrap();
    let batch =
        Batch::new(vec![image(1, 8)], vec![seq(&[EOS, PAD, PAD, PAD, PAD, PAD])], vec![DecodeMode::Causal]).unwrap();
    let mut tape = Tape::new();
    let p = bind(&mut tape, &params, |_| true);
    assert!(matches!(caption_loss(&mut tape, &p, &cfg, &batch, false), Err(Error::EmptyLoss)));
    let clip = tiny(Objective::Clip, 18);
    assert!(matches!(caption_loss(&mut tape, &p, &clip, &batch, false), Err(Error::Config(_))));
}

#[test]
fn caption_targets_shift_and_weight() {
    let (t, w) = caption_targets::<f64>(&seq(&[BOS, 5, 6, EOS, PAD, PAD]));
    assert_eq!(t, vec![5, 6, 1, 2, 2, 2]);
    assert_eq!(w, vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn mode_draw_frequency_matches_fraction() {
    let modes = draw_modes(5, 0, 20_000, 0.75, Mixing::Example);
    let frac = modes.iter().filter(|&&m| m == DecodeMode::Parallel).count() as f64 / modes.len() as f64;
    assert!((frac - 0.75).abs() < 0.01, "{frac}");
    let mut batches = 0;
    for step in 0..4000 {
        let m = draw_modes(5, step, 8, 0.75, Mixing::Batch);
        assert!(m.iter().all(|&x| x == m[0]));
        batches += usize::from(m[0] == DecodeMode::Parallel);
    }
    assert!((batches as f64 / 4000.0 - 0.75).abs() < 0.03);
    assert!(draw_modes(5, 3, 64, 0.0, Mixing::Example).iter().all(|&m| m == DecodeMode::Causal));
    let flips = draw_reversals(5, 0, 10_000, 0.5);
    let frac = flips.iter().filter(|&&f| f).count() as f64 / 1e4;
    assert!((frac - 0.5).abs() < 0.02);
}

#[test]
fn reversal_applies_to_drawn_examples() {
    let cfg = ModelConfig { reverse_prob: 1.0, ..tiny(Objective::Cap, 18) };
    let c = seq(&[BOS, 5, 6, 7, EOS, PAD]);
    let b = Batch::draw(&cfg, vec![image(1, 8)], vec![c], 0, 0, Mixing::Example).unwrap();
    assert_eq!(b.captions[0].ids(), &[BOS, 7, 6, 5, EOS, PAD]);
}

fn contrastive_value(img: &Tensor<f64>, txt: &Tensor<f64>, log_temp: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let (i, t, lt) = (tape.param(img.clone()), tape.param(txt.clone()), tape.param(Tensor::scalar(log_temp)));
    let l = contrastive_loss(&mut tape, i, t, lt)?;
    Ok(tape.value(l).item())
}

fn brute_contrastive(img: &[Vec<f64>], txt: &[Vec<f64>], temp: f64) -> f64 {
    let unit = |v: &Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter().map(|x| x / n).collect::<Vec<_>>()
    };
    let (a, b): (Vec<_>, Vec<_>) = (img.iter().map(unit).collect(), txt.iter().map(unit).collect());
    let b_n = a.len();
    let s = |i: usize, j: usize| a[i].iter().zip(&b[j]).map(|(x, y)| x * y).sum::<f64>() / temp;
    let mut rows = 0.0;
    let mut cols = 0.0;
    for i in 0..b_n {
        rows += (0..b_n).map(|j| s(i, j).exp()).sum::<f64>().ln() - s(i, i);
        cols += (0..b_n).map(|j| s(j, i).exp()).sum::<f64>().ln() - s(i, i);
    }
    0.5 * (rows + cols) / b_n as f64
}

#[test]
fn contrastive_two_by_two_by_hand() {
    // Unit vectors at 0 and 90 degrees against 0 and 60 degrees, temp 0.5.
    let img = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap();
    let txt = Tensor::new(vec![2, 2], vec![3.0, 0.0, 0.5, 0.75f64.sqrt()]).unwrap();
    // sims: [[1, 0.5], [0, sqrt(3)/2]] / 0.5
    let s = [[2.0, 1.0], [0.0, 3f64.sqrt()]];
    let lse = |a: f64, b: f64| (a.exp() + b.exp()).ln();
    let rows = (lse(s[0][0], s[0][1]) - s[0][0]) + (lse(s[1][0], s[1][1]) - s[1][1]);
    let cols = (lse(s[0][0], s[1][0]) - s[0][0]) + (lse(s[0][1], s[1][1]) - s[1][1]);
    let want = 0.25 * (rows + cols);
    let got = contrastive_value(&img, &txt, 0.5f64.ln()).unwrap();
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

#[test]
fn contrastive_limits_and_errors() {
    let eye = Tensor::from_fn(vec![3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
    assert!(contrastive_value(&eye, &eye, 1e-3f64.ln()).unwrap() < 1e-12);
    let one = Tensor::<f64>::ones(vec![1, 3]);
    assert!(matches!(contrastive_value(&one, &one, 0.0), Err(Error::BatchTooSmall(1))));
}

#[test]
fn contrastive_gradients_match_finite_differences() {
    let img = Tensor::from_fn(vec![3, 4], |i| ((i * 5) % 7) as f64 * 0.3 - 0.8);
    let txt = Tensor::from_fn(vec![3, 4], |i| ((i * 3) % 5) as f64 * 0.4 - 0.7);
    let lt = 0.3f64;
    let mut tape = Tape::new();
    let (i, t, l) = (tape.param(img.clone()), tape.param(txt.clone()), tape.param(Tensor::scalar(lt)));
    let loss = contrastive_loss(&mut tape, i, t, l).unwrap();
    let g = tape.backward(loss).unwrap();
    let h = 1e-6;
    let check = |num: f64, ana: f64| assert!((num - ana).abs() <= 1e-5 * num.abs().max(1.0), "{num} vs {ana}");
    for j in 0..12 {
        let (mut a, mut b) = (img.clone(), img.clone());
        a.data_mut()[j] += h;
        b.data_mut()[j] -= h;
        check(
            (contrastive_value(&a, &txt, lt).unwrap() - contrastive_value(&b, &txt, lt).unwrap()) / (2.0 * h),
            g.get(i).unwrap().data()[j],
        );
        let (mut a, mut b) = (txt.clone(), txt.clone());
        a.data_mut()[j] += h;
        b.data_mut()[j] -= h;
        check(
            (contrastive_value(&img, &a, lt).unwrap() - contrastive_value(&img, &b, lt).unwrap()) / (2.0 * h),
            g.get(t).unwrap().data()[j],
        );
    }
    let num =
        (contrastive_value(&img, &txt, lt + h).unwrap() - contrastive_value(&img, &txt, lt - h).unwrap()) / (2.0 * h);
    check(num, g.get(l).unwrap().item());
}

fn rows_strategy(b: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-2.0f64..2.0, d), b)
        .prop_filter("non-degenerate", |r| r.iter().all(|v| v.iter().map(|x| x * x).sum::<f64>() > 1e-3))
}

fn to_tensor(rows: &[Vec<f64>]) -> Tensor<f64> {
    Tensor::new(vec![rows.len(), rows[0].len()], rows.concat()).unwrap()
}

proptest! {
    #[test]
    fn contrastive_matches_brute_force(
        (img, txt) in (2usize..=4).prop_flat_map(|b| (rows_strategy(b, 3), rows_strategy(b, 3))),
        log_temp in -2.0f64..0.5,
    ) {
        let got = contrastive_value(&to_tensor(&img), &to_tensor(&txt), log_temp).unwrap();
        let want = brute_contrastive(&img, &txt, log_temp.exp());
        prop_assert!(got >= 0.0);
        prop_assert!((got - want).abs() < 1e-6, "{} vs {}", got, want);
    }

    #[test]
    fn contrastive_rotation_invariant(
        (img, txt) in (rows_strategy(3, 2), rows_strategy(3, 2)),
        angle in 0.0f64..std::f64::consts::TAU,
    ) {
        let (c, s) = (angle.cos(), angle.sin());
        let rot = |rows: &Vec<Vec<f64>>| rows.iter().map(|r| vec![c * r[0] - s * r[1], s * r[0] + c * r[1]]).collect::<Vec<_>>();
        let a = contrastive_value(&to_tensor(&img), &to_tensor(&txt), -1.0).unwrap();
        let b = contrastive_value(&to_tensor(&rot(&img)), &to_tensor(&rot(&txt)), -1.0).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn teacher_forced_score_equals_stepwise() {
    let cfg = tiny(Objective::Cap, 18);
    let params = init_params::<f32>(&cfg, 6).unwrap();
    for (k, ids) in [[BOS, 5, 6, 7, EOS, PAD], [BOS, 9, EOS, PAD, PAD, PAD], [BOS, 4, 4, 4, 4, EOS]].iter().enumerate()
    {
        let c = seq(ids);
        let img = image(k as u32, 8);
        let tf = score_caption(&cfg, &params, &img, &c, DecodeMode::Causal).unwrap();
        let sw = score_stepwise(&cfg, &params, &img, &c).unwrap();
        assert!((tf - sw).abs() < 1e-5, "{tf} vs {sw}");
    }
}

#[test]
fn empty_caption_scores_eos_at_first_position() {
    let cfg = tiny(Objective::Cap, 18);
    let params = init_params::<f64>(&cfg, 6).unwrap();
    let img = image(3, 8);
    let c = seq(&[BOS, EOS, PAD, PAD, PAD, PAD]);
    let enc = encode_images(&cfg, &params, &[&img], false).unwrap();
    let lp = next_token_log_probs(&cfg, &params, &enc, &[BOS]).unwrap();
    let s = score_caption(&cfg, &params, &img, &c, DecodeMode::Causal).unwrap();
    assert!((s - lp[EOS as usize]).abs() < 1e-12);
}

#[test]
fn batched_candidates_match_single_scores() {
    let cfg = tiny(Objective::CapPa, 18);
    let params = init_params::<f64>(&cfg, 7).unwrap();
    let img = image(4, 8);
    let cands =
        vec![seq(&[BOS, 5, 6, EOS, PAD, PAD]), seq(&[BOS, 6, 5, EOS, PAD, PAD]), seq(&[BOS, 8, EOS, PAD, PAD, PAD])];
    for mode in [DecodeMode::Causal, DecodeMode::Parallel] {
        let batched = score_candidates(&cfg, &params, &img, &cands, mode, false).unwrap();
        for (c, b) in cands.iter().zip(&batched) {
            assert!((score_caption(&cfg, &params, &img, c, mode).unwrap() - b).abs() < 1e-12);
            assert!(*b < 0.0);
        }
    }
}

#[test]
fn zero_shot_breaks_ties_low() {
    let cfg = tiny(Objective::Cap, 18);
    let params = init_params::<f32>(&cfg, 8).unwrap();
    let c = seq(&[BOS, 5, 6, EOS, PAD, PAD]);
    let img = image(1, 8);
    assert_eq!(
        zero_shot_classify(&cfg, &params, &img, &[c.clone(), c.clone(), c.clone()], DecodeMode::Causal).unwrap(),
        0
    );
    assert!(zero_shot_classify(&cfg, &params, &img, &[c], DecodeMode::Causal).is_err());
    assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
    let keys = Tensor::new(vec![3, 2], vec![1.0, 0.0, 2.0, 0.0, 0.0, 1.0]).unwrap();
    assert_eq!(zero_shot_cosine(&[1.0, 0.1], &keys).unwrap(), 0);
    assert_eq!(zero_shot_cosine(&[0.1, 1.0], &keys).unwrap(), 2);
}

#[test]
fn blind_scores_ignore_the_image() {
    let cfg = tiny(Objective::CapPa, 18);
    let params = init_params::<f64>(&cfg, 9).unwrap();
    let c = seq(&[BOS, 5, 6, EOS, PAD, PAD]);
    for mode in [DecodeMode::Causal, DecodeMode::Parallel] {
        let a = score_candidates(&cfg, &params, &image(1, 8), std::slice::from_ref(&c), mode, true).unwrap()[0];
        let b = score_candidates(&cfg, &params, &image(2, 8), std::slice::from_ref(&c), mode, true).unwrap()[0];
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(a.to_bits(), blind_score(&cfg, &params, &c, mode).unwrap().to_bits());
        assert_ne!(a, score_caption(&cfg, &params, &image(1, 8), &c, mode).unwrap());
    }
}

#[test]
fn greedy_decode_is_well_formed() {
    let cfg = tiny(Objective::Cap, 18);
    let params = init_params::<f64>(&cfg, 10).unwrap();
    let enc = encode_images(&cfg, &params, &[&image(5, 8)], false).unwrap();
    let out = greedy_decode(&cfg, &params, &enc).unwrap();
    assert_eq!(out.len(), cfg.max_len);
    assert_eq!(out.ids()[0], BOS);
    assert!(out.ids().contains(&EOS));
    assert!(!out.content().iter().any(|&t| t == MASK || t == BOS));
}

#[test]
fn greedy_decode_keeps_prefix_and_rejects_bad_ones() {
    let cfg = tiny(Objective::Cap, 18);
    let params = init_params::<f64>(&cfg, 10).unwrap();
    let enc = encode_images(&cfg, &params, &[&image(5, 8)], false).unwrap();
    let out = greedy_decode_from(&cfg, &params, &enc, &[BOS, 7]).unwrap();
    assert_eq!(&out.ids()[..2], &[BOS, 7]);
    assert!(out.ids().contains(&EOS));
    assert_eq!(greedy_decode_from(&cfg, &params, &enc, &[BOS]).unwrap(), greedy_decode(&cfg, &params, &enc).unwrap());
    assert!(greedy_decode_from(&cfg, &params, &enc, &[7]).is_err());
    assert!(greedy_decode_from(&cfg, &params, &enc, &vec![BOS; cfg.max_len]).is_err());
}

#[test]
fn clip_loss_is_finite_and_trains_temperature() {
    let cfg = tiny(Objective::Clip, 18);
    let params = init_params::<f64>(&cfg, 11).unwrap();
    let batch = Batch::new(
        vec![image(1, 8), image(2, 8)],
        vec![seq(&[BOS, 5, EOS, PAD, PAD, PAD]), seq(&[BOS, 6, EOS, PAD, PAD, PAD])],
        vec![DecodeMode::Causal; 2],
    )
    .unwrap();
    let mut tape = Tape::new();
    let p = bind(&mut tape, &params, |_| true);
    let l = clip_loss(&mut tape, &p, &cfg, &batch).unwrap();
    let v = tape.value(l).item();
    assert!(v.is_finite() && v > 0.0);
    let g = tape.backward(l).unwrap();
    assert!(g.get(p.get("log_temp").unwrap()).is_some());
}
