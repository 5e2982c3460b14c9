use crate::datagen::{perturb, Example, PerturbKind, PerturbedPair};
use crate::error::{Error, Result};
use crate::model::{bind, DecodeMode, ModelConfig, Objective, Params};
use crate::objective::{clip_image_embed, clip_text_embed, cosine_scores, score_candidates};
use crate::rng::{derive, Stream};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};
use crate::tok::{encode, TokenSeq, Vocab};

pub const PERTURB_HEADER: &str = "scorer,kind,pairs,wins,accuracy";

/// Assigns a score to each candidate caption of an image; higher means a
/// better match.
pub trait Scorer {
    fn name(&self) -> String;
    fn score(&self, image: &Tensor<f32>, captions: &[String]) -> Result<Vec<f64>>;
}

fn tokenize(captions: &[String], vocab: &Vocab, max_len: usize) -> Result<Vec<TokenSeq>> {
    captions.iter().map(|c| encode(c, vocab, max_len)).collect()
}

/// Caption log-likelihood under a captioner, optionally with the image
/// replaced by zeros.
pub struct CaptionScorer<'a, T> {
    pub cfg: &'a ModelConfig,
    pub params: &'a Params<T>,
    pub vocab: &'a Vocab,
    pub mode: DecodeMode,
    pub blind: bool,
}

impl<'a, T: Scalar> CaptionScorer<'a, T> {
    pub fn new(cfg: &'a ModelConfig, params: &'a Params<T>, vocab: &'a Vocab, mode: DecodeMode) -> Self {
        Self { cfg, params, vocab, mode, blind: false }
    }

    pub fn blind(mut self) -> Self {
        self.blind = true;
        self
    }
}

impl<T: Scalar> Scorer for CaptionScorer<'_, T> {
    fn name(&self) -> String {
        match (self.blind, self.mode) {
            (true, DecodeMode::Causal) => "blind".into(),
            (true, mode) => format!("blind-{mode}"),
            (false, mode) => format!("{}-{mode}", self.cfg.objective),
        }
    }

    fn score(&self, image: &Tensor<f32>, captions: &[String]) -> Result<Vec<f64>> {
        let seqs = tokenize(captions, self.vocab, self.cfg.max_len)?;
        score_candidates(self.cfg, self.params, image, &seqs, self.mode, self.blind)
    }
}

/// Cosine similarity between the two towers of a contrastive model.
pub struct ContrastiveScorer<'a, T> {
    pub cfg: &'a ModelConfig,
    pub params: &'a Params<T>,
    pub vocab: &'a Vocab,
}

impl<'a, T: Scalar> ContrastiveScorer<'a, T> {
    pub fn new(cfg: &'a ModelConfig, params: &'a Params<T>, vocab: &'a Vocab) -> Result<Self> {
        if cfg.objective != Objective::Clip {
            return Err(Error::Config(format!("contrastive scoring needs a clip model, got {}", cfg.objective)));
        }
        Ok(Self { cfg, params, vocab })
    }
}

impl<T: Scalar> Scorer for ContrastiveScorer<'_, T> {
    fn name(&self) -> String {
        "contrastive".into()
    }

    fn score(&self, image: &Tensor<f32>, captions: &[String]) -> Result<Vec<f64>> {
        let seqs = tokenize(captions, self.vocab, self.cfg.max_len)?;
        let mut tape = Tape::new();
        let p = bind(&mut tape, self.params, |_| false);
        let img = clip_image_embed(&mut tape, &p, self.cfg, &[image])?;
        let txt = clip_text_embed(&mut tape, &p, self.cfg, &seqs)?;
        Ok(cosine_scores(tape.value(img).data(), tape.value(txt)))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PerturbRow {
    pub scorer: String,
    pub kind: PerturbKind,
    pub pairs: usize,
    pub wins: usize,
}

impl PerturbRow {
    /// `wins / pairs`; 0 when there are no pairs.
    pub fn accuracy(&self) -> f64 {
        if self.pairs == 0 {
            0.0
        } else {
            self.wins as f64 / self.pairs as f64
        }
    }
}

/// Win counts per (scorer, kind), in scorer-major order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PerturbReport {
    pub rows: Vec<PerturbRow>,
}

impl PerturbReport {
    pub fn row(&self, scorer: &str, kind: PerturbKind) -> Option<&PerturbRow> {
        self.rows.iter().find(|r| r.scorer == scorer && r.kind == kind)
    }

    pub fn accuracy(&self, scorer: &str, kind: PerturbKind) -> Option<f64> {
        self.row(scorer, kind).map(PerturbRow::accuracy)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{PERTURB_HEADER}\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{},{}\n", r.scorer, r.kind.name(), r.pairs, r.wins, r.accuracy()));
        }
        s
    }
}

/// Every applicable (true, false) caption pair for each example, grouped by
/// example index. The pair for example `i` is drawn from its own seed.
pub fn perturbation_pairs(
    examples: &[Example],
    kinds: &[PerturbKind],
    seed: u64,
) -> Result<Vec<(usize, Vec<PerturbedPair>)>> {
    let mut out = Vec::new();
    for (i, ex) in examples.iter().enumerate() {
        let mut pairs = Vec::new();
        for &kind in kinds {
            match perturb(ex, kind, derive(seed, Stream::Perturb, &[i as u64])) {
                Ok(p) => pairs.push(p),
                Err(Error::Perturb(_)) => {}
                Err(e) => return Err(e),
            }
        }
        if !pairs.is_empty() {
            out.push((i, pairs));
        }
    }
    Ok(out)
}

/// Scores the true caption against each perturbed one; a pair is won only
/// when the true caption scores strictly higher.
pub fn perturbation_benchmark(
    scorers: &[&dyn Scorer],
    examples: &[Example],
    kinds: &[PerturbKind],
    seed: u64,
) -> Result<PerturbReport> {
    let groups = perturbation_pairs(examples, kinds, seed)?;
    let mut rows = Vec::new();
    for scorer in scorers {
        let name = scorer.name();
        let mut counts: Vec<(usize, usize)> = vec![(0, 0); kinds.len()];
        for (i, pairs) in &groups {
            let mut captions = vec![examples[*i].caption.clone()];
            captions.extend(pairs.iter().map(|p| p.negative.clone()));
            let scores = scorer.score(&examples[*i].image, &captions)?;
            if scores.len() != captions.len() {
                return Err(Error::CountMismatch(scores.len(), captions.len()));
            }
            for (p, &s) in pairs.iter().zip(&scores[1..]) {
                let k = kinds.iter().position(|&k| k == p.kind).expect("kind requested");
                counts[k].0 += 1;
                counts[k].1 += usize::from(scores[0] > s);
            }
        }
        rows.extend(kinds.iter().zip(counts).map(|(&kind, (pairs, wins))| PerturbRow {
            scorer: name.clone(),
            kind,
            pairs,
            wins,
        }));
    }
    Ok(PerturbReport { rows })
}
