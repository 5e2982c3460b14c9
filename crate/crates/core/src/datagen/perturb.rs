use rand::seq::SliceRandom;
use rand::Rng;

use super::grammar::{scene_satisfies, Caption, Relation};
use super::{Color, Example, Shape};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PerturbKind {
    /// Swap the two related objects: "a left of b" -> "b left of a".
    OrderSwap,
    /// Swap the colors of the two related objects.
    AttributeSwap,
    /// Replace the relation by its opposite.
    RelationSwap,
    /// Replace the subject's shape by another shape.
    ObjectReplace,
    /// Mention an additional object that is not in the scene.
    AddAttribute,
    /// Random word order; usually ungrammatical.
    Shuffle,
}

impl PerturbKind {
    pub const ALL: [PerturbKind; 6] = [
        PerturbKind::OrderSwap,
        PerturbKind::AttributeSwap,
        PerturbKind::RelationSwap,
        PerturbKind::ObjectReplace,
        PerturbKind::AddAttribute,
        PerturbKind::Shuffle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PerturbKind::OrderSwap => "order",
            PerturbKind::AttributeSwap => "attribute",
            PerturbKind::RelationSwap => "relation",
            PerturbKind::ObjectReplace => "replace",
            PerturbKind::AddAttribute => "add",
            PerturbKind::Shuffle => "shuffle",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PerturbedPair {
    pub positive: String,
    pub negative: String,
    pub kind: PerturbKind,
}

const ATTEMPTS: u64 = 32;

fn candidate(cap: &Caption, words: &[&str], kind: PerturbKind, rng: &mut impl Rng) -> Option<String> {
    let mut c = cap.clone();
    match kind {
        PerturbKind::OrderSwap => {
            let (rel, b) = c.relation?;
            c.relation = Some((rel, c.subject));
            c.subject = b;
        }
        PerturbKind::AttributeSwap => {
            let (rel, b) = c.relation?;
            c.relation = Some((rel, (c.subject.0, b.1)));
            c.subject = (b.0, c.subject.1);
        }
        PerturbKind::RelationSwap => {
            let (rel, b) = c.relation?;
            c.relation = Some((rel.opposite(), b));
        }
        PerturbKind::ObjectReplace => {
            let others: Vec<Shape> = Shape::ALL.into_iter().filter(|&s| s != c.subject.1).collect();
            c.subject.1 = *others.choose(rng)?;
        }
        PerturbKind::AddAttribute => {
            let obj = (*Color::ALL.choose(rng)?, *Shape::ALL.choose(rng)?);
            match (c.relation, c.extra) {
                (None, _) => c.relation = Some((*Relation::ALL.choose(rng)?, obj)),
                (Some(_), None) => c.extra = Some(obj),
                (Some(_), Some(_)) => return None,
            }
        }
        PerturbKind::Shuffle => {
            let mut w = words.to_vec();
            w.shuffle(rng);
            return Some(w.join(" "));
        }
    }
    Some(c.to_string())
}

/// Builds a (true caption, false caption) pair for `ex`. The negative is
/// checked against the scene, not just compared as a string.
pub fn perturb(ex: &Example, kind: PerturbKind, seed: u64) -> Result<PerturbedPair> {
    let cap = Caption::parse(&ex.caption)
        .ok_or_else(|| Error::Perturb(format!("caption {:?} is not in the grammar", ex.caption)))?;
    let words: Vec<&str> = ex.caption.split_whitespace().collect();
    for attempt in 0..ATTEMPTS {
        let mut rng = stream_rng(seed, Stream::Perturb, &[kind as u64, attempt]);
        let Some(negative) = candidate(&cap, &words, kind, &mut rng) else {
            return Err(Error::Perturb(format!("{} needs a different caption structure", kind.name())));
        };
        if negative != ex.caption && !scene_satisfies(&ex.scene, &negative) {
            return Ok(PerturbedPair { positive: ex.caption.clone(), negative, kind });
        }
        if matches!(kind, PerturbKind::OrderSwap | PerturbKind::AttributeSwap | PerturbKind::RelationSwap) {
            break;
        }
    }
    Err(Error::Perturb(format!("no false {} variant of {:?}", kind.name(), ex.caption)))
}
