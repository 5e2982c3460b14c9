use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("loss has no positions with nonzero weight")]
    EmptyLoss,
    #[error("word not in vocabulary: {0:?}")]
    Oov(String),
    #[error("caption has {words} words, at most {max} fit")]
    Length { words: usize, max: usize },
    #[error("invalid token id {0}")]
    Vocab(u32),
    #[error("perturbation not applicable: {0}")]
    Perturb(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("contrastive loss needs at least 2 examples, got {0}")]
    BatchTooSmall(usize),
    #[error("class {class} has {have} examples, {need} required")]
    InsufficientShots { class: usize, have: usize, need: usize },
    #[error("count mismatch: {0} vs {1}")]
    CountMismatch(usize, usize),
    #[error("loss became non-finite at step {0}")]
    Diverged(u64),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
