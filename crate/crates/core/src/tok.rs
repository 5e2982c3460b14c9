//! Word-level tokenizer with fixed special ids.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const PAD: u32 = 2;
pub const MASK: u32 = 3;
pub const SPECIALS: [&str; 4] = ["<bos>", "<eos>", "<pad>", "<mask>"];
/// Default sequence length at desk scale.
pub const DEFAULT_MAX_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Specials first, then every distinct whitespace-separated word in
    /// lexicographic order.
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Self {
        let words: BTreeSet<&str> = corpus.iter().flat_map(|c| c.as_ref().split_whitespace()).collect();
        let tokens = SPECIALS
            .iter()
            .copied()
            .chain(words.into_iter().filter(|w| !SPECIALS.contains(w)))
            .map(str::to_owned)
            .collect();
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line, line number = id, LF-terminated.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            writeln!(s, "{t}").expect("string write");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_owned).collect();
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Format("vocabulary must start with the four special tokens".into()));
        }
        let distinct: BTreeSet<&String> = tokens.iter().collect();
        if distinct.len() != tokens.len() || tokens.iter().any(|t| t.is_empty() || t.contains(char::is_whitespace)) {
            return Err(Error::Format("vocabulary tokens must be unique non-blank words".into()));
        }
        Ok(Self::from_tokens(tokens))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Fixed-length token sequence `[BOS, w.., EOS, PAD..]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    ids: Vec<u32>,
}

impl TokenSeq {
    /// Wraps raw ids, checking the PAD-suffix layout.
    pub fn from_ids(ids: Vec<u32>) -> Result<Self> {
        let first_pad = ids.iter().position(|&t| t == PAD).unwrap_or(ids.len());
        if ids[first_pad..].iter().any(|&t| t != PAD) {
            return Err(Error::Format("PAD must form a contiguous suffix".into()));
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// 1 for every non-PAD position.
    pub fn valid(&self) -> Vec<u8> {
        self.ids.iter().map(|&t| u8::from(t != PAD)).collect()
    }

    pub fn valid_len(&self) -> usize {
        self.ids.iter().take_while(|&&t| t != PAD).count()
    }

    /// Content tokens strictly between BOS and EOS.
    pub fn content(&self) -> &[u32] {
        let n = self.valid_len();
        if n >= 2 && self.ids[0] == BOS && self.ids[n - 1] == EOS {
            &self.ids[1..n - 1]
        } else {
            &self.ids[..0]
        }
    }

    /// Same layout with the content words in reverse order.
    pub fn reversed(&self) -> Self {
        let n = self.valid_len();
        let mut ids = self.ids.clone();
        if n >= 2 && ids[0] == BOS && ids[n - 1] == EOS {
            ids[1..n - 1].reverse();
        }
        Self { ids }
    }
}

/// Encodes `caption` into exactly `max_len` ids.
pub fn encode(caption: &str, vocab: &Vocab, max_len: usize) -> Result<TokenSeq> {
    let words: Vec<&str> = caption.split_whitespace().collect();
    let cap = max_len.saturating_sub(2);
    if words.len() > cap {
        return Err(Error::Length { words: words.len(), max: cap });
    }
    build(&words, vocab, max_len)
}

/// Like [`encode`] but drops words past `max_len - 2`, keeping EOS.
pub fn encode_truncating(caption: &str, vocab: &Vocab, max_len: usize) -> Result<TokenSeq> {
    let words: Vec<&str> = caption.split_whitespace().take(max_len.saturating_sub(2)).collect();
    build(&words, vocab, max_len)
}

fn build(words: &[&str], vocab: &Vocab, max_len: usize) -> Result<TokenSeq> {
    if max_len < 2 {
        return Err(Error::Length { words: words.len(), max: 0 });
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(BOS);
    for w in words {
        ids.push(vocab.id(w).ok_or_else(|| Error::Oov((*w).to_owned()))?);
    }
    ids.push(EOS);
    ids.resize(max_len, PAD);
    Ok(TokenSeq { ids })
}

/// Joins the non-special tokens with single spaces.
pub fn decode(seq: &TokenSeq, vocab: &Vocab) -> Result<String> {
    let mut words = Vec::new();
    for &id in seq.ids() {
        let tok = vocab.token(id).ok_or(Error::Vocab(id))?;
        if id as usize >= SPECIALS.len() {
            words.push(tok);
        }
    }
    Ok(words.join(" "))
}

/// Reverses content words between BOS and EOS.
pub fn reverse_caption(seq: &TokenSeq) -> TokenSeq {
    seq.reversed()
}
