use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Objective {
    /// Autoregressive captioning.
    Cap,
    /// Captioning with a fraction of examples predicted in parallel.
    CapPa,
    /// Two-tower contrastive training.
    Clip,
}

impl Objective {
    pub fn is_captioning(self) -> bool {
        matches!(self, Objective::Cap | Objective::CapPa)
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Cap => "cap",
            Objective::CapPa => "cappa",
            Objective::Clip => "clip",
        })
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cap" => Ok(Objective::Cap),
            "cappa" => Ok(Objective::CapPa),
            "clip" => Ok(Objective::Clip),
            _ => Err(Error::Config(format!("unknown objective {s:?} (expected cap, cappa or clip)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub image_res: usize,
    pub width: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub objective: Objective,
    /// Fraction of examples trained with parallel prediction.
    pub parallel_fraction: f64,
    pub share_dec_embeddings: bool,
    pub dec_biases: bool,
    /// Probability of reversing each training caption.
    pub reverse_prob: f64,
}

impl ModelConfig {
    /// Desk-scale default: 32px images, 4px patches, width 128, 4 encoder and
    /// 2 decoder layers.
    pub fn desk(objective: Objective, vocab: usize) -> Self {
        Self {
            patch_size: 4,
            image_res: 32,
            width: 128,
            enc_layers: 4,
            dec_layers: 2,
            heads: 4,
            mlp_dim: 512,
            vocab,
            max_len: 16,
            objective,
            parallel_fraction: if objective == Objective::CapPa { 0.75 } else { 0.0 },
            share_dec_embeddings: false,
            dec_biases: false,
            reverse_prob: 0.0,
        }
    }

    /// ViT-B/16 captioner at 224px with a 32k vocabulary and 64 tokens.
    pub fn b16_cap() -> Self {
        Self {
            patch_size: 16,
            image_res: 224,
            width: 768,
            enc_layers: 12,
            dec_layers: 6,
            heads: 12,
            mlp_dim: 3072,
            vocab: 32_000,
            max_len: 64,
            ..Self::desk(Objective::Cap, 32_000)
        }
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_res / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return fail(format!("width {} must be a positive multiple of heads {}", self.width, self.heads));
        }
        if self.patch_size == 0 || self.image_res == 0 || !self.image_res.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image_res {} must be a positive multiple of patch_size {}",
                self.image_res, self.patch_size
            ));
        }
        if self.enc_layers == 0 || self.mlp_dim == 0 {
            return fail("enc_layers and mlp_dim must be positive".into());
        }
        if self.objective.is_captioning() && self.dec_layers == 0 {
            return fail("captioning objectives need at least one decoder layer".into());
        }
        if self.vocab <= crate::tok::MASK as usize || self.max_len < 2 {
            return fail(format!("vocab {} / max_len {} too small", self.vocab, self.max_len));
        }
        for (name, p) in [("parallel_fraction", self.parallel_fraction), ("reverse_prob", self.reverse_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} = {p} outside [0, 1]"));
            }
        }
        if self.objective == Objective::Cap && self.parallel_fraction != 0.0 {
            return fail("parallel_fraction must be 0 for the cap objective".into());
        }
        Ok(())
    }

    /// `key=value` lines in a fixed key order.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("objective".into(), self.objective.to_string()),
            ("patch_size".into(), self.patch_size.to_string()),
            ("image_res".into(), self.image_res.to_string()),
            ("width".into(), self.width.to_string()),
            ("enc_layers".into(), self.enc_layers.to_string()),
            ("dec_layers".into(), self.dec_layers.to_string()),
            ("heads".into(), self.heads.to_string()),
            ("mlp_dim".into(), self.mlp_dim.to_string()),
            ("vocab".into(), self.vocab.to_string()),
            ("max_len".into(), self.max_len.to_string()),
            ("parallel_fraction".into(), self.parallel_fraction.to_string()),
            ("share_dec_embeddings".into(), self.share_dec_embeddings.to_string()),
            ("dec_biases".into(), self.dec_biases.to_string()),
            ("reverse_prob".into(), self.reverse_prob.to_string()),
        ]
    }

    pub const KEYS: [&'static str; 14] = [
        "objective",
        "patch_size",
        "image_res",
        "width",
        "enc_layers",
        "dec_layers",
        "heads",
        "mlp_dim",
        "vocab",
        "max_len",
        "parallel_fraction",
        "share_dec_embeddings",
        "dec_biases",
        "reverse_prob",
    ];

    /// Applies `key=value` overrides; unknown keys are rejected.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
            value.trim().parse().map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
        }
        match key {
            "objective" => self.objective = value.trim().parse()?,
            "patch_size" => self.patch_size = parse(key, value)?,
            "image_res" => self.image_res = parse(key, value)?,
            "width" => self.width = parse(key, value)?,
            "enc_layers" => self.enc_layers = parse(key, value)?,
            "dec_layers" => self.dec_layers = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "mlp_dim" => self.mlp_dim = parse(key, value)?,
            "vocab" => self.vocab = parse(key, value)?,
            "max_len" => self.max_len = parse(key, value)?,
            "parallel_fraction" => self.parallel_fraction = parse(key, value)?,
            "share_dec_embeddings" => self.share_dec_embeddings = parse(key, value)?,
            "dec_biases" => self.dec_biases = parse(key, value)?,
            "reverse_prob" => self.reverse_prob = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown model key {key:?}"))),
        }
        Ok(())
    }

    pub fn from_kv(map: &BTreeMap<String, String>) -> Result<Self> {
        let objective: Objective =
            map.get("objective").ok_or_else(|| Error::Config("missing key objective".into()))?.parse()?;
        let mut cfg = Self::desk(objective, 0);
        for key in Self::KEYS {
            let v = map.get(key).ok_or_else(|| Error::Config(format!("missing key {key}")))?;
            cfg.apply_kv(key, v)?;
        }
        if let Some(k) = map.keys().find(|k| !Self::KEYS.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown model key {k:?}")));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
