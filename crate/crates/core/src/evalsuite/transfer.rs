use super::encode_sequences;
use crate::datagen::{class_name, class_of, grammar_terminals, Color, Example, Shape};
use crate::error::{Error, Result};
use crate::model::{init_params, ModelConfig, Objective, Params};
use crate::objective::{greedy_decode_from, score_encoded};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tok::{decode, encode, encode_truncating, TokenSeq, Vocab, BOS};
use crate::train::{FreezeMode, TrainConfig, TrainData, Trainer};

/// First word of a classification target.
pub const CLASS_PREFIX: &str = "class:";

/// `"class: red circle"` for the class label.
pub fn class_text(label: usize) -> String {
    format!("{CLASS_PREFIX} {}", class_name(label))
}

/// Inverse of [`class_text`]; `None` for anything else.
pub fn parse_class_text(text: &str) -> Option<usize> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let [CLASS_PREFIX, color, shape] = words.as_slice() else {
        return None;
    };
    Some(class_of(Shape::from_word(shape)?, Color::from_word(color)?))
}

/// Caption vocabulary plus the classification prefix.
pub fn transfer_vocab() -> Vocab {
    let mut words: Vec<&str> = grammar_terminals();
    words.push(CLASS_PREFIX);
    Vocab::build(&words)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub base_lr: f64,
    pub dec_layers: usize,
    pub seed: u64,
}

impl TransferConfig {
    pub fn new(steps: u64) -> Self {
        Self { steps, batch_size: 32, base_lr: 1e-3, dec_layers: 2, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct TransferResult<T> {
    pub cfg: ModelConfig,
    pub vocab: Vocab,
    /// Copied encoder plus the trained decoder.
    pub params: Params<T>,
    /// Exact-match accuracy of decoded `class: ...` texts.
    pub class_accuracy: f64,
    /// Mean per-token cross-entropy on held-out captions.
    pub caption_ce: f64,
}

/// Trains a new decoder on a frozen encoder with two tasks mixed in one
/// stream: captioning, and classification of the first object written as
/// `class: <color> <shape>`. Evaluated on `test`.
pub fn fresh_decoder_transfer<T: Scalar>(
    enc_cfg: &ModelConfig,
    enc_params: &Params<T>,
    train: &[Example],
    test: &[Example],
    cfg: &TransferConfig,
) -> Result<TransferResult<T>> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::Config("transfer needs train and test examples".into()));
    }
    let vocab = transfer_vocab();
    let model = ModelConfig {
        objective: Objective::Cap,
        parallel_fraction: 0.0,
        reverse_prob: 0.0,
        vocab: vocab.len(),
        dec_layers: cfg.dec_layers,
        ..enc_cfg.clone()
    };
    let mut params = init_params::<T>(&model, cfg.seed)?;
    params.copy_prefix_from(enc_params, "enc.");

    let mut images = Vec::with_capacity(2 * train.len());
    let mut captions = Vec::with_capacity(2 * train.len());
    for ex in train {
        images.push(ex.image.clone());
        captions.push(encode_truncating(&ex.caption, &vocab, model.max_len)?);
        images.push(ex.image.clone());
        captions.push(encode(&class_text(ex.scene.class_label()), &vocab, model.max_len)?);
    }
    let data = TrainData::new(images, captions)?;
    let mut tc = TrainConfig::new(cfg.steps);
    tc.batch_size = cfg.batch_size;
    tc.base_lr = cfg.base_lr;
    tc.seed = cfg.seed;
    tc.freeze_mode = FreezeMode::Encoder;
    let mut trainer = Trainer::with_params(model.clone(), tc, &data, params)?;
    trainer.run()?;
    let params = trainer.into_state().params;

    let test_images: Vec<Tensor<f32>> = test.iter().map(|e| e.image.clone()).collect();
    let seqs = encode_sequences(&model, &params, &test_images)?;
    let block = seqs.numel() / test.len();
    let prefix = [BOS, vocab.id(CLASS_PREFIX).expect("prefix in vocabulary")];
    let (mut hits, mut lp, mut tokens) = (0, 0.0, 0usize);
    for (i, ex) in test.iter().enumerate() {
        let enc =
            Tensor::new(vec![1, model.num_patches(), model.width], seqs.data()[i * block..(i + 1) * block].to_vec())?;
        let out = greedy_decode_from(&model, &params, &enc, &prefix)?;
        hits += usize::from(parse_class_text(&decode(&out, &vocab)?) == Some(ex.scene.class_label()));
        let cap: TokenSeq = encode_truncating(&ex.caption, &vocab, model.max_len)?;
        lp += score_encoded(&model, &params, &enc, std::slice::from_ref(&cap), crate::model::DecodeMode::Causal)?[0];
        tokens += cap.valid_len() - 1;
    }
    Ok(TransferResult {
        cfg: model,
        vocab,
        params,
        class_accuracy: hits as f64 / test.len() as f64,
        caption_ce: -lp / tokens as f64,
    })
}
