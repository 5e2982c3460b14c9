use super::config::ModelConfig;

/// Learned parameter count from closed-form per-layer sizes.
pub fn count_params(cfg: &ModelConfig) -> usize {
    let (d, f, v, n) = (cfg.width, cfg.mlp_dim, cfg.vocab, cfg.max_len);
    // Two norm scales, four square projections, two MLP matrices.
    let enc_block = 2 * d + 4 * d * d + 2 * d * f;
    let image_tower = cfg.patch_dim() * d + cfg.num_patches() * d + cfg.enc_layers * enc_block + d;
    if cfg.objective.is_captioning() {
        let mut block = 3 * d + 8 * d * d + 2 * d * f;
        let mut head = d + if cfg.share_dec_embeddings { 0 } else { d * v };
        if cfg.dec_biases {
            // Norm shifts, eight projection biases, MLP biases.
            block += 3 * d + 8 * d + f + d;
            head += d + v;
        }
        image_tower + v * d + n * d + cfg.dec_layers * block + head
    } else {
        let text_tower = v * d + n * d + cfg.enc_layers * enc_block + d;
        image_tower + d * d + text_tower + d * d + 1
    }
}
