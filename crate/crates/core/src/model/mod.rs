//! Architectures: a ViT image encoder, a bias-free text decoder with
//! cross-attention, the contrastive text tower, and pooling heads.

mod config;
mod count;
mod decoder;
mod encoder;
mod heads;
mod layers;
mod params;
mod text_tower;

pub use config::{ModelConfig, Objective};
pub use count::count_params;
pub use decoder::{decode_text, decoder_inputs, DecodeMode, DecoderMaskKind};
pub use encoder::{encode_image, patchify, patchify_batch, unpatchify};
pub use heads::{init_map_head, pool_gap, pool_map, MapHead};
pub(crate) use params::init_tensor;
pub use params::{bind, init_params, param_specs, Bound, ParamKind, ParamSpec, Params};
pub use text_tower::{encode_text_tower, text_valid_len};
