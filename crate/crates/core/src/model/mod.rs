//! The bidirectional state-space classifier.
//!
//! Images are cut into patches, embedded, and laid out as a token sequence
//! with a learnable classification token in the middle (one view) or between
//! the two views (early fusion). A stack of bidirectional blocks follows;
//! the final classification token goes through a small MLP head.

pub mod checkpoint;
mod config;
mod forward;
mod gradcheck;
mod params;

pub use config::{parse_key_values, parse_value, Fusion, ModelConfig, Norm, ResidualMode};
pub use forward::{
    assemble_multi_view, assemble_multi_view_with, assemble_single_view, assemble_single_view_with,
    bce_loss, bimamba_block, block_forward, cls_concat_forward, encode_tokens, forward_logit,
    model_forward, patchify, unpatchify, BiMamba, TokenSequence,
};
pub use gradcheck::{check_gradients, GradCheckReport};
pub use params::{decays, BlockWeights, ModelParams, ModelWeights};
