//! Toy Vision Transformer backbone.

pub mod attention;
mod config;
mod layer;
mod model;

pub use attention::{attention_decoupled, attention_vanilla, cross_attention, AttentionMode};
pub use config::ViTConfig;
pub use layer::{
    cls_attention_topk, forward_plain, instance_cls_attention, layer_forward, ForwardTrace,
    LayerActivations, LayerOutput, LayerRecord, LayerTrace, PromptKind, Segment,
};
pub use model::{patchify, Block, BoundBlock, BoundHead, BoundViT, Head, ViT};
