//! MoE-LoRA backbone: top-k routed low-rank experts on the FFN up-projection.

mod backbone;
mod expert;
mod layer;
mod router;

pub use backbone::{aux_loss_on_tape, Backbone, Block, ForwardOutput, ModelConfig, RouteMode};
pub use expert::LoraExpert;
pub use layer::{average_weights, ExpertInit, Gating, LayerTrace, MoeLayer};
pub use router::{
    aux_balance_loss, derive_router, gates_from_logits, route, top_k_indices, top_k_mask, Router,
};
