//! Expert-parallel sparse MoE block: routing, token gathering, counting and
//! index kernels, grouped expert compute and output reduction.

mod block;
mod config;
pub mod kernels;
mod reference;
mod route;

pub use block::{fast_moe_backward, fast_moe_forward, gather_tokens, load_balance_loss, AuxStats, MoeGrads, MoeSaved};
pub use config::{ExpertWeights, MoeConfig, DEFAULT_TOKEN_BLOCK_SIZE};
pub use kernels::{
    build_artifacts, count_tokens, expert_backward, expert_forward, generate_indices, output_reduction_backward,
    output_reduction_forward, RoutingArtifacts,
};
pub use reference::{reference_moe_backward, reference_moe_forward, reference_moe_forward_routed};
pub use route::{fur_route, renormalize_backward, route, RouterOutput};
