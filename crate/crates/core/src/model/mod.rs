//! Dense and MoE decoder models at desk scale: presets, parameter layout
//! and sharding, pipeline stages, loss and the training step.

mod config;
mod layers;
mod params;
mod stage;
mod train;

pub use config::{count_params, ModelConfig, ParamCount, BYTE_VOCAB, PRESET_VOCAB};
pub use layers::{AttnBlock, DenseMlpBlock, MlpSaved, MoeBlock, MoeBlockSaved, NormBlock, NormSaved};
pub use params::{
    assemble_grads, assemble_weights, check_topology, chunk_units, init_full, layer_base, num_units, param_specs,
    params_per_layer, slot, Init, LocalModel, ParamSpec, RankTensors, INIT_STD,
};
pub use stage::{
    cross_entropy, forward_backward, forward_loss, reduce_losses, split_microbatches, RoutingCounts, StageRunner,
    StepOutput,
};
pub use train::{build_optimizer, train_step, StepMetrics};
