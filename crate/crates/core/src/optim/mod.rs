//! AdamW with warmup-cosine schedule and post-warmup clipping, plus
//! replicated, sharded and expert-aware sharded optimizer states.

mod adamw;
mod memory;
mod schedule;
mod shard;
mod sharded;

pub use adamw::{adamw_step, bf16_round, SliceState};
pub use memory::{memory_report, MemoryBreakdown, DEFAULT_CAPACITY_BYTES};
pub use schedule::{clip_scale, lr_at_step, AdamWConfig};
pub use shard::{OptimizerMode, ParamClass, ParamInfo, ShardPlan};
pub use sharded::{round_weights, ShardedOptimizer, StepReport};
