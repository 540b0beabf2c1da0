//! Tensor-parallel linears and attention, pipeline schedules and their
//! executor, and selective activation checkpointing.

mod attention;
mod pipeline;
mod sac;
mod schedule;
mod tp;

pub use attention::{
    causal_attention, causal_attention_backward, tp_attention_backward, tp_attention_forward, AttnSaved, AttnShape,
    AttnWeights,
};
pub use pipeline::{pp_execute, PipelineStage};
pub use sac::{ActivationMeter, Block, Retained, SacPolicy};
pub use schedule::{build_schedule, Event, Phase, PipelineSchedule, ScheduleKind};
pub use tp::{tp_allreduce, tp_col_linear, tp_col_linear_backward, tp_row_linear, tp_row_linear_backward, tp_shard};
