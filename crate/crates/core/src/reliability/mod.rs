//! Checkpointing, model loading and node-failure handling.

mod checkpoint;
mod driver;
mod failure;

pub use checkpoint::{
    choose_slot, find_resume, load_model, model_shard_index, num_model_shards, persistent_dir, read_shard, restore_full,
    scattered_assignment, scattered_writer, shard_boundaries, verify_image, write_full_checkpoint, write_image,
    write_model_checkpoint, CheckpointKind, CheckpointManifest, CheckpointSource, LoadMode, ParamShape, Resume,
    ShardImage, ShardManifest, CKPT_MANIFEST, FULL_RECORD_BYTES, MODEL_RECORD_BYTES, PERSISTENT_DIR, SLOT_DIRS,
    VALID_MARKER,
};
pub use driver::{run_job, BatchFn, JobConfig, JobReport, RelaunchCause, RelaunchEvent};
pub use failure::{detect_soft_failure, FailureKind, FailurePlan, InjectedFailure, SoftFault};
