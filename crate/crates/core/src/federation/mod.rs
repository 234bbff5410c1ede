//! Teacher pretraining, the round loop, local training with round gating,
//! and server aggregation.

mod checkpoint;
mod client;
mod config;
mod run;
mod server;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};
pub use client::{
    batch_gradient, epoch_order, pretrain_teachers, train_teacher, BatchItem, ClientState,
    STREAM_AUGMENT, STREAM_EXTRA_MASK, STREAM_GLOBAL_INIT, STREAM_SHUFFLE, STREAM_TEACHER_INIT,
    STREAM_TEACHER_SHUFFLE,
};
pub use config::{Modules, RunConfig};
pub use run::{initial_global, run, run_with, validate_global, RoundRecord, RunArtifacts};
pub use server::{
    aggregate, proportional_weights, ua_weights, AggregationRule, ClientReport, ServerState,
};
