//! Cycle-consistent least-squares GAN harmonization.

mod checkpoint;
mod losses;
mod model;
mod train;

pub use checkpoint::{
    load_checkpoint, read_checkpoint_manifest, save_checkpoint, CheckpointManifest, NetworkEntry,
    TensorEntry, CHECKPOINT_FORMAT, CHECKPOINT_VERSION,
};
pub use losses::{
    cycle_loss, full_generator_objective, lsgan_discriminator_loss, lsgan_generator_loss,
    record_cycle_term, record_discriminator_loss, record_generator_loss,
};
pub use model::{Direction, HarmonizationModel, ModelConfig, DEFAULT_LAMBDA_CYCLE};
pub use train::{
    batch_diversity, log_to_csv, train, train_step, BatchSchedule, StopReason, StoppingRule,
    TrainLogEntry, TrainOutcome, COLLAPSE_STD, LOG_HEADER,
};
