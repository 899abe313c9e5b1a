//! Translation, adversarial and consistency losses, the joint update, and
//! the seeded training loop.

mod loss;
mod run;
mod step;

pub use loss::{
    adversarial_loss, adversarial_loss_value, nll_loss, total_loss, LossBreakdown, LossWeights,
};
pub use run::{
    fresh_optimizer, init_from_baseline, read_loss_log, source_ids, train, write_loss_log,
    AuxiliarySource, Batcher, DataConfig, RunDir, TrainOutcome, TrainingConfig, TrainingData,
};
pub use step::{
    consistency_loss, dropout_rng, pseudo_max_len, pseudo_reference, teacher_forcing, train_step,
    ParallelBatch, StepInputs, StepOutput, TranscriptionBatch,
};
