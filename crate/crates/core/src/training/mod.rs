//! The pre-training loop: view pairs, the combined objective, optimisation,
//! momentum bank and run artefacts.

mod checkpoint;
mod optim;
mod queue;
mod run;
mod sample;
mod step;

pub use checkpoint::{read_header, Checkpoint, CheckpointHeader, TensorEntry};
pub use optim::{cosine_lr, warmup_weight, Sgd};
pub use queue::MemoryQueue;
pub use run::{checkpoint_path, read_metrics, run_pretraining, RunSummary, StepRecord};
pub use sample::{
    batch_indices, prepare_batch, prepare_sample, prepare_sample_with, sample_seed, source_regions, Sample,
    SampleRegions,
};
pub use step::{objective, train_step, BatchReport, EvalCounters, Objective, StepOutput, TrainState};
