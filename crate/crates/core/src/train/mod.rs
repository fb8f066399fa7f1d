//! Masked autoregressive loss, AdamW with warmup and cosine decay, stage
//! plans, the two-stage pipeline and the ablation matrix.

mod ablation;
mod loss;
mod optim;
mod pipeline;
mod plan;
mod schedule;
mod stage;

pub use ablation::{ablation_matrix, ablation_rows, AblationResult, AblationRow, AblationSetup, AblationTable};
pub use loss::{autoregressive_loss, example_loss, loss_and_grads, loss_grad_check, GradCheckReport, Grads, GRAD_CHECK_FLOOR};
pub use optim::{adamw_step, OptimizerState};
pub use pipeline::{checkpoint_path, run_pipeline, run_stages, Corpora, DataPaths, RunConfig};
pub use plan::{advanced, apply_stage_plan, preliminary, CorpusKind, Preset, StagePlan};
pub use schedule::{lr_at, schedule, warmup_steps};
pub use stage::{run_stage, StageObserver, TrainReport};
