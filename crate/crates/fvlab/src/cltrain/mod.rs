//! Continual instruction tuning: language-modeling loss, the FV-guided
//! consistency and KL terms, baselines, pretraining and sequence runs.

mod baselines;
mod losses;
mod pretrain;
mod sequence;
mod trainer;

pub use baselines::{estimate_fisher, lm_gradients, model_average, EwcState, ReplayBuffer};
pub use losses::{
    fv_consistency_loss, fv_guided_kl_loss, fvg_total_loss, lm_loss, BatchForward, FrozenReference, FrozenTargets,
    TrainBatch,
};
pub use pretrain::{competence_report, pretrain, CompetenceReport, PretrainConfig, TaskCompetence};
pub use sequence::{model_id, run_sequence, RunDir, SequenceResult, SequenceSetup, StageSnapshot};
pub use trainer::{train_task, Method, TaskContext, ThetaSource, TrainRecord, TrainingConfig};
