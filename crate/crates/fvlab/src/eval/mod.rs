//! Scoring, the sequence metrics, and similarity analytics.

mod metrics;
mod rouge;
mod scoring;
mod similarity;

pub use metrics::{compute_metrics, MetricsReport, ScoreMatrix, TaskBreakdown};
pub use rouge::{classification_score, lcs_len, rouge_l};
pub use scoring::{eval_prompts, evaluate_queries, evaluate_task, score_answer, EvalConfig};
pub use similarity::{cosine, hidden_state_similarity, param_l2_distance, pearson_r2};
