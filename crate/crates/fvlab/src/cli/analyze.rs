//! Stage-by-stage diagnostics of a sequence run: FV self-similarity,
//! cross-task FV similarity, hidden-state similarity, parameter distance,
//! and how well each tracks the zero-shot score.

use crate::cltrain::StageSnapshot;
use crate::error::Result;
use crate::eval::{hidden_state_similarity, param_l2_distance, pearson_r2, ScoreMatrix};
use crate::fv::fv_similarity;
use crate::model::Model;
use crate::tasks::{render, Suite};
use serde::{Deserialize, Serialize};
use std::io::Write;

pub const METRIC_KINDS: [&str; 5] = ["score_zero_shot", "score_n_shot", "fv_self_sim", "hidden_sim", "param_l2"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticsRow {
    pub stage: usize,
    pub task: String,
    pub metric: String,
    pub value: f64,
}

/// `Cosine(θ_{T^e}^{j-1}, θ_{T_j}^{j-1})`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossTaskRow {
    pub stage: usize,
    pub eval_task: String,
    pub train_task: String,
    pub similarity: f64,
}

/// `R²` of a task's zero-shot score trajectory against each diagnostic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct R2Row {
    pub task: String,
    pub fv_self_sim: Option<f64>,
    pub hidden_sim: Option<f64>,
    pub param_l2: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub rows: Vec<AnalyticsRow>,
    pub cross: Vec<CrossTaskRow>,
    pub r2: Vec<R2Row>,
}

impl Analysis {
    /// Trajectory of `metric` for `task` over stages.
    pub fn series(&self, task: &str, metric: &str) -> Vec<f64> {
        self.rows.iter().filter(|r| r.task == task && r.metric == metric).map(|r| r.value).collect()
    }

    pub fn r2_for(&self, task: &str) -> Option<&R2Row> {
        self.r2.iter().find(|r| r.task == task)
    }

    pub fn write_long_csv(&self, w: impl Write) -> Result<()> {
        let mut c = csv::Writer::from_writer(w);
        for r in &self.rows {
            c.serialize(r)?;
        }
        c.flush()?;
        Ok(())
    }

    pub fn write_cross_csv(&self, w: impl Write) -> Result<()> {
        let mut c = csv::Writer::from_writer(w);
        for r in &self.cross {
            c.serialize(r)?;
        }
        c.flush()?;
        Ok(())
    }

    pub fn write_r2_csv(&self, w: impl Write) -> Result<()> {
        let mut c = csv::Writer::from_writer(w);
        for r in &self.r2 {
            c.serialize(r)?;
        }
        c.flush()?;
        Ok(())
    }
}

/// Analytics over checkpoints `M_0..M_N`, their FV snapshots and the score matrix.
pub fn analyze(suite: &Suite, checkpoints: &[Model], snapshots: &[StageSnapshot], scores: &ScoreMatrix) -> Result<Analysis> {
    let base = &checkpoints[0];
    let vocab = &suite.vocab;
    let seq = &suite.config.sequence;
    let l2: Vec<f64> = checkpoints.iter().map(|m| param_l2_distance(base, m)).collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (j, m) in checkpoints.iter().enumerate() {
        for t in &scores.tasks {
            let task = suite.get(t)?;
            let probes: Vec<Vec<usize>> = task.val.iter().map(|e| render(vocab, &task.instruction, &[], &e.x)).collect();
            let vals = [
                scores.a(t, j)?,
                scores.a_hat(t, j)?,
                fv_similarity(snapshots[j].get(t)?, snapshots[0].get(t)?)?,
                hidden_state_similarity(base, m, &probes)?,
                l2[j],
            ];
            for (k, v) in METRIC_KINDS.iter().zip(vals) {
                rows.push(AnalyticsRow { stage: j, task: t.clone(), metric: k.to_string(), value: v });
            }
        }
    }
    let mut cross = Vec::new();
    for j in 1..checkpoints.len() {
        let tj = &seq.train[j - 1];
        for e in &seq.eval {
            cross.push(CrossTaskRow {
                stage: j,
                eval_task: e.clone(),
                train_task: tj.clone(),
                similarity: fv_similarity(snapshots[j - 1].get(e)?, snapshots[j - 1].get(tj)?)?,
            });
        }
    }
    let mut a = Analysis { rows, cross, r2: Vec::new() };
    for t in &scores.tasks {
        let s = a.series(t, "score_zero_shot");
        let r2 = |m: &str| pearson_r2(&s, &a.series(t, m)).ok();
        let row = R2Row { task: t.clone(), fv_self_sim: r2("fv_self_sim"), hidden_sim: r2("hidden_sim"), param_l2: r2("param_l2") };
        a.r2.push(row);
    }
    Ok(a)
}
