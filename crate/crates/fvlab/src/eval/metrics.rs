use crate::error::{Error, Result};
use crate::tasks::SequenceSpec;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Zero-shot and n-shot scores of every task after each checkpoint `M_0..M_N`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub tasks: Vec<String>,
    pub shots: usize,
    /// `zero_shot[q][m]`, filled once checkpoint `m` exists.
    pub zero_shot: Vec<Vec<Option<f64>>>,
    pub n_shot: Vec<Vec<Option<f64>>>,
}

impl ScoreMatrix {
    pub fn new(tasks: Vec<String>, n_stages: usize, shots: usize) -> Self {
        let q = tasks.len();
        ScoreMatrix { tasks, shots, zero_shot: vec![vec![None; n_stages]; q], n_shot: vec![vec![None; n_stages]; q] }
    }

    pub fn n_stages(&self) -> usize {
        self.zero_shot.first().map(|r| r.len()).unwrap_or(0)
    }

    fn row(&self, task: &str) -> Result<usize> {
        self.tasks.iter().position(|t| t == task).ok_or_else(|| Error::Contract(format!("task {task} not in score matrix")))
    }

    pub fn set(&mut self, task: &str, m: usize, zero_shot: f64, n_shot: f64) -> Result<()> {
        let q = self.row(task)?;
        if m >= self.n_stages() {
            return Err(Error::Contract(format!("stage {m} outside matrix")));
        }
        for s in [zero_shot, n_shot] {
            if !(0.0..=100.0).contains(&s) {
                return Err(Error::Invariant(format!("score {s} outside [0, 100]")));
            }
        }
        self.zero_shot[q][m] = Some(zero_shot);
        self.n_shot[q][m] = Some(n_shot);
        Ok(())
    }

    pub fn a(&self, task: &str, m: usize) -> Result<f64> {
        let q = self.row(task)?;
        self.zero_shot[q].get(m).copied().flatten().ok_or_else(|| Error::Contract(format!("a[{task}][{m}] missing")))
    }

    pub fn a_hat(&self, task: &str, m: usize) -> Result<f64> {
        let q = self.row(task)?;
        self.n_shot[q].get(m).copied().flatten().ok_or_else(|| Error::Contract(format!("â[{task}][{m}] missing")))
    }

    /// Wide table: `task,shot,m0,...,mN`.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut c = csv::Writer::from_writer(w);
        let mut head = vec!["task".to_string(), "shot".to_string()];
        head.extend((0..self.n_stages()).map(|m| format!("m{m}")));
        c.write_record(&head)?;
        for (q, t) in self.tasks.iter().enumerate() {
            for (shot, row) in [(0, &self.zero_shot[q]), (self.shots, &self.n_shot[q])] {
                let mut r = vec![t.clone(), shot.to_string()];
                r.extend(row.iter().map(|v| v.map(|x| format!("{x:.4}")).unwrap_or_default()));
                c.write_record(&r)?;
            }
        }
        c.flush()?;
        Ok(())
    }

    /// Long table: `checkpoint,task,shot,score`.
    pub fn write_long_csv(&self, w: impl Write) -> Result<()> {
        let mut c = csv::Writer::from_writer(w);
        c.write_record(["checkpoint", "task", "shot", "score"])?;
        for m in 0..self.n_stages() {
            for (q, t) in self.tasks.iter().enumerate() {
                for (shot, row) in [(0, &self.zero_shot[q]), (self.shots, &self.n_shot[q])] {
                    if let Some(v) = row[m] {
                        c.write_record([format!("M{m}"), t.clone(), shot.to_string(), format!("{v:.4}")])?;
                    }
                }
            }
        }
        c.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskBreakdown {
    pub task: String,
    pub role: String,
    pub zero_shot: Vec<f64>,
    pub n_shot: Vec<f64>,
}

/// The five summary metrics of a sequence run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub gp: f64,
    pub ip: f64,
    pub fp: f64,
    pub ap: f64,
    pub forget: f64,
    pub per_task: Vec<TaskBreakdown>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// GP, IP over eval tasks at `M_N`; FP over training tasks at `M_N`; AP over
/// `a[T_j][j]`; Forget = AP - FP.
pub fn compute_metrics(scores: &ScoreMatrix, seq: &SequenceSpec) -> Result<MetricsReport> {
    let n = seq.n();
    if scores.n_stages() < n + 1 {
        return Err(Error::Contract(format!("score matrix has {} stages, need {}", scores.n_stages(), n + 1)));
    }
    if seq.eval.is_empty() {
        return Err(Error::Contract("no general evaluation tasks".into()));
    }
    let gp = mean(&seq.eval.iter().map(|e| scores.a(e, n)).collect::<Result<Vec<_>>>()?);
    let ip = mean(&seq.eval.iter().map(|e| scores.a_hat(e, n)).collect::<Result<Vec<_>>>()?);
    let fp = mean(&seq.train.iter().map(|t| scores.a(t, n)).collect::<Result<Vec<_>>>()?);
    let ap = mean(&seq.train.iter().enumerate().map(|(j, t)| scores.a(t, j + 1)).collect::<Result<Vec<_>>>()?);
    let mut per_task = Vec::new();
    for (role, ids) in [("eval", &seq.eval), ("train", &seq.train)] {
        for t in ids {
            let zero_shot = (0..=n).map(|m| scores.a(t, m)).collect::<Result<Vec<_>>>()?;
            let n_shot = (0..=n).map(|m| scores.a_hat(t, m)).collect::<Result<Vec<_>>>()?;
            per_task.push(TaskBreakdown { task: t.clone(), role: role.into(), zero_shot, n_shot });
        }
    }
    Ok(MetricsReport { gp, ip, fp, ap, forget: ap - fp, per_task })
}

impl MetricsReport {
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut c = csv::Writer::from_writer(w);
        c.write_record(["metric", "value"])?;
        for (k, v) in [("GP", self.gp), ("IP", self.ip), ("FP", self.fp), ("AP", self.ap), ("Forget", self.forget)] {
            c.write_record([k.to_string(), format!("{v:.6}")])?;
        }
        c.flush()?;
        Ok(())
    }

    pub fn write_json(&self, mut w: impl Write) -> Result<()> {
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        Ok(())
    }
}
