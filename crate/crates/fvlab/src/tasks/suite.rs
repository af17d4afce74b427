use super::spec::{make_task, TaskDef, TaskSpec, Vocab};
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use serde::{Deserialize, Serialize};

/// Ordered training tasks and the general evaluation tasks scored alongside them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceSpec {
    pub train: Vec<String>,
    pub eval: Vec<String>,
}

impl SequenceSpec {
    pub fn new(train: Vec<String>, eval: Vec<String>) -> Result<Self> {
        let s = SequenceSpec { train, eval };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.is_empty() {
            return Err(Error::Config("sequence needs at least one training task".into()));
        }
        if let Some(t) = self.train.iter().find(|t| self.eval.contains(t)) {
            return Err(Error::Config(format!("task {t} is both trained and used for general evaluation")));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.train.len()
    }

    pub fn n_eval(&self) -> usize {
        self.eval.len()
    }
}

/// The task universe of an experiment and the roles tasks play in it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    pub vocab: Vocab,
    pub tasks: Vec<TaskDef>,
    /// Tasks in the pretraining mixture (uniform weights).
    pub pretrain: Vec<String>,
    /// Held-out tasks whose averaged causal effects select the head set.
    pub probe: Vec<String>,
    pub sequence: SequenceSpec,
}

const RA: [usize; 2] = [52, 84];
const RB: [usize; 2] = [84, 116];

impl Default for SuiteConfig {
    /// Four general tasks with their own instructions, three tasks sharing one
    /// instruction (identifiable only from demonstrations), and five training
    /// tasks. The first three training tasks put functions the base model
    /// already knows behind new instructions.
    fn default() -> Self {
        let tasks = vec![
            TaskDef::generation("E1", 101, 2, None),
            TaskDef::classification("E2", 102, 3),
            TaskDef::generation("E3", 103, 4, Some(RA)),
            TaskDef::classification("E4", 104, 5),
            TaskDef::generation("P1", 201, 6, Some(RA)),
            TaskDef::generation("P2", 202, 6, Some(RB)),
            TaskDef::classification("P3", 203, 6),
            TaskDef::generation("T1", 202, 7, Some(RB)),
            TaskDef::classification("T2", 203, 8),
            TaskDef::generation("T3", 201, 9, Some(RA)),
            TaskDef::generation("T4", 304, 10, Some(RB)),
            TaskDef::classification("T5", 305, 11),
        ];
        let ids = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        SuiteConfig {
            vocab: Vocab::default(),
            tasks,
            pretrain: ids(&["E1", "E2", "E3", "E4", "P1", "P2", "P3"]),
            probe: ids(&["P1", "P2", "P3"]),
            sequence: SequenceSpec { train: ids(&["T1", "T2", "T3", "T4", "T5"]), eval: ids(&["E1", "E2", "E3", "E4"]) },
        }
    }
}

/// Materialized tasks of a [`SuiteConfig`].
#[derive(Clone, Debug)]
pub struct Suite {
    pub vocab: Vocab,
    pub tasks: Vec<TaskSpec>,
    pub config: SuiteConfig,
}

impl Suite {
    /// Task seeds are mixed with `root_seed`; tasks sharing a recipe seed share a mapping.
    pub fn build(cfg: &SuiteConfig, root_seed: u64) -> Result<Self> {
        let mut tasks = Vec::with_capacity(cfg.tasks.len());
        for def in &cfg.tasks {
            if tasks.iter().any(|t: &TaskSpec| t.id == def.id) {
                return Err(Error::Config(format!("duplicate task id {}", def.id)));
            }
            let d = TaskDef { seed: derive_seed(root_seed, "task-gen", def.seed), ..def.clone() };
            let mut t = make_task(&d, &cfg.vocab)?;
            t.seed = def.seed;
            tasks.push(t);
        }
        let s = Suite { vocab: cfg.vocab.clone(), tasks, config: cfg.clone() };
        for id in cfg.pretrain.iter().chain(&cfg.probe).chain(&cfg.sequence.train).chain(&cfg.sequence.eval) {
            s.get(id)?;
        }
        cfg.sequence.validate()?;
        Ok(s)
    }

    pub fn get(&self, id: &str) -> Result<&TaskSpec> {
        self.tasks.iter().find(|t| t.id == id).ok_or_else(|| Error::Config(format!("unknown task {id}")))
    }

    pub fn select(&self, ids: &[String]) -> Result<Vec<TaskSpec>> {
        ids.iter().map(|i| self.get(i).cloned()).collect()
    }
}
