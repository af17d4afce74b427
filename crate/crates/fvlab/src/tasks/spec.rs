use crate::error::{Error, Result};
use crate::rng::substream;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Reserved and pooled token ids of the synthetic language.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub size: usize,
    pub eos: usize,
    pub arrow: usize,
    /// Instruction tokens, `[start, end)`.
    pub instructions: [usize; 2],
    /// The fixed classification label set.
    pub labels: Vec<usize>,
    /// Input token pool, `[start, end)`.
    pub inputs: [usize; 2],
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab { size: 128, eos: 0, arrow: 1, instructions: [2, 16], labels: vec![16, 17, 18, 19], inputs: [20, 52] }
    }
}

impl Vocab {
    pub fn input_pool(&self) -> Vec<usize> {
        (self.inputs[0]..self.inputs[1]).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Generation,
    Classification,
}

fn default_out_len() -> usize {
    1
}
fn default_x_len() -> usize {
    2
}
fn default_key_pos() -> usize {
    1
}
fn default_sizes() -> [usize; 3] {
    [500, 200, 200]
}

/// Serializable recipe for one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDef {
    pub id: String,
    pub kind: TaskKind,
    pub seed: u64,
    pub instruction: Vec<usize>,
    /// Output pool `[start, end)` for generation; defaults to the input pool.
    #[serde(default)]
    pub outputs: Option<[usize; 2]>,
    /// Output tokens per example for generation tasks (1 to 3).
    #[serde(default = "default_out_len")]
    pub out_len: usize,
    /// Tokens per input; the answer depends on the token at `key_pos`.
    #[serde(default = "default_x_len")]
    pub x_len: usize,
    #[serde(default = "default_key_pos")]
    pub key_pos: usize,
    /// Train, val and heldout split sizes.
    #[serde(default = "default_sizes")]
    pub sizes: [usize; 3],
}

impl TaskDef {
    pub fn generation(id: &str, seed: u64, instruction: usize, outputs: Option<[usize; 2]>) -> Self {
        TaskDef {
            id: id.to_string(),
            kind: TaskKind::Generation,
            seed,
            instruction: vec![instruction],
            outputs,
            out_len: 1,
            x_len: 2,
            key_pos: 1,
            sizes: default_sizes(),
        }
    }

    pub fn classification(id: &str, seed: u64, instruction: usize) -> Self {
        TaskDef { kind: TaskKind::Classification, ..TaskDef::generation(id, seed, instruction, None) }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub x: Vec<usize>,
    pub y: Vec<usize>,
}

/// A materialized task: mapping plus disjoint train/val/heldout splits.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub id: String,
    pub kind: TaskKind,
    pub seed: u64,
    pub instruction: Vec<usize>,
    pub key_pos: usize,
    pub mapping: BTreeMap<usize, Vec<usize>>,
    pub label_set: Vec<usize>,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub heldout: Vec<Example>,
}

impl TaskSpec {
    pub fn answer(&self, x: &[usize]) -> Result<Vec<usize>> {
        let key = x.get(self.key_pos).ok_or_else(|| Error::Data("input shorter than key position".into()))?;
        self.mapping.get(key).cloned().ok_or_else(|| Error::Data(format!("token {key} outside the task's input pool")))
    }

    pub fn split(&self, name: &str) -> Result<&[Example]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "heldout" => Ok(&self.heldout),
            s => Err(Error::Data(format!("unknown split {s}"))),
        }
    }
}

/// Builds a task from its recipe, deterministically in `def.seed`.
pub fn make_task(def: &TaskDef, vocab: &Vocab) -> Result<TaskSpec> {
    let inputs = vocab.input_pool();
    if def.x_len == 0 || def.key_pos >= def.x_len {
        return Err(Error::Config(format!("task {}: key_pos {} outside x_len {}", def.id, def.key_pos, def.x_len)));
    }
    if inputs.len() < def.x_len {
        return Err(Error::Config(format!("task {}: input pool smaller than x_len", def.id)));
    }
    for &t in &def.instruction {
        if t < vocab.instructions[0] || t >= vocab.instructions[1] {
            return Err(Error::Config(format!("task {}: instruction token {t} outside instruction range", def.id)));
        }
    }
    let mut rng = substream(def.seed, "task-map");
    let mut mapping: BTreeMap<usize, Vec<usize>> = inputs.iter().map(|&t| (t, Vec::new())).collect();
    let label_set = match def.kind {
        TaskKind::Generation => {
            if !(1..=3).contains(&def.out_len) {
                return Err(Error::Config(format!("task {}: out_len must be 1..=3", def.id)));
            }
            let out = def.outputs.unwrap_or(vocab.inputs);
            if out[1] > vocab.size || out[0] >= out[1] {
                return Err(Error::Config(format!("task {}: output pool {out:?} outside vocabulary", def.id)));
            }
            let mut pool: Vec<usize> = (out[0]..out[1]).collect();
            if pool.len() < inputs.len() {
                return Err(Error::Config(format!(
                    "task {}: vocab exhausted, {} outputs for {} inputs",
                    def.id,
                    pool.len(),
                    inputs.len()
                )));
            }
            for _ in 0..def.out_len {
                pool.shuffle(&mut rng);
                for (i, &t) in inputs.iter().enumerate() {
                    mapping.get_mut(&t).expect("input present").push(pool[i]);
                }
            }
            Vec::new()
        }
        TaskKind::Classification => {
            if vocab.labels.is_empty() {
                return Err(Error::Config("empty label set".into()));
            }
            let mut order = inputs.clone();
            order.shuffle(&mut rng);
            for (i, t) in order.iter().enumerate() {
                mapping.get_mut(t).expect("input present").push(vocab.labels[i % vocab.labels.len()]);
            }
            vocab.labels.clone()
        }
    };

    let mut xs: Vec<Vec<usize>> = Vec::new();
    let mut cur = vec![0usize; def.x_len];
    enumerate_distinct(&inputs, &mut cur, 0, &mut xs);
    let need: usize = def.sizes.iter().sum();
    if xs.len() < need {
        return Err(Error::Data(format!("task {}: {} distinct inputs, {need} requested", def.id, xs.len())));
    }
    let mut srng = substream(def.seed, "task-split");
    xs.shuffle(&mut srng);
    let mk = |x: &Vec<usize>| Example { y: mapping[&x[def.key_pos]].clone(), x: x.clone() };
    let [a, b, c] = def.sizes;
    let train = xs[..a].iter().map(mk).collect();
    let val = xs[a..a + b].iter().map(mk).collect();
    let heldout = xs[a + b..a + b + c].iter().map(mk).collect();
    Ok(TaskSpec {
        id: def.id.clone(),
        kind: def.kind,
        seed: def.seed,
        instruction: def.instruction.clone(),
        key_pos: def.key_pos,
        mapping,
        label_set,
        train,
        val,
        heldout,
    })
}

/// Inputs are tuples of pairwise distinct pool tokens.
fn enumerate_distinct(pool: &[usize], cur: &mut Vec<usize>, i: usize, out: &mut Vec<Vec<usize>>) {
    if i == cur.len() {
        out.push(cur.clone());
        return;
    }
    for &t in pool {
        if cur[..i].contains(&t) {
            continue;
        }
        cur[i] = t;
        enumerate_distinct(pool, cur, i + 1, out);
    }
}
