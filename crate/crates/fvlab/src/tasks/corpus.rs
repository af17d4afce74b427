//! Line-delimited JSON task corpora: one `{task_id, split, x, y}` record per example.

use super::spec::{Example, TaskSpec};
use crate::error::Result;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub task_id: String,
    pub split: String,
    pub x: Vec<usize>,
    pub y: Vec<usize>,
}

pub fn write_corpus(task: &TaskSpec, w: &mut impl Write) -> Result<()> {
    for split in ["train", "val", "heldout"] {
        for e in task.split(split)? {
            let r = CorpusRecord { task_id: task.id.clone(), split: split.into(), x: e.x.clone(), y: e.y.clone() };
            serde_json::to_writer(&mut *w, &r)?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub fn read_corpus(r: impl BufRead) -> Result<Vec<CorpusRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

impl CorpusRecord {
    pub fn example(&self) -> Example {
        Example { x: self.x.clone(), y: self.y.clone() }
    }
}
