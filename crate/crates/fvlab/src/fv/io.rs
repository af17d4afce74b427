//! Text formats for FV artifacts. Vectors are JSON with shortest round-trip
//! decimals; CE grids are long-format CSV, one row per head.

use super::{CausalEffectGrid, FunctionVector, FunctionVectorHeadSet};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

pub fn write_function_vector(fv: &FunctionVector, w: impl Write) -> Result<()> {
    serde_json::to_writer_pretty(w, fv)?;
    Ok(())
}

pub fn read_function_vector(r: impl Read) -> Result<FunctionVector> {
    let fv: FunctionVector = serde_json::from_reader(r)?;
    if fv.theta.iter().any(|x| !x.is_finite()) {
        return Err(Error::Format(format!("function vector {} has non-finite entries", fv.task_id)));
    }
    Ok(fv)
}

pub fn write_head_set(s: &FunctionVectorHeadSet, w: impl Write) -> Result<()> {
    serde_json::to_writer_pretty(w, s)?;
    Ok(())
}

pub fn read_head_set(r: impl Read) -> Result<FunctionVectorHeadSet> {
    let s: FunctionVectorHeadSet = serde_json::from_reader(r)?;
    let mut seen = s.heads.clone();
    seen.sort();
    seen.dedup();
    if seen.len() != s.heads.len() {
        return Err(Error::Format("head set lists a head twice".into()));
    }
    Ok(s)
}

#[derive(Serialize, Deserialize)]
struct GridRow {
    layer: usize,
    head: usize,
    ce: f64,
    probe_count: usize,
    tasks: String,
}

pub fn write_ce_grid_csv(g: &CausalEffectGrid, w: impl Write) -> Result<()> {
    let mut c = csv::Writer::from_writer(w);
    let tasks = g.tasks.join(";");
    for l in 0..g.n_layers {
        for h in 0..g.n_heads {
            c.serialize(GridRow {
                layer: l,
                head: h,
                ce: g.values[l * g.n_heads + h],
                probe_count: g.probe_count,
                tasks: tasks.clone(),
            })?;
        }
    }
    c.flush()?;
    Ok(())
}

/// Rows must come in layer-major order and cover a full `L x H` grid.
pub fn read_ce_grid_csv(r: impl Read) -> Result<CausalEffectGrid> {
    let mut c = csv::Reader::from_reader(r);
    let rows: Vec<GridRow> = c.deserialize().collect::<std::result::Result<_, _>>()?;
    let first = rows.first().ok_or_else(|| Error::Format("empty CE grid".into()))?;
    let n_layers = rows.iter().map(|r| r.layer).max().unwrap_or(0) + 1;
    let n_heads = rows.iter().map(|r| r.head).max().unwrap_or(0) + 1;
    if rows.len() != n_layers * n_heads {
        return Err(Error::Format(format!("CE grid has {} rows, expected {}", rows.len(), n_layers * n_heads)));
    }
    for (i, r) in rows.iter().enumerate() {
        if r.layer * n_heads + r.head != i {
            return Err(Error::Format(format!("CE grid row {i} out of order")));
        }
    }
    let tasks = if first.tasks.is_empty() { Vec::new() } else { first.tasks.split(';').map(String::from).collect() };
    Ok(CausalEffectGrid {
        n_layers,
        n_heads,
        values: rows.iter().map(|r| r.ce).collect(),
        probe_count: first.probe_count,
        tasks,
    })
}
