//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//! `"FVL1"`, `u32` version, `u32` config length + TOML config text,
//! `u32` record count, then per record: `u32` name length + UTF-8 name,
//! `u32` rank, `u64` extents, and the fp64 payload.

use super::config::ModelConfig;
use super::lora::{LowRankAdapter, LowRankPair};
use super::params::ParamStore;
use super::Model;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"FVL1";
const VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn put_record(w: &mut impl Write, name: &str, t: &Tensor) -> Result<()> {
    put_u32(w, name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    put_u32(w, t.shape.len() as u32)?;
    for &s in &t.shape {
        w.write_all(&(s as u64).to_le_bytes())?;
    }
    for &x in &t.data {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn get_record(r: &mut impl Read) -> Result<(String, Tensor)> {
    let n = get_u32(r)? as usize;
    let mut name = vec![0u8; n];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
    let rank = get_u32(r)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(get_u64(r)? as usize);
    }
    let count: usize = shape.iter().product();
    let mut buf = vec![0u8; count * 8];
    r.read_exact(&mut buf)?;
    let data = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok((name, Tensor::new(shape, data)?))
}

pub fn write_checkpoint(model: &Model, w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, VERSION)?;
    let cfg = toml::to_string(&model.config)?;
    put_u32(w, cfg.len() as u32)?;
    w.write_all(cfg.as_bytes())?;
    let n_ad: usize = model.adapters.iter().map(|a| a.tensors().len()).sum();
    put_u32(w, (model.params.len() + n_ad) as u32)?;
    for (name, t) in model.params.names.iter().zip(&model.params.tensors) {
        put_record(w, name, t)?;
    }
    for (i, a) in model.adapters.iter().enumerate() {
        for (name, t) in a.names(i).iter().zip(a.tensors()) {
            put_record(w, name, t)?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Model> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not an FVL1 checkpoint".into()));
    }
    let version = get_u32(r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let n = get_u32(r)? as usize;
    let mut cfg = vec![0u8; n];
    r.read_exact(&mut cfg)?;
    let cfg: ModelConfig =
        toml::from_str(std::str::from_utf8(&cfg).map_err(|e| Error::Format(e.to_string()))?)?;
    let count = get_u32(r)? as usize;
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    let mut adapter_tensors: Vec<Vec<Tensor>> = Vec::new();
    for _ in 0..count {
        let (name, t) = get_record(r)?;
        if let Some(rest) = name.strip_prefix("adapter.") {
            let idx: usize = rest
                .split('.')
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Format(format!("bad adapter record name {name}")))?;
            if idx == adapter_tensors.len() {
                adapter_tensors.push(Vec::new());
            }
            adapter_tensors
                .get_mut(idx)
                .ok_or_else(|| Error::Format(format!("adapter records out of order at {name}")))?
                .push(t);
        } else {
            names.push(name);
            tensors.push(t);
        }
    }
    let mut adapters = Vec::new();
    for ts in adapter_tensors {
        if ts.len() != 4 * cfg.n_layers {
            return Err(Error::Format("incomplete adapter".into()));
        }
        let rank = ts[0].shape.get(1).copied().unwrap_or(0);
        let mut q = Vec::new();
        let mut v = Vec::new();
        let mut it = ts.into_iter();
        while let (Some(qa), Some(qb), Some(va), Some(vb)) = (it.next(), it.next(), it.next(), it.next()) {
            q.push(LowRankPair { a: qa, b: qb });
            v.push(LowRankPair { a: va, b: vb });
        }
        adapters.push(LowRankAdapter { rank, q, v });
    }
    Model::from_parts(cfg, ParamStore { names, tensors }, adapters)
}

/// Writes through a temporary file and renames, so readers never see a partial checkpoint.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        write_checkpoint(model, &mut f)?;
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_checkpoint(&mut f)
}

/// SHA-256 of the serialized checkpoint, hex encoded.
pub fn checkpoint_hash(model: &Model) -> Result<String> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    Ok(hex::encode(Sha256::digest(&buf)))
}
