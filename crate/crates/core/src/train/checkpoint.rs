//! Binary checkpoint: a magic line, a JSON header, then parameter arrays as
//! `(name, shape, little-endian f32 data)` for the weights, the optimizer
//! moments and, for pseudo-pose runs, the frozen teacher.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::{Adam, ParamStore};

pub const CKPT_MAGIC: &[u8] = b"ADAPTMASK-CKPT-1\n";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Last completed epoch (0 = before training).
    pub epoch: usize,
    pub global_step: u64,
    /// Every random stream is derived from this seed and the step counters.
    pub seed: u64,
    pub adam_step: u64,
    pub best_metric: Option<f64>,
    pub best_epoch: Option<usize>,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore<f32>,
    pub adam: Adam<f32>,
    pub frozen: Option<ParamStore<f32>>,
}

fn write_store<W: Write>(w: &mut W, store: &ParamStore<f32>) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(store.len() as u32)?;
    for p in store.params() {
        w.write_u32::<LittleEndian>(p.name.len() as u32)?;
        w.write_all(p.name.as_bytes())?;
        w.write_u32::<LittleEndian>(p.shape.len() as u32)?;
        for &d in &p.shape {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        for &v in &p.data {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

fn read_store<R: Read>(r: &mut R) -> Result<ParamStore<f32>> {
    let corrupt = |e: std::io::Error| Error::Checkpoint(format!("truncated parameter section: {e}"));
    let count = r.read_u32::<LittleEndian>().map_err(corrupt)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.read_u32::<LittleEndian>().map_err(corrupt)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(corrupt)?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let ndim = r.read_u32::<LittleEndian>().map_err(corrupt)? as usize;
        let shape = (0..ndim)
            .map(|_| r.read_u32::<LittleEndian>().map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(corrupt)?;
        let mut data = vec![0f32; shape.iter().product()];
        r.read_f32_into::<LittleEndian>(&mut data).map_err(corrupt)?;
        store.push(name, shape, data);
    }
    Ok(store)
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp).map_err(io)?);
            let header = serde_json::to_vec(&self.meta)?;
            w.write_all(CKPT_MAGIC).map_err(io)?;
            w.write_u64::<LittleEndian>(header.len() as u64).map_err(io)?;
            w.write_all(&header).map_err(io)?;
            write_store(&mut w, &self.params).map_err(io)?;
            write_store(&mut w, &self.adam.m).map_err(io)?;
            write_store(&mut w, &self.adam.v).map_err(io)?;
            w.write_u8(self.frozen.is_some() as u8).map_err(io)?;
            if let Some(f) = &self.frozen {
                write_store(&mut w, f).map_err(io)?;
            }
            w.flush().map_err(io)?;
        }
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
        let mut magic = vec![0u8; CKPT_MAGIC.len()];
        if r.read_exact(&mut magic).is_err() || magic != CKPT_MAGIC {
            return Err(Error::Checkpoint(format!("{} is not an adaptmask checkpoint", path.display())));
        }
        let corrupt = |e: std::io::Error| Error::Checkpoint(format!("truncated header: {e}"));
        let len = r.read_u64::<LittleEndian>().map_err(corrupt)? as usize;
        let mut header = vec![0u8; len];
        r.read_exact(&mut header).map_err(corrupt)?;
        let meta: CheckpointMeta =
            serde_json::from_slice(&header).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let params = read_store(&mut r)?;
        let m = read_store(&mut r)?;
        let v = read_store(&mut r)?;
        let frozen = match r.read_u8().map_err(corrupt)? {
            0 => None,
            _ => Some(read_store(&mut r)?),
        };
        if !params.same_layout(&m) || !params.same_layout(&v) {
            return Err(Error::Checkpoint("optimizer state does not match the parameters".into()));
        }
        let adam = Adam {
            config: meta.config.train.adam,
            step: meta.adam_step,
            m,
            v,
        };
        Ok(Self {
            meta,
            params,
            adam,
            frozen,
        })
    }
}
