//! Binary checkpoints.
//!
//! Layout (little-endian): magic `TRON2`, u32 version, u64 step, u32 config
//! length and UTF-8 config text, u32 tensor count, then per tensor: u32 name
//! length, name, u32 rank, u64 dims, u64 offset into the payload in floats.
//! The f32 payload follows the table.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::config::Config;
use super::model::TrackerModel;
use super::optim::AdamW;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 5] = b"TRON2";
pub const VERSION: u32 = 1;

pub struct Checkpoint {
    pub step: u64,
    pub config: Config,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &TrackerModel, opt: Option<&AdamW>, step: u64) -> Self {
        let mut tensors: Vec<(String, Tensor)> =
            model.params.iter().map(|(_, p)| (p.name.clone(), (*p.tensor).clone())).collect();
        if let Some(opt) = opt {
            for (id, p) in model.params.iter() {
                let shape = p.tensor.shape().to_vec();
                let i = id.index();
                tensors.push((format!("adam.m.{}", p.name), Tensor::new(shape.clone(), opt.m[i].clone()).expect("moment shape")));
                tensors.push((format!("adam.v.{}", p.name), Tensor::new(shape, opt.v[i].clone()).expect("moment shape")));
            }
            tensors.push(("adam.t".into(), Tensor::scalar(opt.t as f32)));
        }
        Checkpoint { step, config: model.config.clone(), tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Model with every parameter restored; missing or mis-shaped entries are errors.
    pub fn model(&self) -> Result<TrackerModel> {
        let mut model = TrackerModel::new(&self.config)?;
        let ids: Vec<_> = model.params.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            let t = self.get(&name).ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {name}")))?;
            model.params.set(id, t.clone()).map_err(|e| Error::Format(format!("{name}: {e}")))?;
        }
        Ok(model)
    }

    /// Optimizer state, if the checkpoint carries one.
    pub fn optimizer(&self, model: &TrackerModel) -> Result<Option<AdamW>> {
        let Some(t) = self.get("adam.t") else { return Ok(None) };
        let mut opt = AdamW::new(&model.params, model.config.weight_decay);
        opt.t = t.data()[0] as u64;
        for (id, p) in model.params.iter() {
            for (kind, dst) in [("m", &mut opt.m), ("v", &mut opt.v)] {
                let name = format!("adam.{kind}.{}", p.name);
                let t = self.get(&name).ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))?;
                if t.shape() != p.tensor.shape() {
                    return Err(Error::Format(format!("{name} has shape {:?}", t.shape())));
                }
                dst[id.index()] = t.data().to_vec();
            }
        }
        Ok(Some(opt))
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        let cfg = self.config.to_text();
        w.write_all(&(cfg.len() as u32).to_le_bytes())?;
        w.write_all(cfg.as_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            w.write_all(&offset.to_le_bytes())?;
            offset += t.len() as u64;
        }
        for (_, t) in &self.tensors {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let fmt = |m: &str| Error::Format(format!("checkpoint: {m}"));
        let io = |e: std::io::Error| Error::Format(format!("checkpoint: {e}"));
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(fmt("bad magic"));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        let mut u32_ = |r: &mut dyn Read| -> Result<u32> {
            r.read_exact(&mut b4).map_err(io)?;
            Ok(u32::from_le_bytes(b4))
        };
        let version = u32_(r)?;
        if version != VERSION {
            return Err(fmt(&format!("unsupported version {version}")));
        }
        let mut u64_ = |r: &mut dyn Read| -> Result<u64> {
            r.read_exact(&mut b8).map_err(io)?;
            Ok(u64::from_le_bytes(b8))
        };
        let step = u64_(r)?;
        let cfg_len = u32_(r)? as usize;
        let mut cfg = vec![0u8; cfg_len];
        r.read_exact(&mut cfg).map_err(io)?;
        let config = Config::parse(std::str::from_utf8(&cfg).map_err(|_| fmt("config is not UTF-8"))?)?;
        let count = u32_(r)? as usize;
        let mut table = Vec::with_capacity(count);
        let mut expected_offset = 0u64;
        for _ in 0..count {
            let len = u32_(r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(io)?;
            let name = String::from_utf8(name).map_err(|_| fmt("tensor name is not UTF-8"))?;
            let rank = u32_(r)? as usize;
            let dims = (0..rank).map(|_| u64_(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let offset = u64_(r)?;
            if offset != expected_offset {
                return Err(fmt(&format!("tensor {name} at offset {offset}, expected {expected_offset}")));
            }
            expected_offset += dims.iter().product::<usize>() as u64;
            table.push((name, dims));
        }
        let mut tensors = Vec::with_capacity(count);
        for (name, dims) in table {
            let n: usize = dims.iter().product();
            let mut buf = vec![0u8; 4 * n];
            r.read_exact(&mut buf).map_err(io)?;
            let data = buf.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            tensors.push((name, Tensor::new(dims, data)?));
        }
        Ok(Checkpoint { step, config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(f))
    }
}
