//! `TRNK` checkpoint files and JSON-lines metric history.
//!
//! ```text
//! "TRNK" | u16 version | u32 header_len | header JSON | f32 params... | [f32 m... | f32 v...]
//! ```
//!
//! All integers and floats little-endian. The header directory gives each
//! tensor's byte offset relative to the start of the payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::arch::{ArchitectureRegistry, Model, ModelSpec, ParamInfo, ParamSet};
use super::metrics::MetricsRecord;
use crate::error::{Error, Result};
use crate::store::Reader;
use crate::store::write_atomic;

pub const MAGIC: &[u8; 4] = b"TRNK";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: ParamSet<f32>,
    pub optimizer: Option<AdamState>,
    pub epoch: u32,
    pub metrics: Vec<MetricsRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DirEntry {
    name: String,
    dims: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    epoch: u32,
    metrics: Vec<MetricsRecord>,
    parameters: Vec<DirEntry>,
    /// Adam step count when the optimizer section is present.
    optimizer_step: Option<u64>,
}

impl Checkpoint {
    pub fn of_model(model: &Model<f32>, optimizer: Option<AdamState>, epoch: u32, metrics: Vec<MetricsRecord>) -> Self {
        Checkpoint { spec: model.spec.clone(), params: model.params.clone(), optimizer, epoch, metrics }
    }

    pub fn model(&self) -> Result<Model<f32>> {
        Model::from_params(&self.spec, self.params.clone())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let parameters = self
            .params
            .tensors
            .iter()
            .map(|t| {
                let e = DirEntry { name: t.info.name.clone(), dims: t.info.dims.clone(), offset };
                offset += 4 * t.data.len() as u64;
                e
            })
            .collect();
        let header = Header {
            spec: self.spec.clone(),
            epoch: self.epoch,
            metrics: self.metrics.clone(),
            parameters,
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(10 + json.len() + 12 * offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |set: &ParamSet<f32>| {
            for t in &set.tensors {
                for v in &t.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        };
        put(&self.params);
        if let Some(o) = &self.optimizer {
            put(&o.m);
            put(&o.v);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::validation("not a checkpoint file"));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::validation(format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(len)?)?;
        let layout: Vec<ParamInfo> = ArchitectureRegistry::<f32>::builtin().get(&header.spec.architecture_id)?.param_layout(&header.spec);
        let same = layout.len() == header.parameters.len()
            && layout.iter().zip(&header.parameters).all(|(l, d)| l.name == d.name && l.dims == d.dims);
        if !same {
            return Err(Error::validation("checkpoint directory does not match its spec"));
        }
        let payload = r.pos;
        let read = |r: &mut Reader<'_>, base: usize| -> Result<ParamSet<f32>> {
            let mut set = ParamSet::zeros(&layout);
            for (t, d) in set.tensors.iter_mut().zip(&header.parameters) {
                r.pos = base + d.offset as usize;
                for v in &mut t.data {
                    *v = r.f32()?;
                }
            }
            Ok(set)
        };
        let params = read(&mut r, payload)?;
        let section = 4 * params.count();
        let optimizer = match header.optimizer_step {
            Some(step) => {
                let m = read(&mut r, payload + section)?;
                let v = read(&mut r, payload + 2 * section)?;
                Some(AdamState { step, m, v })
            }
            None => None,
        };
        Ok(Checkpoint { spec: header.spec, params, optimizer, epoch: header.epoch, metrics: header.metrics })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::not_found(format!("checkpoint {}", path.display())),
            _ => Error::Io(e),
        })?;
        Self::decode(&bytes)
    }
}

pub fn append_history(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    for r in records {
        let mut line = serde_json::to_vec(r)?;
        line.push(b'\n');
        f.write_all(&line)?;
    }
    Ok(())
}

pub fn read_history(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}
