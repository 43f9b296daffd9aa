//! Checkpoint files: a JSON header (names, groups, shapes, offsets) followed
//! by little-endian `f32` tensor data.
//!
//! Layout: magic `OVCK`, `u64` header length, header bytes, data.

use std::path::Path;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::{Model, ModelDims};
use crate::optim::Sgd;
use crate::params::{ParamGroup, ParamStore};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"OVCK";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Lsm,
    Stt,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Lsm => "lsm",
            Stage::Stt => "stt",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub step: usize,
    pub config: ExperimentConfig,
    pub dims: ModelDims,
    pub params: ParamStore,
    pub velocity: IndexMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Role {
    Param,
    Velocity,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    role: Role,
    group: Option<ParamGroup>,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    stage: Stage,
    step: usize,
    dims: ModelDims,
    config: ExperimentConfig,
    tensors: Vec<Entry>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(
        stage: Stage,
        step: usize,
        config: &ExperimentConfig,
        model: &Model,
        sgd: &Sgd,
    ) -> Self {
        Self {
            stage,
            step,
            config: config.clone(),
            dims: model.dims.clone(),
            params: model.params.clone(),
            velocity: sgd.velocity().clone(),
        }
    }

    pub fn model(&self) -> Model {
        Model {
            dims: self.dims.clone(),
            params: self.params.clone(),
        }
    }

    /// Optimizer carrying the saved velocity and the config's momentum for
    /// `stage`.
    pub fn optimizer(&self) -> Sgd {
        let (m, clip) = match self.stage {
            Stage::Lsm => (self.config.lsm.momentum, self.config.lsm.clip_norm),
            Stage::Stt => (self.config.stt.momentum, self.config.stt.clip_norm),
        };
        let mut sgd = Sgd::new(m, clip);
        sgd.set_velocity(self.velocity.clone());
        sgd
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut data: Vec<u8> = Vec::new();
        let mut push =
            |name: &str, role: Role, group: Option<ParamGroup>, t: &Tensor, data: &mut Vec<u8>| {
                entries.push(Entry {
                    name: name.to_string(),
                    role,
                    group,
                    shape: t.shape().to_vec(),
                    offset: data.len(),
                });
                for v in t.data() {
                    data.extend_from_slice(&(*v as f32).to_le_bytes());
                }
            };
        for (name, p) in self.params.iter() {
            push(name, Role::Param, Some(p.group), &p.value, &mut data);
        }
        for (name, v) in &self.velocity {
            push(name, Role::Velocity, None, v, &mut data);
        }
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            stage: self.stage,
            step: self.step,
            dims: self.dims.clone(),
            config: self.config.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(12 + json.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let data = bytes
            .get(12 + hlen..)
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[12..12 + hlen])
            .map_err(|e| bad(format!("header: {e}")))?;
        if header.format_version != CHECKPOINT_VERSION {
            return Err(bad(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        let mut params = ParamStore::new();
        let mut velocity = IndexMap::new();
        let mut expected_offset = 0;
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            if e.offset != expected_offset {
                return Err(bad(format!("tensor {} at unexpected offset", e.name)));
            }
            let raw = data
                .get(e.offset..e.offset + 4 * n)
                .ok_or_else(|| bad(format!("tensor {} runs past the end", e.name)))?;
            expected_offset += 4 * n;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            let t = Tensor::new(e.shape, values).map_err(|err| bad(err.to_string()))?;
            match (e.role, e.group) {
                (Role::Param, Some(g)) => params.insert(e.name, g, t),
                (Role::Param, None) => {
                    return Err(bad(format!("parameter {} lacks a group", e.name)))
                }
                (Role::Velocity, _) => {
                    velocity.insert(e.name, t);
                }
            }
        }
        if expected_offset != data.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        let ck = Self {
            stage: header.stage,
            step: header.step,
            config: header.config,
            dims: header.dims,
            params,
            velocity,
        };
        ck.verify_shapes()?;
        Ok(ck)
    }

    /// Parameter names, groups and shapes must be exactly those a model of
    /// `dims` has; velocities must shadow parameters.
    fn verify_shapes(&self) -> Result<()> {
        let template = Model::init(
            self.dims.clone(),
            &Default::default(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .map_err(|e| bad(format!("dimensions: {e}")))?;
        if template.params.len() != self.params.len() {
            return Err(bad(format!(
                "expected {} parameters, found {}",
                template.params.len(),
                self.params.len()
            )));
        }
        for (name, p) in template.params.iter() {
            let Some(got) = self.params.get(name) else {
                return Err(bad(format!("missing parameter {name}")));
            };
            if got.shape() != p.value.shape() || self.params.group_of(name) != Some(p.group) {
                return Err(bad(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    got.shape(),
                    p.value.shape()
                )));
            }
        }
        for (name, v) in &self.velocity {
            match self.params.get(name) {
                Some(p) if p.shape() == v.shape() => {}
                _ => return Err(bad(format!("velocity {name} does not match a parameter"))),
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
