//! Checkpoint container.
//!
//! ```text
//! b"EXC3CKPT"                 magic
//! u64 LE                      header length in bytes
//! JSON header                 version, spec, bookkeeping, tensor table
//! f32 LE blobs                at the offsets the table gives, relative to
//!                             the end of the header
//! ```
//!
//! Tensor names: `param/<name>`, `stats/<name>.mean`, `stats/<name>.var`,
//! `adam.m/<name>`, `adam.v/<name>`. Moments are optional as a group.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::Stage;
use crate::error::{ensure, CheckpointError, Error, Result};
use crate::network::{ExtremeC3Net, NetworkSpec};

pub const MAGIC: &[u8; 8] = b"EXC3CKPT";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub spec: NetworkSpec,
    pub stage: Option<Stage>,
    pub epoch: usize,
    pub best_miou: Option<f64>,
    pub adam: Option<(AdamConfig, u64)>,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    spec: NetworkSpec,
    stage: Option<Stage>,
    epoch: usize,
    best_miou: Option<f64>,
    adam: Option<(AdamConfig, u64)>,
    tensors: Vec<TensorEntry>,
}

/// Every tensor name a model with `spec` must provide, with its shape.
fn expected_tensors(net: &ExtremeC3Net) -> Vec<(String, Vec<usize>)> {
    let g = net.graph();
    let mut out: Vec<(String, Vec<usize>)> = g
        .params()
        .iter()
        .map(|p| (format!("param/{}", p.name), p.shape.to_array().to_vec()))
        .collect();
    for s in g.stats() {
        let c = s.stats.mean.len();
        out.push((format!("stats/{}.mean", s.name), vec![c]));
        out.push((format!("stats/{}.var", s.name), vec![c]));
    }
    out
}

fn moment_names(net: &ExtremeC3Net) -> Vec<(String, Vec<usize>)> {
    let g = net.graph();
    ["adam.m", "adam.v"]
        .iter()
        .flat_map(|k| {
            g.params()
                .iter()
                .map(move |p| (format!("{k}/{}", p.name), p.shape.to_array().to_vec()))
        })
        .collect()
}

impl Checkpoint {
    /// Snapshot of weights, running statistics and (optionally) optimizer
    /// moments.
    pub fn capture(
        net: &ExtremeC3Net,
        adam: Option<&Adam>,
        stage: Option<Stage>,
        epoch: usize,
        best_miou: Option<f64>,
    ) -> Self {
        let g = net.graph();
        let mut tensors: Vec<NamedTensor> = g
            .params()
            .iter()
            .map(|p| NamedTensor {
                name: format!("param/{}", p.name),
                shape: p.shape.to_array().to_vec(),
                data: p.data.clone(),
            })
            .collect();
        for s in g.stats() {
            let c = s.stats.mean.len();
            tensors.push(NamedTensor { name: format!("stats/{}.mean", s.name), shape: vec![c], data: s.stats.mean.clone() });
            tensors.push(NamedTensor { name: format!("stats/{}.var", s.name), shape: vec![c], data: s.stats.var.clone() });
        }
        if let Some(a) = adam {
            for (k, moments) in [("adam.m", &a.m), ("adam.v", &a.v)] {
                for (p, data) in g.params().iter().zip(moments) {
                    tensors.push(NamedTensor {
                        name: format!("{k}/{}", p.name),
                        shape: p.shape.to_array().to_vec(),
                        data: data.clone(),
                    });
                }
            }
        }
        Checkpoint {
            version: SCHEMA_VERSION,
            spec: net.spec().clone(),
            stage,
            epoch,
            best_miou,
            adam: adam.map(|a| (a.config, a.step)),
            tensors,
        }
    }

    fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Checks names and shapes against the network the embedded spec builds.
    pub fn validate(&self) -> Result<()> {
        let reference = ExtremeC3Net::build(&self.spec, 0)?;
        let mut expected: HashMap<String, Vec<usize>> = expected_tensors(&reference).into_iter().collect();
        let has_moments = self.adam.is_some();
        if has_moments {
            expected.extend(moment_names(&reference));
        }
        let mut seen = HashMap::new();
        for t in &self.tensors {
            let Some(shape) = expected.get(&t.name) else {
                return Err(CheckpointError::UnknownTensor(t.name.clone()).into());
            };
            if seen.insert(t.name.as_str(), ()).is_some() {
                return Err(CheckpointError::DuplicateTensor(t.name.clone()).into());
            }
            if &t.shape != shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(CheckpointError::ShapeMismatch {
                    name: t.name.clone(),
                    found: t.shape.clone(),
                    expected: shape.clone(),
                }
                .into());
            }
        }
        let mut missing: Vec<&String> = expected.keys().filter(|k| !seen.contains_key(k.as_str())).collect();
        missing.sort();
        if let Some(m) = missing.first() {
            return Err(CheckpointError::MissingTensor((*m).clone()).into());
        }
        Ok(())
    }

    /// Copies weights and running statistics into `net`, whose spec must
    /// match.
    pub fn restore(&self, net: &mut ExtremeC3Net) -> Result<()> {
        ensure!(net.spec() == &self.spec, "checkpoint was written for a different network spec");
        self.validate()?;
        let g = net.graph_mut();
        for p in g.params_mut() {
            let t = self.tensor(&format!("param/{}", p.name)).expect("validated");
            p.data.copy_from_slice(&t.data);
        }
        for s in g.stats_mut() {
            let mean = self.tensor(&format!("stats/{}.mean", s.name)).expect("validated");
            let var = self.tensor(&format!("stats/{}.var", s.name)).expect("validated");
            s.stats.mean.copy_from_slice(&mean.data);
            s.stats.var.copy_from_slice(&var.data);
        }
        Ok(())
    }

    /// A fresh network holding this checkpoint's weights.
    pub fn to_network(&self) -> Result<ExtremeC3Net> {
        let mut net = ExtremeC3Net::build(&self.spec, 0)?;
        self.restore(&mut net)?;
        Ok(net)
    }

    /// Optimizer state, when the checkpoint carries one.
    pub fn optimizer(&self, net: &ExtremeC3Net) -> Result<Option<Adam>> {
        let Some((config, step)) = self.adam else { return Ok(None) };
        self.validate()?;
        let mut adam = Adam::new(net.graph(), config);
        adam.step = step;
        for (i, p) in net.graph().params().iter().enumerate() {
            adam.m[i] = self.tensor(&format!("adam.m/{}", p.name)).expect("validated").data.clone();
            adam.v[i] = self.tensor(&format!("adam.v/{}", p.name)).expect("validated").data.clone();
        }
        Ok(Some(adam))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let entries = self
            .tensors
            .iter()
            .map(|t| {
                let e = TensorEntry { name: t.name.clone(), shape: t.shape.clone(), offset, len: t.data.len() };
                offset += 4 * t.data.len();
                e
            })
            .collect();
        let header = Header {
            version: self.version,
            spec: self.spec.clone(),
            stage: self.stage,
            epoch: self.epoch,
            best_miou: self.best_miou,
            adam: self.adam,
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic.into());
        }
        let rest = &bytes[MAGIC.len()..];
        let len_bytes: [u8; 8] = rest.get(..8).ok_or(CheckpointError::TruncatedHeader)?.try_into().expect("8 bytes");
        let header_len = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| CheckpointError::TruncatedHeader)?;
        let body = &rest[8..];
        let json = body.get(..header_len).ok_or(CheckpointError::TruncatedHeader)?;
        let header: Header =
            serde_json::from_slice(json).map_err(|e| CheckpointError::MalformedHeader(e.to_string()))?;
        if header.version != SCHEMA_VERSION {
            return Err(CheckpointError::VersionMismatch { found: header.version, expected: SCHEMA_VERSION }.into());
        }
        let blobs = &body[header_len..];
        let tensors = header
            .tensors
            .into_iter()
            .map(|e| {
                let end = e.offset + 4 * e.len;
                let raw = blobs.get(e.offset..end).ok_or_else(|| CheckpointError::TruncatedBlob {
                    name: e.name.clone(),
                    start: e.offset,
                    end,
                    available: blobs.len(),
                })?;
                let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
                Ok(NamedTensor { name: e.name, shape: e.shape, data })
            })
            .collect::<Result<Vec<_>, CheckpointError>>()?;
        let ckpt = Checkpoint {
            version: header.version,
            spec: header.spec,
            stage: header.stage,
            epoch: header.epoch,
            best_miou: header.best_miou,
            adam: header.adam,
            tensors,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}
