//! Self-describing model checkpoint.
//!
//! ```text
//! magic        8 bytes  "ELTCKPT\0"
//! version      u32
//! header_len   u64
//! header       JSON: model config, appliance, threshold, normalization
//!              stats, optimizer step, array table
//! arrays       parameters, then Adam first moments, then second moments
//!              (when present), each row-major little-endian f64
//! ```
//!
//! Floats in the header are stored as their IEEE-754 bit patterns so that
//! statistics survive a round trip bit-for-bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{NormStats, WindowDataset};
use crate::error::{EltError, Result};
use crate::model::{EltModel, ModelConfig};
use crate::params::ParameterStore;
use crate::tensor::Tensor;
use crate::train::{AdamState, TrainOutcome};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"ELTCKPT\0";
const MAX_HEADER: u64 = 64 << 20;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: EltModel,
    pub appliance: String,
    pub on_threshold: Option<f64>,
    pub mains_stats: NormStats,
    pub appliance_stats: NormStats,
    pub adam: Option<AdamState>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    appliance: String,
    /// Bit patterns: mains mean, mains std, appliance mean, appliance std.
    stats_bits: [u64; 4],
    threshold_bits: Option<u64>,
    step: u64,
    has_adam: bool,
    arrays: Vec<ArrayEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

impl Checkpoint {
    /// Best parameters of a training run together with the dataset's
    /// normalization.
    pub fn from_training(outcome: &TrainOutcome, data: &WindowDataset) -> Self {
        Checkpoint {
            model: outcome.best.clone(),
            appliance: data.appliance.clone(),
            on_threshold: data.on_threshold,
            mains_stats: data.mains_stats,
            appliance_stats: data.appliance_stats,
            adam: Some(outcome.best_adam.clone()),
        }
    }

    pub fn step(&self) -> u64 {
        self.adam.as_ref().map_or(0, |a| a.step)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let params = self.model.params();
        let header = Header {
            config: self.model.config().clone(),
            appliance: self.appliance.clone(),
            stats_bits: [
                self.mains_stats.mean.to_bits(),
                self.mains_stats.std.to_bits(),
                self.appliance_stats.mean.to_bits(),
                self.appliance_stats.std.to_bits(),
            ],
            threshold_bits: self.on_threshold.map(f64::to_bits),
            step: self.step(),
            has_adam: self.adam.is_some(),
            arrays: params
                .iter()
                .map(|(name, t)| ArrayEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let file = File::create(path).map_err(|e| EltError::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| EltError::io(path, e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&json).map_err(io)?;
        let mut arrays: Vec<&Tensor> = params.iter().map(|(_, t)| t).collect();
        if let Some(a) = &self.adam {
            arrays.extend(a.m.iter().chain(&a.v));
        }
        for t in arrays {
            for v in t.data() {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| EltError::io(path, e))?;
        let mut r = BufReader::new(file);
        let bad = |msg: String| EltError::Data(format!("{}: {msg}", path.display()));
        let mut read = |buf: &mut [u8]| {
            r.read_exact(buf).map_err(|e| {
                if e.kind() == std::io::ErrorKind::UnexpectedEof {
                    EltError::Data(format!("{}: truncated checkpoint", path.display()))
                } else {
                    EltError::io(path, e)
                }
            })
        };
        let mut magic = [0u8; 8];
        read(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let mut b4 = [0u8; 4];
        read(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let mut b8 = [0u8; 8];
        read(&mut b8)?;
        let header_len = u64::from_le_bytes(b8);
        if header_len > MAX_HEADER {
            return Err(bad(format!("header of {header_len} bytes is implausibly large")));
        }
        let mut json = vec![0u8; header_len as usize];
        read(&mut json)?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| bad(format!("bad header: {e}")))?;
        header.config.validate()?;
        let mut read_tensor = |shape: &[usize]| -> Result<Tensor> {
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 8];
            read(&mut raw)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Tensor::new(shape.to_vec(), data)
        };
        let mut params = ParameterStore::new();
        for a in &header.arrays {
            params.insert(a.name.clone(), read_tensor(&a.shape)?)?;
        }
        let adam = if header.has_adam {
            let m = header.arrays.iter().map(|a| read_tensor(&a.shape)).collect::<Result<_>>()?;
            let v = header.arrays.iter().map(|a| read_tensor(&a.shape)).collect::<Result<_>>()?;
            Some(AdamState {
                m,
                v,
                step: header.step,
            })
        } else {
            None
        };
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(|e| EltError::io(path, e))? != 0 {
            return Err(bad("trailing bytes after arrays".into()));
        }
        let model = EltModel::from_params(header.config, params)?;
        let [mm, ms, am, asd] = header.stats_bits.map(f64::from_bits);
        Ok(Checkpoint {
            model,
            appliance: header.appliance,
            on_threshold: header.threshold_bits.map(f64::from_bits),
            mains_stats: NormStats { mean: mm, std: ms },
            appliance_stats: NormStats { mean: am, std: asd },
            adam,
        })
    }
}
