use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderConfig, EncoderParams, TensorKind};
use crate::error::{Error, Result};

const FORMAT: &str = "retrieval-lab-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

/// On-disk form: config plus every tensor with its shape header. JSON floats
/// are written in shortest round-trip form, so loading is bit-exact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    format: String,
    version: u32,
    pub config: EncoderConfig,
    tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn new(config: &EncoderConfig, params: &EncoderParams) -> Result<Self> {
        params.check(config)?;
        let d = config.d_model;
        let di = config.d_intermediate;
        let tensors = params
            .tensors()
            .into_iter()
            .map(|(id, values)| {
                let (rows, cols) = match id.kind {
                    TensorKind::Embedding => (config.vocab_size, d),
                    TensorKind::UpWeight => (d, di),
                    TensorKind::Gate => (d, values.len() / d),
                    TensorKind::DownWeight => (di, d),
                    TensorKind::UpBias | TensorKind::DownBias => (1, values.len()),
                };
                TensorRecord {
                    name: id.to_string(),
                    rows,
                    cols,
                    values: values.to_vec(),
                }
            })
            .collect();
        Ok(Self {
            format: FORMAT.to_string(),
            version: VERSION,
            config: config.clone(),
            tensors,
        })
    }

    pub fn into_params(self) -> Result<(EncoderConfig, EncoderParams)> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(Error::config(format!(
                "unrecognized checkpoint format {:?} v{}",
                self.format, self.version
            )));
        }
        self.config.validate()?;
        let mut params = EncoderParams::zeros(&self.config);
        let slots = params.tensors_mut();
        if slots.len() != self.tensors.len() {
            return Err(Error::config(format!(
                "checkpoint has {} tensors, config implies {}",
                self.tensors.len(),
                slots.len()
            )));
        }
        for ((id, dst), rec) in slots.into_iter().zip(&self.tensors) {
            if rec.name != id.to_string() {
                return Err(Error::config(format!(
                    "expected tensor {id}, found {}",
                    rec.name
                )));
            }
            if rec.rows * rec.cols != dst.len() || rec.values.len() != dst.len() {
                return Err(Error::config(format!(
                    "tensor {} has {}x{} header and {} values, expected {} values",
                    rec.name,
                    rec.rows,
                    rec.cols,
                    rec.values.len(),
                    dst.len()
                )));
            }
            dst.copy_from_slice(&rec.values);
        }
        params.check(&self.config)?;
        Ok((self.config, params))
    }
}

pub fn save_checkpoint(path: &Path, config: &EncoderConfig, params: &EncoderParams) -> Result<()> {
    let ckpt = Checkpoint::new(config, params)?;
    crate::data::write(path, &serde_json::to_string(&ckpt)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(EncoderConfig, EncoderParams)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint =
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))?;
    ckpt.into_params()
}
