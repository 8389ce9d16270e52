//! Model checkpoints: parameters, loss history and configuration.
//!
//! Layout (little-endian): magic `IRISCKPT`, `u32` version, model config
//! text and training config text (each `u32` length + UTF-8), `u64` history
//! length + `f64` values, then the parameter block.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use irisseg_tensor::checkpoint::{read_params, write_params};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

const MAGIC: &[u8; 8] = b"IRISCKPT";
pub const VERSION: u32 = 1;
const MAX_TEXT: u32 = 1 << 20;
const MAX_HISTORY: u64 = 1 << 28;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    /// Loss of every optimisation step, oldest first.
    pub history: Vec<f64>,
    pub train_config: TrainConfig,
}

impl Checkpoint {
    pub fn untrained(model: Model) -> Self {
        Self {
            model,
            history: Vec::new(),
            train_config: TrainConfig::default(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.write_u32::<LittleEndian>(VERSION).unwrap();
        for text in [self.model.config.to_kv(), self.train_config.to_kv()] {
            out.write_u32::<LittleEndian>(text.len() as u32).unwrap();
            out.extend_from_slice(text.as_bytes());
        }
        out.write_u64::<LittleEndian>(self.history.len() as u64).unwrap();
        for &v in &self.history {
            out.write_f64::<LittleEndian>(v).unwrap();
        }
        write_params(&mut out, &self.model.params).expect("writing to memory");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| "file too short".to_string())?;
        if &magic != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let version = r.read_u32::<LittleEndian>().map_err(|e| e.to_string())?;
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let mut texts = Vec::with_capacity(2);
        for _ in 0..2 {
            let n = r.read_u32::<LittleEndian>().map_err(|_| "truncated header".to_string())?;
            if n > MAX_TEXT {
                return Err(format!("config block of {n} bytes is too large"));
            }
            let mut buf = vec![0u8; n as usize];
            r.read_exact(&mut buf).map_err(|_| "truncated config".to_string())?;
            texts.push(String::from_utf8(buf).map_err(|_| "config is not UTF-8".to_string())?);
        }
        let config = ModelConfig::from_kv(&texts[0]).map_err(|e| e.to_string())?;
        let train_config = TrainConfig::from_kv(&texts[1]).map_err(|e| e.to_string())?;
        let n = r.read_u64::<LittleEndian>().map_err(|_| "truncated history".to_string())?;
        if n > MAX_HISTORY {
            return Err(format!("history of {n} entries is too large"));
        }
        let mut history = Vec::with_capacity(n as usize);
        for _ in 0..n {
            history.push(r.read_f64::<LittleEndian>().map_err(|_| "truncated history".to_string())?);
        }
        let params = read_params(&mut r).map_err(|e| e.to_string())?;
        // The stored parameters must match the architecture they claim.
        let reference = Model::new(config.clone(), 0).map_err(|e| e.to_string())?;
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => return Err(format!("parameter {name} has shape {:?}, expected {:?}", p.shape(), t.shape())),
                None => return Err(format!("missing parameter {name}")),
            }
        }
        if params.len() != reference.params.len() {
            return Err("unexpected extra parameters".into());
        }
        if (r.position() as usize) != bytes.len() {
            return Err("trailing bytes after parameters".into());
        }
        Ok(Self {
            model: Model { config, params },
            history,
            train_config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|detail| Error::Checkpoint {
            path: path.to_path_buf(),
            detail,
        })
    }
}
