//! Binary checkpoint container.
//!
//! Layout (all little-endian):
//! `"PITM"` | version: u32 | feat_dim, hidden_dim, num_layers, num_streams,
//! num_senones, seed: u64 each | every parameter matrix in declaration order
//! as row-major f64.

use std::fs;
use std::path::Path;

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PITM";
pub const CHECKPOINT_VERSION: u32 = 1;

const HEADER_LEN: usize = 4 + 4 + 6 * 8;

impl ModelParams {
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.num_parameters());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for v in [
            c.feat_dim as u64,
            c.hidden_dim as u64,
            c.num_layers as u64,
            c.num_streams as u64,
            c.num_senones as u64,
            c.seed,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for m in self.tensors() {
            for x in m.as_slice() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            path: origin.to_path_buf(),
            reason,
        };
        if bytes.len() < HEADER_LEN || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("missing PITM header".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let field = |i: usize| {
            let start = 8 + 8 * i;
            u64::from_le_bytes(bytes[start..start + 8].try_into().unwrap())
        };
        let config = ModelConfig {
            feat_dim: field(0) as usize,
            hidden_dim: field(1) as usize,
            num_layers: field(2) as usize,
            num_streams: field(3) as usize,
            num_senones: field(4) as usize,
            seed: field(5),
        };
        config.validate().map_err(|e| bad(e.to_string()))?;
        let mut params = ModelParams::zeros(&config)?;
        let body = &bytes[HEADER_LEN..];
        if body.len() != 8 * params.num_parameters() {
            return Err(bad(format!(
                "expected {} parameter bytes, found {}",
                8 * params.num_parameters(),
                body.len()
            )));
        }
        let values: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.set_flat(&values)?;
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
