//! Model checkpoint files.
//!
//! Layout: 4-byte magic `AKDC`, a `u32` little-endian header length, the JSON
//! header (format version, model config, tensor manifest), then every tensor
//! in manifest order as binary32 little-endian, row-major.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{push_f32_le, read_f32_le, read_file, write_file};
use crate::encoder::{EncoderConfig, Role};
use crate::error::{Error, Result};
use crate::ndcore::{Matrix, ParamSet};
use crate::textcorr::HeadConfig;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"AKDC";

/// Everything needed to rebuild a model's parameter shapes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Output width of the attention projector.
    pub head_dim: usize,
    /// Correlation-head settings the weights were trained with.
    #[serde(default)]
    pub head: HeadConfig,
}

impl ModelConfig {
    /// Expected `(name, rows, cols)` of every tensor. Students also carry
    /// the temperature.
    pub fn param_shapes(&self) -> Vec<(String, usize, usize)> {
        let d = self.encoder.embed_dim;
        let mut out: Vec<_> = self
            .encoder
            .param_shapes()
            .into_iter()
            .map(|(n, r, c)| (format!("encoder.{n}"), r, c))
            .collect();
        for w in ["w_q", "w_k", "w_v"] {
            out.push((format!("projector.{w}"), d, self.head_dim));
        }
        if self.encoder.role == Role::Student {
            out.push(("tau".into(), 1, 1));
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Checks that `params` holds exactly the expected tensors.
    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        let expected = self.param_shapes();
        for (name, rows, cols) in &expected {
            let found = params.get(name).ok_or_else(|| Error::Shape {
                name: name.clone(),
                expected: (*rows, *cols),
                found: (0, 0),
            })?;
            if found.shape() != (*rows, *cols) {
                return Err(Error::Shape {
                    name: name.clone(),
                    expected: (*rows, *cols),
                    found: found.shape(),
                });
            }
        }
        if params.len() != expected.len() {
            let extra = params
                .iter()
                .find(|(n, _)| !expected.iter().any(|e| e.0 == *n))
                .map(|(n, m)| (n.to_string(), m.shape()))
                .unwrap_or_default();
            return Err(Error::Shape {
                name: extra.0,
                expected: (0, 0),
                found: extra.1,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

pub fn checkpoint_bytes(params: &ParamSet, config: &ModelConfig) -> Result<Vec<u8>> {
    config.check_params(params)?;
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        config: config.clone(),
        tensors: params
            .iter()
            .map(|(name, m)| TensorEntry {
                name: name.to_string(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Data(e.to_string()))?;
    let mut out = Vec::with_capacity(8 + json.len() + 4 * params.num_values());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, m) in params.iter() {
        push_f32_le(&mut out, m.data());
    }
    Ok(out)
}

pub fn save_checkpoint(params: &ParamSet, config: &ModelConfig, path: &Path) -> Result<()> {
    write_file(path, &checkpoint_bytes(params, config)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamSet, ModelConfig)> {
    let bytes = read_file(path)?;
    parse_checkpoint(&bytes, path)
}

/// Loads a checkpoint and requires it to match `expected` exactly.
pub fn load_checkpoint_expecting(path: &Path, expected: &ModelConfig) -> Result<ParamSet> {
    let (params, config) = load_checkpoint(path)?;
    if config.encoder.embed_dim != expected.encoder.embed_dim {
        return Err(Error::Shape {
            name: format!("{}: embed_dim", path.display()),
            expected: (1, expected.encoder.embed_dim),
            found: (1, config.encoder.embed_dim),
        });
    }
    if config != *expected {
        expected.check_params(&params)?;
        return Err(Error::Config(format!(
            "{}: checkpoint config {:?} differs from expected {:?}",
            path.display(),
            config,
            expected
        )));
    }
    Ok(params)
}

pub fn parse_checkpoint(bytes: &[u8], path: &Path) -> Result<(ParamSet, ModelConfig)> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::corrupt(path, "missing checkpoint magic"));
    }
    let header_len = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    let body = &bytes[8..];
    if body.len() < header_len {
        return Err(Error::corrupt(path, "truncated header"));
    }
    let raw: serde_json::Value = serde_json::from_slice(&body[..header_len])
        .map_err(|e| Error::corrupt(path, format!("header: {e}")))?;
    let version = raw
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::corrupt(path, "header lacks format_version"))?;
    if version != CHECKPOINT_VERSION as u64 {
        return Err(Error::Version {
            path: path.into(),
            found: version as u32,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header: Header =
        serde_json::from_value(raw).map_err(|e| Error::corrupt(path, format!("header: {e}")))?;
    let payload = &body[header_len..];
    let total: usize = header.tensors.iter().map(|t| t.rows * t.cols).sum();
    if payload.len() != 4 * total {
        return Err(Error::corrupt(
            path,
            format!("payload holds {} bytes, manifest needs {}", payload.len(), 4 * total),
        ));
    }
    let mut params = ParamSet::new();
    let mut offset = 0;
    for t in &header.tensors {
        let len = 4 * t.rows * t.cols;
        let values = read_f32_le(&payload[offset..offset + len]);
        offset += len;
        params.insert(t.name.clone(), Matrix::new(t.rows, t.cols, values)?)?;
    }
    header.config.check_params(&params)?;
    Ok((params, header.config))
}

/// Copy of `params` with every value rounded through binary32.
pub fn truncated(params: &ParamSet) -> ParamSet {
    let mut out = params.clone();
    let names: Vec<String> = out.names().map(str::to_string).collect();
    for name in names {
        let m = out.get_mut(&name).expect("known name");
        m.data_mut()
            .iter_mut()
            .for_each(|v| *v = crate::binio::truncate_f32(*v));
    }
    out.zero_grads();
    out
}
