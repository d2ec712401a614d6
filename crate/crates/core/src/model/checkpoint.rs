//! Model checkpoints.
//!
//! ```text
//! "MDMW" | u32 version=1 | u32 header_len | header_len bytes of JSON
//! parameters as f32, tensor by tensor in declaration order
//! ```
//!
//! Weight matrices are stored row-major (`out x in`). The JSON header
//! carries the method, the layer widths and the training config.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::decoder::Decoder;
use super::mlp::{Mlp, Params};
use super::{Architecture, Method, TrainConfig};
use crate::dataset::SplitConfig;
use crate::error::{Error, FormatError, Result};

pub const MAGIC: [u8; 4] = *b"MDMW";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub method: Method,
    pub architecture: Architecture,
    pub config: TrainConfig,
    /// Split the model was trained on, when known.
    #[serde(default)]
    pub split: Option<SplitConfig>,
}

pub fn encode_checkpoint(
    model: &Decoder,
    config: &TrainConfig,
    split: Option<SplitConfig>,
) -> Result<Vec<u8>> {
    let header = Checkpoint {
        method: model.method(),
        architecture: model.architecture(),
        config: config.clone(),
        split,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + json.len() + 4 * model.param_count());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for mlp in mlps(model) {
        for layer in &mlp.layers {
            for r in 0..layer.weight.nrows() {
                for c in 0..layer.weight.ncols() {
                    out.extend_from_slice(&(layer.weight[(r, c)] as f32).to_le_bytes());
                }
            }
            for &b in layer.bias.iter() {
                out.extend_from_slice(&(b as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

fn mlps(model: &Decoder) -> Vec<&Mlp> {
    match model {
        Decoder::Straightforward { mlps } => mlps.iter().collect(),
        Decoder::Disentangled { encoder, heads } => std::iter::once(&encoder.trunk)
            .chain(heads.0.iter())
            .collect(),
    }
}

fn mlps_mut(model: &mut Decoder) -> Vec<&mut Mlp> {
    match model {
        Decoder::Straightforward { mlps } => mlps.iter_mut().collect(),
        Decoder::Disentangled { encoder, heads } => std::iter::once(&mut encoder.trunk)
            .chain(heads.0.iter_mut())
            .collect(),
    }
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<(Decoder, Checkpoint), FormatError> {
    let truncated = |context: &str| FormatError::Truncated {
        context: context.into(),
    };
    if buf.len() < 4 {
        return Err(truncated("magic"));
    }
    let magic: [u8; 4] = buf[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(FormatError::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = u32::from_le_bytes(
        buf.get(4..8)
            .ok_or_else(|| truncated("version"))?
            .try_into()
            .unwrap(),
    );
    if version != VERSION {
        return Err(FormatError::Version {
            expected: VERSION,
            found: version,
        });
    }
    let len = u32::from_le_bytes(
        buf.get(8..12)
            .ok_or_else(|| truncated("header length"))?
            .try_into()
            .unwrap(),
    ) as usize;
    let json = buf.get(12..12 + len).ok_or_else(|| truncated("header"))?;
    let header: Checkpoint = serde_json::from_slice(json)
        .map_err(|e| FormatError::Malformed(format!("checkpoint header: {e}")))?;
    let mut model = Decoder::init(header.method, &header.architecture, 0);
    model.visit_mut(&mut |_, t, _| t.fill(0.0));
    let mut pos = 12 + len;
    let expected = pos + 4 * model.param_count();
    if buf.len() < expected {
        return Err(truncated("parameters"));
    }
    if buf.len() > expected {
        return Err(FormatError::Malformed(format!(
            "{} trailing bytes",
            buf.len() - expected
        )));
    }
    let mut next = || {
        let v = f32::from_le_bytes(buf[pos..pos + 4].try_into().unwrap());
        pos += 4;
        f64::from(v)
    };
    for mlp in mlps_mut(&mut model) {
        for layer in &mut mlp.layers {
            for r in 0..layer.weight.nrows() {
                for c in 0..layer.weight.ncols() {
                    layer.weight[(r, c)] = next();
                }
            }
            for b in layer.bias.iter_mut() {
                *b = next();
            }
        }
    }
    Ok((model, header))
}

pub fn save_checkpoint(
    model: &Decoder,
    config: &TrainConfig,
    split: Option<SplitConfig>,
    path: impl AsRef<Path>,
) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model, config, split)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Decoder, Checkpoint)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    decode_checkpoint(&bytes).map_err(|source| Error::Format {
        path: path.to_path_buf(),
        source,
    })
}
