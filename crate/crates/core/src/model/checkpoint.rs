//! Binary checkpoint layout (all integers little-endian):
//!
//! ```text
//! "PTCK"  version:u8  payload_len:u64  payload  crc32:u32
//! payload = height:u32 width:u32 channels:u32 layer_count:u32
//!           layer*  value_count:u64  value:f32*
//! layer   = tag:u8 followed by its u32 fields
//! ```
//!
//! The checksum covers every byte before it.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

use super::network::{LayerParams, Parameters};
use super::spec::{Activation, InputShape, LayerSpec, NetworkSpec};

pub const MAGIC: [u8; 4] = *b"PTCK";
pub const VERSION: u8 = 1;
const HEADER: usize = 4 + 1 + 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u8),
    #[error("checkpoint truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn activation_code(a: Activation) -> usize {
    match a {
        Activation::Relu => 1,
        Activation::Identity => 0,
    }
}

pub fn encode(spec: &NetworkSpec, params: &Parameters<f32>) -> Vec<u8> {
    let mut payload = Vec::new();
    let i = spec.input_shape;
    put_u32(&mut payload, i.height);
    put_u32(&mut payload, i.width);
    put_u32(&mut payload, i.channels);
    put_u32(&mut payload, spec.layers.len());
    for layer in &spec.layers {
        match *layer {
            LayerSpec::Conv { out_channels, kernel, stride, padding, activation } => {
                payload.push(0);
                for v in [out_channels, kernel, stride, padding, activation_code(activation)] {
                    put_u32(&mut payload, v);
                }
            }
            LayerSpec::MaxPool { window, stride } => {
                payload.push(1);
                put_u32(&mut payload, window);
                put_u32(&mut payload, stride);
            }
            LayerSpec::Flatten => payload.push(2),
            LayerSpec::Dense { units, activation } => {
                payload.push(3);
                put_u32(&mut payload, units);
                put_u32(&mut payload, activation_code(activation));
            }
            LayerSpec::SoftmaxOutput => payload.push(4),
        }
    }
    payload.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params.values() {
        payload.extend_from_slice(&v.to_le_bytes());
    }

    let mut out = Vec::with_capacity(HEADER + payload.len() + 4);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        let Some(end) = end else {
            return Err(CheckpointError::Malformed(format!("payload ends inside a field at byte {}", self.pos)));
        };
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn activation(&mut self) -> Result<Activation, CheckpointError> {
        match self.u32()? {
            0 => Ok(Activation::Identity),
            1 => Ok(Activation::Relu),
            a => Err(CheckpointError::Malformed(format!("unknown activation code {a}"))),
        }
    }
}

pub fn decode(data: &[u8]) -> Result<(NetworkSpec, Parameters<f32>), CheckpointError> {
    if data.len() < MAGIC.len() {
        return Err(CheckpointError::Truncated { expected: HEADER, found: data.len() });
    }
    if data[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if data.len() < HEADER {
        return Err(CheckpointError::Truncated { expected: HEADER, found: data.len() });
    }
    if data[4] != VERSION {
        return Err(CheckpointError::UnsupportedVersion(data[4]));
    }
    let declared = u64::from_le_bytes(data[5..13].try_into().expect("8 bytes"));
    let expected = usize::try_from(declared)
        .ok()
        .and_then(|d| d.checked_add(HEADER + 4))
        .ok_or_else(|| CheckpointError::Malformed(format!("implausible payload length {declared}")))?;
    if data.len() < expected {
        return Err(CheckpointError::Truncated { expected, found: data.len() });
    }
    if data.len() > expected {
        return Err(CheckpointError::Malformed(format!("{} trailing bytes", data.len() - expected)));
    }
    let body = &data[..expected - 4];
    let stored = u32::from_le_bytes(data[expected - 4..].try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(CheckpointError::ChecksumMismatch);
    }

    let mut r = Reader { data: &body[HEADER..], pos: 0 };
    let input_shape = InputShape { height: r.u32()?, width: r.u32()?, channels: r.u32()? };
    let count = r.u32()?;
    let mut layers = Vec::new();
    for _ in 0..count {
        layers.push(match r.u8()? {
            0 => LayerSpec::Conv {
                out_channels: r.u32()?,
                kernel: r.u32()?,
                stride: r.u32()?,
                padding: r.u32()?,
                activation: r.activation()?,
            },
            1 => LayerSpec::MaxPool { window: r.u32()?, stride: r.u32()? },
            2 => LayerSpec::Flatten,
            3 => LayerSpec::Dense { units: r.u32()?, activation: r.activation()? },
            4 => LayerSpec::SoftmaxOutput,
            t => return Err(CheckpointError::Malformed(format!("unknown layer tag {t}"))),
        });
    }
    let spec = NetworkSpec { input_shape, layers };
    let shapes = spec.parameter_shapes().map_err(|e| CheckpointError::Malformed(format!("{e}")))?;
    let total: usize = shapes.iter().map(|(w, b)| w + b).sum();
    let n = r.u64()?;
    if n != total as u64 {
        return Err(CheckpointError::Malformed(format!("{n} parameters stored, network has {total}")));
    }
    let mut layers = Vec::with_capacity(shapes.len());
    for (w, b) in shapes {
        let mut read = |k: usize| -> Result<Vec<f32>, CheckpointError> {
            let bytes = r.take(k * 4)?;
            Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
        };
        layers.push(LayerParams { weights: read(w)?, bias: read(b)? });
    }
    if r.pos != r.data.len() {
        return Err(CheckpointError::Malformed("unused bytes after parameters".into()));
    }
    let params = Parameters { layers };
    if !params.is_finite() {
        return Err(CheckpointError::Malformed("non-finite parameter".into()));
    }
    Ok((spec, params))
}
