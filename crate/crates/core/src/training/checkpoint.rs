//! Single-file checkpoints: an 8-byte little-endian header length, a JSON
//! header describing every tensor, then the raw little-endian tensor data.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderPair, Weights};
use crate::error::{Error, Result};
use crate::nn::Scalar;

const FORMAT: &str = "plrc-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the data section.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub step: usize,
    pub ema: f64,
    pub encoder: EncoderConfig,
    pub tensors: Vec<TensorEntry>,
}

/// Both weight sets, optimiser velocity and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub step: usize,
    pub encoder: EncoderConfig,
    pub pair: EncoderPair<T>,
    pub velocity: Weights<T>,
}

const GROUPS: [&str; 3] = ["base", "momentum", "velocity"];

impl<T: Scalar> Checkpoint<T> {
    fn groups(&self) -> [&Weights<T>; 3] {
        [&self.pair.base, &self.pair.momentum, &self.velocity]
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut data = Vec::new();
        let mut tensors = Vec::new();
        for (group, w) in GROUPS.iter().zip(self.groups()) {
            for ((name, shape), values) in w.names().into_iter().zip(w.shapes()).zip(w.tensors()) {
                tensors.push(TensorEntry {
                    name: format!("{group}/{name}"),
                    shape,
                    dtype: T::DTYPE.to_string(),
                    offset: data.len(),
                });
                for &v in values {
                    v.write_le(&mut data);
                }
            }
        }
        let header = serde_json::to_vec(&CheckpointHeader {
            format: FORMAT.into(),
            version: VERSION,
            step: self.step,
            ema: self.pair.ema,
            encoder: self.encoder.clone(),
            tensors,
        })?;
        let mut out = Vec::with_capacity(8 + header.len() + data.len());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let len = u64::from_le_bytes(
            bytes
                .get(..8)
                .ok_or_else(|| bad("truncated header length"))?
                .try_into()
                .expect("8 bytes"),
        ) as usize;
        let header_bytes = bytes.get(8..8 + len).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(header_bytes)?;
        if header.format != FORMAT || header.version != VERSION {
            return Err(bad("unsupported checkpoint format"));
        }
        header
            .encoder
            .validate()
            .map_err(|e| Error::Checkpoint(format!("bad encoder config: {e}")))?;
        let data = &bytes[8 + len..];
        let mut groups: Vec<Weights<T>> = Vec::with_capacity(3);
        let mut entries = header.tensors.iter();
        for group in GROUPS {
            let mut w = Weights::<T>::zeros(&header.encoder);
            let names = w.names();
            let shapes = w.shapes();
            for ((name, shape), dst) in names.iter().zip(&shapes).zip(w.tensors_mut()) {
                let e = entries.next().ok_or_else(|| bad("missing tensors"))?;
                if e.name != format!("{group}/{name}") || &e.shape != shape {
                    return Err(Error::Checkpoint(format!("unexpected tensor {} {:?}", e.name, e.shape)));
                }
                if e.dtype != T::DTYPE {
                    return Err(Error::Checkpoint(format!(
                        "tensor {} is {}, expected {}",
                        e.name,
                        e.dtype,
                        T::DTYPE
                    )));
                }
                let end = e.offset + dst.len() * T::BYTES;
                let src = data.get(e.offset..end).ok_or_else(|| bad("truncated tensor data"))?;
                for (d, chunk) in dst.iter_mut().zip(src.chunks_exact(T::BYTES)) {
                    *d = T::read_le(chunk);
                }
            }
            groups.push(w);
        }
        let velocity = groups.pop().expect("three groups");
        let momentum = groups.pop().expect("three groups");
        let base = groups.pop().expect("three groups");
        let mut pair = EncoderPair::new(base, header.ema)?;
        pair.momentum = momentum;
        Ok(Checkpoint {
            step: header.step,
            encoder: header.encoder,
            pair,
            velocity,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Reads only the JSON header of a checkpoint file.
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let len = bytes
        .get(..8)
        .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize)
        .ok_or_else(|| Error::Checkpoint("truncated header length".into()))?;
    let header = bytes
        .get(8..8 + len)
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    Ok(serde_json::from_slice(header)?)
}
