//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DNDW"            4 bytes magic
//! version           u16 (currently 1)
//! spec_len          u32
//! spec              spec_len bytes of canonical JSON (sorted keys, UTF-8)
//! tensor_count      u32
//! per tensor:       u32 rank, rank × u32 dims, product(dims) × f64
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    AeSpec, ArchitectureSpec, Classifier, DenoisingAutoencoder, LstmSpec, SequenceDetector,
    VaeSpec, VariationalAutoencoder,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DNDW";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ModelSpec {
    Classifier { arch: ArchitectureSpec },
    DenoisingAutoencoder { arch: AeSpec, noise_level: f64 },
    Vae { arch: VaeSpec },
    SequenceDetector { arch: LstmSpec },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Checkpoint {
    Classifier(Classifier),
    DenoisingAutoencoder(DenoisingAutoencoder),
    Vae(VariationalAutoencoder),
    SequenceDetector(SequenceDetector),
}

impl Checkpoint {
    fn parts(&self) -> (ModelSpec, &[Tensor]) {
        match self {
            Checkpoint::Classifier(m) => (
                ModelSpec::Classifier {
                    arch: m.spec.clone(),
                },
                m.params(),
            ),
            Checkpoint::DenoisingAutoencoder(m) => (
                ModelSpec::DenoisingAutoencoder {
                    arch: m.spec.clone(),
                    noise_level: m.noise_level,
                },
                m.params(),
            ),
            Checkpoint::Vae(m) => (
                ModelSpec::Vae {
                    arch: m.spec.clone(),
                },
                m.params(),
            ),
            Checkpoint::SequenceDetector(m) => (
                ModelSpec::SequenceDetector {
                    arch: m.spec.clone(),
                },
                m.params(),
            ),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let (spec, params) = self.parts();
        let json = serde_json::to_value(&spec)
            .and_then(|v| serde_json::to_string(&v))
            .expect("model spec serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(json.as_bytes());
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for t in params {
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let len = r.u32()? as usize;
        let spec: ModelSpec = serde_json::from_slice(r.take(len)?)?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.push(Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(match spec {
            ModelSpec::Classifier { arch } => {
                Checkpoint::Classifier(Classifier::from_parts(arch, params)?)
            }
            ModelSpec::DenoisingAutoencoder { arch, noise_level } => {
                Checkpoint::DenoisingAutoencoder(DenoisingAutoencoder::from_parts(
                    arch,
                    noise_level,
                    params,
                )?)
            }
            ModelSpec::Vae { arch } => {
                Checkpoint::Vae(VariationalAutoencoder::from_parts(arch, params)?)
            }
            ModelSpec::SequenceDetector { arch } => {
                Checkpoint::SequenceDetector(SequenceDetector::from_parts(arch, params)?)
            }
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ckpt.encode()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

impl Checkpoint {
    pub fn into_classifier(self) -> Result<Classifier> {
        match self {
            Checkpoint::Classifier(c) => Ok(c),
            _ => Err(Error::Format(
                "checkpoint does not hold a classifier".into(),
            )),
        }
    }

    pub fn into_autoencoder(self) -> Result<DenoisingAutoencoder> {
        match self {
            Checkpoint::DenoisingAutoencoder(m) => Ok(m),
            _ => Err(Error::Format(
                "checkpoint does not hold a denoising autoencoder".into(),
            )),
        }
    }

    pub fn into_vae(self) -> Result<VariationalAutoencoder> {
        match self {
            Checkpoint::Vae(m) => Ok(m),
            _ => Err(Error::Format("checkpoint does not hold a vae".into())),
        }
    }

    pub fn into_sequence_detector(self) -> Result<SequenceDetector> {
        match self {
            Checkpoint::SequenceDetector(m) => Ok(m),
            _ => Err(Error::Format(
                "checkpoint does not hold a sequence detector".into(),
            )),
        }
    }
}
