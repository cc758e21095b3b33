//! Checkpoint container.
//!
//! ```text
//! "LSGC"  u32 LE version  u64 LE header length  JSON header
//! then, per parameter in header order: value, first moment, second moment
//! then the label snapshot; each an LSGT blob
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::data_io::tensor_file::{decode, encode};
use crate::error::{Error, Result};
use crate::model::ModelDims;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"LSGC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub dims: ModelDims,
    pub classes: Vec<String>,
    /// Completed epochs.
    pub epoch: usize,
    pub adam_step: u64,
    /// Parameter names and values in registration order.
    pub params: Vec<(String, Tensor)>,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub label_snapshot: Tensor,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: TrainConfig,
    dims: ModelDims,
    classes: Vec<String>,
    epoch: usize,
    adam_step: u64,
    params: Vec<String>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.m.len() != self.params.len() || self.v.len() != self.params.len() {
            return Err(Error::invalid(
                "checkpoint",
                "moment count differs from parameter count",
            ));
        }
        let header = Header {
            config: self.config.clone(),
            dims: self.dims,
            classes: self.classes.clone(),
            epoch: self.epoch,
            adam_step: self.adam_step,
            params: self.params.iter().map(|(n, _)| n.clone()).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for ((_, value), (m, v)) in self.params.iter().zip(self.m.iter().zip(&self.v)) {
            out.extend(encode(value));
            out.extend(encode(m));
            out.extend(encode(v));
        }
        out.extend(encode(&self.label_snapshot));
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fixed = 16;
        if bytes.len() < fixed {
            return Err(Error::Truncated {
                expected: fixed,
                found: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic {
                found: magic,
                expected: MAGIC,
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let end = usize::try_from(hlen)
            .ok()
            .and_then(|h| h.checked_add(fixed))
            .ok_or_else(|| Error::InvalidHeader(format!("header length {hlen}")))?;
        let json = bytes.get(fixed..end).ok_or(Error::Truncated {
            expected: end,
            found: bytes.len(),
        })?;
        let header: Header = serde_json::from_slice(json)?;

        let mut at = end;
        let mut next = || -> Result<Tensor> {
            let (t, used) = decode(&bytes[at..])?;
            at += used;
            Ok(t)
        };
        let mut params = Vec::with_capacity(header.params.len());
        let mut m = Vec::with_capacity(header.params.len());
        let mut v = Vec::with_capacity(header.params.len());
        for name in header.params {
            let value = next()?;
            let (mt, vt) = (next()?, next()?);
            if mt.shape() != value.shape() || vt.shape() != value.shape() {
                return Err(Error::shape("checkpoint", value.shape(), mt.shape()));
            }
            params.push((name, value));
            m.push(mt);
            v.push(vt);
        }
        let label_snapshot = next()?;
        if at != bytes.len() {
            return Err(Error::InvalidHeader(format!(
                "{} trailing bytes",
                bytes.len() - at
            )));
        }
        Ok(Self {
            config: header.config,
            dims: header.dims,
            classes: header.classes,
            epoch: header.epoch,
            adam_step: header.adam_step,
            params,
            m,
            v,
            label_snapshot,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let shapes: [&[usize]; 3] = [&[3, 4], &[4], &[1]];
        let params: Vec<_> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("p{i}"), Tensor::randn(s, 1.0, &mut rng)))
            .collect();
        Checkpoint {
            config: TrainConfig {
                lr: 0.1 + 0.2,
                ..TrainConfig::default()
            },
            dims: ModelDims {
                text_dim: 6,
                audio_dim: 5,
                d_model: 8,
                n_heads: 2,
                n_classes: 3,
            },
            classes: vec!["a".into(), "b".into(), "c".into()],
            epoch: 4,
            adam_step: 17,
            m: params
                .iter()
                .map(|(_, t)| Tensor::randn(t.shape(), 1.0, &mut rng))
                .collect(),
            v: params
                .iter()
                .map(|(_, t)| Tensor::randn(t.shape(), 1.0, &mut rng))
                .collect(),
            params,
            label_snapshot: Tensor::randn(&[3, 8], 1.0, &mut rng),
        }
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"LSGC");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.config.lr.to_bits(), c.config.lr.to_bits());
        for ((_, a), (_, b)) in back.params.iter().zip(&c.params) {
            assert!(a.bit_eq(b));
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.lsgc");
        c.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), c);
    }

    #[test]
    fn corrupt_inputs() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::BadMagic { .. })
        ));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::UnsupportedVersion(9))
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated { .. })
        ));
        assert!(Checkpoint::from_bytes(&bytes[..10]).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }
}
