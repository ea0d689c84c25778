//! Parameter checkpoints.
//!
//! Layout: the 8-byte magic `LNCKPT01`, a little-endian `u32` byte length,
//! a UTF-8 JSON manifest of that length, then every tensor as 32-bit
//! little-endian floats in manifest order: all parameters, followed by the
//! Adam first moments and second moments when `optimizer_state` is set.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::AdamState;
use super::params::ParamSet;
use super::tensor::{Shape, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LNCKPT01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Shape,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    kind: String,
    params: Vec<ParamEntry>,
    optimizer_state: bool,
    #[serde(default)]
    optimizer_step: u64,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Model kind, e.g. `lupin`, `rainnet`, `lcnn`.
    pub kind: String,
    /// Model configuration and normalization constants.
    pub meta: serde_json::Value,
    pub params: ParamSet<f32>,
    pub optimizer: Option<AdamState<f32>>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            kind: self.kind.clone(),
            params: self
                .params
                .iter()
                .map(|p| ParamEntry {
                    name: p.name.clone(),
                    shape: p.value.shape(),
                })
                .collect(),
            optimizer_state: self.optimizer.is_some(),
            optimizer_step: self.optimizer.as_ref().map_or(0, |s| s.step),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(12 + json.len() + 4 * self.params.count() * 3);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |t: &Tensor<f32>| {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for p in self.params.iter() {
            put(&p.value);
        }
        if let Some(st) = &self.optimizer {
            st.m.iter().for_each(&mut put);
            st.v.iter().for_each(&mut put);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                expected: "LNCKPT01",
            });
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let json = bytes.get(12..12 + len).ok_or(Error::Truncated {
            expected: 12 + len,
            found: bytes.len(),
        })?;
        let manifest: Manifest = serde_json::from_slice(json)
            .map_err(|e| Error::MalformedHeader(e.to_string()))?;
        let mut cursor = 12 + len;
        let per_set: usize = manifest
            .params
            .iter()
            .map(|p| p.shape.iter().product::<usize>())
            .sum();
        let sets = if manifest.optimizer_state { 3 } else { 1 };
        let expected = cursor + 4 * per_set * sets;
        if bytes.len() < expected {
            return Err(Error::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        let mut take = |shape: Shape| -> Tensor<f32> {
            let n: usize = shape.iter().product();
            let data = bytes[cursor..cursor + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            cursor += 4 * n;
            Tensor::from_vec(shape, data).expect("length matches shape")
        };
        let mut params = ParamSet::new();
        for e in &manifest.params {
            params.push(e.name.clone(), take(e.shape))?;
        }
        let optimizer = if manifest.optimizer_state {
            let m = manifest.params.iter().map(|e| take(e.shape)).collect();
            let v = manifest.params.iter().map(|e| take(e.shape)).collect();
            Some(AdamState {
                step: manifest.optimizer_step,
                m,
                v,
            })
        } else {
            None
        };
        Ok(Checkpoint {
            kind: manifest.kind,
            meta: manifest.meta,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(with_state: bool) -> Checkpoint {
        let mut params = ParamSet::new();
        params
            .push("a.weight", Tensor::from_fn([2, 1, 3, 3], |[o, _, h, w]| (o * 9 + h * 3 + w) as f32 * 0.1))
            .unwrap();
        params.push("a.bias", Tensor::full([1, 2, 1, 1], -0.5)).unwrap();
        let optimizer = with_state.then(|| {
            let mut st = AdamState::new(&params);
            st.step = 7;
            st.m[0].data_mut()[3] = 1.25;
            st.v[1].data_mut()[1] = 3.5;
            st
        });
        Checkpoint {
            kind: "lupin".into(),
            meta: serde_json::json!({"norm_scale": 4.6}),
            params,
            optimizer,
        }
    }

    #[test]
    fn round_trip_with_and_without_optimizer_state() {
        for with_state in [false, true] {
            let ck = sample(with_state);
            let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
            assert_eq!(back, ck);
        }
    }

    #[test]
    fn truncated_payload_rejected() {
        let bytes = sample(true).to_bytes().unwrap();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).unwrap_err();
        assert!(matches!(err, Error::Truncated { .. }));
    }

    #[test]
    fn wrong_magic_rejected() {
        let mut bytes = sample(false).to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::BadMagic { .. })
        ));
    }
}
