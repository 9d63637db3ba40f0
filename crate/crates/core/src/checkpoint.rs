//! Named-parameter checkpoints.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, JSON header,
//! raw little-endian `f32` tensor data, then the SHA-256 of all preceding bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"VTSGCKP1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    /// `stage2`, `stage3` or an ablation row name.
    pub kind: String,
    /// Serialized model configuration.
    pub config: serde_json::Value,
    /// Hash of the encoder configuration the weights were trained with.
    pub encoder_hash: String,
    /// Hash of the checkpoint this one was initialized from, if any.
    pub parent: Option<String>,
    pub epoch: usize,
    pub score: f64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

/// Stable hash of any serializable configuration.
pub fn config_hash<S: Serialize>(cfg: &S) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    hex::encode(&Sha256::digest(&json)[..8])
}

impl Checkpoint {
    pub fn from_store(meta: CheckpointMeta, store: &ParamStore<f32>) -> Self {
        let tensors = store.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect();
        Self { meta, tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// A fresh store holding exactly the checkpointed tensors.
    pub fn to_store(&self) -> Result<ParamStore<f32>> {
        let mut s = ParamStore::new();
        for (n, t) in &self.tensors {
            s.add(n.clone(), t.clone())?;
        }
        Ok(s)
    }

    /// Overwrites every parameter of `store`; all must be present.
    pub fn load_into(&self, store: &mut ParamStore<f32>) -> Result<()> {
        let names: Vec<String> = store.iter().map(|(_, n, _)| n.to_string()).collect();
        for n in names {
            let t = self.get(&n).ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks `{n}`")))?;
            store.assign(&n, t.clone())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        #[derive(Serialize)]
        struct Header<'a> {
            meta: &'a CheckpointMeta,
            tensors: Vec<TensorEntry>,
        }
        let header = Header {
            meta: &self.meta,
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec() })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(json.len() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < MAGIC.len() + 8 + 32 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch"));
        }
        let hlen = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
        let json = body.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        #[derive(Deserialize)]
        struct Header {
            meta: CheckpointMeta,
            tensors: Vec<TensorEntry>,
        }
        let header: Header = serde_json::from_slice(json).map_err(|e| bad(&format!("header: {e}")))?;
        if header.meta.version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported version {}", header.meta.version)));
        }
        let mut data = body[16 + hlen..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let vals: Vec<f32> = data.by_ref().take(n).collect();
            if vals.len() != n {
                return Err(bad("truncated tensor data"));
            }
            tensors.push((e.name, Tensor::from_vec(&e.shape, vals)?));
        }
        if data.next().is_some() {
            return Err(bad("trailing tensor data"));
        }
        Ok(Self { meta: header.meta, tensors })
    }

    /// Content hash (hex) of the serialized checkpoint.
    pub fn hash(&self) -> String {
        let b = self.to_bytes();
        hex::encode(&b[b.len() - 32..])
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let b = self.to_bytes();
        std::fs::write(path, &b).map_err(|e| Error::io(path, e))?;
        Ok(hex::encode(&b[b.len() - 32..]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let b = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut s = ParamStore::<f32>::new();
        s.add("a.w", Tensor::from_vec(&[2, 2], vec![1.0, -2.5, f32::MIN_POSITIVE, 3.0]).unwrap()).unwrap();
        s.add("b", Tensor::zeros(&[1, 3])).unwrap();
        let meta = CheckpointMeta {
            version: FORMAT_VERSION,
            kind: "stage2".into(),
            config: serde_json::json!({"x": 1}),
            encoder_hash: config_hash(&1u32),
            parent: None,
            epoch: 3,
            score: 0.5,
        };
        Checkpoint::from_store(meta, &s)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.meta, c.meta);
        for ((n1, t1), (n2, t2)) in c.tensors.iter().zip(&back.tensors) {
            assert_eq!(n1, n2);
            let b1: Vec<u32> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u32> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn corruption_detected() {
        let mut b = sample().to_bytes();
        let i = b.len() - 40;
        b[i] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::Checkpoint(_))));
        assert!(Checkpoint::from_bytes(b"nope").is_err());
    }

    #[test]
    fn load_into_requires_all_names() {
        let c = sample();
        let mut s = ParamStore::<f32>::new();
        s.add("a.w", Tensor::zeros(&[2, 2])).unwrap();
        c.load_into(&mut s).unwrap();
        assert_eq!(s.get(s.id("a.w").unwrap()).data()[1], -2.5);
        s.add("c", Tensor::zeros(&[1, 1])).unwrap();
        assert!(c.load_into(&mut s).is_err());
    }
}
