//! Versioned binary checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! "TSCK"  u16 version  u16 reserved (0)  u32 epoch  u64 config_hash
//! u32 config_len  config_len bytes of UTF-8 config text
//! f64 best_valid_mrr
//! u64 adam_step  f64 lr  f64 beta1  f64 beta2  f64 eps
//! u32 param_count
//! per parameter:
//!   u16 name_len  name bytes  u8 rank  rank × u32 dims
//!   f32 values, f32 first moments, f32 second moments (numel each)
//! ```
//!
//! `config_hash` is the first eight bytes (little-endian) of the SHA-256 of
//! the config text and is checked on load.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use tsam_autodiff::{AdamConfig, AdamState, ParamStore, Tensor};

use crate::data::Reader;
use crate::error::{Error, FormatError, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"TSCK";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn config_hash(text: &str) -> u64 {
    let digest = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub epoch: u32,
    pub config_text: String,
    pub best_valid_mrr: f64,
    pub params: ParamStore,
    pub adam: AdamState,
}

impl Checkpoint {
    pub fn config_hash(&self) -> u64 {
        config_hash(&self.config_text)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.config_hash().to_le_bytes());
        out.extend_from_slice(&(self.config_text.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        out.extend_from_slice(&self.best_valid_mrr.to_le_bytes());
        let c = self.adam.config;
        out.extend_from_slice(&self.adam.step.to_le_bytes());
        for v in [c.lr, c.beta1, c.beta2, c.eps] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (id, name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            let i = id.index();
            for buf in [t.data(), &self.adam.m[i], &self.adam.v[i]] {
                for v in buf {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::new(bytes);
        let magic: [u8; 4] = r.array()?;
        if magic != CHECKPOINT_MAGIC {
            return Err(FormatError::BadMagic {
                found: magic,
                expected: CHECKPOINT_MAGIC,
            });
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(FormatError::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if r.u16()? != 0 {
            return Err(FormatError::Invalid("reserved header field is nonzero".into()));
        }
        let epoch = r.u32()?;
        let hash = r.u64()?;
        let len = r.u32()? as usize;
        let config_text = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| FormatError::Invalid("config text is not UTF-8".into()))?;
        if config_hash(&config_text) != hash {
            return Err(FormatError::Invalid(format!(
                "config hash {hash:016x} does not match the stored config text"
            )));
        }
        let best_valid_mrr = r.f64()?;
        let step = r.u64()?;
        let config = AdamConfig {
            lr: r.f64()?,
            beta1: r.f64()?,
            beta2: r.f64()?,
            eps: r.f64()?,
        };
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        let (mut m, mut v) = (Vec::with_capacity(count), Vec::with_capacity(count));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| FormatError::Invalid("parameter name is not UTF-8".into()))?;
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| FormatError::Invalid(format!("shape of {name} overflows")))?;
            let data = r.f32s(numel)?;
            let tensor = Tensor::new(shape, data)
                .map_err(|e| FormatError::Invalid(format!("parameter {name}: {e}")))?;
            if params.find(&name).is_some() {
                return Err(FormatError::Invalid(format!("duplicate parameter {name}")));
            }
            params.add(name, tensor);
            m.push(r.f32s(numel)?);
            v.push(r.f32s(numel)?);
        }
        if r.remaining() != 0 {
            return Err(FormatError::Invalid(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Checkpoint {
            epoch,
            config_text,
            best_valid_mrr,
            params,
            adam: AdamState { config, step, m, v },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes).map_err(|source| Error::Format {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Copies the stored values into `store`, which must hold exactly the
    /// same parameter names and shapes, in the same order.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(Error::Data(format!(
                "checkpoint holds {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for ((id, name, t), (_, cname, ct)) in store
            .iter()
            .map(|(i, n, t)| (i, n.to_string(), t.shape().to_vec()))
            .collect::<Vec<_>>()
            .into_iter()
            .zip(self.params.iter())
        {
            if name != cname || t != ct.shape() {
                return Err(Error::Data(format!(
                    "checkpoint parameter {cname} {:?} does not match model parameter {name} {t:?}",
                    ct.shape()
                )));
            }
            store.set_data(id, ct.data())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params.add("a", Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 0.0, 3.25, -0.0]).unwrap());
        params.add("b", Tensor::vector(vec![7.0, 8.0]).unwrap());
        let mut adam = AdamState::new(&params, AdamConfig::default());
        adam.step = 4;
        adam.m[0][1] = 0.125;
        adam.v[1][0] = 2.5;
        Checkpoint {
            epoch: 3,
            config_text: "model.dim = 8\n".into(),
            best_valid_mrr: 0.625,
            params,
            adam,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.adam, c.adam);
        assert_eq!(back.epoch, 3);
        assert_eq!(back.config_hash(), config_hash("model.dim = 8\n"));
    }

    #[test]
    fn version_and_magic_checked() {
        let mut bytes = sample().to_bytes();
        bytes[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(FormatError::Version { found: 9, expected: 1 })
        ));
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(FormatError::BadMagic { .. })));
        let bytes = sample().to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 1]),
            Err(FormatError::Truncated { .. })
        ));
    }

    #[test]
    fn tampered_config_rejected() {
        let mut bytes = sample().to_bytes();
        let pos = bytes.windows(3).position(|w| w == b"dim").unwrap();
        bytes[pos] = b'D';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(FormatError::Invalid(_))));
    }

    #[test]
    fn restore_checks_names() {
        let c = sample();
        let mut other = ParamStore::new();
        other.add("a", Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        other.add("c", Tensor::vector(vec![0.0; 2]).unwrap());
        assert!(c.restore_into(&mut other).is_err());
        let mut same = c.params.clone();
        same.set_data(same.find("b").unwrap(), &[0.0, 0.0]).unwrap();
        c.restore_into(&mut same).unwrap();
        assert_eq!(same.get(same.find("b").unwrap()).data(), &[7.0, 8.0]);
    }
}
