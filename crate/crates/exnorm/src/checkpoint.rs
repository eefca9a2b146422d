//! Self-describing binary checkpoint container.
//!
//! Layout, all lengths 64-bit little-endian:
//!   magic "EXNORMCK" · version u32 LE · meta-JSON length + bytes ·
//!   one blob per parameter in declaration order:
//!     name length + UTF-8 name · trainable u8 · rank + dims · value bytes
//! Values are stored as f64 little-endian regardless of training precision
//! (exact for f32-valued parameters), so any precision can reload any file.

use crate::error::{ExnError, Result};
use crate::micro::MicroConfig;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"EXNORMCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: MicroConfig,
    pub precision: String,
    pub seed: u64,
    pub epochs_trained: usize,
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    meta: &CheckpointMeta,
    store: &ParamStore<T>,
) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let meta_json = serde_json::to_vec(meta)?;
    out.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta_json);
    for entry in store.entries() {
        let name = entry.name.as_bytes();
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name);
        out.push(entry.trainable as u8);
        let shape = entry.value.shape();
        out.extend_from_slice(&(shape.len() as u64).to_le_bytes());
        for d in shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        out.extend_from_slice(&((entry.value.numel() * 8) as u64).to_le_bytes());
        for v in entry.value.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    std::fs::write(path, out)
        .map_err(|e| ExnError::format(format!("writing {}: {e}", path.display())))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(ExnError::format(format!(
                "{}: truncated at byte {} (wanted {n} more)",
                self.path.display(),
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn open<'a>(buf: &'a [u8], path: &'a Path) -> Result<Cursor<'a>> {
    let mut c = Cursor { buf, pos: 0, path };
    let magic = c.take(8)?;
    if magic != MAGIC {
        return Err(ExnError::format(format!(
            "{}: not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(ExnError::format(format!(
            "{}: unsupported checkpoint version {version} (expected {VERSION})",
            path.display()
        )));
    }
    Ok(c)
}

fn read_meta(c: &mut Cursor) -> Result<CheckpointMeta> {
    let len = c.u64()? as usize;
    let json = c.take(len)?;
    Ok(serde_json::from_slice(json)?)
}

/// Reads only the header — enough to rebuild the model skeleton.
pub fn load_checkpoint_meta(path: &Path) -> Result<CheckpointMeta> {
    let buf = std::fs::read(path)
        .map_err(|e| ExnError::format(format!("reading {}: {e}", path.display())))?;
    let mut c = open(&buf, path)?;
    read_meta(&mut c)
}

/// Fills an already-built store by name. Every blob must match an existing
/// parameter in name, shape, and trainability, and every parameter must be
/// covered.
pub fn load_checkpoint<T: Scalar>(path: &Path, store: &mut ParamStore<T>) -> Result<CheckpointMeta> {
    let buf = std::fs::read(path)
        .map_err(|e| ExnError::format(format!("reading {}: {e}", path.display())))?;
    let mut c = open(&buf, path)?;
    let meta = read_meta(&mut c)?;
    let mut seen = 0usize;
    while !c.done() {
        let name_len = c.u64()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| ExnError::format("parameter name is not UTF-8"))?
            .to_string();
        let trainable = c.take(1)?[0] != 0;
        let rank = c.u64()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64()? as usize);
        }
        let byte_len = c.u64()? as usize;
        let bytes = c.take(byte_len)?;
        let id = store.id(&name).ok_or_else(|| {
            ExnError::format(format!("checkpoint parameter {name:?} not in model"))
        })?;
        if store.value(id).shape() != shape.as_slice() {
            return Err(ExnError::shape(format!(
                "{name}: checkpoint shape {:?} vs model {:?}",
                shape,
                store.value(id).shape()
            )));
        }
        if store.is_trainable(id) != trainable {
            return Err(ExnError::format(format!(
                "{name}: trainability flag disagrees with the model"
            )));
        }
        let numel: usize = shape.iter().product();
        if byte_len != numel * 8 {
            return Err(ExnError::format(format!(
                "{name}: {byte_len} bytes for {numel} values"
            )));
        }
        let value = store.value_mut(id);
        for (i, chunk) in bytes.chunks_exact(8).enumerate() {
            value.data_mut()[i] = T::of_f64(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        seen += 1;
    }
    if seen != store.len() {
        return Err(ExnError::format(format!(
            "checkpoint covers {seen} of {} model parameters",
            store.len()
        )));
    }
    Ok(meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::NormChoice;
    use crate::en::EnConfig;
    use crate::micro::MicroCnn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(seed: u64, norm: NormChoice) -> (ParamStore<f64>, MicroCnn, MicroConfig) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = MicroConfig {
            norm,
            en: EnConfig {
                r: 8,
                ..EnConfig::default()
            },
            ..MicroConfig::default()
        };
        let mut store = ParamStore::new();
        let model = MicroCnn::new(&mut store, &cfg, &mut rng).unwrap();
        (store, model, cfg)
    }

    fn tmp(name: &str) -> std::path::PathBuf {
        std::env::temp_dir().join(format!("exnorm-ckpt-{}-{name}", std::process::id()))
    }

    #[test]
    fn round_trip_restores_every_value_bitwise() {
        let (store, _, cfg) = build(3, NormChoice::En);
        let meta = CheckpointMeta {
            model: cfg,
            precision: "f64".into(),
            seed: 3,
            epochs_trained: 7,
        };
        let p = tmp("rt.ck");
        save_checkpoint(&p, &meta, &store).unwrap();

        let (mut other, _, _) = build(99, NormChoice::En);
        let back = load_checkpoint(&p, &mut other).unwrap();
        assert_eq!(back.epochs_trained, 7);
        assert_eq!(back.model.norm, NormChoice::En);
        for (a, b) in store.entries().iter().zip(other.entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.data(), b.value.data(), "{}", a.name);
        }
        std::fs::remove_file(&p).ok();
    }

    #[test]
    fn meta_readable_without_blobs() {
        let (store, _, cfg) = build(4, NormChoice::Bn);
        let meta = CheckpointMeta {
            model: cfg,
            precision: "f32".into(),
            seed: 11,
            epochs_trained: 0,
        };
        let p = tmp("meta.ck");
        save_checkpoint(&p, &meta, &store).unwrap();
        let m = load_checkpoint_meta(&p).unwrap();
        assert_eq!(m.seed, 11);
        assert_eq!(m.precision, "f32");
        assert_eq!(m.model.norm, NormChoice::Bn);
        std::fs::remove_file(&p).ok();
    }

    #[test]
    fn bad_magic_version_and_truncation_rejected() {
        let (store, _, cfg) = build(5, NormChoice::Bn);
        let meta = CheckpointMeta {
            model: cfg,
            precision: "f64".into(),
            seed: 0,
            epochs_trained: 0,
        };
        let p = tmp("bad.ck");
        save_checkpoint(&p, &meta, &store).unwrap();
        let bytes = std::fs::read(&p).unwrap();

        let mut magic = bytes.clone();
        magic[0] = b'X';
        std::fs::write(&p, &magic).unwrap();
        assert!(load_checkpoint_meta(&p).unwrap_err().to_string().contains("magic"));

        let mut ver = bytes.clone();
        ver[8] = 9;
        std::fs::write(&p, &ver).unwrap();
        assert!(load_checkpoint_meta(&p).unwrap_err().to_string().contains("version"));

        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        let (mut store2, _, _) = build(5, NormChoice::Bn);
        assert!(load_checkpoint(&p, &mut store2)
            .unwrap_err()
            .to_string()
            .contains("truncated"));
        std::fs::remove_file(&p).ok();
    }

    #[test]
    fn architecture_mismatch_rejected() {
        let (store, _, cfg) = build(6, NormChoice::En);
        let meta = CheckpointMeta {
            model: cfg,
            precision: "f64".into(),
            seed: 0,
            epochs_trained: 0,
        };
        let p = tmp("arch.ck");
        save_checkpoint(&p, &meta, &store).unwrap();
        // A BN model lacks the mixture-head parameters.
        let (mut bn_store, _, _) = build(6, NormChoice::Bn);
        assert!(load_checkpoint(&p, &mut bn_store).is_err());
        std::fs::remove_file(&p).ok();
    }

    #[test]
    fn f32_store_round_trips_exactly_through_f64_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = MicroConfig {
            norm: NormChoice::Bn,
            ..MicroConfig::default()
        };
        let mut store = ParamStore::<f32>::new();
        MicroCnn::new(&mut store, &cfg, &mut rng).unwrap();
        let meta = CheckpointMeta {
            model: cfg,
            precision: "f32".into(),
            seed: 8,
            epochs_trained: 1,
        };
        let p = tmp("f32.ck");
        save_checkpoint(&p, &meta, &store).unwrap();
        let mut rng2 = ChaCha8Rng::seed_from_u64(1234);
        let mut other = ParamStore::<f32>::new();
        MicroCnn::new(&mut other, &meta.model, &mut rng2).unwrap();
        load_checkpoint(&p, &mut other).unwrap();
        for (a, b) in store.entries().iter().zip(other.entries()) {
            assert_eq!(a.value.data(), b.value.data(), "{}", a.name);
        }
        std::fs::remove_file(&p).ok();
    }
}
