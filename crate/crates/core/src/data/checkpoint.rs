//! Flat binary checkpoints.
//!
//! Layout (all little-endian): magic "MKCD", version u8, a length-prefixed
//! model-config TOML block, the step counter (u64), the RNG state
//! (seed u64 + stream position u128), then a u32 record count followed by
//! records of (name-length u32, name, rank u8, extents u64 each, payload
//! of f64 values). Parameter data and Adam state are separate records;
//! writes are atomic (temp file + rename) and a save/load round trip is
//! bit-identical.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 4] = b"MKCD";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub extents: Vec<u64>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_toml: String,
    pub step: u64,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn from_store(
        config_toml: &str,
        store: &ParamStore,
        step: u64,
        rng_seed: u64,
        rng_word_pos: u128,
    ) -> Self {
        let mut records = Vec::with_capacity(store.len() * 4);
        for e in store.entries() {
            let extents: Vec<u64> = e.shape.iter().map(|&v| v as u64).collect();
            records.push(Record {
                name: e.name.clone(),
                extents: extents.clone(),
                values: e.data.clone(),
            });
            records.push(Record {
                name: format!("adam.m.{}", e.name),
                extents: extents.clone(),
                values: e.adam_m.clone(),
            });
            records.push(Record {
                name: format!("adam.v.{}", e.name),
                extents,
                values: e.adam_v.clone(),
            });
            records.push(Record {
                name: format!("adam.t.{}", e.name),
                extents: vec![],
                values: vec![e.adam_t as f64],
            });
        }
        Checkpoint {
            config_toml: config_toml.to_string(),
            step,
            rng_seed,
            rng_word_pos,
            records,
        }
    }

    /// Restore parameter data and optimizer state. Every store entry must
    /// have matching records with matching extents.
    pub fn apply_to_store(&self, store: &mut ParamStore) -> Result<()> {
        use std::collections::HashMap;
        let by_name: HashMap<&str, &Record> =
            self.records.iter().map(|r| (r.name.as_str(), r)).collect();
        for e in store.entries_mut() {
            let rec = by_name.get(e.name.as_str()).ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint missing parameter {}", e.name))
            })?;
            let extents: Vec<u64> = e.shape.iter().map(|&v| v as u64).collect();
            if rec.extents != extents {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?} but the checkpoint holds {:?}",
                    e.name, extents, rec.extents
                )));
            }
            e.data.copy_from_slice(&rec.values);
            let m = by_name
                .get(format!("adam.m.{}", e.name).as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing adam.m.{}", e.name)))?;
            let v = by_name
                .get(format!("adam.v.{}", e.name).as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing adam.v.{}", e.name)))?;
            let t = by_name
                .get(format!("adam.t.{}", e.name).as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing adam.t.{}", e.name)))?;
            e.adam_m.copy_from_slice(&m.values);
            e.adam_v.copy_from_slice(&v.values);
            e.adam_t = t.values[0] as u64;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.push(VERSION);
        let cfg = self.config_toml.as_bytes();
        buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        buf.extend_from_slice(cfg);
        buf.extend_from_slice(&self.step.to_le_bytes());
        buf.extend_from_slice(&self.rng_seed.to_le_bytes());
        buf.extend_from_slice(&self.rng_word_pos.to_le_bytes());
        buf.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            let name = r.name.as_bytes();
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name);
            buf.push(r.extents.len() as u8);
            let numel: u64 = r.extents.iter().product();
            if !r.extents.is_empty() && numel as usize != r.values.len() {
                return Err(Error::Checkpoint(format!(
                    "record {}: extents {:?} do not match {} values",
                    r.name,
                    r.extents,
                    r.values.len()
                )));
            }
            for e in &r.extents {
                buf.extend_from_slice(&e.to_le_bytes());
            }
            for v in &r.values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&buf)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?
            .read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        let magic = cur.take(4)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "{}: bad magic {:?}, expected {:?}",
                path.display(),
                &magic[..],
                MAGIC
            )));
        }
        let version = cur.u8()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported version {version}, this build reads version {VERSION}",
                path.display()
            )));
        }
        let cfg_len = cur.u32()? as usize;
        let config_toml = String::from_utf8(cur.take(cfg_len)?.to_vec())
            .map_err(|e| Error::Checkpoint(format!("config block is not UTF-8: {e}")))?;
        let step = cur.u64()?;
        let rng_seed = cur.u64()?;
        let rng_word_pos = cur.u128()?;
        let n_records = cur.u32()? as usize;
        let mut records = Vec::with_capacity(n_records);
        for _ in 0..n_records {
            let name_len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|e| Error::Checkpoint(format!("record name is not UTF-8: {e}")))?;
            let rank = cur.u8()? as usize;
            let mut extents = Vec::with_capacity(rank);
            for _ in 0..rank {
                extents.push(cur.u64()?);
            }
            let numel: u64 = extents.iter().product();
            let mut values = Vec::with_capacity(numel as usize);
            for _ in 0..numel {
                values.push(f64::from_le_bytes(cur.take(8)?.try_into().unwrap()));
            }
            records.push(Record {
                name,
                extents,
                values,
            });
        }
        Ok(Checkpoint {
            config_toml,
            step,
            rng_seed,
            rng_word_pos,
            records,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated checkpoint: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn sample_store() -> ParamStore {
        let mut rng = SeededRng::new(71);
        let mut store = ParamStore::new();
        store.register_normal("a.weight", vec![3, 4], 0.5, &mut rng);
        store.register_normal("b.bias", vec![7], 0.1, &mut rng);
        for e in store.entries_mut() {
            for (i, m) in e.adam_m.iter_mut().enumerate() {
                *m = i as f64 * 0.25;
            }
            e.adam_t = 5;
        }
        store
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let store = sample_store();
        let ckpt = Checkpoint::from_store("cfg = true\n", &store, 42, 8888, 123456789);
        let path = dir.path().join("m.ckpt");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(ckpt, back);

        // Restoring into a fresh same-shape store reproduces values exactly.
        let mut rng = SeededRng::new(999);
        let mut store2 = ParamStore::new();
        store2.register_normal("a.weight", vec![3, 4], 0.5, &mut rng);
        store2.register_normal("b.bias", vec![7], 0.1, &mut rng);
        back.apply_to_store(&mut store2).unwrap();
        for (a, b) in store.entries().iter().zip(store2.entries()) {
            assert_eq!(a.data, b.data);
            assert_eq!(a.adam_m, b.adam_m);
            assert_eq!(a.adam_v, b.adam_v);
            assert_eq!(a.adam_t, b.adam_t);
        }
        // Save again from the restored store: identical bytes.
        let path2 = dir.path().join("m2.ckpt");
        Checkpoint::from_store("cfg = true\n", &store2, 42, 8888, 123456789)
            .save(&path2)
            .unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn truncated_file_is_a_structured_error() {
        let dir = tempfile::tempdir().unwrap();
        let store = sample_store();
        let ckpt = Checkpoint::from_store("x = 1\n", &store, 1, 2, 3);
        let path = dir.path().join("full.ckpt");
        ckpt.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.ckpt");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        let err = Checkpoint::load(&cut).unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOPE\x01\0\0\0\0").unwrap();
        assert!(Checkpoint::load(&path)
            .unwrap_err()
            .to_string()
            .contains("bad magic"));
        let mut ok = Vec::new();
        ok.extend_from_slice(MAGIC);
        ok.push(99);
        std::fs::write(&path, &ok).unwrap();
        let msg = Checkpoint::load(&path).unwrap_err().to_string();
        assert!(msg.contains("99") && msg.contains("version"), "{msg}");
    }

    #[test]
    fn shape_mismatch_is_rejected_by_name() {
        let store = sample_store();
        let ckpt = Checkpoint::from_store("", &store, 0, 0, 0);
        let mut rng = SeededRng::new(1);
        let mut other = ParamStore::new();
        other.register_normal("a.weight", vec![4, 3], 0.5, &mut rng);
        other.register_normal("b.bias", vec![7], 0.1, &mut rng);
        let err = ckpt.apply_to_store(&mut other).unwrap_err();
        assert!(err.to_string().contains("a.weight"));
    }
}
