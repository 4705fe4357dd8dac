//! Flat binary checkpoints.
//!
//! Layout (all integers little-endian):
//! `b"ASCANCK1"`, `u64` manifest length, manifest JSON, `u64` entry count,
//! then per entry: `u32` name length, UTF-8 name, `u8` dtype tag
//! (0 = f32, 1 = f64), `u32` rank, `u64` extents, raw payload.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::{numel, DType};

pub const MAGIC: &[u8; 8] = b"ASCANCK1";

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: serde_json::Value,
    pub entries: Vec<Entry>,
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| Error::Checkpoint(format!("truncated archive: {e}")))?;
    Ok(b)
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, manifest: serde_json::Value) -> Result<Checkpoint> {
        let mut entries = Vec::new();
        for p in store.all() {
            let v = p.value();
            if v.is_meta() {
                return Err(Error::Meta("checkpoint"));
            }
            entries.push(Entry { name: p.name().to_string(), dtype: v.dtype(), shape: v.shape().to_vec(), data: v.to_vec() });
        }
        Ok(Checkpoint { manifest, entries })
    }

    /// Copies every entry into the matching slot of `store`; names, shapes
    /// and dtypes must agree one-to-one.
    pub fn apply(&self, store: &ParamStore) -> Result<()> {
        let slots = store.all();
        if slots.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "archive has {} tensors, model has {}",
                self.entries.len(),
                slots.len()
            )));
        }
        for e in &self.entries {
            let p = store
                .get(&e.name)
                .ok_or_else(|| Error::Checkpoint(format!("model has no tensor `{}`", e.name)))?;
            if p.shape() != e.shape || p.dtype() != e.dtype {
                return Err(Error::Checkpoint(format!(
                    "`{}`: archive {:?}/{} vs model {:?}/{}",
                    e.name,
                    e.shape,
                    e.dtype,
                    p.shape(),
                    p.dtype()
                )));
            }
            p.set_data(e.data.clone())?;
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        let manifest = serde_json::to_vec(&self.manifest)?;
        w.write_all(&(manifest.len() as u64).to_le_bytes())?;
        w.write_all(&manifest)?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for e in &self.entries {
            w.write_all(&(e.name.len() as u32).to_le_bytes())?;
            w.write_all(e.name.as_bytes())?;
            w.write_all(&[e.dtype.tag()])?;
            w.write_all(&(e.shape.len() as u32).to_le_bytes())?;
            for &d in &e.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            match e.dtype {
                DType::F32 => {
                    for &v in &e.data {
                        w.write_all(&(v as f32).to_le_bytes())?;
                    }
                }
                DType::F64 => {
                    for &v in &e.data {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Checkpoint> {
        let magic: [u8; 8] = read_exact(r)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint".into()));
        }
        let mlen = u64::from_le_bytes(read_exact(r)?) as usize;
        let mut manifest = vec![0u8; mlen];
        r.read_exact(&mut manifest).map_err(|e| Error::Checkpoint(format!("truncated manifest: {e}")))?;
        let manifest = serde_json::from_slice(&manifest)?;
        let count = u64::from_le_bytes(read_exact(r)?) as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let nlen = u32::from_le_bytes(read_exact(r)?) as usize;
            let mut name = vec![0u8; nlen];
            r.read_exact(&mut name).map_err(|e| Error::Checkpoint(format!("truncated name: {e}")))?;
            let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;
            let [tag] = read_exact::<1>(r)?;
            let dtype = DType::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("unknown dtype tag {tag}")))?;
            let rank = u32::from_le_bytes(read_exact(r)?) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(read_exact(r)?) as usize);
            }
            let n = numel(&shape);
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(match dtype {
                    DType::F32 => f32::from_le_bytes(read_exact(r)?) as f64,
                    DType::F64 => f64::from_le_bytes(read_exact(r)?),
                });
            }
            entries.push(Entry { name, dtype, shape, data });
        }
        Ok(Checkpoint { manifest, entries })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<String> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, &bytes)?;
        Ok(sha256_hex(&bytes))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)?;
        Checkpoint::read_from(&mut bytes.as_slice())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::{Builder, Init};

    #[test]
    fn roundtrip_is_bit_exact() {
        let b = Builder::new(5, DType::F32);
        b.param("a.weight", &[3, 4], Init::Normal(1.0)).unwrap();
        b.buffer("a.running_var", &[4], Init::Ones).unwrap();
        let b64 = Builder::new(6, DType::F64);
        b64.param("z", &[5], Init::Normal(1.0)).unwrap();
        for store in [b.store(), b64.store()] {
            let ck = Checkpoint::from_store(store, serde_json::json!({"spec_hash": "abc"})).unwrap();
            let bytes = ck.to_bytes().unwrap();
            let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn bad_magic_rejected() {
        assert!(Checkpoint::read_from(&mut &b"NOTACKPT........"[..]).is_err());
    }
}
