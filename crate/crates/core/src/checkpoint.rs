//! Versioned binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "DKCKPT\0\0"
//! version      u32      FORMAT_VERSION
//! meta_len     u64      length of the JSON metadata block
//! meta         bytes    UTF-8 JSON (config snapshot, vocabularies)
//! count        u64      number of parameters
//! per parameter:
//!   name_len   u32
//!   name       bytes    UTF-8
//!   ndim       u32
//!   dims       ndim × u64
//!   values     prod(dims) × f64 (IEEE-754 little-endian)
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DKCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: String,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, metadata: String) -> Self {
        Self {
            metadata,
            params: store
                .iter()
                .map(|(_, p)| (p.name().to_string(), p.value().clone()))
                .collect(),
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.metadata.len() as u64).to_le_bytes())?;
        w.write_all(self.metadata.as_bytes())?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for (name, t) in &self.params {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.ndim() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let meta_len = read_u64(&mut r)? as usize;
        let metadata = String::from_utf8(read_bytes(&mut r, meta_len)?)
            .map_err(|e| Error::Checkpoint(format!("metadata is not UTF-8: {e}")))?;
        let count = read_u64(&mut r)? as usize;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let name = String::from_utf8(read_bytes(&mut r, name_len)?)
                .map_err(|e| Error::Checkpoint(format!("parameter name is not UTF-8: {e}")))?;
            let ndim = read_u32(&mut r)? as usize;
            let shape = (0..ndim)
                .map(|_| read_u64(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = read_bytes(&mut r, n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self { metadata, params })
    }

    /// Copies values into `store`; names and shapes must match exactly.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model expects {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, t) in &self.params {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
            let p = store.get_mut(id);
            if p.value().shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?} in checkpoint, {:?} in model",
                    t.shape(),
                    p.value().shape()
                )));
            }
            *p.value_mut() = t.clone();
        }
        Ok(())
    }
}

fn read_bytes<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{seeded_init, InitScheme};
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip_preserves_bits(rows in 1usize..5, cols in 1usize..6, seed in any::<u64>()) {
            let mut store = ParamStore::new();
            store.add("w", seeded_init(&[rows, cols], seed, InitScheme::UniformRange(3.0))).unwrap();
            store.add("b", seeded_init(&[cols], seed ^ 1, InitScheme::UniformRange(3.0))).unwrap();
            let ck = Checkpoint::from_store(&store, "{\"k\":1}".into());
            let back = Checkpoint::read_from(ck.to_bytes().as_slice()).unwrap();
            prop_assert_eq!(&back, &ck);
        }
    }

    #[test]
    fn rejects_wrong_version_and_shape() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(&[2, 2])).unwrap();
        let mut bytes = Checkpoint::from_store(&store, String::new()).to_bytes();
        bytes[8] = 9;
        assert!(matches!(
            Checkpoint::read_from(bytes.as_slice()),
            Err(Error::Checkpoint(_))
        ));

        let mut other = ParamStore::new();
        other.add("w", Tensor::zeros(&[3, 2])).unwrap();
        let ck = Checkpoint::from_store(&other, String::new());
        assert!(matches!(ck.load_into(&mut store), Err(Error::Checkpoint(_))));
    }
}
