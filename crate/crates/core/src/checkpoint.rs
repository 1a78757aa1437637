//! Checkpoint container: a text header of `key=value` configuration lines
//! followed by little-endian f32 parameter blobs with a name/offset/shape
//! table. One format serves codec and unified checkpoints; the `kind` key
//! tells them apart.

use crate::error::{Error, Result};
use crate::num::{ParamStore, Tensor};
use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"MLCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub config: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore<f32>, config: BTreeMap<String, String>) -> Self {
        let tensors = store
            .ids()
            .map(|id| (store.name(id).to_string(), store.value(id).clone()))
            .collect();
        Self { config, tensors }
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.config
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Format(format!("checkpoint config missing key '{key}'")))
    }

    pub fn kind(&self) -> Result<&str> {
        self.get("kind")
    }

    /// Overwrites store values by name; every checkpoint tensor must exist in
    /// the store with the same shape, and vice versa.
    pub fn load_into(&self, store: &mut ParamStore<f32>) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint has {} tensors, model has {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for (name, t) in &self.tensors {
            let id = store
                .id(name)
                .ok_or_else(|| Error::CheckpointMismatch(format!("unknown tensor '{name}'")))?;
            if store.value(id).shape != t.shape {
                return Err(Error::CheckpointMismatch(format!(
                    "tensor '{name}' is {:?}, model expects {:?}",
                    t.shape,
                    store.value(id).shape
                )));
            }
            *store.value_mut(id) = t.clone();
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut header = String::new();
        for (k, v) in &self.config {
            header.push_str(k);
            header.push('=');
            header.push_str(v);
            header.push('\n');
        }
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(header.as_bytes());
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(t.shape.len() as u8);
            for &d in &t.shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            buf.extend_from_slice(&offset.to_le_bytes());
            offset += (t.numel() * 4) as u64;
        }
        buf.extend_from_slice(&offset.to_le_bytes());
        for (_, t) in &self.tensors {
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::parse(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::Format("truncated checkpoint".into()));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let header = std::str::from_utf8(take(&mut pos, hlen)?)
            .map_err(|_| Error::Format("header is not UTF-8".into()))?
            .to_string();
        let mut config = BTreeMap::new();
        for line in header.lines() {
            if let Some((k, v)) = line.split_once('=') {
                config.insert(k.to_string(), v.to_string());
            }
        }
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut table = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(&mut pos, nlen)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = take(&mut pos, 1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
            }
            let offset = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
            table.push((name, shape, offset));
        }
        let blob_len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        let blob = take(&mut pos, blob_len)?;
        if pos != bytes.len() {
            return Err(Error::Format("trailing bytes after blob".into()));
        }
        let mut tensors = Vec::with_capacity(count);
        for (name, shape, offset) in table {
            let n: usize = shape.iter().product();
            let start = offset as usize;
            if start + n * 4 > blob.len() {
                return Err(Error::Format(format!("tensor '{name}' overruns the blob")));
            }
            let data = blob[start..start + n * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor::new(shape, data)));
        }
        Ok(Self { config, tensors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_checkpoint() -> Checkpoint {
        let mut store: ParamStore<f32> = ParamStore::new();
        store.add("a.w", Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 7.25, -0.125]));
        store.add("b", Tensor::new(vec![4], vec![9.0, 8.0, 7.0, 6.0]));
        let mut cfg = BTreeMap::new();
        cfg.insert("kind".to_string(), "codec".to_string());
        cfg.insert("z_dim".to_string(), "32".to_string());
        Checkpoint::from_store(&store, cfg)
    }

    #[test]
    fn roundtrip_preserves_bits_and_config() {
        let ck = sample_checkpoint();
        let p = std::env::temp_dir().join("motley_ckpt_test.mlck");
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back.kind().unwrap(), "codec");
        assert_eq!(back.get("z_dim").unwrap(), "32");
        assert_eq!(back.tensors.len(), 2);
        for ((an, at), (bn, bt)) in ck.tensors.iter().zip(&back.tensors) {
            assert_eq!(an, bn);
            assert_eq!(at.data, bt.data);
        }
        std::fs::remove_file(&p).ok();
    }

    #[test]
    fn corrupt_magic_and_truncation_error() {
        let ck = sample_checkpoint();
        let p = std::env::temp_dir().join("motley_ckpt_test2.mlck");
        ck.save(&p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'Z';
        assert!(matches!(Checkpoint::parse(&bytes), Err(Error::Format(_))));
        bytes[0] = b'M';
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(Checkpoint::parse(&bytes), Err(Error::Format(_))));
        std::fs::remove_file(&p).ok();
    }

    #[test]
    fn load_into_rejects_shape_mismatch() {
        let ck = sample_checkpoint();
        let mut store: ParamStore<f32> = ParamStore::new();
        store.add("a.w", Tensor::zeros(vec![2, 3]));
        store.add("b", Tensor::zeros(vec![5])); // wrong shape
        assert!(matches!(ck.load_into(&mut store), Err(Error::CheckpointMismatch(_))));
    }
}
