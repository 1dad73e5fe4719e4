//! Shared model checkpoint format (capsnet, CNN, GAN): a small versioned
//! binary with a JSON metadata blob, a tensor directory (name, shape,
//! offset), and one little-endian f32 payload.

use crate::error::{CoreError, Result};
use sarcaps_tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SCKP";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    /// Free-form metadata: model kind, config snapshot, training seed…
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Checkpoint { meta, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn meta_str(&self, key: &str) -> Option<&str> {
        self.meta.get(key).and_then(|v| v.as_str())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta_bytes = serde_json::to_vec(&self.meta)?;
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(meta_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(&meta_bytes);
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, tensor) in &self.tensors {
            let name_bytes = name.as_bytes();
            buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
            buf.extend_from_slice(name_bytes);
            buf.push(tensor.shape().len() as u8);
            for &d in tensor.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            buf.extend_from_slice(&offset.to_le_bytes());
            offset += tensor.numel() as u64;
        }
        buf.extend_from_slice(&offset.to_le_bytes());
        for (_, tensor) in &self.tensors {
            for v in tensor.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CoreError::io(parent, e))?;
        }
        let mut f = std::fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
        f.write_all(&buf).map_err(|e| CoreError::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| CoreError::io(path, e))?;
        let bad = |detail: String| CoreError::BadCheckpoint { path: path.to_path_buf(), detail };
        let mut cur = 0usize;
        let take = |cur: &mut usize, n: usize| -> Result<&[u8]> {
            if *cur + n > bytes.len() {
                return Err(bad(format!("truncated at byte {cur}")));
            }
            let s = &bytes[*cur..*cur + n];
            *cur += n;
            Ok(s)
        };

        if take(&mut cur, 4)? != CHECKPOINT_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = u16::from_le_bytes(take(&mut cur, 2)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let meta_len = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
        let meta: serde_json::Value = serde_json::from_slice(take(&mut cur, meta_len)?)?;
        let n_tensors = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;

        let mut directory = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let name_len = u16::from_le_bytes(take(&mut cur, 2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut cur, name_len)?.to_vec())
                .map_err(|_| bad("tensor name not utf-8".into()))?;
            let rank = take(&mut cur, 1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize);
            }
            let offset = u64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap()) as usize;
            directory.push((name, shape, offset));
        }
        let blob_len = u64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap()) as usize;
        let blob_bytes = take(&mut cur, blob_len * 4)?;
        let blob: Vec<f32> = blob_bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if cur != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - cur)));
        }

        let mut tensors = Vec::with_capacity(n_tensors);
        for (name, shape, offset) in directory {
            let numel: usize = shape.iter().product();
            if offset + numel > blob.len() {
                return Err(bad(format!("tensor {name} overruns payload")));
            }
            let data = blob[offset..offset + numel].to_vec();
            tensors.push((
                name,
                Tensor::new(shape, data).map_err(|e| bad(format!("{e}")))?,
            ));
        }
        Ok(Checkpoint { meta, tensors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut ck = Checkpoint::new(json!({"kind": "cnn", "head": "S", "seed": 7}));
        ck.push("conv1.k", Tensor::new(vec![3, 3, 1, 2], (0..18).map(|i| i as f32 * 0.5).collect()).unwrap());
        ck.push("conv1.b", Tensor::new(vec![2], vec![0.25, -0.75]).unwrap());
        ck.save(&path).unwrap();

        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.meta_str("kind"), Some("cnn"));
        assert_eq!(back.tensors.len(), 2);
        assert_eq!(back.get("conv1.k").unwrap().shape(), &[3, 3, 1, 2]);
        assert_eq!(back.get("conv1.k").unwrap().data(), ck.get("conv1.k").unwrap().data());
        assert_eq!(back.get("conv1.b").unwrap().data(), &[0.25, -0.75]);
    }

    #[test]
    fn rejects_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(CoreError::BadCheckpoint { .. })));
    }
}
