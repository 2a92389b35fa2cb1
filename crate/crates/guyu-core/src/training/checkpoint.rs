//! Bit-exact binary checkpoints.
//!
//! Layout: magic `GUYU`, version byte 1, u32-LE header length, UTF-8 JSON
//! header {config, vocab_hash, step, val_loss, lambda}, then per parameter:
//! u16-LE name length, name, u8 rank, rank u32-LE dims, f32-LE data.
//! Writes go to a temp file and are renamed into place.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"GUYU";
const VERSION: u8 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab_hash: String,
    step: u64,
    val_loss: f64,
    #[serde(default)]
    lambda: f32,
}

/// Model configuration plus named parameter tensors, serialized bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub vocab_hash: String,
    pub step: u64,
    pub val_loss: f64,
    /// Context-loss weight the checkpoint was trained with.
    pub lambda: f32,
    params: Vec<(String, Tensor<f32>)>,
}

impl ModelCheckpoint {
    pub fn from_model(
        model: &Model<f32>,
        vocab_hash: &str,
        step: u64,
        val_loss: f64,
        lambda: f32,
    ) -> Self {
        Self {
            config: model.config().clone(),
            vocab_hash: vocab_hash.to_string(),
            step,
            val_loss,
            lambda,
            params: model
                .params()
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
        }
    }

    /// Rebuilds the model; every stored tensor must match a parameter of the
    /// config-built skeleton by name and shape.
    pub fn to_model(&self) -> Result<Model<f32>> {
        let mut model = Model::init(self.config.clone())?;
        let mut assigned = 0usize;
        for (name, tensor) in &self.params {
            let mut found = false;
            for p in model.params_mut().iter_mut() {
                if &p.name == name {
                    if p.value.shape() != tensor.shape() {
                        return Err(Error::Format(format!(
                            "parameter {} has shape {:?}, expected {:?}",
                            name,
                            tensor.shape(),
                            p.value.shape()
                        )));
                    }
                    p.value = tensor.clone();
                    found = true;
                    assigned += 1;
                    break;
                }
            }
            if !found {
                return Err(Error::Format(format!("unknown parameter {name}")));
            }
        }
        if assigned != model.params().len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} parameters, model needs {}",
                assigned,
                model.params().len()
            )));
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            vocab_hash: self.vocab_hash.clone(),
            step: self.step,
            val_loss: self.val_loss,
            lambda: self.lambda,
        };
        let header_json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
        out.extend_from_slice(&header_json);
        for (name, tensor) in &self.params {
            let name_bytes = name.as_bytes();
            if name_bytes.len() > u16::MAX as usize {
                return Err(Error::Format(format!("parameter name too long: {name}")));
            }
            if tensor.rank() > u8::MAX as usize {
                return Err(Error::Format(format!("parameter rank too large: {name}")));
            }
            out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
            out.extend_from_slice(name_bytes);
            out.push(tensor.rank() as u8);
            for &dim in tensor.shape() {
                out.extend_from_slice(&(dim as u32).to_le_bytes());
            }
            for &v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic; not a checkpoint file".into()));
        }
        let mut version = [0u8; 1];
        read_exact(&mut r, &mut version)?;
        if version[0] != VERSION {
            return Err(Error::Format(format!("unsupported version {}", version[0])));
        }
        let header_len = read_u32(&mut r)? as usize;
        let mut header_bytes = vec![0u8; header_len];
        read_exact(&mut r, &mut header_bytes)?;
        let header: Header = serde_json::from_slice(&header_bytes)?;

        let mut params = Vec::new();
        while !r.is_empty() {
            let name_len = read_u16(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let mut rank = [0u8; 1];
            read_exact(&mut r, &mut rank)?;
            let mut shape = Vec::with_capacity(rank[0] as usize);
            for _ in 0..rank[0] {
                shape.push(read_u32(&mut r)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                let mut b = [0u8; 4];
                read_exact(&mut r, &mut b)?;
                data.push(f32::from_le_bytes(b));
            }
            params.push((name, Tensor::new(&shape, data)?));
        }
        Ok(Self {
            config: header.config,
            vocab_hash: header.vocab_hash,
            step: header.step,
            val_loss: header.val_loss,
            lambda: header.lambda,
            params,
        })
    }

    /// Atomic save: temp file in the same directory, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension(format!("tmp.{}", std::process::id()));
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    if r.len() < buf.len() {
        return Err(Error::Format("truncated checkpoint".into()));
    }
    let (head, tail) = r.split_at(buf.len());
    buf.copy_from_slice(head);
    *r = tail;
    Ok(())
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u16(r: &mut &[u8]) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_model() -> Model<f32> {
        let cfg = ModelConfig {
            vocab_size: 9,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_positions: 12,
            dropout_rate: 0.1,
            seed: 21,
        };
        Model::init(cfg).unwrap()
    }

    #[test]
    fn roundtrip_is_bitwise_identical() {
        let model = toy_model();
        let ckpt = ModelCheckpoint::from_model(&model, "hash123", 42, 1.25, 0.5);
        let bytes = ckpt.to_bytes().unwrap();
        let back = ModelCheckpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let rebuilt = back.to_model().unwrap();
        for (a, b) in rebuilt.params().iter().zip(model.params().iter()) {
            assert_eq!(a.value.data(), b.value.data(), "{}", a.name);
        }
    }

    #[test]
    fn file_roundtrip_and_magic_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = ModelCheckpoint::from_model(&toy_model(), "h", 7, 2.5, 0.0);
        ckpt.save(&path).unwrap();
        let back = ModelCheckpoint::load(&path).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.lambda, 0.0);
        assert_eq!(back.step, 7);

        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(
            ModelCheckpoint::load(&path),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let ckpt = ModelCheckpoint::from_model(&toy_model(), "h", 1, 3.0, 1.0);
        let bytes = ckpt.to_bytes().unwrap();
        for cut in [3, 5, 8, 40, bytes.len() - 2] {
            let err = ModelCheckpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(
                matches!(err, Error::Format(_) | Error::Json(_)),
                "cut {cut}"
            );
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let model = toy_model();
        let mut ckpt = ModelCheckpoint::from_model(&model, "h", 1, 3.0, 1.0);
        ckpt.params[0].1 = Tensor::zeros(&[2, 2]);
        assert!(matches!(ckpt.to_model(), Err(Error::Format(_))));
        let mut missing = ModelCheckpoint::from_model(&model, "h", 1, 3.0, 1.0);
        missing.params.pop();
        assert!(matches!(missing.to_model(), Err(Error::Format(_))));
    }
}
