use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::model::{Model, ModelMeta};
use super::params::ParamSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RTVCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const TRAILER: usize = 32;

/// Serialized model: magic, version, JSON metadata header, named arrays with
/// their trainable flag, shape and little-endian `f64` data, then the
/// SHA-256 of everything before it.
pub fn checkpoint_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let header = serde_json::to_vec(model.meta())?;
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, p) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(p.trainable as u8);
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for d in p.value.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        out.extend_from_slice(&p.value.to_le_bytes());
    }
    let hash = Sha256::digest(&out);
    out.extend_from_slice(&hash);
    Ok(out)
}

/// Hex SHA-256 of the serialized model.
pub fn checkpoint_digest(model: &Model) -> Result<String> {
    Ok(hex::encode(Sha256::digest(checkpoint_bytes(model)?)))
}

/// Writes a checkpoint and returns its digest.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<String> {
    let bytes = checkpoint_bytes(model)?;
    fs::write(path, &bytes)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    parse_checkpoint(&fs::read(path)?)
}

fn corrupt<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::CorruptCheckpoint(msg.into()))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return corrupt("unexpected end of payload");
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 4 + TRAILER {
        return corrupt("file too short");
    }
    let (payload, trailer) = bytes.split_at(bytes.len() - TRAILER);
    if Sha256::digest(payload).as_slice() != trailer {
        return corrupt("payload hash mismatch");
    }
    let mut r = Reader { buf: payload, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return corrupt("bad magic");
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return corrupt(format!("unsupported version {version}"));
    }
    let hlen = r.u32()? as usize;
    let meta: ModelMeta =
        serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::CorruptCheckpoint(format!("header: {e}")))?;
    let count = r.u32()?;
    let mut params = ParamSet::default();
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::CorruptCheckpoint("array name is not UTF-8".into()))?
            .to_string();
        let trainable = match r.take(1)?[0] {
            0 => false,
            1 => true,
            f => return corrupt(format!("bad trainable flag {f}")),
        };
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| Ok(r.u64()? as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let Some(n) = n.filter(|n| n.checked_mul(8).is_some()) else {
            return corrupt("array size overflows");
        };
        let data = r
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.insert(name, Tensor::new(shape, data)?, trainable);
    }
    if r.pos != payload.len() {
        return corrupt("trailing bytes after arrays");
    }
    Model::from_parts(meta, params).map_err(|e| Error::CorruptCheckpoint(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::model::{ArchConfig, Stage};
    use crate::synthgen::split_classes;

    fn model() -> Model {
        let arch = ArchConfig {
            image_side: 16,
            mixer_dim: 4,
            proj_dim: 3,
            ..ArchConfig::default()
        };
        Model::init_base(split_classes(4, 1, 0).unwrap(), arch, 1, 2).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = model();
        m.set_stage(Stage::Pretrained);
        m.params.set_trainable_layers(&["cls_b"]);
        let p = dir.path().join("m.ckpt");
        let d = save_checkpoint(&m, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.meta(), m.meta());
        assert_eq!(checkpoint_digest(&back).unwrap(), d);
    }

    #[test]
    fn truncation_and_tampering_are_detected() {
        let bytes = checkpoint_bytes(&model()).unwrap();
        for cut in [0, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(parse_checkpoint(&bytes[..cut]), Err(Error::CorruptCheckpoint(_))));
        }
        let mut t = bytes.clone();
        t[40] ^= 1;
        assert!(matches!(parse_checkpoint(&t), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn version_mismatch_is_corrupt() {
        let mut bytes = checkpoint_bytes(&model()).unwrap();
        bytes[8] = 9;
        let n = bytes.len() - TRAILER;
        let h = Sha256::digest(&bytes[..n]);
        bytes[n..].copy_from_slice(&h);
        let e = parse_checkpoint(&bytes).unwrap_err();
        assert!(e.to_string().contains("version"), "{e}");
    }
}
