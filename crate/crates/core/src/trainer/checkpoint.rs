//! Binary checkpoints: named little-endian tensors with a CRC32 trailer.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IGEO";
pub const CHECKPOINT_VERSION: u32 = 1;
const CONFIG_ENTRY: &str = "__config__";
const DTYPE_F32: u8 = 0;
const DTYPE_U8: u8 = 1;

fn put_entry(out: &mut Vec<u8>, name: &str, dtype: u8, dims: &[usize], payload: &[u8]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dtype);
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(payload);
}

pub fn encode_checkpoint(cfg: &TrainConfig, params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&((params.len() + 1) as u32).to_le_bytes());
    let json = cfg.canonical_json();
    put_entry(&mut out, CONFIG_ENTRY, DTYPE_U8, &[json.len()], json.as_bytes());
    for (name, t) in params.iter() {
        let payload: Vec<u8> = t.data().iter().flat_map(|&x| (x as f32).to_le_bytes()).collect();
        put_entry(&mut out, name, DTYPE_F32, t.shape(), &payload);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Corruption(format!(
                "checkpoint truncated at byte {} (needed {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(TrainConfig, ParamStore)> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    if bytes.len() < 12 {
        return Err(Error::Corruption("checkpoint truncated before trailer".into()));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Corruption("checkpoint checksum mismatch".into()));
    }
    let count = c.u32()?;
    let mut c = Cursor { bytes: body, pos: c.pos };
    let mut cfg = None;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::Corruption("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = c.u8()?;
        let rank = c.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(c.u64()? as usize);
        }
        let n: usize = dims.iter().product();
        match dtype {
            DTYPE_U8 if name == CONFIG_ENTRY => {
                let raw = c.take(n)?;
                cfg = Some(serde_json::from_slice::<TrainConfig>(raw)?);
            }
            DTYPE_F32 => {
                let raw = c.take(n.checked_mul(4).ok_or_else(|| Error::Corruption("tensor size overflow".into()))?)?;
                let data = raw
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                    .collect();
                params.insert(name, Tensor::new(dims, data)?);
            }
            other => {
                return Err(Error::Format(format!("tensor {name}: unknown dtype {other}")));
            }
        }
    }
    if c.pos != body.len() {
        return Err(Error::Corruption(format!(
            "{} trailing bytes after the last tensor",
            body.len() - c.pos
        )));
    }
    let cfg = cfg.ok_or_else(|| Error::Format("checkpoint has no configuration entry".into()))?;
    Ok((cfg, params))
}

/// Write atomically: a sibling temporary file is renamed over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let file = path
        .file_name()
        .ok_or_else(|| Error::Input(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", file.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    write_atomic(path, &encode_checkpoint(&model.cfg, &model.params))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path)?;
    let (cfg, params) = decode_checkpoint(&bytes)?;
    Model::from_params(cfg, params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (TrainConfig, ParamStore) {
        let mut p = ParamStore::new();
        p.insert("x.w", Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1));
        p.insert("x.b", Tensor::from_fn(&[3], |i| -(i as f64)));
        (TrainConfig::desk(), p)
    }

    #[test]
    fn roundtrip_rounds_to_f32() {
        let (cfg, p) = small();
        let bytes = encode_checkpoint(&cfg, &p);
        let (c2, p2) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(c2, cfg);
        let mut expect = p.clone();
        expect.round_to_f32();
        assert_eq!(p2, expect);
    }

    #[test]
    fn every_truncation_is_corruption() {
        let (cfg, p) = small();
        let bytes = encode_checkpoint(&cfg, &p);
        for cut in 8..bytes.len() {
            match decode_checkpoint(&bytes[..cut]) {
                Err(Error::Corruption(_)) => {}
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let (cfg, p) = small();
        let mut bytes = encode_checkpoint(&cfg, &p);
        let n = bytes.len();
        bytes[n - 6] ^= 0x40;
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Corruption(_))));
    }

    #[test]
    fn version_mismatch_names_both() {
        let (cfg, p) = small();
        let mut bytes = encode_checkpoint(&cfg, &p);
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        match decode_checkpoint(&bytes) {
            Err(Error::Format(m)) => assert!(m.contains('7') && m.contains('1'), "{m}"),
            other => panic!("{other:?}"),
        }
    }
}
