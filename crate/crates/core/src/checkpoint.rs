//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "MCFACKPT"
//! version  u32
//! config   u32 length + UTF-8 TOML of the ModelConfig
//! count    u32
//! count x  { u32 name length, name, u32 rank, rank x u64 dims, f64 values }
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a save/load round trip is
//! exact.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::config::{ConfigError, ModelConfig};
use crate::model::{McfaModel, ModelError};

pub const MAGIC: &[u8; 8] = b"MCFACKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}, this build reads {VERSION}")]
    Version(u32),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("checkpoint config: {0}")]
    Config(#[from] ConfigError),
    #[error("checkpoint does not match its config: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
}

pub fn to_bytes(model: &McfaModel) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + model.num_params() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = model.config.to_toml();
    put_u32(&mut out, cfg.len());
    out.extend_from_slice(cfg.as_bytes());
    let named = model.params.named();
    put_u32(&mut out, named.len());
    for (name, t) in named {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("length fits in u32").to_le_bytes());
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(CheckpointError::Truncated(self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        let at = self.pos;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| CheckpointError::Mismatch(format!("invalid UTF-8 at byte {at}")))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<McfaModel, CheckpointError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8).map_err(|_| CheckpointError::Magic)? != MAGIC {
        return Err(CheckpointError::Magic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let config = ModelConfig::from_toml(&r.string()?)?;
    // Build the structure, then overwrite every tensor from the file.
    let mut model = McfaModel::new(config, 0)?;
    let expected = model.param_names();
    let count = r.u32()? as usize;
    if count != expected.len() {
        return Err(CheckpointError::Mismatch(format!(
            "{count} tensors, config implies {}",
            expected.len()
        )));
    }
    for (want, t) in expected.iter().zip(model.tensors_mut()) {
        let name = r.string()?;
        if &name != want {
            return Err(CheckpointError::Mismatch(format!(
                "found `{name}` where `{want}` belongs"
            )));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        if shape != t.shape() {
            return Err(CheckpointError::Mismatch(format!(
                "`{name}` has shape {shape:?}, expected {:?}",
                t.shape()
            )));
        }
        let raw = r.take(t.len() * 8)?;
        for (dst, chunk) in t.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    if r.pos != buf.len() {
        return Err(CheckpointError::Mismatch(format!(
            "{} trailing bytes",
            buf.len() - r.pos
        )));
    }
    Ok(model)
}

pub fn save(model: &McfaModel, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, to_bytes(model)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: &Path) -> Result<McfaModel, CheckpointError> {
    let buf = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_bytes(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> McfaModel {
        let cfg = ModelConfig {
            channel_scale: 1.0 / 16.0,
            num_attributes: 3,
            ..ModelConfig::default().with_side(32)
        };
        McfaModel::new(cfg, 11).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = tiny();
        // awkward values survive too
        m.tensors_mut()[0].data_mut()[0] = -0.0;
        m.tensors_mut()[0].data_mut()[1] = f64::MIN_POSITIVE / 3.0;
        let bytes = to_bytes(&m);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.config, m.config);
        for (a, b) in m.tensors().iter().zip(back.tensors()) {
            assert_eq!(a.shape(), b.shape());
            let ab: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn rejects_damage() {
        let bytes = to_bytes(&tiny());
        assert!(matches!(from_bytes(b"nope"), Err(CheckpointError::Magic)));
        let mut v = bytes.clone();
        v[8] = 9;
        assert!(matches!(from_bytes(&v), Err(CheckpointError::Version(9))));
        assert!(matches!(
            from_bytes(&bytes[..bytes.len() - 3]),
            Err(CheckpointError::Truncated(_))
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(from_bytes(&extra), Err(CheckpointError::Mismatch(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.mcfa");
        let m = tiny();
        save(&m, &p).unwrap();
        assert_eq!(load(&p).unwrap(), m);
        assert!(matches!(
            load(&dir.path().join("missing")),
            Err(CheckpointError::Io { .. })
        ));
    }
}
