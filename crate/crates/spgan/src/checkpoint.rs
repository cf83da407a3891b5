//! Checkpoint container: magic "SPG1", version, a JSON metadata blob, then
//! named flat f32 arrays with shapes. All integers and floats little-endian.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SPG1";
pub const VERSION: u32 = 1;

/// Everything a checkpoint knows beyond the raw arrays.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    /// Canonical TOML of the run configuration (self-contained restore).
    pub run_config_toml: String,
    /// Digest of that canonical form.
    pub config_digest: u64,
    pub seed: u64,
    pub proj_seed: u64,
    pub step: u64,
    pub samples_shown: u64,
    pub adam_g_step: u64,
    pub adam_d_step: u64,
    pub last_loss_d: f32,
    pub last_loss_g: f32,
    /// Exponential-average generator weights present under "ema.".
    pub has_ema: bool,
}

pub fn write_checkpoint(
    path: &Path,
    meta: &CheckpointMeta,
    arrays: &[(String, &Tensor)],
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let meta_json = serde_json::to_vec(meta)
        .map_err(|e| Error::format(format!("checkpoint meta serialization: {e}")))?;
    buf.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta_json);
    buf.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, tensor) in arrays {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(Error::format(format!("array name too long: {name}")));
        }
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    file.write_all(&buf).map_err(|e| Error::io(path.to_path_buf(), e))?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(format!(
                "checkpoint truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointMeta, Vec<(String, Tensor)>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.to_path_buf(), e))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };

    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(Error::format(format!(
            "bad checkpoint magic {:02x?} (expected {:02x?})",
            magic, MAGIC
        )));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {version} (this build reads {VERSION})"
        )));
    }
    let meta_len = cur.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(cur.take(meta_len)?)
        .map_err(|e| Error::format(format!("checkpoint meta parse: {e}")))?;

    let n_arrays = cur.u32()? as usize;
    let mut arrays = Vec::with_capacity(n_arrays);
    for _ in 0..n_arrays {
        let name_len = cur.u16()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|e| Error::format(format!("array name not utf-8: {e}")))?;
        let ndim = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        arrays.push((name, Tensor::new(shape, data)?));
    }
    Ok((meta, arrays))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo_meta() -> CheckpointMeta {
        CheckpointMeta {
            run_config_toml: "x = 1".to_string(),
            config_digest: 42,
            seed: 7,
            proj_seed: 9,
            step: 100,
            samples_shown: 1600,
            adam_g_step: 100,
            adam_d_step: 100,
            last_loss_d: 5.5,
            last_loss_g: 2.75,
            has_ema: false,
        }
    }

    #[test]
    fn round_trip_preserves_everything_and_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.spg1");
        let p2 = dir.path().join("b.spg1");
        let t1 = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 3.25, -0.125, 9.0]).unwrap();
        let t2 = Tensor::new(vec![4], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let arrays = vec![("gen.w".to_string(), &t1), ("disc.b".to_string(), &t2)];
        write_checkpoint(&p1, &demo_meta(), &arrays).unwrap();

        let (meta, loaded) = read_checkpoint(&p1).unwrap();
        assert_eq!(meta, demo_meta());
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].0, "gen.w");
        assert_eq!(loaded[0].1, t1);
        assert_eq!(loaded[1].1, t2);

        // save -> load -> save must produce identical bytes
        let refs: Vec<(String, &Tensor)> =
            loaded.iter().map(|(n, t)| (n.clone(), t)).collect();
        write_checkpoint(&p2, &meta, &refs).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn bad_magic_and_version_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.spg1");
        std::fs::write(&p, b"NOPE....").unwrap();
        assert!(matches!(read_checkpoint(&p), Err(Error::Format(_))));

        let p2 = dir.path().join("ver.spg1");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&99u32.to_le_bytes());
        std::fs::write(&p2, bytes).unwrap();
        let err = read_checkpoint(&p2).unwrap_err();
        assert!(err.to_string().contains("version 99"), "{err}");
    }

    #[test]
    fn truncation_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.spg1");
        let t = Tensor::ones(&[8]);
        write_checkpoint(&p, &demo_meta(), &[("w".to_string(), &t)]).unwrap();
        let full = std::fs::read(&p).unwrap();
        std::fs::write(&p, &full[..full.len() - 5]).unwrap();
        assert!(matches!(read_checkpoint(&p), Err(Error::Format(_))));
    }
}
