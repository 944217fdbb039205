use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CTHG";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A parameter checkpoint: a JSON header describing the model and a flat
/// parameter vector in store order, stored as little-endian `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Value,
    pub params: Vec<f64>,
}

/// Layout: magic, u32 version, u32 header length, header JSON,
/// u64 parameter count, f32 parameters.
pub fn write_checkpoint(path: &Path, header: &Value, params: &[f64]) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    let mut buf = Vec::with_capacity(20 + json.len() + 4 * params.len());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for &p in params {
        buf.extend_from_slice(&(p as f32).to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let bad = |reason: &str| Error::format(path, reason);
    let take = |at: usize, n: usize| bytes.get(at..at + n).ok_or_else(|| bad("truncated checkpoint"));
    if take(0, 4)? != CHECKPOINT_MAGIC {
        return Err(bad("bad checkpoint magic"));
    }
    let version = u32::from_le_bytes(take(4, 4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let hlen = u32::from_le_bytes(take(8, 4)?.try_into().unwrap()) as usize;
    let header: Value = serde_json::from_slice(take(12, hlen)?)?;
    let at = 12 + hlen;
    let n = u64::from_le_bytes(take(at, 8)?.try_into().unwrap()) as usize;
    let blob = take(at + 8, n.checked_mul(4).ok_or_else(|| bad("parameter count overflow"))?)?;
    if bytes.len() != at + 8 + 4 * n {
        return Err(bad("trailing bytes after parameter blob"));
    }
    let params = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Checkpoint { header, params })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let header = serde_json::json!({"kind": "ct-hgr", "d": 4});
        write_checkpoint(&p, &header, &[0.5, -1.25, 3.0]).unwrap();
        let c = read_checkpoint(&p).unwrap();
        assert_eq!(c.header, header);
        assert_eq!(c.params, vec![0.5, -1.25, 3.0]);
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.pop();
        std::fs::write(&p, &bytes).unwrap();
        assert!(read_checkpoint(&p).is_err());
        bytes[0] = b'X';
        std::fs::write(&p, &bytes).unwrap();
        assert!(read_checkpoint(&p).is_err());
    }
}
