//! Fixed-header binary arrays shared by the window-batch and MUAP-image
//! files: a 4-byte magic, one little-endian `u32` per dimension, then the
//! values as little-endian `f32`, row-major.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub fn encode(magic: &[u8; 4], dims: &[usize], data: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * dims.len() + 4 * data.len());
    out.extend_from_slice(magic);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn write(path: &Path, magic: &[u8; 4], dims: &[usize], data: &[f64]) -> Result<()> {
    debug_assert_eq!(dims.iter().product::<usize>(), data.len());
    fs::write(path, encode(magic, dims, data))?;
    Ok(())
}

/// Read an array with `rank` header dimensions.
pub fn read(path: &Path, magic: &[u8; 4], rank: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    let bytes = fs::read(path)?;
    let header = 4 + 4 * rank;
    if bytes.len() < header || &bytes[..4] != magic {
        return Err(Error::format(
            path,
            format!("expected {} header", String::from_utf8_lossy(magic)),
        ));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
        .collect();
    let n: usize = dims.iter().product();
    if bytes.len() - header != 4 * n {
        return Err(Error::format(
            path,
            format!("header declares {dims:?} but payload holds {} bytes", bytes.len() - header),
        ));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Ok((dims, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bin");
        write(&p, b"TEST", &[2, 3], &[1., 2., 3., 4., 5., 6.5]).unwrap();
        let (dims, data) = read(&p, b"TEST", 2).unwrap();
        assert_eq!(dims, vec![2, 3]);
        assert_eq!(data[5], 6.5);
        assert!(read(&p, b"NOPE", 2).is_err());
        assert!(read(&p, b"TEST", 3).is_err());
    }
}
