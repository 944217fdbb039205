//! Canonical recording files.
//!
//! A recording is stored as two files sharing a stem:
//!
//! * `<subject>.emg`: magic `EMG1`, `u32` sample count `T`, `u32` channel
//!   count `C`, then `T·C` little-endian `f32` values, row-major.
//! * `<subject>.json`: annotations, grid layout and the SHA-256 of the
//!   `.emg` file.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{GridLayout, Recording};
use crate::error::{Error, Result};

pub const EMG_MAGIC: &[u8; 4] = b"EMG1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    format_version: u32,
    subject_id: String,
    n_samples: usize,
    n_channels: usize,
    layout: GridLayout,
    checksum: String,
    gesture_label: Vec<u8>,
    repetition: Vec<u8>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn sidecar_path(emg: &Path) -> PathBuf {
    emg.with_extension("json")
}

fn encode_emg(rec: &Recording) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(12 + rec.signal().len() * 4);
    bytes.extend_from_slice(EMG_MAGIC);
    bytes.extend_from_slice(&(rec.n_samples() as u32).to_le_bytes());
    bytes.extend_from_slice(&(rec.n_channels() as u32).to_le_bytes());
    for &v in rec.signal() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    bytes
}

/// Write `<stem>.emg` and its `<stem>.json` sidecar.
pub fn write_recording(rec: &Recording, emg_path: &Path) -> Result<()> {
    let bytes = encode_emg(rec);
    let checksum = hex::encode(Sha256::digest(&bytes));
    fs::write(emg_path, &bytes)?;
    let sidecar = Sidecar {
        format_version: FORMAT_VERSION,
        subject_id: rec.subject_id.clone(),
        n_samples: rec.n_samples(),
        n_channels: rec.n_channels(),
        layout: rec.layout,
        checksum,
        gesture_label: rec.gesture_label().to_vec(),
        repetition: rec.repetition().to_vec(),
    };
    fs::write(sidecar_path(emg_path), serde_json::to_vec(&sidecar)?)?;
    Ok(())
}

/// Read and validate a canonical recording from its `.emg` path.
pub fn load_recording(emg_path: &Path) -> Result<Recording> {
    let bytes = fs::read(emg_path)?;
    if bytes.len() < 12 || &bytes[..4] != EMG_MAGIC {
        return Err(Error::format(emg_path, "missing EMG1 header"));
    }
    let t = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let c = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = t
        .checked_mul(c)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format(emg_path, "header dimensions overflow"))?;
    if bytes.len() - 12 != expected {
        return Err(Error::format(
            emg_path,
            format!("header declares {t}×{c} samples but payload holds {} bytes", bytes.len() - 12),
        ));
    }
    let side_path = sidecar_path(emg_path);
    let sidecar: Sidecar = serde_json::from_slice(&fs::read(&side_path)?)
        .map_err(|e| Error::format(&side_path, e.to_string()))?;
    if sidecar.format_version != FORMAT_VERSION {
        return Err(Error::format(
            &side_path,
            format!("unsupported format version {}", sidecar.format_version),
        ));
    }
    let found = hex::encode(Sha256::digest(&bytes));
    if found != sidecar.checksum {
        return Err(Error::Checksum {
            path: emg_path.to_path_buf(),
            expected: sidecar.checksum,
            found,
        });
    }
    if sidecar.n_samples != t || sidecar.n_channels != c {
        return Err(Error::format(
            &side_path,
            format!(
                "sidecar declares {}×{}, binary holds {t}×{c}",
                sidecar.n_samples, sidecar.n_channels
            ),
        ));
    }
    let signal = bytes[12..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Recording::new(
        sidecar.subject_id,
        sidecar.layout,
        c,
        signal,
        sidecar.gesture_label,
        sidecar.repetition,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub subject_id: String,
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub n_channels: usize,
    pub duration_s: f64,
    pub checksum: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub subjects: Vec<ManifestEntry>,
}

/// Write recordings into `dir` and a `manifest.json` listing them.
pub fn write_manifest(dir: &Path, recordings: &[Recording]) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut subjects = Vec::with_capacity(recordings.len());
    for rec in recordings {
        let rel = PathBuf::from(format!("{}.emg", rec.subject_id));
        let path = dir.join(&rel);
        write_recording(rec, &path)?;
        subjects.push(ManifestEntry {
            subject_id: rec.subject_id.clone(),
            path: rel,
            n_channels: rec.n_channels(),
            duration_s: rec.n_samples() as f64 / rec.layout.sampling_rate_hz,
            checksum: sha256_file(&path)?,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        subjects,
    };
    let out = dir.join("manifest.json");
    fs::write(&out, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let m: Manifest =
        serde_json::from_slice(&fs::read(path)?).map_err(|e| Error::format(path, e.to_string()))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::format(path, format!("unsupported manifest version {}", m.format_version)));
    }
    Ok(m)
}

/// Check that every listed file exists and matches its checksum. Returns
/// the manifest with absolute paths.
pub fn validate_manifest(path: &Path) -> Result<Manifest> {
    let mut m = read_manifest(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    for entry in &mut m.subjects {
        let file = base.join(&entry.path);
        if !file.exists() {
            return Err(Error::format(&file, "listed in manifest but missing"));
        }
        let found = sha256_file(&file)?;
        if found != entry.checksum {
            return Err(Error::Checksum {
                path: file,
                expected: entry.checksum.clone(),
                found,
            });
        }
        entry.path = file;
    }
    Ok(m)
}

fn parse_row(line: &str) -> Option<Vec<f64>> {
    line.split(',').map(|f| f.trim().parse::<f64>().ok()).collect()
}

fn annotation(value: f64, what: &str, path: &Path) -> Result<u8> {
    if value.fract() != 0.0 || !(0.0..=255.0).contains(&value) {
        return Err(Error::format(path, format!("{what} {value} is not a small integer")));
    }
    Ok(value as u8)
}

/// Convert a CSV dump whose rows hold `C` signal columns followed by the
/// gesture label and repetition. A non-numeric first line is treated as a
/// header.
pub fn convert_csv(csv: &Path, out_emg: &Path, subject_id: &str, layout: GridLayout) -> Result<Recording> {
    let reader = BufReader::new(fs::File::open(csv)?);
    let c = layout.channels();
    let (mut signal, mut labels, mut reps) = (Vec::new(), Vec::new(), Vec::new());
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let Some(row) = parse_row(&line) else {
            if i == 0 {
                continue;
            }
            return Err(Error::format(csv, format!("line {}: non-numeric field", i + 1)));
        };
        if row.len() != c + 2 {
            return Err(Error::format(
                csv,
                format!("line {}: expected {} columns, found {}", i + 1, c + 2, row.len()),
            ));
        }
        signal.extend_from_slice(&row[..c]);
        labels.push(annotation(row[c], "label", csv)?);
        reps.push(annotation(row[c + 1], "repetition", csv)?);
    }
    let rec = Recording::new(subject_id, layout, c, signal, labels, reps)?;
    write_recording(&rec, out_emg)?;
    Ok(rec)
}

/// Convert a headerless little-endian `f32` matrix `[T × C]` plus a
/// two-column (label, repetition) annotation CSV.
pub fn convert_raw_f32(
    raw: &Path,
    annotations: &Path,
    out_emg: &Path,
    subject_id: &str,
    layout: GridLayout,
) -> Result<Recording> {
    let bytes = fs::read(raw)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::format(raw, "length is not a multiple of 4 bytes"));
    }
    let signal: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    let (mut labels, mut reps) = (Vec::new(), Vec::new());
    for (i, line) in BufReader::new(fs::File::open(annotations)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_row(&line) {
            Some(row) if row.len() == 2 => {
                labels.push(annotation(row[0], "label", annotations)?);
                reps.push(annotation(row[1], "repetition", annotations)?);
            }
            None if i == 0 => continue,
            _ => {
                return Err(Error::format(
                    annotations,
                    format!("line {}: expected `label,repetition`", i + 1),
                ))
            }
        }
    }
    let rec = Recording::new(subject_id, layout, layout.channels(), signal, labels, reps)?;
    write_recording(&rec, out_emg)?;
    Ok(rec)
}
