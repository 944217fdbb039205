//! Generate seeded synthetic subjects, store them in the canonical format
//! with a manifest, validate the checksums and reload one recording.
//!
//! cargo run --release --example synthesize_dataset -- [out_dir]

use std::path::PathBuf;

use cthgr::ingest::{load_recording, synthesize_dataset, validate_manifest, write_manifest, SynthSpec};

fn main() -> cthgr::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "runs/synthetic-data".into()));
    let recs = (0..3)
        .map(|i| {
            synthesize_dataset(&SynthSpec {
                subject_id: format!("s{}", i + 1),
                seed: 7 + i,
                ..SynthSpec::default()
            })
        })
        .collect::<cthgr::Result<Vec<_>>>()?;
    let manifest = write_manifest(&out, &recs)?;
    let m = validate_manifest(&manifest)?;
    for e in &m.subjects {
        println!("{:<4} {} channels  {:.2} s  sha256 {}…", e.subject_id, e.n_channels, e.duration_s, &e.checksum[..12]);
    }
    let back = load_recording(&out.join(&m.subjects[0].path))?;
    // Samples are stored as f32.
    let err = back.signal().iter().zip(recs[0].signal()).map(|(a, b)| (a - b).abs() / b.abs().max(1e-12)).fold(0.0, f64::max);
    println!("max relative round-trip error {err:.1e}");
    let active = back.gesture_label().iter().filter(|&&l| l != 0).count();
    println!("reloaded {}: {} samples, {active} labelled active", back.subject_id, back.n_samples());
    Ok(())
}
