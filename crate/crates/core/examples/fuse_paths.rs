//! Macro/Micro fusion on one fold: decompose raw 512-sample windows into
//! MUAP images, train the window (V1) and image (V3) transformers, freeze
//! them and train the fusion head on their concatenated class tokens.
//!
//! cargo run --release --example fuse_paths

use cthgr::eval::{make_folds, prepare_subject, run_job, ExperimentConfig};
use cthgr::decomp::{decompose_batch, DecompConfig};
use cthgr::ingest::synthesize_dataset;

fn main() -> cthgr::Result<()> {
    let cfg = ExperimentConfig::from_json(include_bytes!("../../../configs/synthetic_fused.json"))?;
    let cthgr::eval::DataSource::Synthetic { spec, .. } = &cfg.data else { unreachable!() };
    let subject = prepare_subject(&synthesize_dataset(spec)?, &cfg, true)?;
    let raw = subject.raw.as_ref().expect("raw windows");
    let sets = decompose_batch(raw, &DecompConfig { ..cfg.model.decomp })?;
    let units: usize = sets.iter().map(|(t, _)| t.len()).sum();
    println!("{units} motor units accepted over {} windows", sets.len());
    let first = &sets.iter().find(|(t, _)| !t.is_empty()).expect("a decomposed window").1;
    println!("aggregate MUAP image ({} × {}):", first.n_vertical, first.n_horizontal);
    for row in first.aggregate.chunks(first.n_horizontal) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:5.2}")).collect();
        println!("  {}", cells.join(" "));
    }

    let images: Vec<Vec<f64>> = sets.into_iter().map(|(_, im)| im.aggregate).collect();
    let fold = make_folds(&subject.envelope, &cfg.folds)?.remove(0);
    for arm in run_job(&cfg, &subject, Some(&images), &fold, 11)? {
        println!(
            "{:<6} {:>7} parameters  train {:6.2}%  test {:6.2}%",
            arm.arm, arm.parameter_count, arm.train_accuracy, arm.accuracy
        );
    }
    Ok(())
}
