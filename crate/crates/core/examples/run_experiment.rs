//! Run an experiment config end to end and print the fold table.
//!
//! ```text
//! cargo run --release --example run_experiment -- configs/synthetic_v1.json [out_dir]
//! ```

use std::path::PathBuf;

use cthgr::eval::{run_experiment, ExperimentConfig};

fn main() -> cthgr::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let path = PathBuf::from(args.next().unwrap_or_else(|| "configs/synthetic_v1.json".into()));
    let cfg = ExperimentConfig::from_json(&std::fs::read(&path)?)?;
    let out = args
        .next()
        .map(PathBuf::from)
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(&cfg.name));
    let run = run_experiment(&cfg, &out, true)?;
    for arm in &run.report.arms {
        println!("{} ({} parameters)", arm.name, arm.parameter_count);
        for f in &arm.folds {
            println!("  {:<8} {:6.2}%  ± {:.2}", f.name, f.mean_accuracy, f.std_over_subjects);
        }
        println!("  {:<8} {:6.2}%  ± {:.2}", "Average", arm.average.mean_accuracy, arm.average.std_over_subjects);
    }
    for c in &run.report.comparisons {
        match &c.result {
            Some(r) => println!("{} vs {}: p = {:.3e} ({})", c.a, c.b, r.p_value, r.annotation),
            None => println!("{} vs {}: {}", c.a, c.b, c.note.as_deref().unwrap_or("")),
        }
    }
    println!("artifacts in {}", run.output_dir.display());
    Ok(())
}
