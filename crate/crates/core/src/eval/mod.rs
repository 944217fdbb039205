//! Evaluation protocol: folds, per-subject training jobs, statistics and
//! reports.

mod folds;
mod protocol;
mod report;
mod stats;

pub use folds::{make_folds, Fold, FoldPlan};
pub use protocol::{
    apply_channel_mode, class_indices, load_subjects, micro_train_config, normalise, prepare_subject, run_job, run_jobs,
    run_pool, worker_count, ArmOutcome, DataSource, ExperimentConfig, JobOutcome, ModelKind, ModelOverrides, ModelSpec,
    PreparedSubject, CONFIG_VERSION, WORKERS_ENV,
};
pub use report::{
    box_csv, build_report, folds_csv, matrix_csv, subjects_csv, timing, write_report, ArmReport, Audit, AverageRow,
    Comparison, FoldResult, FoldRow, JobTiming, RunManifest, RunReport, SubjectResult, Timing, REPORT_SCHEMA,
};
pub use stats::{
    aggregate_confusion, annotation, confusion_matrix, iqr_stats, mean_std, quantile, wilcoxon_signed_rank, BoxStats,
    Confusion, WilcoxonResult, EXACT_MAX_N,
};

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::error::Result;

/// Outcome of [`run_experiment`].
#[derive(Clone, Debug)]
pub struct ExperimentRun {
    pub report: RunReport,
    pub output_dir: PathBuf,
    /// True when an existing report with the same config hash was reused.
    pub reused: bool,
}

/// Run a full experiment and write its artifacts to `output_dir`. If that
/// directory already holds a report for the same config hash, the report
/// is returned unchanged unless `force` is set.
pub fn run_experiment(cfg: &ExperimentConfig, output_dir: &Path, force: bool) -> Result<ExperimentRun> {
    cfg.validate()?;
    let existing = output_dir.join("report.json");
    if !force && existing.exists() {
        if let Ok(r) = RunReport::from_json(&std::fs::read(&existing)?) {
            if r.config_hash == cfg.hash() {
                log::info!("{} already holds this configuration; skipping", output_dir.display());
                return Ok(ExperimentRun {
                    report: r,
                    output_dir: output_dir.to_path_buf(),
                    reused: true,
                });
            }
        }
    }
    let t0 = Instant::now();
    let recordings = load_subjects(&cfg.data)?;
    let (ids, jobs) = run_jobs(cfg, &recordings, worker_count())?;
    let report = build_report(cfg, &ids, &jobs)?;
    write_report(output_dir, &report, &timing(&ids, &jobs, t0.elapsed().as_secs_f64()))?;
    Ok(ExperimentRun {
        report,
        output_dir: output_dir.to_path_buf(),
        reused: false,
    })
}
