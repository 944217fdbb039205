//! Merging fold outcomes into the run report, and its JSON/CSV exports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::protocol::{ExperimentConfig, JobOutcome};
use super::stats::{aggregate_confusion, iqr_stats, mean_std, wilcoxon_signed_rank, BoxStats, Confusion, WilcoxonResult};

pub const REPORT_SCHEMA: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub name: String,
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectResult {
    pub subject_id: String,
    pub folds: Vec<FoldResult>,
    pub mean_accuracy: f64,
}

/// One fold across subjects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldRow {
    pub name: String,
    pub mean_accuracy: f64,
    pub std_over_subjects: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AverageRow {
    pub mean_accuracy: f64,
    /// STD of the per-subject mean accuracies.
    pub std_over_subjects: f64,
    /// STD over every subject × fold accuracy.
    pub std_over_subject_folds: f64,
}

/// Results of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub name: String,
    pub parameter_count: usize,
    pub subjects: Vec<SubjectResult>,
    pub folds: Vec<FoldRow>,
    pub average: AverageRow,
    /// Box-plot statistics of the per-subject mean accuracies.
    pub box_stats: BoxStats,
    pub confusion: Confusion,
    /// Positional-embedding cosine similarities of the first subject's
    /// first-fold model, for transformer arms.
    pub positional_cosine: Option<Vec<Vec<f64>>>,
}

/// Paired Wilcoxon test over subject × fold accuracies of two arms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub result: Option<WilcoxonResult>,
    pub note: Option<String>,
}

/// Evidence that no normalisation constant saw test data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Audit {
    /// Every fitted statistic and the windows it was fitted on.
    pub fitted_statistics: Vec<String>,
    /// Windows shared between a fold's training and test sets, summed.
    pub train_test_overlap: usize,
    pub train_only: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub package_version: String,
    pub config: ExperimentConfig,
    pub audit: Audit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub arms: Vec<ArmReport>,
    pub comparisons: Vec<Comparison>,
    pub manifest: RunManifest,
}

/// Wall-clock timings, kept apart from the report so that the report is
/// reproducible byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub total_seconds: f64,
    pub jobs: Vec<JobTiming>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobTiming {
    pub subject_id: String,
    pub fold: String,
    pub seconds: f64,
}

impl RunReport {
    pub fn arm(&self, name: &str) -> Option<&ArmReport> {
        self.arms.iter().find(|a| a.name == name)
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec_pretty(self)?)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        Ok(serde_json::from_slice(bytes)?)
    }
}

fn fitted_statistics(cfg: &ExperimentConfig) -> Vec<String> {
    use super::protocol::ModelKind;
    let mut v = vec!["channel max |x| for μ-law scaling: training windows of each fold".to_string()];
    match cfg.model.kind {
        ModelKind::Svm => v.push("feature mean and STD: training windows of each fold".into()),
        ModelKind::Fused => v.push("MUAP image scale: training windows of each fold".into()),
        _ => {}
    }
    v
}

fn arm_report(name: &str, subject_ids: &[String], jobs: &[JobOutcome]) -> Result<ArmReport> {
    let pick = |j: &JobOutcome| j.arms.iter().find(|a| a.arm == name).cloned();
    let mut subjects = Vec::with_capacity(subject_ids.len());
    let mut confusions = Vec::new();
    let mut all = Vec::new();
    let mut parameter_count = 0;
    let mut positional_cosine = None;
    for (s, id) in subject_ids.iter().enumerate() {
        let mut folds = Vec::new();
        for j in jobs.iter().filter(|j| j.subject == s) {
            let a = pick(j).ok_or_else(|| Error::Data(format!("arm {name} missing from {} {}", id, j.fold)))?;
            if positional_cosine.is_none() {
                positional_cosine = a.positional_cosine.clone();
            }
            parameter_count = a.parameter_count;
            confusions.push(a.confusion);
            all.push(a.accuracy);
            folds.push(FoldResult {
                name: j.fold.clone(),
                accuracy: a.accuracy,
                train_accuracy: a.train_accuracy,
                n_train: j.n_train,
                n_test: j.n_test,
            });
        }
        let mean_accuracy = mean_std(&folds.iter().map(|f| f.accuracy).collect::<Vec<_>>()).0;
        subjects.push(SubjectResult {
            subject_id: id.clone(),
            folds,
            mean_accuracy,
        });
    }
    let names: Vec<String> = subjects.first().map(|s| s.folds.iter().map(|f| f.name.clone()).collect()).unwrap_or_default();
    let folds = names
        .iter()
        .map(|n| {
            let accs: Vec<f64> = subjects
                .iter()
                .filter_map(|s| s.folds.iter().find(|f| &f.name == n).map(|f| f.accuracy))
                .collect();
            let (mean_accuracy, std_over_subjects) = mean_std(&accs);
            FoldRow {
                name: n.clone(),
                mean_accuracy,
                std_over_subjects,
            }
        })
        .collect();
    let means: Vec<f64> = subjects.iter().map(|s| s.mean_accuracy).collect();
    let (mean_accuracy, std_over_subjects) = mean_std(&means);
    Ok(ArmReport {
        name: name.into(),
        parameter_count,
        folds,
        average: AverageRow {
            mean_accuracy,
            std_over_subjects,
            std_over_subject_folds: mean_std(&all).1,
        },
        box_stats: iqr_stats(&means)?,
        confusion: aggregate_confusion(&confusions)?,
        positional_cosine,
        subjects,
    })
}

fn compare(a: &ArmReport, b: &ArmReport) -> Comparison {
    let flat = |r: &ArmReport| -> Vec<f64> { r.subjects.iter().flat_map(|s| s.folds.iter().map(|f| f.accuracy)).collect() };
    let (result, note) = match wilcoxon_signed_rank(&flat(a), &flat(b)) {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e.to_string())),
    };
    Comparison {
        a: a.name.clone(),
        b: b.name.clone(),
        result,
        note,
    }
}

/// Merge job outcomes (in subject, fold order) into a report.
pub fn build_report(cfg: &ExperimentConfig, subject_ids: &[String], jobs: &[JobOutcome]) -> Result<RunReport> {
    let first = jobs.first().ok_or_else(|| Error::Data("no jobs ran".into()))?;
    let arms: Vec<ArmReport> = first
        .arms
        .iter()
        .map(|a| arm_report(&a.arm, subject_ids, jobs))
        .collect::<Result<_>>()?;
    let comparisons = match arms.iter().position(|a| a.name == "fused") {
        Some(f) => arms.iter().filter(|a| a.name != "fused").map(|o| compare(&arms[f], o)).collect(),
        None => Vec::new(),
    };
    let overlap: usize = jobs.iter().map(|j| j.overlap).sum();
    Ok(RunReport {
        schema_version: REPORT_SCHEMA,
        config_hash: cfg.hash(),
        arms,
        comparisons,
        manifest: RunManifest {
            package_version: env!("CARGO_PKG_VERSION").into(),
            config: cfg.resolved(),
            audit: Audit {
                fitted_statistics: fitted_statistics(cfg),
                train_test_overlap: overlap,
                train_only: overlap == 0,
            },
        },
    })
}

pub fn timing(subject_ids: &[String], jobs: &[JobOutcome], total_seconds: f64) -> Timing {
    Timing {
        total_seconds,
        jobs: jobs
            .iter()
            .map(|j| JobTiming {
                subject_id: subject_ids[j.subject].clone(),
                fold: j.fold.clone(),
                seconds: j.seconds,
            })
            .collect(),
    }
}

pub fn folds_csv(arm: &ArmReport) -> String {
    let mut s = String::from("fold,mean_accuracy,std_over_subjects\n");
    for f in &arm.folds {
        let _ = writeln!(s, "{},{},{}", f.name, f.mean_accuracy, f.std_over_subjects);
    }
    let a = &arm.average;
    let _ = writeln!(s, "Average,{},{}", a.mean_accuracy, a.std_over_subjects);
    s
}

pub fn subjects_csv(arm: &ArmReport) -> String {
    let mut s = String::from("subject,fold,accuracy,train_accuracy,n_train,n_test\n");
    for sub in &arm.subjects {
        for f in &sub.folds {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                sub.subject_id, f.name, f.accuracy, f.train_accuracy, f.n_train, f.n_test
            );
        }
    }
    s
}

pub fn box_csv(arm: &ArmReport) -> String {
    let b = &arm.box_stats;
    let outliers: Vec<String> = b.outliers.iter().map(f64::to_string).collect();
    format!(
        "median,q1,q3,whisker_low,whisker_high,outliers\n{},{},{},{},{},{}\n",
        b.median,
        b.q1,
        b.q3,
        b.whisker_low,
        b.whisker_high,
        outliers.join(";")
    )
}

pub fn matrix_csv(m: &[Vec<f64>]) -> String {
    let mut s = String::new();
    for row in m {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

/// Write `report.json`, `timing.json` and per-arm CSV exports into `dir`.
pub fn write_report(dir: &Path, report: &RunReport, timing: &Timing) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), report.to_json()?)?;
    fs::write(dir.join("timing.json"), serde_json::to_vec_pretty(timing)?)?;
    fs::write(
        dir.join("config.resolved.json"),
        serde_json::to_vec_pretty(&report.manifest.config)?,
    )?;
    for arm in &report.arms {
        let n = &arm.name;
        fs::write(dir.join(format!("{n}_folds.csv")), folds_csv(arm))?;
        fs::write(dir.join(format!("{n}_subjects.csv")), subjects_csv(arm))?;
        fs::write(dir.join(format!("{n}_box.csv")), box_csv(arm))?;
        fs::write(dir.join(format!("{n}_confusion.csv")), matrix_csv(&arm.confusion.matrix))?;
        if let Some(c) = &arm.positional_cosine {
            fs::write(dir.join(format!("{n}_positional_cosine.csv")), matrix_csv(c))?;
        }
    }
    Ok(())
}
