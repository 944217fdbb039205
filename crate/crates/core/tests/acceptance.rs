//! Acceptance suite. Runs every criterion at its stated tolerance in
//! sequence (so wall-clock budgets are not shared with other work), prints
//! one PASS/FAIL line per criterion and exits non-zero if any failed.
//!
//! Filter with `cargo test --test acceptance -- 3 7` to run a subset.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use cthgr::autodiff::GradCheckReport;
use cthgr::decomp::{best_lag_agreement, extend_and_whiten, fast_ica_deflate, DecompConfig};
use cthgr::dsp::{butterworth_lowpass, mu_law, FilterMode, LowpassCoefficients, WindowSpec};
use cthgr::eval::{
    aggregate_confusion, annotation, build_report, confusion_matrix, load_subjects, run_experiment, run_jobs,
    wilcoxon_signed_rank, worker_count, ExperimentConfig, RunReport, WORKERS_ENV,
};
use cthgr::ingest::{MixtureSpec, MotorUnitMixture};
use cthgr::model::{count_parameters, positional_cosine_matrix, CtHgr, ModelConfig, Preset, PUBLISHED_COUNTS};
use cthgr::selftest::{check_models, check_ops, MODEL_TOLERANCE, OP_TOLERANCE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn config(name: &str) -> Result<ExperimentConfig, String> {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    ExperimentConfig::from_json(&std::fs::read(&p).map_err(err)?).map_err(err)
}

/// Run an experiment config and return its report with the wall time.
fn run(cfg: &ExperimentConfig) -> Result<(RunReport, Duration), String> {
    let t0 = Instant::now();
    let recs = load_subjects(&cfg.data).map_err(err)?;
    let (ids, jobs) = run_jobs(cfg, &recs, worker_count()).map_err(err)?;
    let report = build_report(cfg, &ids, &jobs).map_err(err)?;
    Ok((report, t0.elapsed()))
}

fn mean_acc(r: &RunReport, arm: &str) -> Result<f64, String> {
    r.arm(arm).map(|a| a.average.mean_accuracy).ok_or_else(|| format!("arm {arm} missing"))
}

fn parameter_counts() -> Outcome {
    let t0 = Instant::now();
    let mut worst_v2 = 0i64;
    for &(preset, ch, w, published) in &PUBLISHED_COUNTS {
        let n = count_parameters(&ModelConfig::preset(preset, ch, w).map_err(err)?) as i64;
        let diff = n - published as i64;
        match preset {
            Preset::V1 => ensure(diff == 0, format!("V1 {ch}×{w}: {n} vs {published}"))?,
            _ => {
                ensure(diff.abs() <= 128, format!("V2 {ch}×{w}: {n} vs {published}"))?;
                worst_v2 = worst_v2.max(diff.abs());
            }
        }
    }
    let dt = t0.elapsed();
    ensure(dt < Duration::from_secs(1), format!("took {dt:?}"))?;
    Ok(format!("10 V1 rows exact, V2 offset {worst_v2}, {dt:.2?}"))
}

fn gradients() -> Outcome {
    let t0 = Instant::now();
    let worst = |v: &[cthgr::selftest::CheckOutcome]| -> (String, f64) {
        v.iter()
            .map(|c| (c.name.clone(), c.report.max_rel_error))
            .fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a })
    };
    let ops = check_ops().map_err(err)?;
    let models = check_models().map_err(err)?;
    let fail = |v: &[cthgr::selftest::CheckOutcome], tol: f64| -> Result<(), String> {
        for c in v {
            let r: &GradCheckReport = &c.report;
            ensure(r.max_rel_error < tol, format!("{}: rel {:.2e}", c.name, r.max_rel_error))?;
        }
        Ok(())
    };
    fail(&ops, OP_TOLERANCE)?;
    fail(&models, MODEL_TOLERANCE)?;
    let dt = t0.elapsed();
    ensure(dt < Duration::from_secs(120), format!("took {dt:?}"))?;
    let (wo, eo) = worst(&ops);
    let (wm, em) = worst(&models);
    Ok(format!("{} ops (worst {wo} {eo:.1e}), {} models (worst {wm} {em:.1e}), {dt:.1?}", ops.len(), models.len()))
}

fn preprocessing() -> Outcome {
    let mu = 255.0;
    for x in [0.0, 1.0, -1.0] {
        ensure(mu_law(x, mu).map_err(err)? == x, format!("μ({x}) is not a fixed point"))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let x: f64 = rng.random_range(-1.0..=1.0);
        let (p, n) = (mu_law(x, mu).map_err(err)?, mu_law(-x, mu).map_err(err)?);
        ensure(p == -n, format!("μ-law not odd at {x}"))?;
    }
    let half = mu_law(0.5, mu).map_err(err)?;
    ensure((half - 0.875703).abs() <= 1e-6, format!("μ(0.5) = {half}"))?;

    let fs = 2048.0;
    let c = LowpassCoefficients::design(1.0, fs).map_err(err)?;
    let (dc, nyq) = (c.magnitude(0.0, fs), c.magnitude(fs / 2.0, fs));
    ensure((dc - 1.0).abs() <= 1e-9, format!("DC gain {dc}"))?;
    ensure(nyq.abs() <= 1e-9, format!("Nyquist gain {nyq}"))?;
    // The same gains reached by the filter itself in steady state.
    let n = 40_000;
    let y = butterworth_lowpass(&vec![1.0; n], 1.0, fs, FilterMode::Causal).map_err(err)?;
    ensure((y[n - 1] - 1.0).abs() <= 1e-9, format!("filtered DC {}", y[n - 1]))?;
    let alt: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let y = butterworth_lowpass(&alt, 1.0, fs, FilterMode::Causal).map_err(err)?;
    ensure(y[n - 1].abs() <= 1e-9, format!("filtered Nyquist {}", y[n - 1]))?;

    for _ in 0..1000 {
        let w = rng.random_range(1..=600);
        let skip = rng.random_range(1..=128);
        let len = rng.random_range(0..=3000);
        let mut starts = 0;
        let mut s = 0;
        while s + w <= len {
            starts += 1;
            s += skip;
        }
        let spec = WindowSpec::new(w, skip).map_err(err)?;
        ensure(spec.count(len) == starts, format!("count({len}; {w}, {skip}) = {} ≠ {starts}", spec.count(len)))?;
    }
    Ok(format!("μ(0.5) = {half:.6}, DC {dc:.12}, Nyquist {nyq:.1e}, 1000 window fixtures"))
}

fn accuracy_runs() -> Outcome {
    let limit = Duration::from_secs(600);
    let mut lines = Vec::new();
    for (file, arm, floor) in [
        ("synthetic_v1.json", "ct-hgr", 95.0),
        ("synthetic_cnn3d.json", "cnn3d", 90.0),
        ("synthetic_svm.json", "svm", 85.0),
    ] {
        let (r, dt) = run(&config(file)?)?;
        let acc = mean_acc(&r, arm)?;
        ensure(acc >= floor, format!("{arm} {acc:.2}% < {floor}%"))?;
        ensure(dt < limit, format!("{arm} took {dt:?}"))?;
        lines.push(format!("{arm} {acc:.2}% ({dt:.0?})"));
    }
    let (r, dt) = run(&config("synthetic_fused.json")?)?;
    let (ma, mi, fu) = (mean_acc(&r, "macro")?, mean_acc(&r, "micro")?, mean_acc(&r, "fused")?);
    ensure(fu >= ma.max(mi) - 1.0, format!("fused {fu:.2}% < max(macro {ma:.2}, micro {mi:.2}) − 1"))?;
    lines.push(format!("fused {fu:.2}% vs macro {ma:.2}%, micro {mi:.2}% ({dt:.0?})"));
    Ok(lines.join("; "))
}

fn instantaneous() -> Outcome {
    let cfg = config("synthetic_instantaneous.json")?;
    let seq = cfg.model_config(cfg.model.preset).map_err(err)?.seq_len();
    ensure(seq == 2, format!("sequence length {seq}"))?;
    let (r, dt) = run(&cfg)?;
    let acc = mean_acc(&r, "ct-hgr")?;
    ensure(acc >= 90.0, format!("W=1 accuracy {acc:.2}%"))?;
    Ok(format!("W=1 {acc:.2}%, sequence length {seq} ({dt:.0?})"))
}

fn decomposition() -> Outcome {
    let cfg = DecompConfig::default();
    let n = 100u64;
    let mut recovered = 0;
    for seed in 0..n {
        let mix = MotorUnitMixture::generate(&MixtureSpec {
            n_units: 2,
            snr_db: Some(20.0),
            seed,
            ..Default::default()
        })
        .map_err(err)?;
        let z = extend_and_whiten(&mix.signal, mix.n_channels, cfg.extension_factor).map_err(err)?;
        let trains = fast_ica_deflate(&z, &DecompConfig { seed, ..cfg }).map_err(err)?;
        let best = trains
            .iter()
            .flat_map(|t| mix.trains.iter().map(move |g| best_lag_agreement(g, &t.discharge_indices, 30, 1)))
            .fold(0.0, f64::max);
        recovered += usize::from(best >= 0.9);
    }
    let mut rejected = 0;
    for seed in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(10_000 + seed);
        let x: Vec<f64> = (0..4096 * 16).map(|_| StandardNormal.sample(&mut rng)).collect();
        let z = extend_and_whiten(&x, 16, cfg.extension_factor).map_err(err)?;
        rejected += usize::from(fast_ica_deflate(&z, &DecompConfig { seed, ..cfg }).map_err(err)?.is_empty());
    }
    ensure(recovered >= 90, format!("{recovered}/100 windows with RoA ≥ 0.9"))?;
    ensure(rejected >= 95, format!("{rejected}/100 noise windows rejected"))?;
    Ok(format!("RoA ≥ 0.9 in {recovered}/100, noise rejected in {rejected}/100"))
}

/// Mid-ranks of |d|, computed by counting rather than sorting.
fn ranks_by_counting(d: &[f64]) -> Vec<f64> {
    d.iter()
        .map(|x| {
            let below = d.iter().filter(|y| y.abs() < x.abs()).count() as f64;
            let equal = d.iter().filter(|y| y.abs() == x.abs()).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

fn statistics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut cases = 0;
    for n in 1..=12usize {
        for _ in 0..20 {
            // Small integer differences force ties; no zeros.
            let d: Vec<f64> = (0..n)
                .map(|_| {
                    let m = rng.random_range(1..=6) as f64;
                    if rng.random_bool(0.5) {
                        m
                    } else {
                        -m
                    }
                })
                .collect();
            let zeros = vec![0.0; n];
            let got = wilcoxon_signed_rank(&d, &zeros).map_err(err)?;
            let r = ranks_by_counting(&d);
            let w_plus: f64 = d.iter().zip(&r).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
            let total: f64 = r.iter().sum();
            let stat = w_plus.min(total - w_plus);
            let mut at_most = 0u64;
            for mask in 0u32..(1 << n) {
                let w: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| r[i]).sum();
                at_most += u64::from(w <= stat);
            }
            let p = (2.0 * at_most as f64 / (1u64 << n) as f64).min(1.0);
            ensure(got.exact, format!("n = {n} not exact"))?;
            ensure(got.w_plus == w_plus && got.statistic == stat, format!("n = {n}: W differs"))?;
            ensure(got.p_value == p, format!("n = {n}: p {} vs brute force {p}", got.p_value))?;
            cases += 1;
        }
    }

    let bins = [
        (1.0, "ns"),
        (0.0500001, "ns"),
        (5.00e-2, "*"),
        (0.0100001, "*"),
        (1.00e-2, "**"),
        (0.0010001, "**"),
        (1.00e-3, "***"),
        (0.00010001, "***"),
        (1.00e-4, "****"),
        (0.0, "****"),
    ];
    for (p, want) in bins {
        ensure(annotation(p) == want, format!("annotation({p}) = {}", annotation(p)))?;
    }

    let mats: Vec<Vec<Vec<u64>>> = (0..5)
        .map(|_| {
            let truth: Vec<usize> = (0..200).map(|_| rng.random_range(0..7)).collect();
            let pred: Vec<usize> = (0..200).map(|_| rng.random_range(0..7)).collect();
            confusion_matrix(&truth, &pred, 7)
        })
        .collect();
    let conf = aggregate_confusion(&mats).map_err(err)?;
    for (i, row) in conf.matrix.iter().enumerate() {
        let s: f64 = row.iter().sum();
        ensure((s - 1.0).abs() <= 1e-9, format!("confusion row {i} sums to {s}"))?;
    }

    let model = CtHgr::new(ModelConfig::preset(Preset::V1, 128, 512).map_err(err)?, 5).map_err(err)?;
    let cos = positional_cosine_matrix(&model).map_err(err)?;
    for i in 0..cos.len() {
        ensure((cos[i][i] - 1.0).abs() <= 1e-12, format!("cos[{i}][{i}] = {}", cos[i][i]))?;
        for j in 0..cos.len() {
            ensure((cos[i][j] - cos[j][i]).abs() <= 1e-12, format!("cos not symmetric at {i},{j}"))?;
        }
    }
    Ok(format!(
        "{cases} Wilcoxon cases equal brute force, 10 bin edges, 7 confusion rows, {0}×{0} cosine",
        cos.len()
    ))
}

fn determinism() -> Outcome {
    let cfg = config("synthetic_v1.json")?;
    let dir = tempfile::tempdir().map_err(err)?;
    let a = run_experiment(&cfg, &dir.path().join("a"), true).map_err(err)?;
    // Serial rerun: scheduling must not leak into the report.
    std::env::set_var(WORKERS_ENV, "1");
    let b = run_experiment(&cfg, &dir.path().join("b"), true).map_err(err)?;
    std::env::remove_var(WORKERS_ENV);
    let read = |r: &cthgr::eval::ExperimentRun| std::fs::read(r.output_dir.join("report.json")).map_err(err);
    let (ra, rb) = (read(&a)?, read(&b)?);
    ensure(ra == rb, "report.json differs between runs")?;
    Ok(format!("{} bytes identical across parallel and serial runs", ra.len()))
}

fn main() {
    let criteria: [(&str, &str, fn() -> Outcome); 8] = [
        ("1", "parameter counts", parameter_counts),
        ("2", "gradient suite", gradients),
        ("3", "preprocessing oracles", preprocessing),
        ("4", "synthetic accuracy", accuracy_runs),
        ("5", "instantaneous windows", instantaneous),
        ("6", "decomposition", decomposition),
        ("7", "statistics", statistics),
        ("8", "determinism", determinism),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (id, name, f) in criteria {
        if !filters.is_empty() && !filters.iter().any(|x| x == id) {
            continue;
        }
        match f() {
            Ok(detail) => println!("criterion {id} ({name}): PASS  {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {id} ({name}): FAIL  {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
