//! Cross-module checks: the SVM against an exact dual solver, MUAP images
//! on constructed fixtures, fusion training with frozen backbones, and the
//! experiment runner's artifacts.

use cthgr::baselines::{LinearSvm, SvmConfig};
use cthgr::decomp::{decompose_window, muap_images, Aggregate, DecompConfig, MotorUnitSpikeTrain};
use cthgr::dsp::{segment, WindowSpec};
use cthgr::eval::{run_experiment, ExperimentConfig, RunReport};
use cthgr::fusion::{train_fusion, FusionConfig, FusionModel};
use cthgr::ingest::{remove_rest, synthesize_dataset, MixtureSpec, MotorUnitMixture, SynthSpec};
use cthgr::model::{CtHgr, ModelConfig, Preset};
use cthgr::train::TrainConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Three overlapping Gaussian blobs in five dimensions.
fn blobs(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let centres = [[1.5, 0.0, 0.0, 0.5, 0.0], [0.0, 1.5, 0.0, 0.0, 0.5], [0.0, 0.0, 1.5, 0.5, 0.5]];
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for _ in 0..n {
        let c = rng.random_range(0..3);
        xs.push(centres[c].iter().map(|m| m + noise.sample(&mut rng)).collect());
        ys.push(c);
    }
    (xs, ys)
}

/// Dual coordinate descent for `½|w|² + C Σ hinge` with `C = 1/(λn)`, the
/// same minimiser as `λ/2·|w|² + mean hinge`. Run to convergence.
fn dual_cd(xs: &[Vec<f64>], y: &[f64], lambda: f64) -> Vec<f64> {
    let n = xs.len();
    let c = 1.0 / (lambda * n as f64);
    let mut alpha = vec![0.0; n];
    let mut w = vec![0.0; xs[0].len()];
    let q: Vec<f64> = xs.iter().map(|x| x.iter().map(|v| v * v).sum()).collect();
    for _ in 0..2000 {
        let mut biggest = 0.0f64;
        for i in 0..n {
            let g = y[i] * xs[i].iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() - 1.0;
            let new = (alpha[i] - g / q[i]).clamp(0.0, c);
            let d = new - alpha[i];
            if d != 0.0 {
                w.iter_mut().zip(&xs[i]).for_each(|(wj, xj)| *wj += d * y[i] * xj);
                alpha[i] = new;
                biggest = biggest.max(d.abs());
            }
        }
        if biggest < 1e-10 {
            break;
        }
    }
    w
}

fn primal(w: &[f64], xs: &[Vec<f64>], y: &[f64], lambda: f64) -> f64 {
    let hinge: f64 = xs
        .iter()
        .zip(y)
        .map(|(x, yi)| (1.0 - yi * x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>()).max(0.0))
        .sum();
    lambda / 2.0 * w.iter().map(|v| v * v).sum::<f64>() + hinge / xs.len() as f64
}

#[test]
fn pegasos_svm_tracks_exact_dual_solution() {
    let (train_x, train_y) = blobs(300, 1);
    let (test_x, test_y) = blobs(600, 2);
    let cfg = SvmConfig {
        lambda: 1e-2,
        epochs: 50,
        seed: 3,
    };
    let refs: Vec<&[f64]> = train_x.iter().map(Vec::as_slice).collect();
    let svm = LinearSvm::train(&refs, &train_y, 3, &cfg).unwrap();

    let aug: Vec<Vec<f64>> = train_x
        .iter()
        .map(|x| {
            let mut v = svm.standardizer.apply(x);
            v.push(1.0);
            v
        })
        .collect();
    let f = aug[0].len();
    let mut oracle = Vec::new();
    for class in 0..3 {
        let y: Vec<f64> = train_y.iter().map(|&l| if l == class { 1.0 } else { -1.0 }).collect();
        let w = dual_cd(&aug, &y, cfg.lambda);
        let ours = &svm.weights[class * f..(class + 1) * f];
        let (p_ours, p_opt) = (primal(ours, &aug, &y, cfg.lambda), primal(&w, &aug, &y, cfg.lambda));
        assert!(p_ours >= p_opt - 1e-9, "class {class}: below the optimum");
        assert!(p_ours <= p_opt * 1.02, "class {class}: objective {p_ours} vs optimum {p_opt}");
        oracle.push(w);
    }

    let predict_oracle = |x: &[f64]| {
        let mut v = svm.standardizer.apply(x);
        v.push(1.0);
        let m: Vec<f64> = oracle.iter().map(|w| w.iter().zip(&v).map(|(a, b)| a * b).sum()).collect();
        (0..3).fold(0, |b, i| if m[i] > m[b] { i } else { b })
    };
    let acc = |p: &dyn Fn(&[f64]) -> usize| {
        test_x.iter().zip(&test_y).filter(|(x, y)| p(x) == **y).count() as f64 / test_x.len() as f64 * 100.0
    };
    let (ours, exact) = (acc(&|x| svm.predict(x)), acc(&predict_oracle));
    assert!((ours - exact).abs() <= 2.0, "accuracy {ours:.2}% vs dual solver {exact:.2}%");
    assert!(exact > 60.0);
}

#[test]
fn synthetic_classes_separate_on_mean_absolute_value() {
    let rec = synthesize_dataset(&SynthSpec::default()).unwrap();
    let batch = segment(&remove_rest(&rec), WindowSpec::new(256, 128).unwrap());
    let c = rec.n_channels();
    let mav: Vec<Vec<f64>> = (0..batch.len())
        .map(|i| {
            let w = batch.window(i);
            (0..c).map(|ch| w.iter().skip(ch).step_by(c).map(|v| v.abs()).sum::<f64>() / 256.0).collect()
        })
        .collect();
    let labels: Vec<usize> = batch.labels.iter().map(|&l| l as usize - 1).collect();
    let (train, test): (Vec<usize>, Vec<usize>) = (0..batch.len()).partition(|&i| batch.fold_key[i] != 5);
    let refs: Vec<&[f64]> = train.iter().map(|&i| mav[i].as_slice()).collect();
    let ys: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
    let svm = LinearSvm::train(&refs, &ys, 4, &SvmConfig::default()).unwrap();
    let correct = test.iter().filter(|&&i| svm.predict(&mav[i]) == labels[i]).count();
    let acc = correct as f64 / test.len() as f64;
    assert!(acc > 0.9, "held-out repetition accuracy {acc}");
}

fn unit(indices: Vec<usize>) -> MotorUnitSpikeTrain {
    MotorUnitSpikeTrain {
        discharge_indices: indices,
        silhouette: 1.0,
        source_vector: Vec::new(),
    }
}

/// `[W × C]` window with a biphasic wave on the listed channels at each
/// discharge, and nothing else.
fn spiking_window(w: usize, c: usize, channels: &[(usize, f64)], discharges: &[usize]) -> Vec<f64> {
    let mut x = vec![0.0; w * c];
    for &t in discharges {
        for &(ch, amp) in channels {
            x[t * c + ch] += amp;
            x[(t + 1) * c + ch] -= amp;
        }
    }
    x
}

#[test]
fn muap_image_of_single_channel_unit() {
    let cfg = DecompConfig::default();
    let x = spiking_window(200, 6, &[(0, 2.0)], &[40, 90, 140]);
    let set = muap_images(&x, 3, 2, &[unit(vec![40, 90, 140])], &cfg, 1).unwrap();
    assert_eq!(set.images.len(), 1);
    let img = &set.images[0];
    assert!((img[0] - 4.0).abs() < 1e-12);
    assert!(img[1..].iter().all(|&v| v == 0.0));
    assert_eq!(set.aggregate, *img);
}

#[test]
fn mean_aggregate_of_disjoint_units_is_half_their_sum() {
    let cfg = DecompConfig::default();
    let (a, b) = (vec![30, 100, 170], vec![60, 130]);
    let mut x = spiking_window(220, 4, &[(0, 1.0), (1, 0.5)], &a);
    let y = spiking_window(220, 4, &[(2, 3.0), (3, 1.5)], &b);
    x.iter_mut().zip(&y).for_each(|(p, q)| *p += q);
    let set = muap_images(&x, 2, 2, &[unit(a.clone()), unit(b.clone())], &cfg, 2).unwrap();
    for i in 0..4 {
        let half_sum = (set.images[0][i] + set.images[1][i]) / 2.0;
        assert!((set.aggregate[i] - half_sum).abs() < 1e-12);
    }
    let max = muap_images(&x, 2, 2, &[unit(a), unit(b)], &DecompConfig { aggregate: Aggregate::Max, ..cfg }, 2).unwrap();
    for i in 0..4 {
        assert_eq!(max.aggregate[i], set.images[0][i].max(set.images[1][i]));
    }
}

#[test]
fn no_units_give_a_zero_image() {
    let set = muap_images(&vec![0.3; 64 * 4], 2, 2, &[], &DecompConfig::default(), 1).unwrap();
    assert!(set.images.is_empty());
    assert_eq!(set.aggregate, vec![0.0; 4]);
}

#[test]
fn muap_images_ignore_polarity_and_unit_order() {
    let cfg = DecompConfig::default();
    let mix = MotorUnitMixture::generate(&MixtureSpec { seed: 4, ..Default::default() }).unwrap();
    let trains: Vec<MotorUnitSpikeTrain> = mix.trains.iter().cloned().map(unit).collect();
    let a = muap_images(&mix.signal, 4, 4, &trains, &cfg, 1).unwrap();
    let flipped: Vec<f64> = mix.signal.iter().map(|v| -v).collect();
    let b = muap_images(&flipped, 4, 4, &trains, &cfg, 1).unwrap();
    let rev: Vec<MotorUnitSpikeTrain> = trains.iter().rev().cloned().collect();
    let c = muap_images(&mix.signal, 4, 4, &rev, &cfg, 1).unwrap();
    for i in 0..16 {
        assert!((a.aggregate[i] - b.aggregate[i]).abs() < 1e-12);
        assert!((a.aggregate[i] - c.aggregate[i]).abs() < 1e-12);
    }
}

#[test]
fn decomposition_is_deterministic_and_sources_decorrelated() {
    let mix = MotorUnitMixture::generate(&MixtureSpec { seed: 9, ..Default::default() }).unwrap();
    let cfg = DecompConfig { seed: 5, ..DecompConfig::default() };
    let (t1, i1) = decompose_window(&mix.signal, 4, 4, &cfg, 1).unwrap();
    let (t2, i2) = decompose_window(&mix.signal, 4, 4, &cfg, 1).unwrap();
    assert_eq!(t1, t2);
    assert_eq!(i1, i2);
    assert!(!t1.is_empty() && t1.len() <= cfg.max_sources);
    for t in &t1 {
        assert!(t.discharge_indices.windows(2).all(|p| p[0] < p[1]));
        assert!(t.silhouette >= cfg.silhouette_threshold && t.silhouette <= 1.0);
    }
    // Separation vectors are orthonormal in whitened space, so the
    // estimated sources are uncorrelated.
    for (i, a) in t1.iter().enumerate() {
        for b in &t1[i + 1..] {
            let d: f64 = a.source_vector.iter().zip(&b.source_vector).map(|(x, y)| x * y).sum();
            assert!(d.abs() < 0.1, "source overlap {d}");
        }
    }
    assert!(i1.aggregate.iter().all(|&v| v >= 0.0));
}

#[test]
fn fusion_training_leaves_backbones_untouched() {
    let v1 = CtHgr::new(ModelConfig { n_classes: 3, ..ModelConfig::preset(Preset::V1, 32, 8).unwrap() }, 1).unwrap();
    let v3 = CtHgr::new(ModelConfig { n_classes: 3, ..ModelConfig::preset(Preset::V3, 128, 512).unwrap() }, 2).unwrap();
    let cfg = FusionConfig {
        hidden: vec![16, 8],
        dropout: 0.1,
        n_classes: 3,
    };
    let mut model = FusionModel::new(v1, v3, cfg, 3).unwrap();
    let before = model.backbone_digests();
    let head_before = model.params.digest();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let samples: Vec<Vec<f64>> = (0..24)
        .map(|_| (0..model.window_len() + model.image_len()).map(|_| rng.random_range(0.0..1.0)).collect())
        .collect();
    let refs: Vec<&[f64]> = samples.iter().map(Vec::as_slice).collect();
    let labels: Vec<usize> = (0..24).map(|i| i % 3).collect();
    let tc = TrainConfig {
        epochs: 3,
        batch_size: 8,
        ..TrainConfig::default()
    };
    train_fusion(&mut model, &refs, &labels, &tc).unwrap();
    assert_eq!(model.backbone_digests(), before);
    assert_ne!(model.params.digest(), head_before);
    let logits = model.fuse_forward(&refs[..2]).unwrap();
    assert_eq!(logits.shape(), &[2, 3]);
}

fn tiny_svm_config() -> ExperimentConfig {
    ExperimentConfig::from_json(
        br#"{
            "version": 1, "name": "tiny", "seed": 3,
            "data": { "synthetic": { "spec": { "n_classes": 3, "n_horizontal": 8, "samples_per_repetition": 512 }, "subjects": 2 } },
            "channels": "half",
            "window": { "window_len": 64, "skip": 32 },
            "model": { "kind": "svm" }
        }"#,
    )
    .unwrap()
}

#[test]
fn experiment_writes_artifacts_and_reuses_matching_runs() {
    let cfg = tiny_svm_config();
    let dir = tempfile::tempdir().unwrap();
    let first = run_experiment(&cfg, dir.path(), false).unwrap();
    assert!(!first.reused);
    for f in [
        "report.json",
        "timing.json",
        "config.resolved.json",
        "svm_folds.csv",
        "svm_subjects.csv",
        "svm_box.csv",
        "svm_confusion.csv",
    ] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let report = RunReport::from_json(&std::fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report, first.report);
    let arm = report.arm("svm").unwrap();
    assert_eq!(arm.subjects.len(), 2);
    assert_eq!(arm.folds.len(), 5);
    assert!(report.manifest.audit.train_only);
    let folds_csv = std::fs::read_to_string(dir.path().join("svm_folds.csv")).unwrap();
    assert_eq!(folds_csv.lines().count(), 7);
    assert!(folds_csv.lines().last().unwrap().starts_with("Average,"));

    let again = run_experiment(&cfg, dir.path(), false).unwrap();
    assert!(again.reused);
    assert_eq!(again.report, first.report);

    let mut changed = cfg.clone();
    changed.seed = 4;
    assert!(!run_experiment(&changed, dir.path(), false).unwrap().reused);
}

#[test]
fn v3_transformer_is_rejected_outside_fusion() {
    let mut cfg = tiny_svm_config();
    cfg.model.kind = cthgr::eval::ModelKind::CtHgr;
    cfg.model.preset = Preset::V3;
    assert!(cfg.validate().is_err());
}
