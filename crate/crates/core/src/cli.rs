//! Command-line front end. [`run`] parses arguments, executes one
//! subcommand and returns the process exit code.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::baselines::{extract_features, Cnn3d, Cnn3dConfig, LinearSvm, SvmConfig};
use crate::decomp::{decompose_batch, DecompConfig};
use crate::dsp::{envelope_recording, segment, FilterMode, PreprocessConfig, WindowBatch, WindowSpec};
use crate::error::{Error, Result};
use crate::eval::{self, apply_channel_mode, class_indices, normalise, ExperimentConfig, Fold};
use crate::fusion::{fusion_train_config, load_ct_hgr, load_fusion, save_ct_hgr, save_fusion, train_fusion, FusionConfig, FusionModel};
use crate::ingest::{
    convert_csv, convert_raw_f32, load_recording, read_manifest, remove_rest, sha256_file, synthesize_dataset,
    validate_manifest, write_manifest, ChannelMode, GridLayout, Manifest, ManifestEntry, SynthSpec, FORMAT_VERSION,
};
use crate::model::{count_parameters, published_count, read_checkpoint, write_checkpoint, CtHgr, ModelConfig, Preset};
use crate::selftest;
use crate::train::{self, mix_seed, Classifier, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "cthgr", version, about = "Transformer hand-gesture recognition from HD-sEMG")]
pub struct Cli {
    /// Master seed for every random choice of the command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Convert, synthesise or validate recordings.
    #[command(subcommand)]
    Ingest(IngestCmd),
    /// Envelope (or raw) windows of one recording.
    Preprocess(PreprocessArgs),
    /// Train a transformer or the 3D CNN on one held-out repetition.
    Train(TrainArgs),
    /// Decompose raw windows into aggregated MUAP images.
    Decompose(DecomposeArgs),
    /// Train or evaluate the fused Macro/Micro head.
    #[command(subcommand)]
    Fuse(FuseCmd),
    /// Train and test a baseline on one held-out repetition.
    Baseline(BaselineArgs),
    /// Run a configured multi-fold experiment.
    #[command(subcommand)]
    Run(RunCmd),
    /// Model utilities.
    #[command(subcommand)]
    Model(ModelCmd),
    /// Built-in checks.
    Selftest {
        #[arg(value_enum)]
        suite: Suite,
    },
}

#[derive(Subcommand, Debug)]
pub enum IngestCmd {
    /// Convert a CSV (`C` signal columns, label, repetition) or a raw
    /// little-endian f32 matrix plus annotation CSV.
    Convert {
        input: PathBuf,
        /// Annotation CSV; switches to raw f32 input.
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long)]
        subject: String,
        #[arg(long, default_value_t = 16)]
        n_horizontal: usize,
        #[arg(long, default_value_t = 8)]
        n_vertical: usize,
        #[arg(long, default_value_t = 2048.0)]
        sampling_rate: f64,
        /// Dataset directory; its manifest.json is created or extended.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write seeded synthetic subjects and their manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// SynthSpec JSON; defaults apply to missing fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        subjects: usize,
    },
    /// Check every file of a manifest against its checksum.
    Validate { manifest: PathBuf },
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    /// A `.emg` recording.
    pub recording: PathBuf,
    #[arg(long, default_value = "full")]
    pub channels: String,
    #[arg(long, default_value_t = 64)]
    pub window: usize,
    /// Defaults to 1, 32 or 64 depending on the window length.
    #[arg(long)]
    pub skip: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    pub cutoff: f64,
    #[arg(long, value_enum, default_value_t = FilterArg::Causal)]
    pub filter: FilterArg,
    /// Keep the raw signal (for decomposition) instead of the envelope.
    #[arg(long)]
    pub raw: bool,
    /// Output `.emgw` file; a `.json` sidecar is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FilterArg {
    Causal,
    ZeroPhase,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
pub enum TrainModel {
    CtHgr,
    Cnn3d,
}

/// Options shared by every single-split training command.
#[derive(Args, Debug, Clone)]
pub struct SplitArgs {
    /// Envelope windows written by `preprocess`.
    #[arg(long)]
    pub windows: PathBuf,
    /// Repetition held out for testing.
    #[arg(long, default_value_t = 5)]
    pub test_repetition: u8,
    #[arg(long, default_value_t = 66)]
    pub classes: usize,
    #[arg(long, default_value_t = 255.0)]
    pub mu: f64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long, value_enum, default_value_t = TrainModel::CtHgr)]
    pub model: TrainModel,
    #[arg(long, default_value = "V1")]
    pub preset: Preset,
    /// MUAP images from `decompose`; required for the V3 preset.
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct DecomposeArgs {
    /// Raw windows written by `preprocess --raw`.
    pub windows: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub extension_factor: usize,
    #[arg(long, default_value_t = 0.92)]
    pub silhouette: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum FuseCmd {
    Train {
        #[command(flatten)]
        split: SplitArgs,
        #[arg(long)]
        images: PathBuf,
        #[arg(long = "macro")]
        macro_ckpt: PathBuf,
        #[arg(long = "micro")]
        micro_ckpt: PathBuf,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    Eval {
        #[command(flatten)]
        split: SplitArgs,
        #[arg(long)]
        images: PathBuf,
        #[arg(long = "macro")]
        macro_ckpt: PathBuf,
        #[arg(long = "micro")]
        micro_ckpt: PathBuf,
        #[arg(long)]
        fusion: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
pub enum BaselineKind {
    Svm,
    Cnn3d,
}

#[derive(Args, Debug)]
pub struct BaselineArgs {
    #[arg(value_enum)]
    pub kind: BaselineKind,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
}

#[derive(Subcommand, Debug)]
pub enum RunCmd {
    Experiment {
        config: PathBuf,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Rerun even if the output already holds this configuration.
        #[arg(long)]
        force: bool,
    },
}

#[derive(Subcommand, Debug)]
pub enum ModelCmd {
    /// Closed-form parameter count, compared with the published table.
    CountParams {
        #[arg(long, default_value = "V1")]
        preset: Preset,
        #[arg(long, default_value_t = 128)]
        channels: usize,
        #[arg(long, default_value_t = 512)]
        window: usize,
        #[arg(long, default_value_t = 66)]
        classes: usize,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Suite {
    Grad,
    All,
}

/// MUAP images aligned with a window file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageFile {
    pub n_horizontal: usize,
    pub n_vertical: usize,
    pub images: Vec<Vec<f64>>,
    pub units: Vec<usize>,
    pub labels: Vec<u8>,
    pub fold_key: Vec<u8>,
}

/// Parse `args` (including the program name) and run. Returns 0 on
/// success, 1 on failure and 2 on a usage error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            1
        }
    }
}

/// Run a parsed command; `Ok(false)` means it ran but a check failed.
pub fn execute(cli: Cli) -> Result<bool> {
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::Ingest(c) => ingest(c, seed),
        Command::Preprocess(a) => preprocess(&a).map(|_| true),
        Command::Train(a) => train_cmd(&a, seed).map(|_| true),
        Command::Decompose(a) => decompose(&a, seed).map(|_| true),
        Command::Fuse(c) => fuse(c, seed).map(|_| true),
        Command::Baseline(a) => baseline(&a, seed).map(|_| true),
        Command::Run(RunCmd::Experiment { config, out, force }) => {
            let mut cfg = ExperimentConfig::from_json(&fs::read(&config)?)?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let dir = out
                .or_else(|| cfg.output_dir.clone())
                .unwrap_or_else(|| PathBuf::from("runs").join(&cfg.name));
            let run = eval::run_experiment(&cfg, &dir, force)?;
            if run.reused {
                println!("up to date: {} (use --force to rerun)", dir.display());
            }
            for arm in &run.report.arms {
                print!("{}", eval::folds_csv(arm));
            }
            println!("config hash {}", run.report.config_hash);
            Ok(true)
        }
        Command::Model(ModelCmd::CountParams {
            preset,
            channels,
            window,
            classes,
        }) => {
            let mut cfg = ModelConfig::preset(preset, channels, window)?;
            cfg.n_classes = classes;
            let n = count_parameters(&cfg);
            let grouped = group_thousands(n);
            match published_count(preset, channels, window).filter(|_| classes == 66) {
                Some(p) if p == n => println!("{grouped} match"),
                Some(p) => println!("{grouped} mismatch (published {})", group_thousands(p)),
                None => println!("{grouped} (no published value)"),
            }
            Ok(true)
        }
        Command::Selftest { suite } => {
            let mut ok = true;
            for c in selftest::gradient_suite()? {
                let r = &c.report;
                println!(
                    "{:<6} {:<28} max rel {:.3e} (tol {:.0e})",
                    if r.passed { "PASS" } else { "FAIL" },
                    c.name,
                    r.max_rel_error,
                    r.tolerance
                );
                ok &= r.passed;
            }
            if matches!(suite, Suite::All) {
                let n = count_parameters(&ModelConfig::preset(Preset::V1, 128, 512)?);
                let pass = Some(n) == published_count(Preset::V1, 128, 512);
                println!("{:<6} {:<28} {n}", if pass { "PASS" } else { "FAIL" }, "parameter count V1/128/512");
                ok &= pass;
            }
            Ok(ok)
        }
    }
}

fn group_thousands(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn ingest(c: IngestCmd, seed: u64) -> Result<bool> {
    match c {
        IngestCmd::Convert {
            input,
            annotations,
            subject,
            n_horizontal,
            n_vertical,
            sampling_rate,
            out,
        } => {
            fs::create_dir_all(&out)?;
            let layout = GridLayout {
                n_horizontal,
                n_vertical,
                sampling_rate_hz: sampling_rate,
            };
            let rel = PathBuf::from(format!("{subject}.emg"));
            let path = out.join(&rel);
            let rec = match annotations {
                Some(a) => convert_raw_f32(&input, &a, &path, &subject, layout)?,
                None => convert_csv(&input, &path, &subject, layout)?,
            };
            let manifest_path = out.join("manifest.json");
            let mut m = if manifest_path.exists() {
                read_manifest(&manifest_path)?
            } else {
                Manifest {
                    format_version: FORMAT_VERSION,
                    subjects: Vec::new(),
                }
            };
            m.subjects.retain(|e| e.subject_id != subject);
            m.subjects.push(ManifestEntry {
                subject_id: subject,
                path: rel,
                n_channels: rec.n_channels(),
                duration_s: rec.n_samples() as f64 / sampling_rate,
                checksum: sha256_file(&path)?,
            });
            fs::write(&manifest_path, serde_json::to_vec_pretty(&m)?)?;
            println!("{} samples × {} channels → {}", rec.n_samples(), rec.n_channels(), path.display());
            Ok(true)
        }
        IngestCmd::Synth { out, spec, subjects } => {
            let base: SynthSpec = match spec {
                Some(p) => serde_json::from_slice(&fs::read(&p)?).map_err(|e| Error::format(&p, e.to_string()))?,
                None => SynthSpec {
                    seed,
                    ..SynthSpec::default()
                },
            };
            let recs = (0..subjects)
                .map(|i| {
                    synthesize_dataset(&SynthSpec {
                        subject_id: format!("{}-{}", base.subject_id, i + 1),
                        seed: base.seed.wrapping_add(i as u64),
                        ..base.clone()
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let p = write_manifest(&out, &recs)?;
            println!("wrote {}", p.display());
            Ok(true)
        }
        IngestCmd::Validate { manifest } => {
            let m = validate_manifest(&manifest)?;
            for e in &m.subjects {
                println!("ok {} ({} channels, {:.1} s)", e.subject_id, e.n_channels, e.duration_s);
            }
            Ok(true)
        }
    }
}

fn preprocess(a: &PreprocessArgs) -> Result<WindowBatch> {
    let rec = load_recording(&a.recording)?;
    let mode: ChannelMode = a.channels.parse()?;
    let rec = apply_channel_mode(&rec, mode)?;
    let pre = PreprocessConfig {
        cutoff_hz: a.cutoff,
        filter_mode: match a.filter {
            FilterArg::Causal => FilterMode::Causal,
            FilterArg::ZeroPhase => FilterMode::ZeroPhase,
        },
        ..PreprocessConfig::default()
    };
    let spec = match a.skip {
        Some(s) => WindowSpec::new(a.window, s)?,
        None => WindowSpec::with_default_skip(a.window)?,
    };
    let signal = if a.raw { rec.clone() } else { envelope_recording(&rec, &pre)? };
    let batch = segment(&remove_rest(&signal), spec);
    let meta = serde_json::json!({
        "recording": a.recording,
        "subject_id": rec.subject_id,
        "channels": mode,
        "window": spec,
        "preprocess": if a.raw { serde_json::Value::Null } else { serde_json::to_value(pre)? },
    });
    batch.write(&a.out, &meta)?;
    println!("{} windows → {}", batch.len(), a.out.display());
    Ok(batch)
}

/// Train/test split of a window file with μ-law constants from the
/// training windows. Rerunning with the same file and repetition
/// reproduces the same constants.
struct Split {
    batch: WindowBatch,
    fold: Fold,
    labels: Vec<usize>,
}

impl Split {
    fn load(a: &SplitArgs) -> Result<Self> {
        let raw = WindowBatch::read(&a.windows)?;
        let (test, train): (Vec<usize>, Vec<usize>) = (0..raw.len()).partition(|&i| raw.fold_key[i] == a.test_repetition);
        if train.is_empty() || test.is_empty() {
            return Err(Error::Data(format!(
                "repetition {} leaves an empty training or test set",
                a.test_repetition
            )));
        }
        let batch = normalise(&raw, &train, a.mu)?;
        let labels = class_indices(&batch.labels, a.classes)?;
        Ok(Self {
            batch,
            fold: Fold {
                name: format!("Fold{}", a.test_repetition),
                train,
                test,
            },
            labels,
        })
    }

    fn xs(&self, idx: &[usize]) -> Vec<&[f64]> {
        idx.iter().map(|&i| self.batch.window(i)).collect()
    }

    fn ys(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }
}

fn read_images(path: &Path, n: usize) -> Result<ImageFile> {
    let f: ImageFile = serde_json::from_slice(&fs::read(path)?).map_err(|e| Error::format(path, e.to_string()))?;
    if f.images.len() != n {
        return Err(Error::format(path, format!("{} images for {n} windows", f.images.len())));
    }
    Ok(f)
}

/// Images divided by the largest training-image value.
fn scaled_images(f: &ImageFile, train: &[usize]) -> Vec<Vec<f64>> {
    let m = train.iter().flat_map(|&i| f.images[i].iter()).fold(0.0f64, |m, v| m.max(v.abs()));
    let m = if m > 0.0 { m } else { 1.0 };
    f.images.iter().map(|im| im.iter().map(|v| v / m).collect()).collect()
}

fn train_cmd(a: &TrainArgs, seed: u64) -> Result<()> {
    let s = Split::load(&a.split)?;
    let tcfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: mix_seed(seed, 2),
        adam: crate::autodiff::AdamConfig {
            learning_rate: a.lr,
            ..Default::default()
        },
        ..TrainConfig::default()
    };
    let (ytr, yte) = (s.ys(&s.fold.train), s.ys(&s.fold.test));
    let b = &s.batch;
    match a.model {
        TrainModel::CtHgr => {
            let channels = b.frame_len();
            let mut cfg = ModelConfig::preset(a.preset, channels, b.window_len)?;
            cfg.n_classes = a.split.classes;
            let images;
            let (xtr, xte): (Vec<&[f64]>, Vec<&[f64]>) = if a.preset == Preset::V3 {
                let path = a.images.as_ref().ok_or_else(|| Error::Config("the V3 preset needs --images".into()))?;
                images = scaled_images(&read_images(path, b.len())?, &s.fold.train);
                (
                    s.fold.train.iter().map(|&i| images[i].as_slice()).collect(),
                    s.fold.test.iter().map(|&i| images[i].as_slice()).collect(),
                )
            } else {
                (s.xs(&s.fold.train), s.xs(&s.fold.test))
            };
            let mut m = CtHgr::new(cfg, mix_seed(seed, 1))?;
            let r = train::train(&mut m, &xtr, &ytr, &tcfg)?;
            let acc = train::accuracy(&train::predict(&m, &xte, a.batch_size)?, &yte);
            save_ct_hgr(&m, &a.out)?;
            println!("train {:.2}%  test {acc:.2}%  → {}", r.train_accuracy, a.out.display());
        }
        TrainModel::Cnn3d => {
            let cfg = Cnn3dConfig::new(b.window_len, b.n_horizontal, b.n_vertical, a.split.classes);
            let mut m = Cnn3d::new(cfg.clone(), mix_seed(seed, 1))?;
            let r = train::train(&mut m, &s.xs(&s.fold.train), &ytr, &tcfg)?;
            let acc = train::accuracy(&train::predict(&m, &s.xs(&s.fold.test), a.batch_size)?, &yte);
            let header = serde_json::json!({ "kind": "cnn3d", "config": cfg });
            write_checkpoint(&a.out, &header, &m.params.flatten())?;
            println!("train {:.2}%  test {acc:.2}%  → {}", r.train_accuracy, a.out.display());
        }
    }
    Ok(())
}

fn decompose(a: &DecomposeArgs, seed: u64) -> Result<()> {
    let batch = WindowBatch::read(&a.windows)?;
    let cfg = DecompConfig {
        extension_factor: a.extension_factor,
        silhouette_threshold: a.silhouette,
        seed,
        ..DecompConfig::default()
    };
    cfg.validate()?;
    let sets = decompose_batch(&batch, &cfg)?;
    let units: Vec<usize> = sets.iter().map(|(t, _)| t.len()).collect();
    let out = ImageFile {
        n_horizontal: batch.n_horizontal,
        n_vertical: batch.n_vertical,
        images: sets.into_iter().map(|(_, im)| im.aggregate).collect(),
        units: units.clone(),
        labels: batch.labels.clone(),
        fold_key: batch.fold_key.clone(),
    };
    fs::write(&a.out, serde_json::to_vec(&out)?)?;
    println!(
        "{} motor units over {} windows → {}",
        units.iter().sum::<usize>(),
        batch.len(),
        a.out.display()
    );
    Ok(())
}

fn fusion_inputs(s: &Split, images: &[Vec<f64>], idx: &[usize]) -> Vec<Vec<f64>> {
    idx.iter().map(|&i| FusionModel::sample(s.batch.window(i), &images[i])).collect()
}

fn fuse(c: FuseCmd, seed: u64) -> Result<()> {
    match c {
        FuseCmd::Train {
            split,
            images,
            macro_ckpt,
            micro_ckpt,
            epochs,
            out,
        } => {
            let s = Split::load(&split)?;
            let im = scaled_images(&read_images(&images, s.batch.len())?, &s.fold.train);
            let head = FusionConfig {
                n_classes: split.classes,
                ..FusionConfig::default()
            };
            let mut m = FusionModel::new(load_ct_hgr(&macro_ckpt)?, load_ct_hgr(&micro_ckpt)?, head, mix_seed(seed, 6))?;
            let xtr = fusion_inputs(&s, &im, &s.fold.train);
            let xs: Vec<&[f64]> = xtr.iter().map(Vec::as_slice).collect();
            let cfg = TrainConfig {
                epochs,
                ..fusion_train_config(mix_seed(seed, 7))
            };
            let r = train_fusion(&mut m, &xs, &s.ys(&s.fold.train), &cfg)?;
            save_fusion(&m, &out, &macro_ckpt, &micro_ckpt)?;
            println!("train {:.2}%  → {}", r.train_accuracy, out.display());
        }
        FuseCmd::Eval {
            split,
            images,
            macro_ckpt,
            micro_ckpt,
            fusion,
        } => {
            let s = Split::load(&split)?;
            let im = scaled_images(&read_images(&images, s.batch.len())?, &s.fold.train);
            let m = load_fusion(&fusion, &macro_ckpt, &micro_ckpt)?;
            let xte = fusion_inputs(&s, &im, &s.fold.test);
            let xs: Vec<&[f64]> = xte.iter().map(Vec::as_slice).collect();
            let yte = s.ys(&s.fold.test);
            let fused = train::accuracy(&train::predict(&m, &xs, 64)?, &yte);
            let macro_acc = train::accuracy(&train::predict(&m.macro_path, &s.xs(&s.fold.test), 64)?, &yte);
            let ims: Vec<&[f64]> = s.fold.test.iter().map(|&i| im[i].as_slice()).collect();
            let micro_acc = train::accuracy(&train::predict(&m.micro_path, &ims, 64)?, &yte);
            println!("macro {macro_acc:.2}%  micro {micro_acc:.2}%  fused {fused:.2}%");
        }
    }
    Ok(())
}

fn baseline(a: &BaselineArgs, seed: u64) -> Result<()> {
    let s = Split::load(&a.split)?;
    let (ytr, yte) = (s.ys(&s.fold.train), s.ys(&s.fold.test));
    let acc = match a.kind {
        BaselineKind::Svm => {
            let ch = s.batch.frame_len();
            let f = |idx: &[usize]| -> Result<Vec<Vec<f64>>> {
                idx.iter().map(|&i| extract_features(s.batch.window(i), ch, 0.0)).collect()
            };
            let (ftr, fte) = (f(&s.fold.train)?, f(&s.fold.test)?);
            let refs: Vec<&[f64]> = ftr.iter().map(Vec::as_slice).collect();
            let cfg = SvmConfig {
                seed,
                ..SvmConfig::default()
            };
            let m = LinearSvm::train(&refs, &ytr, a.split.classes, &cfg)?;
            let pred: Vec<usize> = fte.iter().map(|x| m.predict(x)).collect();
            train::accuracy(&pred, &yte)
        }
        BaselineKind::Cnn3d => {
            let b = &s.batch;
            let cfg = Cnn3dConfig::new(b.window_len, b.n_horizontal, b.n_vertical, a.split.classes);
            let mut m = Cnn3d::new(cfg, mix_seed(seed, 1))?;
            let tcfg = TrainConfig {
                epochs: a.epochs,
                batch_size: a.batch_size,
                seed: mix_seed(seed, 2),
                ..TrainConfig::default()
            };
            train::train(&mut m, &s.xs(&s.fold.train), &ytr, &tcfg)?;
            train::accuracy(&train::predict(&m, &s.xs(&s.fold.test), a.batch_size)?, &yte)
        }
    };
    println!("{:?} test accuracy {acc:.2}% ({})", a.kind, s.fold.name);
    Ok(())
}

/// Read back a 3D CNN checkpoint written by `train --model cnn3d`.
pub fn load_cnn3d(path: &Path) -> Result<Cnn3d> {
    let ckpt = read_checkpoint(path)?;
    if ckpt.header["kind"] != "cnn3d" {
        return Err(Error::format(path, "not a 3D CNN checkpoint"));
    }
    let cfg: Cnn3dConfig = serde_json::from_value(ckpt.header["config"].clone())?;
    let mut m = Cnn3d::new(cfg, 0)?;
    m.params_mut().load_flat(&ckpt.params)?;
    Ok(m)
}
