//! Experiment configuration, per-subject preprocessing and fold jobs.

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::AdamConfig;
use crate::baselines::{extract_features, Cnn3d, Cnn3dConfig, LinearSvm, SvmConfig};
use crate::decomp::{decompose_batch, DecompConfig};
use crate::dsp::{envelope_recording, segment, ChannelScaler, PreprocessConfig, WindowBatch, WindowSpec};
use crate::error::{Error, Result};
use crate::fusion::{fusion_train_config, train_fusion, FusionConfig, FusionModel};
use crate::ingest::{
    load_recording, remove_rest, select_channels, synthesize_dataset, validate_manifest, ChannelMode, Recording,
    SynthSpec, FULL_CHANNELS, MAX_GESTURE,
};
use crate::model::{positional_cosine_matrix, CtHgr, ModelConfig, Preset};
use crate::train::{self, mix_seed, Classifier, TrainConfig};

use super::folds::{make_folds, Fold, FoldPlan};
use super::stats::confusion_matrix;

pub const CONFIG_VERSION: u32 = 1;

/// Worker-count override for fold × subject jobs.
pub const WORKERS_ENV: &str = "CTHGR_WORKERS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    /// `subjects` recordings from `spec`, the i-th seeded with `spec.seed + i`.
    Synthetic {
        spec: SynthSpec,
        #[serde(default = "one")]
        subjects: usize,
    },
    /// A dataset manifest written by `ingest convert`.
    Manifest { path: PathBuf },
}

fn one() -> usize {
    1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    CtHgr,
    Svm,
    Cnn3d,
    /// Macro (window) and Micro (MUAP image) transformers plus a fusion head.
    Fused,
}

/// Architecture fields that replace a preset's values when present.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelOverrides {
    pub d_model: Option<usize>,
    pub heads: Option<usize>,
    pub layers: Option<usize>,
    pub mlp_hidden: Option<usize>,
    pub dropout: Option<f64>,
}

impl ModelOverrides {
    pub fn apply(&self, mut cfg: ModelConfig) -> ModelConfig {
        cfg.d_model = self.d_model.unwrap_or(cfg.d_model);
        cfg.heads = self.heads.unwrap_or(cfg.heads);
        cfg.layers = self.layers.unwrap_or(cfg.layers);
        cfg.mlp_hidden = self.mlp_hidden.unwrap_or(cfg.mlp_hidden);
        cfg.dropout = self.dropout.unwrap_or(cfg.dropout);
        cfg
    }
}

/// Micro path optimiser: Adam at 3e-4 with weight decay 1e-3, batches of
/// 64 for 50 epochs.
pub fn micro_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 50,
        batch_size: 64,
        adam: AdamConfig {
            learning_rate: 3e-4,
            weight_decay: 1e-3,
            ..AdamConfig::default()
        },
        anneal_after: usize::MAX,
        ..TrainConfig::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Transformer preset for `ct-hgr`; the Macro path of `fused` is V1.
    pub preset: Preset,
    pub overrides: ModelOverrides,
    pub svm: SvmConfig,
    /// Dead band for the zero-crossing and slope-sign-change features.
    pub feature_deadband: f64,
    pub micro_overrides: ModelOverrides,
    pub micro_train: TrainConfig,
    pub decomp: DecompConfig,
    pub fusion: FusionConfig,
    pub fusion_train: TrainConfig,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            kind: ModelKind::CtHgr,
            preset: Preset::V1,
            overrides: ModelOverrides::default(),
            svm: SvmConfig::default(),
            feature_deadband: 0.0,
            micro_overrides: ModelOverrides::default(),
            micro_train: micro_train_config(),
            decomp: DecompConfig::default(),
            fusion: FusionConfig::default(),
            fusion_train: fusion_train_config(0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub data: DataSource,
    pub channels: ChannelMode,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    pub window: WindowSpec,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub folds: FoldPlan,
    /// Defaults to the synthetic class count, or 66 for recorded data.
    #[serde(default)]
    pub n_classes: Option<usize>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Parse and validate; unknown keys anywhere are errors.
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let cfg: Self = serde_json::from_slice(bytes).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} unsupported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.window.window_len == 0 || self.window.skip == 0 {
            return Err(Error::Config("window length and skip must be ≥ 1".into()));
        }
        if let DataSource::Synthetic { subjects, .. } = &self.data {
            if *subjects == 0 {
                return Err(Error::Config("need at least one synthetic subject".into()));
            }
        }
        let n = self.class_count();
        if !(2..=MAX_GESTURE as usize).contains(&n) {
            return Err(Error::Config(format!("class count {n} outside 2..=66")));
        }
        self.train.validate()?;
        if self.model.kind == ModelKind::Fused {
            self.model.micro_train.validate()?;
            self.model.fusion_train.validate()?;
            self.model.decomp.validate()?;
        }
        if self.model.kind == ModelKind::CtHgr && self.model.preset == Preset::V3 {
            return Err(Error::Config("the V3 preset takes MUAP images; use the fused model".into()));
        }
        self.model_config(self.model.preset)?;
        Ok(())
    }

    pub fn class_count(&self) -> usize {
        self.n_classes.unwrap_or(match &self.data {
            DataSource::Synthetic { spec, .. } => spec.n_classes,
            DataSource::Manifest { .. } => MAX_GESTURE as usize,
        })
    }

    /// Copy with every default materialised.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.n_classes = Some(self.class_count());
        c.model.fusion.n_classes = self.class_count();
        c.train.seed = self.seed;
        c
    }

    /// `sha256` of the resolved config without its output directory.
    pub fn hash(&self) -> String {
        let mut c = self.resolved();
        c.output_dir = None;
        let bytes = serde_json::to_vec(&c).expect("config serialises");
        hex::encode(Sha256::digest(bytes))
    }

    /// Transformer architecture for `preset` on this experiment's input.
    pub fn model_config(&self, preset: Preset) -> Result<ModelConfig> {
        let overrides = if preset == Preset::V3 {
            self.model.micro_overrides
        } else {
            self.model.overrides
        };
        let mut cfg = overrides.apply(ModelConfig::preset(preset, self.channels.channels(), self.window.window_len)?);
        cfg.n_classes = self.class_count();
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn load_subjects(source: &DataSource) -> Result<Vec<Recording>> {
    match source {
        DataSource::Synthetic { spec, subjects } => (0..*subjects)
            .map(|i| {
                let s = SynthSpec {
                    subject_id: format!("{}-{}", spec.subject_id, i + 1),
                    seed: spec.seed.wrapping_add(i as u64),
                    ..spec.clone()
                };
                synthesize_dataset(&s)
            })
            .collect(),
        DataSource::Manifest { path } => {
            let m = validate_manifest(path)?;
            let base = path.parent().map(PathBuf::from).unwrap_or_default();
            m.subjects.iter().map(|e| load_recording(&base.join(&e.path))).collect()
        }
    }
}

/// Reduce a recording to the configured electrode subset. Recordings that
/// already have exactly that many channels pass through unchanged.
pub fn apply_channel_mode(rec: &Recording, mode: ChannelMode) -> Result<Recording> {
    if rec.n_channels() == FULL_CHANNELS {
        select_channels(rec, mode)
    } else if rec.n_channels() == mode.channels() {
        Ok(rec.clone())
    } else {
        Err(Error::Config(format!(
            "recording has {} channels; mode {mode:?} needs {} or {FULL_CHANNELS}",
            rec.n_channels(),
            mode.channels()
        )))
    }
}

/// Windows of one subject before normalisation.
#[derive(Clone, Debug)]
pub struct PreparedSubject {
    pub subject_id: String,
    /// Rectified low-pass envelope windows.
    pub envelope: WindowBatch,
    /// Raw windows at the same positions, kept for decomposition.
    pub raw: Option<WindowBatch>,
}

/// Channel subset, envelope over the continuous recording, rest removal,
/// then windowing within each gesture run.
pub fn prepare_subject(rec: &Recording, cfg: &ExperimentConfig, keep_raw: bool) -> Result<PreparedSubject> {
    let rec = apply_channel_mode(rec, cfg.channels)?;
    let env = envelope_recording(&rec, &cfg.preprocess)?;
    let envelope = segment(&remove_rest(&env), cfg.window);
    if envelope.is_empty() {
        return Err(Error::Data(format!("subject {} yields no windows", rec.subject_id)));
    }
    let raw = keep_raw.then(|| segment(&remove_rest(&rec), cfg.window));
    Ok(PreparedSubject {
        subject_id: rec.subject_id.clone(),
        envelope,
        raw,
    })
}

/// Zero-based class indices from 1-based gesture labels.
pub fn class_indices(labels: &[u8], n_classes: usize) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|&l| {
            if l == 0 || l as usize > n_classes {
                Err(Error::Data(format!("gesture label {l} outside 1..={n_classes}")))
            } else {
                Ok(l as usize - 1)
            }
        })
        .collect()
}

/// Test-set result of one model on one fold of one subject.
#[derive(Clone, Debug, PartialEq)]
pub struct ArmOutcome {
    pub arm: String,
    pub parameter_count: usize,
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub confusion: Vec<Vec<u64>>,
    pub positional_cosine: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JobOutcome {
    pub subject: usize,
    pub fold: String,
    pub n_train: usize,
    pub n_test: usize,
    pub arms: Vec<ArmOutcome>,
    /// Training windows that also appear in the test set (always 0).
    pub overlap: usize,
    pub seconds: f64,
}

fn refs(batch: &WindowBatch, idx: &[usize]) -> Vec<Vec<f64>> {
    idx.iter().map(|&i| batch.window(i).to_vec()).collect()
}

fn as_slices(v: &[Vec<f64>]) -> Vec<&[f64]> {
    v.iter().map(Vec::as_slice).collect()
}

fn outcome<M: Classifier>(
    arm: &str,
    model: &M,
    train_acc: f64,
    test: &[&[f64]],
    truth: &[usize],
    n_classes: usize,
    batch_size: usize,
) -> Result<ArmOutcome> {
    let pred = train::predict(model, test, batch_size)?;
    Ok(ArmOutcome {
        arm: arm.into(),
        parameter_count: model.params().scalar_count(),
        accuracy: train::accuracy(&pred, truth),
        train_accuracy: train_acc,
        confusion: confusion_matrix(truth, &pred, n_classes),
        positional_cosine: None,
    })
}

/// Per-channel μ-law normalisation with constants from training windows only.
pub fn normalise(batch: &WindowBatch, train_idx: &[usize], mu: f64) -> Result<WindowBatch> {
    ChannelScaler::fit(batch, train_idx).mu_law(batch, mu)
}

/// Train and test every model of the experiment on one fold.
pub fn run_job(
    cfg: &ExperimentConfig,
    subject: &PreparedSubject,
    images: Option<&[Vec<f64>]>,
    fold: &Fold,
    seed: u64,
) -> Result<Vec<ArmOutcome>> {
    if fold.train.is_empty() {
        return Err(Error::Data(format!("{} of {} has an empty training set", fold.name, subject.subject_id)));
    }
    let n_classes = cfg.class_count();
    let batch = normalise(&subject.envelope, &fold.train, cfg.preprocess.mu)?;
    let labels = class_indices(&batch.labels, n_classes)?;
    let ytr: Vec<usize> = fold.train.iter().map(|&i| labels[i]).collect();
    let yte: Vec<usize> = fold.test.iter().map(|&i| labels[i]).collect();
    let (xtr, xte) = (refs(&batch, &fold.train), refs(&batch, &fold.test));
    let (xtr, xte) = (as_slices(&xtr), as_slices(&xte));
    let tcfg = TrainConfig {
        seed: mix_seed(seed, 2),
        ..cfg.train
    };
    let bs = tcfg.batch_size;

    match cfg.model.kind {
        ModelKind::CtHgr => {
            let mut m = CtHgr::new(cfg.model_config(cfg.model.preset)?, mix_seed(seed, 1))?;
            let r = train::train(&mut m, &xtr, &ytr, &tcfg)?;
            let mut o = outcome("ct-hgr", &m, r.train_accuracy, &xte, &yte, n_classes, bs)?;
            o.positional_cosine = Some(positional_cosine_matrix(&m)?);
            Ok(vec![o])
        }
        ModelKind::Cnn3d => {
            let c = Cnn3dConfig::new(batch.window_len, batch.n_horizontal, batch.n_vertical, n_classes);
            let mut m = Cnn3d::new(c, mix_seed(seed, 1))?;
            let r = train::train(&mut m, &xtr, &ytr, &tcfg)?;
            Ok(vec![outcome("cnn3d", &m, r.train_accuracy, &xte, &yte, n_classes, bs)?])
        }
        ModelKind::Svm => {
            let ch = batch.frame_len();
            let feats = |xs: &[&[f64]]| -> Result<Vec<Vec<f64>>> {
                xs.iter().map(|x| extract_features(x, ch, cfg.model.feature_deadband)).collect()
            };
            let (ftr, fte) = (feats(&xtr)?, feats(&xte)?);
            let svm_cfg = SvmConfig {
                seed: mix_seed(seed, 3),
                ..cfg.model.svm
            };
            let m = LinearSvm::train(&as_slices(&ftr), &ytr, n_classes, &svm_cfg)?;
            let ptr: Vec<usize> = ftr.iter().map(|f| m.predict(f)).collect();
            let pte: Vec<usize> = fte.iter().map(|f| m.predict(f)).collect();
            Ok(vec![ArmOutcome {
                arm: "svm".into(),
                parameter_count: m.weights.len(),
                accuracy: train::accuracy(&pte, &yte),
                train_accuracy: train::accuracy(&ptr, &ytr),
                confusion: confusion_matrix(&yte, &pte, n_classes),
                positional_cosine: None,
            }])
        }
        ModelKind::Fused => {
            let images = images.ok_or_else(|| Error::Data("fused model needs MUAP images".into()))?;
            let scale = fold
                .train
                .iter()
                .flat_map(|&i| images[i].iter())
                .fold(0.0f64, |m, v| m.max(v.abs()));
            let scale = if scale > 0.0 { scale } else { 1.0 };
            let scaled: Vec<Vec<f64>> = images.iter().map(|im| im.iter().map(|v| v / scale).collect()).collect();
            let itr: Vec<&[f64]> = fold.train.iter().map(|&i| scaled[i].as_slice()).collect();
            let ite: Vec<&[f64]> = fold.test.iter().map(|&i| scaled[i].as_slice()).collect();

            let mut v1 = CtHgr::new(cfg.model_config(Preset::V1)?, mix_seed(seed, 1))?;
            let r1 = train::train(&mut v1, &xtr, &ytr, &tcfg)?;
            let o1 = outcome("macro", &v1, r1.train_accuracy, &xte, &yte, n_classes, bs)?;

            let mcfg = TrainConfig {
                seed: mix_seed(seed, 4),
                ..cfg.model.micro_train
            };
            let mut v3 = CtHgr::new(cfg.model_config(Preset::V3)?, mix_seed(seed, 5))?;
            let r3 = train::train(&mut v3, &itr, &ytr, &mcfg)?;
            let o3 = outcome("micro", &v3, r3.train_accuracy, &ite, &yte, n_classes, mcfg.batch_size)?;

            let head = FusionConfig {
                n_classes,
                ..cfg.model.fusion.clone()
            };
            let mut fm = FusionModel::new(v1, v3, head, mix_seed(seed, 6))?;
            let ftr: Vec<Vec<f64>> = xtr.iter().zip(&itr).map(|(w, im)| FusionModel::sample(w, im)).collect();
            let fte: Vec<Vec<f64>> = xte.iter().zip(&ite).map(|(w, im)| FusionModel::sample(w, im)).collect();
            let fcfg = TrainConfig {
                seed: mix_seed(seed, 7),
                ..cfg.model.fusion_train
            };
            let rf = train_fusion(&mut fm, &as_slices(&ftr), &ytr, &fcfg)?;
            let of = outcome("fused", &fm, rf.train_accuracy, &as_slices(&fte), &yte, n_classes, fcfg.batch_size)?;
            Ok(vec![o1, o3, of])
        }
    }
}

/// Worker count from [`WORKERS_ENV`], else the available parallelism.
pub fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Run `n` independent jobs on at most `workers` threads; results come
/// back in job order whatever the scheduling.
pub fn run_pool<T: Send>(n: usize, workers: usize, job: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let r = job(i);
                slots.lock().expect("result slots")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

/// Prepare every subject, build folds and run all subject × fold jobs.
/// Returns the subject ids and the outcomes in (subject, fold) order.
pub fn run_jobs(cfg: &ExperimentConfig, recordings: &[Recording], workers: usize) -> Result<(Vec<String>, Vec<JobOutcome>)> {
    cfg.validate()?;
    let fused = cfg.model.kind == ModelKind::Fused;
    let subjects = run_pool(recordings.len(), workers, |i| prepare_subject(&recordings[i], cfg, fused))?;
    for s in &subjects {
        log::info!("{}: {} windows", s.subject_id, s.envelope.len());
    }
    let images: Vec<Option<Vec<Vec<f64>>>> = if fused {
        run_pool(subjects.len(), workers, |i| {
            let raw = subjects[i].raw.as_ref().expect("raw windows kept");
            let dec = DecompConfig {
                seed: mix_seed(cfg.seed, 1000 + i as u64),
                ..cfg.model.decomp
            };
            let sets = decompose_batch(raw, &dec)?;
            let units: usize = sets.iter().map(|(t, _)| t.len()).sum();
            log::info!("{}: {units} motor units over {} windows", subjects[i].subject_id, sets.len());
            Ok(Some(sets.into_iter().map(|(_, im)| im.aggregate).collect()))
        })?
    } else {
        vec![None; subjects.len()]
    };
    let folds: Vec<Vec<Fold>> = subjects
        .iter()
        .map(|s| make_folds(&s.envelope, &cfg.folds))
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = folds
        .iter()
        .enumerate()
        .flat_map(|(s, f)| (0..f.len()).map(move |k| (s, k)))
        .collect();
    let outcomes = run_pool(jobs.len(), workers, |j| {
        let (s, k) = jobs[j];
        let fold = &folds[s][k];
        let t0 = Instant::now();
        let seed = mix_seed(mix_seed(cfg.seed, s as u64), k as u64);
        let arms = run_job(cfg, &subjects[s], images[s].as_deref(), fold, seed)?;
        let overlap = fold.train.iter().filter(|i| fold.test.binary_search(i).is_ok()).count();
        for a in &arms {
            log::info!("{} {} {}: test {:.2}%", subjects[s].subject_id, fold.name, a.arm, a.accuracy);
        }
        Ok(JobOutcome {
            subject: s,
            fold: fold.name.clone(),
            n_train: fold.train.len(),
            n_test: fold.test.len(),
            arms,
            overlap,
            seconds: t0.elapsed().as_secs_f64(),
        })
    })?;
    Ok((subjects.into_iter().map(|s| s.subject_id).collect(), outcomes))
}
