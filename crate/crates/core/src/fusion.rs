//! Macro/Micro fusion: frozen raw-signal (V1) and MUAP-image (V3)
//! transformers whose final class tokens are concatenated and classified by
//! a trainable fully connected stack.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{trunc_normal, AdamConfig, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{read_checkpoint, write_checkpoint, CtHgr, InputKind, ModelConfig};
use crate::train::{self, Classifier, TrainConfig, TrainReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    /// Widths after the token concatenation; the first is the projection.
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub n_classes: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            hidden: vec![1024, 512],
            dropout: 0.2,
            n_classes: 66,
        }
    }
}

/// Optimiser settings for the fusion head: Adam at 3e-4, weight decay
/// 1e-3, batches of 64 for 50 epochs, no annealing.
pub fn fusion_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 50,
        batch_size: 64,
        adam: AdamConfig {
            learning_rate: 3e-4,
            ..AdamConfig::default()
        },
        anneal_after: usize::MAX,
        seed,
        ..TrainConfig::default()
    }
}

#[derive(Clone, Debug)]
pub struct FusionModel {
    pub config: FusionConfig,
    pub macro_path: CtHgr,
    pub micro_path: CtHgr,
    /// Trainable projection and head only.
    pub params: ParamStore,
}

impl FusionModel {
    pub fn new(macro_path: CtHgr, micro_path: CtHgr, config: FusionConfig, seed: u64) -> Result<Self> {
        if macro_path.config.kind != InputKind::Window || micro_path.config.kind != InputKind::Image {
            return Err(Error::Config("fusion needs a window backbone and an image backbone".into()));
        }
        if config.hidden.is_empty() || config.hidden.contains(&0) || config.n_classes < 2 {
            return Err(Error::Config(format!("invalid fusion head {config:?}")));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", config.dropout)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut fan_in = macro_path.config.d_model + micro_path.config.d_model;
        for (i, &w) in config.hidden.iter().chain(std::iter::once(&config.n_classes)).enumerate() {
            let name = match i {
                0 => "proj".to_string(),
                i if i == config.hidden.len() => "head".to_string(),
                i => format!("fc{i}"),
            };
            params.add(format!("{name}.w"), trunc_normal(&[fan_in, w], 1.0 / (fan_in as f64).sqrt(), &mut rng));
            params.add(format!("{name}.b"), Tensor::zeros(vec![w]));
            fan_in = w;
        }
        Ok(Self {
            config,
            macro_path,
            micro_path,
            params,
        })
    }

    pub fn window_len(&self) -> usize {
        self.macro_path.config.input.size()
    }

    pub fn image_len(&self) -> usize {
        self.micro_path.config.input.size()
    }

    /// Concatenate one window and its MUAP image into a fusion sample.
    pub fn sample(window: &[f64], image: &[f64]) -> Vec<f64> {
        let mut s = Vec::with_capacity(window.len() + image.len());
        s.extend_from_slice(window);
        s.extend_from_slice(image);
        s
    }

    /// `sha256` digests of both backbones' parameters.
    pub fn backbone_digests(&self) -> (String, String) {
        (self.macro_path.params.digest(), self.micro_path.params.digest())
    }

    /// Eval-mode class tokens of both backbones, concatenated to `[B, d1+d3]`.
    fn tokens(&self, tape: &mut Tape, inputs: &[&[f64]]) -> Result<Var> {
        let wl = self.window_len();
        let windows: Vec<&[f64]> = inputs.iter().map(|x| &x[..wl]).collect();
        let images: Vec<&[f64]> = inputs.iter().map(|x| &x[wl..]).collect();
        let v1 = self.macro_path.params.bind(tape, false);
        let a = self.macro_path.forward_with(tape, &v1, &windows, false, 0)?.class_token;
        let v3 = self.micro_path.params.bind(tape, false);
        let b = self.micro_path.forward_with(tape, &v3, &images, false, 0)?.class_token;
        tape.concat(&[a, b], 1)
    }

    /// Eval-mode logits `[B, n_classes]`.
    pub fn fuse_forward(&self, inputs: &[&[f64]]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let out = self.logits(&mut tape, &vars, inputs, false, 0)?;
        Ok(tape.value(out).clone())
    }
}

impl Classifier for FusionModel {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn input_len(&self) -> usize {
        self.window_len() + self.image_len()
    }

    fn logits(&self, tape: &mut Tape, vars: &[Var], inputs: &[&[f64]], train: bool, seed: u64) -> Result<Var> {
        let mut h = self.tokens(tape, inputs)?;
        let layers = self.config.hidden.len();
        let mut s = seed;
        for i in 0..=layers {
            h = tape.matmul(h, vars[2 * i])?;
            h = tape.add(h, vars[2 * i + 1])?;
            if i < layers {
                h = tape.gelu(h)?;
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                h = tape.dropout(h, self.config.dropout, train, s)?;
            }
        }
        Ok(h)
    }
}

/// Train only the fusion head; fails if either backbone changed.
pub fn train_fusion(model: &mut FusionModel, inputs: &[&[f64]], labels: &[usize], cfg: &TrainConfig) -> Result<TrainReport> {
    let before = model.backbone_digests();
    let report = train::train(model, inputs, labels, cfg)?;
    let after = model.backbone_digests();
    if before.0 != after.0 {
        return Err(Error::FrozenGradient("macro backbone".into()));
    }
    if before.1 != after.1 {
        return Err(Error::FrozenGradient("micro backbone".into()));
    }
    Ok(report)
}

/// Write a CT-HGR checkpoint with its config in the header.
pub fn save_ct_hgr(model: &CtHgr, path: &Path) -> Result<()> {
    let header = serde_json::json!({ "kind": "ct-hgr", "config": model.config });
    write_checkpoint(path, &header, &model.params.flatten())
}

pub fn load_ct_hgr(path: &Path) -> Result<CtHgr> {
    let ckpt = read_checkpoint(path)?;
    if ckpt.header["kind"] != "ct-hgr" {
        return Err(Error::format(path, "not a CT-HGR checkpoint"));
    }
    let config: ModelConfig = serde_json::from_value(ckpt.header["config"].clone())?;
    CtHgr::from_flat(config, &ckpt.params)
}

/// Write the fusion head; the backbones are referenced by the `sha256` of
/// their checkpoint files, which must already exist.
pub fn save_fusion(model: &FusionModel, path: &Path, macro_ckpt: &Path, micro_ckpt: &Path) -> Result<()> {
    let header = serde_json::json!({
        "kind": "fusion",
        "config": model.config,
        "macro_checkpoint": crate::ingest::sha256_file(macro_ckpt)?,
        "micro_checkpoint": crate::ingest::sha256_file(micro_ckpt)?,
    });
    write_checkpoint(path, &header, &model.params.flatten())
}

/// Load a fusion head and verify that the supplied backbone checkpoints
/// are the ones it was trained on.
pub fn load_fusion(path: &Path, macro_ckpt: &Path, micro_ckpt: &Path) -> Result<FusionModel> {
    let ckpt = read_checkpoint(path)?;
    if ckpt.header["kind"] != "fusion" {
        return Err(Error::format(path, "not a fusion checkpoint"));
    }
    for (key, p) in [("macro_checkpoint", macro_ckpt), ("micro_checkpoint", micro_ckpt)] {
        let found = crate::ingest::sha256_file(p)?;
        let expected = ckpt.header[key].as_str().unwrap_or_default().to_string();
        if found != expected {
            return Err(Error::Checksum {
                path: p.to_path_buf(),
                expected,
                found,
            });
        }
    }
    let config: FusionConfig = serde_json::from_value(ckpt.header["config"].clone())?;
    let mut m = FusionModel::new(load_ct_hgr(macro_ckpt)?, load_ct_hgr(micro_ckpt)?, config, 0)?;
    m.params.load_flat(&ckpt.params)?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Preset;

    fn small() -> FusionModel {
        let mut c1 = ModelConfig::preset(Preset::V1, 32, 16).unwrap();
        let mut c3 = ModelConfig::preset(Preset::V3, 32, 16).unwrap();
        c1.n_classes = 4;
        c3.n_classes = 4;
        let cfg = FusionConfig {
            hidden: vec![16, 8],
            dropout: 0.2,
            n_classes: 4,
        };
        FusionModel::new(CtHgr::new(c1, 1).unwrap(), CtHgr::new(c3, 2).unwrap(), cfg, 3).unwrap()
    }

    #[test]
    fn zero_image_gives_finite_deterministic_logits() {
        let m = small();
        let w: Vec<f64> = (0..m.window_len()).map(|i| (i as f64 * 0.1).sin()).collect();
        let s = FusionModel::sample(&w, &vec![0.0; m.image_len()]);
        let a = m.fuse_forward(&[&s]).unwrap();
        let b = m.fuse_forward(&[&s]).unwrap();
        assert!(a.all_finite());
        assert_eq!(a, b);
    }

    #[test]
    fn backbones_are_bound_as_constants() {
        let m = small();
        let s = vec![0.1; m.input_len()];
        let mut tape = Tape::new();
        let vars = m.params.bind(&mut tape, true);
        let logits = m.logits(&mut tape, &vars, &[&s], true, 7).unwrap();
        let loss = tape.cross_entropy(logits, &[1]).unwrap();
        tape.backward(loss).unwrap();
        assert!(vars.iter().all(|&v| tape.grad(v).is_some()));
        // Backbone leaves follow the head on the tape and carry no gradient.
        let first_backbone = vars.last().unwrap().index() + 1;
        let backbone_leaves = m.macro_path.params.len();
        for i in 0..backbone_leaves {
            let v = crate::autodiff::Var::from_index(first_backbone + i);
            assert!(!tape.requires_grad(v));
        }
    }

    #[test]
    fn zero_epochs_keep_initialization() {
        let mut m = small();
        let init = m.params.flatten();
        let s = vec![0.1; m.input_len()];
        let cfg = TrainConfig {
            epochs: 0,
            ..fusion_train_config(0)
        };
        train_fusion(&mut m, &[&s, &s], &[0, 1], &cfg).unwrap();
        assert_eq!(m.params.flatten(), init);
    }

    #[test]
    fn checkpoints_reference_backbones_by_hash() {
        let dir = tempfile::tempdir().unwrap();
        let m = small();
        let (p1, p3, pf) = (dir.path().join("v1"), dir.path().join("v3"), dir.path().join("f"));
        save_ct_hgr(&m.macro_path, &p1).unwrap();
        save_ct_hgr(&m.micro_path, &p3).unwrap();
        save_fusion(&m, &pf, &p1, &p3).unwrap();
        let back = load_fusion(&pf, &p1, &p3).unwrap();
        assert_eq!(back.config, m.config);
        assert!(matches!(load_fusion(&pf, &p3, &p1), Err(Error::Checksum { .. })));
    }
}
