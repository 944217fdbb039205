use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What a model consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputKind {
    /// `W × N_ch × N_cv` signal window.
    Window,
    /// Single-channel 2D image (peak-to-peak MUAP map).
    Image,
}

/// Input extent as `rows × cols × depth`: `W × N_ch × N_cv` for windows,
/// `8 × N_ch × 1` for MUAP images.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputShape {
    pub rows: usize,
    pub cols: usize,
    pub depth: usize,
}

impl InputShape {
    pub fn size(&self) -> usize {
        self.rows * self.cols * self.depth
    }
}

/// Patch extent: `h` along rows (time), `v` along columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchSpec {
    pub h: usize,
    pub v: usize,
}

/// Denominator of the attention logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionScale {
    /// `√(d/h)`, the width of one head.
    PerHead,
    /// `√d`.
    Model,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    V1,
    V2,
    V3,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "V1" => Ok(Preset::V1),
            "V2" => Ok(Preset::V2),
            "V3" => Ok(Preset::V3),
            _ => Err(Error::Config(format!("unknown preset `{s}` (expected V1, V2 or V3)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_hidden: usize,
    pub n_classes: usize,
    pub kind: InputKind,
    pub input: InputShape,
    pub patch: PatchSpec,
    pub dropout: f64,
    pub attention_scale: AttentionScale,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("d = {} must be a positive multiple of h = {}", self.d_model, self.heads));
        }
        if self.n_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.n_classes));
        }
        if self.mlp_hidden == 0 || self.input.size() == 0 {
            return bad("MLP width and input extent must be positive".into());
        }
        let (i, p) = (self.input, self.patch);
        if p.h == 0 || p.v == 0 || i.rows % p.h != 0 || i.cols % p.v != 0 {
            return bad(format!(
                "patch {}×{} does not tile the {}×{} input",
                p.h, p.v, i.rows, i.cols
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// `N = rows·cols / (h·v)`.
    pub fn n_patches(&self) -> usize {
        (self.input.rows / self.patch.h) * (self.input.cols / self.patch.v)
    }

    /// Flattened patch length `h·v·depth`.
    pub fn patch_dim(&self) -> usize {
        self.patch.h * self.patch.v * self.input.depth
    }

    pub fn seq_len(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Published architecture for `channels` electrodes (32, 64 or 128)
    /// and window length `window`.
    pub fn preset(preset: Preset, channels: usize, window: usize) -> Result<Self> {
        if ![32, 64, 128].contains(&channels) {
            return Err(Error::Config(format!("channel count must be 32, 64 or 128, got {channels}")));
        }
        if window == 0 {
            return Err(Error::Config("window length must be positive".into()));
        }
        let n_h = channels / 8;
        let patch_h = if window == 1 { 1 } else { 8 };
        let base = ModelConfig {
            d_model: 64,
            heads: 8,
            layers: 1,
            mlp_hidden: 64,
            n_classes: 66,
            kind: InputKind::Window,
            input: InputShape {
                rows: window,
                cols: n_h,
                depth: 8,
            },
            patch: PatchSpec { h: patch_h, v: n_h },
            dropout: 0.0,
            attention_scale: AttentionScale::PerHead,
        };
        let cfg = match preset {
            Preset::V1 => base,
            Preset::V2 => ModelConfig {
                d_model: 128,
                mlp_hidden: 256,
                ..base
            },
            Preset::V3 => ModelConfig {
                kind: InputKind::Image,
                input: InputShape {
                    rows: 8,
                    cols: n_h,
                    depth: 1,
                },
                patch: PatchSpec { h: 8, v: n_h.min(8) },
                ..base
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Published parameter counts: `(preset, channels, window, count)`.
pub const PUBLISHED_COUNTS: [(Preset, usize, usize, usize); 14] = [
    (Preset::V1, 32, 64, 46_530),
    (Preset::V1, 32, 128, 47_042),
    (Preset::V1, 32, 256, 48_066),
    (Preset::V1, 64, 64, 62_914),
    (Preset::V1, 64, 128, 63_426),
    (Preset::V1, 64, 256, 64_450),
    (Preset::V1, 128, 64, 95_682),
    (Preset::V1, 128, 128, 96_194),
    (Preset::V1, 128, 256, 97_218),
    (Preset::V1, 128, 512, 99_266),
    (Preset::V2, 128, 64, 273_346),
    (Preset::V2, 128, 128, 274_370),
    (Preset::V2, 128, 256, 276_418),
    (Preset::V2, 128, 512, 280_514),
];

/// The published count for a preset/geometry, when there is one.
pub fn published_count(preset: Preset, channels: usize, window: usize) -> Option<usize> {
    PUBLISHED_COUNTS
        .iter()
        .find(|&&(p, c, w, _)| p == preset && c == channels && w == window)
        .map(|e| e.3)
}

/// Closed-form learnable-scalar count: patch projection (no bias),
/// `N+1` positional rows, class token, per-layer two LayerNorms, Q/K/V/O
/// projections and a two-layer MLP (all with biases), and the linear head.
pub fn count_parameters(cfg: &ModelConfig) -> usize {
    let d = cfg.d_model;
    let m = cfg.mlp_hidden;
    let embedding = cfg.patch_dim() * d + cfg.seq_len() * d + d;
    let layer = 2 * d + 4 * (d * d + d) + 2 * d + (d * m + m) + (m * d + d);
    let head = d * cfg.n_classes + cfg.n_classes;
    embedding + cfg.layers * layer + head
}
