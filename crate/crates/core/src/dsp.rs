//! Preprocessing: rectified low-pass envelope, μ-law companding and
//! windowing into `W × N_ch × N_cv` samples.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::ingest::Recording;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterMode {
    Causal,
    ZeroPhase,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub mu: f64,
    pub cutoff_hz: f64,
    pub rectify: bool,
    pub filter_mode: FilterMode,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            mu: 255.0,
            cutoff_hz: 1.0,
            rectify: true,
            filter_mode: FilterMode::Causal,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self, sampling_rate_hz: f64) -> Result<()> {
        if !(self.mu > 0.0) {
            return Err(Error::Config(format!("μ must be positive, got {}", self.mu)));
        }
        LowpassCoefficients::design(self.cutoff_hz, sampling_rate_hz).map(|_| ())
    }
}

/// First-order Butterworth low-pass from the bilinear transform with a
/// pre-warped corner: `y[n] = b0·x[n] + b1·x[n−1] − a1·y[n−1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LowpassCoefficients {
    pub b0: f64,
    pub b1: f64,
    pub a1: f64,
}

impl LowpassCoefficients {
    pub fn design(cutoff_hz: f64, sampling_rate_hz: f64) -> Result<Self> {
        if !(cutoff_hz > 0.0 && cutoff_hz < sampling_rate_hz / 2.0) {
            return Err(Error::Config(format!(
                "cutoff {cutoff_hz} Hz must lie in (0, {}) Hz",
                sampling_rate_hz / 2.0
            )));
        }
        let k = (PI * cutoff_hz / sampling_rate_hz).tan();
        let b0 = k / (1.0 + k);
        Ok(Self {
            b0,
            b1: b0,
            a1: (k - 1.0) / (1.0 + k),
        })
    }

    /// `|H(e^{jω})|` at `freq_hz`, evaluated from the coefficients.
    pub fn magnitude(&self, freq_hz: f64, sampling_rate_hz: f64) -> f64 {
        let w = 2.0 * PI * freq_hz / sampling_rate_hz;
        let (c, s) = (w.cos(), w.sin());
        let num = ((self.b0 + self.b1 * c).powi(2) + (self.b1 * s).powi(2)).sqrt();
        let den = ((1.0 + self.a1 * c).powi(2) + (self.a1 * s).powi(2)).sqrt();
        num / den
    }

    fn run(&self, x: impl Iterator<Item = f64>, out: &mut Vec<f64>) {
        let (mut x1, mut y1) = (0.0, 0.0);
        for xn in x {
            let y = self.b0 * xn + self.b1 * x1 - self.a1 * y1;
            out.push(y);
            x1 = xn;
            y1 = y;
        }
    }
}

/// Low-pass `x` from a zero initial state. Zero-phase mode runs the
/// filter forward and then over the time-reversed output.
pub fn butterworth_lowpass(x: &[f64], cutoff_hz: f64, sampling_rate_hz: f64, mode: FilterMode) -> Result<Vec<f64>> {
    let coeffs = LowpassCoefficients::design(cutoff_hz, sampling_rate_hz)?;
    let mut fwd = Vec::with_capacity(x.len());
    coeffs.run(x.iter().copied(), &mut fwd);
    Ok(match mode {
        FilterMode::Causal => fwd,
        FilterMode::ZeroPhase => {
            let mut back = Vec::with_capacity(x.len());
            coeffs.run(fwd.iter().rev().copied(), &mut back);
            back.reverse();
            back
        }
    })
}

/// Rectify (when enabled) and low-pass one channel.
pub fn envelope(channel: &[f64], cfg: &PreprocessConfig, sampling_rate_hz: f64) -> Result<Vec<f64>> {
    if cfg.rectify {
        let rect: Vec<f64> = channel.iter().map(|v| v.abs()).collect();
        butterworth_lowpass(&rect, cfg.cutoff_hz, sampling_rate_hz, cfg.filter_mode)
    } else {
        butterworth_lowpass(channel, cfg.cutoff_hz, sampling_rate_hz, cfg.filter_mode)
    }
}

/// Envelope of every channel of a recording.
pub fn envelope_recording(rec: &Recording, cfg: &PreprocessConfig) -> Result<Recording> {
    let fs = rec.layout.sampling_rate_hz;
    cfg.validate(fs)?;
    rec.map_channels(|ch| envelope(ch, cfg, fs))
}

/// `sign(x)·ln(1 + μ|x|)/ln(1 + μ)` for `x ∈ [−1, 1]`.
pub fn mu_law(x: f64, mu: f64) -> Result<f64> {
    if !(x.abs() <= 1.0) {
        return Err(Error::Domain(x));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    Ok(x.signum() * (mu * x.abs()).ln_1p() / mu.ln_1p())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub window_len: usize,
    pub skip: usize,
}

impl WindowSpec {
    pub fn new(window_len: usize, skip: usize) -> Result<Self> {
        if window_len == 0 || skip == 0 {
            return Err(Error::Config(format!(
                "window length and skip must be ≥ 1, got {window_len}/{skip}"
            )));
        }
        Ok(Self { window_len, skip })
    }

    /// Hop of 32 samples, 64 for windows of 512 and longer, 1 for
    /// single-sample windows.
    pub fn with_default_skip(window_len: usize) -> Result<Self> {
        let skip = match window_len {
            1 => 1,
            w if w >= 512 => 64,
            _ => 32,
        };
        Self::new(window_len, skip)
    }

    /// Windows that fit in a run of `run_len` samples.
    pub fn count(&self, run_len: usize) -> usize {
        if run_len < self.window_len {
            0
        } else {
            (run_len - self.window_len) / self.skip + 1
        }
    }
}

/// Windowed samples `[n × W × N_ch × N_cv]` with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowBatch {
    pub window_len: usize,
    pub n_horizontal: usize,
    pub n_vertical: usize,
    pub samples: Vec<f64>,
    pub labels: Vec<u8>,
    /// Repetition of each window.
    pub fold_key: Vec<u8>,
    /// First sample of each window in the rest-free recording.
    pub starts: Vec<usize>,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn frame_len(&self) -> usize {
        self.n_horizontal * self.n_vertical
    }

    pub fn window_size(&self) -> usize {
        self.window_len * self.frame_len()
    }

    pub fn window(&self, i: usize) -> &[f64] {
        let n = self.window_size();
        &self.samples[i * n..(i + 1) * n]
    }

    pub fn subset(&self, indices: &[usize]) -> WindowBatch {
        let mut samples = Vec::with_capacity(indices.len() * self.window_size());
        for &i in indices {
            samples.extend_from_slice(self.window(i));
        }
        WindowBatch {
            samples,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            fold_key: indices.iter().map(|&i| self.fold_key[i]).collect(),
            starts: indices.iter().map(|&i| self.starts[i]).collect(),
            ..*self
        }
    }

    /// Write `<path>` (magic `EMGW`, dims n, W, N_ch, N_cv) and a JSON
    /// sidecar with labels, repetitions, window starts and `meta`.
    pub fn write(&self, path: &Path, meta: &serde_json::Value) -> Result<()> {
        container::write(
            path,
            b"EMGW",
            &[self.len(), self.window_len, self.n_horizontal, self.n_vertical],
            &self.samples,
        )?;
        let side = serde_json::json!({
            "labels": self.labels,
            "fold_key": self.fold_key,
            "starts": self.starts,
            "meta": meta,
        });
        fs::write(path.with_extension("json"), serde_json::to_vec_pretty(&side)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let (dims, samples) = container::read(path, b"EMGW", 4)?;
        #[derive(Deserialize)]
        struct Side {
            labels: Vec<u8>,
            fold_key: Vec<u8>,
            starts: Vec<usize>,
        }
        let side: Side = serde_json::from_slice(&fs::read(path.with_extension("json"))?)?;
        if side.labels.len() != dims[0] || side.fold_key.len() != dims[0] || side.starts.len() != dims[0] {
            return Err(Error::LengthMismatch {
                samples: dims[0],
                annotations: side.labels.len(),
            });
        }
        Ok(Self {
            window_len: dims[1],
            n_horizontal: dims[2],
            n_vertical: dims[3],
            samples,
            labels: side.labels,
            fold_key: side.fold_key,
            starts: side.starts,
        })
    }
}

/// Maximal runs `(start, len)` of constant (label, repetition), skipping
/// rest.
pub fn label_runs(rec: &Recording) -> Vec<(usize, usize)> {
    let (labels, reps) = (rec.gesture_label(), rec.repetition());
    let mut runs = Vec::new();
    let mut start = 0;
    for t in 1..=labels.len() {
        if t == labels.len() || labels[t] != labels[start] || reps[t] != reps[start] {
            if labels[start] != 0 {
                runs.push((start, t - start));
            }
            start = t;
        }
    }
    runs
}

/// Cut windows inside every (gesture, repetition) run; windows never span
/// a run boundary.
pub fn segment(rec: &Recording, spec: WindowSpec) -> WindowBatch {
    let c = rec.n_channels();
    let mut batch = WindowBatch {
        window_len: spec.window_len,
        n_horizontal: rec.layout.n_horizontal,
        n_vertical: rec.layout.n_vertical,
        samples: Vec::new(),
        labels: Vec::new(),
        fold_key: Vec::new(),
        starts: Vec::new(),
    };
    for (start, len) in label_runs(rec) {
        for i in 0..spec.count(len) {
            let s = start + i * spec.skip;
            batch
                .samples
                .extend_from_slice(&rec.signal()[s * c..(s + spec.window_len) * c]);
            batch.labels.push(rec.gesture_label()[s]);
            batch.fold_key.push(rec.repetition()[s]);
            batch.starts.push(s);
        }
    }
    batch
}

/// Per-channel amplitude scale fitted on training windows only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelScaler {
    pub max_abs: Vec<f64>,
}

impl ChannelScaler {
    pub fn fit(batch: &WindowBatch, train: &[usize]) -> Self {
        let c = batch.frame_len();
        let mut max_abs = vec![0.0f64; c];
        for &i in train {
            for frame in batch.window(i).chunks(c) {
                for (m, v) in max_abs.iter_mut().zip(frame) {
                    *m = m.max(v.abs());
                }
            }
        }
        Self { max_abs }
    }

    /// Scale by the fitted maxima, clip to `[−1, 1]` (unseen windows may
    /// exceed the training range) and apply μ-law.
    pub fn mu_law(&self, batch: &WindowBatch, mu: f64) -> Result<WindowBatch> {
        let c = batch.frame_len();
        if c != self.max_abs.len() {
            return Err(Error::Shape(format!(
                "scaler fitted on {} channels, batch has {c}",
                self.max_abs.len()
            )));
        }
        let mut out = batch.clone();
        for (i, v) in out.samples.iter_mut().enumerate() {
            let m = self.max_abs[i % c];
            let x = if m > 0.0 { (*v / m).clamp(-1.0, 1.0) } else { 0.0 };
            *v = mu_law(x, mu)?;
        }
        Ok(out)
    }
}
