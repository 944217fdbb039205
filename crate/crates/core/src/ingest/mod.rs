//! Annotated HD-sEMG recordings: the in-memory type, rest removal,
//! channel subsets, the canonical on-disk format and a synthetic
//! generator for desk-scale experiments.

mod format;
mod synth;

pub use format::{
    convert_csv, convert_raw_f32, load_recording, read_manifest, sha256_file, validate_manifest,
    write_manifest, write_recording, Manifest, ManifestEntry, EMG_MAGIC, FORMAT_VERSION,
};
pub use synth::{synthesize_dataset, MotorUnitMixture, MixtureSpec, SynthSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Highest gesture label; 0 marks rest.
pub const MAX_GESTURE: u8 = 66;
/// Highest repetition index; 0 marks rest.
pub const MAX_REPETITION: u8 = 5;
/// Channels in the full pair of 8×8 grids.
pub const FULL_CHANNELS: usize = 128;

/// Electrode grid geometry: `n_horizontal` columns by `n_vertical` rows.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridLayout {
    pub n_horizontal: usize,
    pub n_vertical: usize,
    pub sampling_rate_hz: f64,
}

impl GridLayout {
    pub fn hd(n_horizontal: usize) -> Self {
        Self {
            n_horizontal,
            n_vertical: 8,
            sampling_rate_hz: 2048.0,
        }
    }

    pub fn channels(&self) -> usize {
        self.n_horizontal * self.n_vertical
    }

    /// Check the HD grid geometry consumed by windowing and the models:
    /// 8 vertical rows and 4, 8 or 16 horizontal columns.
    pub fn validate_hd(&self) -> Result<()> {
        if self.n_vertical != 8 || ![4, 8, 16].contains(&self.n_horizontal) {
            return Err(Error::Config(format!(
                "HD grid must be 4|8|16 × 8, got {} × {}",
                self.n_horizontal, self.n_vertical
            )));
        }
        self.validate()
    }

    fn validate(&self) -> Result<()> {
        if !(self.sampling_rate_hz > 0.0 && self.sampling_rate_hz.is_finite()) {
            return Err(Error::Config(format!(
                "sampling rate must be positive, got {}",
                self.sampling_rate_hz
            )));
        }
        if self.channels() == 0 {
            return Err(Error::Config("grid has no channels".into()));
        }
        Ok(())
    }
}

/// One subject's multi-channel recording with per-sample annotations.
/// `signal` is `[T × C]` row-major, in millivolts.
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub subject_id: String,
    pub layout: GridLayout,
    n_channels: usize,
    signal: Vec<f64>,
    gesture_label: Vec<u8>,
    repetition: Vec<u8>,
}

impl Recording {
    pub fn new(
        subject_id: impl Into<String>,
        layout: GridLayout,
        n_channels: usize,
        signal: Vec<f64>,
        gesture_label: Vec<u8>,
        repetition: Vec<u8>,
    ) -> Result<Self> {
        layout.validate()?;
        if n_channels != layout.channels() {
            return Err(Error::Config(format!(
                "{} channels do not fill a {} × {} grid",
                n_channels, layout.n_horizontal, layout.n_vertical
            )));
        }
        if !signal.len().is_multiple_of(n_channels) {
            return Err(Error::Shape(format!(
                "signal of {} values is not a multiple of {} channels",
                signal.len(),
                n_channels
            )));
        }
        let t = signal.len() / n_channels;
        for len in [gesture_label.len(), repetition.len()] {
            if len != t {
                return Err(Error::LengthMismatch {
                    samples: t,
                    annotations: len,
                });
            }
        }
        if let Some(&l) = gesture_label.iter().find(|&&l| l > MAX_GESTURE) {
            return Err(Error::Range {
                what: "gesture label",
                value: l.into(),
                range: "0..=66",
            });
        }
        if let Some(&r) = repetition.iter().find(|&&r| r > MAX_REPETITION) {
            return Err(Error::Range {
                what: "repetition",
                value: r.into(),
                range: "0..=5",
            });
        }
        Ok(Self {
            subject_id: subject_id.into(),
            layout,
            n_channels,
            signal,
            gesture_label,
            repetition,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.gesture_label.len()
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn signal(&self) -> &[f64] {
        &self.signal
    }

    pub fn gesture_label(&self) -> &[u8] {
        &self.gesture_label
    }

    pub fn repetition(&self) -> &[u8] {
        &self.repetition
    }

    /// Sample `t` across all channels.
    pub fn frame(&self, t: usize) -> &[f64] {
        &self.signal[t * self.n_channels..(t + 1) * self.n_channels]
    }

    /// Copy of one channel over time.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.signal.iter().skip(c).step_by(self.n_channels).copied().collect()
    }

    /// Replace every channel by `f(channel)`; `f` must preserve length.
    pub fn map_channels(&self, f: impl Fn(&[f64]) -> Result<Vec<f64>>) -> Result<Self> {
        let t = self.n_samples();
        let mut out = vec![0.0; self.signal.len()];
        for c in 0..self.n_channels {
            let y = f(&self.channel(c))?;
            if y.len() != t {
                return Err(Error::Shape(format!("channel map changed length {t} → {}", y.len())));
            }
            for (i, v) in y.into_iter().enumerate() {
                out[i * self.n_channels + c] = v;
            }
        }
        Ok(Self {
            signal: out,
            ..self.clone()
        })
    }

    /// Keep only the samples at `indices`, in the given order.
    pub fn take_samples(&self, indices: &[usize]) -> Self {
        let c = self.n_channels;
        let mut signal = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            signal.extend_from_slice(self.frame(i));
        }
        Self {
            subject_id: self.subject_id.clone(),
            layout: self.layout,
            n_channels: c,
            signal,
            gesture_label: indices.iter().map(|&i| self.gesture_label[i]).collect(),
            repetition: indices.iter().map(|&i| self.repetition[i]).collect(),
        }
    }
}

/// Drop every sample labelled rest (gesture 0), preserving order.
pub fn remove_rest(rec: &Recording) -> Recording {
    let keep: Vec<usize> = rec
        .gesture_label
        .iter()
        .enumerate()
        .filter(|(_, &l)| l != 0)
        .map(|(i, _)| i)
        .collect();
    rec.take_samples(&keep)
}

/// Electrode subset used for an experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelMode {
    Full,
    Half,
    Quarter,
}

impl ChannelMode {
    pub fn stride(self) -> usize {
        match self {
            ChannelMode::Full => 1,
            ChannelMode::Half => 2,
            ChannelMode::Quarter => 4,
        }
    }

    pub fn n_horizontal(self) -> usize {
        16 / self.stride()
    }

    pub fn channels(self) -> usize {
        FULL_CHANNELS / self.stride()
    }
}

impl std::str::FromStr for ChannelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(ChannelMode::Full),
            "half" => Ok(ChannelMode::Half),
            "quarter" => Ok(ChannelMode::Quarter),
            other => Err(Error::Config(format!("unknown channel mode `{other}`"))),
        }
    }
}

/// Keep flat channel indices that are multiples of the mode's stride.
pub fn select_channels(rec: &Recording, mode: ChannelMode) -> Result<Recording> {
    if rec.n_channels != FULL_CHANNELS {
        return Err(Error::Config(format!(
            "channel selection needs the full {FULL_CHANNELS}-channel recording, got {}",
            rec.n_channels
        )));
    }
    let stride = mode.stride();
    let keep = rec.n_channels / stride;
    let mut signal = Vec::with_capacity(rec.n_samples() * keep);
    for t in 0..rec.n_samples() {
        signal.extend(rec.frame(t).iter().step_by(stride));
    }
    let layout = GridLayout {
        n_horizontal: mode.n_horizontal(),
        ..rec.layout
    };
    Ok(Recording {
        subject_id: rec.subject_id.clone(),
        layout,
        n_channels: keep,
        signal,
        gesture_label: rec.gesture_label.clone(),
        repetition: rec.repetition.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(labels: Vec<u8>, reps: Vec<u8>) -> Recording {
        let t = labels.len();
        let layout = GridLayout {
            n_horizontal: 1,
            n_vertical: 1,
            sampling_rate_hz: 2048.0,
        };
        Recording::new("s", layout, 1, (0..t).map(|i| i as f64).collect(), labels, reps).unwrap()
    }

    #[test]
    fn remove_rest_keeps_gesture_samples() {
        let r = small(vec![0, 3, 3, 0, 5], vec![0, 1, 1, 0, 2]);
        let kept = remove_rest(&r);
        assert_eq!(kept.signal(), &[1.0, 2.0, 4.0]);
        assert_eq!(kept.gesture_label(), &[3, 3, 5]);
        assert_eq!(kept.repetition(), &[1, 1, 2]);
    }

    #[test]
    fn remove_rest_degenerate_cases() {
        let all_rest = small(vec![0, 0, 0], vec![0, 0, 0]);
        assert_eq!(remove_rest(&all_rest).n_samples(), 0);
        let none = small(vec![1, 2, 3], vec![1, 1, 1]);
        assert_eq!(remove_rest(&none), none);
    }

    #[test]
    fn constructor_validates_annotations() {
        let layout = GridLayout {
            n_horizontal: 3,
            n_vertical: 1,
            sampling_rate_hz: 2048.0,
        };
        let sig = vec![0.0; 30];
        assert!(matches!(
            Recording::new("s", layout, 3, sig.clone(), vec![1; 9], vec![1; 10]),
            Err(Error::LengthMismatch { samples: 10, annotations: 9 })
        ));
        let mut labels = vec![1; 10];
        labels[4] = 67;
        assert!(matches!(
            Recording::new("s", layout, 3, sig.clone(), labels, vec![1; 10]),
            Err(Error::Range { value: 67, .. })
        ));
        assert!(Recording::new("s", layout, 3, sig.clone(), vec![1; 10], vec![6; 10]).is_err());
        assert!(Recording::new("s", layout, 4, sig, vec![1; 10], vec![1; 10]).is_err());
    }

    #[test]
    fn channel_modes() {
        let t = 3;
        let sig: Vec<f64> = (0..t * 128).map(|i| (i % 128) as f64).collect();
        let rec = Recording::new("s", GridLayout::hd(16), 128, sig, vec![1; t], vec![1; t]).unwrap();
        let full = select_channels(&rec, ChannelMode::Full).unwrap();
        assert_eq!(full, rec);
        let half = select_channels(&rec, ChannelMode::Half).unwrap();
        assert_eq!(half.n_channels(), 64);
        assert_eq!(half.layout.n_horizontal, 8);
        assert_eq!(half.frame(0), (0..128).step_by(2).map(f64::from).collect::<Vec<_>>().as_slice());
        let quarter = select_channels(&rec, ChannelMode::Quarter).unwrap();
        assert_eq!(quarter.layout.n_horizontal, 4);
        assert_eq!(quarter.frame(2)[31], 124.0);
        assert!(select_channels(&half, ChannelMode::Half).is_err());
    }

    #[test]
    fn hd_layout_validation() {
        assert!(GridLayout::hd(16).validate_hd().is_ok());
        assert!(GridLayout::hd(5).validate_hd().is_err());
    }
}
