//! The preprocessing chain on one synthetic subject: channel subset,
//! rectified 1 Hz envelope, rest removal, windowing and per-channel μ-law
//! companding with constants from the training repetitions only.
//!
//! cargo run --release --example preprocess_windows

use cthgr::dsp::{envelope_recording, segment, ChannelScaler, LowpassCoefficients, PreprocessConfig, WindowSpec};
use cthgr::ingest::{remove_rest, select_channels, synthesize_dataset, ChannelMode, SynthSpec};

fn main() -> cthgr::Result<()> {
    let rec = synthesize_dataset(&SynthSpec::default())?;
    let half = select_channels(&rec, ChannelMode::Half)?;
    let cfg = PreprocessConfig::default();
    let c = LowpassCoefficients::design(cfg.cutoff_hz, half.layout.sampling_rate_hz)?;
    println!("low-pass b0 = {:.6e}, b1 = {:.6e}, a1 = {:.6}", c.b0, c.b1, c.a1);

    let env = envelope_recording(&half, &cfg)?;
    let batch = segment(&remove_rest(&env), WindowSpec::with_default_skip(64)?);
    println!(
        "{} windows of {} × {} × {}",
        batch.len(),
        batch.window_len,
        batch.n_horizontal,
        batch.n_vertical
    );

    let train: Vec<usize> = (0..batch.len()).filter(|&i| batch.fold_key[i] != 5).collect();
    let scaler = ChannelScaler::fit(&batch, &train);
    let scaled = scaler.mu_law(&batch, cfg.mu)?;
    let (lo, hi) = scaled
        .samples
        .iter()
        .fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    println!("μ-law range over all windows: [{lo:.4}, {hi:.4}]");
    Ok(())
}
