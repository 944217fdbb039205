use crate::error::{Error, Result};

/// RMS, ZC, SSC and WL.
pub const FEATURES_PER_CHANNEL: usize = 4;

/// Per-channel `[RMS, ZC, SSC, WL]` of a `[W × C]` window, channel-major.
///
/// A zero crossing is a sign change between neighbours whose absolute
/// difference exceeds `deadband`; a slope sign change is an interior sample
/// with `(x_i − x_{i−1})(x_i − x_{i+1}) > deadband`.
pub fn extract_features(window: &[f64], n_channels: usize, deadband: f64) -> Result<Vec<f64>> {
    if n_channels == 0 || !window.len().is_multiple_of(n_channels) {
        return Err(Error::Shape(format!("{} values do not form {n_channels}-channel frames", window.len())));
    }
    let w = window.len() / n_channels;
    if w < 3 {
        return Err(Error::Shape(format!("feature extraction needs at least 3 samples, got {w}")));
    }
    let mut out = Vec::with_capacity(FEATURES_PER_CHANNEL * n_channels);
    let mut x = vec![0.0; w];
    for c in 0..n_channels {
        for (t, v) in x.iter_mut().enumerate() {
            *v = window[t * n_channels + c];
        }
        let rms = (x.iter().map(|v| v * v).sum::<f64>() / w as f64).sqrt();
        let zc = x
            .windows(2)
            .filter(|p| p[0] * p[1] < 0.0 && (p[0] - p[1]).abs() > deadband)
            .count();
        let ssc = x
            .windows(3)
            .filter(|p| (p[1] - p[0]) * (p[1] - p[2]) > deadband)
            .count();
        let wl: f64 = x.windows(2).map(|p| (p[1] - p[0]).abs()).sum();
        out.extend([rms, zc as f64, ssc as f64, wl]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_values() {
        let f = extract_features(&[1.0, -1.0, 1.0, -1.0], 1, 0.0).unwrap();
        assert_eq!(f, vec![1.0, 3.0, 2.0, 6.0]);
        let f = extract_features(&[0.0, 1.0, 0.0, 1.0], 1, 0.0).unwrap();
        assert_eq!(f[2], 2.0);
        assert_eq!(f[1], 0.0);
        let f = extract_features(&[3.0, 4.0, 3.0, 4.0], 1, 0.0).unwrap();
        assert!((f[0] - 12.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn channels_are_interleaved_by_frame() {
        // two channels: c0 = [1,2,3], c1 = [0,-1,0]
        let f = extract_features(&[1.0, 0.0, 2.0, -1.0, 3.0, 0.0], 2, 0.0).unwrap();
        assert_eq!(f[3], 2.0);
        assert_eq!(f[6], 1.0);
        assert_eq!(f[7], 2.0);
    }

    #[test]
    fn deadband_suppresses_small_crossings() {
        let x = [0.1, -0.1, 0.1, -0.1];
        assert_eq!(extract_features(&x, 1, 0.5).unwrap()[1], 0.0);
        assert_eq!(extract_features(&x, 1, 0.0).unwrap()[1], 3.0);
    }

    #[test]
    fn too_short() {
        assert!(extract_features(&[1.0, 2.0], 1, 0.0).is_err());
    }
}
