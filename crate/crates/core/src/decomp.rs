//! Motor-unit decomposition of HD-sEMG windows.
//!
//! Windows are time-extended and whitened, sources are found one at a time
//! by fastICA deflation, and each source is accepted only if its peak
//! heights split cleanly into discharges and background (silhouette gate).
//! Accepted spike trains yield peak-to-peak MUAP images.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::gemm;
use crate::dsp::WindowBatch;
use crate::error::{Error, Result};

/// Eigenvalues below this fraction of the largest are dropped in whitening.
pub const EIGEN_FLOOR: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregate {
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecompConfig {
    pub max_sources: usize,
    pub silhouette_threshold: f64,
    pub extension_factor: usize,
    pub ica_max_iter: usize,
    pub tolerance: f64,
    pub muap_half_window: usize,
    /// Fewest discharges for a source to count as a motor unit.
    pub min_discharges: usize,
    pub aggregate: Aggregate,
    pub seed: u64,
}

impl Default for DecompConfig {
    fn default() -> Self {
        Self {
            max_sources: 7,
            silhouette_threshold: 0.92,
            extension_factor: 8,
            ica_max_iter: 200,
            tolerance: 1e-6,
            muap_half_window: 20,
            min_discharges: 3,
            aggregate: Aggregate::Mean,
            seed: 0,
        }
    }
}

impl DecompConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.silhouette_threshold > 0.0 && self.silhouette_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "silhouette threshold must lie in (0, 1], got {}",
                self.silhouette_threshold
            )));
        }
        if self.max_sources == 0 || self.extension_factor == 0 || self.ica_max_iter == 0 {
            return Err(Error::Config("max_sources, extension_factor and ica_max_iter must be positive".into()));
        }
        Ok(())
    }
}

/// Whitened, time-extended observations: `rows × samples` row-major, with
/// unit covariance.
#[derive(Clone, Debug)]
pub struct Whitened {
    pub rows: usize,
    pub samples: usize,
    pub data: Vec<f64>,
    /// Delay copies per channel used to build the observation.
    pub extension_factor: usize,
    /// Energy of the extended, mean-removed observation at each sample.
    pub activity: Vec<f64>,
}

impl Whitened {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.samples..(i + 1) * self.samples]
    }

    /// `rows × rows` covariance, `Z Zᵀ / samples`.
    pub fn covariance(&self) -> Vec<f64> {
        let mut c = vec![0.0; self.rows * self.rows];
        gemm(self.rows, self.samples, self.rows, &self.data, false, &self.data, true, &mut c, false);
        c.iter_mut().for_each(|v| *v /= self.samples as f64);
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotorUnitSpikeTrain {
    /// Sample indices within the window, strictly increasing.
    pub discharge_indices: Vec<usize>,
    pub silhouette: f64,
    /// Separation vector in whitened space.
    pub source_vector: Vec<f64>,
}

/// Replicate each channel of a `[W × C]` window at delays
/// `0..extension_factor`, remove row means and whiten.
pub fn extend_and_whiten(window: &[f64], n_channels: usize, extension_factor: usize) -> Result<Whitened> {
    if n_channels == 0 || !window.len().is_multiple_of(n_channels) {
        return Err(Error::Shape(format!("{} values do not form {n_channels}-channel frames", window.len())));
    }
    let w = window.len() / n_channels;
    let r = extension_factor;
    if r == 0 || w <= r {
        return Err(Error::Shape(format!("window of {w} samples too short for extension factor {r}")));
    }
    let k = w - r + 1;
    let m = n_channels * r;
    // Row (c, d) holds x_c(t - d) for t = r-1 .. w-1.
    let mut x = vec![0.0; m * k];
    for c in 0..n_channels {
        for d in 0..r {
            let row = &mut x[(c * r + d) * k..(c * r + d + 1) * k];
            for (j, v) in row.iter_mut().enumerate() {
                *v = window[(j + r - 1 - d) * n_channels + c];
            }
            let mean = row.iter().sum::<f64>() / k as f64;
            row.iter_mut().for_each(|v| *v -= mean);
        }
    }
    // Eigendecompose whichever of X Xᵀ/k and Xᵀ X/k is smaller; both share
    // the nonzero spectrum, and in either case the whitened rows are
    // √k · (right singular vectors of X).
    let dual = m > k;
    let n = if dual { k } else { m };
    let mut g = vec![0.0; n * n];
    if dual {
        gemm(k, m, k, &x, true, &x, false, &mut g, false);
    } else {
        gemm(m, k, m, &x, false, &x, true, &mut g, false);
    }
    g.iter_mut().for_each(|v| *v /= k as f64);
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(n, n, &g));
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    if !(lmax > 0.0) || !lmax.is_finite() {
        return Err(Error::DegenerateCovariance(format!("largest eigenvalue {lmax}")));
    }
    let mut keep: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] > EIGEN_FLOOR * lmax).collect();
    keep.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let rows = keep.len();
    let mut data = vec![0.0; rows * k];
    for (out, &i) in keep.iter().enumerate() {
        let v = eig.eigenvectors.column(i);
        let z = &mut data[out * k..(out + 1) * k];
        if dual {
            let s = (k as f64).sqrt();
            for (j, zj) in z.iter_mut().enumerate() {
                *zj = v[j] * s;
            }
        } else {
            // z = λ^{-1/2} uᵀ X
            let scale = 1.0 / eig.eigenvalues[i].sqrt();
            for (c, &uc) in v.iter().enumerate() {
                let xr = &x[c * k..(c + 1) * k];
                for (zj, xj) in z.iter_mut().zip(xr) {
                    *zj += uc * xj * scale;
                }
            }
        }
    }
    let mut activity = vec![0.0; k];
    for row in x.chunks(k) {
        activity.iter_mut().zip(row).for_each(|(a, v)| *a += v * v);
    }
    Ok(Whitened {
        rows,
        samples: k,
        data,
        extension_factor: r,
        activity,
    })
}

fn project(z: &Whitened, w: &[f64]) -> Vec<f64> {
    let mut s = vec![0.0; z.samples];
    gemm(1, z.rows, z.samples, w, false, &z.data, false, &mut s, false);
    s
}

fn normalize(w: &mut [f64]) -> bool {
    let n = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(n > 1e-300) {
        return false;
    }
    w.iter_mut().for_each(|v| *v /= n);
    true
}

fn orthogonalize(w: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let dot: f64 = w.iter().zip(b).map(|(a, c)| a * c).sum();
        w.iter_mut().zip(b).for_each(|(a, c)| *a -= dot * c);
    }
}

/// Otsu threshold on `values`: the cut maximising between-class variance.
/// Returns the sorted values and the number in the low class.
fn otsu_split(values: &[f64]) -> (Vec<f64>, usize) {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let total: f64 = v.iter().sum();
    let mut best = (f64::NEG_INFINITY, n);
    let mut low_sum = 0.0;
    for i in 1..n {
        low_sum += v[i - 1];
        if v[i] == v[i - 1] {
            continue;
        }
        let (n0, n1) = (i as f64, (n - i) as f64);
        let m0 = low_sum / n0;
        let m1 = (total - low_sum) / n1;
        let between = n0 * n1 * (m0 - m1).powi(2);
        if between > best.0 {
            best = (between, i);
        }
    }
    (v, best.1)
}

/// Silhouette of a two-class split of one-dimensional `values` (sorted,
/// `cut` in the low class): `(B − A) / max(A, B)` with `A` the summed
/// distance of every point to its own class centroid and `B` to the other.
pub fn two_class_silhouette(sorted: &[f64], cut: usize) -> f64 {
    if cut == 0 || cut >= sorted.len() {
        return 0.0;
    }
    let c0 = sorted[..cut].iter().sum::<f64>() / cut as f64;
    let c1 = sorted[cut..].iter().sum::<f64>() / (sorted.len() - cut) as f64;
    let (mut within, mut between) = (0.0, 0.0);
    for (i, &v) in sorted.iter().enumerate() {
        let (own, other) = if i < cut { (c0, c1) } else { (c1, c0) };
        within += (v - own).abs();
        between += (v - other).abs();
    }
    let denom = within.max(between);
    if denom == 0.0 {
        0.0
    } else {
        (between - within) / denom
    }
}

/// Local maxima of `s` (strictly above the left neighbour, not below the
/// right one) with positive height.
fn peaks(s: &[f64]) -> Vec<usize> {
    (1..s.len().saturating_sub(1))
        .filter(|&i| s[i] > 0.0 && s[i] > s[i - 1] && s[i] >= s[i + 1])
        .collect()
}

/// Sign-correct a source so its heavy tail is positive, then split its peak
/// heights into discharges and background.
fn spike_train_of(source: &[f64], offset: usize) -> (Vec<usize>, f64) {
    let skew: f64 = source.iter().map(|v| v * v * v).sum();
    let s: Vec<f64> = if skew < 0.0 { source.iter().map(|v| -v).collect() } else { source.to_vec() };
    let idx = peaks(&s);
    if idx.len() < 2 {
        return (Vec::new(), 0.0);
    }
    let heights: Vec<f64> = idx.iter().map(|&i| s[i]).collect();
    let (sorted, cut) = otsu_split(&heights);
    if cut >= sorted.len() {
        return (Vec::new(), 0.0);
    }
    let sil = two_class_silhouette(&sorted, cut);
    let threshold = sorted[cut];
    let disc = idx.into_iter().filter(|&i| s[i] >= threshold).map(|i| i + offset).collect();
    (disc, sil)
}

/// Deflationary fastICA with the `u³` contrast. Each round starts from the
/// whitened observation at the most active sample not yet used (or a seeded
/// random vector once those run out), is kept orthogonal to all earlier
/// rounds, and its source is accepted when the silhouette reaches the
/// configured threshold.
pub fn fast_ica_deflate(z: &Whitened, cfg: &DecompConfig) -> Result<Vec<MotorUnitSpikeTrain>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut found: Vec<Vec<f64>> = Vec::new();
    let mut accepted = Vec::new();
    let offset = z.extension_factor - 1;
    let k = z.samples as f64;
    let mut candidates: Vec<usize> = (0..z.samples).collect();
    candidates.sort_by(|&a, &b| z.activity[b].total_cmp(&z.activity[a]).then(a.cmp(&b)));
    let mut used: Vec<usize> = Vec::new();
    let near = |t: usize, used: &[usize]| used.iter().any(|&u| u.abs_diff(t) <= z.extension_factor);
    for round in 0..cfg.max_sources.min(z.rows) {
        let start = candidates.iter().copied().find(|&t| !near(t, &used));
        let mut w: Vec<f64> = match start {
            Some(t) => {
                used.push(t);
                (0..z.rows).map(|i| z.data[i * z.samples + t]).collect()
            }
            None => (0..z.rows).map(|_| StandardNormal.sample(&mut rng)).collect(),
        };
        orthogonalize(&mut w, &found);
        if !normalize(&mut w) {
            break;
        }
        let mut converged = false;
        for _ in 0..cfg.ica_max_iter {
            let u = project(z, &w);
            let g: Vec<f64> = u.iter().map(|v| v * v * v).collect();
            let mean_dg = u.iter().map(|v| 3.0 * v * v).sum::<f64>() / k;
            let mut next = vec![0.0; z.rows];
            gemm(z.rows, z.samples, 1, &z.data, false, &g, false, &mut next, false);
            next.iter_mut().zip(&w).for_each(|(n, wi)| *n = *n / k - mean_dg * wi);
            orthogonalize(&mut next, &found);
            if !normalize(&mut next) {
                break;
            }
            let dot: f64 = next.iter().zip(&w).map(|(a, b)| a * b).sum();
            w = next;
            if (1.0 - dot.abs()) < cfg.tolerance {
                converged = true;
                break;
            }
        }
        if !converged {
            log::debug!("fastICA round {round} did not converge in {} iterations", cfg.ica_max_iter);
            found.push(w);
            continue;
        }
        let (discharges, silhouette) = spike_train_of(&project(z, &w), offset);
        if silhouette >= cfg.silhouette_threshold && discharges.len() >= cfg.min_discharges {
            accepted.push(MotorUnitSpikeTrain {
                discharge_indices: discharges,
                silhouette,
                source_vector: w.clone(),
            });
        }
        found.push(w);
    }
    Ok(accepted)
}

/// Peak-to-peak MUAP images of one window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MuapImageSet {
    pub n_horizontal: usize,
    pub n_vertical: usize,
    /// One `[n_vertical × n_horizontal]` image per accepted unit.
    pub images: Vec<Vec<f64>>,
    /// Element-wise mean or max of `images`; zeros when there are none.
    pub aggregate: Vec<f64>,
    pub label: u8,
}

/// Spike-triggered average of every channel of a `[W × C]` window around
/// each unit's discharges, reduced to per-channel peak-to-peak amplitude.
/// Channel `c` lands at row `c % n_vertical`, column `c / n_vertical`.
pub fn muap_images(
    window: &[f64],
    n_horizontal: usize,
    n_vertical: usize,
    trains: &[MotorUnitSpikeTrain],
    cfg: &DecompConfig,
    label: u8,
) -> Result<MuapImageSet> {
    let c = n_horizontal * n_vertical;
    if c == 0 || !window.len().is_multiple_of(c) {
        return Err(Error::Shape(format!("{} values do not form {c}-channel frames", window.len())));
    }
    let w = window.len() / c;
    let hw = cfg.muap_half_window;
    let span = 2 * hw + 1;
    let mut images = Vec::with_capacity(trains.len());
    for train in trains {
        let mut avg = vec![0.0; span * c];
        let mut used = 0usize;
        for &t in &train.discharge_indices {
            if t < hw || t + hw >= w {
                continue;
            }
            used += 1;
            for (j, frame) in window[(t - hw) * c..(t + hw + 1) * c].chunks(c).enumerate() {
                for (ch, v) in frame.iter().enumerate() {
                    avg[ch * span + j] += v;
                }
            }
        }
        let mut img = vec![0.0; c];
        if used > 0 {
            for ch in 0..c {
                let wave = &avg[ch * span..(ch + 1) * span];
                let hi = wave.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lo = wave.iter().cloned().fold(f64::INFINITY, f64::min);
                img[(ch % n_vertical) * n_horizontal + ch / n_vertical] = (hi - lo) / used as f64;
            }
        }
        images.push(img);
    }
    let mut aggregate = vec![0.0; c];
    if !images.is_empty() {
        for (i, a) in aggregate.iter_mut().enumerate() {
            let it = images.iter().map(|im| im[i]);
            *a = match cfg.aggregate {
                Aggregate::Mean => it.sum::<f64>() / images.len() as f64,
                Aggregate::Max => it.fold(0.0, f64::max),
            };
        }
    }
    Ok(MuapImageSet {
        n_horizontal,
        n_vertical,
        images,
        aggregate,
        label,
    })
}

/// Full per-window pipeline. Constant windows decompose to no units.
pub fn decompose_window(
    window: &[f64],
    n_horizontal: usize,
    n_vertical: usize,
    cfg: &DecompConfig,
    label: u8,
) -> Result<(Vec<MotorUnitSpikeTrain>, MuapImageSet)> {
    let trains = match extend_and_whiten(window, n_horizontal * n_vertical, cfg.extension_factor) {
        Ok(z) => fast_ica_deflate(&z, cfg)?,
        Err(Error::DegenerateCovariance(_)) => Vec::new(),
        Err(e) => return Err(e),
    };
    let images = muap_images(window, n_horizontal, n_vertical, &trains, cfg, label)?;
    Ok((trains, images))
}

/// Decompose every window of a batch. Each window's ICA seed is derived
/// from `cfg.seed` and the window index, so results do not depend on the
/// order windows are processed in.
pub fn decompose_batch(batch: &WindowBatch, cfg: &DecompConfig) -> Result<Vec<(Vec<MotorUnitSpikeTrain>, MuapImageSet)>> {
    (0..batch.len())
        .map(|i| {
            let c = DecompConfig {
                seed: cfg.seed.wrapping_add(i as u64),
                ..*cfg
            };
            decompose_window(batch.window(i), batch.n_horizontal, batch.n_vertical, &c, batch.labels[i])
        })
        .collect()
}

/// Rate of agreement `matched / (|a| + |b| − matched)` between two sorted
/// discharge lists, greedily pairing discharges at most `tol` samples apart.
pub fn rate_of_agreement(a: &[usize], b: &[usize], tol: usize) -> f64 {
    let (mut i, mut j, mut matched) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        if a[i].abs_diff(b[j]) <= tol {
            matched += 1;
            i += 1;
            j += 1;
        } else if a[i] < b[j] {
            i += 1;
        } else {
            j += 1;
        }
    }
    let denom = a.len() + b.len() - matched;
    if denom == 0 {
        1.0
    } else {
        matched as f64 / denom as f64
    }
}

/// Best rate of agreement over constant shifts of `estimate` within
/// `±max_lag`; decomposed sources are defined only up to a delay.
pub fn best_lag_agreement(truth: &[usize], estimate: &[usize], max_lag: usize, tol: usize) -> f64 {
    let mut best = 0.0f64;
    for lag in -(max_lag as i64)..=max_lag as i64 {
        let shifted: Vec<usize> = estimate
            .iter()
            .filter_map(|&t| usize::try_from(t as i64 + lag).ok())
            .collect();
        best = best.max(rate_of_agreement(truth, &shifted, tol));
    }
    best
}
