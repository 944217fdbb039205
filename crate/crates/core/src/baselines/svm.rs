use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-feature mean and standard deviation from the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Constant features get unit scale.
    pub fn fit(rows: &[&[f64]]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::Data("cannot standardize an empty set".into()));
        };
        let f = first.len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; f];
        for r in rows {
            mean.iter_mut().zip(r.iter()).for_each(|(m, v)| *m += v / n);
        }
        let mut var = vec![0.0; f];
        for r in rows {
            var.iter_mut().zip(r.iter().zip(&mean)).for_each(|(s, (v, m))| *s += (v - m).powi(2) / n);
        }
        let std = var.into_iter().map(|v| if v > 0.0 { v.sqrt() } else { 1.0 }).collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SvmConfig {
    /// L2 regularisation strength λ.
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-4,
            epochs: 30,
            seed: 0,
        }
    }
}

/// One-vs-rest linear SVM on standardized features. Each hyperplane
/// minimises `λ/2·|w|² + mean hinge loss`, with the bias folded into `w`
/// as a constant feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSvm {
    pub n_classes: usize,
    pub standardizer: Standardizer,
    /// `[n_classes × (n_features + 1)]`, bias last.
    pub weights: Vec<f64>,
}

fn augmented(x: Vec<f64>) -> Vec<f64> {
    let mut x = x;
    x.push(1.0);
    x
}

impl LinearSvm {
    /// Pegasos stochastic subgradient descent with step `1/(λt)`,
    /// projection onto the `1/√λ` ball and averaging over the second half
    /// of the iterates.
    pub fn train(features: &[&[f64]], labels: &[usize], n_classes: usize, cfg: &SvmConfig) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::Shape(format!("{} rows but {} labels", features.len(), labels.len())));
        }
        if !(cfg.lambda > 0.0) || cfg.epochs == 0 {
            return Err(Error::Config("SVM needs λ > 0 and at least one epoch".into()));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Data(format!("label {l} outside {n_classes} classes")));
        }
        let mut present = labels.to_vec();
        present.sort_unstable();
        present.dedup();
        if present.len() < 2 {
            return Err(Error::Data(format!("SVM needs at least two classes, got {}", present.len())));
        }
        let standardizer = Standardizer::fit(features)?;
        let xs: Vec<Vec<f64>> = features.iter().map(|r| augmented(standardizer.apply(r))).collect();
        let f = xs[0].len();
        let n = xs.len();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let orders: Vec<Vec<usize>> = (0..cfg.epochs)
            .map(|_| {
                let mut o: Vec<usize> = (0..n).collect();
                o.shuffle(&mut rng);
                o
            })
            .collect();
        let total = cfg.epochs * n;
        let avg_from = total / 2;
        let radius = 1.0 / cfg.lambda.sqrt();
        let mut weights = Vec::with_capacity(n_classes * f);
        for class in 0..n_classes {
            // w = scale · v keeps the multiplicative decay O(1).
            let mut v = vec![0.0; f];
            let mut scale = 1.0;
            let mut avg = vec![0.0; f];
            let mut t = 0usize;
            for order in &orders {
                for &i in order {
                    t += 1;
                    let eta = 1.0 / (cfg.lambda * t as f64);
                    let y = if labels[i] == class { 1.0 } else { -1.0 };
                    let margin = y * scale * dot(&v, &xs[i]);
                    scale *= 1.0 - eta * cfg.lambda;
                    if scale == 0.0 {
                        // First step: 1 − ηλ = 0 resets the weights.
                        v.iter_mut().for_each(|x| *x = 0.0);
                        scale = 1.0;
                    }
                    if margin < 1.0 {
                        let step = eta * y / scale;
                        v.iter_mut().zip(&xs[i]).for_each(|(w, x)| *w += step * x);
                    }
                    let norm = scale.abs() * dot(&v, &v).sqrt();
                    if norm > radius {
                        scale *= radius / norm;
                    }
                    if t > avg_from {
                        avg.iter_mut().zip(&v).for_each(|(a, w)| *a += scale * w);
                    }
                }
            }
            let count = (total - avg_from) as f64;
            weights.extend(avg.into_iter().map(|a| a / count));
        }
        Ok(Self {
            n_classes,
            standardizer,
            weights,
        })
    }

    /// Per-class margins of one raw feature row.
    pub fn margins(&self, features: &[f64]) -> Vec<f64> {
        let x = augmented(self.standardizer.apply(features));
        self.weights.chunks(x.len()).map(|w| dot(w, &x)).collect()
    }

    pub fn predict(&self, features: &[f64]) -> usize {
        let m = self.margins(features);
        (0..m.len()).fold(0, |best, i| if m[i] > m[best] { i } else { best })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_toy_is_fit_exactly() {
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|i| {
                let s = if i % 2 == 0 { 1.0 } else { -1.0 };
                vec![s * (1.0 + (i as f64) * 0.01), (i as f64 * 0.37).sin()]
            })
            .collect();
        let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let svm = LinearSvm::train(&refs, &labels, 2, &SvmConfig::default()).unwrap();
        assert!(refs.iter().zip(&labels).all(|(r, &l)| svm.predict(r) == l));
    }

    #[test]
    fn single_class_is_rejected() {
        let rows = [[1.0], [2.0]];
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        assert!(LinearSvm::train(&refs, &[0, 0], 2, &SvmConfig::default()).is_err());
    }

    #[test]
    fn contradictory_duplicates_cap_accuracy() {
        let rows = [[0.5, 0.5]; 10];
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let labels: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let svm = LinearSvm::train(&refs, &labels, 2, &SvmConfig::default()).unwrap();
        let hits = refs.iter().zip(&labels).filter(|(r, &l)| svm.predict(r) == l).count();
        assert!(hits <= 5);
    }
}
