use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest sample size evaluated with the exact null distribution.
pub const EXACT_MAX_N: usize = 20;

/// Significance annotation bins: ns, *, **, ***, ****.
pub fn annotation(p: f64) -> &'static str {
    if p > 5.00e-2 {
        "ns"
    } else if p > 1.00e-2 {
        "*"
    } else if p > 1.00e-3 {
        "**"
    } else if p > 1.00e-4 {
        "***"
    } else {
        "****"
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Non-zero differences used.
    pub n: usize,
    pub w_plus: f64,
    pub w_minus: f64,
    /// `min(W⁺, W⁻)`.
    pub statistic: f64,
    pub p_value: f64,
    pub exact: bool,
    pub annotation: String,
}

/// Average (mid) ranks of `|d|`, 1-based.
fn mid_ranks(abs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..abs.len()).collect();
    order.sort_by(|&a, &b| abs[a].total_cmp(&abs[b]));
    let mut ranks = vec![0.0; abs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && abs[order[j + 1]] == abs[order[i]] {
            j += 1;
        }
        let r = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Number of sign patterns whose positive-rank sum is at most `stat`, with
/// ranks given doubled so that mid-ranks are integers. Subset-sum counting.
fn count_at_most(doubled: &[u64], stat2: u64) -> u128 {
    let total: u64 = doubled.iter().sum();
    let mut ways = vec![0u128; total as usize + 1];
    ways[0] = 1;
    let mut reach = 0usize;
    for &r in doubled {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if ways[s] > 0 {
                ways[s + r] += ways[s];
            }
        }
        reach += r;
    }
    ways[..=(stat2 as usize).min(total as usize)].iter().sum()
}

/// Two-sided Wilcoxon signed-rank test on paired samples. Zero differences
/// are dropped; ties get mid-ranks. Up to [`EXACT_MAX_N`] pairs the p-value
/// comes from the exact permutation distribution, above that from the
/// normal approximation with tie-corrected variance.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::Stats(format!("paired samples differ in length: {} vs {}", a.len(), b.len())));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
    if d.is_empty() {
        return Err(Error::Stats("all paired differences are zero".into()));
    }
    let n = d.len();
    if n < 5 {
        log::warn!("Wilcoxon test on only {n} non-zero differences");
    }
    let ranks = mid_ranks(&d.iter().map(|v| v.abs()).collect::<Vec<_>>());
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let w_minus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v < 0.0).map(|(_, r)| r).sum();
    let statistic = w_plus.min(w_minus);
    let exact = n <= EXACT_MAX_N;
    let p_value = if exact {
        let doubled: Vec<u64> = ranks.iter().map(|r| (2.0 * r).round() as u64).collect();
        let count = count_at_most(&doubled, (2.0 * statistic).round() as u64);
        (2.0 * count as f64 / 2f64.powi(n as i32)).min(1.0)
    } else {
        let nf = n as f64;
        let mut tie = 0.0;
        let mut sorted = ranks.clone();
        sorted.sort_by(f64::total_cmp);
        for g in sorted.chunk_by(|x, y| x == y) {
            let t = g.len() as f64;
            tie += t * t * t - t;
        }
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie / 48.0;
        let z = (statistic - nf * (nf + 1.0) / 4.0) / var.sqrt();
        libm::erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0)
    };
    Ok(WilcoxonResult {
        n,
        w_plus,
        w_minus,
        statistic,
        p_value,
        exact,
        annotation: annotation(p_value).to_string(),
    })
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: Vec<f64>,
}

/// Box-plot summary: interpolated quartiles, whiskers at the most extreme
/// data within 1.5·IQR of the box, everything beyond listed as outliers.
pub fn iqr_stats(values: &[f64]) -> Result<BoxStats> {
    if values.is_empty() {
        return Err(Error::Stats("box statistics of an empty sample".into()));
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let (q1, median, q3) = (quantile(&s, 0.25), quantile(&s, 0.5), quantile(&s, 0.75));
    let fence = 1.5 * (q3 - q1);
    let (lo, hi) = (q1 - fence, q3 + fence);
    let inside: Vec<f64> = s.iter().copied().filter(|v| *v >= lo && *v <= hi).collect();
    Ok(BoxStats {
        median,
        q1,
        q3,
        whisker_low: inside.first().copied().unwrap_or(median),
        whisker_high: inside.last().copied().unwrap_or(median),
        outliers: s.into_iter().filter(|v| *v < lo || *v > hi).collect(),
    })
}

/// Counts `[truth][prediction]`.
pub fn confusion_matrix(truth: &[usize], pred: &[usize], n_classes: usize) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; n_classes]; n_classes];
    for (&t, &p) in truth.iter().zip(pred) {
        m[t][p] += 1;
    }
    m
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    /// Row-normalised sum of the input matrices.
    pub matrix: Vec<Vec<f64>>,
    /// Rows with no support, left as zeros.
    pub empty_rows: Vec<usize>,
}

/// Sum count matrices element-wise, then divide each row by its total.
pub fn aggregate_confusion(mats: &[Vec<Vec<u64>>]) -> Result<Confusion> {
    let Some(first) = mats.first() else {
        return Err(Error::Stats("no confusion matrices to aggregate".into()));
    };
    let n = first.len();
    let mut sum = vec![vec![0u64; n]; n];
    for m in mats {
        if m.len() != n || m.iter().any(|r| r.len() != n) {
            return Err(Error::Shape(format!("confusion matrices must all be {n}×{n}")));
        }
        for (srow, row) in sum.iter_mut().zip(m) {
            srow.iter_mut().zip(row).for_each(|(s, v)| *s += v);
        }
    }
    let mut empty_rows = Vec::new();
    let matrix = sum
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let total: u64 = row.iter().sum();
            if total == 0 {
                empty_rows.push(i);
                vec![0.0; n]
            } else {
                row.iter().map(|&v| v as f64 / total as f64).collect()
            }
        })
        .collect();
    Ok(Confusion { matrix, empty_rows })
}

/// Mean and sample standard deviation (`n − 1`); a single value has STD 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_positive_differences() {
        let r = wilcoxon_signed_rank(&[2.0, 3.0, 4.0], &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(r.w_minus, 0.0);
        assert_eq!(r.p_value, 0.25);
        assert_eq!(r.annotation, "ns");
    }

    #[test]
    fn nineteen_positive_differences() {
        let a: Vec<f64> = (1..=19).map(f64::from).collect();
        let r = wilcoxon_signed_rank(&a, &[0.0; 19]).unwrap();
        assert_eq!(r.p_value, 2.0 / 2f64.powi(19));
        assert_eq!(r.annotation, "****");
    }

    #[test]
    fn identical_samples_error() {
        assert!(wilcoxon_signed_rank(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn bins_are_closed_above() {
        assert_eq!(annotation(0.05), "*");
        assert_eq!(annotation(0.0500001), "ns");
        assert_eq!(annotation(0.01), "**");
        assert_eq!(annotation(0.001), "***");
        assert_eq!(annotation(0.0001), "****");
        assert_eq!(annotation(1.0), "ns");
    }

    #[test]
    fn large_sample_uses_normal_approximation() {
        let a: Vec<f64> = (0..30).map(|i| (i as f64 * 1.3).sin()).collect();
        let b: Vec<f64> = (0..30).map(|i| (i as f64 * 0.7).cos()).collect();
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert!(!r.exact);
        assert!(r.p_value > 0.0 && r.p_value <= 1.0);
    }

    #[test]
    fn quartiles_of_one_to_nine() {
        let v: Vec<f64> = (1..=9).map(f64::from).collect();
        let s = iqr_stats(&v).unwrap();
        assert_eq!((s.median, s.q1, s.q3), (5.0, 3.0, 7.0));
    }

    #[test]
    fn single_datum_box() {
        let s = iqr_stats(&[4.2]).unwrap();
        assert_eq!((s.median, s.q1, s.q3, s.whisker_low, s.whisker_high), (4.2, 4.2, 4.2, 4.2, 4.2));
    }

    #[test]
    fn complementary_subjects_blend() {
        let a = vec![vec![3, 1], vec![0, 4]];
        let b = vec![vec![1, 3], vec![2, 2]];
        let c = aggregate_confusion(&[a, b]).unwrap();
        assert_eq!(c.matrix, vec![vec![0.5, 0.5], vec![0.25, 0.75]]);
        let id = confusion_matrix(&[0, 1, 2], &[0, 1, 2], 3);
        let c = aggregate_confusion(&[id]).unwrap();
        assert_eq!(c.matrix[2], vec![0.0, 0.0, 1.0]);
    }
}
