//! Paired Wilcoxon comparison, box-plot statistics and a row-normalised
//! confusion matrix on small hand-made accuracy tables.
//!
//! cargo run --example statistics

use cthgr::eval::{aggregate_confusion, confusion_matrix, iqr_stats, wilcoxon_signed_rank};

fn main() -> cthgr::Result<()> {
    // Per-subject accuracies of two models.
    let a = [91.2, 88.4, 93.0, 90.1, 86.7, 94.3, 89.9, 92.5, 87.8, 90.6];
    let b = [89.0, 87.9, 90.2, 90.4, 84.1, 92.0, 88.8, 90.0, 86.5, 88.9];
    let w = wilcoxon_signed_rank(&a, &b)?;
    println!(
        "W+ = {}, W- = {}, p = {:.4e} ({}), exact: {}",
        w.w_plus, w.w_minus, w.p_value, w.annotation, w.exact
    );

    let s = iqr_stats(&a)?;
    println!(
        "median {:.2}, Q1 {:.2}, Q3 {:.2}, whiskers [{:.2}, {:.2}], outliers {:?}",
        s.median, s.q1, s.q3, s.whisker_low, s.whisker_high, s.outliers
    );

    let s1 = confusion_matrix(&[0, 0, 1, 1, 2, 2], &[0, 1, 1, 1, 2, 0], 3);
    let s2 = confusion_matrix(&[0, 0, 1, 1, 2, 2], &[0, 0, 1, 2, 2, 2], 3);
    let c = aggregate_confusion(&[s1, s2])?;
    for row in &c.matrix {
        println!("{row:?}");
    }
    Ok(())
}
