//! Rank correlation, confusion metrics, ROC AUC and the signed-rank test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("correlation of a constant sequence".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Largest `n` for which the Spearman p-value is computed by enumerating
/// every permutation.
pub const SPEARMAN_EXACT_MAX_N: usize = 8;

/// Spearman ρ with a two-sided p-value.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!("spearman: lengths {} and {} differ", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::invalid("spearman needs at least 3 pairs"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::invalid("spearman inputs must be finite"));
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let rho = pearson(&rx, &ry)?;
    let n = x.len();
    let p = if n <= SPEARMAN_EXACT_MAX_N {
        permutation_p(&rx, &ry, rho)
    } else if rho.abs() >= 1.0 {
        0.0
    } else {
        let df = (n - 2) as f64;
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
        (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
    };
    Ok((rho, p))
}

/// Share of rank permutations at least as extreme as `rho`.
fn permutation_p(rx: &[f64], ry: &[f64], rho: f64) -> f64 {
    let mut perm = ry.to_vec();
    let mut hits = 0u64;
    let mut total = 0u64;
    let tol = 1e-12;
    heap_permutations(&mut perm, &mut |p| {
        total += 1;
        if let Ok(r) = pearson(rx, p) {
            if r.abs() >= rho.abs() - tol {
                hits += 1;
            }
        }
    });
    hits as f64 / total as f64
}

fn heap_permutations(v: &mut [f64], f: &mut dyn FnMut(&[f64])) {
    let n = v.len();
    let mut c = vec![0usize; n];
    f(v);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                v.swap(0, i);
            } else {
                v.swap(c[i], i);
            }
            f(v);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}

/// Mean of per-component ρ for multi-score regression.
pub fn mean_component_rho(predicted: &[Vec<f64>], actual: &[Vec<f64>]) -> Result<f64> {
    if predicted.is_empty() || predicted.len() != actual.len() {
        return Err(Error::invalid("need matching, non-empty component lists"));
    }
    let mut s = 0.0;
    for (p, a) in predicted.iter().zip(actual) {
        s += spearman(p, a)?.0;
    }
    Ok(s / predicted.len() as f64)
}

/// Confusion counts and the derived rates; a rate with a zero denominator
/// is `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

fn ratio(a: usize, b: usize) -> Option<f64> {
    (b > 0).then(|| a as f64 / b as f64)
}

impl BinaryMetrics {
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        Self {
            tp,
            fp,
            tn,
            fn_,
            accuracy: ratio(tp + tn, tp + tn + fp + fn_),
            sensitivity: ratio(tp, tp + fn_),
            specificity: ratio(tn, tn + fp),
        }
    }
}

/// `(predicted, actual)` class pairs against a positive class index.
pub fn binary_metrics(pairs: &[(usize, usize)], positive: usize) -> BinaryMetrics {
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for &(p, a) in pairs {
        match (p == positive, a == positive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    BinaryMetrics::from_counts(tp, fp, tn, fn_)
}

/// Mann–Whitney AUC: `P(s⁺ > s⁻) + ½·P(s⁺ = s⁻)`.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::invalid("roc_auc: scores and labels differ in length"));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("roc_auc needs both classes"));
    }
    let ranks = average_ranks(scores);
    let r_pos: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let u = r_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Largest number of non-zero differences for which the signed-rank null
/// distribution is enumerated exactly.
pub const WILCOXON_EXACT_MAX_N: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Number of non-zero differences.
    pub n: usize,
    /// Sum of ranks of positive differences (`after − before`).
    pub w_plus: f64,
    pub p_value: f64,
    pub exact: bool,
}

/// One-sided Wilcoxon signed-rank test of `after > before`. Zero
/// differences are dropped; ties share average ranks.
pub fn wilcoxon_one_sided(before: &[f64], after: &[f64]) -> Result<WilcoxonResult> {
    if before.len() != after.len() {
        return Err(Error::invalid("wilcoxon: samples must be paired"));
    }
    if before.len() < 5 {
        return Err(Error::invalid(format!(
            "wilcoxon needs at least 5 pairs, got {}",
            before.len()
        )));
    }
    let d: Vec<f64> = after
        .iter()
        .zip(before)
        .map(|(a, b)| a - b)
        .filter(|d| *d != 0.0)
        .collect();
    if d.is_empty() {
        return Err(Error::Degenerate(
            "all paired differences are zero: no evidence either way".into(),
        ));
    }
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = ranks.iter().zip(&d).filter(|(_, &v)| v > 0.0).map(|(r, _)| r).sum();
    let n = d.len();
    if n <= WILCOXON_EXACT_MAX_N {
        // doubled ranks are integers even with ties
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let max: usize = doubled.iter().sum();
        let mut counts = vec![0u64; max + 1];
        counts[0] = 1;
        for &r in &doubled {
            for s in (r..=max).rev() {
                counts[s] += counts[s - r];
            }
        }
        let obs = (2.0 * w_plus).round() as usize;
        let hits: u64 = counts[obs..].iter().sum();
        let p_value = hits as f64 / (1u64 << n) as f64;
        return Ok(WilcoxonResult {
            n,
            w_plus,
            p_value,
            exact: true,
        });
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut sorted = abs.clone();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let z = (w_plus - mean - 0.5) / var.sqrt();
    let p_value = 1.0 - Normal::standard().cdf(z);
    Ok(WilcoxonResult {
        n,
        w_plus,
        p_value,
        exact: false,
    })
}

/// Mean and population standard deviation.
pub fn mean_std(v: &[f64]) -> Option<(f64, f64)> {
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    Some((m, var.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_reference_values() {
        let (rho, _) = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((rho - 0.8).abs() < 1e-12);
        let x = [0.3, 1.2, -4.0, 7.5, 2.2];
        let y: Vec<f64> = x.iter().map(|v: &f64| v.exp()).collect();
        assert!((spearman(&x, &y).unwrap().0 - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = y.iter().map(|v| -v).collect();
        assert!((spearman(&x, &neg).unwrap().0 + 1.0).abs() < 1e-12);
        assert!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn spearman_small_sample_p_is_a_permutation_share() {
        // perfectly monotone n=4: 2 of 24 orderings reach |ρ| = 1
        let (_, p) = spearman(&[1.0, 2.0, 3.0, 4.0], &[2.0, 4.0, 6.0, 8.0]).unwrap();
        assert!((p - 2.0 / 24.0).abs() < 1e-15);
    }

    #[test]
    fn confusion_arithmetic() {
        let m = BinaryMetrics::from_counts(3, 2, 4, 1);
        assert_eq!(m.accuracy, Some(0.7));
        assert_eq!(m.sensitivity, Some(0.75));
        assert!((m.specificity.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let none = binary_metrics(&[(0, 0), (0, 0)], 0);
        assert_eq!(none.specificity, None);
        assert_eq!(none.accuracy, Some(1.0));
    }

    #[test]
    fn swapping_positive_class_swaps_rates() {
        let pairs = [(0, 0), (1, 0), (1, 1), (0, 1), (1, 1), (0, 0), (0, 0)];
        let a = binary_metrics(&pairs, 0);
        let b = binary_metrics(&pairs, 1);
        assert_eq!(a.sensitivity, b.specificity);
        assert_eq!(a.specificity, b.sensitivity);
    }

    #[test]
    fn auc_reference_values() {
        let auc = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert!((auc - 0.75).abs() < 1e-15);
        let flipped = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[true, true, false, false]).unwrap();
        assert!((flipped - 0.25).abs() < 1e-15);
        assert_eq!(roc_auc(&[0.1, 0.9], &[false, true]).unwrap(), 1.0);
        assert!(roc_auc(&[0.1, 0.9], &[true, true]).is_err());
    }

    #[test]
    fn wilcoxon_reference_values() {
        let before = [0.9; 10];
        let after: Vec<f64> = (0..10).map(|i| 0.91 + i as f64 * 0.001).collect();
        let r = wilcoxon_one_sided(&before, &after).unwrap();
        assert_eq!(r.p_value, 1.0 / 1024.0);

        let before = [0.0; 6];
        let after = [1.0, -1.0, 2.0, -2.0, 3.0, -3.0];
        assert!(wilcoxon_one_sided(&before, &after).unwrap().p_value >= 0.5);

        let scaled: Vec<f64> = after.iter().map(|v| v * 7.5).collect();
        assert_eq!(
            wilcoxon_one_sided(&before, &after).unwrap().p_value,
            wilcoxon_one_sided(&before, &scaled).unwrap().p_value
        );
        assert!(matches!(
            wilcoxon_one_sided(&[1.0; 6], &[1.0; 6]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn population_std() {
        let (m, s) = mean_std(&[100.0, 200.0]).unwrap();
        assert_eq!((m, s), (150.0, 50.0));
    }
}
