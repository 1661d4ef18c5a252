//! Canonical text form of cross-validation results.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::mean_std;

/// Nine significant digits; fixed notation for moderate magnitudes.
pub fn fmt_sig(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    let mag = v.abs().log10().floor() as i32;
    if (-4..9).contains(&mag) {
        let decimals = (8 - mag).max(0) as usize;
        format!("{v:.decimals$}")
    } else {
        format!("{v:.8e}")
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), fmt_sig)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub repeat: usize,
    /// 1-based.
    pub fold: usize,
    pub n_test: usize,
    /// `None` when the fold failed.
    pub values: Option<BTreeMap<String, Option<f64>>>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Population standard deviation across folds.
    pub std: f64,
    /// Folds where the metric was defined.
    pub n: usize,
    /// Population standard deviation of per-repeat means.
    pub session_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scheme: String,
    pub mode: String,
    pub per_fold: Vec<FoldMetrics>,
    pub summary: BTreeMap<String, Summary>,
    /// Metrics over the pooled out-of-fold predictions.
    pub pooled: BTreeMap<String, Option<f64>>,
}

impl MetricsReport {
    pub fn build(
        scheme: String,
        mode: String,
        per_fold: Vec<FoldMetrics>,
        pooled: BTreeMap<String, Option<f64>>,
    ) -> Self {
        let mut names: Vec<&String> = per_fold
            .iter()
            .filter_map(|f| f.values.as_ref())
            .flat_map(|v| v.keys())
            .collect();
        names.sort();
        names.dedup();
        let repeats = per_fold.iter().map(|f| f.repeat).max().map_or(0, |r| r + 1);
        let mut summary = BTreeMap::new();
        for name in names {
            let values = |repeat: Option<usize>| -> Vec<f64> {
                per_fold
                    .iter()
                    .filter(|f| repeat.is_none_or(|r| f.repeat == r))
                    .filter_map(|f| f.values.as_ref()?.get(name).copied().flatten())
                    .collect()
            };
            let all = values(None);
            let Some((mean, std)) = mean_std(&all) else {
                continue;
            };
            let session_std = (repeats > 1)
                .then(|| {
                    let means: Vec<f64> = (0..repeats)
                        .filter_map(|r| mean_std(&values(Some(r))).map(|m| m.0))
                        .collect();
                    mean_std(&means).map(|m| m.1)
                })
                .flatten();
            summary.insert(
                name.clone(),
                Summary {
                    mean,
                    std,
                    n: all.len(),
                    session_std,
                },
            );
        }
        Self {
            scheme,
            mode,
            per_fold,
            summary,
            pooled,
        }
    }

    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.summary.get(metric).map(|s| s.mean)
    }

    /// Per-fold values of `metric` for one repeat, in fold order; failed
    /// folds and undefined values are `None`.
    pub fn fold_values(&self, metric: &str, repeat: usize) -> Vec<Option<f64>> {
        self.per_fold
            .iter()
            .filter(|f| f.repeat == repeat)
            .map(|f| f.values.as_ref().and_then(|v| v.get(metric).copied().flatten()))
            .collect()
    }

    pub fn failed_folds(&self) -> usize {
        self.per_fold.iter().filter(|f| f.values.is_none()).count()
    }

    /// Stable key order, nine significant digits.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "scheme = {}", self.scheme);
        let _ = writeln!(s, "mode = {}", self.mode);
        let _ = writeln!(s, "folds = {}", self.per_fold.len());
        let _ = writeln!(s, "failed_folds = {}", self.failed_folds());
        for (name, sm) in &self.summary {
            let _ = writeln!(
                s,
                "{name} = {} ± {}",
                fmt_sig(sm.mean),
                fmt_sig(sm.std)
            );
        }
        s.push_str("\n[summary]\n");
        for (name, sm) in &self.summary {
            let _ = writeln!(s, "{name}.mean = {}", fmt_sig(sm.mean));
            let _ = writeln!(s, "{name}.std = {}", fmt_sig(sm.std));
            let _ = writeln!(s, "{name}.n = {}", sm.n);
            if let Some(ss) = sm.session_std {
                let _ = writeln!(s, "{name}.session_std = {}", fmt_sig(ss));
            }
        }
        s.push_str("\n[pooled]\n");
        for (name, v) in &self.pooled {
            let _ = writeln!(s, "{name} = {}", fmt_opt(*v));
        }
        for f in &self.per_fold {
            let _ = writeln!(s, "\n[repeat {} fold {}]", f.repeat + 1, f.fold);
            let _ = writeln!(s, "n_test = {}", f.n_test);
            match (&f.values, &f.error) {
                (Some(values), _) => {
                    for (name, v) in values {
                        let _ = writeln!(s, "{name} = {}", fmt_opt(*v));
                    }
                }
                (None, err) => {
                    let _ = writeln!(s, "status = failed: {}", err.as_deref().unwrap_or("unknown"));
                }
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_significant_digits() {
        assert_eq!(fmt_sig(0.955), "0.955000000");
        assert_eq!(fmt_sig(212.5), "212.500000");
        assert_eq!(fmt_sig(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_sig(1.5e-7), "1.50000000e-7");
        assert_eq!(fmt_sig(0.0), "0");
    }

    #[test]
    fn summary_is_recomputable_from_folds() {
        let fold = |f: usize, acc: Option<f64>| FoldMetrics {
            repeat: 0,
            fold: f,
            n_test: 10,
            values: Some([("accuracy".to_string(), acc)].into_iter().collect()),
            error: None,
        };
        let r = MetricsReport::build(
            "stratified3".into(),
            "classification".into(),
            vec![fold(1, Some(0.9)), fold(2, Some(0.8)), fold(3, None)],
            BTreeMap::new(),
        );
        let s = r.summary["accuracy"];
        assert!((s.mean - 0.85).abs() < 1e-12);
        assert!((s.std - 0.05).abs() < 1e-12);
        assert_eq!(s.n, 2);
        assert!(r.to_text().contains("accuracy = undefined"));
    }
}
