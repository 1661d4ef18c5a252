//! Mask → retrain → compare.
//!
//! Fold by fold, the whole dataset is masked with true-class maps from that
//! fold's baseline model, and the fold is retrained from scratch on the
//! masked data with the baseline's split and seeds. Paired per-fold metrics
//! go through a one-sided signed-rank test (after > before).

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::cam::mask_dataset;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{
    build_report, check_labels, fmt_sig, mean_std, run_split, wilcoxon_one_sided, CvConfig, CvRun, FoldRun, FoldSeeds,
    WilcoxonResult,
};
use crate::exec::{map_indexed, Execution};
use crate::model::{Mode, ModelBundle};

pub const COMPARED_METRICS: [&str; 3] = ["accuracy", "sensitivity", "specificity"];

/// Digest of one fold's test ids, train ids and training seeds.
pub fn fold_artifact_hash(run: &CvRun, repeat: usize, fold: usize) -> Result<String> {
    let a = run
        .assignments
        .get(repeat)
        .and_then(|a| a.folds.get(fold))
        .ok_or_else(|| Error::invalid(format!("no fold {} in repeat {}", fold + 1, repeat + 1)))?;
    let f = run
        .folds
        .iter()
        .find(|f| f.repeat == repeat && f.fold == fold)
        .ok_or_else(|| Error::invalid(format!("fold {} was never run", fold + 1)))?;
    let mut h = Sha256::new();
    for (tag, side) in [("test", &a.test), ("train", &a.train)] {
        h.update(tag.as_bytes());
        for &i in side.iter() {
            h.update(run.roster[i].id.0.as_bytes());
            h.update([0]);
        }
    }
    for s in [f.seeds.dae, f.seeds.head, f.seeds.supervised] {
        h.update(s.to_le_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricComparison {
    pub metric: String,
    pub before: Vec<Option<f64>>,
    pub after: Vec<Option<f64>>,
    pub mean_before: Option<f64>,
    pub mean_after: Option<f64>,
    /// Why no test was run, e.g. all differences zero.
    pub outcome: std::result::Result<WilcoxonResult, String>,
}

impl MetricComparison {
    pub fn p_value(&self) -> Option<f64> {
        self.outcome.as_ref().ok().map(|w| w.p_value)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CamValidation {
    pub fold_hashes: Vec<String>,
    pub metrics: Vec<MetricComparison>,
}

impl CamValidation {
    pub fn metric(&self, name: &str) -> Option<&MetricComparison> {
        self.metrics.iter().find(|m| m.metric == name)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "folds = {}", self.fold_hashes.len());
        let _ = writeln!(s, "alternative = after > before");
        for m in &self.metrics {
            let _ = writeln!(s, "\n[{}]", m.metric);
            let opt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), fmt_sig);
            let _ = writeln!(s, "mean_before = {}", opt(m.mean_before));
            let _ = writeln!(s, "mean_after = {}", opt(m.mean_after));
            match &m.outcome {
                Ok(w) => {
                    let _ = writeln!(s, "n = {}", w.n);
                    let _ = writeln!(s, "w_plus = {}", fmt_sig(w.w_plus));
                    let _ = writeln!(s, "p_value = {}", fmt_sig(w.p_value));
                    let _ = writeln!(s, "exact = {}", w.exact);
                }
                Err(e) => {
                    let _ = writeln!(s, "p_value = none ({e})");
                }
            }
        }
        s.push_str("\n[folds]\nfold");
        for m in &self.metrics {
            let _ = write!(s, ",{0}_before,{0}_after", m.metric);
        }
        s.push_str(",hash\n");
        for (f, hash) in self.fold_hashes.iter().enumerate() {
            let _ = write!(s, "{}", f + 1);
            for m in &self.metrics {
                let opt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), fmt_sig);
                let _ = write!(s, ",{},{}", opt(m.before[f]), opt(m.after[f]));
            }
            let _ = writeln!(s, ",{hash}");
        }
        s
    }
}

fn check_baseline(dataset: &Dataset, baseline: &CvRun) -> Result<()> {
    if baseline.config.mode != Mode::Classification {
        return Err(Error::invalid("map validation needs a classification baseline"));
    }
    if baseline.roster.len() != dataset.len()
        || baseline
            .roster
            .iter()
            .zip(&dataset.trials)
            .any(|(e, t)| e.id != t.id())
    {
        return Err(Error::invalid("baseline run was made on a different dataset"));
    }
    Ok(())
}

fn baseline_bundle(baseline: &CvRun, fold: usize) -> Result<&ModelBundle> {
    baseline
        .folds
        .iter()
        .find(|r| r.repeat == 0 && r.fold == fold)
        .and_then(|r| r.outcome.as_ref().ok())
        .map(|o| &o.bundle)
        .ok_or_else(|| Error::MissingArtifact {
            path: PathBuf::from(format!("fold-{:02}", fold + 1)),
            detail: "baseline fold has no trained model".into(),
        })
}

/// Pairs two runs fold by fold (first repeat) and tests each metric.
pub fn compare_runs(before: &CvRun, after: &CvRun) -> Result<CamValidation> {
    let n = before.assignments.first().map_or(0, |a| a.len());
    if n == 0 || after.assignments.first().map_or(0, |a| a.len()) != n {
        return Err(Error::invalid("runs have different fold counts"));
    }
    let mut fold_hashes = Vec::with_capacity(n);
    for f in 0..n {
        let hb = fold_artifact_hash(before, 0, f)?;
        let ha = fold_artifact_hash(after, 0, f)?;
        if hb != ha {
            return Err(Error::invalid(format!(
                "fold {} differs between runs ({hb} vs {ha}); the comparison would not be paired",
                f + 1
            )));
        }
        fold_hashes.push(hb);
    }
    let metrics = COMPARED_METRICS
        .iter()
        .map(|&name| {
            let b = before.report.fold_values(name, 0);
            let a = after.report.fold_values(name, 0);
            let defined = |v: &[Option<f64>]| v.iter().copied().collect::<Option<Vec<f64>>>();
            let mean = |v: &[Option<f64>]| defined(v).and_then(|d| mean_std(&d)).map(|m| m.0);
            let outcome = match (defined(&b), defined(&a)) {
                (Some(bv), Some(av)) => wilcoxon_one_sided(&bv, &av).map_err(|e| match e {
                    Error::Degenerate(_) => "no evidence: every paired difference is zero".to_string(),
                    other => other.to_string(),
                }),
                _ => Err("metric undefined or fold failed in at least one run".to_string()),
            };
            MetricComparison {
                metric: name.to_string(),
                mean_before: mean(&b),
                mean_after: mean(&a),
                before: b,
                after: a,
                outcome,
            }
        })
        .collect();
    Ok(CamValidation { fold_hashes, metrics })
}

/// For each fold of the first repeat: mask the dataset with that fold's
/// baseline model, retrain the fold from scratch with the baseline's split
/// and seeds, and finally compare the two runs.
pub fn validate_cams(
    dataset: &Dataset,
    baseline: &CvRun,
    exec: Execution,
) -> Result<(CvRun, CamValidation)> {
    check_baseline(dataset, baseline)?;
    let assignment = baseline
        .assignments
        .first()
        .ok_or_else(|| Error::invalid("baseline has no folds"))?
        .clone();
    for f in 0..assignment.len() {
        baseline_bundle(baseline, f)?;
    }
    let config = CvConfig {
        repeats: 1,
        ..baseline.config.clone()
    };
    let label_scheme = check_labels(dataset, config.mode)?;
    let folds = map_indexed(assignment.len(), exec, |f| {
        let seeds = FoldSeeds::derive(config.repeat_seed(0), f);
        let split = &assignment.folds[f];
        let outcome = baseline_bundle(baseline, f)
            .and_then(|b| mask_dataset(dataset, b, config.target_hz))
            .and_then(|masked| run_split(&masked, &config, split, f, seeds))
            .map_err(|e| e.to_string());
        if let Err(e) = &outcome {
            log::warn!("masked fold {} failed: {e}", f + 1);
        }
        FoldRun {
            repeat: 0,
            fold: f,
            seeds,
            n_test: split.test.len(),
            outcome,
        }
    });
    let report = build_report(&config, label_scheme, &folds);
    let after = CvRun {
        config,
        roster: baseline.roster.clone(),
        assignments: vec![assignment],
        folds,
        report,
    };
    let comparison = compare_runs(baseline, &after)?;
    Ok((after, comparison))
}
