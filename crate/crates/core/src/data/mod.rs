//! Trials, preprocessing, file formats and synthetic data.

pub mod io;
pub mod preprocess;
pub mod synth;
pub mod trial;

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

pub use io::{load_manifest, parse_trial_csv, parse_trial_str, trial_to_csv, write_dataset, write_trial_csv};
pub use preprocess::{downsample, fill_gaps, FitProvenance, MinMaxStats, Pipeline, Step, ZNorm};
pub use synth::{synth_dataset, SynthSpec};
pub use trial::{one_hot, ClassLabel, LabelScheme, Stage, Trial, TrialId};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub trials: Vec<Trial>,
    pub minmax: Option<MinMaxStats>,
    pub scores: Option<ZNorm>,
}

impl Dataset {
    /// Checks that every trial has the same channel layout and a unique id.
    pub fn new(trials: Vec<Trial>) -> Result<Self> {
        if let Some(first) = trials.first() {
            for t in &trials[1..] {
                if t.channels != first.channels {
                    return Err(Error::shape(
                        "dataset",
                        format!(
                            "trial {} has channels [{}], expected [{}]",
                            t.id(),
                            t.channels.join(","),
                            first.channels.join(",")
                        ),
                    ));
                }
            }
        }
        let mut seen = std::collections::HashSet::new();
        for t in &trials {
            if !seen.insert(t.id()) {
                return Err(Error::invalid(format!("duplicate trial {}", t.id())));
            }
        }
        Ok(Self {
            trials,
            minmax: None,
            scores: None,
        })
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn n_channels(&self) -> Option<usize> {
        self.trials.first().map(Trial::n_channels)
    }

    pub fn class_counts(&self) -> BTreeMap<ClassLabel, usize> {
        let mut m = BTreeMap::new();
        for c in self.trials.iter().filter_map(|t| t.class_label) {
            *m.entry(c).or_insert(0) += 1;
        }
        m
    }

    /// Majority over minority class count; `None` with fewer than two
    /// labeled classes.
    pub fn imbalance_ratio(&self) -> Option<f64> {
        let counts = self.class_counts();
        if counts.len() < 2 {
            return None;
        }
        let max = *counts.values().max()?;
        let min = *counts.values().min()?;
        Some(max as f64 / min as f64)
    }

    pub fn subjects(&self) -> Vec<String> {
        let mut s: Vec<String> = self.trials.iter().map(|t| t.subject_id.clone()).collect();
        s.sort();
        s.dedup();
        s
    }

    /// SHA-256 over the canonical CSV text of every trial, in order.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.trials {
            h.update(trial_to_csv(t).as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trial(subject: &str, idx: u32, class: ClassLabel) -> Trial {
        Trial::new(subject, idx, 1.0, vec!["a".into()], vec![1.0, 2.0])
            .unwrap()
            .with_labels(None, Some(class))
    }

    #[test]
    fn imbalance_is_majority_over_minority() {
        let mut trials: Vec<Trial> = (1..=9).map(|i| trial("s", i, ClassLabel::Pass)).collect();
        trials.push(trial("s", 10, ClassLabel::Fail));
        let d = Dataset::new(trials).unwrap();
        assert_eq!(d.imbalance_ratio(), Some(9.0));
    }

    #[test]
    fn channel_layout_must_match() {
        let a = trial("s", 1, ClassLabel::Pass);
        let b = Trial::new("s", 2, 1.0, vec!["b".into()], vec![1.0]).unwrap();
        assert!(Dataset::new(vec![a, b]).is_err());
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let a = trial("s", 1, ClassLabel::Pass);
        assert!(Dataset::new(vec![a.clone(), a]).is_err());
    }
}
