use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Skill class. Index order is fixed: `[pass, fail]` for the binary scheme,
/// `[novice, intermediate, expert]` for the three-level scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassLabel {
    Pass,
    Fail,
    Novice,
    Intermediate,
    Expert,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelScheme {
    Binary,
    Skill3,
}

impl LabelScheme {
    pub fn classes(self) -> &'static [ClassLabel] {
        match self {
            LabelScheme::Binary => &[ClassLabel::Pass, ClassLabel::Fail],
            LabelScheme::Skill3 => &[
                ClassLabel::Novice,
                ClassLabel::Intermediate,
                ClassLabel::Expert,
            ],
        }
    }

    pub fn len(self) -> usize {
        self.classes().len()
    }

    pub fn label(self, index: usize) -> Option<ClassLabel> {
        self.classes().get(index).copied()
    }
}

impl ClassLabel {
    pub fn scheme(self) -> LabelScheme {
        match self {
            ClassLabel::Pass | ClassLabel::Fail => LabelScheme::Binary,
            _ => LabelScheme::Skill3,
        }
    }

    pub fn index(self) -> usize {
        match self {
            ClassLabel::Pass | ClassLabel::Novice => 0,
            ClassLabel::Fail | ClassLabel::Intermediate => 1,
            ClassLabel::Expert => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ClassLabel::Pass => "pass",
            ClassLabel::Fail => "fail",
            ClassLabel::Novice => "novice",
            ClassLabel::Intermediate => "intermediate",
            ClassLabel::Expert => "expert",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClassLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pass" => Ok(ClassLabel::Pass),
            "fail" => Ok(ClassLabel::Fail),
            "novice" => Ok(ClassLabel::Novice),
            "intermediate" => Ok(ClassLabel::Intermediate),
            "expert" => Ok(ClassLabel::Expert),
            other => Err(Error::invalid(format!("unknown class label `{other}`"))),
        }
    }
}

/// `K`-vector with a 1 at `index`.
pub fn one_hot(index: usize, k: usize) -> Result<Vec<f64>> {
    if index >= k {
        return Err(Error::invalid(format!(
            "class index {index} out of range for {k} classes"
        )));
    }
    let mut v = vec![0.0; k];
    v[index] = 1.0;
    Ok(v)
}

/// How far through the fixed preprocessing chain a trial has travelled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    Raw,
    GapFilled,
    Downsampled,
    Normalized,
}

/// Stable identifier `"<subject>/<trial index>"`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TrialId(pub String);

impl TrialId {
    pub fn new(subject: &str, trial_index: u32) -> Self {
        TrialId(format!("{subject}/{trial_index}"))
    }
}

impl fmt::Display for TrialId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// One motion sequence: `T` frames × `C` channels, row-major.
///
/// Missed detections are stored as NaN until [`fill_gaps`](super::fill_gaps)
/// removes them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub subject_id: String,
    pub trial_index: u32,
    pub sample_rate_hz: f64,
    pub channels: Vec<String>,
    values: Vec<f64>,
    pub score: Option<f64>,
    pub class_label: Option<ClassLabel>,
    pub stage: Stage,
}

impl Trial {
    pub fn new(
        subject_id: impl Into<String>,
        trial_index: u32,
        sample_rate_hz: f64,
        channels: Vec<String>,
        values: Vec<f64>,
    ) -> Result<Self> {
        let subject_id = subject_id.into();
        if trial_index < 1 {
            return Err(Error::invalid("trial index must be at least 1"));
        }
        if !(sample_rate_hz > 0.0 && sample_rate_hz.is_finite()) {
            return Err(Error::invalid(format!(
                "sample rate must be positive, got {sample_rate_hz}"
            )));
        }
        if channels.is_empty() {
            return Err(Error::invalid("a trial needs at least one channel"));
        }
        if values.is_empty() || values.len() % channels.len() != 0 {
            return Err(Error::shape(
                "trial",
                format!(
                    "{} values do not form whole frames of {} channels",
                    values.len(),
                    channels.len()
                ),
            ));
        }
        if values.iter().any(|v| v.is_infinite()) {
            return Err(Error::invalid("trial values must be finite"));
        }
        Ok(Self {
            subject_id,
            trial_index,
            sample_rate_hz,
            channels,
            values,
            score: None,
            class_label: None,
            stage: Stage::Raw,
        })
    }

    pub fn with_labels(mut self, score: Option<f64>, class_label: Option<ClassLabel>) -> Self {
        self.score = score;
        self.class_label = class_label;
        self
    }

    pub fn id(&self) -> TrialId {
        TrialId::new(&self.subject_id, self.trial_index)
    }

    pub fn frames(&self) -> usize {
        self.values.len() / self.channels.len()
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let c = self.n_channels();
        &self.values[t * c..(t + 1) * c]
    }

    pub fn get(&self, t: usize, c: usize) -> f64 {
        self.values[t * self.n_channels() + c]
    }

    pub fn is_missing(&self, t: usize, c: usize) -> bool {
        self.get(t, c).is_nan()
    }

    pub fn missing_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_nan()).count()
    }

    /// Same metadata, new values (frame count may change).
    pub fn with_values(&self, values: Vec<f64>, stage: Stage) -> Result<Self> {
        if values.is_empty() || values.len() % self.n_channels() != 0 {
            return Err(Error::shape(
                "trial",
                format!(
                    "{} values do not form whole frames of {} channels",
                    values.len(),
                    self.n_channels()
                ),
            ));
        }
        Ok(Self {
            values,
            stage,
            ..self.clone_meta()
        })
    }

    fn clone_meta(&self) -> Self {
        Self {
            subject_id: self.subject_id.clone(),
            trial_index: self.trial_index,
            sample_rate_hz: self.sample_rate_hz,
            channels: self.channels.clone(),
            values: Vec::new(),
            score: self.score,
            class_label: self.class_label,
            stage: self.stage,
        }
    }

    /// `T×C` tensor of the values; fails if any frame is still missing.
    pub fn to_tensor(&self) -> Result<Tensor> {
        if self.missing_count() > 0 {
            return Err(Error::invalid(format!(
                "trial {} still has missing frames",
                self.id()
            )));
        }
        Tensor::matrix(self.frames(), self.n_channels(), self.values.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_binary_order() {
        assert_eq!(one_hot(ClassLabel::Pass.index(), 2).unwrap(), vec![1.0, 0.0]);
        assert_eq!(one_hot(ClassLabel::Fail.index(), 2).unwrap(), vec![0.0, 1.0]);
        for k in 1..5 {
            for i in 0..k {
                assert_eq!(one_hot(i, k).unwrap().iter().sum::<f64>(), 1.0);
            }
        }
        assert!(one_hot(2, 2).is_err());
    }

    #[test]
    fn labels_roundtrip_through_text() {
        for l in [
            ClassLabel::Pass,
            ClassLabel::Fail,
            ClassLabel::Novice,
            ClassLabel::Intermediate,
            ClassLabel::Expert,
        ] {
            assert_eq!(l.as_str().parse::<ClassLabel>().unwrap(), l);
            assert_eq!(l.scheme().label(l.index()), Some(l));
        }
    }

    #[test]
    fn rejects_ragged_values() {
        let err = Trial::new("s", 1, 30.0, vec!["a".into(), "b".into()], vec![1.0, 2.0, 3.0]);
        assert!(err.is_err());
    }
}
