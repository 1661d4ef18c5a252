//! Per-trial predictions, the interchange between evaluation, trust and
//! explanation.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Allowed deviation of a confidence vector's sum from 1.
pub const PROBABILITY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub trial: String,
    pub fold: usize,
    /// Class probabilities; empty for regression.
    pub confidences: Vec<f64>,
    pub predicted: Option<usize>,
    pub actual: Option<usize>,
    /// Regression output in original score units.
    pub predicted_score: Option<f64>,
    pub actual_score: Option<f64>,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

impl PredictionRecord {
    pub fn classification(
        trial: impl Into<String>,
        confidences: Vec<f64>,
        actual: Option<usize>,
    ) -> Result<Self> {
        let r = Self {
            trial: trial.into(),
            fold: 0,
            predicted: Some(argmax(&confidences)),
            confidences,
            actual,
            predicted_score: None,
            actual_score: None,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn regression(trial: impl Into<String>, predicted: f64, actual: Option<f64>) -> Self {
        Self {
            trial: trial.into(),
            fold: 0,
            confidences: Vec::new(),
            predicted: None,
            actual: None,
            predicted_score: Some(predicted),
            actual_score: actual,
        }
    }

    pub fn with_fold(mut self, fold: usize) -> Self {
        self.fold = fold;
        self
    }

    pub fn is_classification(&self) -> bool {
        !self.confidences.is_empty()
    }

    /// Confidence of the predicted class.
    pub fn confidence(&self) -> Option<f64> {
        self.predicted.and_then(|p| self.confidences.get(p).copied())
    }

    pub fn is_correct(&self) -> Option<bool> {
        Some(self.predicted? == self.actual?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.confidences.is_empty() {
            return Ok(());
        }
        let k = self.confidences.len();
        if self.confidences.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::invalid(format!(
                "{}: confidences must lie in [0, 1], got {:?}",
                self.trial, self.confidences
            )));
        }
        let s: f64 = self.confidences.iter().sum();
        if (s - 1.0).abs() > PROBABILITY_TOLERANCE {
            return Err(Error::invalid(format!(
                "{}: confidences sum to {s}, not 1",
                self.trial
            )));
        }
        if self.predicted != Some(argmax(&self.confidences)) {
            return Err(Error::invalid(format!(
                "{}: predicted class {:?} is not the arg-max of the confidences",
                self.trial, self.predicted
            )));
        }
        if let Some(a) = self.actual {
            if a >= k {
                return Err(Error::invalid(format!(
                    "{}: actual class {a} out of range for {k} classes",
                    self.trial
                )));
            }
        }
        Ok(())
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn parse_opt<T: std::str::FromStr>(s: &str, what: &str, line: usize) -> Result<Option<T>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| Error::Parse {
        path: "predictions".into(),
        line,
        column: 1,
        detail: format!("bad {what} `{s}`"),
    })
}

/// CSV with columns `trial,fold,predicted,actual,predicted_score,actual_score,conf_0..`.
pub fn records_to_csv(records: &[PredictionRecord]) -> Result<String> {
    let k = records.iter().map(|r| r.confidences.len()).max().unwrap_or(0);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = [
        "trial",
        "fold",
        "predicted",
        "actual",
        "predicted_score",
        "actual_score",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((0..k).map(|i| format!("conf_{i}")));
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.trial.clone(),
            r.fold.to_string(),
            opt(r.predicted),
            opt(r.actual),
            opt(r.predicted_score),
            opt(r.actual_score),
        ];
        row.extend((0..k).map(|i| opt(r.confidences.get(i))));
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn records_from_csv(text: &str) -> Result<Vec<PredictionRecord>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, row) in r.records().enumerate() {
        let row = row?;
        let line = i + 2;
        let get = |j: usize| row.get(j).unwrap_or("");
        let confidences = (6..row.len())
            .filter(|&j| !get(j).is_empty())
            .map(|j| parse_opt::<f64>(get(j), "confidence", line).map(|v| v.unwrap_or(0.0)))
            .collect::<Result<Vec<_>>>()?;
        let rec = PredictionRecord {
            trial: get(0).to_string(),
            fold: parse_opt(get(1), "fold", line)?.unwrap_or(0),
            confidences,
            predicted: parse_opt(get(2), "predicted class", line)?,
            actual: parse_opt(get(3), "actual class", line)?,
            predicted_score: parse_opt(get(4), "predicted score", line)?,
            actual_score: parse_opt(get(5), "actual score", line)?,
        };
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_records(records: &[PredictionRecord], path: &Path) -> Result<()> {
    fs::write(path, records_to_csv(records)?).map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    records_from_csv(&text)
}
