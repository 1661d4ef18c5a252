use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::trial::{Stage, Trial, TrialId};
use crate::error::{Error, Result};

/// Replaces missed detections. An interior gap takes the mean of the
/// nearest valid frames on either side; leading and trailing runs copy the
/// nearest valid frame. Channels are handled independently.
pub fn fill_gaps(trial: &Trial) -> Result<Trial> {
    let (t_len, c) = (trial.frames(), trial.n_channels());
    let mut out = trial.values().to_vec();
    for ch in 0..c {
        let valid: Vec<usize> = (0..t_len).filter(|&t| !trial.is_missing(t, ch)).collect();
        if valid.is_empty() {
            return Err(Error::Degenerate(format!(
                "channel `{}` of trial {} has no detected frames",
                trial.channels[ch],
                trial.id()
            )));
        }
        if valid.len() == t_len {
            continue;
        }
        let mut next = 0usize;
        for t in 0..t_len {
            while next < valid.len() && valid[next] < t {
                next += 1;
            }
            if next < valid.len() && valid[next] == t {
                continue;
            }
            let before = next.checked_sub(1).map(|i| trial.get(valid[i], ch));
            let after = valid.get(next).map(|&i| trial.get(i, ch));
            out[t * c + ch] = match (before, after) {
                (Some(a), Some(b)) => 0.5 * (a + b),
                (Some(a), None) => a,
                (None, Some(b)) => b,
                (None, None) => unreachable!("channel has at least one valid frame"),
            };
        }
    }
    trial.with_values(out, trial.stage.max(Stage::GapFilled))
}

/// Relative slack on `rate ≥ target` so that rates like 29.97 Hz reach a
/// 1 Hz target and stay there under repeated application.
const RATE_SLACK: f64 = 0.01;

/// Keeps every `round(rate/target)`-th frame starting at `phase`.
pub fn downsample(trial: &Trial, target_hz: f64, phase: usize) -> Result<Trial> {
    if !(target_hz > 0.0 && target_hz.is_finite()) {
        return Err(Error::invalid(format!("target rate {target_hz} Hz")));
    }
    let rate = trial.sample_rate_hz;
    if rate < target_hz * (1.0 - RATE_SLACK) {
        return Err(Error::invalid(format!(
            "cannot downsample trial {} from {rate} Hz up to {target_hz} Hz",
            trial.id()
        )));
    }
    let stride = ((rate / target_hz).round() as usize).max(1);
    if phase >= stride {
        return Err(Error::invalid(format!(
            "phase {phase} must be smaller than the stride {stride}"
        )));
    }
    if phase >= trial.frames() {
        return Err(Error::invalid(format!(
            "phase {phase} leaves no frames in trial {}",
            trial.id()
        )));
    }
    let values: Vec<f64> = (phase..trial.frames())
        .step_by(stride)
        .flat_map(|t| trial.frame(t).iter().copied())
        .collect();
    let mut out = trial.with_values(values, trial.stage.max(Stage::Downsampled))?;
    out.sample_rate_hz = rate / stride as f64;
    Ok(out)
}

/// The trials a statistic was fitted on.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitProvenance {
    pub fitted_on: BTreeSet<TrialId>,
}

impl FitProvenance {
    pub fn from_trials<'a>(trials: impl IntoIterator<Item = &'a Trial>) -> Self {
        Self {
            fitted_on: trials.into_iter().map(Trial::id).collect(),
        }
    }

    /// Fails if any of `ids` contributed to the fit.
    pub fn assert_disjoint<'a>(&self, ids: impl IntoIterator<Item = &'a TrialId>) -> Result<()> {
        for id in ids {
            if self.fitted_on.contains(id) {
                return Err(Error::Leakage(id.0.clone()));
            }
        }
        Ok(())
    }
}

/// Per-channel min/max fitted on training trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMaxStats {
    pub channels: Vec<String>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    #[serde(skip)]
    pub provenance: FitProvenance,
}

impl MinMaxStats {
    pub fn fit(trials: &[&Trial]) -> Result<Self> {
        let first = trials
            .first()
            .ok_or_else(|| Error::invalid("min-max fit needs at least one trial"))?;
        let c = first.n_channels();
        let mut min = vec![f64::INFINITY; c];
        let mut max = vec![f64::NEG_INFINITY; c];
        for trial in trials {
            if trial.channels != first.channels {
                return Err(Error::invalid(format!(
                    "trial {} has channels {:?}, expected {:?}",
                    trial.id(),
                    trial.channels,
                    first.channels
                )));
            }
            for frame in trial.values().chunks_exact(c) {
                for ((lo, hi), &v) in min.iter_mut().zip(max.iter_mut()).zip(frame) {
                    if v.is_nan() {
                        continue;
                    }
                    *lo = lo.min(v);
                    *hi = hi.max(v);
                }
            }
        }
        for (i, (lo, hi)) in min.iter().zip(&max).enumerate() {
            if !(hi > lo) {
                return Err(Error::Degenerate(format!(
                    "channel `{}` is constant over the training trials",
                    first.channels[i]
                )));
            }
        }
        Ok(Self {
            channels: first.channels.clone(),
            min,
            max,
            provenance: FitProvenance::from_trials(trials.iter().copied()),
        })
    }

    /// `(x − min)/(max − min)` clamped to `[0, 1]`.
    pub fn apply(&self, trial: &Trial) -> Result<Trial> {
        if trial.channels.len() != self.channels.len() {
            return Err(Error::shape(
                "min-max",
                format!(
                    "channels: statistics cover {}, trial {} has {}",
                    self.channels.len(),
                    trial.id(),
                    trial.n_channels()
                ),
            ));
        }
        if trial.missing_count() > 0 {
            return Err(Error::PipelineOrder(format!(
                "trial {} must be gap-filled before normalization",
                trial.id()
            )));
        }
        let c = self.channels.len();
        let values = trial
            .values()
            .chunks_exact(c)
            .flat_map(|frame| {
                frame
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| ((v - self.min[i]) / (self.max[i] - self.min[i])).clamp(0.0, 1.0))
            })
            .collect();
        trial.with_values(values, Stage::Normalized)
    }

    pub fn normalize_value(&self, channel: usize, v: f64) -> f64 {
        ((v - self.min[channel]) / (self.max[channel] - self.min[channel])).clamp(0.0, 1.0)
    }

    pub fn denormalize_value(&self, channel: usize, v: f64) -> f64 {
        self.min[channel] + v * (self.max[channel] - self.min[channel])
    }
}

/// Score standardization with the population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZNorm {
    pub mean: f64,
    pub std: f64,
}

impl ZNorm {
    pub fn fit(scores: &[f64]) -> Result<Self> {
        if scores.len() < 2 {
            return Err(Error::Degenerate(
                "z-normalization needs at least two scores".into(),
            ));
        }
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        if !(std > 0.0) {
            return Err(Error::Degenerate("scores have zero spread".into()));
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, s: f64) -> f64 {
        (s - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// One step of the preprocessing chain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Step {
    FillGaps,
    Downsample { target_hz: f64, phase: usize },
    MinMax,
}

impl Step {
    fn rank(self) -> u8 {
        match self {
            Step::FillGaps => 0,
            Step::Downsample { .. } => 1,
            Step::MinMax => 2,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Step::FillGaps => "fill_gaps",
            Step::Downsample { .. } => "downsample",
            Step::MinMax => "minmax",
        }
    }
}

/// Validated preprocessing chain: `fill_gaps → downsample → minmax`, each
/// step at most once and in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline {
    steps: Vec<Step>,
}

impl Pipeline {
    pub fn new(steps: Vec<Step>) -> Result<Self> {
        for pair in steps.windows(2) {
            if pair[1].rank() <= pair[0].rank() {
                return Err(Error::PipelineOrder(format!(
                    "`{}` cannot follow `{}`; the order is fill_gaps → downsample → minmax",
                    pair[1].name(),
                    pair[0].name()
                )));
            }
        }
        Ok(Self { steps })
    }

    /// The full chain at `target_hz`, phase 0.
    pub fn standard(target_hz: f64) -> Self {
        Self {
            steps: vec![
                Step::FillGaps,
                Step::Downsample {
                    target_hz,
                    phase: 0,
                },
                Step::MinMax,
            ],
        }
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    /// Steps that need no fitted statistics.
    pub fn prepare(&self, trial: &Trial) -> Result<Trial> {
        let mut t = trial.clone();
        for step in &self.steps {
            t = match *step {
                Step::FillGaps => fill_gaps(&t)?,
                Step::Downsample { target_hz, phase } => downsample(&t, target_hz, phase)?,
                Step::MinMax => break,
            };
        }
        Ok(t)
    }

    pub fn normalizes(&self) -> bool {
        self.steps.contains(&Step::MinMax)
    }

    /// Fits min-max statistics on already prepared training trials.
    pub fn fit(&self, prepared_train: &[&Trial]) -> Result<Option<MinMaxStats>> {
        if !self.normalizes() {
            return Ok(None);
        }
        MinMaxStats::fit(prepared_train).map(Some)
    }

    /// Normalizes a prepared trial with fitted statistics.
    pub fn finish(&self, prepared: &Trial, stats: Option<&MinMaxStats>) -> Result<Trial> {
        match (self.normalizes(), stats) {
            (false, _) => Ok(prepared.clone()),
            (true, Some(s)) => s.apply(prepared),
            (true, None) => Err(Error::invalid("pipeline normalizes but no statistics were fitted")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trial(rate: f64, c: usize, values: Vec<f64>) -> Trial {
        let chans = (0..c).map(|i| format!("c{i}")).collect();
        Trial::new("s1", 1, rate, chans, values).unwrap()
    }

    /// Straight re-implementation of the gap rule for one channel.
    fn fill_oracle(col: &[Option<f64>]) -> Vec<f64> {
        (0..col.len())
            .map(|t| {
                if let Some(v) = col[t] {
                    return v;
                }
                let prev = col[..t].iter().rev().find_map(|v| *v);
                let next = col[t + 1..].iter().find_map(|v| *v);
                match (prev, next) {
                    (Some(a), Some(b)) => (a + b) / 2.0,
                    (Some(a), None) => a,
                    (None, Some(b)) => b,
                    _ => panic!(),
                }
            })
            .collect()
    }

    #[test]
    fn interior_gap_is_averaged() {
        let t = trial(30.0, 2, vec![1.0, 1.0, f64::NAN, f64::NAN, 3.0, 3.0]);
        let f = fill_gaps(&t).unwrap();
        assert_eq!(f.values(), &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn leading_gap_copies_first_valid() {
        let raw = vec![None, Some(5.0), Some(7.0), None, None, Some(1.0), None];
        let values: Vec<f64> = raw.iter().map(|v| v.unwrap_or(f64::NAN)).collect();
        let t = trial(30.0, 1, values);
        let f = fill_gaps(&t).unwrap();
        assert_eq!(f.values(), fill_oracle(&raw).as_slice());
        assert_eq!(f.values()[0], 5.0);
    }

    #[test]
    fn fill_without_gaps_is_identity_and_idempotent() {
        let t = trial(30.0, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let f = fill_gaps(&t).unwrap();
        assert_eq!(f.values(), t.values());
        let g = trial(30.0, 1, vec![f64::NAN, 2.0, f64::NAN, 4.0]);
        let once = fill_gaps(&g).unwrap();
        assert_eq!(fill_gaps(&once).unwrap().values(), once.values());
    }

    #[test]
    fn fully_missing_channel_is_rejected() {
        let t = trial(30.0, 2, vec![1.0, f64::NAN, 2.0, f64::NAN]);
        assert!(matches!(fill_gaps(&t), Err(Error::Degenerate(_))));
    }

    #[test]
    fn downsample_strides() {
        let t = trial(30.0, 1, (0..300).map(|i| i as f64).collect());
        assert_eq!(downsample(&t, 1.0, 0).unwrap().frames(), 10);
        let t = trial(30.0, 1, (0..299).map(|i| i as f64).collect());
        let d = downsample(&t, 1.0, 0).unwrap();
        let expected: Vec<f64> = (0..10).map(|i| (i * 30) as f64).collect();
        assert_eq!(d.values(), expected.as_slice());
        assert_eq!(d.sample_rate_hz, 1.0);
        assert_eq!(downsample(&d, 1.0, 0).unwrap().values(), d.values());
        let t1 = trial(1.0, 1, vec![1.0, 2.0, 3.0]);
        assert_eq!(downsample(&t1, 1.0, 0).unwrap().values(), t1.values());
        assert!(downsample(&t1, 5.0, 0).is_err());
    }

    #[test]
    fn minmax_midpoint_clamp_and_roundtrip() {
        let train = trial(1.0, 1, vec![0.0, 640.0, 100.0]);
        let stats = MinMaxStats::fit(&[&train]).unwrap();
        assert_eq!(stats.normalize_value(0, 320.0), 0.5);
        let test = trial(1.0, 1, vec![-5.0, 700.0]);
        assert_eq!(stats.apply(&test).unwrap().values(), &[0.0, 1.0]);
        for x in [0.0, 13.7, 320.0, 639.9] {
            let back = stats.denormalize_value(0, stats.normalize_value(0, x));
            assert!((back - x).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_channel_is_rejected_by_name() {
        let t = trial(1.0, 2, vec![0.0, 3.0, 1.0, 3.0]);
        let err = MinMaxStats::fit(&[&t]).unwrap_err().to_string();
        assert!(err.contains("c1"), "{err}");
    }

    #[test]
    fn znorm_population_convention() {
        let z = ZNorm::fit(&[100.0, 200.0]).unwrap();
        assert_eq!(z.apply(100.0), -1.0);
        assert_eq!(z.apply(200.0), 1.0);
        assert_eq!(z.apply(150.0), 0.0);
        for s in [17.3, 150.0, 260.1] {
            assert!((z.invert(z.apply(s)) - s).abs() < 1e-12);
        }
        assert!(ZNorm::fit(&[3.0, 3.0]).is_err());
    }

    #[test]
    fn pipeline_rejects_out_of_order_steps() {
        assert!(Pipeline::new(vec![Step::MinMax, Step::FillGaps]).is_err());
        assert!(Pipeline::new(vec![
            Step::Downsample {
                target_hz: 1.0,
                phase: 0
            },
            Step::FillGaps
        ])
        .is_err());
        assert!(Pipeline::new(vec![Step::FillGaps, Step::MinMax]).is_ok());
    }

    #[test]
    fn provenance_flags_leakage() {
        let a = trial(1.0, 1, vec![0.0, 1.0]);
        let stats = MinMaxStats::fit(&[&a]).unwrap();
        assert!(stats.provenance.assert_disjoint([&a.id()]).is_err());
        assert!(stats
            .provenance
            .assert_disjoint([&TrialId::new("other", 1)])
            .is_ok());
    }
}
