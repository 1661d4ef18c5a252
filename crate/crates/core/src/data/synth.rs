//! Labeled synthetic pattern-cutting trials.
//!
//! Each trial traces a circle with the scissors while the grasper follows
//! behind. Skilled ("pass" regime) trials are short and smooth; unskilled
//! ("fail" regime) trials are long, jittery and interrupted by stalls. Each
//! subject cuts around a slightly displaced circle, which shows up in the
//! score as precision error and ties part of the label to the subject.
//!
//! score = base − per_second·duration − per_roughness·roughness − per_deviation·deviation
//!
//! where roughness is the RMS second difference of the scissors path and
//! deviation the mean radial distance from the reference circle. The lowest
//! `round((1 − pass_fraction)·N)` scores are labeled fail.

use std::f64::consts::TAU;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::trial::{ClassLabel, Trial};
use super::Dataset;
use crate::error::{Error, Result};
use crate::exec::derive_seed;

/// Reference circle in the 640×480 frame.
pub const CIRCLE_CENTER: (f64, f64) = (320.0, 240.0);
pub const CIRCLE_RADIUS: f64 = 120.0;

pub const CHANNELS: [&str; 4] = ["sx", "sy", "gx", "gy"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_subjects: usize,
    pub trials_per_subject: usize,
    pub pass_fraction: f64,
    pub pass_duration_s: (f64, f64),
    pub fail_duration_s: (f64, f64),
    pub pass_jitter_px: (f64, f64),
    pub fail_jitter_px: (f64, f64),
    /// Fraction of a fail-regime trial spent stalled.
    pub fail_stall_fraction: (f64, f64),
    pub rate_hz: f64,
    /// Largest per-subject displacement of the circle center.
    pub subject_offset_px: f64,
    /// Largest per-subject change of the circle radius.
    pub subject_radius_px: f64,
    /// Per-frame probability that a tool detection is missed.
    pub missing_rate: f64,
    pub score_base: f64,
    pub per_second: f64,
    pub per_roughness: f64,
    pub per_deviation: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_subjects: 20,
            trials_per_subject: 100,
            pass_fraction: 0.9,
            pass_duration_s: (20.0, 45.0),
            fail_duration_s: (40.0, 80.0),
            pass_jitter_px: (0.5, 2.5),
            fail_jitter_px: (2.5, 8.0),
            fail_stall_fraction: (0.15, 0.3),
            rate_hz: 5.0,
            subject_offset_px: 10.0,
            subject_radius_px: 4.0,
            missing_rate: 0.01,
            score_base: 300.0,
            per_second: 1.0,
            per_roughness: 2.0,
            per_deviation: 0.5,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.n_subjects == 0 || self.trials_per_subject == 0 {
            return bad("need at least one subject and one trial per subject".into());
        }
        if !(self.pass_fraction > 0.0 && self.pass_fraction < 1.0) {
            return bad(format!("pass_fraction must lie in (0,1), got {}", self.pass_fraction));
        }
        for (name, (lo, hi)) in [
            ("pass_duration_s", self.pass_duration_s),
            ("fail_duration_s", self.fail_duration_s),
        ] {
            if !(lo > 0.0 && hi >= lo) {
                return bad(format!("{name} must be a positive range, got ({lo}, {hi})"));
            }
        }
        for (name, (lo, hi)) in [
            ("pass_jitter_px", self.pass_jitter_px),
            ("fail_jitter_px", self.fail_jitter_px),
        ] {
            if !(lo >= 0.0 && hi >= lo) {
                return bad(format!("{name} must be a non-negative range, got ({lo}, {hi})"));
            }
        }
        let (slo, shi) = self.fail_stall_fraction;
        if !(slo >= 0.0 && shi >= slo && shi < 0.9) {
            return bad(format!("fail_stall_fraction ({slo}, {shi}) must lie in [0, 0.9)"));
        }
        if !(self.rate_hz > 0.0) {
            return bad(format!("rate_hz must be positive, got {}", self.rate_hz));
        }
        if !(0.0..0.5).contains(&self.missing_rate) {
            return bad(format!("missing_rate must lie in [0, 0.5), got {}", self.missing_rate));
        }
        Ok(())
    }

    pub fn n_trials(&self) -> usize {
        self.n_subjects * self.trials_per_subject
    }
}

/// Per-trial ground truth kept alongside the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialTruth {
    pub pass_regime: bool,
    pub duration_s: f64,
    pub roughness: f64,
    pub deviation: f64,
    pub mean_speed: f64,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub dataset: Dataset,
    pub truth: Vec<TrialTruth>,
    pub threshold: f64,
}

pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset> {
    generate(spec).map(|s| s.dataset)
}

pub fn generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let n = spec.n_trials();
    let n_pass = ((spec.pass_fraction * n as f64).round() as usize).clamp(1, n - 1);

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut regimes: Vec<bool> = (0..n).map(|i| i < n_pass).collect();
    regimes.shuffle(&mut rng);

    let subjects: Vec<(f64, f64, f64)> = (0..spec.n_subjects)
        .map(|_| {
            let angle = rng.random_range(0.0..TAU);
            let r = spec.subject_offset_px * rng.random_range(0.0f64..1.0).sqrt();
            let dr = spec.subject_radius_px * rng.random_range(-1.0..1.0);
            (r * angle.cos(), r * angle.sin(), dr)
        })
        .collect();

    let mut trials = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    for s in 0..spec.n_subjects {
        for k in 0..spec.trials_per_subject {
            let idx = s * spec.trials_per_subject + k;
            let mut trng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, idx as u64));
            let (trial, t) = one_trial(spec, s, k, regimes[idx], subjects[s], &mut trng)?;
            scores.push(
                spec.score_base
                    - spec.per_second * t.duration_s
                    - spec.per_roughness * t.roughness
                    - spec.per_deviation * t.deviation,
            );
            trials.push(trial);
            truth.push(t);
        }
    }

    let n_fail = n - n_pass;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let threshold = scores[order[n_fail]];
    let mut is_fail = vec![false; n];
    for &i in &order[..n_fail] {
        is_fail[i] = true;
    }
    for (i, trial) in trials.iter_mut().enumerate() {
        let label = if is_fail[i] {
            ClassLabel::Fail
        } else {
            ClassLabel::Pass
        };
        trial.score = Some(scores[i]);
        trial.class_label = Some(label);
    }
    Ok(SynthDataset {
        dataset: Dataset::new(trials)?,
        truth,
        threshold,
    })
}

fn one_trial(
    spec: &SynthSpec,
    subject: usize,
    k: usize,
    pass: bool,
    (dx, dy, dr): (f64, f64, f64),
    rng: &mut ChaCha8Rng,
) -> Result<(Trial, TrialTruth)> {
    // higher skill → shorter and smoother
    let skill: f64 = rng.random_range(0.0..1.0);
    let lerp = |(lo, hi): (f64, f64), u: f64| lo + (hi - lo) * u;
    let (dur_range, jit_range) = if pass {
        (spec.pass_duration_s, spec.pass_jitter_px)
    } else {
        (spec.fail_duration_s, spec.fail_jitter_px)
    };
    let duration = lerp(dur_range, 1.0 - skill);
    let jitter = lerp(jit_range, 1.0 - skill);
    let frames = ((duration * spec.rate_hz).round() as usize).max(2);

    // progress profile: smooth speed modulation, zero during stalls
    let mut speed: Vec<f64> = (0..frames)
        .map(|t| {
            let phase = t as f64 / frames as f64;
            1.0 + 0.3 * (TAU * 2.0 * phase + skill * 3.0).sin()
        })
        .collect();
    if !pass {
        let stall_total = lerp(spec.fail_stall_fraction, rng.random_range(0.0..1.0));
        let n_stalls = rng.random_range(1..=3usize);
        let per = ((stall_total * frames as f64) / n_stalls as f64).round() as usize;
        for _ in 0..n_stalls {
            if per == 0 || per >= frames {
                break;
            }
            let start = rng.random_range(0..frames - per);
            speed[start..start + per].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let total: f64 = speed.iter().sum::<f64>().max(f64::MIN_POSITIVE);
    let (cx, cy) = (CIRCLE_CENTER.0 + dx, CIRCLE_CENTER.1 + dy);
    let radius = CIRCLE_RADIUS + dr;
    let start_angle = rng.random_range(0.0..TAU);

    let mut progress = 0.0;
    let mut scissors = Vec::with_capacity(frames);
    let mut grasper = Vec::with_capacity(frames);
    for &s in &speed {
        progress += s;
        let theta = start_angle + TAU * progress / total;
        let nx: f64 = rng.sample(StandardNormal);
        let ny: f64 = rng.sample(StandardNormal);
        scissors.push((
            cx + radius * theta.cos() + jitter * nx,
            cy + radius * theta.sin() + jitter * ny,
        ));
        let lag = theta - 0.6;
        let gx: f64 = rng.sample(StandardNormal);
        let gy: f64 = rng.sample(StandardNormal);
        grasper.push((
            cx + 0.7 * radius * lag.cos() + 0.5 * jitter * gx,
            cy + 0.7 * radius * lag.sin() + 0.5 * jitter * gy,
        ));
    }

    let roughness = rms_second_difference(&scissors);
    let deviation = scissors
        .iter()
        .map(|&(x, y)| {
            ((x - CIRCLE_CENTER.0).hypot(y - CIRCLE_CENTER.1) - CIRCLE_RADIUS).abs()
        })
        .sum::<f64>()
        / frames as f64;
    let path: f64 = scissors
        .windows(2)
        .map(|w| (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1))
        .sum();
    let mean_speed = path / duration;

    let mut values = Vec::with_capacity(frames * 4);
    for (s, g) in scissors.iter().zip(&grasper) {
        let miss_s = rng.random_bool(spec.missing_rate);
        let miss_g = rng.random_bool(spec.missing_rate);
        let (sx, sy) = if miss_s { (f64::NAN, f64::NAN) } else { *s };
        let (gx, gy) = if miss_g { (f64::NAN, f64::NAN) } else { *g };
        values.extend_from_slice(&[sx, sy, gx, gy]);
    }
    // keep each channel detectable at least once
    values[..4].copy_from_slice(&[scissors[0].0, scissors[0].1, grasper[0].0, grasper[0].1]);

    let trial = Trial::new(
        format!("S{:02}", subject + 1),
        (k + 1) as u32,
        spec.rate_hz,
        CHANNELS.iter().map(|c| c.to_string()).collect(),
        values,
    )?;
    Ok((
        trial,
        TrialTruth {
            pass_regime: pass,
            duration_s: duration,
            roughness,
            deviation,
            mean_speed,
        },
    ))
}

fn rms_second_difference(path: &[(f64, f64)]) -> f64 {
    if path.len() < 3 {
        return 0.0;
    }
    let s: f64 = path
        .windows(3)
        .map(|w| {
            let ax = w[2].0 - 2.0 * w[1].0 + w[0].0;
            let ay = w[2].1 - 2.0 * w[1].1 + w[0].1;
            0.5 * (ax * ax + ay * ay)
        })
        .sum();
    (s / (path.len() - 2) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            n_subjects: 4,
            trials_per_subject: 10,
            seed: 3,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.dataset.fingerprint(), b.dataset.fingerprint());
        let c = generate(&SynthSpec { seed: 4, ..small() }).unwrap();
        assert_ne!(a.dataset.fingerprint(), c.dataset.fingerprint());
    }

    #[test]
    fn labels_follow_score_quantile() {
        let s = generate(&small()).unwrap();
        for t in &s.dataset.trials {
            let pass = t.score.unwrap() >= s.threshold;
            assert_eq!(t.class_label == Some(ClassLabel::Pass), pass);
        }
    }

    #[test]
    fn ratio_matches_pass_fraction() {
        let spec = SynthSpec {
            n_subjects: 20,
            trials_per_subject: 100,
            ..SynthSpec::default()
        };
        let d = synth_dataset(&spec).unwrap();
        assert_eq!(d.len(), 2000);
        assert_eq!(d.imbalance_ratio(), Some(9.0));
    }

    /// Duration and mean speed measured from the files alone.
    fn observed_features(t: &Trial) -> [f64; 2] {
        let filled = crate::data::fill_gaps(t).unwrap();
        let duration = filled.frames() as f64 / filled.sample_rate_hz;
        let mut path = 0.0;
        for i in 1..filled.frames() {
            let (a, b) = (filled.frame(i - 1), filled.frame(i));
            path += (b[0] - a[0]).hypot(b[1] - a[1]);
        }
        [duration, path / duration]
    }

    fn stump_errors(rows: &[([f64; 2], bool)], f: usize, thr: f64) -> usize {
        let (mut lp, mut ln, mut rp, mut rn) = (0, 0, 0, 0);
        for (x, y) in rows {
            match (x[f] <= thr, *y) {
                (true, true) => lp += 1,
                (true, false) => ln += 1,
                (false, true) => rp += 1,
                (false, false) => rn += 1,
            }
        }
        lp.min(ln) + rp.min(rn)
    }

    fn candidates(rows: &[([f64; 2], bool)], f: usize) -> Vec<f64> {
        let mut v: Vec<f64> = rows.iter().map(|r| r.0[f]).collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    }

    /// Exhaustive depth-2 tree: one root split, one split per side.
    fn best_depth2_accuracy(rows: &[([f64; 2], bool)]) -> f64 {
        let best_side = |side: &[([f64; 2], bool)]| -> usize {
            let pos = side.iter().filter(|r| r.1).count();
            let mut best = pos.min(side.len() - pos);
            for f in 0..2 {
                for thr in candidates(side, f) {
                    best = best.min(stump_errors(side, f, thr));
                }
            }
            best
        };
        let mut best = rows.len();
        for f in 0..2 {
            for thr in candidates(rows, f) {
                let (l, r): (Vec<_>, Vec<_>) = rows.iter().partition(|r| r.0[f] <= thr);
                if l.is_empty() || r.is_empty() {
                    continue;
                }
                best = best.min(best_side(&l) + best_side(&r));
            }
        }
        1.0 - best as f64 / rows.len() as f64
    }

    #[test]
    fn classes_are_learnable_by_a_shallow_tree() {
        let spec = SynthSpec {
            n_subjects: 6,
            trials_per_subject: 25,
            pass_jitter_px: (0.6, 1.2),
            fail_jitter_px: (3.0, 6.0),
            seed: 11,
            ..SynthSpec::default()
        };
        let d = synth_dataset(&spec).unwrap();
        let rows: Vec<([f64; 2], bool)> = d
            .trials
            .iter()
            .map(|t| (observed_features(t), t.class_label == Some(ClassLabel::Pass)))
            .collect();
        let acc = best_depth2_accuracy(&rows);
        assert!(acc >= 0.95, "depth-2 accuracy {acc}");
    }

    #[test]
    fn fail_regime_is_longer_and_rougher() {
        let s = generate(&small()).unwrap();
        let mean = |pass: bool, f: fn(&TrialTruth) -> f64| {
            let v: Vec<f64> = s.truth.iter().filter(|t| t.pass_regime == pass).map(f).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean(false, |t| t.duration_s) > mean(true, |t| t.duration_s));
        assert!(mean(false, |t| t.roughness) > 2.0 * mean(true, |t| t.roughness));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(SynthSpec { pass_fraction: 1.0, ..small() }.validate().is_err());
        assert!(SynthSpec { pass_duration_s: (0.0, 3.0), ..small() }.validate().is_err());
    }
}
