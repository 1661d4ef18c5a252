//! Question-answer trust, trust densities, the trust spectrum and
//! NetTrustScore.
//!
//! For a sample of class `z` with predicted-class confidence `C`:
//! `Q_z = C^α` when the prediction is `z`, `1 − C^β` otherwise. The
//! spectrum `T(z)` is the mean `Q_z` over class-`z` samples and
//! `NTS = Σ_z P(z)·T(z)` with `P(z)` the empirical class share.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::fmt_sig;
use crate::record::PredictionRecord;

pub const GRID_POINTS: usize = 512;
/// Bandwidth used when the value set has no spread.
pub const DEGENERATE_BANDWIDTH: f64 = 0.05;

fn check_exponents(alpha: f64, beta: f64) -> Result<()> {
    if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
        return Err(Error::invalid(format!(
            "trust exponents must be positive, got α = {alpha}, β = {beta}"
        )));
    }
    Ok(())
}

/// Trust of one class-`z` sample. Fails when `z` is out of range or the
/// record's actual class is not `z`.
pub fn qa_trust(record: &PredictionRecord, z: usize, alpha: f64, beta: f64) -> Result<f64> {
    check_exponents(alpha, beta)?;
    record.validate()?;
    let k = record.confidences.len();
    if z >= k {
        return Err(Error::invalid(format!("class {z} out of range for {k} classes")));
    }
    let actual = record
        .actual
        .ok_or_else(|| Error::invalid(format!("record {} has no actual class", record.trial)))?;
    if actual != z {
        return Err(Error::invalid(format!(
            "record {} belongs to class {actual}, not {z}",
            record.trial
        )));
    }
    let c = record
        .confidence()
        .ok_or_else(|| Error::invalid(format!("record {} has no prediction", record.trial)))?;
    Ok(if record.predicted == Some(z) {
        c.powf(alpha)
    } else {
        1.0 - c.powf(beta)
    })
}

/// Silverman's rule `0.9·min(σ, IQR/1.34)·n^(−1/5)`, never finer than the
/// grid spacing; [`DEGENERATE_BANDWIDTH`] when the values have no spread.
pub fn silverman_bandwidth(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return DEGENERATE_BANDWIDTH;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (n - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
    };
    let iqr = q(0.75) - q(0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    if spread <= 0.0 {
        return DEGENERATE_BANDWIDTH;
    }
    let spacing = 1.0 / (GRID_POINTS - 1) as f64;
    (0.9 * spread * (n as f64).powf(-0.2)).max(spacing)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityCurve {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
    pub n: usize,
}

impl DensityCurve {
    /// Trapezoid rule over the grid.
    pub fn integral(&self) -> f64 {
        trapezoid(&self.grid, &self.density)
    }

    pub fn argmax(&self) -> f64 {
        self.grid[crate::record::argmax(&self.density)]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("grid,density\n");
        for (g, d) in self.grid.iter().zip(&self.density) {
            let _ = writeln!(s, "{g},{d}");
        }
        s
    }
}

fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(xw, yw)| (xw[1] - xw[0]) * (yw[0] + yw[1]) / 2.0)
        .sum()
}

/// Gaussian-kernel density on 512 points over `[0, 1]`, rescaled so the
/// grid integral is 1 (kernel mass outside the interval is folded back
/// proportionally). `bandwidth = None` uses [`silverman_bandwidth`].
pub fn trust_density(values: &[f64], bandwidth: Option<f64>) -> Result<DensityCurve> {
    if values.is_empty() {
        return Err(Error::invalid("density estimate needs at least one value"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("density values must be finite"));
    }
    let h = match bandwidth {
        Some(h) if h > 0.0 && h.is_finite() => h,
        Some(h) => return Err(Error::invalid(format!("bandwidth must be positive, got {h}"))),
        None => silverman_bandwidth(values),
    };
    let grid: Vec<f64> = (0..GRID_POINTS).map(|i| i as f64 / (GRID_POINTS - 1) as f64).collect();
    let norm = 1.0 / (values.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let mut density: Vec<f64> = grid
        .iter()
        .map(|&g| {
            norm * values
                .iter()
                .map(|v| (-0.5 * ((g - v) / h).powi(2)).exp())
                .sum::<f64>()
        })
        .collect();
    let total = trapezoid(&grid, &density);
    if total > 0.0 {
        density.iter_mut().for_each(|d| *d /= total);
    }
    Ok(DensityCurve {
        grid,
        density,
        bandwidth: h,
        n: values.len(),
    })
}

/// Trust curves of class `z`, split by whether the prediction was right.
/// A side with no samples is `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalDensity {
    pub class: usize,
    pub n_correct: usize,
    pub n_incorrect: usize,
    pub correct: Option<DensityCurve>,
    pub incorrect: Option<DensityCurve>,
}

pub fn class_trust_values(records: &[PredictionRecord], z: usize, alpha: f64, beta: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut correct = Vec::new();
    let mut incorrect = Vec::new();
    for r in records.iter().filter(|r| r.actual == Some(z)) {
        let q = qa_trust(r, z, alpha, beta)?;
        if r.predicted == Some(z) {
            correct.push(q);
        } else {
            incorrect.push(q);
        }
    }
    if correct.is_empty() && incorrect.is_empty() {
        return Err(Error::invalid(format!("no records of class {z}")));
    }
    Ok((correct, incorrect))
}

pub fn conditional_trust_density(
    records: &[PredictionRecord],
    z: usize,
    alpha: f64,
    beta: f64,
    bandwidth: Option<f64>,
) -> Result<ConditionalDensity> {
    let (correct, incorrect) = class_trust_values(records, z, alpha, beta)?;
    let curve = |v: &[f64]| (!v.is_empty()).then(|| trust_density(v, bandwidth)).transpose();
    Ok(ConditionalDensity {
        class: z,
        n_correct: correct.len(),
        n_incorrect: incorrect.len(),
        correct: curve(&correct)?,
        incorrect: curve(&incorrect)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustSpectrum {
    /// `T(z)` per class.
    pub spectrum: Vec<f64>,
    /// `P(z)` per class.
    pub proportions: Vec<f64>,
    pub nts: f64,
}

fn n_classes(records: &[PredictionRecord]) -> Result<usize> {
    let k = records
        .first()
        .map(|r| r.confidences.len())
        .ok_or_else(|| Error::invalid("trust needs at least one record"))?;
    if k == 0 {
        return Err(Error::invalid("trust needs classification records"));
    }
    if let Some(r) = records.iter().find(|r| r.confidences.len() != k) {
        return Err(Error::invalid(format!(
            "record {} has {} classes, expected {k}",
            r.trial,
            r.confidences.len()
        )));
    }
    Ok(k)
}

pub fn trust_spectrum_and_nts(records: &[PredictionRecord], alpha: f64, beta: f64) -> Result<TrustSpectrum> {
    check_exponents(alpha, beta)?;
    let k = n_classes(records)?;
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for r in records {
        let z = r
            .actual
            .ok_or_else(|| Error::invalid(format!("record {} has no actual class", r.trial)))?;
        sums[z] += qa_trust(r, z, alpha, beta)?;
        counts[z] += 1;
    }
    if let Some(z) = counts.iter().position(|&c| c == 0) {
        return Err(Error::invalid(format!("class {z} has no samples")));
    }
    let n = records.len() as f64;
    let spectrum: Vec<f64> = sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
    let proportions: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    let nts = spectrum.iter().zip(&proportions).map(|(t, p)| t * p).sum();
    Ok(TrustSpectrum {
        spectrum,
        proportions,
        nts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustReport {
    pub alpha: f64,
    pub beta: f64,
    pub spectrum: TrustSpectrum,
    /// Trust density of all class-`z` samples.
    pub densities: Vec<DensityCurve>,
    pub conditional: Vec<ConditionalDensity>,
}

pub fn trust_report(
    records: &[PredictionRecord],
    alpha: f64,
    beta: f64,
    bandwidth: Option<f64>,
) -> Result<TrustReport> {
    let spectrum = trust_spectrum_and_nts(records, alpha, beta)?;
    let k = spectrum.spectrum.len();
    let mut densities = Vec::with_capacity(k);
    let mut conditional = Vec::with_capacity(k);
    for z in 0..k {
        let (c, i) = class_trust_values(records, z, alpha, beta)?;
        let all: Vec<f64> = c.into_iter().chain(i).collect();
        densities.push(trust_density(&all, bandwidth)?);
        conditional.push(conditional_trust_density(records, z, alpha, beta, bandwidth)?);
    }
    Ok(TrustReport {
        alpha,
        beta,
        spectrum,
        densities,
        conditional,
    })
}

impl TrustReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "alpha = {}", fmt_sig(self.alpha));
        let _ = writeln!(s, "beta = {}", fmt_sig(self.beta));
        let _ = writeln!(s, "nts = {}", fmt_sig(self.spectrum.nts));
        for (z, (t, p)) in self.spectrum.spectrum.iter().zip(&self.spectrum.proportions).enumerate() {
            let cd = &self.conditional[z];
            let _ = writeln!(s, "\n[class {z}]");
            let _ = writeln!(s, "spectrum = {}", fmt_sig(*t));
            let _ = writeln!(s, "proportion = {}", fmt_sig(*p));
            let _ = writeln!(s, "n_correct = {}", cd.n_correct);
            let _ = writeln!(s, "n_incorrect = {}", cd.n_incorrect);
            let _ = writeln!(s, "bandwidth = {}", fmt_sig(self.densities[z].bandwidth));
        }
        s
    }

    /// `(file name, CSV)` per class and condition; absent sides are skipped.
    pub fn curve_files(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for (z, d) in self.densities.iter().enumerate() {
            out.push((format!("class{z}_all.csv"), d.to_csv()));
            let cd = &self.conditional[z];
            for (name, curve) in [("correct", &cd.correct), ("incorrect", &cd.incorrect)] {
                if let Some(c) = curve {
                    out.push((format!("class{z}_{name}.csv"), c.to_csv()));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(p_pass: f64, actual: usize) -> PredictionRecord {
        PredictionRecord::classification("S/1", vec![p_pass, 1.0 - p_pass], Some(actual)).unwrap()
    }

    /// Class-0 record predicted correctly (`ok`) with confidence `c`.
    fn scored(c: f64, ok: bool) -> PredictionRecord {
        rec(if ok { c } else { 1.0 - c }, 0)
    }

    #[test]
    fn tagged_examples() {
        assert!((qa_trust(&scored(0.9, true), 0, 1.0, 1.0).unwrap() - 0.9).abs() < 1e-15);
        assert!((qa_trust(&scored(0.9, false), 0, 1.0, 1.0).unwrap() - 0.1).abs() < 1e-15);
        assert!((qa_trust(&scored(0.9, true), 0, 2.0, 1.0).unwrap() - 0.81).abs() < 1e-15);
    }

    #[test]
    fn invalid_class_and_exponents() {
        assert!(qa_trust(&scored(0.9, true), 2, 1.0, 1.0).is_err());
        assert!(qa_trust(&scored(0.9, true), 1, 1.0, 1.0).is_err());
        assert!(qa_trust(&scored(0.9, true), 0, 0.0, 1.0).is_err());
    }

    #[test]
    fn perfect_trust() {
        let r = vec![rec(1.0, 0), rec(0.0, 1), rec(1.0, 0)];
        let t = trust_spectrum_and_nts(&r, 1.0, 1.0).unwrap();
        assert_eq!(t.spectrum, vec![1.0, 1.0]);
        assert_eq!(t.nts, 1.0);
    }

    #[test]
    fn two_sample_class_spectrum() {
        let r = vec![scored(0.8, true), scored(0.6, false), rec(0.0, 1)];
        let t = trust_spectrum_and_nts(&r, 1.0, 1.0).unwrap();
        assert!((t.spectrum[0] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn nts_weights_by_proportion() {
        // class 0: three samples averaging 0.9; class 1: one sample at 0.5
        let r = vec![scored(0.9, true), scored(0.9, true), scored(0.9, true), rec(0.5, 1)];
        let t = trust_spectrum_and_nts(&r, 1.0, 1.0).unwrap();
        assert!((t.spectrum[0] - 0.9).abs() < 1e-12 && (t.spectrum[1] - 0.5).abs() < 1e-12);
        assert!((t.nts - 0.8).abs() < 1e-12);
    }

    #[test]
    fn missing_class_is_rejected() {
        assert!(trust_spectrum_and_nts(&[rec(0.7, 0)], 1.0, 1.0).is_err());
    }

    #[test]
    fn single_value_peaks_at_nearest_grid_point() {
        let d = trust_density(&[0.9], None).unwrap();
        let nearest = (0.9f64 * 511.0).round() / 511.0;
        assert_eq!(d.argmax(), nearest);
    }

    #[test]
    fn symmetric_values_give_symmetric_curve() {
        let d = trust_density(&[0.4, 0.6], Some(0.05)).unwrap();
        for i in 0..GRID_POINTS {
            assert!((d.density[i] - d.density[GRID_POINTS - 1 - i]).abs() < 1e-9);
        }
    }

    #[test]
    fn concentrated_sample_integrates_to_one() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let n = Normal::new(0.5, 0.01).unwrap();
        let v: Vec<f64> = (0..10_000).map(|_| n.sample(&mut rng)).collect();
        let d = trust_density(&v, None).unwrap();
        assert!((d.integral() - 1.0).abs() < 1e-3);
        assert!((d.argmax() - 0.5).abs() < 0.01);
    }

    #[test]
    fn empty_density_is_rejected() {
        assert!(trust_density(&[], None).is_err());
        assert!(trust_density(&[0.5], Some(0.0)).is_err());
    }

    #[test]
    fn conditional_sides() {
        let all_right = vec![scored(0.9, true), scored(0.7, true)];
        let c = conditional_trust_density(&all_right, 0, 1.0, 1.0, None).unwrap();
        assert!(c.incorrect.is_none() && c.correct.is_some());

        let mixed = vec![scored(0.9, true), scored(0.9, false)];
        let c = conditional_trust_density(&mixed, 0, 1.0, 1.0, Some(0.02)).unwrap();
        assert!((c.correct.unwrap().argmax() - 0.9).abs() < 2e-3);
        assert!((c.incorrect.unwrap().argmax() - 0.1).abs() < 2e-3);
        assert!(conditional_trust_density(&mixed, 1, 1.0, 1.0, None).is_err());
    }

    #[test]
    fn binary_sides_match_confusion_counts() {
        let r = vec![rec(0.9, 0), rec(0.8, 0), rec(0.3, 0), rec(0.2, 1), rec(0.6, 1), rec(0.1, 1), rec(0.4, 1)];
        let (tp, fn_) = (2, 1);
        let (tn, fp) = (3, 1);
        let c0 = conditional_trust_density(&r, 0, 1.0, 1.0, None).unwrap();
        let c1 = conditional_trust_density(&r, 1, 1.0, 1.0, None).unwrap();
        assert_eq!((c0.n_correct, c0.n_incorrect), (tp, fn_));
        assert_eq!((c1.n_correct, c1.n_incorrect), (tn, fp));
    }

    #[test]
    fn report_curves_integrate_to_one() {
        let r = vec![rec(0.9, 0), rec(0.8, 0), rec(0.3, 0), rec(0.2, 1), rec(0.6, 1)];
        let rep = trust_report(&r, 1.0, 1.0, None).unwrap();
        for d in &rep.densities {
            assert!((d.integral() - 1.0).abs() < 1e-3);
        }
        assert!(rep.to_text().contains("nts = "));
        assert_eq!(rep.curve_files().len(), 6);
    }

    fn arb_records() -> impl Strategy<Value = Vec<PredictionRecord>> {
        proptest::collection::vec((0.0f64..=1.0, 0usize..2), 2..40).prop_map(|v| {
            let mut r: Vec<PredictionRecord> = v.into_iter().map(|(p, a)| rec(p, a)).collect();
            r.push(rec(0.5, 0));
            r.push(rec(0.5, 1));
            r
        })
    }

    proptest! {
        #[test]
        fn trust_lies_in_unit_interval(c in 0.0f64..=1.0, a in 0usize..2, alpha in 0.1f64..4.0, beta in 0.1f64..4.0) {
            let q = qa_trust(&rec(c, a), a, alpha, beta).unwrap();
            prop_assert!((0.0..=1.0).contains(&q));
        }

        #[test]
        fn nts_ignores_record_order(mut r in arb_records(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let a = trust_spectrum_and_nts(&r, 1.0, 1.0).unwrap().nts;
            r.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let b = trust_spectrum_and_nts(&r, 1.0, 1.0).unwrap().nts;
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn confidence_moves_nts_monotonically(r in arb_records(), i in any::<prop::sample::Index>(), bump in 0.0f64..0.5) {
            let i = i.index(r.len());
            let base = trust_spectrum_and_nts(&r, 1.0, 1.0).unwrap().nts;
            let mut r2 = r.clone();
            let old = &r[i];
            let pred = old.predicted.unwrap();
            let c = (old.confidences[pred] + bump).min(1.0);
            let conf = if pred == 0 { vec![c, 1.0 - c] } else { vec![1.0 - c, c] };
            r2[i] = PredictionRecord::classification("S/1", conf, old.actual).unwrap();
            prop_assume!(r2[i].predicted == old.predicted);
            let moved = trust_spectrum_and_nts(&r2, 1.0, 1.0).unwrap().nts;
            if old.is_correct() == Some(true) {
                prop_assert!(moved >= base - 1e-12);
            } else {
                prop_assert!(moved <= base + 1e-12);
            }
        }
    }
}
