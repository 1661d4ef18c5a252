//! Class activation maps and input masking.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Pipeline, Trial};
use crate::error::{Error, Result};
use crate::model::{Mode, ModelBundle};
use crate::nn::Tensor;

/// Per-timestep evidence for one class, aligned with the classifier input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CamMap {
    pub trial: String,
    pub class: usize,
    /// `raw` min-max scaled to `[0, 1]`.
    pub intensities: Vec<f64>,
    pub raw: Vec<f64>,
    pub raw_min: f64,
    pub raw_max: f64,
}

impl CamMap {
    /// A constant map normalizes to all ones, so masking with it is the
    /// identity.
    pub fn from_raw(trial: impl Into<String>, class: usize, raw: Vec<f64>) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::invalid("class activation map has no timesteps"));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("class activation map has non-finite values"));
        }
        let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let intensities = if hi > lo {
            raw.iter().map(|v| (v - lo) / (hi - lo)).collect()
        } else {
            vec![1.0; raw.len()]
        };
        Ok(Self {
            trial: trial.into(),
            class,
            intensities,
            raw,
            raw_min: lo,
            raw_max: hi,
        })
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    /// `t,intensity,raw_value`, one row per timestep.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,intensity,raw_value\n");
        for (t, (i, r)) in self.intensities.iter().zip(&self.raw).enumerate() {
            let _ = writeln!(s, "{t},{i},{r}");
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// `raw[i] = Σ_k w[k, class]·f[i, k]` for pre-pooling activations `f` (`T×K`)
/// and head weights `w` (`K×classes`).
pub fn raw_cam(features: &Tensor, weights: &Tensor, class: usize) -> Result<Vec<f64>> {
    let (t_len, k) = features.dims2("cam features")?;
    let (wk, n_classes) = weights.dims2("cam weights")?;
    if wk != k {
        return Err(Error::shape(
            "cam",
            format!("{k} feature channels but head weights have {wk} rows"),
        ));
    }
    if class >= n_classes {
        return Err(Error::invalid(format!("class {class} out of range for {n_classes} outputs")));
    }
    let f = features.data();
    let w = weights.data();
    Ok((0..t_len)
        .map(|i| (0..k).map(|j| w[j * n_classes + class] * f[i * k + j]).sum())
        .collect())
}

/// Map for a trial already preprocessed with the bundle's statistics.
pub fn compute_cam(bundle: &ModelBundle, trial: &Trial, class: usize) -> Result<CamMap> {
    if bundle.mode != Some(Mode::Classification) {
        return Err(Error::invalid("class activation maps need a classification bundle"));
    }
    let x = bundle.input_tensor(trial)?;
    let out = bundle.forward(&x)?;
    let raw = raw_cam(&out.pre_gap, bundle.head_weights()?, class)?;
    if raw.len() != trial.frames() {
        return Err(Error::shape(
            "cam",
            format!("map has {} steps for a {}-frame input", raw.len(), trial.frames()),
        ));
    }
    CamMap::from_raw(trial.id().0, class, raw)
}

/// Scales every frame of `trial` by the map's intensity at that frame.
pub fn mask_trial(trial: &Trial, cam: &CamMap) -> Result<Trial> {
    if cam.len() != trial.frames() {
        return Err(Error::shape(
            "mask",
            format!(
                "map for {} has {} steps, trial {} has {} frames",
                cam.trial,
                cam.len(),
                trial.id(),
                trial.frames()
            ),
        ));
    }
    let c = trial.n_channels();
    let values = trial
        .values()
        .chunks_exact(c)
        .zip(&cam.intensities)
        .flat_map(|(frame, &m)| frame.iter().map(move |v| v * m))
        .collect();
    trial.with_values(values, trial.stage)
}

/// Preprocesses each trial with the bundle's statistics and masks it with
/// its true-class map. Labels and ids are kept.
pub fn mask_dataset(dataset: &Dataset, bundle: &ModelBundle, target_hz: f64) -> Result<Dataset> {
    let pipeline = Pipeline::standard(target_hz);
    let trials = dataset
        .trials
        .iter()
        .map(|t| {
            let prepared = pipeline.finish(&pipeline.prepare(t)?, bundle.minmax.as_ref())?;
            let class = true_class(t)?;
            mask_trial(&prepared, &compute_cam(bundle, &prepared, class)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(trials)
}

pub(crate) fn true_class(t: &Trial) -> Result<usize> {
    t.class_label
        .map(|c| c.index())
        .ok_or_else(|| Error::invalid(format!("masking needs the true class of {}", t.id())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Stage;
    use proptest::prelude::*;

    fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, v.to_vec()).unwrap()
    }

    fn trial(frames: usize) -> Trial {
        let values = (0..frames * 2).map(|i| 0.1 + i as f64 * 0.01).collect();
        Trial::new("A", 1, 1.0, vec!["x".into(), "y".into()], values).unwrap()
    }

    #[test]
    fn single_unit_cam_is_its_activation() {
        let f = t(4, 1, &[0.3, -1.0, 2.5, 0.0]);
        let raw = raw_cam(&f, &t(1, 2, &[1.0, -2.0]), 0).unwrap();
        assert_eq!(raw, vec![0.3, -1.0, 2.5, 0.0]);
    }

    #[test]
    fn zero_weight_unit_changes_nothing() {
        let f1 = t(3, 1, &[0.3, -1.0, 2.5]);
        let f2 = t(3, 2, &[0.3, 9.0, -1.0, 4.0, 2.5, -7.0]);
        let a = raw_cam(&f1, &t(1, 1, &[1.5]), 0).unwrap();
        let b = raw_cam(&f2, &t(2, 1, &[1.5, 0.0]), 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn two_unit_hand_case() {
        let f = t(2, 2, &[1.0, 0.0, 0.0, 2.0]);
        let raw = raw_cam(&f, &t(2, 1, &[3.0, 1.0]), 0).unwrap();
        assert_eq!(raw, vec![3.0, 2.0]);
        let cam = CamMap::from_raw("A/1", 0, raw).unwrap();
        assert_eq!(cam.intensities, vec![1.0, 0.0]);
        assert_eq!((cam.raw_min, cam.raw_max), (2.0, 3.0));
    }

    #[test]
    fn constant_map_is_unit_mask() {
        let tr = trial(5);
        let cam = CamMap::from_raw("A/1", 0, vec![0.7; 5]).unwrap();
        assert_eq!(mask_trial(&tr, &cam).unwrap().values(), tr.values());
    }

    #[test]
    fn zero_map_annihilates() {
        let tr = trial(3);
        let cam = CamMap {
            intensities: vec![0.0; 3],
            ..CamMap::from_raw("A/1", 0, vec![0.0, 1.0, 2.0]).unwrap()
        };
        assert!(mask_trial(&tr, &cam).unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_broadcasts_across_channels() {
        let tr = trial(3).with_values(vec![2.0, 4.0, 2.0, 4.0, 2.0, 4.0], Stage::Normalized).unwrap();
        let cam = CamMap::from_raw("A/1", 0, vec![2.0, 1.5, 1.0]).unwrap();
        assert_eq!(cam.intensities, vec![1.0, 0.5, 0.0]);
        assert_eq!(mask_trial(&tr, &cam).unwrap().values(), &[2.0, 4.0, 1.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let cam = CamMap::from_raw("A/1", 0, vec![1.0, 2.0]).unwrap();
        assert!(mask_trial(&trial(3), &cam).is_err());
    }

    #[test]
    fn csv_columns() {
        let cam = CamMap::from_raw("A/1", 0, vec![1.0, 3.0]).unwrap();
        assert_eq!(cam.to_csv(), "t,intensity,raw_value\n0,0,1\n1,1,3\n");
    }

    proptest! {
        #[test]
        fn cam_is_linear_in_weights(
            f in proptest::collection::vec(-3.0f64..3.0, 12),
            w1 in proptest::collection::vec(-2.0f64..2.0, 3),
            w2 in proptest::collection::vec(-2.0f64..2.0, 3),
        ) {
            let feats = t(4, 3, &f);
            let sum: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| a + b).collect();
            let a = raw_cam(&feats, &t(3, 1, &w1), 0).unwrap();
            let b = raw_cam(&feats, &t(3, 1, &w2), 0).unwrap();
            let c = raw_cam(&feats, &t(3, 1, &sum), 0).unwrap();
            for i in 0..4 {
                prop_assert!((c[i] - a[i] - b[i]).abs() < 1e-12);
            }
        }

        #[test]
        fn intensities_stay_in_unit_range(raw in proptest::collection::vec(-50.0f64..50.0, 1..40)) {
            let cam = CamMap::from_raw("A/1", 0, raw).unwrap();
            prop_assert!(cam.intensities.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
