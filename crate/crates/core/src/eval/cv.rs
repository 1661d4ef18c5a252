//! Cross-validation driver: per fold, fit preprocessing on the training
//! trials, train the autoencoder, attach and train the head with the
//! encoder frozen, then predict the held-out trials.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::folds::{assign_folds, roster, FoldAssignment, RosterEntry, Scheme};
use super::metrics::{binary_metrics, roc_auc, spearman};
use super::report::{FoldMetrics, MetricsReport};
use crate::data::{Dataset, FitProvenance, LabelScheme, Pipeline, Trial};
use crate::error::{Error, Result};
use crate::exec::{derive_seed, map_indexed, Execution};
use crate::model::{
    build_default_classifier, predict, train_dae, train_supervised, ArchConfig, Group, Mode, ModelBundle,
    TrainConfig, TrainHistory,
};
use crate::record::PredictionRecord;

/// Index of the positive ("pass") class in binary classification.
pub const POSITIVE_CLASS: usize = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub scheme: Scheme,
    pub mode: Mode,
    /// Fold assignment and every derived training seed come from this.
    pub seed: u64,
    pub target_hz: f64,
    pub arch: ArchConfig,
    pub dae: TrainConfig,
    pub classifier: TrainConfig,
    /// Independent training sessions; each reshuffles folds and seeds.
    pub repeats: usize,
}

impl CvConfig {
    pub fn new(scheme: Scheme, mode: Mode, seed: u64) -> Self {
        Self {
            scheme,
            mode,
            seed,
            target_hz: 1.0,
            arch: ArchConfig::default(),
            dae: TrainConfig::dae(),
            classifier: TrainConfig::supervised(mode),
            repeats: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::invalid("repeats must be at least 1"));
        }
        if !(self.target_hz > 0.0 && self.target_hz.is_finite()) {
            return Err(Error::invalid(format!("target_hz must be positive, got {}", self.target_hz)));
        }
        self.dae.validate()?;
        self.classifier.validate()?;
        if self.mode == Mode::Regression && self.classifier.loss == crate::model::LossKind::Cosine {
            return Err(Error::invalid("cosine loss applies to classification only"));
        }
        Ok(())
    }

    /// Base seed of one training session.
    pub fn repeat_seed(&self, repeat: usize) -> u64 {
        if repeat == 0 {
            self.seed
        } else {
            derive_seed(self.seed, (1 << 32) | repeat as u64)
        }
    }
}

/// Seeds one fold trains with; before/after comparisons check these match.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSeeds {
    pub dae: u64,
    pub head: u64,
    pub supervised: u64,
}

impl FoldSeeds {
    pub fn derive(repeat_seed: u64, fold: usize) -> Self {
        let base = derive_seed(repeat_seed, fold as u64);
        Self {
            dae: derive_seed(base, 1),
            head: derive_seed(base, 2),
            supervised: derive_seed(base, 3),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FoldOutput {
    pub bundle: ModelBundle,
    pub records: Vec<PredictionRecord>,
    pub dae_history: TrainHistory,
    pub head_history: TrainHistory,
    pub encoder_before: String,
    pub encoder_after: String,
}

#[derive(Debug, Clone)]
pub struct FoldRun {
    pub repeat: usize,
    /// 0-based.
    pub fold: usize,
    pub seeds: FoldSeeds,
    pub n_test: usize,
    pub outcome: std::result::Result<FoldOutput, String>,
}

#[derive(Debug, Clone)]
pub struct CvRun {
    pub config: CvConfig,
    pub roster: Vec<RosterEntry>,
    /// One assignment per repeat.
    pub assignments: Vec<FoldAssignment>,
    pub folds: Vec<FoldRun>,
    pub report: MetricsReport,
}

impl CvRun {
    /// Out-of-fold records of successful folds, in fold order.
    pub fn records(&self, repeat: usize) -> Vec<PredictionRecord> {
        self.folds
            .iter()
            .filter(|f| f.repeat == repeat)
            .filter_map(|f| f.outcome.as_ref().ok())
            .flat_map(|o| o.records.iter().cloned())
            .collect()
    }

    /// Whether every successful fold left the encoder bit-identical.
    pub fn encoder_frozen_everywhere(&self) -> bool {
        self.folds
            .iter()
            .filter_map(|f| f.outcome.as_ref().ok())
            .all(|o| o.encoder_before == o.encoder_after)
    }
}

/// SHA-256 over the names, shapes and bit patterns of one parameter group.
pub fn group_digest(bundle: &ModelBundle, group: Group) -> String {
    let mut h = Sha256::new();
    for (name, t) in bundle.params.iter() {
        if Group::of(name) != Some(group) {
            continue;
        }
        h.update(name.as_bytes());
        h.update([0]);
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &v in t.data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

pub fn run_cv(dataset: &Dataset, cfg: &CvConfig, exec: Execution) -> Result<CvRun> {
    cfg.validate()?;
    let roster = roster(dataset);
    let assignments = (0..cfg.repeats)
        .map(|r| assign_folds(&roster, cfg.scheme, cfg.repeat_seed(r)))
        .collect::<Result<Vec<_>>>()?;
    run_cv_with(dataset, cfg, exec, assignments)
}

/// [`run_cv`] on given fold assignments (one per repeat).
pub fn run_cv_with(
    dataset: &Dataset,
    cfg: &CvConfig,
    exec: Execution,
    assignments: Vec<FoldAssignment>,
) -> Result<CvRun> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("cross-validation needs a non-empty dataset"));
    }
    if assignments.len() != cfg.repeats {
        return Err(Error::invalid(format!(
            "{} fold assignments for {} repeats",
            assignments.len(),
            cfg.repeats
        )));
    }
    for a in &assignments {
        a.check_partition(dataset.len())?;
    }
    let label_scheme = check_labels(dataset, cfg.mode)?;
    let roster = roster(dataset);
    let pipeline = Pipeline::standard(cfg.target_hz);
    let prepared: Vec<Trial> = map_indexed(dataset.len(), exec, |i| pipeline.prepare(&dataset.trials[i]))
        .into_iter()
        .collect::<Result<_>>()?;

    let jobs: Vec<(usize, usize)> = assignments
        .iter()
        .enumerate()
        .flat_map(|(r, a)| (0..a.len()).map(move |f| (r, f)))
        .collect();
    let folds = map_indexed(jobs.len(), exec, |j| {
        let (repeat, fold) = jobs[j];
        let seeds = FoldSeeds::derive(cfg.repeat_seed(repeat), fold);
        let split = &assignments[repeat].folds[fold];
        let outcome = run_fold(&pipeline, &prepared, &split.train, &split.test, cfg, label_scheme, seeds)
            .map(|mut o| {
                o.records.iter_mut().for_each(|r| r.fold = fold + 1);
                o
            })
            .map_err(|e| e.to_string());
        FoldRun {
            repeat,
            fold,
            seeds,
            n_test: split.test.len(),
            outcome,
        }
    });
    for f in &folds {
        if let Err(e) = &f.outcome {
            log::warn!("repeat {} fold {} failed: {e}", f.repeat + 1, f.fold + 1);
        }
    }
    let report = build_report(cfg, label_scheme, &folds);
    Ok(CvRun {
        config: cfg.clone(),
        roster,
        assignments,
        folds,
        report,
    })
}

/// Trains and tests a single split of `dataset`; records carry the 1-based
/// fold number.
pub fn run_split(
    dataset: &Dataset,
    cfg: &CvConfig,
    split: &super::folds::Fold,
    fold: usize,
    seeds: FoldSeeds,
) -> Result<FoldOutput> {
    cfg.validate()?;
    let label_scheme = check_labels(dataset, cfg.mode)?;
    let pipeline = Pipeline::standard(cfg.target_hz);
    let prepared: Vec<Trial> = dataset
        .trials
        .iter()
        .map(|t| pipeline.prepare(t))
        .collect::<Result<_>>()?;
    let mut out = run_fold(&pipeline, &prepared, &split.train, &split.test, cfg, label_scheme, seeds)?;
    out.records.iter_mut().for_each(|r| r.fold = fold + 1);
    Ok(out)
}

/// Per-fold and pooled metrics of finished folds.
pub fn build_report(cfg: &CvConfig, label_scheme: LabelScheme, folds: &[FoldRun]) -> MetricsReport {
    let per_fold = folds
        .iter()
        .map(|f| match &f.outcome {
            Ok(o) => FoldMetrics {
                repeat: f.repeat,
                fold: f.fold + 1,
                n_test: f.n_test,
                values: Some(record_metrics(&o.records, cfg.mode, label_scheme)),
                error: None,
            },
            Err(e) => FoldMetrics {
                repeat: f.repeat,
                fold: f.fold + 1,
                n_test: f.n_test,
                values: None,
                error: Some(e.clone()),
            },
        })
        .collect();
    let pooled: Vec<PredictionRecord> = folds
        .iter()
        .filter_map(|f| f.outcome.as_ref().ok())
        .flat_map(|o| o.records.iter().cloned())
        .collect();
    MetricsReport::build(
        cfg.scheme.to_string(),
        cfg.mode.as_str().to_string(),
        per_fold,
        record_metrics(&pooled, cfg.mode, label_scheme),
    )
}

/// The label scheme `mode` trains on; every trial must carry its target.
pub fn check_labels(dataset: &Dataset, mode: Mode) -> Result<LabelScheme> {
    match mode {
        Mode::Classification => {
            let mut scheme = None;
            for t in &dataset.trials {
                let c = t
                    .class_label
                    .ok_or_else(|| Error::invalid(format!("classification needs a class label on {}", t.id())))?;
                match scheme {
                    None => scheme = Some(c.scheme()),
                    Some(s) if s != c.scheme() => {
                        return Err(Error::invalid("trials mix binary and three-level labels"))
                    }
                    _ => {}
                }
            }
            Ok(scheme.unwrap_or(LabelScheme::Binary))
        }
        Mode::Regression => {
            if let Some(t) = dataset.trials.iter().find(|t| t.score.is_none()) {
                return Err(Error::invalid(format!("regression needs a score on {}", t.id())));
            }
            Ok(LabelScheme::Binary)
        }
    }
}

fn run_fold(
    pipeline: &Pipeline,
    prepared: &[Trial],
    train_idx: &[usize],
    test_idx: &[usize],
    cfg: &CvConfig,
    label_scheme: LabelScheme,
    seeds: FoldSeeds,
) -> Result<FoldOutput> {
    let train_raw: Vec<&Trial> = train_idx.iter().map(|&i| &prepared[i]).collect();
    if train_raw.is_empty() || test_idx.is_empty() {
        return Err(Error::invalid("fold has an empty side"));
    }
    if cfg.mode == Mode::Classification {
        let first = train_raw[0].class_label;
        if train_raw.iter().all(|t| t.class_label == first) {
            return Err(Error::invalid("training data has a single class"));
        }
    }
    let stats = pipeline.fit(&train_raw)?;
    let provenance = FitProvenance::from_trials(train_raw.iter().copied());
    let test_ids: Vec<_> = test_idx.iter().map(|&i| prepared[i].id()).collect();
    provenance.assert_disjoint(&test_ids)?;

    let train: Vec<Trial> = train_raw
        .iter()
        .map(|t| pipeline.finish(t, stats.as_ref()))
        .collect::<Result<_>>()?;
    let test: Vec<Trial> = test_idx
        .iter()
        .map(|&i| pipeline.finish(&prepared[i], stats.as_ref()))
        .collect::<Result<_>>()?;
    let train_refs: Vec<&Trial> = train.iter().collect();

    let dae_cfg = TrainConfig {
        seed: seeds.dae,
        ..cfg.dae.clone()
    };
    let (mut dae, dae_history) = train_dae(&train_refs, &cfg.arch, &dae_cfg)?;
    dae.minmax = stats;
    let head = build_default_classifier(&dae, cfg.mode, label_scheme, &cfg.arch, seeds.head)?;
    let encoder_before = group_digest(&head, Group::Encoder);
    let sup_cfg = TrainConfig {
        seed: seeds.supervised,
        ..cfg.classifier.clone()
    };
    let (bundle, head_history) = train_supervised(&head, &train_refs, &sup_cfg)?;
    let encoder_after = group_digest(&bundle, Group::Encoder);
    let records = test
        .iter()
        .map(|t| predict(&bundle, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(FoldOutput {
        bundle,
        records,
        dae_history,
        head_history,
        encoder_before,
        encoder_after,
    })
}

/// Fold-level metrics. Classification: accuracy, plus sensitivity,
/// specificity and AUC for binary labels. Regression: Spearman ρ and its p.
pub fn record_metrics(
    records: &[PredictionRecord],
    mode: Mode,
    scheme: LabelScheme,
) -> BTreeMap<String, Option<f64>> {
    let mut m = BTreeMap::new();
    match mode {
        Mode::Classification => {
            let pairs: Vec<(usize, usize)> = records
                .iter()
                .filter_map(|r| Some((r.predicted?, r.actual?)))
                .collect();
            let correct = pairs.iter().filter(|(p, a)| p == a).count();
            m.insert(
                "accuracy".into(),
                (!pairs.is_empty()).then(|| correct as f64 / pairs.len() as f64),
            );
            if scheme == LabelScheme::Binary {
                let b = binary_metrics(&pairs, POSITIVE_CLASS);
                m.insert("sensitivity".into(), b.sensitivity);
                m.insert("specificity".into(), b.specificity);
                let scored: Vec<(f64, bool)> = records
                    .iter()
                    .filter_map(|r| Some((*r.confidences.get(POSITIVE_CLASS)?, r.actual? == POSITIVE_CLASS)))
                    .collect();
                let (s, l): (Vec<f64>, Vec<bool>) = scored.into_iter().unzip();
                m.insert("auc".into(), roc_auc(&s, &l).ok());
            }
        }
        Mode::Regression => {
            let (p, a): (Vec<f64>, Vec<f64>) = records
                .iter()
                .filter_map(|r| Some((r.predicted_score?, r.actual_score?)))
                .unzip();
            let sp = spearman(&p, &a).ok();
            m.insert("spearman_rho".into(), sp.map(|s| s.0));
            m.insert("spearman_p".into(), sp.map(|s| s.1));
        }
    }
    m
}
