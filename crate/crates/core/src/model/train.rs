//! Batch-size-one training with early stopping.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::arch::{ArchConfig, Architecture, Group, LayerSpec, Mode};
use super::bundle::{run_layers, ModelBundle, Pass, TrainableFlags};
use crate::data::{one_hot, ClassLabel, LabelScheme, Trial, ZNorm};
use crate::error::{Error, Result};
use crate::exec::derive_seed;
use crate::nn::{is_kernel, Adam, ParamStore, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Bce,
    Mse,
    Cosine,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Bce => "bce",
            LossKind::Mse => "mse",
            LossKind::Cosine => "cosine",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bce" => Ok(LossKind::Bce),
            "mse" => Ok(LossKind::Mse),
            "cosine" => Ok(LossKind::Cosine),
            _ => Err(Error::invalid(format!("unknown loss `{s}` (bce, mse, cosine)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub loss: LossKind,
    pub max_epochs: usize,
    pub patience: usize,
    /// Kernel and activity penalty coefficient.
    pub l2: f64,
    pub noise_sigma: f64,
    /// `None` means balanced weights from the training counts.
    pub class_weights: Option<BTreeMap<ClassLabel, f64>>,
    pub seed: u64,
    pub validation_fraction: f64,
}

impl TrainConfig {
    /// Autoencoder recipe: BCE at 1e-3, patience 4.
    pub fn dae() -> Self {
        Self {
            learning_rate: 0.001,
            loss: LossKind::Bce,
            max_epochs: 200,
            patience: 4,
            l2: 1e-5,
            noise_sigma: 0.001,
            class_weights: None,
            seed: 0,
            validation_fraction: 0.1,
        }
    }

    /// Classifier recipe: cosine (or MSE for regression) at 2e-4,
    /// patience 20.
    pub fn supervised(mode: Mode) -> Self {
        Self {
            learning_rate: 0.0002,
            loss: match mode {
                Mode::Classification => LossKind::Cosine,
                Mode::Regression => LossKind::Mse,
            },
            max_epochs: 200,
            patience: 20,
            noise_sigma: 0.0,
            ..Self::dae()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patience < 1 {
            return Err(Error::invalid("patience must be at least 1"));
        }
        if self.max_epochs < 1 {
            return Err(Error::invalid("max_epochs must be at least 1"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction <= 0.5) {
            return Err(Error::invalid(format!(
                "validation_fraction must lie in (0, 0.5], got {}",
                self.validation_fraction
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::invalid(format!("noise_sigma must be ≥ 0, got {}", self.noise_sigma)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning_rate must be ≥ 0, got {}", self.learning_rate)));
        }
        if !(self.l2 >= 0.0) {
            return Err(Error::invalid(format!("l2 must be ≥ 0, got {}", self.l2)));
        }
        if let Some(w) = &self.class_weights {
            if w.values().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(Error::invalid("class weights must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// 1-based.
    pub stopped_epoch: usize,
    /// 1-based epoch whose weights were restored.
    pub best_epoch: usize,
    /// Trials scored for early stopping.
    pub validation_trials: Vec<String>,
}

impl TrainHistory {
    pub fn best_val_loss(&self) -> f64 {
        self.val_loss[self.best_epoch - 1]
    }
}

/// Adds independent `N(0, σ²)` draws to every element.
pub fn add_gaussian_noise(values: &[f64], sigma: f64, seed: u64) -> Result<Vec<f64>> {
    if !(sigma >= 0.0) {
        return Err(Error::invalid(format!("noise sigma must be ≥ 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(values.to_vec());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(values.iter().map(|v| v + normal.sample(&mut rng)).collect())
}

/// `N / (K · N_c)` for every class of `scheme` present in `labels`.
pub fn balanced_class_weights(labels: &[ClassLabel], scheme: LabelScheme) -> BTreeMap<ClassLabel, f64> {
    let mut counts: BTreeMap<ClassLabel, usize> = BTreeMap::new();
    for l in labels {
        *counts.entry(*l).or_default() += 1;
    }
    let n = labels.len() as f64;
    let k = scheme.len() as f64;
    counts
        .into_iter()
        .map(|(c, m)| (c, n / (k * m as f64)))
        .collect()
}

/// Stratified hold-out: `round(fraction · n_s)` of each stratum, seeded.
/// Falls back to validating on the training set when the split would leave
/// either side empty.
pub fn validation_split(strata: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &s) in strata.iter().enumerate() {
        groups.entry(s).or_default().push(i);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (_, mut idx) in groups {
        idx.shuffle(&mut rng);
        let k = (fraction * idx.len() as f64).round() as usize;
        let k = k.min(idx.len().saturating_sub(1));
        val.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    if val.is_empty() || train.is_empty() {
        let all: Vec<usize> = (0..strata.len()).collect();
        return (all.clone(), all);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

struct Sample {
    x: Tensor,
    target: Tensor,
    weight: f64,
}

struct Objective<'a> {
    layers: Vec<&'a [LayerSpec]>,
    loss: LossKind,
    l2: f64,
    noise_sigma: f64,
}

impl Objective<'_> {
    /// Data loss plus activity penalty; backpropagates when asked.
    fn sample(
        &self,
        params: &ParamStore,
        trainable: &dyn Fn(&str) -> bool,
        s: &Sample,
        noise_seed: Option<u64>,
        backward: bool,
    ) -> Result<(f64, crate::nn::Gradients)> {
        let mut tape = Tape::new();
        let mut pass = Pass::new(params, trainable);
        let input = match noise_seed {
            Some(seed) if self.noise_sigma > 0.0 => Tensor::new(
                s.x.shape().to_vec(),
                add_gaussian_noise(s.x.data(), self.noise_sigma, seed)?,
            )?,
            _ => s.x.clone(),
        };
        let mut v = tape.constant(input);
        for l in &self.layers {
            v = run_layers(&mut tape, &mut pass, v, l)?;
        }
        let mut loss = match self.loss {
            LossKind::Bce => tape.bce(v, &s.target, s.weight)?,
            LossKind::Mse => tape.mse(v, &s.target, s.weight)?,
            LossKind::Cosine => tape.cosine(v, &s.target, s.weight)?,
        };
        if self.l2 > 0.0 {
            for a in std::mem::take(&mut pass.activity) {
                let pen = tape.mean_square(a, self.l2);
                loss = tape.add(loss, pen)?;
            }
        }
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Degenerate(format!("loss became {value}")));
        }
        if !backward {
            return Ok((value, Default::default()));
        }
        tape.backward(loss)?;
        Ok((value, pass.binder.gradients(&mut tape)))
    }

    fn kernel_penalty(&self, params: &ParamStore, trainable: &dyn Fn(&str) -> bool) -> f64 {
        self.l2
            * params
                .iter()
                .filter(|(n, _)| is_kernel(n) && trainable(n))
                .map(|(_, t)| t.data().iter().map(|w| w * w).sum::<f64>())
                .sum::<f64>()
    }

    fn mean_loss(&self, params: &ParamStore, trainable: &dyn Fn(&str) -> bool, samples: &[Sample], idx: &[usize]) -> Result<f64> {
        let mut total = 0.0;
        for &i in idx {
            total += self.sample(params, trainable, &samples[i], None, false)?.0;
        }
        Ok(total / idx.len() as f64 + self.kernel_penalty(params, trainable))
    }
}

#[allow(clippy::too_many_arguments)]
fn fit(
    params: &mut ParamStore,
    trainable: &dyn Fn(&str) -> bool,
    objective: &Objective<'_>,
    samples: &[Sample],
    strata: &[usize],
    ids: &[String],
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("no training samples"));
    }
    let (train, val) = validation_split(strata, cfg.validation_fraction, derive_seed(cfg.seed, 0x5a11));
    let mut adam = Adam::new(cfg.learning_rate)?;
    let mut best = f64::INFINITY;
    let mut best_params = params.clone();
    let mut best_epoch = 0;
    let mut wait = 0;
    let mut history = TrainHistory {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        stopped_epoch: 0,
        best_epoch: 0,
        validation_trials: val.iter().map(|&i| ids[i].clone()).collect(),
    };
    let mut order = train.clone();
    for epoch in 1..=cfg.max_epochs {
        let epoch_seed = derive_seed(cfg.seed, epoch as u64);
        order.clone_from(&train);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        let mut total = 0.0;
        for &i in &order {
            let noise = derive_seed(epoch_seed, i as u64);
            let (l, grads) = objective.sample(params, trainable, &samples[i], Some(noise), true)?;
            total += l;
            adam.step(params, &grads, cfg.l2)?;
        }
        history
            .train_loss
            .push(total / order.len() as f64 + objective.kernel_penalty(params, trainable));
        let v = objective.mean_loss(params, trainable, samples, &val)?;
        history.val_loss.push(v);
        history.stopped_epoch = epoch;
        if v < best {
            best = v;
            best_epoch = epoch;
            best_params = params.clone();
            wait = 0;
        } else {
            wait += 1;
            if wait >= cfg.patience {
                break;
            }
        }
    }
    history.best_epoch = best_epoch;
    *params = best_params;
    log::debug!(
        "stopped at epoch {}, best {} (val {best})",
        history.stopped_epoch,
        best_epoch
    );
    Ok(history)
}

fn check_normalized(trials: &[&Trial]) -> Result<()> {
    for t in trials {
        if let Some(v) = t.values().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!(
                "trial {} holds {v}, outside [0, 1]; normalize before training",
                t.id()
            )));
        }
    }
    Ok(())
}

fn strata_of(trials: &[&Trial]) -> Vec<usize> {
    trials
        .iter()
        .map(|t| t.class_label.map_or(0, |c| c.index()))
        .collect()
}

/// Trains encoder and decoder to reconstruct clean sequences from noisy
/// copies. The returned bundle has every group frozen.
pub fn train_dae(
    trials: &[&Trial],
    arch_cfg: &ArchConfig,
    cfg: &TrainConfig,
) -> Result<(ModelBundle, TrainHistory)> {
    let first = trials
        .first()
        .ok_or_else(|| Error::invalid("autoencoder training needs at least one trial"))?;
    check_normalized(trials)?;
    let arch = Architecture::autoencoder(first.n_channels(), arch_cfg);
    arch.validate(None)?;
    let mut params = arch.init_params(&[Group::Encoder, Group::Decoder], cfg.seed);
    let mut samples = Vec::with_capacity(trials.len());
    for t in trials {
        if t.n_channels() != arch.input_channels {
            return Err(Error::shape("train_dae", format!("trial {} has {} channels", t.id(), t.n_channels())));
        }
        let x = t.to_tensor()?;
        samples.push(Sample {
            target: x.clone(),
            x,
            weight: 1.0,
        });
    }
    let objective = Objective {
        layers: vec![&arch.encoder, &arch.decoder],
        loss: cfg.loss,
        l2: cfg.l2,
        noise_sigma: cfg.noise_sigma,
    };
    let trainable = |n: &str| matches!(Group::of(n), Some(Group::Encoder | Group::Decoder));
    let ids: Vec<String> = trials.iter().map(|t| t.id().0).collect();
    let history = fit(&mut params, &trainable, &objective, &samples, &strata_of(trials), &ids, cfg)?;
    let bundle = ModelBundle {
        arch,
        mode: None,
        scheme: None,
        params,
        trainable: TrainableFlags {
            encoder: false,
            decoder: false,
            classifier: false,
        },
        minmax: None,
        scores: None,
    };
    Ok((bundle, history))
}

/// Mean reconstruction objective (data loss + activity penalty + kernel
/// penalty) of a bundle on clean inputs.
pub fn reconstruction_loss(bundle: &ModelBundle, trials: &[&Trial], cfg: &TrainConfig) -> Result<f64> {
    let samples: Vec<Sample> = trials
        .iter()
        .map(|t| {
            let x = bundle.input_tensor(t)?;
            Ok(Sample {
                target: x.clone(),
                x,
                weight: 1.0,
            })
        })
        .collect::<Result<_>>()?;
    let objective = Objective {
        layers: vec![&bundle.arch.encoder, &bundle.arch.decoder],
        loss: cfg.loss,
        l2: cfg.l2,
        noise_sigma: 0.0,
    };
    let trainable = |n: &str| matches!(Group::of(n), Some(Group::Encoder | Group::Decoder));
    let idx: Vec<usize> = (0..samples.len()).collect();
    objective.mean_loss(&bundle.params, &trainable, &samples, &idx)
}

/// Attaches a freshly initialized head to a trained encoder. The encoder
/// and decoder are frozen; only the head trains.
pub fn build_classifier(
    dae: &ModelBundle,
    mode: Mode,
    scheme: LabelScheme,
    head: Vec<LayerSpec>,
    seed: u64,
) -> Result<ModelBundle> {
    let mut arch = dae.arch.clone();
    arch.classifier = head;
    arch.validate(Some(mode))?;
    let mut params = dae.params.clone();
    for (name, t) in arch.init_params(&[Group::Classifier], seed).iter() {
        params.insert(name, t.clone());
    }
    let bundle = ModelBundle {
        arch,
        mode: Some(mode),
        scheme: (mode == Mode::Classification).then_some(scheme),
        params,
        trainable: TrainableFlags {
            encoder: false,
            decoder: false,
            classifier: true,
        },
        minmax: dae.minmax.clone(),
        scores: None,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// [`build_classifier`] with the default head widths.
pub fn build_default_classifier(
    dae: &ModelBundle,
    mode: Mode,
    scheme: LabelScheme,
    arch_cfg: &ArchConfig,
    seed: u64,
) -> Result<ModelBundle> {
    let cfg = ArchConfig {
        embedding_width: dae.arch.embedding_channels()?,
        ..arch_cfg.clone()
    };
    build_classifier(dae, mode, scheme, cfg.classifier(mode, scheme.len()), seed)
}

/// Trains the non-frozen groups on labeled trials. Classification targets
/// are one-hot with per-sample class weights; regression targets are
/// z-normalized scores, with the fitted statistics stored in the bundle.
pub fn train_supervised(
    bundle: &ModelBundle,
    trials: &[&Trial],
    cfg: &TrainConfig,
) -> Result<(ModelBundle, TrainHistory)> {
    let mode = bundle
        .mode
        .ok_or_else(|| Error::invalid("bundle has no head to train"))?;
    bundle.validate()?;
    if trials.is_empty() {
        return Err(Error::invalid("supervised training needs at least one trial"));
    }
    let mut out = bundle.clone();
    let targets: Vec<(Tensor, f64)> = match mode {
        Mode::Classification => {
            let scheme = bundle.scheme.unwrap_or(LabelScheme::Binary);
            let labels = trials
                .iter()
                .map(|t| match t.class_label {
                    Some(c) if c.scheme() == scheme => Ok(c),
                    other => Err(Error::invalid(format!(
                        "classification needs {scheme:?} class labels; trial {} has {other:?}",
                        t.id()
                    ))),
                })
                .collect::<Result<Vec<_>>>()?;
            let weights = cfg
                .class_weights
                .clone()
                .unwrap_or_else(|| balanced_class_weights(&labels, scheme));
            labels
                .iter()
                .map(|c| {
                    let w = *weights.get(c).ok_or_else(|| {
                        Error::invalid(format!("no class weight for `{c}`"))
                    })?;
                    Ok((Tensor::vector(one_hot(c.index(), scheme.len())?), w))
                })
                .collect::<Result<_>>()?
        }
        Mode::Regression => {
            if cfg.loss == LossKind::Cosine {
                return Err(Error::invalid("cosine loss is undefined for a single regression output"));
            }
            let scores = trials
                .iter()
                .map(|t| {
                    t.score.ok_or_else(|| {
                        Error::invalid(format!("regression needs scores; trial {} has none", t.id()))
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            let z = ZNorm::fit(&scores)?;
            out.scores = Some(z);
            scores.iter().map(|&s| (Tensor::vector(vec![z.apply(s)]), 1.0)).collect()
        }
    };

    let flags = bundle.trainable;
    // A frozen encoder gives fixed features, so compute them once.
    let cached = !flags.encoder;
    let mut samples = Vec::with_capacity(trials.len());
    for (t, (target, weight)) in trials.iter().zip(targets) {
        let x = bundle.input_tensor(t)?;
        let x = if cached { bundle.encode(&x)? } else { x };
        samples.push(Sample { x, target, weight });
    }
    let layers: Vec<&[LayerSpec]> = if cached {
        vec![&bundle.arch.classifier]
    } else {
        vec![&bundle.arch.encoder, &bundle.arch.classifier]
    };
    let objective = Objective {
        layers,
        loss: cfg.loss,
        l2: cfg.l2,
        noise_sigma: cfg.noise_sigma,
    };
    let trainable = move |n: &str| flags.allows(n);
    let ids: Vec<String> = trials.iter().map(|t| t.id().0).collect();
    let strata = match mode {
        Mode::Classification => strata_of(trials),
        Mode::Regression => vec![0; trials.len()],
    };
    let history = fit(&mut out.params, &trainable, &objective, &samples, &strata, &ids, cfg)?;
    Ok((out, history))
}
