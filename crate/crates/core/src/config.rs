//! `key = value` configuration files and the resolved run configuration.
//!
//! Files are UTF-8, one `key = value` per line, `#` starts a comment.
//! Precedence, highest first: command-line flags, the config file, the
//! `SKILLSEQ_SEED` environment variable (seed only), built-in defaults.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::eval::{CvConfig, Scheme};
use crate::model::{ArchConfig, LossKind, Mode, TrainConfig};

pub const SEED_ENV: &str = "SKILLSEQ_SEED";

/// One `key = value` assignment and where it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub origin: String,
    /// 1-based; 0 for values that did not come from a file.
    pub line: usize,
}

impl Entry {
    pub fn new(key: impl Into<String>, value: impl Into<String>, origin: impl Into<String>) -> Self {
        Self {
            key: key.into(),
            value: value.into(),
            origin: origin.into(),
            line: 0,
        }
    }

    fn error(&self, detail: impl Into<String>) -> Error {
        Error::Config {
            origin: self.origin.clone(),
            line: self.line,
            key: self.key.clone(),
            detail: detail.into(),
        }
    }

    fn parse<T: FromStr>(&self, what: &str) -> Result<T> {
        self.value
            .parse()
            .map_err(|_| self.error(format!("cannot parse `{}` as {what}", self.value)))
    }

    fn float(&self) -> Result<f64> {
        let v: f64 = self.parse("a number")?;
        if !v.is_finite() {
            return Err(self.error(format!("`{}` is not finite", self.value)));
        }
        Ok(v)
    }

    fn pair(&self) -> Result<(f64, f64)> {
        let err = || self.error(format!("cannot parse `{}` as a `low, high` pair", self.value));
        let (a, b) = self.value.split_once(',').ok_or_else(err)?;
        Ok((a.trim().parse().map_err(|_| err())?, b.trim().parse().map_err(|_| err())?))
    }
}

/// Parses `key = value` lines; duplicate keys are an error.
pub fn parse_kv(text: &str, origin: &str) -> Result<Vec<Entry>> {
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |key: &str, detail: &str| Error::Config {
            origin: origin.into(),
            line: i + 1,
            key: key.into(),
            detail: detail.into(),
        };
        let (k, v) = line.split_once('=').ok_or_else(|| err(line, "expected `key = value`"))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(err(k, "empty key"));
        }
        if let Some(prev) = out.iter().find(|e| e.key == k) {
            return Err(err(k, &format!("already set on line {}", prev.line)));
        }
        out.push(Entry {
            key: k.into(),
            value: v.into(),
            origin: origin.into(),
            line: i + 1,
        });
    }
    Ok(out)
}

/// Parses a `--set key=value` style flag.
pub fn parse_flag(text: &str) -> Result<Entry> {
    let (k, v) = text.split_once('=').ok_or_else(|| Error::Config {
        origin: "flag".into(),
        line: 0,
        key: text.into(),
        detail: "expected key=value".into(),
    })?;
    Ok(Entry::new(k.trim(), v.trim(), "flag"))
}

fn parse_mode(e: &Entry) -> Result<Mode> {
    match e.value.as_str() {
        "classify" | "classification" => Ok(Mode::Classification),
        "regress" | "regression" => Ok(Mode::Regression),
        v => Err(e.error(format!("unknown mode `{v}` (classify, regress)"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustConfig {
    pub alpha: f64,
    pub beta: f64,
    /// `None` selects Silverman's rule.
    pub bandwidth: Option<f64>,
}

impl Default for TrustConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            bandwidth: None,
        }
    }
}

/// Fully resolved settings of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub manifest: Option<String>,
    pub out: Option<String>,
    pub seed: u64,
    pub scheme: Scheme,
    pub mode: Mode,
    pub target_hz: f64,
    pub repeats: usize,
    pub arch: ArchConfig,
    pub dae: TrainConfig,
    pub classifier: TrainConfig,
    pub trust: TrustConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mode = Mode::Classification;
        Self {
            command: "evaluate".into(),
            manifest: None,
            out: None,
            seed: 0,
            scheme: Scheme::Stratified { k: 10 },
            mode,
            target_hz: 1.0,
            repeats: 1,
            arch: ArchConfig::default(),
            dae: TrainConfig::dae(),
            classifier: TrainConfig::supervised(mode),
            trust: TrustConfig::default(),
        }
    }
}

const TRAIN_KEYS: [&str; 7] = [
    "learning_rate",
    "loss",
    "max_epochs",
    "patience",
    "l2",
    "noise_sigma",
    "validation_fraction",
];

fn apply_train(cfg: &mut TrainConfig, field: &str, e: &Entry) -> Result<bool> {
    match field {
        "learning_rate" => cfg.learning_rate = e.float()?,
        "loss" => cfg.loss = e.value.parse().map_err(|_| e.error(format!("unknown loss `{}` (bce, mse, cosine)", e.value)))?,
        "max_epochs" => cfg.max_epochs = e.parse("a whole number")?,
        "patience" => cfg.patience = e.parse("a whole number")?,
        "l2" => cfg.l2 = e.float()?,
        "noise_sigma" => cfg.noise_sigma = e.float()?,
        "validation_fraction" => cfg.validation_fraction = e.float()?,
        _ => return Ok(false),
    }
    Ok(true)
}

impl RunConfig {
    /// Layers `env`, then `file`, then `flags` over the defaults. The mode
    /// is settled first because the classifier's default loss depends on it.
    pub fn resolve(file: &[Entry], flags: &[Entry], env_seed: Option<&str>) -> Result<Self> {
        let mut merged: BTreeMap<String, Entry> = BTreeMap::new();
        if let Some(v) = env_seed {
            merged.insert("seed".into(), Entry::new("seed", v, format!("env {SEED_ENV}")));
        }
        for e in file.iter().chain(flags) {
            merged.insert(e.key.clone(), e.clone());
        }
        let mut cfg = RunConfig::default();
        if let Some(e) = merged.get("mode") {
            cfg.mode = parse_mode(e)?;
            cfg.classifier = TrainConfig::supervised(cfg.mode);
        }
        for (key, e) in &merged {
            cfg.apply(key, e)?;
        }
        cfg.check(&merged)?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, e: &Entry) -> Result<()> {
        match key {
            "mode" => {}
            "command" => self.command = e.value.clone(),
            "manifest" => self.manifest = Some(e.value.clone()),
            "out" => self.out = Some(e.value.clone()),
            "seed" => self.seed = e.parse("an unsigned integer")?,
            "scheme" => self.scheme = e.value.parse().map_err(|err: Error| e.error(err.to_string()))?,
            "target_hz" => self.target_hz = e.float()?,
            "repeats" => self.repeats = e.parse("a whole number")?,
            "arch.encoder_width" => self.arch.encoder_width = e.parse("a whole number")?,
            "arch.embedding_width" => self.arch.embedding_width = e.parse("a whole number")?,
            "arch.kernel" => self.arch.kernel = e.parse("a whole number")?,
            "arch.classifier_width" => self.arch.classifier_width = e.parse("a whole number")?,
            "arch.classifier_dilation" => self.arch.classifier_dilation = e.parse("a whole number")?,
            "arch.reduction" => self.arch.reduction = e.parse("a whole number")?,
            "trust.alpha" => self.trust.alpha = e.float()?,
            "trust.beta" => self.trust.beta = e.float()?,
            "trust.bandwidth" => {
                self.trust.bandwidth = match e.value.as_str() {
                    "auto" => None,
                    _ => Some(e.float()?),
                }
            }
            _ => {
                let handled = match key.split_once('.') {
                    Some(("dae", f)) => apply_train(&mut self.dae, f, e)?,
                    Some(("classifier", f)) => apply_train(&mut self.classifier, f, e)?,
                    _ => false,
                };
                if !handled {
                    return Err(e.error("unknown key"));
                }
            }
        }
        Ok(())
    }

    fn check(&self, merged: &BTreeMap<String, Entry>) -> Result<()> {
        let at = |key: &str, detail: String| match merged.get(key) {
            Some(e) => e.error(detail),
            None => Error::Config {
                origin: "defaults".into(),
                line: 0,
                key: key.into(),
                detail,
            },
        };
        if self.mode == Mode::Regression && self.classifier.loss == LossKind::Cosine {
            return Err(at("classifier.loss", "cosine loss applies to classification only".into()));
        }
        for (prefix, t) in [("dae", &self.dae), ("classifier", &self.classifier)] {
            t.validate().map_err(|err| {
                let key = TRAIN_KEYS
                    .iter()
                    .map(|f| format!("{prefix}.{f}"))
                    .find(|k| err.to_string().contains(k.split('.').nth(1).unwrap_or("")))
                    .unwrap_or_else(|| prefix.to_string());
                at(&key, err.to_string())
            })?;
        }
        if self.repeats == 0 {
            return Err(at("repeats", "must be at least 1".into()));
        }
        if !(self.target_hz > 0.0) {
            return Err(at("target_hz", "must be positive".into()));
        }
        if self.arch.kernel % 2 == 0 {
            return Err(at("arch.kernel", "must be odd".into()));
        }
        if !(self.trust.alpha > 0.0 && self.trust.beta > 0.0) {
            return Err(at("trust.alpha", "trust exponents must be positive".into()));
        }
        if matches!(self.trust.bandwidth, Some(b) if b <= 0.0) {
            return Err(at("trust.bandwidth", "must be positive or `auto`".into()));
        }
        Ok(())
    }

    pub fn cv_config(&self) -> CvConfig {
        CvConfig {
            scheme: self.scheme,
            mode: self.mode,
            seed: self.seed,
            target_hz: self.target_hz,
            arch: self.arch.clone(),
            dae: self.dae.clone(),
            classifier: self.classifier.clone(),
            repeats: self.repeats,
        }
    }

    /// Canonical snapshot; parses back to the same configuration.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("command", self.command.clone());
        if let Some(m) = &self.manifest {
            kv("manifest", m.clone());
        }
        if let Some(o) = &self.out {
            kv("out", o.clone());
        }
        kv("seed", self.seed.to_string());
        kv("scheme", self.scheme.to_string());
        kv("mode", self.mode.as_str().into());
        kv("target_hz", self.target_hz.to_string());
        kv("repeats", self.repeats.to_string());
        let a = &self.arch;
        kv("arch.encoder_width", a.encoder_width.to_string());
        kv("arch.embedding_width", a.embedding_width.to_string());
        kv("arch.kernel", a.kernel.to_string());
        kv("arch.classifier_width", a.classifier_width.to_string());
        kv("arch.classifier_dilation", a.classifier_dilation.to_string());
        kv("arch.reduction", a.reduction.to_string());
        for (p, t) in [("dae", &self.dae), ("classifier", &self.classifier)] {
            kv(&format!("{p}.learning_rate"), t.learning_rate.to_string());
            kv(&format!("{p}.loss"), t.loss.as_str().into());
            kv(&format!("{p}.max_epochs"), t.max_epochs.to_string());
            kv(&format!("{p}.patience"), t.patience.to_string());
            kv(&format!("{p}.l2"), t.l2.to_string());
            kv(&format!("{p}.noise_sigma"), t.noise_sigma.to_string());
            kv(&format!("{p}.validation_fraction"), t.validation_fraction.to_string());
        }
        kv("trust.alpha", self.trust.alpha.to_string());
        kv("trust.beta", self.trust.beta.to_string());
        kv(
            "trust.bandwidth",
            self.trust.bandwidth.map_or_else(|| "auto".into(), |b| b.to_string()),
        );
        s
    }

    /// Hash of everything that influences results (not the output path).
    pub fn content_hash(&self) -> String {
        let text: String = self
            .to_text()
            .lines()
            .filter(|l| !l.starts_with("out ="))
            .map(|l| format!("{l}\n"))
            .collect();
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// Generator settings from `key = value` entries; keys are the
/// [`SynthSpec`] field names, ranges are written `low, high`.
pub fn synth_spec_from_entries(entries: &[Entry]) -> Result<SynthSpec> {
    let mut s = SynthSpec::default();
    for e in entries {
        match e.key.as_str() {
            "n_subjects" => s.n_subjects = e.parse("a whole number")?,
            "trials_per_subject" => s.trials_per_subject = e.parse("a whole number")?,
            "pass_fraction" => s.pass_fraction = e.float()?,
            "pass_duration_s" => s.pass_duration_s = e.pair()?,
            "fail_duration_s" => s.fail_duration_s = e.pair()?,
            "pass_jitter_px" => s.pass_jitter_px = e.pair()?,
            "fail_jitter_px" => s.fail_jitter_px = e.pair()?,
            "fail_stall_fraction" => s.fail_stall_fraction = e.pair()?,
            "rate_hz" => s.rate_hz = e.float()?,
            "subject_offset_px" => s.subject_offset_px = e.float()?,
            "subject_radius_px" => s.subject_radius_px = e.float()?,
            "missing_rate" => s.missing_rate = e.float()?,
            "score_base" => s.score_base = e.float()?,
            "per_second" => s.per_second = e.float()?,
            "per_roughness" => s.per_roughness = e.float()?,
            "per_deviation" => s.per_deviation = e.float()?,
            "seed" => s.seed = e.parse("an unsigned integer")?,
            _ => return Err(e.error("unknown key")),
        }
    }
    s.validate()?;
    Ok(s)
}
