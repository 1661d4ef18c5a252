use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use serde_json::{json, Map, Value};
use skillseq::config::{parse_kv, synth_spec_from_entries, Entry, RunConfig, SEED_ENV};
use skillseq::data::{load_manifest, synth_dataset, write_dataset, Dataset, Pipeline, Trial};
use skillseq::eval::{check_labels, run_cv};
use skillseq::exec::{derive_seed, Execution};
use skillseq::explain::{compute_cam, render_cam_overlay, validate_cams};
use skillseq::model::{build_default_classifier, load_bundle, predict as predict_one, save_bundle, train_dae as fit_dae,
    train_supervised, Mode, TrainConfig};
use skillseq::nn::gradcheck;
use skillseq::record::{read_records, records_to_csv, PredictionRecord};
use skillseq::run::{load_cv_run, run_id, save_cv_run, save_trust};
use skillseq::trust::trust_report;
use skillseq::Error;

use crate::ConfigArgs;

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

pub enum Failure {
    /// Bad invocation or configuration: exit code 2.
    Usage(String),
    /// The command started but could not finish: exit code 1.
    Runtime(String),
}

impl Failure {
    pub fn report(self) -> ExitCode {
        let (kind, code, msg) = match self {
            Failure::Usage(m) => ("usage", 2u8, m),
            Failure::Runtime(m) => ("runtime", 1, m),
        };
        eprintln!("error: {msg}");
        eprintln!("{}", json!({"status": "error", "kind": kind, "exit_code": code, "message": msg}));
        ExitCode::from(code)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn usage(e: impl Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn runtime(e: impl Display) -> Failure {
    Failure::Runtime(e.to_string())
}

type Outcome = Result<Done, Failure>;

/// Fields of the final success line.
pub struct Done(Map<String, Value>);

impl Done {
    fn new(command: &str) -> Self {
        let mut m = Map::new();
        m.insert("status".into(), "ok".into());
        m.insert("command".into(), command.into());
        Done(m)
    }

    fn with(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.0.insert(key.into(), value.into());
        self
    }

    pub fn json(&self) -> String {
        Value::Object(self.0.clone()).to_string()
    }
}

fn flag(key: &str, value: impl Display) -> Entry {
    Entry::new(key, value.to_string(), format!("flag for {key}"))
}

/// Resolves file, flags and environment; `extra` are command-specific flags.
fn resolve(command: &str, args: &ConfigArgs, extra: Vec<Entry>) -> Result<RunConfig, Failure> {
    let file = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
            parse_kv(&text, &p.display().to_string())?
        }
        None => Vec::new(),
    };
    let mut flags = vec![flag("command", command)];
    if let Some(s) = &args.seed {
        flags.push(flag("seed", s));
    }
    for s in &args.set {
        flags.push(skillseq::config::parse_flag(s)?);
    }
    flags.extend(extra);
    let env = std::env::var(SEED_ENV).ok();
    Ok(RunConfig::resolve(&file, &flags, env.as_deref())?)
}

fn exec_of(jobs: Option<usize>) -> Execution {
    match jobs {
        None => Execution::default(),
        j => Execution::from_jobs(j),
    }
}

fn load_dataset(manifest: &Path) -> Result<Dataset, Failure> {
    if !manifest.is_file() {
        return Err(usage(format!("manifest {} does not exist", manifest.display())));
    }
    Ok(load_manifest(manifest)?)
}

fn mkdir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

/// Prepared and normalized trials with statistics fitted on all of them.
fn fit_all(dataset: &Dataset, cfg: &RunConfig) -> Result<(Vec<Trial>, Option<skillseq::data::MinMaxStats>), Failure> {
    let pipeline = Pipeline::standard(cfg.target_hz);
    let prepared = dataset
        .trials
        .iter()
        .map(|t| pipeline.prepare(t))
        .collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<&Trial> = prepared.iter().collect();
    let stats = pipeline.fit(&refs)?;
    let finished = prepared
        .iter()
        .map(|t| pipeline.finish(t, stats.as_ref()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((finished, stats))
}

pub fn synth(spec: Option<&Path>, out: &Path, seed: Option<u64>) -> Outcome {
    let mut entries = match spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| usage(format!("cannot read spec {}: {e}", p.display())))?;
            parse_kv(&text, &p.display().to_string())?
        }
        None => Vec::new(),
    };
    if let Some(s) = seed {
        entries.retain(|e| e.key != "seed");
        entries.push(flag("seed", s));
    }
    let spec = synth_spec_from_entries(&entries).map_err(|e| match e {
        Error::Config { .. } => usage(e),
        other => usage(format!("invalid generator settings: {other}")),
    })?;
    let ds = synth_dataset(&spec)?;
    let manifest = write_dataset(&ds, out)?;
    println!("trials = {}", ds.len());
    println!("subjects = {}", ds.subjects().len());
    Ok(Done::new("synth")
        .with("manifest", manifest.display().to_string())
        .with("trials", ds.len())
        .with("fingerprint", ds.fingerprint()))
}

pub fn ingest_check(manifest: &Path, args: &ConfigArgs) -> Outcome {
    let cfg = resolve("ingest-check", args, Vec::new())?;
    let ds = load_dataset(manifest)?;
    let pipeline = Pipeline::standard(cfg.target_hz);
    let mut frames = Vec::with_capacity(ds.len());
    for t in &ds.trials {
        let p = pipeline
            .prepare(t)
            .map_err(|e| runtime(format!("{}: {e}", t.id())))?;
        frames.push(p.frames());
    }
    let missing: usize = ds.trials.iter().map(Trial::missing_count).sum();
    println!("trials = {}", ds.len());
    println!("subjects = {}", ds.subjects().len());
    println!("channels = {}", ds.n_channels().unwrap_or(0));
    for (label, n) in ds.class_counts() {
        println!("class.{} = {n}", label.as_str());
    }
    println!("scored = {}", ds.trials.iter().filter(|t| t.score.is_some()).count());
    println!("missing_values = {missing}");
    if let Some(r) = ds.imbalance_ratio() {
        println!("imbalance_ratio = {}", skillseq::eval::fmt_sig(r));
    }
    println!(
        "prepared_frames = {}..{}",
        frames.iter().min().unwrap_or(&0),
        frames.iter().max().unwrap_or(&0)
    );
    Ok(Done::new("ingest-check")
        .with("trials", ds.len())
        .with("fingerprint", ds.fingerprint()))
}

pub fn train_dae(manifest: &Path, out: &Path, args: &ConfigArgs) -> Outcome {
    let cfg = resolve("train-dae", args, vec![flag("manifest", manifest.display())])?;
    let ds = load_dataset(manifest)?;
    let (trials, stats) = fit_all(&ds, &cfg)?;
    let refs: Vec<&Trial> = trials.iter().collect();
    let dae_cfg = TrainConfig {
        seed: derive_seed(cfg.seed, 1),
        ..cfg.dae.clone()
    };
    let (mut bundle, history) = fit_dae(&refs, &cfg.arch, &dae_cfg)?;
    bundle.minmax = stats;
    mkdir(out)?;
    let path = out.join("dae.sksq");
    save_bundle(&bundle, &path)?;
    write(&out.join("config.cfg"), cfg.to_text())?;
    write(&out.join("dae_history.json"), serde_json::to_string_pretty(&history).map_err(runtime)?)?;
    println!("stopped_epoch = {}", history.stopped_epoch);
    println!("best_epoch = {}", history.best_epoch);
    Ok(Done::new("train-dae")
        .with("model", path.display().to_string())
        .with("best_val_loss", history.best_val_loss()))
}

pub fn train_classifier(manifest: &Path, dae: &Path, out: &Path, mode: Option<String>, args: &ConfigArgs) -> Outcome {
    let mut extra = vec![flag("manifest", manifest.display())];
    if let Some(m) = mode {
        extra.push(flag("mode", m));
    }
    let cfg = resolve("train-classifier", args, extra)?;
    let ds = load_dataset(manifest)?;
    let scheme = check_labels(&ds, cfg.mode).map_err(usage)?;
    let dae_bundle = load_bundle(dae)?;
    if dae_bundle.mode.is_some() {
        return Err(usage(format!("{} already has a head; pass an autoencoder bundle", dae.display())));
    }
    let pipeline = Pipeline::standard(cfg.target_hz);
    let trials = ds
        .trials
        .iter()
        .map(|t| pipeline.finish(&pipeline.prepare(t)?, dae_bundle.minmax.as_ref()))
        .collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<&Trial> = trials.iter().collect();
    let head = build_default_classifier(&dae_bundle, cfg.mode, scheme, &cfg.arch, derive_seed(cfg.seed, 2))?;
    let sup = TrainConfig {
        seed: derive_seed(cfg.seed, 3),
        ..cfg.classifier.clone()
    };
    let (bundle, history) = train_supervised(&head, &refs, &sup)?;
    mkdir(out)?;
    let path = out.join("model.sksq");
    save_bundle(&bundle, &path)?;
    write(&out.join("config.cfg"), cfg.to_text())?;
    write(&out.join("head_history.json"), serde_json::to_string_pretty(&history).map_err(runtime)?)?;
    println!("stopped_epoch = {}", history.stopped_epoch);
    println!("best_epoch = {}", history.best_epoch);
    Ok(Done::new("train-classifier")
        .with("model", path.display().to_string())
        .with("best_val_loss", history.best_val_loss()))
}

pub fn evaluate(
    manifest: Option<PathBuf>,
    scheme: Option<String>,
    mode: Option<String>,
    out: Option<PathBuf>,
    args: &ConfigArgs,
) -> Outcome {
    let mut extra = Vec::new();
    if let Some(m) = &manifest {
        extra.push(flag("manifest", m.display()));
    }
    if let Some(s) = scheme {
        extra.push(flag("scheme", s));
    }
    if let Some(m) = mode {
        extra.push(flag("mode", m));
    }
    if let Some(o) = &out {
        extra.push(flag("out", o.display()));
    }
    let cfg = resolve("evaluate", args, extra)?;
    let manifest = cfg
        .manifest
        .clone()
        .ok_or_else(|| usage("no manifest: pass --manifest or set `manifest` in the config"))?;
    let ds = load_dataset(Path::new(&manifest))?;
    check_labels(&ds, cfg.mode).map_err(usage)?;
    let fingerprint = ds.fingerprint();
    let id = run_id(&cfg, &fingerprint);
    let dir = cfg
        .out
        .as_ref()
        .map_or_else(|| Path::new("runs").join(&id), PathBuf::from);
    guard_run_dir(&dir, &cfg, &fingerprint)?;
    let run = run_cv(&ds, &cfg.cv_config(), exec_of(args.jobs))?;
    save_cv_run(&run, &cfg, &fingerprint, &dir)?;
    let mut done = Done::new("evaluate")
        .with("run", dir.display().to_string())
        .with("run_id", id)
        .with("failed_folds", run.report.failed_folds());
    if cfg.mode == Mode::Classification {
        match save_trust(&run, &cfg, &dir) {
            Ok(t) => done = done.with("nts", t.spectrum.nts),
            Err(e) => log::warn!("no trust report: {e}"),
        }
    }
    print!("{}", run.report.to_text());
    for (name, s) in &run.report.summary {
        done = done.with(name, s.mean);
    }
    Ok(done)
}

/// Refuses to mix two different runs in one directory.
fn guard_run_dir(dir: &Path, cfg: &RunConfig, fingerprint: &str) -> Result<(), Failure> {
    let existing = dir.join("config.cfg");
    if !existing.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(&existing).map_err(runtime)?;
    let old = RunConfig::resolve(&parse_kv(&text, &existing.display().to_string())?, &[], None)?;
    let old_fp = fs::read_to_string(dir.join("dataset.sha256")).unwrap_or_default();
    if run_id(&old, old_fp.trim()) != run_id(cfg, fingerprint) {
        return Err(usage(format!(
            "{} holds a run with a different configuration or dataset",
            dir.display()
        )));
    }
    Ok(())
}

fn finished_trials(ds: &Dataset, bundle: &skillseq::model::ModelBundle, target_hz: f64) -> Result<Vec<(Trial, Trial)>, Failure> {
    let pipeline = Pipeline::standard(target_hz);
    ds.trials
        .iter()
        .map(|t| {
            let prepared = pipeline.prepare(t)?;
            let finished = pipeline.finish(&prepared, bundle.minmax.as_ref())?;
            Ok((prepared, finished))
        })
        .collect::<Result<Vec<_>, Error>>()
        .map_err(Failure::from)
}

pub fn predict(model: &Path, manifest: &Path, out: Option<&Path>, args: &ConfigArgs) -> Outcome {
    let cfg = resolve("predict", args, Vec::new())?;
    let bundle = load_bundle(model)?;
    if bundle.mode.is_none() {
        return Err(usage(format!("{} is an autoencoder; predict needs a trained head", model.display())));
    }
    let ds = load_dataset(manifest)?;
    let records = finished_trials(&ds, &bundle, cfg.target_hz)?
        .iter()
        .map(|(_, t)| predict_one(&bundle, t))
        .collect::<Result<Vec<PredictionRecord>, _>>()?;
    let csv = records_to_csv(&records)?;
    let done = Done::new("predict").with("records", records.len());
    match out {
        Some(p) => {
            write(p, csv)?;
            Ok(done.with("predictions", p.display().to_string()))
        }
        None => {
            print!("{csv}");
            Ok(done)
        }
    }
}

pub fn cam(
    model: &Path,
    manifest: &Path,
    trial: Option<&str>,
    class: Option<usize>,
    out: &Path,
    args: &ConfigArgs,
) -> Outcome {
    let cfg = resolve("cam", args, Vec::new())?;
    let bundle = load_bundle(model)?;
    if bundle.mode != Some(Mode::Classification) {
        return Err(usage("class activation maps need a classification bundle"));
    }
    let ds = load_dataset(manifest)?;
    let selected: Vec<usize> = match trial {
        Some(id) => {
            let i = ds
                .trials
                .iter()
                .position(|t| t.id().0 == id)
                .ok_or_else(|| usage(format!("no trial `{id}` in {}", manifest.display())))?;
            vec![i]
        }
        None => (0..ds.len()).collect(),
    };
    let sub = Dataset::new(selected.iter().map(|&i| ds.trials[i].clone()).collect())?;
    mkdir(out)?;
    let mut clamped = 0;
    for (raw, finished) in finished_trials(&sub, &bundle, cfg.target_hz)? {
        let c = match class.or_else(|| raw.class_label.map(|l| l.index())) {
            Some(c) => c,
            None => predict_one(&bundle, &finished)?
                .predicted
                .ok_or_else(|| runtime("classification bundle gave no class"))?,
        };
        let map = compute_cam(&bundle, &finished, c).map_err(|e| match e {
            Error::InvalidArgument(_) => usage(e),
            other => runtime(other),
        })?;
        let stem = format!("{}_{:04}", raw.subject_id, raw.trial_index);
        map.write_csv(&out.join(format!("{stem}.cam.csv")))?;
        clamped += render_cam_overlay(&raw, &map, &out.join(format!("{stem}.svg")))?.clamped;
    }
    println!("maps = {}", sub.len());
    Ok(Done::new("cam")
        .with("out", out.display().to_string())
        .with("maps", sub.len())
        .with("clamped_vertices", clamped))
}

pub fn trust(predictions: Option<&Path>, run: Option<&Path>, overrides: [Option<String>; 3], out: Option<PathBuf>) -> Outcome {
    let (records, base) = match (predictions, run) {
        (Some(p), _) => (read_records(p)?, None),
        (None, Some(r)) => {
            let cfg_path = r.join("config.cfg");
            let text = fs::read_to_string(&cfg_path)
                .map_err(|e| usage(format!("{} is not a run directory: {e}", r.display())))?;
            let cfg = RunConfig::resolve(&parse_kv(&text, &cfg_path.display().to_string())?, &[], None)?;
            (read_records(&r.join("predictions.csv"))?, Some(cfg))
        }
        (None, None) => return Err(usage("pass --predictions or --run")),
    };
    let mut flags = Vec::new();
    for (key, v) in ["trust.alpha", "trust.beta", "trust.bandwidth"].iter().zip(overrides) {
        if let Some(v) = v {
            flags.push(flag(key, v));
        }
    }
    let file: Vec<Entry> = match &base {
        Some(cfg) => parse_kv(&cfg.to_text(), "run config")?,
        None => Vec::new(),
    };
    let cfg = RunConfig::resolve(&file, &flags, None)?;
    let t = &cfg.trust;
    let report = trust_report(&records, t.alpha, t.beta, t.bandwidth).map_err(usage)?;
    let dir = out.or_else(|| run.map(Path::to_path_buf)).unwrap_or_else(|| PathBuf::from("."));
    mkdir(&dir.join("trust"))?;
    write(&dir.join("trust.txt"), report.to_text())?;
    for (name, csv) in report.curve_files() {
        write(&dir.join("trust").join(name), csv)?;
    }
    print!("{}", report.to_text());
    Ok(Done::new("trust")
        .with("nts", report.spectrum.nts)
        .with("out", dir.display().to_string()))
}

pub fn validate_cam(run: &Path, manifest: Option<&Path>, jobs: Option<usize>) -> Outcome {
    let cfg_path = run.join("config.cfg");
    let text = fs::read_to_string(&cfg_path)
        .map_err(|e| usage(format!("{} is not a run directory: {e}", run.display())))?;
    let cfg = RunConfig::resolve(&parse_kv(&text, &cfg_path.display().to_string())?, &[], None)?;
    let manifest = match manifest {
        Some(m) => m.to_path_buf(),
        None => PathBuf::from(
            cfg.manifest
                .clone()
                .ok_or_else(|| usage("run recorded no manifest; pass --manifest"))?,
        ),
    };
    let ds = load_dataset(&manifest)?;
    let (_, baseline) = load_cv_run(run, &ds)?;
    let (after, report) = validate_cams(&ds, &baseline, exec_of(jobs))?;
    let dir = run.join("validate-cam");
    let mut masked_cfg = cfg.clone();
    masked_cfg.command = "validate-cam".into();
    save_cv_run(&after, &masked_cfg, &format!("masked:{}", ds.fingerprint()), &dir.join("masked"))?;
    write(&dir.join("report.txt"), report.to_text())?;
    print!("{}", report.to_text());
    let mut done = Done::new("validate-cam").with("report", dir.join("report.txt").display().to_string());
    for m in &report.metrics {
        done = done.with(&format!("p_{}", m.metric), m.p_value().map_or(Value::Null, Value::from));
    }
    Ok(done)
}

pub fn gradcheck(configs: usize, seed: u64) -> Outcome {
    if configs == 0 {
        return Err(usage("--configs must be at least 1"));
    }
    let report = gradcheck::run(configs, seed)?;
    print!("{}", report.render());
    let max = report.max_rel_error();
    if !report.passes(GRADCHECK_TOLERANCE) {
        return Err(runtime(format!(
            "max relative error {max:e} exceeds {GRADCHECK_TOLERANCE:e}"
        )));
    }
    Ok(Done::new("gradcheck").with("max_rel_error", max).with("configs", configs))
}
