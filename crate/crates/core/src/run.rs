//! Persisted runs.
//!
//! A run directory holds everything needed to regenerate its reports:
//!
//! ```text
//! config.cfg          resolved configuration snapshot
//! dataset.sha256      fingerprint of the dataset it was run on
//! folds.json          fold assignments (one per repeat)
//! folds.txt           the same, human-readable
//! fold-NN/            (repeat-R/fold-NN/ for later repeats)
//!   fold.json         seeds, histories, encoder digests or failure
//!   model.sksq        trained bundle
//!   predictions.csv   held-out records
//! report.txt          metrics report
//! predictions.csv     pooled records of the first repeat
//! ```
//!
//! Directory names are content addresses of dataset and configuration, so
//! two runs can only share a directory if they would produce the same files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{parse_kv, RunConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{build_report, check_labels, roster, CvRun, FoldAssignment, FoldOutput, FoldRun, FoldSeeds};
use crate::model::{load_bundle, save_bundle, TrainHistory};
use crate::record::{read_records, write_records};
use crate::trust::{trust_report, TrustReport};

/// Short content address of a dataset and a configuration.
pub fn run_id(cfg: &RunConfig, fingerprint: &str) -> String {
    let mut h = Sha256::new();
    h.update(fingerprint.as_bytes());
    h.update([0]);
    h.update(cfg.content_hash().as_bytes());
    hex::encode(h.finalize())[..16].to_string()
}

pub fn fold_dir(repeat: usize, fold: usize) -> PathBuf {
    let leaf = format!("fold-{:02}", fold + 1);
    if repeat == 0 {
        PathBuf::from(leaf)
    } else {
        PathBuf::from(format!("repeat-{}", repeat + 1)).join(leaf)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct FoldMeta {
    repeat: usize,
    fold: usize,
    seeds: FoldSeeds,
    n_test: usize,
    error: Option<String>,
    dae_history: Option<TrainHistory>,
    head_history: Option<TrainHistory>,
    encoder_before: Option<String>,
    encoder_after: Option<String>,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn require(path: &Path) -> Result<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            detail: "not found".into(),
        })
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact {
            path: path.to_path_buf(),
            detail: "not found".into(),
        },
        _ => Error::io(path, e),
    })
}

/// Writes every artifact of `run` under `dir`.
pub fn save_cv_run(run: &CvRun, cfg: &RunConfig, fingerprint: &str, dir: &Path) -> Result<()> {
    write(&dir.join("config.cfg"), cfg.to_text())?;
    write(&dir.join("dataset.sha256"), format!("{fingerprint}\n"))?;
    write(&dir.join("folds.json"), serde_json::to_string_pretty(&run.assignments)?)?;
    let folds_txt: String = run.assignments.iter().map(|a| a.to_text(&run.roster)).collect();
    write(&dir.join("folds.txt"), folds_txt)?;
    for f in &run.folds {
        let fd = dir.join(fold_dir(f.repeat, f.fold));
        let ok = f.outcome.as_ref().ok();
        let meta = FoldMeta {
            repeat: f.repeat,
            fold: f.fold,
            seeds: f.seeds,
            n_test: f.n_test,
            error: f.outcome.as_ref().err().cloned(),
            dae_history: ok.map(|o| o.dae_history.clone()),
            head_history: ok.map(|o| o.head_history.clone()),
            encoder_before: ok.map(|o| o.encoder_before.clone()),
            encoder_after: ok.map(|o| o.encoder_after.clone()),
        };
        write(&fd.join("fold.json"), serde_json::to_string_pretty(&meta)?)?;
        if let Some(o) = ok {
            save_bundle(&o.bundle, &fd.join("model.sksq"))?;
            write_records(&o.records, &fd.join("predictions.csv"))?;
        }
    }
    write(&dir.join("report.txt"), run.report.to_text())?;
    write_records(&run.records(0), &dir.join("predictions.csv"))?;
    Ok(())
}

/// Rebuilds a saved run; `dataset` must be the one it was run on.
pub fn load_cv_run(dir: &Path, dataset: &Dataset) -> Result<(RunConfig, CvRun)> {
    let cfg_path = dir.join("config.cfg");
    let cfg = RunConfig::resolve(&parse_kv(&read(&cfg_path)?, &cfg_path.display().to_string())?, &[], None)?;
    let recorded = read(&dir.join("dataset.sha256"))?;
    let fingerprint = dataset.fingerprint();
    if recorded.trim() != fingerprint {
        return Err(Error::invalid(format!(
            "run {} was made on dataset {} but this dataset is {fingerprint}",
            dir.display(),
            recorded.trim()
        )));
    }
    let assignments: Vec<FoldAssignment> = serde_json::from_str(&read(&dir.join("folds.json"))?)?;
    let cv = cfg.cv_config();
    if assignments.len() != cv.repeats {
        return Err(Error::invalid("fold assignments do not match the configured repeats"));
    }
    let mut folds = Vec::new();
    for (r, a) in assignments.iter().enumerate() {
        a.check_partition(dataset.len())?;
        for f in 0..a.len() {
            let fd = dir.join(fold_dir(r, f));
            let meta: FoldMeta = serde_json::from_str(&read(&fd.join("fold.json"))?)?;
            if (meta.repeat, meta.fold) != (r, f) {
                return Err(Error::invalid(format!("{} describes another fold", fd.display())));
            }
            let outcome = match meta.error {
                Some(e) => Err(e),
                None => {
                    let missing = |what: &str| Error::MissingArtifact {
                        path: fd.join("fold.json"),
                        detail: format!("no {what}"),
                    };
                    Ok(FoldOutput {
                        bundle: load_bundle(require(&fd.join("model.sksq"))?)?,
                        records: read_records(require(&fd.join("predictions.csv"))?)?,
                        dae_history: meta.dae_history.ok_or_else(|| missing("autoencoder history"))?,
                        head_history: meta.head_history.ok_or_else(|| missing("head history"))?,
                        encoder_before: meta.encoder_before.ok_or_else(|| missing("encoder digest"))?,
                        encoder_after: meta.encoder_after.ok_or_else(|| missing("encoder digest"))?,
                    })
                }
            };
            folds.push(FoldRun {
                repeat: r,
                fold: f,
                seeds: meta.seeds,
                n_test: meta.n_test,
                outcome,
            });
        }
    }
    let report = build_report(&cv, check_labels(dataset, cv.mode)?, &folds);
    let run = CvRun {
        config: cv,
        roster: roster(dataset),
        assignments,
        folds,
        report,
    };
    Ok((cfg, run))
}

/// Trust report of the first repeat's records: `trust.txt` plus density
/// curves under `trust/`.
pub fn save_trust(run: &CvRun, cfg: &RunConfig, dir: &Path) -> Result<TrustReport> {
    let t = &cfg.trust;
    let report = trust_report(&run.records(0), t.alpha, t.beta, t.bandwidth)?;
    write(&dir.join("trust.txt"), report.to_text())?;
    for (name, csv) in report.curve_files() {
        write(&dir.join("trust").join(name), csv)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_flag;
    use crate::data::{synth_dataset, SynthSpec};
    use crate::eval::run_cv;
    use crate::exec::Execution;

    fn tiny() -> (Dataset, RunConfig) {
        let ds = synth_dataset(&SynthSpec {
            n_subjects: 3,
            trials_per_subject: 6,
            pass_fraction: 0.5,
            pass_duration_s: (8.0, 10.0),
            fail_duration_s: (12.0, 15.0),
            ..SynthSpec::default()
        })
        .unwrap();
        let flags: Vec<_> = ["scheme=stratified3", "dae.max_epochs=1", "classifier.max_epochs=2", "seed=5"]
            .iter()
            .map(|f| parse_flag(f).unwrap())
            .collect();
        (ds, RunConfig::resolve(&[], &flags, None).unwrap())
    }

    #[test]
    fn saved_run_reloads_with_identical_report() {
        let (ds, cfg) = tiny();
        let run = run_cv(&ds, &cfg.cv_config(), Execution::Serial).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_cv_run(&run, &cfg, &ds.fingerprint(), dir.path()).unwrap();
        let (cfg2, loaded) = load_cv_run(dir.path(), &ds).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(loaded.report.to_text(), run.report.to_text());
        assert_eq!(loaded.records(0), run.records(0));
        assert_eq!(loaded.assignments, run.assignments);
        assert!(loaded.encoder_frozen_everywhere());
        assert!(dir.path().join("fold-03/model.sksq").exists());
    }

    #[test]
    fn other_dataset_and_missing_files_are_refused() {
        let (ds, cfg) = tiny();
        let run = run_cv(&ds, &cfg.cv_config(), Execution::Serial).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_cv_run(&run, &cfg, &ds.fingerprint(), dir.path()).unwrap();
        let mut other = ds.clone();
        other.trials.pop();
        assert!(load_cv_run(dir.path(), &other).is_err());
        fs::remove_file(dir.path().join("fold-02/model.sksq")).unwrap();
        assert!(matches!(load_cv_run(dir.path(), &ds), Err(Error::MissingArtifact { .. })));
    }

    #[test]
    fn run_id_ignores_output_location() {
        let (ds, cfg) = tiny();
        let moved = RunConfig {
            out: Some("x".into()),
            ..cfg.clone()
        };
        assert_eq!(run_id(&cfg, &ds.fingerprint()), run_id(&moved, &ds.fingerprint()));
        let reseeded = RunConfig { seed: 6, ..cfg.clone() };
        assert_ne!(run_id(&cfg, &ds.fingerprint()), run_id(&reseeded, &ds.fingerprint()));
    }
}
