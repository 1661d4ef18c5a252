//! Trial CSV files and dataset manifests.
//!
//! Trial file layout:
//!
//! ```text
//! # subject=S01
//! # trial=3
//! # rate_hz=30
//! # score=212.5
//! # class=pass
//! t,sx,sy,gx,gy
//! 0,312.5,240.1,280.0,251.3
//! 0.0333,,,281.2,250.9
//! ```
//!
//! Empty cells mark missed detections.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::trial::{ClassLabel, Trial};
use super::Dataset;
use crate::error::{Error, Result};

fn parse_err(path: &str, line: usize, column: usize, detail: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_string(),
        line,
        column,
        detail: detail.into(),
    }
}

pub fn parse_trial_csv(path: &Path) -> Result<Trial> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trial_str(&text, &path.display().to_string())
}

/// Parses trial text; `origin` names the source in diagnostics.
pub fn parse_trial_str(text: &str, origin: &str) -> Result<Trial> {
    let mut subject = None;
    let mut trial_index = None;
    let mut rate = None;
    let mut score = None;
    let mut class = None;

    let mut header_line = 0usize;
    let mut body_start = 0usize;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let Some(meta) = trimmed.strip_prefix('#') else {
            header_line = lineno;
            body_start = i;
            break;
        };
        let Some((key, value)) = meta.split_once('=') else {
            continue;
        };
        let (key, value) = (key.trim(), value.trim());
        let col = line.find(value).map_or(1, |c| c + 1);
        match key {
            "subject" => subject = Some(value.to_string()),
            "trial" => {
                trial_index = Some(value.parse::<u32>().map_err(|_| {
                    parse_err(origin, lineno, col, format!("trial index `{value}` is not a positive integer"))
                })?)
            }
            "rate_hz" => {
                rate = Some(value.parse::<f64>().map_err(|_| {
                    parse_err(origin, lineno, col, format!("rate `{value}` is not a number"))
                })?)
            }
            "score" => {
                score = if value.eq_ignore_ascii_case("na") {
                    None
                } else {
                    Some(value.parse::<f64>().map_err(|_| {
                        parse_err(origin, lineno, col, format!("score `{value}` is not a number"))
                    })?)
                }
            }
            "class" => {
                class = if value.eq_ignore_ascii_case("na") {
                    None
                } else {
                    Some(
                        value
                            .parse::<ClassLabel>()
                            .map_err(|e| parse_err(origin, lineno, col, e.to_string()))?,
                    )
                }
            }
            _ => {}
        }
    }
    if header_line == 0 {
        return Err(parse_err(origin, text.lines().count().max(1), 1, "no column header row"));
    }
    let subject = subject.ok_or_else(|| parse_err(origin, 1, 1, "missing `# subject=` header"))?;
    let trial_index =
        trial_index.ok_or_else(|| parse_err(origin, 1, 1, "missing `# trial=` header"))?;
    let rate = rate.ok_or_else(|| parse_err(origin, 1, 1, "missing `# rate_hz=` header"))?;

    let body: String = text
        .lines()
        .skip(body_start)
        .flat_map(|l| [l, "\n"])
        .collect();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(false)
        .from_reader(body.as_bytes());
    let headers = reader.headers()?.clone();
    if headers.get(0) != Some("t") {
        return Err(parse_err(
            origin,
            header_line,
            1,
            "missing required column `t` (must be the first column)",
        ));
    }
    let channels: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    if channels.is_empty() {
        return Err(parse_err(origin, header_line, 1, "no channel columns after `t`"));
    }

    let mut values = Vec::new();
    let mut seen_t: HashSet<u64> = HashSet::new();
    for (row_i, record) in reader.records().enumerate() {
        let lineno = header_line + 1 + row_i;
        let record = record.map_err(|e| parse_err(origin, lineno, 1, e.to_string()))?;
        if record.len() != headers.len() {
            return Err(parse_err(
                origin,
                lineno,
                record.len().min(headers.len()) + 1,
                format!("expected {} cells, found {}", headers.len(), record.len()),
            ));
        }
        let t_cell = &record[0];
        let t: f64 = t_cell.parse().map_err(|_| {
            parse_err(origin, lineno, 1, format!("timestamp `{t_cell}` is not a number"))
        })?;
        if !seen_t.insert(t.to_bits()) {
            return Err(parse_err(origin, lineno, 1, format!("duplicate timestamp {t_cell}")));
        }
        for (ci, cell) in record.iter().enumerate().skip(1) {
            if cell.is_empty() {
                values.push(f64::NAN);
                continue;
            }
            let v: f64 = cell.parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| {
                parse_err(
                    origin,
                    lineno,
                    ci + 1,
                    format!("column `{}`: `{cell}` is not a finite number", &headers[ci]),
                )
            })?;
            values.push(v);
        }
    }
    if values.is_empty() {
        return Err(parse_err(origin, header_line + 1, 1, "no frames"));
    }
    Ok(Trial::new(subject, trial_index, rate, channels, values)?.with_labels(score, class))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |s| s.to_string())
}

/// Serializes a trial; floats use shortest round-trip formatting, so
/// output is byte-stable.
pub fn trial_to_csv(trial: &Trial) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# subject={}", trial.subject_id);
    let _ = writeln!(out, "# trial={}", trial.trial_index);
    let _ = writeln!(out, "# rate_hz={}", trial.sample_rate_hz);
    let _ = writeln!(out, "# score={}", fmt_opt(trial.score));
    let _ = writeln!(
        out,
        "# class={}",
        trial.class_label.map_or("NA", |c| c.as_str())
    );
    out.push('t');
    for c in &trial.channels {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    let period = 1.0 / trial.sample_rate_hz;
    for t in 0..trial.frames() {
        let _ = write!(out, "{}", t as f64 * period);
        for &v in trial.frame(t) {
            out.push(',');
            if !v.is_nan() {
                let _ = write!(out, "{v}");
            }
        }
        out.push('\n');
    }
    out
}

pub fn write_trial_csv(trial: &Trial, path: &Path) -> Result<()> {
    fs::write(path, trial_to_csv(trial)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub subject: String,
    pub trial: u32,
}

/// Reads a manifest and every trial it lists. Relative paths resolve
/// against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let mut trials = Vec::new();
    for (i, row) in reader.deserialize::<ManifestEntry>().enumerate() {
        let entry = row.map_err(|e| parse_err(&path.display().to_string(), i + 2, 1, e.to_string()))?;
        let trial_path = resolve(&base, &entry.path);
        let trial = parse_trial_csv(&trial_path)?;
        if trial.subject_id != entry.subject || trial.trial_index != entry.trial {
            return Err(parse_err(
                &path.display().to_string(),
                i + 2,
                1,
                format!(
                    "manifest lists {}/{} but {} contains {}",
                    entry.subject,
                    entry.trial,
                    trial_path.display(),
                    trial.id()
                ),
            ));
        }
        trials.push(trial);
    }
    Dataset::new(trials)
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Writes one CSV per trial plus `manifest.csv` under `dir`.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    let trials_dir = dir.join("trials");
    fs::create_dir_all(&trials_dir).map_err(|e| Error::io(&trials_dir, e))?;
    let manifest_path = dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest_path)?;
    for trial in &dataset.trials {
        let name = format!("{}_{:04}.csv", trial.subject_id, trial.trial_index);
        write_trial_csv(trial, &trials_dir.join(&name))?;
        w.serialize(ManifestEntry {
            path: format!("trials/{name}"),
            subject: trial.subject_id.clone(),
            trial: trial.trial_index,
        })?;
    }
    w.flush().map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "# subject=S01\n# trial=2\n# rate_hz=30\n# score=NA\n# class=pass\n\
t,sx,sy,gx,gy\n0,1,2,3,4\n0.0333,,,3.5,4.5\n0.0667,1.2,2.2,3.6,4.6\n";

    #[test]
    fn parses_header_and_frames() {
        let t = parse_trial_str(SAMPLE, "sample").unwrap();
        assert_eq!((t.frames(), t.n_channels()), (3, 4));
        assert_eq!(t.subject_id, "S01");
        assert_eq!(t.trial_index, 2);
        assert_eq!(t.class_label, Some(ClassLabel::Pass));
        assert_eq!(t.score, None);
        assert!(t.is_missing(1, 0) && t.is_missing(1, 1));
        assert!(!t.is_missing(1, 2));
    }

    #[test]
    fn wide_kinematics_files_are_accepted() {
        let mut s = String::from("# subject=B\n# trial=1\n# rate_hz=30\nt");
        for i in 0..76 {
            s.push_str(&format!(",k{i}"));
        }
        s.push('\n');
        for r in 0..3 {
            s.push_str(&r.to_string());
            for i in 0..76 {
                s.push_str(&format!(",{}", i as f64 * 0.1));
            }
            s.push('\n');
        }
        let t = parse_trial_str(&s, "jig").unwrap();
        assert_eq!(t.n_channels(), 76);
    }

    #[test]
    fn diagnostics_are_position_precise() {
        let bad = SAMPLE.replace("3.6", "abc");
        let err = parse_trial_str(&bad, "f.csv").unwrap_err();
        match err {
            Error::Parse { line, column, .. } => assert_eq!((line, column), (9, 4)),
            e => panic!("{e}"),
        }
        let dup = SAMPLE.replace("0.0667", "0.0333");
        let err = parse_trial_str(&dup, "f.csv").unwrap_err().to_string();
        assert!(err.contains("duplicate timestamp"), "{err}");
        let no_t = SAMPLE.replace("t,sx", "time,sx");
        let err = parse_trial_str(&no_t, "f.csv").unwrap_err().to_string();
        assert!(err.contains("`t`"), "{err}");
    }

    #[test]
    fn text_roundtrip_preserves_missing_markers() {
        let t = parse_trial_str(SAMPLE, "sample").unwrap();
        let again = parse_trial_str(&trial_to_csv(&t), "again").unwrap();
        assert_eq!(again.frames(), t.frames());
        for (a, b) in again.values().iter().zip(t.values()) {
            assert!(a == b || (a.is_nan() && b.is_nan()));
        }
    }
}
