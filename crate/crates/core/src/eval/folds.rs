//! Cross-validation splitters.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, TrialId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Scheme {
    Stratified { k: usize },
    /// Leave one supertrial out: fold `i` tests every subject's `i`-th trial.
    Loso,
    /// Leave one user out.
    Louo,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scheme::Stratified { k } => write!(f, "stratified{k}"),
            Scheme::Loso => f.write_str("loso"),
            Scheme::Louo => f.write_str("louo"),
        }
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loso" => Ok(Scheme::Loso),
            "louo" => Ok(Scheme::Louo),
            _ => {
                let k = s
                    .strip_prefix("stratified")
                    .and_then(|k| if k.is_empty() { Some(10) } else { k.parse().ok() })
                    .filter(|&k| k >= 2)
                    .ok_or_else(|| {
                        Error::invalid(format!(
                            "unknown scheme `{s}` (stratified<k>, loso, louo)"
                        ))
                    })?;
                Ok(Scheme::Stratified { k })
            }
        }
    }
}

/// What a splitter needs to know about one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct RosterEntry {
    pub id: TrialId,
    pub subject: String,
    pub trial_index: u32,
    pub class: Option<usize>,
}

pub fn roster(dataset: &Dataset) -> Vec<RosterEntry> {
    dataset
        .trials
        .iter()
        .map(|t| RosterEntry {
            id: t.id(),
            subject: t.subject_id.clone(),
            trial_index: t.trial_index,
            class: t.class_label.map(|c| c.index()),
        })
        .collect()
}

/// Train/test positions into the roster, both sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub scheme: Scheme,
    pub seed: u64,
    pub folds: Vec<Fold>,
}

impl FoldAssignment {
    fn from_tests(scheme: Scheme, seed: u64, n: usize, tests: Vec<Vec<usize>>) -> Self {
        let folds = tests
            .into_iter()
            .map(|mut test| {
                test.sort_unstable();
                let set: BTreeSet<usize> = test.iter().copied().collect();
                let train = (0..n).filter(|i| !set.contains(i)).collect();
                Fold { train, test }
            })
            .collect();
        Self {
            scheme,
            seed,
            folds,
        }
    }

    pub fn len(&self) -> usize {
        self.folds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.folds.is_empty()
    }

    /// Test sets disjoint and covering `0..n`; train = complement of test.
    pub fn check_partition(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for (f, fold) in self.folds.iter().enumerate() {
            for &i in &fold.test {
                if i >= n || seen[i] {
                    return Err(Error::invalid(format!("fold {f}: test index {i} repeats or is out of range")));
                }
                seen[i] = true;
            }
            let test: BTreeSet<usize> = fold.test.iter().copied().collect();
            if fold.train.iter().any(|i| test.contains(i)) {
                return Err(Error::invalid(format!("fold {f}: a trial is in both train and test")));
            }
            if fold.train.len() + fold.test.len() != n {
                return Err(Error::invalid(format!("fold {f}: train and test do not cover the dataset")));
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::invalid(format!("index {i} is never tested")));
        }
        Ok(())
    }

    /// One line per fold: `fold<TAB>ids…` for test sets.
    pub fn to_text(&self, roster: &[RosterEntry]) -> String {
        let mut s = format!("scheme = {}\nseed = {}\n", self.scheme, self.seed);
        for (f, fold) in self.folds.iter().enumerate() {
            let ids: Vec<&str> = fold.test.iter().map(|&i| roster[i].id.0.as_str()).collect();
            s.push_str(&format!("fold {} = {}\n", f + 1, ids.join(" ")));
        }
        s
    }
}

/// Fold sizes differ by at most one, and each fold receives the floor or
/// ceiling of each class's proportional share of its size. The integer
/// counts come from rounding the real share matrix with its row (class
/// size) and column (fold size) sums preserved; members are shuffled per
/// class and handed out in fold order.
pub fn stratified_kfold(labels: &[usize], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::invalid(format!("stratified k-fold needs k ≥ 2, got {k}")));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in labels.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    for (c, members) in &by_class {
        if members.len() < k {
            return Err(Error::invalid(format!(
                "class {c} has {} members, fewer than k = {k}",
                members.len()
            )));
        }
    }
    let n = labels.len();
    let sizes: Vec<usize> = (0..k).map(|j| n / k + usize::from(j < n % k)).collect();
    let class_sizes: Vec<usize> = by_class.values().map(Vec::len).collect();
    let counts = round_shares(&class_sizes, &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tests = vec![Vec::new(); k];
    for (row, (_, mut members)) in counts.iter().zip(by_class) {
        members.shuffle(&mut rng);
        let mut it = members.into_iter();
        for (j, &m) in row.iter().enumerate() {
            tests[j].extend(it.by_ref().take(m));
        }
    }
    Ok(FoldAssignment::from_tests(
        Scheme::Stratified { k },
        seed,
        n,
        tests,
    ))
}

/// Integer matrix with entries `⌊x⌋` or `⌈x⌉` of `x[c][j] = rows[c]·cols[j]/n`
/// and the same row and column sums. Starts from the floors and places the
/// remaining units with a max-flow over the fractional cells, which always
/// saturates for matrices with integer margins.
fn round_shares(rows: &[usize], cols: &[usize]) -> Vec<Vec<usize>> {
    let n: usize = rows.iter().sum();
    let (nr, nc) = (rows.len(), cols.len());
    let mut m: Vec<Vec<usize>> = rows
        .iter()
        .map(|&r| cols.iter().map(|&c| r * c / n).collect())
        .collect();
    let frac = |a: usize, b: usize| (rows[a] * cols[b]) % n != 0;
    let mut row_left: Vec<usize> = (0..nr).map(|a| rows[a] - m[a].iter().sum::<usize>()).collect();
    let mut col_left: Vec<usize> = (0..nc).map(|b| cols[b] - (0..nr).map(|a| m[a][b]).sum::<usize>()).collect();
    // Augmenting paths alternate row → unused fractional cell → column,
    // column → used cell → row.
    loop {
        let Some(start) = (0..nr).find(|&a| row_left[a] > 0) else {
            break;
        };
        let mut seen_row = vec![false; nr];
        let mut seen_col = vec![false; nc];
        let mut via_col: Vec<Option<usize>> = vec![None; nc];
        let mut via_row: Vec<Option<usize>> = vec![None; nr];
        let mut queue = std::collections::VecDeque::from([start]);
        seen_row[start] = true;
        let mut end = None;
        'bfs: while let Some(a) = queue.pop_front() {
            for b in 0..nc {
                if seen_col[b] || !frac(a, b) || m[a][b] != rows[a] * cols[b] / n {
                    continue;
                }
                seen_col[b] = true;
                via_col[b] = Some(a);
                if col_left[b] > 0 {
                    end = Some(b);
                    break 'bfs;
                }
                for a2 in 0..nr {
                    if !seen_row[a2] && frac(a2, b) && m[a2][b] > rows[a2] * cols[b] / n {
                        seen_row[a2] = true;
                        via_row[a2] = Some(b);
                        queue.push_back(a2);
                    }
                }
            }
        }
        let mut b = end.expect("integer margins admit a rounding");
        col_left[b] -= 1;
        loop {
            let a = via_col[b].expect("path");
            m[a][b] += 1;
            match via_row[a] {
                Some(prev) => {
                    m[a][prev] -= 1;
                    b = prev;
                }
                None => {
                    row_left[a] -= 1;
                    break;
                }
            }
        }
    }
    m
}

/// Fold per distinct trial index; subjects lacking that index sit it out.
pub fn loso_folds(roster: &[RosterEntry]) -> Result<FoldAssignment> {
    if roster.is_empty() {
        return Err(Error::invalid("no trials to split"));
    }
    let mut by_index: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, e) in roster.iter().enumerate() {
        by_index.entry(e.trial_index).or_default().push(i);
    }
    Ok(FoldAssignment::from_tests(
        Scheme::Loso,
        0,
        roster.len(),
        by_index.into_values().collect(),
    ))
}

/// Fold per subject, in subject order.
pub fn louo_folds(roster: &[RosterEntry]) -> Result<FoldAssignment> {
    let mut by_subject: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, e) in roster.iter().enumerate() {
        by_subject.entry(&e.subject).or_default().push(i);
    }
    if by_subject.len() < 2 {
        return Err(Error::invalid(format!(
            "leave-one-user-out needs at least two subjects, found {}",
            by_subject.len()
        )));
    }
    Ok(FoldAssignment::from_tests(
        Scheme::Louo,
        0,
        roster.len(),
        by_subject.into_values().collect(),
    ))
}

pub fn assign_folds(roster: &[RosterEntry], scheme: Scheme, seed: u64) -> Result<FoldAssignment> {
    match scheme {
        Scheme::Stratified { k } => {
            let labels = roster
                .iter()
                .map(|e| {
                    e.class.ok_or_else(|| {
                        Error::invalid(format!("stratification needs a class label on {}", e.id))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            stratified_kfold(&labels, k, seed)
        }
        Scheme::Loso => loso_folds(roster),
        Scheme::Louo => louo_folds(roster),
    }
}
