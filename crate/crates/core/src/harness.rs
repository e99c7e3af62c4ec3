//! Repeated user-level train/test evaluation of the measures and the combined model.
//!
//! Every user first contributes the same number of randomly chosen trainable
//! preferences. Each permutation then shuffles the users, fits the preference
//! model on the training users' answers and measures, on the remaining users'
//! answers, how often each method ranks the chosen visualization higher.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coxpref::{fit_records, FitConfig};
use crate::data::{PreferenceDataset, PreferenceRecord};
use crate::error::{Error, Result};
use crate::measures::{compute_features, FeatureVector, MeasureId};
pub use crate::scoring::agreement;
use crate::scoring::{Scorer, TiePolicy};

const SUBSAMPLE_SALT: u64 = 0x5u64 << 60 | 0x0B5A_3B1E;

/// Share of users used for training, kept exact as a ratio (`"2/3"` in JSON).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainFraction {
    num: u32,
    den: u32,
}

impl TrainFraction {
    pub fn new(num: u32, den: u32) -> Result<Self> {
        if den == 0 || num == 0 || num >= den {
            return Err(Error::InvalidConfig(format!("train fraction {num}/{den} must lie strictly in (0, 1)")));
        }
        Ok(TrainFraction { num, den })
    }

    /// `floor(fraction · users)`.
    pub fn train_count(self, users: usize) -> usize {
        users * self.num as usize / self.den as usize
    }
}

impl Default for TrainFraction {
    fn default() -> Self {
        TrainFraction { num: 2, den: 3 }
    }
}

impl fmt::Display for TrainFraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for TrainFraction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("train fraction {s:?} is not of the form \"n/d\""));
        let (n, d) = s.split_once('/').ok_or_else(bad)?;
        TrainFraction::new(n.trim().parse().map_err(|_| bad())?, d.trim().parse().map_err(|_| bad())?)
    }
}

impl Serialize for TrainFraction {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TrainFraction {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub prefs_per_user: usize,
    pub n_permutations: usize,
    pub train_fraction: TrainFraction,
    pub lambda: f64,
    pub seed: u64,
    pub tie_policy: TiePolicy,
    /// Single-measure baselines, reported alongside the combined model.
    pub measures: Vec<MeasureId>,
    /// Candidate covariates of the combined model.
    pub cox_features: Vec<MeasureId>,
    pub fit: FitConfig,
    /// Worker threads; results do not depend on it.
    #[serde(skip_serializing)]
    pub workers: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            prefs_per_user: 30,
            n_permutations: 1000,
            train_fraction: TrainFraction::default(),
            lambda: 0.01,
            seed: 0,
            tie_policy: TiePolicy::HalfCredit,
            measures: MeasureId::ALL.to_vec(),
            cox_features: MeasureId::ALL.to_vec(),
            fit: FitConfig::default(),
            workers: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prefs_per_user == 0 {
            return Err(Error::InvalidConfig("prefs_per_user must be ≥ 1".into()));
        }
        if self.n_permutations == 0 {
            return Err(Error::InvalidConfig("n_permutations must be ≥ 1".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidConfig("lambda must be ≥ 0".into()));
        }
        if self.cox_features.is_empty() {
            return Err(Error::InvalidConfig("cox_features is empty".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::InvalidConfig("workers must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn methods(&self) -> Vec<Method> {
        self.measures
            .iter()
            .map(|&m| Method::Measure(m))
            .chain(std::iter::once(Method::CoxPref))
            .collect()
    }
}

/// A ranking method under evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Measure(MeasureId),
    CoxPref,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Measure(m) => m.name(),
            Method::CoxPref => "cox_pref",
        }
    }
}

/// A subsampled dataset and the users left out of it.
#[derive(Debug, Clone)]
pub struct Subsample {
    pub dataset: PreferenceDataset,
    pub excluded_users: Vec<String>,
}

/// Keeps exactly `n` uniformly drawn trainable preferences from every user who has at least `n`.
pub fn subsample_per_user(prefs: &PreferenceDataset, n: usize, seed: u64) -> Result<Subsample> {
    if n == 0 {
        return Err(Error::InvalidConfig("prefs_per_user must be ≥ 1".into()));
    }
    let mut by_user: BTreeMap<&str, Vec<&PreferenceRecord>> = BTreeMap::new();
    for r in prefs.records() {
        let entry = by_user.entry(r.user.as_str()).or_default();
        if r.is_trainable() {
            entry.push(r);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kept = Vec::new();
    let mut excluded = Vec::new();
    for (user, records) in by_user {
        if records.len() < n {
            excluded.push(user.to_string());
            continue;
        }
        let mut picked = index::sample(&mut rng, records.len(), n).into_vec();
        picked.sort_unstable();
        kept.extend(picked.into_iter().map(|i| records[i].clone()));
    }
    if kept.is_empty() {
        return Err(Error::EmptyResult(n));
    }
    Ok(Subsample {
        dataset: prefs.with_records(kept)?,
        excluded_users: excluded,
    })
}

/// Seeded shuffle of `users`; the first `floor(fraction · U)` train, the rest test.
pub fn permutation_split<T: Clone>(
    users: &[T],
    train_fraction: TrainFraction,
    seed: u64,
    permutation_index: u64,
) -> Result<(Vec<T>, Vec<T>)> {
    if users.len() < 3 {
        return Err(Error::TooFewUsers(users.len()));
    }
    let cut = train_fraction.train_count(users.len());
    if cut == 0 || cut == users.len() {
        return Err(Error::InvalidConfig(format!(
            "train fraction {train_fraction} leaves an empty side with {} users",
            users.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ permutation_index);
    let mut shuffled = users.to_vec();
    shuffled.shuffle(&mut rng);
    let test = shuffled.split_off(cut);
    Ok((shuffled, test))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationResult {
    pub index: usize,
    pub train_users: Vec<String>,
    pub test_users: Vec<String>,
    /// Agreement per method, in report method order.
    pub agreement: Vec<f64>,
    pub cox_beta: Vec<f64>,
    pub cox_converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub mean: f64,
    /// Sample standard deviation over permutations; absent with a single permutation.
    pub std: Option<f64>,
    /// Half-width of the normal-approximation 95% interval, `1.96 · std / √P`.
    pub ci95_half_width: Option<f64>,
}

/// Pairwise comparison of methods over permutations, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinMatrix {
    /// `wins[i][j]`: share of permutations where method i strictly beats method j.
    pub wins: Vec<Vec<f64>>,
    pub ties: Vec<Vec<f64>>,
}

/// Win and tie percentages from per-permutation agreement rows (permutation × method).
pub fn win_matrix(per_permutation: &[Vec<f64>]) -> Result<WinMatrix> {
    let p = per_permutation.len();
    let m = per_permutation.first().map_or(0, Vec::len);
    if p == 0 || m < 2 {
        return Err(Error::InvalidConfig("win matrix needs ≥ 2 methods and ≥ 1 permutation".into()));
    }
    if let Some(row) = per_permutation.iter().find(|r| r.len() != m) {
        return Err(Error::DimensionMismatch { expected: m, found: row.len() });
    }
    let mut wins = vec![vec![0.0; m]; m];
    let mut ties = vec![vec![0.0; m]; m];
    for row in per_permutation {
        for i in 0..m {
            for j in 0..m {
                if row[i] > row[j] {
                    wins[i][j] += 1.0;
                } else if row[i] == row[j] {
                    ties[i][j] += 1.0;
                }
            }
        }
    }
    let scale = 100.0 / p as f64;
    for row in wins.iter_mut().chain(ties.iter_mut()) {
        row.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(WinMatrix { wins, ties })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub methods: Vec<String>,
    pub users: Vec<String>,
    pub excluded_users: Vec<String>,
    pub n_preferences: usize,
    pub ci_method: String,
    pub summary: Vec<MethodSummary>,
    pub win_matrix: WinMatrix,
    pub permutations: Vec<PermutationResult>,
}

impl ExperimentReport {
    pub fn summary_for(&self, method: &str) -> Option<&MethodSummary> {
        self.summary.iter().find(|s| s.method == method)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn summarize(method: &str, values: &[f64]) -> MethodSummary {
    let p = values.len() as f64;
    let mean = values.iter().sum::<f64>() / p;
    let std = (values.len() > 1)
        .then(|| (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (p - 1.0)).sqrt());
    MethodSummary {
        method: method.to_string(),
        mean,
        std,
        ci95_half_width: std.map(|s| 1.96 * s / p.sqrt()),
    }
}

/// Computes features for every visualization the dataset references, then runs the protocol.
pub fn run_experiment(dataset: &PreferenceDataset, config: &ExperimentConfig) -> Result<ExperimentReport> {
    let referenced: BTreeSet<&str> = dataset
        .records()
        .iter()
        .flat_map(|r| [r.left.as_str(), r.right.as_str()])
        .collect();
    let features = compute_features(
        referenced
            .iter()
            .map(|id| &dataset.visualizations()[*id]),
    )?;
    run_experiment_with_features(dataset, &features, config)
}

pub fn run_experiment_with_features(
    dataset: &PreferenceDataset,
    features: &BTreeMap<String, FeatureVector>,
    config: &ExperimentConfig,
) -> Result<ExperimentReport> {
    config.validate()?;
    let sub = subsample_per_user(dataset, config.prefs_per_user, config.seed ^ SUBSAMPLE_SALT)?;
    let mut by_user: BTreeMap<String, Vec<&PreferenceRecord>> = BTreeMap::new();
    for r in sub.dataset.records() {
        by_user.entry(r.user.clone()).or_default().push(r);
    }
    let users: Vec<String> = by_user.keys().cloned().collect();
    if users.len() < 3 {
        return Err(Error::TooFewUsers(users.len()));
    }
    let methods = config.methods();

    let run_one = |p: usize| -> Result<PermutationResult> {
        let (mut train, mut test) = permutation_split(&users, config.train_fraction, config.seed, p as u64)?;
        let train_records = train.iter().flat_map(|u| by_user[u].iter().copied());
        let model = fit_records(train_records, features, &config.cox_features, config.lambda, &config.fit)?;
        let test_records: Vec<&PreferenceRecord> = test.iter().flat_map(|u| by_user[u].iter().copied()).collect();
        let agreement = methods
            .iter()
            .enumerate()
            .map(|(k, method)| {
                let scorer: &dyn Scorer = match method {
                    Method::Measure(m) => m,
                    Method::CoxPref => &model,
                };
                let ties = config.tie_policy.derive((p * methods.len() + k) as u64 + 1);
                agreement(scorer, test_records.iter().copied(), features, ties)
            })
            .collect::<Result<Vec<f64>>>()?;
        train.sort();
        test.sort();
        Ok(PermutationResult {
            index: p,
            train_users: train,
            test_users: test,
            agreement,
            cox_beta: model.beta().to_vec(),
            cox_converged: model.diagnostics().converged,
        })
    };

    let run_all = || {
        (0..config.n_permutations)
            .into_par_iter()
            .map(run_one)
            .collect::<Result<Vec<_>>>()
    };
    let permutations = match config.workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?
            .install(run_all)?,
        None => run_all()?,
    };

    let rows: Vec<Vec<f64>> = permutations.iter().map(|p| p.agreement.clone()).collect();
    let summary = methods
        .iter()
        .enumerate()
        .map(|(k, m)| summarize(m.name(), &rows.iter().map(|r| r[k]).collect::<Vec<_>>()))
        .collect();
    let win_matrix = if methods.len() >= 2 {
        win_matrix(&rows)?
    } else {
        WinMatrix { wins: vec![vec![0.0]], ties: vec![vec![100.0]] }
    };

    Ok(ExperimentReport {
        config: config.clone(),
        methods: methods.iter().map(|m| m.name().to_string()).collect(),
        users,
        excluded_users: sub.excluded_users,
        n_preferences: sub.dataset.records().len(),
        ci_method: "normal approximation over permutations: mean ± 1.96·sd/√P".into(),
        summary,
        win_matrix,
        permutations,
    })
}

/// Plain-text agreement table and lower-triangular win table.
pub fn render_tables(report: &ExperimentReport) -> String {
    let width = report.methods.iter().map(|m| m.len()).max().unwrap_or(0).max(14);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "Mean agreement with user preferences over {} permutation(s), {} users, {} preferences",
        report.permutations.len(),
        report.users.len(),
        report.n_preferences
    );
    for s in &report.summary {
        let ci = s
            .ci95_half_width
            .map_or_else(|| "(CI undefined)".to_string(), |h| format!("± {:.2}", 100.0 * h));
        let sd = s.std.map_or_else(|| "-".to_string(), |v| format!("{:.2}", 100.0 * v));
        let _ = writeln!(out, "  {:<width$}  {:>6.2}%  {ci:<10}  sd {sd}", s.method, 100.0 * s.mean);
    }
    let _ = writeln!(out, "\nWins (% of permutations where the row method beats the column method)");
    let _ = write!(out, "  {:<width$}", "");
    for m in &report.methods[..report.methods.len().saturating_sub(1)] {
        let _ = write!(out, "  {m:>10}");
    }
    let _ = writeln!(out);
    for (i, m) in report.methods.iter().enumerate().skip(1) {
        let _ = write!(out, "  {m:<width$}");
        for j in 0..i {
            let _ = write!(out, "  {:>9.1}%", report.win_matrix.wins[i][j]);
        }
        let _ = writeln!(out);
    }
    if !report.excluded_users.is_empty() {
        let _ = writeln!(out, "\nExcluded users: {}", report.excluded_users.join(", "));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Choice, Visualization};
    use chrono::Utc;
    use rand::Rng;

    fn dataset(counts: &[(&str, usize, usize)]) -> PreferenceDataset {
        let vis: BTreeMap<String, Visualization> = ["a", "b", "c"]
            .iter()
            .map(|id| {
                (id.to_string(), Visualization::new(*id, vec![[0.0, 0.0], [1.0, 0.0]], vec![0, 1], None).unwrap())
            })
            .collect();
        let mut records = Vec::new();
        for &(user, trainable, none) in counts {
            for k in 0..trainable + none {
                records.push(PreferenceRecord {
                    user: user.into(),
                    left: "a".into(),
                    right: if k % 2 == 0 { "b".into() } else { "c".into() },
                    choice: if k < trainable { Choice::Left } else { Choice::None },
                    timestamp: Utc::now(),
                });
            }
        }
        PreferenceDataset::new(records, vis).unwrap()
    }

    #[test]
    fn subsample_counts() {
        let ds = dataset(&[("u1", 40, 3), ("u2", 35, 0), ("u3", 20, 15)]);
        let sub = subsample_per_user(&ds, 30, 1).unwrap();
        assert_eq!(sub.dataset.records().len(), 60);
        assert_eq!(sub.excluded_users, vec!["u3".to_string()]);
        assert!(sub.dataset.records().iter().all(|r| r.is_trainable()));
        assert_eq!(sub.dataset.per_user_counts().values().copied().collect::<Vec<_>>(), vec![30, 30]);
    }

    #[test]
    fn subsample_exact_and_determinism() {
        let ds = dataset(&[("u1", 30, 0)]);
        let sub = subsample_per_user(&ds, 30, 1).unwrap();
        assert_eq!(sub.dataset.records(), ds.records());

        // Distinguish records by timestamp order to compare subsets.
        let mut records = Vec::new();
        let base = Utc::now();
        for k in 0..50 {
            records.push(PreferenceRecord {
                user: "u".into(),
                left: "a".into(),
                right: "b".into(),
                choice: Choice::Left,
                timestamp: base + chrono::Duration::seconds(k),
            });
        }
        let ds = ds.with_records(records).unwrap();
        let a = subsample_per_user(&ds, 10, 5).unwrap().dataset;
        let b = subsample_per_user(&ds, 10, 5).unwrap().dataset;
        let c = subsample_per_user(&ds, 10, 6).unwrap().dataset;
        assert_eq!(a, b);
        assert_eq!(c.records().len(), 10);
        assert_ne!(a, c);

        assert!(matches!(subsample_per_user(&ds, 51, 0), Err(Error::EmptyResult(51))));
    }

    #[test]
    fn split_sizes() {
        let users: Vec<u32> = (0..30).collect();
        let (train, test) = permutation_split(&users, TrainFraction::default(), 3, 0).unwrap();
        assert_eq!((train.len(), test.len()), (20, 10));
        let (train, test) = permutation_split(&users[..3], TrainFraction::default(), 3, 0).unwrap();
        assert_eq!((train.len(), test.len()), (2, 1));
        assert!(matches!(
            permutation_split(&users[..2], TrainFraction::default(), 3, 0),
            Err(Error::TooFewUsers(2))
        ));
    }

    #[test]
    fn split_is_a_partition() {
        let users: Vec<u32> = (0..17).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let seed: u64 = rng.random();
            let (train, test) = permutation_split(&users, TrainFraction::default(), seed, 7).unwrap();
            let mut all: Vec<u32> = train.iter().chain(&test).copied().collect();
            all.sort();
            assert_eq!(all, users);
            assert!(train.iter().all(|u| !test.contains(u)));
        }
    }

    #[test]
    fn train_fraction_parsing() {
        let f: TrainFraction = serde_json::from_str("\"2/3\"").unwrap();
        assert_eq!(f, TrainFraction::default());
        assert_eq!(serde_json::to_string(&f).unwrap(), "\"2/3\"");
        assert!("3/3".parse::<TrainFraction>().is_err());
        assert!("0/3".parse::<TrainFraction>().is_err());
        assert!("x".parse::<TrainFraction>().is_err());
    }

    #[test]
    fn win_matrix_cases() {
        let wm = win_matrix(&[vec![0.7, 0.6], vec![0.8, 0.5]]).unwrap();
        assert_eq!(wm.wins[0][1], 100.0);
        assert_eq!(wm.wins[1][0], 0.0);

        let wm = win_matrix(&[vec![0.5, 0.5], vec![0.6, 0.6]]).unwrap();
        assert_eq!((wm.wins[0][1], wm.wins[1][0], wm.ties[0][1]), (0.0, 0.0, 100.0));

        // Three permutations over three methods, counted by hand:
        // A beats B in p0 and p2; B beats A in p1; C beats A in p0, ties it in p1;
        // C beats B in p0, loses in p1, ties in p2.
        let rows = [vec![0.6, 0.5, 0.7], vec![0.5, 0.55, 0.5], vec![0.7, 0.6, 0.6]];
        let wm = win_matrix(&rows).unwrap();
        let third = 100.0 / 3.0;
        assert!((wm.wins[0][1] - 2.0 * third).abs() < 1e-12);
        assert!((wm.wins[1][0] - third).abs() < 1e-12);
        assert!((wm.wins[2][0] - third).abs() < 1e-12);
        assert!((wm.ties[2][0] - third).abs() < 1e-12);
        assert!((wm.wins[0][2] - third).abs() < 1e-12);
        assert!((wm.wins[2][1] - third).abs() < 1e-12);
        assert!((wm.wins[1][2] - third).abs() < 1e-12);
        assert!((wm.ties[2][1] - third).abs() < 1e-12);
        for i in 0..3 {
            for j in 0..3 {
                assert!((wm.wins[i][j] + wm.wins[j][i] + wm.ties[i][j] - 100.0).abs() < 1e-9);
            }
        }
        assert!(win_matrix(&[vec![0.5]]).is_err());
    }

    #[test]
    fn summary_statistics() {
        let s = summarize("x", &[0.5, 0.7]);
        assert!((s.mean - 0.6).abs() < 1e-15);
        let sd = (0.02f64).sqrt();
        assert!((s.std.unwrap() - sd).abs() < 1e-12);
        assert!((s.ci95_half_width.unwrap() - 1.96 * sd / 2f64.sqrt()).abs() < 1e-12);
        let single = summarize("x", &[0.5]);
        assert_eq!((single.std, single.ci95_half_width), (None, None));
    }

    #[test]
    fn config_json_defaults() {
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"n_permutations": 5, "workers": 2}"#).unwrap();
        assert_eq!(cfg.prefs_per_user, 30);
        assert_eq!(cfg.n_permutations, 5);
        assert_eq!(cfg.workers, Some(2));
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(!text.contains("workers"));
        assert!(text.contains(r#""train_fraction":"2/3""#));
        assert!(text.contains(r#""tie_policy":"half_credit""#));
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"tie_policy": {"random": 4}}"#).unwrap();
        assert_eq!(cfg.tie_policy, TiePolicy::Random(4));
    }
}
