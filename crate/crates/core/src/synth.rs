//! Synthetic visualizations and oracle users with known preference weights.
//!
//! A dataset is a set of Gaussian class clusters in `dim` dimensions. Each
//! "projection" keeps the first two coordinates and adds isotropic jitter, so
//! larger noise levels give visibly worse visualizations of the same data.

use std::collections::BTreeMap;

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::coxpref::logistic;
use crate::data::{Choice, PreferenceDataset, PreferenceRecord, Visualization};
use crate::error::{Error, Result};
use crate::measures::{FeatureVector, MeasureId};
use crate::scoring::Scorer;

fn default_separation() -> f64 {
    4.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Prefix of the generated visualization ids; derived from the other fields when absent.
    #[serde(default)]
    pub name: Option<String>,
    pub n_classes: usize,
    pub points_per_class: usize,
    pub dim: usize,
    /// Standard deviation of points around their class center.
    pub cluster_spread: f64,
    /// Standard deviation of class centers around the origin.
    #[serde(default = "default_separation")]
    pub class_separation: f64,
    pub noise_levels: Vec<f64>,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=6).contains(&self.n_classes) {
            return Err(Error::InvalidConfig(format!("n_classes must be in 2..=6, got {}", self.n_classes)));
        }
        if self.points_per_class < 2 || self.dim < 2 {
            return Err(Error::InvalidConfig("points_per_class and dim must be ≥ 2".into()));
        }
        if self.noise_levels.len() < 2 {
            return Err(Error::InvalidConfig("need at least 2 noise levels".into()));
        }
        let non_negative = |v: f64| v.is_finite() && v >= 0.0;
        if !self.noise_levels.iter().all(|&s| non_negative(s))
            || !non_negative(self.cluster_spread)
            || !non_negative(self.class_separation)
        {
            return Err(Error::InvalidConfig("spreads and noise levels must be finite and ≥ 0".into()));
        }
        Ok(())
    }

    fn prefix(&self) -> String {
        self.name
            .clone()
            .unwrap_or_else(|| format!("c{}-d{}-seed{}", self.n_classes, self.dim, self.seed))
    }
}

fn normal(std: f64) -> Normal<f64> {
    Normal::new(0.0, std).expect("finite non-negative std")
}

/// One visualization per noise level, all sharing the same high-dimensional source and labels.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Vec<Visualization>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centers: Vec<Vec<f64>> = (0..cfg.n_classes)
        .map(|_| (0..cfg.dim).map(|_| normal(cfg.class_separation).sample(&mut rng)).collect())
        .collect();
    let spread = normal(cfg.cluster_spread);
    let mut highdim = Vec::with_capacity(cfg.n_classes * cfg.points_per_class);
    let mut labels = Vec::with_capacity(highdim.capacity());
    for (class, center) in centers.iter().enumerate() {
        for _ in 0..cfg.points_per_class {
            highdim.push(center.iter().map(|c| c + spread.sample(&mut rng)).collect::<Vec<f64>>());
            labels.push(class as u32);
        }
    }

    let prefix = cfg.prefix();
    cfg.noise_levels
        .iter()
        .enumerate()
        .map(|(level, &sigma)| {
            // Each level draws from its own stream so adding levels leaves the others untouched.
            let mut jitter_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (level as u64 + 1).wrapping_mul(0xA24B_AED4_963E_E407));
            let jitter = normal(sigma);
            let points = highdim
                .iter()
                .map(|row| {
                    if sigma == 0.0 {
                        [row[0], row[1]]
                    } else {
                        [row[0] + jitter.sample(&mut jitter_rng), row[1] + jitter.sample(&mut jitter_rng)]
                    }
                })
                .collect();
            Visualization::new(format!("{prefix}-n{level}"), points, labels.clone(), Some(highdim.clone()))
        })
        .collect()
}

/// A synthetic user preferring visualizations with a higher weighted sum of oriented measures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleUser {
    pub name: String,
    pub weights: BTreeMap<MeasureId, f64>,
    /// Decision noise; 0 is a deterministic user.
    #[serde(default)]
    pub temperature: f64,
    pub seed: u64,
}

impl OracleUser {
    pub fn validate(&self) -> Result<()> {
        if !self.weights.values().all(|w| w.is_finite()) || self.weights.values().all(|&w| w == 0.0) {
            return Err(Error::InvalidConfig(format!(
                "user {:?} needs finite weights, at least one nonzero",
                self.name
            )));
        }
        if !(self.temperature >= 0.0) {
            return Err(Error::InvalidConfig(format!("user {:?} has a negative temperature", self.name)));
        }
        Ok(())
    }
}

impl Scorer for OracleUser {
    fn score(&self, fv: &FeatureVector) -> Result<f64> {
        self.weights
            .iter()
            .filter(|(_, &w)| w != 0.0)
            .map(|(&m, &w)| fv.oriented(m).map(|v| w * v).ok_or(Error::MissingFeature(m)))
            .sum()
    }
}

/// Users whose weights scatter around a shared profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OraclePopulation {
    pub n_users: usize,
    pub base_weights: BTreeMap<MeasureId, f64>,
    /// Per-user Gaussian perturbation of each weight, as a standard deviation per measure.
    #[serde(default)]
    pub weight_noise: BTreeMap<MeasureId, f64>,
    #[serde(default)]
    pub temperature: f64,
    pub seed: u64,
}

impl OraclePopulation {
    pub fn users(&self) -> Result<Vec<OracleUser>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.n_users)
            .map(|i| {
                let weights = MeasureId::ALL
                    .iter()
                    .filter_map(|m| {
                        let base = self.base_weights.get(m).copied();
                        let noise = self.weight_noise.get(m).copied();
                        match (base, noise) {
                            (None, None) => None,
                            (b, n) => {
                                let jitter = n.map_or(0.0, |s| normal(s.abs()).sample(&mut rng));
                                Some((*m, b.unwrap_or(0.0) + jitter))
                            }
                        }
                    })
                    .collect();
                let user = OracleUser {
                    name: format!("user{i:03}"),
                    weights,
                    temperature: self.temperature,
                    seed: rng.random(),
                };
                user.validate()?;
                Ok(user)
            })
            .collect()
    }
}

fn base_time() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap()
}

/// Decodes the `index`-th unordered pair of `n` items in row-major order.
fn pair_from_index(mut index: usize, n: usize) -> (usize, usize) {
    let mut i = 0;
    loop {
        let row = n - i - 1;
        if index < row {
            return (i, i + 1 + index);
        }
        index -= row;
        i += 1;
    }
}

/// Each user answers up to `pairs_per_user` distinct, uniformly drawn pairs.
/// With probability `none_probability` an answer is "no preference".
pub fn oracle_preferences(
    visualizations: &BTreeMap<String, Visualization>,
    features: &BTreeMap<String, FeatureVector>,
    users: &[OracleUser],
    pairs_per_user: usize,
    none_probability: f64,
) -> Result<PreferenceDataset> {
    if visualizations.len() < 2 {
        return Err(Error::InvalidConfig("need at least 2 visualizations".into()));
    }
    if !(0.0..=1.0).contains(&none_probability) {
        return Err(Error::InvalidConfig("none_probability must be in [0, 1]".into()));
    }
    let ids: Vec<&String> = visualizations.keys().collect();
    let n = ids.len();
    let total_pairs = n * (n - 1) / 2;
    let mut records = Vec::new();
    for (u, user) in users.iter().enumerate() {
        user.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(user.seed);
        let picked = index::sample(&mut rng, total_pairs, pairs_per_user.min(total_pairs));
        for (k, pair) in picked.into_iter().enumerate() {
            let (i, j) = pair_from_index(pair, n);
            let (left, right) = if rng.random_bool(0.5) { (ids[i], ids[j]) } else { (ids[j], ids[i]) };
            let abstain = rng.random_bool(none_probability);
            let lookup = |id: &String| features.get(id).ok_or_else(|| Error::UncoveredVisualization(id.clone()));
            let gap = user.score(lookup(left)?)? - user.score(lookup(right)?)?;
            let prefers_left = if user.temperature == 0.0 {
                if gap == 0.0 {
                    rng.random_bool(0.5)
                } else {
                    gap > 0.0
                }
            } else {
                rng.random_bool(logistic(gap / user.temperature))
            };
            let choice = match (abstain, prefers_left) {
                (true, _) => Choice::None,
                (false, true) => Choice::Left,
                (false, false) => Choice::Right,
            };
            records.push(PreferenceRecord {
                user: user.name.clone(),
                left: left.clone(),
                right: right.clone(),
                choice,
                timestamp: base_time() + Duration::seconds((u * 100_000 + k) as i64),
            });
        }
    }
    PreferenceDataset::new(records, visualizations.clone())
}

/// Everything the `synth` command needs: datasets plus the users answering about them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthPlan {
    pub datasets: Vec<SynthConfig>,
    #[serde(default)]
    pub users: Vec<OracleUser>,
    #[serde(default)]
    pub population: Option<OraclePopulation>,
    pub pairs_per_user: usize,
    #[serde(default)]
    pub none_probability: f64,
}

impl SynthPlan {
    pub fn visualizations(&self) -> Result<BTreeMap<String, Visualization>> {
        let mut out = BTreeMap::new();
        for cfg in &self.datasets {
            for vis in generate_dataset(cfg)? {
                if out.contains_key(vis.id()) {
                    return Err(Error::InvalidConfig(format!("duplicate visualization id {:?}", vis.id())));
                }
                out.insert(vis.id().to_string(), vis);
            }
        }
        Ok(out)
    }

    pub fn all_users(&self) -> Result<Vec<OracleUser>> {
        let mut users = self.users.clone();
        if let Some(pop) = &self.population {
            users.extend(pop.users()?);
        }
        Ok(users)
    }

    pub fn run(&self) -> Result<PreferenceDataset> {
        let visualizations = self.visualizations()?;
        let features = crate::measures::compute_features(visualizations.values())?;
        oracle_preferences(
            &visualizations,
            &features,
            &self.all_users()?,
            self.pairs_per_user,
            self.none_probability,
        )
    }
}
