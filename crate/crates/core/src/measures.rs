//! Scatterplot quality measures and the per-visualization feature vector.
//!
//! Class-separability measures (DSC, hypothesis margin, ABW) look at the 2D
//! projection only. Neighborhood preservation (Q_NX and its area, NH_AUC)
//! compares projection neighbors against neighbors in the high-dimensional
//! source.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{PreferenceDataset, Visualization};
use crate::error::{Error, Result};
use crate::geometry::{class_centroids, euclidean, knn, pairwise_distances};
use crate::scoring::{agreement, Scorer, TiePolicy};

/// The five meta-features, in report column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasureId {
    NClasses,
    Abw,
    Hm,
    Dsc,
    NhAuc,
}

impl MeasureId {
    pub const ALL: [MeasureId; 5] = [
        MeasureId::NClasses,
        MeasureId::Abw,
        MeasureId::Hm,
        MeasureId::Dsc,
        MeasureId::NhAuc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MeasureId::NClasses => "n_classes",
            MeasureId::Abw => "abw",
            MeasureId::Hm => "hm",
            MeasureId::Dsc => "dsc",
            MeasureId::NhAuc => "nh_auc",
        }
    }

    /// Sign that turns the raw value into "higher means predicted more preferred".
    pub fn polarity(self) -> f64 {
        match self {
            MeasureId::NhAuc | MeasureId::Abw | MeasureId::Hm => 1.0,
            MeasureId::Dsc | MeasureId::NClasses => -1.0,
        }
    }
}

impl fmt::Display for MeasureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MeasureId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MeasureId::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown measure {s:?}")))
    }
}

/// Denominator of the distance-consistency fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DscDenominator {
    /// Divide by the number of points; the result lies in [0, 1].
    #[default]
    PerPoint,
    /// Divide by the number of classes.
    PerClass,
}

/// Number of points strictly closer to another class's centroid than to their own.
pub fn dsc_misassigned(vis: &Visualization) -> usize {
    let centroids = class_centroids(vis.points(), vis.labels());
    vis.points()
        .iter()
        .zip(vis.labels())
        .filter(|(p, &own)| {
            let own_dist = euclidean(&centroids.get(own).expect("centroid of own class"), &p[..]);
            centroids
                .iter()
                .any(|(c, centroid)| c != own && euclidean(&centroid, &p[..]) < own_dist)
        })
        .count()
}

/// Distance consistency. Lower is better separated.
pub fn dsc(vis: &Visualization, denominator: DscDenominator) -> f64 {
    let count = dsc_misassigned(vis) as f64;
    match denominator {
        DscDenominator::PerPoint => count / vis.n_points() as f64,
        DscDenominator::PerClass => count / vis.n_classes() as f64,
    }
}

/// Mean over points of half the gap between the nearest other-class point
/// (near miss) and the nearest same-class point (near hit).
pub fn hypothesis_margin(vis: &Visualization) -> Result<f64> {
    let labels = vis.labels();
    let mut sizes: BTreeMap<u32, usize> = BTreeMap::new();
    for &l in labels {
        *sizes.entry(l).or_default() += 1;
    }
    if let Some((&c, _)) = sizes.iter().find(|(_, &n)| n < 2) {
        return Err(Error::ClassTooSmall(c));
    }
    let dm = pairwise_distances(vis.points())?;
    let n = dm.n();
    let total: f64 = (0..n)
        .map(|i| {
            let mut hit = f64::INFINITY;
            let mut miss = f64::INFINITY;
            for (j, &d) in dm.row(i).iter().enumerate() {
                if j == i {
                    continue;
                }
                if labels[j] == labels[i] {
                    hit = hit.min(d);
                } else {
                    miss = miss.min(d);
                }
            }
            (miss - hit) / 2.0
        })
        .sum();
    Ok(total / n as f64)
}

/// Mean between-class pairwise distance over mean within-class pairwise distance.
pub fn abw(vis: &Visualization) -> Result<f64> {
    let pts = vis.points();
    let labels = vis.labels();
    let (mut between, mut n_between) = (0.0, 0usize);
    let (mut within, mut n_within) = (0.0, 0usize);
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            let d = euclidean(&pts[i], &pts[j]);
            if labels[i] == labels[j] {
                within += d;
                n_within += 1;
            } else {
                between += d;
                n_between += 1;
            }
        }
    }
    if n_within == 0 || within == 0.0 {
        return Err(Error::DegenerateWithin);
    }
    Ok((between / n_between as f64) / (within / n_within as f64))
}

/// Neighborhood preservation for every neighborhood size K = 1..N−1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QnxCurve {
    n: usize,
    values: Vec<f64>,
}

impl QnxCurve {
    /// Wraps precomputed values for K = 1..N−1.
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::TooFewPoints { needed: 2, found: 1 });
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invariant("qnx", format!("value {v} outside [0, 1]")));
        }
        Ok(QnxCurve {
            n: values.len() + 1,
            values,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Q_NX(k) for 1 ≤ k ≤ N−1.
    pub fn at(&self, k: usize) -> f64 {
        self.values[k - 1]
    }
}

pub fn qnx_curve(vis: &Visualization) -> Result<QnxCurve> {
    let highdim = vis
        .highdim()
        .ok_or_else(|| Error::MissingHighDim(vis.id().to_string()))?;
    let n = vis.n_points();
    if n < 3 {
        return Err(Error::TooFewPoints { needed: 3, found: n });
    }
    let high = knn(&pairwise_distances(highdim)?);
    let low = knn(&pairwise_distances(vis.points())?);

    // j is in both K-neighborhoods of i exactly when both of its ranks are ≤ K,
    // so a histogram of max(rank_high, rank_low) accumulates into Σ|v_i^K ∩ n_i^K|.
    let mut hist = vec![0u64; n];
    let mut low_rank = vec![0usize; n];
    for i in 0..n {
        for (r, &j) in low.row(i).iter().enumerate() {
            low_rank[j] = r + 1;
        }
        for (r, &j) in high.row(i).iter().enumerate() {
            hist[(r + 1).max(low_rank[j])] += 1;
        }
    }
    let mut values = Vec::with_capacity(n - 1);
    let mut shared = 0u64;
    for (k, &h) in hist.iter().enumerate().skip(1) {
        shared += h;
        values.push(shared as f64 / (k * n) as f64);
    }
    Ok(QnxCurve { n, values })
}

/// Weighting of neighborhood sizes in the area under the Q_NX curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AucWeighting {
    /// Arithmetic mean over K.
    #[default]
    Uniform,
    /// Weights 1/K, normalized; favors small neighborhoods.
    LogK,
}

pub fn nh_auc(curve: &QnxCurve, weighting: AucWeighting) -> f64 {
    match weighting {
        AucWeighting::Uniform => curve.values.iter().sum::<f64>() / curve.values.len() as f64,
        AucWeighting::LogK => {
            let (num, den) = curve
                .values
                .iter()
                .enumerate()
                .fold((0.0, 0.0), |(num, den), (i, &q)| {
                    let w = 1.0 / (i + 1) as f64;
                    (num + q * w, den + w)
                });
            num / den
        }
    }
}

/// Raw and oriented measure values of one visualization.
///
/// `nh_auc` is absent from both maps when the visualization has no
/// high-dimensional source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub id: String,
    pub raw: BTreeMap<MeasureId, f64>,
    pub oriented: BTreeMap<MeasureId, f64>,
}

impl FeatureVector {
    pub fn from_raw(id: impl Into<String>, raw: BTreeMap<MeasureId, f64>) -> Self {
        let oriented = raw.iter().map(|(&m, &v)| (m, m.polarity() * v)).collect();
        FeatureVector {
            id: id.into(),
            raw,
            oriented,
        }
    }

    pub fn raw(&self, m: MeasureId) -> Option<f64> {
        self.raw.get(&m).copied()
    }

    pub fn oriented(&self, m: MeasureId) -> Option<f64> {
        self.oriented.get(&m).copied()
    }

    pub fn has(&self, m: MeasureId) -> bool {
        self.raw.contains_key(&m)
    }
}

pub fn feature_vector(vis: &Visualization) -> Result<FeatureVector> {
    let mut raw = BTreeMap::new();
    raw.insert(MeasureId::NClasses, vis.n_classes() as f64);
    raw.insert(MeasureId::Abw, abw(vis)?);
    raw.insert(MeasureId::Hm, hypothesis_margin(vis)?);
    raw.insert(MeasureId::Dsc, dsc(vis, DscDenominator::PerPoint));
    if vis.highdim().is_some() {
        raw.insert(MeasureId::NhAuc, nh_auc(&qnx_curve(vis)?, AucWeighting::Uniform));
    }
    Ok(FeatureVector::from_raw(vis.id(), raw))
}

/// Feature vectors for a whole collection, computed in parallel.
pub fn compute_features<'a, I>(visualizations: I) -> Result<BTreeMap<String, FeatureVector>>
where
    I: IntoIterator<Item = &'a Visualization>,
{
    let all: Vec<&Visualization> = visualizations.into_iter().collect();
    let computed: Vec<FeatureVector> = all
        .par_iter()
        .map(|v| feature_vector(v))
        .collect::<Result<_>>()?;
    Ok(computed.into_iter().map(|fv| (fv.id.clone(), fv)).collect())
}

impl Scorer for MeasureId {
    fn score(&self, fv: &FeatureVector) -> Result<f64> {
        fv.oriented(*self).ok_or(Error::MissingFeature(*self))
    }
}

/// Agreement of a single oriented measure with the dataset's trainable preferences.
pub fn single_measure_agreement(
    m: MeasureId,
    prefs: &PreferenceDataset,
    features: &BTreeMap<String, FeatureVector>,
    tie_policy: TiePolicy,
) -> Result<f64> {
    agreement(&m, prefs.records(), features, tie_policy)
}

/// `%.{sig}g`-style formatting, without exponent notation for ordinary magnitudes.
pub fn format_significant(x: f64, sig: usize) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    let rounded: f64 = format!("{:.*e}", sig.saturating_sub(1), x)
        .parse()
        .expect("formatted float parses");
    rounded.to_string()
}

/// Writes `id,n_classes,abw,hm,dsc,nh_auc` rows of raw values; absent measures are empty.
pub fn write_measures_csv<'a, W, I>(out: W, features: I) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = &'a FeatureVector>,
{
    let mut writer = csv::Writer::from_writer(out);
    let mut header = vec!["id".to_string()];
    header.extend(MeasureId::ALL.iter().map(|m| m.name().to_string()));
    writer.write_record(&header)?;
    for fv in features {
        let mut row = vec![fv.id.clone()];
        row.extend(
            MeasureId::ALL
                .iter()
                .map(|&m| fv.raw(m).map(|v| format_significant(v, 9)).unwrap_or_default()),
        );
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}
