//! Cox partial likelihood restricted to two-item risk sets.
//!
//! For a preference `a ≻ b` with standardized features `z_a`, `z_b` the
//! likelihood term is `exp(β·z_a) / (exp(β·z_a) + exp(β·z_b))`, i.e. a logistic
//! function of `β·(z_a − z_b)` with no intercept. The fit minimizes
//!
//! ```text
//! Σ log(1 + exp(−β·d)) + λ‖β‖₁
//! ```
//!
//! by proximal gradient descent with a backtracking line search, starting from
//! `β = 0`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::{PreferenceDataset, PreferenceRecord};
use crate::error::{Error, Result};
use crate::measures::{FeatureVector, MeasureId};
use crate::scoring::{Scorer, TieResolver};

/// Standardized features of the preferred visualization minus those of the other one.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffSample(Vec<f64>);

impl DiffSample {
    pub fn new(d: Vec<f64>) -> Result<Self> {
        if !d.iter().all(|v| v.is_finite()) {
            return Err(Error::invariant("diff", "non-finite entry"));
        }
        Ok(DiffSample(d))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_dims(beta: &[f64], diffs: &[DiffSample], lambda: f64) -> Result<()> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidConfig(format!("lambda must be ≥ 0, got {lambda}")));
    }
    if let Some(d) = diffs.iter().find(|d| d.dim() != beta.len()) {
        return Err(Error::DimensionMismatch {
            expected: beta.len(),
            found: d.dim(),
        });
    }
    Ok(())
}

fn smooth_nll(beta: &[f64], diffs: &[DiffSample]) -> f64 {
    diffs.iter().map(|d| softplus(-dot(beta, &d.0))).sum()
}

fn smooth_gradient(beta: &[f64], diffs: &[DiffSample]) -> Vec<f64> {
    let mut g = vec![0.0; beta.len()];
    for d in diffs {
        let w = logistic(-dot(beta, &d.0));
        for (gk, dk) in g.iter_mut().zip(&d.0) {
            *gk -= w * dk;
        }
    }
    g
}

fn l1(beta: &[f64]) -> f64 {
    beta.iter().map(|b| b.abs()).sum()
}

/// Penalized negative log-likelihood.
pub fn negative_log_likelihood(beta: &[f64], diffs: &[DiffSample], lambda: f64) -> Result<f64> {
    check_dims(beta, diffs, lambda)?;
    Ok(smooth_nll(beta, diffs) + lambda * l1(beta))
}

/// Gradient of the smooth part; the L1 term is left to the proximal step.
pub fn nll_gradient(beta: &[f64], diffs: &[DiffSample], lambda: f64) -> Result<Vec<f64>> {
    check_dims(beta, diffs, lambda)?;
    Ok(smooth_gradient(beta, diffs))
}

/// Smallest λ for which `β = 0` is optimal: `‖∇NLL(0)‖∞`.
pub fn critical_lambda(diffs: &[DiffSample]) -> f64 {
    let Some(first) = diffs.first() else {
        return 0.0;
    };
    smooth_gradient(&vec![0.0; first.dim()], diffs)
        .into_iter()
        .fold(0.0, |m, g| m.max(g.abs()))
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    /// Stop once the penalized objective improves by less than this...
    pub tol: f64,
    /// ...and the proximal gradient residual ‖β - prox(β - ∇f)‖∞ per preference is below this.
    pub kkt_tol: f64,
    pub max_iter: usize,
    /// Bound on ‖β‖∞; separable data drives the unpenalized optimum to infinity.
    pub beta_cap: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            tol: 1e-8,
            kkt_tol: 1e-7,
            max_iter: 10_000,
            beta_cap: 1e3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// Unpenalized negative log-likelihood at the returned β.
    pub nll: f64,
    /// Penalized objective at the returned β.
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Set when ‖β‖∞ hit the cap, which only happens on (near-)separable data.
    pub separable: bool,
    #[serde(default)]
    pub dropped_measures: Vec<MeasureId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: f64,
    pub std: f64,
}

/// Fitted weights over standardized oriented features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "CoxModelFile", try_from = "CoxModelFile")]
pub struct CoxModel {
    active_measures: Vec<MeasureId>,
    beta: Vec<f64>,
    standardization: Vec<Standardization>,
    lambda: f64,
    diagnostics: FitDiagnostics,
}

#[derive(Serialize, Deserialize)]
struct CoxModelFile {
    active_measures: Vec<MeasureId>,
    beta: Vec<f64>,
    standardization: BTreeMap<MeasureId, Standardization>,
    lambda: f64,
    diagnostics: FitDiagnostics,
}

impl From<CoxModel> for CoxModelFile {
    fn from(m: CoxModel) -> Self {
        CoxModelFile {
            standardization: m.active_measures.iter().copied().zip(m.standardization).collect(),
            active_measures: m.active_measures,
            beta: m.beta,
            lambda: m.lambda,
            diagnostics: m.diagnostics,
        }
    }
}

impl TryFrom<CoxModelFile> for CoxModel {
    type Error = Error;

    fn try_from(f: CoxModelFile) -> Result<Self> {
        if f.beta.len() != f.active_measures.len() {
            return Err(Error::DimensionMismatch {
                expected: f.active_measures.len(),
                found: f.beta.len(),
            });
        }
        let standardization = f
            .active_measures
            .iter()
            .map(|m| f.standardization.get(m).copied().ok_or(Error::MissingFeature(*m)))
            .collect::<Result<Vec<_>>>()?;
        if standardization.iter().any(|s| !(s.std > 0.0)) {
            return Err(Error::invariant("standardization", "std must be > 0"));
        }
        Ok(CoxModel {
            active_measures: f.active_measures,
            beta: f.beta,
            standardization,
            lambda: f.lambda,
            diagnostics: f.diagnostics,
        })
    }
}

impl CoxModel {
    pub fn active_measures(&self) -> &[MeasureId] {
        &self.active_measures
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn diagnostics(&self) -> &FitDiagnostics {
        &self.diagnostics
    }

    pub fn standardization(&self) -> impl Iterator<Item = (MeasureId, Standardization)> + '_ {
        self.active_measures.iter().copied().zip(self.standardization.iter().copied())
    }

    /// Measures with a nonzero weight.
    pub fn nonzero_measures(&self) -> Vec<MeasureId> {
        self.active_measures
            .iter()
            .zip(&self.beta)
            .filter(|(_, b)| **b != 0.0)
            .map(|(m, _)| *m)
            .collect()
    }

    /// Weights expressed on the oriented (unstandardized) features, `β_k / σ_k`.
    pub fn raw_weights(&self) -> BTreeMap<MeasureId, f64> {
        self.active_measures
            .iter()
            .zip(&self.beta)
            .zip(&self.standardization)
            .map(|((m, b), s)| (*m, b / s.std))
            .collect()
    }

    /// Standardized oriented features of `fv`, in active-measure order.
    pub fn standardize(&self, fv: &FeatureVector) -> Result<Vec<f64>> {
        standardize_with(&self.active_measures, &self.standardization, fv)
    }
}

fn standardize_with(
    measures: &[MeasureId],
    standardization: &[Standardization],
    fv: &FeatureVector,
) -> Result<Vec<f64>> {
    measures
        .iter()
        .zip(standardization)
        .map(|(&m, s)| {
            fv.oriented(m)
                .map(|v| (v - s.mean) / s.std)
                .ok_or(Error::MissingFeature(m))
        })
        .collect()
}

/// Understandability score `β·z`.
pub fn score(model: &CoxModel, fv: &FeatureVector) -> Result<f64> {
    Ok(dot(&model.beta, &model.standardize(fv)?))
}

impl Scorer for CoxModel {
    fn score(&self, fv: &FeatureVector) -> Result<f64> {
        score(self, fv)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Prediction {
    First,
    Second,
    /// Equal scores under half-credit bookkeeping.
    Tie,
}

/// Which of two visualizations the model prefers. A random resolver settles
/// exact ties by a coin flip; a half-credit resolver reports them as `Tie`.
pub fn predict_preference(
    model: &CoxModel,
    first: &FeatureVector,
    second: &FeatureVector,
    ties: &mut TieResolver,
) -> Result<Prediction> {
    let a = score(model, first)?;
    let b = score(model, second)?;
    Ok(if a > b {
        Prediction::First
    } else if a < b {
        Prediction::Second
    } else {
        match ties {
            TieResolver::HalfCredit => Prediction::Tie,
            TieResolver::Random(_) => {
                if ties.credit() == 1.0 {
                    Prediction::First
                } else {
                    Prediction::Second
                }
            }
        }
    })
}

/// Diff samples plus the standardization they were built with.
#[derive(Debug, Clone)]
pub struct PreparedProblem {
    measures: Vec<MeasureId>,
    standardization: Vec<Standardization>,
    dropped: Vec<MeasureId>,
    diffs: Vec<DiffSample>,
}

impl PreparedProblem {
    /// Z-scores the candidate measures over the distinct visualizations of the
    /// trainable `records`, drops constant ones and forms one diff per record.
    pub fn new<'a, I>(
        records: I,
        features: &BTreeMap<String, FeatureVector>,
        candidates: &[MeasureId],
    ) -> Result<Self>
    where
        I: IntoIterator<Item = &'a PreferenceRecord>,
    {
        let pairs: Vec<(&str, &str)> = records.into_iter().filter_map(|r| r.winner_loser()).collect();
        if pairs.is_empty() {
            return Err(Error::NoTrainablePreferences);
        }
        let mut seen = BTreeSet::new();
        for &(w, l) in &pairs {
            seen.insert(w);
            seen.insert(l);
        }
        let fvs = seen
            .iter()
            .map(|&id| features.get(id).ok_or_else(|| Error::UncoveredVisualization(id.to_string())))
            .collect::<Result<Vec<_>>>()?;

        let mut measures = Vec::new();
        let mut standardization = Vec::new();
        let mut dropped = Vec::new();
        for &m in candidates {
            let values = fvs
                .iter()
                .map(|fv| fv.oriented(m).ok_or(Error::MissingFeature(m)))
                .collect::<Result<Vec<f64>>>()?;
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
            if std <= 1e-12 * mean.abs().max(1.0) {
                log::warn!("dropping constant feature {m} (value {mean})");
                dropped.push(m);
            } else {
                measures.push(m);
                standardization.push(Standardization { mean, std });
            }
        }
        if measures.is_empty() {
            return Err(Error::NoActiveFeatures);
        }

        let diffs = pairs
            .iter()
            .map(|&(w, l)| {
                let zw = standardize_with(&measures, &standardization, &features[w])?;
                let zl = standardize_with(&measures, &standardization, &features[l])?;
                DiffSample::new(zw.iter().zip(&zl).map(|(a, b)| a - b).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PreparedProblem {
            measures,
            standardization,
            dropped,
            diffs,
        })
    }

    pub fn diffs(&self) -> &[DiffSample] {
        &self.diffs
    }

    pub fn measures(&self) -> &[MeasureId] {
        &self.measures
    }

    pub fn critical_lambda(&self) -> f64 {
        critical_lambda(&self.diffs)
    }

    /// Minimizes the penalized objective from `init` (zeros when `None`).
    pub fn solve(&self, lambda: f64, init: Option<&[f64]>, config: &FitConfig) -> Result<CoxModel> {
        Ok(self.solve_traced(lambda, init, config)?.0)
    }

    /// As [`solve`](Self::solve), also returning the objective after every accepted step.
    pub fn solve_traced(
        &self,
        lambda: f64,
        init: Option<&[f64]>,
        config: &FitConfig,
    ) -> Result<(CoxModel, Vec<f64>)> {
        let dim = self.measures.len();
        let start = match init {
            Some(b) if b.len() != dim => {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: b.len(),
                })
            }
            Some(b) => b.to_vec(),
            None => vec![0.0; dim],
        };
        check_dims(&start, &self.diffs, lambda)?;
        let (beta, diagnostics, trace) = proximal_gradient(&self.diffs, lambda, start, config, &self.dropped);
        let model = CoxModel {
            active_measures: self.measures.clone(),
            beta,
            standardization: self.standardization.clone(),
            lambda,
            diagnostics,
        };
        Ok((model, trace))
    }
}

/// Proximal step from `point` with backtracking on the quadratic upper bound. Shrinks `step` in place.
fn prox_step(diffs: &[DiffSample], lambda: f64, point: &[f64], step: &mut f64) -> (Vec<f64>, f64) {
    let f = smooth_nll(point, diffs);
    let g = smooth_gradient(point, diffs);
    loop {
        let candidate: Vec<f64> = point
            .iter()
            .zip(&g)
            .map(|(b, gk)| soft_threshold(b - *step * gk, *step * lambda))
            .collect();
        let f_candidate = smooth_nll(&candidate, diffs);
        let delta: Vec<f64> = candidate.iter().zip(point).map(|(c, b)| c - b).collect();
        let bound = f + dot(&g, &delta) + dot(&delta, &delta) / (2.0 * *step);
        if f_candidate <= bound + 1e-12 * f.abs().max(1.0) || *step < 1e-30 {
            return (candidate, f_candidate);
        }
        *step *= 0.5;
    }
}

/// Monotone accelerated proximal gradient (FISTA with a descent safeguard and momentum restart).
fn proximal_gradient(
    diffs: &[DiffSample],
    lambda: f64,
    mut beta: Vec<f64>,
    config: &FitConfig,
    dropped: &[MeasureId],
) -> (Vec<f64>, FitDiagnostics, Vec<f64>) {
    let mut f = smooth_nll(&beta, diffs);
    let mut objective = f + lambda * l1(&beta);
    let mut trace = vec![objective];
    let mut step = 1.0;
    let mut converged = false;
    let mut separable = false;
    let mut iterations = 0;
    let mut momentum = 1.0f64;
    let mut y = beta.clone();
    let residual_bound = config.kkt_tol * diffs.len() as f64;

    while iterations < config.max_iter {
        iterations += 1;
        let restarted = y == beta;
        let (z, f_z) = prox_step(diffs, lambda, &y, &mut step);
        let objective_z = f_z + lambda * l1(&z);
        if objective_z > objective {
            if restarted {
                // No descent even from the iterate itself; it is as good as it gets.
                converged = true;
                break;
            }
            momentum = 1.0;
            y = beta.clone();
            continue;
        }
        let improvement = objective - objective_z;
        let next = (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt()) / 2.0;
        y = z.iter().zip(&beta).map(|(zk, bk)| zk + (momentum - 1.0) / next * (zk - bk)).collect();
        momentum = next;
        beta = z;
        f = f_z;
        objective = objective_z;
        trace.push(objective);

        let norm = beta.iter().fold(0.0f64, |m, b| m.max(b.abs()));
        if norm >= config.beta_cap {
            let scale = config.beta_cap / norm;
            beta.iter_mut().for_each(|b| *b *= scale);
            f = smooth_nll(&beta, diffs);
            objective = f + lambda * l1(&beta);
            separable = true;
            break;
        }
        if improvement < config.tol {
            let mut probe = step;
            let (p, _) = prox_step(diffs, lambda, &beta, &mut probe);
            let residual = p.iter().zip(&beta).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / probe;
            if residual <= residual_bound {
                converged = true;
                break;
            }
        }
        step = (step * 2.0).min(1.0);
    }

    let diagnostics = FitDiagnostics {
        nll: f,
        objective,
        iterations,
        converged,
        separable,
        dropped_measures: dropped.to_vec(),
    };
    (beta, diagnostics, trace)
}

/// Fits the model on the trainable preferences of `prefs`.
pub fn fit(
    prefs: &PreferenceDataset,
    features: &BTreeMap<String, FeatureVector>,
    lambda: f64,
    config: &FitConfig,
) -> Result<CoxModel> {
    fit_records(prefs.records(), features, &MeasureId::ALL, lambda, config)
}

/// Fits on an arbitrary record set using the given candidate measures.
pub fn fit_records<'a, I>(
    records: I,
    features: &BTreeMap<String, FeatureVector>,
    candidates: &[MeasureId],
    lambda: f64,
    config: &FitConfig,
) -> Result<CoxModel>
where
    I: IntoIterator<Item = &'a PreferenceRecord>,
{
    PreparedProblem::new(records, features, candidates)?.solve(lambda, None, config)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathPoint {
    pub lambda: f64,
    pub model: CoxModel,
    pub active: Vec<MeasureId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularizationPath {
    pub critical_lambda: f64,
    pub points: Vec<PathPoint>,
}

impl RegularizationPath {
    /// Measures in the order they first become active along decreasing λ.
    /// Measures entering at the same λ are ordered by decreasing |β|.
    pub fn entry_order(&self) -> Vec<MeasureId> {
        let mut order = Vec::new();
        for point in &self.points {
            let mut entering: Vec<(MeasureId, f64)> = point
                .model
                .active_measures()
                .iter()
                .zip(point.model.beta())
                .filter(|(m, b)| **b != 0.0 && !order.contains(*m))
                .map(|(m, b)| (*m, b.abs()))
                .collect();
            entering.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            order.extend(entering.into_iter().map(|(m, _)| m));
        }
        order
    }
}

/// One warm-started fit per λ, in the given strictly descending order.
pub fn regularization_path(
    prefs: &PreferenceDataset,
    features: &BTreeMap<String, FeatureVector>,
    lambdas: &[f64],
    config: &FitConfig,
) -> Result<RegularizationPath> {
    let problem = PreparedProblem::new(prefs.records(), features, &MeasureId::ALL)?;
    path_for_problem(&problem, lambdas, config)
}

pub fn path_for_problem(
    problem: &PreparedProblem,
    lambdas: &[f64],
    config: &FitConfig,
) -> Result<RegularizationPath> {
    if lambdas.iter().any(|l| !(*l >= 0.0)) {
        return Err(Error::InvalidConfig("path lambdas must be ≥ 0".into()));
    }
    if lambdas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidConfig("path lambdas must be strictly descending".into()));
    }
    let mut points: Vec<PathPoint> = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let init = points.last().map(|p| p.model.beta().to_vec());
        let model = problem.solve(lambda, init.as_deref(), config)?;
        let active = model.nonzero_measures();
        points.push(PathPoint { lambda, model, active });
    }
    Ok(RegularizationPath {
        critical_lambda: problem.critical_lambda(),
        points,
    })
}

/// `count` λ values spaced geometrically from `λ_max` down to `λ_max · min_ratio`.
pub fn geometric_lambdas(lambda_max: f64, min_ratio: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lambda_max];
    }
    (0..count)
        .map(|i| lambda_max * min_ratio.powf(i as f64 / (count - 1) as f64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Choice;
    use chrono::Utc;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn diffs(rows: &[&[f64]]) -> Vec<DiffSample> {
        rows.iter().map(|r| DiffSample::new(r.to_vec()).unwrap()).collect()
    }

    fn record(winner: &str, loser: &str) -> PreferenceRecord {
        PreferenceRecord {
            user: "u".into(),
            left: winner.into(),
            right: loser.into(),
            choice: Choice::Left,
            timestamp: Utc::now(),
        }
    }

    fn features_from(rows: &[(&str, &[(MeasureId, f64)])]) -> BTreeMap<String, FeatureVector> {
        rows.iter()
            .map(|(id, vals)| {
                // Store raw values so that oriented == given values.
                let raw = vals.iter().map(|&(m, v)| (m, m.polarity() * v)).collect();
                (id.to_string(), FeatureVector::from_raw(*id, raw))
            })
            .collect()
    }

    #[test]
    fn nll_examples() {
        let d = diffs(&[&[1.0, 0.0], &[0.3, -2.0], &[5.0, 5.0]]);
        let nll = negative_log_likelihood(&[0.0, 0.0], &d, 0.0).unwrap();
        assert!((nll - 3.0 * 2f64.ln()).abs() < 1e-14);

        let one = diffs(&[&[1.0, 0.0]]);
        let nll = negative_log_likelihood(&[3f64.ln(), 0.0], &one, 0.0).unwrap();
        assert!((nll - (4.0f64 / 3.0).ln()).abs() < 1e-14);

        let big = diffs(&[&[1.0], &[2.0]]);
        let nll = negative_log_likelihood(&[1000.0], &big, 0.0).unwrap();
        assert!(nll.is_finite() && nll < 1e-300);
        let nll = negative_log_likelihood(&[-1000.0], &big, 0.0).unwrap();
        assert!((nll - 3000.0).abs() < 1e-9);

        let pen = negative_log_likelihood(&[1.0, -2.0], &one, 0.5).unwrap();
        let unpen = negative_log_likelihood(&[1.0, -2.0], &one, 0.0).unwrap();
        assert!((pen - unpen - 1.5).abs() < 1e-14);

        assert!(matches!(
            negative_log_likelihood(&[0.0], &one, 0.0),
            Err(Error::DimensionMismatch { expected: 1, found: 2 })
        ));
        assert!(negative_log_likelihood(&[0.0, 0.0], &one, -1.0).is_err());
    }

    #[test]
    fn gradient_examples() {
        let d = diffs(&[&[1.0, 2.0], &[-3.0, 0.5]]);
        let g = nll_gradient(&[0.0, 0.0], &d, 0.0).unwrap();
        assert_eq!(g, vec![-0.5 * (1.0 - 3.0), -0.5 * 2.5]);

        let sym = diffs(&[&[1.0, -2.0], &[-1.0, 2.0]]);
        assert_eq!(nll_gradient(&[0.0, 0.0], &sym, 0.0).unwrap(), vec![0.0, 0.0]);
        let beta = [0.4, 0.1];
        let m = beta[0] * 1.0 + beta[1] * -2.0;
        let g = nll_gradient(&beta, &sym, 0.0).unwrap();
        let scale = logistic(-m) - logistic(m);
        assert!((g[0] - -(1.0 * scale)).abs() < 1e-15);
        assert!((g[1] - -(-2.0 * scale)).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn gradient_matches_finite_differences(
            seed in 0u64..10_000, dim in 1usize..6, n in 1usize..50,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let beta: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            let ds: Vec<DiffSample> = (0..n)
                .map(|_| DiffSample::new((0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap())
                .collect();
            let g = nll_gradient(&beta, &ds, 0.0).unwrap();
            let h = 1e-5;
            for k in 0..dim {
                let mut up = beta.clone();
                let mut down = beta.clone();
                up[k] += h;
                down[k] -= h;
                let fd = (negative_log_likelihood(&up, &ds, 0.0).unwrap()
                    - negative_log_likelihood(&down, &ds, 0.0).unwrap()) / (2.0 * h);
                prop_assert!((fd - g[k]).abs() <= 1e-6 * g[k].abs().max(1.0));
            }
        }
    }

    #[test]
    fn separable_fit_recovers_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = [1.0, -0.5, 0.25];
        let measures = [MeasureId::Abw, MeasureId::Hm, MeasureId::NhAuc];
        let mut features = BTreeMap::new();
        let mut scores = Vec::new();
        for i in 0..40 {
            let vals: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            scores.push(vals.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>());
            let id = format!("v{i}");
            let raw = measures.iter().zip(&vals).map(|(m, v)| (*m, m.polarity() * v)).collect();
            features.insert(id.clone(), FeatureVector::from_raw(id, raw));
        }
        let mut records = Vec::new();
        for _ in 0..300 {
            let a = rng.random_range(0..40);
            let b = rng.random_range(0..40);
            if a == b {
                continue;
            }
            let (win, lose) = if scores[a] > scores[b] { (a, b) } else { (b, a) };
            records.push(record(&format!("v{win}"), &format!("v{lose}")));
        }
        let model = fit_records(&records, &features, &measures, 0.0, &FitConfig::default()).unwrap();
        let raw = model.raw_weights();
        let fitted: Vec<f64> = measures.iter().map(|m| raw[m]).collect();
        let cos = dot(&fitted, &w) / (dot(&fitted, &fitted).sqrt() * dot(&w, &w).sqrt());
        assert!(cos >= 0.99, "cosine {cos}");
    }

    #[test]
    fn huge_lambda_zeroes_beta() {
        let features = features_from(&[
            ("a", &[(MeasureId::Abw, 1.0), (MeasureId::Hm, 0.0)]),
            ("b", &[(MeasureId::Abw, 0.0), (MeasureId::Hm, 2.0)]),
            ("c", &[(MeasureId::Abw, 3.0), (MeasureId::Hm, 1.0)]),
        ]);
        let records = [record("a", "b"), record("c", "b"), record("a", "c")];
        let model = fit_records(&records, &features, &[MeasureId::Abw, MeasureId::Hm], 1e6, &FitConfig::default()).unwrap();
        assert_eq!(model.beta(), &[0.0, 0.0]);
        assert!(model.diagnostics().converged);
    }

    #[test]
    fn toy_fit_beats_grid() {
        // Raw diffs (1,0), (−1,1), (−0.5,−2) lie in no common half-plane, so the
        // likelihood has a finite minimizer; z-scoring rescales each axis and keeps that.
        let raw: [[f64; 2]; 6] = [[1.0, 0.0], [0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 0.0], [0.5, 2.0]];
        let ids = ["a", "b", "c", "d", "e", "f"];
        let rows: Vec<(&str, Vec<(MeasureId, f64)>)> = ids
            .iter()
            .zip(&raw)
            .map(|(id, r)| (*id, vec![(MeasureId::Abw, r[0]), (MeasureId::Hm, r[1])]))
            .collect();
        let rows_ref: Vec<(&str, &[(MeasureId, f64)])> = rows.iter().map(|(id, v)| (*id, v.as_slice())).collect();
        let features = features_from(&rows_ref);
        let records = [record("a", "b"), record("c", "d"), record("e", "f")];
        let model = fit_records(&records, &features, &[MeasureId::Abw, MeasureId::Hm], 0.0, &FitConfig::default()).unwrap();
        assert!(model.diagnostics().converged);

        // Independent z-scoring and likelihood.
        let mut z = [[0.0f64; 2]; 6];
        for k in 0..2 {
            let mean = raw.iter().map(|r| r[k]).sum::<f64>() / 6.0;
            let var = raw.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / 6.0;
            for i in 0..6 {
                z[i][k] = (raw[i][k] - mean) / var.sqrt();
            }
        }
        let pairs = [(0, 1), (2, 3), (4, 5)];
        let nll = |b: [f64; 2]| -> f64 {
            pairs
                .iter()
                .map(|&(w, l): &(usize, usize)| {
                    let m = b[0] * (z[w][0] - z[l][0]) + b[1] * (z[w][1] - z[l][1]);
                    (1.0 + (-m).exp()).ln()
                })
                .sum()
        };
        let fitted = nll([model.beta()[0], model.beta()[1]]);
        let mut best = f64::INFINITY;
        for i in 0..=200 {
            for j in 0..=200 {
                best = best.min(nll([-10.0 + 0.1 * i as f64, -10.0 + 0.1 * j as f64]));
            }
        }
        assert!(fitted <= best + 1e-12, "fitted {fitted} grid {best}");
    }

    #[test]
    fn fit_errors() {
        let features = features_from(&[("a", &[(MeasureId::Abw, 1.0)]), ("b", &[(MeasureId::Abw, 0.0)])]);
        let mut none = record("a", "b");
        none.choice = Choice::None;
        assert!(matches!(
            fit_records([&none], &features, &[MeasureId::Abw], 0.0, &FitConfig::default()),
            Err(Error::NoTrainablePreferences)
        ));
        assert!(matches!(
            fit_records([&record("a", "zz")], &features, &[MeasureId::Abw], 0.0, &FitConfig::default()),
            Err(Error::UncoveredVisualization(id)) if id == "zz"
        ));
        assert!(matches!(
            fit_records([&record("a", "b")], &features, &[MeasureId::Hm], 0.0, &FitConfig::default()),
            Err(Error::MissingFeature(MeasureId::Hm))
        ));
    }

    #[test]
    fn constant_features_are_dropped() {
        let features = features_from(&[
            ("a", &[(MeasureId::Abw, 1.0), (MeasureId::NClasses, 3.0)]),
            ("b", &[(MeasureId::Abw, 0.0), (MeasureId::NClasses, 3.0)]),
        ]);
        let model = fit_records(
            [&record("a", "b"), &record("b", "a"), &record("a", "b")],
            &features,
            &[MeasureId::NClasses, MeasureId::Abw],
            0.0,
            &FitConfig::default(),
        )
        .unwrap();
        assert_eq!(model.active_measures(), &[MeasureId::Abw]);
        assert_eq!(model.diagnostics().dropped_measures, vec![MeasureId::NClasses]);
        assert!(model.beta()[0] > 0.0);
    }

    #[test]
    fn scores_and_predictions() {
        let features = features_from(&[
            ("a", &[(MeasureId::Abw, 1.0), (MeasureId::Hm, 0.2)]),
            ("b", &[(MeasureId::Abw, 0.3), (MeasureId::Hm, 1.5)]),
            ("c", &[(MeasureId::Abw, 2.0), (MeasureId::Hm, 0.9)]),
        ]);
        let records = [record("a", "b"), record("c", "b"), record("c", "a"), record("b", "c")];
        let model = fit_records(&records, &features, &[MeasureId::Abw, MeasureId::Hm], 0.0, &FitConfig::default()).unwrap();
        let (a, b) = (&features["a"], &features["b"]);
        let diff = score(&model, a).unwrap() - score(&model, b).unwrap();
        let za = model.standardize(a).unwrap();
        let zb = model.standardize(b).unwrap();
        let direct: f64 = model.beta().iter().zip(za.iter().zip(&zb)).map(|(w, (x, y))| w * (x - y)).sum();
        assert!((diff - direct).abs() < 1e-12);

        let mut ties = TieResolver::HalfCredit;
        let p = predict_preference(&model, a, b, &mut ties).unwrap();
        let q = predict_preference(&model, b, a, &mut ties).unwrap();
        assert_eq!(
            (p, q),
            if diff > 0.0 { (Prediction::First, Prediction::Second) } else { (Prediction::Second, Prediction::First) }
        );
        assert_eq!(predict_preference(&model, a, a, &mut ties).unwrap(), Prediction::Tie);
        let mut coin = crate::scoring::TiePolicy::Random(1).resolver();
        assert_ne!(predict_preference(&model, a, a, &mut coin).unwrap(), Prediction::Tie);

        let missing = FeatureVector::from_raw("x", BTreeMap::from([(MeasureId::Abw, 1.0)]));
        assert!(matches!(score(&model, &missing), Err(Error::MissingFeature(MeasureId::Hm))));

        let zero = CoxModel { beta: vec![0.0, 0.0], ..model.clone() };
        assert_eq!(score(&zero, a).unwrap(), 0.0);
        assert_eq!(score(&zero, &features["c"]).unwrap(), 0.0);
    }

    #[test]
    fn model_json_shape_round_trips() {
        let features = features_from(&[
            ("a", &[(MeasureId::Abw, 1.0), (MeasureId::NhAuc, 0.2)]),
            ("b", &[(MeasureId::Abw, 0.3), (MeasureId::NhAuc, 0.5)]),
        ]);
        let model = fit_records(
            [&record("a", "b"), &record("b", "a"), &record("a", "b")],
            &features,
            &[MeasureId::Abw, MeasureId::NhAuc],
            0.01,
            &FitConfig::default(),
        )
        .unwrap();
        let value = serde_json::to_value(&model).unwrap();
        assert_eq!(value["active_measures"], serde_json::json!(["abw", "nh_auc"]));
        assert!(value["standardization"]["nh_auc"]["std"].as_f64().unwrap() > 0.0);
        assert_eq!(value["lambda"], serde_json::json!(0.01));
        assert!(value["diagnostics"]["iterations"].is_u64());
        let back: CoxModel = serde_json::from_value(value).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn path_rejects_bad_lambdas() {
        let features = features_from(&[("a", &[(MeasureId::Abw, 1.0)]), ("b", &[(MeasureId::Abw, 0.0)])]);
        let problem = PreparedProblem::new([&record("a", "b")], &features, &[MeasureId::Abw]).unwrap();
        let cfg = FitConfig::default();
        assert!(path_for_problem(&problem, &[1.0, 1.0], &cfg).is_err());
        assert!(path_for_problem(&problem, &[0.5, 1.0], &cfg).is_err());
        assert!(path_for_problem(&problem, &[1.0, -0.5], &cfg).is_err());
    }

    #[test]
    fn geometric_grid() {
        let l = geometric_lambdas(10.0, 1e-3, 4);
        assert_eq!(l.len(), 4);
        assert!((l[0] - 10.0).abs() < 1e-12 && (l[3] - 0.01).abs() < 1e-12);
        assert!(l.windows(2).all(|w| w[1] < w[0]));
    }
}
