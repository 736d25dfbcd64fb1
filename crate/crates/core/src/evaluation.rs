//! Predictive ensembles and test metrics.
//!
//! A variational model predicts through `S` posterior parameter draws, each
//! giving a Gaussian `N(μ_s, σ_s²)` per query point. The predictive density is
//! the equal-weight mixture of these components.

use serde::{Deserialize, Serialize};

use crate::model::{DeepONet, ModelKind};
use crate::problems::{OperatorDataset, QueryLayout};
use crate::rng::{streams, StreamRng};
use crate::tensor::{self, Graph, Tensor};
use crate::{Error, Result};

pub const DEFAULT_DRAWS: usize = 100;

/// Upper bound on `examples × queries` evaluated in one forward pass.
const CHUNK_POINTS: usize = 200_000;

/// Mixture components for a block of examples.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveDistribution {
    pub n_examples: usize,
    pub n_queries: usize,
    pub n_draws: usize,
    /// `[draw][example][query]`
    pub means: Vec<f64>,
    /// Same layout as `means`; empty for a deterministic model.
    pub stds: Vec<f64>,
}

impl PredictiveDistribution {
    fn points(&self) -> usize {
        self.n_examples * self.n_queries
    }

    pub fn has_std(&self) -> bool {
        !self.stds.is_empty()
    }

    fn component(&self, s: usize, p: usize) -> (f64, f64) {
        let i = s * self.points() + p;
        (self.means[i], if self.has_std() { self.stds[i] } else { 0.0 })
    }

    /// Average of the component means, `[example][query]`.
    pub fn ensemble_mean(&self) -> Vec<f64> {
        let n = self.points();
        let mut out = vec![0.0; n];
        for draw in self.means.chunks_exact(n) {
            tensor::add_into(&mut out, draw);
        }
        let inv = 1.0 / self.n_draws as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        out
    }

    /// Mean of the component variances plus the variance of the component
    /// means.
    pub fn total_variance(&self) -> Vec<f64> {
        let mean = self.ensemble_mean();
        let inv = 1.0 / self.n_draws as f64;
        (0..self.points())
            .map(|p| {
                let mut aleatoric = 0.0;
                let mut epistemic = 0.0;
                for s in 0..self.n_draws {
                    let (m, sd) = self.component(s, p);
                    aleatoric += sd * sd;
                    epistemic += (m - mean[p]).powi(2);
                }
                (aleatoric + epistemic) * inv
            })
            .collect()
    }

    pub fn total_std(&self) -> Vec<f64> {
        self.total_variance().into_iter().map(f64::sqrt).collect()
    }

    /// Ensemble mean with 2.5% and 97.5% empirical quantiles for one example,
    /// widened where needed so the band always contains the mean.
    ///
    /// Each component contributes `likelihood_draws` samples
    /// `μ_s + σ_s z`, with `z` from the seeded likelihood stream.
    pub fn interval(&self, example: usize, likelihood_draws: usize, seed: u64) -> Result<Vec<Interval>> {
        if example >= self.n_examples || likelihood_draws == 0 {
            return Err(Error::InvalidArgument(format!(
                "interval: example {example} of {}, {likelihood_draws} likelihood draws",
                self.n_examples
            )));
        }
        let mean = self.ensemble_mean();
        let mut rng = StreamRng::new(seed, streams::LIKELIHOOD);
        let mut samples = vec![0.0; self.n_draws * likelihood_draws];
        let mut out = Vec::with_capacity(self.n_queries);
        for k in 0..self.n_queries {
            let p = example * self.n_queries + k;
            for s in 0..self.n_draws {
                let (m, sd) = self.component(s, p);
                for t in 0..likelihood_draws {
                    samples[s * likelihood_draws + t] = m + sd * rng.standard_normal();
                }
            }
            samples.sort_by(f64::total_cmp);
            // with few samples the quantiles can miss the mean; widen to keep it inside
            let (lower, upper) = (quantile(&samples, 0.025), quantile(&samples, 0.975));
            out.push(Interval { mean: mean[p], lower: lower.min(mean[p]), upper: upper.max(mean[p]) });
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Linearly interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "quantile of empty data");
    let h = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Posterior parameter vectors for prediction. A deterministic model, or a
/// request for zero noise, yields the means only.
pub fn parameter_draws(model: &DeepONet, n_draws: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if n_draws == 0 {
        return Err(Error::InvalidArgument("need at least one posterior draw".into()));
    }
    match model.kind {
        ModelKind::Deterministic => Ok(vec![model.mu.clone()]),
        ModelKind::Variational => {
            let mut rng = StreamRng::new(seed, streams::PREDICT);
            (0..n_draws).map(|_| model.sample_parameters(&rng.normals(model.n_params()))).collect()
        }
    }
}

/// Component means and stds of `model` on examples `range` of `ds`, one
/// component per parameter vector in `draws`.
pub fn predict_with(
    model: &DeepONet,
    draws: &[Vec<f64>],
    ds: &OperatorDataset,
    range: std::ops::Range<usize>,
) -> Result<PredictiveDistribution> {
    if draws.is_empty() {
        return Err(Error::InvalidArgument("need at least one posterior draw".into()));
    }
    if ds.meta.n_sensors != model.arch.n_sensors() || ds.meta.query_dim != model.arch.query_dim() {
        return Err(Error::Shape("dataset and model dimensions differ".into()));
    }
    if range.end > ds.n_examples() || range.start > range.end {
        return Err(Error::InvalidArgument(format!("example range {range:?} out of bounds")));
    }
    let (n, q) = (range.len(), ds.n_queries());
    let m = ds.meta.n_sensors;
    let d = ds.meta.query_dim;
    let branch = &ds.branch_inputs[range.start * m..range.end * m];
    let queries = match ds.meta.query_layout {
        QueryLayout::Shared => &ds.query_points[..],
        QueryLayout::PerExample => &ds.query_points[range.start * q * d..range.end * q * d],
    };
    let with_std = model.kind == ModelKind::Variational;
    let mut means = Vec::with_capacity(draws.len() * n * q);
    let mut stds = Vec::with_capacity(if with_std { draws.len() * n * q } else { 0 });
    for theta in draws {
        let mut g = Graph::new();
        let th = g.constant(Tensor::vector(theta.clone()));
        let x = model.inputs(&mut g, branch, queries, ds.meta.query_layout, n, q)?;
        let out = model.forward(&mut g, th, &x, with_std)?;
        means.extend_from_slice(g.value(out.mean).data());
        if let Some(sd) = out.std {
            stds.extend_from_slice(g.value(sd).data());
        }
    }
    Ok(PredictiveDistribution { n_examples: n, n_queries: q, n_draws: draws.len(), means, stds })
}

/// Predictive distribution over every example of `ds` from `n_draws`
/// seeded posterior draws.
pub fn predict(model: &DeepONet, ds: &OperatorDataset, n_draws: usize, seed: u64) -> Result<PredictiveDistribution> {
    let draws = parameter_draws(model, n_draws, seed)?;
    predict_with(model, &draws, ds, 0..ds.n_examples())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Nmse {
    pub value: f64,
    /// Examples with an all-zero target, left out of the average.
    pub excluded: usize,
}

/// Per-example `‖ŝ - s‖² / ‖s‖²`; `None` where the target norm is zero.
pub fn nmse_terms(predictions: &[f64], targets: &[f64], n_queries: usize) -> Result<Vec<Option<f64>>> {
    if predictions.len() != targets.len() || n_queries == 0 || !targets.len().is_multiple_of(n_queries) {
        return Err(Error::Shape(format!(
            "nmse: {} predictions, {} targets, {n_queries} queries",
            predictions.len(),
            targets.len()
        )));
    }
    Ok(predictions
        .chunks_exact(n_queries)
        .zip(targets.chunks_exact(n_queries))
        .map(|(p, t)| {
            let den: f64 = t.iter().map(|v| v * v).sum();
            (den > 0.0).then(|| p.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / den)
        })
        .collect())
}

/// Mean per-example normalised squared error.
pub fn nmse(predictions: &[f64], targets: &[f64], n_queries: usize) -> Result<Nmse> {
    summarise_nmse(&nmse_terms(predictions, targets, n_queries)?)
}

fn summarise_nmse(terms: &[Option<f64>]) -> Result<Nmse> {
    let used: Vec<f64> = terms.iter().flatten().copied().collect();
    let excluded = terms.len() - used.len();
    if excluded > 0 {
        log::warn!("nmse: {excluded} examples with zero-norm targets excluded");
    }
    if used.is_empty() {
        return Err(Error::InvalidArgument("nmse: no example with a non-zero target".into()));
    }
    Ok(Nmse { value: used.iter().sum::<f64>() / used.len() as f64, excluded })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NllMode {
    /// Exact density of the equal-weight Gaussian mixture.
    #[default]
    Mixture,
    /// Single Gaussian with the mixture's mean and total variance.
    MomentMatched,
}

/// Per-point negative log predictive density, `[example][query]`.
pub fn nll_terms(pd: &PredictiveDistribution, targets: &[f64], mode: NllMode) -> Result<Vec<f64>> {
    if !pd.has_std() {
        return Err(Error::InvalidArgument("nll needs a predictive std".into()));
    }
    if targets.len() != pd.points() {
        return Err(Error::Shape(format!("nll: {} targets for {} points", targets.len(), pd.points())));
    }
    match mode {
        NllMode::Mixture => {
            let ln_s = (pd.n_draws as f64).ln();
            let mut logs = vec![0.0; pd.n_draws];
            Ok((0..pd.points())
                .map(|p| {
                    for (s, l) in logs.iter_mut().enumerate() {
                        let (m, sd) = pd.component(s, p);
                        *l = tensor::gaussian_log_pdf(targets[p], m, sd);
                    }
                    ln_s - tensor::log_sum_exp(&logs)
                })
                .collect())
        }
        NllMode::MomentMatched => {
            let mean = pd.ensemble_mean();
            let var = pd.total_variance();
            Ok((0..pd.points()).map(|p| -tensor::gaussian_log_pdf(targets[p], mean[p], var[p].sqrt())).collect())
        }
    }
}

/// Mean negative log predictive density over all points.
pub fn nll(pd: &PredictiveDistribution, targets: &[f64], mode: NllMode) -> Result<f64> {
    let terms = nll_terms(pd, targets, mode)?;
    Ok(terms.iter().sum::<f64>() / terms.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Posterior draws per prediction.
    pub draws: usize,
    pub seed: u64,
    pub nll_mode: NllMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { draws: DEFAULT_DRAWS, seed: 0, nll_mode: NllMode::Mixture }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub nmse: f64,
    /// Absent for a deterministic model.
    pub nll: Option<f64>,
    pub nmse_excluded: usize,
}

/// NMSE of the ensemble mean and mixture NLL over all of `ds`, processed in
/// blocks of examples to bound memory.
pub fn evaluate_run(model: &DeepONet, ds: &OperatorDataset, cfg: &EvalConfig) -> Result<Metrics> {
    let draws = parameter_draws(model, cfg.draws, cfg.seed)?;
    let q = ds.n_queries();
    let block = (CHUNK_POINTS / q.max(1)).max(1);
    let mut terms = Vec::with_capacity(ds.n_examples());
    let mut nll_sum = 0.0;
    let mut start = 0;
    while start < ds.n_examples() {
        let end = (start + block).min(ds.n_examples());
        let pd = predict_with(model, &draws, ds, start..end)?;
        let targets = &ds.targets[start * q..end * q];
        terms.extend(nmse_terms(&pd.ensemble_mean(), targets, q)?);
        if pd.has_std() {
            nll_sum += nll_terms(&pd, targets, cfg.nll_mode)?.iter().sum::<f64>();
        }
        start = end;
    }
    let nmse = summarise_nmse(&terms)?;
    let nll = (model.kind == ModelKind::Variational).then(|| nll_sum / (ds.n_examples() * q) as f64);
    if !nmse.value.is_finite() || nll.is_some_and(|v| !v.is_finite()) {
        return Err(Error::NumericFault(format!("non-finite metrics: nmse {}, nll {nll:?}", nmse.value)));
    }
    Ok(Metrics { nmse: nmse.value, nll, nmse_excluded: nmse.excluded })
}

/// Mean and sample standard deviation (`n - 1` denominator) of a metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Zero for a single value.
    pub std: f64,
    pub count: usize,
}

/// `None` for an empty slice.
pub fn aggregate(values: &[f64]) -> Option<Summary> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Some(Summary { mean, std, count: n })
}
