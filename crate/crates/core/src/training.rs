//! Variational free-energy objective, full-batch Adam and the training loop.
//!
//! The trainer evaluates the objective one posterior sample at a time so that
//! only a single network forward pass lives on the tape. The divergence term
//! couples the samples only through their scalar log ratios
//! `r_c = ln p(θ_c) - ln q(θ_c)`, so it is first evaluated on those values and
//! its partial derivatives `∂D/∂r_c` are then folded into each per-sample
//! graph as constant weights. The resulting gradient is identical to that of
//! the single-graph [`objective`].

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::divergence::{
    kld_standard_normal_node, renyi_alpha_mc, renyi_alpha_mc_node, reverse_kld_standard_normal_node,
    AlphaSetting, DivergencePath,
};
use crate::model::{log_prior, log_prior_value, log_q, log_q_value, reparameterize, DeepONet, InputNodes, ModelKind};
use crate::problems::OperatorDataset;
use crate::rng::{streams, StreamRng};
use crate::tensor::{self, Graph, NodeId, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Posterior samples per epoch.
    pub n_mc: usize,
    pub alpha: f64,
    pub seed: u64,
    /// Loss is recorded every `record_every` epochs.
    pub record_every: usize,
    /// Multiplier on the divergence term; 1 gives the free energy.
    pub divergence_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10_000,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            n_mc: 25,
            alpha: 1.0,
            seed: 0,
            record_every: 10,
            divergence_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        AlphaSetting::new(self.alpha)?;
        let positive = [self.learning_rate, self.beta1, self.beta2, self.adam_eps];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) || self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(Error::InvalidArgument(format!("invalid optimiser settings in {self:?}")));
        }
        if self.n_mc == 0 || self.record_every == 0 {
            return Err(Error::InvalidArgument("n_mc and record_every must be at least 1".into()));
        }
        if !self.divergence_weight.is_finite() || self.divergence_weight < 0.0 {
            return Err(Error::InvalidArgument("divergence weight must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// First and second moment accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::Shape(format!("adam: {} params, {} grads, {} moments", n, grads.len(), state.m.len())));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..n {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
    }
    Ok(())
}

/// Graph nodes of the free energy.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveNodes {
    pub loss: NodeId,
    pub expected_nll: NodeId,
    pub divergence: NodeId,
}

/// `-Σ_ik ln N(s_ik; μ_ik(θ), σ_ik(θ))` for one parameter sample.
pub fn sample_nll(g: &mut Graph, model: &DeepONet, theta: NodeId, x: &InputNodes, targets: NodeId) -> Result<NodeId> {
    let out = model.forward(g, theta, x, true)?;
    let std = out.std.expect("std head requested");
    let lp = g.gaussian_log_pdf(targets, out.mean, std)?;
    let s = g.sum(lp);
    Ok(g.neg(s))
}

/// Monte-Carlo expected negative log-likelihood over the given samples.
pub fn expected_nll(g: &mut Graph, model: &DeepONet, thetas: &[NodeId], x: &InputNodes, targets: NodeId) -> Result<NodeId> {
    if thetas.is_empty() {
        return Err(Error::InvalidArgument("need at least one parameter sample".into()));
    }
    let mut terms = Vec::with_capacity(thetas.len());
    for &theta in thetas {
        terms.push(sample_nll(g, model, theta, x, targets)?);
    }
    let stacked = g.stack(&terms)?;
    let total = g.sum(stacked);
    Ok(g.affine(total, 1.0 / thetas.len() as f64, 0.0))
}

/// Free energy on a single graph: expected NLL plus the weighted divergence.
///
/// `mu` and `rho` are the variational parameters and `eps` one noise vector
/// per posterior sample. The same samples feed both terms.
#[allow(clippy::too_many_arguments)]
pub fn objective(
    g: &mut Graph,
    model: &DeepONet,
    mu: NodeId,
    rho: NodeId,
    eps: &[Vec<f64>],
    x: &InputNodes,
    targets: NodeId,
    alpha: AlphaSetting,
    divergence_weight: f64,
) -> Result<ObjectiveNodes> {
    let sigma = g.softplus(rho);
    let thetas: Vec<NodeId> =
        eps.iter().map(|e| reparameterize(g, mu, sigma, e.clone())).collect::<Result<_>>()?;
    let nll = expected_nll(g, model, &thetas, x, targets)?;
    let divergence = match alpha.path() {
        DivergencePath::Kld => kld_standard_normal_node(g, mu, sigma)?,
        DivergencePath::ReverseKld => reverse_kld_standard_normal_node(g, mu, sigma)?,
        DivergencePath::Renyi => {
            let mut ratios = Vec::with_capacity(thetas.len());
            for &theta in &thetas {
                let lp = log_prior(g, theta)?;
                let lq = log_q(g, theta, mu, sigma)?;
                ratios.push(g.sub(lp, lq)?);
            }
            let r = g.stack(&ratios)?;
            renyi_alpha_mc_node(g, r, alpha.value())?
        }
    };
    let weighted = g.affine(divergence, divergence_weight, 0.0);
    let loss = g.add(nll, weighted)?;
    Ok(ObjectiveNodes { loss, expected_nll: nll, divergence })
}

/// Mean squared error of the mean head over all supervised points.
pub fn mse_objective(g: &mut Graph, model: &DeepONet, theta: NodeId, x: &InputNodes, targets: NodeId) -> Result<NodeId> {
    let out = model.forward(g, theta, x, false)?;
    let diff = g.sub(out.mean, targets)?;
    let sq = g.square(diff);
    let n = g.value(sq).numel() as f64;
    let s = g.sum(sq);
    Ok(g.affine(s, 1.0 / n, 0.0))
}

/// Objective value with its gradient.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: f64,
    pub expected_nll: f64,
    pub divergence: f64,
    pub grad_mu: Vec<f64>,
    /// Empty for a deterministic model.
    pub grad_rho: Vec<f64>,
}

/// Dataset tensors in the form the network consumes.
pub struct TrainingData<'a> {
    ds: &'a OperatorDataset,
}

impl<'a> TrainingData<'a> {
    pub fn new(model: &DeepONet, ds: &'a OperatorDataset) -> Result<Self> {
        ds.validate()?;
        if ds.meta.n_sensors != model.arch.n_sensors() || ds.meta.query_dim != model.arch.query_dim() {
            return Err(Error::Shape(format!(
                "dataset has {} sensors and {}-d queries, model expects {} and {}",
                ds.meta.n_sensors,
                ds.meta.query_dim,
                model.arch.n_sensors(),
                model.arch.query_dim()
            )));
        }
        Ok(Self { ds })
    }

    pub fn place(&self, g: &mut Graph, model: &DeepONet) -> Result<(InputNodes, NodeId)> {
        let (n, q) = (self.ds.n_examples(), self.ds.n_queries());
        let x = model.inputs(g, &self.ds.branch_inputs, &self.ds.query_points, self.ds.meta.query_layout, n, q)?;
        let t = g.constant(Tensor::matrix(n, q, self.ds.targets.clone())?);
        Ok((x, t))
    }
}

fn check_finite(what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NumericFault(format!("{what} is {v}")))
    }
}

/// Free energy and its gradient with respect to `(μ, ρ)`, evaluated sample by
/// sample. `eps` holds one noise vector per posterior sample.
pub fn variational_step(
    model: &DeepONet,
    data: &TrainingData<'_>,
    eps: &[Vec<f64>],
    alpha: AlphaSetting,
    divergence_weight: f64,
) -> Result<Evaluation> {
    let l = model.n_params();
    let nq = eps.len();
    if nq == 0 {
        return Err(Error::InvalidArgument("need at least one parameter sample".into()));
    }
    let mut grad_mu = vec![0.0; l];
    let mut grad_rho = vec![0.0; l];

    // Divergence value and its sensitivity to each sample's log ratio.
    let (divergence, ratio_weights) = match alpha.path() {
        DivergencePath::Renyi => {
            let ratios = eps
                .iter()
                .map(|e| {
                    let theta = model.sample_parameters(e)?;
                    Ok(log_prior_value(&theta) - log_q_value(&theta, &model.mu, &model.rho)?)
                })
                .collect::<Result<Vec<f64>>>()?;
            let a = alpha.value();
            let d = renyi_alpha_mc(&ratios, a)?;
            // ∂D/∂r_c = -(1/α) softmax((1-α) r)_c
            let scaled: Vec<f64> = ratios.iter().map(|r| (1.0 - a) * r).collect();
            let lse = tensor::log_sum_exp(&scaled);
            let w: Vec<f64> = scaled.iter().map(|s| -(s - lse).exp() / a).collect();
            (d, Some(w))
        }
        path => {
            let mut g = Graph::new();
            let mu = g.param(Tensor::vector(model.mu.clone()));
            let rho = g.param(Tensor::vector(model.rho.clone()));
            let sigma = g.softplus(rho);
            let d = if path == DivergencePath::Kld {
                kld_standard_normal_node(&mut g, mu, sigma)?
            } else {
                reverse_kld_standard_normal_node(&mut g, mu, sigma)?
            };
            let value = g.value(d).item();
            let weighted = g.affine(d, divergence_weight, 0.0);
            let grads = g.backward(weighted)?;
            tensor::add_into(&mut grad_mu, grads.wrt(mu).data());
            tensor::add_into(&mut grad_rho, grads.wrt(rho).data());
            (value, None)
        }
    };
    check_finite("divergence", divergence)?;

    let mut nll_total = 0.0;
    for (c, e) in eps.iter().enumerate() {
        let mut g = Graph::new();
        let mu = g.param(Tensor::vector(model.mu.clone()));
        let rho = g.param(Tensor::vector(model.rho.clone()));
        let sigma = g.softplus(rho);
        let theta = reparameterize(&mut g, mu, sigma, e.clone())?;
        let (x, targets) = data.place(&mut g, model)?;
        let nll = sample_nll(&mut g, model, theta, &x, targets)?;
        nll_total += check_finite("sample log-likelihood", g.value(nll).item())?;
        let mut loss = g.affine(nll, 1.0 / nq as f64, 0.0);
        if let Some(w) = &ratio_weights {
            let lp = log_prior(&mut g, theta)?;
            let lq = log_q(&mut g, theta, mu, sigma)?;
            let r = g.sub(lp, lq)?;
            let wr = g.affine(r, divergence_weight * w[c], 0.0);
            loss = g.add(loss, wr)?;
        }
        let grads = g.backward(loss)?;
        tensor::add_into(&mut grad_mu, grads.wrt(mu).data());
        tensor::add_into(&mut grad_rho, grads.wrt(rho).data());
    }
    let expected_nll = nll_total / nq as f64;
    let loss = check_finite("loss", expected_nll + divergence_weight * divergence)?;
    if grad_mu.iter().chain(&grad_rho).any(|v| !v.is_finite()) {
        return Err(Error::NumericFault("non-finite gradient".into()));
    }
    Ok(Evaluation { loss, expected_nll, divergence, grad_mu, grad_rho })
}

/// Mean squared error and its gradient for a deterministic model.
pub fn deterministic_step(model: &DeepONet, data: &TrainingData<'_>) -> Result<Evaluation> {
    let mut g = Graph::new();
    let theta = g.param(Tensor::vector(model.mu.clone()));
    let (x, targets) = data.place(&mut g, model)?;
    let loss = mse_objective(&mut g, model, theta, &x, targets)?;
    let value = check_finite("loss", g.value(loss).item())?;
    let grad_mu = g.backward(loss)?.wrt(theta).into_data();
    if grad_mu.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericFault("non-finite gradient".into()));
    }
    Ok(Evaluation { loss: value, expected_nll: value, divergence: 0.0, grad_mu, grad_rho: Vec::new() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    /// `(epoch, loss)` at every recorded epoch.
    pub loss_history: Vec<(usize, f64)>,
    pub epochs_completed: usize,
    pub converged: bool,
    /// Description of the numeric fault that aborted the run, if any.
    pub fault: Option<String>,
    pub wall_time_s: f64,
}

/// Optimise `model` in place with full-batch Adam.
///
/// Each epoch draws `n_mc` fresh noise vectors, records the loss at the
/// current parameters when the epoch is a multiple of `record_every`, then
/// applies one update. A numeric fault stops the run and is reported in the
/// record, leaving the model at its last finite parameters.
pub fn train(model: &mut DeepONet, ds: &OperatorDataset, cfg: &TrainConfig) -> Result<RunRecord> {
    cfg.validate()?;
    let alpha = AlphaSetting::new(cfg.alpha)?;
    let data = TrainingData::new(model, ds)?;
    let start = Instant::now();
    let l = model.n_params();
    let mut rng = StreamRng::new(cfg.seed, streams::EPSILON);
    let mut adam_mu = AdamState::new(l);
    let mut adam_rho = AdamState::new(l);
    let mut history = Vec::new();
    let mut fault = None;
    let mut completed = 0;

    for epoch in 0..cfg.epochs {
        let step = match model.kind {
            ModelKind::Deterministic => deterministic_step(model, &data),
            ModelKind::Variational => {
                let eps: Vec<Vec<f64>> = (0..cfg.n_mc).map(|_| rng.normals(l)).collect();
                variational_step(model, &data, &eps, alpha, cfg.divergence_weight)
            }
        };
        let eval = match step {
            Ok(e) => e,
            Err(Error::NumericFault(msg)) => {
                log::warn!("numeric fault at epoch {epoch}: {msg}");
                fault = Some(format!("epoch {epoch}: {msg}"));
                break;
            }
            Err(e) => return Err(e),
        };
        if epoch % cfg.record_every == 0 {
            history.push((epoch, eval.loss));
        }
        adam_step(&mut model.mu, &eval.grad_mu, &mut adam_mu, cfg)?;
        if model.kind == ModelKind::Variational {
            adam_step(&mut model.rho, &eval.grad_rho, &mut adam_rho, cfg)?;
        }
        completed = epoch + 1;
        if epoch % 500 == 0 {
            log::debug!("epoch {epoch}: loss {:.6e}", eval.loss);
        }
    }

    let losses: Vec<f64> = history.iter().map(|&(_, v)| v).collect();
    let converged = fault.is_none() && convergence_filter(&losses).unwrap_or(false);
    Ok(RunRecord {
        loss_history: history,
        epochs_completed: completed,
        converged,
        fault,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

pub const MIN_FILTER_POINTS: usize = 20;

/// Flags oscillating or diverging runs.
///
/// Converged iff the standard deviation over the last tenth of the history is
/// below 5% of the full loss range and the mean over the last tenth is below
/// the mean over the first tenth.
pub fn convergence_filter(losses: &[f64]) -> Result<bool> {
    if losses.len() < MIN_FILTER_POINTS {
        return Err(Error::InvalidArgument(format!(
            "convergence filter needs at least {MIN_FILTER_POINTS} points, got {}",
            losses.len()
        )));
    }
    if losses.iter().any(|v| !v.is_finite()) {
        return Ok(false);
    }
    let window = losses.len().div_ceil(10);
    let head = &losses[..window];
    let tail = &losses[losses.len() - window..];
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let tail_mean = mean(tail);
    let tail_std = (tail.iter().map(|v| (v - tail_mean).powi(2)).sum::<f64>() / tail.len() as f64).sqrt();
    let max = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = losses.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(tail_std < 0.05 * (max - min) && tail_mean < mean(head))
}
