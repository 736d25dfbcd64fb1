//! Rényi α-divergence between the variational posterior and the prior.
//!
//! Uses the parameterisation
//!
//! ```text
//! D_α[q‖p] = 1/(α(α-1)) · ln E_q[(p/q)^(1-α)]
//! ```
//!
//! which tends to `KL(q‖p)` as `α → 1` and to `KL(p‖q)` as `α → 0`. The
//! Monte-Carlo estimator replaces the expectation with an average over
//! posterior samples and is evaluated in log space.

use serde::{Deserialize, Serialize};

use crate::tensor::{self, Graph, NodeId, Tensor};
use crate::{Error, Result};

/// Returned by closed forms when the divergence is unbounded.
pub const INFINITE_DIVERGENCE: f64 = f64::INFINITY;

/// The α hyperparameter with its limit points routed to closed forms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AlphaSetting(f64);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DivergencePath {
    /// `α = 1`: exact `KL(q‖p)`.
    Kld,
    /// `α = 0`: exact `KL(p‖q)`.
    ReverseKld,
    /// Monte-Carlo Rényi estimator.
    Renyi,
}

impl AlphaSetting {
    pub fn new(alpha: f64) -> Result<Self> {
        if !alpha.is_finite() {
            return Err(Error::InvalidArgument(format!("alpha must be finite, got {alpha}")));
        }
        Ok(Self(alpha))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn path(self) -> DivergencePath {
        if self.0 == 1.0 {
            DivergencePath::Kld
        } else if self.0 == 0.0 {
            DivergencePath::ReverseKld
        } else {
            DivergencePath::Renyi
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !alpha.is_finite() || alpha == 0.0 || alpha == 1.0 {
        return Err(Error::InvalidArgument(format!("Rényi estimator needs finite alpha outside {{0, 1}}, got {alpha}")));
    }
    Ok(())
}

/// Monte-Carlo estimate from per-sample log ratios `ln p(θ_c) - ln q(θ_c)`.
pub fn renyi_alpha_mc(log_ratios: &[f64], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if log_ratios.is_empty() {
        return Err(Error::InvalidArgument("need at least one Monte-Carlo sample".into()));
    }
    if let Some(r) = log_ratios.iter().find(|r| !r.is_finite()) {
        return Err(Error::NumericFault(format!("non-finite log ratio {r}")));
    }
    let scaled: Vec<f64> = log_ratios.iter().map(|r| (1.0 - alpha) * r).collect();
    let log_mean = tensor::log_sum_exp(&scaled) - (log_ratios.len() as f64).ln();
    Ok(log_mean / (alpha * (alpha - 1.0)))
}

/// Graph version of [`renyi_alpha_mc`]; `log_ratios` has shape `[N_q]`.
pub fn renyi_alpha_mc_node(g: &mut Graph, log_ratios: NodeId, alpha: f64) -> Result<NodeId> {
    check_alpha(alpha)?;
    let shape = g.shape(log_ratios).to_vec();
    if shape.len() != 1 || shape[0] == 0 {
        return Err(Error::InvalidArgument(format!("log ratios must be a non-empty vector, got {shape:?}")));
    }
    if let Some(r) = g.value(log_ratios).data().iter().find(|r| !r.is_finite()) {
        return Err(Error::NumericFault(format!("non-finite log ratio {r}")));
    }
    let scaled = g.affine(log_ratios, 1.0 - alpha, 0.0);
    let lse = g.log_sum_exp(scaled, 0)?;
    let n = shape[0] as f64;
    let c = 1.0 / (alpha * (alpha - 1.0));
    Ok(g.affine(lse, c, -c * n.ln()))
}

/// `Σ_l KL(N(μ_q, σ_q²) ‖ N(μ_p, σ_p²))` for fully factorised Gaussians.
pub fn kld_gaussian_closed(q_mu: &[f64], q_sigma: &[f64], p_mu: &[f64], p_sigma: &[f64]) -> Result<f64> {
    let n = q_mu.len();
    if q_sigma.len() != n || p_mu.len() != n || p_sigma.len() != n {
        return Err(Error::Shape("factorised Gaussians have different lengths".into()));
    }
    if q_sigma.iter().chain(p_sigma).any(|&s| s <= 0.0 || s.is_nan()) {
        return Err(Error::InvalidArgument("standard deviations must be positive".into()));
    }
    Ok((0..n)
        .map(|l| {
            let (sq, sp) = (q_sigma[l], p_sigma[l]);
            let d = q_mu[l] - p_mu[l];
            (sp / sq).ln() + (sq * sq + d * d) / (2.0 * sp * sp) - 0.5
        })
        .sum())
}

/// `KL(q‖N(0, I))` on the graph for `q = N(μ, diag σ²)`.
pub fn kld_standard_normal_node(g: &mut Graph, mu: NodeId, sigma: NodeId) -> Result<NodeId> {
    // Σ [ -ln σ + (σ² + μ²)/2 - 1/2 ]
    let ls = g.log(sigma)?;
    let s2 = g.square(sigma);
    let m2 = g.square(mu);
    let quad = g.add(s2, m2)?;
    let half = g.affine(quad, 0.5, -0.5);
    let per = g.sub(half, ls)?;
    Ok(g.sum(per))
}

/// `KL(N(0, I)‖q)` on the graph for `q = N(μ, diag σ²)`.
pub fn reverse_kld_standard_normal_node(g: &mut Graph, mu: NodeId, sigma: NodeId) -> Result<NodeId> {
    // Σ [ ln σ + (1 + μ²)/(2σ²) - 1/2 ]
    let ls = g.log(sigma)?;
    let m2 = g.square(mu);
    let num = g.affine(m2, 0.5, 0.5);
    let s2 = g.square(sigma);
    let ls2 = g.log(s2)?;
    let neg = g.neg(ls2);
    let inv = g.exp(neg);
    let frac = g.mul(num, inv)?;
    let per = g.add(ls, frac)?;
    let per = g.affine(per, 1.0, -0.5);
    Ok(g.sum(per))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian1d {
    pub mean: f64,
    pub std: f64,
}

impl Gaussian1d {
    pub fn new(mean: f64, std: f64) -> Self {
        Self { mean, std }
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        tensor::gaussian_log_pdf(x, self.mean, self.std)
    }
}

/// Closed-form `D_α[q‖p]` for two univariate Gaussians.
///
/// With `s² = α σ_p² + (1-α) σ_q²`,
/// `ln ∫ q^α p^(1-α) = (1-α) ln σ_q + α ln σ_p - ln s - α(1-α)(μ_q-μ_p)²/(2 s²)`.
/// Returns [`INFINITE_DIVERGENCE`] when `s² ≤ 0` (the integral diverges).
pub fn renyi_gaussian_closed(q: Gaussian1d, p: Gaussian1d, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if q.std <= 0.0 || p.std <= 0.0 {
        return Err(Error::InvalidArgument("standard deviations must be positive".into()));
    }
    let s2 = alpha * p.std * p.std + (1.0 - alpha) * q.std * q.std;
    if s2 <= 0.0 {
        return Ok(INFINITE_DIVERGENCE);
    }
    let d = q.mean - p.mean;
    let log_integral =
        (1.0 - alpha) * q.std.ln() + alpha * p.std.ln() - 0.5 * s2.ln() - alpha * (1.0 - alpha) * d * d / (2.0 * s2);
    Ok(log_integral / (alpha * (alpha - 1.0)))
}

/// Closed-form `KL(q‖p)` for two univariate Gaussians.
pub fn kld_gaussian_1d(q: Gaussian1d, p: Gaussian1d) -> Result<f64> {
    kld_gaussian_closed(&[q.mean], &[q.std], &[p.mean], &[p.std])
}

/// Per-sample log ratios `ln p(θ) - ln q(θ)` of posterior draws placed on the
/// graph, stacked into a vector.
pub fn log_ratios_node(g: &mut Graph, thetas: &[NodeId], mu: NodeId, sigma: NodeId) -> Result<NodeId> {
    let mut ratios = Vec::with_capacity(thetas.len());
    let l = g.value(mu).numel();
    let zero = g.constant(Tensor::zeros(&[l]));
    let one = g.constant(Tensor::full(&[l], 1.0));
    for &theta in thetas {
        let lp = g.gaussian_log_pdf(theta, zero, one)?;
        let lp = g.sum(lp);
        let lq = g.gaussian_log_pdf(theta, mu, sigma)?;
        let lq = g.sum(lq);
        ratios.push(g.sub(lp, lq)?);
    }
    g.stack(&ratios)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn identical_distributions_give_zero() {
        for alpha in [0.25, 0.5, 2.0, 3.5] {
            assert_eq!(renyi_alpha_mc(&[0.0; 7], alpha).unwrap(), 0.0);
            let q = Gaussian1d::new(0.4, 1.3);
            assert_abs_diff_eq!(renyi_gaussian_closed(q, q, alpha).unwrap(), 0.0, epsilon = 1e-15);
        }
        assert_eq!(kld_gaussian_closed(&[0.3], &[2.0], &[0.3], &[2.0]).unwrap(), 0.0);
    }

    #[test]
    fn kld_values() {
        let std_normal = Gaussian1d::new(0.0, 1.0);
        assert_abs_diff_eq!(kld_gaussian_1d(Gaussian1d::new(1.0, 1.0), std_normal).unwrap(), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(
            kld_gaussian_1d(Gaussian1d::new(0.0, 2.0), std_normal).unwrap(),
            -std::f64::consts::LN_2 + 1.5,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(-std::f64::consts::LN_2 + 1.5, 0.806_853, epsilon = 1e-6);
        assert!(kld_gaussian_closed(&[0.0], &[0.0], &[0.0], &[1.0]).is_err());
    }

    #[test]
    fn invalid_alpha_and_samples() {
        assert!(renyi_alpha_mc(&[0.1], 1.0).is_err());
        assert!(renyi_alpha_mc(&[0.1], 0.0).is_err());
        assert!(renyi_alpha_mc(&[], 0.5).is_err());
        assert!(matches!(renyi_alpha_mc(&[f64::NAN], 0.5), Err(Error::NumericFault(_))));
        assert!(AlphaSetting::new(f64::INFINITY).is_err());
        assert_eq!(AlphaSetting::new(1.0).unwrap().path(), DivergencePath::Kld);
        assert_eq!(AlphaSetting::new(0.0).unwrap().path(), DivergencePath::ReverseKld);
        assert_eq!(AlphaSetting::new(1.25).unwrap().path(), DivergencePath::Renyi);
    }

    #[test]
    fn renyi_closed_form_values() {
        // ∫ N(0,1)² / N(0,2²) dx = 4/√7 by completing the square
        let d = renyi_gaussian_closed(Gaussian1d::new(0.0, 1.0), Gaussian1d::new(0.0, 2.0), 2.0).unwrap();
        assert_abs_diff_eq!(d, 0.25 * (16.0f64 / 7.0).ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(d, 0.206_670, epsilon = 1e-6);
        // unit variances: ln ∫ = -α(1-α)d²/2
        let d = renyi_gaussian_closed(Gaussian1d::new(1.0, 1.0), Gaussian1d::new(0.0, 1.0), 0.5).unwrap();
        assert_abs_diff_eq!(d, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn infinite_sentinel() {
        // α σ_p² + (1-α) σ_q² = 3 - 2·4 < 0
        let d = renyi_gaussian_closed(Gaussian1d::new(0.0, 2.0), Gaussian1d::new(0.0, 1.0), 3.0).unwrap();
        assert_eq!(d, INFINITE_DIVERGENCE);
    }

    #[test]
    fn large_log_ratios_stay_finite() {
        let r = [-1000.0, -1200.0, -900.0, 1000.0];
        for alpha in [0.5, 2.0] {
            assert!(renyi_alpha_mc(&r, alpha).unwrap().is_finite());
        }
    }

    #[test]
    fn node_matches_value() {
        let r = vec![-3.0, 0.5, 2.0, -0.2];
        for alpha in [0.25, 1.5, 3.0] {
            let mut g = Graph::new();
            let n = g.param(Tensor::vector(r.clone()));
            let d = renyi_alpha_mc_node(&mut g, n, alpha).unwrap();
            assert_abs_diff_eq!(g.value(d).item(), renyi_alpha_mc(&r, alpha).unwrap(), epsilon = 1e-13);
        }
    }

    #[test]
    fn kld_nodes_match_closed_form() {
        let mu = vec![0.3, -1.0, 0.0];
        let sd = vec![0.5, 1.0, 2.0];
        let mut g = Graph::new();
        let m = g.param(Tensor::vector(mu.clone()));
        let s = g.param(Tensor::vector(sd.clone()));
        let fwd = kld_standard_normal_node(&mut g, m, s).unwrap();
        let rev = reverse_kld_standard_normal_node(&mut g, m, s).unwrap();
        let zeros = [0.0; 3];
        let ones = [1.0; 3];
        assert_abs_diff_eq!(g.value(fwd).item(), kld_gaussian_closed(&mu, &sd, &zeros, &ones).unwrap(), epsilon = 1e-13);
        assert_abs_diff_eq!(g.value(rev).item(), kld_gaussian_closed(&zeros, &ones, &mu, &sd).unwrap(), epsilon = 1e-13);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        // D_α estimated from frozen ε, as a function of (μ, ρ).
        let eps: Vec<Vec<f64>> = vec![vec![0.3, -1.2], vec![1.1, 0.4], vec![-0.7, 0.2]];
        for alpha in [0.5, 2.0] {
            let eps = eps.clone();
            let err = tensor::gradcheck(
                move |g: &mut Graph, p: &[NodeId]| {
                    let sigma = g.softplus(p[1]);
                    let thetas: Vec<NodeId> = eps
                        .iter()
                        .map(|e| crate::model::reparameterize(g, p[0], sigma, e.clone()))
                        .collect::<Result<_>>()?;
                    let r = log_ratios_node(g, &thetas, p[0], sigma)?;
                    renyi_alpha_mc_node(g, r, alpha)
                },
                &[Tensor::vector(vec![0.4, -0.3]), Tensor::vector(vec![-0.5, 0.8])],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-5, "alpha {alpha}: {err}");
        }
    }
}
