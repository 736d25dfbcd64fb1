//! Branch/trunk operator network with a two-headed Gaussian output.
//!
//! Both sub-networks end in `2P` linear units. The first `P` outputs of
//! branch and trunk are combined by dot product into the predictive mean,
//! the last `P` into a raw scale that passes through softplus plus a floor.
//!
//! All network weights live in one flat parameter vector `θ` of length `L`:
//! for each branch layer its weight matrix (`out × in`, row-major) then its
//! bias, the same for every trunk layer, and finally the mean and scale head
//! biases. A variational model keeps a mean `μ` and raw scale `ρ` per entry
//! with posterior std `softplus(ρ)`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datafile::{read_container, split_arrays, write_container, CHECKPOINT_MAGIC};
use crate::problems::{ProblemId, QueryLayout};
use crate::rng::{streams, StreamRng};
use crate::tensor::{self, Graph, NodeId, Tensor};
use crate::{Error, Result};

pub const DEFAULT_SIGMA_FLOOR: f64 = 1e-3;
pub const INIT_MEAN_STD: f64 = 0.05;
pub const INIT_RHO: f64 = -3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    /// Layer widths including input and the `2P` output.
    pub branch: Vec<usize>,
    pub trunk: Vec<usize>,
    pub latent: usize,
    pub sigma_floor: f64,
}

impl Architecture {
    /// Sub-networks with `depth` linear layers each; hidden layers have
    /// `width` units and the output layer `2·latent`.
    pub fn new(n_sensors: usize, query_dim: usize, width: usize, depth: usize, latent: usize) -> Self {
        let stack = |input: usize| {
            let mut w = vec![input];
            w.extend(std::iter::repeat_n(width, depth.saturating_sub(1)));
            w.push(2 * latent);
            w
        };
        Self { branch: stack(n_sensors), trunk: stack(query_dim), latent, sigma_floor: DEFAULT_SIGMA_FLOOR }
    }

    /// Default widths and depths per problem, with `P` equal to the width.
    pub fn for_problem(problem: ProblemId, n_sensors: usize) -> Self {
        let (width, depth) = match problem {
            ProblemId::Antiderivative | ProblemId::Pendulum => (25, 3),
            ProblemId::DiffusionReaction => (25, 4),
            ProblemId::AdvectionDiffusion => (35, 4),
        };
        Self::new(n_sensors, problem.query_dim(), width, depth, width)
    }

    fn layer_params(widths: &[usize]) -> usize {
        widths.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    /// Length `L` of `θ`.
    pub fn n_params(&self) -> usize {
        Self::layer_params(&self.branch) + Self::layer_params(&self.trunk) + 2
    }

    pub fn n_sensors(&self) -> usize {
        self.branch[0]
    }

    pub fn query_dim(&self) -> usize {
        self.trunk[0]
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.branch.len() >= 2
            && self.trunk.len() >= 2
            && self.latent > 0
            && self.branch.iter().chain(&self.trunk).all(|&w| w > 0)
            && *self.branch.last().unwrap() == 2 * self.latent
            && *self.trunk.last().unwrap() == 2 * self.latent
            && self.sigma_floor > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("inconsistent architecture {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Deterministic,
    Variational,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeepONet {
    pub arch: Architecture,
    pub kind: ModelKind,
    /// Parameter values (deterministic) or posterior means (variational).
    pub mu: Vec<f64>,
    /// Raw posterior scales; ignored by a deterministic model.
    pub rho: Vec<f64>,
}

/// Mean and std heads, each `[n_examples, n_queries]`.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    pub mean: NodeId,
    pub std: Option<NodeId>,
}

/// Network inputs already placed on a graph.
#[derive(Debug, Clone, Copy)]
pub struct InputNodes {
    /// `[n_examples, n_sensors]`
    pub branch: NodeId,
    /// `[n_examples·n_queries, D]` or `[n_queries, D]`
    pub queries: NodeId,
    pub layout: QueryLayout,
    pub n_examples: usize,
    pub n_queries: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    architecture: Architecture,
    kind: ModelKind,
    n_params: usize,
    depth_convention: String,
    latent_size: usize,
}

impl DeepONet {
    /// Seeded initialisation from the init stream.
    ///
    /// Variational: `μ ~ N(0, 0.05²)` and `ρ = -3`. Deterministic: Glorot
    /// normal weights `N(0, 2/(fan_in + fan_out))` with zero biases.
    pub fn init(arch: Architecture, kind: ModelKind, seed: u64) -> Result<Self> {
        arch.validate()?;
        let l = arch.n_params();
        let mut rng = StreamRng::new(seed, streams::INIT);
        let mu = match kind {
            ModelKind::Variational => rng.normals(l).into_iter().map(|z| INIT_MEAN_STD * z).collect(),
            ModelKind::Deterministic => {
                let mut mu = Vec::with_capacity(l);
                for widths in [&arch.branch, &arch.trunk] {
                    for w in widths.windows(2) {
                        let sd = (2.0 / (w[0] + w[1]) as f64).sqrt();
                        mu.extend(rng.normals(w[0] * w[1]).into_iter().map(|z| sd * z));
                        mu.extend(std::iter::repeat_n(0.0, w[1]));
                    }
                }
                mu.extend([0.0, 0.0]);
                mu
            }
        };
        Ok(Self { arch, kind, mu, rho: vec![INIT_RHO; l] })
    }

    pub fn n_params(&self) -> usize {
        self.arch.n_params()
    }

    pub fn posterior_std(&self) -> Vec<f64> {
        self.rho.iter().map(|&r| tensor::softplus(r)).collect()
    }

    /// Concrete parameters `μ + softplus(ρ) ⊙ ε`.
    pub fn sample_parameters(&self, eps: &[f64]) -> Result<Vec<f64>> {
        if eps.len() != self.n_params() {
            return Err(Error::Shape(format!("epsilon has {} entries, model has {}", eps.len(), self.n_params())));
        }
        Ok(self.mu.iter().zip(&self.rho).zip(eps).map(|((m, r), e)| m + tensor::softplus(*r) * e).collect())
    }

    /// Place branch inputs and query points for `n_examples` examples on `g`.
    pub fn inputs(
        &self,
        g: &mut Graph,
        branch: &[f64],
        queries: &[f64],
        layout: QueryLayout,
        n_examples: usize,
        n_queries: usize,
    ) -> Result<InputNodes> {
        let (m, d) = (self.arch.n_sensors(), self.arch.query_dim());
        let rows = match layout {
            QueryLayout::PerExample => n_examples * n_queries,
            QueryLayout::Shared => n_queries,
        };
        let b = g.constant(Tensor::matrix(n_examples, m, branch.to_vec())?);
        let q = g.constant(Tensor::matrix(rows, d, queries.to_vec())?);
        Ok(InputNodes { branch: b, queries: q, layout, n_examples, n_queries })
    }

    fn mlp(&self, g: &mut Graph, theta: NodeId, offset: &mut usize, widths: &[usize], x: NodeId) -> Result<NodeId> {
        let mut h = x;
        let n_layers = widths.len() - 1;
        for (l, w) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let wflat = g.slice_last(theta, *offset, *offset + fan_in * fan_out)?;
            let weight = g.reshape(wflat, &[fan_out, fan_in])?;
            *offset += fan_in * fan_out;
            let bias = g.slice_last(theta, *offset, *offset + fan_out)?;
            *offset += fan_out;
            h = g.matmul_bt(h, weight)?;
            h = g.add(h, bias)?;
            if l + 1 < n_layers {
                h = g.tanh(h);
            }
        }
        Ok(h)
    }

    fn head(&self, g: &mut Graph, b: NodeId, psi: NodeId, bias: NodeId, x: &InputNodes) -> Result<NodeId> {
        let out = match x.layout {
            QueryLayout::PerExample => {
                let rep = g.repeat_rows(b, x.n_queries)?;
                let prod = g.mul(rep, psi)?;
                let dot = g.sum_axis(prod, 1)?;
                g.reshape(dot, &[x.n_examples, x.n_queries])?
            }
            QueryLayout::Shared => g.matmul_bt(b, psi)?,
        };
        g.add(out, bias)
    }

    /// Predictive heads for concrete parameters `theta` (shape `[L]`).
    pub fn forward(&self, g: &mut Graph, theta: NodeId, x: &InputNodes, with_std: bool) -> Result<HeadOutput> {
        let l = self.n_params();
        if g.shape(theta) != [l] {
            return Err(Error::Shape(format!("theta has shape {:?}, expected [{l}]", g.shape(theta))));
        }
        let p = self.arch.latent;
        let mut offset = 0;
        let branch = self.mlp(g, theta, &mut offset, &self.arch.branch, x.branch)?;
        let trunk = self.mlp(g, theta, &mut offset, &self.arch.trunk, x.queries)?;
        let b0 = g.slice_last(theta, offset, offset + 1)?;
        let b0 = g.reshape(b0, &[])?;

        let b = g.slice_last(branch, 0, p)?;
        let psi = g.slice_last(trunk, 0, p)?;
        let mean = self.head(g, b, psi, b0, x)?;
        let std = if with_std {
            let b0s = g.slice_last(theta, offset + 1, offset + 2)?;
            let b0s = g.reshape(b0s, &[])?;
            let bs = g.slice_last(branch, p, 2 * p)?;
            let psis = g.slice_last(trunk, p, 2 * p)?;
            let raw = self.head(g, bs, psis, b0s, x)?;
            let sp = g.softplus(raw);
            Some(g.affine(sp, 1.0, self.arch.sigma_floor))
        } else {
            None
        };
        Ok(HeadOutput { mean, std })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let meta = CheckpointMeta {
            architecture: self.arch.clone(),
            kind: self.kind,
            n_params: self.n_params(),
            depth_convention: "linear_layers_per_subnetwork".into(),
            latent_size: self.arch.latent,
        };
        write_container(w, &CHECKPOINT_MAGIC, &serde_json::to_vec(&meta)?, &[&self.mu, &self.rho])
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let (meta, values) = read_container(r, &CHECKPOINT_MAGIC)?;
        let meta: CheckpointMeta = serde_json::from_slice(&meta)?;
        meta.architecture.validate()?;
        let l = meta.architecture.n_params();
        if l != meta.n_params {
            return Err(Error::Format(format!("checkpoint declares {} params, architecture has {l}", meta.n_params)));
        }
        let mut parts = split_arrays(values, &[l, l])?.into_iter();
        Ok(Self { arch: meta.architecture, kind: meta.kind, mu: parts.next().unwrap(), rho: parts.next().unwrap() })
    }
}

/// `θ = μ + σ ⊙ ε` on the graph, with `σ = softplus(ρ)` computed by the caller.
pub fn reparameterize(g: &mut Graph, mu: NodeId, sigma: NodeId, eps: Vec<f64>) -> Result<NodeId> {
    let n = g.value(mu).numel();
    if eps.len() != n {
        return Err(Error::Shape(format!("epsilon has {} entries, expected {n}", eps.len())));
    }
    let e = g.constant(Tensor::vector(eps));
    let scaled = g.mul(sigma, e)?;
    g.add(mu, scaled)
}

/// `Σ ln N(θ_l; 0, 1)` on the graph.
pub fn log_prior(g: &mut Graph, theta: NodeId) -> Result<NodeId> {
    let shape = g.shape(theta).to_vec();
    let zero = g.constant(Tensor::zeros(&shape));
    let one = g.constant(Tensor::full(&shape, 1.0));
    let lp = g.gaussian_log_pdf(theta, zero, one)?;
    Ok(g.sum(lp))
}

/// `Σ ln N(θ_l; μ_l, σ_l)` on the graph.
pub fn log_q(g: &mut Graph, theta: NodeId, mu: NodeId, sigma: NodeId) -> Result<NodeId> {
    let lp = g.gaussian_log_pdf(theta, mu, sigma)?;
    Ok(g.sum(lp))
}

pub fn log_prior_value(theta: &[f64]) -> f64 {
    theta.iter().map(|&t| tensor::gaussian_log_pdf(t, 0.0, 1.0)).sum()
}

/// `Σ ln N(θ_l; μ_l, softplus(ρ_l))`.
pub fn log_q_value(theta: &[f64], mu: &[f64], rho: &[f64]) -> Result<f64> {
    if theta.len() != mu.len() || mu.len() != rho.len() {
        return Err(Error::Shape(format!("lengths {}, {}, {}", theta.len(), mu.len(), rho.len())));
    }
    Ok((0..theta.len()).map(|i| tensor::gaussian_log_pdf(theta[i], mu[i], tensor::softplus(rho[i]))).sum())
}
