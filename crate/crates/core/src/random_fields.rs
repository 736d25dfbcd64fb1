//! Zero-mean Gaussian random fields on 1-D grids, sampled through a jittered
//! Cholesky factor of the kernel Gram matrix.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::rng::{streams, StreamRng};
use crate::{Error, Result};

pub const DEFAULT_JITTER: f64 = 1e-6;

/// Which algebraic form of the rational-quadratic kernel to evaluate.
///
/// `Standard` is `(1 + d²/(2ρℓ²))^(-ρ)`. `ExpPrinted` is the variant with an
/// outer exponential, `exp(1 + d²/(2ρℓ²))^(-ρ) = e^(-ρ)·exp(-d²/(2ℓ²))`, kept
/// for comparison; its diagonal is `e^(-ρ)` rather than 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RqForm {
    #[default]
    Standard,
    ExpPrinted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Kernel {
    Rbf { lengthscale: f64 },
    RationalQuadratic { lengthscale: f64, scale_mixture: f64, form: RqForm },
}

impl Kernel {
    pub fn rbf(lengthscale: f64) -> Self {
        Kernel::Rbf { lengthscale }
    }

    pub fn rational_quadratic(lengthscale: f64, scale_mixture: f64) -> Self {
        Kernel::RationalQuadratic { lengthscale, scale_mixture, form: RqForm::Standard }
    }

    pub fn lengthscale(&self) -> f64 {
        match *self {
            Kernel::Rbf { lengthscale } | Kernel::RationalQuadratic { lengthscale, .. } => lengthscale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Kernel::Rbf { lengthscale } => lengthscale > 0.0 && lengthscale.is_finite(),
            Kernel::RationalQuadratic { lengthscale, scale_mixture, .. } => {
                lengthscale > 0.0 && lengthscale.is_finite() && scale_mixture > 0.0 && scale_mixture.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("kernel parameters must be positive and finite: {self:?}")))
        }
    }

    /// Covariance between two scalar locations.
    pub fn eval(&self, x1: f64, x2: f64) -> f64 {
        let d2 = (x1 - x2) * (x1 - x2);
        match *self {
            Kernel::Rbf { lengthscale: l } => (-d2 / (2.0 * l * l)).exp(),
            Kernel::RationalQuadratic { lengthscale: l, scale_mixture: rho, form } => {
                let base = 1.0 + d2 / (2.0 * rho * l * l);
                match form {
                    RqForm::Standard => base.powf(-rho),
                    RqForm::ExpPrinted => (-rho * base).exp(),
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kernel: Kernel,
    pub jitter: f64,
}

impl KernelSpec {
    pub fn new(kernel: Kernel) -> Self {
        Self { kernel, jitter: DEFAULT_JITTER }
    }
}

pub fn gram(kernel: &Kernel, xs: &[f64]) -> Result<DMatrix<f64>> {
    kernel.validate()?;
    let n = xs.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = kernel.eval(xs[i], xs[j]);
            if !v.is_finite() {
                return Err(Error::NumericFault(format!("kernel value at ({i}, {j}) is {v}")));
            }
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

/// Lower-triangular `L` with `L·Lᵀ = K + jitter·I`.
pub fn cholesky(k: &DMatrix<f64>, jitter: f64) -> Result<DMatrix<f64>> {
    if !k.is_square() {
        return Err(Error::Shape(format!("cholesky: matrix is {}x{}", k.nrows(), k.ncols())));
    }
    let mut kj = k.clone();
    for i in 0..kj.nrows() {
        kj[(i, i)] += jitter;
    }
    nalgebra::Cholesky::new(kj).map(|c| c.unpack()).ok_or_else(|| {
        Error::Cholesky(format!("matrix is not positive definite with jitter {jitter:e}; try a larger jitter"))
    })
}

/// `sin²(2πx)`, the coordinate change that makes sampled fields periodic on `[0, 1]`.
pub fn periodic_embed(xs: &[f64]) -> Vec<f64> {
    xs.iter().map(|x| (std::f64::consts::TAU * x).sin().powi(2)).collect()
}

/// `n` equidistant points on `[0, 1]`.
pub fn unit_grid(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.0];
    }
    (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
}

/// Coordinates closer than this are treated as the same location, so their
/// sampled values coincide exactly.
const MERGE_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct GrfSampler {
    spec: KernelSpec,
    grid: Vec<f64>,
    unique: Vec<f64>,
    /// `grid[i]` is sampled as `unique[index[i]]`
    index: Vec<usize>,
    chol: DMatrix<f64>,
    seed: u64,
}

impl GrfSampler {
    /// Factor the kernel on `grid`; the grid is used as given, so pass
    /// [`periodic_embed`]ded coordinates for periodic fields. Repeated
    /// coordinates share one field value.
    pub fn new(spec: KernelSpec, grid: Vec<f64>, seed: u64) -> Result<Self> {
        let mut order: Vec<usize> = (0..grid.len()).collect();
        order.sort_by(|&a, &b| grid[a].total_cmp(&grid[b]));
        let mut unique: Vec<f64> = Vec::new();
        let mut index = vec![0; grid.len()];
        for &i in &order {
            match unique.last() {
                Some(&u) if (grid[i] - u).abs() <= MERGE_TOL => {}
                _ => unique.push(grid[i]),
            }
            index[i] = unique.len() - 1;
        }
        let k = gram(&spec.kernel, &unique)?;
        let chol = cholesky(&k, spec.jitter)?;
        Ok(Self { spec, grid, unique, index, chol, seed })
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    /// Distinct coordinates the factor is built on, in ascending order.
    pub fn unique_grid(&self) -> &[f64] {
        &self.unique
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.chol
    }

    /// `n` fields drawn from the sampler's own seeded stream; repeated calls
    /// return identical samples.
    pub fn sample(&self, n: usize) -> Vec<Vec<f64>> {
        let mut rng = StreamRng::new(self.seed, streams::FIELD);
        self.sample_with(&mut rng, n)
    }

    pub fn sample_with(&self, rng: &mut StreamRng, n: usize) -> Vec<Vec<f64>> {
        let m = self.unique.len();
        (0..n)
            .map(|_| {
                let z = rng.normals(m);
                let field: Vec<f64> = (0..m).map(|i| (0..=i).map(|j| self.chol[(i, j)] * z[j]).sum()).collect();
                self.index.iter().map(|&k| field[k]).collect()
            })
            .collect()
    }
}
