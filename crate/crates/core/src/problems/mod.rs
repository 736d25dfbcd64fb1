//! The four benchmark operators and their dataset generators.

mod solvers;

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use solvers::{
    cumulative_trapezoid, interp_unit, rk4, solve_advection_diffusion, solve_antiderivative,
    solve_diffusion_reaction, solve_pendulum, solve_pendulum_steps, DiffusionReaction, GridSolution,
};

use crate::datafile::{read_container, split_arrays, write_container, DATASET_MAGIC};
use crate::random_fields::{periodic_embed, unit_grid, GrfSampler, Kernel, KernelSpec};
use crate::rng::{streams, StreamRng};
use crate::{Error, Result};

/// Points of the dense grid ODE reference solutions are interpolated from.
pub const ODE_DENSE_POINTS: usize = 1001;
pub const PENDULUM_K: f64 = 1.0;
pub const DR_DIFFUSIVITY: f64 = 0.01;
pub const DR_REACTION: f64 = 0.01;
pub const AD_DIFFUSIVITY: f64 = 0.1;
pub const PDE_GRID: usize = 100;
pub const TRAIN_LENGTHSCALE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemId {
    Antiderivative,
    Pendulum,
    DiffusionReaction,
    AdvectionDiffusion,
}

impl ProblemId {
    pub const ALL: [ProblemId; 4] =
        [ProblemId::Antiderivative, ProblemId::Pendulum, ProblemId::DiffusionReaction, ProblemId::AdvectionDiffusion];

    pub fn name(self) -> &'static str {
        match self {
            ProblemId::Antiderivative => "antiderivative",
            ProblemId::Pendulum => "pendulum",
            ProblemId::DiffusionReaction => "diffusion_reaction",
            ProblemId::AdvectionDiffusion => "advection_diffusion",
        }
    }

    /// Training-set size, sensor count and queries per example.
    pub fn default_sizes(self) -> (usize, usize, usize) {
        match self {
            ProblemId::Antiderivative => (3000, 100, 20),
            ProblemId::Pendulum => (3500, 100, 20),
            ProblemId::DiffusionReaction => (500, 100, 100),
            ProblemId::AdvectionDiffusion => (1000, 100, 100),
        }
    }

    pub fn query_dim(self) -> usize {
        if self.is_pde() {
            2
        } else {
            1
        }
    }

    pub fn is_pde(self) -> bool {
        matches!(self, ProblemId::DiffusionReaction | ProblemId::AdvectionDiffusion)
    }
}

impl fmt::Display for ProblemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProblemId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ProblemId::ALL
            .into_iter()
            .find(|p| p.name() == s || p.name().replace('_', "-") == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown problem {s:?}")))
    }
}

/// Where each example is observed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum QuerySampling {
    /// `n` fresh random points per example.
    Random { n: usize },
    /// The full evaluation grid, shared by all examples: 100 equidistant
    /// points for ODEs, the whole space-time grid for PDEs.
    FullGrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryLayout {
    /// `query_points` is `n_examples × n_queries × query_dim`.
    PerExample,
    /// `query_points` is `n_queries × query_dim`, common to all examples.
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodVariant {
    RbfL02,
    RationalQuadratic,
}

impl OodVariant {
    pub const ALL: [OodVariant; 2] = [OodVariant::RbfL02, OodVariant::RationalQuadratic];

    pub fn name(self) -> &'static str {
        match self {
            OodVariant::RbfL02 => "rbf_l02",
            OodVariant::RationalQuadratic => "rational_quadratic",
        }
    }

    pub fn kernel(self) -> Kernel {
        match self {
            OodVariant::RbfL02 => Kernel::rbf(0.2),
            OodVariant::RationalQuadratic => Kernel::rational_quadratic(0.5, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    pub method: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dense_points: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub substeps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diffusivity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reaction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<f64>,
}

impl SolverSettings {
    fn for_problem(problem: ProblemId) -> Self {
        let base = SolverSettings {
            method: String::new(),
            dense_points: None,
            grid: None,
            substeps: None,
            diffusivity: None,
            reaction: None,
            k: None,
        };
        match problem {
            ProblemId::Antiderivative => SolverSettings {
                method: "cumulative_trapezoid".into(),
                dense_points: Some(ODE_DENSE_POINTS),
                ..base
            },
            ProblemId::Pendulum => SolverSettings {
                method: "rk4".into(),
                dense_points: Some(ODE_DENSE_POINTS),
                k: Some(PENDULUM_K),
                ..base
            },
            ProblemId::DiffusionReaction => SolverSettings {
                method: "crank_nicolson_heun".into(),
                grid: Some([PDE_GRID, PDE_GRID]),
                substeps: Some(DiffusionReaction::default().substeps),
                diffusivity: Some(DR_DIFFUSIVITY),
                reaction: Some(DR_REACTION),
                ..base
            },
            ProblemId::AdvectionDiffusion => SolverSettings {
                method: "spectral_exact".into(),
                grid: Some([PDE_GRID, PDE_GRID]),
                diffusivity: Some(AD_DIFFUSIVITY),
                ..base
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub problem: ProblemId,
    pub n_examples: usize,
    pub n_sensors: usize,
    pub n_queries: usize,
    pub query_dim: usize,
    pub query_layout: QueryLayout,
    pub kernel: KernelSpec,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<OodVariant>,
    pub solver: SolverSettings,
}

/// `(a⁽ⁱ⁾, y_k, s⁽ⁱ⁾(y_k))` triples in flat row-major arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorDataset {
    pub meta: DatasetMeta,
    /// `n_examples × n_sensors`
    pub branch_inputs: Vec<f64>,
    /// see [`QueryLayout`]
    pub query_points: Vec<f64>,
    /// `n_examples × n_queries`
    pub targets: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub problem: ProblemId,
    pub n_examples: usize,
    pub n_sensors: usize,
    pub queries: QuerySampling,
    pub kernel: KernelSpec,
    pub seed: u64,
}

impl DatasetSpec {
    /// Training-set defaults for `problem`.
    pub fn training(problem: ProblemId, seed: u64) -> Self {
        let (n, m, q) = problem.default_sizes();
        Self {
            problem,
            n_examples: n,
            n_sensors: m,
            queries: QuerySampling::Random { n: q },
            kernel: KernelSpec::new(Kernel::rbf(TRAIN_LENGTHSCALE)),
            seed,
        }
    }

    /// Evaluation set on the full grid.
    pub fn test(problem: ProblemId, n_examples: usize, seed: u64) -> Self {
        Self { n_examples, queries: QuerySampling::FullGrid, ..Self::training(problem, seed) }
    }
}

impl OperatorDataset {
    pub fn n_examples(&self) -> usize {
        self.meta.n_examples
    }

    pub fn n_queries(&self) -> usize {
        self.meta.n_queries
    }

    pub fn branch_input(&self, i: usize) -> &[f64] {
        let m = self.meta.n_sensors;
        &self.branch_inputs[i * m..(i + 1) * m]
    }

    pub fn targets_of(&self, i: usize) -> &[f64] {
        let q = self.meta.n_queries;
        &self.targets[i * q..(i + 1) * q]
    }

    /// Query coordinates used by example `i`, `n_queries × query_dim`.
    pub fn queries_of(&self, i: usize) -> &[f64] {
        let w = self.meta.n_queries * self.meta.query_dim;
        match self.meta.query_layout {
            QueryLayout::PerExample => &self.query_points[i * w..(i + 1) * w],
            QueryLayout::Shared => &self.query_points,
        }
    }

    /// The examples `range` as a new dataset (queries copied as needed).
    pub fn subset(&self, range: std::ops::Range<usize>) -> OperatorDataset {
        let (m, q, d) = (self.meta.n_sensors, self.meta.n_queries, self.meta.query_dim);
        let query_points = match self.meta.query_layout {
            QueryLayout::PerExample => self.query_points[range.start * q * d..range.end * q * d].to_vec(),
            QueryLayout::Shared => self.query_points.clone(),
        };
        OperatorDataset {
            meta: DatasetMeta { n_examples: range.len(), ..self.meta.clone() },
            branch_inputs: self.branch_inputs[range.start * m..range.end * m].to_vec(),
            query_points,
            targets: self.targets[range.start * q..range.end * q].to_vec(),
        }
    }

    fn query_len(meta: &DatasetMeta) -> usize {
        match meta.query_layout {
            QueryLayout::PerExample => meta.n_examples * meta.n_queries * meta.query_dim,
            QueryLayout::Shared => meta.n_queries * meta.query_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.meta;
        if self.branch_inputs.len() != m.n_examples * m.n_sensors
            || self.targets.len() != m.n_examples * m.n_queries
            || self.query_points.len() != Self::query_len(m)
        {
            return Err(Error::Format("dataset arrays disagree with metadata extents".into()));
        }
        let all = self.branch_inputs.iter().chain(&self.query_points).chain(&self.targets);
        if all.clone().any(|v| !v.is_finite()) {
            return Err(Error::Format("dataset contains non-finite values".into()));
        }
        if self.query_points.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Format("query point outside the unit domain".into()));
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let meta = serde_json::to_vec(&self.meta)?;
        write_container(w, &DATASET_MAGIC, &meta, &[&self.branch_inputs, &self.query_points, &self.targets])
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let (meta, values) = read_container(r, &DATASET_MAGIC)?;
        let meta: DatasetMeta = serde_json::from_slice(&meta)?;
        let lens = [meta.n_examples * meta.n_sensors, Self::query_len(&meta), meta.n_examples * meta.n_queries];
        let mut parts = split_arrays(values, &lens)?.into_iter();
        let ds = OperatorDataset {
            meta,
            branch_inputs: parts.next().unwrap(),
            query_points: parts.next().unwrap(),
            targets: parts.next().unwrap(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

/// Reference solution of one example, ready to be queried.
enum Solution {
    /// ODE output on a dense equidistant grid over `[0, 1]`.
    Dense(Vec<f64>),
    Grid(GridSolution),
}

fn solve_example(problem: ProblemId, u: &[f64]) -> Result<Solution> {
    match problem {
        ProblemId::Antiderivative => {
            let dense: Vec<f64> = unit_grid(ODE_DENSE_POINTS).iter().map(|&x| interp_unit(u, x)).collect();
            Ok(Solution::Dense(cumulative_trapezoid(&dense, 1.0 / (ODE_DENSE_POINTS - 1) as f64)))
        }
        ProblemId::Pendulum => Ok(Solution::Dense(solve_pendulum_steps(u, PENDULUM_K, ODE_DENSE_POINTS - 1)?)),
        ProblemId::DiffusionReaction => {
            let dr = DiffusionReaction { diffusivity: DR_DIFFUSIVITY, reaction: DR_REACTION, ..Default::default() };
            if u.len() != dr.nx {
                return Err(Error::Shape(format!("diffusion-reaction needs {} sensors, got {}", dr.nx, u.len())));
            }
            Ok(Solution::Grid(dr.solve(u)?))
        }
        ProblemId::AdvectionDiffusion => {
            if u.len() != PDE_GRID {
                return Err(Error::Shape(format!("advection-diffusion needs {PDE_GRID} sensors, got {}", u.len())));
            }
            Ok(Solution::Grid(solve_advection_diffusion(u, AD_DIFFUSIVITY, PDE_GRID)?))
        }
    }
}

/// Query points for one example (flattened) and how to read targets off the solution.
enum Queries {
    Continuous(Vec<f64>),
    GridCells(Vec<(usize, usize)>),
}

fn pde_cell_coords(cells: &[(usize, usize)]) -> Vec<f64> {
    let h = 1.0 / (PDE_GRID - 1) as f64;
    cells.iter().flat_map(|&(ix, it)| [ix as f64 * h, it as f64 * h]).collect()
}

fn full_grid_queries(problem: ProblemId) -> Queries {
    if problem.is_pde() {
        Queries::GridCells((0..PDE_GRID).flat_map(|ix| (0..PDE_GRID).map(move |it| (ix, it))).collect())
    } else {
        Queries::Continuous(unit_grid(100))
    }
}

fn evaluate(sol: &Solution, q: &Queries) -> Vec<f64> {
    match (sol, q) {
        (Solution::Dense(s), Queries::Continuous(ts)) => ts.iter().map(|&t| interp_unit(s, t)).collect(),
        (Solution::Grid(g), Queries::GridCells(cells)) => cells.iter().map(|&(ix, it)| g.at(ix, it)).collect(),
        _ => unreachable!("query kind always matches the problem kind"),
    }
}

fn generate(
    problem: ProblemId,
    n_examples: usize,
    n_sensors: usize,
    queries: QuerySampling,
    kernel: KernelSpec,
    seed: u64,
    variant: Option<OodVariant>,
) -> Result<OperatorDataset> {
    if n_examples == 0 || n_sensors < 2 {
        return Err(Error::InvalidArgument(format!("need ≥1 example and ≥2 sensors, got {n_examples} and {n_sensors}")));
    }
    let sensors = unit_grid(n_sensors);
    let field_grid = if problem == ProblemId::AdvectionDiffusion { periodic_embed(&sensors) } else { sensors };
    let sampler = GrfSampler::new(kernel, field_grid, seed)?;
    let inputs = sampler.sample(n_examples);

    let (per_example, n_queries) = match queries {
        QuerySampling::Random { n } => {
            let mut rng = StreamRng::new(seed, streams::QUERIES);
            let qs: Vec<Queries> = if problem.is_pde() {
                let cells = PDE_GRID * PDE_GRID;
                if n > cells {
                    return Err(Error::InvalidArgument(format!(
                        "{n} queries requested but the grid only has {cells} points"
                    )));
                }
                (0..n_examples)
                    .map(|_| {
                        let idx = rng.choose_distinct(cells, n);
                        Queries::GridCells(idx.into_iter().map(|c| (c / PDE_GRID, c % PDE_GRID)).collect())
                    })
                    .collect()
            } else {
                (0..n_examples)
                    .map(|_| Queries::Continuous((0..n).map(|_| rng.uniform_open_closed()).collect()))
                    .collect()
            };
            (Some(qs), n)
        }
        QuerySampling::FullGrid => (None, if problem.is_pde() { PDE_GRID * PDE_GRID } else { 100 }),
    };
    let shared = full_grid_queries(problem);

    let targets: Vec<Vec<f64>> = inputs
        .par_iter()
        .enumerate()
        .map(|(i, u)| {
            let sol = solve_example(problem, u)?;
            let q = per_example.as_ref().map_or(&shared, |qs| &qs[i]);
            Ok(evaluate(&sol, q))
        })
        .collect::<Result<_>>()?;

    let coords = |q: &Queries| match q {
        Queries::Continuous(ts) => ts.clone(),
        Queries::GridCells(cells) => pde_cell_coords(cells),
    };
    let (query_points, layout) = match &per_example {
        Some(qs) => (qs.iter().flat_map(coords).collect(), QueryLayout::PerExample),
        None => (coords(&shared), QueryLayout::Shared),
    };
    let ds = OperatorDataset {
        meta: DatasetMeta {
            problem,
            n_examples,
            n_sensors,
            n_queries,
            query_dim: problem.query_dim(),
            query_layout: layout,
            kernel,
            seed,
            variant,
            solver: SolverSettings::for_problem(problem),
        },
        branch_inputs: inputs.concat(),
        query_points,
        targets: targets.concat(),
    };
    ds.validate()?;
    Ok(ds)
}

pub fn build_dataset(spec: &DatasetSpec) -> Result<OperatorDataset> {
    if spec.problem.is_pde() && spec.n_sensors != PDE_GRID {
        return Err(Error::InvalidArgument(format!("PDE problems use {PDE_GRID} sensors, got {}", spec.n_sensors)));
    }
    generate(spec.problem, spec.n_examples, spec.n_sensors, spec.queries, spec.kernel, spec.seed, None)
}

/// Out-of-distribution advection-diffusion initial conditions, observed on
/// the full space-time grid.
pub fn build_ood_set(variant: OodVariant, n_examples: usize, seed: u64) -> Result<OperatorDataset> {
    generate(
        ProblemId::AdvectionDiffusion,
        n_examples,
        PDE_GRID,
        QuerySampling::FullGrid,
        KernelSpec::new(variant.kernel()),
        seed,
        Some(variant),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn problem_names_round_trip() {
        for p in ProblemId::ALL {
            assert_eq!(p.name().parse::<ProblemId>().unwrap(), p);
        }
        assert_eq!("advection-diffusion".parse::<ProblemId>().unwrap(), ProblemId::AdvectionDiffusion);
        assert!("heat".parse::<ProblemId>().is_err());
    }

    #[test]
    fn paper_default_sizes() {
        assert_eq!(ProblemId::Antiderivative.default_sizes(), (3000, 100, 20));
        assert_eq!(ProblemId::Pendulum.default_sizes(), (3500, 100, 20));
        assert_eq!(ProblemId::DiffusionReaction.default_sizes(), (500, 100, 100));
        assert_eq!(ProblemId::AdvectionDiffusion.default_sizes(), (1000, 100, 100));
    }

    #[test]
    fn too_many_pde_queries() {
        let spec = DatasetSpec {
            n_examples: 1,
            queries: QuerySampling::Random { n: PDE_GRID * PDE_GRID + 1 },
            ..DatasetSpec::training(ProblemId::DiffusionReaction, 0)
        };
        assert!(matches!(build_dataset(&spec), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn shapes_and_domain() {
        for p in ProblemId::ALL {
            let spec = DatasetSpec { n_examples: 3, ..DatasetSpec::training(p, 1) };
            let ds = build_dataset(&spec).unwrap();
            let (_, m, q) = p.default_sizes();
            assert_eq!(ds.branch_inputs.len(), 3 * m);
            assert_eq!(ds.targets.len(), 3 * q);
            assert_eq!(ds.query_points.len(), 3 * q * p.query_dim());
            assert_eq!(ds.meta.query_layout, QueryLayout::PerExample);
            ds.validate().unwrap();
        }
    }

    #[test]
    fn pde_queries_distinct_per_example() {
        let spec = DatasetSpec { n_examples: 2, ..DatasetSpec::training(ProblemId::AdvectionDiffusion, 3) };
        let ds = build_dataset(&spec).unwrap();
        let pts: Vec<(u64, u64)> =
            ds.queries_of(0).chunks(2).map(|c| (c[0].to_bits(), c[1].to_bits())).collect();
        let mut uniq = pts.clone();
        uniq.sort_unstable();
        uniq.dedup();
        assert_eq!(uniq.len(), 100);
        assert_ne!(ds.queries_of(0), ds.queries_of(1));
    }

    #[test]
    fn ood_metadata() {
        let a = build_ood_set(OodVariant::RbfL02, 3, 0).unwrap();
        assert_eq!(a.meta.kernel.kernel, Kernel::rbf(0.2));
        assert_eq!(a.meta.variant, Some(OodVariant::RbfL02));
        let b = build_ood_set(OodVariant::RationalQuadratic, 3, 0).unwrap();
        assert_eq!(b.meta.kernel.kernel, Kernel::rational_quadratic(0.5, 1.0));
        assert_eq!(b.n_queries(), 10_000);
        assert_eq!(b.meta.query_layout, QueryLayout::Shared);
        assert_eq!(b.query_points.len(), 20_000);
    }

    #[test]
    fn subset_keeps_alignment() {
        let ds = build_dataset(&DatasetSpec { n_examples: 4, ..DatasetSpec::training(ProblemId::Antiderivative, 2) })
            .unwrap();
        let sub = ds.subset(1..3);
        assert_eq!(sub.n_examples(), 2);
        assert_eq!(sub.branch_input(0), ds.branch_input(1));
        assert_eq!(sub.queries_of(1), ds.queries_of(2));
        assert_eq!(sub.targets_of(1), ds.targets_of(2));
    }
}
