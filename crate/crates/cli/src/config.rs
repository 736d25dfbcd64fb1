//! Experiment configuration: a JSON document layered over a preset.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use avidonet::evaluation::NllMode;
use avidonet::model::{Architecture, DEFAULT_SIGMA_FLOOR};
use avidonet::problems::ProblemId;
use avidonet::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::HarnessError;

pub const PAPER_ALPHAS: [f64; 11] = [0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0, 2.5, 3.0, 3.5];
pub const DESK_ALPHAS: [f64; 3] = [0.5, 1.0, 1.25];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Paper,
    Desk,
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            other => Err(format!("unknown preset '{other}', expected paper or desk")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureConfig {
    pub width: usize,
    /// Linear layers per sub-network.
    pub depth: usize,
    pub latent: usize,
    pub sigma_floor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_sensors: usize,
    pub n_queries: usize,
    pub n_test: usize,
    /// Examples per out-of-distribution set (advection-diffusion only).
    pub n_ood: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub n_mc: usize,
    pub record_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    pub draws: usize,
    pub nll_mode: NllMode,
    /// Test examples exported with 95% intervals.
    pub ci_examples: Vec<usize>,
    pub likelihood_draws: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub runs_dir: PathBuf,
    pub results_dir: PathBuf,
    pub plots_dir: PathBuf,
}

impl PathsConfig {
    pub fn under(root: &Path) -> Self {
        Self {
            data_dir: root.join("data"),
            runs_dir: root.join("cells"),
            results_dir: root.join("results"),
            plots_dir: root.join("plots"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemId,
    /// Base seed; datasets and grid cells derive theirs from it.
    pub seed: u64,
    pub architecture: ArchitectureConfig,
    pub data: DataConfig,
    pub alpha_grid: Vec<f64>,
    /// Independent runs per α.
    pub seeds: usize,
    /// Also train deterministic DeepONets, one per seed.
    pub include_deterministic: bool,
    pub train: OptimConfig,
    pub eval: EvalSettings,
    pub paths: PathsConfig,
    /// Write 0 instead of the measured wall time so reruns are byte-identical.
    pub record_wall_time: bool,
}

impl ExperimentConfig {
    pub fn preset(preset: Preset, problem: ProblemId) -> Self {
        let (n_train, n_sensors, n_queries) = problem.default_sizes();
        let (width, depth) = match problem {
            ProblemId::Antiderivative | ProblemId::Pendulum => (25, 3),
            ProblemId::DiffusionReaction => (25, 4),
            ProblemId::AdvectionDiffusion => (35, 4),
        };
        let paper = Self {
            problem,
            seed: 0,
            architecture: ArchitectureConfig { width, depth, latent: width, sigma_floor: DEFAULT_SIGMA_FLOOR },
            data: DataConfig { n_train, n_sensors, n_queries, n_test: 10_000, n_ood: 100 },
            alpha_grid: PAPER_ALPHAS.to_vec(),
            seeds: 10,
            include_deterministic: true,
            train: OptimConfig {
                epochs: 10_000,
                learning_rate: 1e-3,
                beta1: 0.9,
                beta2: 0.999,
                adam_eps: 1e-8,
                n_mc: 25,
                record_every: 10,
            },
            eval: EvalSettings {
                draws: 100,
                nll_mode: NllMode::Mixture,
                ci_examples: vec![0, 1],
                likelihood_draws: 1,
            },
            paths: PathsConfig::under(Path::new("runs")),
            record_wall_time: true,
        };
        match preset {
            Preset::Paper => paper,
            Preset::Desk => Self {
                data: DataConfig { n_train: n_train.min(300), n_test: 200, ..paper.data },
                alpha_grid: DESK_ALPHAS.to_vec(),
                seeds: 3,
                train: OptimConfig { epochs: 2000, n_mc: 5, ..paper.train },
                ..paper
            },
        }
    }

    /// Preset defaults overlaid with the keys present in `doc`.
    pub fn from_json(doc: &str, preset: Preset, problem: Option<ProblemId>) -> Result<Self, HarnessError> {
        let mut overlay: Value = serde_json::from_str(doc).map_err(|e| HarnessError::Config(format!("invalid JSON: {e}")))?;
        if !overlay.is_object() {
            return Err(HarnessError::Config("configuration must be a JSON object".into()));
        }
        let problem = match problem {
            Some(p) => p,
            None => match overlay.get("problem") {
                Some(v) => serde_json::from_value(v.clone())
                    .map_err(|e| HarnessError::Config(format!("invalid problem: {e}")))?,
                None => return Err(HarnessError::Config("no problem given in the configuration or on the command line".into())),
            },
        };
        overlay["problem"] = serde_json::to_value(problem).expect("problem id serialises");
        let mut base = serde_json::to_value(Self::preset(preset, problem)).expect("config serialises");
        merge(&mut base, overlay);
        let cfg: Self = serde_json::from_value(base).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, preset: Preset, problem: Option<ProblemId>) -> Result<Self, HarnessError> {
        let doc = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&doc, preset, problem)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        if self.alpha_grid.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return bad(format!("alpha grid must hold finite non-negative values, got {:?}", self.alpha_grid));
        }
        let mut sorted = self.alpha_grid.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return bad("alpha grid contains duplicates".into());
        }
        if self.seeds == 0 {
            return bad("seeds must be at least 1".into());
        }
        let d = &self.data;
        if d.n_train == 0 || d.n_test == 0 || d.n_queries == 0 || d.n_sensors < 2 {
            return bad(format!("invalid data sizes {d:?}"));
        }
        if self.problem.is_pde() && d.n_sensors != avidonet::problems::PDE_GRID {
            return bad(format!("{} uses {} sensors", self.problem, avidonet::problems::PDE_GRID));
        }
        if self.eval.draws == 0 || self.eval.likelihood_draws == 0 {
            return bad("eval draws must be at least 1".into());
        }
        if let Some(i) = self.eval.ci_examples.iter().find(|&&i| i >= d.n_test) {
            return bad(format!("ci example {i} is outside the {} test examples", d.n_test));
        }
        self.architecture().validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.train_config(1.0, 0).validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        let a = &self.architecture;
        let mut arch = Architecture::new(self.data.n_sensors, self.problem.query_dim(), a.width, a.depth, a.latent);
        arch.sigma_floor = a.sigma_floor;
        arch
    }

    pub fn train_config(&self, alpha: f64, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            n_mc: t.n_mc,
            alpha,
            seed,
            record_every: t.record_every,
            divergence_weight: 1.0,
        }
    }
}

/// Recursively overwrite `base` with the entries of `overlay`.
fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
