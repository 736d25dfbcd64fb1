//! On-disk layout. Every grid cell gets its own directory named after
//! problem, α (or the deterministic model) and seed, so cells never collide.

use std::path::PathBuf;

use avidonet::problems::OodVariant;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CellKind {
    Deterministic,
    Variational { alpha: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    #[serde(flatten)]
    pub kind: CellKind,
    pub seed: u64,
}

impl Cell {
    pub fn alpha(&self) -> Option<f64> {
        match self.kind {
            CellKind::Deterministic => None,
            CellKind::Variational { alpha } => Some(alpha),
        }
    }

    /// Directory-safe name, e.g. `alpha_1.25_seed_3`.
    pub fn label(&self) -> String {
        match self.kind {
            CellKind::Deterministic => format!("deterministic_seed_{}", self.seed),
            CellKind::Variational { alpha } => format!("alpha_{alpha}_seed_{}", self.seed),
        }
    }

    /// Value of the `alpha` column in result tables.
    pub fn alpha_column(&self) -> String {
        match self.kind {
            CellKind::Deterministic => "deterministic".into(),
            CellKind::Variational { alpha } => format!("{alpha}"),
        }
    }
}

/// Row label used in aggregate tables.
pub fn row_label(kind: CellKind) -> String {
    match kind {
        CellKind::Deterministic => "D-DeepONet".into(),
        CellKind::Variational { alpha: 1.0 } => "1.00 (KLD)".into(),
        CellKind::Variational { alpha } => format!("{alpha:.2}"),
    }
}

pub struct Layout<'a> {
    cfg: &'a ExperimentConfig,
}

impl<'a> Layout<'a> {
    pub fn new(cfg: &'a ExperimentConfig) -> Self {
        Self { cfg }
    }

    fn problem(&self) -> &'static str {
        self.cfg.problem.name()
    }

    pub fn train_set(&self) -> PathBuf {
        self.cfg.paths.data_dir.join(self.problem()).join("train.bin")
    }

    pub fn test_set(&self) -> PathBuf {
        self.cfg.paths.data_dir.join(self.problem()).join("test.bin")
    }

    pub fn ood_set(&self, variant: OodVariant) -> PathBuf {
        self.cfg.paths.data_dir.join(self.problem()).join(format!("ood_{}.bin", variant.name()))
    }

    pub fn cell_dir(&self, cell: &Cell) -> PathBuf {
        let kind = match cell.kind {
            CellKind::Deterministic => "deterministic".to_string(),
            CellKind::Variational { alpha } => format!("alpha_{alpha}"),
        };
        self.cfg.paths.runs_dir.join(self.problem()).join(kind).join(format!("seed_{}", cell.seed))
    }

    pub fn checkpoint(&self, cell: &Cell) -> PathBuf {
        self.cell_dir(cell).join("model.ckpt")
    }

    pub fn loss_history(&self, cell: &Cell) -> PathBuf {
        self.cell_dir(cell).join("loss.csv")
    }

    pub fn record(&self, cell: &Cell) -> PathBuf {
        self.cell_dir(cell).join("record.json")
    }

    pub fn results(&self) -> PathBuf {
        self.cfg.paths.results_dir.join(self.problem())
    }

    pub fn ci_dir(&self) -> PathBuf {
        self.results().join("ci")
    }

    pub fn ci_file(&self, cell: &Cell, example: usize) -> PathBuf {
        self.ci_dir().join(format!("{}_example_{example}.csv", cell.label()))
    }

    pub fn plots(&self) -> PathBuf {
        self.cfg.paths.plots_dir.join(self.problem())
    }
}

/// Every cell of the sweep: deterministic cells first, then α ascending,
/// seeds ascending within each.
pub fn cells(cfg: &ExperimentConfig, deterministic_only: bool) -> Vec<Cell> {
    let seeds: Vec<u64> = (0..cfg.seeds as u64).map(|s| cfg.seed.wrapping_add(s)).collect();
    let mut out = Vec::new();
    if cfg.include_deterministic || deterministic_only {
        out.extend(seeds.iter().map(|&seed| Cell { kind: CellKind::Deterministic, seed }));
    }
    if !deterministic_only {
        let mut alphas = cfg.alpha_grid.clone();
        alphas.sort_by(f64::total_cmp);
        for alpha in alphas {
            out.extend(seeds.iter().map(|&seed| Cell { kind: CellKind::Variational { alpha }, seed }));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Preset;
    use avidonet::problems::ProblemId;
    use std::collections::HashSet;

    #[test]
    fn cell_directories_are_unique() {
        let cfg = ExperimentConfig::preset(Preset::Paper, ProblemId::Pendulum);
        let layout = Layout::new(&cfg);
        let all = cells(&cfg, false);
        assert_eq!(all.len(), 10 * 12);
        let dirs: HashSet<_> = all.iter().map(|c| layout.cell_dir(c)).collect();
        assert_eq!(dirs.len(), all.len());
        assert!(layout.cell_dir(&all[15]).to_string_lossy().contains("pendulum"));
    }

    #[test]
    fn labels() {
        assert_eq!(row_label(CellKind::Variational { alpha: 1.0 }), "1.00 (KLD)");
        assert_eq!(row_label(CellKind::Variational { alpha: 0.5 }), "0.50");
        assert_eq!(row_label(CellKind::Deterministic), "D-DeepONet");
        let c = Cell { kind: CellKind::Variational { alpha: 1.25 }, seed: 4 };
        assert_eq!(c.label(), "alpha_1.25_seed_4");
    }

    #[test]
    fn deterministic_only_sweep() {
        let cfg = ExperimentConfig::preset(Preset::Desk, ProblemId::Antiderivative);
        let only = cells(&cfg, true);
        assert_eq!(only.len(), 3);
        assert!(only.iter().all(|c| c.kind == CellKind::Deterministic));
    }
}
