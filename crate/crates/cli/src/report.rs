//! Result tables and CSV exports.

use std::path::Path;

use anyhow::{Context, Result};
use avidonet::evaluation::{aggregate, Interval, Summary};
use avidonet::problems::{OodVariant, ProblemId};
use serde::{Deserialize, Serialize};

use crate::layout::{row_label, Cell, CellKind};

/// One line of the per-run metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub problem: String,
    pub alpha: String,
    pub seed: u64,
    pub converged: bool,
    pub nmse: Option<f64>,
    pub nll: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodRow {
    pub problem: String,
    pub alpha: String,
    pub seed: u64,
    pub converged: bool,
    pub variant: String,
    pub nmse: Option<f64>,
    pub nll: Option<f64>,
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot create {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("cannot open {}", path.display()))?;
    r.deserialize().collect::<Result<_, _>>().with_context(|| format!("malformed {}", path.display()))
}

/// Summary over the converged runs of one table row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub label: String,
    pub kind: CellKind,
    pub runs: usize,
    pub converged: usize,
    pub nmse: Option<Summary>,
    pub nll: Option<Summary>,
    pub best_nmse: bool,
    pub best_nll: bool,
}

fn summarise(values: impl Iterator<Item = Option<f64>>) -> Option<Summary> {
    let v: Vec<f64> = values.flatten().collect();
    aggregate(&v)
}

fn mark_best(rows: &mut [AggregateRow], key: impl Fn(&AggregateRow) -> Option<f64>, set: impl Fn(&mut AggregateRow)) {
    let best = rows
        .iter()
        .enumerate()
        .filter_map(|(i, r)| key(r).map(|v| (i, v)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i);
    if let Some(i) = best {
        set(&mut rows[i]);
    }
}

/// Group runs by cell kind (in first-seen order), averaging converged runs
/// only, and flag the lowest mean NMSE and NLL.
pub fn aggregate_rows(runs: &[(Cell, MetricsRow)]) -> Vec<AggregateRow> {
    let mut kinds: Vec<CellKind> = Vec::new();
    for (c, _) in runs {
        if !kinds.contains(&c.kind) {
            kinds.push(c.kind);
        }
    }
    let mut rows: Vec<AggregateRow> = kinds
        .into_iter()
        .map(|kind| {
            let group: Vec<&MetricsRow> = runs.iter().filter(|(c, _)| c.kind == kind).map(|(_, m)| m).collect();
            let ok: Vec<&&MetricsRow> = group.iter().filter(|m| m.converged).collect();
            AggregateRow {
                label: row_label(kind),
                kind,
                runs: group.len(),
                converged: ok.len(),
                nmse: summarise(ok.iter().map(|m| m.nmse)),
                nll: summarise(ok.iter().map(|m| m.nll)),
                best_nmse: false,
                best_nll: false,
            }
        })
        .collect();
    mark_best(&mut rows, |r| r.nmse.map(|s| s.mean), |r| r.best_nmse = true);
    mark_best(&mut rows, |r| r.nll.map(|s| s.mean), |r| r.best_nll = true);
    rows
}

fn cell_text(s: Option<Summary>, best: bool) -> String {
    match s {
        None => "–".into(),
        Some(s) => {
            let t = format!("{:.3e} ± {:.3e}", s.mean, s.std);
            if best {
                format!("**{t}**")
            } else {
                t
            }
        }
    }
}

/// Markdown table with one row per α (and the deterministic model); best
/// entries in bold, empty cells for rows without converged runs.
pub fn markdown_table(problem: ProblemId, rows: &[AggregateRow]) -> String {
    let mut out = format!("## {problem}\n\n| α | NMSE | NLL | converged |\n|---|---|---|---|\n");
    for r in rows {
        out.push_str(&format!(
            "| {} | {} | {} | {}/{} |\n",
            r.label,
            cell_text(r.nmse, r.best_nmse),
            cell_text(r.nll, r.best_nll),
            r.converged,
            r.runs
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateCsvRow {
    pub label: String,
    pub runs: usize,
    pub converged: usize,
    pub nmse_mean: Option<f64>,
    pub nmse_std: Option<f64>,
    pub nll_mean: Option<f64>,
    pub nll_std: Option<f64>,
    pub best_nmse: bool,
    pub best_nll: bool,
}

pub fn aggregate_csv_rows(rows: &[AggregateRow]) -> Vec<AggregateCsvRow> {
    rows.iter()
        .map(|r| AggregateCsvRow {
            label: r.label.clone(),
            runs: r.runs,
            converged: r.converged,
            nmse_mean: r.nmse.map(|s| s.mean),
            nmse_std: r.nmse.map(|s| s.std),
            nll_mean: r.nll.map(|s| s.mean),
            nll_std: r.nll.map(|s| s.std),
            best_nmse: r.best_nmse,
            best_nll: r.best_nll,
        })
        .collect()
}

/// Out-of-distribution table: one row per cell kind, NMSE and NLL for each
/// variant, best per column in bold.
pub fn ood_markdown(runs: &[(Cell, OodRow)]) -> String {
    let mut out = String::from("| α |");
    for v in OodVariant::ALL {
        out.push_str(&format!(" {} NMSE | {} NLL |", v.name(), v.name()));
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(2 * OodVariant::ALL.len()));
    out.push('\n');
    let per_variant: Vec<Vec<AggregateRow>> = OodVariant::ALL
        .iter()
        .map(|v| {
            let rows: Vec<(Cell, MetricsRow)> = runs
                .iter()
                .filter(|(_, r)| r.variant == v.name())
                .map(|(c, r)| {
                    (
                        *c,
                        MetricsRow {
                            problem: r.problem.clone(),
                            alpha: r.alpha.clone(),
                            seed: r.seed,
                            converged: r.converged,
                            nmse: r.nmse,
                            nll: r.nll,
                            wall_time_s: 0.0,
                        },
                    )
                })
                .collect();
            aggregate_rows(&rows)
        })
        .collect();
    if let Some(first) = per_variant.first() {
        for (i, r) in first.iter().enumerate() {
            out.push_str(&format!("| {} |", r.label));
            for rows in &per_variant {
                let r = &rows[i];
                out.push_str(&format!(" {} | {} |", cell_text(r.nmse, r.best_nmse), cell_text(r.nll, r.best_nll)));
            }
            out.push('\n');
        }
    }
    out
}

/// Coordinate column names for a problem's query points.
pub fn coordinate_names(problem: ProblemId) -> &'static [&'static str] {
    match problem {
        ProblemId::Antiderivative => &["x"],
        ProblemId::Pendulum => &["t"],
        ProblemId::DiffusionReaction | ProblemId::AdvectionDiffusion => &["x", "t"],
    }
}

/// Interval export: coordinates, true value, ensemble mean and 95% bounds.
pub fn write_interval_csv(path: &Path, problem: ProblemId, coords: &[f64], truth: &[f64], bands: &[Interval]) -> Result<()> {
    let names = coordinate_names(problem);
    let d = names.len();
    let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot create {}", path.display()))?;
    let mut header: Vec<&str> = names.to_vec();
    header.extend(["true", "mean", "lower95", "upper95"]);
    w.write_record(&header)?;
    for (k, band) in bands.iter().enumerate() {
        let mut rec: Vec<String> = coords[k * d..(k + 1) * d].iter().map(|v| v.to_string()).collect();
        rec.extend([truth[k], band.mean, band.lower, band.upper].iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(alpha: &str, seed: u64, converged: bool, nmse: f64, nll: Option<f64>) -> MetricsRow {
        MetricsRow { problem: "antiderivative".into(), alpha: alpha.into(), seed, converged, nmse: Some(nmse), nll, wall_time_s: 0.0 }
    }

    fn runs() -> Vec<(Cell, MetricsRow)> {
        let d = CellKind::Deterministic;
        let a = CellKind::Variational { alpha: 1.0 };
        let b = CellKind::Variational { alpha: 1.25 };
        vec![
            (Cell { kind: d, seed: 0 }, row("deterministic", 0, true, 3e-4, None)),
            (Cell { kind: a, seed: 0 }, row("1", 0, true, 2e-4, Some(-4.0))),
            (Cell { kind: a, seed: 1 }, row("1", 1, false, 1e-9, Some(-9.0))),
            (Cell { kind: b, seed: 0 }, row("1.25", 0, true, 1e-4, Some(-5.0))),
            (Cell { kind: b, seed: 1 }, row("1.25", 1, true, 2e-4, Some(-5.5))),
        ]
    }

    #[test]
    fn aggregate_skips_unconverged_and_marks_best() {
        let rows = aggregate_rows(&runs());
        assert_eq!(rows.len(), 3);
        let kld = &rows[1];
        assert_eq!(kld.label, "1.00 (KLD)");
        assert_eq!((kld.runs, kld.converged), (2, 1));
        assert_eq!(kld.nmse.unwrap().mean, 2e-4);
        assert!(rows[2].best_nmse && rows[2].best_nll);
        assert!(!rows[0].best_nmse && rows[0].nll.is_none());
        let table = markdown_table(ProblemId::Antiderivative, &rows);
        assert!(table.contains("| 1.00 (KLD) |"));
        assert!(table.contains("**1.500e-4"));
    }

    #[test]
    fn empty_rows_are_marked() {
        let mut r = runs();
        r.retain(|(c, _)| c.seed == 1);
        let rows = aggregate_rows(&r);
        let table = markdown_table(ProblemId::Antiderivative, &rows);
        assert!(table.contains("| 1.00 (KLD) | – | – | 0/1 |"), "{table}");
    }
}
