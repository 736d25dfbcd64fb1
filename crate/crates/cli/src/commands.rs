//! The four subcommands. Each is a function of the configuration and the
//! files already on disk, so reruns reproduce their outputs byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use avidonet::evaluation::{evaluate_run, parameter_draws, predict_with, EvalConfig, Interval, Metrics};
use avidonet::model::{DeepONet, ModelKind};
use avidonet::problems::{
    build_dataset, build_ood_set, DatasetSpec, OodVariant, OperatorDataset, ProblemId, QuerySampling,
};
use avidonet::training::{train as train_model, RunRecord};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::layout::{cells, row_label, Cell, CellKind, Layout};
use crate::report::{
    aggregate_csv_rows, aggregate_rows, markdown_table, ood_markdown, read_csv, write_csv,
    write_interval_csv, AggregateRow, MetricsRow, OodRow,
};
use crate::HarnessError;

/// Outcome of one trained cell, stored next to its checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    #[serde(flatten)]
    pub cell: Cell,
    pub epochs_completed: usize,
    pub converged: bool,
    pub fault: Option<String>,
    pub wall_time_s: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct LossRow {
    epoch: usize,
    loss: f64,
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .context("cannot start the worker pool")
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn load_dataset(path: &Path) -> Result<OperatorDataset> {
    if !path.exists() {
        return Err(HarnessError::Data(format!("{} is missing; run `generate` first", path.display())).into());
    }
    OperatorDataset::load(path).map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())).into())
}

fn load_checkpoint(path: &Path) -> Result<DeepONet> {
    if !path.exists() {
        return Err(HarnessError::Data(format!("{} is missing; run `train` first", path.display())).into());
    }
    DeepONet::load(path).map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())).into())
}

fn load_record(path: &Path) -> Result<CellRecord> {
    let text = fs::read_to_string(path)
        .map_err(|e| HarnessError::Data(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())).into())
}

/// Dataset files written by `generate`.
pub fn dataset_jobs(cfg: &ExperimentConfig) -> Vec<(PathBuf, DatasetJob)> {
    let layout = Layout::new(cfg);
    let d = &cfg.data;
    let train = DatasetSpec {
        n_examples: d.n_train,
        n_sensors: d.n_sensors,
        queries: QuerySampling::Random { n: d.n_queries },
        ..DatasetSpec::training(cfg.problem, cfg.seed)
    };
    let test = DatasetSpec { n_sensors: d.n_sensors, ..DatasetSpec::test(cfg.problem, d.n_test, cfg.seed.wrapping_add(1)) };
    let mut jobs = vec![(layout.train_set(), DatasetJob::Spec(train)), (layout.test_set(), DatasetJob::Spec(test))];
    if cfg.problem == ProblemId::AdvectionDiffusion {
        for (i, v) in OodVariant::ALL.into_iter().enumerate() {
            jobs.push((layout.ood_set(v), DatasetJob::Ood(v, d.n_ood, cfg.seed.wrapping_add(2 + i as u64))));
        }
    }
    jobs
}

pub enum DatasetJob {
    Spec(DatasetSpec),
    Ood(OodVariant, usize, u64),
}

/// Write the training, test and (for advection-diffusion) OOD sets.
pub fn generate(cfg: &ExperimentConfig, force: bool) -> Result<()> {
    let jobs = dataset_jobs(cfg);
    if !force {
        if let Some((p, _)) = jobs.iter().find(|(p, _)| p.exists()) {
            return Err(HarnessError::Data(format!("{} exists; pass --force to overwrite", p.display())).into());
        }
    }
    for (path, job) in jobs {
        let ds = match job {
            DatasetJob::Spec(spec) => build_dataset(&spec),
            DatasetJob::Ood(v, n, seed) => build_ood_set(v, n, seed),
        }
        .with_context(|| format!("generating {}", path.display()))?;
        ensure_parent(&path)?;
        ds.save(&path).with_context(|| format!("cannot write {}", path.display()))?;
        let m = &ds.meta;
        println!(
            "{}: N1={}, M={}, N2={}, seed={}",
            path.display(),
            m.n_examples,
            m.n_sensors,
            m.n_queries,
            m.seed
        );
    }
    Ok(())
}

fn train_cell(cfg: &ExperimentConfig, ds: &OperatorDataset, cell: Cell) -> Result<CellRecord> {
    let layout = Layout::new(cfg);
    let kind = match cell.kind {
        CellKind::Deterministic => ModelKind::Deterministic,
        CellKind::Variational { .. } => ModelKind::Variational,
    };
    let mut model = DeepONet::init(cfg.architecture(), kind, cell.seed)?;
    let tc = cfg.train_config(cell.alpha().unwrap_or(1.0), cell.seed);
    let run: RunRecord = train_model(&mut model, ds, &tc).with_context(|| format!("training {}", cell.label()))?;
    let dir = layout.cell_dir(&cell);
    fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    model.save(&layout.checkpoint(&cell))?;
    let rows: Vec<LossRow> = run.loss_history.iter().map(|&(epoch, loss)| LossRow { epoch, loss }).collect();
    write_csv(&layout.loss_history(&cell), &rows)?;
    let record = CellRecord {
        cell,
        epochs_completed: run.epochs_completed,
        converged: run.converged,
        fault: run.fault,
        wall_time_s: if cfg.record_wall_time { run.wall_time_s } else { 0.0 },
    };
    // Written last: its presence marks the cell complete for --resume.
    write_text(&layout.record(&cell), &serde_json::to_string_pretty(&record)?)?;
    match &record.fault {
        Some(f) => log::warn!("{}: {f}", cell.label()),
        None => log::info!("{}: converged={} after {} epochs", cell.label(), record.converged, record.epochs_completed),
    }
    Ok(record)
}

/// Train every (α, seed) cell of the sweep on the worker pool.
pub fn train(cfg: &ExperimentConfig, resume: bool, deterministic_only: bool, workers: usize) -> Result<Vec<CellRecord>> {
    let layout = Layout::new(cfg);
    let ds = load_dataset(&layout.train_set())?;
    if ds.meta.problem != cfg.problem || ds.meta.n_sensors != cfg.data.n_sensors {
        return Err(HarnessError::Data(format!(
            "{} holds {} data with {} sensors, expected {} with {}",
            layout.train_set().display(),
            ds.meta.problem,
            ds.meta.n_sensors,
            cfg.problem,
            cfg.data.n_sensors
        ))
        .into());
    }
    let all = cells(cfg, deterministic_only);
    let records: Vec<CellRecord> = pool(workers)?.install(|| {
        all.par_iter()
            .map(|&cell| {
                let path = layout.record(&cell);
                if resume && path.exists() {
                    log::info!("{}: already trained, skipping", cell.label());
                    return load_record(&path);
                }
                train_cell(cfg, &ds, cell)
            })
            .collect::<Result<_>>()
    })?;
    if !records.is_empty() && records.iter().all(|r| r.fault.is_some()) {
        return Err(HarnessError::AllFaulted.into());
    }
    Ok(records)
}

/// Trained cells of the sweep in sweep order, including deterministic cells
/// trained with `--deterministic`. Untrained cells are skipped.
fn trained_cells(cfg: &ExperimentConfig) -> Result<Vec<CellRecord>> {
    let layout = Layout::new(cfg);
    let mut candidates = cells(cfg, false);
    if !cfg.include_deterministic {
        let det = cells(cfg, true);
        candidates.splice(0..0, det);
    }
    let mut out = Vec::new();
    for cell in candidates {
        let path = layout.record(&cell);
        if path.exists() {
            out.push(load_record(&path)?);
        } else if cell.kind != CellKind::Deterministic || cfg.include_deterministic {
            log::warn!("{}: not trained, skipping", cell.label());
        }
    }
    if out.is_empty() {
        return Err(HarnessError::Data("no trained cells found; run `train` first".into()).into());
    }
    Ok(out)
}

fn eval_config(cfg: &ExperimentConfig, cell: &Cell) -> EvalConfig {
    EvalConfig { draws: cfg.eval.draws, seed: cell.seed, nll_mode: cfg.eval.nll_mode }
}

/// Ensemble mean and 95% interval for test example `example`.
fn example_bands(cfg: &ExperimentConfig, model: &DeepONet, ds: &OperatorDataset, cell: &Cell, example: usize) -> Result<Vec<Interval>> {
    let draws = parameter_draws(model, cfg.eval.draws, cell.seed)?;
    let pd = predict_with(model, &draws, ds, example..example + 1)?;
    Ok(pd.interval(0, cfg.eval.likelihood_draws, cell.seed)?)
}

fn metrics_or_fault(result: avidonet::Result<Metrics>, label: &str) -> Result<Option<Metrics>> {
    match result {
        Ok(m) => Ok(Some(m)),
        Err(avidonet::Error::NumericFault(msg)) => {
            log::warn!("{label}: evaluation fault: {msg}");
            Ok(None)
        }
        Err(e) => Err(e.into()),
    }
}

struct CellEval {
    metrics: MetricsRow,
    ood: Vec<OodRow>,
}

fn evaluate_cell(
    cfg: &ExperimentConfig,
    test: &OperatorDataset,
    ood: &[(OodVariant, OperatorDataset)],
    rec: &CellRecord,
) -> Result<CellEval> {
    let layout = Layout::new(cfg);
    let cell = rec.cell;
    let model = load_checkpoint(&layout.checkpoint(&cell))?;
    let ec = eval_config(cfg, &cell);
    let m = metrics_or_fault(evaluate_run(&model, test, &ec), &cell.label())?;
    let converged = rec.converged && m.is_some();
    let problem = cfg.problem.name().to_string();
    let metrics = MetricsRow {
        problem: problem.clone(),
        alpha: cell.alpha_column(),
        seed: cell.seed,
        converged,
        nmse: m.map(|m| m.nmse),
        nll: m.and_then(|m| m.nll),
        wall_time_s: rec.wall_time_s,
    };
    let mut ood_rows = Vec::new();
    for (variant, ds) in ood {
        let m = metrics_or_fault(evaluate_run(&model, ds, &ec), &cell.label())?;
        ood_rows.push(OodRow {
            problem: problem.clone(),
            alpha: cell.alpha_column(),
            seed: cell.seed,
            converged,
            variant: variant.name().into(),
            nmse: m.map(|m| m.nmse),
            nll: m.and_then(|m| m.nll),
        });
    }
    let coords_of = |i: usize| test.queries_of(i).to_vec();
    for &ex in &cfg.eval.ci_examples {
        let bands = example_bands(cfg, &model, test, &cell, ex)?;
        let path = layout.ci_file(&cell, ex);
        ensure_parent(&path)?;
        write_interval_csv(&path, cfg.problem, &coords_of(ex), test.targets_of(ex), &bands)?;
    }
    log::info!("{}: nmse {:?}, nll {:?}", cell.label(), metrics.nmse, metrics.nll);
    Ok(CellEval { metrics, ood: ood_rows })
}

/// Per-run metrics, aggregate tables, OOD tables and interval exports.
pub fn evaluate(cfg: &ExperimentConfig, workers: usize) -> Result<Vec<AggregateRow>> {
    let layout = Layout::new(cfg);
    let records = trained_cells(cfg)?;
    let test = load_dataset(&layout.test_set())?;
    let ood: Vec<(OodVariant, OperatorDataset)> = if cfg.problem == ProblemId::AdvectionDiffusion {
        OodVariant::ALL.into_iter().map(|v| Ok((v, load_dataset(&layout.ood_set(v))?))).collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let evals: Vec<CellEval> =
        pool(workers)?.install(|| records.par_iter().map(|r| evaluate_cell(cfg, &test, &ood, r)).collect::<Result<_>>())?;

    let out = layout.results();
    fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    write_text(&out.join("config.json"), &cfg.to_json())?;
    let metrics: Vec<MetricsRow> = evals.iter().map(|e| e.metrics.clone()).collect();
    write_csv(&out.join("metrics.csv"), &metrics)?;
    let runs: Vec<(Cell, MetricsRow)> = records.iter().map(|r| r.cell).zip(metrics).collect();
    let rows = aggregate_rows(&runs);
    write_text(&out.join("aggregate.md"), &markdown_table(cfg.problem, &rows))?;
    write_csv(&out.join("aggregate.csv"), &aggregate_csv_rows(&rows))?;
    write_text(&out.join("aggregate.json"), &serde_json::to_string_pretty(&rows)?)?;
    if !ood.is_empty() {
        let ood_runs: Vec<(Cell, OodRow)> = records
            .iter()
            .zip(&evals)
            .flat_map(|(r, e)| e.ood.iter().map(move |o| (r.cell, o.clone())))
            .collect();
        let flat: Vec<OodRow> = ood_runs.iter().map(|(_, o)| o.clone()).collect();
        write_csv(&out.join("ood.csv"), &flat)?;
        write_text(&out.join("ood.md"), &ood_markdown(&ood_runs))?;
    }
    println!("{}", markdown_table(cfg.problem, &rows));
    Ok(rows)
}

fn cell_of(row: &MetricsRow) -> Result<Cell> {
    let kind = if row.alpha == "deterministic" {
        CellKind::Deterministic
    } else {
        let alpha = row
            .alpha
            .parse()
            .map_err(|_| HarnessError::Data(format!("metrics.csv: bad alpha '{}'", row.alpha)))?;
        CellKind::Variational { alpha }
    };
    Ok(Cell { kind, seed: row.seed })
}

#[derive(Debug, Serialize)]
struct BarRow {
    metric: String,
    #[serde(rename = "D-DeepONet")]
    deterministic: Option<f64>,
    #[serde(rename = "KLD-VI")]
    kld: Option<f64>,
    #[serde(rename = "best-alpha")]
    best: Option<f64>,
    best_alpha: Option<f64>,
}

#[derive(Debug, Serialize)]
struct FieldRow {
    x: f64,
    t: f64,
    value: f64,
}

/// Models shown in the figures: the deterministic baseline, KLD-VI and the
/// α with the lowest mean NMSE.
fn figure_models(rows: &[AggregateRow]) -> Vec<(&'static str, Option<&AggregateRow>)> {
    let det = rows.iter().find(|r| r.kind == CellKind::Deterministic);
    let kld = rows.iter().find(|r| r.kind == CellKind::Variational { alpha: 1.0 });
    let best = rows
        .iter()
        .filter(|r| matches!(r.kind, CellKind::Variational { .. }))
        .filter_map(|r| r.nmse.map(|s| (r, s.mean)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(r, _)| r);
    vec![("d_deeponet", det), ("kld_vi", kld), ("best_alpha", best)]
}

/// Plot-ready CSVs: 1-D traces with bands, 2-D long-format fields and bar
/// chart aggregates.
pub fn plotdata(cfg: &ExperimentConfig) -> Result<()> {
    let layout = Layout::new(cfg);
    let metrics_path = layout.results().join("metrics.csv");
    if !metrics_path.exists() {
        return Err(HarnessError::Data(format!("{} is missing; run `evaluate` first", metrics_path.display())).into());
    }
    let metrics: Vec<MetricsRow> = read_csv(&metrics_path).map_err(|e| HarnessError::Data(format!("{e:#}")))?;
    let runs: Vec<(Cell, MetricsRow)> = metrics.into_iter().map(|m| Ok((cell_of(&m)?, m))).collect::<Result<_>>()?;
    let rows = aggregate_rows(&runs);
    let test = load_dataset(&layout.test_set())?;
    let out = layout.plots();
    fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;

    let models = figure_models(&rows);
    let value = |r: Option<&AggregateRow>, f: fn(&AggregateRow) -> Option<f64>| r.and_then(f);
    let best_alpha = models[2].1.and_then(|r| match r.kind {
        CellKind::Variational { alpha } => Some(alpha),
        CellKind::Deterministic => None,
    });
    let bars: Vec<BarRow> = [
        ("nmse", (|r: &AggregateRow| r.nmse.map(|s| s.mean)) as fn(&AggregateRow) -> Option<f64>),
        ("nll", |r: &AggregateRow| r.nll.map(|s| s.mean)),
    ]
    .into_iter()
    .map(|(name, f)| BarRow {
        metric: name.into(),
        deterministic: value(models[0].1, f),
        kld: value(models[1].1, f),
        best: value(models[2].1, f),
        best_alpha,
    })
    .collect();
    write_csv(&out.join("bars.csv"), &bars)?;

    for (name, row) in &models {
        let Some(row) = row else {
            log::info!("{name}: not part of this sweep, no traces written");
            continue;
        };
        // The first seed of the row stands for the model in the figures.
        let Some((cell, _)) = runs.iter().find(|(c, _)| c.kind == row.kind) else { continue };
        let model = load_checkpoint(&layout.checkpoint(cell))?;
        for &ex in &cfg.eval.ci_examples {
            let bands = example_bands(cfg, &model, &test, cell, ex)?;
            let truth = test.targets_of(ex);
            let coords = test.queries_of(ex);
            if cfg.problem.is_pde() {
                write_fields(&out, name, ex, coords, truth, &bands)?;
            } else {
                write_interval_csv(&out.join(format!("trace_{name}_example_{ex}.csv")), cfg.problem, coords, truth, &bands)?;
            }
        }
        log::info!("{name}: exported {} ({})", row_label(row.kind), cell.label());
    }
    Ok(())
}

fn write_fields(out: &Path, name: &str, ex: usize, coords: &[f64], truth: &[f64], bands: &[Interval]) -> Result<()> {
    type Field<'a> = (&'static str, Box<dyn Fn(usize) -> f64 + 'a>);
    let fields: [Field; 4] = [
        ("true", Box::new(|k| truth[k])),
        ("mean", Box::new(|k| bands[k].mean)),
        ("abs_error", Box::new(|k| (bands[k].mean - truth[k]).abs())),
        ("ci_width", Box::new(|k| bands[k].upper - bands[k].lower)),
    ];
    for (field, f) in fields {
        let rows: Vec<FieldRow> =
            (0..bands.len()).map(|k| FieldRow { x: coords[2 * k], t: coords[2 * k + 1], value: f(k) }).collect();
        write_csv(&out.join(format!("field_{name}_example_{ex}_{field}.csv")), &rows)?;
    }
    Ok(())
}
