//! Experiment harnesses: the variant ablation matrix, the lookback sweep and
//! the (n_enc, n_dec, d_model) grid.
//!
//! Every harness expands a plan into independent cells, runs the pending ones
//! (concurrently up to `workers` when the `parallel` feature is on) and
//! appends one JSON line per finished cell. Rerunning with the same results
//! file skips cells that already succeeded.

use std::collections::{BTreeMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{apply_override, DataConfig};
use crate::data::Split;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::training::{self, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub name: String,
    #[serde(flatten)]
    pub data: DataConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridPoint {
    pub n_enc: usize,
    pub n_dec: usize,
    pub d_model: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentPlan {
    pub datasets: Vec<DatasetRef>,
    pub horizons: Vec<usize>,
    pub variants: Vec<Variant>,
    pub lookbacks: Vec<usize>,
    pub seeds: Vec<u64>,
    pub grid: Vec<GridPoint>,
    /// Base model; lookback, horizon and channels are filled per cell.
    pub model: ModelConfig,
    /// `seeds` inside this section is ignored in favour of the plan's list.
    pub training: TrainConfig,
    /// Concurrent cells; 0 uses every core.
    pub workers: usize,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            datasets: Vec::new(),
            horizons: vec![96],
            variants: Variant::ALL.to_vec(),
            lookbacks: vec![96, 192, 336, 720],
            seeds: vec![0, 1, 2],
            grid: vec![GridPoint {
                n_enc: 1,
                n_dec: 1,
                d_model: 64,
            }],
            model: ModelConfig::default(),
            training: TrainConfig {
                epochs: 10,
                ..TrainConfig::default()
            },
            workers: 0,
        }
    }
}

impl ExperimentPlan {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let plan: Self = toml::from_str(text).map_err(|e| Error::Config(format!("plan parse error: {e}")))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a plan file and applies dotted `key=value` overrides.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read plan {}: {e}", path.display())))?;
        let mut value: toml::Value =
            toml::from_str(&text).map_err(|e| Error::Config(format!("plan parse error: {e}")))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let plan: Self = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() {
            return Err(Error::Config("plan lists no datasets".into()));
        }
        let mut names = HashSet::new();
        for d in &self.datasets {
            if !names.insert(&d.name) {
                return Err(Error::Config(format!("dataset name '{}' repeated", d.name)));
            }
        }
        if self.horizons.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("plan needs at least one horizon and one seed".into()));
        }
        for &l in &self.lookbacks {
            if l < self.model.patch_len {
                return Err(Error::Config(format!(
                    "lookback {l} shorter than patch_len {}",
                    self.model.patch_len
                )));
            }
        }
        self.training.validate()
    }

    fn dataset(&self, name: &str) -> Result<&DatasetRef> {
        self.datasets
            .iter()
            .find(|d| d.name == name)
            .ok_or_else(|| Error::Config(format!("unknown dataset '{name}'")))
    }
}

/// Coordinates of one training run.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub experiment: String,
    pub dataset: String,
    pub horizon: usize,
    pub lookback: usize,
    pub variant: Variant,
    pub n_enc: usize,
    pub n_dec: usize,
    pub d_model: usize,
    pub seed: u64,
}

impl CellKey {
    pub fn id(&self) -> String {
        format!(
            "{}/{}/T{}/L{}/{}/e{}d{}m{}/s{}",
            self.experiment,
            self.dataset,
            self.horizon,
            self.lookback,
            self.variant,
            self.n_enc,
            self.n_dec,
            self.d_model,
            self.seed
        )
    }
}

/// Outcome of one cell, as written to the results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    #[serde(flatten)]
    pub key: CellKey,
    #[serde(deserialize_with = "null_as_nan")]
    pub mse: f64,
    #[serde(deserialize_with = "null_as_nan")]
    pub mae: f64,
    #[serde(deserialize_with = "null_as_nan")]
    pub val_mse: f64,
    pub best_epoch: usize,
    pub params: usize,
    pub wall_ms: u64,
    pub error: Option<String>,
}

/// JSON has no NaN; failed cells write `null`.
fn null_as_nan<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

impl CellResult {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

fn cell_model(plan: &ExperimentPlan, key: &CellKey, channels: usize) -> ModelConfig {
    ModelConfig {
        lookback: key.lookback,
        horizon: key.horizon,
        channels,
        n_enc: key.n_enc,
        n_dec: key.n_dec,
        d_model: key.d_model,
        variant: key.variant,
        ..plan.model.clone()
    }
}

/// Trains and scores one cell. Synthetic datasets are regenerated from the
/// cell seed, so every variant of a seed sees the same series.
pub fn run_cell(plan: &ExperimentPlan, key: &CellKey) -> Result<CellResult> {
    let start = Instant::now();
    let ds = plan.dataset(&key.dataset)?;
    let source = DataConfig {
        seed: key.seed,
        ..ds.data.clone()
    };
    let prepared = source.prepare()?;
    let data = prepared.windows(key.lookback, key.horizon);
    let model_cfg = cell_model(plan, key, prepared.table.channels());
    let out = training::train(&model_cfg, &data, &plan.training, key.seed, None)?;
    let (mse, mae) = training::evaluate(&out.model, &data, Split::Test, plan.training.eval_batch_size)?;
    Ok(CellResult {
        key: key.clone(),
        mse,
        mae,
        val_mse: out.best_val_mse,
        best_epoch: out.best_epoch,
        params: out.model.num_params(),
        wall_ms: start.elapsed().as_millis() as u64,
        error: None,
    })
}

fn failed(key: &CellKey, e: &Error) -> CellResult {
    CellResult {
        key: key.clone(),
        mse: f64::NAN,
        mae: f64::NAN,
        val_mse: f64::NAN,
        best_epoch: 0,
        params: 0,
        wall_ms: 0,
        error: Some(e.to_string()),
    }
}

/// Previously written results, keyed by cell id. Later lines win.
pub fn read_results(path: &Path) -> Result<BTreeMap<String, CellResult>> {
    let mut out = BTreeMap::new();
    if !path.exists() {
        return Ok(out);
    }
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: CellResult = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.insert(r.key.id(), r);
    }
    Ok(out)
}

/// Runs every cell not already completed in `results` (when given), appending
/// new lines as cells finish. Returns results in `cells` order. Failed cells
/// are recorded with their error and retried on the next run.
pub fn run_cells(plan: &ExperimentPlan, cells: &[CellKey], results: Option<&Path>) -> Result<Vec<CellResult>> {
    let mut done = match results {
        Some(p) => read_results(p)?,
        None => BTreeMap::new(),
    };
    done.retain(|_, r| r.ok());
    let pending: Vec<&CellKey> = cells.iter().filter(|k| !done.contains_key(&k.id())).collect();
    if pending.len() < cells.len() {
        log::info!("resuming: {} of {} cells already complete", cells.len() - pending.len(), cells.len());
    }
    let sink = match results {
        Some(p) => Some(Mutex::new(OpenOptions::new().create(true).append(true).open(p)?)),
        None => None,
    };

    let run_one = |key: &CellKey| -> Result<CellResult> {
        let r = run_cell(plan, key).unwrap_or_else(|e| {
            log::warn!("cell {} failed: {e}", key.id());
            failed(key, &e)
        });
        if let Some(sink) = &sink {
            let line = serde_json::to_string(&r).map_err(|e| Error::Data(e.to_string()))?;
            let mut f = sink.lock().expect("results lock poisoned");
            writeln!(f, "{line}")?;
            f.flush()?;
        }
        Ok(r)
    };

    #[cfg(feature = "parallel")]
    let fresh: Vec<CellResult> = {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(plan.workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        pool.install(|| pending.par_iter().map(|k| run_one(k)).collect::<Result<Vec<_>>>())?
    };
    #[cfg(not(feature = "parallel"))]
    let fresh: Vec<CellResult> = pending.iter().map(|k| run_one(k)).collect::<Result<Vec<_>>>()?;

    for r in fresh {
        done.insert(r.key.id(), r);
    }
    Ok(cells
        .iter()
        .map(|k| done.remove(&k.id()).expect("every cell has a result"))
        .collect())
}

fn base_point(plan: &ExperimentPlan) -> GridPoint {
    GridPoint {
        n_enc: plan.model.n_enc,
        n_dec: plan.model.n_dec,
        d_model: plan.model.d_model,
    }
}

fn key(
    experiment: &str,
    dataset: &str,
    horizon: usize,
    lookback: usize,
    variant: Variant,
    g: GridPoint,
    seed: u64,
) -> CellKey {
    CellKey {
        experiment: experiment.into(),
        dataset: dataset.into(),
        horizon,
        lookback,
        variant,
        n_enc: g.n_enc,
        n_dec: g.n_dec,
        d_model: g.d_model,
        seed,
    }
}

/// Ablation cells: dataset x horizon x variant x seed at the base lookback.
pub fn ablation_cells(plan: &ExperimentPlan) -> Vec<CellKey> {
    let g = base_point(plan);
    let mut out = Vec::new();
    for d in &plan.datasets {
        for &h in &plan.horizons {
            for &v in &plan.variants {
                for &s in &plan.seeds {
                    out.push(key("ablation", &d.name, h, plan.model.lookback, v, g, s));
                }
            }
        }
    }
    out
}

/// Sweep cells: dataset x lookback x horizon x seed, full variant.
pub fn sweep_cells(plan: &ExperimentPlan) -> Vec<CellKey> {
    let g = base_point(plan);
    let mut out = Vec::new();
    for d in &plan.datasets {
        for &l in &plan.lookbacks {
            for &h in &plan.horizons {
                for &s in &plan.seeds {
                    out.push(key("sweep", &d.name, h, l, plan.model.variant, g, s));
                }
            }
        }
    }
    out
}

/// Grid cells: dataset x grid point x horizon x seed.
pub fn grid_cells(plan: &ExperimentPlan) -> Vec<CellKey> {
    let mut out = Vec::new();
    for d in &plan.datasets {
        for &g in &plan.grid {
            for &h in &plan.horizons {
                for &s in &plan.seeds {
                    out.push(key("grid", &d.name, h, plan.model.lookback, plan.model.variant, g, s));
                }
            }
        }
    }
    out
}

/// Relative change versus the full model, in percent; negative means the
/// variant is worse (higher error).
pub fn degradation_pct(full: f64, metric: f64) -> f64 {
    (full - metric) / full * 100.0
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub dataset: String,
    pub horizon: usize,
    pub variant: Variant,
    pub mse: f64,
    pub mae: f64,
    pub mse_change_pct: f64,
    pub mae_change_pct: f64,
    pub params: usize,
    pub seeds: usize,
}

/// Seed-averaged metrics per (dataset, horizon, variant) with the change
/// against `full`. Failed cells are left out; a group with no successful
/// cell is omitted.
pub fn ablation_table(results: &[CellResult]) -> Vec<AblationRow> {
    let mut groups: BTreeMap<(String, usize, Variant), Vec<&CellResult>> = BTreeMap::new();
    for r in results.iter().filter(|r| r.ok()) {
        groups
            .entry((r.key.dataset.clone(), r.key.horizon, r.key.variant))
            .or_default()
            .push(r);
    }
    let avg = |rs: &[&CellResult]| {
        (
            mean(&rs.iter().map(|r| r.mse).collect::<Vec<_>>()),
            mean(&rs.iter().map(|r| r.mae).collect::<Vec<_>>()),
        )
    };
    let mut rows = Vec::new();
    for ((dataset, horizon, variant), rs) in &groups {
        let (mse, mae) = avg(rs);
        let full = groups
            .get(&(dataset.clone(), *horizon, Variant::Full))
            .map(|f| avg(f));
        let (mse_change_pct, mae_change_pct) = match full {
            Some((fm, fa)) => (degradation_pct(fm, mse), degradation_pct(fa, mae)),
            None => (f64::NAN, f64::NAN),
        };
        rows.push(AblationRow {
            dataset: dataset.clone(),
            horizon: *horizon,
            variant: *variant,
            mse,
            mae,
            mse_change_pct,
            mae_change_pct,
            params: rs[0].params,
            seeds: rs.len(),
        });
    }
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub dataset: String,
    pub lookback: usize,
    pub mse: f64,
    pub mae: f64,
}

/// One row per (dataset, lookback), averaged over horizons and seeds.
pub fn sweep_table(results: &[CellResult]) -> Vec<SweepRow> {
    let mut groups: BTreeMap<(String, usize), Vec<&CellResult>> = BTreeMap::new();
    for r in results.iter().filter(|r| r.ok()) {
        groups.entry((r.key.dataset.clone(), r.key.lookback)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((dataset, lookback), rs)| SweepRow {
            dataset,
            lookback,
            mse: mean(&rs.iter().map(|r| r.mse).collect::<Vec<_>>()),
            mae: mean(&rs.iter().map(|r| r.mae).collect::<Vec<_>>()),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridChoice {
    pub dataset: String,
    pub point: GridPoint,
    pub mean_val_mse: f64,
}

/// Best grid point per dataset by mean validation MSE over every successful
/// (horizon, seed) cell. Ties go to the smallest `(n_enc, n_dec, d_model)`.
pub fn select_grid(results: &[CellResult]) -> Vec<GridChoice> {
    let mut groups: BTreeMap<(String, GridPoint), Vec<f64>> = BTreeMap::new();
    for r in results.iter().filter(|r| r.ok()) {
        let g = GridPoint {
            n_enc: r.key.n_enc,
            n_dec: r.key.n_dec,
            d_model: r.key.d_model,
        };
        groups.entry((r.key.dataset.clone(), g)).or_default().push(r.val_mse);
    }
    let mut best: BTreeMap<String, GridChoice> = BTreeMap::new();
    // BTreeMap order visits grid points smallest-first, so strict `<` keeps
    // the smallest point on ties.
    for ((dataset, point), mut vals) in groups {
        vals.sort_by(f64::total_cmp);
        let m = mean(&vals);
        let replace = best.get(&dataset).is_none_or(|b| m < b.mean_val_mse);
        if replace {
            best.insert(
                dataset.clone(),
                GridChoice {
                    dataset,
                    point,
                    mean_val_mse: m,
                },
            );
        }
    }
    best.into_values().collect()
}

/// The base model config with a grid choice applied.
pub fn chosen_config(plan: &ExperimentPlan, choice: &GridChoice) -> ModelConfig {
    ModelConfig {
        n_enc: choice.point.n_enc,
        n_dec: choice.point.n_dec,
        d_model: choice.point.d_model,
        ..plan.model.clone()
    }
}

pub fn run_ablation(plan: &ExperimentPlan, results: Option<&Path>) -> Result<(Vec<CellResult>, Vec<AblationRow>)> {
    plan.validate()?;
    let cells = run_cells(plan, &ablation_cells(plan), results)?;
    let table = ablation_table(&cells);
    Ok((cells, table))
}

pub fn run_lookback_sweep(plan: &ExperimentPlan, results: Option<&Path>) -> Result<(Vec<CellResult>, Vec<SweepRow>)> {
    plan.validate()?;
    let cells = run_cells(plan, &sweep_cells(plan), results)?;
    let table = sweep_table(&cells);
    Ok((cells, table))
}

pub fn run_grid(plan: &ExperimentPlan, results: Option<&Path>) -> Result<(Vec<CellResult>, Vec<GridChoice>)> {
    plan.validate()?;
    if plan.grid.is_empty() {
        return Err(Error::Config("grid is empty".into()));
    }
    let cells = run_cells(plan, &grid_cells(plan), results)?;
    let choice = select_grid(&cells);
    Ok((cells, choice))
}

/// Writes serialisable rows as CSV with a header.
pub fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Flat view of a [`CellResult`] for CSV output.
#[derive(Serialize)]
struct CellRow<'a> {
    experiment: &'a str,
    dataset: &'a str,
    horizon: usize,
    lookback: usize,
    variant: Variant,
    n_enc: usize,
    n_dec: usize,
    d_model: usize,
    seed: u64,
    mse: f64,
    mae: f64,
    val_mse: f64,
    best_epoch: usize,
    params: usize,
    wall_ms: u64,
    error: &'a str,
}

/// Writes one CSV row per cell.
pub fn write_cells_csv(results: &[CellResult], path: &Path) -> Result<()> {
    let rows: Vec<CellRow> = results
        .iter()
        .map(|r| CellRow {
            experiment: &r.key.experiment,
            dataset: &r.key.dataset,
            horizon: r.key.horizon,
            lookback: r.key.lookback,
            variant: r.key.variant,
            n_enc: r.key.n_enc,
            n_dec: r.key.n_dec,
            d_model: r.key.d_model,
            seed: r.key.seed,
            mse: r.mse,
            mae: r.mae,
            val_mse: r.val_mse,
            best_epoch: r.best_epoch,
            params: r.params,
            wall_ms: r.wall_ms,
            error: r.error.as_deref().unwrap_or(""),
        })
        .collect();
    write_csv(&rows, path)
}

/// Writes one CSV row per grid choice.
pub fn write_grid_csv(choices: &[GridChoice], path: &Path) -> Result<()> {
    #[derive(Serialize)]
    struct Row<'a> {
        dataset: &'a str,
        n_enc: usize,
        n_dec: usize,
        d_model: usize,
        mean_val_mse: f64,
    }
    let rows: Vec<Row> = choices
        .iter()
        .map(|c| Row {
            dataset: &c.dataset,
            n_enc: c.point.n_enc,
            n_dec: c.point.n_dec,
            d_model: c.point.d_model,
            mean_val_mse: c.mean_val_mse,
        })
        .collect();
    write_csv(&rows, path)
}
