//! Benchmark grid: mechanism × missing rate × method × repetition.
//!
//! One root seed drives everything. Each repetition derives its own data,
//! mask, split and training seeds, shared by every method so that methods
//! are compared on identical corruptions.

use std::fmt::Write as _;
use std::path::PathBuf;

use cacti::checkpoint::Checkpoint;
use cacti::context::{align_to_schema, load_context};
use cacti::dataset::{apply_scaler, fit_scaler, load_csv, load_schema_hints, split_indices, Table};
use cacti::imputation::{impute, ImputeOptions};
use cacti::masking::MaskStrategy;
use cacti::metrics::{MeanImputer, MetricsReport, RmseScale};
use cacti::missingness::{apply_mask, simulate, Mechanism, SimConfig};
use cacti::model::{ModelConfig, ModelHyper};
use cacti::rng;
use cacti::training::{train, EpochRecord, TrainConfig};
use cacti::{Error, Result};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::synthetic::{gaussian_table, random_context, GaussianSpec};
use crate::{hide_with_mask, simulation_input};

/// Environment variable capping the number of grid cells run at once.
pub const THREADS_VAR: &str = "CACTI_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// MT-CM with context.
    Cacti,
    /// MT-CM without context.
    Cmae,
    /// Random masking without context.
    Rmae,
    /// Random masking with context.
    RmaeCtx,
    /// Naive copy masking with context.
    NaiveCm,
    /// Column means of the training split.
    Mean,
}

impl Method {
    /// Masking strategy and context use; `None` for the mean baseline.
    pub fn arm(self) -> Option<(MaskStrategy, bool)> {
        match self {
            Method::Cacti => Some((MaskStrategy::Mtcm, true)),
            Method::Cmae => Some((MaskStrategy::Mtcm, false)),
            Method::Rmae => Some((MaskStrategy::Random, false)),
            Method::RmaeCtx => Some((MaskStrategy::Random, true)),
            Method::NaiveCm => Some((MaskStrategy::NaiveCm, true)),
            Method::Mean => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Cacti => "cacti",
            Method::Cmae => "cmae",
            Method::Rmae => "rmae",
            Method::RmaeCtx => "rmae_ctx",
            Method::NaiveCm => "naive_cm",
            Method::Mean => "mean",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(GaussianSpec),
    Csv { path: PathBuf, schema: Option<PathBuf> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ContextSource {
    /// Random vectors of the given length, one per column.
    Synthetic { dim: usize },
    File {
        path: PathBuf,
        #[serde(default)]
        allow_missing: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Random vs copy masking crossed with context on/off.
    Ablation,
}

impl Preset {
    pub fn methods(self) -> Vec<Method> {
        match self {
            Preset::Ablation => vec![Method::Rmae, Method::RmaeCtx, Method::Cmae, Method::Cacti],
        }
    }
}

fn default_p_obs() -> f64 {
    0.3
}

fn default_test_fraction() -> f64 {
    0.2
}

fn default_repeats() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub root_seed: u64,
    pub data: DataSource,
    #[serde(default)]
    pub context: Option<ContextSource>,
    pub mechanisms: Vec<Mechanism>,
    pub p_miss: Vec<f64>,
    #[serde(default = "default_p_obs")]
    pub p_obs: f64,
    #[serde(default)]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub preset: Option<Preset>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub model: ModelHyper,
    #[serde(default)]
    pub metrics_scale: RmseScale,
}

impl BenchmarkConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("benchmark config: {e}")))
    }

    /// Methods in run order: the preset's, then any listed ones not already present.
    pub fn resolved_methods(&self) -> Vec<Method> {
        let mut out = self.preset.map(Preset::methods).unwrap_or_default();
        for m in &self.methods {
            if !out.contains(m) {
                out.push(*m);
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.mechanisms.is_empty() || self.p_miss.is_empty() || self.resolved_methods().is_empty() {
            return Err(Error::Config("benchmark grid is empty".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be positive".into()));
        }
        let needs_context = self
            .resolved_methods()
            .iter()
            .any(|m| m.arm().is_some_and(|(_, ctx)| ctx));
        if needs_context && self.context.is_none() {
            return Err(Error::Config("a context method is listed but no context source is set".into()));
        }
        self.train.validate()
    }
}

/// Seeds of one repetition, shared by all methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepSeeds {
    pub data: u64,
    pub mask: u64,
    pub split: u64,
    pub train: u64,
}

impl RepSeeds {
    pub fn derive(root: u64, mechanism: Mechanism, p_miss: f64, rep: usize) -> Self {
        let cell = rng::derive_seed(
            rng::derive_named(root, &format!("{mechanism}/{p_miss}")),
            rep as u64,
        );
        RepSeeds {
            // Data depends only on the repetition so mechanisms share tables.
            data: rng::derive_seed(rng::derive_named(root, "data"), rep as u64),
            mask: rng::derive_named(cell, "mask"),
            split: rng::derive_seed(rng::derive_named(root, "split"), rep as u64),
            train: rng::derive_named(cell, "train"),
        }
    }
}

/// A corrupted dataset ready for any method.
#[derive(Debug, Clone)]
pub struct PreparedCell {
    pub truth_train: Table,
    pub truth_test: Table,
    pub corrupted_train: Table,
    pub corrupted_test: Table,
    /// Rows left without any observed cell, excluded from the run.
    pub dropped_rows: usize,
    pub seeds: RepSeeds,
}

/// Loaded data and context shared across the grid.
#[derive(Debug, Clone)]
pub struct Inputs {
    /// Fixed table for CSV sources; synthetic tables are drawn per repetition.
    pub table: Option<Table>,
    pub context: Option<Array2<f64>>,
}

pub fn load_inputs(cfg: &BenchmarkConfig) -> Result<Inputs> {
    let table = match &cfg.data {
        DataSource::Synthetic(_) => None,
        DataSource::Csv { path, schema } => {
            let hints = schema.as_ref().map(load_schema_hints).transpose()?;
            Some(load_csv(path, hints.as_ref())?)
        }
    };
    let k = match (&cfg.data, &table) {
        (DataSource::Synthetic(spec), _) => spec.n_cols,
        (_, Some(t)) => t.n_cols(),
        _ => unreachable!("csv source always loads a table"),
    };
    let context = match &cfg.context {
        None => None,
        Some(ContextSource::Synthetic { dim }) => Some(random_context(k, *dim, rng::derive_named(cfg.root_seed, "context"))),
        Some(ContextSource::File { path, allow_missing }) => {
            let emb = load_context(path)?;
            let schema = match &table {
                Some(t) => t.schema.clone(),
                None => crate::synthetic::column_names(k)
                    .into_iter()
                    .map(cacti::dataset::ColumnSchema::continuous)
                    .collect(),
            };
            Some(align_to_schema(&emb, &schema, *allow_missing)?)
        }
    };
    Ok(Inputs { table, context })
}

/// Draws data, simulates missingness and splits rows for one repetition.
pub fn prepare_cell(
    cfg: &BenchmarkConfig,
    inputs: &Inputs,
    mechanism: Mechanism,
    p_miss: f64,
    rep: usize,
) -> Result<PreparedCell> {
    let seeds = RepSeeds::derive(cfg.root_seed, mechanism, p_miss, rep);
    let truth = match (&cfg.data, &inputs.table) {
        (DataSource::Synthetic(spec), _) => gaussian_table(spec, seeds.data)?,
        (_, Some(t)) => t.clone(),
        _ => unreachable!("csv source always loads a table"),
    };
    let sim_cfg = SimConfig {
        mechanism,
        p_miss,
        p_obs: cfg.p_obs,
        seed: seeds.mask,
    };
    let sim = simulate(&sim_cfg, &simulation_input(&truth)?)?;
    let corrupted = apply_mask(&truth, &hide_with_mask(&truth, &sim.mask))?;

    let keep: Vec<usize> = (0..truth.n_rows())
        .filter(|&i| corrupted.observed.row(i).iter().any(|&o| o))
        .collect();
    let dropped_rows = truth.n_rows() - keep.len();
    if dropped_rows > 0 {
        log::info!("{mechanism} p_miss={p_miss} rep={rep}: {dropped_rows} fully hidden rows excluded");
    }
    let truth = truth.select_rows(&keep);
    let corrupted = corrupted.select_rows(&keep);
    let (train_rows, test_rows) = split_indices(truth.n_rows(), cfg.test_fraction, seeds.split)?;
    Ok(PreparedCell {
        truth_train: truth.select_rows(&train_rows),
        truth_test: truth.select_rows(&test_rows),
        corrupted_train: corrupted.select_rows(&train_rows),
        corrupted_test: corrupted.select_rows(&test_rows),
        dropped_rows,
        seeds,
    })
}

/// Cells whose truth is known but which the imputer did not see.
pub fn eval_mask(truth: &Table, corrupted: &Table) -> Array2<bool> {
    let mut m = truth.observed.clone();
    m.zip_mut_with(&corrupted.observed, |t, &c| *t = *t && !c);
    m
}

#[derive(Debug, Clone)]
pub struct MethodOutcome {
    pub train: MetricsReport,
    pub test: MetricsReport,
    pub trace: Vec<EpochRecord>,
}

/// Trains (if needed) and evaluates one method on a prepared cell.
pub fn run_method(
    cell: &PreparedCell,
    method: Method,
    context: Option<&Array2<f64>>,
    train_cfg: &TrainConfig,
    hyper: &ModelHyper,
    scale: RmseScale,
) -> Result<MethodOutcome> {
    let scaler = fit_scaler(&cell.corrupted_train)?;
    let (imp_train, imp_test, trace) = match method.arm() {
        None => {
            let mean = MeanImputer::fit(&cell.corrupted_train)?;
            (mean.apply(&cell.corrupted_train)?, mean.apply(&cell.corrupted_test)?, Vec::new())
        }
        Some((strategy, use_ctx)) => {
            let ctx = if use_ctx {
                Some(context.ok_or_else(|| Error::Config(format!("{} needs context", method.name())))?)
            } else {
                None
            };
            let k = cell.corrupted_train.n_cols();
            let model_cfg = ModelConfig::new(k, ctx.map_or(0, |c| c.ncols()), *hyper)?;
            let cfg = TrainConfig {
                mask_strategy: strategy,
                seed: cell.seeds.train,
                ..*train_cfg
            };
            let scaled = apply_scaler(&cell.corrupted_train, &scaler)?;
            let out = train(&scaled, ctx, model_cfg, &cfg)?;
            let ck = Checkpoint::new(cell.corrupted_train.schema.clone(), scaler.clone(), out.model)?;
            let opts = ImputeOptions::default();
            (
                impute(&cell.corrupted_train, &ck, &opts)?,
                impute(&cell.corrupted_test, &ck, &opts)?,
                out.trace,
            )
        }
    };
    let names: Vec<&str> = cell.truth_train.column_names();
    let report = |truth: &Table, corrupted: &Table, imputed: &Table| {
        MetricsReport::compute(
            &names,
            &truth.values,
            &imputed.values,
            &eval_mask(truth, corrupted),
            scale,
            Some(&scaler),
        )
    };
    Ok(MethodOutcome {
        train: report(&cell.truth_train, &cell.corrupted_train, &imp_train)?,
        test: report(&cell.truth_test, &cell.corrupted_test, &imp_test)?,
        trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub mechanism: Mechanism,
    pub p_miss: f64,
    pub method: Method,
    pub repeat: usize,
    pub split: String,
    pub r2_mean: f64,
    pub rmse: f64,
    pub rmse_standardized: Option<f64>,
    pub rmse_original: f64,
    pub rmse_minmax: Option<f64>,
    pub wd_mean: f64,
    pub n_eval: usize,
    pub dropped_rows: usize,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub mechanism: Mechanism,
    pub p_miss: f64,
    pub method: Method,
    pub split: String,
    pub runs: usize,
    pub r2_mean: f64,
    pub r2_std: f64,
    pub rmse_mean: f64,
    pub wd_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub version: String,
    pub config: BenchmarkConfig,
    pub rows: Vec<ResultRow>,
    pub summary: Vec<SummaryRow>,
}

impl BenchmarkReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<6} {:>6} {:<9} {:<5} {:>4} {:>8} {:>8} {:>8} {:>10}",
            "mech", "p_miss", "method", "split", "runs", "r2", "r2_sd", "rmse", "wd"
        );
        for r in &self.summary {
            let _ = writeln!(
                out,
                "{:<6} {:>6} {:<9} {:<5} {:>4} {:>8.4} {:>8.4} {:>8.4} {:>10.4}",
                r.mechanism.to_string(),
                r.p_miss,
                r.method.name(),
                r.split,
                r.runs,
                r.r2_mean,
                r.r2_std,
                r.rmse_mean,
                r.wd_mean
            );
        }
        out
    }
}

/// Number of grid cells run concurrently: [`THREADS_VAR`] if set, else the
/// number of available cores.
pub fn thread_budget() -> Result<usize> {
    match std::env::var(THREADS_VAR) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("{THREADS_VAR}={v} is not a positive integer"))),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut out: Vec<SummaryRow> = Vec::new();
    for r in rows {
        let same = |s: &SummaryRow| {
            s.mechanism == r.mechanism && s.p_miss == r.p_miss && s.method == r.method && s.split == r.split
        };
        if out.iter().any(same) {
            continue;
        }
        let group: Vec<&ResultRow> = rows
            .iter()
            .filter(|x| x.mechanism == r.mechanism && x.p_miss == r.p_miss && x.method == r.method && x.split == r.split)
            .collect();
        let n = group.len() as f64;
        let r2_mean = group.iter().map(|x| x.r2_mean).sum::<f64>() / n;
        let r2_std = if group.len() > 1 {
            (group.iter().map(|x| (x.r2_mean - r2_mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        out.push(SummaryRow {
            mechanism: r.mechanism,
            p_miss: r.p_miss,
            method: r.method,
            split: r.split.clone(),
            runs: group.len(),
            r2_mean,
            r2_std,
            rmse_mean: group.iter().map(|x| x.rmse).sum::<f64>() / n,
            wd_mean: group.iter().map(|x| x.wd_mean).sum::<f64>() / n,
        });
    }
    out
}

fn result_row(
    mechanism: Mechanism,
    p_miss: f64,
    method: Method,
    repeat: usize,
    split: &str,
    m: &MetricsReport,
    dropped_rows: usize,
    final_loss: Option<f64>,
) -> ResultRow {
    ResultRow {
        mechanism,
        p_miss,
        method,
        repeat,
        split: split.into(),
        r2_mean: m.r2_mean,
        rmse: m.rmse,
        rmse_standardized: m.rmse_standardized,
        rmse_original: m.rmse_original,
        rmse_minmax: m.rmse_minmax,
        wd_mean: m.wd_mean,
        n_eval: m.n_eval,
        dropped_rows,
        final_loss,
    }
}

/// Runs the whole grid. Rows come out in grid order regardless of threading.
pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<BenchmarkReport> {
    cfg.validate()?;
    let inputs = load_inputs(cfg)?;
    let methods = cfg.resolved_methods();
    let mut jobs = Vec::new();
    for &mechanism in &cfg.mechanisms {
        for &p in &cfg.p_miss {
            for rep in 0..cfg.repeats {
                for &method in &methods {
                    jobs.push((mechanism, p, rep, method));
                }
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_budget()?)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<Result<[ResultRow; 2]>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(mechanism, p, rep, method)| {
                let cell = prepare_cell(cfg, &inputs, mechanism, p, rep)?;
                let out = run_method(&cell, method, inputs.context.as_ref(), &cfg.train, &cfg.model, cfg.metrics_scale)?;
                let loss = out.trace.last().map(|r| r.mean_loss);
                Ok([
                    result_row(mechanism, p, method, rep, "train", &out.train, cell.dropped_rows, loss),
                    result_row(mechanism, p, method, rep, "test", &out.test, cell.dropped_rows, loss),
                ])
            })
            .collect()
    });
    let mut rows = Vec::with_capacity(2 * jobs.len());
    for r in results {
        rows.extend(r?);
    }
    rows.sort_by_key(|r| r.split != "train");
    Ok(BenchmarkReport {
        version: env!("CARGO_PKG_VERSION").into(),
        config: cfg.clone(),
        summary: summarize(&rows),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> BenchmarkConfig {
        BenchmarkConfig::from_json(
            r#"{
                "root_seed": 3,
                "data": {"synthetic": {"n_rows": 60, "n_cols": 4, "rho": 0.5}},
                "context": {"synthetic": {"dim": 5}},
                "mechanisms": ["mcar", "mnar"],
                "p_miss": [0.3],
                "methods": ["cacti", "mean"],
                "repeats": 2,
                "train": {"epochs": 2, "warmup_epochs": 1, "batch_size": 32},
                "model": {"embed_dim": 8, "enc_depth": 1, "dec_depth": 1, "heads": 2}
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn grid_row_counts() {
        let report = run_benchmark(&tiny_config()).unwrap();
        let train = report.rows.iter().filter(|r| r.split == "train").count();
        let test = report.rows.iter().filter(|r| r.split == "test").count();
        assert_eq!((train, test), (8, 8));
        assert_eq!(report.summary.len(), 8);
    }

    #[test]
    fn ablation_preset_lists_four_arms() {
        let mut cfg = tiny_config();
        cfg.methods.clear();
        cfg.preset = Some(Preset::Ablation);
        assert_eq!(
            cfg.resolved_methods(),
            vec![Method::Rmae, Method::RmaeCtx, Method::Cmae, Method::Cacti]
        );
    }

    #[test]
    fn context_methods_need_context() {
        let mut cfg = tiny_config();
        cfg.context = None;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(BenchmarkConfig::from_json(r#"{"root_seed": 1, "bogus": 2}"#).is_err());
    }
}
