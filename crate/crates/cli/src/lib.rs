//! Command implementations behind the `cacti` binary.
//!
//! Every command returns a [`cacti::Result`]; the binary maps errors to exit
//! codes with [`exit_code`] and prints `error[<kind>]: <message>`.

pub mod benchmark;
pub mod synthetic;

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use cacti::checkpoint::{Checkpoint, FORMAT_VERSION};
use cacti::context::{align_to_schema, load_context};
use cacti::dataset::{
    apply_scaler, fit_scaler, is_missing_token, load_schema_hints, parse_csv, render_csv, ColumnKind, ColumnSchema,
    RawCsv, Table,
};
use cacti::imputation::{impute, ImputeOptions};
use cacti::masking::{self, MaskStrategy};
use cacti::metrics::{MeanImputer, MetricsReport, RmseScale};
use cacti::missingness::{apply_mask, read_mask_csv, simulate, write_mask_csv, Mask, MaskReport, SimConfig};
use cacti::model::{LossMode, ModelConfig, ModelHyper};
use cacti::training::{train, write_trace_csv, TrainConfig};
use cacti::{rng, Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Exit status for an error: 3 for a checkpoint trained on another schema,
/// 1 for I/O and numeric failures, 2 for everything the user can fix in
/// the inputs.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::SchemaMismatch => 3,
        Error::Io { .. } | Error::Numeric(_) => 1,
        _ => 2,
    }
}

pub fn version_string() -> String {
    format!(
        "{} (checkpoint format {FORMAT_VERSION}, context format 1, mask format 1)",
        env!("CARGO_PKG_VERSION")
    )
}

/// Values handed to the missingness simulator: missing cells take their
/// column mean so conditioning columns are always defined.
pub fn simulation_input(table: &Table) -> Result<Array2<f64>> {
    if table.is_complete() {
        return Ok(table.values.clone());
    }
    Ok(MeanImputer::fit(table)?.apply(table)?.values)
}

/// Keeps a cell only if both the table and `mask` have it observed.
pub fn hide_with_mask(table: &Table, mask: &Mask) -> Mask {
    let mut out = mask.clone();
    if out.dim() == table.observed.dim() {
        out.zip_mut_with(&table.observed, |m, &o| *m = *m && o);
    }
    out
}

fn load_table(data: &Path, schema: Option<&Path>) -> Result<(RawCsv, Table)> {
    let hints = schema.map(load_schema_hints).transpose()?;
    let raw = RawCsv::read(data)?;
    let table = parse_csv(&raw, hints.as_ref())?;
    Ok((raw, table))
}

/// Loads a table and hides the cells where an optional mask file has 0.
fn load_masked(data: &Path, mask: Option<&Path>, schema: Option<&Path>) -> Result<(RawCsv, Table)> {
    let (raw, table) = load_table(data, schema)?;
    let Some(mask_path) = mask else {
        return Ok((raw, table));
    };
    let mask = read_mask_csv(mask_path, &table.column_names())?;
    if mask.dim() != table.observed.dim() {
        return Err(Error::Shape(format!(
            "mask has {} rows, data has {}",
            mask.nrows(),
            table.n_rows()
        )));
    }
    let masked = apply_mask(&table, &hide_with_mask(&table, &mask))?;
    Ok((raw, masked))
}

#[derive(Debug, Clone)]
pub struct SimulateArgs {
    pub data: PathBuf,
    pub schema: Option<PathBuf>,
    pub config: SimConfig,
    pub out: PathBuf,
}

/// Sidecar path next to a mask file: `mask.csv` -> `mask.csv.json`.
pub fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<MaskReport> {
    let (_, table) = load_table(&args.data, args.schema.as_deref())?;
    let sim = simulate(&args.config, &simulation_input(&table)?)?;
    let mut sim = sim;
    sim.mask = hide_with_mask(&table, &sim.mask);
    let names = table.column_names();
    write_mask_csv(&sim.mask, &names, &args.out)?;
    let report = MaskReport::new(&args.config, &sim, &names);
    let sidecar = sidecar_path(&args.out);
    std::fs::write(&sidecar, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&sidecar, e))?;
    Ok(report)
}

/// Training options read from `--config`: every field of [`TrainConfig`]
/// plus an optional `model` block.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainFile {
    #[serde(flatten)]
    pub train: TrainConfig,
    #[serde(default)]
    pub model: ModelHyper,
}

impl TrainFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOverrides {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub mask_strategy: Option<MaskStrategy>,
    pub loss_mode: Option<LossMode>,
    pub weight_decay: Option<f64>,
    pub p_cm: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub data: PathBuf,
    pub mask: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub context: Option<PathBuf>,
    pub no_context: bool,
    pub allow_missing_context: bool,
    pub config: Option<PathBuf>,
    pub overrides: TrainOverrides,
    pub out: PathBuf,
    pub trace: Option<PathBuf>,
}

fn trace_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".trace.csv");
    PathBuf::from(s)
}

pub fn resolve_train_config(args: &TrainArgs) -> Result<TrainFile> {
    let mut file = match &args.config {
        Some(p) => TrainFile::load(p)?,
        None => TrainFile::default(),
    };
    let o = &args.overrides;
    let t = &mut file.train;
    t.epochs = o.epochs.unwrap_or(t.epochs);
    t.batch_size = o.batch_size.unwrap_or(t.batch_size);
    t.seed = o.seed.unwrap_or(t.seed);
    t.mask_strategy = o.mask_strategy.unwrap_or(t.mask_strategy);
    t.loss_mode = o.loss_mode.unwrap_or(t.loss_mode);
    t.weight_decay = o.weight_decay.unwrap_or(t.weight_decay);
    t.p_cm = o.p_cm.unwrap_or(t.p_cm);
    if t.warmup_epochs >= t.epochs {
        let w = t.epochs / 6;
        log::warn!("warmup_epochs {} not below epochs {}; using {w}", t.warmup_epochs, t.epochs);
        t.warmup_epochs = w;
    }
    file.train.validate()?;
    Ok(file)
}

pub fn cmd_train(args: &TrainArgs) -> Result<Checkpoint> {
    let file = resolve_train_config(args)?;
    let (_, table) = load_masked(&args.data, args.mask.as_deref(), args.schema.as_deref())?;
    let context = match (&args.context, args.no_context) {
        (Some(path), false) => Some(align_to_schema(&load_context(path)?, &table.schema, args.allow_missing_context)?),
        _ => None,
    };
    let scaler = fit_scaler(&table)?;
    let scaled = apply_scaler(&table, &scaler)?;
    let model_cfg = ModelConfig::new(table.n_cols(), context.as_ref().map_or(0, |c| c.ncols()), file.model)?;
    let outcome = train(&scaled, context.as_ref(), model_cfg, &file.train)?;
    let trace = args.trace.clone().unwrap_or_else(|| trace_path(&args.out));
    write_trace_csv(&outcome.trace, &trace)?;
    let ck = Checkpoint::new(table.schema.clone(), scaler, outcome.model)?;
    ck.save(&args.out)?;
    Ok(ck)
}

#[derive(Debug, Clone)]
pub struct ImputeArgs {
    pub data: PathBuf,
    pub mask: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub out: PathBuf,
    pub round_categorical: bool,
    pub batch_size: usize,
}

/// Schema hints that reproduce the checkpoint's column kinds, so a file
/// parses to the trained schema whenever its contents allow it.
fn hints_from_schema(schema: &[ColumnSchema]) -> HashMap<String, ColumnKind> {
    schema.iter().map(|c| (c.name.clone(), c.kind)).collect()
}

/// Re-encodes labelled columns with the checkpoint's category order.
fn align_categories(table: &mut Table, trained: &[ColumnSchema]) -> Result<()> {
    if table.n_cols() != trained.len() {
        return Err(Error::SchemaMismatch);
    }
    for (k, want) in trained.iter().enumerate() {
        let have = table.schema[k].clone();
        if have.name != want.name || have.categories.is_empty() || have.categories == want.categories {
            continue;
        }
        let map: Vec<Option<usize>> = have
            .categories
            .iter()
            .map(|c| want.categories.iter().position(|w| w == c))
            .collect();
        if map.iter().any(Option::is_none) {
            return Err(Error::SchemaMismatch);
        }
        for i in 0..table.n_rows() {
            if table.observed[[i, k]] {
                let code = table.values[[i, k]] as usize;
                table.values[[i, k]] = map[code].expect("checked") as f64;
            }
        }
        table.schema[k].categories = want.categories.clone();
    }
    Ok(())
}

pub fn cmd_impute(args: &ImputeArgs) -> Result<Table> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let raw = RawCsv::read(&args.data)?;
    let hints = match &args.schema {
        Some(p) => load_schema_hints(p)?,
        None => {
            if !raw.header.iter().eq(ck.schema.iter().map(|c| &c.name)) {
                return Err(Error::SchemaMismatch);
            }
            hints_from_schema(&ck.schema)
        }
    };
    let mut table = parse_csv(&raw, Some(&hints))?;
    align_categories(&mut table, &ck.schema)?;
    ck.check_schema(&table.schema)?;
    if let Some(mask_path) = &args.mask {
        let mask = read_mask_csv(mask_path, &table.column_names())?;
        if mask.dim() != table.observed.dim() {
            return Err(Error::Shape(format!(
                "mask has {} rows, data has {}",
                mask.nrows(),
                table.n_rows()
            )));
        }
        table = apply_mask(&table, &hide_with_mask(&table, &mask))?;
    }
    let opts = ImputeOptions {
        batch_size: args.batch_size,
        round_categorical: args.round_categorical,
    };
    let imputed = impute(&table, &ck, &opts)?;
    // Cells hidden by the mask must not be copied back from the raw file.
    let template = masked_template(&raw, &table);
    let text = render_csv(&imputed, Some(&template), args.round_categorical)?;
    std::fs::write(&args.out, text).map_err(|e| Error::io(&args.out, e))?;
    Ok(imputed)
}

fn masked_template(raw: &RawCsv, table: &Table) -> RawCsv {
    let mut t = raw.clone();
    for (i, row) in t.rows.iter_mut().enumerate() {
        for (k, cell) in row.iter_mut().enumerate() {
            if !table.observed[[i, k]] {
                cell.clear();
            }
        }
    }
    t
}

#[derive(Debug, Clone)]
pub struct EvaluateArgs {
    pub truth: PathBuf,
    pub imputed: PathBuf,
    pub eval_mask: PathBuf,
    pub schema: Option<PathBuf>,
    pub scale: RmseScale,
    pub checkpoint: Option<PathBuf>,
}

/// Reads an imputed file against the truth schema: labels of coded columns
/// map to their codes, anything else must be numeric.
fn parse_imputed(raw: &RawCsv, schema: &[ColumnSchema]) -> Result<Array2<f64>> {
    if raw.header.iter().map(String::as_str).ne(schema.iter().map(|c| c.name.as_str())) {
        return Err(Error::Shape(format!(
            "imputed header {:?} does not match truth header",
            raw.header
        )));
    }
    let mut out = Array2::zeros((raw.rows.len(), schema.len()));
    for (i, row) in raw.rows.iter().enumerate() {
        for (k, cell) in row.iter().enumerate() {
            let token = cell.trim();
            if is_missing_token(token) {
                return Err(Error::Parse {
                    row: i + 1,
                    message: format!("imputed file has an empty cell in column `{}`", schema[k].name),
                });
            }
            out[[i, k]] = match schema[k].categories.iter().position(|c| c == token) {
                Some(code) => code as f64,
                None => token.parse::<f64>().map_err(|_| Error::Parse {
                    row: i + 1,
                    message: format!("`{token}` is neither a number nor a label of `{}`", schema[k].name),
                })?,
            };
        }
    }
    Ok(out)
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<MetricsReport> {
    let (_, truth) = load_table(&args.truth, args.schema.as_deref())?;
    let imputed = parse_imputed(&RawCsv::read(&args.imputed)?, &truth.schema)?;
    if imputed.dim() != truth.values.dim() {
        return Err(Error::Shape(format!(
            "imputed {:?} vs truth {:?}",
            imputed.dim(),
            truth.values.dim()
        )));
    }
    let mask = read_mask_csv(&args.eval_mask, &truth.column_names())?;
    if mask.dim() != truth.observed.dim() {
        return Err(Error::Shape(format!("eval mask {:?} vs truth {:?}", mask.dim(), truth.observed.dim())));
    }
    // Evaluate where the simulator hid a cell whose truth is known.
    let mut eval = truth.observed.clone();
    eval.zip_mut_with(&mask, |e, &m| *e = *e && !m);
    let scaler = args.checkpoint.as_ref().map(Checkpoint::load).transpose()?.map(|c| c.scaler);
    MetricsReport::compute(&truth.column_names(), &truth.values, &imputed, &eval, args.scale, scaler.as_ref())
}

#[derive(Debug, Clone)]
pub struct BatchDumpArgs {
    pub data: PathBuf,
    pub mask: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub batch_size: usize,
    pub p_cm: f64,
    pub seed: u64,
}

/// First MT-CM batch of an epoch, for inspecting masking by hand.
pub fn cmd_dump_batch(args: &BatchDumpArgs) -> Result<masking::MaskedBatch> {
    let (_, table) = load_masked(&args.data, args.mask.as_deref(), args.schema.as_deref())?;
    let mut stream = rng::stream(args.seed);
    let copy = masking::naive_copy_mask(&table.observed, args.p_cm, &mut stream)?;
    let n = args.batch_size.min(table.n_rows()).max(1);
    let ids: Vec<usize> = (0..n).collect();
    cacti::training::build_batch(MaskStrategy::Mtcm, &ids, &table.observed, Some(&copy), args.p_cm, &mut stream)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::SchemaMismatch), 3);
        assert_eq!(exit_code(&Error::Shape("x".into())), 2);
        assert_eq!(exit_code(&Error::Numeric("x".into())), 1);
    }

    #[test]
    fn sidecar_appends_json() {
        assert_eq!(sidecar_path(Path::new("out/m.csv")), PathBuf::from("out/m.csv.json"));
    }

    #[test]
    fn train_file_accepts_partial_json() {
        let f: TrainFile = serde_json::from_str(r#"{"epochs": 5, "model": {"embed_dim": 16}}"#).unwrap();
        assert_eq!(f.train.epochs, 5);
        assert_eq!(f.train.batch_size, 128);
        assert_eq!(f.model.embed_dim, 16);
        assert_eq!(f.model.heads, 8);
    }

    #[test]
    fn imputed_labels_map_to_codes() {
        let schema = vec![
            ColumnSchema::continuous("a"),
            ColumnSchema {
                name: "b".into(),
                kind: ColumnKind::Categorical,
                categories: vec!["x".into(), "y".into()],
            },
        ];
        let raw = RawCsv::from_reader("a,b\n1.5,y\n2,0.4\n".as_bytes()).unwrap();
        let v = parse_imputed(&raw, &schema).unwrap();
        assert_eq!(v, ndarray::array![[1.5, 1.0], [2.0, 0.4]]);
        let bad = RawCsv::from_reader("a,b\n1.5,\n".as_bytes()).unwrap();
        assert!(parse_imputed(&bad, &schema).is_err());
    }
}
