//! Tabular data: CSV loading, schema encoding, min-max scaling and splits.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::Read;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Feature type of a column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Continuous,
    Integer,
    Categorical,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub name: String,
    pub kind: ColumnKind,
    /// Labels in code order. Empty for numeric columns.
    #[serde(default)]
    pub categories: Vec<String>,
}

impl ColumnSchema {
    pub fn continuous(name: impl Into<String>) -> Self {
        ColumnSchema {
            name: name.into(),
            kind: ColumnKind::Continuous,
            categories: Vec::new(),
        }
    }

    /// True when cells hold category codes rather than numbers.
    pub fn is_coded(&self) -> bool {
        !self.categories.is_empty()
    }
}

/// An N×K table with an observed mask. Cells with `observed == false` hold
/// NaN and are never read as data.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub schema: Vec<ColumnSchema>,
    pub values: Array2<f64>,
    pub observed: Array2<bool>,
}

impl Table {
    /// Builds a table, normalising unobserved cells to NaN.
    pub fn new(
        schema: Vec<ColumnSchema>,
        mut values: Array2<f64>,
        observed: Array2<bool>,
    ) -> Result<Self> {
        if values.dim() != observed.dim() {
            return Err(Error::Shape(format!(
                "values {:?} vs observed {:?}",
                values.dim(),
                observed.dim()
            )));
        }
        if schema.len() != values.ncols() {
            return Err(Error::Shape(format!(
                "schema has {} columns, values have {}",
                schema.len(),
                values.ncols()
            )));
        }
        validate_schema(&schema)?;
        for ((v, &o), idx) in values
            .iter_mut()
            .zip(observed.iter())
            .zip(0usize..)
        {
            if !o {
                *v = f64::NAN;
            } else if !v.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "non-finite observed value at flat index {idx}"
                )));
            }
        }
        Ok(Table {
            schema,
            values,
            observed,
        })
    }

    /// A fully observed table with continuous columns.
    pub fn from_complete(names: &[&str], values: Array2<f64>) -> Result<Self> {
        let schema = names.iter().map(|n| ColumnSchema::continuous(*n)).collect();
        let observed = Array2::from_elem(values.dim(), true);
        Table::new(schema, values, observed)
    }

    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn column_names(&self) -> Vec<&str> {
        self.schema.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn is_complete(&self) -> bool {
        self.observed.iter().all(|&o| o)
    }

    /// Rows in the given order (indices may repeat).
    pub fn select_rows(&self, rows: &[usize]) -> Table {
        Table {
            schema: self.schema.clone(),
            values: self.values.select(Axis(0), rows),
            observed: self.observed.select(Axis(0), rows),
        }
    }

    pub fn observed_count(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }
}

fn validate_schema(schema: &[ColumnSchema]) -> Result<()> {
    let mut names = HashSet::new();
    for col in schema {
        if col.name.is_empty() {
            return Err(Error::Schema("empty column name".into()));
        }
        if !names.insert(col.name.as_str()) {
            return Err(Error::Schema(format!("duplicate column name `{}`", col.name)));
        }
        let mut labels = HashSet::new();
        for label in &col.categories {
            if !labels.insert(label.as_str()) {
                return Err(Error::Schema(format!(
                    "duplicate category `{label}` in column `{}`",
                    col.name
                )));
            }
        }
    }
    Ok(())
}

/// Header and raw cell text of a CSV file, kept so observed cells can be
/// written back exactly as they were read.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCsv {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl RawCsv {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(file)
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
        if header.is_empty() || header.iter().all(|h| h.is_empty()) {
            return Err(Error::Parse {
                row: 0,
                message: "missing header".into(),
            });
        }
        let mut rows = Vec::new();
        for (i, record) in rdr.records().enumerate() {
            let record = record?;
            // data rows are 1-based, the header is row 0
            if record.len() != header.len() {
                return Err(Error::Parse {
                    row: i + 1,
                    message: format!("expected {} fields, found {}", header.len(), record.len()),
                });
            }
            rows.push(record.iter().map(str::to_string).collect());
        }
        Ok(RawCsv { header, rows })
    }
}

/// True for the tokens that mark a missing cell.
pub fn is_missing_token(token: &str) -> bool {
    let t = token.trim();
    t.is_empty() || t == "NA"
}

/// Reads a schema-hint file: `{"column": "continuous" | "integer" | ...}`.
pub fn load_schema_hints(path: impl AsRef<Path>) -> Result<HashMap<String, ColumnKind>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads a CSV file into a [`Table`].
pub fn load_csv(path: impl AsRef<Path>, hints: Option<&HashMap<String, ColumnKind>>) -> Result<Table> {
    parse_csv(&RawCsv::read(path)?, hints)
}

/// Encodes raw CSV text. Numeric columns parse as reals, columns of labels
/// are ordinal-encoded in first-appearance order.
pub fn parse_csv(raw: &RawCsv, hints: Option<&HashMap<String, ColumnKind>>) -> Result<Table> {
    let n = raw.rows.len();
    let k = raw.header.len();
    if n == 0 {
        return Err(Error::Parse {
            row: 1,
            message: "no data rows".into(),
        });
    }
    if let Some(hints) = hints {
        for name in hints.keys() {
            if !raw.header.contains(name) {
                return Err(Error::Schema(format!("hint for unknown column `{name}`")));
            }
        }
    }

    let mut values = Array2::from_elem((n, k), f64::NAN);
    let mut observed = Array2::from_elem((n, k), false);
    let mut schema = Vec::with_capacity(k);

    for (j, name) in raw.header.iter().enumerate() {
        let hint = hints.and_then(|h| h.get(name)).copied();
        let tokens: Vec<Option<&str>> = raw
            .rows
            .iter()
            .map(|r| {
                let t = r[j].trim();
                (!is_missing_token(t)).then_some(t)
            })
            .collect();
        let numeric: Vec<Option<f64>> = tokens
            .iter()
            .map(|t| t.and_then(|s| s.parse::<f64>().ok().filter(|v| v.is_finite())))
            .collect();
        let present = tokens.iter().filter(|t| t.is_some()).count();
        let parsed = numeric.iter().filter(|v| v.is_some()).count();

        let as_labels = match hint {
            Some(ColumnKind::Categorical) => true,
            _ if parsed == present => false,
            // no numeric token at all: a label column
            _ if parsed == 0 => true,
            Some(ColumnKind::Binary) => true,
            _ => {
                return Err(Error::Schema(format!(
                    "column `{name}` mixes numeric and non-numeric tokens; pass a categorical hint"
                )))
            }
        };

        if as_labels {
            let mut categories: Vec<String> = Vec::new();
            let mut codes: HashMap<&str, usize> = HashMap::new();
            for (i, t) in tokens.iter().enumerate() {
                if let Some(label) = t {
                    let next = codes.len();
                    let code = *codes.entry(label).or_insert_with(|| {
                        categories.push(label.to_string());
                        next
                    });
                    values[[i, j]] = code as f64;
                    observed[[i, j]] = true;
                }
            }
            let kind = hint.unwrap_or(ColumnKind::Categorical);
            if kind == ColumnKind::Binary && categories.len() > 2 {
                return Err(Error::Schema(format!(
                    "binary column `{name}` has {} labels",
                    categories.len()
                )));
            }
            schema.push(ColumnSchema {
                name: name.clone(),
                kind: if kind == ColumnKind::Binary {
                    ColumnKind::Binary
                } else {
                    ColumnKind::Categorical
                },
                categories,
            });
        } else {
            let kind = hint.unwrap_or(ColumnKind::Continuous);
            for (i, v) in numeric.iter().enumerate() {
                if let Some(v) = *v {
                    match kind {
                        ColumnKind::Integer if v.fract() != 0.0 => {
                            return Err(Error::Parse {
                                row: i + 1,
                                message: format!("integer column `{name}` holds {v}"),
                            })
                        }
                        ColumnKind::Binary if v != 0.0 && v != 1.0 => {
                            return Err(Error::Parse {
                                row: i + 1,
                                message: format!("binary column `{name}` holds {v}"),
                            })
                        }
                        _ => {}
                    }
                    values[[i, j]] = v;
                    observed[[i, j]] = true;
                }
            }
            schema.push(ColumnSchema {
                name: name.clone(),
                kind,
                categories: Vec::new(),
            });
        }
    }
    Table::new(schema, values, observed)
}

/// Formats a real the way the crate writes numbers: shortest round-trip form.
pub fn format_value(v: f64) -> String {
    format!("{v}")
}

/// Renders a table as CSV text.
///
/// Unobserved cells become empty strings. When `template` is given, cells that
/// are observed in `table` and present in the template are copied verbatim.
/// With `labels` set, coded columns are written as their category label after
/// rounding to the nearest valid code.
pub fn render_csv(table: &Table, template: Option<&RawCsv>, labels: bool) -> Result<String> {
    let mut wtr = csv::WriterBuilder::new().from_writer(Vec::new());
    wtr.write_record(table.schema.iter().map(|c| c.name.as_str()))?;
    for i in 0..table.n_rows() {
        let mut record = Vec::with_capacity(table.n_cols());
        for (j, col) in table.schema.iter().enumerate() {
            let cell = if !table.observed[[i, j]] {
                String::new()
            } else if let Some(raw) = template
                .and_then(|t| t.rows.get(i))
                .map(|r| r[j].as_str())
                .filter(|t| !is_missing_token(t))
            {
                raw.to_string()
            } else {
                let v = table.values[[i, j]];
                if labels && col.is_coded() {
                    let code = nearest_code(v, col.categories.len());
                    col.categories[code].clone()
                } else {
                    format_value(v)
                }
            };
            record.push(cell);
        }
        wtr.write_record(&record)?;
    }
    let bytes = wtr
        .into_inner()
        .map_err(|e| Error::InvalidInput(format!("csv writer: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::InvalidInput(e.to_string()))
}

/// Rounds a code to the nearest valid index in `0..n_categories`.
pub fn nearest_code(v: f64, n_categories: usize) -> usize {
    let max = n_categories.saturating_sub(1) as f64;
    let r = if v.is_finite() { v.round() } else { 0.0 };
    r.clamp(0.0, max) as usize
}

pub fn write_csv(table: &Table, path: impl AsRef<Path>, template: Option<&RawCsv>, labels: bool) -> Result<()> {
    let path = path.as_ref();
    let text = render_csv(table, template, labels)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Seeded row partition. Returns `(train_rows, test_rows)`, both in shuffled
/// order.
pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test fraction {test_fraction} outside (0, 1)"
        )));
    }
    if n < 2 {
        return Err(Error::InvalidArgument(format!("cannot split {n} rows")));
    }
    let n_test = (test_fraction * n as f64).round() as usize;
    if n_test == 0 || n_test == n {
        return Err(Error::InvalidArgument(format!(
            "test fraction {test_fraction} of {n} rows leaves an empty split"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed));
    let train = order.split_off(n_test);
    Ok((train, order))
}

pub fn split_train_test(table: &Table, test_fraction: f64, seed: u64) -> Result<(Table, Table)> {
    let (train, test) = split_indices(table.n_rows(), test_fraction, seed)?;
    Ok((table.select_rows(&train), table.select_rows(&test)))
}

/// Per-column min/max fitted on observed cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerState {
    pub ranges: Vec<(f64, f64)>,
}

impl ScalerState {
    pub fn n_cols(&self) -> usize {
        self.ranges.len()
    }

    /// Scales one value of column `col`.
    pub fn scale(&self, col: usize, x: f64) -> f64 {
        let (lo, hi) = self.ranges[col];
        if hi > lo {
            (x - lo) / (hi - lo)
        } else {
            0.5
        }
    }

    /// Maps a scaled value of column `col` back. Out-of-range inputs
    /// extrapolate linearly.
    pub fn unscale(&self, col: usize, s: f64) -> f64 {
        let (lo, hi) = self.ranges[col];
        if hi > lo {
            lo + s * (hi - lo)
        } else {
            lo
        }
    }
}

pub fn fit_scaler(table: &Table) -> Result<ScalerState> {
    let mut ranges = Vec::with_capacity(table.n_cols());
    for (j, col) in table.schema.iter().enumerate() {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (v, &o) in table.values.column(j).iter().zip(table.observed.column(j)) {
            if o {
                lo = lo.min(*v);
                hi = hi.max(*v);
            }
        }
        if lo > hi {
            return Err(Error::UnscalableColumn(col.name.clone()));
        }
        ranges.push((lo, hi));
    }
    Ok(ScalerState { ranges })
}

/// Scales observed cells into the fitted range; unobserved cells stay NaN.
pub fn apply_scaler(table: &Table, scaler: &ScalerState) -> Result<Table> {
    if scaler.n_cols() != table.n_cols() {
        return Err(Error::Shape(format!(
            "scaler has {} columns, table has {}",
            scaler.n_cols(),
            table.n_cols()
        )));
    }
    let mut out = table.clone();
    for ((i, j), v) in out.values.indexed_iter_mut() {
        if table.observed[[i, j]] {
            *v = scaler.scale(j, *v);
        }
    }
    Ok(out)
}

/// Maps an N×K matrix of scaled values back to original units.
pub fn invert_scaler(values: &Array2<f64>, scaler: &ScalerState) -> Result<Array2<f64>> {
    if scaler.n_cols() != values.ncols() {
        return Err(Error::Shape(format!(
            "scaler has {} columns, values have {}",
            scaler.n_cols(),
            values.ncols()
        )));
    }
    let mut out = values.clone();
    for ((_, j), v) in out.indexed_iter_mut() {
        *v = scaler.unscale(j, *v);
    }
    Ok(out)
}
