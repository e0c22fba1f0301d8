//! Simulated missingness: MCAR, logistic MAR and MNAR masks.
//!
//! Masks use `true` for observed cells. The MAR construction picks a random
//! subset of always-observed input columns and masks every other column with
//! probability `sigmoid(w·z + b)`, where `z` are the z-scored inputs, `w` is
//! Gaussian and rescaled to give unit-variance logits, and `b` is found by
//! bisection so the mean probability equals `p_miss`. MNAR additionally
//! masks the input columns completely at random.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, Zip};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::Table;
use crate::error::{Error, Result};
use crate::rng;

/// N×K observed mask, `true` = observed.
pub type Mask = Array2<bool>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Mcar,
    Mar,
    Mnar,
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mechanism::Mcar => "mcar",
            Mechanism::Mar => "mar",
            Mechanism::Mnar => "mnar",
        })
    }
}

impl FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mcar" => Ok(Mechanism::Mcar),
            "mar" => Ok(Mechanism::Mar),
            "mnar" => Ok(Mechanism::Mnar),
            other => Err(Error::InvalidArgument(format!("unknown mechanism `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub mechanism: Mechanism,
    pub p_miss: f64,
    /// Fraction of columns used as always-observed inputs (MAR/MNAR).
    #[serde(default = "default_p_obs")]
    pub p_obs: f64,
    pub seed: u64,
}

fn default_p_obs() -> f64 {
    0.3
}

impl SimConfig {
    pub fn new(mechanism: Mechanism, p_miss: f64, seed: u64) -> Self {
        SimConfig {
            mechanism,
            p_miss,
            p_obs: default_p_obs(),
            seed,
        }
    }
}

/// Result of a simulator run.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub mask: Mask,
    /// Columns that condition the logistic model; empty for MCAR.
    pub input_columns: Vec<usize>,
    /// Calibrated logits per cell (NaN on input columns); absent for MCAR.
    pub logits: Option<Array2<f64>>,
}

/// Sidecar metadata written next to a mask file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskReport {
    pub mechanism: Mechanism,
    pub p_miss: f64,
    pub p_obs: f64,
    pub seed: u64,
    pub observed_columns: Vec<String>,
    /// Fraction of all cells hidden.
    pub realized_rate: f64,
    /// Fraction of hidden cells among non-input columns.
    pub maskable_rate: f64,
}

impl MaskReport {
    pub fn new(cfg: &SimConfig, sim: &Simulation, names: &[&str]) -> Self {
        let k = sim.mask.ncols();
        let maskable: Vec<usize> = match cfg.mechanism {
            Mechanism::Mcar => (0..k).collect(),
            _ => (0..k).filter(|j| !sim.input_columns.contains(j)).collect(),
        };
        MaskReport {
            mechanism: cfg.mechanism,
            p_miss: cfg.p_miss,
            p_obs: cfg.p_obs,
            seed: cfg.seed,
            observed_columns: sim
                .input_columns
                .iter()
                .map(|&j| names[j].to_string())
                .collect(),
            realized_rate: missing_rate(&sim.mask, &(0..k).collect::<Vec<_>>()),
            maskable_rate: missing_rate(&sim.mask, &maskable),
        }
    }
}

/// Fraction of hidden cells over the given columns.
pub fn missing_rate(mask: &Mask, columns: &[usize]) -> f64 {
    let total = mask.nrows() * columns.len();
    if total == 0 {
        return 0.0;
    }
    let hidden: usize = columns
        .iter()
        .map(|&j| mask.column(j).iter().filter(|&&o| !o).count())
        .sum();
    hidden as f64 / total as f64
}

fn check_rate(name: &str, p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{name} = {p} outside (0, 1)")))
    }
}

pub fn simulate_mcar(n: usize, k: usize, p_miss: f64, seed: u64) -> Result<Mask> {
    check_rate("p_miss", p_miss)?;
    let mut stream = rng::stream(seed);
    Ok(Array2::from_shape_simple_fn((n, k), || {
        stream.random::<f64>() >= p_miss
    }))
}

pub fn simulate_mar(x: &Array2<f64>, p_miss: f64, p_obs: f64, seed: u64) -> Result<Simulation> {
    check_rate("p_miss", p_miss)?;
    check_rate("p_obs", p_obs)?;
    let (n, k) = x.dim();
    if k < 2 {
        return Err(Error::InvalidArgument(format!("MAR needs at least 2 columns, got {k}")));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("no rows".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("MAR/MNAR simulation needs fully observed data".into()));
    }
    let d_obs = ((p_obs * k as f64).floor() as usize).max(1);
    if d_obs >= k {
        return Err(Error::InvalidArgument(format!(
            "p_obs = {p_obs} leaves no maskable column out of {k}"
        )));
    }

    let mut stream = rng::stream(seed);
    let mut columns: Vec<usize> = (0..k).collect();
    columns.shuffle(&mut stream);
    let mut inputs = columns[..d_obs].to_vec();
    inputs.sort_unstable();
    let maskable: Vec<usize> = (0..k).filter(|j| !inputs.contains(j)).collect();

    let z = zscore_columns(x, &inputs);
    let mut logits = Array2::from_elem((n, k), f64::NAN);
    let mut mask = Array2::from_elem((n, k), true);

    for &j in &maskable {
        let w: Array1<f64> = (0..d_obs).map(|_| stream.sample(StandardNormal)).collect();
        let mut raw = z.dot(&w);
        let sd = population_std(raw.as_slice().expect("contiguous"));
        if sd > 0.0 {
            raw /= sd;
        }
        let b = fit_intercept(raw.as_slice().expect("contiguous"), p_miss)?;
        logits.column_mut(j).assign(&raw.mapv(|l| l + b));
    }
    for i in 0..n {
        for &j in &maskable {
            let p = sigmoid(logits[[i, j]]);
            mask[[i, j]] = stream.random::<f64>() >= p;
        }
    }
    Ok(Simulation {
        mask,
        input_columns: inputs,
        logits: Some(logits),
    })
}

pub fn simulate_mnar(x: &Array2<f64>, p_miss: f64, p_obs: f64, seed: u64) -> Result<Simulation> {
    let mut sim = simulate_mar(x, p_miss, p_obs, seed)?;
    let mut stream = rng::stream(rng::derive_named(seed, "mnar-inputs"));
    for i in 0..x.nrows() {
        for &j in &sim.input_columns {
            sim.mask[[i, j]] = stream.random::<f64>() >= p_miss;
        }
    }
    Ok(sim)
}

/// Runs the configured mechanism on fully observed values.
pub fn simulate(cfg: &SimConfig, x: &Array2<f64>) -> Result<Simulation> {
    match cfg.mechanism {
        Mechanism::Mcar => Ok(Simulation {
            mask: simulate_mcar(x.nrows(), x.ncols(), cfg.p_miss, cfg.seed)?,
            input_columns: Vec::new(),
            logits: None,
        }),
        Mechanism::Mar => simulate_mar(x, cfg.p_miss, cfg.p_obs, cfg.seed),
        Mechanism::Mnar => simulate_mnar(x, cfg.p_miss, cfg.p_obs, cfg.seed),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn population_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// z-scores the selected columns; constant columns become zeros.
fn zscore_columns(x: &Array2<f64>, columns: &[usize]) -> Array2<f64> {
    let mut z = Array2::zeros((x.nrows(), columns.len()));
    for (c, &j) in columns.iter().enumerate() {
        let col = x.column(j).to_vec();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let sd = population_std(&col);
        if sd > 0.0 {
            z.column_mut(c)
                .iter_mut()
                .zip(&col)
                .for_each(|(dst, v)| *dst = (v - mean) / sd);
        }
    }
    z
}

const INTERCEPT_BOUND: f64 = 50.0;
const INTERCEPT_TOL: f64 = 1e-4;
const INTERCEPT_MAX_ITER: usize = 100;

/// Finds `b` with `mean(sigmoid(logits + b)) == target` by bisection.
fn fit_intercept(logits: &[f64], target: f64) -> Result<f64> {
    let mean_prob = |b: f64| logits.iter().map(|l| sigmoid(l + b)).sum::<f64>() / logits.len() as f64;
    let (mut lo, mut hi) = (-INTERCEPT_BOUND, INTERCEPT_BOUND);
    if mean_prob(lo) > target || mean_prob(hi) < target {
        return Err(Error::Simulator(format!(
            "target rate {target} not bracketed by intercepts in [{lo}, {hi}]"
        )));
    }
    for _ in 0..INTERCEPT_MAX_ITER {
        let mid = 0.5 * (lo + hi);
        let err = mean_prob(mid) - target;
        if err.abs() < INTERCEPT_TOL {
            return Ok(mid);
        }
        if err < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Simulator(format!(
        "intercept bisection did not converge for rate {target}"
    )))
}

/// Hides the cells where `mask` is false. The mask may only hide cells that
/// are currently observed.
pub fn apply_mask(table: &Table, mask: &Mask) -> Result<Table> {
    if mask.dim() != table.observed.dim() {
        return Err(Error::Shape(format!(
            "mask {:?} vs table {:?}",
            mask.dim(),
            table.observed.dim()
        )));
    }
    if let Some(((i, j), _)) = mask
        .indexed_iter()
        .find(|&((i, j), &m)| m && !table.observed[[i, j]])
    {
        return Err(Error::InvalidMask(format!(
            "mask marks cell ({i}, {j}) observed but the table has it missing"
        )));
    }
    let mut out = table.clone();
    Zip::from(&mut out.values)
        .and(&mut out.observed)
        .and(mask)
        .for_each(|v, o, &m| {
            if !m {
                *o = false;
                *v = f64::NAN;
            }
        });
    Ok(out)
}

/// Writes a 0/1 mask as CSV with the given header.
pub fn write_mask_csv(mask: &Mask, header: &[&str], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(header)?;
    for row in mask.rows() {
        wtr.write_record(row.iter().map(|&o| if o { "1" } else { "0" }))?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}

/// Reads a 0/1 mask CSV; the header must equal `expected_header`.
pub fn read_mask_csv(path: impl AsRef<Path>, expected_header: &[&str]) -> Result<Mask> {
    let raw = crate::dataset::RawCsv::read(path)?;
    if raw.header.iter().map(String::as_str).ne(expected_header.iter().copied()) {
        return Err(Error::Shape(format!(
            "mask header {:?} does not match data header {:?}",
            raw.header, expected_header
        )));
    }
    let (n, k) = (raw.rows.len(), raw.header.len());
    let mut mask = Array2::from_elem((n, k), true);
    for (i, row) in raw.rows.iter().enumerate() {
        for (j, cell) in row.iter().enumerate() {
            mask[[i, j]] = match cell.trim() {
                "1" => true,
                "0" => false,
                other => {
                    return Err(Error::Parse {
                        row: i + 1,
                        message: format!("mask cell `{other}` is not 0 or 1"),
                    })
                }
            };
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ColumnSchema;
    use ndarray::array;
    use rand_distr::Distribution;

    fn gaussian(n: usize, k: usize, seed: u64) -> Array2<f64> {
        let mut s = rng::stream(seed);
        Array2::from_shape_simple_fn((n, k), || StandardNormal.sample(&mut s))
    }

    #[test]
    fn mcar_rejects_boundary_rates() {
        assert!(simulate_mcar(10, 10, 0.0, 1).is_err());
        assert!(simulate_mcar(10, 10, 1.0, 1).is_err());
        let m = simulate_mcar(10, 10, 1e-12, 1).unwrap();
        assert!(m.iter().all(|&o| o));
    }

    #[test]
    fn mcar_is_seeded() {
        assert_eq!(simulate_mcar(20, 5, 0.3, 9).unwrap(), simulate_mcar(20, 5, 0.3, 9).unwrap());
        assert_ne!(simulate_mcar(20, 5, 0.3, 9).unwrap(), simulate_mcar(20, 5, 0.3, 10).unwrap());
    }

    #[test]
    fn intercept_hits_target() {
        let logits: Vec<f64> = (0..1000).map(|i| (i as f64 / 500.0) - 1.0).collect();
        let b = fit_intercept(&logits, 0.3).unwrap();
        let mean = logits.iter().map(|l| sigmoid(l + b)).sum::<f64>() / 1000.0;
        assert!((mean - 0.3).abs() < 1e-4);
    }

    #[test]
    fn mar_inputs_stay_observed() {
        let x = gaussian(2000, 8, 1);
        let sim = simulate_mar(&x, 0.3, 0.3, 5).unwrap();
        assert_eq!(sim.input_columns.len(), 2);
        for &j in &sim.input_columns {
            assert!(sim.mask.column(j).iter().all(|&o| o));
        }
    }

    #[test]
    fn mar_needs_two_columns_and_complete_data() {
        let x = gaussian(10, 1, 1);
        assert!(simulate_mar(&x, 0.3, 0.3, 1).is_err());
        let mut x = gaussian(10, 3, 1);
        x[[0, 0]] = f64::NAN;
        assert!(simulate_mar(&x, 0.3, 0.3, 1).is_err());
    }

    #[test]
    fn constant_input_column_contributes_nothing() {
        let mut x = gaussian(500, 2, 3);
        x.column_mut(0).fill(4.0);
        x.column_mut(1).fill(4.0);
        let sim = simulate_mar(&x, 0.3, 0.3, 2).unwrap();
        let logits = sim.logits.unwrap();
        let j = 1 - sim.input_columns[0];
        let first = logits[[0, j]];
        assert!(logits.column(j).iter().all(|&l| l == first));
    }

    #[test]
    fn mnar_keeps_mar_mask_on_non_inputs() {
        let x = gaussian(1000, 6, 4);
        let mar = simulate_mar(&x, 0.3, 0.3, 8).unwrap();
        let mnar = simulate_mnar(&x, 0.3, 0.3, 8).unwrap();
        assert_eq!(mar.input_columns, mnar.input_columns);
        for j in 0..6 {
            if !mar.input_columns.contains(&j) {
                assert_eq!(mar.mask.column(j), mnar.mask.column(j));
            }
        }
        assert_eq!(simulate_mnar(&x, 0.3, 0.3, 8).unwrap().mask, mnar.mask);
    }

    fn table() -> Table {
        Table::new(
            vec![ColumnSchema::continuous("a"), ColumnSchema::continuous("b")],
            array![[1.0, 2.0], [3.0, f64::NAN]],
            array![[true, true], [true, false]],
        )
        .unwrap()
    }

    #[test]
    fn apply_mask_examples() {
        let t = table();
        let all = Array2::from_elem((2, 2), true);
        assert!(matches!(apply_mask(&t, &all), Err(Error::InvalidMask(_))));

        let keep = t.observed.clone();
        let same = apply_mask(&t, &keep).unwrap();
        assert_eq!(same.observed, t.observed);

        let mut hide = keep.clone();
        hide[[0, 0]] = false;
        let out = apply_mask(&t, &hide).unwrap();
        assert!(!out.observed[[0, 0]]);
        assert!(out.values[[0, 0]].is_nan());
        assert_eq!(t.values[[0, 0]], 1.0);

        let wrong = Array2::from_elem((3, 2), true);
        assert!(matches!(apply_mask(&t, &wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn mask_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let m = array![[true, false], [false, true], [true, true]];
        write_mask_csv(&m, &["a", "b"], &path).unwrap();
        assert_eq!(read_mask_csv(&path, &["a", "b"]).unwrap(), m);
        assert!(read_mask_csv(&path, &["a", "c"]).is_err());
    }
}
