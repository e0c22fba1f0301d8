//! Imputation quality at evaluation positions.
//!
//! `eval` masks mark the cells whose truth is known but were hidden from the
//! imputer. Only those cells are read from the imputed matrix.

use std::fmt::Write as _;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::dataset::{ScalerState, Table};
use crate::error::{Error, Result};

/// Columns with fewer evaluation cells are left out of the aggregates.
pub const MIN_EVAL: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RmseScale {
    /// Residuals divided by the standard deviation of the truth column.
    #[default]
    Standardized,
    Original,
    /// Residuals in the units of the train-fitted min-max scaler.
    Minmax,
}

impl std::str::FromStr for RmseScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "standardized" => Ok(RmseScale::Standardized),
            "original" => Ok(RmseScale::Original),
            "minmax" => Ok(RmseScale::Minmax),
            other => Err(Error::InvalidArgument(format!("unknown RMSE scale `{other}`"))),
        }
    }
}

fn check_shapes(truth: &Array2<f64>, imputed: &Array2<f64>, eval: &Array2<bool>) -> Result<()> {
    if truth.dim() != imputed.dim() || truth.dim() != eval.dim() {
        return Err(Error::Shape(format!(
            "truth {:?}, imputed {:?}, eval mask {:?}",
            truth.dim(),
            imputed.dim(),
            eval.dim()
        )));
    }
    for ((i, k), &e) in eval.indexed_iter() {
        if e && !(truth[[i, k]].is_finite() && imputed[[i, k]].is_finite()) {
            return Err(Error::Metric(format!("evaluation cell ({i}, {k}) is not finite")));
        }
    }
    Ok(())
}

/// (truth, imputed) pairs at the evaluation cells of column `k`.
fn column_pairs(truth: &Array2<f64>, imputed: &Array2<f64>, eval: &Array2<bool>, k: usize) -> (Vec<f64>, Vec<f64>) {
    let mut t = Vec::new();
    let mut p = Vec::new();
    for i in 0..truth.nrows() {
        if eval[[i, k]] {
            t.push(truth[[i, k]]);
            p.push(imputed[[i, k]]);
        }
    }
    (t, p)
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Squared Pearson correlation, 0 when either side is constant.
pub fn pearson_r2(a: &[f64], b: &[f64]) -> f64 {
    // Exact check first: the mean of equal values can round away from them.
    let constant = |x: &[f64]| x.windows(2).all(|w| w[0] == w[1]);
    if constant(a) || constant(b) {
        return 0.0;
    }
    let (ma, mb) = (mean(a), mean(b));
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    (sab * sab / (saa * sbb)).clamp(0.0, 1.0)
}

/// Per-column R² (`None` for columns below [`MIN_EVAL`]) and their mean.
pub fn r_squared(truth: &Array2<f64>, imputed: &Array2<f64>, eval: &Array2<bool>) -> Result<(Vec<Option<f64>>, f64)> {
    check_shapes(truth, imputed, eval)?;
    let per: Vec<Option<f64>> = (0..truth.ncols())
        .map(|k| {
            let (t, p) = column_pairs(truth, imputed, eval, k);
            (t.len() >= MIN_EVAL).then(|| pearson_r2(&t, &p))
        })
        .collect();
    let eligible: Vec<f64> = per.iter().flatten().copied().collect();
    if eligible.is_empty() {
        return Err(Error::Metric("no column has enough evaluation cells".into()));
    }
    Ok((per, mean(&eligible)))
}

/// Population standard deviation of the finite entries of each column.
fn column_std(truth: &Array2<f64>) -> Vec<f64> {
    truth
        .columns()
        .into_iter()
        .map(|c| {
            let v: Vec<f64> = c.iter().copied().filter(|x| x.is_finite()).collect();
            if v.is_empty() {
                return 0.0;
            }
            let m = mean(&v);
            (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
        })
        .collect()
}

/// Divisor applied to residuals of each column on the given scale.
fn scale_divisors(truth: &Array2<f64>, scale: RmseScale, scaler: Option<&ScalerState>) -> Result<Vec<Option<f64>>> {
    Ok(match scale {
        RmseScale::Original => vec![Some(1.0); truth.ncols()],
        RmseScale::Standardized => column_std(truth)
            .into_iter()
            .enumerate()
            .map(|(k, s)| {
                if s > 0.0 {
                    Some(s)
                } else {
                    log::warn!("column {k} has zero variance and is skipped for standardized RMSE");
                    None
                }
            })
            .collect(),
        RmseScale::Minmax => {
            let scaler = scaler.ok_or_else(|| Error::Metric("min-max RMSE needs the train scaler".into()))?;
            if scaler.n_cols() != truth.ncols() {
                return Err(Error::Shape(format!(
                    "scaler of {} columns for {} columns",
                    scaler.n_cols(),
                    truth.ncols()
                )));
            }
            scaler
                .ranges
                .iter()
                .map(|&(lo, hi)| Some(if hi > lo { hi - lo } else { 1.0 }))
                .collect()
        }
    })
}

/// Pooled RMSE over every evaluation cell after the per-column transform.
pub fn rmse(
    truth: &Array2<f64>,
    imputed: &Array2<f64>,
    eval: &Array2<bool>,
    scale: RmseScale,
    scaler: Option<&ScalerState>,
) -> Result<f64> {
    Ok(rmse_by_column(truth, imputed, eval, scale, scaler)?.1)
}

fn rmse_by_column(
    truth: &Array2<f64>,
    imputed: &Array2<f64>,
    eval: &Array2<bool>,
    scale: RmseScale,
    scaler: Option<&ScalerState>,
) -> Result<(Vec<Option<f64>>, f64)> {
    check_shapes(truth, imputed, eval)?;
    let divisors = scale_divisors(truth, scale, scaler)?;
    let mut total = 0.0;
    let mut count = 0usize;
    let mut per = Vec::with_capacity(truth.ncols());
    for (k, div) in divisors.iter().enumerate() {
        let (t, p) = column_pairs(truth, imputed, eval, k);
        match div {
            Some(d) if !t.is_empty() => {
                let sq: f64 = t.iter().zip(&p).map(|(a, b)| ((a - b) / d).powi(2)).sum();
                total += sq;
                count += t.len();
                per.push(Some((sq / t.len() as f64).sqrt()));
            }
            _ => per.push(None),
        }
    }
    if count == 0 {
        return Err(Error::Metric("no evaluation cells".into()));
    }
    Ok((per, (total / count as f64).sqrt()))
}

/// Exact 1-Wasserstein distance between two empirical distributions.
///
/// Walks the merged breakpoints of both quantile functions and integrates
/// the absolute gap piece by piece.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("Wasserstein distance of an empty sample".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("Wasserstein distance of non-finite values".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len(), b.len());
    // Quantile level q lies in piece i of `a` while q < (i + 1) / na; compare
    // with integer cross-multiplication to stay exact.
    let (mut i, mut j) = (0usize, 0usize);
    let mut prev = 0.0;
    let mut total = 0.0;
    while i < na && j < nb {
        let next_a = (i + 1) * nb;
        let next_b = (j + 1) * na;
        let next = next_a.min(next_b);
        let level = next as f64 / (na * nb) as f64;
        total += (level - prev) * (a[i] - b[j]).abs();
        prev = level;
        if next_a == next {
            i += 1;
        }
        if next_b == next {
            j += 1;
        }
    }
    Ok(total)
}

/// Column means of the observed cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanImputer {
    pub means: Vec<f64>,
}

impl MeanImputer {
    pub fn fit(table: &Table) -> Result<Self> {
        let means = (0..table.n_cols())
            .map(|k| {
                let v: Vec<f64> = (0..table.n_rows())
                    .filter(|&i| table.observed[[i, k]])
                    .map(|i| table.values[[i, k]])
                    .collect();
                if v.is_empty() {
                    Err(Error::UnscalableColumn(table.schema[k].name.clone()))
                } else {
                    Ok(mean(&v))
                }
            })
            .collect::<Result<_>>()?;
        Ok(MeanImputer { means })
    }

    pub fn apply(&self, table: &Table) -> Result<Table> {
        if table.n_cols() != self.means.len() {
            return Err(Error::Shape(format!(
                "mean imputer for {} columns applied to {}",
                self.means.len(),
                table.n_cols()
            )));
        }
        let mut out = table.clone();
        for ((i, k), &o) in table.observed.indexed_iter() {
            if !o {
                out.values[[i, k]] = self.means[k];
            }
        }
        out.observed.fill(true);
        Ok(out)
    }
}

/// Fills missing cells with the column mean of the same table.
pub fn mean_impute(table: &Table) -> Result<Table> {
    MeanImputer::fit(table)?.apply(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMetrics {
    pub name: String,
    pub r2: Option<f64>,
    pub rmse: Option<f64>,
    pub wd: Option<f64>,
    pub n_eval: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub columns: Vec<ColumnMetrics>,
    pub r2_mean: f64,
    /// Pooled RMSE on `rmse_scale`.
    pub rmse: f64,
    pub rmse_scale: RmseScale,
    pub rmse_standardized: Option<f64>,
    pub rmse_original: f64,
    pub rmse_minmax: Option<f64>,
    /// Mean per-column W1 in original units.
    pub wd_mean: f64,
    pub n_eval: usize,
    pub aggregation: String,
}

impl MetricsReport {
    /// Computes all metrics; `truth` and `imputed` are in original units.
    pub fn compute(
        names: &[&str],
        truth: &Array2<f64>,
        imputed: &Array2<f64>,
        eval: &Array2<bool>,
        scale: RmseScale,
        scaler: Option<&ScalerState>,
    ) -> Result<Self> {
        check_shapes(truth, imputed, eval)?;
        if names.len() != truth.ncols() {
            return Err(Error::Shape(format!("{} names for {} columns", names.len(), truth.ncols())));
        }
        let (r2, r2_mean) = r_squared(truth, imputed, eval)?;
        let (per_rmse, pooled) = rmse_by_column(truth, imputed, eval, scale, scaler)?;
        let optional = |s: RmseScale| -> Result<Option<f64>> {
            match rmse(truth, imputed, eval, s, scaler) {
                Ok(v) => Ok(Some(v)),
                Err(Error::Metric(_)) => Ok(None),
                Err(e) => Err(e),
            }
        };
        let rmse_standardized = optional(RmseScale::Standardized)?;
        let rmse_original = rmse(truth, imputed, eval, RmseScale::Original, None)?;
        let rmse_minmax = if scaler.is_some() { optional(RmseScale::Minmax)? } else { None };

        let mut columns = Vec::with_capacity(names.len());
        let mut wds = Vec::new();
        for (k, name) in names.iter().enumerate() {
            let (t, p) = column_pairs(truth, imputed, eval, k);
            let wd = if t.len() >= MIN_EVAL {
                let w = wasserstein_1d(&t, &p)?;
                wds.push(w);
                Some(w)
            } else {
                None
            };
            columns.push(ColumnMetrics {
                name: name.to_string(),
                r2: r2[k],
                rmse: per_rmse[k],
                wd,
                n_eval: t.len(),
            });
        }
        Ok(MetricsReport {
            n_eval: columns.iter().map(|c| c.n_eval).sum(),
            columns,
            r2_mean,
            rmse: pooled,
            rmse_scale: scale,
            rmse_standardized,
            rmse_original,
            rmse_minmax,
            wd_mean: mean(&wds),
            aggregation: "r2 and wd: mean over columns with n_eval >= 2; rmse: pooled over cells".into(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned text table for terminals.
    pub fn to_text(&self) -> String {
        let width = self.columns.iter().map(|c| c.name.len()).max().unwrap_or(6).max(6);
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>8}  {:>8}  {:>10}  {:>6}", "column", "r2", "rmse", "wd", "n_eval");
        for c in &self.columns {
            let _ = writeln!(
                out,
                "{:<width$}  {:>8}  {:>8}  {:>10}  {:>6}",
                c.name,
                fmt(c.r2),
                fmt(c.rmse),
                fmt(c.wd),
                c.n_eval
            );
        }
        let scale = serde_json::to_string(&self.rmse_scale).unwrap_or_default();
        let _ = writeln!(
            out,
            "r2_mean {:.4}  rmse[{}] {:.4}  wd_mean {:.4}  n_eval {}",
            self.r2_mean,
            scale.trim_matches('"'),
            self.rmse,
            self.wd_mean,
            self.n_eval
        );
        out
    }
}

/// One-sided paired t-test of `mean(a - b) > 0`; returns `(t, p)`.
pub fn paired_t_test_one_sided(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "paired t-test needs two equal samples of at least 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let d: Array1<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let m = d.mean().expect("non-empty");
    let var = d.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return Err(Error::DegenerateTest);
    }
    let t = m / (var.sqrt() / n.sqrt());
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| Error::Metric(e.to_string()))?;
    Ok((t, 1.0 - dist.cdf(t)))
}
