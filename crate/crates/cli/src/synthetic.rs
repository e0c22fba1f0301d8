//! Synthetic inputs for benchmarks: equicorrelated Gaussian tables and
//! random context vectors.

use cacti::dataset::Table;
use cacti::rng;
use cacti::{Error, Result};
use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianSpec {
    pub n_rows: usize,
    pub n_cols: usize,
    /// Correlation shared by every pair of columns.
    pub rho: f64,
}

/// Standard-normal columns with pairwise correlation `rho`, built from one
/// shared factor: `x_k = sqrt(rho) z + sqrt(1 - rho) e_k`.
pub fn equicorrelated_gaussian(spec: &GaussianSpec, seed: u64) -> Result<Array2<f64>> {
    if spec.n_rows == 0 || spec.n_cols == 0 {
        return Err(Error::InvalidArgument("synthetic table must be non-empty".into()));
    }
    if !(0.0..1.0).contains(&spec.rho) {
        return Err(Error::InvalidArgument(format!("rho {} outside [0, 1)", spec.rho)));
    }
    let mut s = rng::stream(seed);
    let (a, b) = (spec.rho.sqrt(), (1.0 - spec.rho).sqrt());
    let mut out = Array2::zeros((spec.n_rows, spec.n_cols));
    for mut row in out.rows_mut() {
        let shared: f64 = StandardNormal.sample(&mut s);
        for v in row.iter_mut() {
            let own: f64 = StandardNormal.sample(&mut s);
            *v = a * shared + b * own;
        }
    }
    Ok(out)
}

pub fn column_names(k: usize) -> Vec<String> {
    (0..k).map(|j| format!("x{j}")).collect()
}

pub fn gaussian_table(spec: &GaussianSpec, seed: u64) -> Result<Table> {
    let names = column_names(spec.n_cols);
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    Table::from_complete(&refs, equicorrelated_gaussian(spec, seed)?)
}

/// K×dim matrix of independent standard-normal context vectors.
pub fn random_context(k: usize, dim: usize, seed: u64) -> Array2<f64> {
    let mut s = rng::stream(seed);
    Array2::from_shape_simple_fn((k, dim), || StandardNormal.sample(&mut s))
}
