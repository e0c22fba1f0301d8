//! Inference: encode the truly observed cells of each row, decode with the
//! mask token at missing slots and keep observed values untouched.
//!
//! Rows are grouped by their observed count so every encoder batch has a
//! uniform length and no padding token ever enters attention. The result of
//! a row therefore does not depend on which other rows share its batch.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};

use crate::checkpoint::Checkpoint;
use crate::dataset::{apply_scaler, nearest_code, Table};
use crate::error::{Error, Result};
use crate::model::{EncoderInput, Model, Real};

pub const DEFAULT_BATCH_SIZE: usize = 256;

/// Decoder outputs in scaled units for every cell of `scaled`.
pub fn reconstruct<T: Real>(model: &Model<T>, scaled: &Table, batch_size: usize) -> Result<Array2<f64>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, row) in scaled.observed.rows().into_iter().enumerate() {
        let count = row.iter().filter(|&&o| o).count();
        if count == 0 {
            return Err(Error::EmptyRow(i));
        }
        groups.entry(count).or_default().push(i);
    }
    let mut out = Array2::zeros((scaled.n_rows(), scaled.n_cols()));
    for (count, rows) in groups {
        for ids in rows.chunks(batch_size) {
            let tokens = ids
                .iter()
                .map(|&i| (0..scaled.n_cols()).filter(|&k| scaled.observed[[i, k]]).collect())
                .collect();
            let values = scaled.values.select(Axis(0), ids);
            let input = EncoderInput::<T>::new(values.view(), tokens, count)?;
            let pred = model.predict(&input)?;
            for (j, &i) in ids.iter().enumerate() {
                out.row_mut(i).assign(&pred.row(j).mapv(|v| v.as_f64()));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImputeOptions {
    pub batch_size: usize,
    /// Snap imputed cells of coded columns to the nearest valid code.
    pub round_categorical: bool,
}

impl Default for ImputeOptions {
    fn default() -> Self {
        ImputeOptions {
            batch_size: DEFAULT_BATCH_SIZE,
            round_categorical: false,
        }
    }
}

/// Fills every missing cell of `table` (original units) with the model's
/// reconstruction. Observed cells are copied bit for bit.
pub fn impute(table: &Table, checkpoint: &Checkpoint, opts: &ImputeOptions) -> Result<Table> {
    checkpoint.check_schema(&table.schema)?;
    let mut out = table.clone();
    if table.n_rows() == 0 || table.observed.iter().all(|&o| o) {
        return Ok(out);
    }
    let scaled = apply_scaler(table, &checkpoint.scaler)?;
    let recon = reconstruct(&checkpoint.model, &scaled, opts.batch_size)?;
    for ((i, k), observed) in table.observed.indexed_iter() {
        if *observed {
            continue;
        }
        let mut v = checkpoint.scaler.unscale(k, recon[[i, k]]);
        let col = &table.schema[k];
        if opts.round_categorical && col.is_coded() {
            v = nearest_code(v, col.categories.len()) as f64;
        }
        out.values[[i, k]] = v;
    }
    out.observed.fill(true);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::fit_scaler;
    use crate::model::{ModelConfig, ModelHyper};
    use ndarray::array;

    fn checkpoint_for(table: &Table) -> Checkpoint {
        let cfg = ModelConfig::new(
            table.n_cols(),
            0,
            ModelHyper {
                embed_dim: 8,
                enc_depth: 1,
                dec_depth: 1,
                heads: 2,
                ..ModelHyper::default()
            },
        )
        .unwrap();
        let model = Model::new(cfg, None, 1).unwrap();
        Checkpoint::new(table.schema.clone(), fit_scaler(table).unwrap(), model).unwrap()
    }

    fn table() -> Table {
        let mut t = Table::from_complete(&["a", "b", "c"], array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.5], [0.5, 9.0, 1.0]]).unwrap();
        t.observed[[1, 2]] = false;
        t.values[[1, 2]] = f64::NAN;
        t
    }

    #[test]
    fn only_missing_cells_change() {
        let t = table();
        let ck = checkpoint_for(&t);
        let out = impute(&t, &ck, &ImputeOptions::default()).unwrap();
        for ((i, k), &o) in t.observed.indexed_iter() {
            if o {
                assert_eq!(out.values[[i, k]].to_bits(), t.values[[i, k]].to_bits());
            } else {
                assert!(out.values[[i, k]].is_finite());
            }
        }
        assert!(out.is_complete());
        let again = impute(&out, &ck, &ImputeOptions::default()).unwrap();
        assert_eq!(again, out);
    }

    #[test]
    fn batch_size_does_not_matter() {
        let mut t = table();
        t.observed[[0, 0]] = false;
        t.values[[0, 0]] = f64::NAN;
        let ck = checkpoint_for(&t);
        let one = impute(&t, &ck, &ImputeOptions { batch_size: 1, ..Default::default() }).unwrap();
        let many = impute(&t, &ck, &ImputeOptions { batch_size: 256, ..Default::default() }).unwrap();
        assert_eq!(one, many);
    }

    #[test]
    fn empty_row_reports_index() {
        let mut t = table();
        t.observed.row_mut(2).fill(false);
        t.values.row_mut(2).fill(f64::NAN);
        let ck = checkpoint_for(&table());
        assert!(matches!(impute(&t, &ck, &ImputeOptions::default()), Err(Error::EmptyRow(2))));
    }

    #[test]
    fn empty_table_passes_through() {
        let t = table();
        let ck = checkpoint_for(&t);
        let empty = t.select_rows(&[]);
        assert_eq!(impute(&empty, &ck, &ImputeOptions::default()).unwrap().n_rows(), 0);
    }
}
