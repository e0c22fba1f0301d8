use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::real::Real;
use crate::error::{Error, Result};

/// Which reconstruction terms enter the loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Mean error over encoder-visible cells plus mean error over hidden cells.
    #[default]
    Both,
    Observed,
    Masked,
}

impl LossMode {
    fn uses_observed(self) -> bool {
        matches!(self, LossMode::Both | LossMode::Observed)
    }

    fn uses_masked(self) -> bool {
        matches!(self, LossMode::Both | LossMode::Masked)
    }
}

/// Batch reconstruction loss and its gradient with respect to `pred`.
///
/// Per sample the loss is the mean squared error over `observed_sets[n]` plus
/// the mean squared error over `masked_sets[n]` (an empty set contributes
/// zero); the batch loss is the mean over samples.
pub fn reconstruction_loss<T: Real>(
    pred: &Array2<T>,
    target: &Array2<T>,
    observed_sets: &[Vec<usize>],
    masked_sets: &[Vec<usize>],
    mode: LossMode,
) -> Result<(f64, Array2<T>)> {
    let b = pred.nrows();
    if target.dim() != pred.dim() || observed_sets.len() != b || masked_sets.len() != b {
        return Err(Error::Shape(format!(
            "loss inputs: pred {:?}, target {:?}, {} / {} index sets",
            pred.dim(),
            target.dim(),
            observed_sets.len(),
            masked_sets.len()
        )));
    }
    if b == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let mut grad = Array2::zeros(pred.dim());
    let mut total = 0.0;
    for n in 0..b {
        if observed_sets[n].is_empty() {
            return Err(Error::InvalidInput(format!("sample {n} has no observed features")));
        }
        let term = |cols: &[usize], grad: &mut Array2<T>| {
            if cols.is_empty() {
                return 0.0;
            }
            let weight = 1.0 / cols.len() as f64;
            let g = T::lit(2.0 * weight / b as f64);
            let mut sum = 0.0;
            for &k in cols {
                let r = pred[[n, k]] - target[[n, k]];
                sum += r.as_f64() * r.as_f64();
                grad[[n, k]] += g * r;
            }
            sum * weight
        };
        if mode.uses_observed() {
            total += term(&observed_sets[n], &mut grad);
        }
        if mode.uses_masked() {
            total += term(&masked_sets[n], &mut grad);
        }
    }
    Ok((total / b as f64, grad))
}
