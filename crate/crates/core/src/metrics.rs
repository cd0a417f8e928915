//! Pearson correlation, mean absolute error and root mean squared error.
//!
//! MAE and RMSE normalize by `n`. Pearson uses centered sums, so the
//! sample/population normalization cancels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub r: f64,
    pub mae: f64,
    pub rmse: f64,
    pub n: usize,
}

impl MetricsReport {
    pub fn compute(pred: &[f64], label: &[f64]) -> Result<Self> {
        Ok(MetricsReport {
            r: pearson(pred, label)?,
            mae: mae(pred, label)?,
            rmse: rmse(pred, label)?,
            n: pred.len(),
        })
    }

    /// Two-line table: `r(↑) MAE(↓) RMSE(↓)` header and values.
    pub fn table(&self) -> String {
        format!(
            "{:>8} {:>8} {:>8} {:>6}\n{:>8.4} {:>8.4} {:>8.4} {:>6}\n",
            "r(↑)", "MAE(↓)", "RMSE(↓)", "n", self.r, self.mae, self.rmse, self.n
        )
    }

    /// Machine-readable `key=value` line.
    pub fn key_values(&self) -> String {
        format!("r={} mae={} rmse={} n={}", self.r, self.mae, self.rmse, self.n)
    }
}

fn check(pred: &[f64], label: &[f64], min: usize) -> Result<()> {
    if pred.len() != label.len() {
        return Err(Error::config(format!(
            "prediction and label lengths differ: {} vs {}",
            pred.len(),
            label.len()
        )));
    }
    if pred.len() < min {
        return Err(Error::config(format!("need at least {min} samples, got {}", pred.len())));
    }
    Ok(())
}

pub fn pearson(pred: &[f64], label: &[f64]) -> Result<f64> {
    check(pred, label, 2)?;
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let ml = label.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (p, l) in pred.iter().zip(label) {
        let (dp, dl) = (p - mp, l - ml);
        sxy += dp * dl;
        sxx += dp * dp;
        syy += dl * dl;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::numeric(format!(
            "correlation undefined: {} is constant",
            if sxx == 0.0 { "prediction" } else { "label" }
        )));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

pub fn mae(pred: &[f64], label: &[f64]) -> Result<f64> {
    check(pred, label, 1)?;
    Ok(pred.iter().zip(label).map(|(p, l)| (p - l).abs()).sum::<f64>() / pred.len() as f64)
}

pub fn rmse(pred: &[f64], label: &[f64]) -> Result<f64> {
    check(pred, label, 1)?;
    let mse = pred.iter().zip(label).map(|(p, l)| (p - l) * (p - l)).sum::<f64>() / pred.len() as f64;
    Ok(mse.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pearson_examples() {
        let a = [1.0, 2.0, 5.0, -3.0];
        assert!((pearson(&a, &a).unwrap() - 1.0).abs() < 1e-14);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((pearson(&neg, &a).unwrap() + 1.0).abs() < 1e-14);
        // means 2 and 7/3; sxy = 1/3 + 0 + 5/3 = 2, sxx = 2, syy = 14/3
        let expect = 2.0 / (2.0f64.sqrt() * (14.0f64 / 3.0).sqrt());
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 1.0, 4.0]).unwrap() - expect).abs() < 1e-14);
    }

    #[test]
    fn pearson_rejects_constant_and_short_input() {
        assert!(matches!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(Error::Numeric(_))));
        assert!(matches!(pearson(&[1.0, 2.0], &[3.0, 3.0]), Err(Error::Numeric(_))));
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn mae_rmse_examples() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mae(&[1.0, 3.0], &[2.0, 2.0]).unwrap(), 1.0);
        assert_eq!(mae(&[5.0], &[2.0]).unwrap(), 3.0);
        assert_eq!(rmse(&[4.0, 4.0], &[4.0, 4.0]).unwrap(), 0.0);
        assert_eq!(rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 12.5f64.sqrt());
        assert!((rmse(&[1.5, -2.5, 3.5], &[0.0, -4.0, 2.0]).unwrap() - 1.5).abs() < 1e-14);
        assert!(matches!(mae(&[1.0], &[1.0, 2.0]), Err(Error::Config(_))));
        assert!(rmse(&[], &[]).is_err());
    }

    proptest! {
        #[test]
        fn rmse_dominates_mae(pairs in proptest::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 1..40)) {
            let (p, l): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            prop_assert!(rmse(&p, &l).unwrap() >= mae(&p, &l).unwrap() * (1.0 - 1e-12));
            prop_assert_eq!(mae(&p, &l).unwrap(), mae(&l, &p).unwrap());
            prop_assert_eq!(rmse(&p, &l).unwrap(), rmse(&l, &p).unwrap());
        }
    }
}
