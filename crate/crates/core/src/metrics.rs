//! Continual-learning summary metrics and calibration error.
//!
//! `R[i][j]` is the accuracy on task `j` after training through task `i`
//! (zero-based, `j ≤ i`); `R_ind[j]` is the accuracy of a model trained on
//! task `j` alone.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultMatrix {
    /// Lower-triangular rows: row `i` has `i + 1` entries.
    pub rows: Vec<Vec<f64>>,
    pub independent: Option<Vec<f64>>,
}

impl ResultMatrix {
    pub fn new(rows: Vec<Vec<f64>>, independent: Option<Vec<f64>>) -> Result<Self> {
        let m = Self { rows, independent };
        m.validate()?;
        Ok(m)
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rows[i][j]
    }

    fn validate(&self) -> Result<()> {
        for (i, r) in self.rows.iter().enumerate() {
            if r.len() != i + 1 {
                return Err(Error::InvalidArgument(format!("row {i} has {} entries, expected {}", r.len(), i + 1)));
            }
        }
        if let Some(ind) = &self.independent {
            if ind.len() != self.rows.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} independent accuracies for {} tasks",
                    ind.len(),
                    self.rows.len()
                )));
            }
        }
        Ok(())
    }

    fn complete(&self) -> Result<usize> {
        self.validate()?;
        if self.rows.is_empty() {
            return Err(Error::InvalidArgument("empty result matrix".into()));
        }
        Ok(self.rows.len())
    }

    fn independent(&self) -> Result<&[f64]> {
        self.independent
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("independent-training accuracies missing".into()))
    }
}

/// Mean of the final row.
pub fn acc(r: &ResultMatrix) -> Result<f64> {
    let t = r.complete()?;
    Ok(r.rows[t - 1].iter().sum::<f64>() / t as f64)
}

/// `(1/T) Σ_j (R[T][j] − R[j][j])`.
pub fn bwt(r: &ResultMatrix) -> Result<f64> {
    let t = r.complete()?;
    Ok((0..t).map(|j| r.get(t - 1, j) - r.get(j, j)).sum::<f64>() / t as f64)
}

/// `(1/T) Σ_j (R[j][j] − R_ind[j])`.
pub fn fwt(r: &ResultMatrix) -> Result<f64> {
    let t = r.complete()?;
    let ind = r.independent()?;
    Ok((0..t).map(|j| r.get(j, j) - ind[j]).sum::<f64>() / t as f64)
}

/// `FWT + BWT`.
pub fn net(r: &ResultMatrix) -> Result<f64> {
    Ok(fwt(r)? + bwt(r)?)
}

/// `(1/i) Σ_{j<i} (R[i−1][j] − R[T][j])` for `1 ≤ i ≤ T`: how much better the
/// first `i` tasks were right after task `i` than at the end.
pub fn delta_acc(r: &ResultMatrix, i: usize) -> Result<f64> {
    let t = r.complete()?;
    if i == 0 || i > t {
        return Err(Error::InvalidArgument(format!("index {i} not in 1..={t}")));
    }
    Ok((0..i).map(|j| r.get(i - 1, j) - r.get(t - 1, j)).sum::<f64>() / i as f64)
}

/// One equal-width confidence bin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub mean_confidence: f64,
    pub accuracy: f64,
    pub count: usize,
}

/// Equal-width bins over `[0, 1]`; a confidence of exactly 1 falls in the
/// last bin. Empty bins are reported with zero count.
pub fn calibration_bins(confidences: &[f64], correct: &[bool], bins: usize) -> Result<Vec<CalibrationBin>> {
    if confidences.is_empty() || confidences.len() != correct.len() {
        return Err(Error::InvalidArgument(format!(
            "{} confidences and {} outcomes",
            confidences.len(),
            correct.len()
        )));
    }
    if bins == 0 {
        return Err(Error::InvalidArgument("need at least one bin".into()));
    }
    if let Some(c) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(Error::InvalidArgument(format!("confidence {c} outside [0, 1]")));
    }
    let mut sum_conf = vec![0.0; bins];
    let mut hits = vec![0usize; bins];
    let mut counts = vec![0usize; bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = ((c * bins as f64) as usize).min(bins - 1);
        sum_conf[b] += c;
        hits[b] += usize::from(ok);
        counts[b] += 1;
    }
    Ok((0..bins)
        .map(|b| {
            let n = counts[b].max(1) as f64;
            CalibrationBin {
                lower: b as f64 / bins as f64,
                upper: (b + 1) as f64 / bins as f64,
                mean_confidence: sum_conf[b] / n,
                accuracy: hits[b] as f64 / n,
                count: counts[b],
            }
        })
        .collect())
}

/// `Σ_b (n_b / N)·|conf_b − acc_b|`.
pub fn ece(confidences: &[f64], correct: &[bool], bins: usize) -> Result<f64> {
    let table = calibration_bins(confidences, correct, bins)?;
    let n = confidences.len() as f64;
    Ok(table
        .iter()
        .map(|b| b.count as f64 / n * (b.mean_confidence - b.accuracy).abs())
        .sum())
}

pub const DEFAULT_ECE_BINS: usize = 15;

#[cfg(test)]
mod tests {
    use super::*;

    fn example() -> ResultMatrix {
        ResultMatrix::new(vec![vec![0.90], vec![0.80, 0.85]], Some(vec![0.88, 0.84])).unwrap()
    }

    #[test]
    fn two_task_example() {
        let r = example();
        assert!((acc(&r).unwrap() - 0.825).abs() < 1e-15);
        assert!((bwt(&r).unwrap() + 0.05).abs() < 1e-15);
        assert!((fwt(&r).unwrap() - 0.015).abs() < 1e-15);
        assert!((net(&r).unwrap() + 0.035).abs() < 1e-15);
        assert!((delta_acc(&r, 1).unwrap() - 0.10).abs() < 1e-15);
        assert_eq!(delta_acc(&r, 2).unwrap(), 0.0);
    }

    #[test]
    fn ragged_or_missing_inputs_are_errors() {
        assert!(ResultMatrix::new(vec![vec![0.9, 0.1]], None).is_err());
        let r = ResultMatrix::new(vec![vec![0.9]], None).unwrap();
        assert!(fwt(&r).is_err());
        assert!(delta_acc(&r, 2).is_err());
        assert!(ece(&[], &[], 15).is_err());
    }

    #[test]
    fn ece_edge_cases() {
        assert_eq!(ece(&[1.0; 4], &[true; 4], 15).unwrap(), 0.0);
        assert_eq!(ece(&[0.5; 4], &[true, false, true, false], 15).unwrap(), 0.0);
        let conf = [0.9; 10];
        let ok: Vec<bool> = (0..10).map(|i| i < 6).collect();
        assert!((ece(&conf, &ok, 15).unwrap() - 0.3).abs() < 1e-12);
    }
}
