//! MCAR and MAR missingness simulators.
//!
//! Both draw each row from its own ChaCha stream keyed by `(seed, row)`, so a
//! row's mask does not change when other rows are added, removed or reordered.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{row_rng, DataMatrix, MaskMatrix};
use crate::error::{EmflowError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mechanism", rename_all = "lowercase")]
pub enum Mechanism {
    Mcar { rate: f64 },
    Mar,
}

/// Each cell independently missing with probability `rate`.
pub fn mcar_mask(n: usize, p: usize, rate: f64, seed: u64) -> Result<MaskMatrix> {
    if !(0.0..1.0).contains(&rate) {
        return Err(EmflowError::InvalidArgument(format!(
            "MCAR rate must lie in [0, 1), got {rate}"
        )));
    }
    let mut bits = Vec::with_capacity(n * p);
    for i in 0..n {
        let mut rng = row_rng(seed, i);
        bits.extend((0..p).map(|_| rng.random::<f64>() < rate));
    }
    MaskMatrix::new(n, p, bits)
}

/// Number of leading features that stay fully observed under MAR.
pub fn mar_retained(p: usize) -> usize {
    (7 * p) / 10
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Keeps the first ⌊0.7p⌋ features; every other feature of row i goes missing
/// with probability sigmoid(sum of the retained features of row i).
///
/// `data` is expected to be min-max scaled already.
pub fn mar_mask(data: &DataMatrix, seed: u64) -> Result<MaskMatrix> {
    let (n, p) = (data.n(), data.p());
    let keep = mar_retained(p);
    if p < 2 || keep == 0 {
        return Err(EmflowError::InvalidArgument(format!(
            "MAR needs at least one retained and one maskable feature (p = {p})"
        )));
    }
    let mut bits = Vec::with_capacity(n * p);
    for (i, row) in data.rows().enumerate() {
        let prob = sigmoid(row[..keep].iter().sum());
        let mut rng = row_rng(seed, i);
        bits.extend(std::iter::repeat_n(false, keep));
        bits.extend((keep..p).map(|_| rng.random::<f64>() < prob));
    }
    MaskMatrix::new(n, p, bits)
}

pub fn simulate(data: &DataMatrix, mechanism: Mechanism, seed: u64) -> Result<MaskMatrix> {
    match mechanism {
        Mechanism::Mcar { rate } => mcar_mask(data.n(), data.p(), rate, seed),
        Mechanism::Mar => mar_mask(data, seed),
    }
}

/// Missing fraction over the maskable block (all columns for MCAR).
pub fn maskable_missing_fraction(mask: &MaskMatrix, mechanism: Mechanism) -> f64 {
    let start = match mechanism {
        Mechanism::Mcar { .. } => 0,
        Mechanism::Mar => mar_retained(mask.p()),
    };
    let cells = mask.n() * (mask.p() - start);
    let missing = mask
        .rows()
        .map(|r| r[start..].iter().filter(|&&b| b).count())
        .sum::<usize>();
    missing as f64 / cells as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rate_is_fully_observed() {
        assert_eq!(mcar_mask(20, 5, 0.0, 1).unwrap().missing_count(), 0);
    }

    #[test]
    fn rate_one_is_rejected() {
        assert!(mcar_mask(2, 2, 1.0, 0).is_err());
        assert!(mcar_mask(2, 2, -0.1, 0).is_err());
    }

    #[test]
    fn mcar_rate_close_to_target() {
        let m = mcar_mask(10_000, 10, 0.2, 7).unwrap();
        assert!(
            (m.missing_fraction() - 0.2).abs() < 0.01,
            "{}",
            m.missing_fraction()
        );
    }

    #[test]
    fn mcar_is_deterministic() {
        assert_eq!(
            mcar_mask(50, 4, 0.3, 9).unwrap(),
            mcar_mask(50, 4, 0.3, 9).unwrap()
        );
        assert_ne!(
            mcar_mask(50, 4, 0.3, 9).unwrap(),
            mcar_mask(50, 4, 0.3, 10).unwrap()
        );
    }

    #[test]
    fn mar_zero_rows_half_missing() {
        let n = 20_000;
        let data = DataMatrix::new(n, 10, vec![0.0; n * 10]).unwrap();
        let m = mar_mask(&data, 3).unwrap();
        assert_eq!(mar_retained(10), 7);
        for row in m.rows() {
            assert!(row[..7].iter().all(|&b| !b));
        }
        let frac = maskable_missing_fraction(&m, Mechanism::Mar);
        assert!((frac - 0.5).abs() < 0.01, "{frac}");
    }

    #[test]
    fn mar_depends_only_on_own_row() {
        let rows: Vec<Vec<f64>> = (0..30)
            .map(|i| {
                (0..6)
                    .map(|j| ((i * 7 + j * 3) % 11) as f64 / 11.0)
                    .collect()
            })
            .collect();
        let data = DataMatrix::from_rows(&rows).unwrap();
        let full = mar_mask(&data, 5).unwrap();
        // rows keep their index-based streams when other rows change values
        let mut altered = rows.clone();
        for r in altered.iter_mut().skip(1) {
            r.iter_mut().for_each(|v| *v = 1.0 - *v);
        }
        let other = mar_mask(&DataMatrix::from_rows(&altered).unwrap(), 5).unwrap();
        assert_eq!(full.row(0), other.row(0));
    }

    #[test]
    fn mar_needs_maskable_features() {
        let data = DataMatrix::new(1, 2, vec![0.0, 0.0]).unwrap();
        // p = 2 keeps floor(1.4) = 1 feature and masks one
        assert!(mar_mask(&data, 0).is_ok());
    }
}
