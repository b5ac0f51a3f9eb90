//! Feature normalization fitted on training data and replayed elsewhere.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::{CsrMatrix, DenseMatrix};

/// Variance threshold below which a feature is treated as constant.
const VAR_EPS: f64 = 1e-12;

/// Fitted per-feature normalization parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NormStats {
    /// Per-column mean and standard deviation (population form). Columns with
    /// variance below threshold carry a divisor of exactly 1, so they are
    /// centered but not scaled.
    Standardize { mean: Vec<f64>, std: Vec<f64> },
    /// Per-column maximum absolute value. Columns that are entirely zero
    /// carry a scale of exactly 1 and pass through unchanged.
    MaxAbs { max_abs: Vec<f64> },
}

impl NormStats {
    pub fn n_features(&self) -> usize {
        match self {
            NormStats::Standardize { mean, .. } => mean.len(),
            NormStats::MaxAbs { max_abs } => max_abs.len(),
        }
    }
}

/// Fits per-column mean and population standard deviation (`1/m` variance).
pub fn fit_standardize(m: &DenseMatrix) -> Result<NormStats> {
    if m.n_rows() == 0 {
        return Err(Error::InvalidArg("cannot fit statistics on zero rows".into()));
    }
    let (rows, cols) = (m.n_rows(), m.n_cols());
    let mut mean = vec![0.0f64; cols];
    for r in 0..rows {
        let row = m.row(r);
        for c in 0..cols {
            mean[c] += row[c];
        }
    }
    for v in mean.iter_mut() {
        *v /= rows as f64;
    }
    let mut var = vec![0.0f64; cols];
    for r in 0..rows {
        let row = m.row(r);
        for c in 0..cols {
            let d = row[c] - mean[c];
            var[c] += d * d;
        }
    }
    let std: Vec<f64> = var
        .iter()
        .map(|&v| {
            let v = v / rows as f64;
            if v < VAR_EPS {
                1.0
            } else {
                v.sqrt()
            }
        })
        .collect();
    Ok(NormStats::Standardize { mean, std })
}

/// Applies previously fitted standardization: `(x - mean) / std`.
pub fn apply_standardize(m: &DenseMatrix, stats: &NormStats) -> Result<DenseMatrix> {
    let (mean, std) = match stats {
        NormStats::Standardize { mean, std } => (mean, std),
        _ => return Err(Error::InvalidArg("stats were not fitted by standardize".into())),
    };
    if mean.len() != m.n_cols() {
        return Err(Error::DimMismatch(format!(
            "stats cover {} features, matrix has {}",
            mean.len(),
            m.n_cols()
        )));
    }
    let mut out = m.clone();
    for r in 0..out.n_rows() {
        let row = out.row_mut(r);
        for c in 0..row.len() {
            row[c] = (row[c] - mean[c]) / std[c];
        }
    }
    Ok(out)
}

/// Fits per-column maximum absolute values over the stored entries.
pub fn fit_maxabs(m: &CsrMatrix) -> NormStats {
    let mut max_abs = vec![0.0f64; m.n_cols()];
    for r in 0..m.n_rows() {
        let (cols, vals) = m.row(r);
        for (&c, &v) in cols.iter().zip(vals) {
            max_abs[c] = max_abs[c].max(v.abs());
        }
    }
    for v in max_abs.iter_mut() {
        if *v == 0.0 {
            *v = 1.0;
        }
    }
    NormStats::MaxAbs { max_abs }
}

/// Applies max-abs scaling `x / max_abs` without changing the sparsity
/// pattern. Values may exceed 1 in magnitude when the stats come from a
/// different (training) matrix.
pub fn apply_maxabs(m: &CsrMatrix, stats: &NormStats) -> Result<CsrMatrix> {
    let max_abs = match stats {
        NormStats::MaxAbs { max_abs } => max_abs,
        _ => return Err(Error::InvalidArg("stats were not fitted by max-abs".into())),
    };
    if max_abs.len() != m.n_cols() {
        return Err(Error::DimMismatch(format!(
            "stats cover {} features, matrix has {}",
            max_abs.len(),
            m.n_cols()
        )));
    }
    let mut rows = Vec::with_capacity(m.n_rows());
    for r in 0..m.n_rows() {
        let (cols, vals) = m.row(r);
        rows.push(
            cols.iter()
                .zip(vals)
                .map(|(&c, &v)| (c, v / max_abs[c]))
                .collect(),
        );
    }
    CsrMatrix::from_row_entries(m.n_rows(), m.n_cols(), rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardize_two_point_column() {
        let m = DenseMatrix::from_vec(2, 1, vec![1.0, 3.0]).unwrap();
        let stats = fit_standardize(&m).unwrap();
        let out = apply_standardize(&m, &stats).unwrap();
        assert!((out.get(0, 0) + 1.0).abs() < 1e-12);
        assert!((out.get(1, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn standardize_constant_column_maps_to_zero() {
        let m = DenseMatrix::from_vec(3, 1, vec![4.0, 4.0, 4.0]).unwrap();
        let stats = fit_standardize(&m).unwrap();
        if let NormStats::Standardize { std, .. } = &stats {
            assert_eq!(std[0], 1.0);
        }
        let out = apply_standardize(&m, &stats).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn standardized_output_has_zero_mean_unit_variance() {
        let mut data = Vec::new();
        let mut rng = crate::rng::RngStream::new(71, 0);
        for _ in 0..500 * 4 {
            data.push(rng.next_normal() * 3.0 + 5.0);
        }
        let m = DenseMatrix::from_vec(500, 4, data).unwrap();
        let stats = fit_standardize(&m).unwrap();
        let out = apply_standardize(&m, &stats).unwrap();
        for c in 0..4 {
            let mean: f64 = (0..500).map(|r| out.get(r, c)).sum::<f64>() / 500.0;
            let var: f64 =
                (0..500).map(|r| (out.get(r, c) - mean).powi(2)).sum::<f64>() / 500.0;
            assert!(mean.abs() < 1e-9, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "var {var}");
        }
    }

    #[test]
    fn train_stats_are_replayed_verbatim_on_test_data() {
        let train = DenseMatrix::from_vec(2, 1, vec![0.0, 2.0]).unwrap();
        let test = DenseMatrix::from_vec(2, 1, vec![10.0, -10.0]).unwrap();
        let stats = fit_standardize(&train).unwrap();
        let out = apply_standardize(&test, &stats).unwrap();
        // mean 1, std 1: test values map exactly through train moments.
        assert_eq!(out.data(), &[9.0, -11.0]);
    }

    #[test]
    fn standardize_is_idempotent() {
        let m = DenseMatrix::from_vec(4, 2, vec![1.0, -2.0, 3.0, 0.5, -1.0, 4.0, 7.0, 1.5])
            .unwrap();
        let once = apply_standardize(&m, &fit_standardize(&m).unwrap()).unwrap();
        let twice = apply_standardize(&once, &fit_standardize(&once).unwrap()).unwrap();
        assert!(once.max_abs_diff(&twice) < 1e-12);
    }

    #[test]
    fn maxabs_scales_by_magnitude() {
        let m = CsrMatrix::from_row_entries(
            2,
            2,
            vec![vec![(0, -4.0)], vec![(0, 2.0), (1, 0.5)]],
        )
        .unwrap();
        let stats = fit_maxabs(&m);
        if let NormStats::MaxAbs { max_abs } = &stats {
            assert_eq!(max_abs, &vec![4.0, 0.5]);
        }
        let out = apply_maxabs(&m, &stats).unwrap();
        assert_eq!(out.row(0).1, &[-1.0]);
        assert_eq!(out.row(1).1, &[0.5, 1.0]);
    }

    #[test]
    fn maxabs_leaves_zero_columns_alone() {
        let m = CsrMatrix::from_row_entries(2, 3, vec![vec![(0, 2.0)], vec![]]).unwrap();
        let stats = fit_maxabs(&m);
        if let NormStats::MaxAbs { max_abs } = &stats {
            assert_eq!(max_abs, &vec![2.0, 1.0, 1.0]);
        }
        let out = apply_maxabs(&m, &stats).unwrap();
        assert_eq!(out, apply_maxabs(&out, &fit_maxabs(&out)).unwrap());
    }

    #[test]
    fn maxabs_on_test_data_may_exceed_one() {
        let train = CsrMatrix::from_row_entries(1, 1, vec![vec![(0, 2.0)]]).unwrap();
        let test = CsrMatrix::from_row_entries(1, 1, vec![vec![(0, 6.0)]]).unwrap();
        let out = apply_maxabs(&test, &fit_maxabs(&train)).unwrap();
        assert_eq!(out.row(0).1, &[3.0]);
    }

    #[test]
    fn maxabs_preserves_pattern() {
        let m = CsrMatrix::from_row_entries(2, 4, vec![vec![(1, -3.0), (3, 9.0)], vec![(1, 1.5)]])
            .unwrap();
        let out = apply_maxabs(&m, &fit_maxabs(&m)).unwrap();
        assert_eq!(out.row_offsets(), m.row_offsets());
        assert_eq!(out.col_indices(), m.col_indices());
    }

    #[test]
    fn mismatched_stats_are_rejected() {
        let dense = DenseMatrix::zeros(2, 3);
        let sparse = CsrMatrix::zeros(2, 3);
        let wrong_kind = fit_maxabs(&sparse);
        assert!(apply_standardize(&dense, &wrong_kind).is_err());
        let wrong_width = NormStats::Standardize { mean: vec![0.0; 2], std: vec![1.0; 2] };
        assert!(apply_standardize(&dense, &wrong_width).is_err());
        assert!(fit_standardize(&DenseMatrix::zeros(0, 2)).is_err());
    }
}
