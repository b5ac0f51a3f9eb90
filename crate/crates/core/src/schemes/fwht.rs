//! Fast Walsh-Hadamard transform.
//!
//! The transform multiplies by the unnormalized Hadamard matrix `H_t` built
//! from the order-doubling recursion
//! `H_t = [[H_{t/2}, H_{t/2}], [H_{t/2}, -H_{t/2}]]` with `H_1 = [1]`,
//! realized as an in-place butterfly in `O(t log t)` operations per row.
//! Since `H_t * H_t = t * I`, the inverse transform is the forward transform
//! followed by division by `t`.

use crate::error::{Error, Result};
use crate::sparse::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FwhtDirection {
    Forward,
    Inverse,
}

/// In-place transform of one vector whose length must be a power of two.
pub fn fwht_in_place(x: &mut [f64], direction: FwhtDirection) -> Result<()> {
    let t = x.len();
    if t == 0 || !t.is_power_of_two() {
        return Err(Error::InvalidArg(format!(
            "transform length {t} is not a power of two"
        )));
    }
    let mut half = 1;
    while half < t {
        let step = half * 2;
        for block in (0..t).step_by(step) {
            for i in block..block + half {
                let a = x[i];
                let b = x[i + half];
                x[i] = a + b;
                x[i + half] = a - b;
            }
        }
        half = step;
    }
    if direction == FwhtDirection::Inverse {
        let inv = 1.0 / t as f64;
        for v in x.iter_mut() {
            *v *= inv;
        }
    }
    Ok(())
}

/// Transforms every row of `m`. The column count must be a power of two.
pub fn fwht_rows(m: &DenseMatrix, direction: FwhtDirection) -> Result<DenseMatrix> {
    let mut out = m.clone();
    for r in 0..out.n_rows() {
        fwht_in_place(out.row_mut(r), direction)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    /// Explicit Hadamard matrix by the order-doubling recursion; the oracle
    /// for the butterfly.
    fn hadamard(t: usize) -> Vec<Vec<f64>> {
        assert!(t.is_power_of_two());
        let mut h = vec![vec![1.0]];
        while h.len() < t {
            let n = h.len();
            let mut next = vec![vec![0.0; 2 * n]; 2 * n];
            for i in 0..n {
                for j in 0..n {
                    next[i][j] = h[i][j];
                    next[i][j + n] = h[i][j];
                    next[i + n][j] = h[i][j];
                    next[i + n][j + n] = -h[i][j];
                }
            }
            h = next;
        }
        h
    }

    fn apply_hadamard(h: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
        h.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    }

    #[test]
    fn impulse_responses() {
        let mut x = vec![1.0, 0.0];
        fwht_in_place(&mut x, FwhtDirection::Forward).unwrap();
        assert_eq!(x, vec![1.0, 1.0]);

        let mut x = vec![1.0, 0.0, 0.0, 0.0];
        fwht_in_place(&mut x, FwhtDirection::Forward).unwrap();
        assert_eq!(x, vec![1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn matches_explicit_matrix() {
        let mut rng = RngStream::new(21, 0);
        for t in [2usize, 4, 8, 16] {
            let h = hadamard(t);
            let x: Vec<f64> = (0..t).map(|_| rng.next_normal()).collect();
            let mut got = x.clone();
            fwht_in_place(&mut got, FwhtDirection::Forward).unwrap();
            let want = apply_hadamard(&h, &x);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "t={t}");
            }
        }
    }

    #[test]
    fn double_forward_scales_by_length() {
        let mut rng = RngStream::new(22, 0);
        let x: Vec<f64> = (0..32).map(|_| rng.next_normal()).collect();
        let mut y = x.clone();
        fwht_in_place(&mut y, FwhtDirection::Forward).unwrap();
        fwht_in_place(&mut y, FwhtDirection::Forward).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert!((32.0 * a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn inverse_round_trips() {
        let mut rng = RngStream::new(23, 0);
        let x: Vec<f64> = (0..64).map(|_| rng.next_normal()).collect();
        let mut y = x.clone();
        fwht_in_place(&mut y, FwhtDirection::Forward).unwrap();
        fwht_in_place(&mut y, FwhtDirection::Inverse).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn length_one_is_identity() {
        let mut x = vec![3.5];
        fwht_in_place(&mut x, FwhtDirection::Forward).unwrap();
        assert_eq!(x, vec![3.5]);
    }

    #[test]
    fn non_power_of_two_is_rejected() {
        let mut x = vec![1.0, 2.0, 3.0];
        assert!(fwht_in_place(&mut x, FwhtDirection::Forward).is_err());
        assert!(fwht_in_place(&mut [], FwhtDirection::Forward).is_err());
        let m = DenseMatrix::zeros(2, 6);
        assert!(fwht_rows(&m, FwhtDirection::Forward).is_err());
    }

    #[test]
    fn rows_are_transformed_independently() {
        let m = DenseMatrix::from_vec(2, 4, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0])
            .unwrap();
        let t = fwht_rows(&m, FwhtDirection::Forward).unwrap();
        assert_eq!(t.row(0), &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(t.row(1), &[1.0, -1.0, 1.0, -1.0]);
    }
}
