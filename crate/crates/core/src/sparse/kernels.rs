//! Multiplication kernels for CSR operands.

use super::{CsrMatrix, DenseMatrix};
use crate::error::{Error, Result};

fn check_inner(a_cols: usize, b_rows: usize) -> Result<()> {
    if a_cols != b_rows {
        return Err(Error::DimMismatch(format!(
            "inner dimensions {a_cols} and {b_rows} differ"
        )));
    }
    Ok(())
}

/// Sparse-dense product `A * B`. Runs in time proportional to `nnz(A) * k`
/// where `k` is the column count of `B`: each stored entry of `A` contributes
/// one scaled row of `B` to the output.
pub fn csr_dense_matmul(a: &CsrMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    check_inner(a.n_cols(), b.n_rows())?;
    let k = b.n_cols();
    let mut out = DenseMatrix::zeros(a.n_rows(), k);
    for r in 0..a.n_rows() {
        let (cols, vals) = a.row(r);
        let out_row = out.row_mut(r);
        for (&j, &v) in cols.iter().zip(vals) {
            let b_row = b.row(j);
            for c in 0..k {
                out_row[c] += v * b_row[c];
            }
        }
    }
    Ok(out)
}

/// Sparse-sparse product `A * B` using a two-pass scheme: a symbolic pass
/// sizes each output row by counting distinct columns, then a numeric pass
/// accumulates values through a dense workspace of one row. Work is
/// proportional to the sum over stored entries `A[i][j]` of `nnz(B.row(j))`,
/// plus `O(max(n_cols))` workspace setup.
///
/// Entries whose accumulated value is exactly zero (cancellation) are dropped
/// so the result stores only true nonzeros.
pub fn csr_csr_matmul(a: &CsrMatrix, b: &CsrMatrix) -> Result<CsrMatrix> {
    check_inner(a.n_cols(), b.n_rows())?;
    let n = a.n_rows();
    let k = b.n_cols();

    // Symbolic pass: distinct output columns per row, as an allocation bound.
    let mut stamp = vec![usize::MAX; k];
    let mut upper = 0usize;
    for r in 0..n {
        let (cols, _) = a.row(r);
        for &j in cols {
            let (bcols, _) = b.row(j);
            for &c in bcols {
                if stamp[c] != r {
                    stamp[c] = r;
                    upper += 1;
                }
            }
        }
    }

    // Numeric pass.
    let mut row_offsets = Vec::with_capacity(n + 1);
    let mut col_indices = Vec::with_capacity(upper);
    let mut values = Vec::with_capacity(upper);
    row_offsets.push(0);
    let mut acc = vec![0.0f64; k];
    let mut touched: Vec<usize> = Vec::new();
    let mut stamp = vec![usize::MAX; k];
    for r in 0..n {
        touched.clear();
        let (cols, vals) = a.row(r);
        for (&j, &va) in cols.iter().zip(vals) {
            let (bcols, bvals) = b.row(j);
            for (&c, &vb) in bcols.iter().zip(bvals) {
                if stamp[c] != r {
                    stamp[c] = r;
                    acc[c] = 0.0;
                    touched.push(c);
                }
                acc[c] += va * vb;
            }
        }
        touched.sort_unstable();
        for &c in &touched {
            if acc[c] != 0.0 {
                col_indices.push(c);
                values.push(acc[c]);
            }
        }
        row_offsets.push(col_indices.len());
    }
    CsrMatrix::new(n, k, row_offsets, col_indices, values)
}

/// Sparse-sparse product accumulated directly into a dense result. Same
/// accumulation order as [`csr_csr_matmul`], without building CSR output.
pub fn csr_csr_matmul_dense(a: &CsrMatrix, b: &CsrMatrix) -> Result<DenseMatrix> {
    check_inner(a.n_cols(), b.n_rows())?;
    let mut out = DenseMatrix::zeros(a.n_rows(), b.n_cols());
    for r in 0..a.n_rows() {
        let (cols, vals) = a.row(r);
        let out_row = out.row_mut(r);
        for (&j, &va) in cols.iter().zip(vals) {
            let (bcols, bvals) = b.row(j);
            for (&c, &vb) in bcols.iter().zip(bvals) {
                out_row[c] += va * vb;
            }
        }
    }
    Ok(out)
}
