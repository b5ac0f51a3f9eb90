//! Sparse and dense matrix types with the kernels used across the crate.
//!
//! [`CsrMatrix`] is a compressed-sparse-row matrix over `f64` with strictly
//! increasing column indices per row. [`DenseMatrix`] is a row-major dense
//! matrix. Both are plain data containers; numeric kernels live in
//! [`kernels`], LIBSVM text I/O in [`libsvm`].

mod kernels;
mod libsvm;

pub use kernels::{csr_csr_matmul, csr_csr_matmul_dense, csr_dense_matmul};
pub use libsvm::{parse_libsvm, write_libsvm, ParsedLibsvm};

use crate::error::{Error, Result};

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n_rows: usize,
    n_cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a matrix from raw CSR arrays, validating every invariant:
    /// offset monotonicity, per-row strictly increasing column indices, and
    /// index bounds.
    pub fn new(
        n_rows: usize,
        n_cols: usize,
        row_offsets: Vec<usize>,
        col_indices: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if row_offsets.len() != n_rows + 1 {
            return Err(Error::Format(format!(
                "row_offsets length {} does not match {} rows",
                row_offsets.len(),
                n_rows
            )));
        }
        if row_offsets[0] != 0 || *row_offsets.last().unwrap() != col_indices.len() {
            return Err(Error::Format("row_offsets must start at 0 and end at nnz".into()));
        }
        if col_indices.len() != values.len() {
            return Err(Error::Format("col_indices and values lengths differ".into()));
        }
        for w in row_offsets.windows(2) {
            if w[1] < w[0] {
                return Err(Error::Format("row_offsets must be non-decreasing".into()));
            }
        }
        for r in 0..n_rows {
            let cols = &col_indices[row_offsets[r]..row_offsets[r + 1]];
            for (i, &c) in cols.iter().enumerate() {
                if c >= n_cols {
                    return Err(Error::Format(format!(
                        "column index {c} out of bounds for {n_cols} columns in row {r}"
                    )));
                }
                if i > 0 && cols[i - 1] >= c {
                    return Err(Error::Format(format!(
                        "column indices not strictly increasing in row {r}"
                    )));
                }
            }
        }
        Ok(CsrMatrix { n_rows, n_cols, row_offsets, col_indices, values })
    }

    /// Builds a matrix from per-row `(column, value)` entry lists. Entries
    /// must be sorted by column and unique within each row.
    pub fn from_row_entries(
        n_rows: usize,
        n_cols: usize,
        rows: Vec<Vec<(usize, f64)>>,
    ) -> Result<Self> {
        if rows.len() != n_rows {
            return Err(Error::DimMismatch(format!(
                "{} entry lists for {} rows",
                rows.len(),
                n_rows
            )));
        }
        let nnz = rows.iter().map(Vec::len).sum();
        let mut row_offsets = Vec::with_capacity(n_rows + 1);
        let mut col_indices = Vec::with_capacity(nnz);
        let mut values = Vec::with_capacity(nnz);
        row_offsets.push(0);
        for row in rows {
            for (c, v) in row {
                col_indices.push(c);
                values.push(v);
            }
            row_offsets.push(col_indices.len());
        }
        Self::new(n_rows, n_cols, row_offsets, col_indices, values)
    }

    /// Zero matrix with the given shape.
    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        CsrMatrix {
            n_rows,
            n_cols,
            row_offsets: vec![0; n_rows + 1],
            col_indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Identity matrix of order `n`.
    pub fn identity(n: usize) -> Self {
        CsrMatrix {
            n_rows: n,
            n_cols: n,
            row_offsets: (0..=n).collect(),
            col_indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    /// Converts a dense matrix, keeping exactly the nonzero entries.
    pub fn from_dense(m: &DenseMatrix) -> Self {
        let mut rows = Vec::with_capacity(m.n_rows());
        for r in 0..m.n_rows() {
            let row: Vec<(usize, f64)> = m
                .row(r)
                .iter()
                .enumerate()
                .filter(|(_, &v)| v != 0.0)
                .map(|(c, &v)| (c, v))
                .collect();
            rows.push(row);
        }
        Self::from_row_entries(m.n_rows(), m.n_cols(), rows).expect("dense rows are sorted")
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.col_indices.len()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable view of the stored values. The sparsity structure stays
    /// fixed; only the values may change.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Column indices and values of row `r`.
    #[inline]
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let span = self.row_offsets[r]..self.row_offsets[r + 1];
        (&self.col_indices[span.clone()], &self.values[span])
    }

    /// Fraction of stored entries over total cells; 0 for empty shapes.
    pub fn density(&self) -> f64 {
        let cells = self.n_rows as f64 * self.n_cols as f64;
        if cells == 0.0 {
            0.0
        } else {
            self.nnz() as f64 / cells
        }
    }

    /// Per-row nonzero count statistics; all zero for a matrix with no rows.
    pub fn nnz_per_row_stats(&self) -> RowNnzStats {
        if self.n_rows == 0 {
            return RowNnzStats { min: 0, max: 0, mean: 0.0 };
        }
        let mut min = usize::MAX;
        let mut max = 0;
        for r in 0..self.n_rows {
            let len = self.row_offsets[r + 1] - self.row_offsets[r];
            min = min.min(len);
            max = max.max(len);
        }
        RowNnzStats { min, max, mean: self.nnz() as f64 / self.n_rows as f64 }
    }

    /// Rows `begin..end` as a new matrix. The range must be non-empty and in
    /// bounds.
    pub fn row_slice(&self, begin: usize, end: usize) -> Result<CsrMatrix> {
        check_slice_range(begin, end, self.n_rows, "row")?;
        let lo = self.row_offsets[begin];
        let hi = self.row_offsets[end];
        let row_offsets: Vec<usize> =
            self.row_offsets[begin..=end].iter().map(|&o| o - lo).collect();
        Ok(CsrMatrix {
            n_rows: end - begin,
            n_cols: self.n_cols,
            row_offsets,
            col_indices: self.col_indices[lo..hi].to_vec(),
            values: self.values[lo..hi].to_vec(),
        })
    }

    /// Columns `begin..end` as a new matrix with column indices rebased to
    /// the slice. The range must be non-empty and in bounds.
    pub fn col_slice(&self, begin: usize, end: usize) -> Result<CsrMatrix> {
        check_slice_range(begin, end, self.n_cols, "column")?;
        let mut row_offsets = Vec::with_capacity(self.n_rows + 1);
        let mut col_indices = Vec::new();
        let mut values = Vec::new();
        row_offsets.push(0);
        for r in 0..self.n_rows {
            let (cols, vals) = self.row(r);
            // Columns are sorted, so the kept entries form one contiguous run.
            let lo = cols.partition_point(|&c| c < begin);
            let hi = cols.partition_point(|&c| c < end);
            for i in lo..hi {
                col_indices.push(cols[i] - begin);
                values.push(vals[i]);
            }
            row_offsets.push(col_indices.len());
        }
        Ok(CsrMatrix { n_rows: self.n_rows, n_cols: end - begin, row_offsets, col_indices, values })
    }

    /// Stacks matrices vertically. All parts must share a column count.
    pub fn vconcat(parts: &[&CsrMatrix]) -> Result<CsrMatrix> {
        if parts.is_empty() {
            return Err(Error::InvalidArg("vconcat of zero matrices".into()));
        }
        let n_cols = parts[0].n_cols;
        if parts.iter().any(|p| p.n_cols != n_cols) {
            return Err(Error::DimMismatch("vconcat parts differ in column count".into()));
        }
        let n_rows = parts.iter().map(|p| p.n_rows).sum();
        let nnz = parts.iter().map(|p| p.nnz()).sum();
        let mut row_offsets = Vec::with_capacity(n_rows + 1);
        let mut col_indices = Vec::with_capacity(nnz);
        let mut values = Vec::with_capacity(nnz);
        row_offsets.push(0);
        for p in parts {
            let base = *row_offsets.last().unwrap();
            row_offsets.extend(p.row_offsets[1..].iter().map(|&o| o + base));
            col_indices.extend_from_slice(&p.col_indices);
            values.extend_from_slice(&p.values);
        }
        Ok(CsrMatrix { n_rows, n_cols, row_offsets, col_indices, values })
    }

    /// Stacks matrices horizontally. All parts must share a row count.
    pub fn hconcat(parts: &[&CsrMatrix]) -> Result<CsrMatrix> {
        if parts.is_empty() {
            return Err(Error::InvalidArg("hconcat of zero matrices".into()));
        }
        let n_rows = parts[0].n_rows;
        if parts.iter().any(|p| p.n_rows != n_rows) {
            return Err(Error::DimMismatch("hconcat parts differ in row count".into()));
        }
        let n_cols = parts.iter().map(|p| p.n_cols).sum();
        let nnz = parts.iter().map(|p| p.nnz()).sum();
        let mut row_offsets = Vec::with_capacity(n_rows + 1);
        let mut col_indices = Vec::with_capacity(nnz);
        let mut values = Vec::with_capacity(nnz);
        row_offsets.push(0);
        for r in 0..n_rows {
            let mut base = 0;
            for p in parts {
                let (cols, vals) = p.row(r);
                col_indices.extend(cols.iter().map(|&c| c + base));
                values.extend_from_slice(vals);
                base += p.n_cols;
            }
            row_offsets.push(col_indices.len());
        }
        Ok(CsrMatrix { n_rows, n_cols, row_offsets, col_indices, values })
    }

    /// Gathers the given rows (with repetition allowed) into a new matrix.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<CsrMatrix> {
        let mut entries = Vec::with_capacity(rows.len());
        for &r in rows {
            if r >= self.n_rows {
                return Err(Error::InvalidArg(format!("row {r} out of {} rows", self.n_rows)));
            }
            let (cols, vals) = self.row(r);
            entries.push(cols.iter().copied().zip(vals.iter().copied()).collect());
        }
        Self::from_row_entries(rows.len(), self.n_cols, entries)
    }

    pub fn densify(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.n_rows, self.n_cols);
        for r in 0..self.n_rows {
            let (cols, vals) = self.row(r);
            let row = out.row_mut(r);
            for (&c, &v) in cols.iter().zip(vals) {
                row[c] = v;
            }
        }
        out
    }

    /// Squared Euclidean distance between two rows.
    pub fn row_distance_sq(&self, a: usize, b: usize) -> f64 {
        let (ca, va) = self.row(a);
        let (cb, vb) = self.row(b);
        let (mut i, mut j) = (0, 0);
        let mut acc = 0.0;
        while i < ca.len() && j < cb.len() {
            let d = match ca[i].cmp(&cb[j]) {
                std::cmp::Ordering::Less => {
                    let d = va[i];
                    i += 1;
                    d
                }
                std::cmp::Ordering::Greater => {
                    let d = -vb[j];
                    j += 1;
                    d
                }
                std::cmp::Ordering::Equal => {
                    let d = va[i] - vb[j];
                    i += 1;
                    j += 1;
                    d
                }
            };
            acc += d * d;
        }
        while i < ca.len() {
            acc += va[i] * va[i];
            i += 1;
        }
        while j < cb.len() {
            acc += vb[j] * vb[j];
            j += 1;
        }
        acc
    }
}

fn check_slice_range(begin: usize, end: usize, bound: usize, what: &str) -> Result<()> {
    if begin >= end || end > bound {
        return Err(Error::InvalidArg(format!(
            "{what} slice {begin}..{end} invalid for bound {bound} (empty slices are rejected)"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowNnzStats {
    pub min: usize,
    pub max: usize,
    pub mean: f64,
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    n_rows: usize,
    n_cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        DenseMatrix { n_rows, n_cols, data: vec![0.0; n_rows * n_cols] }
    }

    pub fn from_vec(n_rows: usize, n_cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_rows * n_cols {
            return Err(Error::DimMismatch(format!(
                "{} values for {n_rows}x{n_cols} matrix",
                data.len()
            )));
        }
        Ok(DenseMatrix { n_rows, n_cols, data })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.n_cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.n_cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.n_cols..(r + 1) * self.n_cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.n_cols..(r + 1) * self.n_cols]
    }

    pub fn row_slice(&self, begin: usize, end: usize) -> Result<DenseMatrix> {
        check_slice_range(begin, end, self.n_rows, "row")?;
        Ok(DenseMatrix {
            n_rows: end - begin,
            n_cols: self.n_cols,
            data: self.data[begin * self.n_cols..end * self.n_cols].to_vec(),
        })
    }

    pub fn col_slice(&self, begin: usize, end: usize) -> Result<DenseMatrix> {
        check_slice_range(begin, end, self.n_cols, "column")?;
        let w = end - begin;
        let mut data = Vec::with_capacity(self.n_rows * w);
        for r in 0..self.n_rows {
            data.extend_from_slice(&self.row(r)[begin..end]);
        }
        Ok(DenseMatrix { n_rows: self.n_rows, n_cols: w, data })
    }

    pub fn vconcat(parts: &[&DenseMatrix]) -> Result<DenseMatrix> {
        if parts.is_empty() {
            return Err(Error::InvalidArg("vconcat of zero matrices".into()));
        }
        let n_cols = parts[0].n_cols;
        if parts.iter().any(|p| p.n_cols != n_cols) {
            return Err(Error::DimMismatch("vconcat parts differ in column count".into()));
        }
        let n_rows = parts.iter().map(|p| p.n_rows).sum();
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(DenseMatrix { n_rows, n_cols, data })
    }

    pub fn hconcat(parts: &[&DenseMatrix]) -> Result<DenseMatrix> {
        if parts.is_empty() {
            return Err(Error::InvalidArg("hconcat of zero matrices".into()));
        }
        let n_rows = parts[0].n_rows;
        if parts.iter().any(|p| p.n_rows != n_rows) {
            return Err(Error::DimMismatch("hconcat parts differ in row count".into()));
        }
        let n_cols = parts.iter().map(|p| p.n_cols).sum();
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for r in 0..n_rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Ok(DenseMatrix { n_rows, n_cols, data })
    }

    pub fn gather_rows(&self, rows: &[usize]) -> Result<DenseMatrix> {
        let mut data = Vec::with_capacity(rows.len() * self.n_cols);
        for &r in rows {
            if r >= self.n_rows {
                return Err(Error::InvalidArg(format!("row {r} out of {} rows", self.n_rows)));
            }
            data.extend_from_slice(self.row(r));
        }
        Ok(DenseMatrix { n_rows: rows.len(), n_cols: self.n_cols, data })
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        assert_eq!((self.n_rows, self.n_cols), (other.n_rows, other.n_cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Relative Frobenius distance `|A - B|_F / max(|B|_F, 1e-300)`.
    pub fn rel_frobenius_diff(&self, other: &DenseMatrix) -> f64 {
        assert_eq!((self.n_rows, self.n_cols), (other.n_rows, other.n_cols));
        let diff: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        diff / other.frobenius_norm().max(1e-300)
    }
}

/// A sparse feature matrix with one class label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub features: CsrMatrix,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl LabeledDataset {
    pub fn new(features: CsrMatrix, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if labels.len() != features.n_rows() {
            return Err(Error::DimMismatch(format!(
                "{} labels for {} rows",
                labels.len(),
                features.n_rows()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::InvalidArg(format!(
                "label {bad} out of range for {n_classes} classes"
            )));
        }
        Ok(LabeledDataset { features, labels, n_classes })
    }

    pub fn n_rows(&self) -> usize {
        self.features.n_rows()
    }
}
