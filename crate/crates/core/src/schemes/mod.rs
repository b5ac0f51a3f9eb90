//! Random projection matrix constructions.
//!
//! All five schemes produce a `d x k` matrix `P` normalized so that for any
//! fixed vector `x`, `E[|x P|^2] = |x|^2`:
//!
//! * `Gaussian`: dense, entries iid `N(0, 1/k)`.
//! * `Achlioptas`: sparse, entries `sqrt(3/k) * {+1 w.p. 1/6, 0 w.p. 2/3, -1 w.p. 1/6}`.
//! * `Li`: sparse, entries `sqrt(s/k) * {+1 w.p. 1/(2s), 0 w.p. 1-1/s, -1 w.p. 1/(2s)}`
//!   with `s` defaulting to `sqrt(d)`.
//! * `Srht`: dense, `(1/sqrt(k)) * D * H * S` where `D` is a random sign
//!   diagonal, `H` the orthonormal Hadamard matrix of order `d_pad` (the next
//!   power of two at or above `d`, with input implicitly zero-padded), and
//!   `S` a sparse column sampler whose entries are `N(0, 1/q)` with
//!   probability `q`, else zero. Only the first `d` rows are materialized.
//! * `CountSketch`: sparse, exactly one `+/-1` per row in a uniformly chosen
//!   column; also applicable to data in a streaming pass without
//!   materializing `P`.
//!
//! Randomness layout: every column `c` of a column-generated scheme draws
//! from `RngStream(seed, c)`, Count Sketch row `r` draws from
//! `RngStream(seed, r)`, and the SRHT sign diagonal draws from the reserved
//! stream id `u64::MAX`. Because streams are keyed by the finest unit of
//! work, generating the matrix whole or in column slices yields bit-identical
//! results for every slicing choice.

mod fwht;

pub use fwht::{fwht_in_place, fwht_rows, FwhtDirection};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::sparse::{CsrMatrix, DenseMatrix};

/// Stream id reserved for the SRHT sign diagonal.
const SRHT_SIGN_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RpKind {
    Gaussian,
    Achlioptas,
    Li,
    Srht,
    CountSketch,
}

impl RpKind {
    pub const ALL: [RpKind; 5] =
        [RpKind::Gaussian, RpKind::Achlioptas, RpKind::Li, RpKind::Srht, RpKind::CountSketch];

    pub fn name(self) -> &'static str {
        match self {
            RpKind::Gaussian => "gaussian",
            RpKind::Achlioptas => "achlioptas",
            RpKind::Li => "li",
            RpKind::Srht => "srht",
            RpKind::CountSketch => "countsketch",
        }
    }
}

impl std::fmt::Display for RpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for RpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" => Ok(RpKind::Gaussian),
            "achlioptas" => Ok(RpKind::Achlioptas),
            "li" => Ok(RpKind::Li),
            "srht" => Ok(RpKind::Srht),
            "countsketch" | "count_sketch" | "cs" => Ok(RpKind::CountSketch),
            other => Err(Error::InvalidArg(format!("unknown projection scheme {other:?}"))),
        }
    }
}

/// Full description of a projection matrix; generation is a pure function of
/// this value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpSchemeSpec {
    pub kind: RpKind,
    /// Input dimensionality (rows of `P`).
    pub d: usize,
    /// Output dimensionality (columns of `P`).
    pub k: usize,
    pub seed: u64,
    /// Sparsity parameter for `Li`; defaults to `sqrt(d)`.
    #[serde(default)]
    pub li_s: Option<f64>,
    /// Column density for `Srht`; defaults to
    /// `min(1, max(ln^2(srht_n_hint), 8) / d_pad)`.
    #[serde(default)]
    pub srht_q: Option<f64>,
    /// Expected data row count used by the default `srht_q`.
    #[serde(default = "default_n_hint")]
    pub srht_n_hint: u64,
}

fn default_n_hint() -> u64 {
    100_000
}

impl RpSchemeSpec {
    pub fn new(kind: RpKind, d: usize, k: usize, seed: u64) -> Self {
        RpSchemeSpec { kind, d, k, seed, li_s: None, srht_q: None, srht_n_hint: default_n_hint() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.k == 0 {
            return Err(Error::InvalidArg(format!(
                "projection shape {}x{} must be positive",
                self.d, self.k
            )));
        }
        if let Some(s) = self.li_s {
            if !s.is_finite() || s < 1.0 {
                return Err(Error::InvalidArg(format!("li_s must be >= 1, got {s}")));
            }
        }
        if let Some(q) = self.srht_q {
            if !q.is_finite() || q <= 0.0 || q > 1.0 {
                return Err(Error::InvalidArg(format!("srht_q must lie in (0, 1], got {q}")));
            }
        }
        if self.srht_n_hint == 0 {
            return Err(Error::InvalidArg("srht_n_hint must be positive".into()));
        }
        Ok(())
    }

    /// Effective `s` for the `Li` scheme.
    pub fn li_s_effective(&self) -> f64 {
        self.li_s.unwrap_or_else(|| (self.d as f64).sqrt())
    }

    /// Padded Hadamard order for `Srht`.
    pub fn srht_d_pad(&self) -> usize {
        self.d.next_power_of_two()
    }

    /// Effective column density for `Srht`.
    pub fn srht_q_effective(&self) -> f64 {
        match self.srht_q {
            Some(q) => q,
            None => {
                let d_pad = self.srht_d_pad() as f64;
                let ln_n = (self.srht_n_hint as f64).ln();
                ((ln_n * ln_n).max(8.0) / d_pad).min(1.0)
            }
        }
    }
}

/// Backing storage of a generated projection matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum RpStorage {
    Sparse(CsrMatrix),
    Dense(DenseMatrix),
}

impl RpStorage {
    pub fn n_rows(&self) -> usize {
        match self {
            RpStorage::Sparse(m) => m.n_rows(),
            RpStorage::Dense(m) => m.n_rows(),
        }
    }

    pub fn n_cols(&self) -> usize {
        match self {
            RpStorage::Sparse(m) => m.n_cols(),
            RpStorage::Dense(m) => m.n_cols(),
        }
    }

    /// Number of stored entries (all cells for dense storage).
    pub fn stored_entries(&self) -> usize {
        match self {
            RpStorage::Sparse(m) => m.nnz(),
            RpStorage::Dense(m) => m.n_rows() * m.n_cols(),
        }
    }

    pub fn densify(&self) -> DenseMatrix {
        match self {
            RpStorage::Sparse(m) => m.densify(),
            RpStorage::Dense(m) => m.clone(),
        }
    }
}

/// A generated projection matrix (possibly a column slice of one).
#[derive(Debug, Clone, PartialEq)]
pub struct RpMatrix {
    pub spec: RpSchemeSpec,
    /// Global column range this storage covers; `(0, spec.k)` for a full
    /// matrix.
    pub col_range: (usize, usize),
    pub storage: RpStorage,
}

/// Generates the full `d x k` matrix for `spec`.
pub fn generate(spec: &RpSchemeSpec) -> Result<RpMatrix> {
    generate_cols(spec, 0, spec.k)
}

/// Generates the columns of slice `j` out of `v` slices of width
/// `ceil(k / v)` (the last slice may be narrower). Concatenating all slices
/// of any `v` reproduces [`generate`] bit for bit.
pub fn generate_slice(spec: &RpSchemeSpec, j: usize, v: usize) -> Result<RpMatrix> {
    spec.validate()?;
    if v == 0 || v > spec.k || j >= v {
        return Err(Error::InvalidArg(format!(
            "slice {j} of {v} invalid for {} columns",
            spec.k
        )));
    }
    let w = spec.k.div_ceil(v);
    let begin = j * w;
    if begin >= spec.k {
        return Err(Error::InvalidArg(format!(
            "slice {j} of {v} starts at column {begin}, beyond {} columns",
            spec.k
        )));
    }
    let end = ((j + 1) * w).min(spec.k);
    generate_cols(spec, begin, end)
}

/// Number of non-empty slices a `v`-way column split actually produces
/// (less than `v` when `ceil(k/v)` overshoots).
pub fn effective_slices(k: usize, v: usize) -> usize {
    k.div_ceil(k.div_ceil(v))
}

fn generate_cols(spec: &RpSchemeSpec, begin: usize, end: usize) -> Result<RpMatrix> {
    spec.validate()?;
    debug_assert!(begin < end && end <= spec.k);
    let storage = match spec.kind {
        RpKind::Gaussian => RpStorage::Dense(gen_gaussian(spec, begin, end)),
        RpKind::Achlioptas => {
            let m = (3.0 / spec.k as f64).sqrt();
            RpStorage::Sparse(gen_sign_sparse(spec, begin, end, 1.0 / 6.0, m))
        }
        RpKind::Li => {
            let s = spec.li_s_effective();
            let m = (s / spec.k as f64).sqrt();
            RpStorage::Sparse(gen_sign_sparse(spec, begin, end, 1.0 / (2.0 * s), m))
        }
        RpKind::Srht => RpStorage::Dense(gen_srht(spec, begin, end)?),
        RpKind::CountSketch => RpStorage::Sparse(gen_count_sketch(spec, begin, end)),
    };
    Ok(RpMatrix { spec: spec.clone(), col_range: (begin, end), storage })
}

fn gen_gaussian(spec: &RpSchemeSpec, begin: usize, end: usize) -> DenseMatrix {
    let w = end - begin;
    let scale = 1.0 / (spec.k as f64).sqrt();
    // One stream per column, advanced in lockstep so the dense buffer fills
    // row-major while each column still sees its own sequential draws.
    let mut streams: Vec<RngStream> =
        (begin..end).map(|c| RngStream::new(spec.seed, c as u64)).collect();
    let mut out = DenseMatrix::zeros(spec.d, w);
    for r in 0..spec.d {
        let row = out.row_mut(r);
        for (i, stream) in streams.iter_mut().enumerate() {
            row[i] = stream.next_normal() * scale;
        }
    }
    out
}

/// Shared generator for the signed sparse schemes: entry is `+magnitude`
/// with probability `p_sign`, `-magnitude` with probability `p_sign`, else
/// zero, consuming exactly one uniform draw per cell.
fn gen_sign_sparse(
    spec: &RpSchemeSpec,
    begin: usize,
    end: usize,
    p_sign: f64,
    magnitude: f64,
) -> CsrMatrix {
    let d = spec.d;
    let mut columns: Vec<Vec<(usize, f64)>> = Vec::with_capacity(end - begin);
    for c in begin..end {
        let mut stream = RngStream::new(spec.seed, c as u64);
        let mut col = Vec::new();
        for r in 0..d {
            let u = stream.next_f64();
            if u < p_sign {
                col.push((r, magnitude));
            } else if u < 2.0 * p_sign {
                col.push((r, -magnitude));
            }
        }
        columns.push(col);
    }
    csr_from_columns(d, &columns)
}

fn gen_count_sketch(spec: &RpSchemeSpec, begin: usize, end: usize) -> CsrMatrix {
    let mut rows = Vec::with_capacity(spec.d);
    for r in 0..spec.d {
        let (col, sign) = count_sketch_row(spec.seed, r, spec.k);
        if col >= begin && col < end {
            rows.push(vec![(col - begin, sign)]);
        } else {
            rows.push(Vec::new());
        }
    }
    CsrMatrix::from_row_entries(spec.d, end - begin, rows).expect("rows are sorted")
}

/// Target column and sign for Count Sketch row `r`; shared by explicit
/// generation and the streaming application so both see identical draws.
#[inline]
fn count_sketch_row(seed: u64, r: usize, k: usize) -> (usize, f64) {
    let mut stream = RngStream::new(seed, r as u64);
    let col = stream.next_range(k as u64) as usize;
    let sign = if stream.next_bool(0.5) { 1.0 } else { -1.0 };
    (col, sign)
}

/// Applies Count Sketch projection to `a` in one streaming pass over its
/// stored entries, without materializing the projection matrix. The result
/// is bit-identical to multiplying by the explicit matrix of
/// `RpSchemeSpec::new(CountSketch, a.n_cols(), k, seed)`.
pub fn apply_count_sketch_streaming(a: &CsrMatrix, k: usize, seed: u64) -> Result<DenseMatrix> {
    if k == 0 {
        return Err(Error::InvalidArg("projection width k must be positive".into()));
    }
    let mut out = DenseMatrix::zeros(a.n_rows(), k);
    for i in 0..a.n_rows() {
        let (cols, vals) = a.row(i);
        let out_row = out.row_mut(i);
        for (&j, &v) in cols.iter().zip(vals) {
            let (col, sign) = count_sketch_row(seed, j, k);
            out_row[col] += v * sign;
        }
    }
    Ok(out)
}

fn gen_srht(spec: &RpSchemeSpec, begin: usize, end: usize) -> Result<DenseMatrix> {
    let d_pad = spec.srht_d_pad();
    let q = spec.srht_q_effective();
    if q <= 0.0 || q > 1.0 {
        return Err(Error::InvalidArg(format!("effective srht q {q} outside (0, 1]")));
    }
    let signs = srht_signs(spec.seed, d_pad);
    let mut out = DenseMatrix::zeros(spec.d, end - begin);
    let mut col_buf = vec![0.0f64; d_pad];
    for (i, c) in (begin..end).enumerate() {
        srht_sampler_column(spec.seed, c, d_pad, q, &mut col_buf);
        fwht_in_place(&mut col_buf, FwhtDirection::Forward)?;
        let scale = 1.0 / ((d_pad as f64).sqrt() * (spec.k as f64).sqrt());
        for r in 0..spec.d {
            out.set(r, i, signs[r] * col_buf[r] * scale);
        }
    }
    Ok(out)
}

fn srht_signs(seed: u64, d_pad: usize) -> Vec<f64> {
    let mut stream = RngStream::new(seed, SRHT_SIGN_STREAM);
    (0..d_pad).map(|_| if stream.next_bool(0.5) { 1.0 } else { -1.0 }).collect()
}

/// Fills `buf` with column `c` of the sparse sampler `S`: `N(0, 1/q)` with
/// probability `q`, else zero.
fn srht_sampler_column(seed: u64, c: usize, d_pad: usize, q: f64, buf: &mut [f64]) {
    let mut stream = RngStream::new(seed, c as u64);
    let scale = 1.0 / q.sqrt();
    for slot in buf.iter_mut().take(d_pad) {
        *slot = if stream.next_f64() < q { stream.next_normal() * scale } else { 0.0 };
    }
}

/// Assembles SRHT output from explicit parts; factored out so tests can pin
/// the sign diagonal and sampler columns.
#[cfg_attr(not(test), allow(dead_code))]
fn srht_from_parts(d: usize, k: usize, signs: &[f64], s_columns: &[Vec<f64>]) -> DenseMatrix {
    let d_pad = signs.len();
    let mut out = DenseMatrix::zeros(d, s_columns.len());
    let scale = 1.0 / ((d_pad as f64).sqrt() * (k as f64).sqrt());
    for (i, col) in s_columns.iter().enumerate() {
        let mut buf = col.clone();
        fwht_in_place(&mut buf, FwhtDirection::Forward).unwrap();
        for r in 0..d {
            out.set(r, i, signs[r] * buf[r] * scale);
        }
    }
    out
}

/// Builds a CSR matrix from per-column entry lists that span columns
/// `0..columns.len()`; entries within a column must be sorted by row.
fn csr_from_columns(d: usize, columns: &[Vec<(usize, f64)>]) -> CsrMatrix {
    let nnz: usize = columns.iter().map(Vec::len).sum();
    let mut counts = vec![0usize; d + 1];
    for col in columns {
        for &(r, _) in col {
            counts[r + 1] += 1;
        }
    }
    for i in 0..d {
        counts[i + 1] += counts[i];
    }
    let row_offsets = counts.clone();
    let mut cursor = counts;
    let mut col_indices = vec![0usize; nnz];
    let mut values = vec![0.0f64; nnz];
    for (c, col) in columns.iter().enumerate() {
        for &(r, v) in col {
            let pos = cursor[r];
            cursor[r] += 1;
            col_indices[pos] = c;
            values[pos] = v;
        }
    }
    CsrMatrix::new(d, columns.len(), row_offsets, col_indices, values)
        .expect("column-ordered fill yields sorted rows")
}
