//! Embedding-quality metrics and scheme micro-benchmarks.
//!
//! [`pairwise_distortion`] measures how well a projection preserves
//! pairwise Euclidean distances; [`subspace_distortion_mc`] estimates the
//! worst-case squared-norm distortion over random directions in the row
//! space; [`bench_schemes`] times matrix generation and projection to
//! expose each scheme's cost scaling in `k`.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::schemes::{generate, RpKind, RpSchemeSpec, RpStorage};
use crate::sparse::{csr_csr_matmul, csr_csr_matmul_dense, csr_dense_matmul, CsrMatrix, DenseMatrix};

/// Width of one distortion histogram bucket.
pub const DISTORTION_BUCKET_WIDTH: f64 = 0.05;
/// Bucket count; the last bucket collects everything at or above
/// `(DISTORTION_BUCKETS - 1) * DISTORTION_BUCKET_WIDTH`.
pub const DISTORTION_BUCKETS: usize = 21;

/// Pairwise distance distortion of an embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionReport {
    /// Pairs actually measured (near-coincident input pairs are skipped).
    pub n_pairs: usize,
    pub max_distortion: f64,
    pub mean_distortion: f64,
    /// Counts per [`DISTORTION_BUCKET_WIDTH`]-wide bucket.
    pub histogram: Vec<usize>,
}

/// Squared row distance below which a pair counts as coincident.
const COINCIDENT_SQ: f64 = 1e-12 * 1e-12;

/// Measures `| ||r_i - r_j|| / ||a_i - a_j|| - 1 |` over row pairs of a
/// sparse input and its dense embedding. All `n(n-1)/2` pairs are used when
/// they fit within `max_pairs`; otherwise `max_pairs` pairs are sampled
/// uniformly with the given seed.
pub fn pairwise_distortion(
    a: &CsrMatrix,
    r: &DenseMatrix,
    max_pairs: usize,
    seed: u64,
) -> Result<DistortionReport> {
    check_distortion_inputs(a.n_rows(), r.n_rows(), max_pairs)?;
    distortion_impl(
        a.n_rows(),
        |i, j| a.row_distance_sq(i, j),
        |i, j| dense_row_distance_sq(r, i, j),
        max_pairs,
        seed,
    )
}

/// [`pairwise_distortion`] for a dense input sample.
pub fn pairwise_distortion_dense(
    a: &DenseMatrix,
    r: &DenseMatrix,
    max_pairs: usize,
    seed: u64,
) -> Result<DistortionReport> {
    check_distortion_inputs(a.n_rows(), r.n_rows(), max_pairs)?;
    distortion_impl(
        a.n_rows(),
        |i, j| dense_row_distance_sq(a, i, j),
        |i, j| dense_row_distance_sq(r, i, j),
        max_pairs,
        seed,
    )
}

fn check_distortion_inputs(a_rows: usize, r_rows: usize, max_pairs: usize) -> Result<()> {
    if a_rows != r_rows {
        return Err(Error::DimMismatch(format!(
            "input has {a_rows} rows, embedding has {r_rows}"
        )));
    }
    if a_rows < 2 {
        return Err(Error::InvalidArg("distortion needs at least 2 rows".into()));
    }
    if max_pairs == 0 {
        return Err(Error::InvalidArg("max_pairs must be at least 1".into()));
    }
    Ok(())
}

fn dense_row_distance_sq(m: &DenseMatrix, i: usize, j: usize) -> f64 {
    m.row(i)
        .iter()
        .zip(m.row(j))
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

fn distortion_impl(
    n: usize,
    dist_sq_a: impl Fn(usize, usize) -> f64,
    dist_sq_r: impl Fn(usize, usize) -> f64,
    max_pairs: usize,
    seed: u64,
) -> Result<DistortionReport> {
    let total = n * (n - 1) / 2;
    let mut report = DistortionReport {
        n_pairs: 0,
        max_distortion: 0.0,
        mean_distortion: 0.0,
        histogram: vec![0; DISTORTION_BUCKETS],
    };
    let mut sum = 0.0;
    let mut measure = |i: usize, j: usize, report: &mut DistortionReport| {
        let da = dist_sq_a(i, j);
        if da < COINCIDENT_SQ {
            return;
        }
        let eps = ((dist_sq_r(i, j) / da).sqrt() - 1.0).abs();
        report.n_pairs += 1;
        report.max_distortion = report.max_distortion.max(eps);
        sum += eps;
        let bucket =
            ((eps / DISTORTION_BUCKET_WIDTH) as usize).min(DISTORTION_BUCKETS - 1);
        report.histogram[bucket] += 1;
    };
    if total <= max_pairs {
        for i in 0..n {
            for j in (i + 1)..n {
                measure(i, j, &mut report);
            }
        }
    } else {
        let mut rng = RngStream::new(seed, 0xD157);
        for _ in 0..max_pairs {
            let i = rng.next_range(n as u64) as usize;
            let mut j = rng.next_range(n as u64) as usize;
            while j == i {
                j = rng.next_range(n as u64) as usize;
            }
            measure(i.min(j), i.max(j), &mut report);
        }
    }
    if report.n_pairs > 0 {
        report.mean_distortion = sum / report.n_pairs as f64;
    }
    Ok(report)
}

/// Attempts per trial to draw a direction that `A` does not annihilate.
const MAX_RESAMPLES: usize = 1000;

/// Monte-Carlo estimate of the subspace distortion of `S` on the row space
/// of `A`: the max over random unit directions `x` of
/// `| ||x'AS||^2 / ||x'A||^2 - 1 |`. Each trial draws from its own stream,
/// so under a fixed seed the estimate never decreases as `trials` grows.
pub fn subspace_distortion_mc(
    a: &CsrMatrix,
    s: &RpStorage,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    if trials == 0 {
        return Err(Error::InvalidArg("trials must be at least 1".into()));
    }
    if a.nnz() == 0 {
        return Err(Error::InvalidArg("matrix has no nonzero entries".into()));
    }
    if s.n_rows() != a.n_cols() {
        return Err(Error::DimMismatch(format!(
            "embedding has {} rows, matrix has {} columns",
            s.n_rows(),
            a.n_cols()
        )));
    }
    let proj = match s {
        RpStorage::Sparse(p) => csr_csr_matmul_dense(a, p)?,
        RpStorage::Dense(p) => csr_dense_matmul(a, p)?,
    };
    let n = a.n_rows();
    let mut worst = 0.0f64;
    for t in 0..trials {
        let mut rng = RngStream::new(seed, t as u64);
        let mut resamples = 0;
        loop {
            let mut x: Vec<f64> = (0..n).map(|_| rng.next_normal()).collect();
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for v in x.iter_mut() {
                    *v /= norm;
                }
            }
            let mut xa = vec![0.0f64; a.n_cols()];
            for r in 0..n {
                let (cols, vals) = a.row(r);
                for (&c, &v) in cols.iter().zip(vals) {
                    xa[c] += x[r] * v;
                }
            }
            let denom: f64 = xa.iter().map(|v| v * v).sum();
            if denom < COINCIDENT_SQ {
                resamples += 1;
                if resamples >= MAX_RESAMPLES {
                    return Err(Error::Numeric(
                        "could not sample a direction the matrix does not annihilate".into(),
                    ));
                }
                continue;
            }
            let mut num = 0.0f64;
            for c in 0..proj.n_cols() {
                let mut acc = 0.0;
                for r in 0..n {
                    acc += x[r] * proj.get(r, c);
                }
                num += acc * acc;
            }
            worst = worst.max((num / denom - 1.0).abs());
            break;
        }
    }
    Ok(worst)
}

/// One benchmark cell: a scheme at one target dimensionality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub scheme: RpKind,
    pub d: usize,
    pub k: usize,
    pub density: f64,
    /// Median seconds to generate the projection matrix.
    pub gen_time_s: f64,
    /// Median seconds to project the fixture dataset.
    pub proj_time_s: f64,
    /// Stored entries of the generated matrix.
    pub nnz_p: usize,
}

/// Timing rows for a grid of schemes and projection widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub n_rows: usize,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scheme,d,k,density,gen_time_s,proj_time_s,nnz_p\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.scheme, r.d, r.k, r.density, r.gen_time_s, r.proj_time_s, r.nnz_p
            ));
        }
        out
    }

    /// The row for one (scheme, k) cell, if present.
    pub fn cell(&self, scheme: RpKind, k: usize) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.scheme == scheme && r.k == k)
    }
}

/// Times matrix generation and projection of an `n x d` random sparse
/// fixture for every scheme and every `k`, reporting medians of `repeats`
/// runs. Sparse schemes project through the sparse-sparse kernel and dense
/// schemes through the sparse-dense kernel, so the measured scaling
/// reflects how each scheme is actually applied. Fixture construction is
/// not timed.
pub fn bench_schemes(
    n: usize,
    d: usize,
    k_list: &[usize],
    density: f64,
    schemes: &[RpKind],
    repeats: usize,
    seed: u64,
) -> Result<BenchReport> {
    if repeats < 3 {
        return Err(Error::InvalidArg("benchmark needs at least 3 repeats".into()));
    }
    if !(0.0..=1.0).contains(&density) {
        return Err(Error::InvalidArg(format!("density {density} outside [0, 1]")));
    }
    let fixture = sparse_fixture(n, d, density, seed);
    let mut rows = Vec::new();
    for &scheme in schemes {
        for &k in k_list {
            let spec = RpSchemeSpec::new(scheme, d, k, seed);
            spec.validate()?;
            let mut gen_times = Vec::with_capacity(repeats);
            let mut proj_times = Vec::with_capacity(repeats);
            let mut nnz_p = 0;
            for _ in 0..repeats {
                let t0 = Instant::now();
                let p = generate(&spec)?;
                gen_times.push(t0.elapsed().as_secs_f64());
                nnz_p = p.storage.stored_entries();
                let t1 = Instant::now();
                match &p.storage {
                    RpStorage::Sparse(m) => {
                        let _r = csr_csr_matmul(&fixture, m)?;
                    }
                    RpStorage::Dense(m) => {
                        let _r = csr_dense_matmul(&fixture, m)?;
                    }
                }
                proj_times.push(t1.elapsed().as_secs_f64());
            }
            rows.push(BenchRow {
                scheme,
                d,
                k,
                density,
                gen_time_s: median(&mut gen_times),
                proj_time_s: median(&mut proj_times),
                nnz_p,
            });
        }
    }
    Ok(BenchReport { n_rows: n, rows })
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_unstable_by(|a, b| a.total_cmp(b));
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

/// Random sparse matrix with i.i.d. Bernoulli(density) pattern and standard
/// normal values, built by geometric gap skipping so construction is
/// O(nnz) even at very low densities.
fn sparse_fixture(n: usize, d: usize, density: f64, seed: u64) -> CsrMatrix {
    let mut rows = Vec::with_capacity(n);
    let log_q = (1.0 - density).ln();
    for r in 0..n {
        let mut rng = RngStream::new(seed, r as u64);
        let mut row = Vec::new();
        if density >= 1.0 {
            row = (0..d).map(|c| (c, rng.next_normal())).collect();
        } else if density > 0.0 {
            let mut pos = 0usize;
            loop {
                let gap = ((1.0 - rng.next_f64()).ln() / log_q) as usize;
                pos = match pos.checked_add(gap) {
                    Some(p) if p < d => p,
                    _ => break,
                };
                row.push((pos, rng.next_normal()));
                pos += 1;
            }
        }
        rows.push(row);
    }
    CsrMatrix::from_row_entries(n, d, rows).expect("generated rows are sorted and in bounds")
}
