//! Blocked projection of sparse datasets, with optional disk spill, plus
//! feature normalization and persistence of projected data.
//!
//! [`project`] computes `R = A * P` without ever materializing the full
//! projection matrix: `A` is split into `h` row slices and `P` into `v`
//! column slices, and each block product `R_ij = A_i * P_j` is computed on
//! its own. When the estimated working set fits the advisory
//! `memory_budget`, blocks are written straight into the output buffer.
//! Otherwise each block is spilled to `{spill_dir}/r_{i}_{j}.rpdb`, the
//! per-column blocks are stitched together from disk, and the final result
//! is the columnwise concatenation of those blocks. Both paths produce
//! bit-identical output because blocks are copied verbatim; different
//! `(h, v)` choices agree up to summation-order rounding.

mod normalize;
mod rpdb;

pub use normalize::{apply_maxabs, apply_standardize, fit_maxabs, fit_standardize, NormStats};
pub use rpdb::{load_dense, save_dense};

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schemes::{
    apply_count_sketch_streaming, effective_slices, generate_slice, RpKind, RpSchemeSpec,
    RpStorage,
};
use crate::sparse::{csr_csr_matmul_dense, csr_dense_matmul, CsrMatrix, DenseMatrix};

/// How to split the work and when to spill intermediates to disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProjectionPlan {
    pub spec: RpSchemeSpec,
    /// Number of row slices of the dataset (clamped to the row count).
    pub h: usize,
    /// Number of column slices of the projection matrix (clamped to `k`).
    pub v: usize,
    /// Advisory cap in bytes on the engine's own working memory. `0` means
    /// unlimited; a positive value forces the spill path whenever the
    /// in-memory working set (output buffer plus one projection slice and
    /// one dataset slice) would exceed it.
    pub memory_budget: usize,
    /// Directory for intermediate block files; required only when the
    /// budget forces spilling.
    pub spill_dir: Option<PathBuf>,
}

impl ProjectionPlan {
    pub fn new(spec: RpSchemeSpec) -> Self {
        ProjectionPlan { spec, h: 1, v: 1, memory_budget: 0, spill_dir: None }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.h == 0 || self.v == 0 {
            return Err(Error::InvalidArg("slice counts h and v must be at least 1".into()));
        }
        Ok(())
    }
}

/// What a [`project_with_stats`] run actually did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionStats {
    pub spilled: bool,
    /// Effective row and column slice counts after clamping.
    pub row_slices: usize,
    pub col_slices: usize,
    /// Number of block products computed.
    pub blocks: usize,
    /// Total bytes written to spill files (0 on the in-memory path).
    pub spill_bytes: u64,
    /// Stored entries of the projection matrix, summed over its column
    /// slices. The streamed Count Sketch path counts one entry per input
    /// feature, which is what an explicit sketch matrix would store.
    pub nnz_p: usize,
}

/// Clamped slice geometry for one projection run.
#[derive(Clone, Copy)]
struct Blocking {
    /// Effective row-slice count.
    h: usize,
    /// Count of non-empty column slices actually produced.
    v: usize,
    /// Requested (clamped) column-slice count; determines slice width.
    v_request: usize,
    row_width: usize,
}

impl Blocking {
    fn new(n_rows: usize, k: usize, plan: &ProjectionPlan) -> Self {
        let row_width = n_rows.div_ceil(plan.h.min(n_rows));
        let v_request = plan.v.min(k);
        Blocking {
            h: n_rows.div_ceil(row_width),
            v: effective_slices(k, v_request),
            v_request,
            row_width,
        }
    }

    fn col_width(&self, k: usize) -> usize {
        k.div_ceil(self.v_request)
    }
}

/// Projects `A` (`n x d`) to `n x k` according to `plan`.
pub fn project(a: &CsrMatrix, plan: &ProjectionPlan) -> Result<DenseMatrix> {
    Ok(project_with_stats(a, plan)?.0)
}

/// Like [`project`], also reporting slice counts and spill activity.
pub fn project_with_stats(
    a: &CsrMatrix,
    plan: &ProjectionPlan,
) -> Result<(DenseMatrix, ProjectionStats)> {
    plan.validate()?;
    let spec = &plan.spec;
    if a.n_cols() != spec.d {
        return Err(Error::DimMismatch(format!(
            "dataset has {} columns, projection expects {}",
            a.n_cols(),
            spec.d
        )));
    }
    if a.n_rows() == 0 {
        let stats = ProjectionStats {
            spilled: false,
            row_slices: 0,
            col_slices: 0,
            blocks: 0,
            spill_bytes: 0,
            nnz_p: 0,
        };
        return Ok((DenseMatrix::zeros(0, spec.k), stats));
    }

    let blocking = Blocking::new(a.n_rows(), spec.k, plan);
    let spill = plan.memory_budget > 0
        && in_memory_working_set(a, spec, &blocking) > plan.memory_budget;
    if spill && plan.spill_dir.is_none() {
        return Err(Error::InvalidArg(
            "memory budget requires spilling but no spill directory is set".into(),
        ));
    }

    let mut stats = ProjectionStats {
        spilled: spill,
        row_slices: blocking.h,
        col_slices: blocking.v,
        blocks: 0,
        spill_bytes: 0,
        nnz_p: 0,
    };
    let out = if spill {
        project_spilled(a, plan, blocking, &mut stats)?
    } else {
        project_in_memory(a, plan, blocking, &mut stats)?
    };
    Ok((out, stats))
}

fn project_in_memory(
    a: &CsrMatrix,
    plan: &ProjectionPlan,
    blocking: Blocking,
    stats: &mut ProjectionStats,
) -> Result<DenseMatrix> {
    let k = plan.spec.k;
    let mut out = DenseMatrix::zeros(a.n_rows(), k);
    for j in 0..blocking.v {
        let p_j = column_slice(plan, j, blocking)?;
        stats.nnz_p += slice_entries(p_j.as_ref(), &plan.spec);
        let col_begin = j * blocking.col_width(k);
        for i in 0..blocking.h {
            let block = block_product(a, plan, i, blocking, p_j.as_ref())?;
            write_block(&mut out, &block, i * blocking.row_width, col_begin);
            stats.blocks += 1;
        }
    }
    Ok(out)
}

fn project_spilled(
    a: &CsrMatrix,
    plan: &ProjectionPlan,
    blocking: Blocking,
    stats: &mut ProjectionStats,
) -> Result<DenseMatrix> {
    let dir = plan.spill_dir.as_deref().expect("spill path requires a directory");
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    for j in 0..blocking.v {
        let p_j = column_slice(plan, j, blocking)?;
        stats.nnz_p += slice_entries(p_j.as_ref(), &plan.spec);
        for i in 0..blocking.h {
            let block = block_product(a, plan, i, blocking, p_j.as_ref())?;
            let path = block_path(dir, i, j);
            rpdb::save_dense_f64(&path, &block)?;
            stats.spill_bytes += file_len(&path)?;
            stats.blocks += 1;
        }
        drop(p_j);
        let mut row_blocks = Vec::with_capacity(blocking.h);
        for i in 0..blocking.h {
            let path = block_path(dir, i, j);
            let (block, _) = rpdb::load_dense(&path)?;
            fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
            row_blocks.push(block);
        }
        let refs: Vec<&DenseMatrix> = row_blocks.iter().collect();
        let col_block = DenseMatrix::vconcat(&refs)?;
        let path = col_block_path(dir, j);
        rpdb::save_dense_f64(&path, &col_block)?;
        stats.spill_bytes += file_len(&path)?;
    }

    let mut col_blocks = Vec::with_capacity(blocking.v);
    for j in 0..blocking.v {
        let path = col_block_path(dir, j);
        let (block, _) = rpdb::load_dense(&path)?;
        fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
        col_blocks.push(block);
    }
    let refs: Vec<&DenseMatrix> = col_blocks.iter().collect();
    DenseMatrix::hconcat(&refs)
}

/// Generates projection slice `j`, or `None` for the streamed one-slice
/// Count Sketch path, which never forms the sketch matrix.
fn column_slice(
    plan: &ProjectionPlan,
    j: usize,
    blocking: Blocking,
) -> Result<Option<RpStorage>> {
    if plan.spec.kind == RpKind::CountSketch && blocking.v == 1 {
        return Ok(None);
    }
    Ok(Some(generate_slice(&plan.spec, j, blocking.v_request)?.storage))
}

/// Stored entries of one slice; the streamed path stores nothing, so it
/// reports the `d` entries an explicit Count Sketch matrix would hold.
fn slice_entries(p_j: Option<&RpStorage>, spec: &RpSchemeSpec) -> usize {
    match p_j {
        Some(s) => s.stored_entries(),
        None => spec.d,
    }
}

/// Computes `R_ij = A_i * P_j`, choosing the kernel by slice storage.
fn block_product(
    a: &CsrMatrix,
    plan: &ProjectionPlan,
    i: usize,
    blocking: Blocking,
    p_j: Option<&RpStorage>,
) -> Result<DenseMatrix> {
    let row_begin = i * blocking.row_width;
    let row_end = ((i + 1) * blocking.row_width).min(a.n_rows());
    let a_slice;
    let a_i: &CsrMatrix = if blocking.h == 1 {
        a
    } else {
        a_slice = a.row_slice(row_begin, row_end)?;
        &a_slice
    };
    match p_j {
        None => apply_count_sketch_streaming(a_i, plan.spec.k, plan.spec.seed),
        Some(RpStorage::Sparse(p)) => csr_csr_matmul_dense(a_i, p),
        Some(RpStorage::Dense(p)) => csr_dense_matmul(a_i, p),
    }
}

fn write_block(out: &mut DenseMatrix, block: &DenseMatrix, row0: usize, col0: usize) {
    for r in 0..block.n_rows() {
        let src = block.row(r);
        let dst = &mut out.row_mut(row0 + r)[col0..col0 + src.len()];
        dst.copy_from_slice(src);
    }
}

fn block_path(dir: &Path, i: usize, j: usize) -> PathBuf {
    dir.join(format!("r_{i}_{j}.rpdb"))
}

fn col_block_path(dir: &Path, j: usize) -> PathBuf {
    dir.join(format!("rcol_{j}.rpdb"))
}

fn file_len(path: &Path) -> Result<u64> {
    Ok(fs::metadata(path).map_err(|e| Error::io(path, e))?.len())
}

/// Estimated bytes the in-memory path keeps live at once: the full output
/// buffer, one projection slice, and one dataset row slice (only copied
/// when `h > 1`). Sparse slice sizes use expected fill rates.
fn in_memory_working_set(a: &CsrMatrix, spec: &RpSchemeSpec, blocking: &Blocking) -> usize {
    let f = std::mem::size_of::<f64>();
    let sparse_cell = f + std::mem::size_of::<usize>();
    let out_bytes = a.n_rows() * spec.k * f;
    let w = blocking.col_width(spec.k);
    let slice_cells = spec.d as f64 * w as f64;
    let p_bytes = match spec.kind {
        RpKind::Gaussian => spec.d * w * f,
        RpKind::Srht => spec.srht_d_pad() * w * f,
        RpKind::Achlioptas => (slice_cells / 3.0) as usize * sparse_cell,
        RpKind::Li => (slice_cells / spec.li_s_effective()) as usize * sparse_cell,
        RpKind::CountSketch => (spec.d * w).div_ceil(spec.k) * sparse_cell,
    };
    let a_bytes = if blocking.h == 1 {
        0
    } else {
        a.nnz().div_ceil(blocking.h) * sparse_cell
            + (a.n_rows().div_ceil(blocking.h) + 1) * f
    };
    out_bytes + p_bytes + a_bytes
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use crate::schemes::generate;

    fn random_csr(n: usize, d: usize, density: f64, seed: u64) -> CsrMatrix {
        let mut rng = RngStream::new(seed, 9000);
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            let mut row = Vec::new();
            for c in 0..d {
                if rng.next_f64() < density {
                    row.push((c, rng.next_normal()));
                }
            }
            rows.push(row);
        }
        CsrMatrix::from_row_entries(n, d, rows).unwrap()
    }

    fn tmp_dir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("rpkit-engine-{tag}"));
        let _ = fs::remove_dir_all(&dir);
        dir
    }

    #[test]
    fn single_block_plan_matches_direct_product() {
        let a = random_csr(50, 120, 0.1, 3);
        let spec = RpSchemeSpec::new(RpKind::Gaussian, 120, 16, 7);
        let p = generate(&spec).unwrap();
        let direct = match &p.storage {
            RpStorage::Dense(m) => csr_dense_matmul(&a, m).unwrap(),
            RpStorage::Sparse(m) => csr_csr_matmul_dense(&a, m).unwrap(),
        };
        let (out, stats) = project_with_stats(&a, &ProjectionPlan::new(spec)).unwrap();
        assert_eq!(out.data(), direct.data());
        assert_eq!(stats.blocks, 1);
        assert!(!stats.spilled);
    }

    #[test]
    fn stats_count_projection_entries() {
        let a = random_csr(30, 200, 0.05, 21);

        let dense = RpSchemeSpec::new(RpKind::Gaussian, 200, 8, 5);
        let (_, stats) = project_with_stats(&a, &ProjectionPlan::new(dense)).unwrap();
        assert_eq!(stats.nnz_p, 200 * 8);

        let cs = RpSchemeSpec::new(RpKind::CountSketch, 200, 8, 5);
        let (_, streamed) = project_with_stats(&a, &ProjectionPlan::new(cs.clone())).unwrap();
        assert_eq!(streamed.nnz_p, 200);

        let mut plan = ProjectionPlan::new(cs);
        plan.v = 4;
        let (_, sliced) = project_with_stats(&a, &plan).unwrap();
        assert_eq!(sliced.nnz_p, 200);
    }

    #[test]
    fn blocked_output_matches_unsliced_for_every_scheme() {
        let a = random_csr(40, 200, 0.08, 11);
        for kind in RpKind::ALL {
            let spec = RpSchemeSpec::new(kind, 200, 12, 21);
            let base = project(&a, &ProjectionPlan::new(spec.clone())).unwrap();
            for (h, v) in [(2, 2), (4, 3), (3, 12), (7, 40), (40, 1)] {
                let plan = ProjectionPlan { h, v, ..ProjectionPlan::new(spec.clone()) };
                let out = project(&a, &plan).unwrap();
                let diff = out.rel_frobenius_diff(&base);
                assert!(diff < 1e-10, "{kind} h={h} v={v}: rel diff {diff}");
            }
        }
    }

    #[test]
    fn count_sketch_streaming_and_explicit_paths_agree_bitwise() {
        let a = random_csr(30, 150, 0.1, 5);
        let spec = RpSchemeSpec::new(RpKind::CountSketch, 150, 10, 99);
        let streaming = project(&a, &ProjectionPlan::new(spec.clone())).unwrap();
        let explicit =
            project(&a, &ProjectionPlan { v: 2, ..ProjectionPlan::new(spec) }).unwrap();
        let same = streaming
            .data()
            .iter()
            .zip(explicit.data())
            .all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(same);
    }

    #[test]
    fn spill_path_is_bit_identical_and_cleans_up() {
        let a = random_csr(60, 300, 0.05, 13);
        let spec = RpSchemeSpec::new(RpKind::Achlioptas, 300, 8, 31);
        let dir = tmp_dir("spill");
        let mut plan = ProjectionPlan { h: 4, v: 2, ..ProjectionPlan::new(spec) };
        let (in_mem, s1) = project_with_stats(&a, &plan).unwrap();
        assert!(!s1.spilled);

        plan.memory_budget = 1;
        plan.spill_dir = Some(dir.clone());
        let (spilled, s2) = project_with_stats(&a, &plan).unwrap();
        assert!(s2.spilled);
        assert_eq!(s2.blocks, 8);
        assert!(s2.spill_bytes > 0);
        let leftover = fs::read_dir(&dir).unwrap().count();
        assert_eq!(leftover, 0, "spill files should be removed after assembly");
        let same = in_mem
            .data()
            .iter()
            .zip(spilled.data())
            .all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(same);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn budget_without_spill_dir_is_rejected() {
        let a = random_csr(20, 64, 0.1, 1);
        let spec = RpSchemeSpec::new(RpKind::Gaussian, 64, 8, 1);
        let plan = ProjectionPlan { memory_budget: 1, ..ProjectionPlan::new(spec) };
        let err = project(&a, &plan).unwrap_err();
        assert!(err.to_string().contains("spill"));
    }

    #[test]
    fn generous_budget_stays_in_memory() {
        let a = random_csr(20, 64, 0.1, 1);
        let spec = RpSchemeSpec::new(RpKind::Gaussian, 64, 8, 1);
        let plan = ProjectionPlan {
            memory_budget: 1 << 30,
            spill_dir: Some(tmp_dir("unused")),
            ..ProjectionPlan::new(spec)
        };
        let (_, stats) = project_with_stats(&a, &plan).unwrap();
        assert!(!stats.spilled);
        assert_eq!(stats.spill_bytes, 0);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let a = random_csr(10, 50, 0.1, 1);
        let spec = RpSchemeSpec::new(RpKind::Gaussian, 64, 8, 1);
        assert!(project(&a, &ProjectionPlan::new(spec)).is_err());
    }

    #[test]
    fn zero_row_dataset_projects_to_zero_rows() {
        let a = CsrMatrix::zeros(0, 64);
        let spec = RpSchemeSpec::new(RpKind::Li, 64, 8, 1);
        let (out, stats) = project_with_stats(&a, &ProjectionPlan::new(spec)).unwrap();
        assert_eq!((out.n_rows(), out.n_cols()), (0, 8));
        assert_eq!(stats.blocks, 0);
    }

    #[test]
    fn zero_slice_counts_are_rejected() {
        let a = random_csr(10, 50, 0.1, 1);
        let spec = RpSchemeSpec::new(RpKind::Gaussian, 50, 8, 1);
        assert!(project(&a, &ProjectionPlan { h: 0, ..ProjectionPlan::new(spec.clone()) })
            .is_err());
        assert!(project(&a, &ProjectionPlan { v: 0, ..ProjectionPlan::new(spec) }).is_err());
    }
}
