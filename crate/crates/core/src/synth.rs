//! Two-class sparse synthetic datasets with controlled density and a
//! controlled fraction of class-separating features.
//!
//! A dataset is a `rho`-dense matrix with standard normal nonzeros. A
//! subset of `round(psi * d)` features is marked significant; examples of
//! class 1 get Gaussian noise with nonzero mean added to their nonzero
//! entries within those features, which separates the classes without
//! changing the sparsity pattern. Rows are generated from per-row RNG
//! streams and separating noise from its own streams, so the pattern is
//! identical for any noise parameters and any worker layout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_key, RngStream};
use crate::sparse::{CsrMatrix, LabeledDataset};

const TAG_ROW: u64 = 0x524F57;
const TAG_NOISE: u64 = 0x4E4F49;
const TAG_SIG: u64 = 0x534947;
const TAG_SPLIT: u64 = 0x53504C;

fn default_sep() -> f64 {
    1.0
}

fn default_train_fraction() -> f64 {
    0.8
}

/// Parameters of one synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_total: usize,
    pub d: usize,
    /// Expected fraction of nonzero entries.
    pub rho: f64,
    /// Fraction of features that separate the classes.
    pub psi: f64,
    /// Mean of the separating noise.
    #[serde(default = "default_sep")]
    pub sep_mean: f64,
    /// Standard deviation of the separating noise.
    #[serde(default = "default_sep")]
    pub sep_std: f64,
    pub seed: u64,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
}

impl SynthSpec {
    pub fn new(n_total: usize, d: usize, rho: f64, psi: f64, seed: u64) -> Self {
        SynthSpec {
            n_total,
            d,
            rho,
            psi,
            sep_mean: default_sep(),
            sep_std: default_sep(),
            seed,
            train_fraction: default_train_fraction(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_total < 2 {
            return Err(Error::InvalidArg("need at least 2 examples to split".into()));
        }
        if self.d == 0 {
            return Err(Error::InvalidArg("dimensionality must be positive".into()));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::InvalidArg(format!("density {} outside (0, 1)", self.rho)));
        }
        if !(self.psi > 0.0 && self.psi <= 1.0) {
            return Err(Error::InvalidArg(format!(
                "significant fraction {} outside (0, 1]",
                self.psi
            )));
        }
        if !self.sep_std.is_finite() || self.sep_std < 0.0 {
            return Err(Error::InvalidArg("noise std must be non-negative".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidArg(format!(
                "train fraction {} outside (0, 1)",
                self.train_fraction
            )));
        }
        Ok(())
    }

    /// Expected stored entries per row; below about 0.5 most examples are
    /// empty and the task carries almost no signal.
    pub fn expected_nnz_per_row(&self) -> f64 {
        self.rho * self.d as f64
    }

    pub fn n_significant(&self) -> usize {
        (self.psi * self.d as f64).round() as usize
    }
}

/// A generated dataset split plus the planted signal.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    /// Sorted ids of the class-separating features.
    pub significant_features: Vec<usize>,
}

/// Generates the dataset and splits it into train and test parts.
pub fn generate(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let (n, d) = (spec.n_total, spec.d);
    let significant = choose_significant(spec);

    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for r in 0..n {
        let label = r % 2;
        let mut row = generate_row(spec, r);
        if label == 1 {
            let mut noise = RngStream::from_key(derive_key(spec.seed, &[TAG_NOISE, r as u64]));
            for (c, v) in row.iter_mut() {
                if significant.binary_search(c).is_ok() {
                    *v += spec.sep_mean + spec.sep_std * noise.next_normal();
                }
            }
        }
        rows.push(row);
        labels.push(label);
    }
    let full = CsrMatrix::from_row_entries(n, d, rows)?;

    let mut order: Vec<usize> = (0..n).collect();
    let mut split_rng = RngStream::from_key(derive_key(spec.seed, &[TAG_SPLIT]));
    split_rng.shuffle(&mut order);
    let n_train = ((spec.train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let (train_ids, test_ids) = order.split_at(n_train);

    let gather = |ids: &[usize]| -> Result<LabeledDataset> {
        LabeledDataset::new(
            full.gather_rows(ids)?,
            ids.iter().map(|&r| labels[r]).collect(),
            2,
        )
    };
    Ok(SynthOutput {
        train: gather(train_ids)?,
        test: gather(test_ids)?,
        significant_features: significant,
    })
}

/// Draws `round(psi * d)` distinct feature ids by a partial shuffle.
fn choose_significant(spec: &SynthSpec) -> Vec<usize> {
    let m = spec.n_significant();
    let d = spec.d;
    let mut ids: Vec<usize> = (0..d).collect();
    let mut rng = RngStream::from_key(derive_key(spec.seed, &[TAG_SIG]));
    for i in 0..m.min(d) {
        let j = i + rng.next_range((d - i) as u64) as usize;
        ids.swap(i, j);
    }
    let mut sig = ids[..m.min(d)].to_vec();
    sig.sort_unstable();
    sig
}

/// One row's nonzero pattern and base values. Gaps between nonzeros are
/// drawn geometrically, which samples the same i.i.d. Bernoulli(rho)
/// pattern as testing every column but costs O(nnz).
fn generate_row(spec: &SynthSpec, r: usize) -> Vec<(usize, f64)> {
    let mut rng = RngStream::from_key(derive_key(spec.seed, &[TAG_ROW, r as u64]));
    let log_q = (1.0 - spec.rho).ln();
    let mut row = Vec::new();
    let mut pos = 0usize;
    loop {
        let gap = ((1.0 - rng.next_f64()).ln() / log_q) as usize;
        pos = match pos.checked_add(gap) {
            Some(p) if p < spec.d => p,
            _ => break,
        };
        row.push((pos, rng.next_normal()));
        pos += 1;
    }
    row
}

/// The dissertation's two synthetic dataset grids, scaled down by `divisor`
/// so that the expected nonzeros per row stay what they would be at full
/// scale (dimensions shrink, density grows).
pub fn paper_preset(name: &str, divisor: usize, seed: u64) -> Result<Vec<SynthSpec>> {
    if divisor == 0 {
        return Err(Error::InvalidArg("divisor must be at least 1".into()));
    }
    let d = 1_000_000 / divisor;
    let n_total = 1_250_000 / divisor;
    let scale = divisor as f64;
    let grid: Vec<(f64, f64)> = match name {
        "rho_grid" => [1e-6, 1e-5, 1e-4].iter().map(|&rho| (rho * scale, 0.2)).collect(),
        "psi_grid" => {
            [0.01, 0.05, 0.1, 0.2].iter().map(|&psi| (1e-4 * scale, psi)).collect()
        }
        other => {
            return Err(Error::InvalidArg(format!(
                "unknown preset {other:?} (expected rho_grid or psi_grid)"
            )))
        }
    };
    let specs: Vec<SynthSpec> = grid
        .into_iter()
        .map(|(rho, psi)| SynthSpec::new(n_total, d, rho, psi, seed))
        .collect();
    for s in &specs {
        s.validate()?;
    }
    Ok(specs)
}
