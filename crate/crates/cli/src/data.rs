//! Dataset loading shared by the commands: LIBSVM text and RPDB binary
//! inputs are told apart by their magic bytes, and labels travel next to
//! RPDB files in a `<file>.labels.json` sidecar.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rpkit::engine::load_dense;
use rpkit::sparse::{parse_libsvm, write_libsvm, CsrMatrix, DenseMatrix, LabeledDataset};
use rpkit::{Error, Result};
use serde::{Deserialize, Serialize};

/// Class assignments for a feature file, plus the label values as they
/// appeared in the original text so round trips preserve them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelInfo {
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub label_values: Vec<f64>,
}

/// Feature matrix of a loaded dataset, in whichever form the file stores.
pub enum Features {
    Sparse(CsrMatrix),
    Dense(DenseMatrix),
}

impl Features {
    pub fn n_rows(&self) -> usize {
        match self {
            Features::Sparse(m) => m.n_rows(),
            Features::Dense(m) => m.n_rows(),
        }
    }

    /// The matrix in CSR form, converting a dense one as needed.
    pub fn into_sparse(self) -> CsrMatrix {
        match self {
            Features::Sparse(m) => m,
            Features::Dense(m) => CsrMatrix::from_dense(&m),
        }
    }
}

/// A dataset read from disk; labels are present only when the file (or its
/// sidecar) records them.
pub struct Loaded {
    pub features: Features,
    pub labels: Option<LabelInfo>,
}

/// Reads a dataset, detecting the format from the file's first bytes. Any
/// normalization statistics in an RPDB file describe how its values were
/// already rescaled, so they are not returned here.
pub fn load_dataset(path: &Path) -> Result<Loaded> {
    if is_rpdb(path)? {
        let (m, _) = load_dense(path)?;
        let labels = read_labels_sidecar(path)?;
        Ok(Loaded { features: Features::Dense(m), labels })
    } else {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let parsed = parse_libsvm(BufReader::new(file), None)?;
        let LabeledDataset { features, labels, n_classes } = parsed.dataset;
        let labels = LabelInfo { labels, n_classes, label_values: parsed.label_values };
        Ok(Loaded { features: Features::Sparse(features), labels: Some(labels) })
    }
}

/// Turns a loaded dataset into a labeled one, densified inputs included.
pub fn to_labeled(loaded: Loaded, path: &Path) -> Result<LabeledDataset> {
    let info = loaded.labels.ok_or_else(|| {
        Error::Format(format!(
            "{} carries no labels ({} is missing)",
            path.display(),
            labels_sidecar_path(path).display()
        ))
    })?;
    LabeledDataset::new(loaded.features.into_sparse(), info.labels, info.n_classes)
}

fn is_rpdb(path: &Path) -> Result<bool> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 4];
    match file.read_exact(&mut magic) {
        Ok(()) => Ok(&magic == b"RPDB"),
        Err(_) => Ok(false),
    }
}

fn labels_sidecar_path(data_path: &Path) -> PathBuf {
    let mut name = data_path.as_os_str().to_owned();
    name.push(".labels.json");
    PathBuf::from(name)
}

/// Writes the label sidecar next to an RPDB file, returning its path.
pub fn write_labels_sidecar(data_path: &Path, info: &LabelInfo) -> Result<PathBuf> {
    let path = labels_sidecar_path(data_path);
    write_json(&path, info)?;
    Ok(path)
}

fn read_labels_sidecar(data_path: &Path) -> Result<Option<LabelInfo>> {
    let path = labels_sidecar_path(data_path);
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let info: LabelInfo = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(Some(info))
}

/// Creates the directory an output file will land in.
pub fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
        }
        _ => Ok(()),
    }
}

/// Serializes `value` as pretty JSON at `path`.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Format(format!("cannot encode {}: {e}", path.display())))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Reads a JSON file into `T`.
pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Writes a dataset as LIBSVM text.
pub fn save_libsvm(
    path: &Path,
    dataset: &LabeledDataset,
    label_values: Option<&[f64]>,
) -> Result<()> {
    ensure_parent(path)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_libsvm(&mut w, dataset, label_values)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Restriction of `x` to the given columns, which must be strictly
/// ascending; column `cols[j]` of `x` becomes column `j` of the result.
pub fn keep_columns(x: &CsrMatrix, cols: &[usize]) -> Result<CsrMatrix> {
    if let Some(&last) = cols.last() {
        if last >= x.n_cols() {
            return Err(Error::InvalidArg(format!(
                "column {last} out of range for {} features",
                x.n_cols()
            )));
        }
    }
    if cols.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArg("kept columns must be strictly ascending".into()));
    }
    let mut rows = Vec::with_capacity(x.n_rows());
    for r in 0..x.n_rows() {
        let (row_cols, row_vals) = x.row(r);
        let mut row = Vec::new();
        for (&c, &v) in row_cols.iter().zip(row_vals) {
            if let Ok(j) = cols.binary_search(&c) {
                row.push((j, v));
            }
        }
        rows.push(row);
    }
    CsrMatrix::from_row_entries(x.n_rows(), cols.len(), rows)
}
