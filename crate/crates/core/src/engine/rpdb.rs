//! Binary persistence for projected (dense) matrices.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes  "RPDB"
//! version    u32      1 = f32 values, 2 = f64 values
//! n_rows     u64
//! n_cols     u64
//! values     n_rows * n_cols reals, row-major
//! stats tag  u8       0 = none, 1 = standardize, 2 = max-abs
//! stats      tag-dependent f64 arrays, each prefixed by a u64 length
//! ```
//!
//! Version 1 is the interchange format written by [`save_dense`]; values are
//! stored at 32-bit precision. Version 2 keeps full 64-bit values and is used
//! for engine spill files, where re-reading must reproduce in-memory results
//! exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::NormStats;
use crate::error::{Error, Result};
use crate::sparse::DenseMatrix;

const MAGIC: &[u8; 4] = b"RPDB";
const TAG_NONE: u8 = 0;
const TAG_STANDARDIZE: u8 = 1;
const TAG_MAXABS: u8 = 2;

/// Saves `m` (and optional normalization stats) at 32-bit value precision.
pub fn save_dense(path: &Path, m: &DenseMatrix, stats: Option<&NormStats>) -> Result<()> {
    write_file(path, m, stats, 1)
}

/// Saves at full 64-bit precision; the engine's spill format.
pub(crate) fn save_dense_f64(path: &Path, m: &DenseMatrix) -> Result<()> {
    write_file(path, m, None, 2)
}

fn write_file(path: &Path, m: &DenseMatrix, stats: Option<&NormStats>, version: u32) -> Result<()> {
    let ioe = |e: std::io::Error| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(ioe)?);
    w.write_all(MAGIC).map_err(ioe)?;
    w.write_all(&version.to_le_bytes()).map_err(ioe)?;
    w.write_all(&(m.n_rows() as u64).to_le_bytes()).map_err(ioe)?;
    w.write_all(&(m.n_cols() as u64).to_le_bytes()).map_err(ioe)?;
    match version {
        1 => {
            for &v in m.data() {
                w.write_all(&(v as f32).to_le_bytes()).map_err(ioe)?;
            }
        }
        2 => {
            for &v in m.data() {
                w.write_all(&v.to_le_bytes()).map_err(ioe)?;
            }
        }
        _ => return Err(Error::InvalidArg(format!("unsupported version {version}"))),
    }
    match stats {
        None => w.write_all(&[TAG_NONE]).map_err(ioe)?,
        Some(NormStats::Standardize { mean, std }) => {
            w.write_all(&[TAG_STANDARDIZE]).map_err(ioe)?;
            write_array(&mut w, mean).map_err(ioe)?;
            write_array(&mut w, std).map_err(ioe)?;
        }
        Some(NormStats::MaxAbs { max_abs }) => {
            w.write_all(&[TAG_MAXABS]).map_err(ioe)?;
            write_array(&mut w, max_abs).map_err(ioe)?;
        }
    }
    w.flush().map_err(ioe)
}

fn write_array<W: Write>(w: &mut W, a: &[f64]) -> std::io::Result<()> {
    w.write_all(&(a.len() as u64).to_le_bytes())?;
    for &v in a {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Loads a matrix saved by [`save_dense`] (either value precision).
pub fn load_dense(path: &Path) -> Result<(DenseMatrix, Option<NormStats>)> {
    let ioe = |e: std::io::Error| Error::io(path, e);
    let mut r = BufReader::new(File::open(path).map_err(ioe)?);

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, path)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic {:?}, not a projected-data file",
            path.display(),
            magic
        )));
    }
    let version = read_u32(&mut r, path)?;
    if version != 1 && version != 2 {
        return Err(Error::Format(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let n_rows = read_u64(&mut r, path)? as usize;
    let n_cols = read_u64(&mut r, path)? as usize;
    let len = n_rows.checked_mul(n_cols).ok_or_else(|| {
        Error::Format(format!("{}: dimension overflow", path.display()))
    })?;
    let mut data = Vec::with_capacity(len);
    if version == 1 {
        let mut buf = [0u8; 4];
        for _ in 0..len {
            read_exact(&mut r, &mut buf, path)?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
    } else {
        let mut buf = [0u8; 8];
        for _ in 0..len {
            read_exact(&mut r, &mut buf, path)?;
            data.push(f64::from_le_bytes(buf));
        }
    }
    let m = DenseMatrix::from_vec(n_rows, n_cols, data)?;

    let mut tag = [0u8; 1];
    read_exact(&mut r, &mut tag, path)?;
    let stats = match tag[0] {
        TAG_NONE => None,
        TAG_STANDARDIZE => {
            let mean = read_array(&mut r, path)?;
            let std = read_array(&mut r, path)?;
            Some(NormStats::Standardize { mean, std })
        }
        TAG_MAXABS => Some(NormStats::MaxAbs { max_abs: read_array(&mut r, path)? }),
        t => {
            return Err(Error::Format(format!(
                "{}: unknown stats tag {t}",
                path.display()
            )))
        }
    };
    Ok((m, stats))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format(format!("{}: truncated file", path.display()))
        } else {
            Error::io(path, e)
        }
    })
}

fn read_u32<R: Read>(r: &mut R, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, path)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R, path: &Path) -> Result<u64> {
    let mut buf = [0u8; 8];
    read_exact(r, &mut buf, path)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_array<R: Read>(r: &mut R, path: &Path) -> Result<Vec<f64>> {
    let len = read_u64(r, path)? as usize;
    let mut out = Vec::with_capacity(len);
    let mut buf = [0u8; 8];
    for _ in 0..len {
        read_exact(r, &mut buf, path)?;
        out.push(f64::from_le_bytes(buf));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("rpkit-rpdb-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = RngStream::new(seed, 0);
        DenseMatrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.next_normal()).collect())
            .unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let m = random_matrix(7, 5, 61);
        let stats = NormStats::Standardize { mean: vec![0.5; 5], std: vec![2.0; 5] };
        let p1 = tmp("a1.rpdb");
        let p2 = tmp("a2.rpdb");
        save_dense(&p1, &m, Some(&stats)).unwrap();
        let (m2, s2) = load_dense(&p1).unwrap();
        assert_eq!(s2, Some(stats.clone()));
        save_dense(&p2, &m2, s2.as_ref()).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn values_round_trip_at_f32_precision() {
        let m = random_matrix(4, 3, 62);
        let p = tmp("b.rpdb");
        save_dense(&p, &m, None).unwrap();
        let (m2, stats) = load_dense(&p).unwrap();
        assert!(stats.is_none());
        for (a, b) in m.data().iter().zip(m2.data()) {
            assert_eq!(*a as f32, *b as f32);
            assert_eq!(*b, (*a as f32) as f64);
        }
    }

    #[test]
    fn f64_variant_is_lossless() {
        let m = random_matrix(6, 6, 63);
        let p = tmp("c.rpdb");
        save_dense_f64(&p, &m).unwrap();
        let (m2, _) = load_dense(&p).unwrap();
        assert_eq!(m, m2);
    }

    #[test]
    fn zero_row_matrix_round_trips() {
        let m = DenseMatrix::zeros(0, 9);
        let p = tmp("d.rpdb");
        save_dense(&p, &m, None).unwrap();
        let (m2, _) = load_dense(&p).unwrap();
        assert_eq!(m2.n_rows(), 0);
        assert_eq!(m2.n_cols(), 9);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let p = tmp("e.rpdb");
        save_dense(&p, &random_matrix(2, 2, 64), None).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'X';
        std::fs::write(&p, &bytes).unwrap();
        let err = load_dense(&p).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn truncation_is_rejected() {
        let p = tmp("f.rpdb");
        save_dense(&p, &random_matrix(3, 3, 65), None).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 6]).unwrap();
        let err = load_dense(&p).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn unknown_version_is_rejected() {
        let p = tmp("g.rpdb");
        save_dense(&p, &random_matrix(2, 2, 66), None).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[4] = 9;
        std::fs::write(&p, &bytes).unwrap();
        let err = load_dense(&p).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }
}
