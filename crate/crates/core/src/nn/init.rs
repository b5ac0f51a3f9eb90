//! Weight initialization catalog for dense layers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::schemes::{generate, RpKind, RpSchemeSpec};
use crate::sparse::DenseMatrix;

/// Default multiplier for count-sketch weight initialization.
pub const DEFAULT_CS_INIT_SCALE: f64 = 0.3;

/// How to fill a weight matrix before training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Uniform on `[-1/sqrt(f_in), 1/sqrt(f_in)]`.
    LeCun,
    /// Uniform on `[-b, b]` with `b = sqrt(6 / (f_in + f_out))`.
    XavierSigmoid,
    /// `XavierSigmoid` bounds scaled by 4, for tanh units.
    XavierTanh,
    /// Gaussian with variance `2 / f_in`, for rectifier units.
    He,
    /// A random projection matrix rescaled so its sample standard deviation
    /// matches `He`. Count sketch is the exception: its entries are
    /// multiplied by `cs_scale` instead, which keeps them in
    /// `{0, -cs_scale, +cs_scale}` and preserves the sparsity.
    Rp { kind: RpKind, cs_scale: f64 },
}

impl InitScheme {
    pub fn validate(&self) -> Result<()> {
        if let InitScheme::Rp { cs_scale, .. } = self {
            if !cs_scale.is_finite() || *cs_scale <= 0.0 {
                return Err(Error::InvalidArg(format!(
                    "count-sketch init scale must be positive, got {cs_scale}"
                )));
            }
        }
        Ok(())
    }
}

/// Draws an `f_in x f_out` weight matrix according to `scheme`. The draw is
/// a pure function of `(f_in, f_out, scheme, seed)`.
pub fn init_weights(f_in: usize, f_out: usize, scheme: InitScheme, seed: u64) -> Result<DenseMatrix> {
    if f_in == 0 || f_out == 0 {
        return Err(Error::InvalidArg(format!(
            "weight matrix shape {f_in}x{f_out} must be positive"
        )));
    }
    scheme.validate()?;
    let he_std = (2.0 / f_in as f64).sqrt();
    match scheme {
        InitScheme::LeCun => Ok(fill_uniform(f_in, f_out, 1.0 / (f_in as f64).sqrt(), seed)),
        InitScheme::XavierSigmoid => {
            Ok(fill_uniform(f_in, f_out, (6.0 / (f_in + f_out) as f64).sqrt(), seed))
        }
        InitScheme::XavierTanh => {
            Ok(fill_uniform(f_in, f_out, 4.0 * (6.0 / (f_in + f_out) as f64).sqrt(), seed))
        }
        InitScheme::He => {
            let mut stream = RngStream::from_key(seed);
            let data = (0..f_in * f_out).map(|_| stream.next_normal() * he_std).collect();
            DenseMatrix::from_vec(f_in, f_out, data)
        }
        InitScheme::Rp { kind, cs_scale } => {
            let spec = RpSchemeSpec::new(kind, f_in, f_out, seed);
            let mut w = generate(&spec)?.storage.densify();
            if kind == RpKind::CountSketch {
                for v in w.data_mut() {
                    *v *= cs_scale;
                }
            } else {
                rescale_to_std(&mut w, he_std)?;
            }
            Ok(w)
        }
    }
}

fn fill_uniform(f_in: usize, f_out: usize, bound: f64, seed: u64) -> DenseMatrix {
    let mut stream = RngStream::from_key(seed);
    let data = (0..f_in * f_out).map(|_| (2.0 * stream.next_f64() - 1.0) * bound).collect();
    DenseMatrix::from_vec(f_in, f_out, data).expect("shape matches data length")
}

/// Multiplies every entry by a constant so the sample standard deviation
/// (around the sample mean) becomes exactly `target`. Zeros stay zero.
fn rescale_to_std(w: &mut DenseMatrix, target: f64) -> Result<()> {
    let n = w.data().len() as f64;
    let mean = w.data().iter().sum::<f64>() / n;
    let var = w.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var <= 0.0 {
        return Err(Error::Numeric("cannot rescale a constant weight matrix".into()));
    }
    let scale = target / var.sqrt();
    for v in w.data_mut() {
        *v *= scale;
    }
    Ok(())
}
