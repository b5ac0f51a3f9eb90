//! Binary persistence for models and optimizer state.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes  "RPNN"
//! version    u32      currently 1
//! flags      u8       bit 0: trainer state follows the layers
//! n_layers   u32
//! layers     tagged records, see below
//! state      (flag bit 0) u64 next epoch, then one velocity record per
//!            layer with the same shapes as the layer's parameters
//! ```
//!
//! Layer records by tag byte:
//!
//! ```text
//! 0 dense       u64 f_in, u64 f_out, f_in*f_out weights row-major, f_out bias
//! 1 batch norm  u64 width, f64 epsilon, then gamma, beta, running mean,
//!               running variance, each width f64 values
//! 2 dropout     f64 keep probability
//! 3 activation  u8 code (0 linear, 1 sigmoid, 2 tanh, 3 relu, 4 leaky
//!               relu), f64 slope (meaningful for code 4)
//! 4 projection  u8 mode (0 fixed, 1 finetuned), f64 eta, u64 d, u64 k,
//!               u64 nnz, d+1 row offsets, nnz column indices, nnz values,
//!               k bias values
//! ```
//!
//! Every save also writes a human-readable JSON sidecar at `<path>.json`
//! summarizing the layers and carrying the training configuration, so a
//! resumed run can reuse the exact hyperparameters.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::sparse::{CsrMatrix, DenseMatrix};

use super::layer::{Activation, BatchNormState, DenseLayer, Layer, RpLayerState, RpMode};
use super::train::{LayerVelocity, TrainConfig, TrainerState, Velocity};
use super::Model;

const MAGIC: &[u8; 4] = b"RPNN";
const VERSION: u32 = 1;
const FLAG_STATE: u8 = 1;

const TAG_DENSE: u8 = 0;
const TAG_BATCH_NORM: u8 = 1;
const TAG_DROPOUT: u8 = 2;
const TAG_ACTIVATION: u8 = 3;
const TAG_RP: u8 = 4;

const ACT_LINEAR: u8 = 0;
const ACT_SIGMOID: u8 = 1;
const ACT_TANH: u8 = 2;
const ACT_RELU: u8 = 3;
const ACT_LRELU: u8 = 4;

/// Saves the model, optionally with optimizer state for resuming, and a
/// JSON sidecar at `<path>.json` carrying the training configuration.
pub fn save_checkpoint(
    model: &Model,
    state: Option<&TrainerState>,
    config: Option<&TrainConfig>,
    path: &Path,
) -> Result<()> {
    if let Some(s) = state {
        if !s.velocity.matches(model) {
            return Err(Error::InvalidArg(
                "trainer state does not match the model's layers".into(),
            ));
        }
    }
    let ioe = |e: std::io::Error| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(ioe)?);
    w.write_all(MAGIC).map_err(ioe)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(ioe)?;
    let flags = if state.is_some() { FLAG_STATE } else { 0 };
    w.write_all(&[flags]).map_err(ioe)?;
    w.write_all(&(model.layers().len() as u32).to_le_bytes()).map_err(ioe)?;
    for layer in model.layers() {
        write_layer(&mut w, layer).map_err(ioe)?;
    }
    if let Some(s) = state {
        w.write_all(&(s.next_epoch as u64).to_le_bytes()).map_err(ioe)?;
        for v in &s.velocity.per_layer {
            write_velocity(&mut w, v).map_err(ioe)?;
        }
    }
    w.flush().map_err(ioe)?;
    write_sidecar(model, state, config, path)
}

fn write_layer<W: Write>(w: &mut W, layer: &Layer) -> std::io::Result<()> {
    match layer {
        Layer::Dense(d) => {
            w.write_all(&[TAG_DENSE])?;
            w.write_all(&(d.w.n_rows() as u64).to_le_bytes())?;
            w.write_all(&(d.w.n_cols() as u64).to_le_bytes())?;
            write_f64s(w, d.w.data())?;
            write_f64s(w, &d.b)?;
        }
        Layer::BatchNorm(bn) => {
            w.write_all(&[TAG_BATCH_NORM])?;
            w.write_all(&(bn.width() as u64).to_le_bytes())?;
            w.write_all(&bn.epsilon.to_le_bytes())?;
            write_f64s(w, &bn.gamma)?;
            write_f64s(w, &bn.beta)?;
            write_f64s(w, &bn.running_mean)?;
            write_f64s(w, &bn.running_var)?;
        }
        Layer::Dropout { keep } => {
            w.write_all(&[TAG_DROPOUT])?;
            w.write_all(&keep.to_le_bytes())?;
        }
        Layer::Activation(act) => {
            w.write_all(&[TAG_ACTIVATION])?;
            let (code, slope) = match act {
                Activation::Linear => (ACT_LINEAR, 0.0),
                Activation::Sigmoid => (ACT_SIGMOID, 0.0),
                Activation::Tanh => (ACT_TANH, 0.0),
                Activation::Relu => (ACT_RELU, 0.0),
                Activation::LRelu(a) => (ACT_LRELU, *a),
            };
            w.write_all(&[code])?;
            w.write_all(&slope.to_le_bytes())?;
        }
        Layer::Rp(rp) => {
            w.write_all(&[TAG_RP])?;
            let mode = match rp.mode {
                RpMode::Fixed => 0u8,
                RpMode::Finetuned => 1u8,
            };
            w.write_all(&[mode])?;
            w.write_all(&rp.eta.to_le_bytes())?;
            w.write_all(&(rp.pattern.n_rows() as u64).to_le_bytes())?;
            w.write_all(&(rp.pattern.n_cols() as u64).to_le_bytes())?;
            w.write_all(&(rp.pattern.nnz() as u64).to_le_bytes())?;
            write_u64s(w, rp.pattern.row_offsets())?;
            write_u64s(w, rp.pattern.col_indices())?;
            write_f64s(w, rp.pattern.values())?;
            write_f64s(w, &rp.bias)?;
        }
    }
    Ok(())
}

fn write_velocity<W: Write>(w: &mut W, v: &LayerVelocity) -> std::io::Result<()> {
    match v {
        LayerVelocity::None => Ok(()),
        LayerVelocity::Dense { w: vw, b } => {
            write_f64s(w, vw)?;
            write_f64s(w, b)
        }
        LayerVelocity::BatchNorm { gamma, beta } => {
            write_f64s(w, gamma)?;
            write_f64s(w, beta)
        }
        LayerVelocity::Rp { values, bias } => {
            write_f64s(w, values)?;
            write_f64s(w, bias)
        }
    }
}

fn write_f64s<W: Write>(w: &mut W, a: &[f64]) -> std::io::Result<()> {
    for &v in a {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn write_u64s<W: Write>(w: &mut W, a: &[usize]) -> std::io::Result<()> {
    for &v in a {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    Ok(())
}

fn write_sidecar(
    model: &Model,
    state: Option<&TrainerState>,
    config: Option<&TrainConfig>,
    path: &Path,
) -> Result<()> {
    let layers: Vec<serde_json::Value> = model
        .layers()
        .iter()
        .map(|layer| {
            serde_json::json!({
                "kind": layer.name(),
                "params": layer_param_count(layer),
            })
        })
        .collect();
    let doc = serde_json::json!({
        "format": "RPNN",
        "version": VERSION,
        "layers": layers,
        "param_count": model.param_count(),
        "train_config": config,
        "trainer_state": state.map(|s| serde_json::json!({ "next_epoch": s.next_epoch })),
    });
    let text = serde_json::to_string_pretty(&doc)
        .map_err(|e| Error::Format(format!("checkpoint sidecar: {e}")))?;
    let sidecar = sidecar_path(path);
    std::fs::write(&sidecar, text).map_err(|e| Error::io(&sidecar, e))
}

fn layer_param_count(layer: &Layer) -> usize {
    match layer {
        Layer::Dense(d) => d.w.n_rows() * d.w.n_cols() + d.b.len(),
        Layer::BatchNorm(bn) => 2 * bn.width(),
        Layer::Rp(rp) if rp.mode == RpMode::Finetuned => rp.pattern.nnz() + rp.bias.len(),
        _ => 0,
    }
}

/// Path of the JSON sidecar written next to a checkpoint.
pub(crate) fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.as_os_str().to_os_string();
    name.push(".json");
    std::path::PathBuf::from(name)
}

/// Loads a checkpoint saved by [`save_checkpoint`], returning the model and
/// the optimizer state when one was stored.
pub fn load_checkpoint(path: &Path) -> Result<(Model, Option<TrainerState>)> {
    let ioe = |e: std::io::Error| Error::io(path, e);
    let mut r = BufReader::new(File::open(path).map_err(ioe)?);

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, path)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic {:?}, not a model checkpoint",
            path.display(),
            magic
        )));
    }
    let version = read_u32(&mut r, path)?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let flags = read_u8(&mut r, path)?;
    if flags & !FLAG_STATE != 0 {
        return Err(Error::Format(format!("{}: unknown flags {flags:#04x}", path.display())));
    }
    let n_layers = read_u32(&mut r, path)? as usize;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        layers.push(read_layer(&mut r, path)?);
    }
    let state = if flags & FLAG_STATE != 0 {
        let next_epoch = read_u64(&mut r, path)? as usize;
        let mut per_layer = Vec::with_capacity(layers.len());
        for layer in &layers {
            per_layer.push(read_velocity(&mut r, path, layer)?);
        }
        Some(TrainerState { next_epoch, velocity: Velocity { per_layer } })
    } else {
        None
    };
    let model = Model::from_layers(layers)?;
    Ok((model, state))
}

fn read_layer<R: Read>(r: &mut R, path: &Path) -> Result<Layer> {
    let tag = read_u8(r, path)?;
    match tag {
        TAG_DENSE => {
            let f_in = read_u64(r, path)? as usize;
            let f_out = read_u64(r, path)? as usize;
            let len = f_in.checked_mul(f_out).ok_or_else(|| {
                Error::Format(format!("{}: weight shape overflow", path.display()))
            })?;
            let w = DenseMatrix::from_vec(f_in, f_out, read_f64s(r, path, len)?)?;
            let b = read_f64s(r, path, f_out)?;
            Ok(Layer::Dense(DenseLayer { w, b }))
        }
        TAG_BATCH_NORM => {
            let width = read_u64(r, path)? as usize;
            let epsilon = read_f64(r, path)?;
            let gamma = read_f64s(r, path, width)?;
            let beta = read_f64s(r, path, width)?;
            let running_mean = read_f64s(r, path, width)?;
            let running_var = read_f64s(r, path, width)?;
            Ok(Layer::BatchNorm(BatchNormState {
                gamma,
                beta,
                running_mean,
                running_var,
                epsilon,
            }))
        }
        TAG_DROPOUT => Ok(Layer::Dropout { keep: read_f64(r, path)? }),
        TAG_ACTIVATION => {
            let code = read_u8(r, path)?;
            let slope = read_f64(r, path)?;
            let act = match code {
                ACT_LINEAR => Activation::Linear,
                ACT_SIGMOID => Activation::Sigmoid,
                ACT_TANH => Activation::Tanh,
                ACT_RELU => Activation::Relu,
                ACT_LRELU => Activation::LRelu(slope),
                c => {
                    return Err(Error::Format(format!(
                        "{}: unknown activation code {c}",
                        path.display()
                    )))
                }
            };
            Ok(Layer::Activation(act))
        }
        TAG_RP => {
            let mode = match read_u8(r, path)? {
                0 => RpMode::Fixed,
                1 => RpMode::Finetuned,
                m => {
                    return Err(Error::Format(format!(
                        "{}: unknown projection mode {m}",
                        path.display()
                    )))
                }
            };
            let eta = read_f64(r, path)?;
            let d = read_u64(r, path)? as usize;
            let k = read_u64(r, path)? as usize;
            let nnz = read_u64(r, path)? as usize;
            let row_offsets = read_usizes(r, path, d + 1)?;
            let col_indices = read_usizes(r, path, nnz)?;
            let values = read_f64s(r, path, nnz)?;
            let bias = read_f64s(r, path, k)?;
            let pattern = CsrMatrix::new(d, k, row_offsets, col_indices, values)?;
            Ok(Layer::Rp(RpLayerState { pattern, bias, mode, eta }))
        }
        t => Err(Error::Format(format!("{}: unknown layer tag {t}", path.display()))),
    }
}

fn read_velocity<R: Read>(r: &mut R, path: &Path, layer: &Layer) -> Result<LayerVelocity> {
    match layer {
        Layer::Dense(d) => Ok(LayerVelocity::Dense {
            w: read_f64s(r, path, d.w.n_rows() * d.w.n_cols())?,
            b: read_f64s(r, path, d.b.len())?,
        }),
        Layer::BatchNorm(bn) => Ok(LayerVelocity::BatchNorm {
            gamma: read_f64s(r, path, bn.width())?,
            beta: read_f64s(r, path, bn.width())?,
        }),
        Layer::Rp(rp) if rp.mode == RpMode::Finetuned => Ok(LayerVelocity::Rp {
            values: read_f64s(r, path, rp.pattern.nnz())?,
            bias: read_f64s(r, path, rp.bias.len())?,
        }),
        _ => Ok(LayerVelocity::None),
    }
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

fn read_u8<R: Read>(r: &mut R, path: &Path) -> Result<u8> {
    let mut buf = [0u8; 1];
    read_exact(r, &mut buf, path)?;
    Ok(buf[0])
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

fn read_f64<R: Read>(r: &mut R, path: &Path) -> Result<f64> {
    let mut buf = [0u8; 8];
    read_exact(r, &mut buf, path)?;
    Ok(f64::from_le_bytes(buf))
}

fn read_f64s<R: Read>(r: &mut R, path: &Path, len: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(len);
    let mut buf = [0u8; 8];
    for _ in 0..len {
        read_exact(r, &mut buf, path)?;
        out.push(f64::from_le_bytes(buf));
    }
    Ok(out)
}

fn read_usizes<R: Read>(r: &mut R, path: &Path, len: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        out.push(read_u64(r, path)? as usize);
    }
    Ok(out)
}
