//! Layer states and their forward/backward arithmetic.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_key, RngStream};
use crate::sparse::{csr_csr_matmul_dense, csr_dense_matmul, CsrMatrix, DenseMatrix};

use super::{BatchCtx, NnInput};

/// Default negative-side slope for the leaky rectifier.
pub const DEFAULT_LRELU_SLOPE: f64 = 0.01;

/// Floor added to the batch variance before the square root.
pub const BN_EPSILON: f64 = 1e-5;

/// Weight of the newest batch in the running-moment update.
pub const BN_EMA: f64 = 0.1;

/// Stream tag for dropout masks, combined with the batch seed and the layer
/// index.
const TAG_DROPOUT: u64 = 0x44524F50;

/// Elementwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Sigmoid,
    Tanh,
    Relu,
    /// Leaky rectifier; the payload is the negative-side slope.
    #[serde(rename = "lrelu")]
    LRelu(f64),
}

impl Activation {
    pub fn validate(&self) -> Result<()> {
        if let Activation::LRelu(a) = self {
            if !a.is_finite() || *a <= 0.0 || *a >= 1.0 {
                return Err(Error::InvalidArg(format!(
                    "leaky rectifier slope {a} outside (0, 1)"
                )));
            }
        }
        Ok(())
    }

    pub fn apply(&self, z: f64) -> f64 {
        match self {
            Activation::Linear => z,
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Activation::Tanh => z.tanh(),
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::LRelu(a) => {
                if z > 0.0 {
                    z
                } else {
                    a * z
                }
            }
        }
    }

    /// Derivative expressed through the activation output `y`.
    fn grad_from_output(&self, y: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LRelu(a) => {
                if y > 0.0 {
                    1.0
                } else {
                    *a
                }
            }
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Linear => f.write_str("linear"),
            Activation::Sigmoid => f.write_str("sigmoid"),
            Activation::Tanh => f.write_str("tanh"),
            Activation::Relu => f.write_str("relu"),
            Activation::LRelu(a) => write!(f, "lrelu:{a}"),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let act = match s {
            "linear" => Activation::Linear,
            "sigmoid" => Activation::Sigmoid,
            "tanh" => Activation::Tanh,
            "relu" => Activation::Relu,
            "lrelu" => Activation::LRelu(DEFAULT_LRELU_SLOPE),
            other => match other.strip_prefix("lrelu:") {
                Some(rest) => {
                    let a = rest.parse::<f64>().map_err(|_| {
                        Error::InvalidArg(format!("bad leaky rectifier slope {rest:?}"))
                    })?;
                    Activation::LRelu(a)
                }
                None => return Err(Error::InvalidArg(format!("unknown activation {other:?}"))),
            },
        };
        act.validate()?;
        Ok(act)
    }
}

/// Fully connected layer computing `y = x W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// Weights, one row per input unit.
    pub w: DenseMatrix,
    pub b: Vec<f64>,
}

/// Learnable per-feature normalization with running moments for inference.
/// The running variance is the population form, matching the batch
/// statistic it averages.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub epsilon: f64,
}

impl BatchNormState {
    pub fn new(width: usize) -> Self {
        BatchNormState {
            gamma: vec![1.0; width],
            beta: vec![0.0; width],
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
            epsilon: BN_EPSILON,
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.len()
    }

    pub(crate) fn fold_in_moments(&mut self, moments: RunningMoments) {
        for (r, v) in self.running_mean.iter_mut().zip(moments.mean) {
            *r = (1.0 - BN_EMA) * *r + BN_EMA * v;
        }
        for (r, v) in self.running_var.iter_mut().zip(moments.var) {
            *r = (1.0 - BN_EMA) * *r + BN_EMA * v;
        }
    }
}

/// Batch moments handed back to the model, which folds them into the running
/// statistics after a training forward pass.
#[derive(Debug, Clone)]
pub(crate) struct RunningMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Whether a projection layer's weights train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RpMode {
    /// Weights stay at their initial values; the bias is pinned to zero.
    Fixed,
    /// The nonzero weights and the bias are trained.
    Finetuned,
}

/// Input projection layer. The stored values of `pattern` are the layer
/// weights; finetuned updates change values in place and never touch the
/// sparsity structure.
#[derive(Debug, Clone, PartialEq)]
pub struct RpLayerState {
    pub pattern: CsrMatrix,
    pub bias: Vec<f64>,
    pub mode: RpMode,
    /// Probability that a finetuned layer applies its update on a given
    /// mini-batch.
    pub eta: f64,
}

/// One stage of the model pipeline.
#[derive(Debug, Clone)]
pub enum Layer {
    Dense(DenseLayer),
    BatchNorm(BatchNormState),
    Dropout { keep: f64 },
    Activation(Activation),
    Rp(RpLayerState),
}

/// Intermediates a layer saves during a training forward pass.
#[derive(Debug)]
pub enum LayerCache {
    None,
    BatchNorm { xhat: DenseMatrix, inv_std: Vec<f64> },
    /// Per-element factor: `1/keep` for kept units, `0` for dropped ones.
    Dropout { scale: DenseMatrix },
}

/// Parameter gradients for one layer, aligned with [`Layer`].
#[derive(Debug, Clone)]
pub enum LayerGrads {
    None,
    Dense { dw: DenseMatrix, db: Vec<f64> },
    BatchNorm { dgamma: Vec<f64>, dbeta: Vec<f64> },
    Rp { dvalues: Vec<f64>, dbias: Vec<f64> },
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::BatchNorm(_) => "batch_norm",
            Layer::Dropout { .. } => "dropout",
            Layer::Activation(_) => "activation",
            Layer::Rp(rp) => match rp.mode {
                RpMode::Fixed => "rp_fixed",
                RpMode::Finetuned => "rp_finetuned",
            },
        }
    }

    pub(crate) fn forward(
        &self,
        x: NnInput<'_>,
        ctx: &BatchCtx,
        index: usize,
    ) -> Result<(DenseMatrix, LayerCache, Option<RunningMoments>)> {
        match self {
            Layer::Dense(d) => Ok((dense_forward(d, x)?, LayerCache::None, None)),
            Layer::BatchNorm(bn) => {
                let xd = require_dense(x, "batch normalization")?;
                if ctx.train {
                    let (y, cache, moments) = bn_forward_train(bn, xd)?;
                    Ok((y, cache, Some(moments)))
                } else {
                    Ok((bn_forward_eval(bn, xd)?, LayerCache::None, None))
                }
            }
            Layer::Dropout { keep } => {
                let xd = require_dense(x, "dropout")?;
                if !ctx.train {
                    return Ok((xd.clone(), LayerCache::None, None));
                }
                let key = derive_key(ctx.seed, &[TAG_DROPOUT, index as u64]);
                let (y, scale) = dropout_forward_train(xd, *keep, key);
                Ok((y, LayerCache::Dropout { scale }, None))
            }
            Layer::Activation(act) => {
                let xd = require_dense(x, "activation")?;
                let mut y = xd.clone();
                for v in y.data_mut() {
                    *v = act.apply(*v);
                }
                Ok((y, LayerCache::None, None))
            }
            Layer::Rp(rp) => Ok((rp_forward(rp, x)?, LayerCache::None, None)),
        }
    }

    /// Gradients for this layer's parameters plus, when `need_dx` is set,
    /// the gradient passed on to the previous layer. `y` is this layer's
    /// forward output and `cache` its saved intermediates. A closed
    /// `gate_open` skips the gradient arithmetic of a finetuned projection
    /// layer and yields zeros in its place.
    pub(crate) fn backward(
        &self,
        x: NnInput<'_>,
        y: &DenseMatrix,
        cache: &LayerCache,
        dy: &DenseMatrix,
        need_dx: bool,
        gate_open: bool,
    ) -> Result<(LayerGrads, Option<DenseMatrix>)> {
        match self {
            Layer::Dense(d) => dense_backward(d, x, dy, need_dx),
            Layer::BatchNorm(bn) => {
                let LayerCache::BatchNorm { xhat, inv_std } = cache else {
                    return Err(Error::InvalidArg(
                        "batch normalization backward needs the cache from a training-mode forward pass".into(),
                    ));
                };
                Ok(bn_backward(bn, xhat, inv_std, dy, need_dx))
            }
            Layer::Dropout { .. } => {
                let LayerCache::Dropout { scale } = cache else {
                    return Err(Error::InvalidArg(
                        "dropout backward needs the mask from a training-mode forward pass".into(),
                    ));
                };
                if !need_dx {
                    return Ok((LayerGrads::None, None));
                }
                let mut dx = dy.clone();
                for (v, &s) in dx.data_mut().iter_mut().zip(scale.data()) {
                    *v *= s;
                }
                Ok((LayerGrads::None, Some(dx)))
            }
            Layer::Activation(act) => {
                if !need_dx {
                    return Ok((LayerGrads::None, None));
                }
                let mut dx = dy.clone();
                for (v, &yv) in dx.data_mut().iter_mut().zip(y.data()) {
                    *v *= act.grad_from_output(yv);
                }
                Ok((LayerGrads::None, Some(dx)))
            }
            Layer::Rp(rp) => rp_backward(rp, x, dy, need_dx, gate_open),
        }
    }
}

fn require_dense<'a>(x: NnInput<'a>, what: &str) -> Result<&'a DenseMatrix> {
    match x {
        NnInput::Dense(m) => Ok(m),
        NnInput::Sparse(_) => Err(Error::InvalidArg(format!(
            "{what} layer cannot take sparse input"
        ))),
    }
}

fn add_bias(y: &mut DenseMatrix, b: &[f64]) {
    debug_assert_eq!(y.n_cols(), b.len());
    for r in 0..y.n_rows() {
        for (v, &bv) in y.row_mut(r).iter_mut().zip(b) {
            *v += bv;
        }
    }
}

fn column_sums(m: &DenseMatrix) -> Vec<f64> {
    let mut sums = vec![0.0; m.n_cols()];
    for r in 0..m.n_rows() {
        for (s, &v) in sums.iter_mut().zip(m.row(r)) {
            *s += v;
        }
    }
    sums
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dense_forward(layer: &DenseLayer, x: NnInput<'_>) -> Result<DenseMatrix> {
    let f_in = layer.w.n_rows();
    if x.n_cols() != f_in {
        return Err(Error::DimMismatch(format!(
            "dense layer expects width {f_in}, got {}",
            x.n_cols()
        )));
    }
    let mut y = match x {
        NnInput::Sparse(s) => csr_dense_matmul(s, &layer.w)?,
        NnInput::Dense(m) => dense_times_dense(m, &layer.w),
    };
    add_bias(&mut y, &layer.b);
    Ok(y)
}

fn dense_times_dense(x: &DenseMatrix, w: &DenseMatrix) -> DenseMatrix {
    let mut y = DenseMatrix::zeros(x.n_rows(), w.n_cols());
    for r in 0..x.n_rows() {
        let xr = x.row(r);
        let yr = y.row_mut(r);
        for (i, &xv) in xr.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (yv, &wv) in yr.iter_mut().zip(w.row(i)) {
                *yv += xv * wv;
            }
        }
    }
    y
}

fn dense_backward(
    layer: &DenseLayer,
    x: NnInput<'_>,
    dy: &DenseMatrix,
    need_dx: bool,
) -> Result<(LayerGrads, Option<DenseMatrix>)> {
    let (f_in, f_out) = (layer.w.n_rows(), layer.w.n_cols());
    if dy.n_cols() != f_out || x.n_cols() != f_in || x.n_rows() != dy.n_rows() {
        return Err(Error::DimMismatch("dense backward shapes do not line up".into()));
    }
    let mut dw = DenseMatrix::zeros(f_in, f_out);
    match x {
        NnInput::Sparse(s) => {
            for r in 0..s.n_rows() {
                let (cols, vals) = s.row(r);
                let dyr = dy.row(r);
                for (&i, &xv) in cols.iter().zip(vals) {
                    for (dwv, &gv) in dw.row_mut(i).iter_mut().zip(dyr) {
                        *dwv += xv * gv;
                    }
                }
            }
        }
        NnInput::Dense(m) => {
            for r in 0..m.n_rows() {
                let xr = m.row(r);
                let dyr = dy.row(r);
                for (i, &xv) in xr.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    for (dwv, &gv) in dw.row_mut(i).iter_mut().zip(dyr) {
                        *dwv += xv * gv;
                    }
                }
            }
        }
    }
    let db = column_sums(dy);
    let dx = if need_dx {
        let mut dx = DenseMatrix::zeros(dy.n_rows(), f_in);
        for r in 0..dy.n_rows() {
            let dyr = dy.row(r);
            let dxr = dx.row_mut(r);
            for (i, slot) in dxr.iter_mut().enumerate() {
                *slot = dot(dyr, layer.w.row(i));
            }
        }
        Some(dx)
    } else {
        None
    };
    Ok((LayerGrads::Dense { dw, db }, dx))
}

fn bn_forward_train(
    bn: &BatchNormState,
    x: &DenseMatrix,
) -> Result<(DenseMatrix, LayerCache, RunningMoments)> {
    let (m, w) = (x.n_rows(), x.n_cols());
    if w != bn.width() {
        return Err(Error::DimMismatch(format!(
            "batch normalization expects width {}, got {w}",
            bn.width()
        )));
    }
    if m < 2 {
        return Err(Error::InvalidArg(format!(
            "batch normalization needs at least 2 rows per training batch, got {m}"
        )));
    }
    let mf = m as f64;
    let mut mean = vec![0.0; w];
    for r in 0..m {
        for (s, &v) in mean.iter_mut().zip(x.row(r)) {
            *s += v;
        }
    }
    for s in &mut mean {
        *s /= mf;
    }
    let mut var = vec![0.0; w];
    for r in 0..m {
        for ((s, &v), &mu) in var.iter_mut().zip(x.row(r)).zip(&mean) {
            let d = v - mu;
            *s += d * d;
        }
    }
    for s in &mut var {
        *s /= mf;
    }
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + bn.epsilon).sqrt()).collect();
    let mut xhat = DenseMatrix::zeros(m, w);
    let mut y = DenseMatrix::zeros(m, w);
    for r in 0..m {
        let xr = x.row(r);
        let hr = xhat.row_mut(r);
        for j in 0..w {
            hr[j] = (xr[j] - mean[j]) * inv_std[j];
        }
        let yr = y.row_mut(r);
        for j in 0..w {
            yr[j] = bn.gamma[j] * hr[j] + bn.beta[j];
        }
    }
    Ok((y, LayerCache::BatchNorm { xhat, inv_std }, RunningMoments { mean, var }))
}

fn bn_forward_eval(bn: &BatchNormState, x: &DenseMatrix) -> Result<DenseMatrix> {
    let w = x.n_cols();
    if w != bn.width() {
        return Err(Error::DimMismatch(format!(
            "batch normalization expects width {}, got {w}",
            bn.width()
        )));
    }
    let scale: Vec<f64> = bn
        .gamma
        .iter()
        .zip(&bn.running_var)
        .map(|(&g, &v)| g / (v + bn.epsilon).sqrt())
        .collect();
    let mut y = DenseMatrix::zeros(x.n_rows(), w);
    for r in 0..x.n_rows() {
        let xr = x.row(r);
        let yr = y.row_mut(r);
        for j in 0..w {
            yr[j] = scale[j] * (xr[j] - bn.running_mean[j]) + bn.beta[j];
        }
    }
    Ok(y)
}

fn bn_backward(
    bn: &BatchNormState,
    xhat: &DenseMatrix,
    inv_std: &[f64],
    dy: &DenseMatrix,
    need_dx: bool,
) -> (LayerGrads, Option<DenseMatrix>) {
    let (m, w) = (dy.n_rows(), dy.n_cols());
    let mf = m as f64;
    let mut dbeta = vec![0.0; w];
    let mut dgamma = vec![0.0; w];
    for r in 0..m {
        let dyr = dy.row(r);
        let hr = xhat.row(r);
        for j in 0..w {
            dbeta[j] += dyr[j];
            dgamma[j] += dyr[j] * hr[j];
        }
    }
    let dx = if need_dx {
        let mut dx = DenseMatrix::zeros(m, w);
        for r in 0..m {
            let dyr = dy.row(r);
            let hr = xhat.row(r);
            let dxr = dx.row_mut(r);
            for j in 0..w {
                dxr[j] = bn.gamma[j]
                    * inv_std[j]
                    * (dyr[j] - dbeta[j] / mf - hr[j] * dgamma[j] / mf);
            }
        }
        Some(dx)
    } else {
        None
    };
    (LayerGrads::BatchNorm { dgamma, dbeta }, dx)
}

fn dropout_forward_train(x: &DenseMatrix, keep: f64, key: u64) -> (DenseMatrix, DenseMatrix) {
    let mut stream = RngStream::from_key(key);
    let inv = 1.0 / keep;
    let mut scale = DenseMatrix::zeros(x.n_rows(), x.n_cols());
    for v in scale.data_mut() {
        *v = if stream.next_bool(keep) { inv } else { 0.0 };
    }
    let mut y = x.clone();
    for (yv, &sv) in y.data_mut().iter_mut().zip(scale.data()) {
        *yv *= sv;
    }
    (y, scale)
}

fn rp_forward(rp: &RpLayerState, x: NnInput<'_>) -> Result<DenseMatrix> {
    let d = rp.pattern.n_rows();
    let k = rp.pattern.n_cols();
    let mut y = match x {
        NnInput::Sparse(s) => {
            if s.n_cols() != d {
                return Err(Error::DimMismatch(format!(
                    "projection layer expects width {d}, got {}",
                    s.n_cols()
                )));
            }
            csr_csr_matmul_dense(s, &rp.pattern)?
        }
        NnInput::Dense(m) => {
            if m.n_cols() == d {
                dense_times_csr(m, &rp.pattern)
            } else if m.n_cols() == k && rp.mode == RpMode::Fixed {
                // Width k marks input that was already projected; raw width
                // takes priority when d == k.
                m.clone()
            } else if m.n_cols() == k {
                return Err(Error::InvalidArg(
                    "finetuned projection layer requires raw input, not pre-projected data".into(),
                ));
            } else {
                return Err(Error::DimMismatch(format!(
                    "projection layer expects width {d} (or {k} pre-projected), got {}",
                    m.n_cols()
                )));
            }
        }
    };
    add_bias(&mut y, &rp.bias);
    Ok(y)
}

fn dense_times_csr(x: &DenseMatrix, p: &CsrMatrix) -> DenseMatrix {
    let mut y = DenseMatrix::zeros(x.n_rows(), p.n_cols());
    for r in 0..x.n_rows() {
        let xr = x.row(r);
        let yr = y.row_mut(r);
        for (i, &xv) in xr.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let (cols, vals) = p.row(i);
            for (&j, &pv) in cols.iter().zip(vals) {
                yr[j] += xv * pv;
            }
        }
    }
    y
}

fn rp_backward(
    rp: &RpLayerState,
    x: NnInput<'_>,
    dy: &DenseMatrix,
    need_dx: bool,
    gate_open: bool,
) -> Result<(LayerGrads, Option<DenseMatrix>)> {
    let d = rp.pattern.n_rows();
    let k = rp.pattern.n_cols();
    if dy.n_cols() != k || x.n_rows() != dy.n_rows() {
        return Err(Error::DimMismatch("projection backward shapes do not line up".into()));
    }
    let grads = match rp.mode {
        RpMode::Fixed => LayerGrads::None,
        RpMode::Finetuned => {
            let mut dvalues = vec![0.0; rp.pattern.nnz()];
            let mut dbias = vec![0.0; k];
            if gate_open {
                if x.n_cols() != d {
                    return Err(Error::DimMismatch(format!(
                        "finetuned projection backward expects width {d}, got {}",
                        x.n_cols()
                    )));
                }
                let offsets = rp.pattern.row_offsets();
                let cols = rp.pattern.col_indices();
                match x {
                    NnInput::Sparse(s) => {
                        for r in 0..s.n_rows() {
                            let (xcols, xvals) = s.row(r);
                            let dyr = dy.row(r);
                            for (&i, &xv) in xcols.iter().zip(xvals) {
                                for e in offsets[i]..offsets[i + 1] {
                                    dvalues[e] += xv * dyr[cols[e]];
                                }
                            }
                        }
                    }
                    NnInput::Dense(m) => {
                        for r in 0..m.n_rows() {
                            let xr = m.row(r);
                            let dyr = dy.row(r);
                            for (i, &xv) in xr.iter().enumerate() {
                                if xv == 0.0 {
                                    continue;
                                }
                                for e in offsets[i]..offsets[i + 1] {
                                    dvalues[e] += xv * dyr[cols[e]];
                                }
                            }
                        }
                    }
                }
                dbias = column_sums(dy);
            }
            LayerGrads::Rp { dvalues, dbias }
        }
    };
    let dx = if need_dx {
        let mut dx = DenseMatrix::zeros(dy.n_rows(), d);
        for r in 0..dy.n_rows() {
            let dyr = dy.row(r);
            let dxr = dx.row_mut(r);
            for (i, slot) in dxr.iter_mut().enumerate() {
                let (cols, vals) = rp.pattern.row(i);
                *slot = cols.iter().zip(vals).map(|(&j, &v)| dyr[j] * v).sum();
            }
        }
        Some(dx)
    } else {
        None
    };
    Ok((grads, dx))
}
