//! Feed-forward networks whose first stage can be a sparse projection layer,
//! either held fixed or finetuned under a per-batch update probability.
//!
//! A [`Model`] is a pipeline of [`Layer`] values built from declarative
//! [`LayerSpec`] entries. Training lives in [`train`], losses in [`loss`],
//! weight initialization in [`init_weights`], and serialization in
//! [`save_checkpoint`] / [`load_checkpoint`].

mod checkpoint;
mod init;
mod layer;
mod loss;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use init::{init_weights, InitScheme, DEFAULT_CS_INIT_SCALE};
pub use layer::{
    Activation, BatchNormState, DenseLayer, Layer, LayerCache, LayerGrads, RpLayerState, RpMode,
    BN_EMA, BN_EPSILON, DEFAULT_LRELU_SLOPE,
};
pub use loss::{loss, LossKind};
pub use train::{
    apply_gradients, eval_error, rp_layer_step, sgd_momentum_step, train, EpochStats, History,
    TrainConfig, TrainerState, Velocity,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derive_key;
use crate::schemes::{generate, RpSchemeSpec, RpStorage};
use crate::sparse::{CsrMatrix, DenseMatrix};

/// Stream tag for dense weight initialization, combined with the model seed
/// and the layer index.
const TAG_INIT: u64 = 0x494E4954;

/// Borrowed mini-batch handed to the model; the first layer decides which
/// representations it accepts.
#[derive(Debug, Clone, Copy)]
pub enum NnInput<'a> {
    Sparse(&'a CsrMatrix),
    Dense(&'a DenseMatrix),
}

impl NnInput<'_> {
    pub fn n_rows(&self) -> usize {
        match self {
            NnInput::Sparse(m) => m.n_rows(),
            NnInput::Dense(m) => m.n_rows(),
        }
    }

    pub fn n_cols(&self) -> usize {
        match self {
            NnInput::Sparse(m) => m.n_cols(),
            NnInput::Dense(m) => m.n_cols(),
        }
    }
}

impl<'a> From<&'a CsrMatrix> for NnInput<'a> {
    fn from(m: &'a CsrMatrix) -> Self {
        NnInput::Sparse(m)
    }
}

impl<'a> From<&'a DenseMatrix> for NnInput<'a> {
    fn from(m: &'a DenseMatrix) -> Self {
        NnInput::Dense(m)
    }
}

/// Mode and randomness context for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct BatchCtx {
    /// Training mode: batch statistics feed normalization, dropout masks
    /// apply, and layer caches are filled for the backward pass.
    pub train: bool,
    /// Seed for per-batch randomness such as dropout masks.
    pub seed: u64,
}

impl BatchCtx {
    pub fn training(seed: u64) -> Self {
        BatchCtx { train: true, seed }
    }

    pub fn inference() -> Self {
        BatchCtx { train: false, seed: 0 }
    }
}

/// Declarative description of one layer, resolved by [`Model::build`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "layer", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Projection layer whose weights stay fixed.
    RpFixed { spec: RpSchemeSpec },
    /// Projection layer whose stored weights and bias train; `eta` is the
    /// probability that a given mini-batch updates them.
    RpFinetuned { spec: RpSchemeSpec, eta: f64 },
    Dense { f_in: usize, f_out: usize, init: InitScheme },
    BatchNorm { width: usize },
    Activation { act: Activation },
    Dropout { keep: f64 },
}

/// Outputs and caches of one forward pass, consumed by the backward pass.
#[derive(Debug)]
pub struct Forwarded {
    pub(crate) activations: Vec<DenseMatrix>,
    pub(crate) caches: Vec<LayerCache>,
    pub(crate) train: bool,
}

impl Forwarded {
    /// Output of the last layer.
    pub fn output(&self) -> &DenseMatrix {
        self.activations.last().expect("a validated model has at least one layer")
    }
}

/// Parameter gradients for every layer of a model.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub(crate) per_layer: Vec<LayerGrads>,
}

impl Gradients {
    pub fn per_layer(&self) -> &[LayerGrads] {
        &self.per_layer
    }

    /// Gradients flattened in the order of [`Model::params_flat`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.per_layer {
            match g {
                LayerGrads::None => {}
                LayerGrads::Dense { dw, db } => {
                    out.extend_from_slice(dw.data());
                    out.extend_from_slice(db);
                }
                LayerGrads::BatchNorm { dgamma, dbeta } => {
                    out.extend_from_slice(dgamma);
                    out.extend_from_slice(dbeta);
                }
                LayerGrads::Rp { dvalues, dbias } => {
                    out.extend_from_slice(dvalues);
                    out.extend_from_slice(dbias);
                }
            }
        }
        out
    }
}

/// A feed-forward network: an ordered pipeline of layers.
#[derive(Debug, Clone)]
pub struct Model {
    layers: Vec<Layer>,
}

impl Model {
    /// Resolves layer specs into a concrete model. Dense weights draw from
    /// a stream keyed by `seed` and the layer position; projection layers
    /// are generated from their own spec, so they reproduce the matrix any
    /// other consumer of that spec sees.
    pub fn build(specs: &[LayerSpec], seed: u64) -> Result<Model> {
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let layer = match spec {
                LayerSpec::RpFixed { spec } => build_rp(spec, RpMode::Fixed, 1.0)?,
                LayerSpec::RpFinetuned { spec, eta } => {
                    build_rp(spec, RpMode::Finetuned, *eta)?
                }
                LayerSpec::Dense { f_in, f_out, init } => {
                    let key = derive_key(seed, &[TAG_INIT, i as u64]);
                    let w = init_weights(*f_in, *f_out, *init, key)?;
                    Layer::Dense(DenseLayer { w, b: vec![0.0; *f_out] })
                }
                LayerSpec::BatchNorm { width } => {
                    if *width == 0 {
                        return Err(Error::InvalidArg(
                            "batch normalization width must be positive".into(),
                        ));
                    }
                    Layer::BatchNorm(BatchNormState::new(*width))
                }
                LayerSpec::Activation { act } => {
                    act.validate()?;
                    Layer::Activation(*act)
                }
                LayerSpec::Dropout { keep } => {
                    validate_keep(*keep)?;
                    Layer::Dropout { keep: *keep }
                }
            };
            layers.push(layer);
        }
        Model::from_layers(layers)
    }

    /// Wraps prebuilt layers after validating each one and the width chain
    /// between consecutive layers.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Model> {
        validate_layers(&layers)?;
        Ok(Model { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable layer access for custom update loops built on
    /// [`apply_gradients`](crate::nn::apply_gradients) or
    /// [`rp_layer_step`](crate::nn::rp_layer_step).
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Width the first width-constrained layer expects, if any.
    pub fn input_width(&self) -> Option<usize> {
        self.layers.iter().find_map(layer_width_in)
    }

    /// Width the last width-constrained layer produces, if any.
    pub fn output_width(&self) -> Option<usize> {
        self.layers.iter().rev().find_map(layer_width_out)
    }

    /// Runs the pipeline, keeping every activation and cache. In training
    /// mode this also folds batch moments into normalization layers'
    /// running statistics.
    pub fn forward(&mut self, input: NnInput<'_>, ctx: &BatchCtx) -> Result<Forwarded> {
        let n = self.layers.len();
        let mut activations: Vec<DenseMatrix> = Vec::with_capacity(n);
        let mut caches = Vec::with_capacity(n);
        for i in 0..n {
            let x = match activations.last() {
                Some(prev) => NnInput::Dense(prev),
                None => input,
            };
            let (y, cache, moments) = self.layers[i].forward(x, ctx, i)?;
            ensure_finite(&y, i, self.layers[i].name())?;
            if let Some(m) = moments {
                if let Layer::BatchNorm(bn) = &mut self.layers[i] {
                    bn.fold_in_moments(m);
                }
            }
            activations.push(y);
            caches.push(cache);
        }
        Ok(Forwarded { activations, caches, train: ctx.train })
    }

    /// Inference pass keeping only the final output. Running statistics
    /// stand in for batch moments and dropout is inactive.
    pub fn predict(&self, input: NnInput<'_>) -> Result<DenseMatrix> {
        let ctx = BatchCtx::inference();
        let (mut y, _, _) = self.layers[0].forward(input, &ctx, 0)?;
        ensure_finite(&y, 0, self.layers[0].name())?;
        for i in 1..self.layers.len() {
            let (next, _, _) = self.layers[i].forward(NnInput::Dense(&y), &ctx, i)?;
            ensure_finite(&next, i, self.layers[i].name())?;
            y = next;
        }
        Ok(y)
    }

    /// Backpropagates `output_grad` through the recorded forward pass with
    /// every finetuned projection layer's gate open.
    pub fn backward(
        &self,
        input: NnInput<'_>,
        fwd: &Forwarded,
        output_grad: &DenseMatrix,
    ) -> Result<Gradients> {
        let gates = vec![true; self.layers.len()];
        self.backward_gated(input, fwd, output_grad, &gates)
    }

    /// Backpropagation with per-layer gates. A closed gate makes a
    /// finetuned projection layer produce zero parameter gradients while
    /// the signal still flows through it; gates on other layers are
    /// ignored.
    pub fn backward_gated(
        &self,
        input: NnInput<'_>,
        fwd: &Forwarded,
        output_grad: &DenseMatrix,
        gates: &[bool],
    ) -> Result<Gradients> {
        if !fwd.train {
            return Err(Error::InvalidArg(
                "backward pass needs activations from a training-mode forward pass".into(),
            ));
        }
        let n = self.layers.len();
        if fwd.activations.len() != n || gates.len() != n {
            return Err(Error::InvalidArg(format!(
                "forward pass covers {} layers and {} gates given, model has {n}",
                fwd.activations.len(),
                gates.len()
            )));
        }
        let mut per_layer: Vec<LayerGrads> = Vec::with_capacity(n);
        let mut delta = output_grad.clone();
        for i in (0..n).rev() {
            let x = if i == 0 { input } else { NnInput::Dense(&fwd.activations[i - 1]) };
            let (grads, dx) = self.layers[i].backward(
                x,
                &fwd.activations[i],
                &fwd.caches[i],
                &delta,
                i > 0,
                gates[i],
            )?;
            per_layer.push(grads);
            if let Some(dx) = dx {
                delta = dx;
            }
        }
        per_layer.reverse();
        Ok(Gradients { per_layer })
    }

    /// Number of trainable scalars: dense weights and biases,
    /// normalization scale and shift, and the stored values and bias of
    /// finetuned projection layers.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|layer| match layer {
                Layer::Dense(d) => d.w.n_rows() * d.w.n_cols() + d.b.len(),
                Layer::BatchNorm(bn) => 2 * bn.width(),
                Layer::Rp(rp) if rp.mode == RpMode::Finetuned => {
                    rp.pattern.nnz() + rp.bias.len()
                }
                _ => 0,
            })
            .sum()
    }

    /// Trainable parameters flattened layer by layer: dense weights
    /// row-major then bias, normalization scale then shift, projection
    /// stored values then bias.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            match layer {
                Layer::Dense(d) => {
                    out.extend_from_slice(d.w.data());
                    out.extend_from_slice(&d.b);
                }
                Layer::BatchNorm(bn) => {
                    out.extend_from_slice(&bn.gamma);
                    out.extend_from_slice(&bn.beta);
                }
                Layer::Rp(rp) if rp.mode == RpMode::Finetuned => {
                    out.extend_from_slice(rp.pattern.values());
                    out.extend_from_slice(&rp.bias);
                }
                _ => {}
            }
        }
        out
    }

    /// Writes back parameters in the order of [`Self::params_flat`].
    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::DimMismatch(format!(
                "{} parameters given, model has {}",
                params.len(),
                self.param_count()
            )));
        }
        let mut at = 0;
        let mut take = |n: usize| {
            let s = &params[at..at + n];
            at += n;
            s
        };
        for layer in &mut self.layers {
            match layer {
                Layer::Dense(d) => {
                    let nw = d.w.n_rows() * d.w.n_cols();
                    d.w.data_mut().copy_from_slice(take(nw));
                    let nb = d.b.len();
                    d.b.copy_from_slice(take(nb));
                }
                Layer::BatchNorm(bn) => {
                    let w = bn.width();
                    bn.gamma.copy_from_slice(take(w));
                    bn.beta.copy_from_slice(take(w));
                }
                Layer::Rp(rp) if rp.mode == RpMode::Finetuned => {
                    let nv = rp.pattern.nnz();
                    rp.pattern.values_mut().copy_from_slice(take(nv));
                    let nb = rp.bias.len();
                    rp.bias.copy_from_slice(take(nb));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

fn build_rp(spec: &RpSchemeSpec, mode: RpMode, eta: f64) -> Result<Layer> {
    spec.validate()?;
    validate_eta(eta)?;
    let m = generate(spec)?;
    let pattern = match m.storage {
        RpStorage::Sparse(s) => s,
        RpStorage::Dense(d) => CsrMatrix::from_dense(&d),
    };
    Ok(Layer::Rp(RpLayerState { pattern, bias: vec![0.0; spec.k], mode, eta }))
}

pub(crate) fn validate_eta(eta: f64) -> Result<()> {
    if !eta.is_finite() || eta <= 0.0 || eta > 1.0 {
        return Err(Error::InvalidArg(format!(
            "update probability {eta} outside (0, 1]"
        )));
    }
    Ok(())
}

fn validate_keep(keep: f64) -> Result<()> {
    if !keep.is_finite() || keep <= 0.0 || keep > 1.0 {
        return Err(Error::InvalidArg(format!(
            "dropout keep probability {keep} outside (0, 1]"
        )));
    }
    Ok(())
}

fn layer_width_in(layer: &Layer) -> Option<usize> {
    match layer {
        Layer::Dense(d) => Some(d.w.n_rows()),
        Layer::BatchNorm(bn) => Some(bn.width()),
        Layer::Rp(rp) => Some(rp.pattern.n_rows()),
        Layer::Dropout { .. } | Layer::Activation(_) => None,
    }
}

fn layer_width_out(layer: &Layer) -> Option<usize> {
    match layer {
        Layer::Dense(d) => Some(d.w.n_cols()),
        Layer::BatchNorm(bn) => Some(bn.width()),
        Layer::Rp(rp) => Some(rp.pattern.n_cols()),
        Layer::Dropout { .. } | Layer::Activation(_) => None,
    }
}

fn validate_layers(layers: &[Layer]) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::InvalidArg("model needs at least one layer".into()));
    }
    for (i, layer) in layers.iter().enumerate() {
        match layer {
            Layer::Dense(d) => {
                if d.w.n_rows() == 0 || d.w.n_cols() == 0 {
                    return Err(Error::InvalidArg(format!(
                        "layer {i} (dense) has an empty weight matrix"
                    )));
                }
                if d.b.len() != d.w.n_cols() {
                    return Err(Error::DimMismatch(format!(
                        "layer {i} (dense) has {} bias entries for {} outputs",
                        d.b.len(),
                        d.w.n_cols()
                    )));
                }
            }
            Layer::BatchNorm(bn) => {
                let w = bn.width();
                if w == 0 {
                    return Err(Error::InvalidArg(format!(
                        "layer {i} (batch_norm) has zero width"
                    )));
                }
                if bn.beta.len() != w
                    || bn.running_mean.len() != w
                    || bn.running_var.len() != w
                {
                    return Err(Error::DimMismatch(format!(
                        "layer {i} (batch_norm) has inconsistent parameter lengths"
                    )));
                }
                if !bn.epsilon.is_finite() || bn.epsilon <= 0.0 {
                    return Err(Error::InvalidArg(format!(
                        "layer {i} (batch_norm) epsilon must be positive"
                    )));
                }
            }
            Layer::Dropout { keep } => validate_keep(*keep)?,
            Layer::Activation(act) => act.validate()?,
            Layer::Rp(rp) => {
                if rp.bias.len() != rp.pattern.n_cols() {
                    return Err(Error::DimMismatch(format!(
                        "layer {i} ({}) has {} bias entries for {} outputs",
                        layer.name(),
                        rp.bias.len(),
                        rp.pattern.n_cols()
                    )));
                }
                validate_eta(rp.eta)?;
            }
        }
    }
    let mut have: Option<usize> = None;
    for (i, layer) in layers.iter().enumerate() {
        if let (Some(h), Some(need)) = (have, layer_width_in(layer)) {
            if h != need {
                return Err(Error::DimMismatch(format!(
                    "layer {i} ({}) expects width {need} but the previous layer produces {h}",
                    layer.name()
                )));
            }
        }
        if let Some(out) = layer_width_out(layer) {
            have = Some(out);
        }
    }
    Ok(())
}

fn ensure_finite(m: &DenseMatrix, index: usize, name: &str) -> Result<()> {
    if m.data().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "non-finite activation leaving layer {index} ({name})"
        )))
    }
}
