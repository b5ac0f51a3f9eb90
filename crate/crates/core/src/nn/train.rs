//! Mini-batch gradient descent with momentum, learning-rate decay, and
//! probabilistic update gating for finetuned projection layers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_key, RngStream};
use crate::sparse::{CsrMatrix, DenseMatrix, LabeledDataset};

use super::layer::{Layer, LayerGrads, RpLayerState, RpMode};
use super::{loss, validate_eta, BatchCtx, Gradients, LossKind, Model, NnInput};

/// Stream tag for per-epoch row shuffles, combined with the training seed.
const TAG_SHUFFLE: u64 = 0x53485546;

/// Stream tag for per-batch randomness such as dropout, combined with the
/// training seed, epoch, and batch index.
const TAG_BATCH: u64 = 0x42544348;

/// Stream tag for projection update gates, combined with the batch seed and
/// the layer index.
const TAG_GATE: u64 = 0x47415445;

/// Hyperparameters for [`train`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Learning rate at epoch 0.
    pub lr0: f64,
    /// Multiplicative decay applied per epoch; 1 keeps the rate constant.
    pub lr_decay: f64,
    /// Momentum at epoch 0.
    pub momentum0: f64,
    /// Momentum after the ramp completes.
    pub momentum_max: f64,
    /// Epochs over which momentum climbs linearly to its maximum.
    pub momentum_ramp_epochs: usize,
    /// Weight decay coefficient; applies to weights, never to biases or
    /// normalization parameters.
    pub l2: f64,
    pub batch_size: usize,
    /// Total epochs; a resumed run continues up to this count.
    pub epochs: usize,
    /// Root seed for shuffles, dropout masks, and update gates.
    pub seed: u64,
    /// When set, overrides the update probability of every finetuned
    /// projection layer in the model.
    pub eta: Option<f64>,
}

impl TrainConfig {
    /// Defaults: learning rate decays by 0.2% per epoch, momentum ramps
    /// from 0.5 to 0.9 over the first tenth of training, no weight decay.
    pub fn new(lr0: f64, batch_size: usize, epochs: usize, seed: u64) -> Self {
        TrainConfig {
            lr0,
            lr_decay: 0.998,
            momentum0: 0.5,
            momentum_max: 0.9,
            momentum_ramp_epochs: (epochs / 10).max(1),
            l2: 0.0,
            batch_size,
            epochs,
            seed,
            eta: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lr0.is_finite() || self.lr0 < 0.0 {
            return Err(Error::InvalidArg(format!(
                "learning rate {} must be finite and non-negative",
                self.lr0
            )));
        }
        if !self.lr_decay.is_finite() || self.lr_decay <= 0.0 || self.lr_decay > 1.0 {
            return Err(Error::InvalidArg(format!(
                "learning rate decay {} outside (0, 1]",
                self.lr_decay
            )));
        }
        if !self.momentum0.is_finite()
            || !self.momentum_max.is_finite()
            || self.momentum0 < 0.0
            || self.momentum0 > self.momentum_max
            || self.momentum_max >= 1.0
        {
            return Err(Error::InvalidArg(format!(
                "momentum range {} to {} must satisfy 0 <= start <= max < 1",
                self.momentum0, self.momentum_max
            )));
        }
        if self.momentum_ramp_epochs == 0 {
            return Err(Error::InvalidArg("momentum ramp needs at least one epoch".into()));
        }
        if !self.l2.is_finite() || self.l2 < 0.0 {
            return Err(Error::InvalidArg(format!(
                "weight decay {} must be finite and non-negative",
                self.l2
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArg("batch size must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidArg("epoch count must be positive".into()));
        }
        if let Some(eta) = self.eta {
            validate_eta(eta)?;
        }
        Ok(())
    }

    /// Learning rate for the given epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_decay.powi(epoch as i32)
    }

    /// Momentum for the given epoch.
    pub fn momentum_at(&self, epoch: usize) -> f64 {
        let ramp = self.momentum_ramp_epochs as f64;
        let mu = self.momentum0 + epoch as f64 * (self.momentum_max - self.momentum0) / ramp;
        mu.min(self.momentum_max)
    }
}

/// Momentum buffers for one layer, aligned with [`Layer`].
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum LayerVelocity {
    None,
    Dense { w: Vec<f64>, b: Vec<f64> },
    BatchNorm { gamma: Vec<f64>, beta: Vec<f64> },
    Rp { values: Vec<f64>, bias: Vec<f64> },
}

/// Momentum buffers for every layer of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Velocity {
    pub(crate) per_layer: Vec<LayerVelocity>,
}

impl Velocity {
    pub fn zeros_for(model: &Model) -> Velocity {
        let per_layer = model
            .layers()
            .iter()
            .map(|layer| match layer {
                Layer::Dense(d) => LayerVelocity::Dense {
                    w: vec![0.0; d.w.n_rows() * d.w.n_cols()],
                    b: vec![0.0; d.b.len()],
                },
                Layer::BatchNorm(bn) => LayerVelocity::BatchNorm {
                    gamma: vec![0.0; bn.width()],
                    beta: vec![0.0; bn.width()],
                },
                Layer::Rp(rp) if rp.mode == RpMode::Finetuned => LayerVelocity::Rp {
                    values: vec![0.0; rp.pattern.nnz()],
                    bias: vec![0.0; rp.bias.len()],
                },
                _ => LayerVelocity::None,
            })
            .collect();
        Velocity { per_layer }
    }

    /// Whether the buffer shapes line up with the model's layers.
    pub(crate) fn matches(&self, model: &Model) -> bool {
        if self.per_layer.len() != model.layers().len() {
            return false;
        }
        self.per_layer.iter().zip(model.layers()).all(|(v, layer)| match (v, layer) {
            (LayerVelocity::Dense { w, b }, Layer::Dense(d)) => {
                w.len() == d.w.n_rows() * d.w.n_cols() && b.len() == d.b.len()
            }
            (LayerVelocity::BatchNorm { gamma, beta }, Layer::BatchNorm(bn)) => {
                gamma.len() == bn.width() && beta.len() == bn.width()
            }
            (LayerVelocity::Rp { values, bias }, Layer::Rp(rp)) => {
                rp.mode == RpMode::Finetuned
                    && values.len() == rp.pattern.nnz()
                    && bias.len() == rp.bias.len()
            }
            (LayerVelocity::None, Layer::Rp(rp)) => rp.mode == RpMode::Fixed,
            (LayerVelocity::None, Layer::Dropout { .. } | Layer::Activation(_)) => true,
            _ => false,
        })
    }
}

/// Optimizer state carried across [`train`] calls to resume a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    /// First epoch the next call should run.
    pub next_epoch: usize,
    pub velocity: Velocity,
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean loss over all training examples of the epoch.
    pub train_loss: f64,
    /// Misclassification rate on the evaluation set, if one was given.
    pub eval_error: Option<f64>,
    pub lr: f64,
    pub momentum: f64,
}

/// Record of a training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochStats>,
    /// Epoch with the lowest evaluation error, or lowest training loss when
    /// no evaluation set was given; ties keep the earliest epoch.
    pub best_epoch: Option<usize>,
}

impl History {
    pub fn best(&self) -> Option<&EpochStats> {
        self.best_epoch.and_then(|e| self.epochs.iter().find(|s| s.epoch == e))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,eval_error,lr,momentum\n");
        for s in &self.epochs {
            let eval = s.eval_error.map(|e| e.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                s.epoch, s.train_loss, eval, s.lr, s.momentum
            ));
        }
        out
    }
}

/// One momentum update over a flat parameter slice:
/// `v = mu * v - lr * (g + l2 * p)` followed by `p += v`. All three slices
/// must have the same length.
pub fn sgd_momentum_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    mu: f64,
    l2: f64,
) {
    assert_eq!(params.len(), grads.len(), "parameter and gradient lengths differ");
    assert_eq!(params.len(), velocity.len(), "parameter and velocity lengths differ");
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = mu * *v - lr * (g + l2 * *p);
        *p += *v;
    }
}

/// Applies one optimizer step to every layer. Weight decay touches dense
/// weights and projection values only, never biases or normalization
/// parameters. A closed gate skips a finetuned projection layer entirely,
/// leaving its velocity frozen; gates on other layers are ignored.
pub fn apply_gradients(
    model: &mut Model,
    grads: &Gradients,
    velocity: &mut Velocity,
    lr: f64,
    mu: f64,
    l2: f64,
    gates: &[bool],
) -> Result<()> {
    let n = model.layers().len();
    if grads.per_layer.len() != n || velocity.per_layer.len() != n || gates.len() != n {
        return Err(Error::InvalidArg(
            "gradient, velocity, or gate lists do not match the model".into(),
        ));
    }
    let layers = model.layers_mut();
    for (i, ((layer, g), v)) in
        layers.iter_mut().zip(&grads.per_layer).zip(velocity.per_layer.iter_mut()).enumerate()
    {
        match (layer, g, v) {
            (
                Layer::Dense(d),
                LayerGrads::Dense { dw, db },
                LayerVelocity::Dense { w: vw, b: vb },
            ) if dw.data().len() == d.w.data().len()
                && db.len() == d.b.len()
                && vw.len() == dw.data().len()
                && vb.len() == db.len() =>
            {
                sgd_momentum_step(d.w.data_mut(), dw.data(), vw, lr, mu, l2);
                sgd_momentum_step(&mut d.b, db, vb, lr, mu, 0.0);
            }
            (
                Layer::BatchNorm(bn),
                LayerGrads::BatchNorm { dgamma, dbeta },
                LayerVelocity::BatchNorm { gamma: vg, beta: vb },
            ) if dgamma.len() == bn.gamma.len()
                && dbeta.len() == bn.beta.len()
                && vg.len() == dgamma.len()
                && vb.len() == dbeta.len() =>
            {
                sgd_momentum_step(&mut bn.gamma, dgamma, vg, lr, mu, 0.0);
                sgd_momentum_step(&mut bn.beta, dbeta, vb, lr, mu, 0.0);
            }
            (
                Layer::Rp(rp),
                LayerGrads::Rp { dvalues, dbias },
                LayerVelocity::Rp { values: vv, bias: vb },
            ) if rp.mode == RpMode::Finetuned
                && dvalues.len() == rp.pattern.nnz()
                && dbias.len() == rp.bias.len()
                && vv.len() == dvalues.len()
                && vb.len() == dbias.len() =>
            {
                if gates[i] {
                    sgd_momentum_step(rp.pattern.values_mut(), dvalues, vv, lr, mu, l2);
                    sgd_momentum_step(&mut rp.bias, dbias, vb, lr, mu, 0.0);
                }
            }
            (Layer::Dropout { .. } | Layer::Activation(_), LayerGrads::None, LayerVelocity::None) => {}
            (Layer::Rp(rp), LayerGrads::None, LayerVelocity::None)
                if rp.mode == RpMode::Fixed => {}
            _ => {
                return Err(Error::InvalidArg(format!(
                    "layer {i} gradient or velocity structure does not match the model"
                )));
            }
        }
    }
    Ok(())
}

/// One gated update for a single finetuned projection layer. Draws the gate
/// from `gate_rng` with the layer's update probability; a closed gate
/// leaves weights, bias, and velocities untouched. Returns whether the
/// update applied.
pub fn rp_layer_step(
    state: &mut RpLayerState,
    dvalues: &[f64],
    dbias: &[f64],
    values_velocity: &mut [f64],
    bias_velocity: &mut [f64],
    lr: f64,
    mu: f64,
    l2: f64,
    gate_rng: &mut RngStream,
) -> Result<bool> {
    if state.mode != RpMode::Finetuned {
        return Err(Error::InvalidArg(
            "only a finetuned projection layer takes updates".into(),
        ));
    }
    if dvalues.len() != state.pattern.nnz()
        || dbias.len() != state.bias.len()
        || values_velocity.len() != dvalues.len()
        || bias_velocity.len() != dbias.len()
    {
        return Err(Error::DimMismatch("projection update shapes do not line up".into()));
    }
    if !gate_rng.next_bool(state.eta) {
        return Ok(false);
    }
    sgd_momentum_step(state.pattern.values_mut(), dvalues, values_velocity, lr, mu, l2);
    sgd_momentum_step(&mut state.bias, dbias, bias_velocity, lr, mu, 0.0);
    Ok(true)
}

/// Misclassification rate of `model` on `data`, evaluated in chunks of
/// `batch_size` rows. A single output column thresholds at 0.5; wider
/// outputs pick the column with the largest value, the first one on ties.
pub fn eval_error(model: &Model, data: &LabeledDataset, batch_size: usize) -> Result<f64> {
    let n = data.features.n_rows();
    if n == 0 {
        return Err(Error::InvalidArg("evaluation set is empty".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArg("batch size must be positive".into()));
    }
    let mut wrong = 0usize;
    let mut at = 0;
    while at < n {
        let hi = (at + batch_size).min(n);
        let chunk = data.features.row_slice(at, hi)?;
        let pred = model.predict(NnInput::Sparse(&chunk))?;
        for r in 0..pred.n_rows() {
            let row = pred.row(r);
            let predicted =
                if row.len() == 1 { usize::from(row[0] >= 0.5) } else { argmax(row) };
            if predicted != data.labels[at + r] {
                wrong += 1;
            }
        }
        at = hi;
    }
    Ok(wrong as f64 / n as f64)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Trains `model` on `data`, reporting per-epoch loss and, when `eval` is
/// given, evaluation error. Pass the state of a previous call as `resume`
/// to continue the same run; an uninterrupted run and a resumed one produce
/// identical parameters.
pub fn train(
    model: &mut Model,
    loss_kind: LossKind,
    data: &LabeledDataset,
    eval: Option<&LabeledDataset>,
    config: &TrainConfig,
    resume: Option<TrainerState>,
) -> Result<(History, TrainerState)> {
    config.validate()?;
    let n = data.features.n_rows();
    if n == 0 {
        return Err(Error::InvalidArg("training set is empty".into()));
    }
    let target_width = match loss_kind {
        LossKind::Mse | LossKind::BinaryCe => {
            if data.n_classes != 2 {
                return Err(Error::InvalidArg(format!(
                    "{loss_kind} training expects 2 classes, dataset has {}",
                    data.n_classes
                )));
            }
            1
        }
        LossKind::SoftmaxCe => {
            if data.n_classes < 2 {
                return Err(Error::InvalidArg(format!(
                    "{loss_kind} training expects at least 2 classes, dataset has {}",
                    data.n_classes
                )));
            }
            data.n_classes
        }
    };
    if let Some(w) = model.output_width() {
        if w != target_width {
            return Err(Error::DimMismatch(format!(
                "model produces width {w} but {loss_kind} training expects {target_width}"
            )));
        }
    }
    if let Some(ev) = eval {
        if ev.n_classes != data.n_classes {
            return Err(Error::InvalidArg(format!(
                "evaluation set has {} classes, training set has {}",
                ev.n_classes, data.n_classes
            )));
        }
        if ev.features.n_cols() != data.features.n_cols() {
            return Err(Error::DimMismatch(format!(
                "evaluation set has {} columns, training set has {}",
                ev.features.n_cols(),
                data.features.n_cols()
            )));
        }
    }
    if let Some(eta) = config.eta {
        for layer in model.layers_mut() {
            if let Layer::Rp(rp) = layer {
                if rp.mode == RpMode::Finetuned {
                    rp.eta = eta;
                }
            }
        }
    }
    let (start_epoch, mut velocity) = match resume {
        Some(state) => {
            if !state.velocity.matches(model) {
                return Err(Error::InvalidArg(
                    "resume state does not match the model's layers".into(),
                ));
            }
            if state.next_epoch > config.epochs {
                return Err(Error::InvalidArg(format!(
                    "resume state is at epoch {} but the run is configured for {}",
                    state.next_epoch, config.epochs
                )));
            }
            (state.next_epoch, state.velocity)
        }
        None => (0, Velocity::zeros_for(model)),
    };
    let ranges = batch_ranges(n, config.batch_size);
    let mut history = History::default();
    let mut best_key: Option<f64> = None;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in start_epoch..config.epochs {
        let lr = config.lr_at(epoch);
        let mu = config.momentum_at(epoch);
        let mut shuffle_rng =
            RngStream::from_key(derive_key(config.seed, &[TAG_SHUFFLE, epoch as u64]));
        for (i, slot) in order.iter_mut().enumerate() {
            *slot = i;
        }
        shuffle_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for (b, &(lo, hi)) in ranges.iter().enumerate() {
            let rows = &order[lo..hi];
            let batch = gather_rows(&data.features, rows);
            let targets = batch_targets(&data.labels, rows, target_width)?;
            let ctx = BatchCtx::training(derive_key(
                config.seed,
                &[TAG_BATCH, epoch as u64, b as u64],
            ));
            let gates = draw_gates(model, ctx.seed);
            let fwd =
                with_context(model.forward(NnInput::Sparse(&batch), &ctx), epoch, b)?;
            let (value, dout) =
                with_context(loss(fwd.output(), &targets, loss_kind), epoch, b)?;
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "epoch {epoch}, batch {b}: loss is not finite"
                )));
            }
            let grads = with_context(
                model.backward_gated(NnInput::Sparse(&batch), &fwd, &dout, &gates),
                epoch,
                b,
            )?;
            apply_gradients(model, &grads, &mut velocity, lr, mu, config.l2, &gates)?;
            loss_sum += value * (hi - lo) as f64;
        }
        let train_loss = loss_sum / n as f64;
        let eval_err = match eval {
            Some(ev) => Some(eval_error(model, ev, config.batch_size)?),
            None => None,
        };
        let key = eval_err.unwrap_or(train_loss);
        if best_key.is_none_or(|k| key < k) {
            best_key = Some(key);
            history.best_epoch = Some(epoch);
        }
        history.epochs.push(EpochStats {
            epoch,
            train_loss,
            eval_error: eval_err,
            lr,
            momentum: mu,
        });
    }
    Ok((history, TrainerState { next_epoch: config.epochs, velocity }))
}

fn with_context<T>(r: Result<T>, epoch: usize, batch: usize) -> Result<T> {
    r.map_err(|e| match e {
        Error::Numeric(msg) => Error::Numeric(format!("epoch {epoch}, batch {batch}: {msg}")),
        other => other,
    })
}

/// Splits `n` rows into half-open batch ranges. A trailing range of one row
/// merges into its predecessor so every batch that can hold two rows does;
/// layers that need batch statistics rely on this.
fn batch_ranges(n: usize, batch: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut lo = 0;
    while lo < n {
        let mut hi = (lo + batch).min(n);
        if n - hi == 1 {
            hi = n;
        }
        out.push((lo, hi));
        lo = hi;
    }
    out
}

fn gather_rows(m: &CsrMatrix, rows: &[usize]) -> CsrMatrix {
    let mut entries = Vec::with_capacity(rows.len());
    for &r in rows {
        let (cols, vals) = m.row(r);
        entries.push(cols.iter().copied().zip(vals.iter().copied()).collect());
    }
    CsrMatrix::from_row_entries(rows.len(), m.n_cols(), entries)
        .expect("gathered rows keep sorted columns")
}

fn batch_targets(labels: &[usize], rows: &[usize], width: usize) -> Result<DenseMatrix> {
    let mut t = DenseMatrix::zeros(rows.len(), width);
    for (i, &r) in rows.iter().enumerate() {
        let label = labels[r];
        if width == 1 {
            if label > 1 {
                return Err(Error::InvalidArg(format!(
                    "label {label} outside the binary range"
                )));
            }
            t.set(i, 0, label as f64);
        } else {
            if label >= width {
                return Err(Error::InvalidArg(format!(
                    "label {label} outside {width} classes"
                )));
            }
            t.set(i, label, 1.0);
        }
    }
    Ok(t)
}

fn draw_gates(model: &Model, batch_seed: u64) -> Vec<bool> {
    model
        .layers()
        .iter()
        .enumerate()
        .map(|(i, layer)| match layer {
            Layer::Rp(rp) if rp.mode == RpMode::Finetuned => {
                RngStream::from_key(derive_key(batch_seed, &[TAG_GATE, i as u64]))
                    .next_bool(rp.eta)
            }
            _ => true,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, DenseLayer, InitScheme, LayerSpec};
    use crate::schemes::{RpKind, RpSchemeSpec};

    fn single_value_rp(eta: f64) -> RpLayerState {
        RpLayerState {
            pattern: CsrMatrix::from_row_entries(1, 1, vec![vec![(0, 1.0)]]).unwrap(),
            bias: vec![0.0],
            mode: RpMode::Finetuned,
            eta,
        }
    }

    fn xor_dataset() -> LabeledDataset {
        let features = CsrMatrix::from_row_entries(
            4,
            2,
            vec![vec![], vec![(1, 1.0)], vec![(0, 1.0)], vec![(0, 1.0), (1, 1.0)]],
        )
        .unwrap();
        LabeledDataset::new(features, vec![0, 1, 1, 0], 2).unwrap()
    }

    fn blob_dataset(n_per_class: usize, seed: u64) -> LabeledDataset {
        let mut stream = RngStream::new(seed, 0);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..(2 * n_per_class) {
            let class = i % 2;
            let center = if class == 0 { 0.0 } else { 3.0 };
            let x = center + 0.5 * stream.next_normal();
            let y = center + 0.5 * stream.next_normal();
            rows.push(vec![(0, x), (1, y)]);
            labels.push(class);
        }
        let features = CsrMatrix::from_row_entries(2 * n_per_class, 2, rows).unwrap();
        LabeledDataset::new(features, labels, 2).unwrap()
    }

    #[test]
    fn momentum_step_matches_hand_algebra() {
        let mut p = vec![0.0];
        let mut v = vec![0.0];
        sgd_momentum_step(&mut p, &[1.0], &mut v, 0.1, 0.9, 0.0);
        assert!((p[0] + 0.1).abs() < 1e-15);
        assert!((v[0] + 0.1).abs() < 1e-15);
        sgd_momentum_step(&mut p, &[1.0], &mut v, 0.1, 0.9, 0.0);
        assert!((v[0] + 0.19).abs() < 1e-15);
        assert!((p[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn zero_momentum_is_plain_descent() {
        let mut p = vec![2.0, -1.0];
        let mut v = vec![0.0, 0.0];
        sgd_momentum_step(&mut p, &[0.5, -0.25], &mut v, 0.2, 0.0, 0.0);
        assert!((p[0] - 1.9).abs() < 1e-15);
        assert!((p[1] + 0.95).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_spares_biases_and_normalization() {
        let specs = vec![
            LayerSpec::RpFinetuned { spec: RpSchemeSpec::new(RpKind::Li, 8, 4, 3), eta: 1.0 },
            LayerSpec::BatchNorm { width: 4 },
            LayerSpec::Dense { f_in: 4, f_out: 2, init: InitScheme::He },
        ];
        let mut model = Model::build(&specs, 5).unwrap();
        if let Layer::Dense(d) = &mut model.layers_mut()[2] {
            d.b = vec![0.7, -0.3];
        }
        if let Layer::Rp(rp) = &mut model.layers_mut()[0] {
            rp.bias = vec![0.1, 0.2, 0.3, 0.4];
        }
        let before: Vec<Layer> = model.layers().to_vec();
        let zero_grads = Gradients {
            per_layer: vec![
                LayerGrads::Rp {
                    dvalues: vec![0.0; pattern_nnz(&before[0])],
                    dbias: vec![0.0; 4],
                },
                LayerGrads::BatchNorm { dgamma: vec![0.0; 4], dbeta: vec![0.0; 4] },
                LayerGrads::Dense { dw: DenseMatrix::zeros(4, 2), db: vec![0.0; 2] },
            ],
        };
        let mut velocity = Velocity::zeros_for(&model);
        apply_gradients(&mut model, &zero_grads, &mut velocity, 0.1, 0.0, 0.5, &[true; 3])
            .unwrap();
        let Layer::Rp(rp_after) = &model.layers()[0] else { panic!() };
        let Layer::Rp(rp_before) = &before[0] else { panic!() };
        for (a, b) in rp_after.pattern.values().iter().zip(rp_before.pattern.values()) {
            assert!((a - b * 0.95).abs() < 1e-15);
        }
        assert_eq!(rp_after.bias, rp_before.bias);
        let Layer::BatchNorm(bn_after) = &model.layers()[1] else { panic!() };
        assert!(bn_after.gamma.iter().all(|&g| g == 1.0));
        assert!(bn_after.beta.iter().all(|&b| b == 0.0));
        let Layer::Dense(d_after) = &model.layers()[2] else { panic!() };
        let Layer::Dense(d_before) = &before[2] else { panic!() };
        for (a, b) in d_after.w.data().iter().zip(d_before.w.data()) {
            assert!((a - b * 0.95).abs() < 1e-15);
        }
        assert_eq!(d_after.b, d_before.b);
    }

    fn pattern_nnz(layer: &Layer) -> usize {
        match layer {
            Layer::Rp(rp) => rp.pattern.nnz(),
            _ => panic!("expected projection layer"),
        }
    }

    #[test]
    fn closed_gate_freezes_weights_and_velocity() {
        let layers = vec![Layer::Rp(single_value_rp(0.5))];
        let mut model = Model::from_layers(layers).unwrap();
        let mut velocity = Velocity::zeros_for(&model);
        let grads = Gradients {
            per_layer: vec![LayerGrads::Rp { dvalues: vec![1.0], dbias: vec![0.0] }],
        };
        let step = |model: &mut Model, velocity: &mut Velocity, open: bool| {
            apply_gradients(model, &grads, velocity, 0.1, 0.9, 0.0, &[open]).unwrap();
        };
        step(&mut model, &mut velocity, true);
        assert!((value_of(&model) - 0.9).abs() < 1e-15);
        for _ in 0..5 {
            step(&mut model, &mut velocity, false);
        }
        assert!((value_of(&model) - 0.9).abs() < 1e-15);
        let LayerVelocity::Rp { values, .. } = &velocity.per_layer[0] else { panic!() };
        assert!((values[0] + 0.1).abs() < 1e-15);
        step(&mut model, &mut velocity, true);
        assert!((value_of(&model) - 0.71).abs() < 1e-12);
    }

    fn value_of(model: &Model) -> f64 {
        match &model.layers()[0] {
            Layer::Rp(rp) => rp.pattern.values()[0],
            _ => panic!("expected projection layer"),
        }
    }

    #[test]
    fn rp_layer_step_always_updates_at_full_probability() {
        let mut state = single_value_rp(1.0);
        let mut vv = vec![0.0];
        let mut vb = vec![0.0];
        let mut rng = RngStream::new(1, 1);
        for _ in 0..100 {
            let applied = rp_layer_step(
                &mut state,
                &[0.0],
                &[0.0],
                &mut vv,
                &mut vb,
                0.1,
                0.0,
                0.0,
                &mut rng,
            )
            .unwrap();
            assert!(applied);
        }
    }

    #[test]
    fn rp_layer_step_gate_rate_tracks_probability() {
        let mut opened = 0;
        for i in 0..10_000u64 {
            let mut state = single_value_rp(0.5);
            let mut vv = vec![0.0];
            let mut vb = vec![0.0];
            let mut rng = RngStream::new(77, i);
            let applied = rp_layer_step(
                &mut state,
                &[1.0],
                &[1.0],
                &mut vv,
                &mut vb,
                0.1,
                0.9,
                0.0,
                &mut rng,
            )
            .unwrap();
            if applied {
                opened += 1;
                assert!(state.pattern.values()[0] != 1.0);
            } else {
                assert_eq!(state.pattern.values()[0], 1.0);
                assert_eq!(state.bias[0], 0.0);
                assert_eq!(vv[0], 0.0);
                assert_eq!(vb[0], 0.0);
            }
        }
        assert!((opened as i64 - 5000).abs() < 150, "opened {opened} of 10000");
    }

    #[test]
    fn rp_layer_step_rejects_fixed_mode() {
        let mut state = single_value_rp(1.0);
        state.mode = RpMode::Fixed;
        let mut rng = RngStream::new(0, 0);
        let err = rp_layer_step(
            &mut state,
            &[0.0],
            &[0.0],
            &mut [0.0],
            &mut [0.0],
            0.1,
            0.0,
            0.0,
            &mut rng,
        )
        .unwrap_err();
        assert!(err.to_string().contains("finetuned"));
    }

    #[test]
    fn schedules_follow_decay_and_ramp() {
        let mut config = TrainConfig::new(0.5, 10, 100, 0);
        config.lr_decay = 0.9;
        config.momentum_ramp_epochs = 10;
        assert!((config.lr_at(0) - 0.5).abs() < 1e-15);
        assert!((config.lr_at(2) - 0.5 * 0.81).abs() < 1e-15);
        assert!((config.momentum_at(0) - 0.5).abs() < 1e-15);
        assert!((config.momentum_at(5) - 0.7).abs() < 1e-15);
        assert!((config.momentum_at(10) - 0.9).abs() < 1e-15);
        assert!((config.momentum_at(50) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let good = TrainConfig::new(0.1, 10, 20, 0);
        good.validate().unwrap();
        let mut c = good.clone();
        c.lr0 = -1.0;
        assert!(c.validate().is_err());
        c = good.clone();
        c.lr_decay = 0.0;
        assert!(c.validate().is_err());
        c = good.clone();
        c.lr_decay = 1.5;
        assert!(c.validate().is_err());
        c = good.clone();
        c.momentum_max = 1.0;
        assert!(c.validate().is_err());
        c = good.clone();
        c.momentum0 = 0.95;
        assert!(c.validate().is_err());
        c = good.clone();
        c.momentum_ramp_epochs = 0;
        assert!(c.validate().is_err());
        c = good.clone();
        c.l2 = f64::NAN;
        assert!(c.validate().is_err());
        c = good.clone();
        c.batch_size = 0;
        assert!(c.validate().is_err());
        c = good.clone();
        c.epochs = 0;
        assert!(c.validate().is_err());
        c = good.clone();
        c.eta = Some(0.0);
        assert!(c.validate().is_err());
        c = good;
        c.eta = Some(1.0);
        c.validate().unwrap();
    }

    #[test]
    fn batch_ranges_merge_trailing_singleton() {
        assert_eq!(batch_ranges(10, 3), vec![(0, 3), (3, 6), (6, 10)]);
        assert_eq!(batch_ranges(9, 3), vec![(0, 3), (3, 6), (6, 9)]);
        assert_eq!(batch_ranges(2, 1), vec![(0, 2)]);
        assert_eq!(batch_ranges(1, 4), vec![(0, 1)]);
        assert_eq!(batch_ranges(4, 8), vec![(0, 4)]);
    }

    #[test]
    fn eval_error_thresholds_and_argmax() {
        let w = DenseMatrix::from_vec(1, 1, vec![1.0]).unwrap();
        let model = Model::from_layers(vec![
            Layer::Dense(DenseLayer { w, b: vec![0.0] }),
            Layer::Activation(Activation::Sigmoid),
        ])
        .unwrap();
        let features = CsrMatrix::from_row_entries(
            2,
            1,
            vec![vec![(0, -1.0)], vec![(0, 1.0)]],
        )
        .unwrap();
        let right = LabeledDataset::new(features.clone(), vec![0, 1], 2).unwrap();
        let wrong = LabeledDataset::new(features, vec![1, 0], 2).unwrap();
        assert_eq!(eval_error(&model, &right, 64).unwrap(), 0.0);
        assert_eq!(eval_error(&model, &wrong, 1).unwrap(), 1.0);

        let w = DenseMatrix::from_vec(1, 3, vec![1.0, 0.0, -1.0]).unwrap();
        let multi = Model::from_layers(vec![Layer::Dense(DenseLayer { w, b: vec![0.0; 3] })])
            .unwrap();
        let features = CsrMatrix::from_row_entries(
            3,
            1,
            vec![vec![(0, 1.0)], vec![(0, -1.0)], vec![]],
        )
        .unwrap();
        let data = LabeledDataset::new(features, vec![0, 2, 0], 3).unwrap();
        assert_eq!(eval_error(&multi, &data, 2).unwrap(), 0.0);
    }

    #[test]
    fn learns_xor() {
        let specs = vec![
            LayerSpec::Dense { f_in: 2, f_out: 8, init: InitScheme::XavierTanh },
            LayerSpec::Activation { act: Activation::Tanh },
            LayerSpec::Dense { f_in: 8, f_out: 1, init: InitScheme::XavierSigmoid },
            LayerSpec::Activation { act: Activation::Sigmoid },
        ];
        let mut model = Model::build(&specs, 12).unwrap();
        let data = xor_dataset();
        let mut config = TrainConfig::new(1.0, 4, 3000, 3);
        config.lr_decay = 1.0;
        config.momentum0 = 0.9;
        config.momentum_max = 0.9;
        let (history, _) =
            train(&mut model, LossKind::BinaryCe, &data, Some(&data), &config, None).unwrap();
        let min_loss =
            history.epochs.iter().map(|s| s.train_loss).fold(f64::INFINITY, f64::min);
        assert!(min_loss < 0.01, "best loss {min_loss}");
        assert_eq!(eval_error(&model, &data, 4).unwrap(), 0.0);
    }

    #[test]
    fn separates_gaussian_blobs() {
        let specs = vec![
            LayerSpec::Dense { f_in: 2, f_out: 1, init: InitScheme::XavierSigmoid },
            LayerSpec::Activation { act: Activation::Sigmoid },
        ];
        let mut model = Model::build(&specs, 31).unwrap();
        let data = blob_dataset(50, 41);
        let eval = blob_dataset(50, 42);
        let config = TrainConfig::new(0.5, 10, 50, 7);
        let (history, _) =
            train(&mut model, LossKind::BinaryCe, &data, Some(&eval), &config, None).unwrap();
        let last = history.epochs.last().unwrap();
        assert!(last.eval_error.unwrap() < 0.02, "eval error {:?}", last.eval_error);
        assert!(history.best().is_some());
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let specs = vec![
            LayerSpec::RpFinetuned { spec: RpSchemeSpec::new(RpKind::Li, 6, 4, 2), eta: 1.0 },
            LayerSpec::Activation { act: Activation::Tanh },
            LayerSpec::Dense { f_in: 4, f_out: 2, init: InitScheme::He },
        ];
        let mut model = Model::build(&specs, 8).unwrap();
        let before = model.params_flat();
        let data = blob_dataset_wide();
        let config = TrainConfig::new(0.0, 4, 3, 5);
        train(&mut model, LossKind::SoftmaxCe, &data, None, &config, None).unwrap();
        assert_eq!(model.params_flat(), before);
    }

    fn blob_dataset_wide() -> LabeledDataset {
        let mut stream = RngStream::new(9, 9);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..16 {
            let class = i % 2;
            let shift = if class == 0 { -1.0 } else { 1.0 };
            let row: Vec<(usize, f64)> =
                (0..6).map(|c| (c, shift + 0.3 * stream.next_normal())).collect();
            rows.push(row);
            labels.push(class);
        }
        let features = CsrMatrix::from_row_entries(16, 6, rows).unwrap();
        LabeledDataset::new(features, labels, 2).unwrap()
    }

    #[test]
    fn training_is_deterministic_for_a_seed() {
        let specs = vec![
            LayerSpec::RpFinetuned { spec: RpSchemeSpec::new(RpKind::Li, 6, 4, 2), eta: 0.7 },
            LayerSpec::BatchNorm { width: 4 },
            LayerSpec::Activation { act: Activation::Relu },
            LayerSpec::Dropout { keep: 0.8 },
            LayerSpec::Dense { f_in: 4, f_out: 2, init: InitScheme::He },
        ];
        let data = blob_dataset_wide();
        let config = TrainConfig::new(0.1, 4, 5, 13);
        let mut a = Model::build(&specs, 21).unwrap();
        let (ha, _) = train(&mut a, LossKind::SoftmaxCe, &data, Some(&data), &config, None)
            .unwrap();
        let mut b = Model::build(&specs, 21).unwrap();
        let (hb, _) = train(&mut b, LossKind::SoftmaxCe, &data, Some(&data), &config, None)
            .unwrap();
        assert_eq!(a.params_flat(), b.params_flat());
        assert_eq!(ha, hb);
    }

    #[test]
    fn diverging_run_reports_epoch_and_batch() {
        let specs = vec![
            LayerSpec::Dense { f_in: 6, f_out: 4, init: InitScheme::He },
            LayerSpec::Activation { act: Activation::Relu },
            LayerSpec::Dense { f_in: 4, f_out: 2, init: InitScheme::He },
        ];
        let mut model = Model::build(&specs, 3).unwrap();
        let data = blob_dataset_wide();
        let mut config = TrainConfig::new(1e200, 4, 2, 5);
        config.lr_decay = 1.0;
        let err = train(&mut model, LossKind::SoftmaxCe, &data, None, &config, None)
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("epoch"), "{msg}");
    }

    #[test]
    fn resumed_run_matches_uninterrupted() {
        let specs = vec![
            LayerSpec::RpFinetuned { spec: RpSchemeSpec::new(RpKind::Li, 6, 4, 2), eta: 0.6 },
            LayerSpec::BatchNorm { width: 4 },
            LayerSpec::Activation { act: Activation::Tanh },
            LayerSpec::Dense { f_in: 4, f_out: 2, init: InitScheme::He },
        ];
        let data = blob_dataset_wide();
        let full = TrainConfig::new(0.2, 4, 6, 17);
        let mut half = full.clone();
        half.epochs = 3;

        let mut straight = Model::build(&specs, 33).unwrap();
        let (h_straight, s_straight) =
            train(&mut straight, LossKind::SoftmaxCe, &data, Some(&data), &full, None).unwrap();

        let mut resumed = Model::build(&specs, 33).unwrap();
        let (h1, state) =
            train(&mut resumed, LossKind::SoftmaxCe, &data, Some(&data), &half, None).unwrap();
        let (h2, s_resumed) = train(
            &mut resumed,
            LossKind::SoftmaxCe,
            &data,
            Some(&data),
            &full,
            Some(state),
        )
        .unwrap();

        assert_eq!(straight.params_flat(), resumed.params_flat());
        assert_eq!(s_straight, s_resumed);
        assert_eq!(h1.epochs.len(), 3);
        assert_eq!(h2.epochs.len(), 3);
        let merged: Vec<f64> =
            h1.epochs.iter().chain(&h2.epochs).map(|s| s.train_loss).collect();
        let straight_losses: Vec<f64> =
            h_straight.epochs.iter().map(|s| s.train_loss).collect();
        assert_eq!(merged, straight_losses);
    }

    #[test]
    fn resume_validates_state_shape_and_epoch() {
        let specs =
            vec![LayerSpec::Dense { f_in: 6, f_out: 2, init: InitScheme::He }];
        let data = blob_dataset_wide();
        let config = TrainConfig::new(0.1, 4, 2, 1);
        let mut model = Model::build(&specs, 1).unwrap();
        let (_, state) =
            train(&mut model, LossKind::SoftmaxCe, &data, None, &config, None).unwrap();
        let mut shorter = config.clone();
        shorter.epochs = 1;
        let err = train(&mut model, LossKind::SoftmaxCe, &data, None, &shorter, Some(state))
            .unwrap_err();
        assert!(err.to_string().contains("epoch"), "{err}");

        let other_specs = vec![
            LayerSpec::Dense { f_in: 6, f_out: 3, init: InitScheme::He },
            LayerSpec::Dense { f_in: 3, f_out: 2, init: InitScheme::He },
        ];
        let other = Model::build(&other_specs, 2).unwrap();
        let bad = TrainerState { next_epoch: 1, velocity: Velocity::zeros_for(&other) };
        let err = train(&mut model, LossKind::SoftmaxCe, &data, None, &config, Some(bad))
            .unwrap_err();
        assert!(err.to_string().contains("resume"), "{err}");
    }

    #[test]
    fn fixed_projection_stays_untouched_by_training() {
        let specs = vec![
            LayerSpec::RpFixed { spec: RpSchemeSpec::new(RpKind::Li, 6, 4, 2) },
            LayerSpec::Activation { act: Activation::Tanh },
            LayerSpec::Dense { f_in: 4, f_out: 2, init: InitScheme::He },
        ];
        let mut model = Model::build(&specs, 8).unwrap();
        let Layer::Rp(rp) = &model.layers()[0] else { panic!() };
        let values_before = rp.pattern.values().to_vec();
        let data = blob_dataset_wide();
        let config = TrainConfig::new(0.3, 4, 5, 5);
        train(&mut model, LossKind::SoftmaxCe, &data, None, &config, None).unwrap();
        let Layer::Rp(rp) = &model.layers()[0] else { panic!() };
        assert_eq!(rp.pattern.values(), values_before.as_slice());
        assert!(rp.bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn finetuned_projection_trains_values_without_touching_structure() {
        let specs = vec![
            LayerSpec::RpFinetuned { spec: RpSchemeSpec::new(RpKind::Li, 6, 4, 2), eta: 1.0 },
            LayerSpec::Activation { act: Activation::Tanh },
            LayerSpec::Dense { f_in: 4, f_out: 2, init: InitScheme::He },
        ];
        let mut model = Model::build(&specs, 8).unwrap();
        let Layer::Rp(rp) = &model.layers()[0] else { panic!() };
        let values_before = rp.pattern.values().to_vec();
        let cols_before = rp.pattern.col_indices().to_vec();
        let offsets_before = rp.pattern.row_offsets().to_vec();
        let data = blob_dataset_wide();
        let config = TrainConfig::new(0.3, 4, 5, 5);
        train(&mut model, LossKind::SoftmaxCe, &data, None, &config, None).unwrap();
        let Layer::Rp(rp) = &model.layers()[0] else { panic!() };
        assert_eq!(rp.pattern.col_indices(), cols_before.as_slice());
        assert_eq!(rp.pattern.row_offsets(), offsets_before.as_slice());
        assert!(rp
            .pattern
            .values()
            .iter()
            .zip(&values_before)
            .any(|(a, b)| a != b));
        assert!(rp.bias.iter().any(|&b| b != 0.0));
    }

    #[test]
    fn config_eta_overrides_layer_eta() {
        let specs = vec![
            LayerSpec::RpFinetuned { spec: RpSchemeSpec::new(RpKind::Li, 6, 4, 2), eta: 1.0 },
            LayerSpec::Dense { f_in: 4, f_out: 2, init: InitScheme::He },
        ];
        let mut model = Model::build(&specs, 8).unwrap();
        let data = blob_dataset_wide();
        let mut config = TrainConfig::new(0.1, 4, 1, 5);
        config.eta = Some(0.25);
        train(&mut model, LossKind::SoftmaxCe, &data, None, &config, None).unwrap();
        let Layer::Rp(rp) = &model.layers()[0] else { panic!() };
        assert_eq!(rp.eta, 0.25);
    }

    #[test]
    fn loss_and_dataset_shapes_are_checked_up_front() {
        let data = blob_dataset_wide();
        let config = TrainConfig::new(0.1, 4, 1, 5);

        let specs = vec![LayerSpec::Dense { f_in: 6, f_out: 3, init: InitScheme::He }];
        let mut model = Model::build(&specs, 1).unwrap();
        assert!(train(&mut model, LossKind::SoftmaxCe, &data, None, &config, None).is_err());
        assert!(train(&mut model, LossKind::BinaryCe, &data, None, &config, None).is_err());

        let specs = vec![LayerSpec::Dense { f_in: 6, f_out: 2, init: InitScheme::He }];
        let mut model = Model::build(&specs, 1).unwrap();
        let mut bad_eval = blob_dataset_wide();
        bad_eval.n_classes = 3;
        assert!(
            train(&mut model, LossKind::SoftmaxCe, &data, Some(&bad_eval), &config, None)
                .is_err()
        );
    }

    #[test]
    fn history_csv_lists_every_epoch() {
        let history = History {
            epochs: vec![
                EpochStats {
                    epoch: 0,
                    train_loss: 0.5,
                    eval_error: Some(0.25),
                    lr: 0.1,
                    momentum: 0.5,
                },
                EpochStats { epoch: 1, train_loss: 0.4, eval_error: None, lr: 0.09, momentum: 0.6 },
            ],
            best_epoch: Some(0),
        };
        let csv = history.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "epoch,train_loss,eval_error,lr,momentum");
        assert_eq!(lines[1], "0,0.5,0.25,0.1,0.5");
        assert_eq!(lines[2], "1,0.4,,0.09,0.6");
        assert_eq!(history.best().unwrap().epoch, 0);
    }
}
