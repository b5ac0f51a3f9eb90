//! Network construction from a dash-separated architecture string such as
//! `d-1000-3000-3000-1`: the leading `d` stands for the data
//! dimensionality and the remaining numbers are layer widths, the last one
//! being the output.

use rpkit::nn::{Activation, InitScheme, LayerSpec};
use rpkit::schemes::{RpKind, RpSchemeSpec};
use rpkit::{Error, Result};

/// First-layer treatment of the architecture's `d-k` pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RpChoice {
    /// Plain dense first layer.
    None,
    /// Projection layer with frozen weights.
    Fixed,
    /// Projection layer whose stored entries train.
    Finetuned,
}

impl std::str::FromStr for RpChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(RpChoice::None),
            "fixed" => Ok(RpChoice::Fixed),
            "finetuned" => Ok(RpChoice::Finetuned),
            other => Err(Error::InvalidArg(format!(
                "unknown projection mode {other:?} (expected none, fixed or finetuned)"
            ))),
        }
    }
}

/// Parses the layer widths after the leading `d`.
pub fn parse_arch(s: &str) -> Result<Vec<usize>> {
    let bad = |msg: &str| Error::InvalidArg(format!("invalid architecture {s:?}: {msg}"));
    let mut parts = s.split('-');
    if parts.next() != Some("d") {
        return Err(bad("must start with the literal d, as in d-1000-3000-3000-1"));
    }
    let widths: Vec<usize> = parts
        .map(|p| p.parse::<usize>().map_err(|_| bad(&format!("bad layer width {p:?}"))))
        .collect::<Result<_>>()?;
    if widths.is_empty() {
        return Err(bad("needs at least one layer width after d"));
    }
    if widths.contains(&0) {
        return Err(bad("layer widths must be positive"));
    }
    Ok(widths)
}

/// Output width a classifier needs: one sigmoid unit for two classes, one
/// logit per class otherwise.
pub fn output_width(n_classes: usize) -> usize {
    if n_classes == 2 {
        1
    } else {
        n_classes
    }
}

/// Everything needed to turn parsed widths into layer specs.
pub struct NetPlan<'a> {
    pub d: usize,
    pub widths: &'a [usize],
    pub n_classes: usize,
    pub rp: RpChoice,
    pub scheme: RpKind,
    pub seed: u64,
    pub batch_norm: bool,
    pub act: Activation,
    /// Probability of dropping a hidden activation; 0 disables dropout.
    pub dropout: f64,
    /// Update probability of a finetuned projection layer.
    pub eta: f64,
}

/// Assembles the layer sequence: an optional projection (or dense) input
/// layer with optional batch normalization, hidden dense layers with the
/// chosen activation and dropout, and an output layer matching the class
/// count.
pub fn layer_specs(plan: &NetPlan) -> Result<Vec<LayerSpec>> {
    let widths = plan.widths;
    let out_w = output_width(plan.n_classes);
    if *widths.last().expect("parse_arch yields at least one width") != out_w {
        return Err(Error::DimMismatch(format!(
            "architecture ends in {} units but {} classes need {}",
            widths.last().unwrap(),
            plan.n_classes,
            out_w
        )));
    }
    if !(0.0..1.0).contains(&plan.dropout) {
        return Err(Error::InvalidArg(format!(
            "dropout probability {} outside [0, 1)",
            plan.dropout
        )));
    }

    let mut specs = Vec::new();
    let mut prev = plan.d;
    let mut first_hidden = 0;
    if plan.rp != RpChoice::None {
        let spec = RpSchemeSpec::new(plan.scheme, plan.d, widths[0], plan.seed);
        specs.push(match plan.rp {
            RpChoice::Fixed => LayerSpec::RpFixed { spec },
            RpChoice::Finetuned => LayerSpec::RpFinetuned { spec, eta: plan.eta },
            RpChoice::None => unreachable!(),
        });
        if plan.batch_norm {
            specs.push(LayerSpec::BatchNorm { width: widths[0] });
        }
        prev = widths[0];
        first_hidden = 1;
    }

    let last = widths.len() - 1;
    for (i, &w) in widths.iter().enumerate().skip(first_hidden) {
        if i == last {
            let init = if out_w == 1 { InitScheme::XavierSigmoid } else { InitScheme::LeCun };
            specs.push(LayerSpec::Dense { f_in: prev, f_out: w, init });
        } else {
            specs.push(LayerSpec::Dense { f_in: prev, f_out: w, init: hidden_init(plan.act) });
            if plan.batch_norm && i == 0 {
                specs.push(LayerSpec::BatchNorm { width: w });
            }
            specs.push(LayerSpec::Activation { act: plan.act });
            if plan.dropout > 0.0 {
                specs.push(LayerSpec::Dropout { keep: 1.0 - plan.dropout });
            }
        }
        prev = w;
    }
    if out_w == 1 {
        specs.push(LayerSpec::Activation { act: Activation::Sigmoid });
    }

    if plan.batch_norm && plan.rp == RpChoice::None && last == 0 {
        return Err(Error::InvalidArg(
            "batch normalization needs a projection or hidden layer to follow".into(),
        ));
    }
    Ok(specs)
}

fn hidden_init(act: Activation) -> InitScheme {
    match act {
        Activation::Relu | Activation::LRelu(_) => InitScheme::He,
        Activation::Tanh => InitScheme::XavierTanh,
        Activation::Sigmoid => InitScheme::XavierSigmoid,
        Activation::Linear => InitScheme::LeCun,
    }
}
