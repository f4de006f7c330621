use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{matmul_t, Tensor2};
use crate::error::{Error, Result};

/// Activation applied between MLP layers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
            Activation::Identity => v,
        }
    }
}

/// Affine map `x ↦ W x + b` with `W` stored out×in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearParams {
    pub weight: Tensor2,
    pub bias: Vec<f64>,
}

impl LinearParams {
    pub fn new(weight: Tensor2, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::Shape(format!(
                "bias length {} does not match {} outputs",
                bias.len(),
                weight.rows()
            )));
        }
        weight.ensure_finite("linear weight")?;
        if bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite("linear bias".into()));
        }
        Ok(Self { weight, bias })
    }

    /// Glorot-uniform weights, zero bias.
    pub fn random<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (d_in + d_out).max(1) as f64).sqrt();
        let data = (0..d_in * d_out)
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        Self {
            weight: Tensor2::from_vec(d_out, d_in, data).expect("sized above"),
            bias: vec![0.0; d_out],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Stack of linear layers with an activation between consecutive layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<LinearParams>,
    pub activation: Activation,
}

impl MlpParams {
    pub fn new(layers: Vec<LinearParams>, activation: Activation) -> Result<Self> {
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Shape(format!(
                    "layer {i} emits {} features but layer {} expects {}",
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Self { layers, activation })
    }

    /// Layers with widths `dims[0] → dims[1] → … → dims[last]`.
    pub fn random<R: Rng + ?Sized>(dims: &[usize], activation: Activation, rng: &mut R) -> Self {
        let layers = dims
            .windows(2)
            .map(|w| LinearParams::random(w[0], w[1], rng))
            .collect();
        Self { layers, activation }
    }

    pub fn in_dim(&self) -> Option<usize> {
        self.layers.first().map(LinearParams::in_dim)
    }

    pub fn out_dim(&self) -> Option<usize> {
        self.layers.last().map(LinearParams::out_dim)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LinearParams::param_count).sum()
    }
}

pub fn linear_forward(p: &LinearParams, x: &Tensor2) -> Result<Tensor2> {
    if x.cols() != p.in_dim() {
        return Err(Error::Shape(format!(
            "input has {} features, layer expects {}",
            x.cols(),
            p.in_dim()
        )));
    }
    let mut out = matmul_t(x, &p.weight);
    for i in 0..out.rows() {
        for (v, b) in out.row_mut(i).iter_mut().zip(&p.bias) {
            *v += b;
        }
    }
    Ok(out)
}

pub fn mlp_forward(p: &MlpParams, x: &Tensor2) -> Result<Tensor2> {
    let mut h = x.clone();
    let last = p.layers.len().saturating_sub(1);
    for (i, layer) in p.layers.iter().enumerate() {
        h = linear_forward(layer, &h)?;
        if i < last {
            h.data_mut()
                .iter_mut()
                .for_each(|v| *v = p.activation.apply(*v));
        }
    }
    Ok(h)
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Empty("softmax of an empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}


/// `logsumexp(z) − z[target]`, written as `(max − z[target]) + ln_1p(Σ_{i≠argmax} e^{z_i − max})`
/// so that a small loss keeps its relative precision.
pub fn cross_entropy_value(z: &[f64], target: usize) -> f64 {
    let mut imax = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[imax] {
            imax = i;
        }
    }
    let max = z[imax];
    let rest: f64 = z
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != imax)
        .map(|(_, &v)| (v - max).exp())
        .sum();
    (max - z[target]) + rest.ln_1p()
}
