//! Tape-side views of layer parameters.
//!
//! The same forward code runs for inference (weights as constants) and for
//! training (weights as parameter leaves); only the leaf kind differs.

use rand::Rng;

use super::linear::{Activation, LinearParams, MlpParams};
use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor2;
use crate::error::Result;

/// Parameter handles for one linear layer stored in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinearHandle {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearHandle {
    pub fn register(store: &mut ParamStore, prefix: &str, p: LinearParams) -> Result<Self> {
        let weight = store.add(format!("{prefix}.weight"), p.weight)?;
        let bias = store.add(format!("{prefix}.bias"), Tensor2::row_vector(p.bias))?;
        Ok(Self { weight, bias })
    }

    pub fn random<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::register(store, prefix, LinearParams::random(d_in, d_out, rng))
    }

    pub fn lookup(store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            weight: store.expect_id(&format!("{prefix}.weight"))?,
            bias: store.expect_id(&format!("{prefix}.bias"))?,
        })
    }

    pub fn extract(&self, store: &ParamStore) -> LinearParams {
        LinearParams {
            weight: store.value(self.weight).clone(),
            bias: store.value(self.bias).data().to_vec(),
        }
    }

    pub fn vars(&self, tape: &mut Tape, store: &ParamStore) -> LinearVars {
        LinearVars {
            weight: tape.param(store, self.weight),
            bias: tape.param(store, self.bias),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpHandle {
    pub layers: Vec<LinearHandle>,
    pub activation: Activation,
}

impl MlpHandle {
    pub fn register(store: &mut ParamStore, prefix: &str, p: MlpParams) -> Result<Self> {
        let layers = p
            .layers
            .into_iter()
            .enumerate()
            .map(|(i, l)| LinearHandle::register(store, &format!("{prefix}.{i}"), l))
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            activation: p.activation,
        })
    }

    pub fn lookup(store: &ParamStore, prefix: &str, depth: usize, activation: Activation) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| LinearHandle::lookup(store, &format!("{prefix}.{i}")))
            .collect::<Result<_>>()?;
        Ok(Self { layers, activation })
    }

    pub fn extract(&self, store: &ParamStore) -> MlpParams {
        MlpParams {
            layers: self.layers.iter().map(|l| l.extract(store)).collect(),
            activation: self.activation,
        }
    }

    pub fn vars(&self, tape: &mut Tape, store: &ParamStore) -> MlpVars {
        MlpVars {
            layers: self.layers.iter().map(|l| l.vars(tape, store)).collect(),
            activation: self.activation,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl LinearVars {
    pub fn constant(tape: &mut Tape, p: &LinearParams) -> Self {
        Self {
            weight: tape.constant(p.weight.clone()),
            bias: tape.constant(Tensor2::row_vector(p.bias.clone())),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = tape.matmul_t(x, self.weight)?;
        tape.add_row(h, self.bias)
    }
}

#[derive(Clone, Debug)]
pub struct MlpVars {
    pub layers: Vec<LinearVars>,
    pub activation: Activation,
}

impl MlpVars {
    pub fn constant(tape: &mut Tape, p: &MlpParams) -> Self {
        Self {
            layers: p.layers.iter().map(|l| LinearVars::constant(tape, l)).collect(),
            activation: p.activation,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            if i < last {
                h = tape.activation(h, self.activation);
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::linear::mlp_forward;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tape_mlp_matches_plain_mlp_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = MlpParams::random(&[4, 6, 3], Activation::Tanh, &mut rng);
        let x = Tensor2::from_vec(2, 4, (0..8).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap();
        let mut tape = Tape::new();
        let vars = MlpVars::constant(&mut tape, &mlp);
        let xv = tape.constant(x.clone());
        let y = vars.forward(&mut tape, xv).unwrap();
        assert_eq!(tape.value(y), &mlp_forward(&mlp, &x).unwrap());
    }
}
