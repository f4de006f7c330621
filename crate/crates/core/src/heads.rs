//! Recurrent recognition heads over per-frame focus representations.
//!
//! AppNet: feature net → LSTM → linear over the last hidden state (5 classes).
//! KeyNet: feature net → BiLSTM, final states concatenated → linear (36 classes).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    softmax, Activation, LinearHandle, LinearParams, LinearVars, MlpHandle, MlpParams, MlpVars, ParamId,
    ParamStore, Tape, Tensor2, Var,
};

pub const APPNET_CLASSES: usize = 5;
pub const KEYNET_CLASSES: usize = 36;
pub const APPNET_HIDDEN: usize = 96;
pub const KEYNET_HIDDEN: usize = 64;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    #[default]
    AppNet,
    KeyNet,
}

impl HeadKind {
    pub fn classes(self) -> usize {
        match self {
            HeadKind::AppNet => APPNET_CLASSES,
            HeadKind::KeyNet => KEYNET_CLASSES,
        }
    }

    pub fn default_hidden(self) -> usize {
        match self {
            HeadKind::AppNet => APPNET_HIDDEN,
            HeadKind::KeyNet => KEYNET_HIDDEN,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub kind: HeadKind,
    /// Feature and recurrent width; `None` uses 96 for AppNet and 64 for KeyNet.
    pub hidden: Option<usize>,
}

impl HeadConfig {
    pub fn hidden(&self) -> usize {
        self.hidden.unwrap_or(self.kind.default_hidden())
    }

    pub fn classes(&self) -> usize {
        self.kind.classes()
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden() == 0 {
            return Err(Error::InvalidConfig("head hidden width must be positive".into()));
        }
        Ok(())
    }
}

/// Gated recurrent cell; gate blocks are ordered input, forget, candidate, output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    /// 4h × in
    pub w_ih: Tensor2,
    /// 4h × h
    pub w_hh: Tensor2,
    /// 4h
    pub bias: Vec<f64>,
}

impl LstmParams {
    pub fn random<R: Rng + ?Sized>(d_in: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut fill = |r: usize, c: usize| {
            let data = (0..r * c).map(|_| rng.gen_range(-bound..bound)).collect();
            Tensor2::from_vec(r, c, data).expect("sized")
        };
        let w_ih = fill(4 * hidden, d_in);
        let w_hh = fill(4 * hidden, hidden);
        let mut bias = vec![0.0; 4 * hidden];
        bias[hidden..2 * hidden].iter_mut().for_each(|b| *b = 1.0);
        Self { w_ih, w_hh, bias }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.cols()
    }

    pub fn d_in(&self) -> usize {
        self.w_ih.cols()
    }

    pub fn param_count(&self) -> usize {
        self.w_ih.len() + self.w_hh.len() + self.bias.len()
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.hidden();
        if self.w_hh.rows() != 4 * h || self.w_ih.rows() != 4 * h || self.bias.len() != 4 * h {
            return Err(Error::Shape(format!("recurrent cell shapes inconsistent for hidden {h}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppNetParams {
    pub feature_net: MlpParams,
    pub action_module: LstmParams,
    pub decision: LinearParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyNetParams {
    pub feature_net: MlpParams,
    pub forward: LstmParams,
    pub backward: LstmParams,
    pub decision: LinearParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum HeadParams {
    AppNet(AppNetParams),
    KeyNet(KeyNetParams),
}

impl HeadParams {
    pub fn random<R: Rng + ?Sized>(cfg: &HeadConfig, input_width: usize, rng: &mut R) -> Self {
        let h = cfg.hidden();
        let feature_net = MlpParams::random(&[input_width, h], Activation::Relu, rng);
        match cfg.kind {
            HeadKind::AppNet => HeadParams::AppNet(AppNetParams {
                feature_net,
                action_module: LstmParams::random(h, h, rng),
                decision: LinearParams::random(h, APPNET_CLASSES, rng),
            }),
            HeadKind::KeyNet => HeadParams::KeyNet(KeyNetParams {
                feature_net,
                forward: LstmParams::random(h, h, rng),
                backward: LstmParams::random(h, h, rng),
                decision: LinearParams::random(2 * h, KEYNET_CLASSES, rng),
            }),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            HeadParams::AppNet(p) => {
                p.feature_net.param_count() + p.action_module.param_count() + p.decision.param_count()
            }
            HeadParams::KeyNet(p) => {
                p.feature_net.param_count()
                    + p.forward.param_count()
                    + p.backward.param_count()
                    + p.decision.param_count()
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmHandle {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
}

impl LstmHandle {
    pub fn register(store: &mut ParamStore, prefix: &str, p: LstmParams) -> Result<Self> {
        p.validate()?;
        Ok(Self {
            w_ih: store.add(format!("{prefix}.w_ih"), p.w_ih)?,
            w_hh: store.add(format!("{prefix}.w_hh"), p.w_hh)?,
            bias: store.add(format!("{prefix}.bias"), Tensor2::row_vector(p.bias))?,
        })
    }

    pub fn lookup(store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            w_ih: store.expect_id(&format!("{prefix}.w_ih"))?,
            w_hh: store.expect_id(&format!("{prefix}.w_hh"))?,
            bias: store.expect_id(&format!("{prefix}.bias"))?,
        })
    }

    pub fn extract(&self, store: &ParamStore) -> LstmParams {
        LstmParams {
            w_ih: store.value(self.w_ih).clone(),
            w_hh: store.value(self.w_hh).clone(),
            bias: store.value(self.bias).data().to_vec(),
        }
    }

    pub fn vars(&self, tape: &mut Tape, store: &ParamStore) -> LstmVars {
        LstmVars {
            w_ih: tape.param(store, self.w_ih),
            w_hh: tape.param(store, self.w_hh),
            bias: tape.param(store, self.bias),
            hidden: store.value(self.w_hh).cols(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
    pub hidden: usize,
}

impl LstmVars {
    pub fn constant(tape: &mut Tape, p: &LstmParams) -> Self {
        Self {
            w_ih: tape.constant(p.w_ih.clone()),
            w_hh: tape.constant(p.w_hh.clone()),
            bias: tape.constant(Tensor2::row_vector(p.bias.clone())),
            hidden: p.hidden(),
        }
    }

    /// Runs over the rows of `xs` in the given order and returns the final
    /// hidden state (1×h).
    pub fn scan(&self, tape: &mut Tape, xs: Var, order: impl Iterator<Item = usize>) -> Result<Var> {
        let h = self.hidden;
        let proj = tape.matmul_t(xs, self.w_ih)?;
        let mut hs = tape.constant(Tensor2::zeros(1, h));
        let mut cs = tape.constant(Tensor2::zeros(1, h));
        for t in order {
            let xt = tape.gather_rows(proj, vec![t])?;
            let rec = tape.matmul_t(hs, self.w_hh)?;
            let pre = tape.add(xt, rec)?;
            let pre = tape.add_row(pre, self.bias)?;
            let i = tape.slice_cols(pre, 0, h)?;
            let f = tape.slice_cols(pre, h, h)?;
            let g = tape.slice_cols(pre, 2 * h, h)?;
            let o = tape.slice_cols(pre, 3 * h, h)?;
            let (i, f, g, o) = (tape.sigmoid(i), tape.sigmoid(f), tape.tanh(g), tape.sigmoid(o));
            let keep = tape.mul(f, cs)?;
            let write = tape.mul(i, g)?;
            cs = tape.add(keep, write)?;
            let squashed = tape.tanh(cs);
            hs = tape.mul(o, squashed)?;
        }
        Ok(hs)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum HeadHandle {
    AppNet {
        feature_net: MlpHandle,
        action_module: LstmHandle,
        decision: LinearHandle,
    },
    KeyNet {
        feature_net: MlpHandle,
        forward: LstmHandle,
        backward: LstmHandle,
        decision: LinearHandle,
    },
}

impl HeadHandle {
    pub fn register(store: &mut ParamStore, prefix: &str, p: HeadParams) -> Result<Self> {
        Ok(match p {
            HeadParams::AppNet(p) => HeadHandle::AppNet {
                feature_net: MlpHandle::register(store, &format!("{prefix}.feature_net"), p.feature_net)?,
                action_module: LstmHandle::register(store, &format!("{prefix}.action_module"), p.action_module)?,
                decision: LinearHandle::register(store, &format!("{prefix}.decision"), p.decision)?,
            },
            HeadParams::KeyNet(p) => HeadHandle::KeyNet {
                feature_net: MlpHandle::register(store, &format!("{prefix}.feature_net"), p.feature_net)?,
                forward: LstmHandle::register(store, &format!("{prefix}.forward"), p.forward)?,
                backward: LstmHandle::register(store, &format!("{prefix}.backward"), p.backward)?,
                decision: LinearHandle::register(store, &format!("{prefix}.decision"), p.decision)?,
            },
        })
    }

    pub fn lookup(store: &ParamStore, prefix: &str, kind: HeadKind) -> Result<Self> {
        let feature_net = MlpHandle::lookup(store, &format!("{prefix}.feature_net"), 1, Activation::Relu)?;
        let decision = LinearHandle::lookup(store, &format!("{prefix}.decision"))?;
        Ok(match kind {
            HeadKind::AppNet => HeadHandle::AppNet {
                feature_net,
                action_module: LstmHandle::lookup(store, &format!("{prefix}.action_module"))?,
                decision,
            },
            HeadKind::KeyNet => HeadHandle::KeyNet {
                feature_net,
                forward: LstmHandle::lookup(store, &format!("{prefix}.forward"))?,
                backward: LstmHandle::lookup(store, &format!("{prefix}.backward"))?,
                decision,
            },
        })
    }

    pub fn extract(&self, store: &ParamStore) -> HeadParams {
        match self {
            HeadHandle::AppNet {
                feature_net,
                action_module,
                decision,
            } => HeadParams::AppNet(AppNetParams {
                feature_net: feature_net.extract(store),
                action_module: action_module.extract(store),
                decision: decision.extract(store),
            }),
            HeadHandle::KeyNet {
                feature_net,
                forward,
                backward,
                decision,
            } => HeadParams::KeyNet(KeyNetParams {
                feature_net: feature_net.extract(store),
                forward: forward.extract(store),
                backward: backward.extract(store),
                decision: decision.extract(store),
            }),
        }
    }

    pub fn vars(&self, tape: &mut Tape, store: &ParamStore) -> HeadVars {
        match self {
            HeadHandle::AppNet {
                feature_net,
                action_module,
                decision,
            } => HeadVars::AppNet {
                feature_net: feature_net.vars(tape, store),
                action_module: action_module.vars(tape, store),
                decision: decision.vars(tape, store),
            },
            HeadHandle::KeyNet {
                feature_net,
                forward,
                backward,
                decision,
            } => HeadVars::KeyNet {
                feature_net: feature_net.vars(tape, store),
                forward: forward.vars(tape, store),
                backward: backward.vars(tape, store),
                decision: decision.vars(tape, store),
            },
        }
    }
}

#[derive(Clone, Debug)]
pub enum HeadVars {
    AppNet {
        feature_net: MlpVars,
        action_module: LstmVars,
        decision: LinearVars,
    },
    KeyNet {
        feature_net: MlpVars,
        forward: LstmVars,
        backward: LstmVars,
        decision: LinearVars,
    },
}

/// Final hidden states, before the decision layer.
pub struct HeadState {
    pub logits: Var,
    /// One state for AppNet; forward then backward for KeyNet.
    pub hidden: Vec<Var>,
}

impl HeadVars {
    pub fn constant(tape: &mut Tape, p: &HeadParams) -> Self {
        match p {
            HeadParams::AppNet(p) => HeadVars::AppNet {
                feature_net: MlpVars::constant(tape, &p.feature_net),
                action_module: LstmVars::constant(tape, &p.action_module),
                decision: LinearVars::constant(tape, &p.decision),
            },
            HeadParams::KeyNet(p) => HeadVars::KeyNet {
                feature_net: MlpVars::constant(tape, &p.feature_net),
                forward: LstmVars::constant(tape, &p.forward),
                backward: LstmVars::constant(tape, &p.backward),
                decision: LinearVars::constant(tape, &p.decision),
            },
        }
    }

    /// `reps` is s×width, one frame representation per row. The feature net
    /// output passes through tanh before the recurrent cell.
    pub fn forward(&self, tape: &mut Tape, reps: Var) -> Result<HeadState> {
        let s = tape.value(reps).rows();
        if s == 0 {
            return Err(Error::Empty("head input has no frames".into()));
        }
        match self {
            HeadVars::AppNet {
                feature_net,
                action_module,
                decision,
            } => {
                let f = feature_net.forward(tape, reps)?;
                let f = tape.tanh(f);
                let h = action_module.scan(tape, f, 0..s)?;
                Ok(HeadState {
                    logits: decision.forward(tape, h)?,
                    hidden: vec![h],
                })
            }
            HeadVars::KeyNet {
                feature_net,
                forward,
                backward,
                decision,
            } => {
                let f = feature_net.forward(tape, reps)?;
                let f = tape.tanh(f);
                let hf = forward.scan(tape, f, 0..s)?;
                let hb = backward.scan(tape, f, (0..s).rev())?;
                let both = tape.concat_cols(&[hf, hb])?;
                Ok(HeadState {
                    logits: decision.forward(tape, both)?,
                    hidden: vec![hf, hb],
                })
            }
        }
    }
}

fn reps_tensor(reps: &[Vec<f64>], width: usize) -> Result<Tensor2> {
    if reps.is_empty() {
        return Err(Error::Empty("sequence has no frames".into()));
    }
    if let Some(bad) = reps.iter().find(|r| r.len() != width) {
        return Err(Error::Shape(format!(
            "frame representation of width {} where {width} expected",
            bad.len()
        )));
    }
    Tensor2::from_vec(reps.len(), width, reps.concat())
}

fn run_head(p: &HeadParams, reps: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let width = match p {
        HeadParams::AppNet(a) => a.feature_net.in_dim(),
        HeadParams::KeyNet(k) => k.feature_net.in_dim(),
    }
    .ok_or_else(|| Error::Shape("feature net has no layers".into()))?;
    let x = reps_tensor(reps, width)?;
    let mut tape = Tape::new();
    let vars = HeadVars::constant(&mut tape, p);
    let x = tape.constant(x);
    let st = vars.forward(&mut tape, x)?;
    let logits = tape.value(st.logits).data().to_vec();
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("head logits".into()));
    }
    let hidden = st.hidden.iter().map(|&h| tape.value(h).data().to_vec()).collect();
    Ok((logits, hidden))
}

pub fn appnet_forward(p: &AppNetParams, reps: &[Vec<f64>]) -> Result<Vec<f64>> {
    Ok(run_head(&HeadParams::AppNet(p.clone()), reps)?.0)
}

pub fn keynet_forward(p: &KeyNetParams, reps: &[Vec<f64>]) -> Result<Vec<f64>> {
    Ok(run_head(&HeadParams::KeyNet(p.clone()), reps)?.0)
}

/// Final forward and backward hidden states of KeyNet.
pub fn keynet_states(p: &KeyNetParams, reps: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let (_, mut h) = run_head(&HeadParams::KeyNet(p.clone()), reps)?;
    let hb = h.pop().expect("two states");
    let hf = h.pop().expect("two states");
    Ok((hf, hb))
}

pub fn head_forward(p: &HeadParams, reps: &[Vec<f64>]) -> Result<Vec<f64>> {
    Ok(run_head(p, reps)?.0)
}

/// Arg-max label (lowest index on ties) and its softmax probability.
pub fn classify(logits: &[f64]) -> Result<(usize, f64)> {
    let p = softmax(logits)?;
    let label = crate::ngsa::argmax(logits).expect("non-empty after softmax");
    Ok((label, p[label]))
}
