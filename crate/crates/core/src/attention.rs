//! kNN neighborhoods and the vector attention layer.
//!
//! For point i with neighborhood N(i):
//!
//! ```text
//! logits_ij = γ(φ(x_i) − ψ(x_j) + δ(p_i − p_j))
//! a_ij      = softmax_j(logits_ij)          (per channel)
//! y_i       = Σ_j a_ij ⊙ α(x_j)
//! ```
//!
//! The forward pass is written once against the [`Tape`]; inference records
//! the weights as constants. Every output row depends only on its own
//! neighborhood and is computed in a fixed order, so evaluating a subset of
//! queries reproduces the full pass bit for bit.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    Activation, LinearHandle, LinearParams, LinearVars, MlpHandle, MlpParams, MlpVars, ParamStore,
    Tape, Tensor2, Var,
};
use crate::pointcloud::{Frame, POINT_FEATURES};

/// Neighbor lists, self first, then by (squared distance, index).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborIndex {
    k: usize,
    lists: Vec<Vec<usize>>,
}

impl NeighborIndex {
    /// Neighbors per point, `min(k_nn, N)`.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }

    pub fn list(&self, i: usize) -> &[usize] {
        &self.lists[i]
    }

    pub fn lists(&self) -> &[Vec<usize>] {
        &self.lists
    }
}

fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

pub fn knn_positions(pos: &[[f64; 3]], k_nn: usize) -> Result<NeighborIndex> {
    if pos.is_empty() {
        return Err(Error::Empty("kNN over an empty frame".into()));
    }
    if k_nn == 0 {
        return Err(Error::InvalidConfig("k_nn must be at least 1".into()));
    }
    let k = k_nn.min(pos.len());
    let mut lists = Vec::with_capacity(pos.len());
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(pos.len());
    for (i, p) in pos.iter().enumerate() {
        order.clear();
        order.extend(
            pos.iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, q)| (sq_dist(p, q), j)),
        );
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k > 1 && k - 1 < order.len() {
            order.select_nth_unstable_by(k - 1, cmp);
            order.truncate(k - 1);
        }
        order.sort_by(cmp);
        let mut list = Vec::with_capacity(k);
        list.push(i);
        list.extend(order.iter().take(k - 1).map(|&(_, j)| j));
        lists.push(list);
    }
    Ok(NeighborIndex { k, lists })
}

pub fn knn_neighbors(frame: &Frame, k_nn: usize) -> Result<NeighborIndex> {
    knn_positions(&frame.positions(), k_nn)
}

/// Shape of the localization attention stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttentionConfig {
    pub layers: usize,
    pub d_attention: usize,
    pub k_nn: usize,
    /// Depth of the γ and δ MLPs.
    pub mlp_depth: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            d_attention: 32,
            k_nn: 16,
            mlp_depth: 2,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.d_attention == 0 || self.k_nn == 0 || self.mlp_depth == 0 {
            return Err(Error::InvalidConfig(format!(
                "attention layers, d_attention, k_nn and mlp_depth must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn layer_input(&self, layer: usize) -> usize {
        if layer == 0 {
            POINT_FEATURES
        } else {
            self.d_attention
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VectorAttentionLayer {
    pub phi: LinearParams,
    pub psi: LinearParams,
    pub alpha: LinearParams,
    pub gamma: MlpParams,
    pub delta: MlpParams,
}

impl VectorAttentionLayer {
    pub fn random<R: Rng + ?Sized>(d_in: usize, d_attention: usize, mlp_depth: usize, rng: &mut R) -> Self {
        let gamma_dims = vec![d_attention; mlp_depth + 1];
        let mut delta_dims = vec![d_attention; mlp_depth + 1];
        delta_dims[0] = 3;
        Self {
            phi: LinearParams::random(d_in, d_attention, rng),
            psi: LinearParams::random(d_in, d_attention, rng),
            alpha: LinearParams::random(d_in, d_attention, rng),
            gamma: MlpParams::random(&gamma_dims, Activation::Relu, rng),
            delta: MlpParams::random(&delta_dims, Activation::Relu, rng),
        }
    }

    pub fn d_in(&self) -> usize {
        self.phi.in_dim()
    }

    pub fn d_attention(&self) -> usize {
        self.phi.out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.phi.param_count()
            + self.psi.param_count()
            + self.alpha.param_count()
            + self.gamma.param_count()
            + self.delta.param_count()
    }

    pub fn validate(&self) -> Result<()> {
        let (d_in, d) = (self.d_in(), self.d_attention());
        let ok = self.psi.in_dim() == d_in
            && self.alpha.in_dim() == d_in
            && self.psi.out_dim() == d
            && self.alpha.out_dim() == d
            && self.gamma.in_dim() == Some(d)
            && self.gamma.out_dim() == Some(d)
            && self.delta.in_dim() == Some(3)
            && self.delta.out_dim() == Some(d);
        if !ok {
            return Err(Error::Shape(format!(
                "attention layer shapes do not chain (d_in {d_in}, d_attention {d})"
            )));
        }
        Ok(())
    }
}

/// Where a layer's parameters live in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerHandle {
    pub phi: LinearHandle,
    pub psi: LinearHandle,
    pub alpha: LinearHandle,
    pub gamma: MlpHandle,
    pub delta: MlpHandle,
}

impl LayerHandle {
    pub fn register(store: &mut ParamStore, prefix: &str, l: VectorAttentionLayer) -> Result<Self> {
        l.validate()?;
        Ok(Self {
            phi: LinearHandle::register(store, &format!("{prefix}.phi"), l.phi)?,
            psi: LinearHandle::register(store, &format!("{prefix}.psi"), l.psi)?,
            alpha: LinearHandle::register(store, &format!("{prefix}.alpha"), l.alpha)?,
            gamma: MlpHandle::register(store, &format!("{prefix}.gamma"), l.gamma)?,
            delta: MlpHandle::register(store, &format!("{prefix}.delta"), l.delta)?,
        })
    }

    pub fn lookup(store: &ParamStore, prefix: &str, mlp_depth: usize) -> Result<Self> {
        Ok(Self {
            phi: LinearHandle::lookup(store, &format!("{prefix}.phi"))?,
            psi: LinearHandle::lookup(store, &format!("{prefix}.psi"))?,
            alpha: LinearHandle::lookup(store, &format!("{prefix}.alpha"))?,
            gamma: MlpHandle::lookup(store, &format!("{prefix}.gamma"), mlp_depth, Activation::Relu)?,
            delta: MlpHandle::lookup(store, &format!("{prefix}.delta"), mlp_depth, Activation::Relu)?,
        })
    }

    pub fn extract(&self, store: &ParamStore) -> VectorAttentionLayer {
        VectorAttentionLayer {
            phi: self.phi.extract(store),
            psi: self.psi.extract(store),
            alpha: self.alpha.extract(store),
            gamma: self.gamma.extract(store),
            delta: self.delta.extract(store),
        }
    }

    pub fn vars(&self, tape: &mut Tape, store: &ParamStore) -> LayerVars {
        LayerVars {
            phi: self.phi.vars(tape, store),
            psi: self.psi.vars(tape, store),
            alpha: self.alpha.vars(tape, store),
            gamma: self.gamma.vars(tape, store),
            delta: self.delta.vars(tape, store),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerVars {
    pub phi: LinearVars,
    pub psi: LinearVars,
    pub alpha: LinearVars,
    pub gamma: MlpVars,
    pub delta: MlpVars,
}

impl LayerVars {
    pub fn constant(tape: &mut Tape, l: &VectorAttentionLayer) -> Self {
        Self {
            phi: LinearVars::constant(tape, &l.phi),
            psi: LinearVars::constant(tape, &l.psi),
            alpha: LinearVars::constant(tape, &l.alpha),
            gamma: MlpVars::constant(tape, &l.gamma),
            delta: MlpVars::constant(tape, &l.delta),
        }
    }
}

/// One layer on the tape.
///
/// `x` holds the input rows of the points listed in `rows` (global ids, in
/// that order). Outputs are produced for `queries` (global ids, each present
/// in `rows` along with its neighbors). Returns `(y, a)` where `y` is
/// |queries|×d and `a` is (|queries|·k)×d, neighbor-major per query.
pub(crate) fn layer_on_tape(
    tape: &mut Tape,
    lv: &LayerVars,
    x: Var,
    rows: &[usize],
    pos: &[[f64; 3]],
    nbrs: &NeighborIndex,
    queries: &[usize],
) -> Result<(Var, Var)> {
    let n = nbrs.len();
    let mut local = vec![usize::MAX; n];
    for (r, &g) in rows.iter().enumerate() {
        local[g] = r;
    }
    let k = nbrs.k();
    let mut q_local = Vec::with_capacity(queries.len());
    let mut rep = Vec::with_capacity(queries.len() * k);
    let mut nb_local = Vec::with_capacity(queries.len() * k);
    let mut rel = Vec::with_capacity(queries.len() * k * 3);
    for (qi, &i) in queries.iter().enumerate() {
        q_local.push(local[i]);
        for &j in nbrs.list(i) {
            if local[j] == usize::MAX {
                return Err(Error::Invariant(format!("neighbor {j} of {i} missing from layer input")));
            }
            rep.push(qi);
            nb_local.push(local[j]);
            let (pi, pj) = (pos[i], pos[j]);
            rel.extend_from_slice(&[pi[0] - pj[0], pi[1] - pj[1], pi[2] - pj[2]]);
        }
    }
    let xq = tape.gather_rows(x, q_local)?;
    let phi_q = lv.phi.forward(tape, xq)?;
    let psi_all = lv.psi.forward(tape, x)?;
    let alpha_all = lv.alpha.forward(tape, x)?;
    let phi_rep = tape.gather_rows(phi_q, rep)?;
    let psi_nb = tape.gather_rows(psi_all, nb_local.clone())?;
    let alpha_nb = tape.gather_rows(alpha_all, nb_local)?;
    let rel = tape.constant(Tensor2::from_vec(queries.len() * k, 3, rel)?);
    let bias = lv.delta.forward(tape, rel)?;
    let diff = tape.sub(phi_rep, psi_nb)?;
    let pre = tape.add(diff, bias)?;
    let logits = lv.gamma.forward(tape, pre)?;
    let a = tape.segment_softmax(logits, k)?;
    let weighted = tape.mul(a, alpha_nb)?;
    let y = tape.segment_sum(weighted, k)?;
    Ok((y, a))
}

/// Query sets per layer so that the last layer covers `queries`: each layer
/// must produce every point the next layer reads. Index 0 is the input rows.
pub(crate) fn support_plan(nbrs: &NeighborIndex, depth: usize, queries: &[usize]) -> Vec<Vec<usize>> {
    let mut plan = vec![Vec::new(); depth + 1];
    plan[depth] = queries.to_vec();
    for l in (0..depth).rev() {
        let mut set = BTreeSet::new();
        for &i in &plan[l + 1] {
            set.extend(nbrs.list(i).iter().copied());
        }
        plan[l] = set.into_iter().collect();
    }
    plan
}

/// Runs a stack on the tape for the given final queries (ascending global ids).
/// Returns the final features for those queries and each layer's weights.
pub(crate) fn stack_on_tape(
    tape: &mut Tape,
    layers: &[LayerVars],
    features: &Tensor2,
    pos: &[[f64; 3]],
    nbrs: &NeighborIndex,
    queries: &[usize],
) -> Result<(Var, Vec<Var>)> {
    let depth = layers.len();
    let plan = support_plan(nbrs, depth, queries);
    let mut input = Vec::with_capacity(plan[0].len() * features.cols());
    for &i in &plan[0] {
        input.extend_from_slice(features.row(i));
    }
    let mut x = tape.constant(Tensor2::from_vec(plan[0].len(), features.cols(), input)?);
    let mut weights = Vec::with_capacity(depth);
    for (l, lv) in layers.iter().enumerate() {
        let (y, a) = layer_on_tape(tape, lv, x, &plan[l], pos, nbrs, &plan[l + 1])?;
        x = y;
        weights.push(a);
    }
    Ok((x, weights))
}

/// Result of the attention stack on one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput {
    /// N×d_attention, the y_i.
    pub features: Tensor2,
    /// (N·k)×d_attention; row `i·k + r` is a_ij for j = `neighbors.list(i)[r]`.
    pub weights: Tensor2,
    pub neighbors: NeighborIndex,
    /// Channel-averaged incoming attention mass per point.
    pub point_scores: Vec<f64>,
    /// Weights of every layer before the last, same layout as `weights`.
    pub earlier_weights: Vec<Tensor2>,
}

impl AttentionOutput {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn d_attention(&self) -> usize {
        self.features.cols()
    }

    /// a_ij for the r-th neighbor of i.
    pub fn weight(&self, i: usize, r: usize) -> &[f64] {
        self.weights.row(i * self.neighbors.k() + r)
    }
}

/// Channel-averaged incoming mass: `score[j] = mean_c Σ_{i : j ∈ N(i)} a_ij[c]`.
pub fn incoming_mass(weights: &Tensor2, nbrs: &NeighborIndex) -> Vec<f64> {
    let k = nbrs.k();
    let d = weights.cols() as f64;
    let mut scores = vec![0.0; nbrs.len()];
    for i in 0..nbrs.len() {
        for (r, &j) in nbrs.list(i).iter().enumerate() {
            let s: f64 = weights.row(i * k + r).iter().sum();
            scores[j] += s / d;
        }
    }
    scores
}

pub fn frame_features(frame: &Frame) -> Tensor2 {
    let data = frame.points.iter().flat_map(|p| p.features()).collect();
    Tensor2::from_vec(frame.len(), POINT_FEATURES, data).expect("5 features per point")
}

fn stack_forward_inner(
    layers: &[VectorAttentionLayer],
    features: &Tensor2,
    pos: &[[f64; 3]],
    nbrs: NeighborIndex,
) -> Result<AttentionOutput> {
    if layers.is_empty() {
        return Err(Error::InvalidConfig("attention stack has no layers".into()));
    }
    let mut width = features.cols();
    for (l, layer) in layers.iter().enumerate() {
        layer.validate()?;
        if layer.d_in() != width {
            return Err(Error::Shape(format!(
                "layer {l} expects width {} but receives {width}",
                layer.d_in()
            )));
        }
        width = layer.d_attention();
    }
    if nbrs.len() != features.rows() || pos.len() != features.rows() {
        return Err(Error::Shape("neighbor index and frame disagree on N".into()));
    }
    let mut tape = Tape::new();
    let vars: Vec<LayerVars> = layers.iter().map(|l| LayerVars::constant(&mut tape, l)).collect();
    let all: Vec<usize> = (0..features.rows()).collect();
    let (y, a) = stack_on_tape(&mut tape, &vars, features, pos, &nbrs, &all)?;
    let features = tape.value(y).clone();
    features.ensure_finite("attention features")?;
    let mut weights: Vec<Tensor2> = a.iter().map(|&v| tape.value(v).clone()).collect();
    let last = weights.pop().expect("at least one layer");
    last.ensure_finite("attention weights")?;
    let point_scores = incoming_mass(&last, &nbrs);
    Ok(AttentionOutput {
        features,
        weights: last,
        neighbors: nbrs,
        point_scores,
        earlier_weights: weights,
    })
}

pub fn vector_attention_forward(
    layer: &VectorAttentionLayer,
    frame: &Frame,
    nbrs: &NeighborIndex,
) -> Result<AttentionOutput> {
    let feats = frame_features(frame);
    stack_forward_inner(
        std::slice::from_ref(layer),
        &feats,
        &frame.positions(),
        nbrs.clone(),
    )
}

pub fn attention_stack_forward(
    layers: &[VectorAttentionLayer],
    frame: &Frame,
    k_nn: usize,
) -> Result<AttentionOutput> {
    let nbrs = knn_neighbors(frame, k_nn)?;
    stack_forward_inner(layers, &frame_features(frame), &frame.positions(), nbrs)
}

/// Random stack following `cfg`.
pub fn random_stack<R: Rng + ?Sized>(cfg: &AttentionConfig, rng: &mut R) -> Vec<VectorAttentionLayer> {
    (0..cfg.layers)
        .map(|l| VectorAttentionLayer::random(cfg.layer_input(l), cfg.d_attention, cfg.mlp_depth, rng))
        .collect()
}
