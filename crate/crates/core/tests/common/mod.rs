//! Shared helpers for integration tests: random inputs and a dense,
//! loop-only reference for one vector-attention layer.
#![allow(dead_code)]

use esppct::attention::{NeighborIndex, VectorAttentionLayer};
use esppct::numerics::{Activation, LinearParams, MlpParams, Tensor2};
use esppct::pointcloud::{Frame, Point, Sequence};
use rand::Rng;

pub fn random_frame<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Frame {
    let points = (0..n)
        .map(|_| {
            Point::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(0.0..2.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(0.0..1.0),
            )
        })
        .collect();
    Frame::new(0, points)
}

/// True when no two pairs of points share a squared distance, so kNN lists
/// do not depend on index tie-breaks.
pub fn distances_distinct(frame: &Frame) -> bool {
    let pos = frame.positions();
    let mut d = Vec::new();
    for i in 0..pos.len() {
        for j in i + 1..pos.len() {
            d.push(sq_dist(pos[i], pos[j]));
        }
    }
    d.sort_by(f64::total_cmp);
    d.windows(2).all(|w| w[1] - w[0] > 1e-9)
}

pub fn sq_dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|c| (a[c] - b[c]) * (a[c] - b[c])).sum()
}

pub fn random_sequence<R: Rng + ?Sized>(frames: usize, max_points: usize, rng: &mut R) -> Sequence {
    let frames = (0..frames)
        .map(|t| {
            let n = rng.gen_range(0..=max_points);
            let mut f = random_frame(n, rng);
            f.timestamp_index = t as u64 * 2 + rng.gen_range(0..2);
            f
        })
        .collect();
    Sequence {
        frames,
        label: Some(rng.gen_range(0..5)),
        meta: Default::default(),
    }
}

fn random_linear<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> LinearParams {
    let w = (0..d_in * d_out).map(|_| rng.gen_range(-0.8..0.8)).collect();
    let b = (0..d_out).map(|_| rng.gen_range(-0.3..0.3)).collect();
    LinearParams::new(Tensor2::from_vec(d_out, d_in, w).unwrap(), b).unwrap()
}

fn random_mlp<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> MlpParams {
    let layers = dims.windows(2).map(|w| random_linear(w[0], w[1], rng)).collect();
    MlpParams::new(layers, Activation::Relu).unwrap()
}

/// A layer with nonzero biases everywhere.
pub fn random_layer<R: Rng + ?Sized>(d_in: usize, d: usize, depth: usize, rng: &mut R) -> VectorAttentionLayer {
    let mut delta_dims = vec![d; depth + 1];
    delta_dims[0] = 3;
    VectorAttentionLayer {
        phi: random_linear(d_in, d, rng),
        psi: random_linear(d_in, d, rng),
        alpha: random_linear(d_in, d, rng),
        gamma: random_mlp(&vec![d; depth + 1], rng),
        delta: random_mlp(&delta_dims, rng),
    }
}

fn affine(p: &LinearParams, x: &[f64]) -> Vec<f64> {
    let (rows, cols) = p.weight.shape();
    let mut out = vec![0.0; rows];
    for o in 0..rows {
        let mut s = p.bias[o];
        for i in 0..cols {
            s += p.weight.get(o, i) * x[i];
        }
        out[o] = s;
    }
    out
}

fn mlp(p: &MlpParams, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for (l, layer) in p.layers.iter().enumerate() {
        h = affine(layer, &h);
        if l + 1 < p.layers.len() {
            for v in &mut h {
                *v = v.max(0.0);
            }
        }
    }
    h
}

/// Dense vector attention written directly from its definition:
/// `a_ij = softmax_j γ(φ(x_i) − ψ(x_j) + δ(p_i − p_j))` per channel over the
/// neighbor list of i, and `y_i = Σ_j a_ij ⊙ α(x_j)`.
/// Returns (y, a) with `a[i][r]` the weights of the r-th neighbor.
pub fn dense_attention(
    layer: &VectorAttentionLayer,
    frame: &Frame,
    nbrs: &NeighborIndex,
) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let x: Vec<Vec<f64>> = frame.points.iter().map(|p| p.features().to_vec()).collect();
    let pos = frame.positions();
    let d = layer.d_attention();
    let mut ys = Vec::new();
    let mut all_a = Vec::new();
    for i in 0..x.len() {
        let phi_i = affine(&layer.phi, &x[i]);
        let logits: Vec<Vec<f64>> = nbrs
            .list(i)
            .iter()
            .map(|&j| {
                let psi_j = affine(&layer.psi, &x[j]);
                let rel = [pos[i][0] - pos[j][0], pos[i][1] - pos[j][1], pos[i][2] - pos[j][2]];
                let delta = mlp(&layer.delta, &rel);
                let pre: Vec<f64> = (0..d).map(|c| phi_i[c] - psi_j[c] + delta[c]).collect();
                mlp(&layer.gamma, &pre)
            })
            .collect();
        let mut a = vec![vec![0.0; d]; logits.len()];
        for c in 0..d {
            let m = logits.iter().map(|l| l[c]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l[c] - m).exp()).sum();
            for (r, l) in logits.iter().enumerate() {
                a[r][c] = (l[c] - m).exp() / z;
            }
        }
        let mut y = vec![0.0; d];
        for (r, &j) in nbrs.list(i).iter().enumerate() {
            let v = affine(&layer.alpha, &x[j]);
            for c in 0..d {
                y[c] += a[r][c] * v[c];
            }
        }
        ys.push(y);
        all_a.push(a);
    }
    (ys, all_a)
}

/// kNN by full sort on (squared distance, index); self is forced first.
pub fn brute_knn(frame: &Frame, k: usize) -> Vec<Vec<usize>> {
    let pos = frame.positions();
    let k = k.min(pos.len());
    (0..pos.len())
        .map(|i| {
            let mut others: Vec<usize> = (0..pos.len()).filter(|&j| j != i).collect();
            others.sort_by(|&a, &b| {
                sq_dist(pos[i], pos[a])
                    .total_cmp(&sq_dist(pos[i], pos[b]))
                    .then(a.cmp(&b))
            });
            let mut l = vec![i];
            l.extend(others.into_iter().take(k.saturating_sub(1)));
            l
        })
        .collect()
}

/// Full-sort reference for top-K: order by (score desc, index asc), keep k,
/// return ascending indices.
pub fn top_k_oracle(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort();
    idx
}

/// Linear scan; the first maximum wins.
pub fn argmax_oracle(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Score vector with deliberate repeats drawn from a small value pool.
pub fn tied_scores<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let pool: Vec<f64> = (0..rng.gen_range(1..=4)).map(|_| rng.gen_range(-2.0..2.0)).collect();
    (0..n)
        .map(|_| {
            if rng.gen_bool(0.5) {
                pool[rng.gen_range(0..pool.len())]
            } else {
                rng.gen_range(-2.0..2.0)
            }
        })
        .collect()
}
