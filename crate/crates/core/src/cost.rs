//! Closed-form FLOP and parameter accounting. Every constant is listed in
//! COST.md at the repository root.

use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::focus::FocusConfig;
use crate::heads::{HeadConfig, HeadKind};

/// `2·n·d_in·d_out` for the products plus `n·d_out` bias adds.
pub fn linear_flops(n: u64, d_in: u64, d_out: u64, bias: bool) -> u64 {
    2 * n * d_in * d_out + if bias { n * d_out } else { 0 }
}

/// Linear layers over `dims` with one elementwise activation between layers.
pub fn mlp_flops(n: u64, dims: &[u64]) -> u64 {
    let mut total = 0;
    for (i, w) in dims.windows(2).enumerate() {
        total += linear_flops(n, w[0], w[1], true);
        if i + 2 < dims.len() {
            total += n * w[1];
        }
    }
    total
}

pub fn linear_params(d_in: u64, d_out: u64) -> u64 {
    d_in * d_out + d_out
}

pub fn mlp_params(dims: &[u64]) -> u64 {
    dims.windows(2).map(|w| linear_params(w[0], w[1])).sum()
}

/// Softmax over `m` entries: max, subtract, exp, sum, divide.
pub fn softmax_flops(m: u64) -> u64 {
    5 * m
}

/// A single-head dense self-attention block over `n` tokens of width `d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseAttentionFlops {
    /// Q, K, V and output projections; linear in `n`.
    pub projections: u64,
    /// Scores `QKᵀ`, their softmax and the weighted sum of values; quadratic in `n`.
    pub quadratic: u64,
}

impl DenseAttentionFlops {
    pub fn total(&self) -> u64 {
        self.projections + self.quadratic
    }
}

pub fn dense_attention_flops(n: u64, d: u64) -> DenseAttentionFlops {
    DenseAttentionFlops {
        projections: 4 * linear_flops(n, d, d, true),
        quadratic: 2 * n * n * d + softmax_flops(n * n) + 2 * n * n * d,
    }
}

/// Extent of the input being costed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    /// s
    pub frames: u64,
    /// N per frame
    pub points: u64,
    /// Occupied voxels per frame; worst case (one per point) when absent.
    pub groups: Option<u64>,
}

impl InputShape {
    pub fn new(frames: u64, points: u64) -> Self {
        Self {
            frames,
            points,
            groups: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopReport {
    pub attention: u64,
    pub ngsa: u64,
    pub focus: u64,
    pub head: u64,
    pub total: u64,
    pub frames: u64,
    pub points: u64,
    /// Points per frame seen by the head (K, or the no-top-K width).
    pub head_points: u64,
    pub d_attention: u64,
}

impl FlopReport {
    pub fn components(&self) -> [(&'static str, u64); 4] {
        [
            ("attention", self.attention),
            ("ngsa", self.ngsa),
            ("focus", self.focus),
            ("head", self.head),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    pub attention: u64,
    pub ngsa: u64,
    pub focus: u64,
    pub head: u64,
    pub total: u64,
}

fn attention_params(cfg: &AttentionConfig) -> u64 {
    let d = cfg.d_attention as u64;
    let depth = cfg.mlp_depth;
    (0..cfg.layers)
        .map(|l| {
            let d_in = cfg.layer_input(l) as u64;
            let gamma = vec![d; depth + 1];
            let mut delta = vec![d; depth + 1];
            delta[0] = 3;
            3 * linear_params(d_in, d) + mlp_params(&gamma) + mlp_params(&delta)
        })
        .sum()
}

fn lstm_params(d_in: u64, h: u64) -> u64 {
    4 * h * d_in + 4 * h * h + 4 * h
}

fn head_params(head: &HeadConfig, input_width: u64) -> u64 {
    let h = head.hidden() as u64;
    let c = head.classes() as u64;
    let features = linear_params(input_width, h);
    match head.kind {
        HeadKind::AppNet => features + lstm_params(h, h) + linear_params(h, c),
        HeadKind::KeyNet => features + 2 * lstm_params(h, h) + linear_params(2 * h, c),
    }
}

pub fn count_params(cfg: &PipelineConfig) -> Result<ParamReport> {
    cfg.validate_model()?;
    let d = cfg.attention.d_attention as u64;
    let attention = attention_params(&cfg.attention);
    let ngsa = d;
    let head = head_params(&cfg.head, cfg.focus.width() as u64 * d);
    Ok(ParamReport {
        attention,
        ngsa,
        focus: 0,
        head,
        total: attention + ngsa + head,
    })
}

/// Per-frame cost of the attention stack on `n` points.
fn attention_frame_flops(cfg: &AttentionConfig, n: u64) -> u64 {
    if n == 0 {
        return 0;
    }
    let d = cfg.d_attention as u64;
    let k = (cfg.k_nn as u64).min(n);
    let p = n * k;
    // all pairwise squared distances: 3 sub, 3 mul, 2 add
    let mut total = 8 * n * n;
    for l in 0..cfg.layers {
        let d_in = cfg.layer_input(l) as u64;
        let gamma = vec![d; cfg.mlp_depth + 1];
        let mut delta = vec![d; cfg.mlp_depth + 1];
        delta[0] = 3;
        total += 3 * linear_flops(n, d_in, d, true); // φ, ψ, α
        total += 3 * p; // relative positions
        total += mlp_flops(p, &delta);
        total += 2 * p * d; // φ − ψ + δ
        total += mlp_flops(p, &gamma);
        total += softmax_flops(p * d);
        total += 2 * p * d; // a ⊙ α and the neighborhood sum
    }
    // incoming mass: channel sum, divide, accumulate
    total += p * d + 2 * p;
    total
}

/// Per-frame cost of grouping, group scores and the region decision.
fn ngsa_frame_flops(focus: &FocusConfig, n: u64, g: u64, d: u64) -> u64 {
    if n == 0 {
        return 0;
    }
    let ab = &focus.ablation;
    let cells = 6 * n; // subtract origin, divide by cell size
    let contributions = 2 * n * d; // y_iᵀ w
    let sums = n; // group sums of point scores
    let means = n + g; // member sums and divisions
    let decision = softmax_flops(g) + g; // softmax and max
    if ab.no_grouping {
        contributions
    } else if ab.no_attention_score {
        // group means of raw intensity stand in for the learned scores
        cells + sums + means + decision
    } else if ab.no_highest_group {
        cells + contributions + sums + means
    } else {
        cells + contributions + sums + means + decision
    }
}

fn lstm_sequence_flops(s: u64, d_in: u64, h: u64) -> u64 {
    // input projection for all steps, then per step: recurrent product, two
    // adds, four gate nonlinearities and the five cell/hidden updates
    linear_flops(s, d_in, 4 * h, false) + s * (2 * h * 4 * h + 4 * h + 4 * h + 4 * h + 5 * h)
}

fn head_flops(head: &HeadConfig, s: u64, input_width: u64) -> u64 {
    if s == 0 {
        return 0;
    }
    let h = head.hidden() as u64;
    let c = head.classes() as u64;
    let features = linear_flops(s, input_width, h, true) + s * h; // + tanh
    let (recurrent, decision_in) = match head.kind {
        HeadKind::AppNet => (lstm_sequence_flops(s, h, h), h),
        HeadKind::KeyNet => (2 * lstm_sequence_flops(s, h, h), 2 * h),
    };
    features + recurrent + linear_flops(1, decision_in, c, true) + softmax_flops(c)
}

pub fn count_flops(cfg: &PipelineConfig, shape: InputShape) -> Result<FlopReport> {
    cfg.validate_model()?;
    let d = cfg.attention.d_attention as u64;
    let (s, n) = (shape.frames, shape.points);
    let g = shape.groups.unwrap_or(n).min(n);
    if shape.groups.is_some_and(|g| g == 0 && n > 0) {
        return Err(Error::InvalidConfig("a non-empty frame has at least one group".into()));
    }
    let width = cfg.focus.width() as u64;
    let empty = s == 0 || n == 0;
    let attention = s * attention_frame_flops(&cfg.attention, n);
    let ngsa = s * ngsa_frame_flops(&cfg.focus, n, g, d);
    let focus = s * n; // one comparison per ranked point
    let head = if empty { 0 } else { head_flops(&cfg.head, s, width * d) };
    Ok(FlopReport {
        attention,
        ngsa,
        focus,
        head,
        total: attention + ngsa + focus + head,
        frames: s,
        points: n,
        head_points: width,
        d_attention: d,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reduction {
    pub total: f64,
    pub attention: f64,
    pub ngsa: f64,
    pub focus: f64,
    pub head: f64,
}

fn ratio(full: u64, pruned: u64) -> f64 {
    if full == 0 {
        0.0
    } else {
        1.0 - pruned as f64 / full as f64
    }
}

/// `1 − pruned/full`, overall and per component (0 where the full component is 0).
pub fn reduction_ratio(full: &FlopReport, pruned: &FlopReport) -> Result<Reduction> {
    if full.total == 0 {
        return Err(Error::Numeric("full report has zero FLOPs".into()));
    }
    Ok(Reduction {
        total: ratio(full.total, pruned.total),
        attention: ratio(full.attention, pruned.attention),
        ngsa: ratio(full.ngsa, pruned.ngsa),
        focus: ratio(full.focus, pruned.focus),
        head: ratio(full.head, pruned.head),
    })
}

/// The process-everything reference: no top-K truncation and no grouping.
pub fn baseline_config(cfg: &PipelineConfig) -> PipelineConfig {
    let mut b = cfg.clone();
    b.focus.ablation = crate::focus::Ablation {
        no_top_k: true,
        no_grouping: true,
        ..Default::default()
    };
    b
}

/// Header and rows for a flat CSV view of a report pair.
pub fn cost_csv(rows: &[(String, FlopReport, ParamReport)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "config",
        "frames",
        "points",
        "head_points",
        "d_attention",
        "flops_attention",
        "flops_ngsa",
        "flops_focus",
        "flops_head",
        "flops_total",
        "params_attention",
        "params_ngsa",
        "params_head",
        "params_total",
    ])
    .map_err(csv_err)?;
    for (name, f, p) in rows {
        w.write_record([
            name.clone(),
            f.frames.to_string(),
            f.points.to_string(),
            f.head_points.to_string(),
            f.d_attention.to_string(),
            f.attention.to_string(),
            f.ngsa.to_string(),
            f.focus.to_string(),
            f.head.to_string(),
            f.total.to_string(),
            p.attention.to_string(),
            p.ngsa.to_string(),
            p.head.to_string(),
            p.total.to_string(),
        ])
        .map_err(csv_err)?;
    }
    finish_csv(w)
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Invariant(format!("csv: {e}"))
}

pub(crate) fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Invariant(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::focus::Ablation;

    #[test]
    fn unit_conventions() {
        assert_eq!(linear_flops(1, 1, 1, false), 2);
        assert_eq!(linear_params(5, 32), 192);
        assert_eq!(mlp_params(&[]), 0);
        assert_eq!(mlp_params(&[7]), 0);
        assert_eq!(softmax_flops(4), 20);
        assert_eq!(mlp_flops(2, &[3, 4, 5]), linear_flops(2, 3, 4, true) + 8 + linear_flops(2, 4, 5, true));
    }

    #[test]
    fn dense_quadratic_ratio_is_nine_percent() {
        for d in [1, 8, 32, 64] {
            let r = dense_attention_flops(30, d).quadratic as f64 / dense_attention_flops(100, d).quadratic as f64;
            assert_eq!(r, 0.09);
        }
    }

    #[test]
    fn empty_input_costs_nothing() {
        let cfg = PipelineConfig::default();
        for shape in [InputShape::new(25, 0), InputShape::new(0, 100)] {
            let r = count_flops(&cfg, shape).unwrap();
            assert_eq!(r.total, 0);
            assert!(r.components().iter().all(|c| c.1 == 0));
        }
    }

    #[test]
    fn total_is_sum_of_components() {
        let cfg = PipelineConfig::default();
        let r = count_flops(&cfg, InputShape::new(25, 100)).unwrap();
        assert_eq!(r.total, r.components().iter().map(|c| c.1).sum::<u64>());
        let p = count_params(&cfg).unwrap();
        assert_eq!(p.total, p.attention + p.ngsa + p.focus + p.head);
    }

    #[test]
    fn doubling_width_more_than_doubles_attention_params() {
        let mut a = PipelineConfig::default();
        let small = count_params(&a).unwrap().attention;
        a.attention.d_attention *= 2;
        assert!(count_params(&a).unwrap().attention > 2 * small);
    }

    #[test]
    fn reduction_examples() {
        let cfg = PipelineConfig::default();
        let r = count_flops(&cfg, InputShape::new(25, 100)).unwrap();
        assert_eq!(reduction_ratio(&r, &r).unwrap().total, 0.0);
        let half = FlopReport {
            attention: r.attention / 2,
            ngsa: r.ngsa / 2,
            focus: r.focus / 2,
            head: r.head / 2,
            total: r.total / 2,
            ..r.clone()
        };
        let full = FlopReport { total: half.total * 2, ..r.clone() };
        assert_eq!(reduction_ratio(&full, &half).unwrap().total, 0.5);
        let zero = count_flops(&cfg, InputShape::new(0, 0)).unwrap();
        assert!(reduction_ratio(&zero, &r).is_err());
    }

    #[test]
    fn pruning_is_cheaper_than_the_baseline() {
        let cfg = PipelineConfig::default();
        let shape = InputShape::new(25, 100);
        let full = count_flops(&baseline_config(&cfg), shape).unwrap();
        let pruned = count_flops(&cfg, shape).unwrap();
        assert!(full.total > pruned.total);
        assert!(full.head > pruned.head);
        let mut no_top_k = cfg.clone();
        no_top_k.focus.ablation = Ablation { no_top_k: true, ..Default::default() };
        assert!(count_flops(&no_top_k, shape).unwrap().total > pruned.total);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let cfg = PipelineConfig::default();
        let f = count_flops(&cfg, InputShape::new(25, 100)).unwrap();
        let p = count_params(&cfg).unwrap();
        let text = cost_csv(&[("default".into(), f, p)]).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with("config,frames"));
    }
}
