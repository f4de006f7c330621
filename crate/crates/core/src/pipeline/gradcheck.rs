use serde::Serialize;

use super::model::{EspPct, LossPart};
use crate::config::PipelineConfig;
use crate::error::Result;
use crate::heads::HeadKind;
use crate::numerics::gradcheck::DEFAULT_EPS;
use crate::numerics::{compare_gradients, finite_diff_grad_guarded, GradCheckReport, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::pointcloud::{Frame, Point, Sequence, SynthConfig};

pub const GRADCHECK_TOL: f64 = 1e-4;

/// Which objective is probed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    /// Cross-entropy through the whole pipeline. Selections are recomputed
    /// at every probe and probes that change them are skipped.
    Live,
    /// The auxiliary group-mass term with its stop-gradient inputs held at
    /// their unperturbed values.
    Aux,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckRun {
    pub head: HeadKind,
    pub mode: ProbeMode,
    pub params: usize,
    pub report: GradCheckReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckSummary {
    pub runs: Vec<GradcheckRun>,
}

impl GradcheckSummary {
    pub fn passed(&self) -> bool {
        self.runs.iter().all(|r| r.report.passed() && r.report.checked > 0)
    }
}

/// Shrinks `base` to the toy sizes: 12 points per frame, 3 frames, K = 4,
/// width-8 attention and a width-6 head. Layer count, MLP depth, grouping,
/// eta and ablation flags are kept.
pub fn toy_config(base: &PipelineConfig, kind: HeadKind, seed: u64) -> PipelineConfig {
    let mut cfg = base.clone();
    cfg.attention.d_attention = 8;
    cfg.attention.k_nn = 4;
    cfg.focus.top_k = 4;
    cfg.focus.max_points = 12;
    cfg.head.kind = kind;
    cfg.head.hidden = Some(6);
    cfg.synth = SynthConfig {
        classes: 2,
        sequences_per_class: 1,
        frames_per_sequence: 3,
        points_per_frame: 12,
        semantic_cluster_points: 9,
        noise_points: 3,
        seed,
        ..SynthConfig::default()
    };
    cfg
}

/// Random frames in a half-meter cube around the origin, features in [-1, 1].
pub fn toy_sequence(cfg: &PipelineConfig, seed: u64) -> Sequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = (0..cfg.synth.frames_per_sequence)
        .map(|t| {
            let points = (0..cfg.synth.points_per_frame)
                .map(|_| {
                    let mut u = || rng.gen_range(-1.0..1.0);
                    Point::new(0.25 * u(), 0.25 * u(), 0.25 * u(), u(), u())
                })
                .collect();
            Frame::new(t as u64, points)
        })
        .collect();
    Sequence {
        frames,
        label: Some(1),
        meta: Default::default(),
    }
}

/// Moves every parameter off its initial value so that zero biases do not
/// place relu inputs exactly on the kink.
fn jitter(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
}

/// SGD steps on the toy sequence before the live probe. A small loss keeps
/// its rounding error small relative to eps.
const WARMUP_STEPS: usize = 60;

fn warm_up(model: &mut EspPct, seq: &Sequence, label: usize) -> Result<()> {
    for _ in 0..WARMUP_STEPS {
        let store = model.store_mut();
        store.zero_grads();
        model.accumulate_grad(seq, label)?;
        let store = model.store_mut();
        let norm = store.grad_norm();
        if norm > 1.0 {
            store.scale_grads(1.0 / norm);
        }
        store.sgd_step(0.2);
    }
    model.store_mut().zero_grads();
    Ok(())
}

fn check_one(base: &PipelineConfig, kind: HeadKind, mode: ProbeMode, seed: u64) -> Result<GradcheckRun> {
    let mut cfg = toy_config(base, kind, seed);
    cfg.training.aux_weight = match mode {
        ProbeMode::Live => 0.0,
        ProbeMode::Aux => 1.0,
    };
    let seq = toy_sequence(&cfg, seed);
    let label = 1;
    let mut model = EspPct::new(cfg, seed)?;
    jitter(model.store_mut(), seed);
    let mut values = model.store().clone();
    let numeric = match mode {
        ProbeMode::Live => {
            warm_up(&mut model, &seq, label)?;
            model.accumulate_grad(&seq, label)?;
            values.copy_values_from(model.store())?;
            let mut probe = model.clone();
            finite_diff_grad_guarded(
                |store| {
                    probe.store_mut().copy_values_from(store)?;
                    probe.loss_with_signature(&seq, label)
                },
                &mut values,
                DEFAULT_EPS,
            )?
            .0
        }
        ProbeMode::Aux => {
            let traces = model.trace_sequence(&seq)?;
            model.store_mut().zero_grads();
            model.accumulate_part_grad(&seq, label, &traces, LossPart::Aux)?;
            let mut probe = model.clone();
            finite_diff_grad_guarded(
                |store| {
                    probe.store_mut().copy_values_from(store)?;
                    probe.loss_with_traces(&seq, label, &traces, LossPart::Aux)
                },
                &mut values,
                DEFAULT_EPS,
            )?
            .0
        }
    };
    Ok(GradcheckRun {
        head: kind,
        mode,
        params: model.param_count(),
        report: compare_gradients(model.store(), &numeric, GRADCHECK_TOL),
    })
}

/// Central differences against the analytic gradient for both heads and both
/// probe modes. Probes that flip a relu sign, a point selection or a region
/// decision are skipped and counted.
pub fn gradcheck(base: &PipelineConfig, seed: u64) -> Result<GradcheckSummary> {
    let mut runs = Vec::new();
    for kind in [HeadKind::AppNet, HeadKind::KeyNet] {
        for mode in [ProbeMode::Live, ProbeMode::Aux] {
            runs.push(check_one(base, kind, mode, seed)?);
        }
    }
    Ok(GradcheckSummary { runs })
}
