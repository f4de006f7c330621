use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    attention_stack_forward, frame_features, random_stack, stack_on_tape, AttentionOutput, LayerHandle,
    LayerVars, VectorAttentionLayer,
};
use crate::config::PipelineConfig;
use crate::cost::count_params;
use crate::error::{Error, Result};
use crate::focus::{focus_stage, FocusOutput};
use crate::heads::{classify, head_forward, HeadHandle, HeadParams};
use crate::ngsa::{group_mean, group_points, group_sum, ngsa_scores, Decision, Grouping, NgsaScores};
use crate::numerics::checkpoint::{read_checkpoint, write_checkpoint};
use crate::numerics::{cross_entropy_value, ParamId, ParamStore, Tape, Tensor2, Var};
use crate::pointcloud::{Frame, Sequence};

const W_NAME: &str = "ngsa.w";

fn layer_prefix(l: usize) -> String {
    format!("attention.{l}")
}

/// Everything the localization and focus stages decided for one frame.
#[derive(Clone, Debug)]
pub struct FrameTrace {
    pub attention: Option<AttentionOutput>,
    pub grouping: Option<Grouping>,
    pub scores: Option<NgsaScores>,
    pub focus: FocusOutput,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: usize,
    pub confidence: f64,
    pub logits: Vec<f64>,
}

/// Discrete choices made on the way to the loss, per frame.
pub type SelectionSignature = Vec<(Vec<usize>, Option<(usize, Decision)>)>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LossPart {
    Total,
    CrossEntropy,
    Aux,
}

/// Loss terms of one labeled sequence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub cross_entropy: f64,
    pub aux: f64,
}

/// Parameter values pulled out of the store for a constant forward pass.
struct Snapshot {
    layers: Vec<VectorAttentionLayer>,
    w: Vec<f64>,
    head: HeadParams,
}

/// The full model: attention stack, NGSA vector `w` and a recognition head,
/// all held in one parameter store.
#[derive(Clone, Debug)]
pub struct EspPct {
    config: PipelineConfig,
    pub(crate) store: ParamStore,
    layers: Vec<LayerHandle>,
    w: ParamId,
    head: HeadHandle,
}

impl EspPct {
    /// Random initialization, deterministic in `seed`.
    pub fn new(config: PipelineConfig, seed: u64) -> Result<Self> {
        config.validate_model()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut layers = Vec::new();
        for (l, layer) in random_stack(&config.attention, &mut rng).into_iter().enumerate() {
            layers.push(LayerHandle::register(&mut store, &layer_prefix(l), layer)?);
        }
        let d = config.attention.d_attention;
        let bound = (3.0 / d as f64).sqrt();
        let w: Vec<f64> = (0..d).map(|_| rand::Rng::gen_range(&mut rng, -bound..bound)).collect();
        let w = store.add(W_NAME, Tensor2::row_vector(w))?;
        let width = config.focus.width() * d;
        let head = HeadHandle::register(&mut store, "head", HeadParams::random(&config.head, width, &mut rng))?;
        Ok(Self {
            config,
            store,
            layers,
            w,
            head,
        })
    }

    /// Rebuilds a model around existing parameters, checking names and sizes.
    pub fn from_store(config: PipelineConfig, store: ParamStore) -> Result<Self> {
        config.validate_model()?;
        let layers = (0..config.attention.layers)
            .map(|l| LayerHandle::lookup(&store, &layer_prefix(l), config.attention.mlp_depth))
            .collect::<Result<Vec<_>>>()?;
        let w = store.expect_id(W_NAME)?;
        let head = HeadHandle::lookup(&store, "head", config.head.kind)?;
        let expected = count_params(&config)?.total as usize;
        if store.scalar_count() != expected || store.value(w).shape() != (1, config.attention.d_attention) {
            return Err(Error::Checkpoint(format!(
                "store holds {} scalars, config implies {expected}",
                store.scalar_count()
            )));
        }
        let model = Self {
            config,
            store,
            layers,
            w,
            head,
        };
        let snap = model.snapshot();
        for l in &snap.layers {
            l.validate()?;
        }
        for (l, layer) in snap.layers.iter().enumerate() {
            if layer.d_in() != model.config.attention.layer_input(l)
                || layer.d_attention() != model.config.attention.d_attention
            {
                return Err(Error::Checkpoint(format!("attention layer {l} has the wrong shape")));
            }
        }
        Ok(model)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    pub fn attention_layers(&self) -> Vec<VectorAttentionLayer> {
        self.layers.iter().map(|h| h.extract(&self.store)).collect()
    }

    pub fn w(&self) -> Vec<f64> {
        self.store.value(self.w).data().to_vec()
    }

    pub fn head_params(&self) -> HeadParams {
        self.head.extract(&self.store)
    }

    fn snapshot(&self) -> Snapshot {
        Snapshot {
            layers: self.attention_layers(),
            w: self.w(),
            head: self.head_params(),
        }
    }

    /// Writes parameters with the config (and `extra`) as checkpoint metadata.
    pub fn save(&self, path: impl AsRef<Path>, extra: Option<serde_json::Value>) -> Result<()> {
        let mut meta = serde_json::json!({ "config": self.config });
        if let Some(serde_json::Value::Object(m)) = extra {
            for (k, v) in m {
                meta[k] = v;
            }
        }
        write_checkpoint(path, &self.store, Some(meta))
    }

    /// Loads a checkpoint written by [`EspPct::save`]; returns the metadata too.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, serde_json::Value)> {
        let (store, meta) = read_checkpoint(path)?;
        let meta = meta.ok_or_else(|| Error::Checkpoint("checkpoint has no metadata".into()))?;
        let cfg = meta
            .get("config")
            .ok_or_else(|| Error::Checkpoint("checkpoint metadata has no config".into()))?;
        let config: PipelineConfig = serde_json::from_value(cfg.clone())?;
        Ok((Self::from_store(config, store)?, meta))
    }

    fn trace_with(&self, snap: &Snapshot, frame: &Frame) -> Result<FrameTrace> {
        let width = self.config.focus.width();
        let d = self.config.attention.d_attention;
        if frame.is_empty() {
            return Ok(FrameTrace {
                attention: None,
                grouping: None,
                scores: None,
                focus: FocusOutput::empty(width, d),
            });
        }
        let att = attention_stack_forward(&snap.layers, frame, self.config.attention.k_nn)?;
        let grouping = group_points(frame, &self.config.grouping)?;
        let scores = if self.config.focus.ablation.no_attention_score {
            let intensity: Vec<f64> = frame.points.iter().map(|p| p.intensity).collect();
            NgsaScores {
                sum_scores: group_sum(&intensity, &grouping)?,
                global_scores: group_mean(&intensity, &grouping)?,
                w: snap.w.clone(),
            }
        } else {
            ngsa_scores(&att, &grouping, &snap.w)?
        };
        let focus = focus_stage(frame, &att, &scores, &grouping, &self.config.focus)?;
        Ok(FrameTrace {
            attention: Some(att),
            grouping: Some(grouping),
            scores: Some(scores),
            focus,
        })
    }

    /// Localization and focus for a single frame.
    pub fn trace_frame(&self, frame: &Frame) -> Result<FrameTrace> {
        self.trace_with(&self.snapshot(), frame)
    }

    pub fn trace_sequence(&self, seq: &Sequence) -> Result<Vec<FrameTrace>> {
        let snap = self.snapshot();
        seq.frames.iter().map(|f| self.trace_with(&snap, f)).collect()
    }

    /// Frame traces plus the head's prediction.
    pub fn predict_traced(&self, seq: &Sequence) -> Result<(Vec<FrameTrace>, Prediction)> {
        if seq.frames.is_empty() {
            return Err(Error::Empty("sequence has no frames".into()));
        }
        let snap = self.snapshot();
        let traces: Vec<FrameTrace> = seq
            .frames
            .iter()
            .map(|f| self.trace_with(&snap, f))
            .collect::<Result<_>>()?;
        let reps: Vec<Vec<f64>> = traces.iter().map(|t| t.focus.representation.clone()).collect();
        let logits = head_forward(&snap.head, &reps)?;
        let (label, confidence) = classify(&logits)?;
        Ok((
            traces,
            Prediction {
                label,
                confidence,
                logits,
            },
        ))
    }

    pub fn predict(&self, seq: &Sequence) -> Result<Prediction> {
        Ok(self.predict_traced(seq)?.1)
    }

    fn check_label(&self, label: usize) -> Result<()> {
        let classes = self.config.head.classes();
        if label >= classes {
            return Err(Error::InvalidConfig(format!(
                "label {label} outside the head's {classes} classes"
            )));
        }
        Ok(())
    }

    /// Records the training objective on `tape` with parameters as leaves.
    /// Selections in `traces` enter as fixed index choices.
    fn loss_on_tape(&self, tape: &mut Tape, seq: &Sequence, label: usize, traces: &[FrameTrace]) -> Result<(Var, Var, Option<Var>)> {
        let cfg = &self.config;
        let d = cfg.attention.d_attention;
        let width = cfg.focus.width();
        let layer_vars: Vec<LayerVars> = self.layers.iter().map(|h| h.vars(tape, &self.store)).collect();
        let w = tape.param(&self.store, self.w);
        let head = self.head.vars(tape, &self.store);

        let mut rows = Vec::with_capacity(traces.len());
        let mut aux_terms = Vec::new();
        for (frame, tr) in seq.frames.iter().zip(traces) {
            let sel = &tr.focus.selected_indices;
            let Some(att) = &tr.attention else {
                rows.push(tape.constant(Tensor2::zeros(1, width * d)));
                continue;
            };
            let row = if sel.is_empty() {
                tape.constant(Tensor2::zeros(1, width * d))
            } else {
                let (y, _) = stack_on_tape(
                    tape,
                    &layer_vars,
                    &frame_features(frame),
                    &frame.positions(),
                    &att.neighbors,
                    sel,
                )?;
                let flat = tape.reshape(y, 1, sel.len() * d)?;
                if sel.len() < width {
                    let pad = tape.constant(Tensor2::zeros(1, (width - sel.len()) * d));
                    tape.concat_cols(&[flat, pad])?
                } else {
                    flat
                }
            };
            rows.push(row);

            if cfg.training.aux_weight > 0.0
                && !cfg.focus.ablation.no_grouping
                && !cfg.focus.ablation.no_attention_score
            {
                let grouping = tr.grouping.as_ref().expect("grouping accompanies attention");
                let scores = tr.scores.as_ref().expect("scores accompany attention");
                let mass: f64 = scores.sum_scores.iter().sum();
                let target: Vec<f64> = scores.sum_scores.iter().map(|s| s / mass).collect();
                let y = tape.constant(att.features.clone());
                let contrib = tape.matmul_t(y, w)?;
                let g = tape.group_mean(contrib, grouping.member_lists())?;
                let g = tape.reshape(g, 1, grouping.len())?;
                aux_terms.push(tape.soft_cross_entropy(g, target)?);
            }
        }
        let reps = tape.concat_rows(&rows)?;
        let logits = head.forward(tape, reps)?.logits;
        let ce = tape.cross_entropy(logits, label)?;
        let aux = if aux_terms.is_empty() {
            None
        } else {
            let n = aux_terms.len();
            let all = tape.concat_cols(&aux_terms)?;
            let s = tape.sum(all);
            Some(tape.scale(s, cfg.training.aux_weight / n as f64))
        };
        let total = match aux {
            Some(a) => tape.add(ce, a)?,
            None => ce,
        };
        Ok((total, ce, aux))
    }

    fn record(&self, seq: &Sequence, label: usize) -> Result<(Tape, Var, LossValue, Vec<FrameTrace>)> {
        self.check_label(label)?;
        if seq.frames.is_empty() {
            return Err(Error::Empty("sequence has no frames".into()));
        }
        let traces = self.trace_sequence(seq)?;
        let mut tape = Tape::new();
        let (total, ce, aux) = self.loss_on_tape(&mut tape, seq, label, &traces)?;
        let value = LossValue {
            total: tape.scalar(total),
            cross_entropy: tape.scalar(ce),
            aux: aux.map_or(0.0, |a| tape.scalar(a)),
        };
        if !value.total.is_finite() {
            return Err(Error::Numeric(format!("non-finite training loss {}", value.total)));
        }
        Ok((tape, total, value, traces))
    }

    /// Training objective without gradients.
    pub fn loss(&self, seq: &Sequence, label: usize) -> Result<LossValue> {
        Ok(self.record(seq, label)?.2)
    }

    /// Objective plus the discrete choices behind it and the relu sign pattern.
    pub fn loss_with_signature(&self, seq: &Sequence, label: usize) -> Result<(f64, (SelectionSignature, Vec<bool>))> {
        let (tape, _, value, traces) = self.record(seq, label)?;
        let sig = traces
            .iter()
            .map(|t| {
                (
                    t.focus.selected_indices.clone(),
                    t.focus.region.map(|r| (r.region_index, r.decision)),
                )
            })
            .collect();
        Ok((value.total, (sig, tape.relu_pattern())))
    }

    fn record_part(
        &self,
        seq: &Sequence,
        label: usize,
        traces: &[FrameTrace],
        part: LossPart,
    ) -> Result<(Tape, Option<Var>)> {
        self.check_label(label)?;
        if traces.len() != seq.frames.len() {
            return Err(Error::Shape("one trace per frame expected".into()));
        }
        let mut tape = Tape::new();
        let (total, ce, aux) = self.loss_on_tape(&mut tape, seq, label, traces)?;
        let var = match part {
            LossPart::Total => Some(total),
            LossPart::CrossEntropy => Some(ce),
            LossPart::Aux => aux,
        };
        Ok((tape, var))
    }

    /// One loss term with selections and auxiliary targets taken from
    /// `traces` instead of recomputed, plus the relu sign pattern. A missing
    /// auxiliary term evaluates to zero.
    pub fn loss_with_traces(
        &self,
        seq: &Sequence,
        label: usize,
        traces: &[FrameTrace],
        part: LossPart,
    ) -> Result<(f64, Vec<bool>)> {
        let (tape, var) = self.record_part(seq, label, traces, part)?;
        Ok((var.map_or(0.0, |v| tape.scalar(v)), tape.relu_pattern()))
    }

    /// Gradient of one loss term under fixed `traces`, added to the store.
    pub fn accumulate_part_grad(
        &mut self,
        seq: &Sequence,
        label: usize,
        traces: &[FrameTrace],
        part: LossPart,
    ) -> Result<f64> {
        let (tape, var) = self.record_part(seq, label, traces, part)?;
        let Some(v) = var else { return Ok(0.0) };
        tape.backward(v, &mut self.store)?;
        Ok(tape.scalar(v))
    }

    /// Adds the gradient of the objective to the store's gradient buffers.
    pub fn accumulate_grad(&mut self, seq: &Sequence, label: usize) -> Result<LossValue> {
        let (tape, total, value, _) = self.record(seq, label)?;
        tape.backward(total, &mut self.store)?;
        Ok(value)
    }

    /// Cross-entropy of the head's prediction.
    pub fn cross_entropy(&self, seq: &Sequence, label: usize) -> Result<f64> {
        self.check_label(label)?;
        let p = self.predict(seq)?;
        let ce = cross_entropy_value(&p.logits, label);
        if !ce.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {ce}")));
        }
        Ok(ce)
    }
}
