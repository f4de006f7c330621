use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::EspPct;
use crate::config::PipelineConfig;
use crate::cost::{count_flops, count_params, FlopReport, InputShape, ParamReport};
use crate::error::{Error, Result};
use crate::pointcloud::LabeledDataset;

/// Fraction of a voxel's points that must be semantic for it to count as pure.
pub const PURITY_THRESHOLD: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Empty in cost-only mode.
    pub top1_accuracy: Option<f64>,
    /// Rows are true labels, columns predictions.
    pub confusion: Vec<Vec<u64>>,
    pub samples: usize,
    pub mean_loss: Option<f64>,
    /// Share of frames whose selected region is a pure semantic voxel.
    pub region_purity: Option<f64>,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub flops: FlopReport,
    pub params: ParamReport,
}

impl Metrics {
    /// FLOPs and parameters only.
    pub fn cost_only(cfg: &PipelineConfig, shape: InputShape) -> Result<Self> {
        Ok(Self {
            top1_accuracy: None,
            confusion: Vec::new(),
            samples: 0,
            mean_loss: None,
            region_purity: None,
            train_loss: Vec::new(),
            val_loss: Vec::new(),
            flops: count_flops(cfg, shape)?,
            params: count_params(cfg)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model: EspPct,
    pub best_val_loss: f64,
    /// Number of epochs that ran.
    pub stopped_epoch: usize,
}

impl TrainedModel {
    pub fn config(&self) -> &PipelineConfig {
        self.model.config()
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.model.save(
            path,
            Some(serde_json::json!({
                "best_val_loss": self.best_val_loss,
                "stopped_epoch": self.stopped_epoch,
            })),
        )
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let (model, meta) = EspPct::load(path)?;
        Ok(Self {
            model,
            best_val_loss: meta["best_val_loss"].as_f64().unwrap_or(f64::INFINITY),
            stopped_epoch: meta["stopped_epoch"].as_u64().unwrap_or(0) as usize,
        })
    }
}

/// Mean frame count, point count and non-empty voxel count over a dataset,
/// rounded to the nearest integer.
pub fn dataset_shape(cfg: &PipelineConfig, ds: &LabeledDataset) -> Result<InputShape> {
    let (mut frames, mut points, mut groups) = (0usize, 0usize, 0usize);
    let mut frame_count = 0usize;
    for seq in &ds.sequences {
        frames += seq.frames.len();
        for f in &seq.frames {
            frame_count += 1;
            points += f.len();
            if !f.is_empty() {
                groups += crate::ngsa::group_points(f, &cfg.grouping)?.len();
            }
        }
    }
    if ds.is_empty() || frame_count == 0 {
        return Ok(InputShape::new(0, 0));
    }
    let avg = |total: usize, n: usize| (total as f64 / n as f64).round() as u64;
    Ok(InputShape {
        frames: avg(frames, ds.len()),
        points: avg(points, frame_count),
        groups: Some(avg(groups, frame_count)),
    })
}

fn check_labels(model: &EspPct, ds: &LabeledDataset) -> Result<()> {
    let classes = model.config().head.classes();
    if ds.class_names.len() > classes {
        return Err(Error::InvalidConfig(format!(
            "dataset has {} classes but the head predicts {classes}",
            ds.class_names.len()
        )));
    }
    ds.validate()
}

/// Mean cross-entropy over a dataset.
pub fn mean_loss(model: &EspPct, ds: &LabeledDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Empty(format!("{} split is empty", ds.split.as_str())));
    }
    let mut sum = 0.0;
    for (seq, label) in ds.sequences.iter().zip(ds.labels()) {
        sum += model.cross_entropy(seq, label)?;
    }
    Ok(sum / ds.len() as f64)
}

/// Plain SGD with early stopping on validation cross-entropy. Returns the
/// parameters of the best validation epoch and metrics on the validation split.
pub fn train(cfg: &PipelineConfig, train_ds: &LabeledDataset, val_ds: &LabeledDataset) -> Result<(TrainedModel, Metrics)> {
    train_observed(cfg, train_ds, val_ds, |_| {})
}

/// Per-epoch progress passed to the observer of [`train_observed`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub best_val_loss: f64,
}

/// [`train`] with a callback after every epoch.
pub fn train_observed(
    cfg: &PipelineConfig,
    train_ds: &LabeledDataset,
    val_ds: &LabeledDataset,
    mut on_epoch: impl FnMut(EpochLog),
) -> Result<(TrainedModel, Metrics)> {
    cfg.validate()?;
    if train_ds.is_empty() || val_ds.is_empty() {
        return Err(Error::Empty("train and validation splits must be non-empty".into()));
    }
    let tc = &cfg.training;
    let mut model = EspPct::new(cfg.clone(), tc.seed)?;
    check_labels(&model, train_ds)?;
    check_labels(&model, val_ds)?;
    let labels = train_ds.labels();

    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train_ds.len()).collect();
    let mut best_val = f64::INFINITY;
    let mut best_store = model.store().clone();
    let mut stale = 0usize;
    let mut stopped_epoch = 0usize;
    let (mut train_curve, mut val_curve) = (Vec::new(), Vec::new());

    for epoch in 1..=tc.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(tc.batch_size) {
            model.store_mut().zero_grads();
            for &i in batch {
                epoch_loss += model.accumulate_grad(&train_ds.sequences[i], labels[i])?.cross_entropy;
            }
            let store = model.store_mut();
            store.scale_grads(1.0 / batch.len() as f64);
            let norm = store.grad_norm();
            if !norm.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient norm in epoch {epoch}")));
            }
            if let Some(clip) = tc.grad_clip {
                if norm > clip {
                    store.scale_grads(clip / norm);
                }
            }
            store.sgd_step(tc.learning_rate);
        }
        train_curve.push(epoch_loss / train_ds.len() as f64);
        let val = mean_loss(&model, val_ds)?;
        val_curve.push(val);
        stopped_epoch = epoch;
        if val < best_val {
            best_val = val;
            best_store = model.store().clone();
            stale = 0;
        } else {
            stale += 1;
        }
        on_epoch(EpochLog {
            epoch,
            train_loss: *train_curve.last().expect("pushed above"),
            val_loss: val,
            best_val_loss: best_val,
        });
        if stale >= tc.patience {
            break;
        }
    }
    model.store_mut().copy_values_from(&best_store)?;
    model.store_mut().zero_grads();
    let trained = TrainedModel {
        model,
        best_val_loss: best_val,
        stopped_epoch,
    };
    let mut metrics = evaluate(&trained, val_ds)?;
    metrics.train_loss = train_curve;
    metrics.val_loss = val_curve;
    Ok((trained, metrics))
}

/// Top-1, confusion, mean loss and region purity on `ds`.
pub fn evaluate(trained: &TrainedModel, ds: &LabeledDataset) -> Result<Metrics> {
    let model = &trained.model;
    check_labels(model, ds)?;
    let cfg = model.config();
    let classes = cfg.head.classes();
    let mut confusion = vec![vec![0u64; classes]; classes];
    let (mut loss, mut pure, mut regions) = (0.0, 0usize, 0usize);
    for (seq, label) in ds.sequences.iter().zip(ds.labels()) {
        let (traces, pred) = model.predict_traced(seq)?;
        confusion[label][pred.label] += 1;
        loss += model.cross_entropy(seq, label)?;
        let Some(mask) = seq.semantic_mask() else { continue };
        for (tr, frame_mask) in traces.iter().zip(&mask) {
            let (Some(region), Some(grouping)) = (&tr.focus.region, &tr.grouping) else {
                continue;
            };
            let members = &grouping.groups[region.region_index].members;
            let semantic = members.iter().filter(|&&i| frame_mask.get(i) == Some(&true)).count();
            regions += 1;
            if semantic as f64 >= PURITY_THRESHOLD * members.len() as f64 {
                pure += 1;
            }
        }
    }
    let correct: u64 = (0..classes).map(|c| confusion[c][c]).sum();
    let n = ds.len();
    let mut metrics = Metrics::cost_only(cfg, dataset_shape(cfg, ds)?)?;
    metrics.top1_accuracy = (n > 0).then(|| correct as f64 / n as f64);
    metrics.confusion = confusion;
    metrics.samples = n;
    metrics.mean_loss = (n > 0).then(|| loss / n as f64);
    metrics.region_purity = (regions > 0).then(|| pure as f64 / regions as f64);
    Ok(metrics)
}
