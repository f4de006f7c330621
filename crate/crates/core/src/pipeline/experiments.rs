use std::path::Path;

use serde::Serialize;

use super::train::{dataset_shape, evaluate, train, Metrics};
use crate::config::{PipelineConfig, Preset};
use crate::cost::{csv_err, finish_csv, InputShape};
use crate::error::{Error, Result};
use crate::focus::{Ablation, AblationKind};
use crate::pointcloud::{load_dataset, LabeledDataset, Split, MANIFEST_FILE};

/// Train, validation and test splits.
#[derive(Clone, Debug)]
pub struct DataSplits {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
}

impl DataSplits {
    /// Reads `<dir>/train`, `<dir>/val` and `<dir>/test`.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let get = |s: Split| load_dataset(dir.join(s.as_str()));
        Ok(Self {
            train: get(Split::Train)?,
            val: get(Split::Val)?,
            test: get(Split::Test)?,
        })
    }
}

/// Dataset for evaluation: `dir` itself if it holds a manifest, else its test split.
pub fn load_eval_dataset(dir: impl AsRef<Path>) -> Result<LabeledDataset> {
    let dir = dir.as_ref();
    if dir.join(MANIFEST_FILE).exists() {
        load_dataset(dir)
    } else {
        load_dataset(dir.join(Split::Test.as_str()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProfileRow {
    pub config: String,
    pub top_k: usize,
    pub eta: f64,
    pub metrics: Metrics,
    pub best_val_loss: Option<f64>,
    pub stopped_epoch: Option<usize>,
}

fn shape_for(cfg: &PipelineConfig, data: Option<&DataSplits>) -> Result<InputShape> {
    match data {
        Some(d) => dataset_shape(cfg, &d.test),
        None => Ok(InputShape::new(
            cfg.synth.frames_per_sequence as u64,
            cfg.synth.points_per_frame as u64,
        )),
    }
}

fn run_cell(label: String, cfg: &PipelineConfig, data: Option<&DataSplits>) -> Result<ProfileRow> {
    cfg.validate()?;
    let shape = shape_for(cfg, data)?;
    let (metrics, best, stopped) = match data {
        None => (Metrics::cost_only(cfg, shape)?, None, None),
        Some(d) => {
            let (model, _) = train(cfg, &d.train, &d.val)?;
            (evaluate(&model, &d.test)?, Some(model.best_val_loss), Some(model.stopped_epoch))
        }
    };
    Ok(ProfileRow {
        config: label,
        top_k: cfg.focus.top_k,
        eta: cfg.focus.eta,
        metrics,
        best_val_loss: best,
        stopped_epoch: stopped,
    })
}

fn cell_label(cfg: &PipelineConfig) -> String {
    format!("k={} eta={}", cfg.focus.top_k, cfg.focus.eta)
}

/// One row per grid cell. Without data only the cost columns are filled.
pub fn profile(cfg: &PipelineConfig, grid: &[Preset], data: Option<&DataSplits>) -> Result<Vec<ProfileRow>> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("profile grid is empty".into()));
    }
    grid.iter()
        .map(|p| {
            let mut c = cfg.clone();
            c.focus.top_k = p.top_k;
            c.focus.eta = p.eta;
            run_cell(cell_label(&c), &c, data)
        })
        .collect()
}

/// The four single-flag ablations followed by the full model.
pub fn ablate(cfg: &PipelineConfig, data: Option<&DataSplits>) -> Result<Vec<ProfileRow>> {
    AblationKind::ALL
        .iter()
        .map(|&kind| {
            let mut c = cfg.clone();
            c.focus.ablation = kind.flags();
            let label = if c.focus.ablation == Ablation::default() {
                cell_label(&c)
            } else {
                kind.as_str().to_string()
            };
            run_cell(label, &c, data)
        })
        .collect()
}

/// Parses `k,eta` lines; blank lines, `#` comments and a `top_k,eta` header are skipped.
pub fn parse_grid(text: &str) -> Result<Vec<Preset>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("top_k") || line.starts_with('k') {
            continue;
        }
        let bad = |msg: &str| Error::Parse {
            line: i + 1,
            msg: msg.to_string(),
        };
        let (k, eta) = line.split_once(',').ok_or_else(|| bad("expected `k,eta`"))?;
        let top_k: usize = k.trim().parse().map_err(|_| bad("top_k is not an integer"))?;
        let eta: f64 = eta.trim().parse().map_err(|_| bad("eta is not a number"))?;
        out.push(Preset { top_k, eta });
    }
    if out.is_empty() {
        return Err(Error::InvalidConfig("grid has no entries".into()));
    }
    Ok(out)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// CSV with one row per profile or ablation result.
pub fn rows_csv(rows: &[ProfileRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "config",
        "top_k",
        "eta",
        "top1_accuracy",
        "region_purity",
        "flops_total",
        "flops_attention",
        "flops_ngsa",
        "flops_focus",
        "flops_head",
        "params_total",
        "params_attention",
        "params_ngsa",
        "params_head",
        "best_val_loss",
        "stopped_epoch",
    ])
    .map_err(csv_err)?;
    for r in rows {
        let (f, p) = (&r.metrics.flops, &r.metrics.params);
        w.write_record([
            r.config.clone(),
            r.top_k.to_string(),
            r.eta.to_string(),
            fmt_opt(r.metrics.top1_accuracy),
            fmt_opt(r.metrics.region_purity),
            f.total.to_string(),
            f.attention.to_string(),
            f.ngsa.to_string(),
            f.focus.to_string(),
            f.head.to_string(),
            p.total.to_string(),
            p.attention.to_string(),
            p.ngsa.to_string(),
            p.head.to_string(),
            fmt_opt(r.best_val_loss),
            r.stopped_epoch.map(|e| e.to_string()).unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    finish_csv(w)
}
