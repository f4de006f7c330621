//! Point-cloud data model, sequence files, the synthetic generator and
//! occlusion models.

mod dataset;
mod io;
mod occlusion;
mod synth;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{load_dataset, split_dataset, write_dataset, LabeledDataset, Manifest, Split, MANIFEST_FILE};
pub use io::{load_sequence, parse_sequence, read_sequence, render_sequence, write_sequence, HEADER};
pub use occlusion::{apply_occlusion, occlude_dataset, OcclusionModel, OcclusionPreset};
pub use synth::{centroid_oracle_accuracy, synth_generate, SceneBounds, SynthConfig};

/// Meta key holding per-frame ground-truth membership (`1` semantic, `0` noise),
/// frames separated by commas.
pub const SEMANTIC_MASK_KEY: &str = "semantic_mask";

/// Number of raw features per point: x, y, z, velocity, intensity.
pub const POINT_FEATURES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub velocity: f64,
    pub intensity: f64,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64, velocity: f64, intensity: f64) -> Self {
        Self {
            x,
            y,
            z,
            velocity,
            intensity,
        }
    }

    pub fn position(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn features(&self) -> [f64; POINT_FEATURES] {
        [self.x, self.y, self.z, self.velocity, self.intensity]
    }

    pub fn validate(&self) -> Result<()> {
        if !self.features().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("point {self:?}")));
        }
        if self.intensity < 0.0 {
            return Err(Error::Invariant(format!(
                "negative intensity {}",
                self.intensity
            )));
        }
        Ok(())
    }

    fn bits(&self) -> [u64; POINT_FEATURES] {
        self.features().map(f64::to_bits)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub timestamp_index: u64,
    pub points: Vec<Point>,
}

impl Frame {
    pub fn new(timestamp_index: u64, points: Vec<Point>) -> Self {
        Self {
            timestamp_index,
            points,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> Vec<[f64; 3]> {
        self.points.iter().map(Point::position).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Sequence {
    pub frames: Vec<Frame>,
    pub label: Option<usize>,
    pub meta: BTreeMap<String, String>,
}

impl Sequence {
    pub fn validate(&self) -> Result<()> {
        for pair in self.frames.windows(2) {
            if pair[1].timestamp_index <= pair[0].timestamp_index {
                return Err(Error::Invariant(format!(
                    "timestamps must strictly increase ({} then {})",
                    pair[0].timestamp_index, pair[1].timestamp_index
                )));
            }
        }
        for f in &self.frames {
            for p in &f.points {
                p.validate()?;
            }
        }
        for (k, v) in &self.meta {
            if k.is_empty() || k.contains(['=', '\n', '\r']) || k.starts_with(char::is_whitespace) {
                return Err(Error::Invariant(format!("unusable meta key {k:?}")));
            }
            if v.contains(['\n', '\r']) {
                return Err(Error::Invariant(format!("meta value for {k} spans lines")));
            }
        }
        Ok(())
    }

    /// Bitwise equality of every stored value (distinguishes `-0.0` from `0.0`).
    pub fn bit_eq(&self, other: &Sequence) -> bool {
        self.label == other.label
            && self.meta == other.meta
            && self.frames.len() == other.frames.len()
            && self.frames.iter().zip(&other.frames).all(|(a, b)| {
                a.timestamp_index == b.timestamp_index
                    && a.points.len() == b.points.len()
                    && a.points.iter().zip(&b.points).all(|(p, q)| p.bits() == q.bits())
            })
    }

    /// Ground-truth semantic membership per frame, when the sequence carries it.
    pub fn semantic_mask(&self) -> Option<Vec<Vec<bool>>> {
        let raw = self.meta.get(SEMANTIC_MASK_KEY)?;
        let frames: Vec<Vec<bool>> = if raw.is_empty() && self.frames.len() <= 1 {
            vec![Vec::new(); self.frames.len()]
        } else {
            raw.split(',')
                .map(|f| f.chars().map(|c| c == '1').collect())
                .collect()
        };
        let consistent = frames.len() == self.frames.len()
            && frames.iter().zip(&self.frames).all(|(m, f)| m.len() == f.len());
        consistent.then_some(frames)
    }

    pub fn set_semantic_mask(&mut self, mask: &[Vec<bool>]) {
        let encoded = mask
            .iter()
            .map(|f| f.iter().map(|&b| if b { '1' } else { '0' }).collect::<String>())
            .collect::<Vec<_>>()
            .join(",");
        self.meta.insert(SEMANTIC_MASK_KEY.to_string(), encoded);
    }
}
