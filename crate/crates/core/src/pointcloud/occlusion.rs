use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::synth::SceneBounds;
use super::{LabeledDataset, Point, Sequence};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OcclusionPreset {
    None,
    Wood,
    Brick,
    Combined,
    Custom,
}

impl OcclusionPreset {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Wood => "wood",
            Self::Brick => "brick",
            Self::Combined => "combined",
            Self::Custom => "custom",
        }
    }
}

impl std::str::FromStr for OcclusionPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "wood" => Ok(Self::Wood),
            "brick" => Ok(Self::Brick),
            "combined" => Ok(Self::Combined),
            "custom" => Ok(Self::Custom),
            other => Err(Error::InvalidConfig(format!("unknown occlusion preset {other:?}"))),
        }
    }
}

/// Point dropout, positional jitter, intensity attenuation and uniform clutter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcclusionModel {
    pub name: OcclusionPreset,
    pub dropout_prob: f64,
    pub clutter_points: usize,
    pub position_jitter_sigma: f64,
    pub intensity_attenuation: f64,
    #[serde(default)]
    pub scene: SceneBounds,
}

impl OcclusionModel {
    fn with(name: OcclusionPreset, dropout_prob: f64, clutter_points: usize) -> Self {
        let occluded = name != OcclusionPreset::None;
        Self {
            name,
            dropout_prob,
            clutter_points,
            position_jitter_sigma: if occluded { 0.01 } else { 0.0 },
            intensity_attenuation: if occluded { 0.8 } else { 1.0 },
            scene: SceneBounds::default(),
        }
    }

    pub fn none() -> Self {
        Self::with(OcclusionPreset::None, 0.0, 0)
    }

    pub fn wood() -> Self {
        Self::with(OcclusionPreset::Wood, 0.15, 10)
    }

    pub fn brick() -> Self {
        Self::with(OcclusionPreset::Brick, 0.30, 20)
    }

    pub fn combined() -> Self {
        Self::with(OcclusionPreset::Combined, 0.40, 30)
    }

    pub fn preset(p: OcclusionPreset) -> Result<Self> {
        match p {
            OcclusionPreset::None => Ok(Self::none()),
            OcclusionPreset::Wood => Ok(Self::wood()),
            OcclusionPreset::Brick => Ok(Self::brick()),
            OcclusionPreset::Combined => Ok(Self::combined()),
            OcclusionPreset::Custom => Err(Error::InvalidConfig(
                "custom occlusion has no preset values".into(),
            )),
        }
    }

    /// The four named scenarios from least to most severe.
    pub fn ladder() -> [Self; 4] {
        [Self::none(), Self::wood(), Self::brick(), Self::combined()]
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.dropout_prob) {
            return Err(Error::InvalidConfig(format!(
                "dropout_prob {} outside [0, 1]",
                self.dropout_prob
            )));
        }
        if !(self.position_jitter_sigma.is_finite() && self.position_jitter_sigma >= 0.0) {
            return Err(Error::InvalidConfig("position_jitter_sigma must be >= 0".into()));
        }
        if !(self.intensity_attenuation > 0.0 && self.intensity_attenuation <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "intensity_attenuation {} outside (0, 1]",
                self.intensity_attenuation
            )));
        }
        if self.name == OcclusionPreset::None && *self != Self::none() {
            return Err(Error::InvalidConfig(
                "preset `none` must not drop, jitter, attenuate or add points".into(),
            ));
        }
        self.scene.validate()
    }
}

/// Degrades every frame of `seq`. Ground-truth masks in the sequence meta are
/// kept aligned: dropped points leave the mask, clutter enters as noise.
pub fn apply_occlusion(seq: &Sequence, model: &OcclusionModel, seed: u64) -> Result<Sequence> {
    model.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = (model.position_jitter_sigma > 0.0)
        .then(|| Normal::new(0.0, model.position_jitter_sigma).expect("validated sigma"));
    let mask = seq.semantic_mask();
    let mut out = seq.clone();
    let mut new_mask = Vec::with_capacity(seq.frames.len());
    for (fi, frame) in out.frames.iter_mut().enumerate() {
        let mut kept = Vec::with_capacity(frame.points.len() + model.clutter_points);
        let mut kept_mask = Vec::with_capacity(kept.capacity());
        for (pi, p) in frame.points.iter().enumerate() {
            if model.dropout_prob > 0.0 && rng.gen::<f64>() < model.dropout_prob {
                continue;
            }
            let mut q = *p;
            if let Some(j) = &jitter {
                q.x += j.sample(&mut rng);
                q.y += j.sample(&mut rng);
                q.z += j.sample(&mut rng);
            }
            if model.intensity_attenuation != 1.0 {
                q.intensity *= model.intensity_attenuation;
            }
            kept.push(q);
            kept_mask.push(mask.as_ref().is_some_and(|m| m[fi][pi]));
        }
        for _ in 0..model.clutter_points {
            let p = model.scene.sample(&mut rng);
            kept.push(Point::new(
                p[0],
                p[1],
                p[2],
                rng.gen_range(-1.0..1.0),
                rng.gen_range(0.0..0.6) * model.intensity_attenuation,
            ));
            kept_mask.push(false);
        }
        frame.points = kept;
        new_mask.push(kept_mask);
    }
    if mask.is_some() {
        out.set_semantic_mask(&new_mask);
    }
    if model.name != OcclusionPreset::None {
        out.meta.insert("occlusion".into(), model.name.as_str().into());
    }
    Ok(out)
}

/// Occludes every sequence of `ds`. Per-sequence seeds are drawn from a
/// stream seeded with `seed`, so results do not depend on evaluation order.
pub fn occlude_dataset(ds: &LabeledDataset, model: &OcclusionModel, seed: u64) -> Result<LabeledDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sequences = ds
        .sequences
        .iter()
        .map(|s| apply_occlusion(s, model, rng.next_u64()))
        .collect::<Result<Vec<_>>>()?;
    LabeledDataset::new(sequences, ds.class_names.clone(), ds.split)
}
