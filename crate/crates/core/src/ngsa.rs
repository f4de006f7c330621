//! Voxel grouping, group scores and region selection.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionOutput;
use crate::error::{Error, Result};
use crate::numerics::{softmax, tensor::matmul_t, Tensor2};
use crate::pointcloud::Frame;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupingMode {
    #[default]
    Voxel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroupingConfig {
    pub mode: GroupingMode,
    pub cell_size: f64,
    pub grid_origin: [f64; 3],
}

impl Default for GroupingConfig {
    fn default() -> Self {
        Self {
            mode: GroupingMode::Voxel,
            cell_size: 0.1,
            grid_origin: [0.0; 3],
        }
    }
}

impl GroupingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cell_size.is_finite() && self.cell_size > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "cell_size must be positive, got {}",
                self.cell_size
            )));
        }
        if !self.grid_origin.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidConfig("grid_origin must be finite".into()));
        }
        Ok(())
    }

    pub fn cell_of(&self, p: [f64; 3]) -> [i64; 3] {
        std::array::from_fn(|a| ((p[a] - self.grid_origin[a]) / self.cell_size).floor() as i64)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Group {
    pub cell: [i64; 3],
    pub members: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grouping {
    pub group_of: Vec<usize>,
    pub groups: Vec<Group>,
}

impl Grouping {
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn point_count(&self) -> usize {
        self.group_of.len()
    }

    pub fn member_lists(&self) -> Vec<Vec<usize>> {
        self.groups.iter().map(|g| g.members.clone()).collect()
    }

    /// Group `g` and every group whose cell touches it (the 3×3×3 block),
    /// in ascending id order.
    pub fn neighborhood(&self, g: usize) -> Vec<usize> {
        let c = self.groups[g].cell;
        self.groups
            .iter()
            .enumerate()
            .filter(|(_, h)| (0..3).all(|a| (h.cell[a] - c[a]).abs() <= 1))
            .map(|(i, _)| i)
            .collect()
    }
}

pub fn group_positions(pos: &[[f64; 3]], cfg: &GroupingConfig) -> Result<Grouping> {
    cfg.validate()?;
    if pos.is_empty() {
        return Err(Error::Empty("cannot group an empty frame".into()));
    }
    let mut cells: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
    for (i, p) in pos.iter().enumerate() {
        cells.entry(cfg.cell_of(*p)).or_default().push(i);
    }
    let mut group_of = vec![0; pos.len()];
    let groups: Vec<Group> = cells
        .into_iter()
        .enumerate()
        .map(|(g, (cell, members))| {
            for &i in &members {
                group_of[i] = g;
            }
            Group { cell, members }
        })
        .collect();
    Ok(Grouping { group_of, groups })
}

pub fn group_points(frame: &Frame, cfg: &GroupingConfig) -> Result<Grouping> {
    group_positions(&frame.positions(), cfg)
}

/// Per-group sum of per-point values, in member order.
pub fn group_sum(values: &[f64], grouping: &Grouping) -> Result<Vec<f64>> {
    if values.len() != grouping.point_count() {
        return Err(Error::Shape(format!(
            "{} values for {} grouped points",
            values.len(),
            grouping.point_count()
        )));
    }
    Ok(grouping
        .groups
        .iter()
        .map(|g| g.members.iter().map(|&i| values[i]).sum())
        .collect())
}

/// Per-group mean of per-point values, in member order.
pub fn group_mean(values: &[f64], grouping: &Grouping) -> Result<Vec<f64>> {
    let sums = group_sum(values, grouping)?;
    Ok(sums
        .into_iter()
        .zip(&grouping.groups)
        .map(|(s, g)| s / g.members.len() as f64)
        .collect())
}

/// Scalarized attention mass per group: the sum of member point scores.
pub fn group_score_sum(att: &AttentionOutput, grouping: &Grouping) -> Result<Vec<f64>> {
    group_sum(&att.point_scores, grouping)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NgsaScores {
    pub sum_scores: Vec<f64>,
    pub global_scores: Vec<f64>,
    pub w: Vec<f64>,
}

impl NgsaScores {
    pub fn len(&self) -> usize {
        self.global_scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.global_scores.is_empty()
    }
}

/// `y_iᵀ w` for every row of `features`.
pub fn point_contributions(features: &Tensor2, w: &[f64]) -> Result<Vec<f64>> {
    if w.len() != features.cols() {
        return Err(Error::Shape(format!(
            "w has length {} but features have width {}",
            w.len(),
            features.cols()
        )));
    }
    let wt = Tensor2::row_vector(w.to_vec());
    Ok(matmul_t(features, &wt).into_data())
}

/// `g_j = (1/|G_j|) Σ_{i∈G_j} y_iᵀ w`, plus the group sums of point scores.
pub fn ngsa_scores(att: &AttentionOutput, grouping: &Grouping, w: &[f64]) -> Result<NgsaScores> {
    if att.len() != grouping.point_count() {
        return Err(Error::Shape("attention output and grouping disagree on N".into()));
    }
    let contrib = point_contributions(&att.features, w)?;
    Ok(NgsaScores {
        sum_scores: group_score_sum(att, grouping)?,
        global_scores: group_mean(&contrib, grouping)?,
        w: w.to_vec(),
    })
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some(b) if values[b] >= v => {}
            _ => best = Some(i),
        }
    }
    best
}

pub fn select_region(scores: &NgsaScores) -> Result<usize> {
    argmax(&scores.global_scores).ok_or_else(|| Error::Empty("no groups to select from".into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Accept,
    Refine,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSelection {
    pub region_index: usize,
    pub confidence: f64,
    pub decision: Decision,
}

/// Confidence is the largest softmax entry over group scores; below `eta`
/// the localization is considered unsure and the search widens.
pub fn localization_decision(scores: &NgsaScores, eta: f64) -> Result<RegionSelection> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::InvalidConfig(format!("eta {eta} outside [0, 1]")));
    }
    let region_index = select_region(scores)?;
    let p = softmax(&scores.global_scores)?;
    let confidence = p.iter().copied().fold(0.0, f64::max).min(1.0);
    let decision = if confidence < eta {
        Decision::Refine
    } else {
        Decision::Accept
    };
    Ok(RegionSelection {
        region_index,
        confidence,
        decision,
    })
}
