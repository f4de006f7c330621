//! Top-K point selection, the concatenated frame representation and the
//! ablation switches.

use serde::{Deserialize, Serialize};

use crate::attention::AttentionOutput;
use crate::error::{Error, Result};
use crate::ngsa::{localization_decision, point_contributions, Decision, Grouping, NgsaScores, RegionSelection};
use crate::numerics::Tensor2;
use crate::pointcloud::Frame;

/// Pipeline stages that can be switched off one at a time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Score points by raw intensity instead of attention.
    pub no_attention_score: bool,
    /// Rank every point individually, without voxel groups.
    pub no_grouping: bool,
    /// Skip region selection; all groups are candidates, ranked by group score.
    pub no_highest_group: bool,
    /// Keep every candidate instead of the top K.
    pub no_top_k: bool,
}

impl Ablation {
    pub fn active_count(&self) -> usize {
        [
            self.no_attention_score,
            self.no_grouping,
            self.no_highest_group,
            self.no_top_k,
        ]
        .iter()
        .filter(|&&f| f)
        .count()
    }

    pub fn is_none(&self) -> bool {
        self.active_count() == 0
    }
}

/// The rows of an ablation table, in presentation order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    NoAttentionScore,
    NoGrouping,
    NoHighestGroup,
    NoTopK,
    Full,
}

impl AblationKind {
    pub const ALL: [AblationKind; 5] = [
        AblationKind::NoAttentionScore,
        AblationKind::NoGrouping,
        AblationKind::NoHighestGroup,
        AblationKind::NoTopK,
        AblationKind::Full,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationKind::NoAttentionScore => "no_attention_score",
            AblationKind::NoGrouping => "no_grouping",
            AblationKind::NoHighestGroup => "no_highest_group",
            AblationKind::NoTopK => "no_top_k",
            AblationKind::Full => "full",
        }
    }

    pub fn flags(self) -> Ablation {
        let mut a = Ablation::default();
        match self {
            AblationKind::NoAttentionScore => a.no_attention_score = true,
            AblationKind::NoGrouping => a.no_grouping = true,
            AblationKind::NoHighestGroup => a.no_highest_group = true,
            AblationKind::NoTopK => a.no_top_k = true,
            AblationKind::Full => {}
        }
        a
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionUnit {
    /// Rank individual points by `y_iᵀ w`.
    #[default]
    Points,
    /// Take whole groups by descending group score until K points are held.
    Groups,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FocusConfig {
    pub top_k: usize,
    pub eta: f64,
    pub ablation: Ablation,
    pub unit: SelectionUnit,
    /// Representation width, in points, when top-K is disabled.
    pub max_points: usize,
}

impl Default for FocusConfig {
    fn default() -> Self {
        Self {
            top_k: 30,
            eta: 0.68,
            ablation: Ablation::default(),
            unit: SelectionUnit::Points,
            max_points: 100,
        }
    }
}

impl FocusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ablation.active_count() > 1 {
            return Err(Error::InvalidConfig(
                "at most one ablation flag may be active".into(),
            ));
        }
        self.validate_values()
    }

    /// Checks everything except the one-flag rule (cost baselines combine flags).
    pub fn validate_values(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::InvalidConfig(format!("eta {} outside [0, 1]", self.eta)));
        }
        if self.ablation.no_top_k && self.max_points == 0 {
            return Err(Error::InvalidConfig("max_points must be positive".into()));
        }
        Ok(())
    }

    /// Number of point slots in each frame representation.
    pub fn width(&self) -> usize {
        if self.ablation.no_top_k {
            self.max_points
        } else {
            self.top_k
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FocusOutput {
    /// Ascending point indices.
    pub selected_indices: Vec<usize>,
    /// Selected features concatenated in index order, zero padded to `width × d`.
    pub representation: Vec<f64>,
    pub frame_padded: bool,
    pub candidates: Vec<usize>,
    pub region: Option<RegionSelection>,
}

impl FocusOutput {
    /// Output for a frame with no points.
    pub fn empty(width: usize, d_attention: usize) -> Self {
        Self {
            selected_indices: Vec::new(),
            representation: vec![0.0; width * d_attention],
            frame_padded: width > 0,
            candidates: Vec::new(),
            region: None,
        }
    }
}

/// Best `k` of `candidates` by (score descending, index ascending), returned ascending.
fn top_k_of(candidates: &[usize], scores: &[f64], k: usize) -> Vec<usize> {
    let mut order = candidates.to_vec();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

pub fn top_k_points(point_scores: &[f64], k: usize) -> Vec<usize> {
    let all: Vec<usize> = (0..point_scores.len()).collect();
    top_k_of(&all, point_scores, k)
}

pub fn concat_representation(features: &Tensor2, indices: &[usize]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(indices.len() * features.cols());
    for &i in indices {
        if i >= features.rows() {
            return Err(Error::Shape(format!(
                "index {i} out of {} feature rows",
                features.rows()
            )));
        }
        out.extend_from_slice(features.row(i));
    }
    Ok(out)
}

/// Per-point ranking score: `y_iᵀ w`, or raw intensity under `no_attention_score`.
pub fn point_rank_scores(frame: &Frame, att: &AttentionOutput, w: &[f64], ablation: &Ablation) -> Result<Vec<f64>> {
    if ablation.no_attention_score {
        Ok(frame.points.iter().map(|p| p.intensity).collect())
    } else {
        point_contributions(&att.features, w)
    }
}

/// Chooses the frame's points for the recognition head.
///
/// The candidate set is the selected region's voxel when localization is
/// confident, widened to its 26 neighboring voxels when it is not.
pub fn focus_stage(
    frame: &Frame,
    att: &AttentionOutput,
    scores: &NgsaScores,
    grouping: &Grouping,
    cfg: &FocusConfig,
) -> Result<FocusOutput> {
    cfg.validate_values()?;
    let n = frame.len();
    if att.len() != n || grouping.point_count() != n || scores.len() != grouping.len() {
        return Err(Error::Shape(format!(
            "focus inputs disagree: frame {n}, attention {}, grouping {}/{} groups, scores {}",
            att.len(),
            grouping.point_count(),
            grouping.len(),
            scores.len()
        )));
    }
    let width = cfg.width();
    let d = att.d_attention();
    if n == 0 {
        return Ok(FocusOutput::empty(width, d));
    }
    let rank = point_rank_scores(frame, att, &scores.w, &cfg.ablation)?;
    let all: Vec<usize> = (0..n).collect();

    let (candidates, region, by_group) = if cfg.ablation.no_grouping {
        (all, None, false)
    } else if cfg.ablation.no_highest_group {
        (all, None, true)
    } else {
        let sel = localization_decision(scores, cfg.eta)?;
        let groups = match sel.decision {
            Decision::Accept => vec![sel.region_index],
            Decision::Refine => grouping.neighborhood(sel.region_index),
        };
        let mut c: Vec<usize> = groups
            .iter()
            .flat_map(|&g| grouping.groups[g].members.iter().copied())
            .collect();
        c.sort_unstable();
        (c, Some(sel), false)
    };

    let selected = if by_group || (cfg.unit == SelectionUnit::Groups && !cfg.ablation.no_grouping) {
        select_by_groups(&candidates, &rank, grouping, &scores.global_scores, width)
    } else {
        top_k_of(&candidates, &rank, width)
    };

    let mut representation = concat_representation(&att.features, &selected)?;
    representation.resize(width * d, 0.0);
    Ok(FocusOutput {
        frame_padded: selected.len() < width,
        selected_indices: selected,
        representation,
        candidates,
        region,
    })
}

/// Fills `width` slots from the candidates' groups in descending group score
/// (lowest id first on ties); within a group, points go by rank score.
fn select_by_groups(
    candidates: &[usize],
    rank: &[f64],
    grouping: &Grouping,
    group_scores: &[f64],
    width: usize,
) -> Vec<usize> {
    let mut groups: Vec<usize> = candidates.iter().map(|&i| grouping.group_of[i]).collect();
    groups.sort_unstable();
    groups.dedup();
    groups.sort_by(|&a, &b| group_scores[b].total_cmp(&group_scores[a]).then(a.cmp(&b)));
    let mut out = Vec::with_capacity(width);
    for g in groups {
        if out.len() >= width {
            break;
        }
        let mut ordered = grouping.groups[g].members.clone();
        ordered.sort_by(|&a, &b| rank[b].total_cmp(&rank[a]).then(a.cmp(&b)));
        out.extend(ordered.into_iter().take(width - out.len()));
    }
    out.sort_unstable();
    out
}
