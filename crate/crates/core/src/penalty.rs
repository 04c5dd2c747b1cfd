//! Group-relative segment penalties and reward shaping.
//!
//! For a rollout group `Y` and a per-trace statistic `n_j` (a segment count),
//! the relative penalty is the negated z-score `-(n_j - mean(n)) / std(n)`.
//! The clustered form computes one such penalty per length cluster and sums
//! them with the cluster weights; the shaped reward is `R + alpha * P`.
//!
//! Two token-length baselines are provided for comparison runs. Both are
//! simplified one-line forms, not the full published methods:
//! `lcpo_ratio` scales the reward by `min(1, L_ref / L)` and `o1pruner_aux`
//! adds `alpha * (L_ref - L) / L_ref`.

use std::collections::HashMap;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::clustering::{ClusterCounts, ClusterScheme, WeightScheme};
use crate::trace::{RolloutGroup, Segment};
use crate::ConfigError;

/// Balancing coefficient used with keyword segmentation.
pub const KEYWORD_ALPHA: f64 = 5e-3;
/// Balancing coefficient used with confidence segmentation.
pub const CONFIDENCE_ALPHA: f64 = 2.5e-3;
pub const DEFAULT_STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PenaltyError {
    #[error("trace `{trace_id}` has no segment list")]
    MissingSegments { trace_id: String },
    #[error("trace `{trace_id}` has no penalty")]
    MissingPenalty { trace_id: String },
    #[error("mode `{0}` needs a reference_length")]
    MissingReferenceLength(&'static str),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StdKind {
    #[default]
    Population,
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyMode {
    #[default]
    GrspClustered,
    GrspFlat,
    LcpoRatio,
    O1prunerAux,
    None,
}

impl PenaltyMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::GrspClustered => "grsp_clustered",
            Self::GrspFlat => "grsp_flat",
            Self::LcpoRatio => "lcpo_ratio",
            Self::O1prunerAux => "o1pruner_aux",
            Self::None => "none",
        }
    }

    pub fn needs_segments(self) -> bool {
        matches!(self, Self::GrspClustered | Self::GrspFlat)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PenaltyConfig {
    pub alpha: f64,
    pub mode: PenaltyMode,
    pub std_floor: f64,
    pub std_kind: StdKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_length: Option<usize>,
    pub clusters: ClusterScheme,
    pub weights: WeightScheme,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            alpha: KEYWORD_ALPHA,
            mode: PenaltyMode::GrspClustered,
            std_floor: DEFAULT_STD_FLOOR,
            std_kind: StdKind::Population,
            reference_length: None,
            clusters: ClusterScheme::default(),
            weights: WeightScheme::default(),
        }
    }
}

impl PenaltyConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(ConfigError::new("alpha", "must be finite and >= 0"));
        }
        if !(self.std_floor.is_finite() && self.std_floor > 0.0) {
            return Err(ConfigError::new("std_floor", "must be finite and > 0"));
        }
        if self.reference_length == Some(0) {
            return Err(ConfigError::new("reference_length", "must be >= 1"));
        }
        self.clusters.validate()?;
        self.weights.weights(self.clusters.k())?;
        Ok(())
    }
}

/// Penalty breakdown for one trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterPenalty {
    /// `P^k` for clusters `1..=K`, in order.
    pub per_cluster: Vec<f64>,
    /// `sum_k w^k P^k`.
    pub total: f64,
}

/// Per-trace outcome of reward shaping.
///
/// In the additive modes `shaped_reward = raw_reward + alpha * total_penalty`.
/// In `lcpo_ratio` mode `total_penalty` is the multiplicative factor and
/// `shaped_reward = raw_reward * total_penalty`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapedResult {
    pub trace_id: String,
    pub prompt_id: String,
    pub raw_reward: f64,
    pub per_cluster_penalty: Vec<f64>,
    pub total_penalty: f64,
    pub shaped_reward: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub zero_length: bool,
}

pub fn mean_std(values: &[f64], kind: StdKind) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    let denom = match kind {
        StdKind::Population => n,
        StdKind::Sample => (n - 1.0).max(1.0),
    };
    (mean, (ss / denom).sqrt())
}

/// Z-scores within a group. Spread below `std_floor` yields all zeros.
pub fn group_zscores_with(values: &[f64], std_floor: f64, kind: StdKind) -> Vec<f64> {
    if values.is_empty() {
        return Vec::new();
    }
    let (mean, std) = mean_std(values, kind);
    if std.is_nan() || std < std_floor {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - mean) / std).collect()
}

/// Population z-scores within a group.
pub fn group_zscores(values: &[f64], std_floor: f64) -> Vec<f64> {
    group_zscores_with(values, std_floor, StdKind::Population)
}

fn negate(z: f64) -> f64 {
    // `0.0 - z` rather than `-z` keeps zeros positive in serialized output.
    0.0 - z
}

/// Core of the clustered penalty over a count matrix, one row per trace.
pub fn clustered_penalty_from_counts(
    counts: &[ClusterCounts],
    weights: &[f64],
    std_floor: f64,
    kind: StdKind,
) -> Vec<ClusterPenalty> {
    let n = counts.len();
    let k = weights.len();
    let mut out: Vec<ClusterPenalty> = (0..n)
        .map(|_| ClusterPenalty {
            per_cluster: vec![0.0; k],
            total: 0.0,
        })
        .collect();
    let mut column = vec![0.0; n];
    for c in 0..k {
        for (slot, row) in column.iter_mut().zip(counts) {
            *slot = f64::from(row.as_slice()[c]);
        }
        for (j, z) in group_zscores_with(&column, std_floor, kind).into_iter().enumerate() {
            out[j].per_cluster[c] = negate(z);
        }
    }
    for p in &mut out {
        p.total = p.per_cluster.iter().zip(weights).map(|(pk, w)| w * pk).sum();
    }
    out
}

fn segments_for<'a>(
    group: &RolloutGroup,
    segments: &'a HashMap<String, Vec<Segment>>,
) -> Result<Vec<&'a [Segment]>, PenaltyError> {
    group
        .traces()
        .iter()
        .map(|t| {
            segments
                .get(t.trace_id())
                .map(Vec::as_slice)
                .ok_or_else(|| PenaltyError::MissingSegments {
                    trace_id: t.trace_id().to_string(),
                })
        })
        .collect()
}

/// Negated z-score of each trace's total segment count.
pub fn flat_segment_penalty(
    group: &RolloutGroup,
    segments: &HashMap<String, Vec<Segment>>,
    std_floor: f64,
) -> Result<IndexMap<String, f64>, PenaltyError> {
    flat_segment_penalty_with(group, segments, std_floor, StdKind::Population)
}

pub fn flat_segment_penalty_with(
    group: &RolloutGroup,
    segments: &HashMap<String, Vec<Segment>>,
    std_floor: f64,
    kind: StdKind,
) -> Result<IndexMap<String, f64>, PenaltyError> {
    let lists = segments_for(group, segments)?;
    let counts: Vec<f64> = lists.iter().map(|s| s.len() as f64).collect();
    let z = group_zscores_with(&counts, std_floor, kind);
    Ok(group
        .traces()
        .iter()
        .zip(z)
        .map(|(t, z)| (t.trace_id().to_string(), negate(z)))
        .collect())
}

/// Per-cluster negated z-scores and their weighted sum for every trace.
pub fn clustered_penalty(
    group: &RolloutGroup,
    segments: &HashMap<String, Vec<Segment>>,
    cfg: &PenaltyConfig,
) -> Result<IndexMap<String, ClusterPenalty>, PenaltyError> {
    let lists = segments_for(group, segments)?;
    let weights = cfg.weights.weights(cfg.clusters.k())?;
    let counts: Vec<ClusterCounts> = lists
        .iter()
        .map(|s| ClusterCounts::from_lengths(s.iter().map(Segment::token_len), &cfg.clusters))
        .collect();
    let penalties = clustered_penalty_from_counts(&counts, &weights, cfg.std_floor, cfg.std_kind);
    Ok(group
        .traces()
        .iter()
        .zip(penalties)
        .map(|(t, p)| (t.trace_id().to_string(), p))
        .collect())
}

/// `R' = R + alpha * P` for every trace, in group order.
pub fn shape_rewards(
    group: &RolloutGroup,
    penalties: &IndexMap<String, f64>,
    alpha: f64,
) -> Result<Vec<ShapedResult>, PenaltyError> {
    group
        .traces()
        .iter()
        .map(|t| {
            let p = *penalties.get(t.trace_id()).ok_or_else(|| PenaltyError::MissingPenalty {
                trace_id: t.trace_id().to_string(),
            })?;
            Ok(ShapedResult {
                trace_id: t.trace_id().to_string(),
                prompt_id: t.prompt_id().to_string(),
                raw_reward: t.verifier_reward(),
                per_cluster_penalty: Vec::new(),
                total_penalty: p,
                shaped_reward: t.verifier_reward() + alpha * p,
                zero_length: false,
            })
        })
        .collect()
}

/// A length-derived penalty term for one trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LengthTerm {
    pub value: f64,
    /// The trace had no think tokens; `value` follows the documented convention.
    pub zero_length: bool,
}

/// `clamp(L_ref / L, 0, 1)`; a zero-length response gets factor 1.
pub fn lcpo_factor(len: usize, reference_length: usize) -> LengthTerm {
    if len == 0 {
        LengthTerm {
            value: 1.0,
            zero_length: true,
        }
    } else {
        LengthTerm {
            value: (reference_length as f64 / len as f64).clamp(0.0, 1.0),
            zero_length: false,
        }
    }
}

/// `(L_ref - L) / L_ref`.
pub fn o1pruner_term(len: usize, reference_length: usize) -> LengthTerm {
    let r = reference_length as f64;
    LengthTerm {
        value: (r - len as f64) / r,
        zero_length: len == 0,
    }
}

fn length_terms(
    group: &RolloutGroup,
    reference_length: usize,
    term: fn(usize, usize) -> LengthTerm,
) -> Result<IndexMap<String, LengthTerm>, ConfigError> {
    if reference_length == 0 {
        return Err(ConfigError::new("reference_length", "must be >= 1"));
    }
    Ok(group
        .traces()
        .iter()
        .map(|t| (t.trace_id().to_string(), term(t.think_len(), reference_length)))
        .collect())
}

/// [`lcpo_factor`] for every trace, keyed by trace id.
pub fn token_penalty_lcpo(group: &RolloutGroup, reference_length: usize) -> Result<IndexMap<String, LengthTerm>, ConfigError> {
    length_terms(group, reference_length, lcpo_factor)
}

/// [`o1pruner_term`] for every trace, keyed by trace id.
pub fn token_penalty_o1pruner(
    group: &RolloutGroup,
    reference_length: usize,
) -> Result<IndexMap<String, LengthTerm>, ConfigError> {
    length_terms(group, reference_length, o1pruner_term)
}

/// Shaped rewards straight from per-trace cluster counts and think lengths,
/// for callers that produce segments natively rather than from traces.
pub fn shape_from_counts(
    raw: &[f64],
    counts: &[ClusterCounts],
    think_lens: &[usize],
    cfg: &PenaltyConfig,
) -> Result<Vec<f64>, PenaltyError> {
    assert!(raw.len() == counts.len() && raw.len() == think_lens.len());
    let additive = |pens: Vec<f64>| raw.iter().zip(pens).map(|(r, p)| r + cfg.alpha * p).collect();
    Ok(match cfg.mode {
        PenaltyMode::GrspClustered => {
            let weights = cfg.weights.weights(cfg.clusters.k())?;
            let pens = clustered_penalty_from_counts(counts, &weights, cfg.std_floor, cfg.std_kind);
            additive(pens.into_iter().map(|p| p.total).collect())
        }
        PenaltyMode::GrspFlat => {
            let totals: Vec<f64> = counts.iter().map(|c| f64::from(c.total() + c.excluded())).collect();
            additive(group_zscores_with(&totals, cfg.std_floor, cfg.std_kind).into_iter().map(negate).collect())
        }
        PenaltyMode::None => raw.to_vec(),
        PenaltyMode::LcpoRatio => {
            let reference = cfg.reference_length.ok_or(PenaltyError::MissingReferenceLength("lcpo_ratio"))?;
            raw.iter().zip(think_lens).map(|(r, &l)| r * lcpo_factor(l, reference).value).collect()
        }
        PenaltyMode::O1prunerAux => {
            let reference = cfg.reference_length.ok_or(PenaltyError::MissingReferenceLength("o1pruner_aux"))?;
            additive(think_lens.iter().map(|&l| o1pruner_term(l, reference).value).collect())
        }
    })
}

/// Applies `cfg.mode` to one group. `segments` is only consulted by the
/// segment-based modes.
pub fn penalize_group(
    group: &RolloutGroup,
    segments: &HashMap<String, Vec<Segment>>,
    cfg: &PenaltyConfig,
) -> Result<Vec<ShapedResult>, PenaltyError> {
    match cfg.mode {
        PenaltyMode::GrspClustered => {
            let pens = clustered_penalty(group, segments, cfg)?;
            Ok(group
                .traces()
                .iter()
                .zip(pens.into_values())
                .map(|(t, p)| ShapedResult {
                    trace_id: t.trace_id().to_string(),
                    prompt_id: t.prompt_id().to_string(),
                    raw_reward: t.verifier_reward(),
                    shaped_reward: t.verifier_reward() + cfg.alpha * p.total,
                    per_cluster_penalty: p.per_cluster,
                    total_penalty: p.total,
                    zero_length: false,
                })
                .collect())
        }
        PenaltyMode::GrspFlat => {
            let pens = flat_segment_penalty_with(group, segments, cfg.std_floor, cfg.std_kind)?;
            shape_rewards(group, &pens, cfg.alpha)
        }
        PenaltyMode::None => {
            let zeros = group.traces().iter().map(|t| (t.trace_id().to_string(), 0.0)).collect();
            shape_rewards(group, &zeros, cfg.alpha)
        }
        PenaltyMode::LcpoRatio => {
            let reference = cfg.reference_length.ok_or(PenaltyError::MissingReferenceLength("lcpo_ratio"))?;
            let terms = token_penalty_lcpo(group, reference)?;
            Ok(group
                .traces()
                .iter()
                .zip(terms.into_values())
                .map(|(t, f)| ShapedResult {
                    trace_id: t.trace_id().to_string(),
                    prompt_id: t.prompt_id().to_string(),
                    raw_reward: t.verifier_reward(),
                    per_cluster_penalty: Vec::new(),
                    total_penalty: f.value,
                    shaped_reward: t.verifier_reward() * f.value,
                    zero_length: f.zero_length,
                })
                .collect())
        }
        PenaltyMode::O1prunerAux => {
            let reference = cfg.reference_length.ok_or(PenaltyError::MissingReferenceLength("o1pruner_aux"))?;
            let terms = token_penalty_o1pruner(group, reference)?;
            Ok(group
                .traces()
                .iter()
                .zip(terms.into_values())
                .map(|(t, f)| ShapedResult {
                    trace_id: t.trace_id().to_string(),
                    prompt_id: t.prompt_id().to_string(),
                    raw_reward: t.verifier_reward(),
                    per_cluster_penalty: Vec::new(),
                    total_penalty: f.value,
                    shaped_reward: t.verifier_reward() + cfg.alpha * f.value,
                    zero_length: f.zero_length,
                })
                .collect())
        }
    }
}
