//! Policy-gradient advantages and per-token objective weights.
//!
//! The engine stops at the trainer boundary: it reports sequence-level
//! advantages, importance ratios, and clipped surrogate weights, and leaves
//! the gradient step to whichever framework consumes them.

use serde::{Deserialize, Serialize};

use crate::penalty::{group_zscores, mean_std, StdKind};
use crate::trace::Trace;
use crate::ConfigError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AdvantageError {
    #[error("trace `{trace_id}`: token {index} lacks `{field}`")]
    MissingLogprob {
        trace_id: String,
        index: usize,
        field: &'static str,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct ClipConfig {
    epsilon: f64,
}

impl ClipConfig {
    /// `epsilon` must be positive; `f64::INFINITY` disables clipping.
    pub fn new(epsilon: f64) -> Result<Self, ConfigError> {
        if epsilon.is_nan() || epsilon <= 0.0 {
            return Err(ConfigError::new("clip_eps", format!("must be > 0, got {epsilon}")));
        }
        Ok(Self { epsilon })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self { epsilon: 0.2 }
    }
}

impl TryFrom<f64> for ClipConfig {
    type Error = ConfigError;

    fn try_from(v: f64) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<ClipConfig> for f64 {
    fn from(c: ClipConfig) -> f64 {
        c.epsilon
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algo {
    #[default]
    Grpo,
    Reinforce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageSource {
    Raw,
    #[default]
    GroupCentered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdvantageConfig {
    pub algo: Algo,
    pub clip_eps: ClipConfig,
    pub dynamic_sampling: bool,
    pub reinforce_baseline: AdvantageSource,
    pub std_floor: f64,
}

impl Default for AdvantageConfig {
    fn default() -> Self {
        Self {
            algo: Algo::Grpo,
            clip_eps: ClipConfig::default(),
            dynamic_sampling: false,
            reinforce_baseline: AdvantageSource::GroupCentered,
            std_floor: crate::penalty::DEFAULT_STD_FLOOR,
        }
    }
}

impl AdvantageConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.std_floor.is_finite() && self.std_floor > 0.0) {
            return Err(ConfigError::new("std_floor", "must be finite and > 0"));
        }
        Ok(())
    }
}

/// Trainer-facing advantage output for one trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageRecord {
    pub trace_id: String,
    pub prompt_id: String,
    pub advantage: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_token_ratio: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clipped_weight: Option<Vec<f64>>,
    /// `1/|Y|` of the Reinforce loss, reported rather than folded in.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_scale: Option<f64>,
    /// `1/|y^i|` of the Reinforce loss.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_scale: Option<f64>,
}

/// `(R_i - mean) / std` over the group, zero on degenerate spread.
pub fn grpo_advantages(shaped_rewards: &[f64], std_floor: f64) -> Vec<f64> {
    group_zscores(shaped_rewards, std_floor)
}

/// `exp(logprob - ref_logprob)` for each think token.
pub fn importance_ratios(trace: &Trace) -> Result<Vec<f64>, AdvantageError> {
    let span = trace.think_span();
    trace
        .think_tokens()
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let missing = |field| AdvantageError::MissingLogprob {
                trace_id: trace.trace_id().to_string(),
                index: span.start + i,
                field,
            };
            let lp = t.logprob().ok_or_else(|| missing("logprob"))?;
            let rp = t.ref_logprob().ok_or_else(|| missing("ref_logprob"))?;
            Ok((lp - rp).exp())
        })
        .collect()
}

/// Per-token clipped surrogate weight. For `A >= 0` this is
/// `min(r A, clip(r) A)`; for `A < 0`, `max(r A, clip(r) A)`. Either way
/// `|w| <= (1 + eps) |A|`.
pub fn clipped_objective_weights(ratios: &[f64], advantage: f64, clip: ClipConfig) -> Vec<f64> {
    let eps = clip.epsilon;
    ratios
        .iter()
        .map(|&r| {
            let clipped = r.clamp(1.0 - eps, 1.0 + eps);
            let (a, b) = (r * advantage, clipped * advantage);
            if advantage >= 0.0 {
                a.min(b)
            } else {
                a.max(b)
            }
        })
        .collect()
}

/// Drops groups whose rewards are all identical. Survivors keep their order.
pub fn dynamic_sampling_filter<T>(groups: Vec<(T, Vec<f64>)>) -> (Vec<(T, Vec<f64>)>, usize) {
    let before = groups.len();
    let kept: Vec<_> = groups.into_iter().filter(|(_, r)| has_spread(r)).collect();
    let dropped = before - kept.len();
    (kept, dropped)
}

pub fn has_spread(rewards: &[f64]) -> bool {
    rewards.split_first().is_some_and(|(first, rest)| rest.iter().any(|r| r != first))
}

/// Sequence-level Reinforce advantages, broadcast to every token by the trainer.
pub fn reinforce_weights(source: AdvantageSource, shaped_rewards: &[f64]) -> Vec<f64> {
    match source {
        AdvantageSource::Raw => shaped_rewards.to_vec(),
        AdvantageSource::GroupCentered => {
            if shaped_rewards.is_empty() {
                return Vec::new();
            }
            let (mean, _) = mean_std(shaped_rewards, StdKind::Population);
            shaped_rewards.iter().map(|r| r - mean).collect()
        }
    }
}

/// `(1/|Y|, 1/|y^i|)`. A zero-length response gets a token scale of 0.
pub fn loss_normalizers(group_size: usize, response_len: usize) -> (f64, f64) {
    let inv = |n: usize| if n == 0 { 0.0 } else { 1.0 / n as f64 };
    (inv(group_size), inv(response_len))
}

/// Advantage records for one group given its shaped rewards (aligned with
/// `traces`). Ratios and clipped weights are attached under GRPO whenever
/// every think token carries both logprobs.
pub fn advantage_records(traces: &[Trace], shaped_rewards: &[f64], cfg: &AdvantageConfig) -> Vec<AdvantageRecord> {
    assert_eq!(traces.len(), shaped_rewards.len());
    match cfg.algo {
        Algo::Grpo => {
            let adv = grpo_advantages(shaped_rewards, cfg.std_floor);
            traces
                .iter()
                .zip(adv)
                .map(|(t, a)| {
                    let ratios = importance_ratios(t).ok();
                    let clipped = ratios.as_ref().map(|r| clipped_objective_weights(r, a, cfg.clip_eps));
                    AdvantageRecord {
                        trace_id: t.trace_id().to_string(),
                        prompt_id: t.prompt_id().to_string(),
                        advantage: a,
                        per_token_ratio: ratios,
                        clipped_weight: clipped,
                        group_scale: None,
                        token_scale: None,
                    }
                })
                .collect()
        }
        Algo::Reinforce => {
            let adv = reinforce_weights(cfg.reinforce_baseline, shaped_rewards);
            traces
                .iter()
                .zip(adv)
                .map(|(t, a)| {
                    let (g, tok) = loss_normalizers(traces.len(), t.think_len());
                    AdvantageRecord {
                        trace_id: t.trace_id().to_string(),
                        prompt_id: t.prompt_id().to_string(),
                        advantage: a,
                        per_token_ratio: None,
                        clipped_weight: None,
                        group_scale: Some(g),
                        token_scale: Some(tok),
                    }
                })
                .collect()
        }
    }
}
