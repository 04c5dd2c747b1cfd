//! Segment → penalize → advantage over whole rollout groups, shared by the
//! batch CLI and the reward service so both produce identical numbers.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::advantage::{advantage_records, dynamic_sampling_filter, AdvantageConfig, AdvantageRecord};
use crate::config::EngineConfig;
use crate::penalty::{penalize_group, PenaltyConfig, PenaltyError, ShapedResult};
use crate::segmentation::{SegmentError, Segmenter, SegmenterConfig};
use crate::trace::{RolloutGroup, Segment, Trace, TraceRecord};
use crate::{ConfigError, Error};

/// Segments every trace of a group, keyed by trace id.
pub fn segment_group(group: &RolloutGroup, segmenter: &Segmenter) -> Result<HashMap<String, Vec<Segment>>, SegmentError> {
    group
        .traces()
        .iter()
        .map(|t| Ok((t.trace_id().to_string(), segmenter.segment(t)?)))
        .collect()
}

/// Shaped rewards for one group, segmenting only when the mode needs it.
pub fn shape_group(group: &RolloutGroup, segmenter: &Segmenter, cfg: &PenaltyConfig) -> Result<Vec<ShapedResult>, Error> {
    let segments = if cfg.mode.needs_segments() {
        segment_group(group, segmenter)?
    } else {
        HashMap::new()
    };
    Ok(penalize_group(group, &segments, cfg)?)
}

/// Penalty and advantage output for one group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupOutput {
    pub prompt_id: String,
    pub shaped: Vec<ShapedResult>,
    /// `None` when dynamic sampling dropped the group.
    pub advantages: Option<Vec<AdvantageRecord>>,
}

/// Advantages for already-shaped groups, applying dynamic sampling when enabled.
pub fn advantage_groups(
    shaped: Vec<(RolloutGroup, Vec<ShapedResult>)>,
    cfg: &AdvantageConfig,
) -> (Vec<GroupOutput>, usize) {
    let rewards_of = |s: &[ShapedResult]| s.iter().map(|r| r.shaped_reward).collect::<Vec<f64>>();
    let keep: Vec<bool> = if cfg.dynamic_sampling {
        let tagged: Vec<(usize, Vec<f64>)> = shaped.iter().enumerate().map(|(i, (_, s))| (i, rewards_of(s))).collect();
        let (survivors, _) = dynamic_sampling_filter(tagged);
        let mut keep = vec![false; shaped.len()];
        for (i, _) in survivors {
            keep[i] = true;
        }
        keep
    } else {
        vec![true; shaped.len()]
    };
    let dropped = keep.iter().filter(|k| !**k).count();
    let out = shaped
        .into_iter()
        .zip(keep)
        .map(|((group, s), kept)| {
            let advantages = kept.then(|| advantage_records(group.traces(), &rewards_of(&s), cfg));
            GroupOutput {
                prompt_id: group.prompt_id().to_string(),
                shaped: s,
                advantages,
            }
        })
        .collect();
    (out, dropped)
}

/// Full pipeline over a batch of groups. Returns outputs in input order and
/// the number of groups dropped by dynamic sampling.
pub fn process_groups(groups: Vec<RolloutGroup>, cfg: &EngineConfig) -> Result<(Vec<GroupOutput>, usize), Error> {
    let segmenter = Segmenter::from_config(&cfg.segmenter)?;
    let shaped = groups
        .into_iter()
        .map(|g| {
            let s = shape_group(&g, &segmenter, &cfg.penalty)?;
            Ok((g, s))
        })
        .collect::<Result<Vec<_>, Error>>()?;
    Ok(advantage_groups(shaped, &cfg.advantage))
}

/// Body of `POST /v1/shape`: one rollout group plus optional config overrides.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeRequest {
    pub traces: Vec<TraceRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overrides: Option<Overrides>,
}

/// Partial config sections merged over the engine config for one request.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmenter: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub penalty: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub advantage: Option<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeResponse {
    pub prompt_id: String,
    pub shaped: Vec<ShapedResult>,
    pub advantages: Vec<AdvantageRecord>,
    /// The group carried no reward spread and dynamic sampling removed it.
    pub dropped: bool,
}

/// A rejected request, carrying an HTTP-style status code.
#[derive(Debug, Clone, PartialEq, Serialize, thiserror::Error)]
#[error("{kind}: {message}")]
pub struct ServiceError {
    #[serde(skip)]
    pub status: u16,
    /// Serialized as `error`, matching the CLI's stderr objects.
    #[serde(rename = "error")]
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    pub message: String,
}

impl ServiceError {
    fn client(kind: &str, field: Option<String>, message: impl Into<String>) -> Self {
        Self {
            status: 400,
            kind: kind.to_string(),
            field,
            message: message.into(),
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self {
            status: 500,
            kind: "internal".to_string(),
            field: None,
            message: message.into(),
        }
    }

    pub fn too_large(limit: usize) -> Self {
        Self {
            status: 413,
            kind: "payload_too_large".to_string(),
            field: None,
            message: format!("request body exceeds {limit} bytes"),
        }
    }
}

/// RFC 7386 JSON merge patch.
fn merge_patch(target: &mut Value, patch: &Value) {
    match (target, patch) {
        (Value::Object(t), Value::Object(p)) => {
            for (k, v) in p {
                if v.is_null() {
                    t.remove(k);
                } else {
                    merge_patch(t.entry(k.clone()).or_insert(Value::Null), v);
                }
            }
        }
        (t, p) => *t = p.clone(),
    }
}

fn overridden<T>(section: &str, base: &T, patch: Option<&Value>) -> Result<T, ServiceError>
where
    T: Serialize + serde::de::DeserializeOwned,
{
    let mut value = serde_json::to_value(base).map_err(|e| ServiceError::internal(e.to_string()))?;
    if let Some(p) = patch {
        // Switching segmenter kind replaces the section instead of merging
        // fields that belong to the other kind.
        let kind_changes = section == "segmenter" && p.get("kind").is_some_and(|k| Some(k) != value.get("kind"));
        if kind_changes {
            value = p.clone();
        } else {
            merge_patch(&mut value, p);
        }
    }
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." { section.to_string() } else { format!("{section}.{path}") };
        ServiceError::client("config", Some(format!("overrides.{field}")), e.into_inner().to_string())
    })
}

fn effective_config(base: &EngineConfig, overrides: Option<&Overrides>) -> Result<EngineConfig, ServiceError> {
    let mut cfg = base.clone();
    if let Some(o) = overrides {
        cfg.segmenter = overridden::<SegmenterConfig>("segmenter", &base.segmenter, o.segmenter.as_ref())?;
        cfg.penalty = overridden::<PenaltyConfig>("penalty", &base.penalty, o.penalty.as_ref())?;
        cfg.advantage = overridden::<AdvantageConfig>("advantage", &base.advantage, o.advantage.as_ref())?;
    }
    let invalid = |section: &str, e: ConfigError| {
        ServiceError::client("config", Some(format!("overrides.{section}.{}", e.field)), e.message)
    };
    Segmenter::from_config(&cfg.segmenter).map_err(|e| invalid("segmenter", e))?;
    cfg.penalty.validate().map_err(|e| invalid("penalty", e))?;
    cfg.advantage.validate().map_err(|e| invalid("advantage", e))?;
    Ok(cfg)
}

/// Handles one shaping request. Deterministic and stateless: the same body
/// and config always give the same response, and a failing request produces
/// no output at all.
pub fn handle_shape_request(body: &[u8], base: &EngineConfig) -> Result<ShapeResponse, ServiceError> {
    if body.len() > base.service.max_request_bytes {
        return Err(ServiceError::too_large(base.service.max_request_bytes));
    }
    let mut de = serde_json::Deserializer::from_slice(body);
    let request: ShapeRequest = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        ServiceError::client("parse", Some(path), e.into_inner().to_string())
    })?;
    de.end()
        .map_err(|e| ServiceError::client("parse", None, e.to_string()))?;
    let cfg = effective_config(base, request.overrides.as_ref())?;

    if request.traces.is_empty() {
        return Err(ServiceError::client("validation", Some("traces".into()), "group must contain at least one trace"));
    }
    let traces = request
        .traces
        .into_iter()
        .enumerate()
        .map(|(i, rec)| {
            Trace::from_record(rec).map_err(|e| {
                ServiceError::client("validation", Some(format!("traces[{i}].{}", e.field)), e.message)
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let prompt_id = traces[0].prompt_id().to_string();
    if let Some(i) = traces.iter().position(|t| t.prompt_id() != prompt_id) {
        return Err(ServiceError::client(
            "validation",
            Some(format!("traces[{i}].prompt_id")),
            format!("all traces of a request must share prompt_id `{prompt_id}`"),
        ));
    }
    let position: HashMap<String, usize> = traces
        .iter()
        .enumerate()
        .map(|(i, t)| (t.trace_id().to_string(), i))
        .collect();
    let group = RolloutGroup::new(prompt_id, traces)
        .map_err(|e| ServiceError::client("validation", Some(format!("traces.{}", e.field)), e.to_string()))?;

    let (mut outputs, _) = process_groups(vec![group], &cfg).map_err(|e| match e {
        Error::Segment(SegmentError::MissingLogprob { trace_id, index }) => {
            let i = position.get(&trace_id).copied().unwrap_or_default();
            ServiceError::client(
                "segment",
                Some(format!("traces[{i}].tokens[{index}].logprob")),
                "confidence segmentation needs a logprob on every think token",
            )
        }
        Error::Penalty(PenaltyError::MissingReferenceLength(mode)) => ServiceError::client(
            "config",
            Some("overrides.penalty.reference_length".into()),
            format!("mode `{mode}` needs a reference length"),
        ),
        Error::Config(c) => ServiceError::client("config", Some(c.field), c.message),
        other => ServiceError::internal(other.to_string()),
    })?;
    let out = outputs.pop().ok_or_else(|| ServiceError::internal("pipeline returned no group"))?;
    Ok(ShapeResponse {
        prompt_id: out.prompt_id,
        shaped: out.shaped,
        dropped: out.advantages.is_none(),
        advantages: out.advantages.unwrap_or_default(),
    })
}
