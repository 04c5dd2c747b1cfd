//! Segment-level reward shaping for verifier-reward reinforcement learning.
//!
//! Reasoning traces are split into segments, segments are binned into length
//! clusters, and each trace is penalized by how its per-cluster segment counts
//! compare with the other rollouts of the same prompt. The shaped rewards feed
//! GRPO or Reinforce advantages.
//!
//! ```
//! use std::collections::HashMap;
//! use grsp_core::{clustered_penalty, PenaltyConfig, RolloutGroup, Segment, Span, Token, Trace};
//!
//! let mk = |id: &str, n: usize, reward: f64| {
//!     let tokens = (0..n).map(|_| Token::new("x", None, None).unwrap()).collect();
//!     Trace::new(id, "p", tokens, Span::new(0, n), reward).unwrap()
//! };
//! let group = RolloutGroup::new("p", vec![mk("a", 40, 1.0), mk("b", 80, 0.0)]).unwrap();
//! let segments: HashMap<String, Vec<Segment>> = [
//!     ("a".to_string(), (0..4).map(|i| Segment::new("a", i * 10, i * 10 + 10)).collect()),
//!     ("b".to_string(), (0..8).map(|i| Segment::new("b", i * 10, i * 10 + 10)).collect()),
//! ]
//! .into_iter()
//! .collect();
//! let penalties = clustered_penalty(&group, &segments, &PenaltyConfig::default()).unwrap();
//! assert!(penalties["a"].total > 0.0 && penalties["b"].total < 0.0);
//! ```

pub mod advantage;
pub mod analyzer;
pub mod clustering;
pub mod config;
pub mod penalty;
pub mod pipeline;
pub mod segmentation;
pub mod simulator;
pub mod trace;

pub use advantage::{
    advantage_records, clipped_objective_weights, dynamic_sampling_filter, grpo_advantages, importance_ratios,
    reinforce_weights, AdvantageConfig, AdvantageRecord, AdvantageSource, Algo, ClipConfig,
};
pub use analyzer::{cluster_ratio_report, corpus_stats, method_comparison, ClusterRatioReport, CorpusStats};
pub use clustering::{
    assign_cluster, cluster_counts, make_weights, Assignment, ClusterCounts, ClusterScheme, OverflowPolicy,
    WeightKind, WeightScheme,
};
pub use config::EngineConfig;
pub use penalty::{
    clustered_penalty, flat_segment_penalty, group_zscores, penalize_group, shape_rewards, token_penalty_lcpo,
    token_penalty_o1pruner, ClusterPenalty, PenaltyConfig, PenaltyMode, ShapedResult, StdKind,
};
pub use pipeline::{handle_shape_request, ShapeRequest, ShapeResponse};
pub use segmentation::{
    find_boundaries_confidence, segment_confidence, segment_keywords, smooth_logprobs, ConfidenceSegmenterConfig,
    KeywordSegmenterConfig, Segmenter, SegmenterConfig,
};
pub use simulator::{SimConfig, SimMetrics, SyntheticPolicy, SyntheticVerifier};
pub use trace::{parse_trace_file, serialize_trace, RolloutGroup, Segment, Span, Token, Trace};

/// A configuration value violates its contract.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid `{field}`: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

/// Any error the engine can report.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Trace(#[from] trace::TraceError),
    #[error(transparent)]
    Validation(#[from] trace::ValidationError),
    #[error(transparent)]
    Segment(#[from] segmentation::SegmentError),
    #[error(transparent)]
    Penalty(#[from] penalty::PenaltyError),
    #[error(transparent)]
    Advantage(#[from] advantage::AdvantageError),
    #[error(transparent)]
    Analyze(#[from] analyzer::AnalyzeError),
}

impl Error {
    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Config(_) => "config",
            Self::Trace(trace::TraceError::Io { .. }) => "io",
            Self::Trace(trace::TraceError::Parse { .. }) => "parse",
            Self::Trace(trace::TraceError::Invalid { .. }) | Self::Validation(_) => "validation",
            Self::Segment(_) => "segment",
            Self::Penalty(_) => "penalty",
            Self::Advantage(_) => "advantage",
            Self::Analyze(_) => "analyze",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
