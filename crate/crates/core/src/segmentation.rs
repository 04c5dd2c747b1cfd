//! Splitting a trace's thinking block into reasoning segments.
//!
//! Two boundary detectors are provided. The keyword segmenter opens a new
//! segment at tokens that begin with a discourse marker ("Wait", "So", ...).
//! The confidence segmenter opens one at strict local minima of the smoothed
//! token log-probability that fall below a threshold. Both share the same
//! cut-and-merge step, so every output covers the think span exactly.

use serde::{Deserialize, Serialize};

use crate::trace::{Segment, Span, Trace};
use crate::ConfigError;

pub const DEFAULT_KEYWORDS: &[&str] = &[
    "Wait",
    "Alternatively",
    "Hmm",
    "But",
    "Actually",
    "Okay",
    "So",
    "First",
    "Next",
    "Then",
    "Let me",
    "Now",
    "Therefore",
    "However",
    "Hold on",
    "Another",
];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SegmentError {
    #[error("trace `{trace_id}`: token {index} in the think span has no logprob")]
    MissingLogprob { trace_id: String, index: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KeywordSegmenterConfig {
    pub keywords: Vec<String>,
    pub match_case_sensitive: bool,
    pub min_segment_tokens: usize,
}

impl Default for KeywordSegmenterConfig {
    fn default() -> Self {
        Self {
            keywords: DEFAULT_KEYWORDS.iter().map(|k| k.to_string()).collect(),
            match_case_sensitive: true,
            min_segment_tokens: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfidenceSegmenterConfig {
    /// Absolute logprob threshold. When unset, each trace uses the
    /// `gamma_percentile`-th percentile of its own smoothed think logprobs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    pub gamma_percentile: f64,
    pub smoothing_window: usize,
    pub min_segment_tokens: usize,
    pub min_token_chars: usize,
}

impl Default for ConfidenceSegmenterConfig {
    fn default() -> Self {
        Self {
            gamma: None,
            gamma_percentile: 10.0,
            smoothing_window: 5,
            min_segment_tokens: 3,
            min_token_chars: 2,
        }
    }
}

/// Serialized segmenter choice; exactly one is active.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SegmenterConfig {
    Keyword(KeywordSegmenterConfig),
    Confidence(ConfidenceSegmenterConfig),
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self::Keyword(KeywordSegmenterConfig::default())
    }
}

#[derive(Debug, Clone)]
pub struct KeywordSegmenter {
    cfg: KeywordSegmenterConfig,
    // Normalized for matching (lowercased when case-insensitive).
    patterns: Vec<String>,
    max_pattern_len: usize,
}

impl KeywordSegmenter {
    pub fn new(cfg: KeywordSegmenterConfig) -> Result<Self, ConfigError> {
        if cfg.keywords.is_empty() {
            return Err(ConfigError::new("keywords", "must not be empty"));
        }
        if cfg.keywords.iter().any(String::is_empty) {
            return Err(ConfigError::new("keywords", "must not contain the empty string"));
        }
        if cfg.min_segment_tokens == 0 {
            return Err(ConfigError::new("min_segment_tokens", "must be >= 1"));
        }
        let patterns: Vec<String> = cfg
            .keywords
            .iter()
            .map(|k| if cfg.match_case_sensitive { k.clone() } else { k.to_lowercase() })
            .collect();
        let max_pattern_len = patterns.iter().map(String::len).max().unwrap_or(0);
        Ok(Self {
            cfg,
            patterns,
            max_pattern_len,
        })
    }

    pub fn config(&self) -> &KeywordSegmenterConfig {
        &self.cfg
    }

    /// Token indices (absolute) whose trimmed text begins with a keyword,
    /// before any merging. Keywords containing spaces may span several tokens.
    pub fn boundaries(&self, trace: &Trace) -> Vec<usize> {
        let span = trace.think_span();
        let tokens = trace.tokens();
        let mut out = Vec::new();
        let mut candidate = String::new();
        for i in span.range() {
            let head = tokens[i].text().trim_start();
            if head.is_empty() {
                continue;
            }
            candidate.clear();
            candidate.push_str(head);
            let mut j = i + 1;
            while candidate.len() < self.max_pattern_len && j < span.end {
                candidate.push_str(tokens[j].text());
                j += 1;
            }
            let hit = if self.cfg.match_case_sensitive {
                self.patterns.iter().any(|p| candidate.starts_with(p.as_str()))
            } else {
                let lowered = candidate.to_lowercase();
                self.patterns.iter().any(|p| lowered.starts_with(p.as_str()))
            };
            if hit {
                out.push(i);
            }
        }
        out
    }

    pub fn segment(&self, trace: &Trace) -> Vec<Segment> {
        cut_and_merge(
            trace.trace_id(),
            trace.think_span(),
            &self.boundaries(trace),
            self.cfg.min_segment_tokens,
        )
    }
}

#[derive(Debug, Clone)]
pub struct ConfidenceSegmenter {
    cfg: ConfidenceSegmenterConfig,
}

impl ConfidenceSegmenter {
    pub fn new(cfg: ConfidenceSegmenterConfig) -> Result<Self, ConfigError> {
        if let Some(g) = cfg.gamma {
            if !g.is_finite() || g >= 0.0 {
                return Err(ConfigError::new("gamma", format!("must be finite and negative, got {g}")));
            }
        }
        if !(0.0..=100.0).contains(&cfg.gamma_percentile) {
            return Err(ConfigError::new("gamma_percentile", "must lie in [0, 100]"));
        }
        if cfg.smoothing_window == 0 || cfg.smoothing_window.is_multiple_of(2) {
            return Err(ConfigError::new("smoothing_window", "must be an odd integer >= 1"));
        }
        if cfg.min_segment_tokens == 0 {
            return Err(ConfigError::new("min_segment_tokens", "must be >= 1"));
        }
        if cfg.min_token_chars == 0 {
            return Err(ConfigError::new("min_token_chars", "must be >= 1"));
        }
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &ConfidenceSegmenterConfig {
        &self.cfg
    }

    /// Absolute token indices that start a new segment.
    pub fn boundaries(&self, trace: &Trace) -> Result<Vec<usize>, SegmentError> {
        let span = trace.think_span();
        let think = trace.think_tokens();
        let raw = think
            .iter()
            .enumerate()
            .map(|(i, t)| {
                t.logprob().ok_or_else(|| SegmentError::MissingLogprob {
                    trace_id: trace.trace_id().to_string(),
                    index: span.start + i,
                })
            })
            .collect::<Result<Vec<f64>, _>>()?;
        let smoothed = smooth_logprobs(&raw, self.cfg.smoothing_window);
        let gamma = match self.cfg.gamma {
            Some(g) => g,
            None if smoothed.is_empty() => return Ok(Vec::new()),
            None => percentile(&smoothed, self.cfg.gamma_percentile),
        };
        let n = smoothed.len();
        let boundaries = (0..n)
            .filter(|&i| {
                let s = smoothed[i];
                s < gamma
                    && is_strict_local_min(&smoothed, i)
                    && non_whitespace_chars(think[i].text()) >= self.cfg.min_token_chars
            })
            .map(|i| span.start + i)
            .collect();
        Ok(boundaries)
    }

    pub fn segment(&self, trace: &Trace) -> Result<Vec<Segment>, SegmentError> {
        let cuts = self.boundaries(trace)?;
        Ok(cut_and_merge(
            trace.trace_id(),
            trace.think_span(),
            &cuts,
            self.cfg.min_segment_tokens,
        ))
    }
}

/// A validated segmenter of either kind.
#[derive(Debug, Clone)]
pub enum Segmenter {
    Keyword(KeywordSegmenter),
    Confidence(ConfidenceSegmenter),
}

impl Segmenter {
    pub fn from_config(cfg: &SegmenterConfig) -> Result<Self, ConfigError> {
        Ok(match cfg {
            SegmenterConfig::Keyword(c) => Self::Keyword(KeywordSegmenter::new(c.clone())?),
            SegmenterConfig::Confidence(c) => Self::Confidence(ConfidenceSegmenter::new(c.clone())?),
        })
    }

    pub fn segment(&self, trace: &Trace) -> Result<Vec<Segment>, SegmentError> {
        match self {
            Self::Keyword(s) => Ok(s.segment(trace)),
            Self::Confidence(s) => s.segment(trace),
        }
    }

    pub fn is_confidence(&self) -> bool {
        matches!(self, Self::Confidence(_))
    }
}

pub fn segment_keywords(trace: &Trace, cfg: &KeywordSegmenterConfig) -> Result<Vec<Segment>, ConfigError> {
    Ok(KeywordSegmenter::new(cfg.clone())?.segment(trace))
}

pub fn find_boundaries_confidence(trace: &Trace, cfg: &ConfidenceSegmenterConfig) -> Result<Vec<usize>, crate::Error> {
    Ok(ConfidenceSegmenter::new(cfg.clone())?.boundaries(trace)?)
}

pub fn segment_confidence(trace: &Trace, cfg: &ConfidenceSegmenterConfig) -> Result<Vec<Segment>, crate::Error> {
    Ok(ConfidenceSegmenter::new(cfg.clone())?.segment(trace)?)
}

/// Centered moving average. Near the ends the window is truncated to the
/// available elements.
///
/// # Panics
///
/// If `window` is even or zero.
pub fn smooth_logprobs(values: &[f64], window: usize) -> Vec<f64> {
    assert!(window % 2 == 1, "smoothing window must be odd, got {window}");
    let half = window / 2;
    let n = values.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            // Averaging deviations from the center keeps constant runs exact.
            let center = values[i];
            let dev: f64 = values[lo..hi].iter().map(|v| v - center).sum();
            center + dev / (hi - lo) as f64
        })
        .collect()
}

fn is_strict_local_min(values: &[f64], i: usize) -> bool {
    let n = values.len();
    if n < 2 {
        return false;
    }
    let v = values[i];
    let left = i == 0 || v < values[i - 1];
    let right = i + 1 == n || v < values[i + 1];
    left && right
}

fn non_whitespace_chars(text: &str) -> usize {
    text.chars().filter(|c| !c.is_whitespace()).count()
}

/// Linear-interpolated percentile, `p` in `[0, 100]`. `values` must be non-empty.
pub(crate) fn percentile(values: &[f64], p: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
}

/// Cuts `span` at each boundary and merges short pieces: a short segment is
/// absorbed by its predecessor, a short leading segment by its successor.
pub fn cut_and_merge(trace_id: &str, span: Span, boundaries: &[usize], min_segment_tokens: usize) -> Vec<Segment> {
    if span.is_empty() {
        return Vec::new();
    }
    let mut cuts: Vec<usize> = std::iter::once(span.start)
        .chain(boundaries.iter().copied().filter(|&b| b > span.start && b < span.end))
        .collect();
    cuts.sort_unstable();
    cuts.dedup();

    let mut spans: Vec<Span> = Vec::with_capacity(cuts.len());
    let mut pending: Option<usize> = None;
    for (i, &cut) in cuts.iter().enumerate() {
        let end = cuts.get(i + 1).copied().unwrap_or(span.end);
        let start = pending.take().unwrap_or(cut);
        if end - start >= min_segment_tokens {
            spans.push(Span::new(start, end));
        } else if let Some(last) = spans.last_mut() {
            last.end = end;
        } else {
            pending = Some(start);
        }
    }
    if let Some(start) = pending {
        spans.push(Span::new(start, span.end));
    }
    spans
        .into_iter()
        .map(|s| Segment::new(trace_id, s.start, s.end))
        .collect()
}
