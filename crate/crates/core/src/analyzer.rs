//! Corpus-level segment diagnostics.
//!
//! * [`corpus_stats`]: mean think tokens, mean segment count, and the share of
//!   segments in each length cluster.
//! * [`cluster_ratio_report`]: per-cluster mean segment counts on passed vs
//!   failed traces, their ratio, and an OLS line of ratio against cluster index.
//! * [`method_comparison`]: [`corpus_stats`] side by side for several corpora.
//!
//! Aggregation is over integer tallies, so results do not depend on trace
//! order or on how segmentation work is scheduled.

use std::collections::BTreeMap;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{ClusterCounts, ClusterScheme};
use crate::segmentation::{SegmentError, Segmenter};
use crate::trace::{Segment, Trace};

/// Traces with `verifier_reward >= PASS_THRESHOLD` count as passed.
pub const PASS_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnalyzeError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("corpus for method `{0}` is empty")]
    EmptyMethod(String),
    #[error("need at least two corpora to compare, got {0}")]
    TooFewCorpora(usize),
    #[error("need passed and failed traces (passed: {passed}, failed: {failed})")]
    MissingOutcome { passed: usize, failed: usize },
    #[error("only {0} cluster(s) have a nonzero failed-side mean; a line fit needs two")]
    TooFewRatios(usize),
    #[error(transparent)]
    Segment(#[from] SegmentError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_traces: usize,
    pub mean_tokens: f64,
    pub mean_segments: f64,
    /// Fraction of clustered segments in each cluster `1..=K`.
    pub cluster_share: Vec<f64>,
    pub excluded_segments: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRatioReport {
    /// Passed-side mean count over failed-side mean count, keyed by cluster.
    /// Clusters with a zero failed-side mean are absent.
    pub ratio: BTreeMap<usize, f64>,
    pub passed_mean: Vec<f64>,
    pub failed_mean: Vec<f64>,
    pub n_passed: usize,
    pub n_failed: usize,
    pub slope: f64,
    pub intercept: f64,
    pub scheme: ClusterScheme,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    #[serde(flatten)]
    pub stats: CorpusStats,
}

impl MethodRow {
    pub fn cluster1_share(&self) -> f64 {
        self.stats.cluster_share.first().copied().unwrap_or(0.0)
    }
}

pub fn segment_all(traces: &[Trace], segmenter: &Segmenter) -> Result<Vec<Vec<Segment>>, SegmentError> {
    traces.par_iter().map(|t| segmenter.segment(t)).collect()
}

pub fn corpus_stats(traces: &[Trace], segmenter: &Segmenter, scheme: &ClusterScheme) -> Result<CorpusStats, AnalyzeError> {
    let segments = segment_all(traces, segmenter)?;
    corpus_stats_from_segments(traces, &segments, scheme)
}

/// [`corpus_stats`] with segmentation already done; `segments[i]` belongs to `traces[i]`.
pub fn corpus_stats_from_segments(
    traces: &[Trace],
    segments: &[Vec<Segment>],
    scheme: &ClusterScheme,
) -> Result<CorpusStats, AnalyzeError> {
    assert_eq!(traces.len(), segments.len());
    if traces.is_empty() {
        return Err(AnalyzeError::EmptyCorpus);
    }
    let k = scheme.k();
    let mut tokens = 0u64;
    let mut n_segments = 0u64;
    let mut per_cluster = vec![0u64; k];
    let mut excluded = 0u64;
    for (t, segs) in traces.iter().zip(segments) {
        tokens += t.think_len() as u64;
        n_segments += segs.len() as u64;
        let c = ClusterCounts::from_lengths(segs.iter().map(Segment::token_len), scheme);
        for (acc, &x) in per_cluster.iter_mut().zip(c.as_slice()) {
            *acc += u64::from(x);
        }
        excluded += u64::from(c.excluded());
    }
    let clustered: u64 = per_cluster.iter().sum();
    let n = traces.len() as f64;
    let cluster_share = per_cluster
        .iter()
        .map(|&c| if clustered == 0 { 0.0 } else { c as f64 / clustered as f64 })
        .collect();
    Ok(CorpusStats {
        n_traces: traces.len(),
        mean_tokens: tokens as f64 / n,
        mean_segments: n_segments as f64 / n,
        cluster_share,
        excluded_segments: excluded,
    })
}

pub fn cluster_ratio_report(
    traces: &[Trace],
    segmenter: &Segmenter,
    scheme: &ClusterScheme,
) -> Result<ClusterRatioReport, AnalyzeError> {
    let segments = segment_all(traces, segmenter)?;
    cluster_ratio_report_from_segments(traces, &segments, scheme)
}

pub fn cluster_ratio_report_from_segments(
    traces: &[Trace],
    segments: &[Vec<Segment>],
    scheme: &ClusterScheme,
) -> Result<ClusterRatioReport, AnalyzeError> {
    assert_eq!(traces.len(), segments.len());
    let k = scheme.k();
    let mut sums = [vec![0u64; k], vec![0u64; k]];
    let mut n = [0usize; 2];
    for (t, segs) in traces.iter().zip(segments) {
        let side = usize::from(t.verifier_reward() >= PASS_THRESHOLD);
        n[side] += 1;
        let c = ClusterCounts::from_lengths(segs.iter().map(Segment::token_len), scheme);
        for (acc, &x) in sums[side].iter_mut().zip(c.as_slice()) {
            *acc += u64::from(x);
        }
    }
    let [n_failed, n_passed] = n;
    if n_passed == 0 || n_failed == 0 {
        return Err(AnalyzeError::MissingOutcome {
            passed: n_passed,
            failed: n_failed,
        });
    }
    let mean = |s: &[u64], n: usize| s.iter().map(|&x| x as f64 / n as f64).collect::<Vec<f64>>();
    let failed_mean = mean(&sums[0], n_failed);
    let passed_mean = mean(&sums[1], n_passed);
    let ratio: BTreeMap<usize, f64> = (1..=k)
        .filter(|&c| failed_mean[c - 1] > 0.0)
        .map(|c| (c, passed_mean[c - 1] / failed_mean[c - 1]))
        .collect();
    if ratio.len() < 2 {
        return Err(AnalyzeError::TooFewRatios(ratio.len()));
    }
    let points: Vec<(f64, f64)> = ratio.iter().map(|(&c, &r)| (c as f64, r)).collect();
    let (slope, intercept) = least_squares(&points);
    Ok(ClusterRatioReport {
        ratio,
        passed_mean,
        failed_mean,
        n_passed,
        n_failed,
        slope,
        intercept,
        scheme: scheme.clone(),
    })
}

/// Ordinary least squares `y = slope * x + intercept`. Needs two distinct x values.
pub fn least_squares(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = points.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

pub fn method_comparison(
    corpora: &IndexMap<String, Vec<Trace>>,
    segmenter: &Segmenter,
    scheme: &ClusterScheme,
) -> Result<Vec<MethodRow>, AnalyzeError> {
    if corpora.len() < 2 {
        return Err(AnalyzeError::TooFewCorpora(corpora.len()));
    }
    corpora
        .iter()
        .map(|(method, traces)| {
            if traces.is_empty() {
                return Err(AnalyzeError::EmptyMethod(method.clone()));
            }
            Ok(MethodRow {
                method: method.clone(),
                stats: corpus_stats(traces, segmenter, scheme)?,
            })
        })
        .collect()
}
