//! Length clusters for segments and per-cluster weight vectors.

use serde::{Deserialize, Serialize};

use crate::trace::Segment;
use crate::ConfigError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverflowPolicy {
    /// Segments longer than the cap land in the last cluster.
    #[default]
    AssignTop,
    /// Segments longer than the cap are dropped from every count.
    Exclude,
}

/// Partition of segment lengths into `K` clusters.
///
/// Cluster `k` (1-based) holds lengths in `(boundaries[k-2], boundaries[k-1]]`;
/// the last cluster runs from the final boundary up to `cap`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterScheme {
    pub boundaries: Vec<usize>,
    pub cap: usize,
    #[serde(default)]
    pub overflow_policy: OverflowPolicy,
}

impl Default for ClusterScheme {
    fn default() -> Self {
        Self {
            boundaries: vec![60, 120, 180, 240],
            cap: 300,
            overflow_policy: OverflowPolicy::AssignTop,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Assignment {
    Cluster(usize),
    Excluded,
}

impl ClusterScheme {
    pub fn new(boundaries: Vec<usize>, cap: usize, overflow_policy: OverflowPolicy) -> Result<Self, ConfigError> {
        let scheme = Self {
            boundaries,
            cap,
            overflow_policy,
        };
        scheme.validate()?;
        Ok(scheme)
    }

    /// A single open cluster.
    pub fn single() -> Self {
        Self {
            boundaries: Vec::new(),
            cap: usize::MAX,
            overflow_policy: OverflowPolicy::AssignTop,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.boundaries.first() == Some(&0) {
            return Err(ConfigError::new("boundaries", "must be positive"));
        }
        if self.boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ConfigError::new("boundaries", "must be strictly increasing"));
        }
        if self.cap == 0 || self.boundaries.last().is_some_and(|&b| b >= self.cap) {
            return Err(ConfigError::new("cap", "must exceed the last boundary"));
        }
        Ok(())
    }

    pub fn with_overflow(mut self, policy: OverflowPolicy) -> Self {
        self.overflow_policy = policy;
        self
    }

    /// Number of clusters `K`.
    pub fn k(&self) -> usize {
        self.boundaries.len() + 1
    }

    pub fn assign(&self, token_len: usize) -> Assignment {
        if token_len > self.cap {
            return match self.overflow_policy {
                OverflowPolicy::AssignTop => Assignment::Cluster(self.k()),
                OverflowPolicy::Exclude => Assignment::Excluded,
            };
        }
        let idx = self.boundaries.partition_point(|&b| b < token_len);
        Assignment::Cluster(idx + 1)
    }

    /// Inclusive token-length range `(lo, hi]` of cluster `k`, as `(lo + 1, hi)`.
    pub fn bin(&self, k: usize) -> (usize, usize) {
        assert!((1..=self.k()).contains(&k), "cluster {k} out of range");
        let lo = if k == 1 { 0 } else { self.boundaries[k - 2] };
        let hi = self.boundaries.get(k - 1).copied().unwrap_or(self.cap);
        (lo + 1, hi)
    }
}

pub fn assign_cluster(token_len: usize, scheme: &ClusterScheme) -> Assignment {
    scheme.assign(token_len)
}

/// Per-cluster segment tallies for one trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClusterCounts {
    counts: Vec<u32>,
    excluded: u32,
}

impl ClusterCounts {
    pub fn zeros(k: usize) -> Self {
        Self {
            counts: vec![0; k],
            excluded: 0,
        }
    }

    pub fn from_lengths(lengths: impl IntoIterator<Item = usize>, scheme: &ClusterScheme) -> Self {
        let mut out = Self::zeros(scheme.k());
        for len in lengths {
            match scheme.assign(len) {
                Assignment::Cluster(k) => out.counts[k - 1] += 1,
                Assignment::Excluded => out.excluded += 1,
            }
        }
        out
    }

    /// Count for 1-based cluster `k`.
    pub fn get(&self, k: usize) -> u32 {
        self.counts[k - 1]
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.counts
    }

    pub fn excluded(&self) -> u32 {
        self.excluded
    }

    pub fn total(&self) -> u32 {
        self.counts.iter().sum()
    }
}

pub fn cluster_counts(segments: &[Segment], scheme: &ClusterScheme) -> ClusterCounts {
    ClusterCounts::from_lengths(segments.iter().map(Segment::token_len), scheme)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    /// Heavier weight on short-segment clusters.
    #[default]
    Descending,
    Ascending,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightScheme {
    pub kind: WeightKind,
    #[serde(default = "default_slope")]
    pub slope: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub custom: Option<Vec<f64>>,
}

fn default_slope() -> f64 {
    0.05
}

impl Default for WeightScheme {
    fn default() -> Self {
        Self::descending(default_slope())
    }
}

impl WeightScheme {
    pub fn descending(slope: f64) -> Self {
        Self {
            kind: WeightKind::Descending,
            slope,
            custom: None,
        }
    }

    pub fn ascending(slope: f64) -> Self {
        Self {
            kind: WeightKind::Ascending,
            slope,
            custom: None,
        }
    }

    pub fn custom(weights: Vec<f64>) -> Self {
        Self {
            kind: WeightKind::Custom,
            slope: default_slope(),
            custom: Some(weights),
        }
    }

    /// Weight vector `w^1..w^K`.
    pub fn weights(&self, k: usize) -> Result<Vec<f64>, ConfigError> {
        if k == 0 {
            return Err(ConfigError::new("clusters", "need at least one cluster"));
        }
        if !self.slope.is_finite() {
            return Err(ConfigError::new("slope", "must be finite"));
        }
        match self.kind {
            WeightKind::Descending => Ok((1..=k).map(|i| (k - i) as f64 * self.slope + 1.0).collect()),
            WeightKind::Ascending => Ok((1..=k).map(|i| (i - 1) as f64 * self.slope + 1.0).collect()),
            WeightKind::Custom => {
                let w = self
                    .custom
                    .as_ref()
                    .ok_or_else(|| ConfigError::new("custom", "required for custom weights"))?;
                if w.len() != k {
                    return Err(ConfigError::new(
                        "custom",
                        format!("expected {k} weights, got {}", w.len()),
                    ));
                }
                if w.iter().any(|&x| !(x.is_finite() && x > 0.0)) {
                    return Err(ConfigError::new("custom", "weights must be finite and positive"));
                }
                Ok(w.clone())
            }
        }
    }
}

pub fn make_weights(scheme: &WeightScheme, k: usize) -> Result<Vec<f64>, ConfigError> {
    scheme.weights(k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ulps(a: f64, b: f64) -> u64 {
        (a.to_bits() as i64 - b.to_bits() as i64).unsigned_abs()
    }

    #[test]
    fn assignment_examples() {
        let s = ClusterScheme::default();
        assert_eq!(s.assign(1), Assignment::Cluster(1));
        assert_eq!(s.assign(60), Assignment::Cluster(1));
        assert_eq!(s.assign(61), Assignment::Cluster(2));
        assert_eq!(s.assign(240), Assignment::Cluster(4));
        assert_eq!(s.assign(300), Assignment::Cluster(5));
        assert_eq!(s.assign(301), Assignment::Cluster(5));
        let ex = s.with_overflow(OverflowPolicy::Exclude);
        assert_eq!(ex.assign(300), Assignment::Cluster(5));
        assert_eq!(ex.assign(301), Assignment::Excluded);
    }

    #[test]
    fn bins_match_assignment() {
        let s = ClusterScheme::default();
        assert_eq!(s.bin(1), (1, 60));
        assert_eq!(s.bin(5), (241, 300));
        for k in 1..=5 {
            let (lo, hi) = s.bin(k);
            assert_eq!(s.assign(lo), Assignment::Cluster(k));
            assert_eq!(s.assign(hi), Assignment::Cluster(k));
        }
    }

    #[test]
    fn invalid_schemes_rejected() {
        assert!(ClusterScheme::new(vec![0, 10], 20, OverflowPolicy::AssignTop).is_err());
        assert!(ClusterScheme::new(vec![10, 10], 20, OverflowPolicy::AssignTop).is_err());
        assert!(ClusterScheme::new(vec![10, 30], 20, OverflowPolicy::AssignTop).is_err());
        assert!(ClusterScheme::new(vec![10, 30], 40, OverflowPolicy::AssignTop).is_ok());
    }

    #[test]
    fn counts_examples() {
        let s = ClusterScheme::default().with_overflow(OverflowPolicy::Exclude);
        assert_eq!(cluster_counts(&[], &s).as_slice(), [0; 5]);
        let segs: Vec<Segment> = [10usize, 70, 70, 500]
            .iter()
            .scan(0, |at, &len| {
                let seg = Segment::new("t", *at, *at + len);
                *at += len;
                Some(seg)
            })
            .collect();
        let c = cluster_counts(&segs, &s);
        assert_eq!(c.as_slice(), [1, 2, 0, 0, 0]);
        assert_eq!(c.excluded(), 1);
        assert_eq!(c.total(), 3);
    }

    #[test]
    fn counts_match_one_pass_tally() {
        let s = ClusterScheme::default().with_overflow(OverflowPolicy::Exclude);
        // 100 deterministic lengths spread over 1..=400.
        let lengths: Vec<usize> = (0..100).map(|i| (i * 37 + 11) % 400 + 1).collect();
        let mut tally = [0u32; 5];
        let mut dropped = 0;
        for &len in &lengths {
            if len > 300 {
                dropped += 1;
            } else {
                tally[(len - 1) / 60] += 1;
            }
        }
        let c = ClusterCounts::from_lengths(lengths.iter().copied(), &s);
        assert_eq!(c.as_slice(), tally);
        assert_eq!(c.excluded(), dropped);
        assert_eq!(c.total() + c.excluded(), 100);
    }

    #[test]
    fn weight_vectors() {
        let d = make_weights(&WeightScheme::descending(0.05), 5).unwrap();
        let a = make_weights(&WeightScheme::ascending(0.05), 5).unwrap();
        for (got, want) in d.iter().zip([1.20, 1.15, 1.10, 1.05, 1.00]) {
            assert!(ulps(*got, want) <= 1, "{d:?}");
        }
        for (got, want) in a.iter().zip([1.00, 1.05, 1.10, 1.15, 1.20]) {
            assert!(ulps(*got, want) <= 1, "{a:?}");
        }
        assert_eq!(make_weights(&WeightScheme::descending(0.0), 5).unwrap(), [1.0; 5]);
        assert_eq!(make_weights(&WeightScheme::ascending(0.0), 5).unwrap(), [1.0; 5]);
    }

    #[test]
    fn custom_weights_validated() {
        assert!(make_weights(&WeightScheme::custom(vec![1.0, 2.0]), 3).is_err());
        assert!(make_weights(&WeightScheme::custom(vec![1.0, 0.0, 2.0]), 3).is_err());
        assert_eq!(make_weights(&WeightScheme::custom(vec![3.0, 2.0, 1.0]), 3).unwrap(), [3.0, 2.0, 1.0]);
    }

    proptest! {
        #[test]
        fn descending_is_reverse_of_ascending(k in 2usize..12, slope in 0.0001f64..1.0) {
            let d = make_weights(&WeightScheme::descending(slope), k).unwrap();
            let mut a = make_weights(&WeightScheme::ascending(slope), k).unwrap();
            prop_assert!(d.windows(2).all(|w| w[0] > w[1]));
            prop_assert!(a.windows(2).all(|w| w[0] < w[1]));
            a.reverse();
            prop_assert_eq!(d, a);
        }

        #[test]
        fn assignment_is_monotone(a in 1usize..1000, b in 1usize..1000) {
            let s = ClusterScheme::default();
            let (lo, hi) = (a.min(b), a.max(b));
            match (s.assign(lo), s.assign(hi)) {
                (Assignment::Cluster(x), Assignment::Cluster(y)) => prop_assert!(x <= y),
                _ => unreachable!(),
            }
        }

        #[test]
        fn counts_are_order_invariant(mut lens in proptest::collection::vec(1usize..400, 0..60)) {
            let s = ClusterScheme::default().with_overflow(OverflowPolicy::Exclude);
            let a = ClusterCounts::from_lengths(lens.iter().copied(), &s);
            lens.reverse();
            let third = lens.len() / 3;
            lens.rotate_left(third);
            prop_assert_eq!(a, ClusterCounts::from_lengths(lens.iter().copied(), &s));
        }
    }
}
