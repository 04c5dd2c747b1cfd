//! Desk-scale policy-gradient loop over a synthetic segment generator.
//!
//! The policy emits segments directly: each segment picks a length cluster
//! from a softmax over `cluster_logits`, draws its token length uniformly
//! inside that cluster's bin, and then decides whether to stop. A synthetic
//! verifier scores the segment mix, rewards are shaped by the penalty module,
//! and a score-function step updates the logits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{ClusterCounts, ClusterScheme, WeightScheme};
use crate::penalty::{shape_from_counts, PenaltyConfig};
use crate::trace::{Span, Token, Trace};
use crate::ConfigError;

const ROLLOUT_STREAM: u64 = 0x726f_6c6c;
const NOISE_STREAM: u64 = 0x6e6f_6973;

/// Per-rollout RNG derived from `(seed, step, index)` so results do not depend
/// on scheduling order or thread count.
fn derived_rng(seed: u64, stream: u64, step: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (chunk, word) in key.chunks_exact_mut(8).zip([seed, stream, step, index]) {
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Parameters of the synthetic policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticPolicy {
    pub cluster_logits: Vec<f64>,
    pub stop_logit: f64,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticPolicy {
    fn default() -> Self {
        Self {
            cluster_logits: vec![2.0, 1.0, 0.0, -1.0, -2.0],
            stop_logit: 0.0,
            learning_rate: 0.05,
            seed: 0,
        }
    }
}

impl SyntheticPolicy {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.cluster_logits.is_empty() {
            return Err(ConfigError::new("policy.cluster_logits", "must be non-empty"));
        }
        if self.cluster_logits.iter().any(|l| !l.is_finite()) {
            return Err(ConfigError::new("policy.cluster_logits", "must be finite"));
        }
        if !self.stop_logit.is_finite() {
            return Err(ConfigError::new("policy.stop_logit", "must be finite"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ConfigError::new("policy.learning_rate", "must be a positive finite number"));
        }
        Ok(())
    }

    /// Softmax of the cluster logits.
    pub fn cluster_probs(&self) -> Vec<f64> {
        softmax(&self.cluster_logits)
    }

    /// Probability of stopping after each segment.
    pub fn stop_prob(&self) -> f64 {
        sigmoid(self.stop_logit)
    }

    fn apply(&self, grad: &Gradient) -> Self {
        let lr = self.learning_rate;
        let mut next = self.clone();
        for (l, g) in next.cluster_logits.iter_mut().zip(&grad.cluster_logits) {
            *l += lr * g;
        }
        next.stop_logit += lr * grad.stop_logit;
        next
    }
}

/// Scores a rollout's segment mix against a threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticVerifier {
    pub quality_weights: Vec<f64>,
    pub threshold: f64,
    /// Standard deviation of the Gaussian noise added to the quality sum.
    #[serde(default)]
    pub noise_scale: f64,
    pub noise_seed: u64,
}

impl Default for SyntheticVerifier {
    fn default() -> Self {
        Self {
            quality_weights: vec![0.05, 0.4, 1.0, 1.6, 2.2],
            threshold: 2.0,
            noise_scale: 0.5,
            noise_seed: 1,
        }
    }
}

impl SyntheticVerifier {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.quality_weights.iter().any(|q| !q.is_finite()) {
            return Err(ConfigError::new("verifier.quality_weights", "must be finite"));
        }
        if self.threshold.is_nan() {
            return Err(ConfigError::new("verifier.threshold", "must not be NaN"));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(ConfigError::new("verifier.noise_scale", "must be finite and >= 0"));
        }
        Ok(())
    }

    /// Noise-free quality of a rollout.
    pub fn quality(&self, rollout: &Rollout) -> f64 {
        rollout.clusters.iter().map(|&k| self.quality_weights[k - 1]).sum()
    }
}

/// One generated response: native segments plus the score of every decision.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub step: u64,
    pub index: u64,
    /// 1-based cluster of each segment.
    pub clusters: Vec<usize>,
    /// Token length of each segment.
    pub lengths: Vec<usize>,
    /// Sum of log-probabilities of every sampled decision.
    pub log_prob: f64,
    /// Gradient of `log_prob` with respect to the policy parameters.
    pub score: Gradient,
}

impl Rollout {
    pub fn total_tokens(&self) -> usize {
        self.lengths.iter().sum()
    }

    pub fn n_segments(&self) -> usize {
        self.lengths.len()
    }

    pub fn counts(&self, scheme: &ClusterScheme) -> ClusterCounts {
        ClusterCounts::from_lengths(self.lengths.iter().copied(), scheme)
    }

    /// Materializes the rollout as a trace whose every segment opens with a
    /// segmentation keyword, so the keyword segmenter can recover it.
    pub fn to_trace(&self, prompt_id: &str, reward: f64) -> Trace {
        let mut tokens = Vec::with_capacity(self.total_tokens());
        for &len in &self.lengths {
            for i in 0..len {
                let text = if i == 0 { "Next" } else { " step" };
                tokens.push(Token::new(text, None, None).expect("static token text is valid"));
            }
        }
        let n = tokens.len();
        Trace::new(format!("r{}", self.index), prompt_id, tokens, Span::new(0, n), reward)
            .expect("synthetic trace is valid")
    }
}

/// Gradient (or score) with respect to the policy parameters.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Gradient {
    pub cluster_logits: Vec<f64>,
    pub stop_logit: f64,
}

impl Gradient {
    pub fn zeros(k: usize) -> Self {
        Self {
            cluster_logits: vec![0.0; k],
            stop_logit: 0.0,
        }
    }

    fn add_scaled(&mut self, other: &Gradient, scale: f64) {
        for (a, b) in self.cluster_logits.iter_mut().zip(&other.cluster_logits) {
            *a += scale * b;
        }
        self.stop_logit += scale * other.stop_logit;
    }

    fn scale(&mut self, s: f64) {
        self.cluster_logits.iter_mut().for_each(|g| *g *= s);
        self.stop_logit *= s;
    }
}

/// Samples one rollout.
///
/// Every segment consumes exactly three uniforms (cluster, length, stop) so
/// two policies driven by the same seed share common random numbers.
pub fn generate_rollout(
    policy: &SyntheticPolicy,
    scheme: &ClusterScheme,
    max_segments: usize,
    step: u64,
    index: u64,
) -> Rollout {
    let k = scheme.k();
    assert_eq!(policy.cluster_logits.len(), k, "policy and cluster scheme disagree on K");
    let probs = policy.cluster_probs();
    let p_stop = policy.stop_prob();
    let mut rng = derived_rng(policy.seed, ROLLOUT_STREAM, step, index);
    let mut clusters = Vec::new();
    let mut lengths = Vec::new();
    let mut log_prob = 0.0;
    let mut score = Gradient::zeros(k);
    for s in 0..max_segments.max(1) {
        let u_cluster: f64 = rng.random();
        let u_len: f64 = rng.random();
        let u_stop: f64 = rng.random();

        let mut acc = 0.0;
        let mut cluster = k;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u_cluster < acc {
                cluster = i + 1;
                break;
            }
        }
        let (lo, hi) = scheme.bin(cluster);
        let len = (lo + (u_len * (hi - lo + 1) as f64) as usize).min(hi);
        clusters.push(cluster);
        lengths.push(len);
        log_prob += probs[cluster - 1].ln();
        for (i, (g, p)) in score.cluster_logits.iter_mut().zip(&probs).enumerate() {
            *g += f64::from(u8::from(i + 1 == cluster)) - p;
        }

        if s + 1 == max_segments.max(1) {
            break;
        }
        if u_stop < p_stop {
            log_prob += p_stop.ln();
            score.stop_logit += 1.0 - p_stop;
            break;
        }
        log_prob += (1.0 - p_stop).ln();
        score.stop_logit -= p_stop;
    }
    Rollout {
        step,
        index,
        clusters,
        lengths,
        log_prob,
        score,
    }
}

/// Materialized form of [`generate_rollout`].
pub fn generate_trace(
    policy: &SyntheticPolicy,
    scheme: &ClusterScheme,
    max_segments: usize,
    step: u64,
    index: u64,
) -> Trace {
    generate_rollout(policy, scheme, max_segments, step, index).to_trace("synthetic", 0.0)
}

/// Reward 1 iff quality plus seeded noise reaches the threshold.
pub fn verify(rollout: &Rollout, verifier: &SyntheticVerifier) -> f64 {
    let mut total = verifier.quality(rollout);
    if verifier.noise_scale > 0.0 {
        let mut rng = derived_rng(verifier.noise_seed, NOISE_STREAM, rollout.step, rollout.index);
        let z: f64 = rng.sample(StandardNormal);
        total += verifier.noise_scale * z;
    }
    if total >= verifier.threshold {
        1.0
    } else {
        0.0
    }
}

/// Per-step metrics of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimMetrics {
    pub step: u64,
    pub accuracy: f64,
    pub mean_response_tokens: f64,
    /// Pooled over the group: total tokens over total segments.
    pub mean_segment_tokens: f64,
    pub mean_segments: f64,
}

/// Full simulation configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub policy: SyntheticPolicy,
    pub verifier: SyntheticVerifier,
    pub penalty: PenaltyConfig,
    pub group_size: usize,
    pub max_segments: usize,
    /// Number of trailing steps averaged when summarizing a run.
    pub summary_window: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            policy: SyntheticPolicy::default(),
            verifier: SyntheticVerifier::default(),
            penalty: PenaltyConfig {
                alpha: 0.04,
                ..PenaltyConfig::default()
            },
            group_size: 16,
            max_segments: 64,
            summary_window: 50,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.policy.validate()?;
        self.verifier.validate()?;
        self.penalty.validate()?;
        let k = self.penalty.clusters.k();
        if self.policy.cluster_logits.len() != k {
            return Err(ConfigError::new(
                "policy.cluster_logits",
                format!("expected {k} logits to match the cluster scheme"),
            ));
        }
        if self.verifier.quality_weights.len() != k {
            return Err(ConfigError::new(
                "verifier.quality_weights",
                format!("expected {k} weights to match the cluster scheme"),
            ));
        }
        self.penalty.weights.weights(k)?;
        if self.group_size < 2 {
            return Err(ConfigError::new("group_size", "must be >= 2"));
        }
        if self.max_segments == 0 {
            return Err(ConfigError::new("max_segments", "must be >= 1"));
        }
        if self.summary_window == 0 {
            return Err(ConfigError::new("summary_window", "must be >= 1"));
        }
        Ok(())
    }

    /// Copy of this config with a different weight scheme.
    pub fn with_weights(&self, weights: WeightScheme) -> Self {
        Self {
            penalty: PenaltyConfig {
                weights,
                ..self.penalty.clone()
            },
            ..self.clone()
        }
    }
}

/// One sampled, verified and shaped group.
#[derive(Debug, Clone)]
pub struct ScoredGroup {
    pub rollouts: Vec<Rollout>,
    pub rewards: Vec<f64>,
    pub shaped: Vec<f64>,
}

/// Samples and scores one rollout group. `cfg` must be valid.
pub fn sample_group(cfg: &SimConfig, policy: &SyntheticPolicy, step: u64) -> ScoredGroup {
    let scheme = &cfg.penalty.clusters;
    let rollouts: Vec<Rollout> = (0..cfg.group_size as u64)
        .into_par_iter()
        .map(|i| generate_rollout(policy, scheme, cfg.max_segments, step, i))
        .collect();
    let rewards: Vec<f64> = rollouts.iter().map(|r| verify(r, &cfg.verifier)).collect();
    let counts: Vec<ClusterCounts> = rollouts.iter().map(|r| r.counts(scheme)).collect();
    let lens: Vec<usize> = rollouts.iter().map(Rollout::total_tokens).collect();
    let shaped = shape_from_counts(&rewards, &counts, &lens, &cfg.penalty).expect("validated penalty config");
    ScoredGroup {
        rollouts,
        rewards,
        shaped,
    }
}

/// Group-centered advantages scaled by `G / (G - 1)`, which equals a
/// leave-one-out baseline and keeps the gradient estimate unbiased.
pub fn centered_advantages(shaped: &[f64]) -> Vec<f64> {
    let g = shaped.len() as f64;
    let mean = shaped.iter().sum::<f64>() / g;
    let scale = if shaped.len() > 1 { g / (g - 1.0) } else { 0.0 };
    shaped.iter().map(|r| (r - mean) * scale).collect()
}

/// Score-function estimate `mean_i A_i * grad log pi(y_i)` for one group.
pub fn group_gradient(group: &ScoredGroup) -> Gradient {
    let k = group.rollouts.first().map_or(0, |r| r.score.cluster_logits.len());
    let mut grad = Gradient::zeros(k);
    for (r, a) in group.rollouts.iter().zip(centered_advantages(&group.shaped)) {
        grad.add_scaled(&r.score, a);
    }
    grad.scale(1.0 / group.rollouts.len() as f64);
    grad
}

fn metrics_for(step: u64, group: &ScoredGroup) -> SimMetrics {
    let n = group.rollouts.len() as f64;
    let tokens: usize = group.rollouts.iter().map(Rollout::total_tokens).sum();
    let segments: usize = group.rollouts.iter().map(Rollout::n_segments).sum();
    SimMetrics {
        step,
        accuracy: group.rewards.iter().filter(|&&r| r == 1.0).count() as f64 / n,
        mean_response_tokens: tokens as f64 / n,
        mean_segment_tokens: tokens as f64 / segments as f64,
        mean_segments: segments as f64 / n,
    }
}

/// Samples a group, shapes its rewards and applies one gradient step.
pub fn train_step(cfg: &SimConfig, policy: &SyntheticPolicy, step: u64) -> (SyntheticPolicy, SimMetrics) {
    let group = sample_group(cfg, policy, step);
    let next = policy.apply(&group_gradient(&group));
    (next, metrics_for(step, &group))
}

/// Averages `n_groups` independent group estimates at a fixed policy.
pub fn estimate_gradient(cfg: &SimConfig, policy: &SyntheticPolicy, n_groups: usize) -> Gradient {
    let k = policy.cluster_logits.len();
    let grads: Vec<Gradient> = (0..n_groups as u64)
        .into_par_iter()
        .map(|step| group_gradient(&sample_group(cfg, policy, step)))
        .collect();
    let mut total = Gradient::zeros(k);
    for g in &grads {
        total.add_scaled(g, 1.0);
    }
    total.scale(1.0 / n_groups.max(1) as f64);
    total
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct SimRun {
    pub metrics: Vec<SimMetrics>,
    pub policy: SyntheticPolicy,
}

pub fn run_simulation(cfg: &SimConfig, steps: usize) -> Result<SimRun, ConfigError> {
    cfg.validate()?;
    if steps == 0 {
        return Err(ConfigError::new("steps", "must be >= 1"));
    }
    let mut policy = cfg.policy.clone();
    let mut metrics = Vec::with_capacity(steps);
    for step in 0..steps as u64 {
        let (next, m) = train_step(cfg, &policy, step);
        policy = next;
        metrics.push(m);
    }
    Ok(SimRun { metrics, policy })
}

/// Descending- and ascending-weight runs sharing every seed.
#[derive(Debug, Clone)]
pub struct PairedRun {
    pub descending: SimRun,
    pub ascending: SimRun,
}

pub fn run_paired(cfg: &SimConfig, steps: usize) -> Result<PairedRun, ConfigError> {
    let slope = cfg.penalty.weights.slope;
    let (descending, ascending) = rayon::join(
        || run_simulation(&cfg.with_weights(WeightScheme::descending(slope)), steps),
        || run_simulation(&cfg.with_weights(WeightScheme::ascending(slope)), steps),
    );
    Ok(PairedRun {
        descending: descending?,
        ascending: ascending?,
    })
}

/// Trailing-window means of a run's metrics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimSummary {
    pub window: usize,
    pub accuracy: f64,
    pub mean_response_tokens: f64,
    pub mean_segment_tokens: f64,
    pub mean_segments: f64,
}

pub fn summarize(metrics: &[SimMetrics], window: usize) -> SimSummary {
    let tail = &metrics[metrics.len().saturating_sub(window.max(1))..];
    let n = tail.len().max(1) as f64;
    let mean = |f: fn(&SimMetrics) -> f64| tail.iter().map(f).sum::<f64>() / n;
    SimSummary {
        window: tail.len(),
        accuracy: mean(|m| m.accuracy),
        mean_response_tokens: mean(|m| m.mean_response_tokens),
        mean_segment_tokens: mean(|m| m.mean_segment_tokens),
        mean_segments: mean(|m| m.mean_segments),
    }
}
