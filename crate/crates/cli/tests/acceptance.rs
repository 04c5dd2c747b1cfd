//! Acceptance suite. Each criterion prints one PASS/FAIL line with its
//! elapsed time; the process exits non-zero if any criterion fails.

mod common;

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::Request;
use http_body_util::BodyExt;
use rand::seq::SliceRandom;
use rand::Rng;
use serde_json::{json, Value};
use statrs::distribution::{ContinuousCDF, Normal};
use tower::ServiceExt;

use grsp_core::advantage::has_spread;
use grsp_core::analyzer::{cluster_ratio_report_from_segments, corpus_stats_from_segments, segment_all};
use grsp_core::penalty::DEFAULT_STD_FLOOR;
use grsp_core::segmentation::KeywordSegmenter;
use grsp_core::simulator::{estimate_gradient, run_paired, summarize};
use grsp_core::{
    clustered_penalty, dynamic_sampling_filter, find_boundaries_confidence, grpo_advantages, group_zscores,
    make_weights, ClusterScheme, ConfidenceSegmenterConfig, EngineConfig, KeywordSegmenterConfig,
    OverflowPolicy, PenaltyConfig, RolloutGroup, Segment, Segmenter, SegmenterConfig, SimConfig, Span,
    SyntheticPolicy, Token, Trace, WeightScheme,
};

use common::{fixture_groups, grsp, random_trace, rng, stdout_lines, write_jsonl};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn run(n: usize, budget: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    };
    let elapsed = start.elapsed();
    let outcome = match outcome {
        Ok(detail) if elapsed > budget => Err(format!("{detail}; exceeded {budget:?} budget")),
        other => other,
    };
    let secs = elapsed.as_secs_f64();
    match &outcome {
        Ok(detail) => println!("criterion {n}: PASS ({secs:.2}s) {detail}"),
        Err(why) => println!("criterion {n}: FAIL ({secs:.2}s) {why}"),
    }
    outcome.is_ok()
}

fn main() {
    let results = [
        run(1, Duration::from_secs(1), weight_vectors),
        run(2, Duration::from_secs(1), penalty_oracle),
        run(3, Duration::from_secs(1), zscore_invariants),
        run(4, Duration::from_secs(5), segmentation_reconstruction),
        run(5, Duration::from_secs(1), confidence_oracle),
        run(6, Duration::from_secs(1), advantage_example),
        run(7, Duration::from_secs(60), gradient_check),
        run(8, Duration::from_secs(300), directional_check),
        run(9, Duration::from_secs(1), analyzer_fixtures),
        run(10, Duration::from_secs(10), service_equivalence),
    ];
    let passed = results.iter().filter(|&&ok| ok).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// 1. weight vectors

fn within_ulp(a: f64, b: f64) -> bool {
    (a.to_bits() as i64 - b.to_bits() as i64).abs() <= 1
}

fn weight_vectors() -> Outcome {
    let desc = make_weights(&WeightScheme::descending(0.05), 5).map_err(|e| e.to_string())?;
    let asc = make_weights(&WeightScheme::ascending(0.05), 5).map_err(|e| e.to_string())?;
    let expected = [1.20, 1.15, 1.10, 1.05, 1.00];
    ensure(desc.iter().zip(&expected).all(|(a, b)| within_ulp(*a, *b)) && desc.len() == 5, || {
        format!("descending {desc:?}")
    })?;
    ensure(asc.iter().zip(expected.iter().rev()).all(|(a, b)| within_ulp(*a, *b)) && asc.len() == 5, || {
        format!("ascending {asc:?}")
    })?;
    Ok(format!("descending {desc:?}, ascending {asc:?}"))
}

// ---------------------------------------------------------------------------
// 2. clustered penalty vs a naive re-implementation

/// Negated population z-score per column, zero when the spread is below the
/// floor, and the weighted row sum.
fn naive_penalty(counts: &[Vec<u32>], weights: &[f64], floor: f64) -> Vec<(Vec<f64>, f64)> {
    let n = counts.len();
    let k = weights.len();
    let mut per = vec![vec![0.0; k]; n];
    for c in 0..k {
        let col: Vec<f64> = counts.iter().map(|r| r[c] as f64).collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        for i in 0..n {
            per[i][c] = if std < floor { 0.0 } else { -(col[i] - mean) / std };
        }
    }
    per.into_iter()
        .map(|p| {
            let total = p.iter().zip(weights).map(|(a, w)| a * w).sum();
            (p, total)
        })
        .collect()
}

fn penalty_oracle() -> Outcome {
    let mut r = rng(2);
    let cfg = PenaltyConfig::default();
    let scheme = &cfg.clusters;
    let k = scheme.k();
    // Descending weights written out independently: 1 + (K - k) * 0.05.
    let weights: Vec<f64> = (1..=k).map(|c| 1.0 + (k - c) as f64 * 0.05).collect();
    let mut worst = 0.0f64;
    let mut degenerate_columns = 0;
    for g in 0..200 {
        let n = r.random_range(2..=10);
        let mut counts: Vec<Vec<u32>> = (0..n).map(|_| (0..k).map(|_| r.random_range(0..=50)).collect()).collect();
        // Some columns are constant so the floor branch is exercised.
        for c in 0..k {
            if r.random_bool(0.15) {
                let v = counts[0][c];
                counts.iter_mut().for_each(|row| row[c] = v);
                degenerate_columns += 1;
            }
        }
        let mut traces = Vec::new();
        let mut segments = HashMap::new();
        for (i, row) in counts.iter().enumerate() {
            let id = format!("g{g}t{i}");
            let mut segs = Vec::new();
            let mut pos = 0;
            for (c, &m) in row.iter().enumerate() {
                let (lo, hi) = scheme.bin(c + 1);
                for _ in 0..m {
                    let len = r.random_range(lo..=hi);
                    segs.push(Segment::new(&id, pos, pos + len));
                    pos += len;
                }
            }
            segs.shuffle(&mut r);
            traces.push(Trace::new(&id, "p", Vec::new(), Span::new(0, 0), 0.0).unwrap());
            segments.insert(id, segs);
        }
        let group = RolloutGroup::new("p", traces).unwrap();
        let got = clustered_penalty(&group, &segments, &cfg).map_err(|e| e.to_string())?;
        let want = naive_penalty(&counts, &weights, cfg.std_floor);
        for ((_, p), (per, total)) in got.iter().zip(&want) {
            for (a, b) in p.per_cluster.iter().zip(per) {
                // z-scores are unit-scale quantities
                worst = worst.max((a - b).abs() / b.abs().max(1.0));
            }
            let scale = per.iter().zip(&weights).map(|(p, w)| (p * w).abs()).sum::<f64>().max(total.abs());
            if scale > 0.0 {
                worst = worst.max((p.total - total).abs() / scale);
            } else {
                ensure(p.total == 0.0, || format!("group {g}: expected zero total, got {}", p.total))?;
            }
        }
    }
    ensure(worst < 1e-12, || format!("max relative error {worst:e}"))?;
    ensure(degenerate_columns > 0, || "no degenerate column generated".into())?;
    Ok(format!("200 groups, max relative error {worst:.2e}"))
}

// ---------------------------------------------------------------------------
// 3. z-score invariants

fn pop_mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

fn zscore_invariants() -> Outcome {
    let mut r = rng(3);
    let floor = DEFAULT_STD_FLOOR;
    let cfg = PenaltyConfig::default();
    let scheme = &cfg.clusters;
    let weights = make_weights(&cfg.weights, scheme.k()).unwrap();
    let (mut worst_sum, mut worst_shift, mut worst_adv) = (0.0f64, 0.0f64, 0.0f64);
    let mut checked_columns = 0;
    for i in 0..1000 {
        let n = r.random_range(2..=16);
        // Per-cluster penalty sums.
        let counts: Vec<grsp_core::ClusterCounts> = (0..n)
            .map(|_| {
                let lens: Vec<usize> = (0..r.random_range(0..40)).map(|_| r.random_range(1..=400)).collect();
                grsp_core::ClusterCounts::from_lengths(lens, scheme)
            })
            .collect();
        let pens = grsp_core::penalty::clustered_penalty_from_counts(&counts, &weights, floor, cfg.std_kind);
        for c in 0..scheme.k() {
            let col: Vec<f64> = counts.iter().map(|x| f64::from(x.as_slice()[c])).collect();
            if pop_mean_std(&col).1 >= floor {
                let s: f64 = pens.iter().map(|p| p.per_cluster[c]).sum();
                worst_sum = worst_sum.max(s.abs());
                checked_columns += 1;
            }
        }

        // Shift and positive-scale invariance.
        let v: Vec<f64> = (0..n).map(|_| r.random_range(-50.0..50.0)).collect();
        let shift = r.random_range(-1e3..1e3);
        let scale = 10f64.powf(r.random_range(-2.0..2.0));
        let base = group_zscores(&v, floor);
        let moved = group_zscores(&v.iter().map(|x| x * scale + shift).collect::<Vec<_>>(), floor);
        for (a, b) in base.iter().zip(&moved) {
            worst_shift = worst_shift.max((a - b).abs());
        }

        // GRPO advantages: mean 0 and population std 1 whenever the rewards spread.
        let rewards: Vec<f64> = if i % 5 == 0 {
            (0..n).map(|_| f64::from(r.random_range(0..2u8))).collect()
        } else {
            (0..n).map(|_| r.random_range(-2.0..2.0)).collect()
        };
        let adv = grpo_advantages(&rewards, floor);
        if pop_mean_std(&rewards).1 >= floor {
            let (m, s) = pop_mean_std(&adv);
            worst_adv = worst_adv.max(m.abs()).max((s - 1.0).abs());
        } else {
            ensure(adv.iter().all(|&a| a == 0.0), || format!("flat rewards {rewards:?} gave {adv:?}"))?;
        }
    }
    ensure(worst_sum < 1e-9, || format!("penalty column sum {worst_sum:e}"))?;
    ensure(worst_shift < 1e-9, || format!("shift/scale deviation {worst_shift:e}"))?;
    ensure(worst_adv < 1e-9, || format!("advantage moment deviation {worst_adv:e}"))?;
    Ok(format!(
        "1000 inputs ({checked_columns} columns): |sum| {worst_sum:.1e}, invariance {worst_shift:.1e}, moments {worst_adv:.1e}"
    ))
}

// ---------------------------------------------------------------------------
// 4. segmentation reconstruction

fn check_cover(trace: &Trace, segs: &[Segment]) -> Result<(), String> {
    let span = trace.think_span();
    if span.is_empty() {
        return ensure(segs.is_empty(), || format!("{}: segments for empty span", trace.trace_id()));
    }
    ensure(!segs.is_empty(), || format!("{}: no segments", trace.trace_id()))?;
    ensure(segs[0].span.start == span.start, || format!("{}: first segment starts late", trace.trace_id()))?;
    ensure(segs.last().unwrap().span.end == span.end, || format!("{}: last segment ends early", trace.trace_id()))?;
    for s in segs {
        ensure(s.span.start < s.span.end, || format!("{}: empty segment", trace.trace_id()))?;
        ensure(s.trace_id == trace.trace_id(), || "segment carries the wrong trace id".into())?;
    }
    for w in segs.windows(2) {
        ensure(w[0].span.end == w[1].span.start, || format!("{}: gap or overlap", trace.trace_id()))?;
    }
    Ok(())
}

fn tok(text: &str) -> Token {
    Token::new(text, Some(-0.5), Some(-0.5)).unwrap()
}

/// A think block whose segments open with known keywords; returns the trace
/// and the planted boundary positions.
fn planted_keyword_trace(r: &mut impl Rng, id: usize) -> (Trace, Vec<usize>, Vec<(usize, usize)>) {
    const OPENERS: &[&[&str]] = &[&["Wait"], &[" So"], &["  Hmm,"], &[" Let", " me"], &["Alternatively"], &[" Next"]];
    const BODY: &[&str] = &[" the", " x", " =", " 3", " then", " value", ",", " so"];
    let mut tokens = vec![tok("<think>")];
    let mut planted = Vec::new();
    let mut spans = Vec::new();
    if r.random_bool(0.3) {
        // Preamble without an opener.
        for _ in 0..r.random_range(3..10) {
            tokens.push(tok(BODY[r.random_range(0..BODY.len())]));
        }
        spans.push((1, tokens.len()));
    }
    for _ in 0..r.random_range(1..10) {
        let start = tokens.len();
        planted.push(start);
        for t in OPENERS[r.random_range(0..OPENERS.len())] {
            tokens.push(tok(t));
        }
        for _ in 0..r.random_range(3..40) {
            tokens.push(tok(BODY[r.random_range(0..BODY.len())]));
        }
        spans.push((start, tokens.len()));
    }
    let end = tokens.len();
    tokens.push(tok("</think>"));
    let trace = Trace::new(format!("k{id}"), "p", tokens, Span::new(1, end), 1.0).unwrap();
    (trace, planted, spans)
}

fn segmentation_reconstruction() -> Outcome {
    let mut r = rng(4);
    let keyword = Segmenter::from_config(&SegmenterConfig::Keyword(KeywordSegmenterConfig::default())).unwrap();
    let confidence =
        Segmenter::from_config(&SegmenterConfig::Confidence(ConfidenceSegmenterConfig::default())).unwrap();
    let mut total_segments = [0usize; 2];
    for i in 0..1000 {
        let value = random_trace(&mut r, &format!("t{i}"), "p");
        let trace: Trace = serde_json::from_value(value).map_err(|e| e.to_string())?;
        for (slot, seg) in [&keyword, &confidence].into_iter().enumerate() {
            let segs = seg.segment(&trace).map_err(|e| e.to_string())?;
            check_cover(&trace, &segs)?;
            total_segments[slot] += segs.len();
        }
    }
    let planted_seg = KeywordSegmenter::new(KeywordSegmenterConfig::default()).unwrap();
    for i in 0..50 {
        let (trace, planted, spans) = planted_keyword_trace(&mut r, i);
        let found = planted_seg.boundaries(&trace);
        ensure(found == planted, || format!("fixture {i}: boundaries {found:?}, planted {planted:?}"))?;
        let got: Vec<(usize, usize)> = planted_seg.segment(&trace).iter().map(|s| (s.span.start, s.span.end)).collect();
        ensure(got == spans, || format!("fixture {i}: segments {got:?}, planted {spans:?}"))?;
    }
    Ok(format!(
        "1000 traces covered ({} keyword / {} confidence segments), 50 planted fixtures exact",
        total_segments[0], total_segments[1]
    ))
}

// ---------------------------------------------------------------------------
// 5. confidence segmenter vs brute-force scan

fn brute_force_boundaries(texts: &[String], lps: &[f64], offset: usize, cfg: &ConfidenceSegmenterConfig) -> Vec<usize> {
    let n = lps.len();
    let h = cfg.smoothing_window / 2;
    let smooth: Vec<f64> = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(h);
            let hi = (i + h).min(n - 1);
            lps[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect();
    let gamma = cfg.gamma.unwrap_or_else(|| {
        let mut s = smooth.clone();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let rank = cfg.gamma_percentile / 100.0 * (n - 1) as f64;
        let (lo, hi) = (rank.floor() as usize, rank.ceil() as usize);
        s[lo] + (s[hi] - s[lo]) * (rank - lo as f64)
    });
    let mut out = Vec::new();
    for i in 0..n {
        let left_ok = i == 0 || smooth[i] < smooth[i - 1];
        let right_ok = i == n - 1 || smooth[i] < smooth[i + 1];
        let chars = texts[i].chars().filter(|c| !c.is_whitespace()).count();
        if n >= 2 && left_ok && right_ok && smooth[i] < gamma && chars >= cfg.min_token_chars {
            out.push(offset + i);
        }
    }
    out
}

fn confidence_oracle() -> Outcome {
    let mut r = rng(5);
    const TEXTS: &[&str] = &[" the", " x", ",", " value", " Wait", "  ", " 12", " check", ".", " so"];
    let (mut total, mut planted_found) = (0usize, 0usize);
    for case in 0..200 {
        let n = r.random_range(20..200);
        let mut lps: Vec<f64> = (0..n).map(|_| r.random_range(-0.9..-0.05)).collect();
        let mut texts: Vec<String> = (0..n).map(|_| TEXTS[r.random_range(0..TEXTS.len())].to_string()).collect();
        // Plant well-separated dips on multi-character tokens.
        let mut dips = Vec::new();
        let mut pos = r.random_range(0..6);
        while pos < n {
            lps[pos] = r.random_range(-8.0..-3.0);
            texts[pos] = " Alternatively".into();
            dips.push(pos + 1);
            pos += r.random_range(8..30);
        }
        let cfg = ConfidenceSegmenterConfig {
            gamma: if case % 2 == 0 { Some(-1.0) } else { None },
            gamma_percentile: [10.0, 25.0][case % 4 / 2],
            smoothing_window: [1, 3, 5, 7][r.random_range(0..4)],
            min_segment_tokens: 3,
            min_token_chars: 2,
        };
        let mut tokens = vec![tok("<think>")];
        tokens.extend(texts.iter().zip(&lps).map(|(t, &lp)| Token::new(t.as_str(), Some(lp), None).unwrap()));
        tokens.push(tok("</think>"));
        let trace = Trace::new(format!("c{case}"), "p", tokens, Span::new(1, n + 1), 0.0).unwrap();
        let got = find_boundaries_confidence(&trace, &cfg).map_err(|e| e.to_string())?;
        let want = brute_force_boundaries(&texts, &lps, 1, &cfg);
        ensure(got == want, || format!("case {case}: got {got:?}, oracle {want:?}"))?;
        total += want.len();
        planted_found += dips.iter().filter(|d| want.contains(d)).count();
    }
    ensure(planted_found > 200, || format!("only {planted_found} planted dips detected"))?;
    Ok(format!("200 series equal to oracle ({total} boundaries, {planted_found} planted dips recovered)"))
}

// ---------------------------------------------------------------------------
// 6. advantage example and dynamic sampling

fn advantage_example() -> Outcome {
    let adv = grpo_advantages(&[1.0, 0.0, 0.0, 0.0], DEFAULT_STD_FLOOR);
    // mean 1/4, population std sqrt(3)/4
    let std = 3f64.sqrt() / 4.0;
    let derived: Vec<f64> = [1.0, 0.0, 0.0, 0.0].iter().map(|x| (x - 0.25) / std).collect();
    let literal = [1.7321, -0.5774, -0.5774, -0.5774];
    for ((a, d), l) in adv.iter().zip(&derived).zip(&literal) {
        ensure((a - d).abs() < 1e-12 && (a - l).abs() < 1e-4, || format!("advantages {adv:?}"))?;
    }

    let mut r = rng(6);
    let mut dropped_total = 0;
    for batch in 0..100 {
        let groups: Vec<(usize, Vec<f64>)> = (0..r.random_range(1..12))
            .map(|g| {
                let n = r.random_range(1..8);
                let rewards = match r.random_range(0..3) {
                    0 => vec![r.random_range(-1.0..1.0); n],
                    1 => (0..n).map(|_| f64::from(r.random_range(0..2u8))).collect(),
                    _ => (0..n).map(|_| r.random_range(-1.0..1.0)).collect(),
                };
                (g, rewards)
            })
            .collect();
        let expected: Vec<usize> = groups
            .iter()
            // Zero variance exactly when the extremes coincide; a floating
            // point variance of a constant group need not come out as 0.
            .filter(|(_, rw)| {
                let max = rw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let min = rw.iter().copied().fold(f64::INFINITY, f64::min);
                max > min
            })
            .map(|(g, _)| *g)
            .collect();
        let n_groups = groups.len();
        let (kept, dropped) = dynamic_sampling_filter(groups);
        let kept_ids: Vec<usize> = kept.iter().map(|(g, _)| *g).collect();
        ensure(kept_ids == expected, || format!("batch {batch}: kept {kept_ids:?}, expected {expected:?}"))?;
        ensure(dropped == n_groups - expected.len(), || format!("batch {batch}: dropped {dropped}"))?;
        ensure(kept.iter().all(|(_, rw)| has_spread(rw)), || "kept a flat group".into())?;
        dropped_total += dropped;
    }
    Ok(format!("advantages {adv:.4?}; 100 batches filtered exactly ({dropped_total} groups dropped)"))
}

// ---------------------------------------------------------------------------
// 7. score-function gradient vs finite differences of the exact objective

/// Exact expected verifier reward. The segment count is a truncated geometric
/// variable, clusters are i.i.d. categorical, and quality is a sum of
/// per-cluster weights, tracked on an integer lattice of `unit`.
fn expected_reward(policy: &SyntheticPolicy, units: &[usize], unit: f64, threshold: f64, sigma: f64, max_segments: usize) -> f64 {
    let probs = policy.cluster_probs();
    let stop = policy.stop_prob();
    let normal = Normal::new(0.0, 1.0).unwrap();
    let max_unit = *units.iter().max().unwrap();
    let mut dist = vec![1.0];
    let mut total = 0.0;
    for n in 1..=max_segments {
        let mut next = vec![0.0; dist.len() + max_unit];
        for (s, &mass) in dist.iter().enumerate() {
            for (&u, &p) in units.iter().zip(&probs) {
                next[s + u] += mass * p;
            }
        }
        dist = next;
        let p_len = (1.0 - stop).powi(n as i32 - 1) * if n < max_segments { stop } else { 1.0 };
        let pass: f64 = dist
            .iter()
            .enumerate()
            .map(|(s, &mass)| mass * normal.cdf((s as f64 * unit - threshold) / sigma))
            .sum();
        total += p_len * pass;
    }
    total
}

fn gradient_check() -> Outcome {
    let mut cfg = SimConfig::default();
    // Unshaped objective: group-relative shaping has no per-sample reward to
    // differentiate, and its penalties average to zero within each group.
    cfg.penalty.alpha = 0.0;
    cfg.group_size = 16;
    cfg.policy.cluster_logits = vec![0.0; 5];
    cfg.policy.stop_logit = 3.0;
    cfg.policy.seed = 0;
    cfg.verifier.threshold = 0.9;
    cfg.verifier.noise_scale = 0.1;
    cfg.verifier.noise_seed = 100;
    let unit = 0.05;
    let units: Vec<usize> = cfg.verifier.quality_weights.iter().map(|w| (w / unit).round() as usize).collect();
    for (w, u) in cfg.verifier.quality_weights.iter().zip(&units) {
        ensure((w - *u as f64 * unit).abs() < 1e-12, || format!("weight {w} is off the lattice"))?;
    }
    let v = &cfg.verifier;
    let h = 1e-4;
    let fd: Vec<f64> = (0..5)
        .map(|k| {
            let mut plus = cfg.policy.clone();
            plus.cluster_logits[k] += h;
            let mut minus = cfg.policy.clone();
            minus.cluster_logits[k] -= h;
            let f = |p: &SyntheticPolicy| expected_reward(p, &units, unit, v.threshold, v.noise_scale, cfg.max_segments);
            (f(&plus) - f(&minus)) / (2.0 * h)
        })
        .collect();
    let n_rollouts = 100_000;
    let est = estimate_gradient(&cfg, &cfg.policy, n_rollouts / cfg.group_size);
    let err: f64 = est.cluster_logits.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = fd.iter().map(|b| b * b).sum::<f64>().sqrt();
    let rel = err / norm;
    ensure(rel < 1e-2, || format!("relative error {rel:.4} (estimate {:?}, reference {fd:?})", est.cluster_logits))?;
    Ok(format!("{n_rollouts} rollouts, relative L2 error {rel:.4}"))
}

// ---------------------------------------------------------------------------
// 8. descending vs ascending weights

fn directional_check() -> Outcome {
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..5u64 {
        let mut cfg = SimConfig::default();
        cfg.policy.seed = seed;
        cfg.verifier.noise_seed = seed + 100;
        let paired = run_paired(&cfg, 500).map_err(|e| e.to_string())?;
        let d = summarize(&paired.descending.metrics, cfg.summary_window);
        let a = summarize(&paired.ascending.metrics, cfg.summary_window);
        let win = d.mean_segment_tokens > a.mean_segment_tokens && d.mean_response_tokens <= a.mean_response_tokens;
        wins += usize::from(win);
        rows.push(format!(
            "seed {seed}: seg {:.1} vs {:.1}, resp {:.0} vs {:.0}{}",
            d.mean_segment_tokens,
            a.mean_segment_tokens,
            d.mean_response_tokens,
            a.mean_response_tokens,
            if win { "" } else { " (miss)" }
        ));
    }
    let detail = format!("{wins}/5 seeds [{}]", rows.join("; "));
    ensure(wins >= 4, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 9. analyzer fixtures

/// A think block made of segments of the given lengths, each opened by "Next".
fn trace_from_lengths(id: &str, lengths: &[usize], reward: f64) -> Trace {
    let mut tokens = vec![tok("<think>")];
    for &len in lengths {
        tokens.push(tok("Next"));
        tokens.extend((1..len).map(|_| tok(" x")));
    }
    let end = tokens.len();
    tokens.push(tok("</think>"));
    tokens.push(tok(" 42"));
    Trace::new(id, "p", tokens, Span::new(1, end), reward).unwrap()
}

fn lengths_for(counts: &[usize], extra_overflow: usize, r: &mut impl Rng) -> Vec<usize> {
    const LENS: [usize; 5] = [30, 90, 150, 210, 270];
    let mut out: Vec<usize> = counts.iter().zip(LENS).flat_map(|(&c, l)| std::iter::repeat_n(l, c)).collect();
    out.extend(std::iter::repeat_n(350, extra_overflow));
    out.shuffle(r);
    out
}

/// Closed-form least squares slope.
fn ols_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (sx, sy) = (xs.iter().sum::<f64>(), ys.iter().sum::<f64>());
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

fn analyzer_fixtures() -> Outcome {
    let mut r = rng(9);
    let scheme = ClusterScheme::default().with_overflow(OverflowPolicy::Exclude);
    let segmenter = Segmenter::from_config(&SegmenterConfig::Keyword(KeywordSegmenterConfig {
        keywords: vec!["Next".into()],
        match_case_sensitive: true,
        min_segment_tokens: 1,
    }))
    .unwrap();
    // Passed-side means [6,7,8,9,10]; failed-side means all 10.
    let plan: Vec<(Vec<usize>, usize, f64)> = vec![
        (vec![10, 10, 10, 10, 10], 1, 0.0),
        (vec![10, 10, 10, 10, 10], 0, 0.0),
        (vec![5, 7, 8, 10, 10], 2, 1.0),
        (vec![7, 7, 8, 8, 10], 0, 1.0),
    ];
    let mut traces = Vec::new();
    let mut planted = Vec::new();
    for (i, (counts, overflow, reward)) in plan.iter().enumerate() {
        let lengths = lengths_for(counts, *overflow, &mut r);
        traces.push(trace_from_lengths(&format!("t{i}"), &lengths, *reward));
        planted.push(lengths);
    }
    let segments = segment_all(&traces, &segmenter).map_err(|e| e.to_string())?;
    for (segs, lens) in segments.iter().zip(&planted) {
        let got: Vec<usize> = segs.iter().map(Segment::token_len).collect();
        ensure(&got == lens, || "fixture segmentation differs from planted lengths".into())?;
    }
    let report = cluster_ratio_report_from_segments(&traces, &segments, &scheme).map_err(|e| e.to_string())?;
    let ratios: Vec<f64> = report.ratio.values().copied().collect();
    let xs: Vec<f64> = report.ratio.keys().map(|&k| k as f64).collect();
    let expected = [0.6, 0.7, 0.8, 0.9, 1.0];
    ensure(ratios.iter().zip(&expected).all(|(a, b)| (a - b).abs() < 1e-12) && ratios.len() == 5, || {
        format!("ratios {ratios:?}")
    })?;
    let oracle = ols_slope(&xs, &expected);
    ensure((report.slope - 0.1).abs() < 1e-9 && (report.slope - oracle).abs() < 1e-9, || {
        format!("slope {} (oracle {oracle})", report.slope)
    })?;

    // Brute-force tally over random corpora under both overflow policies.
    let bounds = [60usize, 120, 180, 240, 300];
    let keyword = Segmenter::from_config(&SegmenterConfig::Keyword(KeywordSegmenterConfig::default())).unwrap();
    for policy in [OverflowPolicy::Exclude, OverflowPolicy::AssignTop] {
        let scheme = ClusterScheme::default().with_overflow(policy);
        let mut corpus: Vec<Trace> = traces.clone();
        for i in 0..40 {
            let v = random_trace(&mut r, &format!("r{i}"), "q");
            corpus.push(serde_json::from_value(v).unwrap());
        }
        let segs = segment_all(&corpus, &keyword).map_err(|e| e.to_string())?;
        let stats = corpus_stats_from_segments(&corpus, &segs, &scheme).map_err(|e| e.to_string())?;
        let mut tally = [0u64; 5];
        let (mut excluded, mut n_segs, mut tokens) = (0u64, 0u64, 0u64);
        for (t, ss) in corpus.iter().zip(&segs) {
            tokens += (t.think_span().end - t.think_span().start) as u64;
            for s in ss {
                n_segs += 1;
                let len = s.span.end - s.span.start;
                match bounds.iter().position(|&b| len <= b) {
                    Some(c) => tally[c] += 1,
                    None if policy == OverflowPolicy::AssignTop => tally[4] += 1,
                    None => excluded += 1,
                }
            }
        }
        let clustered: u64 = tally.iter().sum();
        let n = corpus.len() as f64;
        ensure(stats.n_traces == corpus.len(), || "n_traces".into())?;
        ensure((stats.mean_tokens - tokens as f64 / n).abs() < 1e-9, || "mean_tokens".into())?;
        ensure((stats.mean_segments - n_segs as f64 / n).abs() < 1e-9, || "mean_segments".into())?;
        ensure(stats.excluded_segments == excluded, || "excluded_segments".into())?;
        for (share, c) in stats.cluster_share.iter().zip(tally) {
            ensure((share - c as f64 / clustered as f64).abs() < 1e-12, || format!("cluster_share {:?}", stats.cluster_share))?;
        }
    }
    Ok(format!(
        "ratios {ratios:?}, slope {:.12}; corpus stats match tallies (reference corpus values are not reproducible without the original rollouts)",
        report.slope
    ))
}

// ---------------------------------------------------------------------------
// 10. service vs offline CLI

fn service_equivalence() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let groups = fixture_groups(10, 20);
    let path = dir.path().join("groups.jsonl");
    write_jsonl(&path, &groups);
    let path = path.to_str().unwrap();
    let canonical = |s: &str| serde_json::to_string(&serde_json::from_str::<Value>(s).unwrap()).unwrap();
    let shaped: Vec<String> = stdout_lines(&grsp(&["penalize", "-i", path])).iter().map(|l| canonical(l)).collect();
    let advantages: Vec<String> = stdout_lines(&grsp(&["advantage", "-i", path])).iter().map(|l| canonical(l)).collect();
    let n_traces: usize = groups.iter().map(Vec::len).sum();
    ensure(shaped.len() == n_traces && advantages.len() == n_traces, || "CLI record count mismatch".into())?;

    let runtime = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    let app = grsp_cli::server::router(EngineConfig::default());
    let mut offset = 0;
    for (g, group) in groups.iter().enumerate() {
        let body = serde_json::to_vec(&json!({ "traces": group })).unwrap();
        let resp: Value = runtime.block_on(async {
            let req = Request::post("/v1/shape")
                .header("content-type", "application/json")
                .body(Body::from(body))
                .unwrap();
            let resp = app.clone().oneshot(req).await.unwrap();
            let bytes = resp.into_body().collect().await.unwrap().to_bytes();
            serde_json::from_slice(&bytes).unwrap()
        });
        let recs_s = resp["shaped"].as_array().ok_or_else(|| format!("group {g}: {resp}"))?;
        let recs_a = resp["advantages"].as_array().ok_or_else(|| format!("group {g}: {resp}"))?;
        for (i, (s, a)) in recs_s.iter().zip(recs_a).enumerate() {
            let (s, a) = (serde_json::to_string(s).unwrap(), serde_json::to_string(a).unwrap());
            ensure(s == shaped[offset + i], || format!("group {g} trace {i}: shaped records differ"))?;
            ensure(a == advantages[offset + i], || format!("group {g} trace {i}: advantage records differ"))?;
        }
        ensure(recs_s.len() == group.len() && recs_a.len() == group.len(), || format!("group {g}: length"))?;
        offset += group.len();
    }
    Ok(format!("20 groups, {n_traces} traces byte-identical"))
}
