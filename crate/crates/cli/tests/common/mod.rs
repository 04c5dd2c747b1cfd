//! Fixture builders shared by the integration tests.
#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

pub const KEYWORDS: &[&str] = &["Wait", "So", "Next", "Hmm", "But", "Alternatively"];
const FILLER: &[&str] = &[" the", " x", " =", " 3", " then?", " value", " sum", ",", " check", " 12"];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A random trace record with a think block between tag tokens, keyword
/// openers, and logprobs on every token.
pub fn random_trace(rng: &mut impl Rng, trace_id: &str, prompt_id: &str) -> Value {
    let mut tokens = vec![json!({"text": "<think>", "logprob": -0.01, "ref_logprob": -0.02})];
    let n_segments = rng.random_range(1..12);
    for _ in 0..n_segments {
        let kw = KEYWORDS[rng.random_range(0..KEYWORDS.len())];
        tokens.push(json!({
            "text": format!(" {kw}"),
            "logprob": -rng.random_range(0.5..4.0),
            "ref_logprob": -rng.random_range(0.5..4.0),
        }));
        let len = match rng.random_range(0..4) {
            0 => rng.random_range(0..8),
            1 => rng.random_range(8..70),
            2 => rng.random_range(70..200),
            _ => rng.random_range(200..330),
        };
        for _ in 0..len {
            tokens.push(json!({
                "text": FILLER[rng.random_range(0..FILLER.len())],
                "logprob": -rng.random_range(0.0..1.5),
                "ref_logprob": -rng.random_range(0.0..1.5),
            }));
        }
    }
    tokens.push(json!({"text": "</think>", "logprob": -0.01, "ref_logprob": -0.01}));
    for _ in 0..rng.random_range(0..5) {
        tokens.push(json!({"text": " answer", "logprob": -0.2, "ref_logprob": -0.3}));
    }
    let reward = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
    json!({ "trace_id": trace_id, "prompt_id": prompt_id, "tokens": tokens, "reward": reward })
}

/// `n_groups` groups of 2..=8 traces each.
pub fn fixture_groups(seed: u64, n_groups: usize) -> Vec<Vec<Value>> {
    let mut r = rng(seed);
    (0..n_groups)
        .map(|g| {
            let size = r.random_range(2..=8);
            (0..size)
                .map(|i| random_trace(&mut r, &format!("t{i}"), &format!("prompt-{g}")))
                .collect()
        })
        .collect()
}

pub fn write_jsonl(path: &Path, groups: &[Vec<Value>]) {
    let mut text = String::new();
    for t in groups.iter().flatten() {
        text.push_str(&serde_json::to_string(t).unwrap());
        text.push('\n');
    }
    std::fs::write(path, text).unwrap();
}

pub fn grsp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_grsp"))
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn stdout_lines(out: &Output) -> Vec<String> {
    assert!(
        out.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone())
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect()
}
