//! Deterministic workloads shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use grsp_core::{RolloutGroup, Span, Token, Trace};

const OPENERS: &[&str] = &["Wait", " So", " Hmm", " Next", " But", " Alternatively"];
const FILLER: &[&str] = &[" the", " x", " =", " 3", " value", ",", " check", " 12"];

/// A trace whose think block holds roughly `think_tokens` tokens, split into
/// keyword-opened segments of 1..=400 tokens, with logprobs on every token.
pub fn trace(seed: u64, index: usize, think_tokens: usize) -> Trace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).rotate_left(32));
    let mut tokens = Vec::with_capacity(think_tokens + 2);
    tokens.push(Token::new("<think>", Some(-0.01), Some(-0.01)).unwrap());
    while tokens.len() <= think_tokens {
        let opener = OPENERS[rng.random_range(0..OPENERS.len())];
        tokens.push(Token::new(opener, Some(-rng.random_range(1.0..5.0)), Some(-1.0)).unwrap());
        for _ in 1..rng.random_range(1..=400) {
            let text = FILLER[rng.random_range(0..FILLER.len())];
            tokens.push(Token::new(text, Some(-rng.random_range(0.0..1.5)), Some(-0.5)).unwrap());
        }
    }
    let end = tokens.len();
    tokens.push(Token::new("</think>", Some(-0.01), Some(-0.01)).unwrap());
    let reward = f64::from(rng.random_range(0..2u8));
    Trace::new(format!("t{index}"), "bench", tokens, Span::new(1, end), reward).unwrap()
}

/// `size` traces for one prompt.
pub fn group(seed: u64, size: usize, think_tokens: usize) -> RolloutGroup {
    RolloutGroup::new("bench", (0..size).map(|i| trace(seed, i, think_tokens)).collect()).unwrap()
}
