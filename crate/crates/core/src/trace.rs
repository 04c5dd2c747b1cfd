//! Trajectory data model and line-delimited trace ingestion.
//!
//! A trace file holds one JSON record per line:
//!
//! ```text
//! {"trace_id":"t0","prompt_id":"p0","tokens":[{"text":"First,","logprob":-0.7}],"think_start":0,"think_end":1,"reward":1.0}
//! ```
//!
//! `think_start`/`think_end` may both be omitted, in which case the span is
//! taken from `<think>` / `</think>` tag tokens. Unknown fields, on records
//! and on tokens, are carried through serialization unchanged.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";

/// A record failed a data-model invariant.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("trace `{trace_id}`: invalid `{field}`: {message}")]
pub struct ValidationError {
    pub trace_id: String,
    pub field: String,
    pub message: String,
}

impl ValidationError {
    pub fn new(trace_id: impl Into<String>, field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            trace_id: trace_id.into(),
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("cannot read {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Parse {
        line: usize,
        /// Path of the offending field, when the line is valid JSON.
        field: Option<String>,
        message: String,
    },
    #[error("line {line}: {error}")]
    Invalid { line: usize, error: ValidationError },
}

/// Half-open token index range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

/// Wire form of a token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ref_logprob: Option<f64>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

/// Wire form of a trace, exactly as it appears on one line of a trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub trace_id: String,
    pub prompt_id: String,
    pub tokens: Vec<TokenRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub think_start: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub think_end: Option<usize>,
    pub reward: f64,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

/// One policy token with its optional log-probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TokenRecord", into = "TokenRecord")]
pub struct Token {
    text: String,
    logprob: Option<f64>,
    ref_logprob: Option<f64>,
    extra: Map<String, Value>,
}

fn check_logprob(value: Option<f64>) -> Result<(), String> {
    match value {
        Some(v) if !v.is_finite() => Err(format!("must be finite, got {v}")),
        Some(v) if v > 0.0 => Err(format!("must be <= 0, got {v}")),
        _ => Ok(()),
    }
}

impl Token {
    pub fn new(text: impl Into<String>, logprob: Option<f64>, ref_logprob: Option<f64>) -> Result<Self, ValidationError> {
        Self::from_record(
            TokenRecord {
                text: text.into(),
                logprob,
                ref_logprob,
                extra: Map::new(),
            },
            "",
            None,
        )
    }

    fn from_record(record: TokenRecord, trace_id: &str, index: Option<usize>) -> Result<Self, ValidationError> {
        let at = |field: &str| match index {
            Some(i) => format!("tokens[{i}].{field}"),
            None => field.to_string(),
        };
        if record.text.is_empty() {
            return Err(ValidationError::new(trace_id, at("text"), "must be non-empty"));
        }
        check_logprob(record.logprob).map_err(|m| ValidationError::new(trace_id, at("logprob"), m))?;
        check_logprob(record.ref_logprob).map_err(|m| ValidationError::new(trace_id, at("ref_logprob"), m))?;
        Ok(Self {
            text: record.text,
            logprob: record.logprob,
            ref_logprob: record.ref_logprob,
            extra: record.extra,
        })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn logprob(&self) -> Option<f64> {
        self.logprob
    }

    pub fn ref_logprob(&self) -> Option<f64> {
        self.ref_logprob
    }

    pub fn extra(&self) -> &Map<String, Value> {
        &self.extra
    }
}

impl TryFrom<TokenRecord> for Token {
    type Error = ValidationError;

    fn try_from(record: TokenRecord) -> Result<Self, Self::Error> {
        Self::from_record(record, "", None)
    }
}

impl From<Token> for TokenRecord {
    fn from(token: Token) -> Self {
        TokenRecord {
            text: token.text,
            logprob: token.logprob,
            ref_logprob: token.ref_logprob,
            extra: token.extra,
        }
    }
}

/// One sampled response with its verifier outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TraceRecord", into = "TraceRecord")]
pub struct Trace {
    trace_id: String,
    prompt_id: String,
    tokens: Vec<Token>,
    think_span: Span,
    verifier_reward: f64,
    extra: Map<String, Value>,
}

impl Trace {
    pub fn new(
        trace_id: impl Into<String>,
        prompt_id: impl Into<String>,
        tokens: Vec<Token>,
        think_span: Span,
        verifier_reward: f64,
    ) -> Result<Self, ValidationError> {
        let trace = Self {
            trace_id: trace_id.into(),
            prompt_id: prompt_id.into(),
            tokens,
            think_span,
            verifier_reward,
            extra: Map::new(),
        };
        trace.check()?;
        Ok(trace)
    }

    fn check(&self) -> Result<(), ValidationError> {
        let Span { start, end } = self.think_span;
        if start > end {
            return Err(ValidationError::new(
                &self.trace_id,
                "think_start",
                format!("think_start {start} exceeds think_end {end}"),
            ));
        }
        if end > self.tokens.len() {
            return Err(ValidationError::new(
                &self.trace_id,
                "think_end",
                format!("think_end {end} exceeds token count {}", self.tokens.len()),
            ));
        }
        if !self.verifier_reward.is_finite() {
            return Err(ValidationError::new(&self.trace_id, "reward", "must be finite"));
        }
        Ok(())
    }

    /// Validates a wire record, deriving the think span from tag tokens when
    /// both span fields are absent.
    pub fn from_record(record: TraceRecord) -> Result<Self, ValidationError> {
        let trace_id = record.trace_id;
        let tokens = record
            .tokens
            .into_iter()
            .enumerate()
            .map(|(i, t)| Token::from_record(t, &trace_id, Some(i)))
            .collect::<Result<Vec<_>, _>>()?;
        let think_span = match (record.think_start, record.think_end) {
            (Some(start), Some(end)) => {
                if start > end {
                    return Err(ValidationError::new(
                        &trace_id,
                        "think_start",
                        format!("think_start {start} exceeds think_end {end}"),
                    ));
                }
                Span { start, end }
            }
            (None, None) => derive_think_span(&tokens)
                .ok_or_else(|| ValidationError::new(&trace_id, "think_start", "absent and no <think> tag token found"))?,
            (None, Some(_)) => return Err(ValidationError::new(&trace_id, "think_start", "absent while think_end is set")),
            (Some(_), None) => return Err(ValidationError::new(&trace_id, "think_end", "absent while think_start is set")),
        };
        let trace = Self {
            trace_id,
            prompt_id: record.prompt_id,
            tokens,
            think_span,
            verifier_reward: record.reward,
            extra: record.extra,
        };
        trace.check()?;
        Ok(trace)
    }

    pub fn to_record(&self) -> TraceRecord {
        self.clone().into()
    }

    pub fn trace_id(&self) -> &str {
        &self.trace_id
    }

    pub fn prompt_id(&self) -> &str {
        &self.prompt_id
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn think_span(&self) -> Span {
        self.think_span
    }

    pub fn think_tokens(&self) -> &[Token] {
        &self.tokens[self.think_span.range()]
    }

    /// Number of tokens in the thinking block; all length-based penalties use this.
    pub fn think_len(&self) -> usize {
        self.think_span.len()
    }

    pub fn verifier_reward(&self) -> f64 {
        self.verifier_reward
    }

    pub fn extra(&self) -> &Map<String, Value> {
        &self.extra
    }
}

impl TryFrom<TraceRecord> for Trace {
    type Error = ValidationError;

    fn try_from(record: TraceRecord) -> Result<Self, Self::Error> {
        Self::from_record(record)
    }
}

impl From<Trace> for TraceRecord {
    fn from(trace: Trace) -> Self {
        TraceRecord {
            trace_id: trace.trace_id,
            prompt_id: trace.prompt_id,
            tokens: trace.tokens.into_iter().map(Into::into).collect(),
            think_start: Some(trace.think_span.start),
            think_end: Some(trace.think_span.end),
            reward: trace.verifier_reward,
            extra: trace.extra,
        }
    }
}

/// Locates `<think>` ... `</think>` tag tokens. The span excludes the tags;
/// a missing close tag extends the span to the end of the response.
pub fn derive_think_span(tokens: &[Token]) -> Option<Span> {
    let open = tokens.iter().position(|t| t.text.trim() == THINK_OPEN)?;
    let start = open + 1;
    let end = tokens[start..]
        .iter()
        .position(|t| t.text.trim() == THINK_CLOSE)
        .map_or(tokens.len(), |p| start + p);
    Some(Span { start, end })
}

/// All traces sampled for one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    prompt_id: String,
    traces: Vec<Trace>,
}

impl RolloutGroup {
    pub fn new(prompt_id: impl Into<String>, traces: Vec<Trace>) -> Result<Self, ValidationError> {
        let prompt_id = prompt_id.into();
        if traces.is_empty() {
            return Err(ValidationError::new("", "traces", format!("group `{prompt_id}` is empty")));
        }
        let mut seen = HashSet::with_capacity(traces.len());
        for t in &traces {
            if t.prompt_id != prompt_id {
                return Err(ValidationError::new(
                    &t.trace_id,
                    "prompt_id",
                    format!("`{}` does not match group prompt `{prompt_id}`", t.prompt_id),
                ));
            }
            if !seen.insert(t.trace_id.as_str()) {
                return Err(ValidationError::new(&t.trace_id, "trace_id", "duplicate within rollout group"));
            }
        }
        Ok(Self { prompt_id, traces })
    }

    pub fn prompt_id(&self) -> &str {
        &self.prompt_id
    }

    pub fn traces(&self) -> &[Trace] {
        &self.traces
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.traces.iter().map(Trace::verifier_reward).collect()
    }

    pub fn into_traces(self) -> Vec<Trace> {
        self.traces
    }
}

/// A contiguous span of one trace's thinking block.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Segment {
    pub trace_id: String,
    pub span: Span,
}

impl Segment {
    pub fn new(trace_id: impl Into<String>, start: usize, end: usize) -> Self {
        debug_assert!(start < end);
        Self {
            trace_id: trace_id.into(),
            span: Span { start, end },
        }
    }

    pub fn token_len(&self) -> usize {
        self.span.len()
    }
}

/// Parses a single wire-format line.
pub fn parse_trace_line(line: &str) -> Result<TraceRecord, serde_json::Error> {
    serde_json::from_str(line)
}

/// One wire-format line for `trace`, without a trailing newline.
pub fn serialize_trace(trace: &Trace) -> String {
    serde_json::to_string(&trace.to_record()).expect("trace records always serialize")
}

/// Like [`parse_trace_line`], but also reports the path of a field whose
/// value has the wrong shape.
fn parse_record(line: &str) -> Result<TraceRecord, (Option<String>, String)> {
    let mut de = serde_json::Deserializer::from_str(line);
    let record = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let field = (inner.is_data() && path != ".").then_some(path);
        (field, inner.to_string())
    })?;
    de.end().map_err(|e| (None, e.to_string()))?;
    Ok(record)
}

fn read_numbered(reader: impl BufRead) -> Result<Vec<(usize, Trace)>, TraceError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let parse_err = |field: Option<String>, message: String| TraceError::Parse {
            line: line_no,
            field,
            message,
        };
        let line = line.map_err(|e| parse_err(None, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = parse_record(&line).map_err(|(field, message)| parse_err(field, message))?;
        let trace = Trace::from_record(record).map_err(|error| TraceError::Invalid { line: line_no, error })?;
        out.push((line_no, trace));
    }
    Ok(out)
}

/// Reads every trace from `reader`, in file order. Blank lines are skipped.
pub fn read_traces(reader: impl BufRead) -> Result<Vec<Trace>, TraceError> {
    Ok(read_numbered(reader)?.into_iter().map(|(_, t)| t).collect())
}

/// Groups traces by prompt id. Groups appear in order of first occurrence and
/// keep input order within each group.
pub fn group_traces(traces: Vec<Trace>) -> Result<Vec<RolloutGroup>, ValidationError> {
    let mut buckets: IndexMap<String, Vec<Trace>> = IndexMap::new();
    for t in traces {
        buckets.entry(t.prompt_id.clone()).or_default().push(t);
    }
    buckets
        .into_iter()
        .map(|(prompt_id, traces)| RolloutGroup::new(prompt_id, traces))
        .collect()
}

pub fn parse_traces(reader: impl BufRead) -> Result<Vec<RolloutGroup>, TraceError> {
    let numbered = read_numbered(reader)?;
    let mut seen: HashSet<(&str, &str)> = HashSet::new();
    for (line, t) in &numbered {
        if !seen.insert((t.prompt_id(), t.trace_id())) {
            return Err(TraceError::Invalid {
                line: *line,
                error: ValidationError::new(t.trace_id(), "trace_id", "duplicate within rollout group"),
            });
        }
    }
    let traces = numbered.into_iter().map(|(_, t)| t).collect();
    // Duplicates were rejected above, so grouping cannot fail.
    Ok(group_traces(traces).expect("grouping validated traces"))
}

pub fn parse_trace_file(path: impl AsRef<Path>) -> Result<Vec<RolloutGroup>, TraceError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_traces(BufReader::new(file))
}

pub fn read_trace_file(path: impl AsRef<Path>) -> Result<Vec<Trace>, TraceError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_traces(BufReader::new(file))
}
