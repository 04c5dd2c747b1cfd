//! Command-line interface: argument definitions and subcommand bodies.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use indexmap::IndexMap;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use grsp_core::analyzer::{
    cluster_ratio_report_from_segments, corpus_stats_from_segments, method_comparison, segment_all, AnalyzeError,
};
use grsp_core::penalty::PenaltyError;
use grsp_core::pipeline::{process_groups, shape_group};
use grsp_core::segmentation::SegmentError;
use grsp_core::simulator::{run_paired, run_simulation, summarize, SimRun};
use grsp_core::trace::{parse_traces, read_traces, TraceError};
use grsp_core::{
    penalize_group, AdvantageSource, Algo, ClipConfig, ConfidenceSegmenterConfig, ConfigError, EngineConfig,
    KeywordSegmenterConfig, OverflowPolicy, PenaltyConfig, PenaltyMode, Segment, Segmenter, SegmenterConfig,
    SimMetrics, WeightScheme,
};

use crate::server;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] grsp_core::Error),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Input { path: String, line: usize, message: String },
    #[error("{0}")]
    Serve(String),
}

macro_rules! via_core {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                Self::Core(e.into())
            }
        }
    )*};
}
via_core!(TraceError, SegmentError, PenaltyError, AnalyzeError);

impl CliError {
    pub fn kind(&self) -> &str {
        match self {
            Self::Core(e) => e.kind(),
            Self::Config(_) => "config",
            Self::Io { .. } => "io",
            Self::Input { .. } => "parse",
            Self::Serve(_) => "serve",
        }
    }

    pub fn is_broken_pipe(&self) -> bool {
        matches!(self, Self::Io { source, .. } if source.kind() == io::ErrorKind::BrokenPipe)
    }

    /// Single-line, machine-parsable rendering for stderr.
    pub fn to_json_line(&self) -> String {
        let mut obj = serde_json::json!({ "error": self.kind(), "message": self.to_string() });
        let field = match self {
            Self::Config(c) | Self::Core(grsp_core::Error::Config(c)) => Some(c.field.clone()),
            Self::Core(grsp_core::Error::Validation(v)) => Some(v.field.clone()),
            Self::Core(grsp_core::Error::Trace(TraceError::Invalid { error, .. })) => Some(error.field.clone()),
            Self::Core(grsp_core::Error::Trace(TraceError::Parse { field, .. })) => field.clone(),
            _ => None,
        };
        if let Some(f) = field {
            obj["field"] = f.into();
        }
        obj.to_string()
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Parses a config-file enum spelling (e.g. `grsp_clustered`) from a flag.
fn config_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn weight_scheme(s: &str) -> Result<WeightSpec, String> {
    match s {
        "descending" => Ok(WeightSpec::Descending),
        "ascending" => Ok(WeightSpec::Ascending),
        list => list
            .split(',')
            .map(|w| w.trim().parse::<f64>().map_err(|e| format!("`{w}`: {e}")))
            .collect::<Result<Vec<_>, _>>()
            .map(WeightSpec::Custom),
    }
}

#[derive(Debug, Clone)]
pub enum WeightSpec {
    Descending,
    Ascending,
    Custom(Vec<f64>),
}

impl WeightSpec {
    fn apply(&self, current: &WeightScheme) -> WeightScheme {
        match self {
            Self::Descending => WeightScheme::descending(current.slope),
            Self::Ascending => WeightScheme::ascending(current.slope),
            Self::Custom(w) => WeightScheme::custom(w.clone()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "grsp", version, about = "Segment-level reward shaping for verifier-reward RL")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split traces into reasoning segments.
    Segment(SegmentArgs),
    /// Shape verifier rewards with segment or length penalties.
    Penalize(PenalizeArgs),
    /// Compute policy-gradient advantages from shaped rewards.
    Advantage(AdvantageArgs),
    /// Summarize segment statistics of one or more trace corpora.
    Analyze(AnalyzeArgs),
    /// Run the synthetic policy-gradient simulator.
    Simulate(SimulateArgs),
    /// Serve the shaping pipeline over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SegmenterKind {
    Keyword,
    Confidence,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Engine config file (TOML). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Switch segmenter kind (its settings revert to defaults unless the config already uses it).
    #[arg(long, value_enum)]
    pub segmenter: Option<SegmenterKind>,
}

impl ConfigArgs {
    fn load(&self) -> Result<EngineConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => EngineConfig::load(path)?,
            None => EngineConfig::default(),
        };
        match (self.segmenter, &cfg.segmenter) {
            (Some(SegmenterKind::Keyword), SegmenterConfig::Confidence(_)) => {
                cfg.segmenter = SegmenterConfig::Keyword(KeywordSegmenterConfig::default());
            }
            (Some(SegmenterKind::Confidence), SegmenterConfig::Keyword(_)) => {
                cfg.segmenter = SegmenterConfig::Confidence(ConfidenceSegmenterConfig::default());
            }
            _ => {}
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct IoArgs {
    /// Trace file (one JSON record per line); `-` reads stdin.
    #[arg(long, short)]
    pub input: PathBuf,
    /// Output file; stdout when omitted.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PenaltyFlags {
    /// Penalty mode: grsp_clustered, grsp_flat, lcpo_ratio, o1pruner_aux or none.
    #[arg(long, value_parser = config_enum::<PenaltyMode>)]
    pub mode: Option<PenaltyMode>,
    /// Penalty coefficient.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// `descending`, `ascending`, or a comma-separated list of per-cluster weights.
    #[arg(long, value_parser = weight_scheme)]
    pub weights: Option<WeightSpec>,
    /// Treatment of segments longer than the cap: assign_top or exclude.
    #[arg(long, value_parser = config_enum::<OverflowPolicy>)]
    pub overflow: Option<OverflowPolicy>,
    /// Reference length for the lcpo_ratio and o1pruner_aux modes.
    #[arg(long)]
    pub reference_length: Option<usize>,
}

impl PenaltyFlags {
    fn apply(&self, cfg: &mut PenaltyConfig) -> Result<(), ConfigError> {
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(a) = self.alpha {
            cfg.alpha = a;
        }
        if let Some(w) = &self.weights {
            cfg.weights = w.apply(&cfg.weights);
        }
        if let Some(o) = self.overflow {
            cfg.clusters.overflow_policy = o;
        }
        if let Some(r) = self.reference_length {
            cfg.reference_length = Some(r);
        }
        cfg.validate()
    }
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub io: IoArgs,
}

#[derive(Debug, Args)]
pub struct PenalizeArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub io: IoArgs,
    #[command(flatten)]
    pub penalty: PenaltyFlags,
    /// Use segments from a previous `segment` run instead of segmenting again.
    #[arg(long)]
    pub from_segments: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AdvantageArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub io: IoArgs,
    #[command(flatten)]
    pub penalty: PenaltyFlags,
    /// grpo or reinforce.
    #[arg(long, value_parser = config_enum::<Algo>)]
    pub algo: Option<Algo>,
    /// Clip range of the importance ratio; `inf` disables clipping.
    #[arg(long)]
    pub clip_eps: Option<f64>,
    /// Drop groups whose shaped rewards are all equal.
    #[arg(long)]
    pub dynamic_sampling: bool,
    /// Reinforce advantage source: raw or group_centered.
    #[arg(long, value_parser = config_enum::<AdvantageSource>)]
    pub baseline: Option<AdvantageSource>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GroupBy {
    Method,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Format {
    #[default]
    Json,
    Table,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// A named corpus, `NAME=PATH`. Repeat for several corpora.
    #[arg(long, required = true, value_parser = corpus_arg)]
    pub corpus: Vec<(String, PathBuf)>,
    /// Compare corpora side by side, one row per method.
    #[arg(long, value_enum)]
    pub group_by: Option<GroupBy>,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
    /// Overflow policy for the analysis (defaults to exclude).
    #[arg(long, value_parser = config_enum::<OverflowPolicy>)]
    pub overflow: Option<OverflowPolicy>,
    /// Report file; stdout when omitted.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

fn corpus_arg(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok((name.to_string(), PathBuf::from(path))),
        _ => Err(format!("expected NAME=PATH, got `{s}`")),
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Number of policy updates.
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    /// Seed for rollouts; the verifier noise uses `seed + 1`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run descending and ascending weights side by side with shared seeds.
    #[arg(long)]
    pub paired: bool,
    /// Penalty coefficient used in training.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Cluster weights. With `--paired`, both runs reuse the configured slope instead.
    #[arg(long, value_parser = weight_scheme)]
    pub weights: Option<WeightSpec>,
    /// Metrics file; stdout when omitted. The summary table goes to stderr.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Listen address, overriding the config file.
    #[arg(long, env = "GRSP_BIND")]
    pub bind: Option<String>,
}

fn open_input(path: &Path) -> Result<Box<dyn BufRead>, CliError> {
    if path == Path::new("-") {
        Ok(Box::new(BufReader::new(io::stdin())))
    } else {
        Ok(Box::new(BufReader::new(File::open(path).map_err(io_err(path))?)))
    }
}

fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(io_err(p))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

/// Writes one JSON record per line.
struct LineWriter {
    out: Box<dyn Write>,
    path: String,
}

impl LineWriter {
    fn new(path: Option<&Path>) -> Result<Self, CliError> {
        Ok(Self {
            out: open_output(path)?,
            path: path.map_or_else(|| "<stdout>".to_string(), |p| p.display().to_string()),
        })
    }

    fn err(&self) -> impl FnOnce(io::Error) -> CliError + '_ {
        move |source| CliError::Io {
            path: self.path.clone(),
            source,
        }
    }

    fn record<T: Serialize>(&mut self, value: &T) -> Result<(), CliError> {
        let line = serde_json::to_string(value).expect("output records serialize");
        writeln!(self.out, "{line}").map_err(|e| CliError::Io {
            path: self.path.clone(),
            source: e,
        })
    }

    fn raw(&mut self, text: &str) -> Result<(), CliError> {
        let r = self.out.write_all(text.as_bytes());
        r.map_err(self.err())
    }

    fn finish(mut self) -> Result<(), CliError> {
        let r = self.out.flush();
        r.map_err(self.err())
    }
}

/// One line of `segment` output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub trace_id: String,
    pub prompt_id: String,
    pub start: usize,
    pub end: usize,
    pub token_len: usize,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Segment(a) => segment(a),
        Command::Penalize(a) => penalize(a),
        Command::Advantage(a) => advantage(a),
        Command::Analyze(a) => analyze(a),
        Command::Simulate(a) => simulate(a),
        Command::Serve(a) => serve(a),
    }
}

fn segment(args: SegmentArgs) -> Result<(), CliError> {
    let cfg = args.config.load()?;
    let segmenter = Segmenter::from_config(&cfg.segmenter)?;
    let traces = read_traces(open_input(&args.io.input)?)?;
    let mut out = LineWriter::new(args.io.output.as_deref())?;
    for t in &traces {
        for s in segmenter.segment(t)? {
            out.record(&SegmentRecord {
                trace_id: s.trace_id.clone(),
                prompt_id: t.prompt_id().to_string(),
                start: s.span.start,
                end: s.span.end,
                token_len: s.token_len(),
            })?;
        }
    }
    out.finish()
}

fn read_segment_file(path: &Path) -> Result<HashMap<(String, String), Vec<Segment>>, CliError> {
    let mut map: HashMap<(String, String), Vec<Segment>> = HashMap::new();
    for (i, line) in open_input(path)?.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SegmentRecord = serde_json::from_str(&line).map_err(|e| CliError::Input {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        map.entry((rec.prompt_id, rec.trace_id.clone()))
            .or_default()
            .push(Segment::new(rec.trace_id, rec.start, rec.end));
    }
    Ok(map)
}

fn penalize(args: PenalizeArgs) -> Result<(), CliError> {
    let mut cfg = args.config.load()?;
    args.penalty.apply(&mut cfg.penalty)?;
    let segmenter = Segmenter::from_config(&cfg.segmenter)?;
    let groups = parse_traces(open_input(&args.io.input)?)?;
    let stored = args.from_segments.as_deref().map(read_segment_file).transpose()?;
    let mut out = LineWriter::new(args.io.output.as_deref())?;
    for group in &groups {
        let shaped = match &stored {
            Some(stored) => {
                // A trace without records had an empty think span.
                let segments: HashMap<String, Vec<Segment>> = group
                    .traces()
                    .iter()
                    .map(|t| {
                        let key = (t.prompt_id().to_string(), t.trace_id().to_string());
                        (t.trace_id().to_string(), stored.get(&key).cloned().unwrap_or_default())
                    })
                    .collect();
                penalize_group(group, &segments, &cfg.penalty)?
            }
            None => shape_group(group, &segmenter, &cfg.penalty)?,
        };
        for r in &shaped {
            out.record(r)?;
        }
    }
    out.finish()
}

fn advantage(args: AdvantageArgs) -> Result<(), CliError> {
    let mut cfg = args.config.load()?;
    args.penalty.apply(&mut cfg.penalty)?;
    if let Some(a) = args.algo {
        cfg.advantage.algo = a;
    }
    if let Some(e) = args.clip_eps {
        cfg.advantage.clip_eps = ClipConfig::new(e)?;
    }
    if args.dynamic_sampling {
        cfg.advantage.dynamic_sampling = true;
    }
    if let Some(b) = args.baseline {
        cfg.advantage.reinforce_baseline = b;
    }
    cfg.advantage.validate()?;
    let groups = parse_traces(open_input(&args.io.input)?)?;
    let (outputs, dropped) = process_groups(groups, &cfg)?;
    if dropped > 0 {
        tracing::info!(dropped, "dynamic sampling removed groups without reward spread");
    }
    let mut out = LineWriter::new(args.io.output.as_deref())?;
    for rec in outputs.iter().filter_map(|g| g.advantages.as_ref()).flatten() {
        out.record(rec)?;
    }
    out.finish()
}

#[derive(Serialize)]
struct CorpusReport<'a> {
    corpus: &'a str,
    stats: grsp_core::CorpusStats,
    #[serde(skip_serializing_if = "Option::is_none")]
    ratio: Option<grsp_core::ClusterRatioReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ratio_error: Option<String>,
}

fn analyze(args: AnalyzeArgs) -> Result<(), CliError> {
    let cfg = args.config.load()?;
    let segmenter = Segmenter::from_config(&cfg.segmenter)?;
    let scheme = cfg
        .penalty
        .clusters
        .clone()
        .with_overflow(args.overflow.unwrap_or(OverflowPolicy::Exclude));
    let mut corpora: IndexMap<String, Vec<grsp_core::Trace>> = IndexMap::new();
    for (name, path) in &args.corpus {
        let traces = read_traces(open_input(path)?)?;
        if corpora.insert(name.clone(), traces).is_some() {
            return Err(ConfigError::new("corpus", format!("corpus `{name}` given twice")).into());
        }
    }
    let mut out = LineWriter::new(args.output.as_deref())?;
    let k = scheme.k();
    match args.group_by {
        Some(GroupBy::Method) => {
            let rows = method_comparison(&corpora, &segmenter, &scheme)?;
            match args.format {
                Format::Json => {
                    for row in &rows {
                        out.record(row)?;
                    }
                }
                Format::Table => {
                    let mut text = String::from("method\tn_traces\tmean_tokens\tmean_segments\tcluster1_share");
                    text.push_str("\texcluded_segments\n");
                    for r in &rows {
                        text.push_str(&format!(
                            "{}\t{}\t{}\t{}\t{}\t{}\n",
                            r.method,
                            r.stats.n_traces,
                            r.stats.mean_tokens,
                            r.stats.mean_segments,
                            r.cluster1_share(),
                            r.stats.excluded_segments
                        ));
                    }
                    out.raw(&text)?;
                }
            }
        }
        None => {
            if args.format == Format::Table {
                out.raw("corpus\tcluster\tshare\tpassed_mean\tfailed_mean\tratio\n")?;
            }
            for (name, traces) in &corpora {
                let segments = segment_all(traces, &segmenter)?;
                let stats = corpus_stats_from_segments(traces, &segments, &scheme)?;
                let (ratio, ratio_error) = match cluster_ratio_report_from_segments(traces, &segments, &scheme) {
                    Ok(r) => (Some(r), None),
                    Err(e) => (None, Some(e.to_string())),
                };
                match args.format {
                    Format::Json => out.record(&CorpusReport {
                        corpus: name,
                        stats,
                        ratio,
                        ratio_error,
                    })?,
                    Format::Table => {
                        let mut text = String::new();
                        for c in 1..=k {
                            let cell = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
                            text.push_str(&format!(
                                "{name}\t{c}\t{}\t{}\t{}\t{}\n",
                                stats.cluster_share[c - 1],
                                cell(ratio.as_ref().map(|r| r.passed_mean[c - 1])),
                                cell(ratio.as_ref().map(|r| r.failed_mean[c - 1])),
                                cell(ratio.as_ref().and_then(|r| r.ratio.get(&c).copied())),
                            ));
                        }
                        out.raw(&text)?;
                    }
                }
            }
        }
    }
    out.finish()
}

#[derive(Serialize)]
struct SimRecord<'a> {
    run: &'a str,
    #[serde(flatten)]
    metrics: &'a SimMetrics,
}

fn simulate(args: SimulateArgs) -> Result<(), CliError> {
    let cfg = args.config.load()?;
    let mut sim = cfg.simulation;
    if let Some(seed) = args.seed {
        sim.policy.seed = seed;
        sim.verifier.noise_seed = seed.wrapping_add(1);
    }
    if let Some(a) = args.alpha {
        sim.penalty.alpha = a;
    }
    if let Some(w) = &args.weights {
        sim.penalty.weights = w.apply(&sim.penalty.weights);
    }
    let runs: Vec<(&str, SimRun)> = if args.paired {
        let p = run_paired(&sim, args.steps)?;
        vec![("descending", p.descending), ("ascending", p.ascending)]
    } else {
        vec![("run", run_simulation(&sim, args.steps)?)]
    };
    let mut out = LineWriter::new(args.output.as_deref())?;
    for (name, run) in &runs {
        for m in &run.metrics {
            out.record(&SimRecord { run: name, metrics: m })?;
        }
    }
    out.finish()?;

    let mut table = String::from("run\twindow\taccuracy\tmean_response_tokens\tmean_segment_tokens\tmean_segments\n");
    for (name, run) in &runs {
        let s = summarize(&run.metrics, sim.summary_window);
        table.push_str(&format!(
            "{name}\t{}\t{:.4}\t{:.2}\t{:.2}\t{:.3}\n",
            s.window, s.accuracy, s.mean_response_tokens, s.mean_segment_tokens, s.mean_segments
        ));
    }
    eprint!("{table}");
    Ok(())
}

fn serve(args: ServeArgs) -> Result<(), CliError> {
    let mut cfg = args.config.load()?;
    if let Some(bind) = args.bind {
        cfg.service.bind = bind;
    }
    cfg.service.validate()?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Serve(e.to_string()))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&cfg.service.bind)
            .await
            .map_err(|e| CliError::Serve(format!("cannot bind {}: {e}", cfg.service.bind)))?;
        let addr = listener.local_addr().map_err(|e| CliError::Serve(e.to_string()))?;
        println!("{}", serde_json::json!({ "listening": addr.to_string() }));
        tracing::info!(%addr, "reward service listening");
        server::serve(listener, cfg, shutdown_signal())
            .await
            .map_err(|e| CliError::Serve(e.to_string()))
    })
}

async fn shutdown_signal() {
    let _ = tokio::signal::ctrl_c().await;
}
