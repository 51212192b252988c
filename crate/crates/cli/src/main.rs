//! `pathcast` command-line pipeline.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric error.

mod manifest;

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pathcast::cig::{build_cig, export_graph, merge_weights, CigMode, GraphFormat};
use pathcast::eval::evaluate;
use pathcast::event_store::{chronological_split, ingest_events, Corpus, InputFormat, Posting, Split, DEFAULT_SPLIT};
use pathcast::intervals::{fit_log_gaussian, log10_histogram, pooled_intervals, threshold_log10, threshold_seconds};
use pathcast::numeric::{checkpoint_paths, Checkpoint};
use pathcast::static_encoder::{AggScheme, FeatureFile};
use pathcast::synth::{generate, truth_json, SynthConfig};
use pathcast::trainer::{self, log_csv, TrainConfig};
use pathcast::{Error, ErrorKind};
use serde_json::json;

use manifest::RunManifest;

#[derive(Parser)]
#[command(name = "pathcast", version, about = "Predict the next community a piece of content will be shared in")]
struct Cli {
    /// Where to write the run manifest (defaults to a file next to the
    /// primary output).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with a planted influence graph.
    Synth(SynthArgs),
    /// Validate, deduplicate and normalize a posting log to JSON lines.
    Ingest(IngestArgs),
    /// Fit the log-normal inter-user gap model and report the session cutoff.
    AnalyzeIntervals(IntervalArgs),
    /// Build per-video influence graphs from training postings.
    BuildCig(BuildCigArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Rank held-out postings with a trained checkpoint.
    Eval(EvalArgs),
    /// Print or save one video's graph as DOT or JSON.
    ExportGraph(ExportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Jsonl,
    Csv,
}

#[derive(Args)]
struct Input {
    /// Posting log (JSON lines or CSV).
    #[arg(long)]
    input: PathBuf,
    /// Input format; guessed from the extension when omitted.
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
}

impl Input {
    fn load(&self) -> Result<Corpus, Error> {
        let format = match self.format {
            Some(FormatArg::Jsonl) => InputFormat::Jsonl,
            Some(FormatArg::Csv) => InputFormat::Csv,
            None => InputFormat::from_path(&self.input),
        };
        Ok(ingest_events(&self.input, format)?)
    }
}

#[derive(Args)]
struct SynthArgs {
    /// key = value config; unset keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct IngestArgs {
    #[command(flatten)]
    input: Input,
    #[arg(long)]
    out: PathBuf,
    /// Drop videos seen in fewer distinct communities.
    #[arg(long, default_value_t = 1)]
    min_communities: usize,
}

#[derive(Args)]
struct IntervalArgs {
    #[command(flatten)]
    input: Input,
    /// Confidence multiplier: cutoff = 10^(μ − cσ).
    #[arg(long, default_value_t = 3.0)]
    c: f64,
    /// Histogram bin width in log10 seconds.
    #[arg(long, default_value_t = 0.25)]
    bin_width: f64,
    /// Fit on every event instead of the training split only.
    #[arg(long)]
    all_events: bool,
    #[arg(long)]
    out: PathBuf,
    /// Optional per-bin CSV for plotting.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct GraphArgs {
    #[command(flatten)]
    input: Input,
    /// influence, seq, fc or er.
    #[arg(long, default_value = "influence")]
    mode: CigMode,
    /// Cutoff is 10^(mu - c*sigma) of the different-user gaps.
    #[arg(long, default_value_t = 3.0)]
    c: f64,
    /// Session cutoff in seconds; overrides the fitted value.
    #[arg(long)]
    threshold: Option<f64>,
    /// Seed for the er mode.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BuildCigArgs {
    #[command(flatten)]
    graph: GraphArgs,
    /// A video id, or `all`.
    #[arg(long, default_value = "all")]
    video: String,
    /// One `<video>.json` per graph plus summary.csv.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    graph: GraphArgs,
    #[arg(long)]
    video: String,
    #[arg(long, value_enum, default_value = "dot")]
    graph_format: GraphFormatArg,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum GraphFormatArg {
    Dot,
    Json,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    input: Input,
    /// key = value config; flags below take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint base path (writes `<out>.json` and `<out>.bin`).
    #[arg(long)]
    out: PathBuf,
    /// Search the learning-rate grid and keep the best validation MRR.
    #[arg(long)]
    tune: bool,
    /// Graph construction: influence, seq, fc or er.
    #[arg(long)]
    cig_mode: Option<CigMode>,
    /// Channel aggregation: concat, add or mul.
    #[arg(long)]
    agg: Option<AggScheme>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Precomputed content vectors (JSON lines `{id, vector, kind?}`).
    #[arg(long)]
    features: Option<PathBuf>,
    /// Per-epoch CSV log; defaults to `<out>.log.csv`.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    input: Input,
    /// Checkpoint base path.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Number of negative-sampling seeds.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Cutoffs, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "5,10")]
    k: Vec<usize>,
    /// Same content vectors the model was trained with.
    #[arg(long)]
    features: Option<PathBuf>,
    /// JSON report.
    #[arg(long)]
    out: PathBuf,
    /// Flat CSV (slice, metric, mean, std); defaults to `<out>` with a
    /// `.csv` extension.
    #[arg(long)]
    csv: Option<PathBuf>,
}

/// Failures raised by the CLI itself rather than the library.
enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Core(e.into())
    }
}

macro_rules! core_from {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Failure::Core(e.into())
            }
        }
    )*};
}

core_from!(
    pathcast::event_store::DataError,
    pathcast::intervals::IntervalError,
    pathcast::cig::CigError,
    pathcast::static_encoder::StaticError,
    pathcast::numeric::CheckpointError,
    pathcast::numeric::NumericError,
    pathcast::trainer::TrainError,
    pathcast::synth::SynthError,
    serde_json::Error
);

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(1);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numeric => 3,
            })
        }
    }
}

/// `PATHCAST_THREADS` caps the worker pool.
fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("PATHCAST_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("PATHCAST_THREADS must be a positive integer, got {raw:?}"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())
}

fn run(cli: Cli) -> Outcome {
    let started = Instant::now();
    let manifest_path = cli.manifest;
    let m = match cli.command {
        Command::Synth(a) => synth(a)?,
        Command::Ingest(a) => ingest(a)?,
        Command::AnalyzeIntervals(a) => analyze_intervals(a)?,
        Command::BuildCig(a) => build_cigs(a)?,
        Command::Train(a) => train(a)?,
        Command::Eval(a) => eval(a)?,
        Command::ExportGraph(a) => export(a)?,
    };
    m.finish(started, manifest_path.as_deref())?;
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> io::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn synth(a: SynthArgs) -> Result<RunManifest, Failure> {
    let mut cfg = match &a.config {
        Some(p) => SynthConfig::parse(&fs::read_to_string(p)?)?,
        None => SynthConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let (corpus, truth) = generate(&cfg)?;
    let mut buf = Vec::new();
    corpus.write_jsonl(&mut buf)?;
    write_file(&a.out, &buf)?;
    let mut m = RunManifest::new("synth", serde_json::to_value(&cfg)?, Some(cfg.seed), &a.out);
    if let Some(p) = &a.config {
        m.input(p);
    }
    m.output(&a.out);
    if let Some(t) = &a.truth {
        write_file(t, truth_json(&truth).as_bytes())?;
        m.output(t);
    }
    eprintln!("{} events over {} videos", corpus.len(), corpus.num_videos());
    Ok(m)
}

fn summary(corpus: &Corpus) -> serde_json::Value {
    json!({
        "events": corpus.len(),
        "videos": corpus.num_videos(),
        "communities": corpus.num_communities(),
        "users": corpus.users().len(),
        "channels": corpus.channels().len(),
    })
}

fn ingest(a: IngestArgs) -> Result<RunManifest, Failure> {
    let corpus = a.input.load()?.filter_min_communities(a.min_communities);
    let mut buf = Vec::new();
    corpus.write_jsonl(&mut buf)?;
    write_file(&a.out, &buf)?;
    let info = summary(&corpus);
    println!("{info}");
    let mut m = RunManifest::new("ingest", json!({ "min_communities": a.min_communities }), None, &a.out);
    m.input(&a.input.input);
    m.output(&a.out);
    Ok(m)
}

fn split_of(corpus: &Corpus) -> Result<Split, Failure> {
    Ok(chronological_split(corpus, DEFAULT_SPLIT)?)
}

fn train_sequences(corpus: &Corpus, split: &Split) -> Vec<Vec<Posting>> {
    (0..corpus.num_videos())
        .map(|v| corpus.sequence_where(v, |e| split.is_train(e)))
        .collect()
}

fn analyze_intervals(a: IntervalArgs) -> Result<RunManifest, Failure> {
    let corpus = a.input.load()?;
    let seqs: Vec<Vec<Posting>> = if a.all_events {
        (0..corpus.num_videos()).map(|v| corpus.sequence(v)).collect()
    } else {
        train_sequences(&corpus, &split_of(&corpus)?)
    };
    let (same, diff) = pooled_intervals(seqs.iter().map(Vec::as_slice));
    let fit = fit_log_gaussian(&diff)?;
    if !(a.bin_width > 0.0) {
        return Err(Failure::Usage("--bin-width must be positive".into()));
    }
    let hist = log10_histogram(&diff, a.bin_width);
    let same_fit = fit_log_gaussian(&same).ok();
    let report = json!({
        "mu": fit.mu,
        "sigma": fit.sigma,
        "n": fit.n,
        "c": a.c,
        "threshold_log10": threshold_log10(&fit, a.c)?,
        "threshold_seconds": threshold_seconds(&fit, a.c)?,
        "same_user": same_fit.map(|f| json!({"mu": f.mu, "sigma": f.sigma, "n": f.n})),
        "histogram": hist,
    });
    write_file(&a.out, (serde_json::to_string_pretty(&report)? + "\n").as_bytes())?;
    let mut m = RunManifest::new(
        "analyze-intervals",
        json!({"c": a.c, "bin_width": a.bin_width, "all_events": a.all_events}),
        None,
        &a.out,
    );
    m.input(&a.input.input);
    m.output(&a.out);
    if let Some(p) = &a.csv {
        let mut s = String::from("lo,hi,count,fraction\n");
        for b in &hist {
            s.push_str(&format!("{},{},{},{:.6}\n", b.lo, b.hi, b.count, b.fraction));
        }
        write_file(p, s.as_bytes())?;
        m.output(p);
    }
    println!("threshold {:.1} s (log10 {:.4})", threshold_seconds(&fit, a.c)?, threshold_log10(&fit, a.c)?);
    Ok(m)
}

/// Corpus, training sequences and the session cutoff for graph commands.
fn graph_inputs(g: &GraphArgs) -> Result<(Corpus, Vec<Vec<Posting>>, f64), Failure> {
    let corpus = g.input.load()?;
    let seqs = train_sequences(&corpus, &split_of(&corpus)?);
    let threshold = match g.threshold {
        Some(t) if t > 0.0 => t,
        Some(t) => return Err(Failure::Usage(format!("--threshold must be positive, got {t}"))),
        None => trainer::fit_threshold(&seqs, g.c)?.1,
    };
    Ok((corpus, seqs, threshold))
}

fn video_graph(corpus: &Corpus, seqs: &[Vec<Posting>], v: usize, threshold: f64, g: &GraphArgs) -> Result<pathcast::cig::Cig, Failure> {
    let id = corpus.videos().name(v);
    let cig = build_cig(id, &seqs[v], threshold, g.mode, g.seed)?;
    Ok(merge_weights(cig).with_labels(|c| corpus.communities().name(c).to_string()))
}

fn video_index(corpus: &Corpus, id: &str) -> Result<usize, Failure> {
    corpus
        .videos()
        .get(id)
        .ok_or_else(|| Failure::Core(pathcast::event_store::DataError::UnknownVideo(id.to_string()).into()))
}

/// File-system-safe stem for a video id.
fn file_stem(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' }).collect()
}

fn build_cigs(a: BuildCigArgs) -> Result<RunManifest, Failure> {
    let (corpus, seqs, threshold) = graph_inputs(&a.graph)?;
    let videos: Vec<usize> = if a.video == "all" {
        (0..corpus.num_videos()).filter(|&v| !seqs[v].is_empty()).collect()
    } else {
        vec![video_index(&corpus, &a.video)?]
    };
    fs::create_dir_all(&a.out_dir)?;
    let summary_path = a.out_dir.join("summary.csv");
    let mut m = RunManifest::new(
        "build-cig",
        json!({"mode": a.graph.mode.to_string(), "c": a.graph.c, "threshold_seconds": threshold, "video": a.video}),
        Some(a.graph.seed),
        &summary_path,
    );
    m.input(&a.graph.input.input);
    let mut w = csv_writer(&summary_path)?;
    writeln!(w, "video_id,nodes,edges,sessions")?;
    for v in videos {
        let cig = video_graph(&corpus, &seqs, v, threshold, &a.graph)?;
        let id = corpus.videos().name(v);
        let path = a.out_dir.join(format!("{}.json", file_stem(id)));
        write_file(&path, export_graph(&cig, GraphFormat::Json).as_bytes())?;
        m.output(&path);
        writeln!(w, "{},{},{},{}", csv_field(id), cig.num_nodes(), cig.num_edges(), cig.sessions)?;
    }
    w.flush()?;
    drop(w);
    m.output(&summary_path);
    Ok(m)
}

fn csv_writer(path: &Path) -> io::Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path)?))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn export(a: ExportArgs) -> Result<RunManifest, Failure> {
    let (corpus, seqs, threshold) = graph_inputs(&a.graph)?;
    let v = video_index(&corpus, &a.video)?;
    let cig = video_graph(&corpus, &seqs, v, threshold, &a.graph)?;
    let text = export_graph(
        &cig,
        match a.graph_format {
            GraphFormatArg::Dot => GraphFormat::Dot,
            GraphFormatArg::Json => GraphFormat::Json,
        },
    );
    let target = a.out.clone().unwrap_or_else(|| PathBuf::from("-"));
    let mut m = RunManifest::new(
        "export-graph",
        json!({"mode": a.graph.mode.to_string(), "c": a.graph.c, "threshold_seconds": threshold, "video": a.video}),
        Some(a.graph.seed),
        &target,
    );
    m.input(&a.graph.input.input);
    match &a.out {
        Some(p) => {
            write_file(p, text.as_bytes())?;
            m.output(p);
        }
        None => {
            print!("{text}");
            m.skip();
        }
    }
    Ok(m)
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig, Failure> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::parse(&fs::read_to_string(p)?)?,
        None => TrainConfig::default(),
    };
    if let Some(m) = a.cig_mode {
        cfg.cig_mode = m;
    }
    if let Some(s) = a.agg {
        cfg.agg = s;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<RunManifest, Failure> {
    let cfg = train_config(&a)?;
    let corpus = a.input.load()?;
    let split = split_of(&corpus)?;
    let features = a.features.as_deref().map(|p| FeatureFile::load(p, cfg.dim)).transpose()?;
    let (t, grid) = if a.tune {
        let (t, scores) = trainer::tune(&corpus, &split, &cfg, features.as_ref())?;
        (t, Some(scores))
    } else {
        (trainer::train(&corpus, &split, &cfg, features.as_ref())?, None)
    };
    let mut meta = t.checkpoint_meta();
    if let Some(g) = &grid {
        meta["lr_grid_val_mrr"] = json!(g);
    }
    let ck = t.model.to_checkpoint(Some(&t.state.bank), meta);
    ck.save(&a.out)?;
    let log_path = a.log.clone().unwrap_or_else(|| with_suffix(&a.out, ".log.csv"));
    write_file(&log_path, log_csv(&t.log).as_bytes())?;
    let (mpath, bpath) = checkpoint_paths(&a.out);
    let mut m = RunManifest::new("train", serde_json::to_value(&t.config)?, Some(t.config.seed), &a.out);
    m.input(&a.input.input);
    for p in [&a.config, &a.features].into_iter().flatten() {
        m.input(p);
    }
    m.output(&mpath);
    m.output(&bpath);
    m.output(&log_path);
    for e in &t.log {
        eprintln!("epoch {} loss {:.4} val_ndcg5 {:.4}", e.epoch, e.train_loss, e.val_ndcg5);
    }
    Ok(m)
}

fn eval(a: EvalArgs) -> Result<RunManifest, Failure> {
    if a.seeds == 0 || a.k.is_empty() || a.k.contains(&0) {
        return Err(Failure::Usage("--seeds and every --k must be positive".into()));
    }
    let ck = Checkpoint::load(&a.checkpoint)?;
    let cfg: TrainConfig = serde_json::from_value(ck.meta["config"].clone())?;
    let corpus = a.input.load()?;
    let split = split_of(&corpus)?;
    let features = a.features.as_deref().map(|p| FeatureFile::load(p, cfg.dim)).transpose()?;
    let mut t = trainer::prepare(&corpus, &split, &cfg, features.as_ref())?;
    t.model.load_checkpoint(&ck)?;
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let report = evaluate(&t.model, &t.ctx, &corpus, &split, &seeds, &a.k, cfg.batch_size)?;
    write_file(&a.out, (serde_json::to_string_pretty(&report)? + "\n").as_bytes())?;
    let csv_path = a.csv.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    write_file(&csv_path, report.to_csv().as_bytes())?;
    let (mpath, bpath) = checkpoint_paths(&a.checkpoint);
    let mut m = RunManifest::new("eval", json!({"seeds": seeds, "k": a.k, "train": cfg}), None, &a.out);
    m.input(&a.input.input);
    m.input(&mpath);
    m.input(&bpath);
    m.output(&a.out);
    m.output(&csv_path);
    if let Some(ndcg) = report.metric("all", &format!("ndcg@{}", a.k[0])) {
        println!("all ndcg@{} {ndcg:.4} over {} trials", a.k[0], report.slices["all"].trials);
    }
    Ok(m)
}
