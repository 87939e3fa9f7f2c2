//! Command-line front end.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::Settings;
use crate::dataset::{parse_dataset, parse_labels, split_dataset, write_dataset, DatasetSplit};
use crate::embedder::{import_embeddings, GqaEncoder};
use crate::error::{Error, Result};
use crate::eval::MetricsReport;
use crate::features::{BatchInput, FeatureCache, FeatureExtractor, Precomputed, UserBatches};
use crate::heads::{HeadParams, TrainedTask};
use crate::memory::{CacheStats, MemoryStore, Outcome};
use crate::synthetic::{generate_clusters, generate_trace, ClusterSpec, TraceSpec};
use crate::train::{evaluate_users, multi_run, write_history, Aggregate};

#[derive(Parser, Debug)]
#[command(name = "persllm", version, about = "Personality classification with a cached embedding memory")]
pub struct Cli {
    /// Settings file with one `key = value` per line.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override a setting; repeatable and applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Filter label words from raw posts and write token batches.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Embed every batch through the memory store and save the store.
    Embed {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        store: PathBuf,
    },
    /// Train heads and write the selected checkpoint.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// Reuse and update this store across the command.
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Per-epoch CSV of the selected run.
        #[arg(long)]
        history: Option<PathBuf>,
        /// JSON with every run's test report and the aggregate.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Score a checkpoint on one part of the split.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Part::Test)]
        part: Part,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Inspect a store or replay a synthetic request trace.
    #[command(subcommand)]
    Cache(CacheCommand),
    /// Write labelled cluster embeddings for experiments and tests.
    Synth {
        #[arg(long)]
        embeddings: PathBuf,
        /// Labels file (`user_id`, `label` per line).
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = 400)]
        users: usize,
        #[arg(long, default_value_t = 3)]
        batches: usize,
        #[arg(long, default_value_t = 4.0)]
        separation: f64,
    },
    /// Print the effective settings.
    Config,
}

#[derive(Args, Debug)]
pub struct DataArgs {
    /// Dataset-JSONL (raw posts or token batches).
    #[arg(long)]
    pub dataset: PathBuf,
    /// Embedding-JSONL; when given, only labels are read from the dataset.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum CacheCommand {
    Stats {
        #[arg(long)]
        store: PathBuf,
    },
    Simulate {
        /// Comma-separated thresholds; defaults to the `theta` setting.
        #[arg(long, allow_hyphen_values = true)]
        thetas: Option<String>,
        /// Comma-separated capacities (`none` for unbounded); defaults to the `capacity` setting.
        #[arg(long)]
        capacities: Option<String>,
        #[arg(long, default_value_t = 200)]
        distinct: usize,
        #[arg(long, default_value_t = 5000)]
        length: usize,
        /// Fraction of requests repeating a base vector exactly.
        #[arg(long, default_value_t = 0.5)]
        exact: f64,
        #[arg(long, default_value_t = 0.05)]
        jitter: f64,
        /// Write the sweep as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Train,
    Validation,
    Test,
    All,
}

/// Parses arguments, runs the command and returns the process exit code:
/// 0 on success, 2 for bad input, 1 for internal failures.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    let mut out = String::new();
    let result = run(&cli, &mut out);
    print!("{out}");
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_input_error() {
                2
            } else {
                1
            }
        }
    }
}

/// Runs `cli`, appending human-readable output to `out`.
pub fn run(cli: &Cli, out: &mut String) -> Result<()> {
    let settings = Settings::resolve(cli.config.as_deref(), &cli.overrides)?;
    match &cli.command {
        Command::Ingest { input, output } => cmd_ingest(&settings, input, output, out),
        Command::Embed { data, store } => cmd_embed(&settings, data, store, out),
        Command::Train {
            data,
            store,
            checkpoint,
            history,
            summary,
        } => cmd_train(
            &settings,
            data,
            store.as_deref(),
            checkpoint,
            history.as_deref(),
            summary.as_deref(),
            out,
        ),
        Command::Eval {
            data,
            store,
            checkpoint,
            part,
            report,
        } => cmd_eval(&settings, data, store.as_deref(), checkpoint, *part, report.as_deref(), out),
        Command::Cache(CacheCommand::Stats { store }) => cmd_cache_stats(&settings, store, out),
        Command::Cache(CacheCommand::Simulate {
            thetas,
            capacities,
            distinct,
            length,
            exact,
            jitter,
            json,
        }) => {
            let thetas = match thetas {
                Some(t) => parse_list(t, "thetas", |s| s.parse().ok())?,
                None => vec![settings.theta],
            };
            let capacities = match capacities {
                Some(c) => parse_list(c, "capacities", |s| match s {
                    "none" => Some(None),
                    v => v.parse().ok().filter(|&n| n > 0).map(Some),
                })?,
                None => vec![settings.capacity],
            };
            let trace = TraceSpec {
                distinct: *distinct,
                length: *length,
                dim: settings.dim,
                exact: *exact,
                jitter: *jitter,
                seed: settings.seed,
            };
            cmd_cache_simulate(&settings, &trace, &thetas, &capacities, json.as_deref(), out)
        }
        Command::Synth {
            embeddings,
            labels,
            users,
            batches,
            separation,
        } => {
            let spec = ClusterSpec {
                users: *users,
                dim: settings.dim,
                batches_per_user: *batches,
                separation: *separation,
                seed: settings.seed,
            };
            cmd_synth(&spec, embeddings, labels, out)
        }
        Command::Config => {
            out.push_str(&settings.render());
            Ok(())
        }
    }
}

fn parse_list<T>(text: &str, what: &str, f: impl Fn(&str) -> Option<T>) -> Result<Vec<T>> {
    text.split(',')
        .map(|s| f(s.trim()).ok_or_else(|| Error::Config(format!("bad {what} entry {s:?}"))))
        .collect()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_ingest(settings: &Settings, input: &Path, output: &Path, out: &mut String) -> Result<()> {
    let samples = parse_dataset(input, &settings.ingest()?)?;
    write_dataset(output, &samples)?;
    let batches: usize = samples.iter().map(|s| s.batch_count()).sum();
    let _ = writeln!(out, "wrote {} users, {batches} batches to {}", samples.len(), output.display());
    Ok(())
}

/// Users plus the extractor that turns their batches into embeddings.
struct Source {
    users: Vec<UserBatches>,
    extractor: Box<dyn FeatureExtractor>,
}

fn load_source(settings: &Settings, data: &DataArgs) -> Result<Source> {
    let source = match &data.embeddings {
        None => {
            let samples = parse_dataset(&data.dataset, &settings.ingest()?)?;
            let encoder = GqaEncoder::new(settings.gqa())?;
            Source {
                users: samples.iter().map(UserBatches::from).collect(),
                extractor: Box::new(encoder),
            }
        }
        Some(path) => {
            let imported = import_embeddings(path)?;
            let labels = parse_labels(&data.dataset)?;
            let mut users = Vec::with_capacity(labels.len());
            for (user_id, label) in labels {
                match imported.users.get(&user_id) {
                    Some(vs) => users.push(UserBatches {
                        user_id,
                        label,
                        batches: vs.iter().cloned().map(BatchInput::vector).collect(),
                    }),
                    None => log::warn!("user {user_id} has no embeddings, skipped"),
                }
            }
            let labelled: BTreeSet<&str> = users.iter().map(|u| u.user_id.as_str()).collect();
            let orphans = imported.users.keys().filter(|k| !labelled.contains(k.as_str())).count();
            if orphans > 0 {
                log::warn!("{orphans} users in {} have no label, skipped", path.display());
            }
            Source {
                users,
                extractor: Box::new(Precomputed { dim: imported.dim }),
            }
        }
    };
    if source.users.is_empty() {
        return Err(Error::Empty("dataset has no usable users"));
    }
    Ok(source)
}

/// Loads `path` when it exists, otherwise starts an empty store. Structural
/// fields (dim, bits, capacity, seed) come from the file; θ and the probe
/// radius always follow the settings.
fn open_store(settings: &Settings, path: Option<&Path>, dim: usize) -> Result<MemoryStore> {
    match path {
        Some(p) if p.exists() => {
            let mut store = MemoryStore::load(p)?;
            if store.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: store.dim(),
                    actual: dim,
                });
            }
            store.set_theta(settings.theta);
            store.set_probe_radius(settings.probe_radius);
            Ok(store)
        }
        _ => MemoryStore::new(settings.memory(dim)),
    }
}

fn write_stats(out: &mut String, entries: usize, s: &CacheStats) {
    let _ = writeln!(out, "entries       {entries}");
    let _ = writeln!(out, "hits_exact    {}", s.hits_exact);
    let _ = writeln!(out, "hits_similar  {}", s.hits_similar);
    let _ = writeln!(out, "misses        {}", s.misses);
    let _ = writeln!(out, "recomputes    {}", s.recomputes);
    let _ = writeln!(out, "evictions     {}", s.evictions);
}

fn cmd_embed(settings: &Settings, data: &DataArgs, store_path: &Path, out: &mut String) -> Result<()> {
    let source = load_source(settings, data)?;
    let store = open_store(settings, Some(store_path), source.extractor.dim())?;
    let mut cache = FeatureCache::new(store, source.extractor.as_ref())?;
    let batches: usize = source.users.iter().map(|u| u.batches.len()).sum();
    for user in &source.users {
        cache.fetch_user(user)?;
    }
    let stats = cache.stats();
    let store = cache.into_store();
    store.save(store_path)?;
    let _ = writeln!(out, "users         {}", source.users.len());
    let _ = writeln!(out, "batches       {batches}");
    write_stats(out, store.len(), &stats);
    Ok(())
}

fn split_users(settings: &Settings, users: &[UserBatches]) -> Result<DatasetSplit<UserBatches>> {
    split_dataset(users, settings.split, settings.seed)
}

#[derive(Serialize)]
struct RunSummary<'a> {
    seed: u64,
    best_epoch: usize,
    best_val_f1: f64,
    epochs_run: usize,
    test: &'a MetricsReport,
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    task: String,
    selected_run: usize,
    runs: Vec<RunSummary<'a>>,
    aggregate: &'a Aggregate,
}

fn cmd_train(
    settings: &Settings,
    data: &DataArgs,
    store_path: Option<&Path>,
    checkpoint: &Path,
    history: Option<&Path>,
    summary_path: Option<&Path>,
    out: &mut String,
) -> Result<()> {
    let source = load_source(settings, data)?;
    let dim = source.extractor.dim();
    let split = split_users(settings, &source.users)?;
    let store = open_store(settings, store_path, dim)?;
    let mut cache = FeatureCache::new(store, source.extractor.as_ref())?;
    let run = settings.run();
    let summary = multi_run(&split, &settings.head(dim), &run, &mut cache)?;

    let mut selected = 0;
    for (k, r) in summary.runs.iter().enumerate() {
        if r.best_val_f1 > summary.runs[selected].best_val_f1 {
            selected = k;
        }
    }
    let chosen = &summary.runs[selected];
    chosen.params.save(run.task, checkpoint)?;
    if let Some(h) = history {
        write_history(h, &chosen.history)?;
    }
    if let Some(p) = store_path {
        cache.store().save(p)?;
    }

    let _ = writeln!(
        out,
        "users {} (train {}, validation {}, test {})",
        source.users.len(),
        split.train.len(),
        split.validation.len(),
        split.test.len()
    );
    for (k, (r, rep)) in summary.runs.iter().zip(&summary.reports).enumerate() {
        let _ = writeln!(
            out,
            "run {k} seed {}: best epoch {} of {}, val F1 {:.4}, test F1 {:.4}",
            summary.seeds[k],
            r.best_epoch,
            r.history.len(),
            r.best_val_f1,
            rep.headline_f1()
        );
    }
    let _ = writeln!(out, "test metrics over {} run(s), mean ± std:", summary.runs.len());
    for (name, mean) in &summary.aggregate.mean {
        let _ = writeln!(out, "  {name:<12} {mean:.4} ± {:.4}", summary.aggregate.std[name]);
    }
    let _ = writeln!(out, "checkpoint from run {selected} written to {}", checkpoint.display());

    if let Some(p) = summary_path {
        let doc = TrainSummary {
            task: run.task.to_string(),
            selected_run: selected,
            runs: summary
                .runs
                .iter()
                .zip(&summary.reports)
                .zip(&summary.seeds)
                .map(|((r, rep), &seed)| RunSummary {
                    seed,
                    best_epoch: r.best_epoch,
                    best_val_f1: r.best_val_f1,
                    epochs_run: r.history.len(),
                    test: rep,
                })
                .collect(),
            aggregate: &summary.aggregate,
        };
        let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::Compute(e.to_string()))?;
        write_text(p, &(text + "\n"))?;
    }
    Ok(())
}

fn cmd_eval(
    settings: &Settings,
    data: &DataArgs,
    store_path: Option<&Path>,
    checkpoint: &Path,
    part: Part,
    report_path: Option<&Path>,
    out: &mut String,
) -> Result<()> {
    let (params, task): (HeadParams, TrainedTask) = HeadParams::load(checkpoint)?;
    let source = load_source(settings, data)?;
    let dim = source.extractor.dim();
    if dim != params.config.input_dim {
        return Err(Error::DimensionMismatch {
            expected: params.config.input_dim,
            actual: dim,
        });
    }
    let users = match part {
        Part::All => source.users.clone(),
        _ => {
            let split = split_users(settings, &source.users)?;
            match part {
                Part::Train => split.train,
                Part::Validation => split.validation,
                _ => split.test,
            }
        }
    };
    let store = open_store(settings, store_path, dim)?;
    let mut cache = FeatureCache::new(store, source.extractor.as_ref())?;
    let report = evaluate_users(&params, &users, task, &mut cache)?;
    out.push_str(&report.to_table());
    match report_path {
        Some(p) => write_text(p, &(report.to_json() + "\n"))?,
        None => {
            out.push_str(&report.to_json());
            out.push('\n');
        }
    }
    Ok(())
}

fn cmd_cache_stats(settings: &Settings, path: &Path, out: &mut String) -> Result<()> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    let store = open_store(settings, Some(path), MemoryStore::load(path)?.dim())?;
    let c = store.config();
    let _ = writeln!(out, "dim           {}", c.dim);
    let _ = writeln!(out, "bits          {}", c.bits);
    let _ = writeln!(
        out,
        "capacity      {}",
        c.capacity.map_or("none".to_string(), |n| n.to_string())
    );
    let _ = writeln!(out, "buckets       {}", store.index().bucket_count());
    write_stats(out, store.len(), &store.stats());
    Ok(())
}

#[derive(Serialize, Clone, Debug, PartialEq)]
pub struct SimulationRow {
    pub theta: f64,
    pub capacity: Option<usize>,
    pub requests: usize,
    pub hits_exact: u64,
    pub hits_similar: u64,
    pub recomputes: u64,
    pub evictions: u64,
    pub hit_rate: f64,
    /// Hit rate over every request after the first.
    pub post_fill_hit_rate: f64,
}

/// Replays one trace through a fresh store per (θ, capacity) pair.
pub fn simulate(
    settings: &Settings,
    trace: &[BatchInput],
    thetas: &[f64],
    capacities: &[Option<usize>],
) -> Result<Vec<SimulationRow>> {
    let dim = match trace.first() {
        Some(b) => match &b.payload {
            crate::features::Payload::Vector(v) => v.dim(),
            crate::features::Payload::Tokens(_) => return Err(Error::Config("trace must hold vectors".into())),
        },
        None => return Err(Error::Empty("trace")),
    };
    let src = Precomputed { dim };
    let mut rows = Vec::new();
    for &theta in thetas {
        for &capacity in capacities {
            let config = crate::memory::MemoryConfig {
                theta,
                capacity,
                ..settings.memory(dim)
            };
            let mut cache = FeatureCache::new(MemoryStore::new(config)?, &src)?;
            let mut late_hits = 0u64;
            for (i, b) in trace.iter().enumerate() {
                let (_, outcome) = cache.fetch(b)?;
                if i > 0 && outcome != Outcome::Recompute {
                    late_hits += 1;
                }
            }
            let s = cache.stats();
            rows.push(SimulationRow {
                theta,
                capacity,
                requests: trace.len(),
                hits_exact: s.hits_exact,
                hits_similar: s.hits_similar,
                recomputes: s.recomputes,
                evictions: s.evictions,
                hit_rate: s.hit_rate(),
                post_fill_hit_rate: if trace.len() > 1 {
                    late_hits as f64 / (trace.len() - 1) as f64
                } else {
                    0.0
                },
            });
        }
    }
    Ok(rows)
}

fn cmd_cache_simulate(
    settings: &Settings,
    spec: &TraceSpec,
    thetas: &[f64],
    capacities: &[Option<usize>],
    json: Option<&Path>,
    out: &mut String,
) -> Result<()> {
    let trace = generate_trace(spec)?;
    let rows = simulate(settings, &trace, thetas, capacities)?;
    let _ = writeln!(
        out,
        "{:>8} {:>9} {:>9} {:>9} {:>9} {:>9} {:>8} {:>9}",
        "theta", "capacity", "exact", "similar", "recompute", "evicted", "hit", "post-fill"
    );
    for r in &rows {
        let _ = writeln!(
            out,
            "{:>8} {:>9} {:>9} {:>9} {:>9} {:>9} {:>8.4} {:>9.4}",
            r.theta,
            r.capacity.map_or("none".to_string(), |c| c.to_string()),
            r.hits_exact,
            r.hits_similar,
            r.recomputes,
            r.evictions,
            r.hit_rate,
            r.post_fill_hit_rate
        );
    }
    if let Some(p) = json {
        let text = serde_json::to_string_pretty(&rows).map_err(|e| Error::Compute(e.to_string()))?;
        write_text(p, &(text + "\n"))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct EmbeddingLine<'a> {
    user_id: &'a str,
    batch_idx: usize,
    vector: &'a [f64],
}

#[derive(Serialize)]
struct LabelLine<'a> {
    user_id: &'a str,
    label: String,
}

fn cmd_synth(spec: &ClusterSpec, embeddings: &Path, labels: &Path, out: &mut String) -> Result<()> {
    let users = generate_clusters(spec)?;
    let mut emb = create(embeddings)?;
    let mut lab = create(labels)?;
    for u in &users {
        let line = LabelLine {
            user_id: &u.user_id,
            label: u.label.code(),
        };
        let text = serde_json::to_string(&line).map_err(|e| Error::Compute(e.to_string()))?;
        writeln!(lab, "{text}").map_err(|e| Error::io(labels, e))?;
        for (i, b) in u.batches.iter().enumerate() {
            let crate::features::Payload::Vector(v) = &b.payload else {
                unreachable!("cluster batches are vectors")
            };
            let line = EmbeddingLine {
                user_id: &u.user_id,
                batch_idx: i,
                vector: v.as_slice(),
            };
            let text = serde_json::to_string(&line).map_err(|e| Error::Compute(e.to_string()))?;
            writeln!(emb, "{text}").map_err(|e| Error::io(embeddings, e))?;
        }
    }
    emb.flush().map_err(|e| Error::io(embeddings, e))?;
    lab.flush().map_err(|e| Error::io(labels, e))?;
    let _ = writeln!(
        out,
        "wrote {} users × {} batches (dim {}) to {} and {}",
        users.len(),
        spec.batches_per_user,
        spec.dim,
        embeddings.display(),
        labels.display()
    );
    Ok(())
}
