//! Command-line front end: argument parsing, configuration layering, run
//! manifests, and one handler per subcommand.
//!
//! [`dispatch`] is what the binary calls. [`run`] does the same work but
//! returns the result instead of printing it, which is what tests use.

mod error;
pub mod serve;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use scene_elab::corpus::{self, ColumnMap, FileFormat, SourceKind, TrainingRecord};
use scene_elab::gateway::{BackendKind, Embedder, Gateway};
use scene_elab::jsonl::{read_jsonl, write_jsonl};
use scene_elab::knn::{self, CachedEmbedder, KnnIndex};
use scene_elab::metrics::{self, AnnotationRecord, SystemTag};
use scene_elab::probe::{EntityExtractor, RuleExtractor, SidecarExtractor};
use scene_elab::qa::{
    self, BenchmarkConfig, DatasetTag, ElaborationMode, ElaborationProvider, EvalOptions, ModelElaborator, RunResult,
    SeCache, StoredElaborations,
};
use scene_elab::runs::{Config, Registry, RunManifest};
use scene_elab::scene::{Dimension, StoredElaboration};
use scene_elab::tasks;

pub use error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "scene-elab",
    version,
    about = "Build, generate, and evaluate scene elaborations"
)]
pub struct Cli {
    /// TOML or JSON config file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Run registry directory (overrides RUNS_DIR and the config file).
    #[arg(long, global = true, value_name = "DIR")]
    runs_dir: Option<PathBuf>,
    /// Generation endpoint; selects the HTTP backend.
    #[arg(long, global = true, value_name = "URL")]
    gen_url: Option<String>,
    /// Embedding endpoint.
    #[arg(long, global = true, value_name = "URL")]
    emb_url: Option<String>,
    /// Force the deterministic offline backend.
    #[arg(long, global = true)]
    stub: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Convert source corpora into training records.
    BuildCorpus {
        /// Source file as KIND=PATH (kinds: story_cs, social_chem, moral_stories).
        #[arg(long = "input", value_name = "KIND=PATH", required = true)]
        inputs: Vec<String>,
        /// Column mapping for a source as KIND=PATH.
        #[arg(long = "map", value_name = "KIND=PATH")]
        maps: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Shuffle training records per dimension and interleave them.
    Interleave {
        #[arg(long = "in", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Fraction of each dimension kept for training; the rest goes to --dev-out.
        #[arg(long)]
        train_fraction: Option<f64>,
        #[arg(long)]
        dev_out: Option<PathBuf>,
    },
    /// Elaborate benchmark situations by probing the QA model.
    Probe {
        #[command(flatten)]
        bench: BenchArgs,
        /// Precomputed entity annotations (JSONL); the rule extractor otherwise.
        #[arg(long)]
        entities: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Elaborate benchmark situations with the generation model.
    Elaborate {
        #[command(flatten)]
        bench: BenchArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Answer a benchmark, optionally with stored elaborations as context.
    Answer {
        #[command(flatten)]
        bench: BenchArgs,
        /// Stored elaborations (JSONL) keyed by example id.
        #[arg(long)]
        se: Option<PathBuf>,
        /// Comma-separated subset of rot, emotion, motivation, consequence.
        #[arg(long, value_delimiter = ',')]
        components: Option<Vec<Dimension>>,
        #[arg(long)]
        audit: PathBuf,
        #[arg(long)]
        parallelism: Option<usize>,
    },
    /// Summarize an audit file.
    Score {
        #[arg(long)]
        audit: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Nearest-neighbour classification over embeddings.
    Knn {
        #[command(subcommand)]
        command: KnnCommand,
    },
    /// Aggregate human ratings and compare audits.
    Metrics {
        #[command(subcommand)]
        command: MetricsCommand,
    },
    /// Export rating tasks for the annotation tool, optionally serving them.
    ServeAnnotationExport {
        #[command(flatten)]
        bench: BenchArgs,
        /// Stored elaborations as SYSTEM=PATH (systems: macaw_probe, dream).
        #[arg(long = "se", value_name = "SYSTEM=PATH", required = true)]
        se: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Serve tasks and collect annotations over HTTP on this address.
        #[arg(long, value_name = "ADDR")]
        serve: Option<String>,
        /// Where served annotations are appended.
        #[arg(long)]
        annotations: Option<PathBuf>,
        /// Stop after this many requests.
        #[arg(long)]
        max_requests: Option<usize>,
    },
}

#[derive(Debug, Subcommand)]
enum KnnCommand {
    /// Embed a training set into an index file.
    Build {
        #[command(flatten)]
        bench: BenchArgs,
        #[command(flatten)]
        se: KnnSeArgs,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        emb_cache: Option<PathBuf>,
    },
    /// Classify one text.
    Classify {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        emb_cache: Option<PathBuf>,
    },
    /// Classify a test set and report accuracy.
    Evaluate {
        #[arg(long)]
        index: PathBuf,
        #[command(flatten)]
        bench: BenchArgs,
        #[command(flatten)]
        se: KnnSeArgs,
        #[arg(long)]
        k: Option<usize>,
        /// Neighbour listing per query (JSONL).
        #[arg(long)]
        dump: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        emb_cache: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct KnnSeArgs {
    /// Append generated elaborations to every encoded text.
    #[arg(long)]
    with_se: bool,
    /// Use stored elaborations instead of generating them (implies --with-se).
    #[arg(long)]
    se: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum MetricsCommand {
    /// Per-item scores and per-system summaries from annotation JSONL.
    Aggregate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// How correctness moved between two audits of the same examples.
    Delta {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        with_se: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// ethics_cs_test, ethics_cs_test_hard, codah_all, or social_iqa_test.
    #[arg(long)]
    dataset: DatasetTag,
    #[arg(long = "input", required = true)]
    inputs: Vec<PathBuf>,
    /// Social IQA label file, one 1-based label per line.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Drop ETHICS rows marked as long.
    #[arg(long)]
    exclude_long: bool,
}

impl BenchArgs {
    fn config(&self) -> BenchmarkConfig {
        BenchmarkConfig {
            dataset: self.dataset,
            paths: self.inputs.clone(),
            labels_path: self.labels.clone(),
            exclude_long_context: self.exclude_long,
        }
    }

    fn files(&self) -> Vec<PathBuf> {
        self.inputs.iter().cloned().chain(self.labels.clone()).collect()
    }
}

/// What a finished command produced.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub summary: Value,
    pub run_id: String,
}

struct Done {
    outputs: Vec<PathBuf>,
    summary: Value,
}

impl Done {
    fn new(outputs: Vec<PathBuf>, summary: Value) -> Self {
        Done { outputs, summary }
    }
}

/// Parses `argv` (including the program name), runs the command, prints its
/// JSON summary to stdout or a JSON error to stderr, and returns the exit code.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp
                | ErrorKind::DisplayVersion
                | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = e.print();
                    if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                        2
                    } else {
                        0
                    }
                }
                ErrorKind::InvalidSubcommand => CliError::new("unknown_command", e.to_string()).report(),
                _ => CliError::new("usage", e.to_string()).report(),
            };
        }
    };
    match execute(cli, &argv, &|k| std::env::var(k).ok()) {
        Ok(out) => {
            use std::io::Write;
            // a closed pipe (e.g. `| head`) is not a command failure
            let _ = writeln!(
                std::io::stdout(),
                "{}",
                serde_json::to_string_pretty(&out.summary).expect("json")
            );
            0
        }
        Err(e) => e.report(),
    }
}

/// Like [`dispatch`] but returns the outcome, with environment lookups going
/// through `env`.
pub fn run(argv: &[&str], env: &dyn Fn(&str) -> Option<String>) -> Result<Outcome, CliError> {
    let argv: Vec<String> = argv.iter().map(|s| s.to_string()).collect();
    let cli = Cli::try_parse_from(&argv).map_err(|e| CliError::new("usage", e.to_string()))?;
    execute(cli, &argv, env)
}

fn execute(cli: Cli, argv: &[String], env: &dyn Fn(&str) -> Option<String>) -> Result<Outcome, CliError> {
    let mut config = Config::load(cli.config.as_deref(), env)?;
    if let Some(dir) = &cli.runs_dir {
        config.runs.data_dir = dir.clone();
    }
    if let Some(url) = &cli.gen_url {
        config.gateway.gen_url = Some(url.clone());
    }
    if let Some(url) = &cli.emb_url {
        config.gateway.emb_url = Some(url.clone());
    }
    if cli.stub {
        config.gateway.backend = Some(BackendKind::Stub);
        config.gateway.emb_url = None;
    }
    let (name, inputs) = plan(&cli.command)?;
    let mut manifest = RunManifest::begin(name, &argv[1..], &config, &inputs)?;
    let done = match cli.command {
        Command::BuildCorpus { inputs, maps, out } => build_corpus(&inputs, &maps, &out)?,
        Command::Interleave {
            inputs,
            out,
            seed,
            train_fraction,
            dev_out,
        } => interleave(&config, &inputs, &out, seed, train_fraction, dev_out)?,
        Command::Probe {
            bench,
            entities,
            out,
            cache,
        } => {
            let extractor: Arc<dyn EntityExtractor> = match &entities {
                Some(p) => Arc::new(SidecarExtractor::load(p)?),
                None => Arc::new(RuleExtractor::default()),
            };
            elaborate(&config, &bench, ElaborationMode::Probe(extractor), &out, cache)?
        }
        Command::Elaborate { bench, out, cache } => elaborate(&config, &bench, ElaborationMode::Generate, &out, cache)?,
        Command::Answer {
            bench,
            se,
            components,
            audit,
            parallelism,
        } => answer(&config, &bench, se.as_deref(), components, &audit, parallelism)?,
        Command::Score { audit, out } => score(&audit, out)?,
        Command::Knn { command } => knn_command(&config, command)?,
        Command::Metrics { command } => metrics_command(command)?,
        Command::ServeAnnotationExport {
            bench,
            se,
            out,
            serve,
            annotations,
            max_requests,
        } => export_tasks(&bench, &se, &out, serve.as_deref(), annotations, max_requests)?,
    };
    let outputs: Vec<PathBuf> = done.outputs.into_iter().filter(|p| p.exists()).collect();
    manifest.finish(&outputs)?;
    let registry = Registry::new(&config.runs.data_dir);
    let run_id = registry.record(&mut manifest)?;
    let mut summary = done.summary;
    if let Value::Object(m) = &mut summary {
        m.insert("run_id".into(), json!(run_id));
        m.insert("upstream".into(), json!(manifest.upstream));
    }
    Ok(Outcome { summary, run_id })
}

/// Command name and the files it reads, known before it runs.
fn plan(cmd: &Command) -> Result<(&'static str, Vec<PathBuf>), CliError> {
    Ok(match cmd {
        Command::BuildCorpus { inputs, maps, .. } => {
            let mut files: Vec<PathBuf> = Vec::new();
            for spec in inputs.iter().chain(maps) {
                files.push(split_kv(spec)?.1);
            }
            ("build-corpus", files)
        }
        Command::Interleave { inputs, .. } => ("interleave", inputs.clone()),
        Command::Probe { bench, entities, .. } => {
            ("probe", bench.files().into_iter().chain(entities.clone()).collect())
        }
        Command::Elaborate { bench, .. } => ("elaborate", bench.files()),
        Command::Answer { bench, se, .. } => ("answer", bench.files().into_iter().chain(se.clone()).collect()),
        Command::Score { audit, .. } => ("score", vec![audit.clone()]),
        Command::Knn { command } => match command {
            KnnCommand::Build { bench, se, .. } => {
                ("knn build", bench.files().into_iter().chain(se.se.clone()).collect())
            }
            KnnCommand::Classify { index, .. } => ("knn classify", vec![index.clone()]),
            KnnCommand::Evaluate { index, bench, se, .. } => (
                "knn evaluate",
                std::iter::once(index.clone())
                    .chain(bench.files())
                    .chain(se.se.clone())
                    .collect(),
            ),
        },
        Command::Metrics { command } => match command {
            MetricsCommand::Aggregate { input, .. } => ("metrics aggregate", vec![input.clone()]),
            MetricsCommand::Delta { baseline, with_se, .. } => {
                ("metrics delta", vec![baseline.clone(), with_se.clone()])
            }
        },
        Command::ServeAnnotationExport { bench, se, .. } => {
            let mut files = bench.files();
            for spec in se {
                files.push(split_kv(spec)?.1);
            }
            ("serve-annotation-export", files)
        }
    })
}

fn split_kv(spec: &str) -> Result<(String, PathBuf), CliError> {
    spec.split_once('=')
        .filter(|(k, v)| !k.is_empty() && !v.is_empty())
        .map(|(k, v)| (k.to_string(), PathBuf::from(v)))
        .ok_or_else(|| CliError::new("usage", format!("expected KEY=PATH, got `{spec}`")))
}

fn write_json(path: &Path, value: &Value) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("json") + "\n";
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn format_for(path: &Path) -> FileFormat {
    match path.extension().and_then(|e| e.to_str()) {
        Some("tsv") => FileFormat::Tsv,
        Some("jsonl") | Some("json") => FileFormat::Jsonl,
        _ => FileFormat::Csv,
    }
}

fn build_corpus(inputs: &[String], maps: &[String], out: &Path) -> Result<Done, CliError> {
    let mut map_for: Vec<(SourceKind, ColumnMap)> = Vec::new();
    for spec in maps {
        let (kind, path) = split_kv(spec)?;
        map_for.push((kind.parse()?, ColumnMap::load(&path)?));
    }
    let mut records: Vec<TrainingRecord> = Vec::new();
    let mut per_source = serde_json::Map::new();
    for spec in inputs {
        let (kind, path) = split_kv(spec)?;
        let kind: SourceKind = kind.parse()?;
        let map = map_for
            .iter()
            .find(|(k, _)| *k == kind)
            .map(|(_, m)| m.clone())
            .unwrap_or_else(|| ColumnMap {
                format: format_for(&path),
                ..ColumnMap::default()
            });
        let rows = corpus::load_source(kind, &path, &map)?;
        let built = corpus::build(kind, &rows)?;
        let entry = per_source
            .entry(kind.name())
            .or_insert(json!({"rows": 0, "records": 0}));
        entry["rows"] = json!(entry["rows"].as_u64().unwrap_or(0) + rows.len() as u64);
        entry["records"] = json!(entry["records"].as_u64().unwrap_or(0) + built.len() as u64);
        records.extend(built);
    }
    corpus::emit_training_file(&records, out)?;
    Ok(Done::new(
        vec![out.to_path_buf()],
        json!({ "records": records.len(), "by_dimension": dimension_counts(&records), "sources": per_source }),
    ))
}

fn dimension_counts(records: &[TrainingRecord]) -> Value {
    let mut m = serde_json::Map::new();
    for d in Dimension::ALL {
        m.insert(
            d.key().into(),
            json!(records.iter().filter(|r| r.dimension == d).count()),
        );
    }
    Value::Object(m)
}

fn interleave(
    config: &Config,
    inputs: &[PathBuf],
    out: &Path,
    seed: Option<u64>,
    train_fraction: Option<f64>,
    dev_out: Option<PathBuf>,
) -> Result<Done, CliError> {
    let seed = seed.unwrap_or(config.corpus.seed);
    let fraction = train_fraction.unwrap_or(config.corpus.train_fraction);
    let mut records = Vec::new();
    for p in inputs {
        records.extend(corpus::read_training_file(p)?);
    }
    let n = records.len();
    let mut outputs = vec![out.to_path_buf()];
    let (train, dev) = if fraction < 1.0 {
        let dev_out = dev_out.ok_or_else(|| CliError::new("usage", "--train-fraction below 1 needs --dev-out"))?;
        let (train, dev) = corpus::split_stratified(records, fraction, seed)?;
        corpus::emit_training_file(&dev, &dev_out)?;
        outputs.push(dev_out);
        (train, dev.len())
    } else {
        (corpus::interleave(corpus::group_by_dimension(records), seed), 0)
    };
    corpus::emit_training_file(&train, out)?;
    Ok(Done::new(
        outputs,
        json!({ "records": n, "train": train.len(), "dev": dev, "seed": seed }),
    ))
}

fn gateway(config: &Config) -> Result<Gateway, CliError> {
    Ok(config.gateway.build_gateway()?)
}

fn elaborate(
    config: &Config,
    bench: &BenchArgs,
    mode: ElaborationMode,
    out: &Path,
    cache: Option<PathBuf>,
) -> Result<Done, CliError> {
    let examples = qa::load_benchmark(&bench.config())?;
    let mut elaborator = ModelElaborator::new(gateway(config)?, mode);
    if let Some(c) = &cache {
        elaborator = elaborator.with_cache(SeCache::open(c)?);
    }
    let opts = EvalOptions {
        parallelism: config.qa.parallelism,
    };
    let stored = qa::elaborate_examples(&examples, &elaborator, elaborator.source(), opts)
        .map_err(|(id, e)| CliError::new("gateway", format!("elaborating `{id}`: {e}")))?;
    write_jsonl(out, &stored)?;
    let empty = stored.iter().filter(|s| s.se.is_empty()).count();
    let mut outputs = vec![out.to_path_buf()];
    outputs.extend(cache);
    Ok(Done::new(
        outputs,
        json!({ "examples": stored.len(), "empty": empty, "provider": elaborator.id() }),
    ))
}

fn run_summary(r: &RunResult) -> Value {
    json!({ "n": r.n, "correct": r.correct, "accuracy": r.accuracy, "flagged": r.flagged })
}

fn answer(
    config: &Config,
    bench: &BenchArgs,
    se: Option<&Path>,
    components: Option<Vec<Dimension>>,
    audit: &Path,
    parallelism: Option<usize>,
) -> Result<Done, CliError> {
    let examples = qa::load_benchmark(&bench.config())?;
    let gw = gateway(config)?;
    let stored = se.map(StoredElaborations::load).transpose()?;
    let components: Option<BTreeSet<Dimension>> = components.map(|c| c.into_iter().collect());
    let opts = EvalOptions {
        parallelism: parallelism.unwrap_or(config.qa.parallelism),
    };
    let provider = stored.as_ref().map(|s| s as &dyn ElaborationProvider);
    let result = qa::evaluate(&examples, &gw, provider, components.as_ref(), opts);
    qa::write_audit(audit, &result.records)?;
    Ok(Done::new(vec![audit.to_path_buf()], run_summary(&result)))
}

fn score(audit: &Path, out: Option<PathBuf>) -> Result<Done, CliError> {
    let records = qa::read_audit(audit)?;
    let result = RunResult::from_records(records);
    let mut by_dataset = serde_json::Map::new();
    let mut tags: Vec<&str> = result.records.iter().map(|r| r.dataset.as_str()).collect();
    tags.sort_unstable();
    tags.dedup();
    for tag in tags {
        let sub: Vec<_> = result.records.iter().filter(|r| r.dataset == tag).cloned().collect();
        by_dataset.insert(tag.into(), run_summary(&RunResult::from_records(sub)));
    }
    let mut summary = run_summary(&result);
    summary["by_dataset"] = Value::Object(by_dataset);
    let mut outputs = Vec::new();
    if let Some(p) = out {
        write_json(&p, &summary)?;
        outputs.push(p);
    }
    Ok(Done::new(outputs, summary))
}

struct KnnContext<'a> {
    embedder: Arc<dyn Embedder>,
    cached: Option<CachedEmbedder<'a>>,
}

impl KnnContext<'_> {
    fn embedder(&self) -> &dyn Embedder {
        match &self.cached {
            Some(c) => c,
            None => self.embedder.as_ref(),
        }
    }
}

fn se_provider(config: &Config, args: &KnnSeArgs) -> Result<Option<Box<dyn ElaborationProvider>>, CliError> {
    Ok(match (&args.se, args.with_se) {
        (Some(p), _) => Some(Box::new(StoredElaborations::load(p)?)),
        (None, true) => Some(Box::new(ModelElaborator::new(
            gateway(config)?,
            ElaborationMode::Generate,
        ))),
        (None, false) => None,
    })
}

fn knn_command(config: &Config, cmd: KnnCommand) -> Result<Done, CliError> {
    let embedder = config.gateway.build_embedder();
    let open = |cache: &Option<PathBuf>| -> Result<(), CliError> {
        if let Some(p) = cache {
            if let Some(parent) = p.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
            }
        }
        Ok(())
    };
    match cmd {
        KnnCommand::Build {
            bench,
            se,
            index,
            emb_cache,
        } => {
            open(&emb_cache)?;
            let ctx = KnnContext {
                cached: emb_cache
                    .as_deref()
                    .map(|p| CachedEmbedder::open(embedder.as_ref(), p))
                    .transpose()?,
                embedder: embedder.clone(),
            };
            let train = qa::load_benchmark(&bench.config())?;
            let provider = se_provider(config, &se)?;
            let idx = knn::build_index(&train, ctx.embedder(), provider.as_deref())?;
            idx.save(&index)?;
            let mut outputs = vec![index.clone()];
            outputs.extend(emb_cache);
            Ok(Done::new(
                outputs,
                json!({ "points": idx.len(), "dim": idx.dim(), "with_se": idx.with_se() }),
            ))
        }
        KnnCommand::Classify {
            index,
            text,
            k,
            emb_cache,
        } => {
            open(&emb_cache)?;
            let ctx = KnnContext {
                cached: emb_cache
                    .as_deref()
                    .map(|p| CachedEmbedder::open(embedder.as_ref(), p))
                    .transpose()?,
                embedder: embedder.clone(),
            };
            let idx = KnnIndex::load(&index)?;
            let c = idx.classify(&text, ctx.embedder(), k.unwrap_or(config.knn.k))?;
            Ok(Done::new(
                emb_cache.into_iter().collect(),
                json!({ "label": c.label, "neighbors": c.neighbors }),
            ))
        }
        KnnCommand::Evaluate {
            index,
            bench,
            se,
            k,
            dump,
            report,
            emb_cache,
        } => {
            open(&emb_cache)?;
            let ctx = KnnContext {
                cached: emb_cache
                    .as_deref()
                    .map(|p| CachedEmbedder::open(embedder.as_ref(), p))
                    .transpose()?,
                embedder: embedder.clone(),
            };
            let idx = KnnIndex::load(&index)?;
            let want_se = se.with_se || se.se.is_some();
            if want_se != idx.with_se() {
                return Err(CliError::new(
                    "usage",
                    format!(
                        "index {} was built {} elaborations; pass the same setting when evaluating",
                        index.display(),
                        if idx.with_se() { "with" } else { "without" }
                    ),
                ));
            }
            let test = qa::load_benchmark(&bench.config())?;
            let provider = se_provider(config, &se)?;
            let k = k.unwrap_or(config.knn.k);
            let rep = knn::evaluate_knn(&idx, &test, ctx.embedder(), provider.as_deref(), k)?;
            let mut outputs = Vec::new();
            if let Some(p) = &dump {
                write_jsonl(p, &rep.dumps)?;
                outputs.push(p.clone());
            }
            let summary = json!({ "k": rep.k, "with_se": rep.with_se, "n": rep.n, "correct": rep.correct, "accuracy": rep.accuracy });
            if let Some(p) = &report {
                write_json(p, &summary)?;
                outputs.push(p.clone());
            }
            outputs.extend(emb_cache);
            Ok(Done::new(outputs, summary))
        }
    }
}

fn metrics_command(cmd: MetricsCommand) -> Result<Done, CliError> {
    match cmd {
        MetricsCommand::Aggregate { input, out } => {
            let annotations: Vec<AnnotationRecord> = read_jsonl(&input)?;
            let items = metrics::aggregate_all(&annotations)?;
            let mut systems = Vec::new();
            for tag in [SystemTag::MacawProbe, SystemTag::Dream] {
                if items.iter().any(|i| i.system == tag) {
                    systems.push(metrics::corpus_report(&items, Some(tag))?);
                }
            }
            let report = json!({ "items": items, "systems": systems });
            let mut outputs = Vec::new();
            if let Some(p) = out {
                write_json(&p, &report)?;
                outputs.push(p);
            }
            Ok(Done::new(outputs, json!({ "items": items.len(), "systems": systems })))
        }
        MetricsCommand::Delta { baseline, with_se, out } => {
            let report = metrics::prediction_change_report(&qa::read_audit(&baseline)?, &qa::read_audit(&with_se)?)?;
            let value = serde_json::to_value(&report).expect("json");
            let mut outputs = Vec::new();
            if let Some(p) = out {
                write_json(&p, &value)?;
                outputs.push(p);
            }
            Ok(Done::new(outputs, value))
        }
    }
}

fn export_tasks(
    bench: &BenchArgs,
    se: &[String],
    out: &Path,
    serve_addr: Option<&str>,
    annotations: Option<PathBuf>,
    max_requests: Option<usize>,
) -> Result<Done, CliError> {
    let examples = qa::load_benchmark(&bench.config())?;
    let mut elaborations: Vec<(SystemTag, StoredElaboration)> = Vec::new();
    for spec in se {
        let (system, path) = split_kv(spec)?;
        let system: SystemTag = serde_json::from_value(json!(system)).map_err(|_| {
            CliError::new(
                "usage",
                format!("unknown system `{system}`; expected macaw_probe or dream"),
            )
        })?;
        let stored: Vec<StoredElaboration> = read_jsonl(&path)?;
        elaborations.extend(stored.into_iter().filter(|s| !s.se.is_empty()).map(|s| (system, s)));
    }
    let tasks = tasks::build_tasks(&examples, &elaborations)?;
    write_jsonl(out, &tasks)?;
    let mut outputs = vec![out.to_path_buf()];
    let mut summary = json!({ "tasks": tasks.len() });
    if let Some(addr) = serve_addr {
        let annotations = annotations.unwrap_or_else(|| out.with_file_name("annotations.jsonl"));
        let listener =
            std::net::TcpListener::bind(addr).map_err(|e| CliError::new("io", format!("bind {addr}: {e}")))?;
        eprintln!(
            "serving {} tasks on http://{}",
            tasks.len(),
            listener.local_addr().map_err(|e| CliError::new("io", e.to_string()))?
        );
        let stats =
            serve::serve(listener, out, &annotations, max_requests).map_err(|e| CliError::new("io", e.to_string()))?;
        summary["accepted_annotations"] = json!(stats.accepted);
        outputs.push(annotations);
    }
    Ok(Done::new(outputs, summary))
}
