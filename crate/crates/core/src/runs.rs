//! Run manifests, the append-only run registry, and layered configuration.
//!
//! Every command invocation records which files it read and wrote (with
//! SHA-256 digests), the effective configuration, and timestamps. A run whose
//! input digest equals an earlier run's output digest is linked to it as
//! upstream, so a pipeline forms a chain through the registry.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::GatewayConfig;
use crate::jsonl::file_digest;

pub const ENV_RUNS_DIR: &str = "RUNS_DIR";
pub const REGISTRY_FILE: &str = "registry.jsonl";
pub const DEFAULT_RUNS_DIR: &str = "runs";

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{path}: {detail}")]
    Io { path: PathBuf, detail: String },
    #[error(
        "{path}: registry line {line} is unreadable ({detail}); move the file aside or delete that line to recover"
    )]
    CorruptRegistry { path: PathBuf, line: usize, detail: String },
    #[error("config: {0}")]
    Config(String),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> RunError {
    RunError::Io {
        path: path.to_path_buf(),
        detail: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunsSection {
    pub data_dir: PathBuf,
}

impl Default for RunsSection {
    fn default() -> Self {
        RunsSection {
            data_dir: PathBuf::from(DEFAULT_RUNS_DIR),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub seed: u64,
    pub train_fraction: f64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            seed: 13,
            train_fraction: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QaSection {
    pub parallelism: usize,
}

impl Default for QaSection {
    fn default() -> Self {
        QaSection { parallelism: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnnSection {
    pub k: usize,
}

impl Default for KnnSection {
    fn default() -> Self {
        KnnSection { k: 5 }
    }
}

/// Whole-tool configuration. Precedence, lowest first: defaults, config file,
/// environment, command-line flags (applied by the caller).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub runs: RunsSection,
    pub gateway: GatewayConfig,
    pub corpus: CorpusSection,
    pub qa: QaSection,
    pub knn: KnnSection,
}

impl Config {
    /// Reads a `.toml` or `.json` file.
    pub fn from_file(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let parsed = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).map_err(|e| e.to_string()),
            _ => toml::from_str(&text).map_err(|e| e.to_string()),
        };
        parsed.map_err(|e| RunError::Config(format!("{}: {e}", path.display())))
    }

    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<(), RunError> {
        if let Some(dir) = lookup(ENV_RUNS_DIR).filter(|v| !v.is_empty()) {
            self.runs.data_dir = PathBuf::from(dir);
        }
        self.gateway
            .apply_env(&lookup)
            .map_err(|e| RunError::Config(e.to_string()))
    }

    /// Defaults, then `file` if given, then the environment.
    pub fn load(file: Option<&Path>, lookup: impl Fn(&str) -> Option<String>) -> Result<Self, RunError> {
        let mut cfg = match file {
            Some(p) => Config::from_file(p)?,
            None => Config::default(),
        };
        cfg.apply_env(lookup)?;
        Ok(cfg)
    }

    pub fn snapshot(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self, RunError> {
        Ok(FileDigest {
            path: path.to_path_buf(),
            sha256: file_digest(path).map_err(|e| io_err(path, e))?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub argv: Vec<String>,
    pub config_snapshot: String,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub started: String,
    pub finished: Option<String>,
    pub tool_version: String,
    /// Earlier runs that produced one of this run's inputs.
    pub upstream: Vec<String>,
}

impl RunManifest {
    /// Starts a manifest, digesting inputs now so later mutation cannot leak
    /// into the record.
    pub fn begin(command: &str, argv: &[String], config: &Config, inputs: &[PathBuf]) -> Result<Self, RunError> {
        Ok(RunManifest {
            run_id: uuid::Uuid::new_v4().to_string(),
            command: command.into(),
            argv: argv.to_vec(),
            config_snapshot: config.snapshot(),
            inputs: inputs.iter().map(|p| FileDigest::of(p)).collect::<Result<_, _>>()?,
            outputs: Vec::new(),
            started: now(),
            finished: None,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            upstream: Vec::new(),
        })
    }

    /// Digests `outputs` (which must exist) and stamps the finish time.
    pub fn finish(&mut self, outputs: &[PathBuf]) -> Result<(), RunError> {
        self.outputs = outputs.iter().map(|p| FileDigest::of(p)).collect::<Result<_, _>>()?;
        self.finished = Some(now());
        Ok(())
    }

    pub fn output_digest(&self, path: &Path) -> Option<&str> {
        self.outputs.iter().find(|d| d.path == path).map(|d| d.sha256.as_str())
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Append-only JSONL of manifests in a data directory.
#[derive(Debug, Clone)]
pub struct Registry {
    dir: PathBuf,
}

impl Registry {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Registry { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self) -> PathBuf {
        self.dir.join(REGISTRY_FILE)
    }

    pub fn load(&self) -> Result<Vec<RunManifest>, RunError> {
        let path = self.path();
        let file = match File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(io_err(&path, e)),
        };
        file.lock_shared().map_err(|e| io_err(&path, e))?;
        let mut out = Vec::new();
        for (i, line) in BufReader::new(&file).lines().enumerate() {
            let line = line.map_err(|e| RunError::CorruptRegistry {
                path: path.clone(),
                line: i + 1,
                detail: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line).map_err(|e| RunError::CorruptRegistry {
                path: path.clone(),
                line: i + 1,
                detail: e.to_string(),
            })?);
        }
        Ok(out)
    }

    /// Links upstream runs by digest, then appends under an exclusive lock.
    /// Returns the stored run id.
    pub fn record(&self, manifest: &mut RunManifest) -> Result<String, RunError> {
        if manifest.finished.is_none() {
            return Err(RunError::Config(format!("run {} was not finished", manifest.run_id)));
        }
        for out in &manifest.outputs {
            if !out.path.exists() {
                return Err(io_err(&out.path, "output missing at record time"));
            }
        }
        std::fs::create_dir_all(&self.dir).map_err(|e| io_err(&self.dir, e))?;
        let path = self.path();
        let mut file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(&path)
            .map_err(|e| io_err(&path, e))?;
        file.lock().map_err(|e| io_err(&path, e))?;
        let history = self.load_unlocked(&file, &path)?;
        manifest.upstream = upstream_of(manifest, &history);
        let line = serde_json::to_string(manifest).expect("manifest serializes");
        writeln!(file, "{line}").map_err(|e| io_err(&path, e))?;
        file.flush().map_err(|e| io_err(&path, e))?;
        Ok(manifest.run_id.clone())
    }

    fn load_unlocked(&self, file: &File, path: &Path) -> Result<Vec<RunManifest>, RunError> {
        let mut out = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| io_err(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line).map_err(|e| RunError::CorruptRegistry {
                path: path.to_path_buf(),
                line: i + 1,
                detail: e.to_string(),
            })?);
        }
        Ok(out)
    }
}

/// Most recent earlier run producing each input digest, deduplicated, in
/// input order.
pub fn upstream_of(manifest: &RunManifest, history: &[RunManifest]) -> Vec<String> {
    let mut producer: BTreeMap<&str, &str> = BTreeMap::new();
    for run in history {
        for out in &run.outputs {
            producer.insert(out.sha256.as_str(), run.run_id.as_str());
        }
    }
    let mut ups: Vec<String> = Vec::new();
    for input in &manifest.inputs {
        if let Some(id) = producer.get(input.sha256.as_str()) {
            if !ups.iter().any(|u| u == id) {
                ups.push(id.to_string());
            }
        }
    }
    ups
}
