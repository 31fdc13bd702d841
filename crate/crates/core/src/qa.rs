//! Benchmark loading, context injection, answer selection and accuracy.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{elaborate_situation, Gateway, GatewayError, GenerationRequest};
use crate::jsonl::{read_jsonl, sha256_hex, write_jsonl, JsonlError};
use crate::probe::{probe_elaboration, EntityExtractor};
use crate::scene::{serialize_se, Dimension, SceneElaboration, SeSource, SituatedExample, StoredElaboration};

/// Question text attached to every ETHICS commonsense item.
pub const ETHICS_QUESTION: &str = "Reaction: this is";
pub const ETHICS_OPTIONS: [&str; 2] = ["wrong", "not wrong"];

#[derive(Debug, Error)]
pub enum QaError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {detail}")]
    Schema { path: PathBuf, line: usize, detail: String },
    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

fn schema(path: &Path, line: usize, detail: impl Into<String>) -> QaError {
    QaError::Schema {
        path: path.to_path_buf(),
        line,
        detail: detail.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetTag {
    EthicsCsTest,
    EthicsCsTestHard,
    CodahAll,
    SocialIqaTest,
}

impl DatasetTag {
    pub const ALL: [DatasetTag; 4] = [
        DatasetTag::EthicsCsTest,
        DatasetTag::EthicsCsTestHard,
        DatasetTag::CodahAll,
        DatasetTag::SocialIqaTest,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DatasetTag::EthicsCsTest => "ethics_cs_test",
            DatasetTag::EthicsCsTestHard => "ethics_cs_test_hard",
            DatasetTag::CodahAll => "codah_all",
            DatasetTag::SocialIqaTest => "social_iqa_test",
        }
    }

    pub fn expected_options(self) -> usize {
        match self {
            DatasetTag::EthicsCsTest | DatasetTag::EthicsCsTestHard => 2,
            DatasetTag::SocialIqaTest => 3,
            DatasetTag::CodahAll => 4,
        }
    }

    pub fn is_ethics(self) -> bool {
        matches!(self, DatasetTag::EthicsCsTest | DatasetTag::EthicsCsTestHard)
    }
}

impl fmt::Display for DatasetTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetTag {
    type Err = QaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DatasetTag::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| QaError::UnknownDataset(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub dataset: DatasetTag,
    /// One or more files; CODAH "all" is train+dev+test concatenated.
    pub paths: Vec<PathBuf>,
    /// Social IQA label file (one 1-based label per line), if labels are not inline.
    #[serde(default)]
    pub labels_path: Option<PathBuf>,
    /// Drop ETHICS rows whose `is_short` flag is false (long Reddit posts).
    #[serde(default)]
    pub exclude_long_context: bool,
}

impl BenchmarkConfig {
    pub fn new(dataset: DatasetTag, paths: Vec<PathBuf>) -> Self {
        BenchmarkConfig {
            dataset,
            paths,
            labels_path: None,
            exclude_long_context: false,
        }
    }
}

/// A parsed input row: its 1-based line number and column → value map.
struct Row {
    line: usize,
    fields: HashMap<String, serde_json::Value>,
}

impl Row {
    fn text(&self, key: &str) -> Option<String> {
        match self.fields.get(key)? {
            serde_json::Value::String(s) => Some(s.clone()),
            serde_json::Value::Null => None,
            other => Some(other.to_string()),
        }
    }

    fn int(&self, key: &str) -> Option<i64> {
        match self.fields.get(key)? {
            serde_json::Value::Number(n) => n.as_i64(),
            serde_json::Value::String(s) => s.trim().parse().ok(),
            _ => None,
        }
    }
}

fn is_jsonl(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "jsonl" || e == "json")
}

/// Reads JSONL objects, or delimited text (`.tsv` tab, otherwise comma).
/// Headerless files get columns named "0", "1", ...
fn read_rows(path: &Path, has_headers: bool) -> Result<Vec<Row>, QaError> {
    let io = |e| QaError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    if is_jsonl(path) {
        let text = std::fs::read_to_string(path).map_err(io)?;
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: HashMap<String, serde_json::Value> =
                serde_json::from_str(line).map_err(|e| schema(path, i + 1, e.to_string()))?;
            rows.push(Row { line: i + 1, fields });
        }
        return Ok(rows);
    }
    let tsv = path.extension().is_some_and(|e| e == "tsv");
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_headers)
        .delimiter(if tsv { b'\t' } else { b',' })
        .quoting(!tsv)
        .flexible(true)
        .from_path(path)
        .map_err(|e| schema(path, 0, e.to_string()))?;
    let headers: Vec<String> = if has_headers {
        reader
            .headers()
            .map_err(|e| schema(path, 1, e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect()
    } else {
        Vec::new()
    };
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            schema(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let fields = rec
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let key = headers.get(i).cloned().unwrap_or_else(|| i.to_string());
                (key, serde_json::Value::String(v.to_string()))
            })
            .collect();
        rows.push(Row { line, fields });
    }
    Ok(rows)
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "data".into(), |s| s.to_string_lossy().into_owned())
}

fn row_id(row: &Row, path: &Path, n: usize) -> String {
    row.text("id").unwrap_or_else(|| format!("{}:{}", file_stem(path), n))
}

fn parse_flag(v: &str) -> Option<bool> {
    match v.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

fn load_ethics(cfg: &BenchmarkConfig, path: &Path, out: &mut Vec<SituatedExample>) -> Result<(), QaError> {
    for (n, row) in read_rows(path, true)?.into_iter().enumerate() {
        let label = row
            .int("label")
            .filter(|l| *l == 0 || *l == 1)
            .ok_or_else(|| schema(path, row.line, "label must be 0 or 1"))?;
        let input = row
            .text("input")
            .filter(|s| !s.trim().is_empty())
            .ok_or_else(|| schema(path, row.line, "missing `input`"))?;
        if cfg.exclude_long_context {
            let short = row
                .text("is_short")
                .as_deref()
                .and_then(parse_flag)
                .ok_or_else(|| schema(path, row.line, "excluding long contexts needs an `is_short` column"))?;
            if !short {
                continue;
            }
        }
        out.push(SituatedExample {
            id: row_id(&row, path, n + 1),
            situation: input.trim().to_string(),
            question: ETHICS_QUESTION.to_string(),
            options: ETHICS_OPTIONS.iter().map(|s| s.to_string()).collect(),
            // label 1 = wrong = option 0
            gold_index: if label == 1 { 0 } else { 1 },
            dataset_tag: cfg.dataset.name().to_string(),
        });
    }
    Ok(())
}

fn load_codah(cfg: &BenchmarkConfig, path: &Path, out: &mut Vec<SituatedExample>) -> Result<(), QaError> {
    let jsonl = is_jsonl(path);
    for (n, row) in read_rows(path, false)?.into_iter().enumerate() {
        let (prompt, options, label) = if jsonl {
            let options = match row.fields.get("candidates") {
                Some(serde_json::Value::Array(xs)) => xs
                    .iter()
                    .map(|x| x.as_str().map(str::to_string))
                    .collect::<Option<Vec<_>>>(),
                _ => None,
            }
            .ok_or_else(|| schema(path, row.line, "`candidates` must be a list of strings"))?;
            (row.text("prompt"), options, row.int("label"))
        } else {
            // category, prompt, four candidates, answer index
            if row.fields.len() != 7 {
                return Err(schema(
                    path,
                    row.line,
                    format!("expected 7 columns, found {}", row.fields.len()),
                ));
            }
            let options = (2..6).filter_map(|i| row.text(&i.to_string())).collect();
            (row.text("1"), options, row.int("6"))
        };
        let prompt = prompt
            .filter(|p| !p.trim().is_empty())
            .ok_or_else(|| schema(path, row.line, "missing prompt"))?;
        let gold = label
            .and_then(|l| usize::try_from(l).ok())
            .ok_or_else(|| schema(path, row.line, "missing or negative label"))?;
        out.push(SituatedExample {
            id: row_id(&row, path, n + 1),
            situation: prompt.trim().to_string(),
            question: String::new(),
            options: options.into_iter().map(|o| o.trim().to_string()).collect(),
            gold_index: gold,
            dataset_tag: cfg.dataset.name().to_string(),
        });
    }
    Ok(())
}

fn load_social_iqa(
    cfg: &BenchmarkConfig,
    path: &Path,
    labels: &mut Option<std::vec::IntoIter<(usize, String)>>,
    out: &mut Vec<SituatedExample>,
) -> Result<(), QaError> {
    for (n, row) in read_rows(path, true)?.into_iter().enumerate() {
        let get = |k: &str| {
            row.text(k)
                .filter(|s| !s.trim().is_empty())
                .ok_or_else(|| schema(path, row.line, format!("missing `{k}`")))
        };
        let context = get("context")?;
        let question = get("question")?;
        let options = vec![get("answerA")?, get("answerB")?, get("answerC")?];
        let label = match labels.as_mut() {
            Some(it) => {
                let (line, raw) = it
                    .next()
                    .ok_or_else(|| schema(path, row.line, "label file has fewer lines than the data"))?;
                raw.trim().parse::<i64>().map_err(|_| {
                    schema(
                        cfg.labels_path.as_deref().unwrap_or(path),
                        line,
                        "label is not an integer",
                    )
                })?
            }
            None => row
                .int("label")
                .ok_or_else(|| schema(path, row.line, "missing `label`"))?,
        };
        if !(1..=3).contains(&label) {
            return Err(schema(path, row.line, format!("label {label} not in 1..=3")));
        }
        out.push(SituatedExample {
            id: row_id(&row, path, n + 1),
            situation: context.trim().to_string(),
            question: question.trim().to_string(),
            options: options.into_iter().map(|o| o.trim().to_string()).collect(),
            gold_index: (label - 1) as usize,
            dataset_tag: cfg.dataset.name().to_string(),
        });
    }
    Ok(())
}

/// Loads and normalises a benchmark. An empty result is a schema error.
pub fn load_benchmark(cfg: &BenchmarkConfig) -> Result<Vec<SituatedExample>, QaError> {
    let mut out = Vec::new();
    let mut labels = match &cfg.labels_path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| QaError::Io {
                path: p.clone(),
                source: e,
            })?;
            let lines: Vec<(usize, String)> = text
                .lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty())
                .map(|(i, l)| (i + 1, l.to_string()))
                .collect();
            Some(lines.into_iter())
        }
        None => None,
    };
    for path in &cfg.paths {
        if !path.exists() {
            return Err(QaError::Io {
                path: path.clone(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
            });
        }
        let before = out.len();
        match cfg.dataset {
            DatasetTag::EthicsCsTest | DatasetTag::EthicsCsTestHard => load_ethics(cfg, path, &mut out)?,
            DatasetTag::CodahAll => load_codah(cfg, path, &mut out)?,
            DatasetTag::SocialIqaTest => load_social_iqa(cfg, path, &mut labels, &mut out)?,
        }
        for ex in &out[before..] {
            let expected = cfg.dataset.expected_options();
            if ex.options.len() != expected {
                return Err(schema(
                    path,
                    0,
                    format!("{}: {} options, expected {expected}", ex.id, ex.options.len()),
                ));
            }
            ex.validate().map_err(|e| schema(path, 0, format!("{}: {e}", ex.id)))?;
        }
    }
    if out.is_empty() {
        let path = cfg.paths.first().cloned().unwrap_or_default();
        return Err(schema(&path, 0, "no examples"));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = out.iter().find(|e| !seen.insert(e.id.as_str())) {
        return Err(schema(&cfg.paths[0], 0, format!("duplicate example id `{}`", dup.id)));
    }
    Ok(out)
}

/// The text a model sees as the question: situation, then question text.
pub fn question_text(example: &SituatedExample) -> String {
    if example.question.trim().is_empty() {
        example.situation.clone()
    } else {
        format!("{} {}", example.situation, example.question)
    }
}

/// Builds the QA request, with the serialized elaboration as context when non-empty.
pub fn attach_context(example: &SituatedExample, se: Option<&SceneElaboration>) -> GenerationRequest {
    let mut req = GenerationRequest::new(question_text(example))
        .expect("situations are non-empty")
        .with_options(example.options.clone())
        .expect("examples have at least two options");
    if let Some(se) = se {
        req = req.with_context(serialize_se(se));
    }
    req
}

fn strip_option_label(s: &str) -> &str {
    let t = s.trim_start();
    let b = t.as_bytes();
    // "(a) ...", "a) ...", "a. ...", "a: ..."
    if b.len() >= 3 && b[0] == b'(' && b[1].is_ascii_alphabetic() && b[2] == b')' {
        return &t[3..];
    }
    if b.len() >= 2
        && b[0].is_ascii_alphabetic()
        && matches!(b[1], b')' | b'.' | b':')
        && (b.len() == 2 || b[2] == b' ')
    {
        return &t[2..];
    }
    t
}

/// Lower-cases, drops an option-letter prefix and punctuation, collapses spaces.
pub fn normalize_answer(s: &str) -> String {
    let s = strip_option_label(s).to_lowercase();
    s.chars()
        .map(|c| {
            if c.is_alphanumeric() || c.is_whitespace() {
                c
            } else {
                ' '
            }
        })
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// SQuAD-style token F1 with multiset overlap.
pub fn token_f1(a: &str, b: &str) -> f64 {
    let ta: Vec<&str> = a.split_whitespace().collect();
    let tb: Vec<&str> = b.split_whitespace().collect();
    if ta.is_empty() || tb.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &tb {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0;
    for t in &ta {
        if let Some(c) = counts.get_mut(t).filter(|c| **c > 0) {
            *c -= 1;
            common += 1;
        }
    }
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / ta.len() as f64;
    let r = common as f64 / tb.len() as f64;
    2.0 * p * r / (p + r)
}

/// Maps free model output to an option index.
///
/// An exact match after [`normalize_answer`] wins; otherwise the best token
/// F1; ties go to the lowest index.
pub fn select_answer(model_output: &str, options: &[String]) -> usize {
    let out = normalize_answer(model_output);
    let normalized: Vec<String> = options.iter().map(|o| normalize_answer(o)).collect();
    if let Some(i) = normalized.iter().position(|o| *o == out) {
        return i;
    }
    let mut best = (0, 0.0);
    for (i, o) in normalized.iter().enumerate() {
        let f = token_f1(&out, o);
        if f > best.1 {
            best = (i, f);
        }
    }
    best.0
}

pub type ProviderError = Box<dyn std::error::Error + Send + Sync>;

/// Supplies an elaboration for an example.
pub trait ElaborationProvider: Send + Sync {
    fn elaborate(&self, example: &SituatedExample) -> Result<SceneElaboration, ProviderError>;
    fn id(&self) -> String;
}

/// Elaborations precomputed into a stored-elaborations file, looked up by example id.
#[derive(Debug, Clone, Default)]
pub struct StoredElaborations {
    by_id: HashMap<String, SceneElaboration>,
    origin: String,
}

impl StoredElaborations {
    pub fn load(path: &Path) -> Result<Self, QaError> {
        let recs: Vec<StoredElaboration> = read_jsonl(path)?;
        Ok(Self::from_records(recs, path.display().to_string()))
    }

    pub fn from_records(recs: Vec<StoredElaboration>, origin: impl Into<String>) -> Self {
        StoredElaborations {
            by_id: recs.into_iter().map(|r| (r.id, r.se)).collect(),
            origin: origin.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

impl ElaborationProvider for StoredElaborations {
    fn elaborate(&self, example: &SituatedExample) -> Result<SceneElaboration, ProviderError> {
        self.by_id
            .get(&example.id)
            .cloned()
            .ok_or_else(|| format!("no stored elaboration for `{}`", example.id).into())
    }

    fn id(&self) -> String {
        format!("stored:{}", self.origin)
    }
}

/// On-disk elaboration cache keyed by (situation, provider id).
///
/// Each line is `{"key": <sha256>, "se": {...}}`; new entries are appended.
#[derive(Debug)]
pub struct SeCache {
    path: PathBuf,
    entries: Mutex<HashMap<String, SceneElaboration>>,
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    key: String,
    se: SceneElaboration,
}

impl SeCache {
    pub fn open(path: &Path) -> Result<Self, QaError> {
        let entries = if path.exists() {
            read_jsonl::<CacheLine>(path)?
                .into_iter()
                .map(|l| (l.key, l.se))
                .collect()
        } else {
            HashMap::new()
        };
        Ok(SeCache {
            path: path.to_path_buf(),
            entries: Mutex::new(entries),
        })
    }

    pub fn key(provider_id: &str, situation: &str) -> String {
        sha256_hex(format!("{provider_id}\n{situation}").as_bytes())
    }

    pub fn get(&self, key: &str) -> Option<SceneElaboration> {
        self.entries.lock().unwrap_or_else(|e| e.into_inner()).get(key).cloned()
    }

    pub fn insert(&self, key: String, se: SceneElaboration) -> Result<(), QaError> {
        let mut entries = self.entries.lock().unwrap_or_else(|e| e.into_inner());
        if entries.contains_key(&key) {
            return Ok(());
        }
        let line = serde_json::to_string(&CacheLine {
            key: key.clone(),
            se: se.clone(),
        })
        .expect("serializable");
        let io = |e| QaError::Io {
            path: self.path.clone(),
            source: e,
        };
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(io)?;
        writeln!(f, "{line}").map_err(io)?;
        entries.insert(key, se);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// How a generated elaboration is obtained from the model.
#[derive(Clone)]
pub enum ElaborationMode {
    /// One `[SITUATION] ... [QUERY] <keyword>` call per dimension.
    Generate,
    /// The probing questions, asked with the situation as context.
    Probe(Arc<dyn EntityExtractor>),
}

/// Elaborations produced by a model through the gateway, optionally cached.
pub struct ModelElaborator {
    gateway: Gateway,
    mode: ElaborationMode,
    cache: Option<SeCache>,
}

impl ModelElaborator {
    pub fn new(gateway: Gateway, mode: ElaborationMode) -> Self {
        ModelElaborator {
            gateway,
            mode,
            cache: None,
        }
    }

    pub fn with_cache(mut self, cache: SeCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn source(&self) -> SeSource {
        match self.mode {
            ElaborationMode::Generate => SeSource::Dream,
            ElaborationMode::Probe(_) => SeSource::Probe,
        }
    }

    fn compute(&self, example: &SituatedExample) -> Result<SceneElaboration, ProviderError> {
        Ok(match &self.mode {
            ElaborationMode::Generate => elaborate_situation(&self.gateway, &example.situation)?,
            ElaborationMode::Probe(extractor) => {
                probe_elaboration(&self.gateway, extractor.as_ref(), &example.id, &example.situation)?
            }
        })
    }
}

impl ElaborationProvider for ModelElaborator {
    fn elaborate(&self, example: &SituatedExample) -> Result<SceneElaboration, ProviderError> {
        let Some(cache) = &self.cache else {
            return self.compute(example);
        };
        let key = SeCache::key(&self.id(), &example.situation);
        if let Some(se) = cache.get(&key) {
            return Ok(se);
        }
        let se = self.compute(example)?;
        cache.insert(key, se.clone())?;
        Ok(se)
    }

    fn id(&self) -> String {
        let mode = match self.mode {
            ElaborationMode::Generate => "generate",
            ElaborationMode::Probe(_) => "probe",
        };
        format!("{mode}:{}", self.gateway.id())
    }
}

/// One line of the audit trail.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub id: String,
    pub dataset: String,
    pub chosen: Option<usize>,
    pub gold: usize,
    pub correct: bool,
    pub se: Option<String>,
    pub components: Option<Vec<Dimension>>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub records: Vec<AuditRecord>,
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Examples whose gateway or elaboration call failed (counted as incorrect).
    pub flagged: usize,
}

impl RunResult {
    pub fn from_records(records: Vec<AuditRecord>) -> Self {
        let n = records.len();
        let correct = records.iter().filter(|r| r.correct).count();
        let flagged = records.iter().filter(|r| r.error.is_some()).count();
        RunResult {
            accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
            records,
            n,
            correct,
            flagged,
        }
    }
}

/// Normalises a component subset: the full set means "no filter".
pub fn normalize_components(components: Option<&BTreeSet<Dimension>>) -> Option<BTreeSet<Dimension>> {
    components.filter(|c| c.len() < Dimension::ALL.len()).cloned()
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    /// Examples evaluated concurrently.
    pub parallelism: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { parallelism: 4 }
    }
}

fn evaluate_one(
    ex: &SituatedExample,
    gateway: &Gateway,
    se_source: Option<&dyn ElaborationProvider>,
    components: Option<&BTreeSet<Dimension>>,
) -> AuditRecord {
    let mut rec = AuditRecord {
        id: ex.id.clone(),
        dataset: ex.dataset_tag.clone(),
        chosen: None,
        gold: ex.gold_index,
        correct: false,
        se: None,
        components: components.map(|c| c.iter().copied().collect()),
        error: None,
    };
    let se = match se_source.map(|p| p.elaborate(ex)) {
        None => None,
        Some(Ok(se)) => Some(match components {
            Some(keep) => se.restricted_to(keep),
            None => se,
        }),
        Some(Err(e)) => {
            rec.error = Some(format!("elaboration: {e}"));
            return rec;
        }
    };
    let se = se.filter(|s| !s.is_empty());
    rec.se = se.as_ref().map(serialize_se);
    let req = attach_context(ex, se.as_ref());
    match gateway.generate(&req) {
        Ok(resp) => {
            let chosen = select_answer(&resp.answer, &ex.options);
            rec.chosen = Some(chosen);
            rec.correct = chosen == ex.gold_index;
        }
        Err(e) => rec.error = Some(error_summary(&e)),
    }
    rec
}

fn error_summary(e: &GatewayError) -> String {
    match e {
        GatewayError::EndpointUnreachable { url, detail, .. } => format!("endpoint {url} unreachable: {detail}"),
        GatewayError::Timeout { url, .. } => format!("timeout: {url}"),
        GatewayError::MalformedResponse { detail, .. } => format!("malformed response: {detail}"),
        other => other.to_string(),
    }
}

/// Answers every example, optionally with (a subset of) its elaboration as
/// context. Output order follows `examples`.
pub fn evaluate(
    examples: &[SituatedExample],
    gateway: &Gateway,
    se_source: Option<&dyn ElaborationProvider>,
    components: Option<&BTreeSet<Dimension>>,
    opts: EvalOptions,
) -> RunResult {
    let components = normalize_components(components);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.parallelism.max(1))
        .build()
        .expect("thread pool");
    let records = pool.install(|| {
        examples
            .par_iter()
            .map(|ex| evaluate_one(ex, gateway, se_source, components.as_ref()))
            .collect()
    });
    RunResult::from_records(records)
}

pub fn evaluate_benchmark(
    cfg: &BenchmarkConfig,
    gateway: &Gateway,
    se_source: Option<&dyn ElaborationProvider>,
    components: Option<&BTreeSet<Dimension>>,
    opts: EvalOptions,
) -> Result<RunResult, QaError> {
    let examples = load_benchmark(cfg)?;
    Ok(evaluate(&examples, gateway, se_source, components, opts))
}

/// Elaborates every example with `provider`, in input order. The first
/// failure aborts the batch and names the example.
pub fn elaborate_examples(
    examples: &[SituatedExample],
    provider: &dyn ElaborationProvider,
    source: SeSource,
    opts: EvalOptions,
) -> Result<Vec<StoredElaboration>, (String, ProviderError)> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.parallelism.max(1))
        .build()
        .expect("thread pool");
    pool.install(|| {
        examples
            .par_iter()
            .map(|ex| {
                let se = provider.elaborate(ex).map_err(|e| (ex.id.clone(), e))?;
                Ok(StoredElaboration {
                    id: ex.id.clone(),
                    situation: ex.situation.clone(),
                    se,
                    source,
                })
            })
            .collect()
    })
}

pub fn write_audit(path: &Path, records: &[AuditRecord]) -> Result<usize, QaError> {
    Ok(write_jsonl(path, records)?)
}

pub fn read_audit(path: &Path) -> Result<Vec<AuditRecord>, QaError> {
    Ok(read_jsonl(path)?)
}
