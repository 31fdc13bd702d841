//! Exact k-nearest-neighbour answering over text embeddings.
//!
//! Each training example becomes a point (its situation, optionally followed
//! by its serialized elaboration, embedded by an [`Embedder`]) tagged with its
//! gold label. A query is answered by majority vote among the `k` points
//! closest in Euclidean distance.
//!
//! Ordering is fully deterministic: equal distances are broken by the smaller
//! point id, and a tied vote goes to the tied label that occurs nearest to the
//! query. Search is brute force.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{Embedder, EmbeddingVector, GatewayError};
use crate::jsonl::{read_jsonl, sha256_hex};
use crate::qa::ElaborationProvider;
use crate::scene::{serialize_se, SituatedExample};

#[derive(Debug, Error)]
pub enum KnnError {
    #[error("query has dimension {got}, index has {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("k = {k} is outside 1..={n}")]
    InvalidK { k: usize, n: usize },
    #[error("cannot build an index from an empty training set")]
    EmptyTrainingSet,
    #[error("embedding `{id}`: {source}")]
    Embed {
        id: String,
        #[source]
        source: GatewayError,
    },
    #[error("elaboration for `{id}`: {detail}")]
    Elaboration { id: String, detail: String },
    #[error("{path}: {detail}")]
    Io { path: PathBuf, detail: String },
}

/// Binary label convention: 1 = wrong, 0 = not wrong.
pub type Label = u32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPoint {
    pub id: String,
    pub label: Label,
    pub text: String,
    pub vector: EmbeddingVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnIndex {
    points: Vec<LabeledPoint>,
    dim: usize,
    with_se: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexHeader {
    pub dim: usize,
    pub with_se: bool,
    pub count: usize,
}

/// Squared Euclidean distance with Neumaier-compensated summation.
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        let term = d * d;
        let t = sum + term;
        if sum.abs() >= term.abs() {
            comp += (sum - t) + term;
        } else {
            comp += (term - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Label used for KNN voting: ETHICS-style `["wrong", "not wrong"]` examples
/// map to 1/0, anything else to its gold option index.
pub fn example_label(ex: &SituatedExample) -> Label {
    if ex.options.len() == 2 && ex.options[0] == "wrong" && ex.options[1] == "not wrong" {
        if ex.gold_index == 0 {
            1
        } else {
            0
        }
    } else {
        ex.gold_index as Label
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: String,
    pub label: Label,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub label: Label,
    /// Nearest first.
    pub neighbors: Vec<Neighbor>,
}

impl Classification {
    pub fn neighbor_ids(&self) -> Vec<&str> {
        self.neighbors.iter().map(|n| n.id.as_str()).collect()
    }
}

fn by_distance_then_id(a: &(f64, &str), b: &(f64, &str)) -> Ordering {
    a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1))
}

/// Majority label; ties go to the tied label seen first in `nearest_first`.
pub fn majority_vote(nearest_first: &[Label]) -> Option<Label> {
    let mut counts: HashMap<Label, usize> = HashMap::new();
    for l in nearest_first {
        *counts.entry(*l).or_default() += 1;
    }
    let top = counts.values().copied().max()?;
    nearest_first.iter().copied().find(|l| counts[l] == top)
}

impl KnnIndex {
    pub fn new(points: Vec<LabeledPoint>, with_se: bool) -> Result<Self, KnnError> {
        let first = points.first().ok_or(KnnError::EmptyTrainingSet)?;
        let dim = first.vector.dim();
        if let Some(p) = points.iter().find(|p| p.vector.dim() != dim) {
            return Err(KnnError::DimensionMismatch {
                expected: dim,
                got: p.vector.dim(),
            });
        }
        Ok(KnnIndex { points, dim, with_se })
    }

    pub fn points(&self) -> &[LabeledPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn with_se(&self) -> bool {
        self.with_se
    }

    pub fn header(&self) -> IndexHeader {
        IndexHeader {
            dim: self.dim,
            with_se: self.with_se,
            count: self.points.len(),
        }
    }

    /// The `k` nearest points and their majority label.
    pub fn classify_vector(&self, query: &EmbeddingVector, k: usize) -> Result<Classification, KnnError> {
        if query.dim() != self.dim {
            return Err(KnnError::DimensionMismatch {
                expected: self.dim,
                got: query.dim(),
            });
        }
        if k == 0 || k > self.points.len() {
            return Err(KnnError::InvalidK {
                k,
                n: self.points.len(),
            });
        }
        let q = query.values();
        let mut scored: Vec<(f64, &str, usize)> = self
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| (squared_distance(q, p.vector.values()), p.id.as_str(), i))
            .collect();
        let cmp = |a: &(f64, &str, usize), b: &(f64, &str, usize)| by_distance_then_id(&(a.0, a.1), &(b.0, b.1));
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_by(cmp);
        let neighbors: Vec<Neighbor> = scored
            .iter()
            .map(|&(d2, _, i)| Neighbor {
                id: self.points[i].id.clone(),
                label: self.points[i].label,
                distance: d2.sqrt(),
            })
            .collect();
        let labels: Vec<Label> = neighbors.iter().map(|n| n.label).collect();
        Ok(Classification {
            label: majority_vote(&labels).expect("k >= 1"),
            neighbors,
        })
    }

    pub fn classify(&self, query_text: &str, embedder: &dyn Embedder, k: usize) -> Result<Classification, KnnError> {
        let v = embedder.embed(query_text).map_err(|source| KnnError::Embed {
            id: "<query>".into(),
            source,
        })?;
        self.classify_vector(&v, k)
    }

    /// Writes a header line then one point per line.
    pub fn save(&self, path: &Path) -> Result<(), KnnError> {
        let io = |e: std::io::Error| KnnError::Io {
            path: path.to_path_buf(),
            detail: e.to_string(),
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(io)?;
        }
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        writeln!(w, "{}", serde_json::to_string(&self.header()).expect("serializable")).map_err(io)?;
        for p in &self.points {
            writeln!(w, "{}", serde_json::to_string(p).expect("serializable")).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, KnnError> {
        let bad = |detail: String| KnnError::Io {
            path: path.to_path_buf(),
            detail,
        };
        let file = File::open(path).map_err(|e| bad(e.to_string()))?;
        let mut lines = BufReader::new(file).lines();
        let header: IndexHeader = match lines.next() {
            Some(line) => serde_json::from_str(&line.map_err(|e| bad(e.to_string()))?)
                .map_err(|e| bad(format!("line 1: bad header: {e}")))?,
            None => return Err(bad("empty index file".into())),
        };
        let mut points = Vec::with_capacity(header.count);
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| bad(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            points.push(serde_json::from_str(&line).map_err(|e| bad(format!("line {}: {e}", i + 2)))?);
        }
        if points.len() != header.count {
            return Err(bad(format!(
                "header declares {} points, found {}",
                header.count,
                points.len()
            )));
        }
        let index = KnnIndex::new(points, header.with_se)?;
        if index.dim != header.dim {
            return Err(KnnError::DimensionMismatch {
                expected: header.dim,
                got: index.dim,
            });
        }
        Ok(index)
    }
}

/// Text that gets embedded for an example: the situation, plus the
/// serialized elaboration when one is supplied and non-empty.
pub fn encoded_text(ex: &SituatedExample, se_provider: Option<&dyn ElaborationProvider>) -> Result<String, KnnError> {
    let Some(provider) = se_provider else {
        return Ok(ex.situation.clone());
    };
    let se = provider.elaborate(ex).map_err(|e| KnnError::Elaboration {
        id: ex.id.clone(),
        detail: e.to_string(),
    })?;
    Ok(if se.is_empty() {
        ex.situation.clone()
    } else {
        format!("{} {}", ex.situation, serialize_se(&se))
    })
}

/// Embeds every training example. Any failure aborts the build.
pub fn build_index(
    train: &[SituatedExample],
    embedder: &dyn Embedder,
    se_provider: Option<&dyn ElaborationProvider>,
) -> Result<KnnIndex, KnnError> {
    if train.is_empty() {
        return Err(KnnError::EmptyTrainingSet);
    }
    let points = train
        .par_iter()
        .map(|ex| {
            let text = encoded_text(ex, se_provider)?;
            let vector = embedder.embed(&text).map_err(|source| KnnError::Embed {
                id: ex.id.clone(),
                source,
            })?;
            Ok(LabeledPoint {
                id: ex.id.clone(),
                label: example_label(ex),
                text,
                vector,
            })
        })
        .collect::<Result<Vec<_>, KnnError>>()?;
    KnnIndex::new(points, se_provider.is_some())
}

/// Neighbour listing for one test query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborDump {
    pub query_id: String,
    pub query: String,
    pub gold: Label,
    pub predicted: Label,
    pub correct: bool,
    pub neighbors: Vec<DumpedNeighbor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpedNeighbor {
    pub id: String,
    pub label: Label,
    pub text: String,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnReport {
    pub k: usize,
    pub with_se: bool,
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub dumps: Vec<NeighborDump>,
}

/// Classifies every test example against `index` and reports accuracy.
pub fn evaluate_knn(
    index: &KnnIndex,
    test: &[SituatedExample],
    embedder: &dyn Embedder,
    se_provider: Option<&dyn ElaborationProvider>,
    k: usize,
) -> Result<KnnReport, KnnError> {
    let by_id: HashMap<&str, &LabeledPoint> = index.points.iter().map(|p| (p.id.as_str(), p)).collect();
    let dumps = test
        .par_iter()
        .map(|ex| {
            let text = encoded_text(ex, se_provider)?;
            let c = index.classify(&text, embedder, k).map_err(|e| match e {
                KnnError::Embed { source, .. } => KnnError::Embed {
                    id: ex.id.clone(),
                    source,
                },
                other => other,
            })?;
            let gold = example_label(ex);
            Ok(NeighborDump {
                query_id: ex.id.clone(),
                query: text,
                gold,
                predicted: c.label,
                correct: c.label == gold,
                neighbors: c
                    .neighbors
                    .into_iter()
                    .map(|n| DumpedNeighbor {
                        text: by_id.get(n.id.as_str()).map(|p| p.text.clone()).unwrap_or_default(),
                        id: n.id,
                        label: n.label,
                        distance: n.distance,
                    })
                    .collect(),
            })
        })
        .collect::<Result<Vec<_>, KnnError>>()?;
    let n = dumps.len();
    let correct = dumps.iter().filter(|d| d.correct).count();
    Ok(KnnReport {
        k,
        with_se: index.with_se,
        n,
        correct,
        accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
        dumps,
    })
}

/// Disk cache of embeddings keyed by `sha256(embedder id, text)`.
///
/// Loads `{"key", "vector"}` lines on open and appends new ones.
pub struct CachedEmbedder<'a> {
    inner: &'a dyn Embedder,
    path: PathBuf,
    entries: Mutex<BTreeMap<String, EmbeddingVector>>,
}

#[derive(Serialize, Deserialize)]
struct EmbCacheLine {
    key: String,
    vector: EmbeddingVector,
}

impl<'a> CachedEmbedder<'a> {
    pub fn open(inner: &'a dyn Embedder, path: &Path) -> Result<Self, KnnError> {
        let entries = if path.exists() {
            read_jsonl::<EmbCacheLine>(path)
                .map_err(|e| KnnError::Io {
                    path: path.to_path_buf(),
                    detail: e.to_string(),
                })?
                .into_iter()
                .map(|l| (l.key, l.vector))
                .collect()
        } else {
            BTreeMap::new()
        };
        Ok(CachedEmbedder {
            inner,
            path: path.to_path_buf(),
            entries: Mutex::new(entries),
        })
    }

    fn key(&self, text: &str) -> String {
        sha256_hex(format!("{}\n{text}", self.inner.id()).as_bytes())
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Embedder for CachedEmbedder<'_> {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, GatewayError> {
        let key = self.key(text);
        if let Some(v) = self.entries.lock().unwrap_or_else(|e| e.into_inner()).get(&key) {
            return Ok(v.clone());
        }
        let v = self.inner.embed(text)?;
        let mut entries = self.entries.lock().unwrap_or_else(|e| e.into_inner());
        if let std::collections::btree_map::Entry::Vacant(slot) = entries.entry(key) {
            let line = serde_json::to_string(&EmbCacheLine {
                key: slot.key().clone(),
                vector: v.clone(),
            })
            .expect("serializable");
            let appended = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&self.path)
                .and_then(|mut f| writeln!(f, "{line}"));
            if let Err(e) = appended {
                return Err(GatewayError::Config(format!(
                    "embedding cache {}: {e}",
                    self.path.display()
                )));
            }
            slot.insert(v.clone());
        }
        Ok(v)
    }

    fn dim(&self) -> Option<usize> {
        self.inner.dim()
    }

    fn id(&self) -> String {
        self.inner.id()
    }
}
