//! Rubric aggregation for human ratings of scene elaborations.
//!
//! Raters score each component of an elaboration for accuracy and usefulness
//! on a three-level scale and the whole elaboration for consistency on a
//! five-level scale. Item scores are means over workers, then over the
//! components present. Corpus summaries and the before/after prediction
//! change table are built from those.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qa::AuditRecord;
use crate::scene::Dimension;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no annotations to aggregate")]
    EmptyInput,
    #[error("item `{item_id}`: workers rated different component sets ({first:?} vs {other:?})")]
    MixedComponentSets {
        item_id: String,
        first: Vec<Dimension>,
        other: Vec<Dimension>,
    },
    #[error("item `{item_id}`: annotations mix items or systems")]
    MixedItems { item_id: String },
    #[error("item `{item_id}`: worker `{worker_id}` rated it twice")]
    DuplicateWorker { item_id: String, worker_id: String },
    #[error("item `{item_id}`, worker `{worker_id}`: {detail}")]
    InvalidRecord {
        item_id: String,
        worker_id: String,
        detail: String,
    },
    #[error("audit ids differ: {only_baseline} only in baseline, {only_with_se} only in with-SE (e.g. `{example}`)")]
    IdMismatch {
        only_baseline: usize,
        only_with_se: usize,
        example: String,
    },
    #[error("duplicate id `{0}` in audit")]
    DuplicateId(String),
}

/// Which system produced the rated elaboration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemTag {
    MacawProbe,
    Dream,
}

impl SystemTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SystemTag::MacawProbe => "macaw_probe",
            SystemTag::Dream => "dream",
        }
    }
}

impl fmt::Display for SystemTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Component score: 0 (no), 0.5 (a bit), 1 (yes).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct RubricScore(f64);

impl RubricScore {
    pub const NO: RubricScore = RubricScore(0.0);
    pub const A_BIT: RubricScore = RubricScore(0.5);
    pub const YES: RubricScore = RubricScore(1.0);
    pub const ALPHABET: [f64; 3] = [0.0, 0.5, 1.0];

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for RubricScore {
    type Error = String;
    fn try_from(v: f64) -> Result<Self, String> {
        if Self::ALPHABET.contains(&v) {
            Ok(RubricScore(v))
        } else {
            Err(format!("rubric score {v} is not one of 0, 0.5, 1"))
        }
    }
}

impl From<RubricScore> for f64 {
    fn from(s: RubricScore) -> f64 {
        s.0
    }
}

/// Whole-elaboration consistency: level i of 0..=4 is i/4.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct ConsistencyScore(f64);

impl ConsistencyScore {
    pub const ALPHABET: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

    pub fn from_level(level: u8) -> Option<Self> {
        (level <= 4).then(|| ConsistencyScore(f64::from(level) / 4.0))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for ConsistencyScore {
    type Error = String;
    fn try_from(v: f64) -> Result<Self, String> {
        if Self::ALPHABET.contains(&v) {
            Ok(ConsistencyScore(v))
        } else {
            Err(format!("consistency score {v} is not one of 0, 0.25, 0.5, 0.75, 1"))
        }
    }
}

impl From<ConsistencyScore> for f64 {
    fn from(s: ConsistencyScore) -> f64 {
        s.0
    }
}

/// One worker's ratings of one elaboration. This is also the line format of
/// annotation exports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub item_id: String,
    pub worker_id: String,
    pub system: SystemTag,
    pub accuracy: BTreeMap<Dimension, RubricScore>,
    pub usefulness: BTreeMap<Dimension, RubricScore>,
    pub consistency: ConsistencyScore,
}

impl AnnotationRecord {
    pub fn components(&self) -> Vec<Dimension> {
        self.accuracy.keys().copied().collect()
    }

    /// Accuracy and usefulness must cover the same non-empty component set.
    pub fn validate(&self) -> Result<(), MetricsError> {
        let invalid = |detail: &str| MetricsError::InvalidRecord {
            item_id: self.item_id.clone(),
            worker_id: self.worker_id.clone(),
            detail: detail.into(),
        };
        if self.item_id.is_empty() || self.worker_id.is_empty() {
            return Err(invalid("item_id and worker_id must be non-empty"));
        }
        if self.accuracy.is_empty() {
            return Err(invalid("no component ratings"));
        }
        if !self.accuracy.keys().eq(self.usefulness.keys()) {
            return Err(invalid("accuracy and usefulness rate different components"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentMeans {
    pub accuracy: f64,
    pub usefulness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemScore {
    pub item_id: String,
    pub system: SystemTag,
    pub accuracy: f64,
    pub usefulness: f64,
    pub consistency: f64,
    pub n_workers: usize,
    /// Worker-mean per rated component.
    pub components: BTreeMap<Dimension, ComponentMeans>,
    /// Set when the worker count differs from [`EXPECTED_WORKERS`].
    pub flagged: bool,
}

pub const EXPECTED_WORKERS: usize = 3;

impl ItemScore {
    pub fn max_component_accuracy(&self) -> f64 {
        self.components.values().map(|c| c.accuracy).fold(0.0, f64::max)
    }

    pub fn max_component_usefulness(&self) -> f64 {
        self.components.values().map(|c| c.usefulness).fold(0.0, f64::max)
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    sum / n as f64
}

/// Scores one item from all of its annotations.
pub fn aggregate_item(annotations: &[AnnotationRecord]) -> Result<ItemScore, MetricsError> {
    let first = annotations.first().ok_or(MetricsError::EmptyInput)?;
    let dims = first.components();
    let mut workers = BTreeSet::new();
    for a in annotations {
        a.validate()?;
        if a.item_id != first.item_id || a.system != first.system {
            return Err(MetricsError::MixedItems {
                item_id: first.item_id.clone(),
            });
        }
        let these = a.components();
        if these != dims {
            return Err(MetricsError::MixedComponentSets {
                item_id: first.item_id.clone(),
                first: dims,
                other: these,
            });
        }
        if !workers.insert(a.worker_id.as_str()) {
            return Err(MetricsError::DuplicateWorker {
                item_id: a.item_id.clone(),
                worker_id: a.worker_id.clone(),
            });
        }
    }
    let components: BTreeMap<Dimension, ComponentMeans> = dims
        .iter()
        .map(|d| {
            (
                *d,
                ComponentMeans {
                    accuracy: mean(annotations.iter().map(|a| a.accuracy[d].value())),
                    usefulness: mean(annotations.iter().map(|a| a.usefulness[d].value())),
                },
            )
        })
        .collect();
    Ok(ItemScore {
        item_id: first.item_id.clone(),
        system: first.system,
        accuracy: mean(components.values().map(|c| c.accuracy)),
        usefulness: mean(components.values().map(|c| c.usefulness)),
        consistency: mean(annotations.iter().map(|a| a.consistency.value())),
        n_workers: annotations.len(),
        components,
        flagged: annotations.len() != EXPECTED_WORKERS,
    })
}

/// Groups annotations by (system, item) and scores each group. Output is
/// sorted by system, then item id.
pub fn aggregate_all(annotations: &[AnnotationRecord]) -> Result<Vec<ItemScore>, MetricsError> {
    if annotations.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut groups: BTreeMap<(SystemTag, &str), Vec<AnnotationRecord>> = BTreeMap::new();
    for a in annotations {
        groups
            .entry((a.system, a.item_id.as_str()))
            .or_default()
            .push(a.clone());
    }
    groups.into_par_iter().map(|(_, g)| aggregate_item(&g)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub system: Option<SystemTag>,
    pub n_items: usize,
    pub flagged_items: usize,
    /// Means, as percentages.
    pub accuracy_pct: f64,
    pub usefulness_pct: f64,
    pub consistency_pct: f64,
    /// Fraction of items whose best component accuracy is above 0.
    pub any_true: f64,
    /// Among `any_true` items, fraction whose best component usefulness is
    /// above 0. Absent when no item qualifies.
    pub any_useful_given_true: Option<f64>,
    pub consistency_at_least_half: f64,
    pub consistency_at_least_three_quarters: f64,
}

/// Summarizes item scores, restricted to one system when `system` is given.
pub fn corpus_report(scores: &[ItemScore], system: Option<SystemTag>) -> Result<CorpusReport, MetricsError> {
    let items: Vec<&ItemScore> = scores.iter().filter(|s| system.is_none_or(|t| s.system == t)).collect();
    if items.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let n = items.len() as f64;
    let frac = |pred: &dyn Fn(&ItemScore) -> bool| items.iter().filter(|s| pred(s)).count() as f64 / n;
    let truthful: Vec<&&ItemScore> = items.iter().filter(|s| s.max_component_accuracy() > 0.0).collect();
    let any_useful_given_true = (!truthful.is_empty())
        .then(|| truthful.iter().filter(|s| s.max_component_usefulness() > 0.0).count() as f64 / truthful.len() as f64);
    Ok(CorpusReport {
        system,
        n_items: items.len(),
        flagged_items: items.iter().filter(|s| s.flagged).count(),
        accuracy_pct: 100.0 * mean(items.iter().map(|s| s.accuracy)),
        usefulness_pct: 100.0 * mean(items.iter().map(|s| s.usefulness)),
        consistency_pct: 100.0 * mean(items.iter().map(|s| s.consistency)),
        any_true: truthful.len() as f64 / n,
        any_useful_given_true,
        consistency_at_least_half: frac(&|s| s.consistency >= 0.5),
        consistency_at_least_three_quarters: frac(&|s| s.consistency >= 0.75),
    })
}

/// How per-example correctness moved between a baseline run and a run with
/// elaborations. The four fractions partition the id set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionChange {
    pub n: usize,
    pub wrong_to_correct: f64,
    pub correct_to_wrong: f64,
    pub wrong_to_wrong: f64,
    pub correct_to_correct: f64,
    pub counts: ChangeCounts,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangeCounts {
    pub wrong_to_correct: usize,
    pub correct_to_wrong: usize,
    pub wrong_to_wrong: usize,
    pub correct_to_correct: usize,
}

pub fn prediction_change_report(
    baseline: &[AuditRecord],
    with_se: &[AuditRecord],
) -> Result<PredictionChange, MetricsError> {
    fn index(records: &[AuditRecord]) -> Result<HashMap<&str, bool>, MetricsError> {
        let mut m = HashMap::with_capacity(records.len());
        for r in records {
            if m.insert(r.id.as_str(), r.correct).is_some() {
                return Err(MetricsError::DuplicateId(r.id.clone()));
            }
        }
        Ok(m)
    }
    let b = index(baseline)?;
    let w = index(with_se)?;
    let mut only_b: Vec<&str> = b.keys().filter(|k| !w.contains_key(*k)).copied().collect();
    let mut only_w: Vec<&str> = w.keys().filter(|k| !b.contains_key(*k)).copied().collect();
    if !only_b.is_empty() || !only_w.is_empty() {
        only_b.sort_unstable();
        only_w.sort_unstable();
        return Err(MetricsError::IdMismatch {
            only_baseline: only_b.len(),
            only_with_se: only_w.len(),
            example: only_b.first().or(only_w.first()).unwrap().to_string(),
        });
    }
    if b.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut c = ChangeCounts::default();
    for (id, before) in &b {
        match (before, w[id]) {
            (false, true) => c.wrong_to_correct += 1,
            (true, false) => c.correct_to_wrong += 1,
            (false, false) => c.wrong_to_wrong += 1,
            (true, true) => c.correct_to_correct += 1,
        }
    }
    let n = b.len();
    let f = |k: usize| k as f64 / n as f64;
    Ok(PredictionChange {
        n,
        wrong_to_correct: f(c.wrong_to_correct),
        correct_to_wrong: f(c.correct_to_wrong),
        wrong_to_wrong: f(c.wrong_to_wrong),
        correct_to_correct: f(c.correct_to_correct),
        counts: c,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use Dimension::*;

    fn rec(item: &str, worker: &str, acc: &[(Dimension, f64)], cons: f64) -> AnnotationRecord {
        AnnotationRecord {
            item_id: item.into(),
            worker_id: worker.into(),
            system: SystemTag::Dream,
            accuracy: acc
                .iter()
                .map(|(d, v)| (*d, RubricScore::try_from(*v).unwrap()))
                .collect(),
            usefulness: acc.iter().map(|(d, _)| (*d, RubricScore::NO)).collect(),
            consistency: ConsistencyScore::try_from(cons).unwrap(),
        }
    }

    fn all(v: f64) -> Vec<(Dimension, f64)> {
        Dimension::ALL.iter().map(|d| (*d, v)).collect()
    }

    #[test]
    fn perfect_item() {
        let anns: Vec<_> = (0..3)
            .map(|w| {
                let mut r = rec("i", &format!("w{w}"), &all(1.0), 1.0);
                r.usefulness.values_mut().for_each(|s| *s = RubricScore::YES);
                r
            })
            .collect();
        let s = aggregate_item(&anns).unwrap();
        assert_eq!((s.accuracy, s.usefulness, s.consistency), (1.0, 1.0, 1.0));
        assert!(!s.flagged);
    }

    #[test]
    fn component_worker_mean() {
        let anns = vec![
            rec("i", "a", &[(Emotion, 1.0)], 1.0),
            rec("i", "b", &[(Emotion, 0.5)], 0.5),
            rec("i", "c", &[(Emotion, 0.0)], 0.75),
        ];
        let s = aggregate_item(&anns).unwrap();
        assert_eq!(s.components[&Emotion].accuracy, 0.5);
        assert_eq!(s.consistency, 0.75);
    }

    #[test]
    fn two_components_one_worker() {
        let s = aggregate_item(&[rec("i", "a", &[(RuleOfThumb, 1.0), (Consequence, 0.0)], 0.0)]).unwrap();
        assert_eq!(s.accuracy, 0.5);
        assert!(s.flagged);
        assert_eq!(s.n_workers, 1);
    }

    #[test]
    fn aggregation_errors() {
        assert_eq!(aggregate_item(&[]), Err(MetricsError::EmptyInput));
        let mixed = [
            rec("i", "a", &[(RuleOfThumb, 1.0)], 1.0),
            rec("i", "b", &[(Emotion, 1.0)], 1.0),
        ];
        assert!(matches!(
            aggregate_item(&mixed),
            Err(MetricsError::MixedComponentSets { .. })
        ));
        let dup = [
            rec("i", "a", &[(RuleOfThumb, 1.0)], 1.0),
            rec("i", "a", &[(RuleOfThumb, 0.0)], 1.0),
        ];
        assert!(matches!(
            aggregate_item(&dup),
            Err(MetricsError::DuplicateWorker { .. })
        ));
        let other = [
            rec("i", "a", &[(RuleOfThumb, 1.0)], 1.0),
            rec("j", "b", &[(RuleOfThumb, 1.0)], 1.0),
        ];
        assert!(matches!(aggregate_item(&other), Err(MetricsError::MixedItems { .. })));
        let mut bad = rec("i", "a", &[(RuleOfThumb, 1.0)], 1.0);
        bad.usefulness.clear();
        assert!(matches!(
            aggregate_item(&[bad]),
            Err(MetricsError::InvalidRecord { .. })
        ));
    }

    #[test]
    fn alphabets_are_strict() {
        for v in [0.0, 0.5, 1.0] {
            assert!(RubricScore::try_from(v).is_ok());
        }
        for v in [0.25, 0.75, -0.0 - 0.1, 1.5, f64::NAN] {
            assert!(RubricScore::try_from(v).is_err(), "{v}");
        }
        for v in [0.0, 0.25, 0.5, 0.75, 1.0] {
            assert!(ConsistencyScore::try_from(v).is_ok());
        }
        assert!(ConsistencyScore::try_from(0.3).is_err());
        assert_eq!(ConsistencyScore::from_level(2).unwrap().value(), 0.5);
        assert!(ConsistencyScore::from_level(5).is_none());
        let line = r#"{"item_id":"x","worker_id":"w","system":"dream","accuracy":{"rot":0.7},"usefulness":{"rot":1},"consistency":1}"#;
        assert!(serde_json::from_str::<AnnotationRecord>(line).is_err());
        let line = r#"{"item_id":"x","worker_id":"w","system":"macaw_probe","accuracy":{"rot":1},"usefulness":{"rot":0.5},"consistency":0.25}"#;
        let r: AnnotationRecord = serde_json::from_str(line).unwrap();
        assert_eq!(r.system, SystemTag::MacawProbe);
        let line = r#"{"item_id":"x","worker_id":"w","system":"gpt","accuracy":{"rot":1},"usefulness":{"rot":1},"consistency":1}"#;
        assert!(serde_json::from_str::<AnnotationRecord>(line).is_err());
    }

    #[test]
    fn one_true_component_each() {
        let scores: Vec<_> = (0..4)
            .map(|i| {
                let mut acc = all(0.0);
                acc[i].1 = 1.0;
                aggregate_item(&[rec(&format!("i{i}"), "a", &acc, 0.5)]).unwrap()
            })
            .collect();
        let r = corpus_report(&scores, None).unwrap();
        assert_eq!(r.any_true, 1.0);
        assert_eq!(r.any_useful_given_true, Some(0.0));
        assert_eq!(r.accuracy_pct, 25.0);
        assert_eq!(r.consistency_at_least_half, 1.0);
        assert_eq!(r.consistency_at_least_three_quarters, 0.0);
        assert_eq!(
            corpus_report(&scores, Some(SystemTag::MacawProbe)),
            Err(MetricsError::EmptyInput)
        );
    }

    #[test]
    fn aggregate_all_groups_by_system() {
        let mut m = rec("i", "a", &[(RuleOfThumb, 1.0)], 1.0);
        m.system = SystemTag::MacawProbe;
        let d = rec("i", "a", &[(RuleOfThumb, 0.0)], 0.0);
        let scores = aggregate_all(&[d, m]).unwrap();
        assert_eq!(scores.len(), 2);
        assert_eq!(scores[0].system, SystemTag::MacawProbe);
        assert_eq!(scores[0].accuracy, 1.0);
        assert_eq!(scores[1].accuracy, 0.0);
    }

    fn audit(id: &str, correct: bool) -> AuditRecord {
        AuditRecord {
            id: id.into(),
            dataset: "d".into(),
            chosen: Some(0),
            gold: if correct { 0 } else { 1 },
            correct,
            se: None,
            components: None,
            error: None,
        }
    }

    #[test]
    fn prediction_cells() {
        let base = [audit("a", false), audit("b", true), audit("c", false), audit("d", true)];
        let with = [audit("d", true), audit("c", false), audit("b", false), audit("a", true)];
        let p = prediction_change_report(&base, &with).unwrap();
        for f in [
            p.wrong_to_correct,
            p.correct_to_wrong,
            p.wrong_to_wrong,
            p.correct_to_correct,
        ] {
            assert_eq!(f, 0.25);
        }
        let same = prediction_change_report(&base, &base).unwrap();
        assert_eq!((same.wrong_to_correct, same.correct_to_wrong), (0.0, 0.0));
        assert!(matches!(
            prediction_change_report(&base, &[audit("z", true)]),
            Err(MetricsError::IdMismatch {
                only_baseline: 4,
                only_with_se: 1,
                ..
            })
        ));
        assert!(matches!(
            prediction_change_report(&[audit("a", true), audit("a", false)], &[]),
            Err(MetricsError::DuplicateId(_))
        ));
    }
}
