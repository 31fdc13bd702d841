//! Builds the scene-elaboration training corpus from three annotated sources.
//!
//! Every source row becomes one or more `[SITUATION] ... [QUERY] <keyword>`
//! prompts paired with a target answer:
//!
//! * Story Commonsense: a story sentence → a character's emotion / motivation;
//! * Social Chemistry: a situation → its rule of thumb;
//! * Moral Stories: situation plus the moral (resp. immoral) action → the
//!   matching consequence, two records per story.
//!
//! Source files are read through a [`ColumnMap`] so differently laid out
//! releases can be mapped onto the field names used here.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::LazyLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jsonl::{read_jsonl, write_jsonl, JsonlError};
use crate::probe::templatize_answer;
use crate::scene::Dimension;

/// Literal used by Story Commonsense for "no notable emotion/motivation".
pub const NONE_ANNOTATION: &str = "[none]";
/// Target emitted for [`NONE_ANNOTATION`] rows.
pub const NONE_TARGET: &str = "none";

static PROMPT_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^\[SITUATION\] .+ \[QUERY\] (social norm|emotion|motivation|likely consequence)$")
        .expect("static regex")
});

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{kind} record {id}: missing field `{field}`")]
    MissingField {
        kind: SourceKind,
        id: String,
        field: String,
    },
    #[error("{kind} record {id}: field `{field}` {reason}")]
    InvalidField {
        kind: SourceKind,
        id: String,
        field: String,
        reason: String,
    },
    #[error("expected {expected} records, got a {got} record ({id})")]
    WrongSource {
        expected: SourceKind,
        got: SourceKind,
        id: String,
    },
    #[error("unknown source `{0}` (expected story_cs, social_chem or moral_stories)")]
    UnknownSource(String),
    #[error("column map: {0}")]
    Config(String),
    #[error("{path}: {detail}")]
    Read { path: String, detail: String },
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SourceKind {
    #[serde(rename = "story_cs")]
    StoryCommonsense,
    #[serde(rename = "social_chem")]
    SocialChemistry,
    #[serde(rename = "moral_stories")]
    MoralStories,
}

impl SourceKind {
    pub fn name(self) -> &'static str {
        match self {
            SourceKind::StoryCommonsense => "story_cs",
            SourceKind::SocialChemistry => "social_chem",
            SourceKind::MoralStories => "moral_stories",
        }
    }

    /// Fields that must be present (non-empty) on every record.
    pub fn required_fields(self) -> &'static [&'static str] {
        match self {
            SourceKind::StoryCommonsense => &["sentence", "character"],
            SourceKind::SocialChemistry => &["situation", "rot"],
            SourceKind::MoralStories => &[
                "situation",
                "moral_action",
                "moral_consequence",
                "immoral_action",
                "immoral_consequence",
            ],
        }
    }

    /// Every field a builder reads.
    pub fn known_fields(self) -> &'static [&'static str] {
        match self {
            SourceKind::StoryCommonsense => &["sentence", "character", "emotion", "motivation"],
            other => other.required_fields(),
        }
    }
}

impl fmt::Display for SourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SourceKind {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "story_cs" => Ok(SourceKind::StoryCommonsense),
            "social_chem" => Ok(SourceKind::SocialChemistry),
            "moral_stories" => Ok(SourceKind::MoralStories),
            other => Err(CorpusError::UnknownSource(other.to_string())),
        }
    }
}

/// One row of a source corpus, with fields already renamed to canonical names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceRecord {
    pub source: SourceKind,
    pub id: String,
    pub fields: BTreeMap<String, String>,
}

impl SourceRecord {
    pub fn new<'a>(
        source: SourceKind,
        id: impl Into<String>,
        fields: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Self {
        SourceRecord {
            source,
            id: id.into(),
            fields: fields
                .into_iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    fn field(&self, name: &str) -> Option<&str> {
        self.fields.get(name).map(|v| v.trim()).filter(|v| !v.is_empty())
    }

    fn require(&self, name: &str) -> Result<String, CorpusError> {
        self.field(name)
            .map(collapse_ws)
            .ok_or_else(|| CorpusError::MissingField {
                kind: self.source,
                id: self.id.clone(),
                field: name.to_string(),
            })
    }

    fn expect_source(&self, expected: SourceKind) -> Result<(), CorpusError> {
        if self.source != expected {
            return Err(CorpusError::WrongSource {
                expected,
                got: self.source,
                id: self.id.clone(),
            });
        }
        Ok(())
    }
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileFormat {
    #[default]
    Csv,
    Tsv,
    Jsonl,
}

/// Maps source-file columns onto canonical field names.
///
/// ```toml
/// format = "tsv"
/// id = "rot-id"
/// [columns]
/// situation = "situation"
/// rot = "rot"
/// ```
///
/// Canonical fields without an entry are read from a column of the same name.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnMap {
    pub format: FileFormat,
    /// Column holding a record id; row numbers (1-based) are used otherwise.
    pub id: Option<String>,
    pub columns: BTreeMap<String, String>,
}

impl ColumnMap {
    /// Reads a `.toml` or `.json` mapping file.
    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path).map_err(|e| CorpusError::Read {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        } else {
            toml::from_str(&text).map_err(|e| e.to_string())
        };
        parsed.map_err(|e| CorpusError::Config(format!("{}: {e}", path.display())))
    }

    fn column_for<'a>(&'a self, field: &'a str) -> &'a str {
        self.columns.get(field).map(String::as_str).unwrap_or(field)
    }
}

fn json_to_text(v: &serde_json::Value) -> Option<String> {
    match v {
        serde_json::Value::Null => None,
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Array(xs) => Some(xs.iter().filter_map(json_to_text).collect::<Vec<_>>().join(", ")),
        other => Some(other.to_string()),
    }
}

/// Reads a source file into canonical [`SourceRecord`]s.
pub fn load_source(kind: SourceKind, path: &Path, map: &ColumnMap) -> Result<Vec<SourceRecord>, CorpusError> {
    let read_err = |detail: String| CorpusError::Read {
        path: path.display().to_string(),
        detail,
    };
    let mut out = Vec::new();
    match map.format {
        FileFormat::Jsonl => {
            let rows: Vec<serde_json::Map<String, serde_json::Value>> = read_jsonl(path)?;
            for (i, row) in rows.into_iter().enumerate() {
                let id = map
                    .id
                    .as_ref()
                    .and_then(|c| row.get(c))
                    .and_then(json_to_text)
                    .unwrap_or_else(|| (i + 1).to_string());
                let fields = kind
                    .known_fields()
                    .iter()
                    .filter_map(|f| {
                        row.get(map.column_for(f))
                            .and_then(json_to_text)
                            .map(|v| (f.to_string(), v))
                    })
                    .collect();
                out.push(SourceRecord {
                    source: kind,
                    id,
                    fields,
                });
            }
        }
        FileFormat::Csv | FileFormat::Tsv => {
            let mut builder = csv::ReaderBuilder::new();
            builder.has_headers(true);
            if map.format == FileFormat::Tsv {
                builder.delimiter(b'\t').quoting(false);
            }
            let mut reader = builder.from_path(path).map_err(|e| read_err(e.to_string()))?;
            let headers = reader.headers().map_err(|e| read_err(e.to_string()))?.clone();
            let index_of = |col: &str| headers.iter().position(|h| h == col);
            let id_col = match &map.id {
                Some(c) => Some(index_of(c).ok_or_else(|| read_err(format!("no id column `{c}`")))?),
                None => None,
            };
            let field_cols: Vec<(&str, usize)> = kind
                .known_fields()
                .iter()
                .filter_map(|f| index_of(map.column_for(f)).map(|i| (*f, i)))
                .collect();
            for (i, row) in reader.records().enumerate() {
                let row = row.map_err(|e| read_err(e.to_string()))?;
                let id = id_col
                    .and_then(|c| row.get(c))
                    .map(str::to_string)
                    .unwrap_or_else(|| (i + 1).to_string());
                let fields = field_cols
                    .iter()
                    .filter_map(|(f, c)| row.get(*c).map(|v| (f.to_string(), v.to_string())))
                    .collect();
                out.push(SourceRecord {
                    source: kind,
                    id,
                    fields,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub prompt: String,
    pub target: String,
    pub dimension: Dimension,
    pub source: SourceKind,
    pub source_id: String,
}

impl TrainingRecord {
    fn build(
        rec: &SourceRecord,
        field: &str,
        situation: &str,
        dimension: Dimension,
        target: String,
    ) -> Result<Self, CorpusError> {
        for marker in ["[SITUATION]", "[QUERY]"] {
            if situation.contains(marker) {
                return Err(CorpusError::InvalidField {
                    kind: rec.source,
                    id: rec.id.clone(),
                    field: field.to_string(),
                    reason: format!("contains the reserved marker {marker}"),
                });
            }
        }
        Ok(TrainingRecord {
            prompt: format!("[SITUATION] {situation} [QUERY] {}", dimension.keyword()),
            target,
            dimension,
            source: rec.source,
            source_id: rec.id.clone(),
        })
    }

    /// Prompt has the canonical shape and its keyword agrees with `dimension`.
    pub fn is_well_formed(&self) -> bool {
        PROMPT_RE
            .captures(&self.prompt)
            .and_then(|c| Dimension::from_keyword(c.get(1)?.as_str()))
            == Some(self.dimension)
            && self.prompt.matches("[SITUATION]").count() == 1
            && self.prompt.matches("[QUERY]").count() == 1
    }

    /// The situation text between the two markers.
    pub fn situation(&self) -> Option<&str> {
        crate::gateway::parse_elaboration_question(&self.prompt).map(|(s, _)| s)
    }
}

/// Emotion and motivation records, one per distinct annotation of a
/// (sentence, character) pair.
pub fn build_story_commonsense(records: &[SourceRecord]) -> Result<Vec<TrainingRecord>, CorpusError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for rec in records {
        rec.expect_source(SourceKind::StoryCommonsense)?;
        let sentence = rec.require("sentence")?;
        let character = rec.require("character")?;
        let mut any = false;
        for (field, dimension) in [("emotion", Dimension::Emotion), ("motivation", Dimension::Motivation)] {
            let Some(answer) = rec.field(field) else { continue };
            any = true;
            let answer = collapse_ws(answer);
            let target = if answer == NONE_ANNOTATION {
                NONE_TARGET.to_string()
            } else {
                templatize_answer(&character, dimension, &answer).map_err(|e| CorpusError::InvalidField {
                    kind: rec.source,
                    id: rec.id.clone(),
                    field: field.to_string(),
                    reason: e.to_string(),
                })?
            };
            if seen.insert((sentence.clone(), character.clone(), dimension, target.clone())) {
                out.push(TrainingRecord::build(rec, "sentence", &sentence, dimension, target)?);
            }
        }
        if !any {
            return Err(CorpusError::MissingField {
                kind: rec.source,
                id: rec.id.clone(),
                field: "emotion|motivation".into(),
            });
        }
    }
    Ok(out)
}

/// One rule-of-thumb record per (situation, rot) row.
pub fn build_social_chemistry(records: &[SourceRecord]) -> Result<Vec<TrainingRecord>, CorpusError> {
    records
        .iter()
        .map(|rec| {
            rec.expect_source(SourceKind::SocialChemistry)?;
            let situation = rec.require("situation")?;
            let rot = rec.require("rot")?;
            TrainingRecord::build(rec, "situation", &situation, Dimension::RuleOfThumb, rot)
        })
        .collect()
}

/// Two consequence records per story: moral then immoral branch.
pub fn build_moral_stories(records: &[SourceRecord]) -> Result<Vec<TrainingRecord>, CorpusError> {
    let mut out = Vec::with_capacity(records.len() * 2);
    for rec in records {
        rec.expect_source(SourceKind::MoralStories)?;
        let situation = rec.require("situation")?;
        for (action, consequence) in [
            ("moral_action", "moral_consequence"),
            ("immoral_action", "immoral_consequence"),
        ] {
            let text = format!("{situation} {}", rec.require(action)?);
            out.push(TrainingRecord::build(
                rec,
                action,
                &text,
                Dimension::Consequence,
                rec.require(consequence)?,
            )?);
        }
    }
    Ok(out)
}

pub fn build(kind: SourceKind, records: &[SourceRecord]) -> Result<Vec<TrainingRecord>, CorpusError> {
    match kind {
        SourceKind::StoryCommonsense => build_story_commonsense(records),
        SourceKind::SocialChemistry => build_social_chemistry(records),
        SourceKind::MoralStories => build_moral_stories(records),
    }
}

pub fn group_by_dimension(records: Vec<TrainingRecord>) -> BTreeMap<Dimension, Vec<TrainingRecord>> {
    let mut groups: BTreeMap<Dimension, Vec<TrainingRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.dimension).or_default().push(r);
    }
    groups
}

fn shuffle_groups(groups: &mut BTreeMap<Dimension, Vec<TrainingRecord>>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for d in Dimension::ALL {
        if let Some(g) = groups.get_mut(&d) {
            g.shuffle(&mut rng);
        }
    }
}

/// Shuffles each group with `seed`, then takes one record from each
/// non-exhausted group in turn (rule of thumb, emotion, motivation, consequence).
pub fn interleave(mut groups: BTreeMap<Dimension, Vec<TrainingRecord>>, seed: u64) -> Vec<TrainingRecord> {
    shuffle_groups(&mut groups, seed);
    let total = groups.values().map(Vec::len).sum();
    let mut queues: Vec<std::vec::IntoIter<TrainingRecord>> = Dimension::ALL
        .iter()
        .filter_map(|d| groups.remove(d))
        .map(Vec::into_iter)
        .collect();
    let mut out = Vec::with_capacity(total);
    while out.len() < total {
        for q in queues.iter_mut() {
            if let Some(r) = q.next() {
                out.push(r);
            }
        }
    }
    out
}

/// Seeded split of each dimension group; `train_fraction` of every group
/// (rounded to nearest) goes to train.
pub fn split_stratified(
    records: Vec<TrainingRecord>,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<TrainingRecord>, Vec<TrainingRecord>), CorpusError> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(CorpusError::Config(format!("split {train_fraction} is outside [0, 1]")));
    }
    let mut groups = group_by_dimension(records);
    shuffle_groups(&mut groups, seed);
    let mut train = BTreeMap::new();
    let mut dev = BTreeMap::new();
    for (d, mut g) in groups {
        let n_train = ((g.len() as f64) * train_fraction).round() as usize;
        let held = g.split_off(n_train.min(g.len()));
        train.insert(d, g);
        dev.insert(d, held);
    }
    Ok((interleave(train, seed), interleave(dev, seed)))
}

pub fn emit_training_file(records: &[TrainingRecord], path: &Path) -> Result<usize, CorpusError> {
    Ok(write_jsonl(path, records)?)
}

pub fn read_training_file(path: &Path) -> Result<Vec<TrainingRecord>, CorpusError> {
    Ok(read_jsonl(path)?)
}

/// Reference corpus sizes for full source releases.
pub const REFERENCE_SIZES: [(&str, usize); 3] =
    [("rot", 23_000), ("emotion+motivation", 35_000), ("consequence", 20_000)];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScaleLine {
    pub group: &'static str,
    pub expected: usize,
    pub actual: usize,
    pub within_tolerance: bool,
}

/// Compares corpus sizes to [`REFERENCE_SIZES`] with a relative `tolerance`.
pub fn scale_report(records: &[TrainingRecord], tolerance: f64) -> Vec<ScaleLine> {
    let count = |ds: &[Dimension]| records.iter().filter(|r| ds.contains(&r.dimension)).count();
    let actual = [
        count(&[Dimension::RuleOfThumb]),
        count(&[Dimension::Emotion, Dimension::Motivation]),
        count(&[Dimension::Consequence]),
    ];
    REFERENCE_SIZES
        .iter()
        .zip(actual)
        .map(|(&(group, expected), actual)| ScaleLine {
            group,
            expected,
            actual,
            within_tolerance: (actual as f64 - expected as f64).abs() <= tolerance * expected as f64,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sc(id: &str, fields: &[(&str, &str)]) -> SourceRecord {
        SourceRecord::new(SourceKind::StoryCommonsense, id, fields.iter().copied())
    }

    #[test]
    fn story_commonsense_templates() {
        let recs = vec![
            sc(
                "1",
                &[
                    ("sentence", "Rick saw an insect he never saw before."),
                    ("character", "Rick"),
                    ("emotion", "amazed"),
                ],
            ),
            sc(
                "2",
                &[
                    ("sentence", "Mike was at a burger restaurant."),
                    ("character", "Mike"),
                    ("motivation", "to eat"),
                ],
            ),
            sc("3", &[("sentence", "X."), ("character", "A"), ("emotion", "[none]")]),
        ];
        let out = build_story_commonsense(&recs).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out[0].target, "Rick's emotion is amazed.");
        assert_eq!(
            out[0].prompt,
            "[SITUATION] Rick saw an insect he never saw before. [QUERY] emotion"
        );
        assert_eq!(out[1].target, "Mike's motivation is to eat.");
        assert_eq!(out[1].dimension, Dimension::Motivation);
        assert_eq!(out[2].target, "none");
        assert!(out.iter().all(TrainingRecord::is_well_formed));
    }

    #[test]
    fn story_commonsense_dedups_annotators() {
        let row = |id, e| sc(id, &[("sentence", "S."), ("character", "A"), ("emotion", e)]);
        let out = build_story_commonsense(&[row("1", "happy"), row("2", "happy"), row("3", "sad")]).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].source_id, "1");
        assert_eq!(out[1].source_id, "3");
    }

    #[test]
    fn story_commonsense_missing() {
        let err = build_story_commonsense(&[sc("9", &[("sentence", "S."), ("character", "A")])]).unwrap_err();
        assert!(matches!(err, CorpusError::MissingField { ref field, .. } if field == "emotion|motivation"));
        let err = build_story_commonsense(&[sc("9", &[("sentence", "S."), ("emotion", "x")])]).unwrap_err();
        assert!(matches!(err, CorpusError::MissingField { ref field, .. } if field == "character"));
    }

    #[test]
    fn social_chemistry_rows() {
        let recs: Vec<_> = [
            (
                "smacking an airplane seat to intimidate a child.",
                "You shouldn't scare people.",
            ),
            (
                "reporting someone for cheating.",
                "It is good to report any cheating that you see.",
            ),
        ]
        .iter()
        .enumerate()
        .map(|(i, (s, r))| {
            SourceRecord::new(
                SourceKind::SocialChemistry,
                i.to_string(),
                [("situation", *s), ("rot", *r)],
            )
        })
        .collect();
        let out = build_social_chemistry(&recs).unwrap();
        assert_eq!(
            out[0].prompt,
            "[SITUATION] smacking an airplane seat to intimidate a child. [QUERY] social norm"
        );
        assert_eq!(out[0].target, "You shouldn't scare people.");
        assert_eq!(out[1].target, "It is good to report any cheating that you see.");
        assert!(build_social_chemistry(&[]).unwrap().is_empty());
        let bad = SourceRecord::new(
            SourceKind::SocialChemistry,
            "x",
            [("situation", "a [QUERY] b"), ("rot", "r")],
        );
        assert!(matches!(
            build_social_chemistry(&[bad]),
            Err(CorpusError::InvalidField { .. })
        ));
    }

    #[test]
    fn moral_stories_two_per_story() {
        let rec = SourceRecord::new(
            SourceKind::MoralStories,
            "sally",
            [
                ("situation", "Sally is starting a new school today."),
                (
                    "moral_action",
                    "Sally sees an overweight boy being made fun of by some girls and tells them to leave him alone.",
                ),
                (
                    "moral_consequence",
                    "The boy appreciates Sally standing up for him and the two become good friends.",
                ),
                (
                    "immoral_action",
                    "Sally sees some girls making fun of an overweight boy and joins in and laughs with the others.",
                ),
                (
                    "immoral_consequence",
                    "The boy has his feelings hurt and Sally feels guilty afterwards.",
                ),
            ],
        );
        let out = build_moral_stories(&[rec.clone(), rec.clone(), rec]).unwrap();
        assert_eq!(out.len(), 6);
        assert!(out[0]
            .prompt
            .ends_with("tells them to leave him alone. [QUERY] likely consequence"));
        assert_eq!(
            out[0].target,
            "The boy appreciates Sally standing up for him and the two become good friends."
        );
        assert_eq!(
            out[1].target,
            "The boy has his feelings hurt and Sally feels guilty afterwards."
        );
        assert_eq!(
            out[1].situation(),
            Some("Sally is starting a new school today. Sally sees some girls making fun of an overweight boy and joins in and laughs with the others.")
        );
    }

    #[test]
    fn wrong_source_is_rejected() {
        let rec = SourceRecord::new(SourceKind::MoralStories, "x", []);
        assert!(matches!(
            build_social_chemistry(&[rec]),
            Err(CorpusError::WrongSource { .. })
        ));
    }

    fn fake(d: Dimension, i: usize) -> TrainingRecord {
        TrainingRecord {
            prompt: format!("[SITUATION] s{i} [QUERY] {}", d.keyword()),
            target: format!("t{i}"),
            dimension: d,
            source: SourceKind::SocialChemistry,
            source_id: i.to_string(),
        }
    }

    fn groups(sizes: [usize; 4]) -> BTreeMap<Dimension, Vec<TrainingRecord>> {
        Dimension::ALL
            .iter()
            .zip(sizes)
            .filter(|(_, n)| *n > 0)
            .map(|(d, n)| (*d, (0..n).map(|i| fake(*d, i)).collect()))
            .collect()
    }

    #[test]
    fn interleave_period_four() {
        for seed in [0, 1, 99] {
            let out = interleave(groups([2, 2, 2, 2]), seed);
            let dims: Vec<_> = out.iter().map(|r| r.dimension).collect();
            assert_eq!(&dims[..4], &Dimension::ALL);
            assert_eq!(&dims[4..], &Dimension::ALL);
        }
    }

    #[test]
    fn interleave_uneven() {
        let out = interleave(groups([3, 1, 0, 0]), 5);
        let dims: Vec<_> = out.iter().map(|r| r.dimension).collect();
        use Dimension::*;
        assert_eq!(dims, vec![RuleOfThumb, Emotion, RuleOfThumb, RuleOfThumb]);
        assert_eq!(interleave(groups([3, 1, 0, 0]), 5), out);
        assert!(interleave(BTreeMap::new(), 0).is_empty());
    }

    #[test]
    fn split_is_stratified() {
        let all: Vec<_> = groups([20, 40, 0, 60]).into_values().flatten().collect();
        let (train, dev) = split_stratified(all, 0.95, 3).unwrap();
        assert_eq!(train.len() + dev.len(), 120);
        let count = |v: &[TrainingRecord], d| v.iter().filter(|r| r.dimension == d).count();
        assert_eq!(count(&dev, Dimension::RuleOfThumb), 1);
        assert_eq!(count(&dev, Dimension::Emotion), 2);
        assert_eq!(count(&dev, Dimension::Consequence), 3);
        assert!(split_stratified(vec![], 1.5, 0).is_err());
    }

    #[test]
    fn training_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train.jsonl");
        let recs: Vec<_> = (0..10).map(|i| fake(Dimension::Emotion, i)).collect();
        assert_eq!(emit_training_file(&recs, &p).unwrap(), 10);
        assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 10);
        assert_eq!(read_training_file(&p).unwrap(), recs);
        let first = std::fs::read_to_string(&p).unwrap();
        assert!(first.starts_with(
            r#"{"prompt":"[SITUATION] s0 [QUERY] emotion","target":"t0","dimension":"emotion","source":"social_chem","source_id":"0"}"#
        ));
        let empty = dir.path().join("empty.jsonl");
        assert_eq!(emit_training_file(&[], &empty).unwrap(), 0);
        assert_eq!(std::fs::read_to_string(&empty).unwrap(), "");
    }

    #[test]
    fn column_mapping_csv_and_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("sc.tsv");
        std::fs::write(&csv_path, "rid\tsit\trule\nr1\tbeing late.\tIt's rude to be late.\n").unwrap();
        let map: ColumnMap =
            toml::from_str("format = \"tsv\"\nid = \"rid\"\n[columns]\nsituation = \"sit\"\nrot = \"rule\"\n").unwrap();
        let recs = load_source(SourceKind::SocialChemistry, &csv_path, &map).unwrap();
        assert_eq!(recs[0].id, "r1");
        assert_eq!(recs[0].fields["rot"], "It's rude to be late.");

        let jl = dir.path().join("ms.jsonl");
        std::fs::write(
            &jl,
            "{\"situation\":\"s\",\"emotion\":[\"joy\",\"trust\"],\"character\":\"A\",\"sentence\":\"x\"}\n",
        )
        .unwrap();
        let map = ColumnMap {
            format: FileFormat::Jsonl,
            ..Default::default()
        };
        let recs = load_source(SourceKind::StoryCommonsense, &jl, &map).unwrap();
        assert_eq!(recs[0].id, "1");
        assert_eq!(recs[0].fields["emotion"], "joy, trust");
        assert!(!recs[0].fields.contains_key("situation"));
    }

    #[test]
    fn scale_check() {
        let recs: Vec<_> = (0..10).map(|i| fake(Dimension::RuleOfThumb, i)).collect();
        let lines = scale_report(&recs, 0.10);
        assert_eq!(lines[0].actual, 10);
        assert!(!lines[0].within_tolerance);
    }
}
