//! Rating tasks handed to the annotation front end, and the schema its
//! exports must satisfy.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::metrics::{ConsistencyScore, RubricScore, SystemTag};
use crate::scene::{Dimension, SituatedExample, StoredElaboration};

#[derive(Debug, Error, PartialEq)]
pub enum TaskError {
    #[error("elaboration `{0}` has no matching example")]
    MissingExample(String),
    #[error("elaboration `{0}` is empty")]
    EmptyElaboration(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskComponent {
    pub dimension: Dimension,
    /// Human-readable heading shown next to the text.
    pub label: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatingTask {
    pub item_id: String,
    pub situation: String,
    pub question: String,
    pub options: Vec<String>,
    pub gold_index: usize,
    /// In serialization order.
    pub components: Vec<TaskComponent>,
    /// Must not be shown to raters.
    pub system: SystemTag,
}

pub fn component_label(d: Dimension) -> &'static str {
    match d {
        Dimension::RuleOfThumb => "Social norm",
        Dimension::Emotion => "Emotion",
        Dimension::Motivation => "Motivation",
        Dimension::Consequence => "Likely consequence",
    }
}

/// One task per elaboration, paired with its example by id. Output order
/// follows `elaborations`.
pub fn build_tasks(
    examples: &[SituatedExample],
    elaborations: &[(SystemTag, StoredElaboration)],
) -> Result<Vec<RatingTask>, TaskError> {
    let by_id: HashMap<&str, &SituatedExample> = examples.iter().map(|e| (e.id.as_str(), e)).collect();
    elaborations
        .iter()
        .map(|(system, stored)| {
            let ex = by_id
                .get(stored.id.as_str())
                .ok_or_else(|| TaskError::MissingExample(stored.id.clone()))?;
            if stored.se.is_empty() {
                return Err(TaskError::EmptyElaboration(stored.id.clone()));
            }
            Ok(RatingTask {
                item_id: stored.id.clone(),
                situation: ex.situation.clone(),
                question: ex.question.clone(),
                options: ex.options.clone(),
                gold_index: ex.gold_index,
                components: stored
                    .se
                    .iter()
                    .map(|(d, text)| TaskComponent {
                        dimension: d,
                        label: component_label(d).into(),
                        text: text.into(),
                    })
                    .collect(),
                system: *system,
            })
        })
        .collect()
}

/// Three-level rating choice and its score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatingChoice {
    Yes,
    ABit,
    No,
}

impl RatingChoice {
    pub const ALL: [RatingChoice; 3] = [RatingChoice::Yes, RatingChoice::ABit, RatingChoice::No];

    pub fn score(self) -> RubricScore {
        match self {
            RatingChoice::Yes => RubricScore::YES,
            RatingChoice::ABit => RubricScore::A_BIT,
            RatingChoice::No => RubricScore::NO,
        }
    }
}

/// Consistency level names, index i scoring i/4.
pub const CONSISTENCY_LEVELS: [&str; 5] = [
    "not consistent",
    "barely consistent",
    "somewhat consistent",
    "largely consistent",
    "all consistent",
];

pub fn consistency_for_level(level: u8) -> Option<ConsistencyScore> {
    ConsistencyScore::from_level(level)
}

/// JSON Schema (draft 2020-12) for one annotation export line.
pub fn annotation_schema() -> Value {
    let keys: Vec<&str> = Dimension::ALL.iter().map(|d| d.key()).collect();
    let scores = json!({ "type": "object",
        "propertyNames": { "enum": keys },
        "additionalProperties": { "enum": RubricScore::ALPHABET },
        "minProperties": 1 });
    json!({
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "title": "annotation record",
        "type": "object",
        "additionalProperties": false,
        "required": ["item_id", "worker_id", "system", "accuracy", "usefulness", "consistency"],
        "properties": {
            "item_id": { "type": "string", "minLength": 1 },
            "worker_id": { "type": "string", "minLength": 1 },
            "system": { "enum": [SystemTag::MacawProbe.as_str(), SystemTag::Dream.as_str()] },
            "accuracy": scores,
            "usefulness": scores,
            "consistency": { "enum": ConsistencyScore::ALPHABET }
        }
    })
}
