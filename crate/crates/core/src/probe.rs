//! Entity extraction and the four probing questions.
//!
//! Emotion and motivation are asked once per entity found in the situation;
//! the rule-of-thumb and consequence questions are asked once per situation.
//! Per-entity answers are templated into sentences and concatenated.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{Gateway, GatewayError, GenerationRequest};
use crate::jsonl::{read_jsonl, JsonlError};
use crate::scene::{Dimension, SceneElaboration, SceneError};

/// Rendering used for the narrator of first-person situations.
pub const FIRST_PERSON: &str = "I (myself)";

pub const ROT_QUESTION: &str = "What is a rule of thumb relevant here?";
pub const CONSEQUENCE_QUESTION: &str = "What is likely to happen next?";

const FIRST_PERSON_WORDS: &[&str] = &[
    "i",
    "me",
    "my",
    "mine",
    "myself",
    "we",
    "us",
    "our",
    "ours",
    "ourselves",
];

const DEFAULT_ROLE_NOUNS: &[&str] = &[
    "woman",
    "women",
    "man",
    "men",
    "girl",
    "girls",
    "boy",
    "boys",
    "child",
    "children",
    "kid",
    "kids",
    "baby",
    "daughter",
    "son",
    "mother",
    "father",
    "mom",
    "dad",
    "parent",
    "parents",
    "wife",
    "husband",
    "sister",
    "brother",
    "sibling",
    "siblings",
    "aunt",
    "uncle",
    "cousin",
    "grandmother",
    "grandfather",
    "grandma",
    "grandpa",
    "in-laws",
    "friend",
    "friends",
    "boyfriend",
    "girlfriend",
    "partner",
    "roommate",
    "neighbor",
    "neighbors",
    "neighbour",
    "coworker",
    "coworkers",
    "co-worker",
    "co-workers",
    "colleague",
    "boss",
    "employee",
    "employer",
    "manager",
    "teacher",
    "student",
    "students",
    "classmate",
    "doctor",
    "nurse",
    "patient",
    "customer",
    "customers",
    "client",
    "waiter",
    "waitress",
    "stranger",
    "strangers",
    "family",
    "person",
    "people",
    "guest",
    "guests",
    "landlord",
    "tenant",
    "officer",
    "driver",
    "lady",
    "gentleman",
    "guy",
];

const DEFAULT_NON_ENTITIES: &[&str] = &[
    "the",
    "a",
    "an",
    "this",
    "that",
    "these",
    "those",
    "it",
    "there",
    "he",
    "she",
    "they",
    "his",
    "her",
    "their",
    "them",
    "him",
    "its",
    "what",
    "when",
    "where",
    "why",
    "how",
    "who",
    "if",
    "after",
    "before",
    "then",
    "yesterday",
    "today",
    "tomorrow",
    "monday",
    "tuesday",
    "wednesday",
    "thursday",
    "friday",
    "saturday",
    "sunday",
    "january",
    "february",
    "march",
    "april",
    "may",
    "june",
    "july",
    "august",
    "september",
    "october",
    "november",
    "december",
    "christmas",
    "reaction",
    "so",
    "but",
    "and",
    "or",
    "as",
    "at",
    "in",
    "on",
    "while",
    "because",
    "since",
];

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("templating applies only to emotion and motivation, not {0}")]
    WrongDimension(Dimension),
    #[error("empty answer for {0}")]
    EmptyAnswer(Dimension),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Sidecar(#[from] JsonlError),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Entity {
    pub surface: String,
    pub is_person: bool,
    pub is_first_person: bool,
}

impl Entity {
    pub fn first_person() -> Self {
        Entity {
            surface: FIRST_PERSON.to_string(),
            is_person: true,
            is_first_person: true,
        }
    }

    pub fn named(surface: impl Into<String>, is_person: bool) -> Self {
        Entity {
            surface: surface.into(),
            is_person,
            is_first_person: false,
        }
    }
}

/// Finds the entities a situation talks about.
pub trait EntityExtractor: Send + Sync {
    fn extract(&self, id: &str, situation: &str) -> Vec<Entity>;
}

/// Lexicons for [`RuleExtractor`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractorConfig {
    /// Lower-case nouns that denote people ("woman", "daughter", ...).
    pub role_nouns: Vec<String>,
    /// Names accepted even at the start of a sentence.
    pub known_names: Vec<String>,
    /// Capitalised words that are never entities.
    pub non_entities: Vec<String>,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        let owned = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        ExtractorConfig {
            role_nouns: owned(DEFAULT_ROLE_NOUNS),
            known_names: Vec::new(),
            non_entities: owned(DEFAULT_NON_ENTITIES),
        }
    }
}

/// Deterministic extractor: first-person pronouns, role nouns and capitalised names.
#[derive(Debug, Clone)]
pub struct RuleExtractor {
    role_nouns: HashSet<String>,
    known_names: HashSet<String>,
    non_entities: HashSet<String>,
}

impl Default for RuleExtractor {
    fn default() -> Self {
        Self::new(ExtractorConfig::default())
    }
}

struct Token<'a> {
    text: &'a str,
    sentence_initial: bool,
}

fn tokenize(text: &str) -> Vec<Token<'_>> {
    let mut tokens = Vec::new();
    let mut sentence_start = true;
    let mut start = None;
    let is_word = |c: char| c.is_alphanumeric() || c == '\'' || c == '-' || c == '\u{2019}';
    for (i, c) in text.char_indices().chain(std::iter::once((text.len(), ' '))) {
        if is_word(c) && i < text.len() {
            if start.is_none() {
                start = Some(i);
            }
            continue;
        }
        if let Some(s) = start.take() {
            let word = text[s..i].trim_matches(|c| c == '\'' || c == '-' || c == '\u{2019}');
            if !word.is_empty() {
                tokens.push(Token {
                    text: word,
                    sentence_initial: sentence_start,
                });
                sentence_start = false;
            }
        }
        if matches!(c, '.' | '!' | '?' | ':' | ';' | '\n') {
            sentence_start = true;
        }
    }
    tokens
}

fn strip_possessive(word: &str) -> &str {
    for suffix in ["'s", "\u{2019}s"] {
        if let Some(stem) = word.strip_suffix(suffix) {
            return stem;
        }
    }
    word
}

fn is_capitalized(word: &str) -> bool {
    word.chars().next().is_some_and(char::is_uppercase)
}

impl RuleExtractor {
    pub fn new(cfg: ExtractorConfig) -> Self {
        let lower = |xs: Vec<String>| xs.into_iter().map(|s| s.to_lowercase()).collect();
        RuleExtractor {
            role_nouns: lower(cfg.role_nouns),
            known_names: lower(cfg.known_names),
            non_entities: lower(cfg.non_entities),
        }
    }

    /// Extracts entities in first-mention order, without duplicates.
    pub fn extract_entities(&self, situation: &str) -> Vec<Entity> {
        let tokens = tokenize(situation);
        // Capitalised words seen away from a sentence start are taken as names
        // everywhere, including their sentence-initial mentions.
        let mid_sentence_names: HashSet<String> = tokens
            .iter()
            .filter(|t| !t.sentence_initial && is_capitalized(t.text))
            .map(|t| strip_possessive(t.text).to_lowercase())
            .collect();

        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for token in &tokens {
            let word = strip_possessive(token.text);
            let lower = word.to_lowercase();
            let entity = if FIRST_PERSON_WORDS.contains(&lower.as_str()) {
                Some(Entity::first_person())
            } else if self.role_nouns.contains(&lower) {
                Some(Entity::named(lower.clone(), true))
            } else if is_capitalized(word)
                && !self.non_entities.contains(&lower)
                && (!token.sentence_initial || mid_sentence_names.contains(&lower) || self.known_names.contains(&lower))
            {
                Some(Entity::named(word, true))
            } else {
                None
            };
            if let Some(e) = entity {
                if seen.insert(e.surface.to_lowercase()) {
                    out.push(e);
                }
            }
        }
        out
    }
}

impl EntityExtractor for RuleExtractor {
    fn extract(&self, _id: &str, situation: &str) -> Vec<Entity> {
        self.extract_entities(situation)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SidecarEntity {
    surface: String,
    #[serde(default)]
    person: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SidecarLine {
    id: String,
    entities: Vec<SidecarEntity>,
}

/// Reads entity annotations produced offline by an external NLP pipeline.
///
/// Situations without a sidecar entry have no entities.
#[derive(Debug, Clone, Default)]
pub struct SidecarExtractor {
    by_id: HashMap<String, Vec<Entity>>,
}

impl SidecarExtractor {
    pub fn load(path: &Path) -> Result<Self, ProbeError> {
        let lines: Vec<SidecarLine> = read_jsonl(path)?;
        let mut by_id = HashMap::new();
        for line in lines {
            let mut seen = HashSet::new();
            let entities = line
                .entities
                .into_iter()
                .filter_map(|e| {
                    let surface = e.surface.trim();
                    if surface.is_empty() {
                        return None;
                    }
                    let entity =
                        if FIRST_PERSON_WORDS.contains(&surface.to_lowercase().as_str()) || surface == FIRST_PERSON {
                            Entity::first_person()
                        } else {
                            Entity::named(surface, e.person)
                        };
                    seen.insert(entity.surface.to_lowercase()).then_some(entity)
                })
                .collect();
            by_id.insert(line.id, entities);
        }
        Ok(SidecarExtractor { by_id })
    }
}

impl EntityExtractor for SidecarExtractor {
    fn extract(&self, id: &str, _situation: &str) -> Vec<Entity> {
        self.by_id.get(id).cloned().unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeQuery {
    pub dimension: Dimension,
    pub entity: Option<Entity>,
    pub question: String,
}

pub fn motivation_question(entity: &str) -> String {
    format!("What is {entity}'s motivation?")
}

pub fn emotion_question(entity: &str) -> String {
    format!("What is {entity}'s emotion?")
}

/// Per entity a motivation then an emotion query, followed by the
/// rule-of-thumb and consequence queries.
pub fn queries_for_entities(entities: &[Entity]) -> Vec<ProbeQuery> {
    let mut out = Vec::with_capacity(2 * entities.len() + 2);
    for e in entities {
        out.push(ProbeQuery {
            dimension: Dimension::Motivation,
            entity: Some(e.clone()),
            question: motivation_question(&e.surface),
        });
        out.push(ProbeQuery {
            dimension: Dimension::Emotion,
            entity: Some(e.clone()),
            question: emotion_question(&e.surface),
        });
    }
    out.push(ProbeQuery {
        dimension: Dimension::RuleOfThumb,
        entity: None,
        question: ROT_QUESTION.to_string(),
    });
    out.push(ProbeQuery {
        dimension: Dimension::Consequence,
        entity: None,
        question: CONSEQUENCE_QUESTION.to_string(),
    });
    out
}

pub fn generate_probe_queries(extractor: &dyn EntityExtractor, id: &str, situation: &str) -> Vec<ProbeQuery> {
    queries_for_entities(&extractor.extract(id, situation))
}

/// Turns a short answer into "<entity>'s <dimension> is <answer>."
pub fn templatize_answer(entity: &str, dimension: Dimension, raw_answer: &str) -> Result<String, ProbeError> {
    let noun = match dimension {
        Dimension::Emotion => "emotion",
        Dimension::Motivation => "motivation",
        other => return Err(ProbeError::WrongDimension(other)),
    };
    let answer = raw_answer.trim();
    if answer.is_empty() {
        return Err(ProbeError::EmptyAnswer(dimension));
    }
    let stop = if answer.ends_with(['.', '!', '?']) { "" } else { "." };
    Ok(format!("{entity}'s {noun} is {answer}{stop}"))
}

/// Gathers probe answers into one elaboration.
///
/// Fails only if an answer contains one of the reserved component tags.
pub fn assemble_probed_se(answers: &[(ProbeQuery, String)]) -> Result<SceneElaboration, ProbeError> {
    let mut parts: Vec<(Dimension, String)> = Vec::new();
    for (query, raw) in answers {
        let raw = raw.trim();
        if raw.is_empty() {
            continue;
        }
        let sentence = match (&query.entity, query.dimension) {
            (Some(e), d @ (Dimension::Emotion | Dimension::Motivation)) => templatize_answer(&e.surface, d, raw)?,
            _ => raw.to_string(),
        };
        parts.push((query.dimension, sentence));
    }
    let mut se = SceneElaboration::new();
    for d in Dimension::ALL {
        let joined = parts
            .iter()
            .filter(|(pd, _)| *pd == d)
            .map(|(_, s)| s.as_str())
            .collect::<Vec<_>>()
            .join(" ");
        if !joined.is_empty() {
            se.set(d, joined)?;
        }
    }
    Ok(se)
}

/// Probes a QA model with every query for `situation` (given as context) and
/// assembles the answers.
pub fn probe_elaboration(
    gateway: &Gateway,
    extractor: &dyn EntityExtractor,
    id: &str,
    situation: &str,
) -> Result<SceneElaboration, ProbeError> {
    let queries = generate_probe_queries(extractor, id, situation);
    let mut answers = Vec::with_capacity(queries.len());
    for q in queries {
        let req = GenerationRequest::new(q.question.clone())?.with_context(situation);
        let resp = gateway.generate(&req)?;
        answers.push((q, resp.answer));
    }
    assemble_probed_se(&answers)
}
