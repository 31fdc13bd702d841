//! Scene elaborations: the four tagged components and their text form.
//!
//! A serialized elaboration is a sequence of `[<tag>] <text>` segments joined
//! by single spaces, always in the order rule of thumb, emotion, motivation,
//! consequence. The four tags are the only delimiters the parser recognises,
//! so component text may contain other bracketed words but never a tag.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One conceptual facet of a scene.
///
/// The declaration order is the serialization order; `Ord` relies on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    #[serde(rename = "rot")]
    RuleOfThumb,
    Emotion,
    Motivation,
    Consequence,
}

impl Dimension {
    pub const ALL: [Dimension; 4] = [
        Dimension::RuleOfThumb,
        Dimension::Emotion,
        Dimension::Motivation,
        Dimension::Consequence,
    ];

    /// Bracketed tag used in serialized elaborations.
    pub fn tag(self) -> &'static str {
        match self {
            Dimension::RuleOfThumb => "[social norm]",
            Dimension::Emotion => "[emotion]",
            Dimension::Motivation => "[motivation]",
            Dimension::Consequence => "[likely consequence]",
        }
    }

    /// Keyword placed after `[QUERY]` in generation prompts.
    pub fn keyword(self) -> &'static str {
        match self {
            Dimension::RuleOfThumb => "social norm",
            Dimension::Emotion => "emotion",
            Dimension::Motivation => "motivation",
            Dimension::Consequence => "likely consequence",
        }
    }

    /// Short key used in JSON records (`rot`, `emotion`, ...).
    pub fn key(self) -> &'static str {
        match self {
            Dimension::RuleOfThumb => "rot",
            Dimension::Emotion => "emotion",
            Dimension::Motivation => "motivation",
            Dimension::Consequence => "consequence",
        }
    }

    pub fn from_keyword(keyword: &str) -> Option<Dimension> {
        Dimension::ALL.into_iter().find(|d| d.keyword() == keyword)
    }

    pub fn from_tag(tag: &str) -> Option<Dimension> {
        Dimension::ALL.into_iter().find(|d| d.tag() == tag)
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Dimension {
    type Err = SceneError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        Dimension::ALL
            .into_iter()
            .find(|d| d.key() == s || d.keyword() == s)
            .ok_or_else(|| SceneError::UnknownDimension(s.to_string()))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SceneError {
    #[error("unknown tag `{0}`")]
    UnknownTag(String),
    #[error("tag `{0}` appears more than once")]
    DuplicateTag(String),
    #[error("malformed segment at byte {offset}: {reason}")]
    MalformedSegment { offset: usize, reason: String },
    #[error("invalid {dimension} component: {reason}")]
    InvalidComponent { dimension: Dimension, reason: String },
    #[error("unknown dimension `{0}`")]
    UnknownDimension(String),
}

/// A scene elaboration: up to one text per [`Dimension`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "SeFields", into = "SeFields")]
pub struct SceneElaboration {
    components: BTreeMap<Dimension, String>,
}

impl SceneElaboration {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builder-style insert; fails if the text breaks a component invariant.
    pub fn with(mut self, dimension: Dimension, text: impl Into<String>) -> Result<Self, SceneError> {
        self.set(dimension, text)?;
        Ok(self)
    }

    /// Sets (or replaces) one component.
    pub fn set(&mut self, dimension: Dimension, text: impl Into<String>) -> Result<(), SceneError> {
        let text = text.into();
        validate_component(dimension, &text)?;
        self.components.insert(dimension, text);
        Ok(())
    }

    pub fn get(&self, dimension: Dimension) -> Option<&str> {
        self.components.get(&dimension).map(String::as_str)
    }

    pub fn remove(&mut self, dimension: Dimension) -> Option<String> {
        self.components.remove(&dimension)
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn dimensions(&self) -> impl Iterator<Item = Dimension> + '_ {
        self.components.keys().copied()
    }

    /// Components in serialization order.
    pub fn iter(&self) -> impl Iterator<Item = (Dimension, &str)> {
        self.components.iter().map(|(d, t)| (*d, t.as_str()))
    }

    /// Keeps only the listed dimensions.
    pub fn restricted_to<'a>(&self, keep: impl IntoIterator<Item = &'a Dimension>) -> Self {
        let keep: Vec<Dimension> = keep.into_iter().copied().collect();
        Self {
            components: self
                .components
                .iter()
                .filter(|(d, _)| keep.contains(d))
                .map(|(d, t)| (*d, t.clone()))
                .collect(),
        }
    }
}

fn validate_component(dimension: Dimension, text: &str) -> Result<(), SceneError> {
    let invalid = |reason: &str| SceneError::InvalidComponent {
        dimension,
        reason: reason.to_string(),
    };
    if text.is_empty() {
        return Err(invalid("text is empty"));
    }
    if text.trim() != text {
        return Err(invalid("text has leading or trailing whitespace"));
    }
    if let Some(d) = Dimension::ALL.into_iter().find(|d| text.contains(d.tag())) {
        return Err(invalid(&format!("text contains the reserved tag {}", d.tag())));
    }
    Ok(())
}

/// Renders `[<tag>] <text>` segments in fixed order, joined by one space.
pub fn serialize_se(se: &SceneElaboration) -> String {
    let mut out = String::new();
    for (dimension, text) in se.iter() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(dimension.tag());
        out.push(' ');
        out.push_str(text);
    }
    out
}

/// Inverse of [`serialize_se`].
pub fn parse_se(text: &str) -> Result<SceneElaboration, SceneError> {
    let mut se = SceneElaboration::new();
    let lead = text.len() - text.trim_start().len();
    let mut pos = lead;
    let end = text.trim_end().len();

    while pos < end {
        let rest = &text[pos..end];
        let Some(dimension) = Dimension::ALL.into_iter().find(|d| rest.starts_with(d.tag())) else {
            if rest.starts_with('[') {
                if let Some(close) = rest.find(']') {
                    return Err(SceneError::UnknownTag(rest[..=close].to_string()));
                }
            }
            return Err(SceneError::MalformedSegment {
                offset: pos,
                reason: "expected a component tag".to_string(),
            });
        };
        let body_start = pos + dimension.tag().len();
        let body_end = next_tag_offset(&text[body_start..end]).map_or(end, |o| body_start + o);
        let body = text[body_start..body_end].trim();
        if body.is_empty() {
            return Err(SceneError::MalformedSegment {
                offset: pos,
                reason: format!("{} has no text", dimension.tag()),
            });
        }
        if se.get(dimension).is_some() {
            return Err(SceneError::DuplicateTag(dimension.tag().to_string()));
        }
        se.set(dimension, body)?;
        pos = body_end;
    }
    Ok(se)
}

fn next_tag_offset(s: &str) -> Option<usize> {
    Dimension::ALL.into_iter().filter_map(|d| s.find(d.tag())).min()
}

/// JSON shape of an elaboration: optional text per short key.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SeFields {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rot: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    emotion: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    motivation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    consequence: Option<String>,
}

impl TryFrom<SeFields> for SceneElaboration {
    type Error = SceneError;

    fn try_from(f: SeFields) -> Result<Self, Self::Error> {
        let mut se = SceneElaboration::new();
        for (d, t) in [
            (Dimension::RuleOfThumb, f.rot),
            (Dimension::Emotion, f.emotion),
            (Dimension::Motivation, f.motivation),
            (Dimension::Consequence, f.consequence),
        ] {
            if let Some(t) = t {
                se.set(d, t)?;
            }
        }
        Ok(se)
    }
}

impl From<SceneElaboration> for SeFields {
    fn from(mut se: SceneElaboration) -> Self {
        SeFields {
            rot: se.remove(Dimension::RuleOfThumb),
            emotion: se.remove(Dimension::Emotion),
            motivation: se.remove(Dimension::Motivation),
            consequence: se.remove(Dimension::Consequence),
        }
    }
}

/// Where a stored elaboration came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeSource {
    Probe,
    Dream,
    Manual,
}

/// One line of a stored-elaborations JSONL file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredElaboration {
    pub id: String,
    pub situation: String,
    pub se: SceneElaboration,
    pub source: SeSource,
}

/// A question about a described situation, with its answer options.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SituatedExample {
    pub id: String,
    pub situation: String,
    #[serde(default)]
    pub question: String,
    pub options: Vec<String>,
    pub gold_index: usize,
    pub dataset_tag: String,
}

impl SituatedExample {
    pub const MIN_OPTIONS: usize = 2;
    pub const MAX_OPTIONS: usize = 5;

    pub fn validate(&self) -> Result<(), String> {
        let n = self.options.len();
        if !(Self::MIN_OPTIONS..=Self::MAX_OPTIONS).contains(&n) {
            return Err(format!("{} options, expected 2..=5", n));
        }
        if self.gold_index >= n {
            return Err(format!("gold index {} out of range for {} options", self.gold_index, n));
        }
        Ok(())
    }

    pub fn gold(&self) -> &str {
        &self.options[self.gold_index]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn codah_dream() -> SceneElaboration {
        SceneElaboration::new()
            .with(Dimension::RuleOfThumb, "It's good to spend time with your children.")
            .unwrap()
            .with(Dimension::Emotion, "Woman's emotion is happy.")
            .unwrap()
            .with(
                Dimension::Motivation,
                "Woman's motivation is to spend time with her daughter.",
            )
            .unwrap()
            .with(Dimension::Consequence, "was able to enjoy the company of her daughter.")
            .unwrap()
    }

    #[test]
    fn serializes_table_example() {
        assert_eq!(
            serialize_se(&codah_dream()),
            "[social norm] It's good to spend time with your children. [emotion] Woman's emotion is happy. \
             [motivation] Woman's motivation is to spend time with her daughter. \
             [likely consequence] was able to enjoy the company of her daughter."
        );
    }

    #[test]
    fn insertion_order_does_not_matter() {
        let se = SceneElaboration::new()
            .with(Dimension::Consequence, "b")
            .unwrap()
            .with(Dimension::Emotion, "a")
            .unwrap();
        assert_eq!(serialize_se(&se), "[emotion] a [likely consequence] b");
    }

    #[test]
    fn empty_and_single() {
        assert_eq!(serialize_se(&SceneElaboration::new()), "");
        let se = SceneElaboration::new()
            .with(Dimension::Emotion, "Rick's emotion is amazed.")
            .unwrap();
        assert_eq!(serialize_se(&se), "[emotion] Rick's emotion is amazed.");
    }

    #[test]
    fn parse_examples() {
        assert!(parse_se("").unwrap().is_empty());
        assert!(parse_se("   ").unwrap().is_empty());
        let se = parse_se("[social norm] You shouldn't scare people.").unwrap();
        assert_eq!(se.len(), 1);
        assert_eq!(se.get(Dimension::RuleOfThumb), Some("You shouldn't scare people."));
        assert_eq!(
            parse_se("[weather] sunny"),
            Err(SceneError::UnknownTag("[weather]".into()))
        );
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(
            parse_se("[emotion] a [emotion] b"),
            Err(SceneError::DuplicateTag(_))
        ));
        assert!(matches!(
            parse_se("no tag here"),
            Err(SceneError::MalformedSegment { .. })
        ));
        assert!(matches!(
            parse_se("[emotion] [motivation] x"),
            Err(SceneError::MalformedSegment { .. })
        ));
        assert!(matches!(parse_se("[emotion"), Err(SceneError::MalformedSegment { .. })));
    }

    #[test]
    fn brackets_inside_content_survive() {
        let se = parse_se("[emotion] I feel [mostly] fine [ok").unwrap();
        assert_eq!(se.get(Dimension::Emotion), Some("I feel [mostly] fine [ok"));
        assert_eq!(parse_se(&serialize_se(&se)).unwrap(), se);
    }

    #[test]
    fn parse_accepts_any_tag_order() {
        let se = parse_se("[likely consequence] c [social norm] r").unwrap();
        assert_eq!(serialize_se(&se), "[social norm] r [likely consequence] c");
    }

    #[test]
    fn component_invariants() {
        let mut se = SceneElaboration::new();
        assert!(se.set(Dimension::Emotion, "").is_err());
        assert!(se.set(Dimension::Emotion, " padded").is_err());
        assert!(se.set(Dimension::Emotion, "has [motivation] inside").is_err());
        assert!(se.is_empty());
    }

    #[test]
    fn tag_table_is_a_bijection() {
        for d in Dimension::ALL {
            assert_eq!(Dimension::from_tag(d.tag()), Some(d));
            assert_eq!(Dimension::from_keyword(d.keyword()), Some(d));
            assert_eq!(d.tag(), format!("[{}]", d.keyword()));
            assert_eq!(d.key().parse::<Dimension>().unwrap(), d);
        }
        let mut tags: Vec<_> = Dimension::ALL.iter().map(|d| d.tag()).collect();
        tags.dedup();
        assert_eq!(tags.len(), 4);
    }

    #[test]
    fn stored_record_json_shape() {
        let rec = StoredElaboration {
            id: "x1".into(),
            situation: "s".into(),
            se: SceneElaboration::new().with(Dimension::RuleOfThumb, "r").unwrap(),
            source: SeSource::Dream,
        };
        let json = serde_json::to_string(&rec).unwrap();
        assert_eq!(json, r#"{"id":"x1","situation":"s","se":{"rot":"r"},"source":"dream"}"#);
        let back: StoredElaboration = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rec);
        assert!(serde_json::from_str::<StoredElaboration>(
            r#"{"id":"x","situation":"s","se":{"rot":""},"source":"probe"}"#
        )
        .is_err());
    }

    #[test]
    fn restriction() {
        let se = codah_dream();
        let only = se.restricted_to(&[Dimension::Emotion]);
        assert_eq!(only.dimensions().collect::<Vec<_>>(), vec![Dimension::Emotion]);
        assert!(se.restricted_to(&[]).is_empty());
        assert_eq!(se.restricted_to(&Dimension::ALL), se);
    }

    #[test]
    fn example_validation() {
        let mut ex = SituatedExample {
            id: "a".into(),
            situation: "s".into(),
            question: String::new(),
            options: vec!["x".into()],
            gold_index: 0,
            dataset_tag: "t".into(),
        };
        assert!(ex.validate().is_err());
        ex.options.push("y".into());
        assert!(ex.validate().is_ok());
        ex.gold_index = 2;
        assert!(ex.validate().is_err());
    }
}
