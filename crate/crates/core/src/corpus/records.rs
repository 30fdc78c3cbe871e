use std::fmt;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::microlm::tokenizer::find_reserved;

/// Kind tag carried on every dataset line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Narrative,
    Chat,
    Preference,
    Card,
    Rewrite,
    SftPair,
    Qa,
    Text,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Narrative => "narrative",
            DatasetKind::Chat => "chat",
            DatasetKind::Preference => "preference",
            DatasetKind::Card => "card",
            DatasetKind::Rewrite => "rewrite",
            DatasetKind::SftPair => "sft_pair",
            DatasetKind::Qa => "qa",
            DatasetKind::Text => "text",
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A field-level validation failure.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Invalid {
    pub field: &'static str,
    pub message: String,
}

impl Invalid {
    pub fn new(field: &'static str, message: impl Into<String>) -> Self {
        Invalid {
            field,
            message: message.into(),
        }
    }
}

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// A record type that can live in a dataset file.
pub trait DatasetRecord: Serialize + DeserializeOwned + Clone {
    const KIND: DatasetKind;

    fn validate(&self) -> Result<(), Invalid>;
}

pub(crate) fn check_text(field: &'static str, text: &str, allow_empty: bool) -> Result<(), Invalid> {
    if !allow_empty && text.trim().is_empty() {
        return Err(Invalid::new(field, "must be nonempty"));
    }
    if let Some(tag) = find_reserved(text) {
        return Err(Invalid::new(field, format!("contains reserved tag {tag}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CardSource {
    Historical,
    Fiction,
    Virtual,
    Modern,
}

impl CardSource {
    pub const ALL: [CardSource; 4] = [
        CardSource::Historical,
        CardSource::Fiction,
        CardSource::Virtual,
        CardSource::Modern,
    ];
}

/// A character profile driving persona data synthesis.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PersonaCard {
    pub id: String,
    pub name: String,
    pub source_kind: CardSource,
    pub traits: Vec<String>,
    pub style_markers: Vec<String>,
    pub profile_text: String,
}

impl DatasetRecord for PersonaCard {
    const KIND: DatasetKind = DatasetKind::Card;

    fn validate(&self) -> Result<(), Invalid> {
        check_text("id", &self.id, false)?;
        check_text("name", &self.name, false)?;
        if self.traits.is_empty() {
            return Err(Invalid::new("traits", "must be nonempty"));
        }
        for t in &self.traits {
            check_text("traits", t, false)?;
        }
        if self.style_markers.is_empty() && self.source_kind != CardSource::Modern {
            return Err(Invalid::new(
                "style_markers",
                "may be empty only for modern cards",
            ));
        }
        for m in &self.style_markers {
            check_text("style_markers", m, false)?;
        }
        check_text("profile_text", &self.profile_text, true)
    }
}

/// Checks that card ids are unique within a set.
pub fn validate_card_set(cards: &[PersonaCard]) -> Result<(), Invalid> {
    let mut seen = std::collections::HashSet::new();
    for c in cards {
        c.validate()?;
        if !seen.insert(c.id.as_str()) {
            return Err(Invalid::new("id", format!("duplicate card id {}", c.id)));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DialogueTurn {
    pub character: String,
    pub utterance: String,
}

/// Narration followed by named dialogue turns.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NarrativeDialogue {
    pub narration: String,
    pub turns: Vec<DialogueTurn>,
}

impl NarrativeDialogue {
    /// Number of dialogue turns.
    pub fn turn_count(&self) -> usize {
        self.turns.len()
    }
}

impl DatasetRecord for NarrativeDialogue {
    const KIND: DatasetKind = DatasetKind::Narrative;

    fn validate(&self) -> Result<(), Invalid> {
        check_text("narration", &self.narration, true)?;
        if self.turns.is_empty() {
            return Err(Invalid::new("turns", "at least one turn required"));
        }
        for t in &self.turns {
            check_text("character", &t.character, false)?;
            check_text("utterance", &t.utterance, false)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChatTurn {
    pub query: String,
    pub response: String,
}

impl ChatTurn {
    pub fn new(query: impl Into<String>, response: impl Into<String>) -> Self {
        ChatTurn {
            query: query.into(),
            response: response.into(),
        }
    }
}

/// A multi-turn query/response sample.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChatSample {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub persona_id: Option<String>,
    pub turns: Vec<ChatTurn>,
}

impl ChatSample {
    pub fn single(persona_id: Option<String>, query: impl Into<String>, response: impl Into<String>) -> Self {
        ChatSample {
            persona_id,
            turns: vec![ChatTurn::new(query, response)],
        }
    }

    pub fn k(&self) -> usize {
        self.turns.len()
    }
}

impl DatasetRecord for ChatSample {
    const KIND: DatasetKind = DatasetKind::Chat;

    fn validate(&self) -> Result<(), Invalid> {
        if let Some(p) = &self.persona_id {
            check_text("persona_id", p, false)?;
        }
        if self.turns.is_empty() {
            return Err(Invalid::new("turns", "at least one turn required"));
        }
        for t in &self.turns {
            check_text("query", &t.query, false)?;
            check_text("response", &t.response, false)?;
        }
        Ok(())
    }
}

/// Which constructor produced a rejected response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Formality,
    Truncation,
    PersonaSwap,
}

impl Criterion {
    pub const ALL: [Criterion; 3] = [
        Criterion::Formality,
        Criterion::Truncation,
        Criterion::PersonaSwap,
    ];

    pub fn next(self) -> Criterion {
        match self {
            Criterion::Formality => Criterion::Truncation,
            Criterion::Truncation => Criterion::PersonaSwap,
            Criterion::PersonaSwap => Criterion::Formality,
        }
    }
}

/// A preference pair: shared context, final query, chosen and rejected
/// responses.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceSample {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub persona_id: Option<String>,
    pub context: Vec<ChatTurn>,
    pub query: String,
    pub chosen: String,
    pub rejected: String,
    pub criterion: Criterion,
}

impl PreferenceSample {
    fn with_response(&self, response: &str) -> ChatSample {
        let mut turns = self.context.clone();
        turns.push(ChatTurn::new(self.query.clone(), response));
        ChatSample {
            persona_id: self.persona_id.clone(),
            turns,
        }
    }

    pub fn chosen_sample(&self) -> ChatSample {
        self.with_response(&self.chosen)
    }

    pub fn rejected_sample(&self) -> ChatSample {
        self.with_response(&self.rejected)
    }

    /// The same pair with chosen and rejected exchanged.
    pub fn swapped(&self) -> PreferenceSample {
        PreferenceSample {
            chosen: self.rejected.clone(),
            rejected: self.chosen.clone(),
            ..self.clone()
        }
    }
}

impl DatasetRecord for PreferenceSample {
    const KIND: DatasetKind = DatasetKind::Preference;

    fn validate(&self) -> Result<(), Invalid> {
        for t in &self.context {
            check_text("context", &t.query, false)?;
            check_text("context", &t.response, false)?;
        }
        check_text("query", &self.query, false)?;
        check_text("chosen", &self.chosen, false)?;
        check_text("rejected", &self.rejected, false)?;
        if self.chosen == self.rejected {
            return Err(Invalid::new("rejected", "must differ from chosen"));
        }
        Ok(())
    }
}

/// A question with a short gold answer literal.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaItem {
    pub query: String,
    pub gold: String,
}

impl DatasetRecord for QaItem {
    const KIND: DatasetKind = DatasetKind::Qa;

    fn validate(&self) -> Result<(), Invalid> {
        check_text("query", &self.query, false)?;
        check_text("gold", &self.gold, false)
    }
}

/// A free-text line, e.g. from the casual chat corpus.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextLine {
    pub text: String,
}

impl DatasetRecord for TextLine {
    const KIND: DatasetKind = DatasetKind::Text;

    fn validate(&self) -> Result<(), Invalid> {
        check_text("text", &self.text, false)
    }
}
