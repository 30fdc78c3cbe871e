//! Rendering records into labelled token streams.
//!
//! Narrative records render as the narration prologue followed by
//! `<|turn|>NAME<|:|>UTTERANCE<|end|>` per turn. Chat records render as
//! `<|q|>QUERY<|r|>RESPONSE<|end|>` per turn, optionally preceded by a persona
//! preamble `<|turn|>NAME<|:|>PROFILE<|end|>`. Every tag token and the
//! preamble are labelled [`Label::Format`].

use serde::{Deserialize, Serialize};

use super::records::{ChatSample, ChatTurn, DatasetRecord, NarrativeDialogue, PersonaCard};
use crate::error::{Error, Result};
use crate::microlm::tokenizer::{
    TokenId, Tokenizer, END_ID, NAME_SEP_ID, QUERY_ID, RESPONSE_ID, TURN_ID,
};

/// Supervision segment of a single token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Narration,
    CharName,
    Dialogue,
    Query,
    Response,
    Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceKind {
    Ipt,
    Sft,
}

impl SequenceKind {
    fn allows(self, label: Label) -> bool {
        match self {
            SequenceKind::Ipt => matches!(
                label,
                Label::Narration | Label::CharName | Label::Dialogue | Label::Format
            ),
            SequenceKind::Sft => matches!(label, Label::Query | Label::Response | Label::Format),
        }
    }

    fn supervised(self) -> Label {
        match self {
            SequenceKind::Ipt => Label::Dialogue,
            SequenceKind::Sft => Label::Response,
        }
    }
}

/// Which predicted positions a loss counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Dialogue,
    Response,
    Query,
    Format,
    /// Every position.
    Full,
    /// The response tokens of the last turn only.
    FinalResponse,
}

impl MaskKind {
    /// Whether sequences of `kind` can carry this mask.
    pub fn compatible(self, kind: SequenceKind) -> bool {
        match self {
            MaskKind::Dialogue => kind == SequenceKind::Ipt,
            MaskKind::Response | MaskKind::Query | MaskKind::FinalResponse => kind == SequenceKind::Sft,
            MaskKind::Format | MaskKind::Full => true,
        }
    }
}

/// Token ids with one supervision label per token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentedTokenSequence {
    tokens: Vec<TokenId>,
    labels: Vec<Label>,
    source_kind: SequenceKind,
}

/// Next-token aligned view: `targets[t] = tokens[t + 1]` and `mask[t]` refers
/// to the label of the predicted token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignedSequence {
    pub inputs: Vec<TokenId>,
    pub targets: Vec<TokenId>,
    pub mask: Vec<bool>,
}

impl AlignedSequence {
    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

impl SegmentedTokenSequence {
    pub fn new(tokens: Vec<TokenId>, labels: Vec<Label>, source_kind: SequenceKind) -> Result<Self> {
        if tokens.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} tokens but {} labels",
                tokens.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|l| !source_kind.allows(**l)) {
            return Err(Error::InvalidRecord(format!(
                "label {bad:?} not allowed in a {source_kind:?} sequence"
            )));
        }
        if !labels.contains(&source_kind.supervised()) {
            return Err(Error::InvalidRecord(format!(
                "{source_kind:?} sequence has no {:?} tokens",
                source_kind.supervised()
            )));
        }
        Ok(SegmentedTokenSequence {
            tokens,
            labels,
            source_kind,
        })
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn source_kind(&self) -> SequenceKind {
        self.source_kind
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Whether position `i` is the tag that closes a run of `label`.
    fn closes(&self, i: usize, label: Label) -> bool {
        i > 0 && self.labels[i] == Label::Format && self.labels[i - 1] == label
    }

    /// Per-token selection for `kind` (unshifted).
    ///
    /// A supervised segment owns the tag that closes it (`<|end|>` after an
    /// utterance or response, `<|r|>` after a query): that position is where
    /// a model learns to stop. Labels are untouched; `Format` selects the
    /// remaining tags, so response, query and format masks partition an sft
    /// sequence.
    pub fn token_mask(&self, kind: MaskKind) -> Vec<bool> {
        let n = self.labels.len();
        let segment = |want: Label| -> Vec<bool> {
            (0..n)
                .map(|i| self.labels[i] == want || self.closes(i, want))
                .collect()
        };
        match kind {
            MaskKind::Dialogue => segment(Label::Dialogue),
            MaskKind::Response => segment(Label::Response),
            MaskKind::Query => segment(Label::Query),
            MaskKind::Format => (0..n)
                .map(|i| {
                    self.labels[i] == Label::Format
                        && ![Label::Dialogue, Label::Query, Label::Response]
                            .iter()
                            .any(|&l| self.closes(i, l))
                })
                .collect(),
            MaskKind::Full => vec![true; n],
            MaskKind::FinalResponse => {
                let mut mask = vec![false; n];
                if let Some(end) = self.labels.iter().rposition(|&l| l == Label::Response) {
                    if end + 1 < n && self.closes(end + 1, Label::Response) {
                        mask[end + 1] = true;
                    }
                    let mut i = end as isize;
                    while i >= 0 && self.labels[i as usize] == Label::Response {
                        mask[i as usize] = true;
                        i -= 1;
                    }
                }
                mask
            }
        }
    }

    /// Shift-aligned inputs/targets/mask. The first token is never a target.
    pub fn aligned(&self, kind: MaskKind) -> AlignedSequence {
        let n = self.tokens.len();
        let mask = self.token_mask(kind);
        if n < 2 {
            return AlignedSequence {
                inputs: Vec::new(),
                targets: Vec::new(),
                mask: Vec::new(),
            };
        }
        AlignedSequence {
            inputs: self.tokens[..n - 1].to_vec(),
            targets: self.tokens[1..].to_vec(),
            mask: mask[1..].to_vec(),
        }
    }

    /// Concatenated text of all tokens carrying `label`.
    pub fn segment_text(&self, tokenizer: &Tokenizer, label: Label) -> String {
        let ids: Vec<TokenId> = self
            .tokens
            .iter()
            .zip(&self.labels)
            .filter(|(_, &l)| l == label)
            .map(|(&t, _)| t)
            .collect();
        tokenizer.detokenize(&ids)
    }

    /// A copy with every QUERY label turned into RESPONSE and vice versa.
    pub fn with_roles_swapped(&self) -> SegmentedTokenSequence {
        let labels = self
            .labels
            .iter()
            .map(|&l| match l {
                Label::Query => Label::Response,
                Label::Response => Label::Query,
                other => other,
            })
            .collect();
        SegmentedTokenSequence {
            tokens: self.tokens.clone(),
            labels,
            source_kind: self.source_kind,
        }
    }
}

/// Borrowed record accepted by [`render_and_segment`].
#[derive(Debug, Clone, Copy)]
pub enum RecordRef<'a> {
    Narrative(&'a NarrativeDialogue),
    Chat(&'a ChatSample),
}

impl<'a> From<&'a NarrativeDialogue> for RecordRef<'a> {
    fn from(r: &'a NarrativeDialogue) -> Self {
        RecordRef::Narrative(r)
    }
}

impl<'a> From<&'a ChatSample> for RecordRef<'a> {
    fn from(r: &'a ChatSample) -> Self {
        RecordRef::Chat(r)
    }
}

struct Builder<'t> {
    tokenizer: &'t Tokenizer,
    tokens: Vec<TokenId>,
    labels: Vec<Label>,
}

impl<'t> Builder<'t> {
    fn new(tokenizer: &'t Tokenizer) -> Self {
        Builder {
            tokenizer,
            tokens: Vec::new(),
            labels: Vec::new(),
        }
    }

    fn tag(&mut self, id: TokenId) {
        self.tokens.push(id);
        self.labels.push(Label::Format);
    }

    fn text(&mut self, text: &str, label: Label) {
        let ids = self.tokenizer.encode_plain(text);
        self.labels.extend(std::iter::repeat_n(label, ids.len()));
        self.tokens.extend(ids);
    }

    fn preamble(&mut self, card: &PersonaCard) {
        self.tag(TURN_ID);
        self.text(&card.name, Label::Format);
        self.tag(NAME_SEP_ID);
        self.text(&card.profile_text, Label::Format);
        self.tag(END_ID);
    }

    fn chat_turn(&mut self, turn: &ChatTurn) {
        self.tag(QUERY_ID);
        self.text(&turn.query, Label::Query);
        self.tag(RESPONSE_ID);
        self.text(&turn.response, Label::Response);
        self.tag(END_ID);
    }
}

/// Renders a record into a labelled token sequence without persona context.
pub fn render_and_segment<'a>(
    record: impl Into<RecordRef<'a>>,
    tokenizer: &Tokenizer,
) -> Result<SegmentedTokenSequence> {
    match record.into() {
        RecordRef::Narrative(n) => render_narrative(n, tokenizer),
        RecordRef::Chat(c) => render_chat(c, None, tokenizer),
    }
}

pub fn render_narrative(record: &NarrativeDialogue, tokenizer: &Tokenizer) -> Result<SegmentedTokenSequence> {
    record
        .validate()
        .map_err(|e| Error::InvalidRecord(e.to_string()))?;
    let mut b = Builder::new(tokenizer);
    b.text(&record.narration, Label::Narration);
    for turn in &record.turns {
        b.tag(TURN_ID);
        b.text(&turn.character, Label::CharName);
        b.tag(NAME_SEP_ID);
        b.text(&turn.utterance, Label::Dialogue);
        b.tag(END_ID);
    }
    SegmentedTokenSequence::new(b.tokens, b.labels, SequenceKind::Ipt)
}

/// Renders a chat sample, prefixed by the persona preamble when a card is
/// given.
pub fn render_chat(
    record: &ChatSample,
    persona: Option<&PersonaCard>,
    tokenizer: &Tokenizer,
) -> Result<SegmentedTokenSequence> {
    record
        .validate()
        .map_err(|e| Error::InvalidRecord(e.to_string()))?;
    let mut b = Builder::new(tokenizer);
    if let Some(card) = persona {
        b.preamble(card);
    }
    for turn in &record.turns {
        b.chat_turn(turn);
    }
    SegmentedTokenSequence::new(b.tokens, b.labels, SequenceKind::Sft)
}

/// Renders chat samples, resolving each `persona_id` against `cards`.
pub fn render_chat_dataset(
    samples: &[ChatSample],
    cards: &[PersonaCard],
    tokenizer: &Tokenizer,
) -> Result<Vec<SegmentedTokenSequence>> {
    let by_id: std::collections::HashMap<&str, &PersonaCard> =
        cards.iter().map(|c| (c.id.as_str(), c)).collect();
    samples
        .iter()
        .map(|s| {
            let card = match &s.persona_id {
                None => None,
                Some(id) => Some(*by_id.get(id.as_str()).ok_or_else(|| {
                    Error::InvalidRecord(format!("sample refers to unknown persona `{id}`"))
                })?),
            };
            render_chat(s, card, tokenizer)
        })
        .collect()
}

/// Position in a turn at which a generation prompt ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptOpen<'a> {
    /// Ends with `<|q|>`: the next tokens are a query.
    Query,
    /// Ends with `<|q|>QUERY<|r|>`: the next tokens are a response.
    Response(&'a str),
}

/// Renders a generation prompt: optional preamble, the completed turns, and
/// an open turn.
pub fn render_prompt(
    persona: Option<&PersonaCard>,
    turns: &[ChatTurn],
    open: PromptOpen<'_>,
    tokenizer: &Tokenizer,
) -> Vec<TokenId> {
    let mut b = Builder::new(tokenizer);
    if let Some(card) = persona {
        b.preamble(card);
    }
    for t in turns {
        b.chat_turn(t);
    }
    b.tag(QUERY_ID);
    if let PromptOpen::Response(q) = open {
        b.text(q, Label::Query);
        b.tag(RESPONSE_ID);
    }
    b.tokens
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::records::DialogueTurn;

    fn narrative() -> NarrativeDialogue {
        NarrativeDialogue {
            narration: "Rain on the roof. ".into(),
            turns: vec![
                DialogueTurn {
                    character: "Mara".into(),
                    utterance: "Come in.".into(),
                },
                DialogueTurn {
                    character: "Tom".into(),
                    utterance: "Thanks!".into(),
                },
            ],
        }
    }

    #[test]
    fn four_byte_utterance() {
        let n = NarrativeDialogue {
            narration: "N.".into(),
            turns: vec![DialogueTurn {
                character: "A".into(),
                utterance: "abcd".into(),
            }],
        };
        let s = render_and_segment(&n, &Tokenizer).unwrap();
        assert_eq!(s.labels().iter().filter(|&&l| l == Label::Dialogue).count(), 4);
    }

    #[test]
    fn detokenize_reproduces_rendered_text() {
        let s = render_and_segment(&narrative(), &Tokenizer).unwrap();
        assert_eq!(
            Tokenizer.detokenize(s.tokens()),
            "Rain on the roof. <|turn|>Mara<|:|>Come in.<|end|><|turn|>Tom<|:|>Thanks!<|end|>"
        );
        assert_eq!(s.segment_text(&Tokenizer, Label::Dialogue), "Come in.Thanks!");
        assert_eq!(s.segment_text(&Tokenizer, Label::CharName), "MaraTom");
    }

    #[test]
    fn chat_ordering() {
        let c = ChatSample::single(None, "hi", "hello");
        let s = render_and_segment(&c, &Tokenizer).unwrap();
        let first_q = s.labels().iter().position(|&l| l == Label::Query).unwrap();
        let first_r = s.labels().iter().position(|&l| l == Label::Response).unwrap();
        assert!(first_q < first_r);
        assert_eq!(Tokenizer.detokenize(s.tokens()), "<|q|>hi<|r|>hello<|end|>");
    }

    #[test]
    fn final_response_mask() {
        let c = ChatSample {
            persona_id: None,
            turns: vec![ChatTurn::new("a", "bb"), ChatTurn::new("c", "ddd")],
        };
        let s = render_and_segment(&c, &Tokenizer).unwrap();
        // Response bytes plus the closing tag of each response.
        assert_eq!(s.token_mask(MaskKind::FinalResponse).iter().filter(|&&m| m).count(), 4);
        assert_eq!(s.token_mask(MaskKind::Response).iter().filter(|&&m| m).count(), 7);
    }

    #[test]
    fn closing_tags_belong_to_their_segment() {
        let c = ChatSample::single(None, "hi", "yo");
        let s = render_and_segment(&c, &Tokenizer).unwrap();
        let pick = |k| -> Vec<TokenId> {
            let m = s.token_mask(k);
            s.tokens().iter().zip(m).filter(|(_, m)| *m).map(|(&t, _)| t).collect()
        };
        assert_eq!(pick(MaskKind::Query), vec![b'h' as TokenId, b'i' as TokenId, RESPONSE_ID]);
        assert_eq!(pick(MaskKind::Response), vec![b'y' as TokenId, b'o' as TokenId, END_ID]);
        assert_eq!(pick(MaskKind::Format), vec![QUERY_ID]);
        assert_eq!(s.segment_text(&Tokenizer, Label::Response), "yo");
    }

    #[test]
    fn aligned_is_shifted() {
        let c = ChatSample::single(None, "a", "b");
        let s = render_and_segment(&c, &Tokenizer).unwrap();
        let a = s.aligned(MaskKind::Response);
        assert_eq!(a.inputs.len(), s.len() - 1);
        let idx = a.mask.iter().position(|&m| m).unwrap();
        assert_eq!(a.targets[idx], 'b' as u32);
        assert_eq!(a.inputs[idx], RESPONSE_ID);
    }

    #[test]
    fn label_alphabet_enforced() {
        let err = SegmentedTokenSequence::new(vec![1, 2], vec![Label::Query, Label::Dialogue], SequenceKind::Ipt);
        assert!(err.is_err());
        let err = SegmentedTokenSequence::new(vec![1], vec![Label::Narration], SequenceKind::Ipt);
        assert!(err.is_err());
    }

    #[test]
    fn preamble_is_format() {
        let card = PersonaCard {
            id: "x".into(),
            name: "Zed".into(),
            source_kind: crate::corpus::CardSource::Modern,
            traits: vec!["calm".into()],
            style_markers: vec![],
            profile_text: "Zed is calm.".into(),
        };
        let c = ChatSample::single(Some("x".into()), "q", "r");
        let s = render_chat(&c, Some(&card), &Tokenizer).unwrap();
        assert_eq!(s.segment_text(&Tokenizer, Label::Query), "q");
        assert!(Tokenizer.detokenize(s.tokens()).starts_with("<|turn|>Zed<|:|>Zed is calm.<|end|><|q|>"));
        let p = render_prompt(Some(&card), &[], PromptOpen::Response("q"), &Tokenizer);
        assert_eq!(&s.tokens()[..p.len()], p.as_slice());
    }
}
