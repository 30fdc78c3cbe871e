//! The personality dataset, the contrastive dataset, and their union.

use std::collections::{HashMap, HashSet};

use rand::seq::{IteratorRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::assets::Assets;
use super::cards::card_role;
use super::fill;
use super::responder::{infuse_markers, persona_responder};
use super::types::SftPair;
use crate::corpus::{ChatSample, ChatTurn, PersonaCard};
use crate::digest::keyed_seed;
use crate::error::{Error, Result};
use crate::microlm::Checkpoint;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonaDatasets {
    pub d_p: Vec<ChatSample>,
    pub d_c: Vec<SftPair>,
    pub d_merged: Vec<ChatSample>,
}

/// Shape of the personality dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PersonalityShape {
    /// Questions asked per sample; the last sample of a card may be shorter.
    pub turns_per_sample: usize,
    /// Questions drawn per card; `None` asks every card every question.
    #[serde(default)]
    pub questions_per_card: Option<usize>,
}

impl Default for PersonalityShape {
    fn default() -> Self {
        PersonalityShape {
            turns_per_sample: 1,
            questions_per_card: None,
        }
    }
}

pub fn build_personality_dataset(
    assets: &Assets,
    cards: &[PersonaCard],
    seed_questions: &[String],
    psr: Option<&Checkpoint>,
    seed: u64,
    shape: PersonalityShape,
) -> Result<Vec<ChatSample>> {
    if cards.is_empty() || seed_questions.is_empty() {
        return Err(Error::DataGen("personality dataset needs cards and seed questions".into()));
    }
    if shape.turns_per_sample == 0 {
        return Err(Error::DataGen("turns_per_sample must be positive".into()));
    }
    let mut out = Vec::new();
    for (ci, card) in cards.iter().enumerate() {
        let questions: Vec<&String> = match shape.questions_per_card {
            Some(m) if m < seed_questions.len() => {
                let mut rng = ChaCha8Rng::seed_from_u64(keyed_seed(seed, "questions", ci as u64));
                let mut idx = (0..seed_questions.len()).choose_multiple(&mut rng, m);
                idx.sort_unstable();
                idx.into_iter().map(|i| &seed_questions[i]).collect()
            }
            _ => seed_questions.iter().collect(),
        };
        for chunk in questions.chunks(shape.turns_per_sample) {
            let turns = chunk
                .iter()
                .map(|q| Ok(ChatTurn::new(q.as_str(), persona_responder(assets, card, q, seed, psr)?)))
                .collect::<Result<Vec<_>>>()?;
            out.push(ChatSample {
                persona_id: Some(card.id.clone()),
                turns,
            });
        }
    }
    Ok(out)
}

/// A persona-styled answer that restates the factual `answer` literally.
pub fn tailored_answer(assets: &Assets, card: &PersonaCard, answer: &str, seed: u64) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let preamble = fill(
        assets.bank("preamble", Some(card.source_kind))?.choose(&mut rng).expect("nonempty"),
        &[("role", card_role(assets, card)), ("trait1", &card.traits[0])],
    );
    let restate = fill(
        assets.bank("restate", None)?.choose(&mut rng).expect("nonempty"),
        &[("answer", answer)],
    );
    let mut head = preamble.chars();
    let preamble: String = match head.next() {
        Some(c) if card.style_markers.is_empty() => c.to_uppercase().chain(head).collect(),
        _ => preamble,
    };
    Ok(infuse_markers(card, &format!("{preamble} {restate}"), seed.wrapping_add(1)))
}

/// Each plain pair followed by `personas_per_pair` persona-tailored copies.
pub fn build_contrastive_dataset(
    assets: &Assets,
    sft_pairs: &[SftPair],
    cards: &[PersonaCard],
    seed: u64,
    personas_per_pair: usize,
) -> Result<Vec<SftPair>> {
    if cards.is_empty() {
        return Err(Error::DataGen("contrastive dataset needs at least one card".into()));
    }
    if sft_pairs.is_empty() {
        return Err(Error::DataGen("contrastive dataset needs source pairs".into()));
    }
    if let Some(p) = sft_pairs.iter().find(|p| p.persona_id.is_some()) {
        return Err(Error::DataGen(format!("source pair {:?} already carries a persona", p.query)));
    }
    let mut out = Vec::with_capacity(sft_pairs.len() * (1 + personas_per_pair));
    for (i, pair) in sft_pairs.iter().enumerate() {
        out.push(pair.clone());
        for m in 0..personas_per_pair {
            let key = keyed_seed(seed, "contrastive", (i * personas_per_pair + m) as u64);
            let card = &cards[(key % cards.len() as u64) as usize];
            out.push(SftPair {
                query: pair.query.clone(),
                answer: tailored_answer(assets, card, &pair.answer, key)?,
                persona_id: Some(card.id.clone()),
            });
        }
    }
    Ok(out)
}

/// `d_p` followed by `d_c` as one-turn samples, exact duplicates removed.
pub fn merge_final_dataset(d_p: &[ChatSample], d_c: &[SftPair]) -> Vec<ChatSample> {
    let mut seen = HashSet::new();
    d_p.iter()
        .cloned()
        .chain(d_c.iter().map(SftPair::to_chat))
        .filter(|s| seen.insert(s.clone()))
        .collect()
}

/// Replaces generated samples with hand-edited ones sharing the same
/// `(persona_id, first query)` key; unmatched overlay entries are appended.
pub fn apply_overlay(samples: Vec<ChatSample>, overlay: &[ChatSample]) -> Vec<ChatSample> {
    let key = |s: &ChatSample| (s.persona_id.clone(), s.turns.first().map(|t| t.query.clone()));
    let mut edits: HashMap<_, &ChatSample> = overlay.iter().map(|s| (key(s), s)).collect();
    let mut out: Vec<ChatSample> = samples
        .into_iter()
        .map(|s| match edits.remove(&key(&s)) {
            Some(e) => e.clone(),
            None => s,
        })
        .collect();
    out.extend(overlay.iter().filter(|s| edits.contains_key(&key(s))).cloned());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{factual_pairs, synth_persona_cards};

    fn setup() -> (Assets, Vec<PersonaCard>) {
        let a = Assets::builtin();
        let cards = synth_persona_cards(&a, 3, 1).unwrap();
        (a, cards)
    }

    #[test]
    fn personality_counts() {
        let (a, cards) = setup();
        let qs = vec!["Who are you?".to_string(), "What do you like?".to_string()];
        let d = build_personality_dataset(&a, &cards, &qs, None, 5, PersonalityShape::default()).unwrap();
        assert_eq!(d.len(), 6);
        assert!(d.iter().all(|s| s.persona_id.is_some()));
        assert_eq!(d, build_personality_dataset(&a, &cards, &qs, None, 5, PersonalityShape::default()).unwrap());
        let two = PersonalityShape {
            turns_per_sample: 2,
            questions_per_card: None,
        };
        assert_eq!(build_personality_dataset(&a, &cards, &qs, None, 5, two).unwrap().len(), 3);
        assert!(build_personality_dataset(&a, &[], &qs, None, 5, two).is_err());
    }

    #[test]
    fn contrastive_counts_and_literals() {
        let (a, cards) = setup();
        let src = factual_pairs(&a, 5, 2).unwrap();
        let d_c = build_contrastive_dataset(&a, &src, &cards, 3, 1).unwrap();
        assert_eq!(d_c.len(), 10);
        assert_eq!(d_c.iter().filter(|p| p.persona_id.is_some()).count(), 5);
        for w in d_c.chunks(2) {
            assert_eq!(w[0].query, w[1].query);
            assert!(w[1].answer.contains(&w[0].answer), "{:?}", w[1]);
        }
        assert_eq!(d_c, build_contrastive_dataset(&a, &src, &cards, 3, 1).unwrap());
        assert!(build_contrastive_dataset(&a, &src, &[], 3, 1).is_err());
        assert_eq!(build_contrastive_dataset(&a, &src, &cards, 3, 2).unwrap().len(), 15);
    }

    #[test]
    fn two_plus_two() {
        let (a, cards) = setup();
        let src = vec![SftPair::plain("What is 2+2?", "4")];
        let d_c = build_contrastive_dataset(&a, &src, &cards, 0, 1).unwrap();
        assert!(d_c[1].answer.contains('4'));
    }

    #[test]
    fn merge_semantics() {
        let p = vec![ChatSample::single(Some("a".into()), "q", "r")];
        let c = vec![SftPair::plain("x", "y"), SftPair::plain("x", "y")];
        let d = merge_final_dataset(&p, &c);
        assert_eq!(d.len(), 2);
        let back: Vec<SftPair> = vec![];
        assert_eq!(merge_final_dataset(&d, &back), d);
        let dup = vec![SftPair {
            persona_id: Some("a".into()),
            ..SftPair::plain("q", "r")
        }];
        assert_eq!(merge_final_dataset(&p, &dup).len(), 1);
    }

    #[test]
    fn overlay_replaces_by_key() {
        let base = vec![
            ChatSample::single(Some("a".into()), "q", "r"),
            ChatSample::single(Some("b".into()), "q", "r"),
        ];
        let over = vec![
            ChatSample::single(Some("b".into()), "q", "edited"),
            ChatSample::single(None, "new", "one"),
        ];
        let out = apply_overlay(base, &over);
        assert_eq!(out.len(), 3);
        assert_eq!(out[1].turns[0].response, "edited");
        assert_eq!(out[2].turns[0].query, "new");
    }
}
