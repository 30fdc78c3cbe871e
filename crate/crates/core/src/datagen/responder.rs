//! Template responder standing in for few-shot persona generation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::assets::Assets;
use super::cards::card_role;
use super::fill;
use super::psr::apply_psr;
use crate::corpus::{check_text, CardSource, PersonaCard};
use crate::digest::derive_seed;
use crate::error::Result;
use crate::microlm::Checkpoint;

/// An answer skeleton from the card's source-kind bank, before markers.
pub fn persona_draft(assets: &Assets, card: &PersonaCard, seed: u64) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let skeleton = assets.bank("skeleton", Some(card.source_kind))?.choose(&mut rng).expect("nonempty");
    let stance = assets.bank("stance", None)?.choose(&mut rng).expect("nonempty");
    Ok(fill(
        skeleton,
        &[
            ("stance", stance),
            ("role", card_role(assets, card)),
            ("trait1", &card.traits[0]),
        ],
    ))
}

/// Prefixes one of the card's style markers, if it has any.
pub fn infuse_markers(card: &PersonaCard, text: &str, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match card.style_markers.choose(&mut rng) {
        None => text.to_string(),
        Some(m) if m.ends_with(|c: char| c.is_ascii_punctuation()) => format!("{m} {text}"),
        Some(m) => format!("{m}! {text}"),
    }
}

/// A persona-styled answer to `query`. Modern cards' drafts go through the
/// rewriter first when one is supplied; markers are added afterwards so the
/// rewrite cannot drop them.
pub fn persona_responder(
    assets: &Assets,
    card: &PersonaCard,
    query: &str,
    seed: u64,
    psr: Option<&Checkpoint>,
) -> Result<String> {
    let key = derive_seed(seed, &[card.id.as_bytes(), query.as_bytes()]);
    let mut draft = persona_draft(assets, card, key)?;
    if let (CardSource::Modern, Some(psr)) = (card.source_kind, psr) {
        let out = apply_psr(psr, &draft, key)?;
        if check_text("response", &out.text, false).is_ok() {
            draft = out.text;
        } else {
            log::debug!("rewriter output unusable for card {}, keeping the draft", card.id);
        }
    }
    Ok(infuse_markers(card, &draft, key.wrapping_add(1)))
}
