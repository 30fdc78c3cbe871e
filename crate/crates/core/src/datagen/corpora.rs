//! Template corpora: casual chat lines, narrative scenes, and factual pairs.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::assets::Assets;
use super::fill;
use super::responder::persona_draft;
use super::types::SftPair;
use crate::corpus::{DialogueTurn, NarrativeDialogue, PersonaCard};
use crate::digest::keyed_seed;
use crate::error::{Error, Result};

fn rng_for(seed: u64, label: &str, i: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(keyed_seed(seed, label, i as u64))
}

/// `n` distinct casual chat lines.
pub fn casual_corpus(assets: &Assets, n: usize, seed: u64) -> Result<Vec<String>> {
    let opens = assets.bank("casual_open", None)?;
    let bodies = assets.bank("casual_body", None)?;
    let acts = assets.bank("activity", None)?;
    let tails = assets.bank("casual_tail", None)?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    let mut i = 0;
    while out.len() < n {
        if i >= 50 * n.max(1) {
            return Err(Error::DataGen(format!(
                "casual templates yield fewer than {n} distinct lines"
            )));
        }
        let mut rng = rng_for(seed, "casual", i);
        i += 1;
        let body = fill(bodies.choose(&mut rng).expect("nonempty"), &[("act", acts.choose(&mut rng).expect("nonempty"))]);
        let line = format!(
            "{}{}{}",
            opens.choose(&mut rng).expect("nonempty"),
            body,
            tails.choose(&mut rng).expect("nonempty")
        );
        if seen.insert(line.clone()) {
            out.push(line);
        }
    }
    Ok(out)
}

/// `n` short scenes between pairs of cards.
pub fn narrative_corpus(
    assets: &Assets,
    cards: &[PersonaCard],
    n: usize,
    seed: u64,
) -> Result<Vec<NarrativeDialogue>> {
    if cards.len() < 2 {
        return Err(Error::DataGen("narrative scenes need at least two cards".into()));
    }
    let places = assets.bank("place", None)?;
    let narrations = assets.bank("narration", None)?;
    let lines = assets.bank("line", None)?;
    (0..n)
        .map(|i| {
            let mut rng = rng_for(seed, "scene", i);
            let pair: Vec<&PersonaCard> = cards.choose_multiple(&mut rng, 2).collect();
            let narration = fill(
                narrations.choose(&mut rng).expect("nonempty"),
                &[
                    ("place", places.choose(&mut rng).expect("nonempty")),
                    ("a", &pair[0].name),
                    ("b", &pair[1].name),
                ],
            );
            let turns = (0..rng.gen_range(2..=4))
                .map(|t| {
                    let card = pair[t % 2];
                    let utterance = if rng.gen_bool(0.5) {
                        lines.choose(&mut rng).expect("nonempty").clone()
                    } else {
                        persona_draft(assets, card, rng.gen())?
                    };
                    Ok(DialogueTurn {
                        character: card.name.clone(),
                        utterance,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(NarrativeDialogue { narration, turns })
        })
        .collect()
}

/// Every factual pair the assets support: the fact table plus one-digit sums.
pub fn factual_pool(assets: &Assets) -> Vec<SftPair> {
    let mut out: Vec<SftPair> = assets
        .facts
        .iter()
        .map(|f| SftPair::plain(f.query.clone(), f.answer.clone()))
        .collect();
    for a in 0..10 {
        for b in 0..10 {
            out.push(SftPair::plain(format!("What is {a}+{b}?"), (a + b).to_string()));
        }
    }
    out
}

/// `n` factual pairs drawn without replacement from [`factual_pool`].
pub fn factual_pairs(assets: &Assets, n: usize, seed: u64) -> Result<Vec<SftPair>> {
    let pool = factual_pool(assets);
    if n > pool.len() {
        return Err(Error::DataGen(format!(
            "{n} factual pairs requested, pool holds {}",
            pool.len()
        )));
    }
    let mut rng = rng_for(seed, "facts", 0);
    Ok(pool.choose_multiple(&mut rng, n).cloned().collect())
}
