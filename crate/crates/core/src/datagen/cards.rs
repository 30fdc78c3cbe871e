//! Combinatorial persona cards.

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::assets::Assets;
use super::fill;
use crate::corpus::{CardSource, DatasetRecord, PersonaCard};
use crate::digest::keyed_seed;
use crate::error::{Error, Result};

fn trait_pair(k: usize, n: usize) -> (usize, usize) {
    // k-th pair (i < j) in lexicographic order.
    let mut k = k;
    for i in 0..n {
        let row = n - 1 - i;
        if k < row {
            return (i, i + 1 + k);
        }
        k -= row;
    }
    unreachable!("pair index out of range")
}

fn kind_capacity(assets: &Assets, kind: CardSource) -> Result<usize> {
    let names = assets.bank("name", None)?.len();
    let epithets = assets.bank("epithet", Some(kind))?.len();
    let t = assets.bank("trait", None)?.len();
    Ok(names * epithets * (t * t.saturating_sub(1) / 2))
}

/// Number of distinct cards the generator can produce.
pub fn card_capacity(assets: &Assets) -> Result<usize> {
    CardSource::ALL.iter().map(|&k| kind_capacity(assets, k)).sum()
}

/// `n` distinct cards, source kinds assigned round-robin.
pub fn synth_persona_cards(assets: &Assets, n: usize, seed: u64) -> Result<Vec<PersonaCard>> {
    if n == 0 {
        return Err(Error::DataGen("card count must be positive".into()));
    }
    let names = assets.bank("name", None)?;
    let traits = assets.bank("trait", None)?;
    let mut picks = Vec::new();
    for (k, &kind) in CardSource::ALL.iter().enumerate() {
        let count = n / 4 + usize::from(k < n % 4);
        let cap = kind_capacity(assets, kind)?;
        if count > cap {
            return Err(Error::DataGen(format!(
                "{n} cards requested but the generator holds {} combinations",
                card_capacity(assets)?
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(keyed_seed(seed, "cards", k as u64));
        picks.push(index::sample(&mut rng, cap, count).into_vec());
    }
    let mut cards = Vec::with_capacity(n);
    for j in 0..n {
        let kind = CardSource::ALL[j % 4];
        let combo = picks[j % 4][j / 4];
        let epithets = assets.bank("epithet", Some(kind))?;
        let pairs = traits.len() * (traits.len() - 1) / 2;
        let (t1, t2) = trait_pair(combo % pairs, traits.len());
        let rest = combo / pairs;
        let epithet = &epithets[rest % epithets.len()];
        let first = &names[rest / epithets.len()];
        let name = if epithet.starts_with('.') {
            format!("{first}{epithet}")
        } else {
            format!("{first} {epithet}")
        };

        let mut rng = ChaCha8Rng::seed_from_u64(keyed_seed(seed, "card", j as u64));
        let role = assets.bank("role", Some(kind))?.choose(&mut rng).expect("nonempty");
        let markers = assets.bank("marker", Some(kind))?;
        let style_markers: Vec<String> = if kind == CardSource::Modern && j % 3 == 0 {
            Vec::new()
        } else {
            markers.choose_multiple(&mut rng, 2.min(markers.len())).cloned().collect()
        };
        let profile = assets.bank("profile", Some(kind))?.choose(&mut rng).expect("nonempty");
        let profile_text = fill(
            profile,
            &[
                ("name", &name),
                ("trait1", &traits[t1]),
                ("trait2", &traits[t2]),
                ("role", role),
            ],
        );
        let card = PersonaCard {
            id: format!("p{j:05}"),
            name,
            source_kind: kind,
            traits: vec![traits[t1].clone(), traits[t2].clone()],
            style_markers,
            profile_text,
        };
        card.validate()
            .map_err(|e| Error::DataGen(format!("generated card {}: {e}", card.id)))?;
        cards.push(card);
    }
    Ok(cards)
}

/// The card's role noun, recovered from its profile text.
pub(crate) fn card_role<'a>(assets: &'a Assets, card: &PersonaCard) -> &'a str {
    let roles = assets.bank("role", Some(card.source_kind)).unwrap_or(&[]);
    roles
        .iter()
        .find(|r| card.profile_text.contains(r.as_str()))
        .map(String::as_str)
        .unwrap_or("friend")
}
