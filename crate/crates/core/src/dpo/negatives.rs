use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{check_text, ChatSample, Criterion, PersonaCard, PreferenceSample};
use crate::datagen::{persona_responder, Assets, Formalizer};
use crate::digest::keyed_seed;
use crate::error::{Error, Result};

/// Relative frequency of each negative constructor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NegativeMix {
    pub formality: f64,
    pub truncation: f64,
    pub persona_swap: f64,
}

impl Default for NegativeMix {
    fn default() -> Self {
        NegativeMix {
            formality: 0.4,
            truncation: 0.3,
            persona_swap: 0.3,
        }
    }
}

impl NegativeMix {
    pub fn weight(&self, c: Criterion) -> f64 {
        match c {
            Criterion::Formality => self.formality,
            Criterion::Truncation => self.truncation,
            Criterion::PersonaSwap => self.persona_swap,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = Criterion::ALL.map(|c| self.weight(c));
        if w.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
            return Err(Error::Config("negative_mix weights must be nonnegative".into()));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("negative_mix weights sum to {sum}, not 1")));
        }
        Ok(())
    }

    /// The criterion whose cumulative-weight interval contains `u` in [0, 1).
    pub fn pick(&self, u: f64) -> Criterion {
        let mut acc = 0.0;
        for c in Criterion::ALL {
            acc += self.weight(c);
            if u < acc {
                return c;
            }
        }
        // Rounding left u just above the last boundary.
        *Criterion::ALL
            .iter()
            .rev()
            .find(|&&c| self.weight(c) > 0.0)
            .unwrap_or(&Criterion::PersonaSwap)
    }
}

/// Result of [`construct_negatives`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Negatives {
    pub pairs: Vec<PreferenceSample>,
    /// Samples for which every constructor reproduced the chosen response.
    pub dropped: usize,
    /// How often each criterion was drawn, before fallback.
    pub drawn: BTreeMap<Criterion, usize>,
    /// How often each criterion produced the kept negative.
    pub used: BTreeMap<Criterion, usize>,
}

/// Cuts `text` after its first clause: everything before the first clause
/// delimiter that is followed by more text. A one-clause text comes back
/// unchanged.
pub fn truncate_first_clause(text: &str) -> String {
    let text = text.trim();
    for (i, c) in text.char_indices() {
        if matches!(c, ',' | ';' | ':' | '.' | '!' | '?') && !text[i + c.len_utf8()..].trim().is_empty() {
            let head = text[..i].trim_end();
            return if matches!(c, '.' | '!' | '?') {
                format!("{head}{c}")
            } else {
                head.to_string()
            };
        }
    }
    text.to_string()
}

/// Inputs the constructors draw on.
pub struct NegativeSources<'a> {
    pub assets: &'a Assets,
    pub formalizer: &'a Formalizer,
    pub cards: &'a [PersonaCard],
}

fn construct(
    src: &NegativeSources<'_>,
    sample: &ChatSample,
    criterion: Criterion,
    key: u64,
) -> Result<Option<String>> {
    let last = sample.turns.last().expect("validated nonempty");
    let chosen = last.response.as_str();
    let out = match criterion {
        Criterion::Formality => src.formalizer.formalize(chosen).text,
        Criterion::Truncation => truncate_first_clause(chosen),
        Criterion::PersonaSwap => {
            let others: Vec<&PersonaCard> = src
                .cards
                .iter()
                .filter(|c| Some(&c.id) != sample.persona_id.as_ref())
                .collect();
            if others.is_empty() {
                return Ok(None);
            }
            let card = others[(key % others.len() as u64) as usize];
            persona_responder(src.assets, card, &last.query, key, None)?
        }
    };
    Ok((out != chosen && check_text("rejected", &out, false).is_ok()).then_some(out))
}

/// One preference pair per generation: the final response is chosen, and a
/// constructor drawn from `mix` by `(seed, index)` builds the rejected one.
/// On a collision the next criterion in cyclic order is tried.
pub fn construct_negatives(
    generations: &[ChatSample],
    src: &NegativeSources<'_>,
    mix: &NegativeMix,
    seed: u64,
) -> Result<Negatives> {
    mix.validate()?;
    if generations.is_empty() {
        return Err(Error::DataGen("no generations to build preferences from".into()));
    }
    let mut out = Negatives::default();
    for (i, g) in generations.iter().enumerate() {
        let Some(last) = g.turns.last() else {
            return Err(Error::InvalidRecord(format!("generation {i} has no turns")));
        };
        if last.response.trim().is_empty() {
            return Err(Error::InvalidRecord(format!("generation {i} has an empty final response")));
        }
        let key = keyed_seed(seed, "negative", i as u64);
        let u = (key >> 11) as f64 / (1u64 << 53) as f64;
        let first = mix.pick(u);
        *out.drawn.entry(first).or_default() += 1;
        let mut criterion = first;
        let mut rejected = None;
        for _ in 0..Criterion::ALL.len() {
            if let Some(r) = construct(src, g, criterion, key)? {
                rejected = Some(r);
                break;
            }
            criterion = criterion.next();
        }
        match rejected {
            Some(rejected) => {
                *out.used.entry(criterion).or_default() += 1;
                out.pairs.push(PreferenceSample {
                    persona_id: g.persona_id.clone(),
                    context: g.turns[..g.turns.len() - 1].to_vec(),
                    query: last.query.clone(),
                    chosen: last.response.clone(),
                    rejected,
                    criterion,
                });
            }
            None => out.dropped += 1,
        }
    }
    if out.dropped > 0 {
        log::warn!("{} generations dropped: every negative constructor collided", out.dropped);
    }
    Ok(out)
}
