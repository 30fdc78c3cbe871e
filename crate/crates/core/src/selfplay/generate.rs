use serde::{Deserialize, Serialize};

use super::SelfPlayConfig;
use crate::corpus::{check_text, render_prompt, ChatSample, ChatTurn, PersonaCard, PromptOpen};
use crate::datagen::reserved_ids;
use crate::digest::{derive_seed, keyed_seed};
use crate::error::Result;
use crate::microlm::{sample, Checkpoint, SampleParams, TokenId, Tokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Asker,
    Responder,
}

/// One decoding call made during self-play.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationEvent {
    pub dialogue: usize,
    pub turn: usize,
    pub role: Role,
    pub model_fingerprint: String,
    pub text: String,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interactions {
    pub samples: Vec<ChatSample>,
    pub log: Vec<GenerationEvent>,
    /// Dialogues that ended before completing a turn.
    pub dropped: usize,
}

struct Turn<'a> {
    model: &'a Checkpoint,
    role: Role,
    prompt: Vec<TokenId>,
    seed: u64,
}

fn decode(t: &Turn<'_>, config: &SelfPlayConfig) -> Result<Option<String>> {
    let ctx = t.model.config().context_len;
    if t.prompt.len() >= ctx {
        return Ok(None);
    }
    let params = SampleParams {
        temperature: config.temperature,
        top_k: config.top_k,
        max_new: config.max_turn_tokens,
        seed: t.seed,
    };
    let g = sample(t.model.model(), &t.prompt, &params, &reserved_ids())?;
    let text = Tokenizer.detokenize(g.new_tokens()).trim().to_string();
    Ok(check_text("generated", &text, false).is_ok().then_some(text))
}

/// Self-play between `responder` and `asker`: queries come only from the
/// asker and responses only from the responder.
pub fn generate_interactions(
    responder: &Checkpoint,
    asker: &Checkpoint,
    cards: &[PersonaCard],
    config: &SelfPlayConfig,
    iteration_seed: u64,
) -> Result<Interactions> {
    let mut out = Interactions {
        samples: Vec::new(),
        log: Vec::new(),
        dropped: 0,
    };
    for j in 0..config.gen_budget {
        let key = keyed_seed(iteration_seed, "dialogue", j as u64);
        let n_turns = 1 + (key % config.max_turns as u64) as usize;
        let persona = (config.persona_conditioning && !cards.is_empty())
            .then(|| &cards[(derive_seed(key, &[b"persona"]) % cards.len() as u64) as usize]);
        let mut turns: Vec<ChatTurn> = Vec::new();
        'turns: for turn in 0..n_turns {
            let attempts = if turn == 0 { 2 } else { 1 };
            let mut query = None;
            for attempt in 0..attempts {
                let t = Turn {
                    model: asker,
                    role: Role::Asker,
                    prompt: render_prompt(persona, &turns, PromptOpen::Query, &Tokenizer),
                    seed: derive_seed(key, &[b"ask", &(turn as u64).to_le_bytes(), &[attempt as u8]]),
                };
                let text = decode(&t, config)?;
                out.log.push(GenerationEvent {
                    dialogue: j,
                    turn,
                    role: t.role,
                    model_fingerprint: t.model.fingerprint().to_string(),
                    text: text.clone().unwrap_or_default(),
                    accepted: text.is_some(),
                });
                if text.is_some() {
                    query = text;
                    break;
                }
            }
            let Some(query) = query else { break 'turns };
            let t = Turn {
                model: responder,
                role: Role::Responder,
                prompt: render_prompt(persona, &turns, PromptOpen::Response(&query), &Tokenizer),
                seed: derive_seed(key, &[b"respond", &(turn as u64).to_le_bytes()]),
            };
            let response = decode(&t, config)?;
            out.log.push(GenerationEvent {
                dialogue: j,
                turn,
                role: t.role,
                model_fingerprint: t.model.fingerprint().to_string(),
                text: response.clone().unwrap_or_default(),
                accepted: response.is_some(),
            });
            match response {
                Some(response) => turns.push(ChatTurn { query, response }),
                None => break 'turns,
            }
        }
        if turns.is_empty() {
            out.dropped += 1;
        } else {
            out.samples.push(ChatSample {
                persona_id: persona.map(|c| c.id.clone()),
                turns,
            });
        }
    }
    Ok(out)
}
