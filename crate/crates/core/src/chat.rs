//! Interactive chat with a trained checkpoint.

use std::io::{BufRead, Write};

use crate::corpus::{render_prompt, ChatSample, ChatTurn, PersonaCard, PromptOpen};
use crate::datagen::reserved_ids;
use crate::digest::keyed_seed;
use crate::error::{Error, Result};
use crate::microlm::{sample, Checkpoint, SampleParams, Tokenizer};

/// Decoding settings for a session.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChatParams {
    pub temperature: f64,
    pub top_k: usize,
    pub max_new: usize,
}

impl Default for ChatParams {
    fn default() -> Self {
        ChatParams {
            temperature: 0.8,
            top_k: 40,
            max_new: 96,
        }
    }
}

/// One reply, plus the number of old turns dropped from the prompt to fit it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reply {
    pub text: String,
    pub evicted: usize,
}

pub struct ChatSession<'a> {
    model: &'a Checkpoint,
    persona: Option<&'a PersonaCard>,
    params: ChatParams,
    seed: u64,
    /// Replies drawn since the last reseed; keys the sampling seed.
    draws: u64,
    turns: Vec<ChatTurn>,
    /// Turns before this index no longer fit in the prompt.
    window: usize,
}

impl<'a> ChatSession<'a> {
    pub fn new(model: &'a Checkpoint, persona: Option<&'a PersonaCard>, params: ChatParams, seed: u64) -> Self {
        ChatSession {
            model,
            persona,
            params,
            seed,
            draws: 0,
            turns: Vec::new(),
            window: 0,
        }
    }

    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.draws = 0;
    }

    pub fn turns(&self) -> &[ChatTurn] {
        &self.turns
    }

    /// Every completed turn, including evicted ones.
    pub fn transcript(&self) -> ChatSample {
        ChatSample {
            persona_id: self.persona.map(|c| c.id.clone()),
            turns: self.turns.clone(),
        }
    }

    pub fn respond(&mut self, query: &str) -> Result<Reply> {
        let ctx = self.model.config().context_len;
        let budget = ctx.saturating_sub(self.params.max_new).max(1);
        let open = PromptOpen::Response(query);
        let mut evicted = 0;
        let prompt = loop {
            let p = render_prompt(self.persona, &self.turns[self.window..], open, &Tokenizer);
            if p.len() <= budget || self.window == self.turns.len() {
                break p;
            }
            self.window += 1;
            evicted += 1;
        };
        if prompt.len() >= ctx {
            return Err(Error::ContextOverflow {
                len: prompt.len(),
                context_len: ctx,
            });
        }
        let params = SampleParams {
            temperature: self.params.temperature,
            top_k: self.params.top_k,
            max_new: self.params.max_new,
            seed: keyed_seed(self.seed, "chat", self.draws),
        };
        self.draws += 1;
        let g = sample(self.model.model(), &prompt, &params, &reserved_ids())?;
        let text = Tokenizer.detokenize(g.new_tokens()).trim().to_string();
        // An empty reply cannot be stored as a turn; keep a placeholder.
        let stored = if text.is_empty() { "...".to_string() } else { text.clone() };
        self.turns.push(ChatTurn::new(query, stored));
        Ok(Reply { text, evicted })
    }

    /// Line-oriented loop. `/quit` ends the session and `/seed N` reseeds;
    /// every other nonblank line is a query. Returns the transcript.
    pub fn run(&mut self, input: impl BufRead, mut output: impl Write) -> Result<ChatSample> {
        let io = |e| Error::io("<chat output>", e);
        for line in input.lines() {
            let line = line.map_err(|e| Error::io("<chat input>", e))?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if line == "/quit" {
                break;
            }
            if let Some(arg) = line.strip_prefix("/seed") {
                match arg.trim().parse() {
                    Ok(s) => {
                        self.reseed(s);
                        writeln!(output, "[seed {s}]").map_err(io)?;
                    }
                    Err(_) => writeln!(output, "[usage: /seed N]").map_err(io)?,
                }
                continue;
            }
            let reply = self.respond(line)?;
            if reply.evicted > 0 {
                writeln!(output, "[dropped {} old turn(s) from the context]", reply.evicted).map_err(io)?;
            }
            let name = self.persona.map_or("bot", |c| c.name.as_str());
            writeln!(output, "{name}: {}", reply.text).map_err(io)?;
        }
        output.flush().map_err(io)?;
        Ok(self.transcript())
    }
}
