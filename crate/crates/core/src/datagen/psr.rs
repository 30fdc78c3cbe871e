//! The style rewriter: a conditional generator from formal to casual text,
//! trained on pairs produced by the formalizer.

use serde::{Deserialize, Serialize};

use super::formalize::Formalizer;
use super::types::RewritePair;
use crate::corpus::{render_chat, render_prompt, ChatSample, PromptOpen, SegmentedTokenSequence};
use crate::error::{Error, Result};
use crate::microlm::tokenizer::{is_reserved, RESERVED_TAGS};
use crate::microlm::{sample, train, Checkpoint, LossKind, SampleParams, TokenId, Tokenizer, TrainConfig, TrainReport};

/// Instruction prefix placed before the formal text in every rewriter query.
pub const PSR_PREFIX: &str = "Rewrite casually: ";

pub const MIN_PSR_PAIRS: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PsrPairs {
    pub pairs: Vec<RewritePair>,
    /// Inputs where no rule fired, or whose formal side came out empty.
    pub dropped: usize,
}

pub fn build_psr_pairs(formalizer: &Formalizer, corpus: &[String]) -> Result<PsrPairs> {
    if corpus.is_empty() {
        return Err(Error::DataGen("casual corpus is empty".into()));
    }
    let mut pairs = Vec::new();
    let mut dropped = 0;
    for c in corpus {
        let f = formalizer.formalize(c);
        if f.rule_trace.is_empty() || f.text.trim().is_empty() || c.trim().is_empty() {
            dropped += 1;
            continue;
        }
        pairs.push(RewritePair {
            formal: f.text,
            casual: c.clone(),
            rule_trace: f.rule_trace,
        });
    }
    if pairs.is_empty() {
        return Err(Error::DataGen(format!(
            "all {dropped} corpus lines were dropped: no rewrite rule fired"
        )));
    }
    if dropped > 0 {
        log::info!("build_psr_pairs: dropped {dropped} of {} lines", corpus.len());
    }
    Ok(PsrPairs { pairs, dropped })
}

/// The chat sample a pair trains on: formal text as the query, casual text
/// as the response.
pub fn psr_sample(pair: &RewritePair) -> ChatSample {
    ChatSample::single(None, format!("{PSR_PREFIX}{}", pair.formal), pair.casual.clone())
}

pub fn psr_sequences(pairs: &[RewritePair]) -> Result<Vec<SegmentedTokenSequence>> {
    pairs
        .iter()
        .map(|p| render_chat(&psr_sample(p), None, &Tokenizer))
        .collect()
}

pub fn train_psr(
    pairs: &[RewritePair],
    base: &Checkpoint,
    config: &TrainConfig,
    label: &str,
) -> Result<(Checkpoint, TrainReport)> {
    if pairs.len() < MIN_PSR_PAIRS {
        return Err(Error::Training(format!(
            "the rewriter needs at least {MIN_PSR_PAIRS} pairs, got {}",
            pairs.len()
        )));
    }
    train(base, &psr_sequences(pairs)?, LossKind::Response, config, label)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PsrOutput {
    pub text: String,
    /// Decoding hit the length budget or the context window before an end tag.
    pub truncated: bool,
}

/// Byte budget for a rewrite of `text`.
pub fn psr_budget(text: &str) -> usize {
    2 * text.len() + 16
}

pub(crate) fn reserved_ids() -> Vec<TokenId> {
    RESERVED_TAGS.iter().map(|&(_, id)| id).collect()
}

/// Greedy rewrite of `text` into casual style.
pub fn apply_psr(psr: &Checkpoint, text: &str, seed: u64) -> Result<PsrOutput> {
    if text.trim().is_empty() {
        return Err(Error::DataGen("apply_psr needs nonempty text".into()));
    }
    let prompt = render_prompt(
        None,
        &[],
        PromptOpen::Response(&format!("{PSR_PREFIX}{text}")),
        &Tokenizer,
    );
    let ctx = psr.config().context_len;
    if prompt.len() >= ctx {
        return Err(Error::ContextOverflow {
            len: prompt.len(),
            context_len: ctx,
        });
    }
    let params = SampleParams {
        seed,
        ..SampleParams::greedy(psr_budget(text))
    };
    let g = sample(psr.model(), &prompt, &params, &reserved_ids())?;
    debug_assert!(g.new_tokens().iter().all(|&t| !is_reserved(t)));
    Ok(PsrOutput {
        text: Tokenizer.detokenize(g.new_tokens()).trim().to_string(),
        truncated: g.stop.is_none(),
    })
}
