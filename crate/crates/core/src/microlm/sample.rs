use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::MicroLm;
use super::tokenizer::TokenId;
use crate::error::{Error, Result};

/// Decoding parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleParams {
    pub temperature: f64,
    pub top_k: usize,
    pub max_new: usize,
    pub seed: u64,
}

impl SampleParams {
    pub fn greedy(max_new: usize) -> Self {
        SampleParams {
            temperature: 1.0,
            top_k: 1,
            max_new,
            seed: 0,
        }
    }
}

/// Output of [`sample`]: the prefix followed by the generated ids. A hit stop
/// id is reported in `stop` and not appended.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    pub tokens: Vec<TokenId>,
    pub prefix_len: usize,
    pub stop: Option<TokenId>,
    /// The context window filled before a stop id or `max_new` was reached.
    pub hit_context_limit: bool,
}

impl Generation {
    pub fn new_tokens(&self) -> &[TokenId] {
        &self.tokens[self.prefix_len..]
    }
}

/// Autoregressive top-k sampling with temperature.
///
/// With `top_k = 1` this is greedy argmax decoding (ties go to the lower id).
pub fn sample(
    model: &MicroLm,
    prefix: &[TokenId],
    params: &SampleParams,
    stop_ids: &[TokenId],
) -> Result<Generation> {
    let ctx = model.config().context_len;
    if prefix.is_empty() {
        return Err(Error::Config("sampling needs a nonempty prefix".into()));
    }
    if prefix.len() >= ctx {
        return Err(Error::ContextOverflow {
            len: prefix.len(),
            context_len: ctx,
        });
    }
    if params.top_k == 0 || !(params.temperature > 0.0) {
        return Err(Error::Config("top_k and temperature must be positive".into()));
    }
    let mut out = Generation {
        tokens: prefix.to_vec(),
        prefix_len: prefix.len(),
        stop: None,
        hit_context_limit: false,
    };
    if params.max_new == 0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut state = model.start_decoding();
    let mut logits = Vec::new();
    for &t in prefix {
        logits = model.decode_step(&mut state, t)?;
    }
    for step in 0..params.max_new {
        let next = pick(&logits, params, &mut rng);
        if stop_ids.contains(&next) {
            out.stop = Some(next);
            break;
        }
        out.tokens.push(next);
        if out.tokens.len() >= ctx {
            out.hit_context_limit = step + 1 < params.max_new;
            break;
        }
        if step + 1 < params.max_new {
            logits = model.decode_step(&mut state, next)?;
        }
    }
    Ok(out)
}

fn pick(logits: &[f64], params: &SampleParams, rng: &mut ChaCha8Rng) -> TokenId {
    if params.top_k == 1 {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        return best as TokenId;
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(params.top_k.min(logits.len()));
    let max = logits[order[0]];
    let weights: Vec<f64> = order
        .iter()
        .map(|&i| ((logits[i] - max) / params.temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (&i, &w) in order.iter().zip(&weights) {
        if u < w {
            return i as TokenId;
        }
        u -= w;
    }
    *order.last().expect("top_k >= 1") as TokenId
}
