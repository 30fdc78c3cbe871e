use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::corpus::ChatSample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    pub min_turn_chars: usize,
    pub max_turn_chars: usize,
    /// Character n-gram size for near-duplicate detection.
    pub near_dup_ngram: usize,
    /// Samples at or above this Jaccard similarity to a kept one are dropped.
    pub near_dup_jaccard: f64,
    pub require_nonempty_both_roles: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            min_turn_chars: 2,
            max_turn_chars: 400,
            near_dup_ngram: 3,
            near_dup_jaccard: 0.9,
            require_nonempty_both_roles: true,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_turn_chars == 0 || self.min_turn_chars >= self.max_turn_chars {
            return Err(Error::Config("filter needs 0 < min_turn_chars < max_turn_chars".into()));
        }
        if self.near_dup_ngram == 0 {
            return Err(Error::Config("near_dup_ngram must be positive".into()));
        }
        if !(self.near_dup_jaccard > 0.0 && self.near_dup_jaccard < 1.0) {
            return Err(Error::Config("near_dup_jaccard must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Counts of what [`filter_samples`] removed, by reason.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterStats {
    pub out_of_bounds: usize,
    pub empty_role: usize,
    pub exact_duplicate: usize,
    pub near_duplicate: usize,
}

impl FilterStats {
    pub fn dropped(&self) -> usize {
        self.out_of_bounds + self.empty_role + self.exact_duplicate + self.near_duplicate
    }
}

/// Set of character n-grams of `text`. Texts shorter than `n` contribute
/// themselves as a single gram.
pub fn char_ngrams(text: &str, n: usize) -> HashSet<String> {
    let chars: Vec<char> = text.chars().collect();
    if chars.len() < n {
        return std::iter::once(text.to_string()).filter(|t| !t.is_empty()).collect();
    }
    chars.windows(n).map(|w| w.iter().collect()).collect()
}

/// |A ∩ B| / |A ∪ B|; two empty sets are identical.
pub fn jaccard(a: &HashSet<String>, b: &HashSet<String>) -> f64 {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let inter = small.iter().filter(|g| large.contains(*g)).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn sample_text(s: &ChatSample) -> String {
    let mut out = String::new();
    if let Some(p) = &s.persona_id {
        out.push_str(p);
        out.push('\u{1}');
    }
    for t in &s.turns {
        out.push_str(&t.query);
        out.push('\u{1}');
        out.push_str(&t.response);
        out.push('\u{1}');
    }
    out
}

/// Drops out-of-bounds turns, empty roles, exact duplicates and near
/// duplicates, comparing against `existing` and everything kept so far.
/// Order is preserved.
pub fn filter_samples(
    raw: &[ChatSample],
    existing: &[ChatSample],
    config: &FilterConfig,
) -> (Vec<ChatSample>, FilterStats) {
    let mut stats = FilterStats::default();
    let mut seen: HashSet<&ChatSample> = existing.iter().collect();
    let mut grams: Vec<HashSet<String>> = existing
        .iter()
        .map(|s| char_ngrams(&sample_text(s), config.near_dup_ngram))
        .collect();
    let mut kept = Vec::new();
    for s in raw {
        let empty = s.turns.is_empty()
            || (config.require_nonempty_both_roles
                && s.turns.iter().any(|t| t.query.trim().is_empty() || t.response.trim().is_empty()));
        if empty {
            stats.empty_role += 1;
            continue;
        }
        let bounded = |t: &str| (config.min_turn_chars..=config.max_turn_chars).contains(&t.chars().count());
        if !s.turns.iter().all(|t| bounded(&t.query) && bounded(&t.response)) {
            stats.out_of_bounds += 1;
            continue;
        }
        if seen.contains(s) {
            stats.exact_duplicate += 1;
            continue;
        }
        let g = char_ngrams(&sample_text(s), config.near_dup_ngram);
        if grams.iter().any(|o| jaccard(&g, o) >= config.near_dup_jaccard) {
            stats.near_duplicate += 1;
            continue;
        }
        seen.insert(s);
        grams.push(g);
        kept.push(s.clone());
    }
    (kept, stats)
}
