//! Deterministic casual-to-formal rewriting.
//!
//! Rules run in a fixed order:
//!
//! | id | effect |
//! |----|--------|
//! | R1 | expand contractions from the rule table |
//! | R2 | delete emoticon tokens and emoji |
//! | R3 | delete interjection words |
//! | R4 | replace slang, longest phrase first; `^` entries only match clause-initially |
//! | R5 | sentence-case and enforce terminal punctuation |
//! | R6 | collapse repeated punctuation |
//!
//! The sequence repeats until the text stops changing, since a deletion can
//! expose a new match (`"!!xD"` only becomes an emoticon token once the
//! leading `!!` is tidied away). The trace lists each rule that changed the
//! text in any pass, in rule order.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::assets::Assets;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RuleId {
    R1,
    R2,
    R3,
    R4,
    R5,
    R6,
}

impl fmt::Display for RuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Formalized {
    pub text: String,
    pub rule_trace: Vec<RuleId>,
}

const MAX_PASSES: usize = 8;

struct Slang {
    words: Vec<String>,
    clause_initial: bool,
    to: String,
}

/// The rule set compiled from an asset table.
pub struct Formalizer {
    contractions: HashMap<String, String>,
    emoticons: HashSet<String>,
    interjections: HashSet<String>,
    slang: Vec<Slang>,
}

/// Emoji and pictograph code points removed by R2.
pub fn is_emoji(c: char) -> bool {
    matches!(c as u32,
        0x1F000..=0x1FAFF | 0x2600..=0x27BF | 0x2300..=0x23FF | 0x2B50 | 0x2B55 | 0xFE0F | 0x200D)
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '\'' || c == '\u{2019}'
}

/// Byte spans of words: alphanumeric runs with inner apostrophes.
pub(crate) fn word_spans(text: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    let mut push = |s: usize, e: usize| {
        let w = &text[s..e];
        let trimmed = w.trim_matches(|c| c == '\'' || c == '\u{2019}');
        if !trimmed.is_empty() {
            let off = w.find(trimmed).expect("trimmed is a substring");
            out.push((s + off, s + off + trimmed.len()));
        }
    };
    for (i, c) in text.char_indices() {
        if is_word_char(c) {
            start.get_or_insert(i);
        } else if let Some(s) = start.take() {
            push(s, i);
        }
    }
    if let Some(s) = start {
        push(s, text.len());
    }
    out
}

pub(crate) fn normalize_word(w: &str) -> String {
    w.to_lowercase().replace('\u{2019}', "'")
}

/// Carries a leading capital from `orig` over to `rep`.
fn match_case(orig: &str, rep: &str) -> String {
    let upper = orig.chars().next().is_some_and(char::is_uppercase);
    let mut chars = rep.chars();
    match chars.next() {
        Some(f) if upper && f.is_lowercase() => f.to_uppercase().chain(chars).collect(),
        _ => rep.to_string(),
    }
}

fn apply_edits(text: &str, edits: &[(usize, usize, String)]) -> String {
    let mut out = String::with_capacity(text.len());
    let mut at = 0;
    for (s, e, rep) in edits {
        out.push_str(&text[at..*s]);
        out.push_str(rep);
        at = *e;
    }
    out.push_str(&text[at..]);
    out
}

struct Patterns {
    space_before: Regex,
    comma_run: Regex,
    comma_term: Regex,
    term_run: Regex,
    laugh: Regex,
}

fn patterns() -> &'static Patterns {
    static P: OnceLock<Patterns> = OnceLock::new();
    P.get_or_init(|| Patterns {
        space_before: Regex::new(r" +([,.!?;:])").unwrap(),
        comma_run: Regex::new(r",{2,}").unwrap(),
        comma_term: Regex::new(r",([.!?])").unwrap(),
        term_run: Regex::new(r"([.!?])[.!?]+").unwrap(),
        laugh: Regex::new(r"^(?:(?:ha){2,}h?|(?:he){2,}|l+o+l+|a+w+|u+g+h+|h+m+)$").unwrap(),
    })
}

/// Whitespace and stray-punctuation repair after deletions.
fn tidy(text: &str) -> String {
    let p = patterns();
    let mut cur = text.split_whitespace().collect::<Vec<_>>().join(" ");
    loop {
        let mut next = p.space_before.replace_all(&cur, "$1").into_owned();
        next = next
            .trim_start_matches(|c: char| ",.!?;:".contains(c) || c.is_whitespace())
            .to_string();
        next = p.comma_run.replace_all(&next, ",").into_owned();
        next = p.comma_term.replace_all(&next, "$1").into_owned();
        if next == cur {
            return cur;
        }
        cur = next;
    }
}

impl Formalizer {
    pub fn new(assets: &Assets) -> Formalizer {
        let mut f = Formalizer {
            contractions: HashMap::new(),
            emoticons: HashSet::new(),
            interjections: HashSet::new(),
            slang: Vec::new(),
        };
        for r in &assets.rules {
            let to = r.to.clone().unwrap_or_default();
            match r.rule.as_str() {
                "R1" => {
                    f.contractions.insert(normalize_word(&r.from), to);
                }
                "R2" => {
                    f.emoticons.insert(r.from.to_lowercase());
                }
                "R3" => {
                    f.interjections.insert(r.from.to_lowercase());
                }
                _ => {
                    let (clause_initial, key) = match r.from.strip_prefix('^') {
                        Some(k) => (true, k),
                        None => (false, r.from.as_str()),
                    };
                    f.slang.push(Slang {
                        words: key.split_whitespace().map(normalize_word).collect(),
                        clause_initial,
                        to,
                    });
                }
            }
        }
        // Longest phrase first, clause-initial variants before plain ones.
        f.slang
            .sort_by(|a, b| b.words.len().cmp(&a.words.len()).then(b.clause_initial.cmp(&a.clause_initial)));
        f
    }

    /// The formalizer over the built-in rule table.
    pub fn builtin() -> &'static Formalizer {
        static F: OnceLock<Formalizer> = OnceLock::new();
        F.get_or_init(|| Formalizer::new(&Assets::builtin()))
    }

    pub fn contractions(&self) -> impl Iterator<Item = &str> {
        self.contractions.keys().map(String::as_str)
    }

    pub fn interjections(&self) -> impl Iterator<Item = &str> {
        self.interjections.iter().map(String::as_str)
    }

    pub fn emoticons(&self) -> impl Iterator<Item = &str> {
        self.emoticons.iter().map(String::as_str)
    }

    pub fn is_interjection(&self, word: &str) -> bool {
        let w = word.to_lowercase();
        self.interjections.contains(&w) || patterns().laugh.is_match(&w)
    }

    /// Case-insensitive, so sentence-casing cannot turn `:d` into a new match.
    pub fn is_emoticon(&self, token: &str) -> bool {
        self.emoticons.contains(&token.to_lowercase())
    }

    pub fn formalize(&self, text: &str) -> Formalized {
        let mut trace = Vec::new();
        let mut cur = text.to_string();
        for _ in 0..MAX_PASSES {
            let next = self.pass(&cur, &mut trace);
            if next == cur {
                break;
            }
            cur = next;
        }
        trace.sort();
        trace.dedup();
        Formalized {
            text: cur,
            rule_trace: trace,
        }
    }

    fn pass(&self, text: &str, trace: &mut Vec<RuleId>) -> String {
        let mut cur = text.to_string();
        let steps: [(RuleId, fn(&Formalizer, &str) -> String); 6] = [
            (RuleId::R1, Formalizer::r1),
            (RuleId::R2, Formalizer::r2),
            (RuleId::R3, Formalizer::r3),
            (RuleId::R4, Formalizer::r4),
            (RuleId::R5, |_, t| sentence_case(t)),
            (RuleId::R6, |_, t| collapse_punct(t)),
        ];
        for (id, step) in steps {
            let next = step(self, &cur);
            if next != cur {
                trace.push(id);
                cur = next;
            }
        }
        cur
    }

    fn r1(&self, text: &str) -> String {
        let edits: Vec<_> = word_spans(text)
            .into_iter()
            .filter_map(|(s, e)| {
                let w = &text[s..e];
                let rep = self.contractions.get(&normalize_word(w))?;
                Some((s, e, match_case(w, rep)))
            })
            .collect();
        apply_edits(text, &edits)
    }

    fn r2(&self, text: &str) -> String {
        let stripped: String = text.chars().filter(|&c| !is_emoji(c)).collect();
        let mut kept = Vec::new();
        let mut removed = stripped != text;
        for tok in stripped.split_whitespace() {
            if self.is_emoticon(tok) {
                removed = true;
            } else {
                kept.push(tok);
            }
        }
        if removed {
            tidy(&kept.join(" "))
        } else {
            text.to_string()
        }
    }

    fn r3(&self, text: &str) -> String {
        let mut edits = Vec::new();
        for (s, e) in word_spans(text) {
            if self.is_interjection(&text[s..e]) {
                let tail = text[e..]
                    .find(|c: char| !matches!(c, '!' | ',' | '~'))
                    .unwrap_or(text.len() - e);
                edits.push((s, e + tail, String::new()));
            }
        }
        if edits.is_empty() {
            return text.to_string();
        }
        tidy(&apply_edits(text, &edits))
    }

    fn r4(&self, text: &str) -> String {
        let spans = word_spans(text);
        let words: Vec<String> = spans.iter().map(|&(s, e)| normalize_word(&text[s..e])).collect();
        let clause_start = |i: usize| {
            let before = if i == 0 {
                &text[..spans[0].0]
            } else {
                &text[spans[i - 1].1..spans[i].0]
            };
            (i == 0 && before.chars().all(|c| !c.is_alphanumeric()))
                || before.contains(|c: char| ",;.!?:".contains(c))
        };
        let mut edits = Vec::new();
        let mut i = 0;
        while i < spans.len() {
            let hit = self.slang.iter().find(|sl| {
                let n = sl.words.len();
                i + n <= spans.len()
                    && words[i..i + n] == sl.words[..]
                    && (1..n).all(|k| text[spans[i + k - 1].1..spans[i + k].0].trim().is_empty())
                    && (!sl.clause_initial || clause_start(i))
            });
            match hit {
                Some(sl) => {
                    let n = sl.words.len();
                    let (s, e) = (spans[i].0, spans[i + n - 1].1);
                    edits.push((s, e, match_case(&text[s..e], &sl.to)));
                    i += n;
                }
                None => i += 1,
            }
        }
        apply_edits(text, &edits)
    }
}

fn sentence_case(text: &str) -> String {
    let body = text
        .trim_end()
        .trim_end_matches(|c: char| ",;:".contains(c) || c.is_whitespace());
    let mut out = String::with_capacity(body.len() + 1);
    let mut cap_next = true;
    let mut after_term = false;
    for c in body.chars() {
        if cap_next && c.is_alphanumeric() {
            cap_next = false;
            if c.is_lowercase() {
                out.extend(c.to_uppercase());
                continue;
            }
        }
        out.push(c);
        if ".!?".contains(c) {
            after_term = true;
        } else if c.is_whitespace() {
            if after_term {
                cap_next = true;
            }
            after_term = false;
        } else {
            after_term = false;
        }
    }
    if !out.is_empty() && !out.ends_with(['.', '!', '?']) {
        out.push('.');
    }
    out
}

fn collapse_punct(text: &str) -> String {
    let p = patterns();
    let t = p.term_run.replace_all(text, "$1");
    p.comma_run.replace_all(&t, ",").into_owned()
}

/// [`Formalizer::formalize`] with the built-in rule table.
pub fn formalize(text: &str) -> Formalized {
    Formalizer::builtin().formalize(text)
}
