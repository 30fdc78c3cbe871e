//! Byte-level tokenizer with five reserved template tags.

/// Token id. Ids `0..256` are raw bytes, `256..261` are the template tags.
pub type TokenId = u32;

pub const TURN_TAG: &str = "<|turn|>";
pub const NAME_SEP_TAG: &str = "<|:|>";
pub const QUERY_TAG: &str = "<|q|>";
pub const RESPONSE_TAG: &str = "<|r|>";
pub const END_TAG: &str = "<|end|>";

pub const TURN_ID: TokenId = 256;
pub const NAME_SEP_ID: TokenId = 257;
pub const QUERY_ID: TokenId = 258;
pub const RESPONSE_ID: TokenId = 259;
pub const END_ID: TokenId = 260;

/// Number of ids the tokenizer can emit.
pub const BASE_VOCAB: usize = 261;

/// The published tag table, in id order.
pub const RESERVED_TAGS: [(&str, TokenId); 5] = [
    (TURN_TAG, TURN_ID),
    (NAME_SEP_TAG, NAME_SEP_ID),
    (QUERY_TAG, QUERY_ID),
    (RESPONSE_TAG, RESPONSE_ID),
    (END_TAG, END_ID),
];

/// Returns the first reserved tag string found inside `text`, if any.
pub fn find_reserved(text: &str) -> Option<&'static str> {
    RESERVED_TAGS
        .iter()
        .find(|(tag, _)| text.contains(tag))
        .map(|(tag, _)| *tag)
}

pub fn is_reserved(id: TokenId) -> bool {
    (TURN_ID..=END_ID).contains(&id)
}

/// Stateless byte tokenizer. Reserved tag strings map to single ids.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Tokenizer;

impl Tokenizer {
    pub fn new() -> Self {
        Tokenizer
    }

    pub fn vocab_size(&self) -> usize {
        BASE_VOCAB
    }

    /// Tokenizes text, recognising reserved tags.
    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        let bytes = text.as_bytes();
        let mut out = Vec::with_capacity(bytes.len());
        let mut i = 0;
        'outer: while i < bytes.len() {
            if bytes[i] == b'<' {
                for (tag, id) in RESERVED_TAGS {
                    if bytes[i..].starts_with(tag.as_bytes()) {
                        out.push(id);
                        i += tag.len();
                        continue 'outer;
                    }
                }
            }
            out.push(bytes[i] as TokenId);
            i += 1;
        }
        out
    }

    /// Tokenizes text as raw bytes, never producing reserved ids.
    pub fn encode_plain(&self, text: &str) -> Vec<TokenId> {
        text.bytes().map(TokenId::from).collect()
    }

    /// Inverse of [`Tokenizer::tokenize`]. Invalid UTF-8 (possible in sampled
    /// output) is replaced lossily.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        String::from_utf8_lossy(&self.to_bytes(ids)).into_owned()
    }

    pub fn to_bytes(&self, ids: &[TokenId]) -> Vec<u8> {
        let mut bytes = Vec::with_capacity(ids.len());
        for &id in ids {
            if id < 256 {
                bytes.push(id as u8);
            } else if let Some((tag, _)) = RESERVED_TAGS.iter().find(|(_, t)| *t == id) {
                bytes.extend_from_slice(tag.as_bytes());
            }
        }
        bytes
    }
}
