use serde::{Deserialize, Serialize};

use super::formalize::RuleId;
use crate::corpus::{check_text, ChatSample, DatasetKind, DatasetRecord, Invalid};

/// A formal rewrite `formal` of the casual source `casual`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewritePair {
    pub formal: String,
    pub casual: String,
    pub rule_trace: Vec<RuleId>,
}

impl DatasetRecord for RewritePair {
    const KIND: DatasetKind = DatasetKind::Rewrite;

    fn validate(&self) -> Result<(), Invalid> {
        check_text("formal", &self.formal, false)?;
        check_text("casual", &self.casual, false)?;
        if self.rule_trace.is_empty() || self.formal == self.casual {
            return Err(Invalid::new("rule_trace", "pair must record at least one rewrite"));
        }
        Ok(())
    }
}

/// A query/answer pair; `persona_id` is set on persona-tailored answers.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftPair {
    pub query: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub persona_id: Option<String>,
}

impl SftPair {
    pub fn plain(query: impl Into<String>, answer: impl Into<String>) -> Self {
        SftPair {
            query: query.into(),
            answer: answer.into(),
            persona_id: None,
        }
    }

    pub fn to_chat(&self) -> ChatSample {
        ChatSample::single(self.persona_id.clone(), self.query.clone(), self.answer.clone())
    }
}

impl DatasetRecord for SftPair {
    const KIND: DatasetKind = DatasetKind::SftPair;

    fn validate(&self) -> Result<(), Invalid> {
        check_text("query", &self.query, false)?;
        check_text("answer", &self.answer, false)?;
        if let Some(p) = &self.persona_id {
            check_text("persona_id", p, false)?;
        }
        Ok(())
    }
}
