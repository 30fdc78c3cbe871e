//! Versioned data files behind the generators: the rewrite rule table,
//! template banks, seed questions, factual pairs and the leak-phrase list.
//!
//! The built-in set is compiled in; [`Assets::load_dir`] reads an edited copy
//! with the same file names.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::CardSource;
use crate::error::{Error, Result};

pub const BUILTIN_VERSION: &str = "v1";

pub const ASSET_FILES: [&str; 5] = [
    "rules.jsonl",
    "templates.jsonl",
    "questions.jsonl",
    "facts.jsonl",
    "leak_phrases.jsonl",
];

const BUILTIN: [&str; 5] = [
    include_str!("../../assets/v1/rules.jsonl"),
    include_str!("../../assets/v1/templates.jsonl"),
    include_str!("../../assets/v1/questions.jsonl"),
    include_str!("../../assets/v1/facts.jsonl"),
    include_str!("../../assets/v1/leak_phrases.jsonl"),
];

/// One row of the rewrite rule table. `to` is absent for deletion rules.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleEntry {
    pub rule: String,
    pub from: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplateEntry {
    bank: String,
    #[serde(default)]
    kind: Option<CardSource>,
    text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactEntry {
    pub query: String,
    pub answer: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TextEntry {
    text: String,
}

#[derive(Debug, Clone)]
pub struct Assets {
    pub version: String,
    pub rules: Vec<RuleEntry>,
    banks: BTreeMap<(String, Option<CardSource>), Vec<String>>,
    pub questions: Vec<String>,
    pub facts: Vec<FactEntry>,
    pub leak_phrases: Vec<String>,
    digest: String,
}

fn parse<T: DeserializeOwned>(text: &str, name: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| Error::MalformedRecord {
            path: name.into(),
            line: i + 1,
            field: "<line>".into(),
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

impl Assets {
    /// The compiled-in asset set.
    pub fn builtin() -> Assets {
        Assets::from_texts(BUILTIN_VERSION, &BUILTIN).expect("built-in assets parse")
    }

    /// Reads every asset file from `dir`; the version is the directory name.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Assets> {
        let dir = dir.as_ref();
        let mut texts = Vec::with_capacity(ASSET_FILES.len());
        for name in ASSET_FILES {
            let path = dir.join(name);
            if !path.is_file() {
                return Err(Error::MissingAsset(path));
            }
            texts.push(fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?);
        }
        let version = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "custom".into());
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        Assets::from_texts(&version, &refs)
    }

    fn from_texts(version: &str, texts: &[&str]) -> Result<Assets> {
        let mut h = Sha256::new();
        for (name, t) in ASSET_FILES.iter().zip(texts) {
            h.update(name.as_bytes());
            h.update((t.len() as u64).to_le_bytes());
            h.update(t.as_bytes());
        }
        let rules: Vec<RuleEntry> = parse(texts[0], ASSET_FILES[0])?;
        if let Some(bad) = rules
            .iter()
            .find(|r| !matches!(r.rule.as_str(), "R1" | "R2" | "R3" | "R4"))
        {
            return Err(Error::DataGen(format!("unknown rule id {} in rule table", bad.rule)));
        }
        let mut banks: BTreeMap<_, Vec<String>> = BTreeMap::new();
        for t in parse::<TemplateEntry>(texts[1], ASSET_FILES[1])? {
            banks.entry((t.bank, t.kind)).or_default().push(t.text);
        }
        Ok(Assets {
            version: version.to_string(),
            rules,
            banks,
            questions: parse::<TextEntry>(texts[2], ASSET_FILES[2])?
                .into_iter()
                .map(|e| e.text)
                .collect(),
            facts: parse(texts[3], ASSET_FILES[3])?,
            leak_phrases: parse::<TextEntry>(texts[4], ASSET_FILES[4])?
                .into_iter()
                .map(|e| e.text)
                .collect(),
            digest: hex::encode(h.finalize()),
        })
    }

    /// Template bank `name`, optionally specialised by card source.
    pub fn bank(&self, name: &str, kind: Option<CardSource>) -> Result<&[String]> {
        match self.banks.get(&(name.to_string(), kind)) {
            Some(v) if !v.is_empty() => Ok(v),
            _ => Err(Error::DataGen(format!(
                "template bank `{name}` ({kind:?}) is missing or empty"
            ))),
        }
    }

    /// Digest over every asset file, recorded in run manifests.
    pub fn digest(&self) -> &str {
        &self.digest
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_banks_present() {
        let a = Assets::builtin();
        for k in CardSource::ALL {
            for b in ["epithet", "role", "marker", "profile", "skeleton", "preamble"] {
                assert!(a.bank(b, Some(k)).is_ok(), "{b} {k:?}");
            }
        }
        assert!(a.bank("nope", None).is_err());
        assert!(!a.questions.is_empty() && !a.facts.is_empty());
    }

    #[test]
    fn dir_round_trip_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let v = dir.path().join("v1");
        fs::create_dir(&v).unwrap();
        for (n, t) in ASSET_FILES.iter().zip(BUILTIN) {
            fs::write(v.join(n), t).unwrap();
        }
        let a = Assets::load_dir(&v).unwrap();
        assert_eq!(a.digest(), Assets::builtin().digest());
        fs::remove_file(v.join("facts.jsonl")).unwrap();
        match Assets::load_dir(&v).unwrap_err() {
            Error::MissingAsset(p) => assert!(p.ends_with("facts.jsonl")),
            e => panic!("{e:?}"),
        }
    }
}
