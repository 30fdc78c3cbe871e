//! Line-delimited JSON dataset files. Every line is one object whose `kind`
//! field names the record type.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::records::{DatasetKind, DatasetRecord};
use crate::digest::sha256_hex;
use crate::error::{Error, Result};

/// A dataset written to disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHandle {
    pub path: PathBuf,
    pub kind: DatasetKind,
    pub count: usize,
    pub content_digest: String,
}

#[derive(Serialize)]
struct Line<'a, T> {
    kind: DatasetKind,
    #[serde(flatten)]
    record: &'a T,
}

/// Serializes records to the line format, without touching the filesystem.
pub fn encode_dataset<T: DatasetRecord>(records: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        r.validate()
            .map_err(|e| Error::InvalidRecord(e.to_string()))?;
        let line = serde_json::to_string(&Line {
            kind: T::KIND,
            record: r,
        })
        .map_err(|e| Error::Serde(e.to_string()))?;
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

/// Parses the line format. Blank lines are skipped; line numbers are 1-based.
pub fn decode_dataset<T: DatasetRecord>(text: &str, path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let malformed = |field: &str, message: String| Error::MalformedRecord {
            path: path.to_path_buf(),
            line,
            field: field.to_string(),
            message,
        };
        let mut value: serde_json::Value =
            serde_json::from_str(raw).map_err(|e| malformed("<line>", e.to_string()))?;
        let obj = value
            .as_object_mut()
            .ok_or_else(|| malformed("<line>", "not a JSON object".into()))?;
        let kind = obj
            .remove("kind")
            .ok_or_else(|| malformed("kind", "missing field".into()))?;
        let kind: DatasetKind = serde_json::from_value(kind.clone())
            .map_err(|_| malformed("kind", format!("unknown kind {kind}")))?;
        if kind != T::KIND {
            return Err(Error::KindMismatch {
                path: path.to_path_buf(),
                line,
                expected: T::KIND.to_string(),
                found: kind.to_string(),
            });
        }
        let record: T = serde_json::from_value(value).map_err(|e| {
            let msg = e.to_string();
            malformed(field_of(&msg).unwrap_or("<record>"), msg.clone())
        })?;
        record
            .validate()
            .map_err(|e| malformed(e.field, e.message))?;
        out.push(record);
    }
    Ok(out)
}

/// Extracts the backticked field name from a serde error message.
fn field_of(msg: &str) -> Option<&str> {
    let start = msg.find('`')? + 1;
    let len = msg[start..].find('`')?;
    Some(&msg[start..start + len])
}

/// Loads every record of type `T` from `path`, in file order.
pub fn load_dataset<T: DatasetRecord>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&text, path)
}

/// Writes `records` to `path`, replacing any existing file.
pub fn save_dataset<T: DatasetRecord>(records: &[T], path: impl AsRef<Path>) -> Result<DatasetHandle> {
    let path = path.as_ref();
    let text = encode_dataset(records)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(DatasetHandle {
        path: path.to_path_buf(),
        kind: T::KIND,
        count: records.len(),
        content_digest: sha256_hex(text.as_bytes()),
    })
}

impl DatasetHandle {
    /// Re-reads the file and rebuilds the handle from what is on disk.
    pub fn reread<T: DatasetRecord>(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let text = String::from_utf8_lossy(&bytes);
        let records: Vec<T> = decode_dataset(&text, path)?;
        Ok(DatasetHandle {
            path: path.to_path_buf(),
            kind: T::KIND,
            count: records.len(),
            content_digest: sha256_hex(&bytes),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::records::{CardSource, ChatSample, NarrativeDialogue, PersonaCard};

    fn chats() -> Vec<ChatSample> {
        (0..3)
            .map(|i| ChatSample::single(if i == 1 { Some("c1".into()) } else { None }, format!("q{i}"), format!("r{i}")))
            .collect()
    }

    #[test]
    fn empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.jsonl");
        let h = save_dataset::<ChatSample>(&[], &p).unwrap();
        assert_eq!(h.count, 0);
        assert!(load_dataset::<ChatSample>(&p).unwrap().is_empty());
    }

    #[test]
    fn three_chats_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        save_dataset(&chats(), &p).unwrap();
        assert_eq!(load_dataset::<ChatSample>(&p).unwrap(), chats());
    }

    #[test]
    fn cards_round_trip() {
        let cards: Vec<PersonaCard> = (0..5)
            .map(|i| PersonaCard {
                id: format!("c{i}"),
                name: format!("N{i}"),
                source_kind: CardSource::ALL[i % 4],
                traits: vec!["kind".into()],
                style_markers: vec!["hm".into()],
                profile_text: String::new(),
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cards.jsonl");
        let h = save_dataset(&cards, &p).unwrap();
        assert_eq!(h.count, 5);
        assert_eq!(load_dataset::<PersonaCard>(&p).unwrap(), cards);
        assert_eq!(DatasetHandle::reread::<PersonaCard>(&p).unwrap(), h);
    }

    #[test]
    fn identical_digests() {
        let dir = tempfile::tempdir().unwrap();
        let a = save_dataset(&chats(), dir.path().join("a.jsonl")).unwrap();
        let b = save_dataset(&chats(), dir.path().join("b.jsonl")).unwrap();
        assert_eq!(a.content_digest, b.content_digest);
    }

    #[test]
    fn missing_turns_cites_line_two() {
        let text = "{\"kind\":\"chat\",\"turns\":[{\"query\":\"a\",\"response\":\"b\"}]}\n{\"kind\":\"chat\"}\n";
        let err = decode_dataset::<ChatSample>(text, Path::new("x.jsonl")).unwrap_err();
        match err {
            Error::MalformedRecord { line, field, .. } => {
                assert_eq!(line, 2);
                assert_eq!(field, "turns");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn blank_lines_ignored_and_numbered() {
        let text = "\n{\"kind\":\"chat\",\"turns\":[]}\n";
        match decode_dataset::<ChatSample>(text, Path::new("x")).unwrap_err() {
            Error::MalformedRecord { line, field, .. } => assert_eq!((line, field.as_str()), (2, "turns")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn kind_mismatch() {
        let text = encode_dataset(&chats()).unwrap();
        let err = decode_dataset::<NarrativeDialogue>(&text, Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::KindMismatch { line: 1, .. }));
    }

    #[test]
    fn unwritable_path() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("f");
        std::fs::write(&file, "x").unwrap();
        assert!(save_dataset(&chats(), file.join("sub.jsonl")).is_err());
    }
}
