use std::fs;
use std::path::{Path, PathBuf};

use crate::digest::sha256_hex;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest";
const LOCK_FILE: &str = ".lock";

/// One artifact: path relative to the run directory, kind and SHA-256.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: String,
    pub kind: String,
    pub digest: String,
}

fn kind_of(path: &Path, bytes: &[u8]) -> String {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ckpt") => "checkpoint".into(),
        Some("json") => "report".into(),
        Some("jsonl") => {
            // The first record's tag; an empty dataset has none.
            let first = bytes.split(|&b| b == b'\n').find(|l| !l.is_empty());
            first
                .and_then(|l| serde_json::from_slice::<serde_json::Value>(l).ok())
                .and_then(|v| v.get("kind").and_then(|k| k.as_str()).map(str::to_string))
                .unwrap_or_else(|| "dataset".into())
        }
        _ => "file".into(),
    }
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(dir, e))?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            collect(root, &p, out)?;
        } else if dir != root || (e.file_name() != MANIFEST_FILE && e.file_name() != LOCK_FILE) {
            out.push(p);
        }
    }
    Ok(())
}

/// Digests every artifact under `root` and writes `root/manifest`: a
/// `# stages` line naming the completed stages, then one tab-separated
/// `path kind digest` line per artifact in path order. Returns the entries
/// and the digest of the manifest text.
pub fn write_manifest(root: &Path, completed: &[&str]) -> Result<(Vec<ManifestEntry>, String)> {
    let mut files = Vec::new();
    collect(root, root, &mut files)?;
    let mut entries = Vec::new();
    for f in files {
        let bytes = fs::read(&f).map_err(|e| Error::io(&f, e))?;
        let rel = f.strip_prefix(root).expect("under root");
        entries.push(ManifestEntry {
            path: rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"),
            kind: kind_of(&f, &bytes),
            digest: sha256_hex(&bytes),
        });
    }
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    let mut text = format!("# stages {}\n", completed.join(","));
    for e in &entries {
        text.push_str(&format!("{}\t{}\t{}\n", e.path, e.kind, e.digest));
    }
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
    Ok((entries, sha256_hex(text.as_bytes())))
}

/// Parses a manifest back into its stage list and entries.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<(Vec<String>, Vec<ManifestEntry>)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut stages = Vec::new();
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if let Some(s) = line.strip_prefix("# stages ") {
            stages = s.split(',').filter(|s| !s.is_empty()).map(str::to_string).collect();
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        let [p, k, d] = parts[..] else {
            return Err(Error::MalformedRecord {
                path: path.to_path_buf(),
                line: i + 1,
                field: "<line>".into(),
                message: "expected path, kind and digest".into(),
            });
        };
        entries.push(ManifestEntry {
            path: p.into(),
            kind: k.into(),
            digest: d.into(),
        });
    }
    Ok((stages, entries))
}

/// Exclusive ownership of a run directory for the lifetime of the value.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(run_dir.to_path_buf())),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunLock::acquire(dir.path()).unwrap();
        assert!(matches!(RunLock::acquire(dir.path()), Err(Error::Locked(_))));
        drop(a);
        RunLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("data")).unwrap();
        fs::write(dir.path().join("data/x.jsonl"), "{\"kind\":\"qa\",\"query\":\"a\",\"gold\":\"b\"}\n").unwrap();
        fs::write(dir.path().join("data/e.jsonl"), "").unwrap();
        fs::write(dir.path().join("r.json"), "{}").unwrap();
        let (entries, digest) = write_manifest(dir.path(), &["datagen"]).unwrap();
        assert_eq!(entries.len(), 3);
        assert_eq!(entries[1].path, "data/x.jsonl");
        assert_eq!(entries[1].kind, "qa");
        assert_eq!(entries[0].kind, "dataset");
        let (stages, back) = read_manifest(dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(stages, vec!["datagen"]);
        assert_eq!(back, entries);
        // The manifest itself is not listed on a rewrite.
        assert_eq!(write_manifest(dir.path(), &["datagen"]).unwrap().1, digest);
    }
}
