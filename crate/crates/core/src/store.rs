//! Content-addressed response cache.
//!
//! Each entry lives at `<root>/<k0k1>/<k2k3>/<key hex>` and consists of a
//! JSON header line, the response body, and a trailing SHA-256 line over
//! both. Writes go to a temp file in the destination directory and are
//! renamed into place, so readers never observe a partial entry.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime};

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::backend::{GenParams, VisionRequest, VisionResponse};

const ENTRY_FORMAT: &str = "textcot-cache";
const ENTRY_VERSION: u32 = 1;
const KEY_DOMAIN: &[u8] = b"textcot-cache-key-v1";

/// A SHA-256 digest, rendered as lowercase hex.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub fn of(bytes: &[u8]) -> Self {
        Digest(Sha256::digest(bytes).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let bytes = hex::decode(s).ok()?;
        Some(Digest(bytes.try_into().ok()?))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.to_hex())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Digest::from_hex(&s).ok_or_else(|| serde::de::Error::custom("expected 64 hex digits"))
    }
}

/// Cache key over everything that determines a completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CacheKey(pub Digest);

fn absorb(hasher: &mut Sha256, field: &[u8]) {
    hasher.update((field.len() as u64).to_le_bytes());
    hasher.update(field);
}

impl CacheKey {
    pub fn derive(
        backend_id: &str,
        model_id: &str,
        params: &GenParams,
        prompt_text: &str,
        image_digest: &Digest,
    ) -> Self {
        let params = serde_json::to_vec(params).expect("params serialize");
        let mut hasher = Sha256::new();
        absorb(&mut hasher, KEY_DOMAIN);
        absorb(&mut hasher, backend_id.as_bytes());
        absorb(&mut hasher, model_id.as_bytes());
        absorb(&mut hasher, &params);
        absorb(&mut hasher, prompt_text.as_bytes());
        absorb(&mut hasher, &image_digest.0);
        CacheKey(Digest(hasher.finalize().into()))
    }

    pub fn for_request(req: &VisionRequest) -> Self {
        Self::derive(
            &req.backend_id,
            &req.model_id,
            &req.params,
            &req.prompt.text,
            &req.image.digest(),
        )
    }
}

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("corrupt cache entry {}: {reason}", path.display())]
    CorruptEntry { path: PathBuf, reason: String },
    #[error("cache storage is full")]
    StorageFull,
    #[error("cache io error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| {
        if source.kind() == io::ErrorKind::StorageFull {
            StoreError::StorageFull
        } else {
            StoreError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct EntryHeader {
    format: String,
    version: u32,
    key: String,
    body_len: usize,
}

#[derive(Serialize, Deserialize)]
struct EntryBody {
    text: String,
    latency_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct StoreStats {
    pub entries: u64,
    pub bytes: u64,
    pub corrupt: u64,
    pub temp_files: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct GcReport {
    pub removed_corrupt: u64,
    pub removed_temp: u64,
    pub removed_expired: u64,
    pub kept: u64,
}

/// Directory-backed response cache. Cheap to clone; holds only the root.
#[derive(Debug, Clone)]
pub struct ResponseStore {
    root: PathBuf,
}

impl ResponseStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entry_path(&self, key: &CacheKey) -> PathBuf {
        let hex = key.0.to_hex();
        self.root.join(&hex[0..2]).join(&hex[2..4]).join(hex)
    }

    /// Look up a response. A damaged entry yields `CorruptEntry`; callers
    /// treat that as a miss.
    pub fn get(&self, key: &CacheKey) -> Result<Option<VisionResponse>, StoreError> {
        let path = self.entry_path(key);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(io_err(&path)(e)),
        };
        let body = decode_entry(&bytes, Some(key)).map_err(|reason| StoreError::CorruptEntry {
            path: path.clone(),
            reason,
        })?;
        Ok(Some(VisionResponse {
            text: body.text,
            latency_ms: body.latency_ms,
            cached: false,
        }))
    }

    /// Durably store a response. Concurrent writers of one key each rename a
    /// complete file into place; the last rename wins.
    pub fn put(&self, key: &CacheKey, value: &VisionResponse) -> Result<(), StoreError> {
        let path = self.entry_path(key);
        let dir = path.parent().expect("entry has a parent");
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let encoded = encode_entry(key, value);
        let mut tmp = tempfile::Builder::new()
            .prefix(".tmp-")
            .tempfile_in(dir)
            .map_err(io_err(dir))?;
        tmp.write_all(&encoded).map_err(io_err(tmp.path()))?;
        tmp.as_file().sync_all().map_err(io_err(&path))?;
        tmp.persist(&path).map_err(|e| io_err(&path)(e.error))?;
        Ok(())
    }

    fn walk(&self) -> Result<Vec<PathBuf>, StoreError> {
        let mut files = Vec::new();
        let mut stack = vec![self.root.clone()];
        while let Some(dir) = stack.pop() {
            let entries = match fs::read_dir(&dir) {
                Ok(e) => e,
                Err(e) if e.kind() == io::ErrorKind::NotFound => continue,
                Err(e) => return Err(io_err(&dir)(e)),
            };
            for entry in entries {
                let entry = entry.map_err(io_err(&dir))?;
                let path = entry.path();
                let ft = entry.file_type().map_err(io_err(&path))?;
                if ft.is_dir() {
                    stack.push(path);
                } else if ft.is_file() {
                    files.push(path);
                }
            }
        }
        files.sort();
        Ok(files)
    }

    pub fn stats(&self) -> Result<StoreStats, StoreError> {
        let mut stats = StoreStats::default();
        for path in self.walk()? {
            if is_temp(&path) {
                stats.temp_files += 1;
                continue;
            }
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            if decode_entry(&bytes, None).is_ok() {
                stats.entries += 1;
                stats.bytes += bytes.len() as u64;
            } else {
                stats.corrupt += 1;
            }
        }
        Ok(stats)
    }

    /// Remove corrupt entries and abandoned temp files; with `max_age`, also
    /// entries not modified within that window.
    pub fn gc(&self, max_age: Option<Duration>) -> Result<GcReport, StoreError> {
        let mut report = GcReport::default();
        let now = SystemTime::now();
        for path in self.walk()? {
            if is_temp(&path) {
                fs::remove_file(&path).map_err(io_err(&path))?;
                report.removed_temp += 1;
                continue;
            }
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            if decode_entry(&bytes, None).is_err() {
                fs::remove_file(&path).map_err(io_err(&path))?;
                report.removed_corrupt += 1;
                continue;
            }
            if let Some(max_age) = max_age {
                let modified = fs::metadata(&path)
                    .and_then(|m| m.modified())
                    .map_err(io_err(&path))?;
                if now.duration_since(modified).unwrap_or_default() > max_age {
                    fs::remove_file(&path).map_err(io_err(&path))?;
                    report.removed_expired += 1;
                    continue;
                }
            }
            report.kept += 1;
        }
        Ok(report)
    }
}

fn is_temp(path: &Path) -> bool {
    path.file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.starts_with(".tmp-"))
}

fn encode_entry(key: &CacheKey, value: &VisionResponse) -> Vec<u8> {
    let body = serde_json::to_vec(&EntryBody {
        text: value.text.clone(),
        latency_ms: value.latency_ms,
    })
    .expect("body serializes");
    let header = serde_json::to_vec(&EntryHeader {
        format: ENTRY_FORMAT.into(),
        version: ENTRY_VERSION,
        key: key.0.to_hex(),
        body_len: body.len(),
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(header.len() + body.len() + 67);
    out.extend_from_slice(&header);
    out.push(b'\n');
    out.extend_from_slice(&body);
    let checksum = Digest::of(&out).to_hex();
    out.push(b'\n');
    out.extend_from_slice(checksum.as_bytes());
    out.push(b'\n');
    out
}

fn decode_entry(bytes: &[u8], expected: Option<&CacheKey>) -> Result<EntryBody, String> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or("missing header line")?;
    let header: EntryHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| format!("bad header: {e}"))?;
    if header.format != ENTRY_FORMAT || header.version != ENTRY_VERSION {
        return Err("unknown entry format".into());
    }
    let body_start = nl + 1;
    let body_end = body_start
        .checked_add(header.body_len)
        .filter(|&end| end <= bytes.len())
        .ok_or("truncated body")?;
    let trailer = &bytes[body_end..];
    if trailer.len() != 66 || trailer[0] != b'\n' || trailer[65] != b'\n' {
        return Err("malformed checksum trailer".into());
    }
    let stored = std::str::from_utf8(&trailer[1..65]).map_err(|_| "non-utf8 checksum")?;
    if Digest::of(&bytes[..body_end]).to_hex() != stored {
        return Err("checksum mismatch".into());
    }
    if let Some(key) = expected {
        if header.key != key.0.to_hex() {
            return Err("entry belongs to another key".into());
        }
    }
    serde_json::from_slice(&bytes[body_start..body_end]).map_err(|e| format!("bad body: {e}"))
}
