//! Append-only JSONL store of provider results, addressed by URL hash.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ImagingError;

/// Stable cache key of an image URL: hex SHA-256 of the trimmed URL.
pub fn image_key(url: &str) -> String {
    hex::encode(Sha256::digest(url.trim().as_bytes()))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderIds {
    pub ocr: String,
    pub caption: String,
}

/// OCR text and up to three captions for one image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageArtifacts {
    pub image_key: String,
    pub url: String,
    #[serde(default)]
    pub ocr_text: String,
    #[serde(default)]
    pub captions: Vec<String>,
    #[serde(default)]
    pub provider_ids: ProviderIds,
    #[serde(default)]
    pub fetched_at: String,
}

impl ImageArtifacts {
    pub const MAX_CAPTIONS: usize = 3;

    pub fn new(
        url: &str,
        ocr_text: String,
        mut captions: Vec<String>,
        provider_ids: ProviderIds,
    ) -> Self {
        captions.truncate(Self::MAX_CAPTIONS);
        ImageArtifacts {
            image_key: image_key(url),
            url: url.to_string(),
            ocr_text,
            captions,
            provider_ids,
            fetched_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        }
    }

    /// Placeholder for an image no provider could resolve.
    pub fn unresolved(url: &str) -> Self {
        ImageArtifacts {
            image_key: image_key(url),
            url: url.to_string(),
            ocr_text: String::new(),
            captions: Vec::new(),
            provider_ids: ProviderIds::default(),
            fetched_at: String::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.ocr_text.trim().is_empty() && self.captions.is_empty()
    }
}

/// Content-addressed artifact cache. Reads are concurrent; writes go through
/// a single appender and are flushed line by line, so an interrupted run
/// loses at most the entry in flight.
#[derive(Debug, Default)]
pub struct ArtifactCache {
    path: Option<PathBuf>,
    entries: RwLock<HashMap<String, ImageArtifacts>>,
    writer: Mutex<Option<File>>,
}

impl ArtifactCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Open (or lazily create) the cache file at `path`. Later lines win over
    /// earlier ones for the same key.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, ImagingError> {
        let path = path.as_ref().to_path_buf();
        let mut entries = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(&path)?);
            for (idx, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let mut artifact: ImageArtifacts =
                    serde_json::from_str(&line).map_err(|e| ImagingError::Cache {
                        line: idx + 1,
                        message: e.to_string(),
                    })?;
                if artifact.captions.len() > ImageArtifacts::MAX_CAPTIONS {
                    return Err(ImagingError::Cache {
                        line: idx + 1,
                        message: format!("{} captions (max 3)", artifact.captions.len()),
                    });
                }
                if artifact.image_key.is_empty() {
                    artifact.image_key = image_key(&artifact.url);
                } else if artifact.image_key != image_key(&artifact.url) {
                    return Err(ImagingError::Cache {
                        line: idx + 1,
                        message: format!("image_key does not match url {}", artifact.url),
                    });
                }
                entries.insert(artifact.image_key.clone(), artifact);
            }
        }
        Ok(ArtifactCache {
            path: Some(path),
            entries: RwLock::new(entries),
            writer: Mutex::new(None),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, url: &str) -> Option<ImageArtifacts> {
        self.entries
            .read()
            .expect("cache lock poisoned")
            .get(&image_key(url))
            .cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Persist then publish.
    pub fn insert(&self, artifact: ImageArtifacts) -> Result<(), ImagingError> {
        if let Some(path) = &self.path {
            let mut guard = self.writer.lock().expect("cache writer poisoned");
            if guard.is_none() {
                if let Some(parent) = path.parent() {
                    std::fs::create_dir_all(parent)?;
                }
                *guard = Some(OpenOptions::new().create(true).append(true).open(path)?);
            }
            let file = guard.as_mut().expect("writer opened above");
            let mut line = serde_json::to_vec(&artifact).expect("artifact serializes");
            line.push(b'\n');
            file.write_all(&line)?;
            file.flush()?;
        }
        self.entries
            .write()
            .expect("cache lock poisoned")
            .insert(artifact.image_key.clone(), artifact);
        Ok(())
    }

    /// All entries sorted by key.
    pub fn snapshot(&self) -> Vec<ImageArtifacts> {
        let mut all: Vec<_> = self
            .entries
            .read()
            .expect("cache lock poisoned")
            .values()
            .cloned()
            .collect();
        all.sort_by(|a, b| a.image_key.cmp(&b.image_key));
        all
    }
}
