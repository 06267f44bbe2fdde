//! Text normalization: tokenization, stop-word removal, Porter stemming and
//! tag-synonym mapping.

mod porter;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{PostId, Question};

pub use porter::stem as stem_word;

/// Embedded English stop list, version 1.
pub const ENGLISH_STOPWORDS: &str = include_str!("../../data/stopwords_en.txt");
/// Small default tag-synonym table (`synonym,master`).
pub const DEFAULT_TAG_SYNONYMS: &str = include_str!("../../data/tag_synonyms.csv");

#[derive(Debug, Error)]
pub enum TextprepError {
    #[error("tag synonym map line {line}: {message}")]
    SynonymMap { line: usize, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Lowercase runs of alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    split_lower(text, char::is_alphanumeric)
}

/// Tokenize source code: split only on whitespace and on punctuation that
/// cannot be part of an identifier, so `my_var` and `$el` survive intact.
pub fn tokenize_code(code: &str) -> Vec<String> {
    split_lower(code, |c| c.is_alphanumeric() || c == '_' || c == '$')
}

fn split_lower(text: &str, keep: impl Fn(char) -> bool) -> Vec<String> {
    text.split(|c: char| !keep(c))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StopList {
    words: HashSet<String>,
}

impl StopList {
    pub fn english() -> Self {
        Self::parse(ENGLISH_STOPWORDS)
    }

    pub fn empty() -> Self {
        StopList {
            words: HashSet::new(),
        }
    }

    /// One word per line; blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Self {
        let words = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_lowercase)
            .collect();
        StopList { words }
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, TextprepError> {
        Ok(Self::parse(&std::fs::read_to_string(path)?))
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(word)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

impl Default for StopList {
    fn default() -> Self {
        Self::english()
    }
}

pub fn remove_stopwords(tokens: Vec<String>, stop: &StopList) -> Vec<String> {
    tokens.into_iter().filter(|t| !stop.contains(t)).collect()
}

pub fn stem(tokens: Vec<String>) -> Vec<String> {
    tokens.iter().map(|t| stem_word(t)).collect()
}

/// Synonym tag → master tag. No master is itself a synonym, so applying the
/// map twice changes nothing.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TagSynonymMap {
    entries: BTreeMap<String, String>,
}

impl TagSynonymMap {
    pub fn new(pairs: impl IntoIterator<Item = (String, String)>) -> Result<Self, TextprepError> {
        let mut entries = BTreeMap::new();
        for (idx, (syn, master)) in pairs.into_iter().enumerate() {
            let syn = syn.trim().to_lowercase();
            let master = master.trim().to_lowercase();
            if syn.is_empty() || master.is_empty() {
                return Err(TextprepError::SynonymMap {
                    line: idx + 1,
                    message: "empty tag".into(),
                });
            }
            if syn != master {
                entries.insert(syn, master);
            }
        }
        for (syn, master) in &entries {
            if entries.contains_key(master) {
                return Err(TextprepError::SynonymMap {
                    line: 0,
                    message: format!("master tag `{master}` (for `{syn}`) is itself a synonym"),
                });
            }
        }
        Ok(TagSynonymMap { entries })
    }

    pub fn builtin() -> Self {
        Self::from_csv(DEFAULT_TAG_SYNONYMS.as_bytes()).expect("bundled synonym map is valid")
    }

    /// CSV `synonym,master`, with an optional header row.
    pub fn from_csv<R: Read>(input: R) -> Result<Self, TextprepError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(input);
        let mut pairs = Vec::new();
        for (idx, record) in reader.records().enumerate() {
            let record = record?;
            if record.len() != 2 {
                return Err(TextprepError::SynonymMap {
                    line: idx + 1,
                    message: format!("expected 2 columns, found {}", record.len()),
                });
            }
            if idx == 0 && &record[0] == "synonym" && &record[1] == "master" {
                continue;
            }
            pairs.push((record[0].to_string(), record[1].to_string()));
        }
        Self::new(pairs)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, TextprepError> {
        Self::from_csv(std::fs::File::open(path)?)
    }

    pub fn master_of<'a>(&'a self, tag: &'a str) -> &'a str {
        self.entries.get(tag).map(String::as_str).unwrap_or(tag)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn normalize_tags<'a>(
    tags: impl IntoIterator<Item = &'a String>,
    map: &TagSynonymMap,
) -> BTreeSet<String> {
    tags.into_iter()
        .map(|t| map.master_of(&t.to_lowercase()).to_string())
        .collect()
}

/// Remove the duplicate-provenance marker from a title, e.g.
/// `"Centering a div [duplicate]"` → `"Centering a div"`.
pub fn strip_duplicate_marker(title: &str) -> &str {
    let trimmed = title.trim_end();
    const MARKER: &str = "[duplicate]";
    if trimmed.len() >= MARKER.len() {
        let split = trimmed.len() - MARKER.len();
        if trimmed.is_char_boundary(split) && trimmed[split..].eq_ignore_ascii_case(MARKER) {
            return trimmed[..split].trim_end();
        }
    }
    trimmed
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreparedQuestion {
    pub id: PostId,
    pub title_tokens: Vec<String>,
    pub body_tokens: Vec<String>,
    pub code_tokens: Vec<String>,
    pub tags: BTreeSet<String>,
}

/// Bundles the resources of the preprocessing pipeline.
#[derive(Debug, Clone, Default)]
pub struct Preprocessor {
    pub stop: StopList,
    pub synonyms: TagSynonymMap,
}

impl Preprocessor {
    pub fn new(stop: StopList, synonyms: TagSynonymMap) -> Self {
        Preprocessor { stop, synonyms }
    }

    /// tokenize → remove stop words → stem.
    pub fn prepare_text(&self, text: &str) -> Vec<String> {
        stem(remove_stopwords(tokenize(text), &self.stop))
    }

    pub fn prepare_question(&self, q: &Question) -> PreparedQuestion {
        let code_tokens = q
            .code_blocks
            .iter()
            .flat_map(|c| tokenize_code(c))
            .collect();
        PreparedQuestion {
            id: q.id,
            title_tokens: self.prepare_text(strip_duplicate_marker(&q.title)),
            body_tokens: self.prepare_text(&q.body_text),
            code_tokens,
            tags: normalize_tags(&q.tags, &self.synonyms),
        }
    }
}
