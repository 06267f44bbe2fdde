//! Question corpora: dump ingestion, JSONL mini-corpora and labeled pair
//! construction.

mod html;
mod jsonl;
mod xml;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use html::{decompose_body, DecomposedBody};
pub use jsonl::{load_jsonl_corpus, read_jsonl_corpus, write_jsonl_corpus};
pub use xml::{parse_postlinks, parse_posts, LinkMap, ParseDiagnostics, ParsedPosts};

pub type PostId = u64;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("malformed XML at byte {offset}: {message}")]
    Xml { offset: u64, message: String },
    #[error("line {line}: field `{field}`: {message}")]
    Schema {
        line: usize,
        field: String,
        message: String,
    },
    #[error("duplicate question id {0}")]
    DuplicateId(PostId),
    #[error(
        "insufficient negatives: {needed} non-duplicate questions needed, {available} available"
    )]
    InsufficientNegatives { needed: usize, available: usize },
    #[error("fraction must lie in (0, 1], got {0}")]
    InvalidFraction(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionStatus {
    Open,
    ClosedDuplicate,
    ClosedNonDuplicate,
    Master,
}

impl QuestionStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            QuestionStatus::Open => "open",
            QuestionStatus::ClosedDuplicate => "closed_duplicate",
            QuestionStatus::ClosedNonDuplicate => "closed_non_duplicate",
            QuestionStatus::Master => "master",
        }
    }
}

impl fmt::Display for QuestionStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for QuestionStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "open" => Ok(QuestionStatus::Open),
            "closed_duplicate" => Ok(QuestionStatus::ClosedDuplicate),
            "closed_non_duplicate" => Ok(QuestionStatus::ClosedNonDuplicate),
            "master" => Ok(QuestionStatus::Master),
            other => Err(format!("unknown status `{other}`")),
        }
    }
}

/// One question post with its body split into prose, code and images.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Question {
    pub id: PostId,
    pub title: String,
    pub body_html: String,
    pub body_text: String,
    pub code_blocks: Vec<String>,
    pub tags: BTreeSet<String>,
    pub image_refs: Vec<String>,
    pub duplicate_of: Option<PostId>,
    pub status: QuestionStatus,
}

impl Question {
    /// Build a question from raw fields; derived body fields come from
    /// [`decompose_body`]. `duplicate_of` takes precedence over `status` so the
    /// duplicate invariant always holds.
    pub fn new(
        id: PostId,
        title: impl Into<String>,
        body_html: impl Into<String>,
        tags: impl IntoIterator<Item = impl AsRef<str>>,
        status: QuestionStatus,
        duplicate_of: Option<PostId>,
    ) -> Self {
        let body_html = body_html.into();
        let body = decompose_body(&body_html);
        let status = match (duplicate_of, status) {
            (Some(_), _) => QuestionStatus::ClosedDuplicate,
            (None, QuestionStatus::ClosedDuplicate) => QuestionStatus::ClosedNonDuplicate,
            (None, s) => s,
        };
        Question {
            id,
            title: title.into(),
            body_html,
            body_text: body.text,
            code_blocks: body.code_blocks,
            tags: tags
                .into_iter()
                .map(|t| t.as_ref().trim().to_lowercase())
                .filter(|t| !t.is_empty())
                .collect(),
            image_refs: body.image_refs,
            duplicate_of,
            status,
        }
    }

    pub fn has_images(&self) -> bool {
        !self.image_refs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairLabel {
    Duplicate,
    NonDuplicate,
}

impl PairLabel {
    pub fn as_f64(&self) -> f64 {
        match self {
            PairLabel::Duplicate => 1.0,
            PairLabel::NonDuplicate => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct QuestionPair {
    pub query_id: PostId,
    pub candidate_id: PostId,
    pub label: PairLabel,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_duplicates: usize,
    pub n_non_duplicates: usize,
    pub n_masters: usize,
    pub n_dup_pairs: usize,
    pub n_nondup_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSet {
    pub duplicates: Vec<QuestionPair>,
    pub non_duplicates: Vec<QuestionPair>,
    pub stats: CorpusStats,
}

/// Keep only questions that carry at least one image.
pub fn filter_image_questions(questions: Vec<Question>) -> Vec<Question> {
    questions.into_iter().filter(Question::has_images).collect()
}

/// Apply duplicate links to questions parsed from a dump: link sources become
/// closed duplicates, link targets that are not duplicates themselves become
/// masters.
pub fn apply_links(questions: &mut [Question], links: &LinkMap) {
    let targets: HashSet<PostId> = links.values().copied().collect();
    for q in questions.iter_mut() {
        if let Some(&master) = links.get(&q.id) {
            q.duplicate_of = Some(master);
            q.status = QuestionStatus::ClosedDuplicate;
        } else if targets.contains(&q.id) {
            q.duplicate_of = None;
            q.status = QuestionStatus::Master;
        }
    }
}

pub fn ensure_unique_ids(questions: &[Question]) -> Result<(), CorpusError> {
    let mut seen = HashSet::with_capacity(questions.len());
    for q in questions {
        if !seen.insert(q.id) {
            return Err(CorpusError::DuplicateId(q.id));
        }
    }
    Ok(())
}

/// Build duplicate pairs (duplicate → its master) and an equal number of
/// non-duplicate pairs (sampled closed non-duplicate → random master).
///
/// A duplicate whose master is absent from `questions`, or whose link target
/// is not a master, is dropped. Non-duplicate questions are sampled without
/// replacement, so no pair repeats. Output depends only on the input and
/// `seed`.
pub fn build_pairs(questions: &[Question], seed: u64) -> Result<PairSet, CorpusError> {
    ensure_unique_ids(questions)?;
    let by_id: HashMap<PostId, &Question> = questions.iter().map(|q| (q.id, q)).collect();

    let mut sorted: Vec<&Question> = questions.iter().collect();
    sorted.sort_by_key(|q| q.id);

    let mut stats = CorpusStats::default();
    let mut duplicates = Vec::new();
    let mut masters = Vec::new();
    let mut negatives = Vec::new();
    for q in &sorted {
        match q.status {
            QuestionStatus::ClosedDuplicate => {
                stats.n_duplicates += 1;
                let Some(master_id) = q.duplicate_of else {
                    continue;
                };
                match by_id.get(&master_id) {
                    Some(m) if m.status == QuestionStatus::Master && m.id != q.id => {
                        duplicates.push(QuestionPair {
                            query_id: q.id,
                            candidate_id: master_id,
                            label: PairLabel::Duplicate,
                        });
                    }
                    _ => log::debug!("dropping duplicate {} (master {master_id} absent)", q.id),
                }
            }
            QuestionStatus::ClosedNonDuplicate => {
                stats.n_non_duplicates += 1;
                negatives.push(q.id);
            }
            QuestionStatus::Master => {
                stats.n_masters += 1;
                masters.push(q.id);
            }
            QuestionStatus::Open => {}
        }
    }

    let needed = duplicates.len();
    if negatives.len() < needed {
        return Err(CorpusError::InsufficientNegatives {
            needed,
            available: negatives.len(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut non_duplicates = Vec::with_capacity(needed);
    if needed > 0 {
        let sampled: Vec<PostId> = negatives
            .choose_multiple(&mut rng, needed)
            .copied()
            .collect();
        for query_id in sampled {
            // `masters` is non-empty: every duplicate pair references one.
            let candidate_id = *masters.choose(&mut rng).expect("masters present");
            non_duplicates.push(QuestionPair {
                query_id,
                candidate_id,
                label: PairLabel::NonDuplicate,
            });
        }
    }

    stats.n_dup_pairs = duplicates.len();
    stats.n_nondup_pairs = non_duplicates.len();
    Ok(PairSet {
        duplicates,
        non_duplicates,
        stats,
    })
}

/// Seeded, class-balanced subsample keeping `floor(fraction * n)` pairs of
/// each label.
pub fn subsample_pairs(pairs: &PairSet, fraction: f64, seed: u64) -> Result<PairSet, CorpusError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CorpusError::InvalidFraction(fraction));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n =
        (pairs.duplicates.len().min(pairs.non_duplicates.len()) as f64 * fraction).floor() as usize;
    let pick = |src: &[QuestionPair], rng: &mut ChaCha8Rng| {
        let mut idx: Vec<usize> = (0..src.len()).collect();
        idx.shuffle(rng);
        let mut keep: Vec<usize> = idx.into_iter().take(n).collect();
        keep.sort_unstable();
        keep.into_iter().map(|i| src[i]).collect::<Vec<_>>()
    };
    let duplicates = pick(&pairs.duplicates, &mut rng);
    let non_duplicates = pick(&pairs.non_duplicates, &mut rng);
    let mut stats = pairs.stats;
    stats.n_dup_pairs = duplicates.len();
    stats.n_nondup_pairs = non_duplicates.len();
    Ok(PairSet {
        duplicates,
        non_duplicates,
        stats,
    })
}

/// Index questions by id.
pub fn index_by_id(questions: &[Question]) -> BTreeMap<PostId, &Question> {
    questions.iter().map(|q| (q.id, q)).collect()
}
