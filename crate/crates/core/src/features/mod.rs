//! Pairwise similarity features.

mod audit;
mod export;
mod similarity;
mod tfidf;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::PostId;
use crate::textprep::PreparedQuestion;

pub use audit::{
    delta_audit, write_delta_audit_csv, AuditInput, DeltaEntry, DEFAULT_DELTA_THRESHOLD,
};
pub use export::{read_feature_csv, write_feature_csv, LabeledRow};
pub use similarity::{
    combined_image_similarity, cosine, entity_overlap, similarity_delta, term_overlap,
};
pub use tfidf::{SparseVector, TfIdfIndex};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),
    #[error("feature `{0}` listed twice in schema")]
    DuplicateFeature(String),
    #[error("empty feature schema")]
    EmptySchema,
    #[error("schema mismatch: expected [{expected}], found [{found}]")]
    SchemaMismatch { expected: String, found: String },
    #[error("cannot fit a weighting index on an empty corpus")]
    EmptyCorpus,
    #[error("invalid weight {weight} for term `{term}`")]
    InvalidWeight { term: String, weight: f64 },
    #[error("feature matrix: {0}")]
    Matrix(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureName {
    SimTitleTitle,
    SimTitleBody,
    SimBodyBody,
    SimCodeCode,
    TermOverlap,
    EntityOverlap,
    SimImageText,
    SimImageCaption,
    SimImageCombined,
}

impl FeatureName {
    pub const ALL: [FeatureName; 9] = [
        FeatureName::SimTitleTitle,
        FeatureName::SimTitleBody,
        FeatureName::SimBodyBody,
        FeatureName::SimCodeCode,
        FeatureName::TermOverlap,
        FeatureName::EntityOverlap,
        FeatureName::SimImageText,
        FeatureName::SimImageCaption,
        FeatureName::SimImageCombined,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            FeatureName::SimTitleTitle => "sim_title_title",
            FeatureName::SimTitleBody => "sim_title_body",
            FeatureName::SimBodyBody => "sim_body_body",
            FeatureName::SimCodeCode => "sim_code_code",
            FeatureName::TermOverlap => "term_overlap",
            FeatureName::EntityOverlap => "entity_overlap",
            FeatureName::SimImageText => "sim_image_text",
            FeatureName::SimImageCaption => "sim_image_caption",
            FeatureName::SimImageCombined => "sim_image_combined",
        }
    }

    pub fn is_image(&self) -> bool {
        matches!(
            self,
            FeatureName::SimImageText
                | FeatureName::SimImageCaption
                | FeatureName::SimImageCombined
        )
    }
}

impl fmt::Display for FeatureName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureName {
    type Err = FeatureError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FeatureName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| FeatureError::UnknownFeature(s.to_string()))
    }
}

/// Ordered, duplicate-free list of feature names.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<FeatureName>", into = "Vec<FeatureName>")]
pub struct FeatureSchema {
    names: Vec<FeatureName>,
}

impl FeatureSchema {
    pub fn new(names: Vec<FeatureName>) -> Result<Self, FeatureError> {
        if names.is_empty() {
            return Err(FeatureError::EmptySchema);
        }
        let mut seen = BTreeSet::new();
        for n in &names {
            if !seen.insert(*n) {
                return Err(FeatureError::DuplicateFeature(n.to_string()));
            }
        }
        Ok(FeatureSchema { names })
    }

    pub fn parse<S: AsRef<str>>(names: &[S]) -> Result<Self, FeatureError> {
        Self::new(
            names
                .iter()
                .map(|s| s.as_ref().trim().parse())
                .collect::<Result<_, _>>()?,
        )
    }

    /// Every implemented feature, in canonical order.
    pub fn full() -> Self {
        FeatureSchema {
            names: FeatureName::ALL.to_vec(),
        }
    }

    pub fn names(&self) -> &[FeatureName] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn position(&self, name: FeatureName) -> Option<usize> {
        self.names.iter().position(|n| *n == name)
    }

    pub fn uses_images(&self) -> bool {
        self.names.iter().any(FeatureName::is_image)
    }

    pub fn describe(&self) -> String {
        self.names
            .iter()
            .map(FeatureName::as_str)
            .collect::<Vec<_>>()
            .join(",")
    }
}

impl TryFrom<Vec<FeatureName>> for FeatureSchema {
    type Error = FeatureError;

    fn try_from(names: Vec<FeatureName>) -> Result<Self, Self::Error> {
        FeatureSchema::new(names)
    }
}

impl From<FeatureSchema> for Vec<FeatureName> {
    fn from(s: FeatureSchema) -> Self {
        s.names
    }
}

/// Feature values under a schema. Every value lies in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    schema: Arc<FeatureSchema>,
    values: Vec<f64>,
}

impl FeatureVector {
    pub fn new(schema: Arc<FeatureSchema>, values: Vec<f64>) -> Result<Self, FeatureError> {
        if values.len() != schema.len() {
            return Err(FeatureError::Matrix(format!(
                "{} values for {} features",
                values.len(),
                schema.len()
            )));
        }
        Ok(FeatureVector { schema, values })
    }

    pub fn schema(&self) -> &Arc<FeatureSchema> {
        &self.schema
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, name: FeatureName) -> Option<f64> {
        self.schema.position(name).map(|i| self.values[i])
    }

    /// Restrict to the features of `target`, which must be a subset.
    pub fn project(&self, target: &Arc<FeatureSchema>) -> Result<FeatureVector, FeatureError> {
        let values = target
            .names()
            .iter()
            .map(|n| {
                self.get(*n).ok_or_else(|| FeatureError::SchemaMismatch {
                    expected: target.describe(),
                    found: self.schema.describe(),
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(FeatureVector {
            schema: Arc::clone(target),
            values,
        })
    }
}

/// Image-derived similarities of one question pair.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageSims {
    pub image_text: f64,
    pub image_caption: f64,
}

impl ImageSims {
    pub fn combined(&self) -> f64 {
        combined_image_similarity(self.image_text, self.image_caption)
    }

    pub fn delta(&self) -> f64 {
        similarity_delta(self.image_text, self.image_caption)
    }
}

/// A prepared question projected into the weighting space.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedQuestion {
    pub id: PostId,
    pub title: SparseVector,
    pub body: SparseVector,
    pub code: SparseVector,
    /// Title and body terms.
    pub terms: BTreeSet<String>,
    /// Code tokens and normalized tags.
    pub entities: BTreeSet<String>,
}

/// Text-side featurizer holding the frozen document frequencies.
#[derive(Debug, Clone)]
pub struct TextFeaturizer {
    index: TfIdfIndex,
}

impl TextFeaturizer {
    /// Fit document frequencies on `training` questions; each question
    /// (title, body and code tokens together) is one document.
    pub fn fit<'a>(
        training: impl IntoIterator<Item = &'a PreparedQuestion>,
    ) -> Result<Self, FeatureError> {
        let docs = training.into_iter().map(|q| {
            q.title_tokens
                .iter()
                .chain(&q.body_tokens)
                .chain(&q.code_tokens)
                .cloned()
                .collect::<Vec<_>>()
        });
        Ok(TextFeaturizer {
            index: TfIdfIndex::fit(docs)?,
        })
    }

    pub fn from_index(index: TfIdfIndex) -> Self {
        TextFeaturizer { index }
    }

    pub fn index(&self) -> &TfIdfIndex {
        &self.index
    }

    pub fn encode(&self, q: &PreparedQuestion) -> EncodedQuestion {
        EncodedQuestion {
            id: q.id,
            title: self.index.vectorize(&q.title_tokens),
            body: self.index.vectorize(&q.body_tokens),
            code: self.index.vectorize(&q.code_tokens),
            terms: q
                .title_tokens
                .iter()
                .chain(&q.body_tokens)
                .cloned()
                .collect(),
            entities: q.code_tokens.iter().chain(&q.tags).cloned().collect(),
        }
    }
}

/// Compute one feature. Title-body compares the query title with the
/// candidate body. Missing modalities score 0.
pub fn feature_value(
    name: FeatureName,
    query: &EncodedQuestion,
    candidate: &EncodedQuestion,
    images: Option<ImageSims>,
) -> f64 {
    let images = images.unwrap_or_default();
    match name {
        FeatureName::SimTitleTitle => cosine(&query.title, &candidate.title),
        FeatureName::SimTitleBody => cosine(&query.title, &candidate.body),
        FeatureName::SimBodyBody => cosine(&query.body, &candidate.body),
        FeatureName::SimCodeCode => cosine(&query.code, &candidate.code),
        FeatureName::TermOverlap => term_overlap(&query.terms, &candidate.terms),
        FeatureName::EntityOverlap => entity_overlap(&query.entities, &candidate.entities),
        FeatureName::SimImageText => images.image_text.clamp(0.0, 1.0),
        FeatureName::SimImageCaption => images.image_caption.clamp(0.0, 1.0),
        FeatureName::SimImageCombined => images.combined().clamp(0.0, 1.0),
    }
}

pub fn featurize_encoded(
    query: &EncodedQuestion,
    candidate: &EncodedQuestion,
    images: Option<ImageSims>,
    schema: &Arc<FeatureSchema>,
) -> FeatureVector {
    let values = schema
        .names()
        .iter()
        .map(|n| feature_value(*n, query, candidate, images))
        .collect();
    FeatureVector {
        schema: Arc::clone(schema),
        values,
    }
}

/// Featurize a prepared pair directly.
pub fn featurize_pair(
    featurizer: &TextFeaturizer,
    query: &PreparedQuestion,
    candidate: &PreparedQuestion,
    images: Option<ImageSims>,
    schema: &Arc<FeatureSchema>,
) -> FeatureVector {
    featurize_encoded(
        &featurizer.encode(query),
        &featurizer.encode(candidate),
        images,
        schema,
    )
}
