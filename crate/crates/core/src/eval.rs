//! Recall-rate@k, the six-configuration comparison matrix and its report.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{Hyperparams, SplitSpec};
use crate::corpus::PostId;
use crate::features::{FeatureName, FeatureSchema};
use crate::ranker::RankedList;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no queries to evaluate")]
    NoQueries,
    #[error("query {0} is ranked but has no known master")]
    UnknownQuery(PostId),
    #[error("k = {k} exceeds the cut-off {cutoff} of the ranking for query {query_id}")]
    KBeyondCutoff {
        query_id: PostId,
        k: usize,
        cutoff: usize,
    },
    #[error("k values must be positive")]
    InvalidK,
    #[error("unknown configuration `{0}`")]
    UnknownConfig(String),
    #[error("schema [{schema}] does not fit configuration {config}")]
    InconsistentSchema { config: ConfigName, schema: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfigName {
    DupeText,
    OcrOnly,
    CaptionsOnly,
    OcrPlusText,
    CaptionsPlusText,
    CombinedPlusText,
}

impl ConfigName {
    pub const ALL: [ConfigName; 6] = [
        ConfigName::DupeText,
        ConfigName::OcrOnly,
        ConfigName::CaptionsOnly,
        ConfigName::OcrPlusText,
        ConfigName::CaptionsPlusText,
        ConfigName::CombinedPlusText,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ConfigName::DupeText => "dupe_text",
            ConfigName::OcrOnly => "ocr_only",
            ConfigName::CaptionsOnly => "captions_only",
            ConfigName::OcrPlusText => "ocr_plus_text",
            ConfigName::CaptionsPlusText => "captions_plus_text",
            ConfigName::CombinedPlusText => "combined_plus_text",
        }
    }

    /// Published full-scale recall-rates (percent at k = 5, 10, 20), carried
    /// as reference annotations only.
    pub fn reference_pct(&self) -> [f64; 3] {
        match self {
            ConfigName::DupeText => [43.43, 54.24, 61.06],
            ConfigName::OcrOnly => [21.63, 25.12, 30.28],
            ConfigName::CaptionsOnly => [13.98, 16.98, 24.28],
            ConfigName::OcrPlusText => [45.42, 55.57, 62.23],
            ConfigName::CaptionsPlusText => [43.93, 54.25, 61.23],
            ConfigName::CombinedPlusText => [45.26, 55.24, 62.37],
        }
    }

    fn uses_text(&self) -> bool {
        !matches!(self, ConfigName::OcrOnly | ConfigName::CaptionsOnly)
    }
}

impl fmt::Display for ConfigName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConfigName {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ConfigName::ALL
            .into_iter()
            .find(|c| c.as_str() == s.trim())
            .ok_or_else(|| EvalError::UnknownConfig(s.to_string()))
    }
}

/// How the combined configuration feeds image evidence to the classifier.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombinedMode {
    /// A single max-fused image feature.
    #[default]
    MaxFusion,
    /// Both raw image features side by side.
    BothRaw,
}

pub const DEFAULT_K_VALUES: [usize; 3] = [5, 10, 20];

/// Cosines over title-title, title-body, body-body and code-code.
pub const TEXT_FEATURES: [FeatureName; 4] = [
    FeatureName::SimTitleTitle,
    FeatureName::SimTitleBody,
    FeatureName::SimBodyBody,
    FeatureName::SimCodeCode,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub name: ConfigName,
    pub schema: FeatureSchema,
    pub k_values: Vec<usize>,
}

impl EvalConfig {
    pub fn new(
        name: ConfigName,
        schema: FeatureSchema,
        k_values: Vec<usize>,
    ) -> Result<Self, EvalError> {
        if k_values.is_empty() || k_values.contains(&0) {
            return Err(EvalError::InvalidK);
        }
        let has = |n: FeatureName| schema.position(n).is_some();
        let has_text = schema.names().iter().any(|n| !n.is_image());
        let consistent = match name {
            ConfigName::DupeText => !schema.uses_images(),
            ConfigName::OcrOnly => schema.names() == [FeatureName::SimImageText],
            ConfigName::CaptionsOnly => schema.names() == [FeatureName::SimImageCaption],
            ConfigName::OcrPlusText => {
                has(FeatureName::SimImageText)
                    && !has(FeatureName::SimImageCaption)
                    && !has(FeatureName::SimImageCombined)
            }
            ConfigName::CaptionsPlusText => {
                has(FeatureName::SimImageCaption)
                    && !has(FeatureName::SimImageText)
                    && !has(FeatureName::SimImageCombined)
            }
            ConfigName::CombinedPlusText => {
                has(FeatureName::SimImageCombined)
                    || (has(FeatureName::SimImageText) && has(FeatureName::SimImageCaption))
            }
        };
        if !consistent || has_text != name.uses_text() {
            return Err(EvalError::InconsistentSchema {
                config: name,
                schema: schema.describe(),
            });
        }
        let mut k_values = k_values;
        k_values.sort_unstable();
        k_values.dedup();
        Ok(EvalConfig {
            name,
            schema,
            k_values,
        })
    }

    /// The default feature set of `name`.
    pub fn standard(name: ConfigName, combined: CombinedMode) -> Self {
        let mut names: Vec<FeatureName> = if name.uses_text() {
            TEXT_FEATURES.to_vec()
        } else {
            Vec::new()
        };
        match name {
            ConfigName::DupeText => {}
            ConfigName::OcrOnly | ConfigName::OcrPlusText => names.push(FeatureName::SimImageText),
            ConfigName::CaptionsOnly | ConfigName::CaptionsPlusText => {
                names.push(FeatureName::SimImageCaption)
            }
            ConfigName::CombinedPlusText => match combined {
                CombinedMode::MaxFusion => names.push(FeatureName::SimImageCombined),
                CombinedMode::BothRaw => {
                    names.extend([FeatureName::SimImageText, FeatureName::SimImageCaption])
                }
            },
        }
        let schema = FeatureSchema::new(names).expect("standard schemas are valid");
        EvalConfig::new(name, schema, DEFAULT_K_VALUES.to_vec())
            .expect("standard configs are consistent")
    }

    pub fn all_standard(combined: CombinedMode) -> Vec<Self> {
        ConfigName::ALL
            .iter()
            .map(|&n| Self::standard(n, combined))
            .collect()
    }

    pub fn max_k(&self) -> usize {
        self.k_values.iter().copied().max().unwrap_or(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recall {
    pub rate: f64,
    pub n_detected: usize,
    pub n_all: usize,
}

/// Fraction of queries in `truth` whose master appears in their top-k list.
/// A query without a ranking counts as a miss.
pub fn recall_rate(
    rankings: &BTreeMap<PostId, RankedList>,
    truth: &BTreeMap<PostId, PostId>,
    k: usize,
) -> Result<Recall, EvalError> {
    if k == 0 {
        return Err(EvalError::InvalidK);
    }
    if truth.is_empty() {
        return Err(EvalError::NoQueries);
    }
    if let Some(q) = rankings.keys().find(|q| !truth.contains_key(q)) {
        return Err(EvalError::UnknownQuery(*q));
    }
    let mut n_detected = 0;
    for (query, master) in truth {
        let Some(list) = rankings.get(query) else {
            continue;
        };
        if k > list.k {
            return Err(EvalError::KBeyondCutoff {
                query_id: *query,
                k,
                cutoff: list.k,
            });
        }
        if list
            .entries
            .iter()
            .take(k)
            .any(|e| e.candidate_id == *master)
        {
            n_detected += 1;
        }
    }
    Ok(Recall {
        rate: n_detected as f64 / truth.len() as f64,
        n_detected,
        n_all: truth.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub config: ConfigName,
    pub k: usize,
    pub recall_rate: f64,
    pub recall_rate_pct: f64,
    pub n_detected: usize,
    pub n_all: usize,
}

impl EvalRow {
    pub fn new(config: ConfigName, k: usize, recall: Recall) -> Self {
        EvalRow {
            config,
            k,
            recall_rate: recall.rate,
            recall_rate_pct: round2(recall.rate * 100.0),
            n_detected: recall.n_detected,
            n_all: recall.n_all,
        }
    }
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Recall rows of one configuration at each of its k values.
pub fn evaluate_config(
    config: &EvalConfig,
    rankings: &BTreeMap<PostId, RankedList>,
    truth: &BTreeMap<PostId, PostId>,
) -> Result<Vec<EvalRow>, EvalError> {
    config
        .k_values
        .iter()
        .map(|&k| recall_rate(rankings, truth, k).map(|r| EvalRow::new(config.name, k, r)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigFailure {
    pub config: ConfigName,
    pub error: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub pairing: u64,
    pub split: u64,
    pub training: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub config: ConfigName,
    pub top5_pct: f64,
    pub top10_pct: f64,
    pub top20_pct: f64,
}

pub fn reference_rows() -> Vec<ReferenceRow> {
    ConfigName::ALL
        .iter()
        .map(|&c| {
            let [a, b, d] = c.reference_pct();
            ReferenceRow {
                config: c,
                top5_pct: a,
                top10_pct: b,
                top20_pct: d,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// SHA-256 of the canonical JSONL serialization of the evaluated corpus.
    pub corpus_sha256: String,
    pub seeds: Seeds,
    pub hyperparams: Hyperparams,
    pub split: SplitSpec,
    /// Every configuration is evaluated on the same train/test split.
    pub shared_split: bool,
    pub candidate_pool: String,
    pub image_aggregation: String,
    pub combined_mode: CombinedMode,
    pub n_questions: usize,
    pub n_duplicate_pairs: usize,
    pub n_non_duplicate_pairs: usize,
    pub n_test_queries: usize,
    pub unresolved_images: usize,
    /// Published full-scale values; not comparable with desk-scale runs.
    pub reference: Vec<ReferenceRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub failures: Vec<ConfigFailure>,
    pub provenance: Provenance,
}

impl EvalReport {
    pub fn rows_for(&self, config: ConfigName) -> impl Iterator<Item = &EvalRow> {
        self.rows.iter().filter(move |r| r.config == config)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["config", "k", "recall_rate_pct", "n_detected", "n_all"])?;
        for r in &self.rows {
            w.write_record([
                r.config.as_str().to_string(),
                r.k.to_string(),
                format!("{:.2}", r.recall_rate * 100.0),
                r.n_detected.to_string(),
                r.n_all.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json<W: Write>(&self, mut out: W) -> Result<(), EvalError> {
        serde_json::to_writer_pretty(&mut out, self)?;
        out.write_all(b"\n")?;
        Ok(())
    }

    /// Markdown comparison table of measured and reference values.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| config | k | recall-rate (%) | detected / all | reference (%) |\n|---|---|---|---|---|\n");
        for r in &self.rows {
            let reference = DEFAULT_K_VALUES
                .iter()
                .position(|&k| k == r.k)
                .map(|i| format!("{:.2}", r.config.reference_pct()[i]))
                .unwrap_or_else(|| "-".into());
            s.push_str(&format!(
                "| {} | {} | {:.2} | {} / {} | {} |\n",
                r.config,
                r.k,
                r.recall_rate * 100.0,
                r.n_detected,
                r.n_all,
                reference
            ));
        }
        for f in &self.failures {
            s.push_str(&format!(
                "| {} | - | failed: {} | - | - |\n",
                f.config,
                f.error.replace('|', "/")
            ));
        }
        s
    }
}
