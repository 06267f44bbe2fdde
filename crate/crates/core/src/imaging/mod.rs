//! Image references → OCR text and captions → per-pair image similarities.

mod cache;
mod provider;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{PostId, Question};
use crate::features::{cosine, FeatureError, ImageSims, SparseVector, TfIdfIndex};
use crate::par::ExecPolicy;
use crate::textprep::Preprocessor;

pub use cache::{image_key, ArtifactCache, ImageArtifacts, ProviderIds};
pub use provider::{
    CaptionProvider, HttpCaptionProvider, HttpOcrProvider, OcrProvider, ProviderConfig,
    ProviderError, DEFAULT_CAPTION_PROMPT,
};

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("artifact cache line {line}: {message}")]
    Cache { line: usize, message: String },
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResolveMode {
    /// Never contact a provider; cache misses come back empty.
    CacheOnly,
    Online,
}

#[derive(Clone, Default)]
pub struct Providers {
    pub ocr: Option<Arc<dyn OcrProvider>>,
    pub caption: Option<Arc<dyn CaptionProvider>>,
}

impl Providers {
    pub fn none() -> Self {
        Self::default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ImageDiagnostic {
    /// Cache miss in cache-only mode.
    Unresolved { url: String },
    /// Provider gave up; the image is treated as unresolved.
    ProviderFailed {
        url: String,
        stage: String,
        message: String,
    },
}

#[derive(Debug, Clone, Default)]
pub struct Resolution {
    /// One artifact per distinct input URL, keyed by URL.
    pub artifacts: BTreeMap<String, ImageArtifacts>,
    pub diagnostics: Vec<ImageDiagnostic>,
    pub cache_hits: usize,
    pub provider_calls: usize,
}

impl Resolution {
    pub fn get(&self, url: &str) -> Option<&ImageArtifacts> {
        self.artifacts.get(url)
    }
}

/// Resolve image URLs to artifacts.
///
/// Cache hits never touch a provider. In [`ResolveMode::CacheOnly`] a miss
/// yields an empty artifact and an `Unresolved` diagnostic. Online, misses go
/// to the providers (bounded by `exec`) and successful results are persisted
/// before they are returned; a provider failure is recorded and the image is
/// treated as unresolved.
pub fn resolve_artifacts<S: AsRef<str>>(
    urls: &[S],
    providers: &Providers,
    cache: &ArtifactCache,
    mode: ResolveMode,
    exec: &ExecPolicy,
) -> Result<Resolution, ImagingError> {
    let distinct: BTreeSet<&str> = urls
        .iter()
        .map(|u| u.as_ref().trim())
        .filter(|u| !u.is_empty())
        .collect();
    let mut res = Resolution::default();
    let mut misses = Vec::new();
    for url in distinct {
        match cache.get(url) {
            Some(a) => {
                res.cache_hits += 1;
                res.artifacts.insert(url.to_string(), a);
            }
            None => misses.push(url.to_string()),
        }
    }

    if mode == ResolveMode::CacheOnly || (providers.ocr.is_none() && providers.caption.is_none()) {
        for url in misses {
            res.diagnostics
                .push(ImageDiagnostic::Unresolved { url: url.clone() });
            res.artifacts
                .insert(url.clone(), ImageArtifacts::unresolved(&url));
        }
        return Ok(res);
    }

    let fetched = exec.map(&misses, |url| fetch_one(url, providers));
    for (url, (outcome, calls)) in misses.iter().zip(fetched) {
        res.provider_calls += calls;
        match outcome {
            Ok(artifact) => {
                cache.insert(artifact.clone())?;
                res.artifacts.insert(url.clone(), artifact);
            }
            Err(diag) => {
                res.diagnostics.push(diag);
                res.artifacts
                    .insert(url.clone(), ImageArtifacts::unresolved(url));
            }
        }
    }
    Ok(res)
}

fn fetch_one(url: &str, providers: &Providers) -> (Result<ImageArtifacts, ImageDiagnostic>, usize) {
    let mut calls = 0;
    let mut ids = ProviderIds::default();
    let mut ocr_text = String::new();
    if let Some(ocr) = &providers.ocr {
        calls += 1;
        match ocr.extract_text(url) {
            Ok(t) => {
                ocr_text = t;
                ids.ocr = ocr.id().to_string();
            }
            Err(e) => {
                return (
                    Err(ImageDiagnostic::ProviderFailed {
                        url: url.to_string(),
                        stage: "ocr".into(),
                        message: e.to_string(),
                    }),
                    calls,
                )
            }
        }
    }
    let mut captions = Vec::new();
    if let Some(cap) = &providers.caption {
        calls += 1;
        match cap.captions(url) {
            Ok(c) => {
                captions = c;
                ids.caption = cap.id().to_string();
            }
            Err(e) => {
                return (
                    Err(ImageDiagnostic::ProviderFailed {
                        url: url.to_string(),
                        stage: "caption".into(),
                        message: e.to_string(),
                    }),
                    calls,
                )
            }
        }
    }
    (Ok(ImageArtifacts::new(url, ocr_text, captions, ids)), calls)
}

/// Every image URL referenced by `questions`, in first-seen order.
pub fn collect_image_refs(questions: &[Question]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    questions
        .iter()
        .flat_map(|q| q.image_refs.iter())
        .filter(|u| seen.insert(u.as_str()))
        .cloned()
        .collect()
}

/// Cosine of tf-idf vectors of two prepared OCR token lists; 0 when either is
/// empty.
pub fn image_text_similarity(ocr_a: &[String], ocr_b: &[String], index: &TfIdfIndex) -> f64 {
    if ocr_a.is_empty() || ocr_b.is_empty() {
        return 0.0;
    }
    cosine(&index.vectorize(ocr_a), &index.vectorize(ocr_b))
}

/// Best cosine over all caption cross pairs; 0 when either list is empty.
pub fn image_caption_similarity(
    captions_a: &[Vec<String>],
    captions_b: &[Vec<String>],
    index: &TfIdfIndex,
) -> f64 {
    let va: Vec<SparseVector> = captions_a.iter().map(|c| index.vectorize(c)).collect();
    let vb: Vec<SparseVector> = captions_b.iter().map(|c| index.vectorize(c)).collect();
    max_cross_cosine(&va, &vb)
}

fn max_cross_cosine(a: &[SparseVector], b: &[SparseVector]) -> f64 {
    a.iter()
        .flat_map(|x| b.iter().map(move |y| cosine(x, y)))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// OCR text of all images concatenated; caption similarity is the max
    /// over all image pairs.
    #[default]
    ConcatOcrMaxCaption,
}

/// Prepared OCR tokens and captions of one question's images.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionImages {
    pub ocr_tokens: Vec<String>,
    /// Prepared captions of every image, flattened.
    pub captions: Vec<Vec<String>>,
}

impl QuestionImages {
    pub fn prepare(
        artifacts: &[&ImageArtifacts],
        prep: &Preprocessor,
        mode: AggregationMode,
    ) -> Self {
        match mode {
            AggregationMode::ConcatOcrMaxCaption => {
                let ocr: Vec<&str> = artifacts
                    .iter()
                    .map(|a| a.ocr_text.trim())
                    .filter(|t| !t.is_empty())
                    .collect();
                QuestionImages {
                    ocr_tokens: prep.prepare_text(&ocr.join("\n")),
                    captions: artifacts
                        .iter()
                        .flat_map(|a| a.captions.iter())
                        .map(|c| prep.prepare_text(c))
                        .filter(|c| !c.is_empty())
                        .collect(),
                }
            }
        }
    }
}

/// Frozen weighting spaces for OCR text and captions, fitted on training
/// questions.
#[derive(Debug, Clone)]
pub struct ImageFeaturizer {
    ocr_index: TfIdfIndex,
    caption_index: TfIdfIndex,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedImages {
    pub ocr: SparseVector,
    pub captions: Vec<SparseVector>,
}

impl ImageFeaturizer {
    /// Each training question contributes one OCR document and one document
    /// per caption.
    pub fn fit<'a>(
        training: impl IntoIterator<Item = &'a QuestionImages>,
    ) -> Result<Self, FeatureError> {
        let training: Vec<&QuestionImages> = training.into_iter().collect();
        let ocr_index = TfIdfIndex::fit(training.iter().map(|q| q.ocr_tokens.clone()))?;
        let mut caption_docs: Vec<Vec<String>> = training
            .iter()
            .flat_map(|q| q.captions.iter().cloned())
            .collect();
        if caption_docs.is_empty() {
            caption_docs.push(Vec::new());
        }
        let caption_index = TfIdfIndex::fit(caption_docs)?;
        Ok(ImageFeaturizer {
            ocr_index,
            caption_index,
        })
    }

    pub fn ocr_index(&self) -> &TfIdfIndex {
        &self.ocr_index
    }

    pub fn caption_index(&self) -> &TfIdfIndex {
        &self.caption_index
    }

    pub fn encode(&self, images: &QuestionImages) -> EncodedImages {
        EncodedImages {
            ocr: self.ocr_index.vectorize(&images.ocr_tokens),
            captions: images
                .captions
                .iter()
                .map(|c| self.caption_index.vectorize(c))
                .collect(),
        }
    }

    pub fn similarity(&self, a: &EncodedImages, b: &EncodedImages) -> ImageSims {
        ImageSims {
            image_text: cosine(&a.ocr, &b.ocr),
            image_caption: max_cross_cosine(&a.captions, &b.captions),
        }
    }
}

/// Image similarities of two questions from their raw artifacts.
pub fn aggregate_question_images(
    a: &[&ImageArtifacts],
    b: &[&ImageArtifacts],
    prep: &Preprocessor,
    featurizer: &ImageFeaturizer,
    mode: AggregationMode,
) -> ImageSims {
    let qa = QuestionImages::prepare(a, prep, mode);
    let qb = QuestionImages::prepare(b, prep, mode);
    ImageSims {
        image_text: image_text_similarity(&qa.ocr_tokens, &qb.ocr_tokens, featurizer.ocr_index()),
        image_caption: image_caption_similarity(
            &qa.captions,
            &qb.captions,
            featurizer.caption_index(),
        ),
    }
}

/// Prepared image data for every question, using resolved artifacts.
pub fn prepare_question_images(
    questions: &[Question],
    resolution: &Resolution,
    prep: &Preprocessor,
    mode: AggregationMode,
    exec: &ExecPolicy,
) -> BTreeMap<PostId, QuestionImages> {
    let prepared = exec.map(questions, |q| {
        let arts: Vec<&ImageArtifacts> = q
            .image_refs
            .iter()
            .filter_map(|u| resolution.get(u.trim()))
            .collect();
        (q.id, QuestionImages::prepare(&arts, prep, mode))
    });
    prepared.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct CountingOcr(AtomicUsize);
    impl OcrProvider for CountingOcr {
        fn id(&self) -> &str {
            "stub-ocr"
        }
        fn extract_text(&self, url: &str) -> Result<String, ProviderError> {
            self.0.fetch_add(1, Ordering::SeqCst);
            if url.contains("fail") {
                return Err(ProviderError::Status {
                    provider: "stub-ocr".into(),
                    status: 500,
                });
            }
            Ok(format!("text of {url}"))
        }
    }

    struct FixedCaptions;
    impl CaptionProvider for FixedCaptions {
        fn id(&self) -> &str {
            "stub-caption"
        }
        fn captions(&self, _url: &str) -> Result<Vec<String>, ProviderError> {
            Ok(vec!["a chart".into(), "a bar chart".into(), "bars".into()])
        }
    }

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn cache_hit_skips_provider() {
        let cache = ArtifactCache::in_memory();
        let cached = ImageArtifacts::new(
            "https://x/1.png",
            "cached".into(),
            vec![],
            ProviderIds::default(),
        );
        cache.insert(cached.clone()).unwrap();
        let ocr = Arc::new(CountingOcr(AtomicUsize::new(0)));
        let providers = Providers {
            ocr: Some(ocr.clone()),
            caption: None,
        };
        let res = resolve_artifacts(
            &["https://x/1.png"],
            &providers,
            &cache,
            ResolveMode::Online,
            &ExecPolicy::Sequential,
        )
        .unwrap();
        assert_eq!(res.get("https://x/1.png"), Some(&cached));
        assert_eq!(ocr.0.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn cache_only_miss_is_empty_with_diagnostic() {
        let cache = ArtifactCache::in_memory();
        let ocr = Arc::new(CountingOcr(AtomicUsize::new(0)));
        let providers = Providers {
            ocr: Some(ocr.clone()),
            caption: None,
        };
        let res = resolve_artifacts(
            &["https://x/9.png"],
            &providers,
            &cache,
            ResolveMode::CacheOnly,
            &ExecPolicy::Sequential,
        )
        .unwrap();
        assert!(res.get("https://x/9.png").unwrap().is_empty());
        assert_eq!(
            res.diagnostics,
            vec![ImageDiagnostic::Unresolved {
                url: "https://x/9.png".into()
            }]
        );
        assert_eq!(ocr.0.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn two_calls_one_request() {
        let cache = ArtifactCache::in_memory();
        let ocr = Arc::new(CountingOcr(AtomicUsize::new(0)));
        let providers = Providers {
            ocr: Some(ocr.clone()),
            caption: Some(Arc::new(FixedCaptions)),
        };
        let urls = ["https://x/2.png", "https://x/2.png"];
        let first = resolve_artifacts(
            &urls,
            &providers,
            &cache,
            ResolveMode::Online,
            &ExecPolicy::parallel(),
        )
        .unwrap();
        let second = resolve_artifacts(
            &urls,
            &providers,
            &cache,
            ResolveMode::Online,
            &ExecPolicy::parallel(),
        )
        .unwrap();
        assert_eq!(ocr.0.load(Ordering::SeqCst), 1);
        assert_eq!(first.artifacts, second.artifacts);
        let a = first.get("https://x/2.png").unwrap();
        assert_eq!(a.captions.len(), 3);
        assert_eq!(a.provider_ids.ocr, "stub-ocr");
        assert_eq!(second.cache_hits, 1);
    }

    #[test]
    fn provider_failure_is_recorded_and_not_cached() {
        let cache = ArtifactCache::in_memory();
        let providers = Providers {
            ocr: Some(Arc::new(CountingOcr(AtomicUsize::new(0)))),
            caption: None,
        };
        let res = resolve_artifacts(
            &["https://x/fail.png", "https://x/ok.png"],
            &providers,
            &cache,
            ResolveMode::Online,
            &ExecPolicy::Sequential,
        )
        .unwrap();
        assert_eq!(res.diagnostics.len(), 1);
        assert!(matches!(
            res.diagnostics[0],
            ImageDiagnostic::ProviderFailed { .. }
        ));
        assert!(res.get("https://x/fail.png").unwrap().is_empty());
        assert!(cache.get("https://x/fail.png").is_none());
        assert!(cache.get("https://x/ok.png").is_some());
    }

    #[test]
    fn image_text_examples() {
        let idx = TfIdfIndex::fit([toks("null pointer"), toks("stack trace")]).unwrap();
        let a = toks("null pointer");
        assert!((image_text_similarity(&a, &a, &idx) - 1.0).abs() < 1e-12);
        assert_eq!(image_text_similarity(&a, &[], &idx), 0.0);
        // toy: a = {null, pointer}, b = {null, trace}; all idf = ln 2 → 1/2
        let b = toks("null trace");
        assert!((image_text_similarity(&a, &b, &idx) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn caption_examples() {
        let idx =
            TfIdfIndex::fit([toks("bar chart"), toks("line graph"), toks("error dialog")]).unwrap();
        let same = vec![toks("bar chart")];
        assert!((image_caption_similarity(&same, &same, &idx) - 1.0).abs() < 1e-12);
        assert_eq!(image_caption_similarity(&same, &[], &idx), 0.0);
        assert_eq!(image_caption_similarity(&[], &same, &idx), 0.0);

        // 2x2 enumeration of cross-pair cosines with the index weights.
        let a = vec![toks("bar chart"), toks("error dialog")];
        let b = vec![toks("line chart"), toks("dialog box error")];
        let w = |t: &str| idx.idf(t);
        let dot_norm = |x: &[&str], y: &[&str]| {
            let nx: f64 = x.iter().map(|t| w(t).powi(2)).sum::<f64>().sqrt();
            let ny: f64 = y.iter().map(|t| w(t).powi(2)).sum::<f64>().sqrt();
            let d: f64 = x
                .iter()
                .filter(|t| y.contains(t))
                .map(|t| w(t).powi(2))
                .sum();
            d / (nx * ny)
        };
        let expected = [
            dot_norm(&["bar", "chart"], &["line", "chart"]),
            dot_norm(&["bar", "chart"], &["dialog", "box", "error"]),
            dot_norm(&["error", "dialog"], &["line", "chart"]),
            dot_norm(&["error", "dialog"], &["dialog", "box", "error"]),
        ]
        .into_iter()
        .fold(0.0, f64::max);
        assert!((image_caption_similarity(&a, &b, &idx) - expected).abs() < 1e-12);
    }

    #[test]
    fn aggregation_concatenates_ocr_and_maxes_captions() {
        let prep = Preprocessor::default();
        let a1 = ImageArtifacts::new(
            "a1",
            "segmentation fault".into(),
            vec!["terminal window".into()],
            ProviderIds::default(),
        );
        let a2 = ImageArtifacts::new(
            "a2",
            "   ".into(),
            vec!["bar chart".into()],
            ProviderIds::default(),
        );
        let b1 = ImageArtifacts::new(
            "b1",
            "segmentation fault".into(),
            vec!["pie chart".into()],
            ProviderIds::default(),
        );
        let b2 = ImageArtifacts::new(
            "b2",
            String::new(),
            vec!["terminal window".into()],
            ProviderIds::default(),
        );

        let qa = QuestionImages::prepare(&[&a1, &a2], &prep, AggregationMode::default());
        let qa1 = QuestionImages::prepare(&[&a1], &prep, AggregationMode::default());
        assert_eq!(qa.ocr_tokens, qa1.ocr_tokens);

        let qb = QuestionImages::prepare(&[&b1, &b2], &prep, AggregationMode::default());
        let fz = ImageFeaturizer::fit([&qa, &qb]).unwrap();
        let sims = aggregate_question_images(
            &[&a1, &a2],
            &[&b1, &b2],
            &prep,
            &fz,
            AggregationMode::default(),
        );
        assert!((sims.image_text - 1.0).abs() < 1e-12);
        // a1 vs b2 captions are identical
        assert!((sims.image_caption - 1.0).abs() < 1e-12);

        let pair_max = [(&a1, &b1), (&a1, &b2), (&a2, &b1), (&a2, &b2)]
            .iter()
            .map(|(x, y)| {
                aggregate_question_images(&[x], &[y], &prep, &fz, AggregationMode::default())
                    .image_caption
            })
            .fold(0.0, f64::max);
        assert_eq!(sims.image_caption, pair_max);

        let encoded = fz.similarity(&fz.encode(&qa), &fz.encode(&qb));
        assert_eq!(encoded, sims);
    }
}
