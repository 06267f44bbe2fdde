//! End-to-end wiring of the stages: ingest, pair, resolve images, featurize,
//! train, rank and evaluate.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::BufReader;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::classifier::{
    self, ClassifierError, DataSplit, Hyperparams, SplitSpec, TrainedModel, TrainingExample,
};
use crate::corpus::{
    self, CorpusError, PairSet, ParseDiagnostics, PostId, Question, QuestionPair, QuestionStatus,
};
use crate::eval::{
    evaluate_config, reference_rows, CombinedMode, ConfigFailure, ConfigName, EvalConfig,
    EvalError, EvalReport, EvalRow, Provenance, Seeds, DEFAULT_K_VALUES,
};
use crate::features::{
    featurize_encoded, AuditInput, EncodedQuestion, FeatureError, FeatureSchema, FeatureVector,
    ImageSims, TextFeaturizer,
};
use crate::imaging::{
    prepare_question_images, AggregationMode, EncodedImages, ImageFeaturizer, Resolution,
};
use crate::par::ExecPolicy;
use crate::ranker::{batch_rank, RankError, RankedList};
use crate::textprep::{PreparedQuestion, Preprocessor};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Rank(#[from] RankError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("pair references question {0}, which is not in the corpus")]
    UnknownQuestion(PostId),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which questions every query is ranked against.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolPolicy {
    /// All master questions and all closed non-duplicates.
    #[default]
    MastersAndNonDuplicates,
    /// Every question in the corpus except the query itself.
    AllQuestions,
}

impl PoolPolicy {
    pub fn as_str(&self) -> &'static str {
        match self {
            PoolPolicy::MastersAndNonDuplicates => "masters_and_non_duplicates",
            PoolPolicy::AllQuestions => "all_questions",
        }
    }

    pub fn select(&self, questions: &[Question]) -> Vec<PostId> {
        let mut ids: Vec<PostId> = questions
            .iter()
            .filter(|q| match self {
                PoolPolicy::MastersAndNonDuplicates => {
                    matches!(
                        q.status,
                        QuestionStatus::Master | QuestionStatus::ClosedNonDuplicate
                    )
                }
                PoolPolicy::AllQuestions => true,
            })
            .map(|q| q.id)
            .collect();
        ids.sort_unstable();
        ids
    }
}

/// Parse a dump, apply duplicate links and keep image-bearing questions,
/// sorted by id.
pub fn load_dump(
    posts: &Path,
    postlinks: Option<&Path>,
    exec: &ExecPolicy,
) -> Result<(Vec<Question>, ParseDiagnostics), PipelineError> {
    let parsed = corpus::parse_posts(BufReader::new(File::open(posts)?), exec)?;
    let mut questions = parsed.questions;
    if let Some(links) = postlinks {
        let links = corpus::parse_postlinks(BufReader::new(File::open(links)?))?;
        corpus::apply_links(&mut questions, &links);
    }
    corpus::ensure_unique_ids(&questions)?;
    let mut questions = corpus::filter_image_questions(questions);
    questions.sort_by_key(|q| q.id);
    Ok((questions, parsed.diagnostics))
}

/// SHA-256 of the canonical JSONL serialization of `questions`.
pub fn corpus_fingerprint(questions: &[Question]) -> String {
    let mut buf = Vec::new();
    corpus::write_jsonl_corpus(questions, &mut buf).expect("writing to memory succeeds");
    hex::encode(Sha256::digest(&buf))
}

/// Frozen feature spaces and encoded questions for one train/test split.
/// Document frequencies come from questions that appear in training pairs.
#[derive(Debug)]
pub struct Experiment {
    split: DataSplit,
    pool: Vec<PostId>,
    text: BTreeMap<PostId, EncodedQuestion>,
    images: BTreeMap<PostId, EncodedImages>,
    image_featurizer: ImageFeaturizer,
}

impl Experiment {
    pub fn build(
        questions: &[Question],
        split: DataSplit,
        resolution: &Resolution,
        prep: &Preprocessor,
        pool: PoolPolicy,
        exec: &ExecPolicy,
    ) -> Result<Self, PipelineError> {
        let known: BTreeSet<PostId> = questions.iter().map(|q| q.id).collect();
        for p in split.train.iter().chain(&split.test) {
            for id in [p.query_id, p.candidate_id] {
                if !known.contains(&id) {
                    return Err(PipelineError::UnknownQuestion(id));
                }
            }
        }
        let train_ids: BTreeSet<PostId> = split
            .train
            .iter()
            .flat_map(|p| [p.query_id, p.candidate_id])
            .collect();

        let prepared: BTreeMap<PostId, PreparedQuestion> = exec
            .map(questions, |q| (q.id, prep.prepare_question(q)))
            .into_iter()
            .collect();
        let qimages = prepare_question_images(
            questions,
            resolution,
            prep,
            AggregationMode::default(),
            exec,
        );

        let text_featurizer = TextFeaturizer::fit(train_ids.iter().map(|id| &prepared[id]))?;
        let image_featurizer = ImageFeaturizer::fit(train_ids.iter().map(|id| &qimages[id]))?;

        let ids: Vec<PostId> = prepared.keys().copied().collect();
        let text = exec
            .map(&ids, |id| (*id, text_featurizer.encode(&prepared[id])))
            .into_iter()
            .collect();
        let images = exec
            .map(&ids, |id| (*id, image_featurizer.encode(&qimages[id])))
            .into_iter()
            .collect();
        Ok(Experiment {
            split,
            pool: pool.select(questions),
            text,
            images,
            image_featurizer,
        })
    }

    pub fn split(&self) -> &DataSplit {
        &self.split
    }

    pub fn pool(&self) -> &[PostId] {
        &self.pool
    }

    /// Test duplicates mapped to their masters.
    pub fn test_truth(&self) -> BTreeMap<PostId, PostId> {
        self.split
            .test_duplicates()
            .map(|p| (p.query_id, p.candidate_id))
            .collect()
    }

    fn encoded(&self, id: PostId) -> Result<&EncodedQuestion, PipelineError> {
        self.text.get(&id).ok_or(PipelineError::UnknownQuestion(id))
    }

    pub fn image_sims(&self, query: PostId, candidate: PostId) -> Result<ImageSims, PipelineError> {
        let a = self
            .images
            .get(&query)
            .ok_or(PipelineError::UnknownQuestion(query))?;
        let b = self
            .images
            .get(&candidate)
            .ok_or(PipelineError::UnknownQuestion(candidate))?;
        Ok(self.image_featurizer.similarity(a, b))
    }

    pub fn features(
        &self,
        query: PostId,
        candidate: PostId,
        schema: &Arc<FeatureSchema>,
    ) -> Result<FeatureVector, PipelineError> {
        let images = if schema.uses_images() {
            Some(self.image_sims(query, candidate)?)
        } else {
            None
        };
        Ok(featurize_encoded(
            self.encoded(query)?,
            self.encoded(candidate)?,
            images,
            schema,
        ))
    }

    pub fn examples(
        &self,
        pairs: &[QuestionPair],
        schema: &Arc<FeatureSchema>,
        exec: &ExecPolicy,
    ) -> Result<Vec<TrainingExample>, PipelineError> {
        exec.map(pairs, |p| {
            self.features(p.query_id, p.candidate_id, schema)
                .map(|features| TrainingExample { pair: *p, features })
        })
        .into_iter()
        .collect()
    }

    pub fn train(
        &self,
        schema: &Arc<FeatureSchema>,
        hp: &Hyperparams,
        exec: &ExecPolicy,
    ) -> Result<TrainedModel, PipelineError> {
        let examples = self.examples(&self.split.train, schema, exec)?;
        Ok(classifier::train(&examples, hp, exec)?)
    }

    /// Rank each query of `queries` against the candidate pool.
    pub fn rank(
        &self,
        model: &TrainedModel,
        queries: &[QuestionPair],
        k: usize,
        exec: &ExecPolicy,
    ) -> Result<BTreeMap<PostId, RankedList>, PipelineError> {
        let schema = Arc::new(model.schema.clone());
        let scorer = |q: PostId, c: PostId| -> Result<f64, RankError> {
            let score_err = |message: String| RankError::Score {
                query_id: q,
                candidate_id: c,
                message,
            };
            let x = self
                .features(q, c, &schema)
                .map_err(|e| score_err(e.to_string()))?;
            model
                .predict_proba(&x)
                .map_err(|e| score_err(e.to_string()))
        };
        Ok(batch_rank(queries, &self.pool, &scorer, k, exec)?)
    }

    /// Rank the test duplicates.
    pub fn rank_test(
        &self,
        model: &TrainedModel,
        k: usize,
        exec: &ExecPolicy,
    ) -> Result<BTreeMap<PostId, RankedList>, PipelineError> {
        let queries: Vec<QuestionPair> = self.split.test_duplicates().copied().collect();
        self.rank(model, &queries, k, exec)
    }

    pub fn audit_inputs(&self, pairs: &[QuestionPair]) -> Result<Vec<AuditInput>, PipelineError> {
        pairs
            .iter()
            .map(|p| {
                self.image_sims(p.query_id, p.candidate_id)
                    .map(|sims| AuditInput { pair: *p, sims })
            })
            .collect()
    }
}

/// Everything one configuration produced.
#[derive(Debug, Clone)]
pub struct ConfigRun {
    pub config: EvalConfig,
    pub model: TrainedModel,
    pub rankings: BTreeMap<PostId, RankedList>,
    pub rows: Vec<EvalRow>,
}

#[derive(Debug, Clone, Default)]
pub struct MatrixOutcome {
    pub runs: Vec<ConfigRun>,
    pub failures: Vec<ConfigFailure>,
}

impl MatrixOutcome {
    pub fn rows(&self) -> Vec<EvalRow> {
        self.runs
            .iter()
            .flat_map(|r| r.rows.iter().cloned())
            .collect()
    }

    pub fn run(&self, name: ConfigName) -> Option<&ConfigRun> {
        self.runs.iter().find(|r| r.config.name == name)
    }
}

pub fn run_config(
    exp: &Experiment,
    config: &EvalConfig,
    hp: &Hyperparams,
    exec: &ExecPolicy,
) -> Result<ConfigRun, PipelineError> {
    let schema = Arc::new(config.schema.clone());
    let model = exp.train(&schema, hp, exec)?;
    let rankings = exp.rank_test(&model, config.max_k(), exec)?;
    let rows = evaluate_config(config, &rankings, &exp.test_truth())?;
    Ok(ConfigRun {
        config: config.clone(),
        model,
        rankings,
        rows,
    })
}

/// Train, rank and evaluate every configuration on the experiment's shared
/// split. A failing configuration is recorded and the others still run.
/// Runs are returned in the order of `configs`.
pub fn run_matrix(
    exp: &Experiment,
    configs: &[EvalConfig],
    hp: &Hyperparams,
    exec: &ExecPolicy,
) -> MatrixOutcome {
    let results = exec.map(configs, |c| run_config(exp, c, hp, exec));
    let mut outcome = MatrixOutcome::default();
    for (config, result) in configs.iter().zip(results) {
        match result {
            Ok(run) => outcome.runs.push(run),
            Err(e) => {
                log::error!("configuration {} failed: {e}", config.name);
                outcome.failures.push(ConfigFailure {
                    config: config.name,
                    error: e.to_string(),
                })
            }
        }
    }
    outcome
}

/// Seeds, split, training and ranking settings of one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub seeds: Seeds,
    pub train_fraction: f64,
    pub stratified: bool,
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
    pub pool: PoolPolicy,
    pub combined_mode: CombinedMode,
    pub k_values: Vec<usize>,
}

impl Default for RunSettings {
    fn default() -> Self {
        let hp = Hyperparams::default();
        let split = SplitSpec::default();
        RunSettings {
            seeds: Seeds {
                pairing: 0,
                split: 0,
                training: 0,
            },
            train_fraction: split.train_fraction,
            stratified: split.stratified,
            learning_rate: hp.learning_rate,
            epochs: hp.epochs,
            l2: hp.l2,
            pool: PoolPolicy::default(),
            combined_mode: CombinedMode::default(),
            k_values: DEFAULT_K_VALUES.to_vec(),
        }
    }
}

impl RunSettings {
    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            train_fraction: self.train_fraction,
            seed: self.seeds.split,
            stratified: self.stratified,
        }
    }

    pub fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            l2: self.l2,
            seed: self.seeds.training,
        }
    }

    /// Standard feature sets of `names` with this run's k values.
    pub fn configs(&self, names: &[ConfigName]) -> Result<Vec<EvalConfig>, PipelineError> {
        names
            .iter()
            .map(|&n| {
                let schema = EvalConfig::standard(n, self.combined_mode).schema;
                Ok(EvalConfig::new(n, schema, self.k_values.clone())?)
            })
            .collect()
    }

    pub fn provenance(
        &self,
        questions: &[Question],
        pairs: &PairSet,
        exp: &Experiment,
        resolution: &Resolution,
    ) -> Provenance {
        Provenance {
            corpus_sha256: corpus_fingerprint(questions),
            seeds: self.seeds,
            hyperparams: self.hyperparams(),
            split: self.split_spec(),
            shared_split: true,
            candidate_pool: self.pool.as_str().to_string(),
            image_aggregation: "concat_ocr_max_caption".to_string(),
            combined_mode: self.combined_mode,
            n_questions: questions.len(),
            n_duplicate_pairs: pairs.duplicates.len(),
            n_non_duplicate_pairs: pairs.non_duplicates.len(),
            n_test_queries: exp.test_truth().len(),
            unresolved_images: resolution.diagnostics.len(),
            reference: reference_rows(),
        }
    }
}

/// Everything an evaluation run produced.
#[derive(Debug)]
pub struct Evaluation {
    pub pairs: PairSet,
    pub experiment: Experiment,
    pub outcome: MatrixOutcome,
    pub report: EvalReport,
}

/// Pair, split, featurize, train, rank and evaluate `configs` on `questions`
/// with already resolved image artifacts.
pub fn evaluate(
    questions: &[Question],
    resolution: &Resolution,
    prep: &Preprocessor,
    settings: &RunSettings,
    configs: &[EvalConfig],
    exec: &ExecPolicy,
) -> Result<Evaluation, PipelineError> {
    let pairs = corpus::build_pairs(questions, settings.seeds.pairing)?;
    let split = classifier::split(
        &pairs.duplicates,
        &pairs.non_duplicates,
        &settings.split_spec(),
    )?;
    let experiment = Experiment::build(questions, split, resolution, prep, settings.pool, exec)?;
    let outcome = run_matrix(&experiment, configs, &settings.hyperparams(), exec);
    let report = EvalReport {
        rows: outcome.rows(),
        failures: outcome.failures.clone(),
        provenance: settings.provenance(questions, &pairs, &experiment, resolution),
    };
    Ok(Evaluation {
        pairs,
        experiment,
        outcome,
        report,
    })
}
