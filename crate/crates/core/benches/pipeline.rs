//! Sequential versus parallel execution of the heavy pipeline stages on a
//! synthetic corpus.

use std::collections::BTreeMap;
use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dupimage::classifier::{self, DataSplit, Hyperparams, SplitSpec};
use dupimage::corpus::{build_pairs, PostId, Question, QuestionStatus};
use dupimage::eval::{CombinedMode, ConfigName, EvalConfig};
use dupimage::imaging::{ImageArtifacts, ProviderIds, Resolution};
use dupimage::par::ExecPolicy;
use dupimage::pipeline::{Experiment, PoolPolicy};
use dupimage::textprep::{Preprocessor, StopList, TagSynonymMap};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOPICS: usize = 300;
const WORDS_PER_TOPIC: usize = 12;

struct Corpus {
    questions: Vec<Question>,
    resolution: Resolution,
}

fn sentence(rng: &mut ChaCha8Rng, topic: &[String], noise: &[String], n: usize) -> String {
    (0..n)
        .map(|_| {
            let pool = if rng.random_bool(0.7) { topic } else { noise };
            pool.choose(rng).unwrap().as_str()
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// One master, one duplicate and one closed non-duplicate per topic, each
/// with a single image whose OCR text and captions echo the topic words.
fn synthetic_corpus() -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let noise: Vec<String> = (0..2000).map(|i| format!("noise{i}")).collect();
    let mut questions = Vec::new();
    let mut artifacts = BTreeMap::new();
    for t in 0..TOPICS {
        let topic: Vec<String> = (0..WORDS_PER_TOPIC)
            .map(|i| format!("topic{t}word{i}"))
            .collect();
        let master = (t * 3 + 1) as PostId;
        let roles = [
            (master, QuestionStatus::Master, None),
            (master + 1, QuestionStatus::ClosedDuplicate, Some(master)),
            (master + 2, QuestionStatus::ClosedNonDuplicate, None),
        ];
        for (id, status, dup_of) in roles {
            let words: &[String] = if status == QuestionStatus::ClosedNonDuplicate {
                &noise
            } else {
                &topic
            };
            let url = format!("https://img.example/{id}.png");
            let body = format!(
                "<p>{}</p><pre><code>{}</code></pre><img src=\"{url}\">",
                sentence(&mut rng, words, &noise, 60),
                sentence(&mut rng, words, &noise, 20),
            );
            let title = sentence(&mut rng, words, &noise, 8);
            questions.push(Question::new(id, title, body, ["rust"], status, dup_of));
            let captions = (0..3)
                .map(|_| sentence(&mut rng, words, &noise, 10))
                .collect();
            artifacts.insert(
                url.clone(),
                ImageArtifacts::new(
                    &url,
                    sentence(&mut rng, words, &noise, 30),
                    captions,
                    ProviderIds::default(),
                ),
            );
        }
    }
    Corpus {
        questions,
        resolution: Resolution {
            artifacts,
            ..Resolution::default()
        },
    }
}

fn data_split(corpus: &Corpus) -> DataSplit {
    let pairs = build_pairs(&corpus.questions, 1).unwrap();
    classifier::split(
        &pairs.duplicates,
        &pairs.non_duplicates,
        &SplitSpec::default(),
    )
    .unwrap()
}

fn policies() -> [(&'static str, ExecPolicy); 2] {
    [
        ("sequential", ExecPolicy::Sequential),
        ("parallel", ExecPolicy::parallel()),
    ]
}

fn preprocessor() -> Preprocessor {
    Preprocessor::new(StopList::english(), TagSynonymMap::builtin())
}

fn bench_build(c: &mut Criterion) {
    let corpus = synthetic_corpus();
    let split = data_split(&corpus);
    let prep = preprocessor();
    let mut group = c.benchmark_group("featurize");
    group.sample_size(10);
    for (name, exec) in policies() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                Experiment::build(
                    black_box(&corpus.questions),
                    split.clone(),
                    &corpus.resolution,
                    &prep,
                    PoolPolicy::default(),
                    &exec,
                )
                .unwrap()
            })
        });
    }
    group.finish();
}

fn bench_train_and_rank(c: &mut Criterion) {
    let corpus = synthetic_corpus();
    let split = data_split(&corpus);
    let experiment = Experiment::build(
        &corpus.questions,
        split,
        &corpus.resolution,
        &preprocessor(),
        PoolPolicy::default(),
        &ExecPolicy::parallel(),
    )
    .unwrap();
    let config = EvalConfig::standard(ConfigName::CombinedPlusText, CombinedMode::default());
    let schema = Arc::new(config.schema.clone());
    let hp = Hyperparams {
        epochs: 100,
        ..Hyperparams::default()
    };

    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    for (name, exec) in policies() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| experiment.train(black_box(&schema), &hp, &exec).unwrap())
        });
    }
    group.finish();

    let model = experiment
        .train(&schema, &hp, &ExecPolicy::parallel())
        .unwrap();
    let mut group = c.benchmark_group("rank");
    group.sample_size(10);
    for (name, exec) in policies() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| experiment.rank_test(black_box(&model), 20, &exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_build, bench_train_and_rank);
criterion_main!(benches);
