//! One function per subcommand. Each checks its upstream artifacts, reads
//! them, and writes its own outputs under the output directory.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::sync::Arc;

use anyhow::anyhow;
use dupimage::classifier::{self, DataSplit, TrainedModel, TrainingExample};
use dupimage::corpus::{self, PairSet, Question};
use dupimage::eval::{evaluate_config, ConfigFailure, EvalConfig, EvalReport};
use dupimage::features::{
    delta_audit, read_feature_csv, write_delta_audit_csv, write_feature_csv, FeatureVector,
};
use dupimage::imaging::{
    collect_image_refs, resolve_artifacts, ArtifactCache, CaptionProvider, HttpCaptionProvider,
    HttpOcrProvider, ImageDiagnostic, OcrProvider, Providers, Resolution, ResolveMode,
};
use dupimage::pipeline::{self, corpus_fingerprint, Experiment};
use dupimage::ranker::write_rankings_jsonl;
use serde::Serialize;

use crate::artifacts::{read_json, require, write_atomic, write_json, Layout, SplitArtifact};
use crate::manifest::{CorpusSource, Resolved};
use crate::{CmdResult, Exit, Failure, ResultExt};

pub struct Ctx {
    pub resolved: Resolved,
    pub layout: Layout,
}

impl Ctx {
    pub fn new(resolved: Resolved) -> Self {
        let layout = Layout::new(resolved.out.clone());
        Ctx { resolved, layout }
    }
}

#[derive(Serialize)]
struct IngestReport {
    source: String,
    rows_seen: usize,
    non_question_rows: usize,
    skipped: BTreeMap<String, usize>,
    image_questions: usize,
    corpus_sha256: String,
}

pub fn ingest(ctx: &Ctx) -> CmdResult {
    let r = &ctx.resolved;
    let (questions, report) = match &r.corpus {
        CorpusSource::Dump { posts, postlinks } => {
            let (questions, diag) =
                pipeline::load_dump(posts, postlinks.as_deref(), &r.exec).data()?;
            let report = IngestReport {
                source: posts.display().to_string(),
                rows_seen: diag.rows_seen,
                non_question_rows: diag.non_question_rows,
                skipped: diag.skipped,
                image_questions: questions.len(),
                corpus_sha256: corpus_fingerprint(&questions),
            };
            (questions, report)
        }
        CorpusSource::Jsonl(path) => {
            let all = corpus::load_jsonl_corpus(path).data()?;
            corpus::ensure_unique_ids(&all).data()?;
            let rows = all.len();
            let mut questions = corpus::filter_image_questions(all);
            questions.sort_by_key(|q| q.id);
            let report = IngestReport {
                source: path.display().to_string(),
                rows_seen: rows,
                non_question_rows: 0,
                skipped: BTreeMap::new(),
                image_questions: questions.len(),
                corpus_sha256: corpus_fingerprint(&questions),
            };
            (questions, report)
        }
    };
    write_atomic(&ctx.layout.questions(), |out| {
        Ok(corpus::write_jsonl_corpus(&questions, out)?)
    })
    .data()?;
    write_json(&ctx.layout.ingest_report(), &report).data()?;
    println!(
        "ingest: {} image questions of {} rows",
        report.image_questions, report.rows_seen
    );
    Ok(())
}

fn load_questions(ctx: &Ctx) -> CmdResult<Vec<Question>> {
    let path = ctx.layout.questions();
    require(&path, "ingested questions", "ingest")?;
    corpus::load_jsonl_corpus(&path).data()
}

fn load_pairs(ctx: &Ctx) -> CmdResult<PairSet> {
    let path = ctx.layout.pairs();
    require(&path, "question pairs", "pairs")?;
    read_json(&path).data()
}

fn load_split(ctx: &Ctx) -> CmdResult<DataSplit> {
    let path = ctx.layout.split();
    require(&path, "train/test split", "pairs")?;
    let artifact: SplitArtifact = read_json(&path).data()?;
    if artifact.spec != ctx.resolved.settings.split_spec() {
        return Err(Failure::new(
            Exit::Data,
            anyhow!(
                "{} was made with different split settings; rerun `dupimage pairs`",
                path.display()
            ),
        ));
    }
    Ok(artifact.split)
}

pub fn pairs(ctx: &Ctx) -> CmdResult {
    let questions = load_questions(ctx)?;
    let settings = &ctx.resolved.settings;
    let pairs = corpus::build_pairs(&questions, settings.seeds.pairing).data()?;
    let spec = settings.split_spec();
    let split = classifier::split(&pairs.duplicates, &pairs.non_duplicates, &spec).data()?;
    write_json(&ctx.layout.pairs(), &pairs).data()?;
    write_json(
        &ctx.layout.split(),
        &SplitArtifact {
            spec,
            split: split.clone(),
        },
    )
    .data()?;
    println!(
        "pairs: {} duplicate, {} non-duplicate; train {}, test {}",
        pairs.duplicates.len(),
        pairs.non_duplicates.len(),
        split.train.len(),
        split.test.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct ImagesReport {
    urls: usize,
    cache_hits: usize,
    provider_calls: usize,
    mode: ResolveMode,
    diagnostics: Vec<ImageDiagnostic>,
}

fn build_providers(ctx: &Ctx) -> CmdResult<Providers> {
    let p = &ctx.resolved.providers;
    let ocr = p
        .ocr
        .clone()
        .map(|c| HttpOcrProvider::new(c).map(|x| Arc::new(x) as Arc<dyn OcrProvider>))
        .transpose()
        .provider()?;
    let caption = p
        .caption
        .clone()
        .map(|c| HttpCaptionProvider::new(c).map(|x| Arc::new(x) as Arc<dyn CaptionProvider>))
        .transpose()
        .provider()?;
    Ok(Providers { ocr, caption })
}

pub fn images(ctx: &Ctx) -> CmdResult {
    let questions = load_questions(ctx)?;
    let r = &ctx.resolved;
    let cache = ArtifactCache::open(&r.cache).data()?;
    let (providers, mode) = if r.cache_only {
        (Providers::none(), ResolveMode::CacheOnly)
    } else {
        (build_providers(ctx)?, ResolveMode::Online)
    };
    let urls = collect_image_refs(&questions);
    let res = resolve_artifacts(&urls, &providers, &cache, mode, &r.exec).provider()?;
    let failed = res
        .diagnostics
        .iter()
        .filter(|d| matches!(d, ImageDiagnostic::ProviderFailed { .. }))
        .count();
    let report = ImagesReport {
        urls: res.artifacts.len(),
        cache_hits: res.cache_hits,
        provider_calls: res.provider_calls,
        mode,
        diagnostics: res.diagnostics,
    };
    write_json(&ctx.layout.images_report(), &report).data()?;
    println!(
        "images: {} urls, {} cache hits, {} provider calls, {} unresolved",
        report.urls,
        report.cache_hits,
        report.provider_calls,
        report.diagnostics.len()
    );
    if failed > 0 {
        return Err(Failure::new(
            Exit::Provider,
            anyhow!(
                "{failed} images could not be resolved by the providers; see {}",
                ctx.layout.images_report().display()
            ),
        ));
    }
    Ok(())
}

/// Resolve from the cache alone; stages after `images` never reach a
/// provider.
fn cached_resolution(ctx: &Ctx, questions: &[Question]) -> CmdResult<Resolution> {
    let r = &ctx.resolved;
    let cache = ArtifactCache::open(&r.cache).data()?;
    let res = resolve_artifacts(
        &collect_image_refs(questions),
        &Providers::none(),
        &cache,
        ResolveMode::CacheOnly,
        &r.exec,
    )
    .data()?;
    if !res.diagnostics.is_empty() {
        log::warn!(
            "{} images are not cached and count as empty",
            res.diagnostics.len()
        );
    }
    Ok(res)
}

struct Prepared {
    questions: Vec<Question>,
    resolution: Resolution,
    experiment: Experiment,
}

fn prepare(ctx: &Ctx) -> CmdResult<Prepared> {
    let questions = load_questions(ctx)?;
    let split = load_split(ctx)?;
    let resolution = cached_resolution(ctx, &questions)?;
    let r = &ctx.resolved;
    let prep = r.preprocessor().data()?;
    let experiment = Experiment::build(
        &questions,
        split,
        &resolution,
        &prep,
        r.settings.pool,
        &r.exec,
    )
    .data()?;
    Ok(Prepared {
        questions,
        resolution,
        experiment,
    })
}

pub fn featurize(ctx: &Ctx) -> CmdResult {
    let p = prepare(ctx)?;
    let r = &ctx.resolved;
    for config in &r.configs {
        let schema = Arc::new(config.schema.clone());
        let examples = p
            .experiment
            .examples(&p.experiment.split().train, &schema, &r.exec)
            .data()?;
        let rows: Vec<(FeatureVector, _)> = examples
            .into_iter()
            .map(|e| (e.features, e.pair.label))
            .collect();
        write_atomic(&ctx.layout.features(config.name), |out| {
            Ok(write_feature_csv(&schema, &rows, out)?)
        })
        .data()?;
        println!(
            "featurize: {} ({} features, {} training rows)",
            config.name,
            schema.len(),
            rows.len()
        );
    }
    Ok(())
}

pub fn train(ctx: &Ctx) -> CmdResult {
    let split = load_split(ctx)?;
    let r = &ctx.resolved;
    for config in &r.configs {
        let path = ctx.layout.features(config.name);
        require(
            &path,
            &format!("feature matrix for {}", config.name),
            "featurize",
        )?;
        let file = File::open(&path).data()?;
        let (schema, rows) = read_feature_csv(BufReader::new(file)).data()?;
        if schema.as_ref() != &config.schema {
            return Err(Failure::new(
                Exit::Data,
                anyhow!(
                    "{} has schema [{}], expected [{}]",
                    path.display(),
                    schema.describe(),
                    config.schema.describe()
                ),
            ));
        }
        if rows.len() != split.train.len() {
            return Err(Failure::new(
                Exit::Data,
                anyhow!(
                    "{} has {} rows but the split has {} training pairs",
                    path.display(),
                    rows.len(),
                    split.train.len()
                ),
            ));
        }
        let examples = split
            .train
            .iter()
            .zip(rows)
            .map(|(pair, (features, label))| {
                if label != pair.label {
                    return Err(anyhow!(
                        "label of pair ({}, {}) disagrees with the split",
                        pair.query_id,
                        pair.candidate_id
                    ));
                }
                Ok(TrainingExample {
                    pair: *pair,
                    features,
                })
            })
            .collect::<anyhow::Result<Vec<_>>>()
            .data()?;
        let model = classifier::train(&examples, &r.settings.hyperparams(), &r.exec).data()?;
        write_atomic(&ctx.layout.model(config.name), |out| {
            Ok(model.to_writer(out)?)
        })
        .data()?;
        println!(
            "train: {} final loss {:.6}",
            config.name, model.training_meta.final_loss
        );
    }
    Ok(())
}

fn load_model(ctx: &Ctx, config: &EvalConfig) -> CmdResult<TrainedModel> {
    let path = ctx.layout.model(config.name);
    require(
        &path,
        &format!("trained model for {}", config.name),
        "train",
    )?;
    let model = TrainedModel::from_reader(BufReader::new(File::open(&path).data()?)).data()?;
    if model.schema != config.schema {
        return Err(Failure::new(
            Exit::Data,
            anyhow!(
                "{} was trained on [{}], config expects [{}]",
                path.display(),
                model.schema.describe(),
                config.schema.describe()
            ),
        ));
    }
    Ok(model)
}

pub fn rank(ctx: &Ctx) -> CmdResult {
    let r = &ctx.resolved;
    let models = r
        .configs
        .iter()
        .map(|c| load_model(ctx, c))
        .collect::<CmdResult<Vec<_>>>()?;
    let p = prepare(ctx)?;
    for (config, model) in r.configs.iter().zip(&models) {
        let rankings = p
            .experiment
            .rank_test(model, config.max_k(), &r.exec)
            .data()?;
        write_atomic(&ctx.layout.rankings(config.name), |out| {
            Ok(write_rankings_jsonl(&rankings, out)?)
        })
        .data()?;
        println!(
            "rank: {} ({} queries, top {})",
            config.name,
            rankings.len(),
            config.max_k()
        );
    }
    Ok(())
}

pub fn eval(ctx: &Ctx) -> CmdResult {
    let r = &ctx.resolved;
    let models = r
        .configs
        .iter()
        .map(|c| load_model(ctx, c))
        .collect::<CmdResult<Vec<_>>>()?;
    let pairs = load_pairs(ctx)?;
    let p = prepare(ctx)?;
    let truth = p.experiment.test_truth();
    let results = r.exec.map(
        &r.configs.iter().zip(&models).collect::<Vec<_>>(),
        |(config, model)| {
            let rankings = p.experiment.rank_test(model, config.max_k(), &r.exec)?;
            let rows = evaluate_config(config, &rankings, &truth)?;
            Ok::<_, anyhow::Error>((rankings, rows))
        },
    );
    let mut report = EvalReport {
        rows: Vec::new(),
        failures: Vec::new(),
        provenance: r
            .settings
            .provenance(&p.questions, &pairs, &p.experiment, &p.resolution),
    };
    for (config, result) in r.configs.iter().zip(results) {
        match result {
            Ok((rankings, rows)) => {
                write_atomic(&ctx.layout.rankings(config.name), |out| {
                    Ok(write_rankings_jsonl(&rankings, out)?)
                })
                .data()?;
                report.rows.extend(rows);
            }
            Err(e) => {
                log::error!("configuration {} failed: {e:#}", config.name);
                report.failures.push(ConfigFailure {
                    config: config.name,
                    error: format!("{e:#}"),
                });
            }
        }
    }
    write_atomic(&ctx.layout.report_csv(), |out| Ok(report.write_csv(out)?)).data()?;
    write_atomic(&ctx.layout.report_json(), |out| Ok(report.write_json(out)?)).data()?;
    for row in &report.rows {
        println!(
            "eval: {} recall-rate@{} = {:.2}% ({}/{})",
            row.config,
            row.k,
            row.recall_rate * 100.0,
            row.n_detected,
            row.n_all
        );
    }
    if !report.failures.is_empty() {
        return Err(Failure::new(
            Exit::Data,
            anyhow!(
                "{} configurations failed; see {}",
                report.failures.len(),
                ctx.layout.report_json().display()
            ),
        ));
    }
    Ok(())
}

pub fn report(ctx: &Ctx) -> CmdResult {
    let path = ctx.layout.report_json();
    require(&path, "evaluation report", "eval")?;
    let report: EvalReport = read_json(&path).data()?;
    let mut md = String::from("# Recall-rate@k\n\n");
    md.push_str(&report.to_markdown());
    md.push_str(&format!(
        "\nCorpus sha256 `{}`; seeds pairing={} split={} training={}; {} test queries against the `{}` pool.\n\
         Reference columns are published full-scale values and are not expected to match a small corpus.\n",
        report.provenance.corpus_sha256,
        report.provenance.seeds.pairing,
        report.provenance.seeds.split,
        report.provenance.seeds.training,
        report.provenance.n_test_queries,
        report.provenance.candidate_pool,
    ));
    write_atomic(&ctx.layout.report_md(), |out| {
        use std::io::Write;
        Ok(out.write_all(md.as_bytes())?)
    })
    .data()?;
    print!("{md}");
    Ok(())
}

pub fn audit_delta(ctx: &Ctx) -> CmdResult {
    let pairs = load_pairs(ctx)?;
    let p = prepare(ctx)?;
    let all: Vec<_> = pairs
        .duplicates
        .iter()
        .chain(&pairs.non_duplicates)
        .copied()
        .collect();
    let inputs = p.experiment.audit_inputs(&all).data()?;
    let entries = delta_audit(&inputs, ctx.resolved.threshold);
    write_atomic(&ctx.layout.delta_audit(), |out| {
        Ok(write_delta_audit_csv(&entries, out)?)
    })
    .data()?;
    println!(
        "audit-delta: {} of {} pairs with delta > {}",
        entries.len(),
        all.len(),
        ctx.resolved.threshold
    );
    Ok(())
}

pub fn run(ctx: &Ctx) -> CmdResult {
    ingest(ctx)?;
    pairs(ctx)?;
    images(ctx)?;
    featurize(ctx)?;
    train(ctx)?;
    eval(ctx)?;
    audit_delta(ctx)?;
    report(ctx)
}
