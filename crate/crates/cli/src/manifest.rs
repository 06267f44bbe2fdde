//! Run manifest: one TOML file naming inputs, seeds and settings. Relative
//! paths resolve against the manifest's directory; flags override fields.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use dupimage::eval::{CombinedMode, ConfigName, EvalConfig, Seeds};
use dupimage::features::DEFAULT_DELTA_THRESHOLD;
use dupimage::imaging::ProviderConfig;
use dupimage::par::ExecPolicy;
use dupimage::pipeline::{PoolPolicy, RunSettings};
use dupimage::textprep::{Preprocessor, StopList, TagSynonymMap};
use serde::Deserialize;

use crate::Overrides;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub posts: Option<PathBuf>,
    pub postlinks: Option<PathBuf>,
    /// Alternative to the XML dump.
    pub questions_jsonl: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResourcesSection {
    pub synonyms: Option<PathBuf>,
    pub stopwords: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProvidersSection {
    pub ocr: Option<ProviderConfig>,
    pub caption: Option<ProviderConfig>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedsSection {
    pub pairing: Option<u64>,
    pub split: Option<u64>,
    pub training: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub train_fraction: Option<f64>,
    pub stratified: Option<bool>,
    pub learning_rate: Option<f64>,
    pub epochs: Option<usize>,
    pub l2: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub configs: Option<Vec<String>>,
    pub k: Option<Vec<usize>>,
    pub pool: Option<PoolPolicy>,
    pub combined_mode: Option<CombinedMode>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditSection {
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub corpus: CorpusSection,
    #[serde(default)]
    pub resources: ResourcesSection,
    pub cache: PathBuf,
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub cache_only: bool,
    pub jobs: Option<usize>,
    #[serde(default)]
    pub providers: ProvidersSection,
    #[serde(default)]
    pub seeds: SeedsSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub audit: AuditSection,
}

impl RunManifest {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read manifest {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("invalid manifest {}", path.display()))
    }
}

/// Where the corpus comes from.
#[derive(Debug, Clone)]
pub enum CorpusSource {
    Dump {
        posts: PathBuf,
        postlinks: Option<PathBuf>,
    },
    Jsonl(PathBuf),
}

/// A validated manifest with flag overrides applied.
#[derive(Debug)]
pub struct Resolved {
    pub corpus: CorpusSource,
    pub synonyms: Option<PathBuf>,
    pub stopwords: Option<PathBuf>,
    pub cache: PathBuf,
    pub out: PathBuf,
    pub cache_only: bool,
    pub exec: ExecPolicy,
    pub providers: ProvidersSection,
    pub settings: RunSettings,
    pub configs: Vec<EvalConfig>,
    pub threshold: f64,
}

fn existing(base: &Path, path: &Path, what: &str) -> anyhow::Result<PathBuf> {
    let full = base.join(path);
    if !full.exists() {
        bail!("{what} {} does not exist", full.display());
    }
    Ok(full)
}

fn parse_list<T>(
    raw: &str,
    what: &str,
    parse: impl Fn(&str) -> anyhow::Result<T>,
) -> anyhow::Result<Vec<T>> {
    let items: Vec<T> = raw
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(parse)
        .collect::<anyhow::Result<_>>()?;
    if items.is_empty() {
        bail!("empty {what} list");
    }
    Ok(items)
}

pub fn parse_config_names(raw: &str) -> anyhow::Result<Vec<ConfigName>> {
    parse_list(raw, "config", |s| Ok(s.parse::<ConfigName>()?))
}

impl Resolved {
    pub fn new(
        manifest_path: &Path,
        manifest: RunManifest,
        flags: &Overrides,
    ) -> anyhow::Result<Self> {
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let corpus = match (&manifest.corpus.posts, &manifest.corpus.questions_jsonl) {
            (Some(posts), None) => CorpusSource::Dump {
                posts: existing(base, posts, "posts file")?,
                postlinks: manifest
                    .corpus
                    .postlinks
                    .as_deref()
                    .map(|p| existing(base, p, "postlinks file"))
                    .transpose()?,
            },
            (None, Some(jsonl)) => CorpusSource::Jsonl(existing(base, jsonl, "questions file")?),
            _ => bail!("[corpus] needs exactly one of `posts` or `questions_jsonl`"),
        };
        let synonyms = match (&flags.synonyms, &manifest.resources.synonyms) {
            (Some(p), _) => Some(existing(Path::new("."), p, "synonym map")?),
            (None, Some(p)) => Some(existing(base, p, "synonym map")?),
            (None, None) => None,
        };
        let stopwords = match (&flags.stopwords, &manifest.resources.stopwords) {
            (Some(p), _) => Some(existing(Path::new("."), p, "stop list")?),
            (None, Some(p)) => Some(existing(base, p, "stop list")?),
            (None, None) => None,
        };
        let cache = base.join(&manifest.cache);
        if let Some(parent) = cache.parent().filter(|p| !p.as_os_str().is_empty()) {
            if !parent.exists() {
                bail!("cache directory {} does not exist", parent.display());
            }
        }
        let out = match (&flags.out, &manifest.output_dir) {
            (Some(o), _) => o.clone(),
            (None, Some(o)) => base.join(o),
            (None, None) => bail!("no output directory: set `output_dir` or pass --out"),
        };

        let seed = |flag: Option<u64>, field: Option<u64>, name: &str| {
            flag.or(field).with_context(|| {
                format!("seed `{name}` is not set: add it to [seeds] or pass --seed-{name}")
            })
        };
        let seeds = Seeds {
            pairing: seed(flags.seed_pairing, manifest.seeds.pairing, "pairing")?,
            split: seed(flags.seed_split, manifest.seeds.split, "split")?,
            training: seed(flags.seed_training, manifest.seeds.training, "training")?,
        };

        let defaults = RunSettings::default();
        let t = &manifest.training;
        let e = &manifest.eval;
        let k_values = match (&flags.k, &e.k) {
            (Some(k), _) => k.clone(),
            (None, Some(k)) => k.clone(),
            (None, None) => defaults.k_values.clone(),
        };
        let settings = RunSettings {
            seeds,
            train_fraction: t.train_fraction.unwrap_or(defaults.train_fraction),
            stratified: t.stratified.unwrap_or(defaults.stratified),
            learning_rate: flags
                .learning_rate
                .or(t.learning_rate)
                .unwrap_or(defaults.learning_rate),
            epochs: flags.epochs.or(t.epochs).unwrap_or(defaults.epochs),
            l2: flags.l2.or(t.l2).unwrap_or(defaults.l2),
            pool: e.pool.unwrap_or_default(),
            combined_mode: e.combined_mode.unwrap_or_default(),
            k_values,
        };
        settings.hyperparams().validate()?;
        let names = match (&flags.config, &e.configs) {
            (Some(names), _) => names.clone(),
            (None, Some(list)) => parse_config_names(&list.join(","))?,
            (None, None) => ConfigName::ALL.to_vec(),
        };
        let configs = settings.configs(&names)?;

        let threshold = flags
            .threshold
            .or(manifest.audit.threshold)
            .unwrap_or(DEFAULT_DELTA_THRESHOLD);
        if !(0.0..=1.0).contains(&threshold) {
            bail!("threshold must lie in [0, 1], got {threshold}");
        }
        let jobs = flags.jobs.or(manifest.jobs).unwrap_or(0);
        Ok(Resolved {
            corpus,
            synonyms,
            stopwords,
            cache,
            out,
            cache_only: flags.cache_only || manifest.cache_only,
            exec: ExecPolicy::with_jobs(jobs),
            providers: manifest.providers,
            settings,
            configs,
            threshold,
        })
    }

    pub fn preprocessor(&self) -> anyhow::Result<Preprocessor> {
        let stop = match &self.stopwords {
            Some(p) => StopList::from_path(p)?,
            None => StopList::english(),
        };
        let synonyms = match &self.synonyms {
            Some(p) => TagSynonymMap::from_path(p)?,
            None => TagSynonymMap::builtin(),
        };
        Ok(Preprocessor::new(stop, synonyms))
    }
}
