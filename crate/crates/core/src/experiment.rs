//! Experiment configuration and the end-to-end pipelines.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

use crate::corpus::{
    parse_conll, remap_for_extension, to_io, RemapMode, TagLabel, TagScheme, TaggedSentence,
};
use crate::decode::{viterbi, DecodingConfig};
use crate::embed::{hash_featurize, load_embeddings, EmbeddingTable};
use crate::error::{Error, ErrorKind, Stage, StageExt};
use crate::knn::{emission_rows, nnshot_predict, SupportIndex};
use crate::metrics::{aggregate, span_micro_f1, AggregateReport, EvalReport};
use crate::sampler::{build_episode, greedy_sample, SupportSet, DEFAULT_TEST_SIZE};
use crate::transitions::{
    apply_temperature, count_abstract, estimate_abstract, expand, AbstractTransitions,
    ExpandedTransitions, Normalization,
};

/// The three OntoNotes target groups.
pub const GROUP_A: [&str; 6] = ["ORG", "NORP", "ORDINAL", "WORK_OF_ART", "QUANTITY", "LAW"];
pub const GROUP_B: [&str; 6] = ["GPE", "CARDINAL", "PERCENT", "TIME", "EVENT", "LANGUAGE"];
pub const GROUP_C: [&str; 6] = ["PERSON", "DATE", "MONEY", "LOC", "FAC", "PRODUCT"];

/// Class set of a named target group (`A`, `B` or `C`).
pub fn target_group(name: &str) -> Option<BTreeSet<String>> {
    let group: &[&str] = match name.to_ascii_uppercase().as_str() {
        "A" => &GROUP_A,
        "B" => &GROUP_B,
        "C" => &GROUP_C,
        _ => return None,
    };
    Some(group.iter().map(|c| c.to_string()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    TagsetExtension,
    DomainTransfer,
    Episodes,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tagset-extension" => Ok(Mode::TagsetExtension),
            "domain-transfer" => Ok(Mode::DomainTransfer),
            "episodes" => Ok(Mode::Episodes),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::TagsetExtension => "tagset-extension",
            Mode::DomainTransfer => "domain-transfer",
            Mode::Episodes => "episodes",
        })
    }
}

/// Settings of one experiment, read from `key=value` lines.
///
/// Corpora are always converted to IO for sampling, indexing and
/// transition estimation. `scheme` only decides how gold spans are read
/// when scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub k: usize,
    pub n_support_sets: usize,
    pub n_episodes: usize,
    pub tau: f64,
    pub scheme: TagScheme,
    /// One seed per run; `None` means `1..=runs`.
    pub seeds: Option<Vec<u64>>,
    pub target_classes: Option<BTreeSet<String>>,
    pub source_train: Option<PathBuf>,
    pub target_dev: Option<PathBuf>,
    pub target_test: Option<PathBuf>,
    /// Episode pool; defaults to `target_test`.
    pub episode_pool: Option<PathBuf>,
    pub dev_embeddings: Option<PathBuf>,
    pub test_embeddings: Option<PathBuf>,
    pub pool_embeddings: Option<PathBuf>,
    /// Hash featurizer settings, used for any corpus without an embedding file.
    pub hash_dim: usize,
    pub hash_window: usize,
    pub use_transitions: bool,
    pub test_size: usize,
    pub normalization: Normalization,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::DomainTransfer,
            k: 5,
            n_support_sets: 5,
            n_episodes: 100,
            tau: 1.0,
            scheme: TagScheme::Io,
            seeds: None,
            target_classes: None,
            source_train: None,
            target_dev: None,
            target_test: None,
            episode_pool: None,
            dev_embeddings: None,
            test_embeddings: None,
            pool_embeddings: None,
            hash_dim: 256,
            hash_window: 2,
            use_transitions: true,
            test_size: DEFAULT_TEST_SIZE,
            normalization: Normalization::RowWise,
        }
    }
}

/// Keys accepted by [`ExperimentConfig::set`].
pub const CONFIG_KEYS: &[&str] = &[
    "mode",
    "k",
    "n_support_sets",
    "n_episodes",
    "tau",
    "scheme",
    "seeds",
    "target_classes",
    "target_group",
    "source_train",
    "target_dev",
    "target_test",
    "episode_pool",
    "dev_embeddings",
    "test_embeddings",
    "pool_embeddings",
    "hash_dim",
    "hash_window",
    "use_transitions",
    "test_size",
    "normalization",
];

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        other => Err(format!("expected a boolean, got `{other}`")),
    }
}

fn parse_positive(v: &str) -> Result<usize, String> {
    match v.parse::<usize>() {
        Ok(n) if n > 0 => Ok(n),
        _ => Err(format!("expected a positive integer, got `{v}`")),
    }
}

fn list(v: &str) -> impl Iterator<Item = &str> {
    v.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
}

impl ExperimentConfig {
    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let value = value.trim();
        let path = || Some(PathBuf::from(value));
        match key {
            "mode" => self.mode = value.parse()?,
            "k" => self.k = parse_positive(value)?,
            "n_support_sets" => self.n_support_sets = parse_positive(value)?,
            "n_episodes" => self.n_episodes = parse_positive(value)?,
            "tau" => {
                self.tau = match value.parse::<f64>() {
                    Ok(t) if t > 0.0 && t.is_finite() => t,
                    _ => return Err(format!("tau must be a positive number, got `{value}`")),
                }
            }
            "scheme" => self.scheme = value.parse()?,
            "seeds" => {
                let seeds = list(value)
                    .map(|s| s.parse::<u64>().map_err(|_| format!("bad seed `{s}`")))
                    .collect::<Result<Vec<_>, _>>()?;
                self.seeds = Some(seeds);
            }
            "target_classes" => {
                let classes: BTreeSet<String> = list(value).map(str::to_string).collect();
                if classes.is_empty() {
                    return Err("target_classes is empty".into());
                }
                self.target_classes = Some(classes);
            }
            "target_group" => {
                self.target_classes = Some(
                    target_group(value)
                        .ok_or_else(|| format!("unknown target group `{value}` (A, B or C)"))?,
                )
            }
            "source_train" => self.source_train = path(),
            "target_dev" => self.target_dev = path(),
            "target_test" => self.target_test = path(),
            "episode_pool" => self.episode_pool = path(),
            "dev_embeddings" => self.dev_embeddings = path(),
            "test_embeddings" => self.test_embeddings = path(),
            "pool_embeddings" => self.pool_embeddings = path(),
            "hash_dim" => self.hash_dim = parse_positive(value)?,
            "hash_window" => {
                self.hash_window = value
                    .parse()
                    .map_err(|_| format!("bad hash_window `{value}`"))?
            }
            "use_transitions" => self.use_transitions = parse_bool(value)?,
            "test_size" => self.test_size = parse_positive(value)?,
            "normalization" => self.normalization = value.parse()?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    /// Parses `key=value` lines on top of the defaults. Blank lines and
    /// lines starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self, Error> {
        let mut config = Self::default();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key=value", idx + 1)))?;
            config
                .set(key.trim(), value)
                .map_err(|e| Error::config(format!("line {}: {e}", idx + 1)))?;
        }
        Ok(config)
    }

    /// Reads a config file. Relative paths inside it are resolved against
    /// the file's directory.
    pub fn from_file(path: &Path) -> Result<Self, Error> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(Stage::Config, path, e))?;
        let mut config = Self::parse(&text)?;
        if let Some(dir) = path.parent() {
            config.resolve_paths(dir);
        }
        Ok(config)
    }

    fn resolve_paths(&mut self, dir: &Path) {
        for p in [
            &mut self.source_train,
            &mut self.target_dev,
            &mut self.target_test,
            &mut self.episode_pool,
            &mut self.dev_embeddings,
            &mut self.test_embeddings,
            &mut self.pool_embeddings,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
    }

    /// Renders the config in the format read by [`ExperimentConfig::parse`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k}={v}").unwrap();
        kv("mode", self.mode.to_string());
        kv("k", self.k.to_string());
        kv("n_support_sets", self.n_support_sets.to_string());
        kv("n_episodes", self.n_episodes.to_string());
        kv("tau", self.tau.to_string());
        kv("scheme", self.scheme.to_string());
        if let Some(seeds) = &self.seeds {
            kv("seeds", seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(" "));
        }
        if let Some(classes) = &self.target_classes {
            kv("target_classes", classes.iter().cloned().collect::<Vec<_>>().join(" "));
        }
        for (k, p) in [
            ("source_train", &self.source_train),
            ("target_dev", &self.target_dev),
            ("target_test", &self.target_test),
            ("episode_pool", &self.episode_pool),
            ("dev_embeddings", &self.dev_embeddings),
            ("test_embeddings", &self.test_embeddings),
            ("pool_embeddings", &self.pool_embeddings),
        ] {
            if let Some(p) = p {
                kv(k, p.display().to_string());
            }
        }
        kv("hash_dim", self.hash_dim.to_string());
        kv("hash_window", self.hash_window.to_string());
        kv("use_transitions", self.use_transitions.to_string());
        kv("test_size", self.test_size.to_string());
        kv("normalization", self.normalization.to_string());
        out
    }

    /// Number of runs: support sets, or episodes in episode mode.
    pub fn runs(&self) -> usize {
        match self.mode {
            Mode::Episodes => self.n_episodes,
            _ => self.n_support_sets,
        }
    }

    /// Seed of every run.
    pub fn resolved_seeds(&self) -> Vec<u64> {
        match &self.seeds {
            Some(seeds) => seeds.clone(),
            None => (1..=self.runs() as u64).collect(),
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        if let Some(seeds) = &self.seeds {
            if seeds.len() != self.runs() {
                return Err(Error::config(format!(
                    "{} seeds given for {} runs",
                    seeds.len(),
                    self.runs()
                )));
            }
        }
        let need = |p: &Option<PathBuf>, key: &str| {
            if p.is_none() {
                Err(Error::config(format!("`{key}` is required in {} mode", self.mode)))
            } else {
                Ok(())
            }
        };
        match self.mode {
            Mode::TagsetExtension => {
                if self.target_classes.is_none() {
                    return Err(Error::config(
                        "tagset-extension needs target_classes or target_group",
                    ));
                }
                need(&self.source_train, "source_train")?;
                need(&self.target_dev, "target_dev")?;
                need(&self.target_test, "target_test")?;
            }
            Mode::DomainTransfer => {
                need(&self.target_dev, "target_dev")?;
                need(&self.target_test, "target_test")?;
            }
            Mode::Episodes => {
                if self.episode_pool.is_none() {
                    need(&self.target_test, "episode_pool or target_test")?;
                }
            }
        }
        if self.use_transitions {
            need(&self.source_train, "source_train")?;
        }
        Ok(())
    }

    pub fn decoding(&self) -> DecodingConfig {
        DecodingConfig {
            tau: self.tau,
            use_transitions: self.use_transitions,
        }
    }
}

/// A corpus and the embedding table aligned with it.
#[derive(Debug, Clone)]
pub struct Split {
    pub sentences: Vec<TaggedSentence>,
    pub table: EmbeddingTable,
}

/// Loaded corpora of one experiment.
#[derive(Debug, Clone)]
pub struct Inputs {
    /// Source training corpus, IO.
    pub source_train: Option<Vec<TaggedSentence>>,
    /// Support sampling pool (target dev, or the episode pool).
    pub dev: Split,
    /// Evaluation corpus (target test); unused in episode mode.
    pub test: Option<Split>,
}

pub fn read_corpus(path: &Path) -> Result<Vec<TaggedSentence>, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(Stage::Load, path, e))?;
    parse_conll(&text).map_err(|e| {
        Error::new(
            Stage::Load,
            ErrorKind::Config(format!("{}: {e}", path.display())),
        )
    })
}

/// Embeddings from `path` when given, else from the hash featurizer.
pub fn table_for(
    corpus: &[TaggedSentence],
    path: Option<&Path>,
    hash_dim: usize,
    hash_window: usize,
) -> Result<EmbeddingTable, Error> {
    match path {
        Some(p) => load_embeddings(p, corpus).stage(Stage::Load),
        None => hash_featurize(corpus, hash_dim, hash_window).stage(Stage::Featurize),
    }
}

fn io_corpus(corpus: &[TaggedSentence]) -> Vec<TaggedSentence> {
    corpus.iter().map(to_io).collect()
}

/// Reads every file the config names and applies the tag-set remapping.
pub fn load_inputs(config: &ExperimentConfig) -> Result<Inputs, Error> {
    config.validate()?;
    let source_train = config
        .source_train
        .as_deref()
        .map(read_corpus)
        .transpose()?;

    let remap = |corpus: Vec<TaggedSentence>, mode: RemapMode| -> Result<_, Error> {
        match (&config.mode, &config.target_classes) {
            (Mode::TagsetExtension, Some(classes)) => {
                remap_for_extension(&corpus, classes, mode).stage(Stage::Remap)
            }
            _ => Ok(corpus),
        }
    };
    let source_train = source_train
        .map(|c| remap(c, RemapMode::Train))
        .transpose()?
        .map(|c| io_corpus(&c));

    let (dev_path, dev_emb) = match config.mode {
        Mode::Episodes => (
            config.episode_pool.as_ref().or(config.target_test.as_ref()),
            config.pool_embeddings.as_ref().or(config.test_embeddings.as_ref()),
        ),
        _ => (config.target_dev.as_ref(), config.dev_embeddings.as_ref()),
    };
    let dev_path = dev_path.ok_or_else(|| Error::config("no sampling pool configured"))?;
    let dev = remap(read_corpus(dev_path)?, RemapMode::Test)?;
    let dev_table = table_for(&dev, dev_emb.map(PathBuf::as_path), config.hash_dim, config.hash_window)?;

    let test = match config.mode {
        Mode::Episodes => None,
        _ => {
            let path = config
                .target_test
                .as_ref()
                .ok_or_else(|| Error::config("target_test is required"))?;
            let test = remap(read_corpus(path)?, RemapMode::Test)?;
            let table = table_for(
                &test,
                config.test_embeddings.as_deref(),
                config.hash_dim,
                config.hash_window,
            )?;
            Some(Split {
                sentences: test,
                table,
            })
        }
    };
    Ok(Inputs {
        source_train,
        dev: Split {
            sentences: dev,
            table: dev_table,
        },
        test,
    })
}

/// Tags `test` with a support set.
///
/// `support_table` rows are addressed by `support.source_ids()`;
/// `test_table` is aligned with `test`. With transitions enabled, `trans`
/// is tempered by `decoding.tau` and decoded with Viterbi; otherwise every
/// token gets its nearest class.
pub fn run_predict(
    support: &SupportSet,
    support_table: &EmbeddingTable,
    test: &[TaggedSentence],
    test_table: &EmbeddingTable,
    trans: Option<&ExpandedTransitions>,
    decoding: &DecodingConfig,
) -> Result<Vec<Vec<TagLabel>>, Error> {
    let missing: Vec<usize> = test
        .iter()
        .enumerate()
        .filter(|(i, s)| *i >= test_table.len() || test_table.token_count(*i) != s.len())
        .map(|(i, _)| i)
        .collect();
    if !missing.is_empty() {
        return Err(Error::new(Stage::Predict, ErrorKind::MissingEmbeddings(missing)));
    }
    let index = SupportIndex::from_support(support, support_table).stage(Stage::Predict)?;

    if !decoding.use_transitions {
        return (0..test.len())
            .map(|i| nnshot_predict(test_table.sentence(i), &index).stage(Stage::Predict))
            .collect();
    }
    let trans = trans.ok_or_else(|| {
        Error::new(
            Stage::Predict,
            ErrorKind::Config("decoding with transitions needs a transition matrix".into()),
        )
    })?;
    let tempered = if decoding.tau == 1.0 {
        trans.clone()
    } else {
        apply_temperature(trans, decoding.tau).stage(Stage::Predict)?
    };
    (0..test.len())
        .map(|i| {
            let rows = emission_rows(test_table.sentence(i), &index).stage(Stage::Predict)?;
            Ok(viterbi(&rows, &tempered).stage(Stage::Predict)?.tags)
        })
        .collect()
}

fn gold_for(test: &[TaggedSentence], scheme: TagScheme) -> Vec<TaggedSentence> {
    match scheme {
        TagScheme::Io => io_corpus(test),
        TagScheme::Bio => test.to_vec(),
    }
}

/// Abstract transitions of the source corpus, if decoding uses them.
fn source_transitions(
    config: &ExperimentConfig,
    inputs: &Inputs,
) -> Result<Option<AbstractTransitions>, Error> {
    if !config.use_transitions {
        return Ok(None);
    }
    let source = inputs
        .source_train
        .as_ref()
        .ok_or_else(|| Error::config("use_transitions needs source_train"))?;
    let counts = count_abstract(source).stage(Stage::Transitions)?;
    estimate_abstract(&counts, config.normalization)
        .map(Some)
        .stage(Stage::Transitions)
}

fn expand_for(
    abs: Option<&AbstractTransitions>,
    support: &SupportSet,
    mode: Normalization,
) -> Result<Option<ExpandedTransitions>, Error> {
    abs.map(|abs| {
        let classes = support.tag_set().classes().to_vec();
        Ok(expand(abs, &classes).stage(Stage::Transitions)?.with_mode(mode))
    })
    .transpose()
}

/// Runs every support set or episode of the config on loaded inputs.
pub fn run_inputs(config: &ExperimentConfig, inputs: &Inputs) -> Result<AggregateReport, Error> {
    config.validate_runs()?;
    let abs = source_transitions(config, inputs)?;
    let decoding = config.decoding();
    let seeds = config.resolved_seeds();
    let pool = io_corpus(&inputs.dev.sentences);

    let reports: Vec<EvalReport> = match config.mode {
        Mode::Episodes => seeds
            .par_iter()
            .map(|&seed| {
                let episode =
                    build_episode(&pool, config.k, config.test_size, seed).stage(Stage::Sample)?;
                let ids = episode.test.source_ids();
                let test_table = inputs.dev.table.select(ids);
                let trans = expand_for(abs.as_ref(), &episode.support, config.normalization)?;
                let pred = run_predict(
                    &episode.support,
                    &inputs.dev.table,
                    episode.test_sentences(),
                    &test_table,
                    trans.as_ref(),
                    &decoding,
                )?;
                let gold: Vec<TaggedSentence> =
                    ids.iter().map(|&i| inputs.dev.sentences[i].clone()).collect();
                span_micro_f1(&gold_for(&gold, config.scheme), &pred).stage(Stage::Evaluate)
            })
            .collect::<Result<_, Error>>()?,
        Mode::TagsetExtension | Mode::DomainTransfer => {
            let test = inputs
                .test
                .as_ref()
                .ok_or_else(|| Error::config("target_test is required"))?;
            let test_io = io_corpus(&test.sentences);
            let gold = gold_for(&test.sentences, config.scheme);
            seeds
                .par_iter()
                .map(|&seed| {
                    let support = greedy_sample(&pool, config.k, seed).stage(Stage::Sample)?;
                    let trans = expand_for(abs.as_ref(), &support, config.normalization)?;
                    let pred = run_predict(
                        &support,
                        &inputs.dev.table,
                        &test_io,
                        &test.table,
                        trans.as_ref(),
                        &decoding,
                    )?;
                    span_micro_f1(&gold, &pred).stage(Stage::Evaluate)
                })
                .collect::<Result<_, Error>>()?
        }
    };
    aggregate(reports).stage(Stage::Evaluate)
}

impl ExperimentConfig {
    fn validate_runs(&self) -> Result<(), Error> {
        if self.runs() == 0 || self.k == 0 || self.test_size == 0 {
            return Err(Error::config("k, test_size and run counts must be positive"));
        }
        if let Some(seeds) = &self.seeds {
            if seeds.len() != self.runs() {
                return Err(Error::config(format!(
                    "{} seeds given for {} runs",
                    seeds.len(),
                    self.runs()
                )));
            }
        }
        Ok(())
    }
}

/// Loads the inputs named by `config` and runs the experiment.
pub fn run_experiment(config: &ExperimentConfig) -> Result<AggregateReport, Error> {
    let inputs = load_inputs(config)?;
    run_inputs(config, &inputs)
}
