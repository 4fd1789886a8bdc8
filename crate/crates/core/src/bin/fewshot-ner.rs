use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fewshot_ner::corpus::{compute_tag_set, render_conll, to_io, TagScheme, TaggedSentence};
use fewshot_ner::decode::DecodingConfig;
use fewshot_ner::embed::{corpus_digest, hash_featurize, write_embeddings};
use fewshot_ner::error::{ErrorKind, StageExt};
use fewshot_ner::experiment::{
    read_corpus, run_experiment, run_predict, table_for, ExperimentConfig,
};
use fewshot_ner::metrics::{aggregate, render_report, render_table, span_micro_f1};
use fewshot_ner::sampler::{build_episode, greedy_sample, SupportSet};
use fewshot_ner::transitions::{
    count_abstract, estimate_abstract, expand, ExpandedTransitions, Normalization,
};
use fewshot_ner::{Error, Stage};

#[derive(Parser)]
#[command(name = "fewshot-ner", version, about = "Few-shot NER with nearest-neighbor emissions and Viterbi decoding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a K-shot support set (and optionally an episode test set) from a corpus.
    SampleSupport(SampleArgs),
    /// Write hash-featurizer embeddings for a corpus.
    Featurize(FeaturizeArgs),
    /// Estimate transitions on a source corpus and expand them to target classes.
    EstimateTransitions(TransitionArgs),
    /// Tag a corpus using a support set.
    Predict(Box<PredictArgs>),
    /// Score predictions against gold tags.
    Evaluate(EvaluateArgs),
    /// Run a full experiment from a config file.
    Run(Box<RunArgs>),
}

#[derive(Args)]
struct SampleArgs {
    /// Corpus to sample from.
    #[arg(long)]
    pool: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Support manifest to write.
    #[arg(long)]
    out: PathBuf,
    /// Also draw an episode test set of at most this many sentences.
    #[arg(long, requires = "test_out")]
    test_size: Option<usize>,
    /// Manifest for the episode test set.
    #[arg(long, requires = "test_size")]
    test_out: Option<PathBuf>,
}

#[derive(Args)]
struct FeaturizeArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 256)]
    dim: usize,
    #[arg(long, default_value_t = 2)]
    window: usize,
}

#[derive(Args)]
struct TransitionArgs {
    /// Source training corpus.
    #[arg(long)]
    source: PathBuf,
    /// Target classes, comma or space separated.
    #[arg(long, conflicts_with = "target")]
    classes: Option<String>,
    /// Take the target classes from this corpus.
    #[arg(long, required_unless_present = "classes")]
    target: Option<PathBuf>,
    /// `row` (default) or `incoming`.
    #[arg(long, default_value = "row")]
    normalization: Normalization,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EmbeddingArgs {
    /// Hash featurizer dimension for corpora without an embedding file.
    #[arg(long, default_value_t = 256)]
    hash_dim: usize,
    #[arg(long, default_value_t = 2)]
    hash_window: usize,
}

#[derive(Args)]
struct PredictArgs {
    /// Support manifest written by `sample-support`.
    #[arg(long)]
    support: PathBuf,
    /// Corpus the support set was drawn from.
    #[arg(long)]
    pool: PathBuf,
    #[arg(long)]
    pool_embeddings: Option<PathBuf>,
    /// Corpus to tag.
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    test_embeddings: Option<PathBuf>,
    /// Transition file written by `estimate-transitions`.
    #[arg(long, required_unless_present = "no_transitions")]
    transitions: Option<PathBuf>,
    /// Temperature applied to the transitions before decoding.
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    /// Tag every token with its nearest class instead of decoding.
    #[arg(long)]
    no_transitions: bool,
    #[command(flatten)]
    embeddings: EmbeddingArgs,
    /// Output in column format: token and predicted tag.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    gold: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    /// How to read gold spans: `IO` (default) or `BIO`.
    #[arg(long, default_value = "IO")]
    scheme: TagScheme,
    /// Write a key=value report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (key=value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(flatten)]
    fields: ConfigFields,
    /// Run once per temperature in this list and tabulate the results.
    #[arg(long, value_delimiter = ',')]
    tau_grid: Vec<f64>,
    /// Write the key=value report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

/// Config fields as flags; each one overrides the config file.
#[derive(Args)]
struct ConfigFields {
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    n_support_sets: Option<String>,
    #[arg(long)]
    n_episodes: Option<String>,
    #[arg(long)]
    tau: Option<String>,
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    target_classes: Option<String>,
    #[arg(long)]
    target_group: Option<String>,
    #[arg(long)]
    source_train: Option<String>,
    #[arg(long)]
    target_dev: Option<String>,
    #[arg(long)]
    target_test: Option<String>,
    #[arg(long)]
    episode_pool: Option<String>,
    #[arg(long)]
    dev_embeddings: Option<String>,
    #[arg(long)]
    test_embeddings: Option<String>,
    #[arg(long)]
    pool_embeddings: Option<String>,
    #[arg(long)]
    hash_dim: Option<String>,
    #[arg(long)]
    hash_window: Option<String>,
    #[arg(long)]
    use_transitions: Option<String>,
    #[arg(long)]
    test_size: Option<String>,
    #[arg(long)]
    normalization: Option<String>,
}

impl ConfigFields {
    fn pairs(&self) -> Vec<(&'static str, &String)> {
        [
            ("mode", &self.mode),
            ("k", &self.k),
            ("n_support_sets", &self.n_support_sets),
            ("n_episodes", &self.n_episodes),
            ("tau", &self.tau),
            ("scheme", &self.scheme),
            ("seeds", &self.seeds),
            ("target_classes", &self.target_classes),
            ("target_group", &self.target_group),
            ("source_train", &self.source_train),
            ("target_dev", &self.target_dev),
            ("target_test", &self.target_test),
            ("episode_pool", &self.episode_pool),
            ("dev_embeddings", &self.dev_embeddings),
            ("test_embeddings", &self.test_embeddings),
            ("pool_embeddings", &self.pool_embeddings),
            ("hash_dim", &self.hash_dim),
            ("hash_window", &self.hash_window),
            ("use_transitions", &self.use_transitions),
            ("test_size", &self.test_size),
            ("normalization", &self.normalization),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.as_ref().map(|v| (k, v)))
        .collect()
    }
}

fn write_file(path: &Path, content: &str) -> Result<(), Error> {
    fs::write(path, content).map_err(|e| Error::io(Stage::Write, path, e))
}

fn read_text(path: &Path, stage: Stage) -> Result<String, Error> {
    fs::read_to_string(path).map_err(|e| Error::io(stage, path, e))
}

fn io_corpus(corpus: &[TaggedSentence]) -> Vec<TaggedSentence> {
    corpus.iter().map(to_io).collect()
}

fn sample_support(args: SampleArgs) -> Result<(), Error> {
    let pool = io_corpus(&read_corpus(&args.pool)?);
    let support = match (args.test_size, &args.test_out) {
        (Some(size), Some(test_out)) => {
            let episode = build_episode(&pool, args.k, size, args.seed).stage(Stage::Sample)?;
            write_file(test_out, &episode.test.to_manifest())?;
            println!("test set: {} sentences", episode.test.len());
            episode.support
        }
        _ => greedy_sample(&pool, args.k, args.seed).stage(Stage::Sample)?,
    };
    write_file(&args.out, &support.to_manifest())?;
    println!("support set: {} sentences", support.len());
    for class in support.class_order() {
        println!("  {class}: {}", support.count(class));
    }
    for s in support.shortfalls() {
        println!("  shortfall {}: {} of {}", s.class, s.got, s.wanted);
    }
    Ok(())
}

fn featurize(args: FeaturizeArgs) -> Result<(), Error> {
    let bytes = fs::read(&args.corpus).map_err(|e| Error::io(Stage::Load, &args.corpus, e))?;
    let corpus = read_corpus(&args.corpus)?;
    let table = hash_featurize(&corpus, args.dim, args.window).stage(Stage::Featurize)?;
    write_embeddings(&args.out, &table, Some(&corpus_digest(&bytes))).stage(Stage::Write)?;
    println!(
        "{} sentences, dim {}, written to {}",
        table.len(),
        table.dim(),
        args.out.display()
    );
    Ok(())
}

fn estimate_transitions(args: TransitionArgs) -> Result<(), Error> {
    let source = io_corpus(&read_corpus(&args.source)?);
    let classes: Vec<String> = match (&args.classes, &args.target) {
        (Some(list), _) => {
            let mut seen = BTreeSet::new();
            list.split(|c: char| c == ',' || c.is_whitespace())
                .filter(|c| !c.is_empty() && seen.insert(c.to_string()))
                .map(str::to_string)
                .collect()
        }
        (None, Some(target)) => compute_tag_set(&io_corpus(&read_corpus(target)?))
            .classes()
            .to_vec(),
        (None, None) => return Err(Error::config("give --classes or --target")),
    };
    let counts = count_abstract(&source).stage(Stage::Transitions)?;
    let abs = estimate_abstract(&counts, args.normalization).stage(Stage::Transitions)?;
    let expanded = expand(&abs, &classes)
        .stage(Stage::Transitions)?
        .with_mode(args.normalization);
    write_file(&args.out, &expanded.to_text())?;
    println!(
        "{} transitions counted; {} target classes written to {}",
        counts.total(),
        classes.len(),
        args.out.display()
    );
    Ok(())
}

fn predict(args: PredictArgs) -> Result<(), Error> {
    let pool = io_corpus(&read_corpus(&args.pool)?);
    let support =
        SupportSet::from_manifest(&read_text(&args.support, Stage::Load)?, &pool).stage(Stage::Load)?;
    let test = io_corpus(&read_corpus(&args.test)?);
    let emb = &args.embeddings;
    let pool_table = table_for(&pool, args.pool_embeddings.as_deref(), emb.hash_dim, emb.hash_window)?;
    let test_table = table_for(&test, args.test_embeddings.as_deref(), emb.hash_dim, emb.hash_window)?;
    let trans = match (&args.transitions, args.no_transitions) {
        (Some(path), false) => Some(
            ExpandedTransitions::from_text(&read_text(path, Stage::Load)?).stage(Stage::Load)?,
        ),
        _ => None,
    };
    let decoding = DecodingConfig::new(args.tau, !args.no_transitions).stage(Stage::Config)?;
    let pred = run_predict(&support, &pool_table, &test, &test_table, trans.as_ref(), &decoding)?;
    let tagged = test
        .iter()
        .zip(pred)
        .map(|(s, tags)| s.with_tags(tags))
        .collect::<Result<Vec<_>, _>>()
        .stage(Stage::Predict)?;
    write_file(&args.out, &render_conll(&tagged))?;
    println!("{} sentences tagged, written to {}", tagged.len(), args.out.display());
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<(), Error> {
    let gold = read_corpus(&args.gold)?;
    let gold = match args.scheme {
        TagScheme::Io => io_corpus(&gold),
        TagScheme::Bio => gold,
    };
    let pred: Vec<_> = read_corpus(&args.pred)?
        .iter()
        .map(|s| s.tags().to_vec())
        .collect();
    let report = span_micro_f1(&gold, &pred).stage(Stage::Evaluate)?;
    print!("{}", render_report(&report));
    if let Some(out) = &args.out {
        let agg = aggregate(vec![report]).stage(Stage::Evaluate)?;
        write_file(out, &agg.to_key_values())?;
    }
    Ok(())
}

fn run(args: RunArgs) -> Result<(), Error> {
    let mut config = match &args.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    for (key, value) in args.fields.pairs() {
        config
            .set(key, value)
            .map_err(|e| Error::config(format!("--{}: {e}", key.replace('_', "-"))))?;
    }
    for item in &args.overrides {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| Error::config(format!("--set {item}: expected KEY=VALUE")))?;
        config
            .set(key.trim(), value)
            .map_err(|e| Error::config(format!("--set {item}: {e}")))?;
    }

    let taus = if args.tau_grid.is_empty() {
        vec![config.tau]
    } else {
        args.tau_grid.clone()
    };
    let mut results = Vec::new();
    for tau in taus {
        let mut c = config.clone();
        c.set("tau", &tau.to_string()).map_err(Error::config)?;
        results.push((format!("{} {}-shot tau={tau}", c.mode, c.k), run_experiment(&c)?));
    }
    let rows: Vec<(String, _)> = results.iter().map(|(n, r)| (n.clone(), r)).collect();
    print!("{}", render_table(&rows));
    if let Some(path) = &args.report {
        let mut text = String::new();
        for (i, (name, report)) in results.iter().enumerate() {
            if results.len() > 1 {
                text.push_str(&format!("# {name}\n"));
            }
            text.push_str(&report.to_key_values());
            if i + 1 < results.len() {
                text.push('\n');
            }
        }
        write_file(path, &text)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::SampleSupport(a) => sample_support(a),
        Command::Featurize(a) => featurize(a),
        Command::EstimateTransitions(a) => estimate_transitions(a),
        Command::Predict(a) => predict(*a),
        Command::Evaluate(a) => evaluate(a),
        Command::Run(a) => run(*a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let ErrorKind::MissingEmbeddings(ids) = &e.kind {
                eprintln!("  {} sentences affected", ids.len());
            }
            ExitCode::FAILURE
        }
    }
}
