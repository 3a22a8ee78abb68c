//! Subcommand implementations. Input problems (missing files, bad names,
//! impossible settings) surface as usage errors, anything that breaks after
//! the configuration is resolved as runtime errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::anyhow;
use serde::Serialize;

use scd::baselines::{self, CnnModel, DnnModel, LogRegModel, NgramSpace};
use scd::checkpoint::{self, AnyModel};
use scd::corpus::{self, DecisionExample, Episode, Vocabulary};
use scd::gradcheck;
use scd::metrics::{MetricsReport, DECISION_THRESHOLD};
use scd::model::{ModelConfig, ModelError, ModelParams, Variant};
use scd::rngs;
use scd::synthgen;
use scd::training::{self, evaluate_model, Classifier, TrainError};

use crate::config::{ModelKind, Overrides, RunConfig};
use crate::CliError;

#[derive(Debug, clap::Args)]
pub struct SynthArgs {
    /// Output corpus file, one JSON episode per line.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Speakers (and personas) per episode.
    #[arg(long)]
    pub speakers: Option<usize>,
    #[arg(long)]
    pub min_utterances: Option<usize>,
    #[arg(long)]
    pub max_utterances: Option<usize>,
    /// Tokens in each persona vocabulary.
    #[arg(long)]
    pub persona_vocab: Option<usize>,
    /// Fraction of persona vocabulary shared by all speakers, 0 to 1.
    #[arg(long)]
    pub overlap: Option<f64>,
    /// Plant the marker token a fixed distance before each change.
    #[arg(long)]
    pub context_signal: Option<bool>,
    /// Probability of a speaker change at each boundary.
    #[arg(long)]
    pub change_prob: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn synth(args: &SynthArgs, config: RunConfig) -> Result<(), CliError> {
    let mut spec = config.synth.clone();
    if let Some(v) = args.episodes {
        spec.n_episodes = v;
    }
    if let Some(v) = args.speakers {
        spec.n_speakers = v;
    }
    if let Some(v) = args.min_utterances {
        spec.utterances_min = v;
    }
    if let Some(v) = args.max_utterances {
        spec.utterances_max = v;
    }
    if let Some(v) = args.persona_vocab {
        spec.persona_vocab = v;
    }
    if let Some(v) = args.overlap {
        spec.overlap = v;
    }
    if let Some(v) = args.context_signal {
        spec.context_signal = v;
    }
    if let Some(v) = args.change_prob {
        spec.change_prob = v;
    }
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    let out = required_path(&args.out, &config.out, "--out")?;
    let episodes = synthgen::generate(&spec).map_err(CliError::usage)?;
    corpus::write_transcripts(&out, &episodes).map_err(CliError::runtime)?;
    // Sidecar spec makes the corpus regenerable byte for byte.
    write_json(&out.with_extension("spec.json"), &spec)?;
    let stats = corpus::corpus_stats(&episodes);
    println!(
        "wrote {} episodes, {} utterances, {} decision points (change rate {:.3}) to {}",
        stats.episodes,
        stats.utterances,
        stats.decision_points,
        stats.change_rate,
        out.display()
    );
    Ok(())
}

#[derive(Debug, clap::Args)]
pub struct PrepareArgs {
    /// Corpus file, one JSON episode per line.
    #[arg(long, value_name = "PATH")]
    pub data: Option<PathBuf>,
    /// Output directory for the split manifest and vocabulary.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub vocab_cap: Option<usize>,
}

pub fn prepare(args: &PrepareArgs, mut config: RunConfig) -> Result<(), CliError> {
    if let Some(v) = args.seed {
        config.train.seed = v;
    }
    if let Some(v) = args.vocab_cap {
        config.vocab_cap = v;
    }
    let data = required_path(&args.data, &config.data, "--data")?;
    let out = required_path(&args.out, &config.out, "--out")?;
    let episodes = load_corpus(&data)?;
    let prepared = prepare_pipeline(episodes, config.train.seed, config.vocab_cap)?;
    fs::create_dir_all(&out).map_err(CliError::runtime)?;
    prepared
        .manifest
        .save(out.join("split.json"))
        .map_err(CliError::runtime)?;
    write_json(&out.join("vocab.json"), &prepared.vocab.tokens())?;
    config.data = Some(data);
    config.out = Some(out.clone());
    config.save(&out.join("run_config.json")).map_err(CliError::runtime)?;
    for (name, episodes) in [
        ("train", &prepared.train),
        ("val", &prepared.val),
        ("test", &prepared.test),
    ] {
        let stats = corpus::corpus_stats(episodes);
        println!(
            "{name:<5} {:>5} episodes {:>7} decision points  change rate {:.3}",
            stats.episodes, stats.decision_points, stats.change_rate
        );
    }
    println!("vocabulary {} tokens -> {}", prepared.vocab.len(), out.display());
    Ok(())
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    /// Corpus file, one JSON episode per line.
    #[arg(long, value_name = "PATH")]
    pub data: Option<PathBuf>,
    /// Output directory for checkpoint, history, and metrics.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Search the learning-rate/dropout grid and keep the best cell.
    #[arg(long)]
    pub grid: bool,
    #[command(flatten)]
    pub overrides: Overrides,
}

pub fn train(args: &TrainArgs, mut config: RunConfig) -> Result<(), CliError> {
    if args.grid {
        config.grid = true;
    }
    config.train.validate().map_err(CliError::usage)?;
    let kind = config.kind().map_err(CliError::usage)?;
    let data = required_path(&args.data, &config.data, "--data")?;
    let out = required_path(&args.out, &config.out, "--out")?;
    let episodes = load_corpus(&data)?;
    let prepared = prepare_pipeline(episodes, config.train.seed, config.vocab_cap)?;
    fs::create_dir_all(&out).map_err(CliError::runtime)?;

    let started = Instant::now();
    let run = train_once(kind, config.context_size, config.grid, &config, &prepared)?;
    log::info!(
        "{} trained in {:.1}s (lr {:.0e}, dropout {})",
        run.label,
        started.elapsed().as_secs_f64(),
        run.lr,
        run.dropout
    );

    checkpoint::save(out.join("model.ckpt"), &run.model, &prepared.vocab)
        .map_err(CliError::runtime)?;
    write_json(&out.join("history.json"), &run.history)?;
    write_json(
        &out.join("metrics.json"),
        &serde_json::json!({ "val_f1": run.best_val_f1, "test": run.test }),
    )?;
    config.data = Some(data);
    config.out = Some(out.clone());
    config.dropout = run.dropout;
    config.train.lr = run.lr;
    config.save(&out.join("run_config.json")).map_err(CliError::runtime)?;

    println!("model       {}", run.label);
    println!("epochs      {}", run.epochs_run);
    println!("best val F1 {:.4}", run.best_val_f1);
    println!("test split:");
    print!("{}", run.test.table());
    println!("checkpoint  {}", out.join("model.ckpt").display());
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitChoice {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// Corpus file, one JSON episode per line.
    #[arg(long, value_name = "PATH")]
    pub data: Option<PathBuf>,
    /// Split to score; seed must match the training run.
    #[arg(long, value_enum, default_value_t = SplitChoice::Test)]
    pub split: SplitChoice,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write the JSON report here.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

pub fn eval(args: &EvalArgs, config: RunConfig) -> Result<(), CliError> {
    let (model, vocab) = load_checkpoint(&args.checkpoint)?;
    let data = required_path(&args.data, &config.data, "--data")?;
    let episodes = load_corpus(&data)?;
    let seed = args.seed.unwrap_or(config.train.seed);
    let mut selected = match args.split {
        SplitChoice::All => episodes,
        choice => {
            let manifest = corpus::split_by_episode(&episodes, seed).map_err(CliError::usage)?;
            let ids = match choice {
                SplitChoice::Train => &manifest.train,
                SplitChoice::Val => &manifest.val,
                _ => &manifest.test,
            };
            corpus::select_episodes(&episodes, ids).map_err(CliError::runtime)?
        }
    };
    corpus::numericalize(&mut selected, &vocab);
    let examples = examples_for(&selected, model.window())?;
    let report = evaluate_model(&model, &examples).map_err(train_err)?;
    let json = serde_json::to_string_pretty(&report).map_err(CliError::runtime)?;
    println!("{json}");
    if let Some(path) = &args.out {
        fs::write(path, json + "\n").map_err(CliError::runtime)?;
    }
    Ok(())
}

#[derive(Debug, clap::Args)]
pub struct PredictArgs {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// Transcripts file; speaker ids are ignored and may be absent.
    #[arg(long, value_name = "PATH")]
    pub data: Option<PathBuf>,
    /// Write the TSV here instead of stdout.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

pub fn predict(args: &PredictArgs, config: RunConfig) -> Result<(), CliError> {
    let (model, vocab) = load_checkpoint(&args.checkpoint)?;
    let data = required_path(&args.data, &config.data, "--data")?;
    let mut episodes = load_corpus(&data)?;
    corpus::numericalize(&mut episodes, &vocab);
    let mut tsv = String::from("episode_id\tposition\tp_change\tpredicted\n");
    for episode in &episodes {
        let examples =
            corpus::extract_examples(episode, model.window()).map_err(CliError::usage)?;
        if examples.is_empty() {
            continue;
        }
        let probs = model.predict_probs(&examples).map_err(CliError::runtime)?;
        for (example, p) in examples.iter().zip(probs) {
            let predicted = if p >= DECISION_THRESHOLD { "change" } else { "no_change" };
            tsv.push_str(&format!(
                "{}\t{}\t{:.6}\t{}\n",
                example.episode_id, example.position, p, predicted
            ));
        }
    }
    match &args.out {
        Some(path) => fs::write(path, tsv).map_err(CliError::runtime)?,
        None => print!("{tsv}"),
    }
    Ok(())
}

#[derive(Debug, clap::Args)]
pub struct GradcheckArgs {
    /// RNN variant to check.
    #[arg(long, visible_alias = "variant", default_value = "hierarchical_static_attn")]
    pub model: Variant,
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = 8)]
    pub attn_dim: usize,
    #[arg(long, default_value_t = 1)]
    pub context_size: usize,
    #[arg(long, default_value_t = 20)]
    pub vocab: usize,
    /// Random probe examples in the batch.
    #[arg(long, default_value_t = 4)]
    pub examples: usize,
    /// Entries sampled per tensor; 0 checks every entry.
    #[arg(long, default_value_t = 0)]
    pub entries: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    /// Maximum acceptable relative error.
    #[arg(long, default_value_t = 1e-3)]
    pub tol: f64,
    #[arg(long, default_value_t = 13)]
    pub seed: u64,
}

pub fn gradcheck_cmd(args: &GradcheckArgs) -> Result<(), CliError> {
    let config = ModelConfig {
        variant: args.model,
        dim: args.dim,
        attn_dim: args.attn_dim,
        context_size: args.context_size,
        vocab_size: args.vocab,
        dropout: 0.0,
    };
    config.validate().map_err(CliError::usage)?;
    let examples = gradcheck::sample_examples(&config, args.examples, args.seed);
    let started = Instant::now();
    let report = gradcheck::grad_check_model(&config, &examples, args.step, args.entries, args.seed)
        .map_err(CliError::runtime)?;
    print!("{}", report.table());
    println!(
        "max relative error {:.3e} in {:.1}s",
        report.worst_rel,
        started.elapsed().as_secs_f64()
    );
    if report.passed(args.tol) {
        Ok(())
    } else {
        Err(CliError::runtime(anyhow!(
            "gradient check failed: {:.3e} above tolerance {:.0e}",
            report.worst_rel,
            args.tol
        )))
    }
}

#[derive(Debug, clap::Args)]
pub struct SweepArgs {
    /// Corpus file, one JSON episode per line.
    #[arg(long, value_name = "PATH")]
    pub data: Option<PathBuf>,
    /// Optional directory for sweep.json and the resolved configuration.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Comma-separated model kinds; `random_guess` is allowed here.
    /// Defaults to the full comparison ladder.
    #[arg(long, value_delimiter = ',')]
    pub models: Vec<String>,
    /// Comma-separated context sizes tried with the configured model.
    #[arg(long, value_delimiter = ',')]
    pub contexts: Vec<usize>,
    /// Grid-search lr and dropout for every run.
    #[arg(long)]
    pub grid: bool,
    #[command(flatten)]
    pub overrides: Overrides,
}

enum SweepTarget {
    Model(ModelKind),
    RandomGuess,
}

impl SweepTarget {
    fn parse(name: &str) -> Result<Self, CliError> {
        if name == "random_guess" {
            return Ok(SweepTarget::RandomGuess);
        }
        name.parse::<ModelKind>()
            .map(SweepTarget::Model)
            .map_err(|e| CliError::usage(anyhow!("{e}, random_guess")))
    }
}

pub fn sweep(args: &SweepArgs, mut config: RunConfig) -> Result<(), CliError> {
    if args.grid {
        config.grid = true;
    }
    config.train.validate().map_err(CliError::usage)?;
    let data = required_path(&args.data, &config.data, "--data")?;
    let episodes = load_corpus(&data)?;
    let prepared = prepare_pipeline(episodes, config.train.seed, config.vocab_cap)?;

    let mut rows: Vec<SweepRow> = Vec::new();
    let default_ladder = [
        "random_guess",
        "logreg",
        "dnn",
        "cnn",
        "no_context",
        "non_hierarchical",
        "hierarchical",
        "hierarchical_static_attn",
        "hierarchical_dynamic_attn",
    ];
    let model_names: Vec<String> = if !args.models.is_empty() {
        args.models.clone()
    } else if args.contexts.is_empty() {
        default_ladder.iter().map(|s| s.to_string()).collect()
    } else {
        Vec::new()
    };

    for name in &model_names {
        let row = match SweepTarget::parse(name)? {
            SweepTarget::RandomGuess => random_guess_row(&config, &prepared)?,
            SweepTarget::Model(kind) => {
                let run = train_once(kind, config.context_size, config.grid, &config, &prepared)?;
                SweepRow::from(run)
            }
        };
        log::info!("{}: test F1 {:.4}", row.label, row.test.f1);
        rows.push(row);
    }
    for &context in &args.contexts {
        let kind = config.kind().map_err(CliError::usage)?;
        let run = train_once(kind, context, config.grid, &config, &prepared)?;
        let mut row = SweepRow::from(run);
        row.label = format!("{} ctx={}", row.label, context);
        log::info!("{}: test F1 {:.4}", row.label, row.test.f1);
        rows.push(row);
    }

    print_table(&rows);
    if let Some(out) = &args.out {
        fs::create_dir_all(out).map_err(CliError::runtime)?;
        write_json(&out.join("sweep.json"), &rows)?;
        config.data = Some(data);
        config.out = Some(out.clone());
        config.save(&out.join("run_config.json")).map_err(CliError::runtime)?;
    }
    Ok(())
}

struct TrainedRun {
    model: AnyModel,
    label: String,
    lr: f64,
    dropout: f64,
    epochs_run: usize,
    best_val_f1: f64,
    test: MetricsReport,
    history: serde_json::Value,
}

#[derive(Serialize)]
struct SweepRow {
    label: String,
    lr: f64,
    dropout: f64,
    epochs: usize,
    /// Absent for the untrained random-guess row.
    val_f1: Option<f64>,
    test: MetricsReport,
}

impl From<TrainedRun> for SweepRow {
    fn from(run: TrainedRun) -> Self {
        SweepRow {
            label: run.label,
            lr: run.lr,
            dropout: run.dropout,
            epochs: run.epochs_run,
            val_f1: Some(run.best_val_f1),
            test: run.test,
        }
    }
}

fn print_table(rows: &[SweepRow]) {
    println!(
        "{:<34} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "model", "val_f1", "acc", "prec", "rec", "f1"
    );
    for row in rows {
        let val = row.val_f1.map_or("-".into(), |f| format!("{f:.4}"));
        println!(
            "{:<34} {:>8} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            row.label, val, row.test.accuracy, row.test.precision, row.test.recall, row.test.f1
        );
    }
}

/// Scores always-guess-by-prior predictions so trained rows have a floor to
/// beat. The guess rate is the train-split change rate.
fn random_guess_row(config: &RunConfig, prepared: &Prepared) -> Result<SweepRow, CliError> {
    let stats = corpus::corpus_stats(&prepared.train);
    let rate = stats.change_rate;
    let test = examples_for(&prepared.test, 1)?;
    let mut rng = rngs::stream_rng(config.train.seed, rngs::GUESS);
    let probs = baselines::random_guess_probs(rate, test.len(), &mut rng).map_err(CliError::usage)?;
    let preds: Vec<scd::metrics::Prediction> = probs
        .into_iter()
        .zip(&test)
        .map(|(p_change, ex)| scd::metrics::Prediction { p_change, gold: ex.label })
        .collect();
    let report = scd::metrics::evaluate(&preds).map_err(CliError::runtime)?;
    Ok(SweepRow {
        label: "random_guess".into(),
        lr: 0.0,
        dropout: 0.0,
        epochs: 0,
        val_f1: None,
        test: report,
    })
}

struct Prepared {
    train: Vec<Episode>,
    val: Vec<Episode>,
    test: Vec<Episode>,
    vocab: Vocabulary,
    manifest: corpus::SplitManifest,
}

fn prepare_pipeline(
    episodes: Vec<Episode>,
    seed: u64,
    vocab_cap: usize,
) -> Result<Prepared, CliError> {
    let manifest = corpus::split_by_episode(&episodes, seed).map_err(CliError::usage)?;
    let mut train = corpus::select_episodes(&episodes, &manifest.train).map_err(CliError::runtime)?;
    let mut val = corpus::select_episodes(&episodes, &manifest.val).map_err(CliError::runtime)?;
    let mut test = corpus::select_episodes(&episodes, &manifest.test).map_err(CliError::runtime)?;
    let vocab = Vocabulary::build(&train, vocab_cap).map_err(CliError::usage)?;
    corpus::numericalize(&mut train, &vocab);
    corpus::numericalize(&mut val, &vocab);
    corpus::numericalize(&mut test, &vocab);
    Ok(Prepared { train, val, test, vocab, manifest })
}

fn examples_for(episodes: &[Episode], window: usize) -> Result<Vec<DecisionExample>, CliError> {
    let mut out = Vec::new();
    for episode in episodes {
        out.extend(corpus::extract_examples(episode, window).map_err(CliError::usage)?);
    }
    Ok(out)
}

fn build_model(
    kind: ModelKind,
    config: &RunConfig,
    context_size: usize,
    dropout: f64,
    vocab_len: usize,
    train_examples: &[DecisionExample],
) -> Result<AnyModel, ModelError> {
    let mut rng = rngs::stream_rng(config.train.seed, rngs::INIT);
    Ok(match kind {
        ModelKind::Rnn(variant) => {
            let model_config = ModelConfig {
                variant,
                dim: config.dim,
                attn_dim: config.attn_dim,
                context_size,
                vocab_size: vocab_len,
                dropout,
            };
            AnyModel::Rnn(ModelParams::init(model_config, &mut rng)?)
        }
        ModelKind::LogReg => {
            let space = NgramSpace::build(train_examples, config.ngram_cap)?;
            AnyModel::LogReg(LogRegModel::init(space)?)
        }
        ModelKind::Dnn => {
            let space = NgramSpace::build(train_examples, config.ngram_cap)?;
            AnyModel::Dnn(DnnModel::init(space, config.dnn_hidden, dropout, &mut rng)?)
        }
        ModelKind::Cnn => {
            AnyModel::Cnn(CnnModel::init(vocab_len, config.dim, dropout, &mut rng)?)
        }
    })
}

fn train_once(
    kind: ModelKind,
    context_size: usize,
    grid: bool,
    config: &RunConfig,
    prepared: &Prepared,
) -> Result<TrainedRun, CliError> {
    let window = kind.window(context_size);
    let train_ex = examples_for(&prepared.train, window)?;
    let val_ex = examples_for(&prepared.val, window)?;
    let test_ex = examples_for(&prepared.test, window)?;
    let vocab_len = prepared.vocab.len();

    let (model, lr, dropout, outcome, history) = if grid {
        let (model, best, points) = training::grid_search(
            |dropout| build_model(kind, config, context_size, dropout, vocab_len, &train_ex),
            &train_ex,
            &val_ex,
            &config.train,
        )
        .map_err(train_err)?;
        let history = serde_json::json!({ "grid": points, "best_lr": best.lr, "best_dropout": best.dropout });
        (model, best.lr, best.dropout, best.outcome, history)
    } else {
        let mut model = build_model(kind, config, context_size, config.dropout, vocab_len, &train_ex)
            .map_err(CliError::usage)?;
        let outcome =
            training::train(&mut model, &train_ex, &val_ex, &config.train).map_err(train_err)?;
        let history = serde_json::to_value(&outcome).map_err(CliError::runtime)?;
        (model, config.train.lr, config.dropout, outcome, history)
    };
    let test = evaluate_model(&model, &test_ex).map_err(train_err)?;
    Ok(TrainedRun {
        model,
        label: kind.name().to_string(),
        lr,
        dropout,
        epochs_run: outcome.history.len(),
        best_val_f1: outcome.best_val_f1,
        test,
        history,
    })
}

fn train_err(e: TrainError) -> CliError {
    match e {
        TrainError::Config(_) | TrainError::EmptySplit(_) => CliError::usage(e),
        _ => CliError::runtime(e),
    }
}

fn required_path(
    flag: &Option<PathBuf>,
    config: &Option<PathBuf>,
    what: &'static str,
) -> Result<PathBuf, CliError> {
    flag.clone()
        .or_else(|| config.clone())
        .ok_or_else(|| CliError::usage(anyhow!("{what} is required, by flag or config file")))
}

fn load_corpus(path: &Path) -> Result<Vec<Episode>, CliError> {
    if !path.exists() {
        return Err(CliError::usage(anyhow!("data file {} does not exist", path.display())));
    }
    corpus::parse_transcripts(path).map_err(CliError::usage)
}

fn load_checkpoint(path: &Path) -> Result<(AnyModel, Vocabulary), CliError> {
    if !path.exists() {
        return Err(CliError::usage(anyhow!("checkpoint {} does not exist", path.display())));
    }
    checkpoint::load(path).map_err(CliError::usage)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let file = fs::File::create(path).map_err(CliError::runtime)?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), value)
        .map_err(CliError::runtime)?;
    Ok(())
}
