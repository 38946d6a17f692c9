//! Command-line front end: corpus generation and validation, attribute
//! pretraining, training, evaluation and pair explanations.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use afrec::checkpoint::{Checkpoint, RngState};
use afrec::compat::AblationVariant;
use afrec::data::synth::{generate_synthetic_corpus, SyntheticConfig};
use afrec::data::{load_corpus, save_corpus, Corpus, NegativeSide, Side, Split};
use afrec::eval::{build_cases, score_cases, MetricsReport, DEFAULT_NEGATIVES};
use afrec::explain::{explain_pair, render_heatmap, DEFAULT_TOP_PAIRS};
use afrec::model::{Model, ModelConfig, Profile};
use afrec::training::{pretrain_sae, train_from, write_log, EpochMetrics, TrainConfig};
use afrec::{AfrecError, Result};

#[derive(Debug, Parser)]
#[command(name = "afrec", version, about = "Attribute-aware top/bottom compatibility ranking")]
struct Cli {
    /// Seed for every random choice of the command [default: 7 for
    /// `data synth`, 0 otherwise].
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Model scale: image size, embedding width and backbone depth.
    #[arg(long, global = true, value_enum, default_value_t = ProfileArg::Desk)]
    profile: ProfileArg,
    #[command(subcommand)]
    command: Command,
}

impl Cli {
    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ProfileArg {
    Desk,
    Paper,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Desk => Profile::Desk,
            ProfileArg::Paper => Profile::Paper,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum NegSide {
    Both,
    Bottom,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Corpus utilities.
    #[command(subcommand)]
    Data(DataCommand),
    /// Pretrain backbone, category head and attribute extractor.
    PretrainSae(PretrainArgs),
    /// Train the full model and keep the best validation checkpoint.
    Train(TrainArgs),
    /// Rank held-out test pairs against sampled negatives.
    Eval(EvalArgs),
    /// Explain one top/bottom pair as an attribute heatmap.
    Explain(ExplainArgs),
}

#[derive(Debug, Subcommand)]
enum DataCommand {
    /// Generate the planted-rule synthetic corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 300)]
        n_tops: usize,
        #[arg(long, default_value_t = 300)]
        n_bottoms: usize,
        /// Defaults to the profile's image size.
        #[arg(long)]
        image_size: Option<usize>,
        /// Probability of withholding each attribute label.
        #[arg(long, default_value_t = 0.0)]
        label_dropout: f64,
    },
    /// Load a manifest and print a summary.
    Validate { manifest: PathBuf },
}

#[derive(Debug, Args)]
struct CommonTrain {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to the profile's learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-5)]
    weight_decay: f64,
    /// Separate attention parameters for the bottom direction.
    #[arg(long)]
    untied_attention: bool,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[command(flatten)]
    common: CommonTrain,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonTrain,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    /// Pretraining epochs run before joint training; 0 skips the phase.
    #[arg(long, default_value_t = 20)]
    sae_epochs: usize,
    #[arg(long, default_value = "full", value_parser = parse_variant)]
    variant: AblationVariant,
    /// Keep backbone, category head and attribute extractor fixed after
    /// pretraining.
    #[arg(long)]
    freeze_sae: bool,
    #[arg(long, value_enum, default_value_t = NegSide::Both)]
    neg_side: NegSide,
    /// Start from a checkpoint (e.g. one written by `pretrain-sae`) instead
    /// of a fresh initialisation.
    #[arg(long)]
    init: Option<PathBuf>,
    /// JSON-lines metrics log; printed to stdout when omitted.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_NEGATIVES)]
    val_negatives: usize,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Report JSON; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_NEGATIVES)]
    negatives: usize,
}

#[derive(Debug, Args)]
struct ExplainArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    top: PathBuf,
    #[arg(long)]
    bottom: PathBuf,
    #[arg(long)]
    top_cat: String,
    #[arg(long)]
    bottom_cat: String,
    /// Directory for `explanation.json`, `heatmap.png` and `heatmap.csv`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TOP_PAIRS)]
    n_pairs: usize,
}

fn parse_variant(s: &str) -> std::result::Result<AblationVariant, String> {
    s.parse().map_err(|e: AfrecError| e.to_string())
}

fn train_config(cli: &Cli, common: &CommonTrain) -> TrainConfig {
    let base = TrainConfig::for_profile(cli.profile.into());
    TrainConfig {
        batch_size: common.batch_size,
        learning_rate: common.lr.unwrap_or(base.learning_rate),
        weight_decay: common.weight_decay,
        seed: cli.seed(),
        ..base
    }
}

fn fresh_model(cli: &Cli, common: &CommonTrain, corpus: &Corpus, rng: &mut ChaCha8Rng) -> Result<Model> {
    let mut config = ModelConfig::for_profile(cli.profile.into());
    config.untied_attention = common.untied_attention;
    Model::init(config, corpus.schema.clone(), corpus.categories.clone(), rng)
}

fn write_json(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(p, text)?;
        }
        None => io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn data(cli: &Cli, cmd: &DataCommand) -> Result<()> {
    match cmd {
        DataCommand::Synth { out, n_tops, n_bottoms, image_size, label_dropout } => {
            let config = SyntheticConfig {
                n_tops: *n_tops,
                n_bottoms: *n_bottoms,
                image_size: image_size.unwrap_or(ModelConfig::for_profile(cli.profile.into()).image_size),
                seed: cli.seed.unwrap_or(SyntheticConfig::default().seed),
                label_dropout: *label_dropout,
                ..SyntheticConfig::default()
            };
            let synth = generate_synthetic_corpus(&config)?;
            let manifest = save_corpus(&synth.corpus, out)?;
            let c = &synth.corpus;
            eprintln!("wrote {} items and {} positives to {}", c.items.len(), c.positives.len(), manifest.display());
            Ok(())
        }
        DataCommand::Validate { manifest } => {
            let c = load_corpus(manifest)?;
            let summary = json!({
                "items": c.items.len(),
                "tops": c.side_indices(Side::Top).len(),
                "bottoms": c.side_indices(Side::Bottom).len(),
                "positives": c.positives.len(),
                "train": c.splits.train.len(),
                "valid": c.splits.valid.len(),
                "test": c.splits.test.len(),
                "image_size": c.image_size(),
                "attributes": c.schema.names(),
                "categories": c.categories,
            });
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(())
        }
    }
}

fn pretrain(cli: &Cli, args: &PretrainArgs) -> Result<()> {
    let corpus = load_corpus(&args.common.data)?;
    let config = TrainConfig { sae_epochs: args.epochs, epochs: 0, ..train_config(cli, &args.common) };
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = fresh_model(cli, &args.common, &corpus, &mut rng)?;
    let mut log = Vec::new();
    let report = pretrain_sae(&corpus, &mut model, &config, &mut rng, &mut log)?;
    let stderr = &mut io::stderr().lock();
    write_log(&log, stderr)?;
    Checkpoint { model, epoch: 0, rng: RngState::of(&rng), train_config: Some(config) }.save(&args.common.out)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn train(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let corpus = load_corpus(&args.common.data)?;
    let mut config = TrainConfig {
        epochs: args.epochs,
        sae_epochs: args.sae_epochs,
        variant: args.variant,
        freeze_sae: args.freeze_sae,
        negatives: match args.neg_side {
            NegSide::Both => NegativeSide::BothSides,
            NegSide::Bottom => NegativeSide::BottomOnly,
        },
        val_negatives: args.val_negatives,
        ..train_config(cli, &args.common)
    };
    config.validate()?;
    let (model, rng) = match &args.init {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            ckpt.check_corpus(&corpus)?;
            // The starting point is already pretrained.
            config.two_phase = false;
            (ckpt.model, ChaCha8Rng::seed_from_u64(config.seed))
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            (fresh_model(cli, &args.common, &corpus, &mut rng)?, rng)
        }
    };

    let mut sink: Box<dyn Write> = match &args.log {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    };
    let mut failure = None;
    let outcome = train_from(&corpus, model, &config, rng, |m: &EpochMetrics| {
        if failure.is_none() {
            if let Err(e) = write_log(std::slice::from_ref(m), &mut sink).and_then(|_| Ok(sink.flush()?)) {
                failure = Some(e);
            }
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    outcome.checkpoint.save(&args.common.out)?;
    eprintln!("best epoch {} written to {}", outcome.best_epoch, args.common.out.display());
    Ok(())
}

fn eval(cli: &Cli, args: &EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let corpus = load_corpus(&args.data)?;
    ckpt.check_corpus(&corpus)?;
    let mut cases = build_cases(&corpus, Split::Test, args.negatives, cli.seed())?;
    score_cases(&ckpt.model, &corpus, &mut cases, ckpt.variant())?;
    let report = MetricsReport::from_cases(&cases, cli.seed())?;
    write_json(args.out.as_deref(), &report.to_json())
}

fn explain(args: &ExplainArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let e = explain_pair(&ckpt, &args.top, &args.bottom, &args.top_cat, &args.bottom_cat, args.n_pairs)?;
    std::fs::create_dir_all(&args.out)?;
    render_heatmap(&e, &args.out.join("heatmap.png"))?;
    let text = serde_json::to_string_pretty(&e)? + "\n";
    write_json(Some(&args.out.join("explanation.json")), &text)?;
    println!("score {:.6}", e.score);
    for p in &e.top_pairs {
        println!("{} x {}: {:.4}", p.row, p.col, p.value);
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Data(cmd) => data(cli, cmd),
        Command::PretrainSae(args) => pretrain(cli, args),
        Command::Train(args) => train(cli, args),
        Command::Eval(args) => eval(cli, args),
        Command::Explain(args) => explain(args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
