//! Command-line front end. [`run`] parses arguments, runs one subcommand and
//! maps the outcome to an exit code: 0 on success, 1 on usage errors, 2 on
//! data or validation errors. Diagnostics go to stderr; data only to the
//! files named by flags.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use svkit::audio::{read_wav, write_wav};
use svkit::augment::{apply_policy, AugmentPolicy};
use svkit::checkpoint::{read_meta, Model};
use svkit::config::PipelineConfig;
use svkit::encoder::init_encoder;
use svkit::head::{init_head, HeadInput};
use svkit::pipeline::{
    ablate_layers, eval_files, extract_embeddings, dump_features, list_wavs, score_to_file, train_to_file,
    write_ablation_report, AblationInputs, ScoreFiles, TrainFiles,
};
use svkit::rng::{derive_seed, rng_for};

#[derive(Parser, Debug)]
#[command(name = "svkit", version, about = "Speaker verification toolkit")]
struct Cli {
    /// Worker threads (falls back to SVKIT_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compute one embedding per WAV file of a directory.
    Extract(ExtractArgs),
    /// Train the embedding head on a manifest.
    Train(TrainArgs),
    /// Score a trial list against an embedding archive.
    Score(ScoreArgs),
    /// Compute EER and minDCF from scores and a key.
    Eval(EvalArgs),
    /// Apply the augmentation policy to one WAV file.
    Augment(AugmentArgs),
    /// Train, extract, score and evaluate once per encoder layer.
    AblateLayers(AblateArgs),
    /// Resolve configs, print the schema or read checkpoint metadata.
    #[command(subcommand)]
    Inspect(InspectCommand),
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// Pipeline configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArg {
    fn load(&self) -> anyhow::Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct ExtractArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    /// Trained model; without it the head is freshly initialized from the config seed.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    wav_dir: PathBuf,
    /// Embedding archive to write.
    #[arg(long)]
    out: PathBuf,
    /// Also write per-frame head input features.
    #[arg(long)]
    features_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    /// TSV `utt_id<TAB>path<TAB>speaker`.
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Per-step JSON lines log.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Directory for per-epoch checkpoints.
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Truncation layer of the encoder.
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long)]
    no_augment: bool,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    #[arg(long)]
    embeddings: PathBuf,
    /// TSV `enroll<TAB>test[<TAB>label]`.
    #[arg(long)]
    trials: PathBuf,
    /// Scores TSV to write.
    #[arg(long)]
    out: PathBuf,
    /// Cohort archive for adaptive s-norm.
    #[arg(long)]
    cohort: Option<PathBuf>,
    /// TSV `utt_id<TAB>tel|mic` for channel normalization.
    #[arg(long)]
    src_meta: Option<PathBuf>,
    #[arg(long)]
    snorm: bool,
    #[arg(long)]
    chnorm: bool,
    #[arg(long)]
    top_k: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    #[arg(long)]
    scores: PathBuf,
    /// TSV `enroll<TAB>test<TAB>label`.
    #[arg(long)]
    key: PathBuf,
    /// JSON report to write.
    #[arg(long)]
    out: PathBuf,
    /// Optional plain-text table.
    #[arg(long)]
    table: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AugmentArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON list of the applied operations.
    #[arg(long)]
    record: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    /// Comma-separated 1-based layer indices.
    #[arg(long, value_delimiter = ',', required = true)]
    layers: Vec<usize>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    eval_wav_dir: PathBuf,
    #[arg(long)]
    trials: PathBuf,
    #[arg(long)]
    key: PathBuf,
    #[arg(long)]
    cohort: Option<PathBuf>,
    #[arg(long)]
    src_meta: Option<PathBuf>,
    /// Per-layer intermediate files.
    #[arg(long)]
    work_dir: PathBuf,
    /// Plain-text table to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    json_out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum InspectCommand {
    /// Write the fully resolved configuration.
    Config {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the configuration JSON schema.
    Schema {
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the metadata of a checkpoint.
    Checkpoint {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// A data or validation failure (exit code 2).
enum Failure {
    Data(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

impl From<svkit::Error> for Failure {
    fn from(e: svkit::Error) -> Self {
        Failure::Data(e.into())
    }
}

/// Runs the command line `argv` (including the program name) and returns
/// the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            // clap routes help to stdout; keep everything on stderr
            eprint!("{}", e.render());
            return code;
        }
    };
    let threads = match thread_count(cli.threads) {
        Ok(t) => t,
        Err(msg) => {
            eprintln!("error: {msg}");
            return 1;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start thread pool: {e}");
            return 2;
        }
    };
    match pool.install(|| dispatch(cli.command)) {
        Ok(()) => 0,
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn thread_count(flag: Option<usize>) -> Result<usize, String> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var("SVKIT_THREADS") {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| format!("SVKIT_THREADS must be a positive integer, got {v:?}"))?,
            // 0 lets rayon pick
            Err(_) => 0,
        },
    };
    if flag == Some(0) {
        return Err("--threads must be >= 1".into());
    }
    Ok(n)
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Extract(a) => extract(a),
        Command::Train(a) => train(a),
        Command::Score(a) => score(a),
        Command::Eval(a) => eval(a),
        Command::Augment(a) => augment(a),
        Command::AblateLayers(a) => ablate(a),
        Command::Inspect(c) => inspect(c),
    }
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Untrained model built from the config seed (one class per head output).
fn fresh_model(cfg: &PipelineConfig) -> anyhow::Result<Model> {
    let head_cfg = cfg.resolved_head(cfg.head.n_classes.max(1));
    let head = init_head(&head_cfg, &mut rng_for(cfg.seed, "head"))?;
    let encoder = match head_cfg.input {
        HeadInput::Encoder => Some(init_encoder(&cfg.encoder, &mut rng_for(cfg.seed, "encoder"))?),
        HeadInput::Mfb => None,
    };
    let speakers = (0..head_cfg.n_classes).map(|i| format!("class{i}")).collect();
    Ok(Model::new(cfg.clone(), head_cfg, speakers, encoder, head))
}

fn extract(a: ExtractArgs) -> Result<(), Failure> {
    let model = match &a.checkpoint {
        Some(p) => {
            if a.cfg.config.is_some() || a.cfg.seed.is_some() {
                log::warn!("using the configuration stored in {}", p.display());
            }
            Model::load(p)?
        }
        None => {
            log::warn!("no checkpoint given; embeddings come from an untrained head");
            fresh_model(&a.cfg.load()?)?
        }
    };
    let wavs = list_wavs(&a.wav_dir)?;
    if wavs.is_empty() {
        return Err(anyhow!("no WAV files in {}", a.wav_dir.display()).into());
    }
    extract_embeddings(&model, &wavs)?.write(&a.out)?;
    if let Some(p) = &a.features_out {
        dump_features(&model, &wavs)?.write(p)?;
    }
    log::info!("wrote {} embeddings to {}", wavs.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    let mut cfg = a.cfg.load()?;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(l) = a.layer {
        cfg.encoder.truncate_layer = l;
    }
    if a.no_augment {
        cfg.train.augment = false;
    }
    cfg.validate()?;
    if let Some(d) = &a.checkpoint_dir {
        std::fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    let model = train_to_file(
        &cfg,
        &TrainFiles {
            manifest: &a.manifest,
            out: &a.out,
            log: a.log.as_deref(),
            checkpoint_dir: a.checkpoint_dir.as_deref(),
        },
    )?;
    log::info!(
        "trained {} classes for {} epochs; wrote {}",
        model.meta.speakers.len(),
        model.meta.epoch,
        a.out.display()
    );
    Ok(())
}

fn score(a: ScoreArgs) -> Result<(), Failure> {
    let mut cfg = a.cfg.load()?;
    cfg.scoring.snorm |= a.snorm;
    cfg.scoring.chnorm |= a.chnorm;
    if let Some(k) = a.top_k {
        cfg.scoring.top_k = k;
    }
    cfg.validate()?;
    let n = score_to_file(
        &cfg,
        &ScoreFiles {
            embeddings: &a.embeddings,
            trials: &a.trials,
            out: &a.out,
            cohort: a.cohort.as_deref(),
            src_meta: a.src_meta.as_deref(),
        },
    )?;
    log::info!("scored {n} trials");
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), Failure> {
    let cfg = a.cfg.load()?;
    let report = eval_files(&cfg, &a.scores, &a.key)?;
    write_text(&a.out, &report.to_json())?;
    if let Some(t) = &a.table {
        write_text(t, &svkit::metrics::format_layer_table(&[(cfg.encoder.truncate_layer, report.clone())]))?;
    }
    log::info!(
        "EER {:.4}%  minDCF(0.01) {:.4}  minDCF(0.05) {:.4}",
        100.0 * report.eer,
        report.min_dcf_001,
        report.min_dcf_005
    );
    Ok(())
}

fn augment(a: AugmentArgs) -> Result<(), Failure> {
    let cfg = a.cfg.load()?;
    let w = read_wav(&a.input)?;
    let policy = AugmentPolicy::from_config(&cfg.augment, w.sample_rate, derive_seed(cfg.seed, "augment-pool"))?;
    let (out, applied) = apply_policy(&w, &policy, derive_seed(cfg.seed, "augment"))?;
    write_wav(&out, &a.out)?;
    if let Some(p) = &a.record {
        let mut s = serde_json::to_string_pretty(&applied).map_err(anyhow::Error::from)?;
        s.push('\n');
        write_text(p, &s)?;
    }
    log::info!("applied {} augmentations", applied.len());
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<(), Failure> {
    let cfg = a.cfg.load()?;
    std::fs::create_dir_all(&a.work_dir).with_context(|| format!("creating {}", a.work_dir.display()))?;
    let rows = ablate_layers(
        &cfg,
        &a.layers,
        &AblationInputs {
            manifest: &a.manifest,
            eval_wav_dir: &a.eval_wav_dir,
            trials: &a.trials,
            key: &a.key,
            cohort: a.cohort.as_deref(),
            src_meta: a.src_meta.as_deref(),
            work_dir: &a.work_dir,
        },
    )?;
    write_ablation_report(&rows, &a.out, a.json_out.as_deref())?;
    Ok(())
}

fn inspect(c: InspectCommand) -> Result<(), Failure> {
    match c {
        InspectCommand::Config { cfg, out } => write_text(&out, &cfg.load()?.to_json())?,
        InspectCommand::Schema { out } => write_text(&out, &PipelineConfig::schema_json())?,
        InspectCommand::Checkpoint { checkpoint, out } => {
            let meta = read_meta(&checkpoint)?;
            let mut s = serde_json::to_string_pretty(&meta).map_err(anyhow::Error::from)?;
            s.push('\n');
            write_text(&out, &s)?;
        }
    }
    Ok(())
}
