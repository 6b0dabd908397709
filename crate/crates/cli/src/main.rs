//! `sgvl`: command-line front end for the pre-training pipeline.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error,
//! 3 numeric abort (non-finite loss).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use sgvl_core::corpus::{generate_corpus, load_pairs, GeneratorConfig};
use sgvl_core::eval::{ablate, build_cloze_set, run_cloze, run_itm_eval, AblationSetup};
use sgvl_core::masking::MaskingAudit;
use sgvl_core::scenegraph::{graph_stats, parse};
use sgvl_core::train::{effective_policy, resume, train, Splits, CHECKPOINT_FILE};
use sgvl_core::{seed, util, AblationMode, Checkpoint, ModelConfig, ParserLexicon, TrainConfig, Vocab};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] sgvl_core::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) if e.is_numeric() => 3,
            CliError::Core(_) => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "sgvl", version, about = "Scene-graph-guided vision-language pre-training")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse caption text into a scene graph (JSON).
    Parse(ParseArgs),
    /// Generate a synthetic paired corpus and its vocabulary.
    GenCorpus(GenArgs),
    /// Emit one masked pre-training instance per caption as JSONL.
    Mask(MaskArgs),
    /// Train a model on the non-held-out split.
    Train(TrainArgs),
    /// Cross-modal cloze accuracy on the held-out split.
    EvalCloze(EvalArgs),
    /// Image-text matching accuracy on the held-out split.
    EvalItm(EvalArgs),
    /// Train and evaluate with and without scene-graph prediction.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct Common {
    /// Parser lexicon (TSV); the bundled one when omitted.
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run configuration (JSON) with optional `generator`, `model`, `train`
    /// and `vocab_size` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads. Computation is single-threaded and bitwise
    /// deterministic for any value.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct Data {
    #[arg(long)]
    captions: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
}

#[derive(Args)]
struct ParseArgs {
    #[command(flatten)]
    common: Common,
    /// Caption to parse.
    #[arg(long, conflicts_with = "captions", required_unless_present = "captions")]
    text: Option<String>,
    /// Caption JSONL; prints one graph per line and a summary on stderr.
    #[arg(long)]
    captions: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory for captions.jsonl, images.jsonl and vocab.txt.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MaskArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: Data,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<AblationMode>,
    /// Output JSONL file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: Data,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<AblationMode>,
    /// Continue from this checkpoint up to `--steps` total steps.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Output directory for metrics.jsonl and checkpoints.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: Data,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Cloze items per node category.
    #[arg(long, default_value_t = 500)]
    n: usize,
    /// Output directory for the JSON report and text table.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: Data,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// Cloze items per node category.
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
}

fn parse_mode(s: &str) -> std::result::Result<AblationMode, String> {
    s.parse::<AblationMode>().map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    generator: GeneratorConfig,
    model: ModelConfig,
    train: TrainConfig,
    vocab_size: Option<usize>,
}

const DEFAULT_VOCAB_SIZE: usize = 4000;

impl Common {
    fn check(&self) -> Result<()> {
        if self.threads == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        Ok(())
    }

    fn lexicon(&self) -> Result<ParserLexicon> {
        Ok(match &self.lexicon {
            Some(p) => ParserLexicon::load(p)?,
            None => ParserLexicon::bundled(),
        })
    }

    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg: RunConfig = match &self.config {
            Some(p) => {
                let text = util::read_to_string(p)?;
                serde_json::from_str(&text).map_err(|e| {
                    sgvl_core::Error::Config(format!("{}: {e}", p.display()))
                })?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        Ok(cfg)
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

fn load_splits(common: &Common, data: &Data) -> Result<(Splits, ParserLexicon)> {
    let lexicon = common.lexicon()?;
    let vocab = Vocab::load(&data.vocab)?;
    let corpus = load_pairs(&data.captions, &data.images)?;
    Ok((Splits::prepare(&corpus, &lexicon, vocab)?, lexicon))
}

fn train_config(common: &Common, steps: Option<usize>, batch: Option<usize>, mode: Option<AblationMode>) -> Result<RunConfig> {
    let mut cfg = common.run_config()?;
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    if let Some(b) = batch {
        cfg.train.batch_size = b;
    }
    if let Some(m) = mode {
        cfg.train.mode = m;
    }
    cfg.train.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| sgvl_core::Error::io(dir, e))?;
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    util::write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value).map_err(sgvl_core::Error::from)? + "\n")
}

fn cmd_parse(a: &ParseArgs) -> Result<()> {
    a.common.check()?;
    let lexicon = a.common.lexicon()?;
    if let Some(text) = &a.text {
        return emit(a.out.as_deref(), &json(&parse(text, &lexicon))?);
    }
    let path = a.captions.as_ref().expect("clap requires --text or --captions");
    let caps: Vec<sgvl_core::CaptionRecord> = util::from_jsonl(path)?;
    let graphs: Vec<_> = caps.iter().map(|c| parse(&c.text, &lexicon)).collect();
    eprint!("{}", json(&graph_stats(&graphs))?);
    emit(a.out.as_deref(), &util::to_jsonl(&graphs)?)
}

fn cmd_gen(a: &GenArgs) -> Result<()> {
    a.common.check()?;
    let cfg = a.common.run_config()?;
    let lexicon = a.common.lexicon()?;
    let corpus = generate_corpus(&cfg.generator, &lexicon, a.common.seed())?;
    create_dir(&a.out)?;
    corpus.save(&a.out)?;
    let max = cfg.vocab_size.unwrap_or(DEFAULT_VOCAB_SIZE);
    let vocab = Vocab::build(corpus.captions.iter().map(|c| c.text.as_str()), &lexicon, max);
    vocab.save(&a.out.join("vocab.txt"))?;
    eprintln!(
        "{} pairs, vocabulary {} tokens, written to {}",
        corpus.captions.len(),
        vocab.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_mask(a: &MaskArgs) -> Result<()> {
    a.common.check()?;
    let cfg = train_config(&a.common, None, None, a.mode)?;
    let lexicon = a.common.lexicon()?;
    let vocab = Vocab::load(&a.data.vocab)?;
    let corpus = load_pairs(&a.data.captions, &a.data.images)?;
    let data = sgvl_core::Dataset::prepare(&corpus, &lexicon, vocab)?;
    let policy = effective_policy(&data, &cfg.train)?;
    let mut records = Vec::with_capacity(data.len());
    let mut audit = MaskingAudit::default();
    for i in 0..data.len() {
        let s = seed::derive(a.common.seed(), &[seed::tag::INSTANCE, i as u64]);
        let inst = data.instance(i, &policy, s)?;
        let ex = &data.examples[i];
        audit.add(&inst, &ex.graph, &ex.aligned);
        records.push(inst.to_record());
    }
    write(&a.out, &util::to_jsonl(&records)?)?;
    let [m, r, k] = audit.mix();
    eprintln!(
        "node rate {:.4}, residual token rate {:.4}, region rate {:.4}, mix {m:.3}/{r:.3}/{k:.3}",
        audit.node_rate(),
        audit.residual_rate(),
        audit.region_rate()
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    steps: u64,
    final_loss: f64,
    checkpoint: String,
    sha256: String,
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    a.common.check()?;
    let cfg = train_config(&a.common, a.steps, a.batch, a.mode)?;
    let (splits, _) = load_splits(&a.common, &a.data)?;
    let model_config = splits.model_config(&cfg.model);
    create_dir(&a.out)?;
    let outcome = match &a.resume {
        Some(p) => resume(Checkpoint::load(p)?, &model_config, &splits.train, &cfg.train, Some(&a.out))?,
        None => train(&splits.train, &model_config, &cfg.train, Some(&a.out))?,
    };
    let summary = TrainSummary {
        steps: outcome.checkpoint.step,
        final_loss: outcome.history.last().map_or(f64::NAN, |l| l.total),
        checkpoint: a.out.join(CHECKPOINT_FILE).display().to_string(),
        sha256: outcome.checkpoint.digest()?,
    };
    print!("{}", json(&summary)?);
    Ok(())
}

fn load_checkpoint(path: &Path, splits: &Splits) -> Result<Checkpoint<f32>> {
    let ckpt = Checkpoint::<f32>::load(path)?;
    let v = splits.heldout.vocab.len();
    if ckpt.config().vocab_size != v {
        return Err(sgvl_core::Error::ConfigMismatch(vec![format!(
            "vocab_size ({} in checkpoint, {v} in vocabulary)",
            ckpt.config().vocab_size
        )])
        .into());
    }
    Ok(ckpt)
}

fn cmd_eval_cloze(a: &EvalArgs) -> Result<()> {
    a.common.check()?;
    let (splits, _) = load_splits(&a.common, &a.data)?;
    let ckpt = load_checkpoint(&a.checkpoint, &splits)?;
    let items = build_cloze_set(&splits.heldout, a.n, a.common.seed())?;
    let report = run_cloze(&ckpt.model, &splits.heldout, &items, a.common.seed(), &ckpt.digest()?)?;
    if let Some(dir) = &a.out {
        write(&dir.join("cloze.json"), &report.to_json()?)?;
        write(&dir.join("cloze.txt"), &report.to_table())?;
    }
    print!("{}", report.to_table());
    Ok(())
}

fn cmd_eval_itm(a: &EvalArgs) -> Result<()> {
    a.common.check()?;
    let (splits, _) = load_splits(&a.common, &a.data)?;
    let ckpt = load_checkpoint(&a.checkpoint, &splits)?;
    let report = run_itm_eval(&ckpt.model, &splits.heldout, 0.5, a.common.seed())?;
    let text = json(&report)?;
    if let Some(dir) = &a.out {
        write(&dir.join("itm.json"), &text)?;
    }
    print!("{text}");
    Ok(())
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    a.common.check()?;
    let cfg = train_config(&a.common, a.steps, a.batch, None)?;
    let (splits, _) = load_splits(&a.common, &a.data)?;
    let model_config = splits.model_config(&cfg.model);
    create_dir(&a.out)?;
    let setup = AblationSetup {
        train: &splits.train,
        heldout: &splits.heldout,
        model: &model_config,
        train_config: &cfg.train,
        cloze_per_category: a.n,
    };
    let report = ablate(&setup, Some(&a.out))?;
    print!("{}", report.to_table());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Parse(a) => cmd_parse(a),
        Command::GenCorpus(a) => cmd_gen(a),
        Command::Mask(a) => cmd_mask(a),
        Command::Train(a) => cmd_train(a),
        Command::EvalCloze(a) => cmd_eval_cloze(a),
        Command::EvalItm(a) => cmd_eval_itm(a),
        Command::Ablate(a) => cmd_ablate(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
