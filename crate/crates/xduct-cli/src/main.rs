//! Batch command-line workflows: train a transducer, evaluate a checkpoint
//! on a test set, analyze alignment monotonicity, and generate synthetic
//! datasets. Every command reads and writes plain files; logging verbosity
//! comes from the XDUCT_LOG environment variable.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use xduct::data::{self, Example, SyntheticTask, TaskKind, Vocabulary, EOS};
use xduct::decode::{confusion_table, decode_corpus, export_heatmap, EDGE_THRESHOLD};
use xduct::error::{Error, Result};
use xduct::metrics;
use xduct::model::{build_model, ArchitectureKind, ModelConfig, TransducerModel};
use xduct::train::{
    fit, load_checkpoint, save_checkpoint, EncodedPair, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "xduct",
    version,
    about = "Character transduction with soft or exactly marginalized hard attention"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and save the best checkpoint by dev accuracy
    Train(TrainArgs),
    /// Decode a test set greedily and report the task's metrics
    Eval(EvalArgs),
    /// Classify alignment monotonicity and export attention heatmaps
    Analyze(AnalyzeArgs),
    /// Generate a synthetic copy/reverse/reduplication dataset
    Gen(GenArgs),
}

#[derive(Copy, Clone, ValueEnum)]
enum TaskArg {
    G2p,
    Translit,
    Inflection,
    Synthetic,
}

impl TaskArg {
    fn kind(self) -> TaskKind {
        match self {
            TaskArg::G2p => TaskKind::G2p,
            TaskArg::Translit => TaskKind::Transliteration,
            TaskArg::Inflection => TaskKind::Inflection,
            TaskArg::Synthetic => TaskKind::Synthetic,
        }
    }
}

#[derive(Copy, Clone, ValueEnum)]
enum ArchArg {
    SoftIf,
    HardIf,
    Soft,
    Hard,
}

impl ArchArg {
    fn kind(self) -> ArchitectureKind {
        match self {
            ArchArg::SoftIf => ArchitectureKind::SoftInputFed,
            ArchArg::HardIf => ArchitectureKind::HardInputFed,
            ArchArg::Soft => ArchitectureKind::Soft,
            ArchArg::Hard => ArchitectureKind::Hard,
        }
    }
}

#[derive(Copy, Clone, ValueEnum)]
enum PresetArg {
    Small,
    Large,
}

#[derive(Copy, Clone, ValueEnum)]
enum RuleArg {
    Copy,
    Reverse,
    Reduplicate,
}

impl RuleArg {
    fn task(self) -> SyntheticTask {
        match self {
            RuleArg::Copy => SyntheticTask::Copy,
            RuleArg::Reverse => SyntheticTask::Reverse,
            RuleArg::Reduplicate => SyntheticTask::Reduplicate,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Data format and metric family
    #[arg(long, value_enum)]
    task: TaskArg,
    /// Attention architecture
    #[arg(long, value_enum)]
    arch: ArchArg,
    /// Training examples (TSV)
    #[arg(long)]
    data: PathBuf,
    /// Development examples; g2p splits 5%/10% off --data when omitted
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Directory for checkpoint, log, manifest (and any generated splits)
    #[arg(long)]
    out: PathBuf,
    /// Hyperparameter preset
    #[arg(long, value_enum, default_value_t = PresetArg::Small)]
    preset: PresetArg,
    /// Master seed; init, shuffling, dropout, and sampling derive from it
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train hard attention with sampled alignments instead of the exact marginal
    #[arg(long)]
    reinforce: bool,
    /// Alignment samples per output step under --reinforce
    #[arg(long, default_value_t = 2)]
    samples: usize,
    /// Batch size; defaults to the task's published size (g2p 20, translit 50, inflection 20)
    #[arg(long)]
    batch_size: Option<usize>,
    /// Initial Adam learning rate
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Epoch cap
    #[arg(long, default_value_t = 50)]
    max_epochs: usize,
    /// Global gradient-norm cap; 0 disables; defaults to 5 for the large preset
    #[arg(long)]
    clip: Option<f64>,
    /// Decoded-length cap for dev scoring (default: source length + 50)
    #[arg(long)]
    max_len: Option<usize>,
    /// Per-sequence evaluation threads; results are identical at any count
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Assert the run is bitwise reproducible (always true; recorded in the manifest)
    #[arg(long)]
    deterministic: bool,
    /// Reject non-finite values at every operation during training
    #[arg(long)]
    checked: bool,
    /// Embedding width override
    #[arg(long)]
    d_e: Option<usize>,
    /// Encoder width override (per direction)
    #[arg(long)]
    d_h: Option<usize>,
    /// Encoder layer count override
    #[arg(long)]
    enc_layers: Option<usize>,
    /// Decoder width override
    #[arg(long)]
    d_dec: Option<usize>,
    /// Decoder layer count override
    #[arg(long)]
    dec_layers: Option<usize>,
    /// Dropout rate override
    #[arg(long)]
    dropout: Option<f64>,
    /// Give soft input feeding its full output law instead of the
    /// parameter-controlled shrink
    #[arg(long)]
    uncontrolled: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Trained checkpoint
    #[arg(long)]
    ckpt: PathBuf,
    /// Data format and metric family
    #[arg(long, value_enum)]
    task: TaskArg,
    /// Test examples (TSV)
    #[arg(long)]
    test: PathBuf,
    /// Directory for predictions.tsv and summary.tsv
    #[arg(long)]
    out: PathBuf,
    /// Assert the checkpoint was trained with this architecture
    #[arg(long, value_enum)]
    arch: Option<ArchArg>,
    /// Evaluate under the stored architecture despite a mismatch
    #[arg(long)]
    allow_arch_mismatch: bool,
    /// Decoded-length cap (default: source length + 50)
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Trained checkpoint
    #[arg(long)]
    ckpt: PathBuf,
    /// Data format
    #[arg(long, value_enum)]
    task: TaskArg,
    /// Examples to decode and analyze (TSV)
    #[arg(long)]
    data: PathBuf,
    /// Directory for confusion.tsv, verdicts.tsv, and heatmaps
    #[arg(long)]
    out: PathBuf,
    /// Attention weight above which an alignment edge is drawn
    #[arg(long, default_value_t = EDGE_THRESHOLD)]
    threshold: f64,
    /// Export heatmaps for this many examples from the top of the file
    #[arg(long, default_value_t = 0)]
    heatmaps: usize,
    /// Count the EOS step's attention row when looking for crossings
    #[arg(long)]
    include_eos_row: bool,
    /// Decoded-length cap (default: source length + 50)
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct GenArgs {
    /// Transformation the dataset demonstrates
    #[arg(long, value_enum)]
    rule: RuleArg,
    /// Training pairs to generate; a tenth as many dev and test pairs follow
    #[arg(long, default_value_t = 2000)]
    n_train: usize,
    /// Shortest source length
    #[arg(long, default_value_t = 4)]
    min_len: usize,
    /// Longest source length
    #[arg(long, default_value_t = 8)]
    max_len: usize,
    /// Distinct source symbols (lowercase letters)
    #[arg(long, default_value_t = 10)]
    alphabet: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for train.tsv, dev.tsv, test.tsv
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(
        env_logger::Env::new().filter_or("XDUCT_LOG", "error"),
    )
    .format_timestamp(None)
    .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Gen(a) => cmd_gen(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

// ── shared plumbing ─────────────────────────────────────────────────────

fn build_vocabularies(examples: &[Example]) -> Result<(Vocabulary, Vocabulary)> {
    let src = Vocabulary::build(examples.iter().map(|e| e.source.as_slice()))?;
    let tgt = Vocabulary::build(examples.iter().map(|e| e.target.as_slice()))?;
    Ok((src, tgt))
}

fn encode_pairs(examples: &[Example], src: &Vocabulary, tgt: &Vocabulary) -> Vec<EncodedPair> {
    examples
        .iter()
        .map(|e| (src.encode(&e.source), tgt.encode_with_eos(&e.target)))
        .collect()
}

/// Decoded output as strings, with the terminal EOS stripped.
fn hypothesis_symbols(output: &[usize], tgt: &Vocabulary) -> Result<Vec<String>> {
    let trimmed = match output.split_last() {
        Some((&last, rest)) if last == EOS => rest,
        _ => output,
    };
    tgt.decode(trimmed)
}

fn default_batch_size(task: TaskKind) -> usize {
    match task {
        TaskKind::G2p | TaskKind::Inflection | TaskKind::Synthetic => 20,
        TaskKind::Transliteration => 50,
    }
}

// ── train ───────────────────────────────────────────────────────────────

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let task = a.task.kind();
    let arch = a.arch.kind();
    fs::create_dir_all(&a.out)?;

    let raw = data::read_tsv(&a.data, task)?;
    let (train_ex, dev_ex) = match (&a.dev, task) {
        (Some(path), _) => (raw, data::read_tsv(path, task)?),
        (None, TaskKind::G2p) => {
            let (train, dev, test) = data::split_g2p(raw, a.seed)?;
            data::write_tsv(&a.out.join("train.tsv"), task, &train)?;
            data::write_tsv(&a.out.join("dev.tsv"), task, &dev)?;
            data::write_tsv(&a.out.join("test.tsv"), task, &test)?;
            log::info!(
                "split {} examples into {}/{}/{} train/dev/test under {}",
                train.len() + dev.len() + test.len(),
                train.len(),
                dev.len(),
                test.len(),
                a.out.display()
            );
            (train, dev)
        }
        (None, _) => {
            return Err(Error::Config {
                what: "this task needs --dev; only g2p splits automatically".into(),
            })
        }
    };

    let (src_vocab, tgt_vocab) = build_vocabularies(&train_ex)?;
    let train_pairs = encode_pairs(&train_ex, &src_vocab, &tgt_vocab);
    let dev_pairs = encode_pairs(&dev_ex, &src_vocab, &tgt_vocab);

    let base = match a.preset {
        PresetArg::Small => ModelConfig::small(arch),
        PresetArg::Large => ModelConfig::large(arch),
    };
    let mut config = ModelConfig::new(
        arch,
        a.d_e.unwrap_or(base.d_e),
        a.d_h.unwrap_or(base.d_h),
        a.enc_layers.unwrap_or(base.enc_layers),
        a.d_dec.unwrap_or(base.d_dec),
        a.dec_layers.unwrap_or(base.dec_layers),
        a.dropout.unwrap_or(base.dropout),
    );
    config.reinforce = a.reinforce;
    config.samples = a.samples;
    config.uncontrolled = a.uncontrolled;
    config.validate()?;

    let clip = match a.clip {
        Some(v) if v == 0.0 => None,
        Some(v) if v > 0.0 => Some(v),
        Some(v) => {
            return Err(Error::Config { what: format!("clip norm {v} must be positive or 0") })
        }
        None => matches!(a.preset, PresetArg::Large).then_some(5.0),
    };
    let mut tcfg = TrainConfig::new(a.batch_size.unwrap_or(default_batch_size(task)), a.seed);
    tcfg.lr = a.lr;
    tcfg.max_epochs = a.max_epochs;
    tcfg.clip_norm = clip;
    tcfg.checked = a.checked;
    tcfg.threads = a.threads;
    tcfg.validate()?;

    let manifest = serde_json::json!({
        "command": "train",
        "task": task,
        "model": config,
        "optimizer": tcfg,
        "seed": a.seed,
        "deterministic": a.deterministic,
        "data": a.data.display().to_string(),
        "dev": a.dev.as_ref().map(|p| p.display().to_string()),
        "max_len": a.max_len,
        "out": a.out.display().to_string(),
        "build": concat!("xduct ", env!("CARGO_PKG_VERSION")),
    });
    fs::write(
        a.out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;

    let mut model = build_model(config, src_vocab.len(), tgt_vocab.len(), a.seed)?;
    log::info!(
        "training {} parameters on {} pairs ({} dev)",
        model.parameter_count(),
        train_pairs.len(),
        dev_pairs.len()
    );

    let (max_len, threads) = (a.max_len, a.threads);
    let metric = |m: &TransducerModel, pairs: &[EncodedPair]| -> Result<f64> {
        let inputs: Vec<Vec<usize>> = pairs.iter().map(|(x, _)| x.clone()).collect();
        let decoded = decode_corpus(m, &inputs, max_len, threads)?;
        let outcomes: Vec<(Vec<usize>, Vec<usize>)> =
            decoded.into_iter().zip(pairs).map(|(d, (_, y))| (d.output, y.clone())).collect();
        metrics::accuracy(&outcomes)
    };
    let outcome = fit(&mut model, &src_vocab, &tgt_vocab, &train_pairs, &dev_pairs, &tcfg, metric)?;

    let ckpt_path = a.out.join("best.ckpt");
    save_checkpoint(&outcome.best, &ckpt_path)?;
    let mut log_tsv = String::from("epoch\ttrain_loss\tdev_loss\tdev_metric\tlr\n");
    for e in &outcome.log {
        log_tsv += &format!(
            "{}\t{:.6}\t{:.6}\t{:.4}\t{}\n",
            e.epoch, e.train_loss, -e.dev_log_likelihood, e.dev_metric, e.lr
        );
    }
    fs::write(a.out.join("log.tsv"), log_tsv)?;

    let best = &outcome.log[outcome.best.epoch - 1];
    println!(
        "saved {} from epoch {} (dev accuracy {:.1}) after {} epochs",
        ckpt_path.display(),
        outcome.best.epoch,
        best.dev_metric,
        outcome.log.len()
    );
    Ok(())
}

// ── eval ────────────────────────────────────────────────────────────────

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let task = a.task.kind();
    let ckpt = load_checkpoint(&a.ckpt)?;
    if let Some(arch) = a.arch {
        ckpt.ensure_architecture(arch.kind(), a.allow_arch_mismatch)?;
        if ckpt.config.arch != arch.kind() {
            log::warn!(
                "evaluating a {} checkpoint although {} was requested",
                ckpt.config.arch,
                arch.kind()
            );
        }
    }
    fs::create_dir_all(&a.out)?;

    let examples = data::read_tsv(&a.test, task)?;
    if examples.is_empty() {
        return Err(Error::EmptyDataset { what: a.test.display().to_string() });
    }
    let inputs: Vec<Vec<usize>> =
        examples.iter().map(|e| ckpt.src_vocab.encode(&e.source)).collect();
    let decoded = decode_corpus(&ckpt.model, &inputs, a.max_len, a.threads)?;
    let hypotheses: Vec<Vec<String>> = decoded
        .iter()
        .map(|d| hypothesis_symbols(&d.output, &ckpt.tgt_vocab))
        .collect::<Result<_>>()?;

    let mut rows = String::from("source\treference\thypothesis\tcorrect\n");
    for (ex, hyp) in examples.iter().zip(&hypotheses) {
        rows += &format!(
            "{}\t{}\t{}\t{}\n",
            ex.source.join(" "),
            ex.target.join(" "),
            hyp.join(" "),
            u8::from(hyp == &ex.target)
        );
    }
    fs::write(a.out.join("predictions.tsv"), rows)?;

    let scored: Vec<(Vec<String>, Vec<String>)> = hypotheses
        .into_iter()
        .zip(&examples)
        .map(|(h, e)| (h, e.target.clone()))
        .collect();
    let report = metrics::evaluate(&scored)?;
    let mut summary = format!("examples\t{}\n", report.pairs);
    match task {
        TaskKind::G2p => {
            summary += &format!("WER\t{:.1}\n", report.word_error_rate * 100.0);
            summary += &format!("PER\t{:.3}\n", report.symbol_error_rate_corpus);
        }
        TaskKind::Transliteration => {
            summary += &format!("ACC\t{:.1}\n", report.accuracy);
            summary += &format!("MFS\t{:.3}\n", report.mean_fscore);
        }
        TaskKind::Inflection | TaskKind::Synthetic => {
            summary += &format!("ACC\t{:.1}\n", report.accuracy);
            summary += &format!("MLD\t{:.3}\n", report.mean_levenshtein);
        }
    }
    fs::write(a.out.join("summary.tsv"), &summary)?;
    print!("{summary}");
    Ok(())
}

// ── analyze ─────────────────────────────────────────────────────────────

fn cmd_analyze(a: &AnalyzeArgs) -> Result<()> {
    let task = a.task.kind();
    let ckpt = load_checkpoint(&a.ckpt)?;
    fs::create_dir_all(&a.out)?;

    let examples = data::read_tsv(&a.data, task)?;
    if examples.is_empty() {
        return Err(Error::EmptyDataset { what: a.data.display().to_string() });
    }
    let inputs: Vec<Vec<usize>> =
        examples.iter().map(|e| ckpt.src_vocab.encode(&e.source)).collect();
    let references: Vec<Vec<usize>> =
        examples.iter().map(|e| ckpt.tgt_vocab.encode_with_eos(&e.target)).collect();
    let decoded = decode_corpus(&ckpt.model, &inputs, a.max_len, a.threads)?;

    let table = confusion_table(&decoded, &references, a.threshold)?;
    let confusion = format!(
        "\tcorrect\tincorrect\nmonotonic\t{}\t{}\nnon-monotonic\t{}\t{}\n",
        table.monotonic_correct,
        table.monotonic_incorrect,
        table.crossing_correct,
        table.crossing_incorrect
    );
    fs::write(a.out.join("confusion.tsv"), &confusion)?;

    let mut verdicts = String::from("example\tcrossing\tcorrect\tedges\n");
    for (i, (result, reference)) in decoded.iter().zip(&references).enumerate() {
        let v = xduct::decode::classify_monotonicity(result, a.threshold, a.include_eos_row);
        verdicts += &format!(
            "{}\t{}\t{}\t{}\n",
            i,
            u8::from(v.crossing),
            u8::from(&result.output == reference),
            v.edges.len()
        );
    }
    fs::write(a.out.join("verdicts.tsv"), verdicts)?;

    for (i, result) in decoded.iter().take(a.heatmaps).enumerate() {
        let path = a.out.join(format!("heatmap_{i:04}.tsv"));
        export_heatmap(result, &ckpt.src_vocab, &ckpt.tgt_vocab, &path)?;
    }

    print!("{confusion}");
    Ok(())
}

// ── gen ─────────────────────────────────────────────────────────────────

fn cmd_gen(a: &GenArgs) -> Result<()> {
    let dataset = data::gen_synthetic(
        a.rule.task(),
        a.n_train,
        (a.min_len, a.max_len),
        a.alphabet,
        a.seed,
    )?;
    fs::create_dir_all(&a.out)?;
    data::write_tsv(&a.out.join("train.tsv"), TaskKind::Synthetic, &dataset.train)?;
    data::write_tsv(&a.out.join("dev.tsv"), TaskKind::Synthetic, &dataset.dev)?;
    data::write_tsv(&a.out.join("test.tsv"), TaskKind::Synthetic, &dataset.test)?;
    println!(
        "wrote {} train / {} dev / {} test {} pairs to {}",
        dataset.train.len(),
        dataset.dev.len(),
        dataset.test.len(),
        a.rule.task(),
        a.out.display()
    );
    Ok(())
}
