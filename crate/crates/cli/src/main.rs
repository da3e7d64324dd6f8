use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hmlstm::corpus::{load_and_split, Corpus, Split, SplitSpec};
use hmlstm::diagnostics::{
    count_ops, gradcheck, heatmap_table, lstm_oracle_compare, render_trace, smooth_probe, GradcheckOptions,
};
use hmlstm::hm_cell::{BoundaryMode, LayerParams, LayerShape};
use hmlstm::network::{Checkpoint, Model, ModelConfig, NetworkState};
use hmlstm::numerics::Tensor;
use hmlstm::trainer::{evaluate, run_paths, TrainConfig, Trainer};
use hmlstm::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Exit status when a diagnostic runs but misses its tolerance.
const EXIT_CHECK_FAILED: u8 = 1;
/// Exit status for bad arguments or configurations.
const EXIT_USAGE: u8 = 2;
/// Exit status for I/O, data and numerical failures.
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "hmlstm", version, about = "Hierarchical multiscale LSTM language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a character model and write a log and checkpoints to --out.
    Train(TrainArgs),
    /// Print the BPC of a checkpoint on one split of a corpus.
    Eval(EvalArgs),
    /// Generate text from a checkpoint.
    Sample(SampleArgs),
    /// Show boundary panels, operation counts and a norm heatmap for a window.
    Trace(TraceArgs),
    /// Compare backpropagated gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Compare a forced-boundary layer with a plain LSTM.
    Oracle(OracleArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args)]
struct CorpusArgs {
    /// Plain-text corpus. Relative paths that do not exist are looked up in the data directory.
    #[arg(long)]
    corpus: PathBuf,
    /// Train/valid/test split as fractions (0.9,0.05,0.05) or character counts.
    #[arg(long, default_value = "0.9,0.05,0.05")]
    splits: String,
    /// Default directory for corpus files.
    #[arg(long, env = "HMLSTM_DATA_DIR")]
    data_dir: Option<PathBuf>,
}

impl CorpusArgs {
    fn load(&self) -> hmlstm::Result<Corpus> {
        let mut path = self.corpus.clone();
        if !path.exists() && path.is_relative() {
            if let Some(dir) = &self.data_dir {
                path = dir.join(&self.corpus);
            }
        }
        load_and_split(&path, SplitSpec::parse(&self.splits)?)
    }
}

#[derive(Args)]
struct ModelArgs {
    /// Number of layers.
    #[arg(long, default_value_t = 3)]
    layers: usize,
    /// Hidden width: one value for every layer or a comma-separated list.
    #[arg(long, default_value = "128")]
    dims: String,
    #[arg(long, default_value_t = 128)]
    embed_dim: usize,
    #[arg(long, default_value_t = 128)]
    out_embed_dim: usize,
    #[arg(long, value_enum, default_value = "step")]
    mode: ModeArg,
    #[arg(long, value_enum, default_value = "off")]
    layer_norm: Switch,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Step,
    Sample,
    Soft,
}

impl From<ModeArg> for BoundaryMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Step => BoundaryMode::Step,
            ModeArg::Sample => BoundaryMode::Sample,
            ModeArg::Soft => BoundaryMode::Soft,
        }
    }
}

fn parse_dims(spec: &str, layers: usize) -> hmlstm::Result<Vec<usize>> {
    let dims = spec
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad width {p:?}"))))
        .collect::<hmlstm::Result<Vec<_>>>()?;
    match dims.len() {
        1 => Ok(vec![dims[0]; layers]),
        n if n == layers => Ok(dims),
        n => Err(Error::Config(format!("{n} widths given for {layers} layers"))),
    }
}

impl ModelArgs {
    fn config(&self, vocab_size: usize) -> hmlstm::Result<ModelConfig> {
        let cfg = ModelConfig {
            dims: parse_dims(&self.dims, self.layers)?,
            embed_dim: self.embed_dim,
            out_embed_dim: self.out_embed_dim,
            vocab_size,
            mode: self.mode.into(),
            layer_norm: matches!(self.layer_norm, Switch::On),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    /// Truncation window length.
    #[arg(long, default_value_t = 100)]
    window: usize,
    #[arg(long, default_value_t = 0.002)]
    lr: f64,
    /// Global gradient-norm threshold.
    #[arg(long, default_value_t = 1.0)]
    clip: f64,
    #[arg(long, default_value_t = 0.04)]
    slope_rate: f64,
    #[arg(long, default_value_t = 5.0)]
    slope_cap: f64,
    /// Learning-rate divisor applied when validation stops improving.
    #[arg(long, default_value_t = 50.0)]
    lr_decay: f64,
    /// Decay at every plateau instead of only the first.
    #[arg(long)]
    repeat_decay: bool,
    /// Epochs to run; when resuming, epochs beyond the checkpoint.
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Resume from this checkpoint instead of starting fresh.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory for the log and checkpoints.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Record elapsed seconds in the log.
    #[arg(long)]
    wall_time: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Which split to score: train, valid or test.
    #[arg(long, default_value = "test")]
    split: Split,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Text fed to the model before sampling.
    #[arg(long, default_value = " ")]
    prime: String,
    /// Number of characters to generate.
    #[arg(long, default_value_t = 200)]
    length: usize,
    /// 0 picks the most likely character every step.
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TraceArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Window to read; otherwise one is cut from --corpus.
    #[arg(long)]
    text: Option<String>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value = "0.9,0.05,0.05")]
    splits: String,
    #[arg(long, env = "HMLSTM_DATA_DIR")]
    data_dir: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: Split,
    /// First character of the window within the split.
    #[arg(long, default_value_t = 0)]
    offset: usize,
    /// Window length in characters.
    #[arg(long, default_value_t = 270)]
    length: usize,
    /// Panel width.
    #[arg(long, default_value_t = 90)]
    width: usize,
    /// Write the heatmap table here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value = "4")]
    dims: String,
    #[arg(long, default_value_t = 4)]
    embed_dim: usize,
    #[arg(long, default_value_t = 4)]
    out_embed_dim: usize,
    #[arg(long, default_value_t = 6)]
    vocab: usize,
    #[arg(long, value_enum, default_value = "off")]
    layer_norm: Switch,
    /// Steps in the checked window.
    #[arg(long, default_value_t = 4)]
    window: usize,
    #[arg(long, default_value_t = 200)]
    probes: usize,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 20)]
    steps: usize,
    /// Number of random layers to compare.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    #[arg(long, default_value_t = 1e-12)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

enum Failure {
    Check(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn train(args: TrainArgs) -> Outcome {
    let corpus = args.corpus.load()?;
    let mut trainer = match &args.checkpoint {
        Some(path) => {
            let mut t = Trainer::resume(Checkpoint::load(path)?)?;
            t.cfg.max_epochs = args.epochs;
            t.cfg.log_wall_time = args.wall_time;
            if t.model.config.vocab_size != corpus.vocab.size() {
                return Err(Error::Config("checkpoint vocabulary does not fit this corpus".into()).into());
            }
            t
        }
        None => {
            let cfg = args.model.config(corpus.vocab.size())?;
            let model = Model::init(cfg, &mut ChaCha8Rng::seed_from_u64(args.seed))?;
            let tc = TrainConfig {
                batch: args.batch,
                window: args.window,
                learning_rate: args.lr,
                clip: args.clip,
                slope_rate: args.slope_rate,
                slope_cap: args.slope_cap,
                lr_decay: args.lr_decay,
                repeat_decay: args.repeat_decay,
                max_epochs: args.epochs,
                seed: args.seed,
                log_wall_time: args.wall_time,
                ..TrainConfig::default()
            };
            Trainer::new(model, tc)?.with_vocab(corpus.vocab.clone())
        }
    };
    fs::create_dir_all(&args.out)?;
    let (log_path, best_path) = run_paths(&args.out);
    let mut log = BufWriter::new(File::create(&log_path)?);
    trainer.train(&corpus, &mut log, Some(&best_path), |_, r| {
        eprintln!(
            "epoch {:>3}  train {}  valid {:.4}  slope {:.3}  lr {:.2e}",
            r.epoch,
            r.train_bpc.map_or("-".to_string(), |b| format!("{b:.4}")),
            r.val_bpc,
            r.slope,
            r.learning_rate
        );
        true
    })?;
    trainer.checkpoint().save(&args.out.join("last.ckpt"))?;
    println!("log: {}", log_path.display());
    if best_path.exists() {
        println!("best checkpoint: {}", best_path.display());
    }
    Ok(())
}

fn eval_settings(ck: &Checkpoint) -> (usize, usize) {
    ck.train.as_ref().map_or((32, 100), |t| (t.batch, t.window))
}

fn eval(args: EvalArgs) -> Outcome {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let corpus = args.corpus.load()?;
    if corpus.vocab.size() != ck.model.config.vocab_size {
        return Err(Error::Config("checkpoint vocabulary does not fit this corpus".into()).into());
    }
    let (lanes, window) = eval_settings(&ck);
    let r = evaluate(&ck.model, corpus.split(args.split), lanes, window, ck.slope, ck.seed)?;
    println!("split {} bpc {} loss {} symbols {}", args.split, r.bpc, r.loss, r.symbols);
    if let Some(c) = r.counts {
        println!("{c}");
    }
    Ok(())
}

fn vocab_of(ck: &Checkpoint) -> Result<&hmlstm::corpus::Vocab, Failure> {
    ck.vocab.as_ref().ok_or_else(|| Error::Usage("checkpoint carries no vocabulary".into()).into())
}

fn sample(args: SampleArgs) -> Outcome {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let vocab = vocab_of(&ck)?;
    let prime = vocab.encode(&args.prime);
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let out = ck.model.sample_text(&prime, args.length, args.temperature, ck.slope, &mut rng)?;
    println!("{}{}", args.prime, vocab.decode(&out));
    Ok(())
}

fn trace(args: TraceArgs) -> Outcome {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let vocab = vocab_of(&ck)?;
    let symbols = match (&args.text, &args.corpus) {
        (Some(text), _) => vocab.encode(text),
        (None, Some(path)) => {
            let corpus = CorpusArgs { corpus: path.clone(), splits: args.splits.clone(), data_dir: args.data_dir.clone() }.load()?;
            let split = corpus.split(args.split);
            let end = (args.offset + args.length + 1).min(split.len());
            if args.offset >= end {
                return Err(Error::Usage(format!("offset {} is past the end of the split", args.offset)).into());
            }
            split[args.offset..end].to_vec()
        }
        (None, None) => return Err(Error::Usage("give --text or --corpus".into()).into()),
    };
    // the last symbol is only a target, so feed one extra when cutting from a corpus
    let mut window = symbols;
    if args.text.is_some() {
        window.push(*window.last().ok_or_else(|| Failure::Lib(Error::Usage("empty text".into())))?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let r = ck.model.sequence_nll(&window, &NetworkState::zeros(&ck.model.config), ck.slope, &mut rng)?;
    let steps = window.len() - 1;
    let trace = r.trace.with_text(&vocab.decode(&window[..steps]));
    print!("{}", render_trace(&trace, args.width));
    println!();
    if ck.model.config.mode.is_hard() {
        println!("{}", count_ops(&trace)?);
    }
    println!("bpc {}", r.bpc);
    let table = heatmap_table(&trace);
    match &args.out {
        Some(path) => {
            fs::write(path, table)?;
            println!("heatmap: {}", path.display());
        }
        None => {
            println!();
            print!("{table}");
        }
    }
    Ok(())
}

fn gradcheck_cmd(args: GradcheckArgs) -> Outcome {
    let cfg = ModelConfig {
        dims: parse_dims(&args.dims, args.layers)?,
        embed_dim: args.embed_dim,
        out_embed_dim: args.out_embed_dim,
        vocab_size: args.vocab,
        mode: BoundaryMode::Soft,
        layer_norm: matches!(args.layer_norm, Switch::On),
    };
    cfg.validate()?;
    let (model, window) = smooth_probe(&cfg, args.window, 1.0, 1e-3, 1.0, 100, args.seed)?;
    let opts = GradcheckOptions { probes: args.probes, eps: args.eps, tolerance: args.tolerance, seed: args.seed, ..Default::default() };
    let report = gradcheck(&model, &window, &NetworkState::zeros(&cfg), &opts)?;
    println!("{report}");
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Check(format!("max relative error {:.3e} exceeds {:.0e}", report.max_rel_error(), args.tolerance)))
    }
}

fn oracle(args: OracleArgs) -> Outcome {
    let shape = LayerShape { dim: args.dim, below_dim: args.dim, above_dim: Some(args.dim) };
    let mut worst: f64 = 0.0;
    for k in 0..args.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed.wrapping_add(k));
        let params = LayerParams::init(shape, false, &mut rng);
        let inputs: Vec<Tensor> =
            (0..args.steps).map(|_| Tensor::vector((0..args.dim).map(|_| rng.gen_range(-1.0..1.0)).collect())).collect();
        let dev = lstm_oracle_compare(&params, &inputs, true)?;
        println!("seed {:>3}  max deviation {dev:.3e}", args.seed.wrapping_add(k));
        worst = worst.max(dev);
    }
    println!("worst {worst:.3e} (tolerance {:.0e})", args.tolerance);
    if worst <= args.tolerance {
        println!("PASS");
        Ok(())
    } else {
        println!("FAIL");
        Err(Failure::Check(format!("deviation {worst:.3e} exceeds {:.0e}", args.tolerance)))
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Usage(_) | Error::Index { .. } | Error::Dimension(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Sample(a) => sample(a),
        Command::Trace(a) => trace(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Oracle(a) => oracle(a),
    };
    let _ = std::io::stdout().flush();
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(EXIT_CHECK_FAILED)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
