//! `xsa`: train, probe, benchmark and sample SA / XSA language models.
//!
//! Exit status: 0 on success, 2 for usage or configuration errors, 1 for
//! failures at run time.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use xsa_core::attention::{AttentionMode, TraceCapture};
use xsa_core::bench::{bench_block_with, BenchConfig, CountingAllocator};
use xsa_core::model::{Checkpoint, Model, Tokenizer};
use xsa_core::probe::{probe_run, ProbeFormat, ProbeOptions};
use xsa_core::tensor::{DType, Float};
use xsa_core::training::{train, Dataset, LossRecord, RunConfig, Split, TrainConfig, TrainOptions};
use xsa_core::{Error, Result};

#[global_allocator]
static ALLOC: CountingAllocator = CountingAllocator;

#[derive(Parser)]
#[command(name = "xsa", version, about = "Exclusive self attention laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a byte-level language model.
    Train(TrainArgs),
    /// Attention-similarity statistics of a checkpoint.
    Probe(ProbeArgs),
    /// Time and memory of one block in SA and XSA mode.
    Bench(BenchArgs),
    /// Generate text from a checkpoint.
    Sample(SampleArgs),
}

fn parse_mode(s: &str) -> std::result::Result<AttentionMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_dtype(s: &str) -> std::result::Result<DType, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_capture(s: &str) -> std::result::Result<TraceCapture, String> {
    match s {
        "diag" | "full" => s.parse().map_err(|e: Error| e.to_string()),
        other => Err(format!("unknown capture `{other}` (diag|full)")),
    }
}

fn parse_format(s: &str) -> std::result::Result<ProbeFormat, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Args)]
struct TrainArgs {
    /// TOML file with [model] and [train] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<AttentionMode>,
    /// Number of learned sink positions.
    #[arg(long)]
    sinks: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    /// Maximum learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for loss.csv and checkpoints.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    warmup: Option<u64>,
    #[arg(long)]
    batch_tokens: Option<usize>,
    #[arg(long, value_parser = parse_dtype)]
    precision: Option<DType>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Continue from a checkpoint directory.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Print a progress line every N steps (0 silences it).
    #[arg(long, default_value_t = 100)]
    log_every: u64,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Text to draw sequences from; defaults to the training corpus.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Probe the weights in another attention mode.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<AttentionMode>,
    #[arg(long, default_value_t = 64)]
    n_sequences: usize,
    /// Defaults to the model's max_seq_len.
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "diag", value_parser = parse_capture)]
    capture: TraceCapture,
    /// Defaults to json for a .json output path, csv otherwise.
    #[arg(long, value_parser = parse_format)]
    format: Option<ProbeFormat>,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', value_parser = parse_mode, default_value = "sa,xsa")]
    modes: Vec<AttentionMode>,
    #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048")]
    seq_lens: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "256,512")]
    d_models: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 20)]
    repeats: usize,
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    #[arg(long, default_value = "f32", value_parser = parse_dtype)]
    precision: DType,
    /// Time forward + backward.
    #[arg(long)]
    backward: bool,
    #[arg(long, default_value_t = 64)]
    d_head: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "\n")]
    prompt: String,
    #[arg(long, default_value_t = 200)]
    n_new: usize,
    /// 0 decodes greedily.
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<AttentionMode>,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn tokenizer_for(train: &TrainConfig) -> Result<Tokenizer> {
    match &train.vocab_path {
        Some(p) => Tokenizer::from_vocab_file(p),
        None => Ok(Tokenizer::Bytes),
    }
}

/// Training settings echoed in a checkpoint, or defaults.
fn train_echo(ck: &Checkpoint) -> Result<TrainConfig> {
    match &ck.manifest.train {
        Some(t) => t
            .clone()
            .try_into()
            .map_err(|e| Error::Checkpoint(format!("train table: {e}"))),
        None => Ok(TrainConfig::default()),
    }
}

fn write_output(out: Option<&Path>, text: &[u8]) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => std::io::stdout().write_all(text)?,
    }
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let resume = match &args.resume {
        Some(dir) => {
            let ck = Checkpoint::load(dir)?;
            cfg.model = ck.manifest.model.clone();
            Some(ck)
        }
        None => None,
    };
    let (m, t) = (&mut cfg.model, &mut cfg.train);
    if let Some(v) = args.mode {
        m.mode = v;
    }
    if let Some(v) = args.sinks {
        m.n_sinks = v;
    }
    if let Some(v) = args.seq_len {
        t.seq_len = v;
        m.max_seq_len = m.max_seq_len.max(v);
    }
    if let Some(v) = args.lr {
        t.max_lr = v;
    }
    if let Some(v) = args.seed {
        t.seed = v;
        m.seed = v;
    }
    if let Some(v) = args.corpus {
        t.corpus_path = Some(v);
    }
    if let Some(v) = args.steps {
        t.total_steps = v;
    }
    if let Some(v) = args.warmup {
        t.warmup_steps = v;
    }
    if let Some(v) = args.batch_tokens {
        t.batch_tokens = v;
    }
    if let Some(v) = args.precision {
        t.precision = v;
    }
    if let Some(v) = args.eval_every {
        t.eval_every = v;
    }
    if let Some(v) = args.checkpoint_every {
        t.checkpoint_every = v;
    }
    cfg.validate()?;
    let tokenizer = tokenizer_for(&cfg.train)?;
    if tokenizer.vocab_size() != cfg.model.vocab_size {
        return Err(Error::Config(format!(
            "tokenizer has {} tokens but model.vocab_size is {}",
            tokenizer.vocab_size(),
            cfg.model.vocab_size
        )));
    }
    let corpus = cfg
        .train
        .corpus_path
        .clone()
        .ok_or_else(|| Error::Config("no corpus: pass --corpus or set train.corpus_path".into()))?;
    let data = Dataset::from_file(&corpus, &tokenizer, cfg.train.val_frac)?;
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("config.toml"), cfg.to_toml()?)?;
    match cfg.train.precision {
        DType::F32 => train_in::<f32>(&cfg, &data, &args.out, resume.as_ref(), args.log_every),
        DType::F64 => train_in::<f64>(&cfg, &data, &args.out, resume.as_ref(), args.log_every),
    }
}

fn train_in<S: Float>(
    cfg: &RunConfig,
    data: &Dataset,
    out: &Path,
    resume: Option<&Checkpoint>,
    log_every: u64,
) -> Result<()> {
    let mut model = match resume {
        Some(ck) => ck.model::<S>()?,
        None => Model::<S>::new(&cfg.model)?,
    };
    eprintln!(
        "training {} model: {} parameters ({} non-embedding), {} tokens",
        cfg.model.mode,
        model.num_params(),
        cfg.model.nonembedding_params(),
        data.len()
    );
    let progress = move |r: &LossRecord| {
        if log_every > 0 && (r.split == Split::Val || r.step % log_every == 0) {
            eprintln!(
                "step {:>6} {:<5} loss {:.4} lr {:.3e} {:.1}s",
                r.step, r.split, r.loss, r.lr, r.wallclock_s
            );
        }
    };
    let outcome = train(
        &mut model,
        &cfg.train,
        data,
        TrainOptions {
            out_dir: Some(out.to_path_buf()),
            resume,
            on_record: Some(Box::new(progress)),
        },
    )?;
    eprintln!(
        "done: loss {:.4} -> {:.4}; checkpoint {}",
        outcome.initial_loss,
        outcome.final_loss,
        outcome
            .final_checkpoint
            .as_deref()
            .map_or("-".into(), |p| p.display().to_string())
    );
    Ok(())
}

fn run_probe(args: ProbeArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let train_cfg = train_echo(&ck)?;
    let corpus = args
        .corpus
        .or(train_cfg.corpus_path.clone())
        .ok_or_else(|| Error::Config("no corpus: pass --corpus".into()))?;
    let tokenizer = tokenizer_for(&train_cfg)?;
    let data = Dataset::from_file(&corpus, &tokenizer, train_cfg.val_frac)?;
    // Statistics are computed in double precision whatever the stored dtype.
    let mut model: Model<f64> = ck.model()?;
    if let Some(m) = args.mode {
        model.set_mode(m);
    }
    let opts = ProbeOptions {
        n_sequences: args.n_sequences,
        seq_len: args.seq_len.unwrap_or(model.config().max_seq_len),
        seed: args.seed,
        capture: args.capture,
        ..ProbeOptions::default()
    };
    let report = probe_run(&model, &data, &opts)?;
    let format = args.format.unwrap_or(match &args.out {
        Some(p) if p.extension().is_some_and(|e| e == "json") => ProbeFormat::Json,
        _ => ProbeFormat::Csv,
    });
    write_output(args.out.as_deref(), report.render(format)?.as_bytes())
}

fn run_bench(args: BenchArgs) -> Result<()> {
    let bc = BenchConfig {
        seq_lens: args.seq_lens,
        d_models: args.d_models,
        modes: args.modes,
        batch: args.batch,
        repeats: args.repeats,
        warmup: args.warmup,
        precision: args.precision,
        backward: args.backward,
        d_head: args.d_head,
        seed: args.seed,
        ..BenchConfig::default()
    };
    bc.validate()?;
    let report = bench_block_with(&bc, |c| match c.median_ms {
        Some(ms) => eprintln!("{:<3} T={:<5} d={:<5} median {ms:.3} ms", c.mode, c.seq_len, c.d_model),
        None => eprintln!("{:<3} T={:<5} d={:<5} skipped", c.mode, c.seq_len, c.d_model),
    })?;
    for r in &report.ratios {
        eprintln!(
            "T={:<5} d={:<5} time ratio {:.3} memory ratio {}",
            r.seq_len,
            r.d_model,
            r.time_ratio,
            r.mem_ratio.map_or("-".into(), |m| format!("{m:.3}"))
        );
    }
    let mut json = report.to_json()?;
    json.push('\n');
    write_output(args.out.as_deref(), json.as_bytes())
}

fn run_sample(args: SampleArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let tokenizer = tokenizer_for(&train_echo(&ck)?)?;
    let prompt = tokenizer.encode(args.prompt.as_bytes())?;
    let new = match ck.manifest.dtype {
        DType::F32 => sample_in::<f32>(&ck, args.mode, &prompt, &args)?,
        DType::F64 => sample_in::<f64>(&ck, args.mode, &prompt, &args)?,
    };
    let mut text = args.prompt.into_bytes();
    text.extend(tokenizer.decode(&new)?);
    write_output(args.out.as_deref(), &text)
}

fn sample_in<S: Float>(
    ck: &Checkpoint,
    mode: Option<AttentionMode>,
    prompt: &[usize],
    args: &SampleArgs,
) -> Result<Vec<usize>> {
    let mut model: Model<S> = ck.model()?;
    if let Some(m) = mode {
        model.set_mode(m);
    }
    model.sample(prompt, args.n_new, args.temperature, args.seed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => run_train(a),
        Command::Probe(a) => run_probe(a),
        Command::Bench(a) => run_bench(a),
        Command::Sample(a) => run_sample(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
