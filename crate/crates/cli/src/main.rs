//! `potq` command-line driver.
//!
//! Exit status: 0 on success, 2 for usage errors, 3 for data errors and
//! 4 when a numeric audit refuses to run.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use potq::data::{prepare_dataset, CharVocab, SplitRatios, TokenFile};
use potq::eval::{
    calibration_batches, evaluate, evaluate_quantized, format_table, sweep, to_jsonl, EvalArgs,
    EvalReport, SweepRow,
};
use potq::model::{
    generate, load_checkpoint, save_checkpoint, GPTWeights, QuantizedModel, SamplingConfig,
};
use potq::qspec::{parse_scheme, ExecMode, QuantSpec};
use potq::ErrorCategory;

#[derive(Debug, Parser)]
#[command(
    name = "potq",
    version,
    about = "Power-of-two post-training quantization for GPT models"
)]
struct Cli {
    /// Worker threads for parallel evaluation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Tokenize a text file at character level and write train/val/test splits.
    PrepareData {
        #[arg(long)]
        input: PathBuf,
        /// Train, val and test fractions.
        #[arg(long, default_value = "0.8,0.1,0.1")]
        ratios: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Quantize a checkpoint and write its dequantized weights.
    Quantize {
        #[command(flatten)]
        model: ModelArgs,
        /// Output checkpoint.
        #[arg(long)]
        out: PathBuf,
        /// Write per-site summaries as JSON lines.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Evaluate cross entropy and perplexity on a token split.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        eval: EvalOpts,
    },
    /// Evaluate several quantization specs with paired seeds.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Repeat for each spec to compare.
        #[arg(long = "quant", required = true)]
        quants: Vec<String>,
        #[command(flatten)]
        calib: CalibArgs,
        #[command(flatten)]
        eval: EvalOpts,
    },
    /// Sample text from a (possibly quantized) model.
    Generate {
        #[command(flatten)]
        model: ModelArgs,
        /// Character vocabulary written by prepare-data.
        #[arg(long, required_unless_present = "prompt_ids")]
        vocab: Option<PathBuf>,
        #[arg(
            long,
            required_unless_present = "prompt_ids",
            conflicts_with = "prompt_ids"
        )]
        prompt: Option<String>,
        /// Comma-separated token ids, for models without a character vocabulary.
        #[arg(long)]
        prompt_ids: Option<String>,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f32,
        #[arg(long, default_value_t = 40)]
        top_k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the sample here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parameter census plus operation and memory accounting.
    Report {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        eval: ReportOpts,
    },
}

#[derive(Debug, Args)]
struct CalibArgs {
    /// Token split for calibration (defaults to the evaluated split).
    #[arg(long)]
    calib_split: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    calib_batches: usize,
    #[arg(long, default_value_t = 0)]
    calib_seed: u64,
}

#[derive(Debug, Args)]
struct ModelArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Quantization spec, e.g. `pot:e0..4`, `sym:8`, `*.attn_*=pot:e0..6;lm_head=float`.
    #[arg(long, default_value = "float")]
    quant: String,
    /// Activation scheme; overrides any `@act=` in the spec.
    #[arg(long)]
    act: Option<String>,
    /// `simulated` or `integer`; overrides any `@mode=` in the spec.
    #[arg(long)]
    mode: Option<ExecMode>,
    #[command(flatten)]
    calib: CalibArgs,
}

#[derive(Debug, Args)]
struct EvalOpts {
    #[arg(long)]
    split: PathBuf,
    #[arg(long, default_value_t = 100)]
    n_batches: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Sequence length (defaults to the model's block size).
    #[arg(long)]
    block: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write machine-readable reports as JSON lines.
    #[arg(long)]
    records: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportOpts {
    #[arg(long)]
    split: PathBuf,
    #[arg(long, default_value_t = 4)]
    n_batches: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long)]
    block: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    records: Option<PathBuf>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<potq::Error>()) {
        Some(e) => match e.category() {
            ErrorCategory::Usage => 2,
            ErrorCategory::Data => 3,
            ErrorCategory::NumericAudit => 4,
        },
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(potq::Error::InvalidConfig("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    match cli.command {
        Command::PrepareData { input, ratios, out } => cmd_prepare(&input, &ratios, &out),
        Command::Quantize {
            model,
            out,
            summary,
        } => cmd_quantize(&model, &out, summary.as_deref()),
        Command::Eval { model, eval } => cmd_eval(&model, &eval),
        Command::Sweep {
            checkpoint,
            quants,
            calib,
            eval,
        } => cmd_sweep(&checkpoint, &quants, &calib, &eval),
        Command::Generate {
            model,
            vocab,
            prompt,
            prompt_ids,
            steps,
            temperature,
            top_k,
            seed,
            out,
        } => {
            let sampling = SamplingConfig {
                steps,
                temperature,
                top_k,
                seed,
            };
            cmd_generate(
                &model,
                vocab.as_deref(),
                prompt.as_deref(),
                prompt_ids.as_deref(),
                &sampling,
                out.as_deref(),
            )
        }
        Command::Report { model, eval } => cmd_report(&model, &eval),
    }
}

fn parse_ratios(s: &str) -> Result<SplitRatios> {
    let parts = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| potq::Error::InvalidConfig(format!("--ratios {s:?}: {e}")))?;
    let [train, val, test] = parts[..] else {
        return Err(
            potq::Error::InvalidConfig(format!("--ratios needs three values, got {s:?}")).into(),
        );
    };
    Ok(SplitRatios::new(train, val, test)?)
}

fn cmd_prepare(input: &Path, ratios: &str, out: &Path) -> Result<()> {
    let prepared = prepare_dataset(input, &parse_ratios(ratios)?, out)?;
    println!(
        "vocab size {} -> {}",
        prepared.vocab.len(),
        prepared.vocab_path.display()
    );
    for (path, n) in [&prepared.train, &prepared.val, &prepared.test]
        .iter()
        .zip(prepared.counts)
    {
        println!("{n:>10} tokens -> {}", path.display());
    }
    Ok(())
}

fn build_spec(args: &ModelArgs) -> Result<QuantSpec> {
    let mut spec: QuantSpec = args.quant.parse()?;
    if let Some(act) = &args.act {
        spec.activations = parse_scheme(act)?;
    }
    if let Some(mode) = args.mode {
        spec.mode = mode;
    }
    spec.validate()?;
    Ok(spec)
}

fn calibration(
    calib: &CalibArgs,
    fallback: Option<&Path>,
    block: usize,
) -> Result<Vec<Vec<usize>>> {
    let path = calib.calib_split.as_deref().or(fallback).ok_or_else(|| {
        potq::Error::InvalidConfig(
            "quantized models need calibration data: pass --calib-split".into(),
        )
    })?;
    let split = TokenFile::load(path)?;
    let block = block.min(split.len().saturating_sub(2)).max(1);
    Ok(calibration_batches(
        &split,
        calib.calib_batches,
        block,
        calib.calib_seed,
    )?)
}

/// The float model, or a calibrated and converted quantized one.
enum Loaded {
    Float(Box<GPTWeights>),
    Quantized(Box<QuantizedModel>),
}

impl Loaded {
    fn as_model(&self) -> &dyn potq::model::LanguageModel {
        match self {
            Loaded::Float(w) => w.as_ref(),
            Loaded::Quantized(q) => q.as_ref(),
        }
    }
}

fn load_model(args: &ModelArgs, fallback_split: Option<&Path>) -> Result<Loaded> {
    let weights = load_checkpoint(&args.checkpoint)?;
    let spec = build_spec(args)?;
    if spec == QuantSpec::float() {
        return Ok(Loaded::Float(Box::new(weights)));
    }
    let batches = calibration(&args.calib, fallback_split, weights.config.block_size)?;
    let q = QuantizedModel::build(&weights, &spec, &batches)?;
    Ok(Loaded::Quantized(Box::new(q)))
}

fn write_records(path: Option<&Path>, reports: &[&EvalReport]) -> Result<()> {
    if let Some(path) = path {
        fs::write(path, to_jsonl(reports.iter().copied())?)
            .map_err(|e| potq::Error::io(path, e))?;
    }
    Ok(())
}

fn cmd_quantize(args: &ModelArgs, out: &Path, summary: Option<&Path>) -> Result<()> {
    let q = match load_model(args, None)? {
        Loaded::Float(w) => {
            save_checkpoint(&w, out)?;
            println!("float spec: checkpoint copied to {}", out.display());
            return Ok(());
        }
        Loaded::Quantized(q) => q,
    };
    save_checkpoint(&q.dequantized_weights()?, out)?;
    let sites = q.site_summaries();
    println!(
        "{:<24} {:<16} {:>12} {:>6} {:>12} {:>12} {:>8}",
        "site", "scheme", "scale", "bits", "max_err", "rmse", "zeros"
    );
    for s in &sites {
        println!(
            "{:<24} {:<16} {:>12.4e} {:>6} {:>12.4e} {:>12.4e} {:>8.4}",
            s.name,
            s.scheme.to_string(),
            s.scale,
            s.storage_bits,
            s.max_abs_error,
            s.rmse,
            s.zero_fraction
        );
    }
    if let Some(path) = summary {
        let mut text = String::new();
        for s in &sites {
            text.push_str(&serde_json::to_string(s)?);
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| potq::Error::io(path, e))?;
    }
    println!("dequantized checkpoint -> {}", out.display());
    Ok(())
}

fn eval_args(
    model_block: usize,
    n_batches: usize,
    batch: usize,
    block: Option<usize>,
    seed: u64,
) -> EvalArgs {
    EvalArgs {
        n_batches,
        batch_size: batch,
        block_size: block.unwrap_or(model_block),
        seed,
    }
}

fn run_eval(loaded: &Loaded, split: &TokenFile, args: &EvalArgs) -> Result<EvalReport> {
    Ok(match loaded {
        Loaded::Float(w) => evaluate(w.as_ref(), split, args)?,
        Loaded::Quantized(q) => evaluate_quantized(q, split, args)?,
    })
}

fn print_report(r: &EvalReport) {
    println!("spec        {}", r.spec);
    println!(
        "ce          {:.6} nats (std {:.6} over {} batches of {}x{}, seed {})",
        r.ce_mean, r.ce_std, r.n_batches, r.batch_size, r.block_size, r.seed
    );
    println!("perplexity  {:.4}", r.perplexity);
    print_ops(r);
}

fn print_ops(r: &EvalReport) {
    let o = &r.ops;
    println!(
        "linear ops  {} multiplies, {} shifts, {} adds (float: {} MACs)",
        o.linear.multiplies, o.linear.shifts, o.linear.adds, o.dense_linear_macs
    );
    println!(
        "cycles      {} vs float {} -> reduction {:.3}",
        o.cycle_cost, o.cycle_cost_float, o.cycle_reduction
    );
    println!(
        "weights     {} -> {} bytes, memory factor {:.3} (zero folded: {:.3})",
        o.float_weight_bytes, o.quantized_weight_bytes, o.memory_factor, o.memory_factor_folded
    );
}

fn cmd_eval(args: &ModelArgs, opts: &EvalOpts) -> Result<()> {
    let loaded = load_model(args, Some(&opts.split))?;
    let split = TokenFile::load(&opts.split)?;
    let ea = eval_args(
        loaded.as_model().config().block_size,
        opts.n_batches,
        opts.batch,
        opts.block,
        opts.seed,
    );
    let report = run_eval(&loaded, &split, &ea)?;
    print_report(&report);
    write_records(opts.records.as_deref(), &[&report])
}

fn cmd_sweep(
    checkpoint: &Path,
    quants: &[String],
    calib: &CalibArgs,
    opts: &EvalOpts,
) -> Result<()> {
    let weights = load_checkpoint(checkpoint)?;
    let specs = quants
        .iter()
        .map(|q| q.parse::<QuantSpec>())
        .collect::<potq::Result<Vec<_>>>()?;
    let split = TokenFile::load(&opts.split)?;
    let batches = calibration(calib, Some(&opts.split), weights.config.block_size)?;
    let ea = eval_args(
        weights.config.block_size,
        opts.n_batches,
        opts.batch,
        opts.block,
        opts.seed,
    );
    let rows: Vec<SweepRow> = sweep(&weights, &specs, &batches, &split, &ea)?;
    print!("{}", format_table(&rows));
    let ok: Vec<&EvalReport> = rows
        .iter()
        .filter_map(|r| r.outcome.as_ref().ok())
        .collect();
    write_records(opts.records.as_deref(), &ok)?;
    if ok.len() < rows.len() {
        bail!("{} of {} specs failed", rows.len() - ok.len(), rows.len());
    }
    Ok(())
}

fn parse_ids(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| {
            t.trim().parse::<usize>().map_err(|e| {
                anyhow!(potq::Error::InvalidConfig(format!(
                    "--prompt-ids {t:?}: {e}"
                )))
            })
        })
        .collect()
}

fn cmd_generate(
    args: &ModelArgs,
    vocab: Option<&Path>,
    prompt: Option<&str>,
    prompt_ids: Option<&str>,
    sampling: &SamplingConfig,
    out: Option<&Path>,
) -> Result<()> {
    let loaded = load_model(args, None)?;
    let text = match (prompt_ids, vocab, prompt) {
        (Some(ids), _, _) => {
            let tokens = generate(loaded.as_model(), &parse_ids(ids)?, sampling)?;
            let mut s = tokens
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(",");
            s.push('\n');
            s
        }
        (None, Some(vocab), Some(prompt)) => {
            let vocab = CharVocab::load(vocab)?;
            let tokens = generate(loaded.as_model(), &vocab.encode(prompt)?, sampling)?;
            vocab.decode(&tokens)?
        }
        _ => {
            return Err(potq::Error::InvalidConfig(
                "generate needs --vocab with --prompt, or --prompt-ids".into(),
            )
            .into())
        }
    };
    match out {
        Some(path) => fs::write(path, &text)
            .map_err(|e| potq::Error::io(path, e))
            .context("writing sample")?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_report(args: &ModelArgs, opts: &ReportOpts) -> Result<()> {
    let loaded = load_model(args, Some(&opts.split))?;
    let cfg = *loaded.as_model().config();
    let c = cfg.census();
    println!(
        "config      vocab {} block {} layers {} heads {} d {}",
        cfg.vocab_size, cfg.block_size, cfg.n_layer, cfg.n_head, cfg.n_embd
    );
    println!(
        "census      tok_emb {} pos_emb {} attn/layer {} mlp/layer {} ln/layer {} head {}",
        c.token_embedding,
        c.position_embedding,
        c.attention_per_layer,
        c.mlp_per_layer,
        c.layernorm_per_layer,
        c.output_linear
    );
    let split = TokenFile::load(&opts.split)?;
    let ea = eval_args(
        cfg.block_size,
        opts.n_batches,
        opts.batch,
        opts.block,
        opts.seed,
    );
    let report = run_eval(&loaded, &split, &ea)?;
    println!("spec        {}", report.spec);
    print_ops(&report);
    write_records(opts.records.as_deref(), &[&report])
}
