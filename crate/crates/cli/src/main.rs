//! `ade`: train, evaluate and inspect attentive dual encoders.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ade::corpus::load_jsonl;
use ade::evaluation::{evaluate, ModelScorer, Protocol};
use ade::model::{load_model, meta_path};
use ade::visualize::HeatmapDocument;
use ade::{train, Dataset, Error, TrainConfig};
use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_INTERNAL: u8 = 3;

/// Environment variable holding the log filter, e.g. `ADE_LOG=debug`.
const LOG_ENV: &str = "ADE_LOG";

#[derive(Parser)]
#[command(name = "ade", version, about = "Attentive dual encoder for response retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a key = value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Recall@k of a checkpoint on a JSONL dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = ProtocolArg::Distractor19)]
        protocol: ProtocolArg,
        /// Comma-separated cutoffs.
        #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 2, 5])]
        k: Vec<usize>,
        /// Add the log candidate frequency to every score (fixed list only).
        #[arg(long)]
        prior: bool,
        /// Seed for distractor sampling.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Metrics JSON destination; defaults to `<checkpoint>.metrics.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export an attention heatmap for one context/response pair.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        context: String,
        #[arg(long)]
        response: String,
        #[arg(long, value_enum, default_value_t = Format::Html)]
        format: Format,
        /// Written to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    Fixed,
    Distractor19,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Html,
    Ansi,
}

/// A mistake in how the tool was invoked, as opposed to bad data.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(message: impl Into<String>) -> anyhow::Error {
    Usage(message.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return EXIT_USAGE;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::InvalidArgument(_)) => EXIT_USAGE,
        Some(Error::Shape { .. } | Error::NonFinite(_) | Error::UnknownParameter(_)) => EXIT_INTERNAL,
        Some(_) => EXIT_DATA,
        // anything else is file output failing
        None if err.downcast_ref::<std::io::Error>().is_some() => EXIT_DATA,
        None => EXIT_INTERNAL,
    }
}

/// The error and its causes, skipping causes the message already quotes.
fn describe(err: &anyhow::Error) -> String {
    let mut text = err.to_string();
    for cause in err.chain().skip(1) {
        let c = cause.to_string();
        if !text.contains(&c) {
            text = format!("{text}: {c}");
        }
    }
    text
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_train(config: &Path) -> Result<()> {
    let cfg = TrainConfig::from_file(config)?;
    let data_path = cfg.data.clone().ok_or_else(|| usage(format!("{}: no 'data' path set", config.display())))?;
    let checkpoint = cfg
        .checkpoint
        .clone()
        .ok_or_else(|| usage(format!("{}: no 'checkpoint' path set", config.display())))?;
    let dialogues = load_jsonl(&data_path)?;
    log::info!("loaded {} dialogues from {}", dialogues.len(), data_path.display());
    let data = Dataset::from_dialogues(dialogues, cfg.min_count, cfg.max_len)?;
    log::info!("vocabulary of {} tokens; training {} for {} steps", data.vocab.len(), cfg.variant, cfg.steps);
    let outcome = train(&cfg, &data)?;
    let report_path = cfg.report.clone().unwrap_or_else(|| with_suffix(&checkpoint, ".report.json"));
    write_file(&report_path, &serde_json::to_string_pretty(&outcome.report)?)?;
    if let Some(last) = outcome.report.history.last() {
        println!("final loss {:.4} (retrieval {:.4}, regulariser {:.4})", last.total, last.l_ret, last.l_reg);
    }
    println!("checkpoint {}", checkpoint.display());
    println!("metadata {}", meta_path(&checkpoint).display());
    println!("report {}", report_path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    protocol: ProtocolArg,
    ks: &[usize],
    prior: bool,
    seed: u64,
    out: Option<&Path>,
) -> Result<()> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(usage("--k needs positive cutoffs"));
    }
    let loaded = load_model(checkpoint)?;
    let dialogues = load_jsonl(data)?;
    let protocol = match protocol {
        ProtocolArg::Distractor19 => Protocol::distractor19(seed),
        ProtocolArg::Fixed => Protocol::FixedList(
            loaded
                .candidates
                .clone()
                .ok_or_else(|| usage(format!("{} stores no candidate list; use --protocol distractor19", checkpoint.display())))?,
        ),
    };
    let scorer = ModelScorer::new(&loaded.model, &loaded.vocab);
    let metrics = evaluate(&dialogues, &scorer, &protocol, ks, prior)?;
    let json = metrics.to_json();
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| with_suffix(checkpoint, ".metrics.json"));
    write_file(&out, &json)?;
    eprint!("{}", metrics.table());
    println!("{json}");
    Ok(())
}

fn cmd_visualize(checkpoint: &Path, context: &str, response: &str, format: Format, out: Option<&Path>) -> Result<()> {
    if context.trim().is_empty() || response.trim().is_empty() {
        return Err(usage("--context and --response must be non-empty"));
    }
    let loaded = load_model(checkpoint)?;
    let doc = HeatmapDocument::build(&loaded.model, &loaded.vocab, context, response)?;
    let rendered = match format {
        Format::Html => doc.to_html(),
        Format::Ansi => doc.to_ansi(),
    };
    match out {
        Some(path) => write_file(path, &rendered)?,
        None => print!("{rendered}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config } => cmd_train(&config),
        Command::Eval { checkpoint, data, protocol, k, prior, seed, out } => {
            cmd_eval(&checkpoint, &data, protocol, &k, prior, seed, out.as_deref())
        }
        Command::Visualize { checkpoint, context, response, format, out } => {
            cmd_visualize(&checkpoint, &context, &response, format, out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or(LOG_ENV, "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
