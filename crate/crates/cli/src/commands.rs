//! Argument parsing and dispatch.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::ops::{self, EvalSplit, ProfileMeta, SynthOptions};
use crate::pipeline::SynthKind;
use crate::train::{train_cpt, train_sft, train_vq, TrainOptions};

#[derive(Debug, Parser)]
#[command(name = "eegtok", version, about = "EEG tokenization and language-model alignment toolkit")]
pub struct Cli {
    /// JSON configuration file (merged over the defaults).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Language-model endpoint, or `stub` for the offline client.
    #[arg(long, global = true)]
    pub llm: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset.
    Synth(SynthArgs),
    /// Resample, filter and scale one recording.
    Preprocess(PreprocessArgs),
    /// Dump discrete tokens for a recording or dataset.
    Tokenize(TokenizeArgs),
    /// Build the profiling prompt and query the language model.
    Profile(ProfileArgs),
    /// Train one stage.
    Train(TrainArgs),
    /// Evaluate a fine-tuned checkpoint on labelled data.
    Eval(EvalArgs),
    /// Export refiner attention weights as CSV.
    AttnExport(AttnArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SynthKindArg {
    Labeled,
    Mixture,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value = "labeled")]
    pub kind: SynthKindArg,
    /// Comma-separated channel names.
    #[arg(long, value_delimiter = ',')]
    pub channels: Option<Vec<String>>,
    #[arg(long)]
    pub classes: Option<usize>,
    /// Training recordings per class (or in total for mixtures).
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub test_per_class: Option<usize>,
    #[arg(long)]
    pub seconds: Option<f64>,
    #[arg(long)]
    pub fs: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Container directory or CSV file.
    pub input: PathBuf,
    #[arg(long)]
    pub fs: Option<f64>,
    #[arg(long)]
    pub low: Option<f64>,
    #[arg(long)]
    pub high: Option<f64>,
    #[arg(long)]
    pub notch: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TokenizeArgs {
    /// Container, CSV or dataset directory.
    pub input: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    pub input: PathBuf,
    /// JSON task description: sample_name, dataset_name, task_logic, labels.
    #[arg(long)]
    pub meta: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub task_logic: Option<String>,
    /// Comma-separated label strings that must not appear in the prompt.
    #[arg(long, value_delimiter = ',')]
    pub labels: Option<Vec<String>>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum StageArg {
    Vq,
    Cpt,
    Sft,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(value_enum)]
    pub stage: StageArg,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Previous-stage run or checkpoint.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Continue from `<out>/checkpoints/latest`.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Stop after this many optimizer steps, leaving a resumable checkpoint.
    #[arg(long)]
    pub max_steps: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Test,
    Train,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
}

#[derive(Debug, Args)]
pub struct AttnArgs {
    pub input: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
}

fn out_dir(cli: &Cli) -> CliResult<PathBuf> {
    cli.out
        .clone()
        .ok_or_else(|| CliError::Usage("`--out` is required for this command".into()))
}

/// Config resolution: defaults, file, environment, then flags.
fn resolve(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::resolve(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(l) = &cli.llm {
        cfg.llm.endpoint = Some(l.clone());
    }
    match &cli.command {
        Command::Preprocess(a) => {
            let p = &mut cfg.preprocess;
            p.fs = a.fs.unwrap_or(p.fs);
            p.low = a.low.unwrap_or(p.low);
            p.high = a.high.unwrap_or(p.high);
            p.notch = a.notch.unwrap_or(p.notch);
        }
        Command::Train(a) => {
            let t = match a.stage {
                StageArg::Vq => &mut cfg.train_vq,
                StageArg::Cpt => &mut cfg.train_cpt,
                StageArg::Sft => &mut cfg.train_sft,
            };
            t.epochs = a.epochs.unwrap_or(t.epochs);
            t.batch_size = a.batch_size.unwrap_or(t.batch_size);
            t.lr = a.lr.unwrap_or(t.lr);
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Results are already on disk, so a closed stdout is not an error.
fn print_json(v: &serde_json::Value) {
    use std::io::Write;
    let text = serde_json::to_string_pretty(v).expect("value serializes");
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    let cfg = resolve(cli)?;
    match &cli.command {
        Command::Synth(a) => {
            let d = SynthOptions::default();
            let opts = SynthOptions {
                kind: match a.kind {
                    SynthKindArg::Labeled => SynthKind::Labeled,
                    SynthKindArg::Mixture => SynthKind::Mixture,
                },
                channels: a.channels.clone().unwrap_or(d.channels),
                classes: a.classes.unwrap_or(d.classes),
                per_class: a.per_class.unwrap_or(d.per_class),
                test_per_class: a.test_per_class.unwrap_or(d.test_per_class),
                seconds: a.seconds.unwrap_or(d.seconds),
                fs: a.fs.unwrap_or(d.fs),
                noise: a.noise.unwrap_or(d.noise),
            };
            let ds = ops::cmd_synth(cfg.seed, &opts, &out_dir(cli)?)?;
            print_json(&serde_json::json!({"dataset": ds.root, "items": ds.index.items.len()}));
        }
        Command::Preprocess(a) => ops::cmd_preprocess(&cfg, &a.input, &out_dir(cli)?)?,
        Command::Tokenize(a) => {
            let out = out_dir(cli)?;
            ops::cmd_tokenize(&a.input, &a.checkpoint, &out.join("tokens.txt"))?;
        }
        Command::Profile(a) => {
            let mut meta = match &a.meta {
                Some(p) => ops::read_profile_meta(p)?,
                None => ProfileMeta::default(),
            };
            if a.dataset.is_some() {
                meta.dataset_name = a.dataset.clone();
            }
            if a.task_logic.is_some() {
                meta.task_logic = a.task_logic.clone();
            }
            if let Some(l) = &a.labels {
                meta.labels = l.clone();
            }
            ops::cmd_profile(&cfg, &a.input, &meta, &out_dir(cli)?)?;
        }
        Command::Train(a) => {
            let opts = TrainOptions {
                data: a.data.clone(),
                out: out_dir(cli)?,
                init: a.init.clone(),
                resume: a.resume,
                max_steps: a.max_steps,
            };
            let summary = match a.stage {
                StageArg::Vq => train_vq(&cfg, &opts)?,
                StageArg::Cpt => train_cpt(&cfg, &opts)?,
                StageArg::Sft => train_sft(&cfg, &opts)?,
            };
            print_json(&serde_json::to_value(&summary).expect("summary serializes"));
        }
        Command::Eval(a) => {
            let split = match a.split {
                SplitArg::Test => EvalSplit::Test,
                SplitArg::Train => EvalSplit::Train,
                SplitArg::All => EvalSplit::All,
            };
            let out = out_dir(cli)?;
            let r = ops::cmd_eval(&a.checkpoint, &a.data, split, &ops::default_report(&out))?;
            print_json(&serde_json::to_value(&r.report).expect("report serializes"));
        }
        Command::AttnExport(a) => {
            let out = out_dir(cli)?;
            ops::cmd_attn_export(&a.checkpoint, &a.input, &out.join("attention.csv"))?;
        }
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
