use std::path::PathBuf;

use clap::{ArgAction, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use idu_core::ingest::SchemaName;
use idu_core::model::DEFAULT_WIDTHS;
use idu_core::pipeline::Task;
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "idu", version, about = "Synergistic intrusion and insider-threat detection")]
pub struct Cli {
    /// Flat `key = value` file with flag defaults; flags given on the command line win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Ingest, label, split, encode and resample a raw dataset.
    BuildDataset(BuildDatasetCmd),
    /// Rank encoded features with a random forest and keep the top k.
    Select(SelectCmd),
    /// Train the classifier on an encoded dataset.
    Train(TrainCmd),
    /// Evaluate a checkpoint on an encoded test set.
    Eval(EvalCmd),
    /// Repeat the full pipeline over consecutive seeds and summarize.
    Stability(StabilityCmd),
    /// Run the pipeline on growing stratified fractions of the data.
    Scale(ScaleCmd),
    /// Classify one raw record.
    Predict(PredictCmd),
    /// Re-derive the digests of an output directory.
    Verify(VerifyCmd),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::BuildDataset(_) => "build-dataset",
            Command::Select(_) => "select",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Stability(_) => "stability",
            Command::Scale(_) => "scale",
            Command::Predict(_) => "predict",
            Command::Verify(_) => "verify",
        }
    }
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct DataArgs {
    /// Raw dataset file.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "nslkdd")]
    pub schema: SchemaName,
    #[arg(long, default_value = "class")]
    pub task: Task,
    /// Label/role overrides in `tag => Class` / `Class => Role` form.
    #[arg(long)]
    pub map_file: Option<PathBuf>,
    /// Fraction of malformed rows tolerated before the load fails.
    #[arg(long, default_value_t = 0.01)]
    pub max_reject: f64,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct PrepArgs {
    /// Train share of the split.
    #[arg(long, default_value_t = idu_core::preprocess::DEFAULT_SPLIT_RATIO)]
    pub split: f64,
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    pub stratified: bool,
    /// Minority classes are oversampled to this fraction of the majority.
    #[arg(long, default_value_t = idu_core::preprocess::DEFAULT_FLOOR_FRACTION)]
    pub floor: f64,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct UebaArgs {
    #[arg(long, default_value_t = 200)]
    pub users: usize,
    #[arg(long, default_value_t = 30)]
    pub sessions: usize,
    #[arg(long, default_value_t = 0.1)]
    pub malicious_fraction: f64,
    /// Share of a malicious user's sessions that carry an anomaly.
    #[arg(long, default_value_t = 0.5)]
    pub anomaly_fraction: f64,
    /// Share of benign flows paired with a malicious session.
    #[arg(long, default_value_t = 0.25)]
    pub insider_fraction: f64,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct ForestArgs {
    #[arg(long, default_value_t = 100)]
    pub trees: usize,
    #[arg(long, default_value_t = 12)]
    pub max_depth: usize,
    #[arg(long, default_value_t = 5)]
    pub min_leaf: usize,
    /// Features tried per split; ceil(sqrt(d)) when absent.
    #[arg(long)]
    pub mtry: Option<usize>,
    /// Features kept.
    #[arg(long, default_value_t = idu_core::forest::DEFAULT_TOP_K)]
    pub k: usize,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct ModelArgs {
    /// Block widths, comma separated.
    #[arg(long, value_delimiter = ',', action = ArgAction::Set, default_values_t = DEFAULT_WIDTHS.to_vec())]
    pub widths: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    pub dk: usize,
    #[arg(long, default_value_t = 1)]
    pub group: usize,
    #[arg(long, default_value_t = 0.2)]
    pub dropout: f64,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct FitArgs {
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 256)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,
    /// Global gradient norm limit; 0 disables clipping.
    #[arg(long, default_value_t = 5.0)]
    pub clip_norm: f64,
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct BuildDatasetCmd {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub prep: PrepArgs,
    #[command(flatten)]
    pub ueba: UebaArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct SelectCmd {
    /// Encoded training set from build-dataset.
    #[arg(long)]
    pub train: PathBuf,
    #[command(flatten)]
    pub forest: ForestArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainCmd {
    #[arg(long, required_unless_present = "dry_run")]
    pub train: Option<PathBuf>,
    /// Feature manifest from select.
    #[arg(long, required_unless_present = "dry_run")]
    pub features: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub fit: FitArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, required_unless_present = "dry_run")]
    pub out: Option<PathBuf>,
    /// Build the model, print its parameter count and stop.
    #[arg(long)]
    pub dry_run: bool,
    /// Input width for a dry run without a feature manifest.
    #[arg(long)]
    pub input_dim: Option<usize>,
    /// Class count for a dry run without a training set.
    #[arg(long)]
    pub classes: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalCmd {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long, default_value_t = 1024)]
    pub eval_batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct PipelineArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub prep: PrepArgs,
    #[command(flatten)]
    pub ueba: UebaArgs,
    #[command(flatten)]
    pub forest: ForestArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub fit: FitArgs,
    #[arg(long, default_value_t = 1024)]
    pub eval_batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct StabilityCmd {
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    /// Runs, seeded `seed, seed+1, ...`.
    #[arg(long, default_value_t = 10)]
    pub runs: usize,
}

#[derive(Args, Debug, Serialize)]
pub struct ScaleCmd {
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    #[arg(long, value_delimiter = ',', action = ArgAction::Set, default_values_t = vec![0.10, 0.25, 0.50, 0.75, 1.00])]
    pub fractions: Vec<f64>,
}

#[derive(Args, Debug, Serialize)]
pub struct PredictCmd {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Encoder spec from build-dataset.
    #[arg(long)]
    pub encoder: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long, default_value = "nslkdd")]
    pub schema: SchemaName,
    /// One raw CSV record.
    #[arg(long, conflicts_with = "record_file", required_unless_present = "record_file")]
    pub record: Option<String>,
    /// File whose first non-empty line is the record.
    #[arg(long)]
    pub record_file: Option<PathBuf>,
    /// Also write the prediction here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct VerifyCmd {
    /// Output directory to check.
    pub dir: PathBuf,
}

/// Parses `argv`, splicing in `--config` entries right after the subcommand so
/// that explicit flags override them.
pub fn parse(argv: Vec<String>) -> Result<Cli, ParseFailure> {
    let mut cmd = Cli::command().mut_subcommands(|s| s.args_override_self(true));
    let argv = splice_config(&cmd, argv)?;
    let matches = cmd.try_get_matches_from_mut(argv).map_err(ParseFailure::Clap)?;
    Cli::from_arg_matches(&matches).map_err(ParseFailure::Clap)
}

#[derive(Debug)]
pub enum ParseFailure {
    Clap(clap::Error),
    Config(String),
}

fn config_path(argv: &[String]) -> Option<String> {
    argv.iter().enumerate().find_map(|(i, a)| {
        if a == "--config" {
            argv.get(i + 1).cloned()
        } else {
            a.strip_prefix("--config=").map(str::to_string)
        }
    })
}

fn splice_config(cmd: &clap::Command, argv: Vec<String>) -> Result<Vec<String>, ParseFailure> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let text = std::fs::read_to_string(&path).map_err(|e| ParseFailure::Config(format!("{path}: {e}")))?;
    let Some(pos) = argv
        .iter()
        .position(|a| cmd.get_subcommands().any(|s| s.get_name() == a))
    else {
        return Ok(argv);
    };
    let sub = cmd.find_subcommand(&argv[pos]).expect("matched above");
    let mut injected = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .or_else(|| line.split_once(char::is_whitespace))
            .map(|(k, v)| (k.trim(), v.trim()))
            .unwrap_or((line, "true"));
        let key = key.trim_start_matches("--").replace('_', "-");
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| ParseFailure::Config(format!("{path}:{}: unknown key {key:?} for {}", n + 1, sub.get_name())))?;
        if arg.get_action().takes_values() {
            injected.push(format!("--{key}={value}"));
        } else {
            match value {
                "true" | "yes" | "1" => injected.push(format!("--{key}")),
                "false" | "no" | "0" => {}
                _ => return Err(ParseFailure::Config(format!("{path}:{}: {key} expects true or false", n + 1))),
            }
        }
    }
    let mut out = argv[..=pos].to_vec();
    out.extend(injected);
    out.extend_from_slice(&argv[pos + 1..]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn defaults_materialize() {
        let cli = parse(argv("idu train --dry-run --input-dim 8 --classes 2")).unwrap();
        let Command::Train(t) = cli.command else { panic!() };
        assert_eq!(t.model.widths, DEFAULT_WIDTHS);
        assert_eq!(t.fit.epochs, 30);
        assert_eq!(t.fit.batch, 256);
        assert!(!t.fit.deterministic);
    }

    #[test]
    fn flags_beat_config_beats_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.conf");
        std::fs::write(&cfg, "# comment\nepochs = 7\nlr = 0.01\nwidths = 8,6\ndeterministic = true\n").unwrap();
        let cli = parse(argv(&format!(
            "idu train --dry-run --input-dim 8 --classes 2 --config {} --epochs 3",
            cfg.display()
        )))
        .unwrap();
        let Command::Train(t) = cli.command else { panic!() };
        assert_eq!(t.fit.epochs, 3);
        assert_eq!(t.fit.lr, 0.01);
        assert_eq!(t.model.widths, [8, 6]);
        assert!(t.fit.deterministic);
        assert_eq!(t.fit.batch, 256);
    }

    #[test]
    fn unknown_config_key_is_a_config_failure() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("bad.conf");
        std::fs::write(&cfg, "fractions = 0.5\n").unwrap();
        let r = parse(argv(&format!("idu train --dry-run --config {}", cfg.display())));
        assert!(matches!(r, Err(ParseFailure::Config(_))));
    }

    #[test]
    fn schema_and_task_parse() {
        let cli = parse(argv("idu stability --input x.txt --schema kdd99 --task role --out o --runs 2")).unwrap();
        let Command::Stability(s) = cli.command else { panic!() };
        assert_eq!(s.pipeline.data.schema, SchemaName::Kdd99);
        assert_eq!(s.pipeline.data.task, Task::Role);
        assert!(parse(argv("idu stability --input x --schema nope --out o")).is_err());
    }
}
