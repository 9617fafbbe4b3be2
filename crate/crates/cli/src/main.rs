//! `ctas`: synthesize, train, evaluate and sample continuous-time action
//! sequence models from the command line.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ctas_core::model::Variant;

use crate::config::RunConfig;
use crate::error::{CliResult, Code, Failure, WithCode};

#[derive(Parser, Debug)]
#[command(name = "ctas", version, about = "Self-attention point process models for continuous-time action sequences")]
struct Cli {
    /// Cap on worker threads (defaults to all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Log filter: error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus (JSONL).
    Synth(SynthArgs),
    /// Split a corpus per goal, train, and write checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write a JSON report.
    Eval(EvalArgs),
    /// Generate sequences for a goal from a first action.
    Generate(GenerateArgs),
    /// Compare analytic and finite-difference gradients of the training loss.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate over a grid of d_model, num_clusters and gamma.
    Sweep(SweepArgs),
    /// Delete a random fraction of the actions of every sequence.
    AblateDelete(AblateArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Generator spec (JSON); omitted means the built-in two-goal demo.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Output corpus path.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the generator seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the generator sequence count.
    #[arg(long)]
    pub num_sequences: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum VariantArg {
    Base,
    PlusPlus,
}

/// Flags that override fields of the run config.
#[derive(Args, Debug, Default)]
pub struct ModelOverrides {
    /// Overrides train.seed (and the split seed when unset).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides train.epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Overrides train.lr.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Overrides train.batch_size.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Overrides train.gamma.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Overrides model.variant.
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    /// Overrides model.encoder.d_model.
    #[arg(long)]
    pub d_model: Option<usize>,
    /// Overrides model.num_clusters.
    #[arg(long)]
    pub num_clusters: Option<usize>,
    /// Overrides split.train_fraction.
    #[arg(long)]
    pub train_fraction: Option<f64>,
}

impl ModelOverrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.seed {
            cfg.train.seed = v;
        }
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = self.lr {
            cfg.train.lr = v;
        }
        if let Some(v) = self.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(v) = self.gamma {
            cfg.train.gamma = v;
        }
        if let Some(v) = self.variant {
            cfg.model.variant = match v {
                VariantArg::Base => Variant::Base,
                VariantArg::PlusPlus => Variant::PlusPlus,
            };
        }
        if let Some(v) = self.d_model {
            cfg.model.encoder.d_model = v;
        }
        if let Some(v) = self.num_clusters {
            cfg.model.num_clusters = v;
        }
        if let Some(v) = self.train_fraction {
            cfg.split.train_fraction = v;
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Corpus (JSONL); falls back to "data" in the config.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run config (JSON); omitted means all defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from final.json in --out instead of starting over.
    #[arg(long)]
    pub resume: bool,
    #[command(flatten)]
    pub overrides: ModelOverrides,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint directory or file.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Test corpus; defaults to test.jsonl inside the checkpoint directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Report output path (JSON).
    #[arg(long)]
    pub report: PathBuf,
    /// Comma-separated prefix fractions for goal accuracy.
    #[arg(long, value_delimiter = ',')]
    pub prefixes: Option<Vec<f64>>,
    /// Also generate from every test sequence's goal and first action.
    #[arg(long)]
    pub generate: bool,
    /// Greedy rather than sampled generation.
    #[arg(long)]
    pub greedy: bool,
    /// Generation seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Generation length bound; defaults to the checkpoint's.
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Checkpoint directory or file.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Goal name.
    #[arg(long)]
    pub goal: String,
    /// Mark name of the first action.
    #[arg(long)]
    pub first_mark: String,
    /// Time of the first action.
    #[arg(long, default_value_t = 0.0)]
    pub first_t: f64,
    /// Most probable mark and median gap at every step.
    #[arg(long)]
    pub greedy: bool,
    /// Seed of the first sequence; sequence i uses seed + i.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of sequences to generate.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Length bound; defaults to the checkpoint's.
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Output corpus path; reasons go to <out stem>.reasons.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Run config (JSON); omitted means all defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[command(flatten)]
    pub overrides: ModelOverrides,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// Run config (JSON) giving the base point.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Grid (JSON) with optional d_model, num_clusters and gamma lists.
    #[arg(long)]
    pub grid: PathBuf,
    /// Corpus; falls back to "data" in the config.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: ModelOverrides,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Input corpus.
    #[arg(long)]
    pub data: PathBuf,
    /// Fraction of actions removed from each sequence, in [0, 1).
    #[arg(long)]
    pub fraction: f64,
    /// Deletion seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output corpus path.
    #[arg(long)]
    pub out: PathBuf,
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Failure::msg(Code::Usage, "--workers must be positive"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().code(Code::Config)?;
    }
    match &cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Generate(a) => commands::generate(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::AblateDelete(a) => commands::ablate_delete(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let f = Failure::msg(Code::Usage, text.trim_start_matches("error: "));
            eprintln!("{}", f.line());
            return ExitCode::from(Code::Usage.exit_status() as u8);
        }
    };
    env_logger::Builder::new().parse_filters(&cli.log_level).format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.line());
            ExitCode::from(f.code.exit_status() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn overrides_land_in_config() {
        let cli = Cli::try_parse_from([
            "ctas", "train", "--out", "o", "--seed", "5", "--variant", "plus-plus", "--d-model", "8", "--epochs", "2",
        ])
        .unwrap();
        let Command::Train(args) = cli.command else { panic!("wrong subcommand") };
        let mut cfg = RunConfig::default();
        args.overrides.apply(&mut cfg);
        assert_eq!(cfg.train.seed, 5);
        assert_eq!(cfg.split_seed(), 5);
        assert_eq!(cfg.model.variant, Variant::PlusPlus);
        assert_eq!(cfg.model.encoder.d_model, 8);
        assert_eq!(cfg.train.epochs, 2);
    }

    #[test]
    fn prefixes_parse_as_list() {
        let cli = Cli::try_parse_from(["ctas", "eval", "--ckpt", "c", "--report", "r", "--prefixes", "0.3,0.6"]).unwrap();
        let Command::Eval(args) = cli.command else { panic!("wrong subcommand") };
        assert_eq!(args.prefixes, Some(vec![0.3, 0.6]));
    }
}
