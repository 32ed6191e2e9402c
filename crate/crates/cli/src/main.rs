use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

mod commands;
mod config;

/// Mixed-membership blockmodels with rule-based structured priors.
#[derive(Debug, Parser)]
#[command(name = "smmsb", version)]
pub struct Cli {
    /// Worker threads (0 = one per core)
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,

    /// More log output (-v info, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    /// key=value file of flags; flags on the command line win
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Batch EM
    Train(TrainArgs),
    /// Mini-batch stochastic EM
    TrainStochastic(StochasticArgs),
    /// Learn rule weights
    LearnWeights(LearnArgs),
    /// Train/test log-likelihood and AUC of a checkpoint
    Evaluate(EvaluateArgs),
    /// Sample a network from a checkpoint
    Generate(GenerateArgs),
    /// Run the parameter server
    Serve(ServeArgs),
    /// Run a parameter-server worker
    Work(WorkArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Edges TSV: src, dst, relation, value
    #[arg(long)]
    pub edges: PathBuf,
    /// Features TSV: node, feature, value
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Relation modelled by the blockmodel
    #[arg(long, default_value = "link")]
    pub target: String,
    /// Read every edge line in both directions
    #[arg(long)]
    pub undirected: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SplitArgs {
    /// Split JSON to use instead of drawing one
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Fraction of links and of non-links held out (0 = train on every pair)
    #[arg(long, default_value_t = 0.1)]
    pub test_fraction: f64,
    /// Write the split used to this JSON file
    #[arg(long)]
    pub split_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Rule file; without it the model is a plain blockmodel
    #[arg(long)]
    pub rules: Option<PathBuf>,
    /// Number of communities
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// Dirichlet concentration of the memberships
    #[arg(long, default_value_t = 1.1)]
    pub alpha: f64,
    /// beta1 + beta2; their ratio follows the training link rate
    #[arg(long, default_value_t = 2.0)]
    pub beta_sum: f64,
    /// Seed for initialization and sampling
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Relative change of the bound that stops EM
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    /// EM iteration limit
    #[arg(long, default_value_t = 500)]
    pub max_iters: usize,
    /// Starting weight of learnable rules
    #[arg(long, default_value_t = 1.0)]
    pub initial_weight: f64,
    /// Starting value of latent atoms
    #[arg(long, default_value_t = 0.5)]
    pub latent_init: f64,
    /// Largest number of potentials a single rule may ground to
    #[arg(long, default_value_t = smmsb::grounding::DEFAULT_GROUNDING_CAP)]
    pub grounding_cap: usize,
    /// ADMM penalty parameter
    #[arg(long, default_value_t = 1.0)]
    pub admm_rho: f64,
    /// ADMM absolute tolerance
    #[arg(long, default_value_t = 1e-5)]
    pub admm_eps_abs: f64,
    /// ADMM relative tolerance
    #[arg(long, default_value_t = 1e-4)]
    pub admm_eps_rel: f64,
    /// ADMM iteration limit per solve
    #[arg(long, default_value_t = 1000)]
    pub admm_max_iters: usize,
}

#[derive(Debug, Clone, Args)]
pub struct StochasticFlags {
    /// Fraction of nodes sampled per mini-batch
    #[arg(long, default_value_t = 0.1)]
    pub node_fraction: f64,
    /// Number of mini-batch updates
    #[arg(long, default_value_t = 48_000)]
    pub iterations: u64,
    /// Step-size delay: rho_t = (tau0 + t)^-kappa
    #[arg(long, default_value_t = 1024.0)]
    pub tau0: f64,
    /// Step-size forgetting rate, in (0.5, 1]
    #[arg(long, default_value_t = 0.9)]
    pub kappa: f64,
    /// Use this constant step instead of the decaying schedule
    #[arg(long)]
    pub constant_step: Option<f64>,
    /// Trace interval in updates (0 = final update only)
    #[arg(long, default_value_t = 100)]
    pub trace_every: u64,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Checkpoint written at the end
    #[arg(long, default_value = "model.ckpt")]
    pub out: PathBuf,
    /// Per-iteration trace TSV
    #[arg(long, default_value = "trace.tsv")]
    pub trace: PathBuf,
    /// Write the ground potentials to this file
    #[arg(long)]
    pub grounding_dump: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct StochasticArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub stochastic: StochasticFlags,
    /// Checkpoint written at the end
    #[arg(long, default_value = "model.ckpt")]
    pub out: PathBuf,
    /// Trace TSV
    #[arg(long, default_value = "trace.tsv")]
    pub trace: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct LearnArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Gradient step on the weights
    #[arg(long, default_value_t = 0.1)]
    pub learn_rate: f64,
    /// Outer weight-learning steps
    #[arg(long, default_value_t = 100)]
    pub weight_iterations: usize,
    /// Lower bound on learned weights
    #[arg(long, default_value_t = 0.0)]
    pub weight_floor: f64,
    /// Upper bound on learned weights
    #[arg(long, default_value_t = 100.0)]
    pub weight_cap: f64,
    /// Rule file with the learned weights
    #[arg(long, default_value = "learned.psl")]
    pub weights_out: PathBuf,
    /// Checkpoint written at the end
    #[arg(long, default_value = "model.ckpt")]
    pub out: PathBuf,
    /// Per-step trace TSV
    #[arg(long, default_value = "weights.tsv")]
    pub trace: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ReportFormat {
    Tsv,
    Kv,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    /// Checkpoint to evaluate
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    /// Seed for drawing a split when none is given
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report layout
    #[arg(long, value_enum, default_value_t = ReportFormat::Tsv)]
    pub format: ReportFormat,
    /// Print the column names before the TSV line
    #[arg(long)]
    pub header: bool,
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    /// Checkpoint to sample from
    #[arg(long)]
    pub model: PathBuf,
    /// Sampling seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Relation name of generated edges
    #[arg(long, default_value = "link")]
    pub relation: String,
    /// Edges TSV to write (standard output if absent)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub stochastic: StochasticFlags,
    /// Address to listen on
    #[arg(long, default_value = "127.0.0.1:7070")]
    pub bind: String,
    /// Workers that must say hello before snapshots are served
    #[arg(long, default_value_t = 1)]
    pub workers_expected: usize,
    /// Oldest snapshot, in updates, a push may be based on
    #[arg(long, default_value_t = 16)]
    pub max_staleness: u64,
    /// Checkpoint interval in applied updates (0 = at the end only)
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: u64,
    /// Checkpoint path
    #[arg(long, default_value = "model.ckpt")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct WorkArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub stochastic: StochasticFlags,
    /// Server address
    #[arg(long, default_value = "127.0.0.1:7070")]
    pub connect: String,
    /// Worker id; also selects the batch stream
    #[arg(long, default_value_t = 0)]
    pub worker_id: u64,
    /// Connection attempts before giving up
    #[arg(long, default_value_t = 5)]
    pub connect_attempts: u32,
    /// First reconnect delay in milliseconds, doubled per failure
    #[arg(long, default_value_t = 100)]
    pub backoff_ms: u64,
}

pub fn command() -> clap::Command {
    let mut cmd = Cli::command().args_override_self(true);
    let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
    for name in names {
        cmd = cmd.mut_subcommand(name, |s| s.args_override_self(true));
    }
    cmd
}

fn main() -> ExitCode {
    let cmd = command();
    let args = match config::expand(std::env::args_os().collect(), &cmd) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(commands::EXIT_CONFIG);
        }
    };
    let cli = match cmd.try_get_matches_from(args).and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { commands::EXIT_CONFIG } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(commands::EXIT_RUNTIME);
        }
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
