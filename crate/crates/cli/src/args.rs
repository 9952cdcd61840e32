use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use protolab::experiment::ExperimentConfig;
use protolab::{Activation, LossSet, Mutation, Permutation, TemperatureSchedule};

#[derive(Debug, Parser)]
#[command(
    name = "protolab",
    version,
    about = "Train and evaluate teacher/student signalling agents"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the agents of an experiment or sweep.
    Train(TrainArgs),
    /// Evaluate saved checkpoints.
    Eval(EvalArgs),
    /// Aggregate sweep results into plot data and a summary table.
    Figures(FiguresArgs),
    /// Protocol memorisation capacity of a network.
    Capacity(CapacityArgs),
    /// Listening, signalling and protocol-establishment probes for one agent.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML or JSON experiment config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Output directory [default: config `out`, else runs/<name>].
    #[arg(long)]
    pub out: Option<PathBuf>,

    /// Agents trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,

    /// Skip the post-training evaluation summary.
    #[arg(long)]
    pub no_eval: bool,

    #[command(flatten)]
    pub overrides: ConfigOverrides,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Ac,
    SicTmPd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MutationArg {
    Off,
    Kind,
    Unkind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ActivationArg {
    Relu,
    Linear,
}

#[derive(Debug, Default, Args)]
pub struct ConfigOverrides {
    #[arg(long)]
    pub name: Option<String>,
    /// Number of observation classes.
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub vocab: Option<usize>,
    #[arg(long, value_enum)]
    pub loss_set: Option<LossArg>,
    #[arg(long, value_enum)]
    pub mutation: Option<MutationArg>,
    /// Mutation probability (kind mutation unless --mutation says otherwise).
    #[arg(long)]
    pub mutation_p: Option<f64>,
    /// Permutation subset size.
    #[arg(long)]
    pub permutation_k: Option<usize>,
    #[arg(long)]
    pub n_agents: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Fixed channel temperature.
    #[arg(long, conflicts_with = "anneal")]
    pub temperature: Option<f64>,
    /// Exponential anneal from 10 to 0.1 over 200 epochs.
    #[arg(long)]
    pub anneal: bool,
    #[arg(long)]
    pub noise_std: Option<f64>,
    #[arg(long, value_enum)]
    pub activation: Option<ActivationArg>,
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub eval_episodes: Option<usize>,
    #[arg(long)]
    pub metric_episodes: Option<usize>,
    #[arg(long)]
    pub zcp_games: Option<usize>,
}

impl ConfigOverrides {
    pub fn apply(&self, c: &mut ExperimentConfig) {
        macro_rules! set {
            ($($field:ident => $target:ident),*) => {
                $(if let Some(v) = self.$field.clone() { c.$target = v; })*
            };
        }
        set!(name => name, classes => classes, vocab => vocab, n_agents => n_agents,
             epochs => epochs, steps_per_epoch => steps_per_epoch, batch_size => batch_size,
             lr => learning_rate, noise_std => noise_std, seed => seed,
             eval_episodes => eval_episodes, metric_episodes => metric_episodes,
             zcp_games => zcp_games);
        if let Some(l) = self.loss_set {
            c.loss_set = match l {
                LossArg::Ac => LossSet::Ac,
                LossArg::SicTmPd => LossSet::SicTmPd,
            };
        }
        if let Some(a) = self.activation {
            c.activation = match a {
                ActivationArg::Relu => Activation::Relu,
                ActivationArg::Linear => Activation::Linear,
            };
        }
        let p = self.mutation_p.unwrap_or(c.mutation.probability());
        let style = self.mutation.or(match c.mutation {
            Mutation::Off if self.mutation_p.is_some() => Some(MutationArg::Kind),
            _ => None,
        });
        match style {
            Some(MutationArg::Off) => c.mutation = Mutation::Off,
            Some(MutationArg::Kind) => c.mutation = Mutation::Kind { probability: p },
            Some(MutationArg::Unkind) => c.mutation = Mutation::Unkind { probability: p },
            None => {
                if let Mutation::Kind { probability } | Mutation::Unkind { probability } =
                    &mut c.mutation
                {
                    *probability = p;
                }
            }
        }
        if let Some(k) = self.permutation_k {
            c.permutation = Permutation::Subset { size: k };
        }
        if let Some(t) = self.temperature {
            c.schedule = TemperatureSchedule::Fixed { temperature: t };
        }
        if self.anneal {
            c.schedule = TemperatureSchedule::standard_anneal();
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Zcp,
    Responsiveness,
    Diversity,
    Heatmap,
    Selfplay,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(value_enum)]
    pub mode: EvalMode,

    /// Checkpoint files or directories searched recursively for *.ckpt.
    #[arg(long = "checkpoints", required = true, num_args = 1..)]
    pub checkpoints: Vec<PathBuf>,

    #[arg(long)]
    pub out: PathBuf,

    /// Episodes per responsiveness, diversity, heat-map or self-play estimate.
    #[arg(long, default_value_t = 1000)]
    pub episodes: usize,

    /// Games per role assignment in each stranger encounter.
    #[arg(long, default_value_t = 170)]
    pub games: usize,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct FiguresArgs {
    /// Output directory of one or more `train` runs.
    #[arg(long)]
    pub runs: PathBuf,

    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CapacityArgs {
    /// Vocabulary size N.
    #[arg(long)]
    pub n: u64,
    /// Subjects per protocol k.
    #[arg(long)]
    pub k: u64,
    /// Network weight count W [default: the standard policy network].
    #[arg(long)]
    pub weights: Option<u64>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,

    #[arg(long)]
    pub out: PathBuf,

    #[arg(long, default_value_t = 1000)]
    pub episodes: usize,

    /// Total-variation tolerance of the listening test.
    #[arg(long, default_value_t = protolab::analysis::DEFAULT_TOLERANCE)]
    pub tolerance: f64,

    /// Episodes replayed by the listening test.
    #[arg(long, default_value_t = 100)]
    pub listening_episodes: usize,

    /// Use recorded traces (JSONL) for the signalling test instead of fresh self-play.
    #[arg(long)]
    pub traces: Option<PathBuf>,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}
