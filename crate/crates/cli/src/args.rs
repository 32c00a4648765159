use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "coursepath",
    version,
    about = "Latent-variable models of multi-label enrollment sequences"
)]
pub struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Only log warnings and errors.
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    pub quiet: bool,

    /// Log debug messages.
    #[arg(short, long, global = true)]
    pub verbose: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic transcript CSV from a scenario, generator or model.
    Synth(SynthArgs),
    /// Train a model on a transcript CSV and save it as JSON.
    Fit(FitArgs),
    /// Draw synthetic students from a saved model.
    Sample(SampleArgs),
    /// Compute an evaluation report.
    Eval(EvalArgs),
    /// Predict enrollments at a masked timestep for every student.
    Infer(InferArgs),
    /// Cross-fit novelty scores and per-group subject mix.
    Score(ScoreArgs),
    /// Export expected state-transition flows as Sankey JSON.
    Sankey(SankeyArgs),
    /// Per-timestep subject counts and a histogram of enrollment totals.
    Summarize(SummarizeArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Scenario {
    Benchmark,
    Coupled,
    Recovery,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    Nb,
    Tan,
    Cmm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    MeanField,
    Accuracy,
    Majority,
    LatentAssignment,
    Recovery,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScopeArg {
    AnyTimestep,
    PerTimestep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TailArg {
    NestedMc,
    ProductCdf,
}

/// Transcript loading options shared by commands that read CSV input.
#[derive(Debug, Args)]
pub struct LoadArgs {
    /// Number of timesteps in the transcript; ignored when a model fixes it.
    #[arg(long, default_value_t = 4)]
    pub timesteps: usize,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Built-in scenario whose ground-truth model generates the cohort.
    #[arg(long, value_enum, group = "source")]
    pub scenario: Option<Scenario>,
    /// JSON generator configuration (same fields as the scenario generators).
    #[arg(long, group = "source")]
    pub generator: Option<PathBuf>,
    /// Saved contextual mixture model to sample from.
    #[arg(long, group = "source")]
    pub params: Option<PathBuf>,
    /// Number of students (default: the scenario's cohort size).
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output transcript CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Also save the generating model as a model file.
    #[arg(long)]
    pub truth_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long, value_enum)]
    pub model: ModelArg,
    /// Number of hidden states (latent classes for the baselines).
    #[arg(long)]
    pub k: usize,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub load: LoadArgs,
    #[arg(long, default_value_t = 200)]
    pub max_iters: usize,
    /// Relative log-likelihood improvement that stops EM.
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, default_value_t = 5)]
    pub restarts: usize,
    /// Ridge added to every fitted covariance (cmm only).
    #[arg(long, default_value_t = 1e-4)]
    pub regularization: f64,
    /// Pin the column order to the vocabulary of this model file.
    #[arg(long)]
    pub vocab_from: Option<PathBuf>,
    /// Drop students with fewer enrollments than this overall.
    #[arg(long, default_value_t = 0)]
    pub min_total: usize,
    /// Drop students with fewer enrollments than this in any timestep.
    #[arg(long, default_value_t = 0)]
    pub min_per_timestep: usize,
    /// Policy-gradient refinement steps after EM (cmm only).
    #[arg(long, default_value_t = 0)]
    pub refine_steps: usize,
    #[arg(long, default_value_t = 0.01)]
    pub learning_rate: f64,
    /// Monte-Carlo draws per pattern during refinement.
    #[arg(long, default_value_t = 200)]
    pub refine_k_mc: usize,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_enum)]
    pub metric: Metric,
    #[arg(long)]
    pub out: PathBuf,
    /// Model file (accuracy, latent-assignment, recovery; optional for
    /// mean-field, where it fixes the vocabulary).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Holdout transcript (mean-field, accuracy, majority).
    #[arg(long)]
    pub holdout: Option<PathBuf>,
    /// Model samples (mean-field).
    #[arg(long)]
    pub samples: Option<PathBuf>,
    /// Training transcript the majority baseline is computed from.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Transcript to assign course states from (latent-assignment).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Generating model to compare against (recovery).
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "any-timestep")]
    pub scope: ScopeArg,
    /// Masked timestep for the prediction task.
    #[arg(long, default_value_t = 1)]
    pub query_t: usize,
    /// Comma-separated course ids to predict.
    #[arg(long, value_delimiter = ',')]
    pub courses: Vec<String>,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long, default_value_t = 400)]
    pub k_mc: usize,
    #[arg(long, value_enum, default_value = "nested-mc")]
    pub tail: TailArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub load: LoadArgs,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub query_t: usize,
    /// Comma-separated course ids to predict (default: every course).
    #[arg(long, value_delimiter = ',')]
    pub courses: Vec<String>,
    /// Comma-separated observed timesteps (default: all but the query).
    #[arg(long, value_delimiter = ',')]
    pub observed: Vec<usize>,
    #[arg(long, default_value_t = 400)]
    pub k_mc: usize,
    #[arg(long, value_enum, default_value = "nested-mc")]
    pub tail: TailArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub k: usize,
    #[arg(long, default_value_t = 10)]
    pub folds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the per-group subject mix.
    #[arg(long)]
    pub subject_mix_out: Option<PathBuf>,
    #[command(flatten)]
    pub load: LoadArgs,
    #[arg(long, default_value_t = 200)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, default_value_t = 5)]
    pub restarts: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub regularization: f64,
}

#[derive(Debug, Args)]
pub struct SankeyArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SummarizeArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub load: LoadArgs,
    #[arg(long, default_value_t = 0)]
    pub min_total: usize,
    #[arg(long, default_value_t = 0)]
    pub min_per_timestep: usize,
}
