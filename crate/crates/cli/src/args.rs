//! Command-line surface: verbs `pretrain`, `calibrate`, `eval`, `sweep`,
//! `transfer`, `export`. A flat `key = value` config file can pre-seed any
//! long flag; explicit flags win. `I2CL_OUT` sets the default output root.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "i2cl", version, about = "Implicit in-context learning experiment runner")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Meta-pretrain a checkpoint on a synthetic task family.
    Pretrain(PretrainArgs),
    /// Calibrate coefficients for one task and store an anchor.
    Calibrate(CalibrateArgs),
    /// Evaluate a method over seeds, appending result rows.
    Eval(EvalArgs),
    /// Grid of evaluations over one axis (demo count or an ablation).
    Sweep(SweepArgs),
    /// Anchor-based transfer learning onto a new task.
    Transfer(TransferArgs),
    /// Export anchors as CSV: coefficients, context vectors, cosine matrix.
    Export(ExportArgs),
}

#[derive(Args, Clone)]
pub struct PretrainArgs {
    /// Flat key = value config file; flags override its entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output weight file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_mlp: Option<usize>,
    #[arg(long)]
    pub vocab: Option<usize>,
    #[arg(long)]
    pub max_seq: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub family_seed: Option<u64>,
    /// Probability a training sequence keeps the canonical mapping.
    #[arg(long)]
    pub canonical_bias: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub min_pattern_len: Option<usize>,
    #[arg(long)]
    pub max_pattern_len: Option<usize>,
    #[arg(long)]
    pub min_demos: Option<usize>,
    #[arg(long)]
    pub max_demos: Option<usize>,
    #[arg(long)]
    pub lr_start: Option<f64>,
    #[arg(long)]
    pub lr_end: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
}

#[derive(Args, Clone)]
pub struct PlanArgs {
    /// Target modules: comma list of mha, mlp, hidden.
    #[arg(long)]
    pub modules: Option<String>,
    /// Target layers: all, early, middle, late, or explicit 1-based list.
    #[arg(long)]
    pub layers: Option<String>,
    /// Injection positions: all, first, last, random.
    #[arg(long)]
    pub positions: Option<String>,
    /// Blend formula: linear, add_only, convex_scaled.
    #[arg(long)]
    pub formula: Option<String>,
    /// Calibration noise scale γ.
    #[arg(long)]
    pub gamma: Option<f64>,
}

#[derive(Args, Clone)]
pub struct CalibArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr_start: Option<f64>,
    #[arg(long)]
    pub lr_end: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub init_lambda: Option<f64>,
    #[arg(long)]
    pub init_beta: Option<f64>,
}

#[derive(Args, Clone)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Weight checkpoint.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Task spec file.
    #[arg(long)]
    pub task: Option<PathBuf>,
    /// Anchor directory to write (context, coefficients, manifest).
    #[arg(long)]
    pub out_anchor: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub demos_per_class: Option<usize>,
    #[arg(long)]
    pub train_pool: Option<usize>,
    #[command(flatten)]
    pub calib: CalibArgs,
    #[command(flatten)]
    pub plan: PlanArgs,
}

#[derive(Args, Clone)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub task: Option<PathBuf>,
    /// zero_shot, icl, i2cl, icl_plus_i2cl, noise_vector or task_vector.
    #[arg(long)]
    pub method: Option<String>,
    /// Comma-separated seed list.
    #[arg(long)]
    pub seeds: Option<String>,
    /// Output directory (defaults under I2CL_OUT).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub demos_per_class: Option<usize>,
    #[arg(long)]
    pub eval_size: Option<usize>,
    #[arg(long)]
    pub train_pool: Option<usize>,
    #[arg(long)]
    pub holdout: Option<usize>,
    #[command(flatten)]
    pub calib: CalibArgs,
    #[command(flatten)]
    pub plan: PlanArgs,
}

#[derive(Args, Clone)]
pub struct SweepArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    /// Sweep axis: demos, gamma, layers, modules, positions, formula.
    #[arg(long)]
    pub axis: Option<String>,
    /// Comma-separated axis values.
    #[arg(long)]
    pub values: Option<String>,
}

#[derive(Args, Clone)]
pub struct TransferArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Task spec of the new task.
    #[arg(long)]
    pub task: Option<PathBuf>,
    /// Anchor registry root.
    #[arg(long)]
    pub anchors: Option<PathBuf>,
    #[arg(long)]
    pub h: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub demos_per_class: Option<usize>,
    #[arg(long)]
    pub eval_size: Option<usize>,
    #[arg(long)]
    pub train_pool: Option<usize>,
    #[command(flatten)]
    pub calib: CalibArgs,
}

#[derive(Args, Clone)]
pub struct ExportArgs {
    #[arg(long)]
    pub anchors: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}
