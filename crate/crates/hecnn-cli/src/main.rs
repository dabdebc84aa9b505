mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "hecnn", version, about = "Compile polynomial CNNs for leveled HE and simulate them")]
struct Cli {
    /// JSON pipeline config; explicit flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a fixed-point polynomial to ReLU and print coefficients with the fit report.
    FitPoly(FitPolyArgs),
    /// Apply a transform strategy to a model and write the result.
    Compile(CompileArgs),
    /// Print level counts per strategy and variant.
    Levels(LevelsArgs),
    /// Size a modulus chain and rescale schedule for a model.
    Plan(PlanArgs),
    /// Cluster conv weights into a shared codebook.
    Cluster(ClusterArgs),
    /// Train a tiny polynomial MLP and run the gradient lemma checks.
    TrainLab(TrainLabArgs),
    /// Simulate encrypted inference on one input tensor.
    Run(RunArgs),
    /// Check transform equivalence, level counts and simulator fidelity end to end.
    Compare(CompareArgs),
}

/// Where the model comes from: a file, or a generated network.
#[derive(Args, Clone, Debug)]
pub struct ModelSource {
    /// Model in the neutral JSON format.
    #[arg(long, conflicts_with = "variant")]
    pub model: Option<PathBuf>,
    /// Generate a random-weight network instead: rn18, rn20 or rn32.
    #[arg(long)]
    pub variant: Option<String>,
    /// Activation degree for a generated network (2 or 4).
    #[arg(long, default_value_t = 2)]
    pub degree: usize,
    /// Input height and width for a generated network.
    #[arg(long)]
    pub input_hw: Option<usize>,
    /// Channel width of the first stage of a generated network.
    #[arg(long)]
    pub base_width: Option<usize>,
}

#[derive(Args)]
pub struct FitPolyArgs {
    /// Polynomial degree.
    #[arg(long, default_value_t = 2)]
    pub degree: usize,
    /// Fit interval half-width c.
    #[arg(long, default_value_t = 2.0)]
    pub clip: f64,
    /// Fractional bits b; coefficients are signed b-bit integers over 2^b.
    #[arg(long, default_value_t = 10)]
    pub bits: u32,
}

#[derive(Args)]
pub struct CompileArgs {
    #[command(flatten)]
    pub source: ModelSource,
    /// Transform strategy: p4, p2, p2f, p2r, p2fr or p2frt [default: p2fr].
    #[arg(long)]
    pub strategy: Option<String>,
    /// Write the transformed model here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also lower to a circuit and write the program JSON here.
    #[arg(long)]
    pub emit_program: Option<PathBuf>,
    /// log2 of the scale Δ, used with --emit-program.
    #[arg(long)]
    pub delta_bits: Option<u32>,
    /// Sublevels per rescale modulus, used with --emit-program.
    #[arg(long)]
    pub sublevel: Option<u32>,
    /// Seed for generated weights, inputs and clustering [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct LevelsArgs {
    /// A strategy name, or "all" for every column.
    #[arg(long, default_value = "all")]
    pub strategy: String,
    /// A variant name, or "all" for every row.
    #[arg(long, default_value = "all")]
    pub variant: String,
    /// Analyze this model file instead of the generated variants.
    #[arg(long, conflicts_with = "variant")]
    pub model: Option<PathBuf>,
    /// Print JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Args)]
pub struct PlanArgs {
    #[command(flatten)]
    pub source: ModelSource,
    /// Bundled parameter set: rn18, rn20 or rn32. Without a model it also
    /// picks the generated variant of the same name.
    #[arg(long)]
    pub preset: Option<String>,
    /// Transform strategy: p4, p2, p2f, p2r, p2fr or p2frt [default: p2fr].
    #[arg(long)]
    pub strategy: Option<String>,
    /// log2 of the scale Δ [default: 40, or the preset's].
    #[arg(long)]
    pub delta_bits: Option<u32>,
    /// Sublevels ℓ per rescale modulus; 2 enables tower reuse [default: 2, or the preset's].
    #[arg(long)]
    pub sublevel: Option<u32>,
    /// Seed for generated weights, inputs and clustering [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write the plan JSON here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ClusterArgs {
    /// Input models; ensemble mode takes several.
    #[arg(long = "model", required = true)]
    pub models: Vec<PathBuf>,
    /// full, slice or ensemble.
    #[arg(long, default_value = "slice")]
    pub mode: String,
    /// Codebook size [default: 4].
    #[arg(long)]
    pub k: Option<usize>,
    /// Seed for generated weights, inputs and clustering [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for the quantized models, named after their inputs.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args)]
pub struct TrainLabArgs {
    /// Clip bound c [default: 2].
    #[arg(long)]
    pub clip: Option<f64>,
    /// Penalty strength ζ [default: 0.001].
    #[arg(long)]
    pub zeta: Option<f64>,
    /// Warm-up epochs; factors ramp linearly as t / (T + 1) unless given explicitly.
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    /// Comma-separated warm-up factors, one per warm-up epoch.
    #[arg(long, value_delimiter = ',')]
    pub warmup_factors: Option<Vec<f64>>,
    /// Learning rate η [default: 0.05].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Training epochs [default: 20].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Minibatch size [default: 32].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Seed for generated weights, inputs and clustering [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Hidden layer widths.
    #[arg(long, value_delimiter = ',', default_value = "8")]
    pub hidden: Vec<usize>,
    /// Training set size.
    #[arg(long, default_value_t = 320)]
    pub samples: usize,
    /// Random network states for the lemma checks.
    #[arg(long, default_value_t = 50)]
    pub lemma_states: usize,
    /// Per-epoch CSV; stdout when omitted.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Lemma-check JSON report; stdout when omitted.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args)]
pub struct RunArgs {
    /// Ensemble members; all must share one topology.
    #[arg(long = "model", conflicts_with = "program")]
    pub models: Vec<PathBuf>,
    /// Precompiled circuit program JSON.
    #[arg(long)]
    pub program: Option<PathBuf>,
    /// Modulus chain plan JSON; its Δ and ℓ drive lowering and its primes are
    /// used with --moduli primes.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Input tensor: a JSON header line, then little-endian f64 data.
    #[arg(long)]
    pub input: PathBuf,
    /// exact or primes.
    #[arg(long, default_value = "exact")]
    pub moduli: String,
    /// log2 of the scale Δ [default: 40, or the preset's].
    #[arg(long)]
    pub delta_bits: Option<u32>,
    /// Sublevels ℓ per rescale modulus; 2 enables tower reuse [default: 2, or the preset's].
    #[arg(long)]
    pub sublevel: Option<u32>,
    /// Record per-instruction sublevel, level and scale.
    #[arg(long)]
    pub trace: bool,
    /// Write the logits JSON here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub source: ModelSource,
    /// Transform strategy: p4, p2, p2f, p2r, p2fr or p2frt [default: p2fr].
    #[arg(long)]
    pub strategy: Option<String>,
    /// log2 of the scale Δ [default: 40, or the preset's].
    #[arg(long)]
    pub delta_bits: Option<u32>,
    /// Sublevels ℓ per rescale modulus; 2 enables tower reuse [default: 2, or the preset's].
    #[arg(long)]
    pub sublevel: Option<u32>,
    /// Input tensor for the simulator; random inputs when omitted.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Random inputs for the transform check.
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    /// Random inputs for the simulator check.
    #[arg(long, default_value_t = 1)]
    pub sim_inputs: usize,
    /// Seed for generated weights, inputs and clustering [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Relative tolerance of the transform check [default: 1e-8].
    #[arg(long)]
    pub tol_transform: Option<f64>,
    /// Relative tolerance of the simulator check [default: 1e-6].
    #[arg(long)]
    pub tol_sim: Option<f64>,
    /// Corrupt one fused coefficient after the transform, to exercise the check.
    #[arg(long)]
    pub inject_fault: bool,
    /// Write the JSON report here as well as stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = config::load(cli.config.as_deref()).and_then(|cfg| match cli.cmd {
        Command::FitPoly(a) => commands::fit_poly(a),
        Command::Compile(a) => commands::compile(a, &cfg),
        Command::Levels(a) => commands::levels(a),
        Command::Plan(a) => commands::plan(a, &cfg),
        Command::Cluster(a) => commands::cluster(a, &cfg),
        Command::TrainLab(a) => commands::train_lab(a, &cfg),
        Command::Run(a) => commands::run(a, &cfg),
        Command::Compare(a) => commands::compare(a, &cfg),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            ExitCode::from(f.code())
        }
    }
}
