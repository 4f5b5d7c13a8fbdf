//! `ebdesign` command-line front end.

mod commands;
mod output;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "ebdesign", version, about = "Empirical Bayes priors, stratified experiment design and regret diagnostics")]
pub struct Cli {
    /// Worker threads for parallel sections (results do not depend on it).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Base seed for stochastic commands.
    #[arg(long, global = true, default_value_t = 20240)]
    pub seed: u64,
    /// Output directory for report.json and plot_*.csv.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a cross-study prior to an archive CSV.
    EstimatePrior(EstimateArgs),
    /// Solve a stratified propensity design problem.
    OptimizeDesign(DesignArgs),
    /// Replicated regret experiments against the oracle inequality.
    EvaluateRegret(RegretArgs),
    /// Regret convergence rates over a grid of archive sizes.
    SimulateRates(RateArgs),
    /// Value comparisons for random Loewner-ordered experiment pairs.
    DominanceCheck(DominanceArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Gaussian,
    Npmle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StructureArg {
    Full,
    Diagonal,
    Independent,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[arg(long)]
    pub archive: PathBuf,
    #[arg(long)]
    pub dim: usize,
    #[arg(long, value_enum, default_value_t = Method::Gaussian)]
    pub method: Method,
    #[arg(long, value_enum, default_value_t = StructureArg::Full)]
    pub structure: StructureArg,
    /// NPMLE grid points per coordinate.
    #[arg(long, default_value_t = 40)]
    pub grid_points: usize,
    /// NPMLE grid padding in multiples of the largest standard error.
    #[arg(long, default_value_t = 3.0)]
    pub padding: f64,
    #[arg(long)]
    pub max_iterations: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ObjectiveArg {
    Estimation,
    Welfare,
    Policy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ComplianceArg {
    Perfect,
    #[value(alias = "itt-voucher")]
    IttVoucherBudget,
    #[value(alias = "itt-takeup")]
    IttTakeupBudget,
}

#[derive(Debug, Args)]
pub struct DesignArgs {
    /// Strata configuration (TOML, or JSON by extension).
    #[arg(long)]
    pub config: PathBuf,
    /// Prior document written by estimate-prior.
    #[arg(long, required_unless_present = "diffuse", conflicts_with = "diffuse")]
    pub prior: Option<PathBuf>,
    /// Use the diffuse (no-information) reference prior instead of a fitted one.
    #[arg(long, alias = "no-information")]
    pub diffuse: bool,
    /// Estimation target matrix L (CSV, one row per line, no header); identity by default.
    #[arg(long = "L", value_name = "CSV")]
    pub l: Option<PathBuf>,
    /// Loss weight matrix Lambda (CSV); identity by default.
    #[arg(long = "Lambda", value_name = "CSV")]
    pub lambda: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ObjectiveArg::Estimation)]
    pub objective: ObjectiveArg,
    #[arg(long, value_enum, default_value_t = ComplianceArg::Perfect)]
    pub compliance: ComplianceArg,
    /// Also run the grid oracle at this resolution.
    #[arg(long)]
    pub grid_check: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EstimatorArg {
    Gaussian,
    Npmle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TemplateArg {
    Quadratic,
    Adoption,
}

#[derive(Debug, Args)]
pub struct RegretArgs {
    /// JSON array of two marginals; defaults to N(0, 2) x N(0, 1).
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = EstimatorArg::Gaussian)]
    pub estimator: EstimatorArg,
    /// Number of studies in each synthesized archive.
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 20)]
    pub replications: usize,
    #[arg(long, value_enum, default_value_t = TemplateArg::Quadratic)]
    pub template: TemplateArg,
    /// Units in the new two-stratum experiment.
    #[arg(long, default_value_t = 100.0)]
    pub n_total: f64,
    /// Outcome variance per unit.
    #[arg(long, default_value_t = 1.0)]
    pub s2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OrderArg {
    First,
    Second,
}

#[derive(Debug, Args)]
pub struct RateArgs {
    #[arg(long, value_enum, default_value_t = EstimatorArg::Gaussian)]
    pub estimator: EstimatorArg,
    #[arg(long, value_enum, default_value_t = OrderArg::Second)]
    pub order: OrderArg,
    #[arg(long, default_value_t = 50)]
    pub replications: usize,
    /// Comma-separated archive sizes.
    #[arg(long, value_delimiter = ',', default_values_t = [50, 100, 200, 400, 800])]
    pub n_grid: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct DominanceArgs {
    /// Prior document; defaults to a standard normal prior of dimension --dim.
    #[arg(long)]
    pub prior: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    #[arg(long, default_value_t = 100)]
    pub pairs: usize,
    #[arg(long, default_value_t = 10_000)]
    pub draws: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(&cli) {
        Ok(summary) => {
            let _ = writeln!(std::io::stdout(), "{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
