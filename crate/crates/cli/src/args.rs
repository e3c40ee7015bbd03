//! Command-line arguments.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use contam_core::{BootstrapScheme, ControlKind, EstimatorKind};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(
    name = "contam",
    version,
    about = "Contamination-bias diagnostics for multi-treatment regressions"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split each treatment coefficient into own-effect and contamination parts.
    Decompose(DecomposeArgs),
    /// Run the contamination-free estimators.
    Estimate(EstimateArgs),
    /// Population weights, coefficients and efficiency bounds for a discrete design.
    Oracle(OracleArgs),
    /// Repeated simulation from a population spec.
    Simulate(SimulateArgs),
}

/// A control column given as `name` or `name:categorical` / `name:continuous`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ControlArg {
    pub name: String,
    pub kind: ControlKind,
}

fn parse_control(raw: &str) -> Result<ControlArg, String> {
    let (name, kind) = match raw.rsplit_once(':') {
        Some((name, "categorical")) => (name, ControlKind::Categorical),
        Some((name, "continuous")) => (name, ControlKind::Continuous),
        Some((_, other)) => {
            return Err(format!(
                "unknown control kind `{other}`; use categorical or continuous"
            ))
        }
        None => (raw, ControlKind::Categorical),
    };
    if name.is_empty() {
        return Err("empty control column name".into());
    }
    Ok(ControlArg {
        name: name.to_string(),
        kind,
    })
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub outcome: String,
    #[arg(long)]
    pub treatment: String,
    /// Control column; repeat for several. Suffix `:continuous` for numeric controls.
    #[arg(long = "control", value_parser = parse_control)]
    pub controls: Vec<ControlArg>,
    /// Treatment value that marks the control arm.
    #[arg(long)]
    pub control_arm: String,
    /// Comma-separated order of the treated arms (default: natural sort).
    #[arg(long, value_delimiter = ',')]
    pub arms: Option<Vec<String>>,
    /// Minimum number of rows per arm.
    #[arg(long, default_value_t = 2)]
    pub min_arm_count: usize,
    /// Enter controls linearly instead of as stratum dummies.
    #[arg(long)]
    pub linear_controls: bool,
}

#[derive(Debug, Clone, Args)]
pub struct OutputArgs {
    /// Write the full report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Write the command's table as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Seed for every random draw.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for replicate loops.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SchemeArg {
    Iid,
    StratifiedCells,
}

impl From<SchemeArg> for BootstrapScheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Iid => BootstrapScheme::Iid,
            SchemeArg::StratifiedCells => BootstrapScheme::StratifiedCells,
        }
    }
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Bootstrap replicates for the component SEs; 0 skips the bootstrap.
    #[arg(long, default_value_t = 500)]
    pub bootstrap: usize,
    #[arg(long, value_enum, default_value = "iid")]
    pub bootstrap_scheme: SchemeArg,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WhichArg {
    Ate,
    OneAtATime,
    Common,
    All,
}

impl WhichArg {
    pub fn kinds(self) -> Vec<EstimatorKind> {
        match self {
            WhichArg::Ate => vec![EstimatorKind::AteInteracted],
            WhichArg::OneAtATime => vec![EstimatorKind::OneAtATime],
            WhichArg::Common => vec![EstimatorKind::CommonWeights],
            WhichArg::All => vec![
                EstimatorKind::Uninteracted,
                EstimatorKind::AteInteracted,
                EstimatorKind::OneAtATime,
                EstimatorKind::CommonWeights,
            ],
        }
    }
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value = "all")]
    pub which: WhichArg,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args)]
#[group(required = true, multiple = false)]
pub struct SpecSource {
    /// Population spec as JSON.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Use a random spec drawn from `--seed`.
    #[arg(long)]
    pub random: bool,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[command(flatten)]
    pub source: SpecSource,
    /// Compare the closed forms with a regression on the enumerated population.
    #[arg(long)]
    pub check: bool,
    /// Rows per unit mass used by `--check` (specs are rounded to this grid).
    #[arg(long, default_value_t = 1000)]
    pub cell_scale: u64,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub source: SpecSource,
    /// Rows per simulated dataset.
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 200)]
    pub reps: usize,
    #[command(flatten)]
    pub output: OutputArgs,
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
    fn control_suffixes() {
        assert_eq!(
            parse_control("school").unwrap().kind,
            ControlKind::Categorical
        );
        let c = parse_control("age:continuous").unwrap();
        assert_eq!((c.name.as_str(), c.kind), ("age", ControlKind::Continuous));
        assert!(parse_control("age:ordinal").is_err());
        assert!(parse_control(":continuous").is_err());
    }
}
