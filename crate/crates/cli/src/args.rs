use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use gcame_core::gcame::CenterMode;

#[derive(Debug, Parser)]
#[command(name = "gcame", version, about = "Gaussian class activation maps for object detectors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Explain one detection: writes saliency.npy, heatmap.png and summary.json.
    Explain,
    /// Score explanations over a dataset: PG, EBPG, Average Drop, information drop.
    Evaluate,
    /// Weight-randomization sanity check on the toy detector.
    Sanity,
    /// Run the built-in oracle and invariant checks.
    Selftest,
}

#[derive(Clone, Debug, Args)]
pub struct RunArgs {
    /// Capture directory. `evaluate` accepts several, or a directory of captures.
    #[arg(long, global = true, value_name = "DIR", conflicts_with = "toy")]
    pub capture: Vec<PathBuf>,

    /// Toy scene: blank, one-square, two-squares (and `pairs` for evaluate).
    #[arg(long, global = true, value_name = "FIXTURE")]
    pub toy: Option<String>,

    /// Layers to explain, comma separated. Defaults to every capture layer or
    /// the toy class-head inputs.
    #[arg(long, global = true, value_delimiter = ',', value_name = "a,b,c")]
    pub layers: Vec<String>,

    /// Center search: one_stage expects a single gradient cell per map.
    #[arg(long, global = true, default_value = "one_stage", value_parser = parse_mode)]
    pub mode: CenterMode,

    /// Fraction of most salient pixels kept when perturbing.
    #[arg(long, global = true, default_value_t = 0.2, value_name = "F")]
    pub keep_fraction: f64,

    /// Lossy codec quality for the information drop.
    #[arg(long, global = true, default_value_t = 75.0, value_name = "Q")]
    pub quality: f32,

    #[arg(long, global = true, default_value_t = 0, value_name = "N")]
    pub seed: u64,

    /// Number of scenes in the toy `pairs` suite.
    #[arg(long, global = true, default_value_t = 50, value_name = "N")]
    pub count: usize,

    /// Layers to randomize in `sanity`, comma separated, top first.
    #[arg(long, global = true, value_delimiter = ',', value_name = "a,b,c")]
    pub randomize: Vec<String>,

    #[arg(long, global = true, default_value = "gcame-out", value_name = "DIR")]
    pub out: PathBuf,

    /// Print the JSON report to stdout instead of a table.
    #[arg(long, global = true)]
    pub json: bool,

    /// Treat a no-signal explanation as an error (exit 3).
    #[arg(long, global = true)]
    pub strict: bool,

    #[arg(long, global = true, hide = true)]
    pub corrupt_weights: bool,
}

fn parse_mode(s: &str) -> Result<CenterMode, String> {
    s.parse().map_err(|e: gcame_core::Error| e.to_string())
}
