//! `mrgnf`: one binary driving the full pipeline, mesh construction
//! through forecast scoring. Every command writes a `manifest.json` into
//! its output directory recording the resolved configuration and the
//! SHA-256 of each input, so artifacts stay tied to what produced them.
//!
//! stdout carries data or output paths only; diagnostics go to stderr.
//! All pipeline arithmetic uses fixed-order reductions, so results are
//! reproducible bit for bit per seed; `MRGNF_DETERMINISTIC` is accepted
//! for compatibility and changes nothing.

mod data;
mod forecast;
mod mesh_cmd;
mod model_cmd;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

pub(crate) const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(
    name = "mrgnf",
    version,
    about = "Regional graph-attention weather forecasting pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the tri-band triangular mesh.
    MeshBuild(mesh_cmd::MeshBuildArgs),
    /// Compute quality metrics for an existing mesh.
    MeshReport(mesh_cmd::MeshReportArgs),
    /// Sample gridded channels onto mesh nodes.
    Regrid(data::RegridArgs),
    /// Fit per-channel normalization statistics.
    Stats(data::StatsArgs),
    /// Generate a synthetic dataset over a mesh.
    Synth(data::SynthArgs),
    /// Initialize forecaster parameters.
    ModelInit(model_cmd::ModelInitArgs),
    /// Describe a checkpoint: shapes and parameter count.
    ModelInfo(model_cmd::ModelInfoArgs),
    /// Train the forecaster core.
    Train(model_cmd::TrainArgs),
    /// Fine-tune a task head on a trained core.
    Finetune(model_cmd::FinetuneArgs),
    /// Run an autoregressive forecast.
    Rollout(forecast::RolloutArgs),
    /// Score a forecast against truth over the region of interest.
    Eval(forecast::EvalArgs),
    /// Export per-lead metric tables and field rasters.
    PlotExport(forecast::PlotExportArgs),
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::MeshBuild(a) => mesh_cmd::mesh_build(a),
        Command::MeshReport(a) => mesh_cmd::mesh_report(a),
        Command::Regrid(a) => data::regrid(a),
        Command::Stats(a) => data::stats(a),
        Command::Synth(a) => data::synth(a),
        Command::ModelInit(a) => model_cmd::model_init(a),
        Command::ModelInfo(a) => model_cmd::model_info(a),
        Command::Train(a) => model_cmd::train(a),
        Command::Finetune(a) => model_cmd::finetune(a),
        Command::Rollout(a) => forecast::rollout(a),
        Command::Eval(a) => forecast::eval(a),
        Command::PlotExport(a) => forecast::plot_export(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

/// Shared plumbing for the command modules.
pub(crate) mod util {
    use super::*;
    use mrgnf_core::io;
    use mrgnf_core::mesh::TriMesh;
    use mrgnf_core::stats::ChannelStats;
    use std::path::Path;

    pub fn load_mesh(path: &Path) -> Result<TriMesh> {
        let bytes = io::read_file(path)?;
        let text = std::str::from_utf8(&bytes)
            .map_err(|_| anyhow::anyhow!("{}: not valid UTF-8", path.display()))?;
        Ok(io::read_mesh_json(text)?)
    }

    pub fn load_stats(path: &Path) -> Result<ChannelStats> {
        let bytes = io::read_file(path)?;
        let text = std::str::from_utf8(&bytes)
            .map_err(|_| anyhow::anyhow!("{}: not valid UTF-8", path.display()))?;
        Ok(io::read_stats_json(text)?)
    }

    /// Creates the directory if needed and fails if it is a file.
    pub fn ensure_dir(dir: &Path) -> Result<()> {
        if dir.exists() && !dir.is_dir() {
            anyhow::bail!("{} exists and is not a directory", dir.display());
        }
        std::fs::create_dir_all(dir)
            .map_err(|e| anyhow::anyhow!("cannot create {}: {e}", dir.display()))?;
        Ok(())
    }

    /// Writes the run manifest into `dir`.
    pub fn emit_manifest(
        dir: &Path,
        command: &str,
        config_echo: &str,
        inputs: &[&Path],
        seed: Option<u64>,
    ) -> Result<()> {
        let manifest =
            io::RunManifest::new(command, config_echo, inputs, seed, TOOL_VERSION)?;
        io::write_manifest(dir, &manifest)?;
        Ok(())
    }

    /// Output directory of a file path, for manifest placement.
    pub fn parent_dir(path: &Path) -> PathBuf {
        match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        }
    }

    /// Writes a multi-line data blob to stdout. A closed pipe is not an
    /// error: downstream tools like `head` may stop reading early.
    pub fn print_data(s: &str) -> Result<()> {
        use std::io::Write;
        match std::io::stdout().write_all(s.as_bytes()) {
            Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
            other => Ok(other?),
        }
    }

    /// Reads a key=value config file, or returns defaults for a missing
    /// argument.
    pub fn parse_config_file(path: Option<&Path>) -> Result<io::ParsedConfig> {
        match path {
            None => Ok(Vec::new()),
            Some(p) => {
                let bytes = io::read_file(p)?;
                let text = std::str::from_utf8(&bytes)
                    .map_err(|_| anyhow::anyhow!("{}: not valid UTF-8", p.display()))?;
                Ok(io::parse_kv(text)?)
            }
        }
    }
}
