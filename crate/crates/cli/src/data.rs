//! Data preparation: grid-to-node sampling, normalization statistics,
//! and synthetic dataset generation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use mrgnf_core::io;
use mrgnf_core::synth::{split_by_sequence, synth_dataset, SynthConfig, SynthData};
use mrgnf_core::{
    zone_sample, ChannelKind, ChannelSpec, MaskClass, NodeTensor, Transform, WelfordState, Zone,
};
use serde::Deserialize;

use crate::util;

#[derive(Args)]
pub struct RegridArgs {
    #[arg(long)]
    mesh: PathBuf,
    /// Gridded source for region-of-interest nodes.
    #[arg(long)]
    roi_grid: PathBuf,
    /// Gridded source for belt nodes.
    #[arg(long)]
    belt_grid: PathBuf,
    /// Gridded source for outer nodes.
    #[arg(long)]
    outer_grid: PathBuf,
    /// JSON array describing the channels to sample.
    #[arg(long)]
    channels: PathBuf,
    /// Output node tensor path.
    #[arg(long)]
    out: PathBuf,
}

/// On-disk form of one channel description.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ChannelSpecFile {
    name: String,
    kind: String,
    #[serde(default)]
    level: Option<u32>,
    #[serde(default)]
    transform: Option<String>,
    #[serde(default)]
    mask: Option<String>,
}

fn parse_channel_specs(text: &str) -> Result<Vec<ChannelSpec>> {
    let raw: Vec<ChannelSpecFile> =
        serde_json::from_str(text).context("channels file must be a JSON array")?;
    if raw.is_empty() {
        anyhow::bail!("channels file describes no channels");
    }
    let mut out = Vec::with_capacity(raw.len());
    for r in raw {
        let kind = match r.kind.as_str() {
            "surface" => ChannelKind::Surface,
            "pressure" => ChannelKind::PressureLevel,
            other => anyhow::bail!("channel `{}`: unknown kind `{other}`", r.name),
        };
        let transform = match r.transform.as_deref() {
            None | Some("identity") => Transform::Identity,
            Some("tp_log") => Transform::TpLog,
            Some(other) => anyhow::bail!("channel `{}`: unknown transform `{other}`", r.name),
        };
        let mask_class = match r.mask.as_deref() {
            None | Some("any") => MaskClass::Any,
            Some("land") => MaskClass::Land,
            Some("water") => MaskClass::Water,
            Some(other) => anyhow::bail!("channel `{}`: unknown mask `{other}`", r.name),
        };
        let spec = ChannelSpec {
            name: r.name,
            kind,
            level: r.level,
            transform,
            mask_class,
        };
        spec.validate()?;
        out.push(spec);
    }
    Ok(out)
}

fn load_rgrid(path: &Path) -> Result<mrgnf_core::RectGrid> {
    let bytes = io::read_file(path)?;
    let (grid, warnings) = io::read_rgrid(&bytes)?;
    for w in warnings {
        eprintln!("warning: {}: {w}", path.display());
    }
    Ok(grid)
}

pub fn regrid(a: RegridArgs) -> Result<()> {
    let mesh = util::load_mesh(&a.mesh)?;
    let roi_g = load_rgrid(&a.roi_grid)?;
    let belt_g = load_rgrid(&a.belt_grid)?;
    let outer_g = load_rgrid(&a.outer_grid)?;
    let channels_text = String::from_utf8(io::read_file(&a.channels)?)
        .map_err(|_| anyhow::anyhow!("{}: not valid UTF-8", a.channels.display()))?;
    let specs = parse_channel_specs(&channels_text)?;

    let mut grids: BTreeMap<Zone, &mrgnf_core::RectGrid> = BTreeMap::new();
    grids.insert(Zone::Roi, &roi_g);
    grids.insert(Zone::Belt, &belt_g);
    grids.insert(Zone::Outer, &outer_g);

    let names: Vec<String> = specs.iter().map(|s| s.output_name()).collect();
    let mut nodes = NodeTensor::zeros(1, names, mesh.n_vertices());
    zone_sample(&mesh, &grids, &specs, &mut nodes, 0)?;

    let dir = util::parent_dir(&a.out);
    util::ensure_dir(&dir)?;
    io::write_file(&a.out, &io::write_node_tensor(&nodes))?;
    util::emit_manifest(
        &dir,
        "regrid",
        "",
        &[&a.mesh, &a.roi_grid, &a.belt_grid, &a.outer_grid, &a.channels],
        None,
    )?;
    println!("{}", a.out.display());
    Ok(())
}

#[derive(Args)]
pub struct StatsArgs {
    /// A node tensor file, or a dataset directory of seq_*.nten files.
    #[arg(long)]
    nodes: PathBuf,
    /// Which split to accumulate over: train, val, test, or all.
    #[arg(long, default_value = "train")]
    split: String,
    /// Output statistics JSON path.
    #[arg(long)]
    out: PathBuf,
}

/// Picks the index subset for the named split out of `n` items.
fn split_indices(split: &str, n: usize) -> Result<Vec<usize>> {
    let (train, val, test) = split_by_sequence(n);
    Ok(match split {
        "train" => train,
        "val" => val,
        "test" => test,
        "all" => (0..n).collect(),
        other => anyhow::bail!("unknown split `{other}`; expected train, val, test, or all"),
    })
}

/// seq_*.nten paths under a dataset directory, in name order.
pub fn sequence_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for entry in std::fs::read_dir(dir)
        .map_err(|e| anyhow::anyhow!("cannot read {}: {e}", dir.display()))?
    {
        let p = entry?.path();
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("seq_") && name.ends_with(".nten") {
            paths.push(p);
        }
    }
    paths.sort();
    if paths.is_empty() {
        anyhow::bail!("{}: no seq_*.nten files", dir.display());
    }
    Ok(paths)
}

fn read_nodes(path: &Path) -> Result<NodeTensor> {
    let bytes = io::read_file(path)?;
    Ok(io::read_node_tensor(&bytes)?)
}

pub fn stats(a: StatsArgs) -> Result<()> {
    let mut inputs: Vec<PathBuf> = Vec::new();
    let stats = if a.nodes.is_dir() {
        let paths = sequence_paths(&a.nodes)?;
        let picked = split_indices(&a.split, paths.len())?;
        if picked.is_empty() {
            anyhow::bail!("split `{}` selects no sequences out of {}", a.split, paths.len());
        }
        let first = read_nodes(&paths[picked[0]])?;
        let mut w = WelfordState::new(first.c());
        let names = first.channel_names.clone();
        for &i in &picked {
            let x = read_nodes(&paths[i])?;
            if x.channel_names != names {
                anyhow::bail!("{}: channel names differ across sequences", paths[i].display());
            }
            for t in 0..x.t {
                w.update_slice(x.time_slice(t), x.n);
            }
            inputs.push(paths[i].clone());
        }
        w.finalize(&names)
    } else {
        let x = read_nodes(&a.nodes)?;
        let picked = split_indices(&a.split, x.t)?;
        if picked.is_empty() {
            anyhow::bail!("split `{}` selects no frames out of {}", a.split, x.t);
        }
        let mut w = WelfordState::new(x.c());
        for &t in &picked {
            w.update_slice(x.time_slice(t), x.n);
        }
        inputs.push(a.nodes.clone());
        w.finalize(&x.channel_names)
    };

    let dir = util::parent_dir(&a.out);
    util::ensure_dir(&dir)?;
    io::write_file(&a.out, io::write_stats_json(&stats).as_bytes())?;
    let input_refs: Vec<&Path> = inputs.iter().map(|p| p.as_path()).collect();
    let echo = format!("split={}\n", a.split);
    util::emit_manifest(&dir, "stats", &echo, &input_refs, None)?;
    println!("{}", a.out.display());
    Ok(())
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    mesh: PathBuf,
    /// Number of sequences to generate.
    #[arg(long, default_value_t = 16)]
    n: usize,
    /// Frames per sequence.
    #[arg(long, default_value_t = 6)]
    t: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let mesh = util::load_mesh(&a.mesh)?;
    let cfg = SynthConfig {
        n_sequences: a.n,
        t_steps: a.t,
        seed: a.seed,
    };
    let data = synth_dataset(&mesh, &cfg)?;

    util::ensure_dir(&a.out)?;
    io::write_file(&a.out.join("mesh.json"), io::write_mesh_json(&mesh).as_bytes())?;
    let mut statics = NodeTensor::zeros(1, data.static_names.clone(), data.n_nodes);
    statics.data.copy_from_slice(&data.statics);
    io::write_file(&a.out.join("statics.nten"), &io::write_node_tensor(&statics))?;
    for (i, seq) in data.sequences.iter().enumerate() {
        let name = format!("seq_{i:03}.nten");
        io::write_file(&a.out.join(name), &io::write_node_tensor(seq))?;
    }
    util::emit_manifest(
        &a.out,
        "synth",
        &io::echo_synth_config(&cfg),
        &[&a.mesh],
        Some(a.seed),
    )?;
    println!("{}", a.out.display());
    Ok(())
}

/// Reads a dataset directory written by `synth` back into memory.
pub fn load_dataset(dir: &Path) -> Result<(mrgnf_core::mesh::TriMesh, SynthData)> {
    let mesh = util::load_mesh(&dir.join("mesh.json"))?;
    let statics = read_nodes(&dir.join("statics.nten"))?;
    if statics.t != 1 {
        anyhow::bail!("statics.nten must hold a single frame, has {}", statics.t);
    }
    if statics.n != mesh.n_vertices() {
        anyhow::bail!(
            "statics.nten has {} nodes, mesh has {}",
            statics.n,
            mesh.n_vertices()
        );
    }
    let mut sequences = Vec::new();
    for p in sequence_paths(dir)? {
        let x = read_nodes(&p)?;
        if x.n != mesh.n_vertices() {
            anyhow::bail!("{}: {} nodes, mesh has {}", p.display(), x.n, mesh.n_vertices());
        }
        sequences.push(x);
    }
    let channel_names = sequences[0].channel_names.clone();
    for s in &sequences[1..] {
        if s.channel_names != channel_names {
            anyhow::bail!("sequences disagree on channel names");
        }
    }
    let n_nodes = mesh.n_vertices();
    let data = SynthData {
        channel_names,
        sequences,
        statics: statics.data,
        static_names: statics.channel_names,
        n_nodes,
    };
    Ok((mesh, data))
}
