//! Mesh construction and quality reporting.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use mrgnf_core::io;
use mrgnf_core::mesh::{build_mesh_with, compute_quality, MeshBuildOptions};
use mrgnf_core::{Ellipsoid, RoiSpec, SpacingSpec};

use crate::util;

/// Parses a comma-separated list of exactly N floats.
fn parse_floats<const N: usize>(flag: &str, s: &str) -> Result<[f64; N]> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != N {
        anyhow::bail!("--{flag} needs {N} comma-separated values, got {}", parts.len());
    }
    let mut out = [0.0; N];
    for (i, p) in parts.iter().enumerate() {
        out[i] = p
            .trim()
            .parse::<f64>()
            .with_context(|| format!("--{flag}: `{p}` is not a number"))?;
    }
    Ok(out)
}

#[derive(Args)]
pub struct MeshBuildArgs {
    /// Region of interest as lon_min,lon_max,lat_min,lat_max.
    #[arg(long, default_value = "-11,2,49,59")]
    roi: String,
    /// Belt margin beyond the region as dlon,dlat degrees.
    #[arg(long, default_value = "6,4")]
    belt: String,
    /// Outer margin beyond the belt as dlon,dlat degrees.
    #[arg(long, default_value = "18,12")]
    outer: String,
    /// Target spacings as s_roi,s_belt,s_outer degrees.
    #[arg(long, default_value = "0.25,0.5,1.0")]
    spacing: String,
    #[arg(long, default_value_t = 2024)]
    seed: u64,
    /// Output mesh JSON path.
    #[arg(long)]
    out: PathBuf,
}

pub fn mesh_build(a: MeshBuildArgs) -> Result<()> {
    let [lon_min, lon_max, lat_min, lat_max] = parse_floats("roi", &a.roi)?;
    let [belt_dlon, belt_dlat] = parse_floats("belt", &a.belt)?;
    let [outer_dlon, outer_dlat] = parse_floats("outer", &a.outer)?;
    let [s_roi, s_belt, s_outer] = parse_floats("spacing", &a.spacing)?;

    let roi = RoiSpec {
        lon_min,
        lon_max,
        lat_min,
        lat_max,
        belt_dlon,
        belt_dlat,
    };
    let spacing = SpacingSpec {
        s_roi,
        s_belt,
        s_outer,
    };
    let opts = MeshBuildOptions {
        outer_dlon,
        outer_dlat,
        ..MeshBuildOptions::default()
    };

    let mesh = build_mesh_with(&Ellipsoid::wgs84(), &roi, &spacing, a.seed, &opts)?;
    eprintln!(
        "mesh: {} vertices, {} edges, {} triangles",
        mesh.n_vertices(),
        mesh.n_edges(),
        mesh.n_triangles()
    );

    let dir = util::parent_dir(&a.out);
    util::ensure_dir(&dir)?;
    io::write_file(&a.out, io::write_mesh_json(&mesh).as_bytes())?;
    let echo = format!(
        "roi={},{},{},{}\nbelt={},{}\nouter={},{}\nspacing={},{},{}\nseed={}\n",
        lon_min, lon_max, lat_min, lat_max, belt_dlon, belt_dlat, outer_dlon, outer_dlat,
        s_roi, s_belt, s_outer, a.seed
    );
    util::emit_manifest(&dir, "mesh-build", &echo, &[], Some(a.seed))?;
    println!("{}", a.out.display());
    Ok(())
}

#[derive(Args)]
pub struct MeshReportArgs {
    #[arg(long)]
    mesh: PathBuf,
    /// Output report JSON path.
    #[arg(long)]
    out: PathBuf,
}

pub fn mesh_report(a: MeshReportArgs) -> Result<()> {
    let mesh = util::load_mesh(&a.mesh)?;
    let report = compute_quality(&mesh, &mesh.roi, &mesh.spacing);
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');

    let dir = util::parent_dir(&a.out);
    util::ensure_dir(&dir)?;
    io::write_file(&a.out, json.as_bytes())?;
    util::emit_manifest(&dir, "mesh-report", "", &[&a.mesh], None)?;
    println!("{}", a.out.display());
    Ok(())
}
