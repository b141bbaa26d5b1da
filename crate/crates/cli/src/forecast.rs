//! Forecast production and scoring: autoregressive rollout, per-lead
//! metrics, and export of plot-ready tables and rasters.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use mrgnf_core::io;
use mrgnf_core::{
    evaluate, rollout as run_rollout, standardize, GraphEdges, HeadSet, NodeTensor, RolloutConfig,
    Tensor,
};

use crate::data::load_dataset;
use crate::model_cmd;
use crate::util;

#[derive(Args)]
pub struct RolloutArgs {
    /// Trained core checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory as written by `synth`.
    #[arg(long)]
    data: PathBuf,
    /// Normalization statistics fitted on the training split.
    #[arg(long)]
    stats: PathBuf,
    /// Sequence index; defaults to the first test sequence.
    #[arg(long)]
    seq: Option<usize>,
    /// First history frame within the sequence.
    #[arg(long, default_value_t = 0)]
    start: usize,
    /// Autoregressive steps.
    #[arg(long, default_value_t = 4)]
    steps: usize,
    /// Overwrite head channels in each fed-back frame.
    #[arg(long, requires = "wind_head", requires = "precip_head")]
    substitute_heads: bool,
    #[arg(long)]
    wind_head: Option<PathBuf>,
    #[arg(long)]
    precip_head: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

/// Copies frames [t0, t0+k) of a standardized sequence.
fn frame_window(x: &NodeTensor, t0: usize, k: usize) -> NodeTensor {
    let mut out = NodeTensor::zeros(k, x.channel_names.clone(), x.n);
    let frame = x.c() * x.n;
    out.data
        .copy_from_slice(&x.data[t0 * frame..(t0 + k) * frame]);
    out
}

pub fn rollout(a: RolloutArgs) -> Result<()> {
    let core = model_cmd::read_core_ckpt(&a.ckpt)?;
    let stats = util::load_stats(&a.stats)?;
    let (mesh, data) = load_dataset(&a.data)?;
    let edges = GraphEdges::from_mesh(&mesh);

    let n_seq = data.sequences.len();
    let seq = match a.seq {
        Some(s) => s,
        None => mrgnf_core::split_by_sequence(n_seq)
            .2
            .first()
            .copied()
            .unwrap_or(0),
    };
    if seq >= n_seq {
        anyhow::bail!("sequence {seq} out of range, dataset has {n_seq}");
    }
    let t_in = core.config.t_in;
    let need = a.start + t_in + a.steps;
    let have = data.sequences[seq].t;
    if need > have {
        anyhow::bail!(
            "sequence {seq} has {have} frames, need {need} for start={} t_in={t_in} steps={}",
            a.start,
            a.steps
        );
    }

    let std_seq = standardize(&data.sequences[seq], &stats)?;
    let history = frame_window(&std_seq, a.start, t_in);
    let truth = frame_window(&std_seq, a.start + t_in, a.steps);

    let mut statics = Tensor::<f32>::zeros(vec![data.static_names.len(), data.n_nodes]);
    statics.data_mut().copy_from_slice(&data.statics);

    let heads = if a.substitute_heads {
        let wind_path = a.wind_head.as_ref().expect("clap enforces wind_head");
        let precip_path = a.precip_head.as_ref().expect("clap enforces precip_head");
        Some(HeadSet {
            wind: model_cmd::read_head_ckpt(wind_path)?,
            precip: model_cmd::read_head_ckpt(precip_path)?,
        })
    } else {
        None
    };

    let cfg = RolloutConfig {
        steps: a.steps,
        substitute_heads: a.substitute_heads,
    };
    let pred = run_rollout(&core, heads.as_ref(), &history, &statics, &edges, &cfg)?;

    util::ensure_dir(&a.out)?;
    let pred_path = a.out.join("pred.nten");
    let truth_path = a.out.join("truth.nten");
    io::write_file(&pred_path, &io::write_node_tensor(&pred))?;
    io::write_file(&truth_path, &io::write_node_tensor(&truth))?;

    let mut inputs = vec![a.ckpt.clone(), a.stats.clone(), a.data.join("mesh.json")];
    inputs.push(a.data.join(format!("seq_{seq:03}.nten")));
    inputs.push(a.data.join("statics.nten"));
    if let Some(p) = a.wind_head.as_ref() {
        inputs.push(p.clone());
    }
    if let Some(p) = a.precip_head.as_ref() {
        inputs.push(p.clone());
    }
    let echo = format!(
        "{}seq={seq}\nstart={}\n",
        io::echo_rollout_config(&cfg),
        a.start
    );
    let input_refs: Vec<&Path> = inputs.iter().map(|p| p.as_path()).collect();
    util::emit_manifest(&a.out, "rollout", &echo, &input_refs, None)?;
    println!("{}", pred_path.display());
    println!("{}", truth_path.display());
    Ok(())
}

#[derive(Args)]
pub struct EvalArgs {
    /// Forecast tensor from `rollout`.
    #[arg(long)]
    pred: PathBuf,
    /// Matching truth tensor.
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    mesh: PathBuf,
    /// Statistics used to destandardize before scoring.
    #[arg(long)]
    stats: PathBuf,
    /// Output metrics CSV path.
    #[arg(long)]
    out: PathBuf,
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let pred = io::read_node_tensor(&io::read_file(&a.pred)?)?;
    let truth = io::read_node_tensor(&io::read_file(&a.truth)?)?;
    let mesh = util::load_mesh(&a.mesh)?;
    let stats = util::load_stats(&a.stats)?;
    let metrics = evaluate(&pred, &truth, &mesh, &stats)?;

    let dir = util::parent_dir(&a.out);
    util::ensure_dir(&dir)?;
    io::write_file(&a.out, metrics.to_csv().as_bytes())?;
    util::emit_manifest(
        &dir,
        "eval",
        "",
        &[&a.pred, &a.truth, &a.mesh, &a.stats],
        None,
    )?;
    println!("{}", a.out.display());
    Ok(())
}

#[derive(Args)]
pub struct PlotExportArgs {
    /// Metrics CSV from `eval`.
    #[arg(long)]
    metrics: PathBuf,
    /// Optional node tensor to rasterize.
    #[arg(long, requires = "mesh", requires = "channel")]
    field: Option<PathBuf>,
    #[arg(long)]
    mesh: Option<PathBuf>,
    /// Channel to rasterize from --field.
    #[arg(long)]
    channel: Option<String>,
    /// Lead step to rasterize, 1-based.
    #[arg(long, default_value_t = 1)]
    step: usize,
    /// Raster width in pixels.
    #[arg(long, default_value_t = 320)]
    width: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

/// One parsed metrics row.
struct MetricRow {
    channel: String,
    lead: usize,
    rmse: f64,
    mae: f64,
}

fn parse_metrics_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if header != "channel,lead,rmse,mae" {
        anyhow::bail!("metrics CSV header is `{header}`, expected `channel,lead,rmse,mae`");
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            anyhow::bail!("metrics CSV row {}: expected 4 fields", i + 2);
        }
        rows.push(MetricRow {
            channel: parts[0].to_string(),
            lead: parts[1].parse().with_context(|| format!("row {}: bad lead", i + 2))?,
            rmse: parts[2].parse().with_context(|| format!("row {}: bad rmse", i + 2))?,
            mae: parts[3].parse().with_context(|| format!("row {}: bad mae", i + 2))?,
        });
    }
    if rows.is_empty() {
        anyhow::bail!("metrics CSV has no data rows");
    }
    Ok(rows)
}

pub fn plot_export(a: PlotExportArgs) -> Result<()> {
    let text = String::from_utf8(io::read_file(&a.metrics)?)
        .map_err(|_| anyhow::anyhow!("{}: not valid UTF-8", a.metrics.display()))?;
    let rows = parse_metrics_csv(&text)?;

    util::ensure_dir(&a.out)?;
    let mut by_lead: BTreeMap<usize, Vec<&MetricRow>> = BTreeMap::new();
    for r in &rows {
        by_lead.entry(r.lead).or_default().push(r);
    }
    for (lead, rows) in &by_lead {
        let mut csv = String::from("channel,rmse,mae\n");
        for r in rows {
            csv.push_str(&format!("{},{},{}\n", r.channel, r.rmse, r.mae));
        }
        io::write_file(&a.out.join(format!("lead_{lead}.csv")), csv.as_bytes())?;
    }

    let mut inputs = vec![a.metrics.clone()];
    if let Some(field_path) = a.field.as_ref() {
        let mesh_path = a.mesh.as_ref().expect("clap enforces mesh");
        let channel = a.channel.as_ref().expect("clap enforces channel");
        let mesh = util::load_mesh(mesh_path)?;
        let x = io::read_node_tensor(&io::read_file(field_path)?)?;
        if x.n != mesh.n_vertices() {
            anyhow::bail!("field has {} nodes, mesh has {}", x.n, mesh.n_vertices());
        }
        let ci = x
            .channel_index(channel)
            .ok_or_else(|| anyhow::anyhow!("field has no channel `{channel}`"))?;
        if a.step == 0 || a.step > x.t {
            anyhow::bail!("step {} out of range, field has {} frames", a.step, x.t);
        }
        let frame = x.time_slice(a.step - 1);
        let values: Vec<f64> = frame[ci * x.n..(ci + 1) * x.n]
            .iter()
            .map(|&v| f64::from(v))
            .collect();
        let roi = &mesh.roi;
        let bbox = (roi.lon_min, roi.lon_max, roi.lat_min, roi.lat_max);
        let lon_ext = roi.lon_max - roi.lon_min;
        let lat_ext = roi.lat_max - roi.lat_min;
        if a.width == 0 {
            anyhow::bail!("width must be positive");
        }
        let height = ((a.width as f64 * lat_ext / lon_ext).round() as usize).max(1);
        let pixels = io::rasterize_nodes(&mesh.vertices, &values, bbox, a.width, height)?;
        let pgm = io::write_pgm(a.width, height, &pixels)?;
        io::write_file(
            &a.out.join(format!("field_{channel}_step{}.pgm", a.step)),
            &pgm,
        )?;
        inputs.push(field_path.clone());
        inputs.push(mesh_path.clone());
    }

    let echo = format!("step={}\nwidth={}\n", a.step, a.width);
    let input_refs: Vec<&Path> = inputs.iter().map(|p| p.as_path()).collect();
    util::emit_manifest(&a.out, "plot-export", &echo, &input_refs, None)?;
    println!("{}", a.out.display());
    Ok(())
}
