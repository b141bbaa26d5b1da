//! Model lifecycle: initialization, inspection, core training, and head
//! fine-tuning.

use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::Args;
use mrgnf_core::io::{self, Checkpoint};
use mrgnf_core::{
    core_task_loss, fine_tune_head, param_count, train_core, Corpus, GraphEdges, HeadKind,
    HeadParams, ModelParams, PrecipLossConfig, Split, TokenLayout, TrainReport,
    DEFAULT_HEAD_HIDDEN,
};

use crate::data::load_dataset;
use crate::util;

fn read_ckpt(path: &Path) -> Result<Checkpoint> {
    let bytes = io::read_file(path)?;
    Ok(io::read_checkpoint(&bytes)?)
}

pub(crate) fn read_core_ckpt(path: &Path) -> Result<ModelParams<f32>> {
    match read_ckpt(path)? {
        Checkpoint::Core(p) => Ok(p),
        Checkpoint::Head(_) => {
            anyhow::bail!("{}: holds a task head, not a forecaster core", path.display())
        }
    }
}

pub(crate) fn read_head_ckpt(path: &Path) -> Result<HeadParams<f32>> {
    match read_ckpt(path)? {
        Checkpoint::Head(h) => Ok(h),
        Checkpoint::Core(_) => {
            anyhow::bail!("{}: holds a forecaster core, not a task head", path.display())
        }
    }
}

#[derive(Args)]
pub struct ModelInitArgs {
    /// Optional key=value model configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
}

pub fn model_init(a: ModelInitArgs) -> Result<()> {
    let pairs = util::parse_config_file(a.config.as_deref())?;
    let cfg = io::model_config_from_kv(&pairs)?;
    let layout = TokenLayout::default();
    let n_static = mrgnf_core::regrid::static_channel_names().len();
    let params = ModelParams::init(&cfg, &layout, n_static, a.seed)?;
    eprintln!(
        "initialized core: {} parameters",
        param_count(&cfg, &layout, n_static)
    );

    let dir = util::parent_dir(&a.out);
    util::ensure_dir(&dir)?;
    io::write_file(&a.out, &io::write_checkpoint(&Checkpoint::Core(params)))?;
    let inputs: Vec<&Path> = a.config.iter().map(|p| p.as_path()).collect();
    util::emit_manifest(
        &dir,
        "model-init",
        &io::echo_model_config(&cfg),
        &inputs,
        Some(a.seed),
    )?;
    println!("{}", a.out.display());
    Ok(())
}

#[derive(Args)]
pub struct ModelInfoArgs {
    #[arg(long)]
    ckpt: PathBuf,
}

pub fn model_info(a: ModelInfoArgs) -> Result<()> {
    let ckpt = read_ckpt(&a.ckpt)?;
    let groups = match &ckpt {
        Checkpoint::Core(p) => p.groups(),
        Checkpoint::Head(h) => h.groups(),
    };
    let total: usize = groups.iter().map(|(_, t)| t.data().len()).sum();
    let mut out = format!("{}\nparameters: {total}\n", ckpt.describe());
    for (name, t) in &groups {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        out.push_str(&format!("{name}: [{}]\n", dims.join(", ")));
    }
    util::print_data(&out)
}

/// Loads a dataset directory into a training corpus plus mesh graph.
fn load_corpus(dir: &Path) -> Result<(Corpus, GraphEdges, Vec<PathBuf>)> {
    let (mesh, data) = load_dataset(dir)?;
    let n_static = data.static_names.len();
    let corpus = Corpus::from_synth(&data, n_static)?;
    let edges = GraphEdges::from_mesh(&mesh);
    let mut inputs = vec![dir.join("mesh.json"), dir.join("statics.nten")];
    inputs.extend(crate::data::sequence_paths(dir)?);
    Ok((corpus, edges, inputs))
}

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset directory as written by `synth`.
    #[arg(long)]
    data: PathBuf,
    /// Optional key=value training configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Optional key=value model configuration for fresh parameters.
    #[arg(long, conflicts_with = "init")]
    model_config: Option<PathBuf>,
    /// Resume from an existing core checkpoint instead of fresh init.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

fn report_summary(report: &TrainReport) -> String {
    let last = report.rows.last().map(|r| r.loss).unwrap_or(f64::NAN);
    let best = report
        .best_val
        .map(|v| format!("{v:.6}"))
        .unwrap_or_else(|| "n/a".to_string());
    format!(
        "steps={} final_loss={last:.6} best_val={best} stopped_early={}",
        report.rows.len(),
        report.stopped_early
    )
}

pub fn train(a: TrainArgs) -> Result<()> {
    let pairs = util::parse_config_file(a.config.as_deref())?;
    let cfg = io::train_config_from_kv(&pairs)?;
    let (corpus, edges, mut inputs) = load_corpus(&a.data)?;

    let mut echo = io::echo_train_config(&cfg);
    let mut params = match &a.init {
        Some(p) => {
            inputs.push(p.clone());
            read_core_ckpt(p)?
        }
        None => {
            let mpairs = util::parse_config_file(a.model_config.as_deref())?;
            let mcfg = io::model_config_from_kv(&mpairs)?;
            echo.push_str(&io::echo_model_config(&mcfg));
            let layout = TokenLayout::default();
            let n_static = corpus.statics.shape()[0];
            ModelParams::init(&mcfg, &layout, n_static, cfg.seed)?
        }
    };
    if params.layout.n_channels() != corpus.channel_names.len() {
        anyhow::bail!(
            "model expects {} channels, dataset has {}",
            params.layout.n_channels(),
            corpus.channel_names.len()
        );
    }
    if params.n_static != corpus.statics.shape()[0] {
        anyhow::bail!(
            "model expects {} static channels, dataset has {}",
            params.n_static,
            corpus.statics.shape()[0]
        );
    }
    if let Some(p) = a.config.as_ref() {
        inputs.push(p.clone());
    }
    if let Some(p) = a.model_config.as_ref() {
        inputs.push(p.clone());
    }

    let report = train_core(&mut params, &corpus, &edges, &cfg)?;
    eprintln!("train: {}", report_summary(&report));

    util::ensure_dir(&a.out)?;
    let ckpt_path = a.out.join("core.ckpt");
    io::write_file(&ckpt_path, &io::write_checkpoint(&Checkpoint::Core(params)))?;
    io::write_file(
        &a.out.join("stats.json"),
        io::write_stats_json(&corpus.stats).as_bytes(),
    )?;
    io::write_file(&a.out.join("train_log.csv"), report.to_csv().as_bytes())?;
    let input_refs: Vec<&Path> = inputs.iter().map(|p| p.as_path()).collect();
    util::emit_manifest(&a.out, "train", &echo, &input_refs, Some(cfg.seed))?;
    println!("{}", ckpt_path.display());
    Ok(())
}

#[derive(Args)]
pub struct FinetuneArgs {
    /// Which task head to fit: wind or precip.
    #[arg(long)]
    head: String,
    /// Dataset directory as written by `synth`.
    #[arg(long)]
    data: PathBuf,
    /// Trained core checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Optional key=value training configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Head hidden width.
    #[arg(long, default_value_t = DEFAULT_HEAD_HIDDEN)]
    hidden: usize,
    /// Also update the core weights instead of freezing them.
    #[arg(long)]
    joint: bool,
    /// Resume the head from an existing checkpoint.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

pub fn finetune(a: FinetuneArgs) -> Result<()> {
    let kind = match a.head.as_str() {
        "wind" => HeadKind::Wind,
        "precip" => HeadKind::Precip,
        other => anyhow::bail!("unknown head `{other}`; expected wind or precip"),
    };
    let pairs = util::parse_config_file(a.config.as_deref())?;
    let cfg = io::train_config_from_kv(&pairs)?;
    let precip_cfg = PrecipLossConfig::default();
    let (corpus, edges, mut inputs) = load_corpus(&a.data)?;
    inputs.push(a.ckpt.clone());
    if let Some(p) = a.config.as_ref() {
        inputs.push(p.clone());
    }

    let mut core = read_core_ckpt(&a.ckpt)?;
    let mut head = match &a.init {
        Some(p) => {
            inputs.push(p.clone());
            let h = read_head_ckpt(p)?;
            if h.kind != kind {
                anyhow::bail!("{}: holds a {} head, asked for {}", p.display(), h.kind.name(), kind.name());
            }
            h
        }
        None => HeadParams::init(
            kind,
            core.layout.n_tokens(),
            core.config.embed_width,
            a.hidden,
            cfg.seed,
        )?,
    };

    let report = fine_tune_head(&mut core, &mut head, &corpus, &edges, &cfg, &precip_cfg, a.joint)?;
    eprintln!("finetune[{}]: {}", kind.name(), report_summary(&report));

    let val_refs = corpus.windows(Split::Val, core.config.t_in, 1);
    if let (Some(head_val), false) = (report.best_val, val_refs.is_empty()) {
        let core_val = core_task_loss(
            &core,
            &corpus,
            &val_refs,
            &edges,
            kind,
            &precip_cfg,
            cfg.batch_size,
        )?;
        eprintln!(
            "val task loss: head={head_val:.6} core={core_val:.6} ({})",
            if head_val < core_val { "head better" } else { "core better" }
        );
    }

    util::ensure_dir(&a.out)?;
    let head_path = a.out.join(format!("head_{}.ckpt", kind.name()));
    io::write_file(&head_path, &io::write_checkpoint(&Checkpoint::Head(head)))?;
    if a.joint {
        io::write_file(
            &a.out.join("core.ckpt"),
            &io::write_checkpoint(&Checkpoint::Core(core)),
        )?;
    }
    io::write_file(&a.out.join("train_log.csv"), report.to_csv().as_bytes())?;
    let mut echo = io::echo_train_config(&cfg);
    echo.push_str(&format!("head={}\nhidden={}\njoint={}\n", kind.name(), a.hidden, a.joint));
    let input_refs: Vec<&Path> = inputs.iter().map(|p| p.as_path()).collect();
    util::emit_manifest(&a.out, "finetune", &echo, &input_refs, Some(cfg.seed))?;
    println!("{}", head_path.display());
    Ok(())
}
