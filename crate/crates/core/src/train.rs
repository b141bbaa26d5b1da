//! One-step training of the forecaster core on the standardized MSE
//! objective, and head fine-tuning on the composite wind and wet-weighted
//! precipitation losses with the core frozen.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::heads::{
    head_forward, loss_core_tape, loss_precip_tape, loss_wind_tape, loss_wind_terms, HeadError,
    HeadKind, HeadParams, PrecipLossConfig, WindPair,
};
use crate::model::{forward, GraphEdges, ModelError, ModelParams};
use crate::regrid::NodeTensor;
use crate::stats::{ChannelStats, StatsError, WelfordState};
use crate::synth::{split_by_sequence, SynthData};
use crate::tape::{Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("non-finite loss {loss} at optimizer step {step}")]
    NonFinite { step: u64, loss: f64 },
    #[error("dataset problem: {0}")]
    Data(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub gradient_clip_norm: f64,
    pub val_every: usize,
    pub early_stop_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 4,
            max_steps: 1000,
            seed: 0,
            gradient_clip_norm: 1.0,
            val_every: 200,
            early_stop_patience: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        // lr = 0 is allowed: it freezes parameters while still reporting
        // losses.
        if !(self.learning_rate >= 0.0) {
            return Err(TrainError::Config("learning rate must be >= 0".into()));
        }
        for (name, b) in [("beta1", self.adam_beta1), ("beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(TrainError::Config(format!("{name} must lie in (0, 1)")));
            }
        }
        if !(self.adam_eps > 0.0) || !(self.gradient_clip_norm > 0.0) {
            return Err(TrainError::Config(
                "adam eps and clip norm must be positive".into(),
            ));
        }
        if self.batch_size == 0 || self.max_steps == 0 || self.val_every == 0 {
            return Err(TrainError::Config(
                "batch size, max steps, and validation cadence must be positive".into(),
            ));
        }
        if self.early_stop_patience == 0 {
            return Err(TrainError::Config("patience must be positive".into()));
        }
        Ok(())
    }
}

/// First/second moment accumulators, one pair of f64 buffers per parameter
/// group. Updates run in f64 regardless of the parameter precision.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(group_sizes: &[usize]) -> Self {
        AdamState {
            m: group_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: group_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn for_model(params: &ModelParams<f32>) -> Self {
        let sizes: Vec<usize> = params.groups().iter().map(|(_, t)| t.numel()).collect();
        Self::new(&sizes)
    }

    pub fn for_head(params: &HeadParams<f32>) -> Self {
        let sizes: Vec<usize> = params.groups().iter().map(|(_, t)| t.numel()).collect();
        Self::new(&sizes)
    }
}

/// Scales all gradients so their joint Euclidean norm is at most max_norm.
/// Returns the pre-clip norm.
pub fn clip_gradients(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for &v in g {
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let f = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g {
                *v *= f;
            }
        }
    }
    norm
}

/// One optimizer update over a set of parameter tensors given their
/// gradients, in canonical group order.
fn adam_update(
    groups: &mut [(String, &mut Tensor<f32>)],
    grads: &[Vec<f64>],
    opt: &mut AdamState,
    cfg: &TrainConfig,
) {
    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - cfg.adam_beta1.powi(t);
    let bc2 = 1.0 - cfg.adam_beta2.powi(t);
    for (gi, (_, tensor)) in groups.iter_mut().enumerate() {
        let m = &mut opt.m[gi];
        let v = &mut opt.v[gi];
        let g = &grads[gi];
        let data = tensor.data_mut();
        for j in 0..data.len() {
            m[j] = cfg.adam_beta1 * m[j] + (1.0 - cfg.adam_beta1) * g[j];
            v[j] = cfg.adam_beta2 * v[j] + (1.0 - cfg.adam_beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            let step = cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
            data[j] = (data[j] as f64 - step) as f32;
        }
    }
}

/// Gradients per group in canonical order; groups without a path to the
/// loss get zeros.
fn collect_grads(
    grads: &crate::tape::Grads<f32>,
    vars: &[Var],
    sizes: &[usize],
) -> Vec<Vec<f64>> {
    vars.iter()
        .zip(sizes)
        .map(|(&var, &n)| match grads.get(var) {
            Some(g) => g.iter().map(|&v| v as f64).collect(),
            None => vec![0.0; n],
        })
        .collect()
}

/// One standardized training batch.
#[derive(Debug, Clone)]
pub struct Batch {
    /// [B, T_in, C, N]
    pub history: Tensor<f32>,
    /// [B, T_out, C, N]
    pub target: Tensor<f32>,
}

/// Standardized sequences plus everything needed to train on them.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub channel_names: Vec<String>,
    /// Standardized [T, C, N] sequences.
    pub sequences: Vec<NodeTensor>,
    /// [S, N]
    pub statics: Tensor<f32>,
    pub stats: ChannelStats,
    pub train_seqs: Vec<usize>,
    pub val_seqs: Vec<usize>,
    pub test_seqs: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One (history, target) window: sequence index and first history frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowRef {
    pub seq: usize,
    pub start: usize,
}

impl Corpus {
    /// Standardizes a synthetic corpus: channel statistics come from the
    /// training split only, then every sequence is standardized with them.
    pub fn from_synth(data: &SynthData, n_static: usize) -> Result<Self, TrainError> {
        let (train_seqs, val_seqs, test_seqs) = split_by_sequence(data.sequences.len());
        if train_seqs.is_empty() {
            return Err(TrainError::Data("no training sequences".into()));
        }
        let c = data.channel_names.len();
        let mut w = WelfordState::new(c);
        for &s in &train_seqs {
            let seq = &data.sequences[s];
            for t in 0..seq.t {
                w.update_slice(seq.time_slice(t), seq.n);
            }
        }
        let stats = w.finalize(&data.channel_names);
        let sequences: Vec<NodeTensor> = data
            .sequences
            .iter()
            .map(|s| crate::stats::standardize(s, &stats))
            .collect::<Result<_, _>>()?;
        if data.statics.len() != n_static * data.n_nodes {
            return Err(TrainError::Data(format!(
                "statics carry {} values, expected {} x {}",
                data.statics.len(),
                n_static,
                data.n_nodes
            )));
        }
        let statics = Tensor::new(
            vec![n_static, data.n_nodes],
            data.statics.clone(),
        );
        Ok(Corpus {
            channel_names: data.channel_names.clone(),
            sequences,
            statics,
            stats,
            train_seqs,
            val_seqs,
            test_seqs,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.statics.shape()[1]
    }

    fn seqs_of(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train_seqs,
            Split::Val => &self.val_seqs,
            Split::Test => &self.test_seqs,
        }
    }

    /// All (history, target) windows of a split, in sequence order.
    pub fn windows(&self, split: Split, t_in: usize, t_out: usize) -> Vec<WindowRef> {
        let mut out = Vec::new();
        for &s in self.seqs_of(split) {
            let t = self.sequences[s].t;
            for start in 0..t.saturating_sub(t_in + t_out - 1) {
                out.push(WindowRef { seq: s, start });
            }
        }
        out
    }

    /// Gathers windows into one batch. History frames are the t_in frames
    /// from `start`, targets the t_out frames after them.
    pub fn batch(&self, refs: &[WindowRef], t_in: usize, t_out: usize) -> Batch {
        let b = refs.len();
        let c = self.channel_names.len();
        let n = self.n_nodes();
        let mut history = Tensor::zeros(vec![b, t_in, c, n]);
        let mut target = Tensor::zeros(vec![b, t_out, c, n]);
        for (bi, r) in refs.iter().enumerate() {
            let seq = &self.sequences[r.seq];
            let frame = c * n;
            let hist_src = &seq.data[r.start * frame..(r.start + t_in) * frame];
            history.data_mut()[bi * t_in * frame..(bi + 1) * t_in * frame]
                .copy_from_slice(hist_src);
            let tgt_src =
                &seq.data[(r.start + t_in) * frame..(r.start + t_in + t_out) * frame];
            target.data_mut()[bi * t_out * frame..(bi + 1) * t_out * frame]
                .copy_from_slice(tgt_src);
        }
        Batch { history, target }
    }
}

/// One core update: forward, standardized MSE, backward, global-norm clip,
/// adaptive moment step. Returns the pre-update loss.
pub fn train_step(
    params: &mut ModelParams<f32>,
    opt: &mut AdamState,
    batch: &Batch,
    statics: &Tensor<f32>,
    edges: &GraphEdges,
    cfg: &TrainConfig,
) -> Result<f64, TrainError> {
    let mut tape: Tape<f32> = Tape::new();
    let out = forward(&mut tape, params, &batch.history, statics, edges)?;
    let tv = tape.leaf(batch.target.clone());
    let loss_var = loss_core_tape(&mut tape, out.pred, tv);
    let loss = tape.value(loss_var).data()[0] as f64;
    if !loss.is_finite() {
        return Err(TrainError::NonFinite {
            step: opt.step + 1,
            loss,
        });
    }
    let grads = tape.backward(loss_var);
    let sizes: Vec<usize> = params.groups().iter().map(|(_, t)| t.numel()).collect();
    let mut g = collect_grads(&grads, &out.params.group_vars(), &sizes);
    clip_gradients(&mut g, cfg.gradient_clip_norm);
    adam_update(&mut params.groups_mut(), &g, opt, cfg);
    Ok(loss)
}

/// Forward-only standardized MSE over a window set, averaged per window.
pub fn core_loss_on(
    params: &ModelParams<f32>,
    corpus: &Corpus,
    refs: &[WindowRef],
    edges: &GraphEdges,
    batch_size: usize,
) -> Result<f64, TrainError> {
    if refs.is_empty() {
        return Err(TrainError::Data("empty evaluation window set".into()));
    }
    let t_in = params.config.t_in;
    let t_out = params.config.t_out;
    let mut sum = 0.0f64;
    for chunk in refs.chunks(batch_size) {
        let b = corpus.batch(chunk, t_in, t_out);
        let mut tape: Tape<f32> = Tape::new();
        let out = forward(&mut tape, params, &b.history, &corpus.statics, edges)?;
        let tv = tape.leaf(b.target.clone());
        let l = loss_core_tape(&mut tape, out.pred, tv);
        sum += tape.value(l).data()[0] as f64 * chunk.len() as f64;
    }
    Ok(sum / refs.len() as f64)
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRow {
    pub step: usize,
    pub loss: f64,
    /// Loss term breakdown where the objective has named parts (wind:
    /// component/magnitude/direction). Empty for plain MSE objectives.
    pub terms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub rows: Vec<TrainLogRow>,
    /// (step, validation loss) at each validation.
    pub validations: Vec<(usize, f64)>,
    pub best_val: Option<f64>,
    pub stopped_early: bool,
}

impl TrainReport {
    /// Per-step log as CSV. Term columns appear only when any row has
    /// terms.
    pub fn to_csv(&self) -> String {
        let n_terms = self.rows.iter().map(|r| r.terms.len()).max().unwrap_or(0);
        let mut s = String::from("step,loss");
        for i in 0..n_terms {
            s.push_str(&format!(",term{}", i + 1));
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("{},{}", r.step, r.loss));
            for i in 0..n_terms {
                match r.terms.get(i) {
                    Some(t) => s.push_str(&format!(",{t}")),
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Deterministic epoch-shuffled stream of training windows.
struct WindowStream {
    refs: Vec<WindowRef>,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl WindowStream {
    fn new(refs: Vec<WindowRef>, seed: u64) -> Self {
        let mut s = WindowStream {
            order: (0..refs.len()).collect(),
            refs,
            cursor: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    fn next_batch(&mut self, size: usize) -> Vec<WindowRef> {
        let mut out = Vec::with_capacity(size);
        for _ in 0..size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.refs[self.order[self.cursor]]);
            self.cursor += 1;
        }
        out
    }
}

/// Runs validation bookkeeping shared by core and head training. Returns
/// true when patience is exhausted.
struct EarlyStop {
    best: Option<f64>,
    stale: usize,
    patience: usize,
}

impl EarlyStop {
    fn new(patience: usize) -> Self {
        EarlyStop {
            best: None,
            stale: 0,
            patience,
        }
    }

    fn observe(&mut self, val: f64) -> bool {
        match self.best {
            Some(b) if val >= b => {
                self.stale += 1;
            }
            _ => {
                self.best = Some(val);
                self.stale = 0;
            }
        }
        self.stale >= self.patience
    }
}

/// Trains the core on the standardized MSE over all channels, validating
/// every `val_every` steps and stopping early after `early_stop_patience`
/// stagnant validations.
pub fn train_core(
    params: &mut ModelParams<f32>,
    corpus: &Corpus,
    edges: &GraphEdges,
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    let t_in = params.config.t_in;
    let t_out = params.config.t_out;
    let train_refs = corpus.windows(Split::Train, t_in, t_out);
    if train_refs.is_empty() {
        return Err(TrainError::Data("no training windows".into()));
    }
    let val_refs = corpus.windows(Split::Val, t_in, t_out);
    let mut stream = WindowStream::new(train_refs, cfg.seed);
    let mut opt = AdamState::for_model(params);
    let mut report = TrainReport {
        rows: Vec::new(),
        validations: Vec::new(),
        best_val: None,
        stopped_early: false,
    };
    let mut stopper = EarlyStop::new(cfg.early_stop_patience);
    for step in 1..=cfg.max_steps {
        let refs = stream.next_batch(cfg.batch_size);
        let batch = corpus.batch(&refs, t_in, t_out);
        let loss = train_step(params, &mut opt, &batch, &corpus.statics, edges, cfg)?;
        report.rows.push(TrainLogRow {
            step,
            loss,
            terms: Vec::new(),
        });
        if step % cfg.val_every == 0 && !val_refs.is_empty() {
            let val = core_loss_on(params, corpus, &val_refs, edges, cfg.batch_size)?;
            report.validations.push((step, val));
            if stopper.observe(val) {
                report.stopped_early = true;
                break;
            }
        }
    }
    report.best_val = stopper.best;
    Ok(report)
}

/// Per-window frozen-core features [N, V_tok, E], computed in one batched
/// sweep so head training never reruns the core.
fn frozen_features(
    core: &ModelParams<f32>,
    corpus: &Corpus,
    refs: &[WindowRef],
    edges: &GraphEdges,
    batch_size: usize,
) -> Result<Vec<Tensor<f32>>, TrainError> {
    let t_in = core.config.t_in;
    let t_out = core.config.t_out;
    let mut out = Vec::with_capacity(refs.len());
    for chunk in refs.chunks(batch_size) {
        let b = corpus.batch(chunk, t_in, t_out);
        let mut tape: Tape<f32> = Tape::new();
        let fw = forward(&mut tape, core, &b.history, &corpus.statics, edges)?;
        let feats = tape.value(fw.features);
        let shp = feats.shape().to_vec();
        let per = shp[1] * shp[2] * shp[3];
        for bi in 0..chunk.len() {
            out.push(Tensor::new(
                vec![1, shp[1], shp[2], shp[3]],
                feats.data()[bi * per..(bi + 1) * per].to_vec(),
            ));
        }
    }
    Ok(out)
}

/// Destandardized per-channel frame [B, N] pulled from a standardized
/// target tensor.
fn destd_channel(target: &Tensor<f32>, ci: usize, mean: f64, std: f64) -> Tensor<f32> {
    let shp = target.shape();
    let (b, c, n) = (shp[0], shp[2], shp[3]);
    Tensor::from_fn(vec![b, n], |i| {
        let (bi, ni) = (i / n, i % n);
        (target.data()[(bi * c + ci) * n + ni] as f64 * std + mean) as f32
    })
}

/// The head objective on one batch: destandardizes head output and targets
/// on the tape and applies the task loss. Returns the loss var plus the
/// term breakdown for logging.
fn head_batch_loss(
    tape: &mut Tape<f32>,
    head_out: Var,
    target: &Tensor<f32>,
    kind: HeadKind,
    stats: &ChannelStats,
    channel_names: &[String],
    precip_cfg: &PrecipLossConfig,
) -> Result<(Var, Vec<f64>), TrainError> {
    let ci_of = |name: &str| -> Result<usize, TrainError> {
        channel_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| TrainError::Data(format!("corpus has no channel {name}")))
    };
    match kind {
        HeadKind::Wind => {
            let (mu, su) = stats.lookup("u10")?;
            let (mv, sv) = stats.lookup("v10")?;
            let step1 = tape.index_axis(head_out, 1, 0);
            let pu_std = tape.index_axis(step1, 1, 0);
            let pv_std = tape.index_axis(step1, 1, 1);
            let pu = tape.affine_const(pu_std, su, mu);
            let pv = tape.affine_const(pv_std, sv, mv);
            let tu = destd_channel(target, ci_of("u10")?, mu, su);
            let tv = destd_channel(target, ci_of("v10")?, mv, sv);
            let tuv = tape.leaf(tu);
            let tvv = tape.leaf(tv);
            let loss = loss_wind_tape(tape, pu, pv, tuv, tvv);
            let to_vec =
                |v: Var, t: &Tape<f32>| t.value(v).data().iter().map(|&x| x as f64).collect();
            let pred = WindPair::new(to_vec(pu, tape), to_vec(pv, tape))
                .map_err(TrainError::from)?;
            let truth = WindPair::new(to_vec(tuv, tape), to_vec(tvv, tape))
                .map_err(TrainError::from)?;
            let terms = loss_wind_terms(&pred, &truth)?;
            Ok((loss, terms.to_vec()))
        }
        HeadKind::Precip => {
            let (m, s) = stats.lookup("tp_log")?;
            let step1 = tape.index_axis(head_out, 1, 0);
            let p_std = tape.index_axis(step1, 1, 0);
            let p = tape.affine_const(p_std, s, m);
            let t = destd_channel(target, ci_of("tp_log")?, m, s);
            let tv = tape.leaf(t);
            let loss = loss_precip_tape(tape, p, tv, precip_cfg);
            let lv = tape.value(loss).data()[0] as f64;
            Ok((loss, vec![lv]))
        }
    }
}

/// Head loss over a fixed window set using cached core features.
fn head_loss_on(
    head: &HeadParams<f32>,
    features: &[Tensor<f32>],
    targets: &[Tensor<f32>],
    kind: HeadKind,
    stats: &ChannelStats,
    channel_names: &[String],
    precip_cfg: &PrecipLossConfig,
) -> Result<f64, TrainError> {
    let mut sum = 0.0f64;
    for (f, t) in features.iter().zip(targets) {
        let mut tape: Tape<f32> = Tape::new();
        let hv = head.register(&mut tape);
        let fv = tape.leaf(f.clone());
        let out = head_forward(&mut tape, fv, &hv, kind)?;
        let (loss, _) =
            head_batch_loss(&mut tape, out, t, kind, stats, channel_names, precip_cfg)?;
        sum += tape.value(loss).data()[0] as f64;
    }
    Ok(sum / features.len().max(1) as f64)
}

/// Fine-tunes one task head. With `joint` false (the default protocol) the
/// core is frozen: its features are computed once per window and reused
/// every step. With `joint` true the core trains along with the head.
pub fn fine_tune_head(
    core: &mut ModelParams<f32>,
    head: &mut HeadParams<f32>,
    corpus: &Corpus,
    edges: &GraphEdges,
    cfg: &TrainConfig,
    precip_cfg: &PrecipLossConfig,
    joint: bool,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    let kind = head.kind;
    let t_in = core.config.t_in;
    let t_out = core.config.t_out;
    if t_out != 1 {
        return Err(TrainError::Data(
            "head fine-tuning expects single-step targets".into(),
        ));
    }
    let train_refs = corpus.windows(Split::Train, t_in, t_out);
    if train_refs.is_empty() {
        return Err(TrainError::Data("no training windows".into()));
    }
    let val_refs = corpus.windows(Split::Val, t_in, t_out);

    let mut report = TrainReport {
        rows: Vec::new(),
        validations: Vec::new(),
        best_val: None,
        stopped_early: false,
    };
    let mut stopper = EarlyStop::new(cfg.early_stop_patience);
    let mut stream = WindowStream::new(train_refs.clone(), cfg.seed);

    if joint {
        let mut sizes: Vec<usize> = core.groups().iter().map(|(_, t)| t.numel()).collect();
        sizes.extend(head.groups().iter().map(|(_, t)| t.numel()));
        let mut opt = AdamState::new(&sizes);
        for step in 1..=cfg.max_steps {
            let refs = stream.next_batch(cfg.batch_size);
            let batch = corpus.batch(&refs, t_in, t_out);
            let mut tape: Tape<f32> = Tape::new();
            let fw = forward(&mut tape, core, &batch.history, &corpus.statics, edges)?;
            let hv = head.register(&mut tape);
            let out = head_forward(&mut tape, fw.features, &hv, kind)?;
            let (loss_var, terms) = head_batch_loss(
                &mut tape,
                out,
                &batch.target,
                kind,
                stats_of(corpus),
                &corpus.channel_names,
                precip_cfg,
            )?;
            let loss = tape.value(loss_var).data()[0] as f64;
            if !loss.is_finite() {
                return Err(TrainError::NonFinite {
                    step: opt.step + 1,
                    loss,
                });
            }
            let grads = tape.backward(loss_var);
            let mut vars = fw.params.group_vars();
            vars.extend([hv.w1, hv.b1, hv.w2, hv.b2]);
            let mut g = collect_grads(&grads, &vars, &sizes);
            clip_gradients(&mut g, cfg.gradient_clip_norm);
            let mut groups = core.groups_mut();
            groups.extend(head.groups_mut());
            adam_update(&mut groups, &g, &mut opt, cfg);
            report.rows.push(TrainLogRow { step, loss, terms });
            if step % cfg.val_every == 0 && !val_refs.is_empty() {
                let val_feats = frozen_features(core, corpus, &val_refs, edges, cfg.batch_size)?;
                let val_tgts: Vec<Tensor<f32>> = val_refs
                    .iter()
                    .map(|r| corpus.batch(&[*r], t_in, t_out).target)
                    .collect();
                let val = head_loss_on(
                    head,
                    &val_feats,
                    &val_tgts,
                    kind,
                    stats_of(corpus),
                    &corpus.channel_names,
                    precip_cfg,
                )?;
                report.validations.push((step, val));
                if stopper.observe(val) {
                    report.stopped_early = true;
                    break;
                }
            }
        }
        report.best_val = stopper.best;
        return Ok(report);
    }

    // Frozen core: cache features and targets per window up front.
    let train_feats = frozen_features(core, corpus, &train_refs, edges, cfg.batch_size)?;
    let train_tgts: Vec<Tensor<f32>> = train_refs
        .iter()
        .map(|r| corpus.batch(&[*r], t_in, t_out).target)
        .collect();
    let (val_feats, val_tgts) = if val_refs.is_empty() {
        (Vec::new(), Vec::new())
    } else {
        let f = frozen_features(core, corpus, &val_refs, edges, cfg.batch_size)?;
        let t: Vec<Tensor<f32>> = val_refs
            .iter()
            .map(|r| corpus.batch(&[*r], t_in, t_out).target)
            .collect();
        (f, t)
    };
    // The stream indexes into train_refs positions, so remap through it.
    let positions: std::collections::HashMap<(usize, usize), usize> = train_refs
        .iter()
        .enumerate()
        .map(|(i, r)| ((r.seq, r.start), i))
        .collect();
    let mut opt = AdamState::for_head(head);
    for step in 1..=cfg.max_steps {
        let refs = stream.next_batch(cfg.batch_size);
        let mut tape: Tape<f32> = Tape::new();
        let hv = head.register(&mut tape);
        // Batch the cached features along the leading axis.
        let idxs: Vec<usize> = refs.iter().map(|r| positions[&(r.seq, r.start)]).collect();
        let f0 = &train_feats[idxs[0]];
        let per = f0.numel();
        let mut fdata = Vec::with_capacity(per * idxs.len());
        for &i in &idxs {
            fdata.extend_from_slice(train_feats[i].data());
        }
        let mut fshape = f0.shape().to_vec();
        fshape[0] = idxs.len();
        let fv = tape.leaf(Tensor::new(fshape, fdata));
        let t0 = &train_tgts[idxs[0]];
        let mut tdata = Vec::with_capacity(t0.numel() * idxs.len());
        for &i in &idxs {
            tdata.extend_from_slice(train_tgts[i].data());
        }
        let mut tshape = t0.shape().to_vec();
        tshape[0] = idxs.len();
        let target = Tensor::new(tshape, tdata);

        let out = head_forward(&mut tape, fv, &hv, kind)?;
        let (loss_var, terms) = head_batch_loss(
            &mut tape,
            out,
            &target,
            kind,
            stats_of(corpus),
            &corpus.channel_names,
            precip_cfg,
        )?;
        let loss = tape.value(loss_var).data()[0] as f64;
        if !loss.is_finite() {
            return Err(TrainError::NonFinite {
                step: opt.step + 1,
                loss,
            });
        }
        let grads = tape.backward(loss_var);
        let sizes: Vec<usize> = head.groups().iter().map(|(_, t)| t.numel()).collect();
        let vars = [hv.w1, hv.b1, hv.w2, hv.b2];
        let mut g = collect_grads(&grads, &vars, &sizes);
        clip_gradients(&mut g, cfg.gradient_clip_norm);
        adam_update(&mut head.groups_mut(), &g, &mut opt, cfg);
        report.rows.push(TrainLogRow { step, loss, terms });
        if step % cfg.val_every == 0 && !val_feats.is_empty() {
            let val = head_loss_on(
                head,
                &val_feats,
                &val_tgts,
                kind,
                stats_of(corpus),
                &corpus.channel_names,
                precip_cfg,
            )?;
            report.validations.push((step, val));
            if stopper.observe(val) {
                report.stopped_early = true;
                break;
            }
        }
    }
    report.best_val = stopper.best;
    Ok(report)
}

fn stats_of(corpus: &Corpus) -> &ChannelStats {
    &corpus.stats
}

/// The core's own task loss on a window set: its u10/v10 prediction scored
/// with the composite wind loss, or its tp_log prediction with the weighted
/// precipitation loss. The head fine-tune must beat this.
pub fn core_task_loss(
    core: &ModelParams<f32>,
    corpus: &Corpus,
    refs: &[WindowRef],
    edges: &GraphEdges,
    kind: HeadKind,
    precip_cfg: &PrecipLossConfig,
    batch_size: usize,
) -> Result<f64, TrainError> {
    if refs.is_empty() {
        return Err(TrainError::Data("empty evaluation window set".into()));
    }
    let t_in = core.config.t_in;
    let t_out = core.config.t_out;
    let ci_of = |name: &str| -> Result<usize, TrainError> {
        corpus
            .channel_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| TrainError::Data(format!("corpus has no channel {name}")))
    };
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for chunk in refs.chunks(batch_size) {
        let b = corpus.batch(chunk, t_in, t_out);
        let mut tape: Tape<f32> = Tape::new();
        let fw = forward(&mut tape, core, &b.history, &corpus.statics, edges)?;
        let pred = tape.value(fw.pred);
        let shp = pred.shape().to_vec();
        let (bsz, c, n) = (shp[0], shp[2], shp[3]);
        let grab = |ci: usize, src: &Tensor<f32>| -> Vec<f64> {
            (0..bsz * n)
                .map(|i| src.data()[((i / n) * c + ci) * n + i % n] as f64)
                .collect()
        };
        match kind {
            HeadKind::Wind => {
                let (mu, su) = corpus.stats.lookup("u10")?;
                let (mv, sv) = corpus.stats.lookup("v10")?;
                let destd = |v: Vec<f64>, m: f64, s: f64| -> Vec<f64> {
                    v.into_iter().map(|x| x * s + m).collect()
                };
                let pu = destd(grab(ci_of("u10")?, pred), mu, su);
                let pv = destd(grab(ci_of("v10")?, pred), mv, sv);
                let tu = destd(grab(ci_of("u10")?, &b.target), mu, su);
                let tv = destd(grab(ci_of("v10")?, &b.target), mv, sv);
                let l = crate::heads::loss_wind(
                    &WindPair::new(pu, pv)?,
                    &WindPair::new(tu, tv)?,
                )?;
                sum += l * chunk.len() as f64;
            }
            HeadKind::Precip => {
                let (m, s) = corpus.stats.lookup("tp_log")?;
                let p: Vec<f64> = grab(ci_of("tp_log")?, pred)
                    .into_iter()
                    .map(|x| x * s + m)
                    .collect();
                let t: Vec<f64> = grab(ci_of("tp_log")?, &b.target)
                    .into_iter()
                    .map(|x| x * s + m)
                    .collect();
                sum += crate::heads::loss_precip(&p, &t, precip_cfg)? * chunk.len() as f64;
            }
        }
        count += chunk.len();
    }
    Ok(sum / count as f64)
}
