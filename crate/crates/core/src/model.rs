//! Axial graph-attention forecaster: input staging, static injection, a
//! stack of blocks alternating vertical self-attention with horizontal graph
//! attention, and per-token output projection.

use std::rc::Rc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::TriMesh;
use crate::tape::{EdgeIndex, Scalar, Tape, Tensor, Var};

/// Epsilon inside every layer normalization.
pub const LN_EPS: f64 = 1e-5;
/// Negative slope of the attention logit rectifier.
pub const ATTN_NEG_SLOPE: f64 = 0.2;
/// Half-width of the uniform init for attention vectors.
const ATTN_VEC_INIT: f64 = 0.1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Canonical dynamic channel order: six surface channels followed by
/// temperature, wind components, humidity, and geopotential on the three
/// pressure levels, top of the stack last.
pub fn canonical_channels() -> Vec<String> {
    let mut names: Vec<String> = ["t2m", "d2m", "msl", "u10", "v10", "tp_log"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for level in [850u32, 500, 300] {
        for v in ["t", "u", "v", "r", "z"] {
            names.push(format!("{v}{level}"));
        }
    }
    names
}

/// Assignment of dynamic channels to vertical tokens. Tokens are attended
/// over as a column; their channel sets must partition 0..C.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub tokens: Vec<(String, Vec<usize>)>,
}

impl Default for TokenLayout {
    /// Surface token plus one token per pressure level over the canonical
    /// 21-channel order.
    fn default() -> Self {
        TokenLayout {
            tokens: vec![
                ("surface".to_string(), (0..6).collect()),
                ("l850".to_string(), (6..11).collect()),
                ("l500".to_string(), (11..16).collect()),
                ("l300".to_string(), (16..21).collect()),
            ],
        }
    }
}

impl TokenLayout {
    pub fn n_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn n_channels(&self) -> usize {
        self.tokens.iter().map(|(_, c)| c.len()).sum()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.tokens.is_empty() {
            return Err(ModelError::InvalidConfig("layout has no tokens".into()));
        }
        let mut seen: Vec<usize> = self.tokens.iter().flat_map(|(_, c)| c.clone()).collect();
        seen.sort_unstable();
        let expect: Vec<usize> = (0..self.n_channels()).collect();
        if seen != expect {
            return Err(ModelError::InvalidConfig(
                "token channel sets must partition the channel range".into(),
            ));
        }
        Ok(())
    }

    fn channel_sets(&self) -> Rc<Vec<Vec<usize>>> {
        Rc::new(self.tokens.iter().map(|(_, c)| c.clone()).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_width: usize,
    pub blocks: usize,
    pub attention_heads: usize,
    pub ffn_width: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_width: 128,
            blocks: 8,
            attention_heads: 4,
            ffn_width: 256,
            t_in: 2,
            t_out: 1,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.embed_width == 0 || self.attention_heads == 0 || self.ffn_width == 0 {
            return Err(ModelError::InvalidConfig(
                "widths and head count must be positive".into(),
            ));
        }
        if self.embed_width % self.attention_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "embed width {} must be divisible by {} heads",
                self.embed_width, self.attention_heads
            )));
        }
        if self.blocks == 0 {
            return Err(ModelError::InvalidConfig("need at least one block".into()));
        }
        if self.t_in == 0 || self.t_out == 0 {
            return Err(ModelError::InvalidConfig(
                "history and forecast lengths must be positive".into(),
            ));
        }
        if self.dropout != 0.0 {
            return Err(ModelError::InvalidConfig(
                "only dropout 0.0 is supported".into(),
            ));
        }
        Ok(())
    }
}

/// Mesh connectivity in the grouped-by-destination form the attention op
/// consumes. Self-loops are always present.
#[derive(Debug, Clone)]
pub struct GraphEdges {
    pub index: Rc<EdgeIndex>,
}

impl GraphEdges {
    pub fn from_mesh(mesh: &TriMesh) -> Self {
        GraphEdges {
            index: Rc::new(EdgeIndex::from_undirected(
                mesh.n_vertices(),
                &mesh.edges,
            )),
        }
    }

    pub fn from_undirected(n_nodes: usize, edges: &[[u32; 2]]) -> Self {
        GraphEdges {
            index: Rc::new(EdgeIndex::from_undirected(n_nodes, edges)),
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.index.n_nodes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<S> {
    pub inj_scale: Tensor<S>,
    pub inj_offset: Tensor<S>,
    pub vert_wq: Tensor<S>,
    pub vert_bq: Tensor<S>,
    pub vert_wk: Tensor<S>,
    pub vert_bk: Tensor<S>,
    pub vert_wv: Tensor<S>,
    pub vert_bv: Tensor<S>,
    pub vert_wo: Tensor<S>,
    pub vert_bo: Tensor<S>,
    pub vert_scale: Tensor<S>,
    pub vert_offset: Tensor<S>,
    pub horz_w: Vec<Tensor<S>>,
    pub horz_a_center: Vec<Tensor<S>>,
    pub horz_a_neigh: Vec<Tensor<S>>,
    pub horz_bias: Tensor<S>,
    pub horz_scale: Tensor<S>,
    pub horz_offset: Tensor<S>,
    pub ffn_w1: Tensor<S>,
    pub ffn_b1: Tensor<S>,
    pub ffn_w2: Tensor<S>,
    pub ffn_b2: Tensor<S>,
    pub ffn_scale: Tensor<S>,
    pub ffn_offset: Tensor<S>,
}

/// Every learnable tensor of the forecaster, grouped by role. The group
/// order produced by `groups` is the canonical checkpoint and optimizer
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<S> {
    pub config: ModelConfig,
    pub layout: TokenLayout,
    pub n_static: usize,
    pub stage_w: Vec<Tensor<S>>,
    pub stage_b: Vec<Tensor<S>>,
    pub static_w1: Tensor<S>,
    pub static_b1: Tensor<S>,
    pub static_scale: Tensor<S>,
    pub static_offset: Tensor<S>,
    pub static_w2: Tensor<S>,
    pub static_b2: Tensor<S>,
    pub blocks: Vec<BlockParams<S>>,
    pub out_w: Vec<Tensor<S>>,
    pub out_b: Vec<Tensor<S>>,
}

fn uniform_tensor<S: Scalar>(
    rng: &mut ChaCha8Rng,
    shape: Vec<usize>,
    half_width: f64,
) -> Tensor<S> {
    Tensor::from_fn(shape, |_| {
        S::from_f64((rng.gen::<f64>() * 2.0 - 1.0) * half_width)
    })
}

/// Uniform fan-in init: U(-1/sqrt(in), 1/sqrt(in)) for a [out, in] matrix.
fn fan_in_tensor<S: Scalar>(rng: &mut ChaCha8Rng, out: usize, inp: usize) -> Tensor<S> {
    let hw = 1.0 / (inp as f64).sqrt();
    uniform_tensor(rng, vec![out, inp], hw)
}

impl<S: Scalar> ModelParams<S> {
    /// Seeded random init: fan-in uniform projections, small-uniform
    /// attention vectors, normalization scales one and offsets zero. The
    /// draw order is fixed, so a seed pins every parameter bit.
    pub fn init(
        config: &ModelConfig,
        layout: &TokenLayout,
        n_static: usize,
        seed: u64,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        layout.validate()?;
        if n_static == 0 {
            return Err(ModelError::InvalidConfig(
                "need at least one static channel".into(),
            ));
        }
        let e = config.embed_width;
        let h = config.attention_heads;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stage_w = Vec::new();
        let mut stage_b = Vec::new();
        for (_, chans) in &layout.tokens {
            stage_w.push(fan_in_tensor(&mut rng, e, config.t_in * chans.len()));
            stage_b.push(Tensor::zeros(vec![e]));
        }
        let static_w1 = fan_in_tensor(&mut rng, e, n_static);
        let static_b1 = Tensor::zeros(vec![e]);
        let static_scale = Tensor::full(vec![e], S::ONE);
        let static_offset = Tensor::zeros(vec![e]);
        let static_w2 = fan_in_tensor(&mut rng, e, e);
        let static_b2 = Tensor::zeros(vec![e]);
        let mut blocks = Vec::new();
        for _ in 0..config.blocks {
            let mut horz_w = Vec::new();
            let mut horz_a_center = Vec::new();
            let mut horz_a_neigh = Vec::new();
            for _ in 0..h {
                horz_w.push(fan_in_tensor(&mut rng, e, e));
            }
            for _ in 0..h {
                horz_a_center.push(uniform_tensor(&mut rng, vec![e], ATTN_VEC_INIT));
            }
            for _ in 0..h {
                horz_a_neigh.push(uniform_tensor(&mut rng, vec![e], ATTN_VEC_INIT));
            }
            blocks.push(BlockParams {
                inj_scale: Tensor::full(vec![e], S::ONE),
                inj_offset: Tensor::zeros(vec![e]),
                vert_wq: fan_in_tensor(&mut rng, e, e),
                vert_bq: Tensor::zeros(vec![e]),
                vert_wk: fan_in_tensor(&mut rng, e, e),
                vert_bk: Tensor::zeros(vec![e]),
                vert_wv: fan_in_tensor(&mut rng, e, e),
                vert_bv: Tensor::zeros(vec![e]),
                vert_wo: fan_in_tensor(&mut rng, e, e),
                vert_bo: Tensor::zeros(vec![e]),
                vert_scale: Tensor::full(vec![e], S::ONE),
                vert_offset: Tensor::zeros(vec![e]),
                horz_w,
                horz_a_center,
                horz_a_neigh,
                horz_bias: Tensor::zeros(vec![e]),
                horz_scale: Tensor::full(vec![e], S::ONE),
                horz_offset: Tensor::zeros(vec![e]),
                ffn_w1: fan_in_tensor(&mut rng, config.ffn_width, e),
                ffn_b1: Tensor::zeros(vec![config.ffn_width]),
                ffn_w2: fan_in_tensor(&mut rng, e, config.ffn_width),
                ffn_b2: Tensor::zeros(vec![e]),
                ffn_scale: Tensor::full(vec![e], S::ONE),
                ffn_offset: Tensor::zeros(vec![e]),
            });
        }
        let mut out_w = Vec::new();
        let mut out_b = Vec::new();
        for (_, chans) in &layout.tokens {
            out_w.push(fan_in_tensor(&mut rng, config.t_out * chans.len(), e));
            out_b.push(Tensor::zeros(vec![config.t_out * chans.len()]));
        }
        Ok(ModelParams {
            config: config.clone(),
            layout: layout.clone(),
            n_static,
            stage_w,
            stage_b,
            static_w1,
            static_b1,
            static_scale,
            static_offset,
            static_w2,
            static_b2,
            blocks,
            out_w,
            out_b,
        })
    }

    /// Parameters that make the whole network copy the last input frame:
    /// staging embeds the newest step of each token into the leading
    /// coordinates, all block sublayers are zeroed, and the output
    /// projection reads those coordinates back. Useful as a persistence
    /// baseline and as the residual-identity check.
    pub fn residual_identity(
        config: &ModelConfig,
        layout: &TokenLayout,
        n_static: usize,
    ) -> Result<Self, ModelError> {
        let mut p = Self::init(config, layout, n_static, 0)?;
        let e = config.embed_width;
        let widest = layout
            .tokens
            .iter()
            .map(|(_, c)| c.len())
            .max()
            .unwrap_or(0);
        if e < widest {
            return Err(ModelError::InvalidConfig(format!(
                "embed width {e} cannot carry a {widest}-channel token identically"
            )));
        }
        for (v, (_, chans)) in layout.tokens.iter().enumerate() {
            let cv = chans.len();
            let mut w = Tensor::zeros(vec![e, config.t_in * cv]);
            for c in 0..cv {
                w.data_mut()[c * (config.t_in * cv) + (config.t_in - 1) * cv + c] = S::ONE;
            }
            p.stage_w[v] = w;
            p.stage_b[v] = Tensor::zeros(vec![e]);
            let mut ow = Tensor::zeros(vec![config.t_out * cv, e]);
            for t in 0..config.t_out {
                for c in 0..cv {
                    ow.data_mut()[(t * cv + c) * e + c] = S::ONE;
                }
            }
            p.out_w[v] = ow;
            p.out_b[v] = Tensor::zeros(vec![config.t_out * cv]);
        }
        p.static_w1 = Tensor::zeros(vec![e, n_static]);
        p.static_w2 = Tensor::zeros(vec![e, e]);
        for b in &mut p.blocks {
            zero_block(b);
        }
        Ok(p)
    }

    /// Zeroes every per-block scale and offset, turning each block into the
    /// identity while leaving staging, statics tower, and output projection
    /// untouched.
    pub fn zero_block_scales(&mut self) {
        for b in &mut self.blocks {
            for t in [
                &mut b.inj_scale,
                &mut b.inj_offset,
                &mut b.vert_scale,
                &mut b.vert_offset,
                &mut b.horz_scale,
                &mut b.horz_offset,
                &mut b.ffn_scale,
                &mut b.ffn_offset,
            ] {
                for v in t.data_mut() {
                    *v = S::ZERO;
                }
            }
        }
    }

    /// Named views of every parameter group in canonical order.
    pub fn groups(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out: Vec<(String, &Tensor<S>)> = Vec::new();
        for (v, t) in self.stage_w.iter().enumerate() {
            out.push((format!("stage.w.{v}"), t));
        }
        for (v, t) in self.stage_b.iter().enumerate() {
            out.push((format!("stage.b.{v}"), t));
        }
        out.push(("static.w1".into(), &self.static_w1));
        out.push(("static.b1".into(), &self.static_b1));
        out.push(("static.scale".into(), &self.static_scale));
        out.push(("static.offset".into(), &self.static_offset));
        out.push(("static.w2".into(), &self.static_w2));
        out.push(("static.b2".into(), &self.static_b2));
        for (l, b) in self.blocks.iter().enumerate() {
            out.push((format!("block.{l}.inj.scale"), &b.inj_scale));
            out.push((format!("block.{l}.inj.offset"), &b.inj_offset));
            out.push((format!("block.{l}.vert.wq"), &b.vert_wq));
            out.push((format!("block.{l}.vert.bq"), &b.vert_bq));
            out.push((format!("block.{l}.vert.wk"), &b.vert_wk));
            out.push((format!("block.{l}.vert.bk"), &b.vert_bk));
            out.push((format!("block.{l}.vert.wv"), &b.vert_wv));
            out.push((format!("block.{l}.vert.bv"), &b.vert_bv));
            out.push((format!("block.{l}.vert.wo"), &b.vert_wo));
            out.push((format!("block.{l}.vert.bo"), &b.vert_bo));
            out.push((format!("block.{l}.vert.scale"), &b.vert_scale));
            out.push((format!("block.{l}.vert.offset"), &b.vert_offset));
            for (k, t) in b.horz_w.iter().enumerate() {
                out.push((format!("block.{l}.horz.w.{k}"), t));
            }
            for (k, t) in b.horz_a_center.iter().enumerate() {
                out.push((format!("block.{l}.horz.a_center.{k}"), t));
            }
            for (k, t) in b.horz_a_neigh.iter().enumerate() {
                out.push((format!("block.{l}.horz.a_neigh.{k}"), t));
            }
            out.push((format!("block.{l}.horz.bias"), &b.horz_bias));
            out.push((format!("block.{l}.horz.scale"), &b.horz_scale));
            out.push((format!("block.{l}.horz.offset"), &b.horz_offset));
            out.push((format!("block.{l}.ffn.w1"), &b.ffn_w1));
            out.push((format!("block.{l}.ffn.b1"), &b.ffn_b1));
            out.push((format!("block.{l}.ffn.w2"), &b.ffn_w2));
            out.push((format!("block.{l}.ffn.b2"), &b.ffn_b2));
            out.push((format!("block.{l}.ffn.scale"), &b.ffn_scale));
            out.push((format!("block.{l}.ffn.offset"), &b.ffn_offset));
        }
        for (v, t) in self.out_w.iter().enumerate() {
            out.push((format!("out.w.{v}"), t));
        }
        for (v, t) in self.out_b.iter().enumerate() {
            out.push((format!("out.b.{v}"), t));
        }
        out
    }

    /// Mutable views in the same canonical order as `groups`.
    pub fn groups_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out: Vec<(String, &mut Tensor<S>)> = Vec::new();
        for (v, t) in self.stage_w.iter_mut().enumerate() {
            out.push((format!("stage.w.{v}"), t));
        }
        for (v, t) in self.stage_b.iter_mut().enumerate() {
            out.push((format!("stage.b.{v}"), t));
        }
        out.push(("static.w1".into(), &mut self.static_w1));
        out.push(("static.b1".into(), &mut self.static_b1));
        out.push(("static.scale".into(), &mut self.static_scale));
        out.push(("static.offset".into(), &mut self.static_offset));
        out.push(("static.w2".into(), &mut self.static_w2));
        out.push(("static.b2".into(), &mut self.static_b2));
        for (l, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block.{l}.inj.scale"), &mut b.inj_scale));
            out.push((format!("block.{l}.inj.offset"), &mut b.inj_offset));
            out.push((format!("block.{l}.vert.wq"), &mut b.vert_wq));
            out.push((format!("block.{l}.vert.bq"), &mut b.vert_bq));
            out.push((format!("block.{l}.vert.wk"), &mut b.vert_wk));
            out.push((format!("block.{l}.vert.bk"), &mut b.vert_bk));
            out.push((format!("block.{l}.vert.wv"), &mut b.vert_wv));
            out.push((format!("block.{l}.vert.bv"), &mut b.vert_bv));
            out.push((format!("block.{l}.vert.wo"), &mut b.vert_wo));
            out.push((format!("block.{l}.vert.bo"), &mut b.vert_bo));
            out.push((format!("block.{l}.vert.scale"), &mut b.vert_scale));
            out.push((format!("block.{l}.vert.offset"), &mut b.vert_offset));
            for (k, t) in b.horz_w.iter_mut().enumerate() {
                out.push((format!("block.{l}.horz.w.{k}"), t));
            }
            for (k, t) in b.horz_a_center.iter_mut().enumerate() {
                out.push((format!("block.{l}.horz.a_center.{k}"), t));
            }
            for (k, t) in b.horz_a_neigh.iter_mut().enumerate() {
                out.push((format!("block.{l}.horz.a_neigh.{k}"), t));
            }
            out.push((format!("block.{l}.horz.bias"), &mut b.horz_bias));
            out.push((format!("block.{l}.horz.scale"), &mut b.horz_scale));
            out.push((format!("block.{l}.horz.offset"), &mut b.horz_offset));
            out.push((format!("block.{l}.ffn.w1"), &mut b.ffn_w1));
            out.push((format!("block.{l}.ffn.b1"), &mut b.ffn_b1));
            out.push((format!("block.{l}.ffn.w2"), &mut b.ffn_w2));
            out.push((format!("block.{l}.ffn.b2"), &mut b.ffn_b2));
            out.push((format!("block.{l}.ffn.scale"), &mut b.ffn_scale));
            out.push((format!("block.{l}.ffn.offset"), &mut b.ffn_offset));
        }
        for (v, t) in self.out_w.iter_mut().enumerate() {
            out.push((format!("out.w.{v}"), t));
        }
        for (v, t) in self.out_b.iter_mut().enumerate() {
            out.push((format!("out.b.{v}"), t));
        }
        out
    }

    /// Total scalars actually allocated across all groups.
    pub fn allocated_count(&self) -> usize {
        self.groups().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Element-converted copy, used to run f32 checkpoints under the f64
    /// verification oracles.
    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        let conv = |t: &Tensor<S>| -> Tensor<T> {
            Tensor::from_fn(t.shape().to_vec(), |i| T::from_f64(t.data()[i].to_f64()))
        };
        ModelParams {
            config: self.config.clone(),
            layout: self.layout.clone(),
            n_static: self.n_static,
            stage_w: self.stage_w.iter().map(&conv).collect(),
            stage_b: self.stage_b.iter().map(&conv).collect(),
            static_w1: conv(&self.static_w1),
            static_b1: conv(&self.static_b1),
            static_scale: conv(&self.static_scale),
            static_offset: conv(&self.static_offset),
            static_w2: conv(&self.static_w2),
            static_b2: conv(&self.static_b2),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    inj_scale: conv(&b.inj_scale),
                    inj_offset: conv(&b.inj_offset),
                    vert_wq: conv(&b.vert_wq),
                    vert_bq: conv(&b.vert_bq),
                    vert_wk: conv(&b.vert_wk),
                    vert_bk: conv(&b.vert_bk),
                    vert_wv: conv(&b.vert_wv),
                    vert_bv: conv(&b.vert_bv),
                    vert_wo: conv(&b.vert_wo),
                    vert_bo: conv(&b.vert_bo),
                    vert_scale: conv(&b.vert_scale),
                    vert_offset: conv(&b.vert_offset),
                    horz_w: b.horz_w.iter().map(&conv).collect(),
                    horz_a_center: b.horz_a_center.iter().map(&conv).collect(),
                    horz_a_neigh: b.horz_a_neigh.iter().map(&conv).collect(),
                    horz_bias: conv(&b.horz_bias),
                    horz_scale: conv(&b.horz_scale),
                    horz_offset: conv(&b.horz_offset),
                    ffn_w1: conv(&b.ffn_w1),
                    ffn_b1: conv(&b.ffn_b1),
                    ffn_w2: conv(&b.ffn_w2),
                    ffn_b2: conv(&b.ffn_b2),
                    ffn_scale: conv(&b.ffn_scale),
                    ffn_offset: conv(&b.ffn_offset),
                })
                .collect(),
            out_w: self.out_w.iter().map(&conv).collect(),
            out_b: self.out_b.iter().map(&conv).collect(),
        }
    }

    /// Registers every group as a tape leaf, in canonical group order.
    pub fn register(&self, tape: &mut Tape<S>) -> ParamVars {
        let stage_w = self.stage_w.iter().map(|t| tape.leaf(t.clone())).collect();
        let stage_b = self.stage_b.iter().map(|t| tape.leaf(t.clone())).collect();
        let statics = StaticVars {
            w1: tape.leaf(self.static_w1.clone()),
            b1: tape.leaf(self.static_b1.clone()),
            scale: tape.leaf(self.static_scale.clone()),
            offset: tape.leaf(self.static_offset.clone()),
            w2: tape.leaf(self.static_w2.clone()),
            b2: tape.leaf(self.static_b2.clone()),
        };
        let blocks = self
            .blocks
            .iter()
            .map(|b| BlockVars {
                inj_scale: tape.leaf(b.inj_scale.clone()),
                inj_offset: tape.leaf(b.inj_offset.clone()),
                vertical: VerticalVars {
                    wq: tape.leaf(b.vert_wq.clone()),
                    bq: tape.leaf(b.vert_bq.clone()),
                    wk: tape.leaf(b.vert_wk.clone()),
                    bk: tape.leaf(b.vert_bk.clone()),
                    wv: tape.leaf(b.vert_wv.clone()),
                    bv: tape.leaf(b.vert_bv.clone()),
                    wo: tape.leaf(b.vert_wo.clone()),
                    bo: tape.leaf(b.vert_bo.clone()),
                    scale: tape.leaf(b.vert_scale.clone()),
                    offset: tape.leaf(b.vert_offset.clone()),
                },
                horizontal: HorizontalVars {
                    w: b.horz_w.iter().map(|t| tape.leaf(t.clone())).collect(),
                    a_center: b
                        .horz_a_center
                        .iter()
                        .map(|t| tape.leaf(t.clone()))
                        .collect(),
                    a_neigh: b
                        .horz_a_neigh
                        .iter()
                        .map(|t| tape.leaf(t.clone()))
                        .collect(),
                    bias: tape.leaf(b.horz_bias.clone()),
                    scale: tape.leaf(b.horz_scale.clone()),
                    offset: tape.leaf(b.horz_offset.clone()),
                },
                ffn: FfnVars {
                    w1: tape.leaf(b.ffn_w1.clone()),
                    b1: tape.leaf(b.ffn_b1.clone()),
                    w2: tape.leaf(b.ffn_w2.clone()),
                    b2: tape.leaf(b.ffn_b2.clone()),
                    scale: tape.leaf(b.ffn_scale.clone()),
                    offset: tape.leaf(b.ffn_offset.clone()),
                },
            })
            .collect();
        let out_w = self.out_w.iter().map(|t| tape.leaf(t.clone())).collect();
        let out_b = self.out_b.iter().map(|t| tape.leaf(t.clone())).collect();
        ParamVars {
            stage_w,
            stage_b,
            statics,
            blocks,
            out_w,
            out_b,
        }
    }
}

fn zero_block<S: Scalar>(b: &mut BlockParams<S>) {
    let zero = |t: &mut Tensor<S>| {
        for v in t.data_mut() {
            *v = S::ZERO;
        }
    };
    zero(&mut b.inj_scale);
    zero(&mut b.inj_offset);
    zero(&mut b.vert_wq);
    zero(&mut b.vert_bq);
    zero(&mut b.vert_wk);
    zero(&mut b.vert_bk);
    zero(&mut b.vert_wv);
    zero(&mut b.vert_bv);
    zero(&mut b.vert_wo);
    zero(&mut b.vert_bo);
    zero(&mut b.vert_scale);
    zero(&mut b.vert_offset);
    for t in &mut b.horz_w {
        zero(t);
    }
    for t in &mut b.horz_a_center {
        zero(t);
    }
    for t in &mut b.horz_a_neigh {
        zero(t);
    }
    zero(&mut b.horz_bias);
    zero(&mut b.horz_scale);
    zero(&mut b.horz_offset);
    zero(&mut b.ffn_w1);
    zero(&mut b.ffn_b1);
    zero(&mut b.ffn_w2);
    zero(&mut b.ffn_b2);
    zero(&mut b.ffn_scale);
    zero(&mut b.ffn_offset);
}

#[derive(Debug, Clone)]
pub struct StaticVars {
    pub w1: Var,
    pub b1: Var,
    pub scale: Var,
    pub offset: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Debug, Clone)]
pub struct VerticalVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub scale: Var,
    pub offset: Var,
}

#[derive(Debug, Clone)]
pub struct HorizontalVars {
    pub w: Vec<Var>,
    pub a_center: Vec<Var>,
    pub a_neigh: Vec<Var>,
    pub bias: Var,
    pub scale: Var,
    pub offset: Var,
}

#[derive(Debug, Clone)]
pub struct FfnVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub scale: Var,
    pub offset: Var,
}

#[derive(Debug, Clone)]
pub struct BlockVars {
    pub inj_scale: Var,
    pub inj_offset: Var,
    pub vertical: VerticalVars,
    pub horizontal: HorizontalVars,
    pub ffn: FfnVars,
}

/// Tape handles of all registered parameter groups.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub stage_w: Vec<Var>,
    pub stage_b: Vec<Var>,
    pub statics: StaticVars,
    pub blocks: Vec<BlockVars>,
    pub out_w: Vec<Var>,
    pub out_b: Vec<Var>,
}

impl ParamVars {
    /// Vars in the same canonical order as `ModelParams::groups`.
    pub fn group_vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        out.extend(self.stage_w.iter().copied());
        out.extend(self.stage_b.iter().copied());
        out.extend([
            self.statics.w1,
            self.statics.b1,
            self.statics.scale,
            self.statics.offset,
            self.statics.w2,
            self.statics.b2,
        ]);
        for b in &self.blocks {
            out.extend([b.inj_scale, b.inj_offset]);
            let v = &b.vertical;
            out.extend([
                v.wq, v.bq, v.wk, v.bk, v.wv, v.bv, v.wo, v.bo, v.scale, v.offset,
            ]);
            let h = &b.horizontal;
            out.extend(h.w.iter().copied());
            out.extend(h.a_center.iter().copied());
            out.extend(h.a_neigh.iter().copied());
            out.extend([h.bias, h.scale, h.offset]);
            let f = &b.ffn;
            out.extend([f.w1, f.b1, f.w2, f.b2, f.scale, f.offset]);
        }
        out.extend(self.out_w.iter().copied());
        out.extend(self.out_b.iter().copied());
        out
    }
}

/// y = x + scale (*) LN0(f) + offset, the gated residual wrapper around
/// every sublayer. All scales and offsets zero turns the sublayer into the
/// identity.
fn gated_residual<S: Scalar>(t: &mut Tape<S>, x: Var, f: Var, scale: Var, offset: Var) -> Var {
    let n = t.layernorm_last(f, LN_EPS);
    let s = t.mul_vec_last(n, scale);
    let so = t.add_vec_last(s, offset);
    t.add(x, so)
}

/// Per-token linear embedding of the channel history. For each token the
/// channels are concatenated step-major (t_in blocks of that token's
/// channels, newest last) and projected to the embed width; output
/// [B, N, V_tok, E].
pub fn stage_inputs<S: Scalar>(
    tape: &mut Tape<S>,
    pv: &ParamVars,
    history: &Tensor<S>,
    config: &ModelConfig,
    layout: &TokenLayout,
) -> Result<Var, ModelError> {
    let shp = history.shape();
    if shp.len() != 4 {
        return Err(ModelError::ShapeMismatch(format!(
            "history must be [B, T_in, C, N], got rank {}",
            shp.len()
        )));
    }
    let (bsz, t_in, c, n) = (shp[0], shp[1], shp[2], shp[3]);
    if t_in != config.t_in {
        return Err(ModelError::ShapeMismatch(format!(
            "history carries {t_in} steps, config wants {}",
            config.t_in
        )));
    }
    if c != layout.n_channels() {
        return Err(ModelError::ShapeMismatch(format!(
            "history carries {c} channels, layout wants {}",
            layout.n_channels()
        )));
    }
    let hd = history.data();
    let mut embedded = Vec::with_capacity(layout.n_tokens());
    for (v, (_, chans)) in layout.tokens.iter().enumerate() {
        let cv = chans.len();
        let mut flat = Tensor::zeros(vec![bsz, n, t_in * cv]);
        {
            let fd = flat.data_mut();
            for b in 0..bsz {
                for (ci, &ch) in chans.iter().enumerate() {
                    for t in 0..t_in {
                        let src = &hd[((b * t_in + t) * c + ch) * n..][..n];
                        for ni in 0..n {
                            fd[(b * n + ni) * (t_in * cv) + t * cv + ci] = src[ni];
                        }
                    }
                }
            }
        }
        let leaf = tape.leaf(flat);
        embedded.push(tape.linear(leaf, pv.stage_w[v], Some(pv.stage_b[v])));
    }
    Ok(tape.stack_axis(&embedded, 2))
}

/// Two-layer per-node tower over the static channels: linear, layer norm
/// with learnable gain, rectifier, linear. Output [N, E] is broadcast-added
/// at the input of every block through that block's injection gate.
pub fn encode_statics<S: Scalar>(
    tape: &mut Tape<S>,
    sv: &StaticVars,
    statics: &Tensor<S>,
) -> Result<Var, ModelError> {
    let shp = statics.shape();
    if shp.len() != 2 {
        return Err(ModelError::ShapeMismatch(format!(
            "statics must be [S, N], got rank {}",
            shp.len()
        )));
    }
    let (s_chan, n) = (shp[0], shp[1]);
    // Transpose to node-major [N, S] so the tower maps per node.
    let sd = statics.data();
    let node_major = Tensor::from_fn(vec![n, s_chan], |i| sd[(i % s_chan) * n + i / s_chan]);
    let leaf = tape.leaf(node_major);
    let h = tape.linear(leaf, sv.w1, Some(sv.b1));
    let hn = tape.layernorm_last(h, LN_EPS);
    let hs = tape.mul_vec_last(hn, sv.scale);
    let ho = tape.add_vec_last(hs, sv.offset);
    let hr = tape.relu(ho);
    Ok(tape.linear(hr, sv.w2, Some(sv.b2)))
}

/// Multi-head self-attention over the token axis of [B, N, V_tok, E],
/// independently per node, wrapped in the gated residual.
pub fn vertical_attention<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    v: &VerticalVars,
    heads: usize,
) -> Var {
    let e = *tape.value(x).shape().last().unwrap();
    let eh = e / heads;
    let q = tape.linear(x, v.wq, Some(v.bq));
    let k = tape.linear(x, v.wk, Some(v.bk));
    let val = tape.linear(x, v.wv, Some(v.bv));
    let qh = tape.split_heads(q, heads);
    let kh = tape.split_heads(k, heads);
    let vh = tape.split_heads(val, heads);
    let scores = tape.bmm(qh, kh, true);
    let scaled = tape.scale(scores, 1.0 / (eh as f64).sqrt());
    let attn = tape.softmax_last(scaled);
    let mixed = tape.bmm(attn, vh, false);
    let merged = tape.merge_heads(mixed);
    let f = tape.linear(merged, v.wo, Some(v.bo));
    gated_residual(tape, x, f, v.scale, v.offset)
}

/// Graph attention over mesh neighbours within each token level. Heads are
/// averaged, a shared bias added, and the result wrapped in the gated
/// residual.
pub fn horizontal_gat<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    h: &HorizontalVars,
    edges: &GraphEdges,
) -> Var {
    let v_tok = tape.value(x).shape()[2];
    let heads = h.w.len();
    let mut levels = Vec::with_capacity(v_tok);
    for v in 0..v_tok {
        let xv = tape.index_axis(x, 2, v);
        let mut acc: Option<Var> = None;
        for k in 0..heads {
            let z = tape.linear(xv, h.w[k], None);
            let o = tape.gat_head(z, h.a_center[k], h.a_neigh[k], edges.index.clone(), ATTN_NEG_SLOPE);
            acc = Some(match acc {
                None => o,
                Some(a) => tape.add(a, o),
            });
        }
        let avg = tape.scale(acc.expect("at least one head"), 1.0 / heads as f64);
        levels.push(tape.add_vec_last(avg, h.bias));
    }
    let f = tape.stack_axis(&levels, 2);
    gated_residual(tape, x, f, h.scale, h.offset)
}

fn ffn_sublayer<S: Scalar>(tape: &mut Tape<S>, x: Var, f: &FfnVars) -> Var {
    let h = tape.linear(x, f.w1, Some(f.b1));
    let r = tape.relu(h);
    let o = tape.linear(r, f.w2, Some(f.b2));
    gated_residual(tape, x, o, f.scale, f.offset)
}

/// One forecaster block: gated statics injection, vertical attention,
/// horizontal graph attention, feed-forward, in that order.
pub fn graph_axial_block<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    statics_inj: Var,
    b: &BlockVars,
    edges: &GraphEdges,
    heads: usize,
) -> Var {
    let inj_n = tape.layernorm_last(statics_inj, LN_EPS);
    let inj_s = tape.mul_vec_last(inj_n, b.inj_scale);
    let inj = tape.add_vec_last(inj_s, b.inj_offset);
    let x = tape.add_bcast_node(x, inj);
    let x = vertical_attention(tape, x, &b.vertical, heads);
    let x = horizontal_gat(tape, x, &b.horizontal, edges);
    ffn_sublayer(tape, x, &b.ffn)
}

/// Forward pass output: the prediction, the final block features, and the
/// parameter vars for gradient lookup.
pub struct ForwardOut {
    /// Standardized prediction [B, T_out, C, N].
    pub pred: Var,
    /// Final block output [B, N, V_tok, E].
    pub features: Var,
    pub params: ParamVars,
}

/// Full forward pass on standardized inputs. history is [B, T_in, C, N],
/// statics [S, N]; returns the standardized prediction [B, T_out, C, N].
pub fn forward<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ModelParams<S>,
    history: &Tensor<S>,
    statics: &Tensor<S>,
    edges: &GraphEdges,
) -> Result<ForwardOut, ModelError> {
    params.config.validate()?;
    params.layout.validate()?;
    let shp = history.shape();
    if shp.len() != 4 {
        return Err(ModelError::ShapeMismatch(
            "history must be [B, T_in, C, N]".into(),
        ));
    }
    let n = shp[3];
    if statics.shape() != [params.n_static, n] {
        return Err(ModelError::ShapeMismatch(format!(
            "statics must be [{}, {n}], got {:?}",
            params.n_static,
            statics.shape()
        )));
    }
    if edges.n_nodes() != n {
        return Err(ModelError::ShapeMismatch(format!(
            "edge index covers {} nodes, history has {n}",
            edges.n_nodes()
        )));
    }
    let pv = params.register(tape);
    let mut x = stage_inputs(tape, &pv, history, &params.config, &params.layout)?;
    let inj = encode_statics(tape, &pv.statics, statics)?;
    for b in &pv.blocks {
        x = graph_axial_block(tape, x, inj, b, edges, params.config.attention_heads);
    }
    let tokens = params.layout.channel_sets();
    let mut parts = Vec::with_capacity(params.layout.n_tokens());
    for v in 0..params.layout.n_tokens() {
        let xv = tape.index_axis(x, 2, v);
        parts.push(tape.linear(xv, pv.out_w[v], Some(pv.out_b[v])));
    }
    let pred = tape.assemble_channels(
        &parts,
        tokens,
        params.config.t_out,
        params.layout.n_channels(),
    );
    Ok(ForwardOut {
        pred,
        features: x,
        params: pv,
    })
}

/// Closed-form parameter total for a config and layout. Matches the
/// allocation exactly; the default setup lands near the 1.6M reference.
pub fn param_count(config: &ModelConfig, layout: &TokenLayout, n_static: usize) -> usize {
    let e = config.embed_width;
    let h = config.attention_heads;
    let f = config.ffn_width;
    let c = layout.n_channels();
    let v = layout.n_tokens();
    let stage = e * config.t_in * c + v * e;
    let statics = e * n_static + e + 2 * e + e * e + e;
    let block = 2 * e
        + (4 * e * e + 4 * e + 2 * e)
        + (h * e * e + 2 * h * e + e + 2 * e)
        + (2 * e * f + f + e + 2 * e);
    let out = config.t_out * c * e + config.t_out * c;
    stage + statics + config.blocks * block + out
}
