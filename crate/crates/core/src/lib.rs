//! Regional weather-forecasting pipeline: tri-band mesh generation,
//! zone-aware grid sampling, streaming normalization, an axial
//! graph-attention forecaster with task heads, training, rollout, and
//! evaluation, plus the file codecs the command-line tools use.

pub mod eval;
pub mod geo;
pub mod mesh;
pub mod regrid;
pub mod rollout;
pub mod stats;
pub mod heads;
pub mod io;
pub mod model;
pub mod synth;
pub mod tape;
pub mod train;

pub use geo::{
    ecef_dist, ecef_norm, geo_to_ecef, spacing_at, wrap_lon, Ellipsoid, GeoPoint, RoiSpec,
    SpacingSpec, Zone,
};
pub use mesh::{
    build_mesh, build_mesh_with, compute_quality, MeshBuildOptions, MeshError, MeshQualityReport,
    TriMesh,
};
pub use regrid::{
    bilinear_sample, coast_mask_sample, compute_static_features, log_to_tp, nearest_level,
    positional_encodings, static_node_features, tp_to_log, zone_sample, ChannelKind, ChannelSpec,
    MaskClass, NodeTensor, RectGrid, RegridError, Transform,
};
pub use stats::{
    destandardize, standardize, welford_merge, welford_update, ChannelStats, StatsError,
    WelfordState, STD_FLOOR,
};
pub use tape::{EdgeIndex, Grads, Scalar, Tape, Tensor, Var};
pub use model::{
    canonical_channels, encode_statics, forward, graph_axial_block, horizontal_gat, param_count,
    stage_inputs, vertical_attention, BlockParams, ForwardOut, GraphEdges, ModelConfig,
    ModelError, ModelParams, ParamVars, TokenLayout, ATTN_NEG_SLOPE, LN_EPS,
};
pub use heads::{
    head_forward, loss_core, loss_core_tape, loss_precip, loss_precip_tape, loss_wind,
    loss_wind_tape, loss_wind_terms, HeadError, HeadKind, HeadParams, HeadVars, PrecipLossConfig,
    WindPair, DEFAULT_HEAD_HIDDEN, WIND_GATE_MIN_SPEED, WIND_SQRT_EPS,
};
pub use synth::{
    canonical_channel_specs, split_by_sequence, synth_dataset, synth_statics, SynthConfig,
    SynthData,
};
pub use train::{
    clip_gradients, core_loss_on, core_task_loss, fine_tune_head, train_core, train_step,
    AdamState, Batch, Corpus, Split, TrainConfig, TrainError, TrainLogRow, TrainReport, WindowRef,
};
pub use rollout::{
    persistence_forecast, rollout, HeadSet, RolloutConfig, RolloutError,
};
pub use eval::{
    evaluate, evaluate_nodes, evaluate_with_zones, zone_nodes, EvalError, LeadMetrics,
};
