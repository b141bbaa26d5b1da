//! File codecs and run plumbing: mesh JSON, the RGRID grid container,
//! node-tensor and checkpoint binaries, stats JSON, key=value configs,
//! run manifests, and PGM raster export.
//!
//! Every binary format is little-endian regardless of host and carries a
//! magic plus version so mismatches fail with a precise message. All
//! codecs satisfy write(read(bytes)) = bytes and read(write(x)) = x.

mod checkpoint;
mod config;
mod framing;
mod manifest;
mod mesh_json;
mod node_tensor;
mod pgm;
mod rgrid;
mod stats_json;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use config::{
    echo_model_config, echo_rollout_config, echo_synth_config, echo_train_config,
    model_config_from_kv, parse_kv, rollout_config_from_kv, synth_config_from_kv,
    train_config_from_kv, ParsedConfig,
};
pub use manifest::{
    hash_bytes, hash_file, read_manifest, verify_manifest, write_manifest, RunManifest,
    MANIFEST_NAME,
};
pub use mesh_json::{read_mesh_json, write_mesh_json};
pub use node_tensor::{read_node_tensor, write_node_tensor};
pub use pgm::{rasterize_nodes, write_pgm};
pub use rgrid::{read_rgrid, write_rgrid};
pub use stats_json::{read_stats_json, write_stats_json};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o failure on {path}: {source}")]
    File {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Mesh(#[from] crate::mesh::MeshError),
    #[error(transparent)]
    Grid(#[from] crate::regrid::RegridError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Head(#[from] crate::heads::HeadError),
}

impl IoError {
    pub(crate) fn file(path: &std::path::Path, source: std::io::Error) -> Self {
        IoError::File {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Reads a whole file, wrapping the error with its path.
pub fn read_file(path: &std::path::Path) -> Result<Vec<u8>, IoError> {
    std::fs::read(path).map_err(|e| IoError::file(path, e))
}

/// Writes a whole file, wrapping the error with its path.
pub fn write_file(path: &std::path::Path, bytes: &[u8]) -> Result<(), IoError> {
    std::fs::write(path, bytes).map_err(|e| IoError::file(path, e))
}
