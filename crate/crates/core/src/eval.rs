//! Forecast scoring: per-channel, per-lead RMSE and MAE in physical units
//! over the region of interest.

use thiserror::Error;

use crate::geo::Zone;
use crate::mesh::TriMesh;
use crate::regrid::NodeTensor;
use crate::stats::{ChannelStats, StatsError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation input mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// RMSE and MAE per lead step and channel, physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct LeadMetrics {
    pub channel_names: Vec<String>,
    /// [K][C]
    pub rmse: Vec<Vec<f64>>,
    /// [K][C]
    pub mae: Vec<Vec<f64>>,
}

impl LeadMetrics {
    pub fn leads(&self) -> usize {
        self.rmse.len()
    }

    /// Deterministic CSV: one row per (channel, lead), leads 1-based.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("channel,lead,rmse,mae\n");
        for (ci, name) in self.channel_names.iter().enumerate() {
            for k in 0..self.leads() {
                s.push_str(&format!(
                    "{},{},{},{}\n",
                    name,
                    k + 1,
                    self.rmse[k][ci],
                    self.mae[k][ci]
                ));
            }
        }
        s
    }
}

/// Scores standardized prediction against standardized truth on an explicit
/// node subset. Differences are destandardized per channel before scoring,
/// in f64: d = std_c * (p - t), the means cancel.
pub fn evaluate_nodes(
    pred: &NodeTensor,
    truth: &NodeTensor,
    nodes: &[usize],
    stats: &ChannelStats,
) -> Result<LeadMetrics, EvalError> {
    if pred.t != truth.t || pred.n != truth.n || pred.channel_names != truth.channel_names {
        return Err(EvalError::Mismatch(
            "prediction and truth must share shape and channels".into(),
        ));
    }
    if nodes.is_empty() {
        return Err(EvalError::Mismatch("no nodes to score".into()));
    }
    if let Some(&bad) = nodes.iter().find(|&&i| i >= pred.n) {
        return Err(EvalError::Mismatch(format!(
            "node index {bad} out of range for {} nodes",
            pred.n
        )));
    }
    let c = pred.c();
    let stds: Vec<f64> = pred
        .channel_names
        .iter()
        .map(|name| stats.lookup(name).map(|(_, s)| s))
        .collect::<Result<_, _>>()?;
    let mut rmse = vec![vec![0.0f64; c]; pred.t];
    let mut mae = vec![vec![0.0f64; c]; pred.t];
    let inv = 1.0 / nodes.len() as f64;
    for k in 0..pred.t {
        for ci in 0..c {
            let mut sq = 0.0f64;
            let mut ab = 0.0f64;
            for &ni in nodes {
                let d = stds[ci]
                    * (pred.get(k, ci, ni) as f64 - truth.get(k, ci, ni) as f64);
                sq += d * d;
                ab += d.abs();
            }
            let r = (sq * inv).sqrt();
            let m = ab * inv;
            // Root mean square dominates the mean absolute deviation; a
            // violation beyond float noise means the arithmetic is wrong.
            assert!(
                r >= m - 1e-12 * (1.0 + m),
                "rmse {r} fell below mae {m} for channel {ci} lead {k}"
            );
            rmse[k][ci] = r;
            mae[k][ci] = m;
        }
    }
    Ok(LeadMetrics {
        channel_names: pred.channel_names.clone(),
        rmse,
        mae,
    })
}

/// Vertex indices of a mesh that lie in any of the given zones.
pub fn zone_nodes(mesh: &TriMesh, zones: &[Zone]) -> Vec<usize> {
    mesh.zones
        .iter()
        .enumerate()
        .filter(|(_, z)| zones.contains(z))
        .map(|(i, _)| i)
        .collect()
}

/// Scores over the mesh nodes in the listed zones.
pub fn evaluate_with_zones(
    pred: &NodeTensor,
    truth: &NodeTensor,
    mesh: &TriMesh,
    stats: &ChannelStats,
    zones: &[Zone],
) -> Result<LeadMetrics, EvalError> {
    if mesh.n_vertices() != pred.n {
        return Err(EvalError::Mismatch(format!(
            "mesh has {} vertices, tensors have {} nodes",
            mesh.n_vertices(),
            pred.n
        )));
    }
    let nodes = zone_nodes(mesh, zones);
    evaluate_nodes(pred, truth, &nodes, stats)
}

/// Standard forecast scoring: ROI nodes only.
pub fn evaluate(
    pred: &NodeTensor,
    truth: &NodeTensor,
    mesh: &TriMesh,
    stats: &ChannelStats,
) -> Result<LeadMetrics, EvalError> {
    evaluate_with_zones(pred, truth, mesh, stats, &[Zone::Roi])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn names() -> Vec<String> {
        vec!["a".into(), "b".into()]
    }

    fn stats(mean: &[f64], std: &[f64]) -> ChannelStats {
        ChannelStats {
            names: names(),
            mean: mean.to_vec(),
            std: std.to_vec(),
            count: 10,
        }
    }

    fn random_pair(t: usize, n: usize, seed: u64) -> (NodeTensor, NodeTensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mk = || {
            let mut x = NodeTensor::zeros(t, names(), n);
            for v in x.data.iter_mut() {
                *v = rng.gen::<f32>() * 4.0 - 2.0;
            }
            x
        };
        (mk(), mk())
    }

    #[test]
    fn perfect_prediction_scores_zero() {
        let (truth, _) = random_pair(3, 5, 1);
        let st = stats(&[1.0, -2.0], &[3.0, 0.5]);
        let m = evaluate_nodes(&truth, &truth, &[0, 1, 2, 3, 4], &st).unwrap();
        for k in 0..3 {
            for c in 0..2 {
                assert_eq!(m.rmse[k][c], 0.0);
                assert_eq!(m.mae[k][c], 0.0);
            }
        }
    }

    #[test]
    fn constant_offset_gives_equal_rmse_and_mae() {
        let (truth, _) = random_pair(2, 6, 2);
        let mut pred = truth.clone();
        // Shift channel 0 by 0.25 standardized units; std 3 makes the
        // physical error 0.75.
        for k in 0..2 {
            for ni in 0..6 {
                let v = pred.get(k, 0, ni);
                pred.set(k, 0, ni, v + 0.25);
            }
        }
        let st = stats(&[10.0, 0.0], &[3.0, 0.5]);
        let m = evaluate_nodes(&pred, &truth, &[0, 1, 2, 3, 4, 5], &st).unwrap();
        for k in 0..2 {
            assert!((m.rmse[k][0] - 0.75).abs() < 1e-5);
            assert!((m.mae[k][0] - 0.75).abs() < 1e-5);
            assert_eq!(m.rmse[k][1], 0.0);
        }
    }

    #[test]
    fn matches_a_direct_recomputation() {
        let (pred, truth) = random_pair(3, 8, 3);
        let st = stats(&[0.3, -1.0], &[2.0, 5.0]);
        let nodes = [1usize, 3, 4, 7];
        let m = evaluate_nodes(&pred, &truth, &nodes, &st).unwrap();
        for k in 0..3 {
            for c in 0..2 {
                let mut sq = 0.0f64;
                let mut ab = 0.0f64;
                for &ni in &nodes {
                    let d = st.std[c] * (pred.get(k, c, ni) as f64 - truth.get(k, c, ni) as f64);
                    sq += d * d;
                    ab += d.abs();
                }
                assert!((m.rmse[k][c] - (sq / 4.0).sqrt()).abs() < 1e-12);
                assert!((m.mae[k][c] - ab / 4.0).abs() < 1e-12);
                assert!(m.rmse[k][c] >= m.mae[k][c] - 1e-12);
            }
        }
    }

    #[test]
    fn means_cancel_and_std_scales_linearly() {
        let (pred, truth) = random_pair(2, 5, 4);
        let nodes = [0usize, 2, 4];
        let a = evaluate_nodes(&pred, &truth, &nodes, &stats(&[0.0, 0.0], &[1.0, 1.0])).unwrap();
        let b =
            evaluate_nodes(&pred, &truth, &nodes, &stats(&[100.0, -40.0], &[1.0, 1.0])).unwrap();
        assert_eq!(a, b, "means must cancel out of the error");
        let c = evaluate_nodes(&pred, &truth, &nodes, &stats(&[0.0, 0.0], &[2.0, 2.0])).unwrap();
        for k in 0..2 {
            for ci in 0..2 {
                assert!((c.rmse[k][ci] - 2.0 * a.rmse[k][ci]).abs() < 1e-12);
                assert!((c.mae[k][ci] - 2.0 * a.mae[k][ci]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_and_node_mismatches_are_rejected() {
        let (pred, truth) = random_pair(2, 5, 5);
        let st = stats(&[0.0, 0.0], &[1.0, 1.0]);
        let short = NodeTensor::zeros(1, names(), 5);
        assert!(evaluate_nodes(&short, &truth, &[0], &st).is_err());
        assert!(evaluate_nodes(&pred, &truth, &[], &st).is_err());
        assert!(evaluate_nodes(&pred, &truth, &[5], &st).is_err());
    }

    #[test]
    fn csv_layout_is_stable() {
        let m = LeadMetrics {
            channel_names: names(),
            rmse: vec![vec![1.5, 2.0], vec![1.75, 2.25]],
            mae: vec![vec![1.0, 1.5], vec![1.25, 2.0]],
        };
        let csv = m.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(
            lines,
            vec![
                "channel,lead,rmse,mae",
                "a,1,1.5,1",
                "a,2,1.75,1.25",
                "b,1,2,1.5",
                "b,2,2.25,2",
            ]
        );
    }
}
