//! Autoregressive rollout: the single-step core is applied repeatedly over
//! a sliding history window, optionally letting the task heads overwrite
//! their channels in each predicted frame before it is fed back.

use thiserror::Error;

use crate::heads::{head_forward, HeadError, HeadKind, HeadParams};
use crate::model::{forward, GraphEdges, ModelError, ModelParams};
use crate::regrid::NodeTensor;
use crate::tape::{Tape, Tensor};

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("invalid rollout input: {0}")]
    Invalid(String),
    #[error("non-finite prediction at rollout step {step}")]
    NonFinite { step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Head(#[from] HeadError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutConfig {
    /// Number of autoregressive steps K.
    pub steps: usize,
    /// Overwrite head channels in each predicted frame before feedback.
    pub substitute_heads: bool,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            steps: 4,
            substitute_heads: false,
        }
    }
}

/// Trained heads used during substitution.
pub struct HeadSet {
    pub wind: HeadParams<f32>,
    pub precip: HeadParams<f32>,
}

impl HeadSet {
    fn of(&self, kind: HeadKind) -> &HeadParams<f32> {
        match kind {
            HeadKind::Wind => &self.wind,
            HeadKind::Precip => &self.precip,
        }
    }
}

/// Rolls the core forward `cfg.steps` times from a standardized history of
/// exactly `t_in` frames. Returns the K predicted frames, still
/// standardized, as a [K, C, N] tensor. With substitution enabled the head
/// channels (u10/v10 from the wind head, tp_log from the precipitation
/// head) replace the core's values in every frame before it re-enters the
/// window; the heads already emit standardized values, so no transform is
/// applied.
pub fn rollout(
    core: &ModelParams<f32>,
    heads: Option<&HeadSet>,
    history: &NodeTensor,
    statics: &Tensor<f32>,
    edges: &GraphEdges,
    cfg: &RolloutConfig,
) -> Result<NodeTensor, RolloutError> {
    let t_in = core.config.t_in;
    if core.config.t_out != 1 {
        return Err(RolloutError::Invalid(
            "rollout needs a single-step core".into(),
        ));
    }
    if cfg.steps == 0 {
        return Err(RolloutError::Invalid("rollout needs at least one step".into()));
    }
    if history.t != t_in {
        return Err(RolloutError::Invalid(format!(
            "history has {} frames, the core consumes {t_in}",
            history.t
        )));
    }
    let c = history.c();
    let n = history.n;
    let expected = core.layout.n_channels();
    if c != expected {
        return Err(RolloutError::Invalid(format!(
            "history carries {c} channels, the core expects {expected}"
        )));
    }
    if cfg.substitute_heads && heads.is_none() {
        return Err(RolloutError::Invalid(
            "substitution requested without heads".into(),
        ));
    }
    let head_channel_index = |name: &str| -> Result<usize, RolloutError> {
        history.channel_index(name).ok_or_else(|| {
            RolloutError::Invalid(format!("history has no channel {name}"))
        })
    };

    // Sliding window of the most recent t_in frames, [C, N] each.
    let frame = c * n;
    let mut window: Vec<Vec<f32>> = (0..t_in)
        .map(|t| history.time_slice(t).to_vec())
        .collect();
    let mut out = NodeTensor::zeros(cfg.steps, history.channel_names.clone(), n);

    for k in 0..cfg.steps {
        let mut hist = Tensor::zeros(vec![1, t_in, c, n]);
        for (t, f) in window.iter().enumerate() {
            hist.data_mut()[t * frame..(t + 1) * frame].copy_from_slice(f);
        }
        let mut tape: Tape<f32> = Tape::new();
        let fw = forward(&mut tape, core, &hist, statics, edges)?;
        // [1, 1, C, N] prediction for the next frame.
        let mut next = tape.value(fw.pred).data().to_vec();

        if let Some(hs) = heads.filter(|_| cfg.substitute_heads) {
            for kind in [HeadKind::Wind, HeadKind::Precip] {
                let params = hs.of(kind);
                let hv = params.register(&mut tape);
                let hout = head_forward(&mut tape, fw.features, &hv, kind)?;
                let hd = tape.value(hout).data();
                for (oi, name) in kind.channels().iter().enumerate() {
                    let ci = head_channel_index(name)?;
                    next[ci * n..(ci + 1) * n].copy_from_slice(&hd[oi * n..(oi + 1) * n]);
                }
            }
        }

        if next.iter().any(|v| !v.is_finite()) {
            return Err(RolloutError::NonFinite { step: k + 1 });
        }
        out.data[k * frame..(k + 1) * frame].copy_from_slice(&next);
        window.remove(0);
        window.push(next);
    }
    Ok(out)
}

/// Persistence baseline: every forecast frame repeats the last history
/// frame.
pub fn persistence_forecast(history: &NodeTensor, steps: usize) -> NodeTensor {
    let mut out = NodeTensor::zeros(steps, history.channel_names.clone(), history.n);
    let last = history.time_slice(history.t - 1);
    let frame = last.len();
    for k in 0..steps {
        out.data[k * frame..(k + 1) * frame].copy_from_slice(last);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelParams, TokenLayout};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn layout() -> TokenLayout {
        TokenLayout {
            tokens: vec![
                ("sfc".into(), vec![0, 1, 2]),
                ("upper".into(), vec![3, 4]),
            ],
        }
    }

    fn names() -> Vec<String> {
        ["u10", "v10", "tp_log", "t850", "z500"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    fn config() -> ModelConfig {
        ModelConfig {
            embed_width: 8,
            blocks: 1,
            attention_heads: 2,
            ffn_width: 16,
            t_in: 2,
            t_out: 1,
            dropout: 0.0,
        }
    }

    fn fixture(n: usize, seed: u64) -> (NodeTensor, Tensor<f32>, GraphEdges) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut hist = NodeTensor::zeros(2, names(), n);
        for v in hist.data.iter_mut() {
            *v = rng.gen::<f32>() * 2.0 - 1.0;
        }
        let statics = Tensor::from_fn(vec![3, n], |_| rng.gen::<f32>() - 0.5);
        let ring: Vec<[u32; 2]> = (0..n).map(|i| [i as u32, ((i + 1) % n) as u32]).collect();
        (hist, statics, GraphEdges::from_undirected(n, &ring))
    }

    #[test]
    fn residual_identity_rollout_equals_persistence_exactly() {
        let (hist, statics, edges) = fixture(7, 3);
        let core = ModelParams::residual_identity(&config(), &layout(), 3).unwrap();
        let cfg = RolloutConfig {
            steps: 4,
            substitute_heads: false,
        };
        let pred = rollout(&core, None, &hist, &statics, &edges, &cfg).unwrap();
        let base = persistence_forecast(&hist, 4);
        assert_eq!(pred, base, "identity core must reproduce persistence bitwise");
    }

    #[test]
    fn first_step_matches_a_single_forward() {
        let (hist, statics, edges) = fixture(6, 5);
        let core = ModelParams::<f32>::init(&config(), &layout(), 3, 11).unwrap();
        let cfg = RolloutConfig {
            steps: 1,
            substitute_heads: false,
        };
        let pred = rollout(&core, None, &hist, &statics, &edges, &cfg).unwrap();

        let mut h = Tensor::zeros(vec![1, 2, 5, 6]);
        h.data_mut()[..2 * 5 * 6].copy_from_slice(&hist.data);
        let mut tape: Tape<f32> = Tape::new();
        let fw = forward(&mut tape, &core, &h, &statics, &edges).unwrap();
        assert_eq!(pred.data, tape.value(fw.pred).data());
    }

    #[test]
    fn substitution_changes_only_head_channels_in_first_frame() {
        let (hist, statics, edges) = fixture(6, 7);
        let core = ModelParams::<f32>::init(&config(), &layout(), 3, 13).unwrap();
        let heads = HeadSet {
            wind: HeadParams::init(HeadKind::Wind, 2, 8, 16, 17).unwrap(),
            precip: HeadParams::init(HeadKind::Precip, 2, 8, 16, 19).unwrap(),
        };
        let plain = rollout(
            &core,
            None,
            &hist,
            &statics,
            &edges,
            &RolloutConfig {
                steps: 2,
                substitute_heads: false,
            },
        )
        .unwrap();
        let subbed = rollout(
            &core,
            Some(&heads),
            &hist,
            &statics,
            &edges,
            &RolloutConfig {
                steps: 2,
                substitute_heads: true,
            },
        )
        .unwrap();
        let head_channels = ["u10", "v10", "tp_log"];
        for (ci, name) in names().iter().enumerate() {
            let same = (0..6).all(|ni| plain.get(0, ci, ni) == subbed.get(0, ci, ni));
            if head_channels.contains(&name.as_str()) {
                assert!(!same, "head channel {name} should change under substitution");
            } else {
                assert!(same, "non-head channel {name} must be untouched at step 1");
            }
        }
        // Later frames diverge everywhere once the substituted frame feeds
        // back through the core.
        let any_diff_late = (0..5)
            .any(|ci| (0..6).any(|ni| plain.get(1, ci, ni) != subbed.get(1, ci, ni)));
        assert!(any_diff_late);
    }

    #[test]
    fn non_finite_frame_names_the_step() {
        let (hist, statics, edges) = fixture(6, 23);
        let mut core = ModelParams::<f32>::init(&config(), &layout(), 3, 29).unwrap();
        core.out_w[0].data_mut()[0] = f32::NAN;
        let err = rollout(
            &core,
            None,
            &hist,
            &statics,
            &edges,
            &RolloutConfig {
                steps: 3,
                substitute_heads: false,
            },
        )
        .unwrap_err();
        match err {
            RolloutError::NonFinite { step } => assert_eq!(step, 1),
            other => panic!("expected a non-finite error, got {other}"),
        }
    }

    #[test]
    fn wrong_history_length_is_rejected() {
        let (hist, statics, edges) = fixture(6, 31);
        let core = ModelParams::<f32>::init(&config(), &layout(), 3, 37).unwrap();
        let mut short = NodeTensor::zeros(1, names(), 6);
        short.data.copy_from_slice(hist.time_slice(0));
        let err = rollout(
            &core,
            None,
            &short,
            &statics,
            &edges,
            &RolloutConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, RolloutError::Invalid(_)));
    }
}
