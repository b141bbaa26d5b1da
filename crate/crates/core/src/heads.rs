//! Task heads and training losses: the core MSE objective, the wind head
//! with its composite component/magnitude/direction loss, and the
//! precipitation head with a wet-weighted loss.
//!
//! Every loss exists twice: a plain f64 reference used as the oracle in
//! tests and evaluation, and a tape version used in training. The pair
//! shares one formula so the two agree to rounding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::rc::Rc;
use thiserror::Error;

use crate::regrid::NodeTensor;
use crate::tape::{Scalar, Tape, Tensor, Var};

/// Nodes where either wind magnitude is below this speed (m/s) contribute
/// no direction term; the cosine is ill-conditioned near zero wind.
pub const WIND_GATE_MIN_SPEED: f64 = 0.1;
/// Offset inside the magnitude square roots, keeps gradients finite at
/// exactly zero wind.
pub const WIND_SQRT_EPS: f64 = 1e-12;
/// Hidden width both task heads default to.
pub const DEFAULT_HEAD_HIDDEN: usize = 64;

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid value: {0}")]
    InvalidValue(String),
}

/// Per-node wind components in m/s.
#[derive(Debug, Clone, PartialEq)]
pub struct WindPair {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl WindPair {
    pub fn new(u: Vec<f64>, v: Vec<f64>) -> Result<Self, HeadError> {
        if u.len() != v.len() {
            return Err(HeadError::ShapeMismatch(format!(
                "wind components differ in length: {} vs {}",
                u.len(),
                v.len()
            )));
        }
        if u.iter().chain(&v).any(|x| !x.is_finite()) {
            return Err(HeadError::InvalidValue(
                "wind components must be finite".into(),
            ));
        }
        Ok(WindPair { u, v })
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }
}

/// Wet up-weighting for the precipitation loss: w = 1 + alpha at nodes
/// whose true tp_log exceeds tau.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecipLossConfig {
    pub alpha: f64,
    pub tau: f64,
}

impl Default for PrecipLossConfig {
    fn default() -> Self {
        PrecipLossConfig { alpha: 4.0, tau: 0.1 }
    }
}

impl PrecipLossConfig {
    pub fn validate(&self) -> Result<(), HeadError> {
        if !(self.alpha >= 0.0 && self.tau >= 0.0) {
            return Err(HeadError::InvalidValue(
                "alpha and tau must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Mean squared error over all times, channels, and nodes.
pub fn loss_core(pred: &NodeTensor, truth: &NodeTensor) -> Result<f64, HeadError> {
    if pred.t != truth.t || pred.n != truth.n || pred.channel_names != truth.channel_names {
        return Err(HeadError::ShapeMismatch(
            "prediction and truth tensors must share shape and channels".into(),
        ));
    }
    let mut sum = 0.0f64;
    for (p, t) in pred.data.iter().zip(&truth.data) {
        let d = *p as f64 - *t as f64;
        sum += d * d;
    }
    Ok(sum / pred.data.len() as f64)
}

fn wind_node_terms(pu: f64, pv: f64, tu: f64, tv: f64) -> (f64, f64, f64) {
    let comp = (pu - tu) * (pu - tu) + (pv - tv) * (pv - tv);
    let mp = (pu * pu + pv * pv + WIND_SQRT_EPS).sqrt();
    let mt = (tu * tu + tv * tv + WIND_SQRT_EPS).sqrt();
    let mag = (mp - mt) * (mp - mt);
    let dir = if mp >= WIND_GATE_MIN_SPEED && mt >= WIND_GATE_MIN_SPEED {
        1.0 - (pu * tu + pv * tv) / (mp * mt)
    } else {
        0.0
    };
    (comp, mag, dir)
}

/// Composite wind loss, averaged over nodes: squared component errors,
/// squared magnitude error, and a gated direction term 1 - cos of the
/// angle between predicted and true wind.
pub fn loss_wind(pred: &WindPair, truth: &WindPair) -> Result<f64, HeadError> {
    if pred.len() != truth.len() {
        return Err(HeadError::ShapeMismatch(format!(
            "wind fields differ in length: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(HeadError::ShapeMismatch("empty wind field".into()));
    }
    let mut sum = 0.0f64;
    for i in 0..pred.len() {
        let (c, m, d) = wind_node_terms(pred.u[i], pred.v[i], truth.u[i], truth.v[i]);
        sum += c + m + d;
    }
    Ok(sum / pred.len() as f64)
}

/// Per-term breakdown of the wind loss (component, magnitude, direction),
/// each averaged over nodes. The sum of the three equals `loss_wind`.
pub fn loss_wind_terms(pred: &WindPair, truth: &WindPair) -> Result<[f64; 3], HeadError> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(HeadError::ShapeMismatch("wind field shape".into()));
    }
    let mut acc = [0.0f64; 3];
    for i in 0..pred.len() {
        let (c, m, d) = wind_node_terms(pred.u[i], pred.v[i], truth.u[i], truth.v[i]);
        acc[0] += c;
        acc[1] += m;
        acc[2] += d;
    }
    let n = pred.len() as f64;
    Ok([acc[0] / n, acc[1] / n, acc[2] / n])
}

/// Wet-weighted precipitation loss in tp_log space: weighted mean of
/// w*(pred-truth)^2 with w = 1 + alpha at truth > tau, normalized by the
/// total weight.
pub fn loss_precip(
    pred: &[f64],
    truth: &[f64],
    cfg: &PrecipLossConfig,
) -> Result<f64, HeadError> {
    cfg.validate()?;
    if pred.len() != truth.len() {
        return Err(HeadError::ShapeMismatch(format!(
            "precip fields differ in length: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(HeadError::ShapeMismatch("empty precip field".into()));
    }
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for i in 0..pred.len() {
        let w = if truth[i] > cfg.tau { 1.0 + cfg.alpha } else { 1.0 };
        let d = pred[i] - truth[i];
        num += w * d * d;
        den += w;
    }
    Ok(num / den)
}

/// Tape version of `loss_core`: mean of squared differences.
pub fn loss_core_tape<S: Scalar>(tape: &mut Tape<S>, pred: Var, truth: Var) -> Var {
    let d = tape.sub(pred, truth);
    let sq = tape.mul(d, d);
    tape.mean_all(sq)
}

/// Tape version of `loss_wind`. The direction gate is evaluated on the
/// forward magnitudes and applied as a constant mask, so no gradient flows
/// through the gate decision itself.
pub fn loss_wind_tape<S: Scalar>(
    tape: &mut Tape<S>,
    pred_u: Var,
    pred_v: Var,
    truth_u: Var,
    truth_v: Var,
) -> Var {
    let du = tape.sub(pred_u, truth_u);
    let du2 = tape.mul(du, du);
    let dv = tape.sub(pred_v, truth_v);
    let dv2 = tape.mul(dv, dv);
    let comp = tape.add(du2, dv2);

    let pu2 = tape.mul(pred_u, pred_u);
    let pv2 = tape.mul(pred_v, pred_v);
    let psq = tape.add(pu2, pv2);
    let mp = tape.sqrt_eps(psq, WIND_SQRT_EPS);
    let tu2 = tape.mul(truth_u, truth_u);
    let tv2 = tape.mul(truth_v, truth_v);
    let tsq = tape.add(tu2, tv2);
    let mt = tape.sqrt_eps(tsq, WIND_SQRT_EPS);
    let dm = tape.sub(mp, mt);
    let mag = tape.mul(dm, dm);

    let uu = tape.mul(pred_u, truth_u);
    let vv = tape.mul(pred_v, truth_v);
    let dot = tape.add(uu, vv);
    let denom = tape.mul(mp, mt);
    let cos = tape.div(dot, denom);
    let neg = tape.scale(cos, -1.0);
    let dir = tape.affine_const(neg, 1.0, 1.0);
    let gate = {
        let mpd = tape.value(mp).data();
        let mtd = tape.value(mt).data();
        let lim = S::from_f64(WIND_GATE_MIN_SPEED);
        let mask: Vec<S> = mpd
            .iter()
            .zip(mtd)
            .map(|(&a, &b)| if a >= lim && b >= lim { S::ONE } else { S::ZERO })
            .collect();
        Tensor::new(tape.value(mp).shape().to_vec(), mask)
    };
    let dir_gated = tape.mul_mask(dir, gate);

    let cm = tape.add(comp, mag);
    let total = tape.add(cm, dir_gated);
    tape.mean_all(total)
}

/// Tape version of `loss_precip`. Weights come from the truth values, so
/// they are constants on the tape.
pub fn loss_precip_tape<S: Scalar>(
    tape: &mut Tape<S>,
    pred: Var,
    truth: Var,
    cfg: &PrecipLossConfig,
) -> Var {
    let d = tape.sub(pred, truth);
    let sq = tape.mul(d, d);
    let (weights, total) = {
        let td = tape.value(truth).data();
        let tau = S::from_f64(cfg.tau);
        let wet = S::from_f64(1.0 + cfg.alpha);
        let mut total = 0.0f64;
        let w: Vec<S> = td
            .iter()
            .map(|&y| {
                let w = if y > tau { wet } else { S::ONE };
                total += w.to_f64();
                w
            })
            .collect();
        (Tensor::new(tape.value(truth).shape().to_vec(), w), total)
    };
    let weighted = tape.mul_mask(sq, weights);
    let sum = tape.sum_all(weighted);
    tape.scale(sum, 1.0 / total)
}

/// Which task a head serves; fixes its output channel count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadKind {
    Wind,
    Precip,
}

impl HeadKind {
    pub fn n_out(&self) -> usize {
        match self {
            HeadKind::Wind => 2,
            HeadKind::Precip => 1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            HeadKind::Wind => "wind",
            HeadKind::Precip => "precip",
        }
    }

    /// Channel names the head's outputs map onto. Both heads emit in the
    /// standardized state space, so substitution needs no transform.
    pub fn channels(&self) -> &'static [&'static str] {
        match self {
            HeadKind::Wind => &["u10", "v10"],
            HeadKind::Precip => &["tp_log"],
        }
    }
}

/// Two-layer per-node map from the concatenated token embeddings to the
/// head's output channels.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<S> {
    pub kind: HeadKind,
    pub n_tokens: usize,
    pub embed_width: usize,
    pub hidden_width: usize,
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl<S: Scalar> HeadParams<S> {
    pub fn init(
        kind: HeadKind,
        n_tokens: usize,
        embed_width: usize,
        hidden_width: usize,
        seed: u64,
    ) -> Result<Self, HeadError> {
        if n_tokens == 0 || embed_width == 0 || hidden_width == 0 {
            return Err(HeadError::InvalidValue(
                "head dimensions must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let in_dim = n_tokens * embed_width;
        let hw1 = 1.0 / (in_dim as f64).sqrt();
        let hw2 = 1.0 / (hidden_width as f64).sqrt();
        let mut draw = |shape: Vec<usize>, hw: f64| {
            use rand::Rng;
            Tensor::from_fn(shape, |_| {
                S::from_f64((rng.gen::<f64>() * 2.0 - 1.0) * hw)
            })
        };
        let w1 = draw(vec![hidden_width, in_dim], hw1);
        let w2 = draw(vec![kind.n_out(), hidden_width], hw2);
        Ok(HeadParams {
            kind,
            n_tokens,
            embed_width,
            hidden_width,
            w1,
            b1: Tensor::zeros(vec![hidden_width]),
            w2,
            b2: Tensor::zeros(vec![kind.n_out()]),
        })
    }

    pub fn register(&self, tape: &mut Tape<S>) -> HeadVars {
        HeadVars {
            w1: tape.leaf(self.w1.clone()),
            b1: tape.leaf(self.b1.clone()),
            w2: tape.leaf(self.w2.clone()),
            b2: tape.leaf(self.b2.clone()),
        }
    }

    pub fn groups(&self) -> Vec<(String, &Tensor<S>)> {
        vec![
            ("head.w1".into(), &self.w1),
            ("head.b1".into(), &self.b1),
            ("head.w2".into(), &self.w2),
            ("head.b2".into(), &self.b2),
        ]
    }

    pub fn groups_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        vec![
            ("head.w1".into(), &mut self.w1),
            ("head.b1".into(), &mut self.b1),
            ("head.w2".into(), &mut self.w2),
            ("head.b2".into(), &mut self.b2),
        ]
    }

    pub fn allocated_count(&self) -> usize {
        self.groups().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> HeadParams<T> {
        let conv = |t: &Tensor<S>| -> Tensor<T> {
            Tensor::from_fn(t.shape().to_vec(), |i| T::from_f64(t.data()[i].to_f64()))
        };
        HeadParams {
            kind: self.kind,
            n_tokens: self.n_tokens,
            embed_width: self.embed_width,
            hidden_width: self.hidden_width,
            w1: conv(&self.w1),
            b1: conv(&self.b1),
            w2: conv(&self.w2),
            b2: conv(&self.b2),
        }
    }
}

/// Runs a head on the forecaster's final block features [B, N, V_tok, E].
/// Tokens are concatenated per node, mapped through linear-ReLU-linear, and
/// the channels arranged as [B, 1, n_out, N].
pub fn head_forward<S: Scalar>(
    tape: &mut Tape<S>,
    embeddings: Var,
    hv: &HeadVars,
    kind: HeadKind,
) -> Result<Var, HeadError> {
    let shp = tape.value(embeddings).shape().to_vec();
    if shp.len() != 4 {
        return Err(HeadError::ShapeMismatch(format!(
            "embeddings must be [B, N, V_tok, E], got rank {}",
            shp.len()
        )));
    }
    let (bsz, n, v, e) = (shp[0], shp[1], shp[2], shp[3]);
    let in_dim = tape.value(hv.w1).shape()[1];
    if v * e != in_dim {
        return Err(HeadError::ShapeMismatch(format!(
            "head expects {in_dim} inputs per node, embeddings provide {}",
            v * e
        )));
    }
    let n_out = tape.value(hv.w2).shape()[0];
    if n_out != kind.n_out() {
        return Err(HeadError::ShapeMismatch(format!(
            "{} head must emit {} channels, params emit {n_out}",
            kind.name(),
            kind.n_out()
        )));
    }
    let flat = tape.reshape(embeddings, vec![bsz, n, v * e]);
    let h = tape.linear(flat, hv.w1, Some(hv.b1));
    let r = tape.relu(h);
    let o = tape.linear(r, hv.w2, Some(hv.b2));
    let tokens = Rc::new(vec![(0..n_out).collect::<Vec<usize>>()]);
    Ok(tape.assemble_channels(&[o], tokens, 1, n_out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_vec(seed: u64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| lo + (hi - lo) * rng.gen::<f64>()).collect()
    }

    #[test]
    fn core_loss_hand_cases_and_brute_force() {
        let names = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let mut truth = NodeTensor::zeros(2, names.clone(), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for v in truth.data.iter_mut() {
            *v = rng.gen::<f32>() * 4.0 - 2.0;
        }
        assert_eq!(loss_core(&truth, &truth).unwrap(), 0.0);

        let mut off = truth.clone();
        for v in off.data.iter_mut() {
            *v += 1.0;
        }
        assert!((loss_core(&off, &truth).unwrap() - 1.0).abs() < 1e-9);

        let mut pred = truth.clone();
        for v in pred.data.iter_mut() {
            *v += rng.gen::<f32>() - 0.5;
        }
        let mut sum = 0.0f64;
        let mut count = 0usize;
        for t in 0..2 {
            for c in 0..3 {
                for node in 0..5 {
                    let d = pred.get(t, c, node) as f64 - truth.get(t, c, node) as f64;
                    sum += d * d;
                    count += 1;
                }
            }
        }
        let oracle = sum / count as f64;
        assert!((loss_core(&pred, &truth).unwrap() - oracle).abs() < 1e-12);

        // Tape version agrees with the reference on the same values.
        let mut tape: Tape<f64> = Tape::new();
        let pv = tape.leaf(Tensor::from_fn(vec![2, 3, 5], |i| pred.data[i] as f64));
        let tv = tape.leaf(Tensor::from_fn(vec![2, 3, 5], |i| truth.data[i] as f64));
        let l = loss_core_tape(&mut tape, pv, tv);
        assert!((tape.value(l).data()[0] - oracle).abs() < 1e-12);
    }

    #[test]
    fn wind_loss_hand_cases() {
        let p = WindPair::new(vec![0.7, -1.2], vec![1.1, 0.4]).unwrap();
        assert!(loss_wind(&p, &p).unwrap().abs() < 1e-9);

        // Orthogonal unit vectors: component MSE 2, equal magnitudes,
        // cosine 0.
        let pred = WindPair::new(vec![1.0], vec![0.0]).unwrap();
        let truth = WindPair::new(vec![0.0], vec![1.0]).unwrap();
        assert!((loss_wind(&pred, &truth).unwrap() - 3.0).abs() < 1e-9);

        // Opposite unit vectors: component MSE 4, cosine -1.
        let pred = WindPair::new(vec![-1.0], vec![0.0]).unwrap();
        let truth = WindPair::new(vec![1.0], vec![0.0]).unwrap();
        assert!((loss_wind(&pred, &truth).unwrap() - 6.0).abs() < 1e-9);

        // Two nodes average the per-node sums.
        let pred = WindPair::new(vec![1.0, -1.0], vec![0.0, 0.0]).unwrap();
        let truth = WindPair::new(vec![0.0, 1.0], vec![1.0, 0.0]).unwrap();
        assert!((loss_wind(&pred, &truth).unwrap() - 4.5).abs() < 1e-9);

        let terms = loss_wind_terms(&pred, &truth).unwrap();
        let total: f64 = terms.iter().sum();
        assert!((total - 4.5).abs() < 1e-9);
    }

    #[test]
    fn wind_direction_term_is_gated_and_bounded() {
        // Prediction below the speed gate: no direction contribution even
        // though the vectors are orthogonal.
        let pred = WindPair::new(vec![0.05], vec![0.0]).unwrap();
        let truth = WindPair::new(vec![0.0], vec![1.0]).unwrap();
        let expect = (0.05f64).powi(2) + 1.0 + (0.05f64 - 1.0).powi(2);
        assert!((loss_wind(&pred, &truth).unwrap() - expect).abs() < 1e-9);
        let terms = loss_wind_terms(&pred, &truth).unwrap();
        assert_eq!(terms[2], 0.0, "direction term must be gated off");

        // Direction term stays within [0, 2] and the loss non-negative.
        let n = 200;
        let pu = rand_vec(11, n, -5.0, 5.0);
        let pv = rand_vec(12, n, -5.0, 5.0);
        let tu = rand_vec(13, n, -5.0, 5.0);
        let tv = rand_vec(14, n, -5.0, 5.0);
        for i in 0..n {
            let (c, m, d) = super::wind_node_terms(pu[i], pv[i], tu[i], tv[i]);
            assert!(c >= 0.0 && m >= 0.0);
            assert!((0.0..=2.0 + 1e-12).contains(&d), "direction term {d}");
        }
        let p = WindPair::new(pu, pv).unwrap();
        let t = WindPair::new(tu, tv).unwrap();
        assert!(loss_wind(&p, &t).unwrap() >= 0.0);
    }

    #[test]
    fn wind_loss_tape_agrees_with_reference_and_finite_differences() {
        let n = 40;
        // Mix of strong winds and sub-gate calms, all clear of the gate
        // boundary so differentiation stays smooth.
        let mut pu = rand_vec(21, n, 0.5, 4.0);
        let mut pv = rand_vec(22, n, 0.5, 4.0);
        let tu = rand_vec(23, n, 0.5, 4.0);
        let mut tv = rand_vec(24, n, 0.5, 4.0);
        for i in (0..n).step_by(7) {
            pu[i] = 0.01;
            pv[i] = 0.02;
        }
        for i in (0..n).step_by(11) {
            tv[i] = 0.01;
        }
        let reference = loss_wind(
            &WindPair::new(pu.clone(), pv.clone()).unwrap(),
            &WindPair::new(tu.clone(), tv.clone()).unwrap(),
        )
        .unwrap();

        let eval = |pu: &[f64], pv: &[f64]| -> f64 {
            let mut tape: Tape<f64> = Tape::new();
            let puv = tape.leaf(Tensor::new(vec![n], pu.to_vec()));
            let pvv = tape.leaf(Tensor::new(vec![n], pv.to_vec()));
            let tuv = tape.leaf(Tensor::new(vec![n], tu.clone()));
            let tvv = tape.leaf(Tensor::new(vec![n], tv.clone()));
            let l = loss_wind_tape(&mut tape, puv, pvv, tuv, tvv);
            tape.value(l).data()[0]
        };
        assert!((eval(&pu, &pv) - reference).abs() < 1e-12);

        let mut tape: Tape<f64> = Tape::new();
        let puv = tape.leaf(Tensor::new(vec![n], pu.clone()));
        let pvv = tape.leaf(Tensor::new(vec![n], pv.clone()));
        let tuv = tape.leaf(Tensor::new(vec![n], tu.clone()));
        let tvv = tape.leaf(Tensor::new(vec![n], tv.clone()));
        let l = loss_wind_tape(&mut tape, puv, pvv, tuv, tvv);
        let grads = tape.backward(l);
        let h = 1e-6;
        for i in 0..n {
            for (comp, var) in [(0, puv), (1, pvv)] {
                let mut plus = (pu.clone(), pv.clone());
                let mut minus = (pu.clone(), pv.clone());
                if comp == 0 {
                    plus.0[i] += h;
                    minus.0[i] -= h;
                } else {
                    plus.1[i] += h;
                    minus.1[i] -= h;
                }
                let numeric = (eval(&plus.0, &plus.1) - eval(&minus.0, &minus.1)) / (2.0 * h);
                let analytic = grads.get(var).unwrap()[i];
                let rel = (analytic - numeric).abs()
                    / analytic.abs().max(numeric.abs()).max(1e-3);
                assert!(
                    rel < 1e-4,
                    "node {i} comp {comp}: analytic {analytic} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn precip_loss_hand_cases() {
        let cfg = PrecipLossConfig::default();
        let y = rand_vec(31, 20, 0.0, 2.0);
        assert_eq!(loss_precip(&y, &y, &cfg).unwrap(), 0.0);

        // All-dry truth reduces to plain MSE regardless of alpha.
        let dry = vec![0.0; 8];
        let pred = rand_vec(32, 8, -0.5, 0.5);
        let mse: f64 = pred.iter().map(|p| p * p).sum::<f64>() / 8.0;
        assert!((loss_precip(&pred, &dry, &cfg).unwrap() - mse).abs() < 1e-12);

        // One wet node (w=5) and one dry node (w=1), each off by one.
        let pred = vec![2.0, 1.0];
        let truth = vec![1.0, 0.0];
        assert!((loss_precip(&pred, &truth, &cfg).unwrap() - 1.0).abs() < 1e-9);

        // Appending a perfectly-predicted dry node rescales by W/(W+1).
        let base = loss_precip(&pred, &truth, &cfg).unwrap();
        let pred2 = vec![2.0, 1.0, 0.05];
        let truth2 = vec![1.0, 0.0, 0.05];
        let grown = loss_precip(&pred2, &truth2, &cfg).unwrap();
        assert!((grown - base * 6.0 / 7.0).abs() < 1e-12);

        let bad = PrecipLossConfig { alpha: -1.0, tau: 0.1 };
        assert!(loss_precip(&pred, &truth, &bad).is_err());
    }

    #[test]
    fn precip_loss_tape_agrees_with_reference_and_finite_differences() {
        let cfg = PrecipLossConfig::default();
        let n = 30;
        let truth = rand_vec(41, n, 0.0, 1.5);
        let pred = rand_vec(42, n, 0.0, 1.5);
        let reference = loss_precip(&pred, &truth, &cfg).unwrap();

        let eval = |p: &[f64]| -> f64 {
            let mut tape: Tape<f64> = Tape::new();
            let pv = tape.leaf(Tensor::new(vec![n], p.to_vec()));
            let tv = tape.leaf(Tensor::new(vec![n], truth.clone()));
            let l = loss_precip_tape(&mut tape, pv, tv, &cfg);
            tape.value(l).data()[0]
        };
        assert!((eval(&pred) - reference).abs() < 1e-12);

        let mut tape: Tape<f64> = Tape::new();
        let pv = tape.leaf(Tensor::new(vec![n], pred.clone()));
        let tv = tape.leaf(Tensor::new(vec![n], truth.clone()));
        let l = loss_precip_tape(&mut tape, pv, tv, &cfg);
        let grads = tape.backward(l);
        let h = 1e-6;
        for i in 0..n {
            let mut plus = pred.clone();
            plus[i] += h;
            let mut minus = pred.clone();
            minus[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let analytic = grads.get(pv).unwrap()[i];
            let rel =
                (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
            assert!(rel < 1e-4, "node {i}: {analytic} vs {numeric}");
        }
    }

    #[test]
    fn head_forward_shapes_and_zero_case() {
        for (kind, want) in [
            (HeadKind::Wind, vec![1usize, 1, 2, 100]),
            (HeadKind::Precip, vec![1usize, 1, 1, 100]),
        ] {
            let params: HeadParams<f64> = HeadParams::init(kind, 4, 8, 16, 5).unwrap();
            let mut tape = Tape::new();
            let hv = params.register(&mut tape);
            let emb = tape.leaf(Tensor::zeros(vec![1, 100, 4, 8]));
            let out = head_forward(&mut tape, emb, &hv, kind).unwrap();
            assert_eq!(tape.value(out).shape(), want.as_slice());
            // Zero embeddings with zero biases give zero outputs.
            assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
        }
        assert_eq!(HeadKind::Wind.channels(), &["u10", "v10"]);
        assert_eq!(HeadKind::Precip.channels(), &["tp_log"]);
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let kind = HeadKind::Wind;
        let params: HeadParams<f64> = HeadParams::init(kind, 2, 3, 4, 9).unwrap();
        let n = 5;
        let emb = {
            let mut rng = ChaCha8Rng::seed_from_u64(51);
            Tensor::from_fn(vec![1, n, 2, 3], |_| rng.gen::<f64>() * 2.0 - 1.0)
        };
        let target = {
            let mut rng = ChaCha8Rng::seed_from_u64(52);
            Tensor::from_fn(vec![1, 1, 2, n], |_| rng.gen::<f64>() * 2.0 - 1.0)
        };
        let loss_of = |p: &HeadParams<f64>, e: &Tensor<f64>| -> f64 {
            let mut tape = Tape::new();
            let hv = p.register(&mut tape);
            let ev = tape.leaf(e.clone());
            let out = head_forward(&mut tape, ev, &hv, kind).unwrap();
            let tv = tape.leaf(target.clone());
            let l = loss_core_tape(&mut tape, out, tv);
            tape.value(l).data()[0]
        };

        let mut tape = Tape::new();
        let hv = params.register(&mut tape);
        let ev = tape.leaf(emb.clone());
        let out = head_forward(&mut tape, ev, &hv, kind).unwrap();
        let tv = tape.leaf(target.clone());
        let l = loss_core_tape(&mut tape, out, tv);
        let grads = tape.backward(l);

        let h = 1e-5;
        // Parameter gradients, every entry of every group.
        let vars = [hv.w1, hv.b1, hv.w2, hv.b2];
        for (gi, (name, _)) in params.groups().iter().enumerate() {
            let numel = params.groups()[gi].1.numel();
            for j in 0..numel {
                let mut plus = params.clone();
                plus.groups_mut()[gi].1.data_mut()[j] += h;
                let mut minus = params.clone();
                minus.groups_mut()[gi].1.data_mut()[j] -= h;
                let numeric = (loss_of(&plus, &emb) - loss_of(&minus, &emb)) / (2.0 * h);
                let analytic = grads.get(vars[gi]).unwrap()[j];
                let rel = (analytic - numeric).abs()
                    / analytic.abs().max(numeric.abs()).max(1e-3);
                assert!(rel < 1e-4, "{name}[{j}]: {analytic} vs {numeric}");
            }
        }
        // Embedding gradients.
        for j in 0..emb.numel() {
            let mut plus = emb.clone();
            plus.data_mut()[j] += h;
            let mut minus = emb.clone();
            minus.data_mut()[j] -= h;
            let numeric = (loss_of(&params, &plus) - loss_of(&params, &minus)) / (2.0 * h);
            let analytic = grads.get(ev).unwrap()[j];
            let rel =
                (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
            assert!(rel < 1e-4, "emb[{j}]: {analytic} vs {numeric}");
        }
    }
}
