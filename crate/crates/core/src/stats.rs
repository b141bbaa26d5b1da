//! Streaming per-channel normalization statistics and (de)standardization.
//!
//! Single-pass mean/variance follows Welford's update; shard merging follows
//! the Chan parallel rule. Variance is population (m2/count).

use thiserror::Error;

use crate::regrid::NodeTensor;

/// Floor applied to standard deviations so standardization stays invertible.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("channel mismatch: {0}")]
    ChannelMismatch(String),
}

/// Running first and second moments, one slot per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct WelfordState {
    pub count: u64,
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
}

impl WelfordState {
    pub fn new(channels: usize) -> Self {
        WelfordState {
            count: 0,
            mean: vec![0.0; channels],
            m2: vec![0.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Absorbs one sample vector (one value per channel).
    pub fn update(&mut self, x: &[f64]) {
        assert_eq!(x.len(), self.channels(), "sample width mismatch");
        self.count += 1;
        let n = self.count as f64;
        for c in 0..x.len() {
            let delta = x[c] - self.mean[c];
            self.mean[c] += delta / n;
            let delta2 = x[c] - self.mean[c];
            self.m2[c] += delta * delta2;
        }
    }

    /// Absorbs a [C, N] slice, channel-major, in fixed node order.
    pub fn update_slice(&mut self, slice: &[f32], n: usize) {
        let c = self.channels();
        assert_eq!(slice.len(), c * n, "slice shape mismatch");
        let mut sample = vec![0.0; c];
        for ni in 0..n {
            for ci in 0..c {
                sample[ci] = f64::from(slice[ci * n + ni]);
            }
            self.update(&sample);
        }
    }

    /// Population variance m2/count; zeros when empty.
    pub fn variance(&self) -> Vec<f64> {
        if self.count == 0 {
            return vec![0.0; self.channels()];
        }
        self.m2.iter().map(|m| m / self.count as f64).collect()
    }

    /// Merges another shard into this one; equals streaming this shard's
    /// samples then the other's.
    pub fn merge_from(&mut self, b: &WelfordState) {
        assert_eq!(self.channels(), b.channels(), "channel width mismatch");
        if b.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = b.clone();
            return;
        }
        let na = self.count as f64;
        let nb = b.count as f64;
        let n = na + nb;
        for c in 0..self.channels() {
            let delta = b.mean[c] - self.mean[c];
            self.mean[c] += delta * nb / n;
            self.m2[c] += b.m2[c] + delta * delta * na * nb / n;
        }
        self.count += b.count;
    }

    /// Freezes the state into usable per-channel statistics.
    pub fn finalize(&self, names: &[String]) -> ChannelStats {
        assert_eq!(names.len(), self.channels(), "name count mismatch");
        ChannelStats {
            names: names.to_vec(),
            mean: self.mean.clone(),
            std: self
                .variance()
                .iter()
                .map(|v| v.sqrt().max(STD_FLOOR))
                .collect(),
            count: self.count,
        }
    }
}

/// Functional form of the single-sample update.
pub fn welford_update(mut s: WelfordState, x: &[f64]) -> WelfordState {
    s.update(x);
    s
}

/// Functional form of the shard merge.
pub fn welford_merge(a: &WelfordState, b: &WelfordState) -> WelfordState {
    let mut out = a.clone();
    out.merge_from(b);
    out
}

/// Frozen normalization constants, aligned to channels by name.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub names: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub count: u64,
}

impl ChannelStats {
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// (mean, std) for a named channel.
    pub fn lookup(&self, name: &str) -> Result<(f64, f64), StatsError> {
        let i = self
            .index_of(name)
            .ok_or_else(|| StatsError::ChannelMismatch(format!("no stats for channel {name}")))?;
        Ok((self.mean[i], self.std[i]))
    }
}

/// Per channel (x - mean) / std over every time step and node.
pub fn standardize(x: &NodeTensor, stats: &ChannelStats) -> Result<NodeTensor, StatsError> {
    affine_by_channel(x, stats, |v, mean, std| (v - mean) / std)
}

/// Per channel x * std + mean; inverse of standardize.
pub fn destandardize(x: &NodeTensor, stats: &ChannelStats) -> Result<NodeTensor, StatsError> {
    affine_by_channel(x, stats, |v, mean, std| v * std + mean)
}

fn affine_by_channel(
    x: &NodeTensor,
    stats: &ChannelStats,
    f: impl Fn(f64, f64, f64) -> f64,
) -> Result<NodeTensor, StatsError> {
    let mut out = x.clone();
    for (ci, name) in x.channel_names.iter().enumerate() {
        let (mean, std) = stats.lookup(name)?;
        for t in 0..x.t {
            for ni in 0..x.n {
                let v = f64::from(x.get(t, ci, ni));
                out.set(t, ci, ni, f(v, mean, std) as f32);
            }
        }
    }
    Ok(out)
}
