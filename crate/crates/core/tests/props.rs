//! Property checks over randomized inputs: sampler linearity, streaming
//! statistics against a two-pass reference, codec roundtrips, and the
//! precipitation transform.

use proptest::prelude::*;

use mrgnf_core::io;
use mrgnf_core::{
    bilinear_sample, log_to_tp, tp_to_log, welford_merge, ChannelStats, GeoPoint, NodeTensor,
    RectGrid, WelfordState,
};

/// Grid over [0, (w-1)*res] x [50, 50+(h-1)*res] with one channel.
fn grid_from(values: Vec<f32>, w: usize, h: usize, res: f64) -> RectGrid {
    let lons: Vec<f64> = (0..w).map(|i| res * i as f64).collect();
    let lats: Vec<f64> = (0..h).map(|j| 50.0 + res * j as f64).collect();
    RectGrid::new(lons, lats, res, vec!["x".into()], values, None).expect("grid is valid")
}

/// Interior point strictly inside the grid for a unit fraction pair.
fn interior_point(w: usize, h: usize, res: f64, fx: f64, fy: f64) -> GeoPoint {
    let lon = res * (w - 1) as f64 * fx.clamp(0.01, 0.99);
    let lat = 50.0 + res * (h - 1) as f64 * fy.clamp(0.01, 0.99);
    GeoPoint::new(lon, lat)
}

proptest! {
    /// Bilinear sampling is linear in the field: sampling a*F + b*G
    /// equals a*sample(F) + b*sample(G). Integer-valued fields keep f32
    /// arithmetic exact, so the identity holds to f64 rounding.
    #[test]
    fn bilinear_is_linear(
        f_vals in prop::collection::vec(-512i32..512, 12*9),
        g_vals in prop::collection::vec(-512i32..512, 12*9),
        a in -7i32..7,
        b in -7i32..7,
        fx in 0.0f64..1.0,
        fy in 0.0f64..1.0,
    ) {
        let (w, h, res) = (12, 9, 0.5);
        let f: Vec<f32> = f_vals.iter().map(|&v| v as f32).collect();
        let g: Vec<f32> = g_vals.iter().map(|&v| v as f32).collect();
        let combo: Vec<f32> = f.iter().zip(&g)
            .map(|(&fv, &gv)| a as f32 * fv + b as f32 * gv)
            .collect();
        let p = interior_point(w, h, res, fx, fy);
        let sf = bilinear_sample(&grid_from(f, w, h, res), p, 0).unwrap();
        let sg = bilinear_sample(&grid_from(g, w, h, res), p, 0).unwrap();
        let sc = bilinear_sample(&grid_from(combo, w, h, res), p, 0).unwrap();
        let want = a as f64 * sf + b as f64 * sg;
        prop_assert!((sc - want).abs() <= 1e-9 * (1.0 + want.abs()),
            "sampled {sc}, linear combination gives {want}");
    }

    /// Streaming moments match a two-pass reference computation.
    #[test]
    fn welford_matches_two_pass(
        samples in prop::collection::vec(
            prop::collection::vec(-1e3f64..1e3, 3), 2..60),
    ) {
        let mut w = WelfordState::new(3);
        for s in &samples {
            w.update(s);
        }
        let n = samples.len() as f64;
        for c in 0..3 {
            let mean: f64 = samples.iter().map(|s| s[c]).sum::<f64>() / n;
            let var: f64 = samples.iter()
                .map(|s| (s[c] - mean).powi(2)).sum::<f64>() / n;
            prop_assert!((w.mean[c] - mean).abs() <= 1e-10 * (1.0 + mean.abs()));
            prop_assert!((w.variance()[c] - var).abs() <= 1e-9 * (1.0 + var.abs()));
        }
    }

    /// Merging two shards equals streaming their concatenation.
    #[test]
    fn welford_merge_matches_stream(
        xs in prop::collection::vec(prop::collection::vec(-50f64..50.0, 2), 0..30),
        ys in prop::collection::vec(prop::collection::vec(-50f64..50.0, 2), 0..30),
    ) {
        let mut a = WelfordState::new(2);
        for x in &xs { a.update(x); }
        let mut b = WelfordState::new(2);
        for y in &ys { b.update(y); }
        let merged = welford_merge(&a, &b);
        let mut all = WelfordState::new(2);
        for x in xs.iter().chain(ys.iter()) { all.update(x); }
        prop_assert_eq!(merged.count, all.count);
        for c in 0..2 {
            prop_assert!((merged.mean[c] - all.mean[c]).abs() <= 1e-10 * (1.0 + all.mean[c].abs()));
            prop_assert!((merged.m2[c] - all.m2[c]).abs() <= 1e-8 * (1.0 + all.m2[c].abs()));
        }
    }

    /// Node tensor files read back exactly what was written.
    #[test]
    fn node_tensor_roundtrips(
        t in 1usize..4,
        n in 1usize..20,
        c in 1usize..5,
        seed_vals in prop::collection::vec(-1e6f32..1e6, 1..400),
    ) {
        let names: Vec<String> = (0..c).map(|i| format!("ch{i}")).collect();
        let mut x = NodeTensor::zeros(t, names, n);
        for (i, v) in x.data.iter_mut().enumerate() {
            *v = seed_vals[i % seed_vals.len()];
        }
        let bytes = io::write_node_tensor(&x);
        let back = io::read_node_tensor(&bytes).unwrap();
        prop_assert_eq!(back, x);
    }

    /// Gridded files read back exactly what was written, mask included.
    #[test]
    fn rgrid_roundtrips(
        w in 2usize..10,
        h in 2usize..10,
        res_step in 1u32..8,
        vals in prop::collection::vec(-1e5f32..1e5, 1..200),
        with_mask in any::<bool>(),
        mask_bits in prop::collection::vec(any::<bool>(), 1..100),
    ) {
        let res = res_step as f64 * 0.125;
        let lons: Vec<f64> = (0..w).map(|i| res * i as f64).collect();
        let lats: Vec<f64> = (0..h).map(|j| -10.0 + res * j as f64).collect();
        let data: Vec<f32> = (0..w * h).map(|i| vals[i % vals.len()]).collect();
        let mask = with_mask.then(|| (0..w * h).map(|i| mask_bits[i % mask_bits.len()]).collect());
        let grid = RectGrid::new(lons, lats, res, vec!["x".into()], data, mask).unwrap();
        let bytes = io::write_rgrid(&grid);
        let (back, warnings) = io::read_rgrid(&bytes).unwrap();
        prop_assert!(warnings.is_empty());
        prop_assert_eq!(back, grid);
    }

    /// Statistics files reproduce every f64 bit for bit.
    #[test]
    fn stats_json_roundtrips(
        means in prop::collection::vec(-1e8f64..1e8, 1..8),
        stds in prop::collection::vec(1e-6f64..1e6, 1..8),
        count in 1u64..1_000_000,
    ) {
        let c = means.len().min(stds.len());
        let stats = ChannelStats {
            names: (0..c).map(|i| format!("ch{i}")).collect(),
            mean: means[..c].to_vec(),
            std: stds[..c].to_vec(),
            count,
        };
        let text = io::write_stats_json(&stats);
        let back = io::read_stats_json(&text).unwrap();
        prop_assert_eq!(back, stats);
    }

    /// The precipitation transform is monotone and invertible on the
    /// physical domain.
    #[test]
    fn tp_log_monotone_and_invertible(
        lo in 0.0f64..100.0,
        delta in 1e-9f64..100.0,
    ) {
        let hi = lo + delta;
        prop_assert!(tp_to_log(hi) > tp_to_log(lo));
        let back = log_to_tp(tp_to_log(lo));
        prop_assert!((back - lo).abs() <= 1e-9 * (1.0 + lo.abs()),
            "roundtrip {back} vs {lo}");
    }
}
