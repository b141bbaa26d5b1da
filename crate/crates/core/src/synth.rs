//! Synthetic weather sequences: smooth, drifting analytic fields evaluated
//! on the three zone grids and sampled onto mesh nodes. A desk-scale stand
//! in for reanalysis data with the same channel list and layout.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::geo::{wrap_lon, Zone};
use crate::mesh::TriMesh;
use crate::regrid::{
    compute_static_features, static_channel_names, static_node_features, zone_sample,
    ChannelSpec, NodeTensor, RectGrid, RegridError, Transform,
};

/// Channel specs matching the canonical 21-channel order; the tp channel is
/// sampled through the log transform and lands as tp_log.
pub fn canonical_channel_specs() -> Vec<ChannelSpec> {
    let mut specs = vec![
        ChannelSpec::surface("t2m"),
        ChannelSpec::surface("d2m"),
        ChannelSpec::surface("msl"),
        ChannelSpec::surface("u10"),
        ChannelSpec::surface("v10"),
        {
            let mut tp = ChannelSpec::surface("tp");
            tp.transform = Transform::TpLog;
            tp
        },
    ];
    for level in [850u32, 500, 300] {
        for v in ["t", "u", "v", "r", "z"] {
            specs.push(ChannelSpec::pressure(&format!("{v}{level}"), level));
        }
    }
    specs
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub n_sequences: usize,
    pub t_steps: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_sequences: 16,
            t_steps: 6,
            seed: 7,
        }
    }
}

/// Generated corpus in physical units (tp already logged), plus the static
/// node features shared by every sequence.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub channel_names: Vec<String>,
    pub sequences: Vec<NodeTensor>,
    pub statics: Vec<f32>,
    pub static_names: Vec<String>,
    pub n_nodes: usize,
}

/// Train/val/test split by sequence index: 70% / 15% / remainder.
pub fn split_by_sequence(n: usize) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let n_train = (n * 70) / 100;
    let n_val = (n * 15) / 100;
    let train: Vec<usize> = (0..n_train).collect();
    let val: Vec<usize> = (n_train..n_train + n_val).collect();
    let test: Vec<usize> = (n_train + n_val..n).collect();
    (train, val, test)
}

#[derive(Debug, Clone, Copy)]
struct DegBox {
    lon_min: f64,
    lon_max: f64,
    lat_min: f64,
    lat_max: f64,
}

fn mesh_bbox(mesh: &TriMesh) -> Result<DegBox, RegridError> {
    let mut b = DegBox {
        lon_min: f64::INFINITY,
        lon_max: f64::NEG_INFINITY,
        lat_min: f64::INFINITY,
        lat_max: f64::NEG_INFINITY,
    };
    for p in &mesh.vertices {
        b.lon_min = b.lon_min.min(p.lon);
        b.lon_max = b.lon_max.max(p.lon);
        b.lat_min = b.lat_min.min(p.lat);
        b.lat_max = b.lat_max.max(p.lat);
    }
    if wrap_lon(mesh.roi.lon_min) > wrap_lon(mesh.roi.lon_max) {
        return Err(RegridError::InvalidGrid(
            "synthetic generation needs a domain clear of the antimeridian".to_string(),
        ));
    }
    Ok(b)
}

fn snapped_axis(lo: f64, hi: f64, res: f64) -> Vec<f64> {
    let start = ((lo - 2.0 * res) / res).floor() * res;
    let end = ((hi + 2.0 * res) / res).ceil() * res;
    let count = ((end - start) / res).round() as usize + 1;
    (0..count.max(3)).map(|i| start + i as f64 * res).collect()
}

/// The three zone boxes: ROI from the mesh spec, belt from the margins,
/// outer from the actual vertex extent.
fn zone_boxes(mesh: &TriMesh) -> Result<[DegBox; 3], RegridError> {
    let outer = mesh_bbox(mesh)?;
    let roi = DegBox {
        lon_min: mesh.roi.lon_min,
        lon_max: mesh.roi.lon_max,
        lat_min: mesh.roi.lat_min,
        lat_max: mesh.roi.lat_max,
    };
    let belt = DegBox {
        lon_min: roi.lon_min - mesh.roi.belt_dlon,
        lon_max: roi.lon_max + mesh.roi.belt_dlon,
        lat_min: roi.lat_min - mesh.roi.belt_dlat,
        lat_max: roi.lat_max + mesh.roi.belt_dlat,
    };
    Ok([roi, belt, outer])
}

/// One sequence's drawn generator parameters. Every field is a smooth
/// closed-form function of (lon, lat, step), so the three zone grids agree
/// wherever they overlap and regeneration is bit-identical.
struct SeqParams {
    drift: (f64, f64),
    temp_blobs: Vec<(f64, f64, f64, f64)>,
    precip_blobs: Vec<(f64, f64, f64, f64)>,
    psi_amp: f64,
    a: f64,
    b: f64,
    omega: f64,
    p1: f64,
    p2: f64,
    chi_amp: f64,
    p3: f64,
    p4: f64,
    pd: f64,
    pm: f64,
    pr: f64,
    x0: f64,
    y0: f64,
}

impl SeqParams {
    fn draw(rng: &mut ChaCha8Rng, domain: &DegBox) -> Self {
        let lx = domain.lon_max - domain.lon_min;
        let ly = domain.lat_max - domain.lat_min;
        let x0 = 0.5 * (domain.lon_min + domain.lon_max);
        let y0 = 0.5 * (domain.lat_min + domain.lat_max);
        let angle = rng.gen::<f64>() * std::f64::consts::TAU;
        let speed = 0.4 + 0.6 * rng.gen::<f64>();
        let drift = (speed * angle.cos(), speed * angle.sin());
        let normal: Normal<f64> = Normal::new(0.0, 0.7).expect("fixed sigma");
        let n_temp = rng.gen_range(3..=5);
        let temp_blobs = (0..n_temp)
            .map(|_| {
                (
                    domain.lon_min + rng.gen::<f64>() * lx,
                    domain.lat_min + rng.gen::<f64>() * ly,
                    2.0 + 2.0 * rng.gen::<f64>(),
                    -6.0 + 12.0 * rng.gen::<f64>(),
                )
            })
            .collect();
        let n_precip = rng.gen_range(2..=4);
        let precip_blobs = (0..n_precip)
            .map(|_| {
                (
                    domain.lon_min + rng.gen::<f64>() * lx,
                    domain.lat_min + rng.gen::<f64>() * ly,
                    1.0 + 2.0 * rng.gen::<f64>(),
                    1.5 * normal.sample(rng).exp(),
                )
            })
            .collect();
        let kx = rng.gen_range(1..=2) as f64;
        let ky = rng.gen_range(1..=2) as f64;
        SeqParams {
            drift,
            temp_blobs,
            precip_blobs,
            psi_amp: 3.0 + 3.0 * rng.gen::<f64>(),
            a: std::f64::consts::TAU * kx / lx,
            b: std::f64::consts::TAU * ky / ly,
            omega: 0.25 + 0.35 * rng.gen::<f64>(),
            p1: rng.gen::<f64>() * std::f64::consts::TAU,
            p2: rng.gen::<f64>() * std::f64::consts::TAU,
            chi_amp: 0.5 + 0.5 * rng.gen::<f64>(),
            p3: rng.gen::<f64>() * std::f64::consts::TAU,
            p4: rng.gen::<f64>() * std::f64::consts::TAU,
            pd: rng.gen::<f64>() * std::f64::consts::TAU,
            pm: rng.gen::<f64>() * std::f64::consts::TAU,
            pr: rng.gen::<f64>() * std::f64::consts::TAU,
            x0,
            y0,
        }
    }

    /// All 21 raw channels at one point and step, in canonical grid order
    /// (tp still in mm, logged later by the sampler).
    fn eval(&self, lon: f64, lat: f64, step: f64) -> [f64; 21] {
        let gauss = |dx: f64, dy: f64, sigma: f64| {
            (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
        };
        let x = lon - self.x0;
        let y = lat - self.y0;

        let mut t2m = 285.0 - 0.5 * y;
        for &(cx, cy, sigma, amp) in &self.temp_blobs {
            let bx = cx + self.drift.0 * step;
            let by = cy + self.drift.1 * step;
            t2m += amp * gauss(lon - bx, lat - by, sigma);
        }

        let ph = self.a * x + self.omega * step + self.p1;
        let pv = self.b * y + self.p2;
        let psi_norm = ph.sin() * pv.cos();
        // Rotational flow from the streamfunction, a weak divergent part,
        // and a mean wind aligned with the blob drift.
        let speed = (self.drift.0 * self.drift.0 + self.drift.1 * self.drift.1).sqrt();
        let u_mean = 8.0 * self.drift.0 / speed;
        let v_mean = 8.0 * self.drift.1 / speed;
        let u10 = self.psi_amp * self.b * ph.sin() * pv.sin() + u_mean
            - self.chi_amp * (0.5 * self.a) * (0.5 * self.a * x + self.p3).sin()
                * (0.5 * self.b * y + self.p4).cos();
        let v10 = self.psi_amp * self.a * ph.cos() * pv.cos() + v_mean
            - self.chi_amp * (0.5 * self.b) * (0.5 * self.a * x + self.p3).cos()
                * (0.5 * self.b * y + self.p4).sin();

        let mut tp = -0.5;
        for &(cx, cy, sigma, amp) in &self.precip_blobs {
            let bx = cx + self.drift.0 * step;
            let by = cy + self.drift.1 * step;
            tp += amp * gauss(lon - bx, lat - by, sigma);
        }
        let tp = (2.0 * tp).max(0.0);

        let d2m = t2m - (3.0 + 2.0 * (0.5 + 0.5 * (self.a * x + self.pd).sin() * pv.cos()));
        let msl = 101_300.0 - 350.0 * psi_norm
            + 150.0 * (0.7 * self.a * x + self.pm).cos() * (0.7 * self.b * y + self.pm).cos();

        let mut out = [0.0f64; 21];
        out[0] = t2m;
        out[1] = d2m;
        out[2] = msl;
        out[3] = u10;
        out[4] = v10;
        out[5] = tp;
        let humid = (self.a * x + self.omega * step + self.pr).sin() * pv.cos();
        for (li, &(t_off, shear, z0, z_amp)) in [
            (-8.0, 1.4, 1450.0, 18.0),
            (-30.0, 2.0, 5650.0, 55.0),
            (-52.0, 2.6, 9150.0, 90.0),
        ]
        .iter()
        .enumerate()
        {
            let base = 6 + li * 5;
            out[base] = t2m + t_off + 2.0 * (ph + li as f64).sin();
            out[base + 1] = shear * u10 + 2.0 * (pv + li as f64).sin();
            out[base + 2] = shear * v10 + 2.0 * (ph + 0.5 + li as f64).cos();
            out[base + 3] = (55.0 - 6.0 * li as f64 + (35.0 - 5.0 * li as f64) * humid)
                .clamp(2.0, 98.0);
            out[base + 4] = z0 + z_amp * psi_norm + 10.0 * (pv + 1.0 + li as f64).cos();
        }
        out
    }
}

/// Analytic terrain shared by every sequence; water wherever it dips below
/// sea level.
fn elevation(lon: f64, lat: f64, domain: &DegBox) -> f64 {
    let lx = (domain.lon_max - domain.lon_min).max(1e-9);
    let ly = (domain.lat_max - domain.lat_min).max(1e-9);
    let x0 = 0.5 * (domain.lon_min + domain.lon_max);
    let y0 = 0.5 * (domain.lat_min + domain.lat_max);
    let g = |dx: f64, dy: f64| (-(dx * dx + dy * dy)).exp();
    900.0 * g(
        (lon - (x0 - lx / 6.0)) / (lx / 5.0),
        (lat - (y0 + ly / 8.0)) / (ly / 7.0),
    ) + 500.0
        * g(
            (lon - (x0 + lx / 5.0)) / (lx / 8.0),
            (lat - y0) / (ly / 6.0),
        )
        - 120.0
}

fn dynamic_grid(
    axis_box: &DegBox,
    res: f64,
    params: &SeqParams,
    step: f64,
    names: &[String],
) -> Result<RectGrid, RegridError> {
    let lons = snapped_axis(axis_box.lon_min, axis_box.lon_max, res);
    let lats = snapped_axis(axis_box.lat_min, axis_box.lat_max, res);
    let (w, h) = (lons.len(), lats.len());
    let mut data = vec![0f32; 21 * h * w];
    for (j, &lat) in lats.iter().enumerate() {
        for (i, &lon) in lons.iter().enumerate() {
            let vals = params.eval(lon, lat, step);
            for (c, &v) in vals.iter().enumerate() {
                data[(c * h + j) * w + i] = v as f32;
            }
        }
    }
    RectGrid::new(lons, lats, res, names.to_vec(), data, None)
}

fn static_grid(axis_box: &DegBox, res: f64, domain: &DegBox) -> Result<RectGrid, RegridError> {
    let lons = snapped_axis(axis_box.lon_min, axis_box.lon_max, res);
    let lats = snapped_axis(axis_box.lat_min, axis_box.lat_max, res);
    let (w, h) = (lons.len(), lats.len());
    let mut data = vec![0f32; h * w];
    let mut water = vec![false; h * w];
    for (j, &lat) in lats.iter().enumerate() {
        for (i, &lon) in lons.iter().enumerate() {
            let e = elevation(lon, lat, domain);
            data[j * w + i] = e.max(0.0) as f32;
            water[j * w + i] = e < 0.0;
        }
    }
    let elev = RectGrid::new(
        lons,
        lats,
        res,
        vec!["elev".to_string()],
        data,
        Some(water),
    )?;
    compute_static_features(&elev)
}

/// Static node features for the mesh from the analytic terrain, as [S, N].
pub fn synth_statics(mesh: &TriMesh) -> Result<Vec<f32>, RegridError> {
    let boxes = zone_boxes(mesh)?;
    let outer_box = boxes[2];
    let res = [
        mesh.spacing.s_roi,
        mesh.spacing.s_belt,
        mesh.spacing.s_outer,
    ];
    let roi = static_grid(&boxes[0], res[0], &outer_box)?;
    let belt = static_grid(&boxes[1], res[1], &outer_box)?;
    let outer = static_grid(&boxes[2], res[2], &outer_box)?;
    let mut grids: BTreeMap<Zone, &RectGrid> = BTreeMap::new();
    grids.insert(Zone::Roi, &roi);
    grids.insert(Zone::Belt, &belt);
    grids.insert(Zone::Outer, &outer);
    static_node_features(mesh, &grids)
}

/// Generates the full synthetic corpus on a mesh: n_sequences independent
/// sequences of t_steps frames each, all channels sampled to nodes, plus
/// the shared static features.
pub fn synth_dataset(mesh: &TriMesh, cfg: &SynthConfig) -> Result<SynthData, RegridError> {
    if cfg.n_sequences == 0 || cfg.t_steps == 0 {
        return Err(RegridError::InvalidGrid(
            "need at least one sequence and one step".to_string(),
        ));
    }
    let specs = canonical_channel_specs();
    let grid_names: Vec<String> = specs.iter().map(|s| s.name.clone()).collect();
    let out_names: Vec<String> = specs.iter().map(|s| s.output_name()).collect();
    let boxes = zone_boxes(mesh)?;
    let domain = boxes[2];
    let res = [
        mesh.spacing.s_roi,
        mesh.spacing.s_belt,
        mesh.spacing.s_outer,
    ];
    let n = mesh.n_vertices();

    let mut sequences = Vec::with_capacity(cfg.n_sequences);
    for s in 0..cfg.n_sequences {
        let mut rng = ChaCha8Rng::seed_from_u64(
            cfg.seed ^ (s as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        let params = SeqParams::draw(&mut rng, &domain);
        let mut tensor = NodeTensor::zeros(cfg.t_steps, out_names.clone(), n);
        for t in 0..cfg.t_steps {
            let step = t as f64;
            let roi_g = dynamic_grid(&boxes[0], res[0], &params, step, &grid_names)?;
            let belt_g = dynamic_grid(&boxes[1], res[1], &params, step, &grid_names)?;
            let outer_g = dynamic_grid(&boxes[2], res[2], &params, step, &grid_names)?;
            let mut grids: BTreeMap<Zone, &RectGrid> = BTreeMap::new();
            grids.insert(Zone::Roi, &roi_g);
            grids.insert(Zone::Belt, &belt_g);
            grids.insert(Zone::Outer, &outer_g);
            zone_sample(mesh, &grids, &specs, &mut tensor, t)?;
        }
        if !tensor.all_finite() {
            return Err(RegridError::NonFinite(format!("sequence {s}")));
        }
        sequences.push(tensor);
    }

    let statics = synth_statics(mesh)?;
    Ok(SynthData {
        channel_names: out_names,
        sequences,
        statics,
        static_names: static_channel_names(),
        n_nodes: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{Ellipsoid, RoiSpec, SpacingSpec};
    use crate::mesh::{build_mesh_with, MeshBuildOptions};
    use crate::model::canonical_channels;

    fn small_mesh() -> TriMesh {
        let roi = RoiSpec {
            lon_min: 0.0,
            lon_max: 3.0,
            lat_min: 50.0,
            lat_max: 52.0,
            belt_dlon: 1.5,
            belt_dlat: 1.0,
        };
        let spacing = SpacingSpec {
            s_roi: 0.5,
            s_belt: 0.75,
            s_outer: 1.0,
        };
        let opts = MeshBuildOptions {
            outer_dlon: 3.0,
            outer_dlat: 2.0,
            ..MeshBuildOptions::default()
        };
        build_mesh_with(&Ellipsoid::wgs84(), &roi, &spacing, 2024, &opts)
            .expect("small mesh builds")
    }

    #[test]
    fn channel_specs_match_canonical_order() {
        let specs = canonical_channel_specs();
        let names: Vec<String> = specs.iter().map(|s| s.output_name()).collect();
        assert_eq!(names, canonical_channels());
    }

    #[test]
    fn split_is_70_15_15_by_index() {
        let (train, val, test) = split_by_sequence(20);
        assert_eq!(train, (0..14).collect::<Vec<_>>());
        assert_eq!(val, (14..17).collect::<Vec<_>>());
        assert_eq!(test, (17..20).collect::<Vec<_>>());
        let (train, val, test) = split_by_sequence(3);
        assert_eq!((train.len(), val.len(), test.len()), (2, 0, 1));
    }

    #[test]
    fn fixed_seed_is_bit_identical_and_fields_move() {
        let mesh = small_mesh();
        let cfg = SynthConfig {
            n_sequences: 2,
            t_steps: 3,
            seed: 11,
        };
        let a = synth_dataset(&mesh, &cfg).unwrap();
        let b = synth_dataset(&mesh, &cfg).unwrap();
        assert_eq!(a.channel_names, b.channel_names);
        for (sa, sb) in a.sequences.iter().zip(&b.sequences) {
            let bits_a: Vec<u32> = sa.data.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = sb.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        assert_eq!(
            a.statics.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.statics.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );

        // Consecutive frames differ: the fields genuinely drift.
        let s = &a.sequences[0];
        let frame0 = s.time_slice(0);
        let frame1 = s.time_slice(1);
        assert!(frame0.iter().zip(frame1).any(|(x, y)| x != y));

        // Different sequences differ from each other.
        let other = &a.sequences[1];
        assert!(s
            .time_slice(0)
            .iter()
            .zip(other.time_slice(0))
            .any(|(x, y)| x != y));
    }

    #[test]
    fn tp_log_is_non_negative_and_statics_are_sane() {
        let mesh = small_mesh();
        let cfg = SynthConfig {
            n_sequences: 3,
            t_steps: 4,
            seed: 5,
        };
        let data = synth_dataset(&mesh, &cfg).unwrap();
        let ci = data
            .channel_names
            .iter()
            .position(|n| n == "tp_log")
            .unwrap();
        for s in &data.sequences {
            for t in 0..s.t {
                for node in 0..s.n {
                    assert!(s.get(t, ci, node) >= 0.0, "tp_log must be non-negative");
                }
            }
        }
        assert_eq!(data.static_names.len(), 8);
        assert_eq!(data.statics.len(), 8 * mesh.n_vertices());
        assert!(data.statics.iter().all(|v| v.is_finite()));
        // Water fractions live in [0, 1].
        let n = mesh.n_vertices();
        for node in 0..n {
            let w = data.statics[3 * n + node];
            assert!((0.0..=1.0).contains(&w), "water fraction {w}");
        }
    }
}
