//! Transfer of rectilinear lat-lon fields onto mesh nodes: zone-aware
//! routing, coast-aware bilinear sampling, precipitation log transform,
//! static terrain features, and positional encodings.
//!
//! Grid data is stored in f32 but every interpolation runs in f64.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::geo::{wrap_lon, GeoPoint, Zone};
use crate::mesh::TriMesh;

/// Mean earth radius used to convert grid steps to meters for slope.
const EARTH_RADIUS_M: f64 = 6_371_000.0;

#[derive(Debug, Error)]
pub enum RegridError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("point ({lon}, {lat}) outside grid coverage")]
    OutOfRange { lon: f64, lat: f64 },
    #[error("no grid supplied for zone {0:?}")]
    MissingZoneGrid(Zone),
    #[error("channel mismatch: {0}")]
    ChannelMismatch(String),
    #[error("grid smaller than 3x3")]
    GridTooSmall,
    #[error("sampling produced a non-finite value for channel {0}")]
    NonFinite(String),
}

/// Rectilinear lat-lon grid holding one or more channels.
///
/// `data` is laid out [C, H, W] row-major with H indexing `lats` and W
/// indexing `lons`. Both axes ascend with uniform spacing `resolution`.
/// `water_mask` marks water cells (true = water).
#[derive(Debug, Clone, PartialEq)]
pub struct RectGrid {
    pub lons: Vec<f64>,
    pub lats: Vec<f64>,
    pub resolution: f64,
    pub channel_names: Vec<String>,
    pub data: Vec<f32>,
    pub water_mask: Option<Vec<bool>>,
}

impl RectGrid {
    pub fn new(
        lons: Vec<f64>,
        lats: Vec<f64>,
        resolution: f64,
        channel_names: Vec<String>,
        data: Vec<f32>,
        water_mask: Option<Vec<bool>>,
    ) -> Result<Self, RegridError> {
        if lons.len() < 2 || lats.len() < 2 {
            return Err(RegridError::InvalidGrid(
                "grid needs at least 2 points per axis".to_string(),
            ));
        }
        if !(resolution > 0.0) {
            return Err(RegridError::InvalidGrid(format!(
                "resolution must be positive, got {resolution}"
            )));
        }
        for axis in [&lons, &lats] {
            for w in axis.windows(2) {
                if (w[1] - w[0] - resolution).abs() > 1e-9 {
                    return Err(RegridError::InvalidGrid(format!(
                        "axis step {} differs from resolution {}",
                        w[1] - w[0],
                        resolution
                    )));
                }
            }
        }
        let (c, h, w) = (channel_names.len(), lats.len(), lons.len());
        if data.len() != c * h * w {
            return Err(RegridError::InvalidGrid(format!(
                "data length {} does not match C*H*W = {}*{}*{}",
                data.len(),
                c,
                h,
                w
            )));
        }
        if let Some(mask) = &water_mask {
            if mask.len() != h * w {
                return Err(RegridError::InvalidGrid(format!(
                    "mask length {} does not match H*W = {}*{}",
                    mask.len(),
                    h,
                    w
                )));
            }
        }
        Ok(RectGrid {
            lons,
            lats,
            resolution,
            channel_names,
            data,
            water_mask,
        })
    }

    pub fn width(&self) -> usize {
        self.lons.len()
    }

    pub fn height(&self) -> usize {
        self.lats.len()
    }

    pub fn n_channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channel_names.iter().position(|n| n == name)
    }

    pub fn value(&self, c: usize, j: usize, i: usize) -> f64 {
        f64::from(self.data[(c * self.height() + j) * self.width() + i])
    }

    pub fn value_mut(&mut self, c: usize, j: usize, i: usize) -> &mut f32 {
        let (h, w) = (self.height(), self.width());
        &mut self.data[(c * h + j) * w + i]
    }

    fn is_water(&self, j: usize, i: usize) -> bool {
        self.water_mask.as_ref().map(|m| m[j * self.width() + i]).unwrap_or(false)
    }

    /// Whether the lon axis covers the full circle, making lookup wrap.
    fn is_global_lon(&self) -> bool {
        (self.width() as f64 * self.resolution - 360.0).abs() < 1e-6
    }

    /// Stencil of a point: cell indices (j0, i0), the wrapped column i1,
    /// and normalized offsets (tx, ty). Errors outside coverage.
    fn stencil(&self, p: GeoPoint) -> Result<Stencil, RegridError> {
        let h = self.height();
        let w = self.width();
        if p.lat < self.lats[0] || p.lat > self.lats[h - 1] {
            return Err(RegridError::OutOfRange {
                lon: p.lon,
                lat: p.lat,
            });
        }
        let v = (p.lat - self.lats[0]) / self.resolution;
        let mut j0 = v.floor() as usize;
        if j0 >= h - 1 {
            j0 = h - 2;
        }
        let ty = v - j0 as f64;

        let d = (p.lon - self.lons[0]).rem_euclid(360.0);
        let u = d / self.resolution;
        let (i0, i1, tx) = if self.is_global_lon() {
            let i0 = (u.floor() as usize).min(w - 1);
            (i0, (i0 + 1) % w, u - i0 as f64)
        } else {
            if u > (w - 1) as f64 {
                return Err(RegridError::OutOfRange {
                    lon: p.lon,
                    lat: p.lat,
                });
            }
            let mut i0 = u.floor() as usize;
            if i0 >= w - 1 {
                i0 = w - 2;
            }
            (i0, i0 + 1, u - i0 as f64)
        };
        Ok(Stencil { j0, i0, i1, tx, ty })
    }
}

struct Stencil {
    j0: usize,
    i0: usize,
    i1: usize,
    tx: f64,
    ty: f64,
}

impl Stencil {
    /// Corner cells as (j, i, weight), in f00, f01, f10, f11 order.
    fn corners(&self) -> [(usize, usize, f64); 4] {
        let (tx, ty) = (self.tx, self.ty);
        [
            (self.j0, self.i0, (1.0 - tx) * (1.0 - ty)),
            (self.j0, self.i1, tx * (1.0 - ty)),
            (self.j0 + 1, self.i0, (1.0 - tx) * ty),
            (self.j0 + 1, self.i1, tx * ty),
        ]
    }
}

/// Bilinear interpolation of one channel at a point. Longitude wraps across
/// the seam; latitude outside the axis range errors (no extrapolation).
pub fn bilinear_sample(g: &RectGrid, p: GeoPoint, channel: usize) -> Result<f64, RegridError> {
    let s = g.stencil(p)?;
    let f00 = g.value(channel, s.j0, s.i0);
    let f01 = g.value(channel, s.j0, s.i1);
    let f10 = g.value(channel, s.j0 + 1, s.i0);
    let f11 = g.value(channel, s.j0 + 1, s.i1);
    let (tx, ty) = (s.tx, s.ty);
    Ok((1.0 - tx) * (1.0 - ty) * f00 + tx * (1.0 - ty) * f01 + (1.0 - tx) * ty * f10 + tx * ty * f11)
}

/// Which cells a masked channel may draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskClass {
    Any,
    Land,
    Water,
}

/// Coast-aware bilinear sampling: stencil cells whose mask class mismatches
/// are dropped and the remaining weights renormalized. When the whole
/// stencil mismatches, the nearest matching cell within a 5x5 window is
/// used; with no match there either, falls back to plain bilinear.
pub fn coast_mask_sample(
    g: &RectGrid,
    p: GeoPoint,
    channel: usize,
    mask_class: MaskClass,
) -> Result<f64, RegridError> {
    let want_water = match mask_class {
        MaskClass::Any => return bilinear_sample(g, p, channel),
        MaskClass::Water => true,
        MaskClass::Land => false,
    };
    if g.water_mask.is_none() {
        return Err(RegridError::InvalidGrid(
            "coast-aware sampling requires a water mask".to_string(),
        ));
    }
    let s = g.stencil(p)?;
    let corners = s.corners();
    // Mismatches with zero weight cannot change the result; skipping them
    // keeps the all-match path bit-identical to plain bilinear.
    let any_effective_mismatch = corners
        .iter()
        .any(|&(j, i, w)| w > 0.0 && g.is_water(j, i) != want_water);
    if !any_effective_mismatch {
        return bilinear_sample(g, p, channel);
    }

    let mut wsum = 0.0;
    let mut acc = 0.0;
    for &(j, i, w) in &corners {
        if g.is_water(j, i) == want_water {
            wsum += w;
            acc += w * g.value(channel, j, i);
        }
    }
    if wsum > 0.0 {
        return Ok(acc / wsum);
    }

    // Whole stencil mismatches: nearest matching cell in the 5x5 window
    // around the nearest grid point, by squared degree distance.
    let h = g.height();
    let w = g.width();
    let jc = (s.j0 as f64 + s.ty).round() as isize;
    let ic_base = s.i0 as isize;
    let ic = ic_base + s.tx.round() as isize;
    let mut best: Option<(f64, usize, usize)> = None;
    for dj in -2isize..=2 {
        let j = jc + dj;
        if j < 0 || j >= h as isize {
            continue;
        }
        for di in -2isize..=2 {
            let i = if g.is_global_lon() {
                (ic + di).rem_euclid(w as isize)
            } else {
                let i = ic + di;
                if i < 0 || i >= w as isize {
                    continue;
                }
                i
            };
            let (j, i) = (j as usize, i as usize);
            if g.is_water(j, i) != want_water {
                continue;
            }
            let dlat = g.lats[j] - p.lat;
            let dlon = wrap_lon(g.lons[i] - p.lon);
            let d2 = dlat * dlat + dlon * dlon;
            if best.map(|(bd, _, _)| d2 < bd).unwrap_or(true) {
                best = Some((d2, j, i));
            }
        }
    }
    match best {
        Some((_, j, i)) => Ok(g.value(channel, j, i)),
        None => bilinear_sample(g, p, channel),
    }
}

/// Log-stabilized precipitation: ln(1 + max(tp, 0)).
pub fn tp_to_log(tp: f64) -> f64 {
    tp.max(0.0).ln_1p()
}

/// Inverse of the precipitation transform: exp(y) - 1.
pub fn log_to_tp(y: f64) -> f64 {
    y.exp_m1()
}

/// Index of the level nearest the target; ties break toward the lower
/// pressure (higher altitude).
pub fn nearest_level(levels: &[u32], target: u32) -> usize {
    assert!(!levels.is_empty(), "nearest_level needs at least one level");
    let mut best = 0;
    for (i, &l) in levels.iter().enumerate() {
        let d = (i64::from(l) - i64::from(target)).abs();
        let bd = (i64::from(levels[best]) - i64::from(target)).abs();
        if d < bd || (d == bd && l < levels[best]) {
            best = i;
        }
    }
    best
}

/// Channel role in the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelKind {
    Surface,
    PressureLevel,
    Static,
    Positional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    Identity,
    TpLog,
}

/// Description of one sampled channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSpec {
    pub name: String,
    pub kind: ChannelKind,
    pub level: Option<u32>,
    pub transform: Transform,
    pub mask_class: MaskClass,
}

impl ChannelSpec {
    pub fn surface(name: &str) -> Self {
        ChannelSpec {
            name: name.to_string(),
            kind: ChannelKind::Surface,
            level: None,
            transform: Transform::Identity,
            mask_class: MaskClass::Any,
        }
    }

    pub fn pressure(name: &str, level: u32) -> Self {
        ChannelSpec {
            name: name.to_string(),
            kind: ChannelKind::PressureLevel,
            level: Some(level),
            transform: Transform::Identity,
            mask_class: MaskClass::Any,
        }
    }

    pub fn validate(&self) -> Result<(), RegridError> {
        if self.kind == ChannelKind::PressureLevel {
            match self.level {
                Some(850) | Some(500) | Some(300) => {}
                other => {
                    return Err(RegridError::ChannelMismatch(format!(
                        "pressure channel {} must carry level 850/500/300, got {:?}",
                        self.name, other
                    )))
                }
            }
        }
        Ok(())
    }

    /// Name of the channel in sampled output; the log transform renames
    /// the raw channel (tp becomes tp_log).
    pub fn output_name(&self) -> String {
        match self.transform {
            Transform::Identity => self.name.clone(),
            Transform::TpLog => format!("{}_log", self.name),
        }
    }
}

/// Node-major tensor of sampled values, laid out [T, C, N].
#[derive(Debug, Clone, PartialEq)]
pub struct NodeTensor {
    pub t: usize,
    pub n: usize,
    pub channel_names: Vec<String>,
    pub data: Vec<f32>,
}

impl NodeTensor {
    pub fn zeros(t: usize, channel_names: Vec<String>, n: usize) -> Self {
        let c = channel_names.len();
        NodeTensor {
            t,
            n,
            channel_names,
            data: vec![0.0; t * c * n],
        }
    }

    pub fn c(&self) -> usize {
        self.channel_names.len()
    }

    pub fn get(&self, t: usize, c: usize, n: usize) -> f32 {
        self.data[(t * self.c() + c) * self.n + n]
    }

    pub fn set(&mut self, t: usize, c: usize, n: usize, v: f32) {
        let c_total = self.c();
        self.data[(t * c_total + c) * self.n + n] = v;
    }

    /// Contiguous [C, N] slice for one time step.
    pub fn time_slice(&self, t: usize) -> &[f32] {
        let len = self.c() * self.n;
        &self.data[t * len..(t + 1) * len]
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channel_names.iter().position(|n| n == name)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Looks up the three zone grids and checks channel consistency.
fn zone_grid<'a>(
    grids: &BTreeMap<Zone, &'a RectGrid>,
    zone: Zone,
) -> Result<&'a RectGrid, RegridError> {
    grids
        .get(&zone)
        .copied()
        .ok_or(RegridError::MissingZoneGrid(zone))
}

/// Samples every channel at every mesh node from its zone's grid, writing
/// time slice `t` of `out`. Positional channels are computed from node
/// coordinates; everything else is pulled from the grids by name, with
/// masking applied before any value transform.
pub fn zone_sample(
    mesh: &TriMesh,
    grids: &BTreeMap<Zone, &RectGrid>,
    specs: &[ChannelSpec],
    out: &mut NodeTensor,
    t: usize,
) -> Result<(), RegridError> {
    let roi_g = zone_grid(grids, Zone::Roi)?;
    let belt_g = zone_grid(grids, Zone::Belt)?;
    let outer_g = zone_grid(grids, Zone::Outer)?;
    for g in [&belt_g, &outer_g] {
        if g.channel_names != roi_g.channel_names {
            return Err(RegridError::ChannelMismatch(
                "zone grids carry different channel lists".to_string(),
            ));
        }
    }
    if out.n != mesh.n_vertices() || out.c() != specs.len() {
        return Err(RegridError::ChannelMismatch(format!(
            "output tensor is [{}, {}] but mesh has {} nodes and {} channels requested",
            out.c(),
            out.n,
            mesh.n_vertices(),
            specs.len()
        )));
    }

    let phi_bar = mean_latitude(mesh);
    for (ci, spec) in specs.iter().enumerate() {
        spec.validate()?;
        if spec.kind == ChannelKind::Positional {
            for (ni, &p) in mesh.vertices.iter().enumerate() {
                let pe = positional_encodings(p, phi_bar);
                let v = positional_component(&spec.name, pe)?;
                out.set(t, ci, ni, v as f32);
            }
            continue;
        }
        let channel = roi_g.channel_index(&spec.name).ok_or_else(|| {
            RegridError::ChannelMismatch(format!("grids have no channel named {}", spec.name))
        })?;
        for (ni, (&p, &zone)) in mesh.vertices.iter().zip(mesh.zones.iter()).enumerate() {
            let g = match zone {
                Zone::Roi => roi_g,
                Zone::Belt => belt_g,
                Zone::Outer => outer_g,
            };
            let raw = coast_mask_sample(g, p, channel, spec.mask_class)?;
            let v = match spec.transform {
                Transform::Identity => raw,
                Transform::TpLog => tp_to_log(raw),
            };
            if !v.is_finite() {
                return Err(RegridError::NonFinite(spec.name.clone()));
            }
            out.set(t, ci, ni, v as f32);
        }
    }
    Ok(())
}

fn positional_component(name: &str, pe: [f64; 4]) -> Result<f64, RegridError> {
    match name {
        "pe_sin_lat" => Ok(pe[0]),
        "pe_cos_lat" => Ok(pe[1]),
        "pe_sin_lon" => Ok(pe[2]),
        "pe_cos_lon" => Ok(pe[3]),
        other => Err(RegridError::ChannelMismatch(format!(
            "unknown positional channel {other}"
        ))),
    }
}

/// Mean latitude over mesh vertices, fixed summation order.
pub fn mean_latitude(mesh: &TriMesh) -> f64 {
    let sum: f64 = mesh.vertices.iter().map(|p| p.lat).sum();
    sum / mesh.n_vertices().max(1) as f64
}

/// Four positional encodings {sin phi, cos phi, sin(lambda cos phi_bar),
/// cos(lambda cos phi_bar)}, all angles in radians. The longitude branch is
/// (-180, 180]: the antimeridian reads +180 degrees.
pub fn positional_encodings(p: GeoPoint, phi_bar_deg: f64) -> [f64; 4] {
    let phi = p.lat.to_radians();
    let lon = if p.lon == -180.0 { 180.0 } else { p.lon };
    let scaled = lon.to_radians() * phi_bar_deg.to_radians().cos();
    [phi.sin(), phi.cos(), scaled.sin(), scaled.cos()]
}

/// Derives {elev_std, slope_std, relief_std} from a single-channel
/// elevation grid. Slope is the central-difference gradient magnitude with
/// respect to metric distance; relief is the 3x3 max minus min; both are
/// standardized over the grid along with elevation itself.
pub fn compute_static_features(elev: &RectGrid) -> Result<RectGrid, RegridError> {
    if elev.n_channels() != 1 {
        return Err(RegridError::InvalidGrid(format!(
            "expected a single-channel elevation grid, got {} channels",
            elev.n_channels()
        )));
    }
    let h = elev.height();
    let w = elev.width();
    if h < 3 || w < 3 {
        return Err(RegridError::GridTooSmall);
    }

    let z = |j: usize, i: usize| elev.value(0, j, i);
    let step_rad = elev.resolution.to_radians();
    let dy_m = step_rad * EARTH_RADIUS_M;

    let mut slope = vec![0f64; h * w];
    let mut relief = vec![0f64; h * w];
    for j in 0..h {
        let dx_m = step_rad * EARTH_RADIUS_M * elev.lats[j].to_radians().cos();
        for i in 0..w {
            // Central differences inside, one-sided at the boundary; both
            // are exact on planes.
            let (zl, zr, dx_span) = if i == 0 {
                (z(j, 0), z(j, 1), dx_m)
            } else if i == w - 1 {
                (z(j, w - 2), z(j, w - 1), dx_m)
            } else {
                (z(j, i - 1), z(j, i + 1), 2.0 * dx_m)
            };
            let (zd, zu, dy_span) = if j == 0 {
                (z(0, i), z(1, i), dy_m)
            } else if j == h - 1 {
                (z(h - 2, i), z(h - 1, i), dy_m)
            } else {
                (z(j - 1, i), z(j + 1, i), 2.0 * dy_m)
            };
            let gx = (zr - zl) / dx_span;
            let gy = (zu - zd) / dy_span;
            slope[j * w + i] = (gx * gx + gy * gy).sqrt();

            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for jj in j.saturating_sub(1)..(j + 2).min(h) {
                for ii in i.saturating_sub(1)..(i + 2).min(w) {
                    lo = lo.min(z(jj, ii));
                    hi = hi.max(z(jj, ii));
                }
            }
            relief[j * w + i] = hi - lo;
        }
    }

    let elev_vals: Vec<f64> = (0..h * w).map(|k| z(k / w, k % w)).collect();
    let mut data = Vec::with_capacity(3 * h * w);
    for field in [&elev_vals, &slope, &relief] {
        let mean: f64 = field.iter().sum::<f64>() / (h * w) as f64;
        let var: f64 = field.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (h * w) as f64;
        let std = var.sqrt().max(1e-12);
        data.extend(field.iter().map(|v| ((v - mean) / std) as f32));
    }

    RectGrid::new(
        elev.lons.clone(),
        elev.lats.clone(),
        elev.resolution,
        vec![
            "elev_std".to_string(),
            "slope_std".to_string(),
            "relief_std".to_string(),
        ],
        data,
        elev.water_mask.clone(),
    )
}

/// Canonical static channel names fed to the model alongside dynamics.
pub fn static_channel_names() -> Vec<String> {
    [
        "elev_std",
        "slope_std",
        "relief_std",
        "water_mask",
        "pe_sin_lat",
        "pe_cos_lat",
        "pe_sin_lon",
        "pe_cos_lon",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

/// Samples time-invariant node features: the three terrain channels, the
/// water fraction, and four positional encodings, as [S, N] with S = 8.
/// Terrain grids come from compute_static_features per zone and must carry
/// a water mask.
pub fn static_node_features(
    mesh: &TriMesh,
    grids: &BTreeMap<Zone, &RectGrid>,
) -> Result<Vec<f32>, RegridError> {
    let n = mesh.n_vertices();
    let names = static_channel_names();
    let mut out = vec![0f32; names.len() * n];
    let phi_bar = mean_latitude(mesh);

    for (ci, name) in names.iter().enumerate().take(3) {
        for (ni, (&p, &zone)) in mesh.vertices.iter().zip(mesh.zones.iter()).enumerate() {
            let g = zone_grid(grids, zone)?;
            let channel = g.channel_index(name).ok_or_else(|| {
                RegridError::ChannelMismatch(format!("static grids lack channel {name}"))
            })?;
            let v = bilinear_sample(g, p, channel)?;
            if !v.is_finite() {
                return Err(RegridError::NonFinite(name.clone()));
            }
            out[ci * n + ni] = v as f32;
        }
    }

    for (ni, (&p, &zone)) in mesh.vertices.iter().zip(mesh.zones.iter()).enumerate() {
        let g = zone_grid(grids, zone)?;
        let mask = g.water_mask.as_ref().ok_or_else(|| {
            RegridError::InvalidGrid("static grids must carry a water mask".to_string())
        })?;
        // Water fraction: bilinear interpolation of the 0/1 mask.
        let s = g.stencil(p)?;
        let mut frac = 0.0;
        for (j, i, w) in s.corners() {
            if mask[j * g.width() + i] {
                frac += w;
            }
        }
        out[3 * n + ni] = frac as f32;

        let pe = positional_encodings(p, phi_bar);
        for (k, &v) in pe.iter().enumerate() {
            out[(4 + k) * n + ni] = v as f32;
        }
    }
    Ok(out)
}
