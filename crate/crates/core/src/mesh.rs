//! Tri-band triangulated mesh over the region of interest.
//!
//! Construction pipeline: project the domain through a conformal local
//! projection, seed points with spacing-driven Poisson-disk sampling,
//! triangulate with planar Delaunay, regularize with density-weighted Lloyd
//! relaxation, crop to the domain rectangle, then lift back to geographic
//! coordinates and label vertex zones. Quality is audited on ECEF chords.

use std::collections::{BTreeMap, VecDeque};

use delaunator::{next_halfedge, triangulate, Point, EMPTY};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{
    ecef_dist, ecef_norm, geo_to_ecef, spacing_at, wrap_lon, Ellipsoid, GeoPoint, RoiSpec,
    SpacingSpec, Stereographic, Zone,
};

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("invalid mesh input: {0}")]
    InvalidInput(String),
    #[error("mesh domain too large for a local projection: {0}")]
    DomainTooLarge(String),
    #[error("relaxation did not converge: max relative move {max_move:.4} after {iters} iterations")]
    RelaxationDiverged { max_move: f64, iters: u32 },
}

/// Generator knobs. Defaults reproduce the standard regional build.
#[derive(Debug, Clone, Copy)]
pub struct MeshBuildOptions {
    /// Outer-band extent beyond the belt box, degrees of longitude.
    pub outer_dlon: f64,
    /// Outer-band extent beyond the belt box, degrees of latitude.
    pub outer_dlat: f64,
    /// Poisson acceptance factor: a candidate must clear beta * min(s_p, s_q).
    pub beta: f64,
    /// Candidate attempts per active point before it retires.
    pub candidates: u32,
    pub lloyd_max_iters: u32,
    /// Early stop when the max relative vertex move falls below this.
    pub lloyd_tol: f64,
    /// Divergence threshold on the final max relative move.
    pub lloyd_fail: f64,
    /// Over-relaxation factor: 1 is plain Lloyd, values toward 2 accelerate
    /// convergence of the slow tail.
    pub lloyd_omega: f64,
    /// Gradient limit of the internal sizing field, spacing per arc degree.
    /// The public spacing field stays stepped; only seeding and relaxation
    /// see the graded version.
    pub grade_limit: f64,
}

impl Default for MeshBuildOptions {
    fn default() -> Self {
        MeshBuildOptions {
            outer_dlon: 18.0,
            outer_dlat: 12.0,
            beta: 0.77,
            candidates: 30,
            lloyd_max_iters: 25,
            lloyd_tol: 0.02,
            lloyd_fail: 0.25,
            lloyd_omega: 1.7,
            grade_limit: 0.35,
        }
    }
}

/// Triangulated mesh with per-vertex zone labels and a derived edge set.
///
/// Vertex coordinates are quantized to 1e-9 degrees so that printing at.
/// nine decimal digits round-trips exactly. Edges are undirected pairs
/// (i < j), sorted, with no duplicates.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    pub ellipsoid: Ellipsoid,
    pub roi: RoiSpec,
    pub spacing: SpacingSpec,
    pub vertices: Vec<GeoPoint>,
    pub triangles: Vec<[u32; 3]>,
    pub zones: Vec<Zone>,
    pub edges: Vec<[u32; 2]>,
}

impl TriMesh {
    /// Assembles a mesh from vertices and triangles, deriving zones and
    /// edges. Vertex coordinates are quantized here.
    pub fn assemble(
        ellipsoid: Ellipsoid,
        roi: RoiSpec,
        spacing: SpacingSpec,
        vertices: Vec<GeoPoint>,
        triangles: Vec<[u32; 3]>,
    ) -> Result<Self, MeshError> {
        let vertices: Vec<GeoPoint> = vertices
            .into_iter()
            .map(|p| GeoPoint::new(quantize_deg(p.lon), quantize_deg(p.lat)))
            .collect();
        let n = vertices.len() as u32;
        for t in &triangles {
            if t[0] >= n || t[1] >= n || t[2] >= n {
                return Err(MeshError::InvalidInput(format!(
                    "triangle index out of range: {t:?} with {n} vertices"
                )));
            }
            if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                return Err(MeshError::InvalidInput(format!(
                    "degenerate triangle: {t:?}"
                )));
            }
        }
        let zones = vertices.iter().map(|&p| roi.zone_of(p)).collect();
        let edges = derive_edges(&triangles);
        Ok(TriMesh {
            ellipsoid,
            roi,
            spacing,
            vertices,
            triangles,
            zones,
            edges,
        })
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    /// V - E + F; equals 1 for a triangulated disk.
    pub fn euler_characteristic(&self) -> i64 {
        self.n_vertices() as i64 - self.n_edges() as i64 + self.n_triangles() as i64
    }

    /// Indices of vertices in the given zone, ascending.
    pub fn zone_vertices(&self, zone: Zone) -> Vec<u32> {
        (0..self.zones.len() as u32)
            .filter(|&i| self.zones[i as usize] == zone)
            .collect()
    }
}

/// Undirected edge set of a triangle list: sorted, deduplicated.
pub fn derive_edges(triangles: &[[u32; 3]]) -> Vec<[u32; 2]> {
    let mut edges = Vec::with_capacity(triangles.len() * 3);
    for t in triangles {
        for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
            edges.push([a.min(b), a.max(b)]);
        }
    }
    edges.sort_unstable();
    edges.dedup();
    edges
}

fn quantize_deg(x: f64) -> f64 {
    (x * 1e9).round() / 1e9
}

/// Aggregate mesh quality. Angles in degrees, computed on ECEF chords.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshQualityReport {
    #[serde(rename = "V")]
    pub v: usize,
    #[serde(rename = "E")]
    pub e: usize,
    #[serde(rename = "F")]
    pub f: usize,
    pub min_angle_mean: f64,
    pub max_angle_mean: f64,
    pub min_angle_p5: f64,
    pub min_angle_p95: f64,
    pub compactness_mean: f64,
    pub h_r_mean: f64,
    pub degree_mean: f64,
    pub degree_histogram: BTreeMap<u32, u32>,
}

/// Min angle, max angle (degrees) and compactness of a triangle given its
/// three side lengths. Compactness is 4*sqrt(3)*A / (a^2+b^2+c^2), which is
/// 1 for an equilateral triangle.
pub fn triangle_metrics(a: f64, b: f64, c: f64) -> (f64, f64, f64) {
    let angle = |opp: f64, s1: f64, s2: f64| -> f64 {
        let cos = ((s1 * s1 + s2 * s2 - opp * opp) / (2.0 * s1 * s2)).clamp(-1.0, 1.0);
        cos.acos().to_degrees()
    };
    let aa = angle(a, b, c);
    let ab = angle(b, c, a);
    let ac = angle(c, a, b);
    let s = 0.5 * (a + b + c);
    let area_sq = s * (s - a) * (s - b) * (s - c);
    let area = if area_sq > 0.0 { area_sq.sqrt() } else { 0.0 };
    let q = 4.0 * 3.0f64.sqrt() * area / (a * a + b * b + c * c);
    (aa.min(ab).min(ac), aa.max(ab).max(ac), q)
}

/// Geographic midpoint of two points, wrap-aware in longitude.
fn geo_midpoint(p: GeoPoint, q: GeoPoint) -> GeoPoint {
    GeoPoint::new(
        p.lon + 0.5 * wrap_lon(q.lon - p.lon),
        0.5 * (p.lat + q.lat),
    )
}

/// Percentile with linear interpolation over a sorted slice.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    if sorted.len() == 1 {
        return sorted[0];
    }
    let idx = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = idx.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = idx - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Audits a mesh: angle statistics, compactness, spacing conformity h_r,
/// and degree accounting. Pure; reduction order is fixed.
pub fn compute_quality(m: &TriMesh, roi: &RoiSpec, spec: &SpacingSpec) -> MeshQualityReport {
    let ecef: Vec<[f64; 3]> = m
        .vertices
        .iter()
        .map(|&p| geo_to_ecef(&m.ellipsoid, p))
        .collect();

    let mut min_angles = Vec::with_capacity(m.triangles.len());
    let mut sum_min = 0.0;
    let mut sum_max = 0.0;
    let mut sum_q = 0.0;
    for t in &m.triangles {
        let (i, j, k) = (t[0] as usize, t[1] as usize, t[2] as usize);
        let a = ecef_dist(ecef[j], ecef[k]);
        let b = ecef_dist(ecef[k], ecef[i]);
        let c = ecef_dist(ecef[i], ecef[j]);
        let (mn, mx, q) = triangle_metrics(a, b, c);
        min_angles.push(mn);
        sum_min += mn;
        sum_max += mx;
        sum_q += q;
    }
    let nt = m.triangles.len().max(1) as f64;
    min_angles.sort_unstable_by(|x, y| x.partial_cmp(y).unwrap());

    let mut sum_hr = 0.0;
    for e in &m.edges {
        let (i, j) = (e[0] as usize, e[1] as usize);
        let chord = ecef_dist(ecef[i], ecef[j]);
        let mid = geo_midpoint(m.vertices[i], m.vertices[j]);
        let target =
            spacing_at(roi, spec, mid).to_radians() * ecef_norm(geo_to_ecef(&m.ellipsoid, mid));
        sum_hr += chord / target;
    }
    let ne = m.edges.len().max(1) as f64;

    let mut degree = vec![0u32; m.vertices.len()];
    for e in &m.edges {
        degree[e[0] as usize] += 1;
        degree[e[1] as usize] += 1;
    }
    let mut degree_histogram = BTreeMap::new();
    for &d in &degree {
        *degree_histogram.entry(d).or_insert(0u32) += 1;
    }

    MeshQualityReport {
        v: m.n_vertices(),
        e: m.n_edges(),
        f: m.n_triangles(),
        min_angle_mean: sum_min / nt,
        max_angle_mean: sum_max / nt,
        min_angle_p5: percentile(&min_angles, 5.0),
        min_angle_p95: percentile(&min_angles, 95.0),
        compactness_mean: sum_q / nt,
        h_r_mean: sum_hr / ne,
        degree_mean: 2.0 * m.n_edges() as f64 / m.n_vertices().max(1) as f64,
        degree_histogram,
    }
}

/// Rectangle in raw degrees with lon_lo < lon_hi (lon_hi may exceed 180 for
/// windows crossing the antimeridian). Containment is wrap-aware.
#[derive(Debug, Clone, Copy)]
struct Rect {
    lon_lo: f64,
    lon_hi: f64,
    lat_lo: f64,
    lat_hi: f64,
}

impl Rect {
    fn contains(&self, p: GeoPoint, eps: f64) -> bool {
        if p.lat < self.lat_lo - eps || p.lat > self.lat_hi + eps {
            return false;
        }
        let span = self.lon_hi - self.lon_lo + 2.0 * eps;
        if span >= 360.0 {
            return true;
        }
        let mut d = wrap_lon(p.lon) - wrap_lon(self.lon_lo - eps);
        if d < 0.0 {
            d += 360.0;
        }
        d <= span
    }

    fn center(&self) -> GeoPoint {
        GeoPoint::new(
            0.5 * (self.lon_lo + self.lon_hi),
            0.5 * (self.lat_lo + self.lat_hi),
        )
    }
}

/// Internal sizing field: the stepped spacing with a gradient limit, so the
/// target length ramps across band boundaries instead of jumping.
struct Sizing<'a> {
    roi: &'a RoiSpec,
    spacing: &'a SpacingSpec,
    grade: f64,
    proj: Stereographic,
}

impl Sizing<'_> {
    /// Graded spacing in arc degrees at a geographic point.
    fn spacing_deg(&self, p: GeoPoint) -> f64 {
        let s = self.spacing;
        if self.grade <= 0.0 {
            return spacing_at(self.roi, s, p);
        }
        let d_roi = arc_degrees_to_box(p, self.roi, 0.0, 0.0);
        let d_belt = arc_degrees_to_box(p, self.roi, self.roi.belt_dlon, self.roi.belt_dlat);
        (s.s_roi + self.grade * d_roi)
            .min(s.s_belt + self.grade * d_belt)
            .min(s.s_outer)
    }

    /// Target planar edge length at a projected point.
    fn plane(&self, xy: [f64; 2]) -> f64 {
        let p = self.proj.unproject(xy);
        self.spacing_deg(p).to_radians() * self.proj.scale_factor(xy)
    }
}

/// Approximate distance in arc degrees from a point to a padded ROI box;
/// zero inside. Longitude differences are scaled by cos(lat). Used only to
/// grade the sizing field, so the small-angle approximation is fine.
fn arc_degrees_to_box(p: GeoPoint, roi: &RoiSpec, pad_lon: f64, pad_lat: f64) -> f64 {
    let lat_lo = roi.lat_min - pad_lat;
    let lat_hi = roi.lat_max + pad_lat;
    let dlat = if p.lat < lat_lo {
        lat_lo - p.lat
    } else if p.lat > lat_hi {
        p.lat - lat_hi
    } else {
        0.0
    };
    let span = roi.lon_extent() + 2.0 * pad_lon;
    let dlon = if span >= 360.0 {
        0.0
    } else {
        let mut d = wrap_lon(p.lon) - wrap_lon(roi.lon_min - pad_lon);
        if d < 0.0 {
            d += 360.0;
        }
        if d <= span {
            0.0
        } else {
            (d - span).min(360.0 - d)
        }
    };
    let dx = dlon * p.lat.to_radians().cos();
    (dx * dx + dlat * dlat).sqrt()
}

/// Builds the tri-band mesh with default generator options.
pub fn build_mesh(
    e: &Ellipsoid,
    roi: &RoiSpec,
    spec: &SpacingSpec,
    seed: u64,
) -> Result<TriMesh, MeshError> {
    build_mesh_with(e, roi, spec, seed, &MeshBuildOptions::default())
}

/// Builds the tri-band mesh. Deterministic for a fixed seed and options.
pub fn build_mesh_with(
    e: &Ellipsoid,
    roi: &RoiSpec,
    spec: &SpacingSpec,
    seed: u64,
    opts: &MeshBuildOptions,
) -> Result<TriMesh, MeshError> {
    roi.validate().map_err(MeshError::InvalidInput)?;
    spec.validate().map_err(MeshError::InvalidInput)?;
    if !(e.a >= e.b && e.b > 0.0) {
        return Err(MeshError::InvalidInput(format!(
            "ellipsoid must satisfy a >= b > 0, got a={} b={}",
            e.a, e.b
        )));
    }

    let pad_lon = roi.belt_dlon + opts.outer_dlon;
    let pad_lat = roi.belt_dlat + opts.outer_dlat;
    let domain = Rect {
        lon_lo: roi.lon_min - pad_lon,
        lon_hi: roi.lon_min + roi.lon_extent() + pad_lon,
        lat_lo: roi.lat_min - pad_lat,
        lat_hi: roi.lat_max + pad_lat,
    };
    if domain.lon_hi - domain.lon_lo >= 180.0 {
        return Err(MeshError::DomainTooLarge(format!(
            "longitude extent {:.1} degrees reaches half the globe",
            domain.lon_hi - domain.lon_lo
        )));
    }
    if domain.lat_lo < -85.0 || domain.lat_hi > 85.0 {
        return Err(MeshError::DomainTooLarge(format!(
            "latitude range [{:.1}, {:.1}] leaves the supported band [-85, 85]",
            domain.lat_lo, domain.lat_hi
        )));
    }

    let proj = Stereographic::new(domain.center());
    let sizing = Sizing {
        roi,
        spacing: spec,
        grade: opts.grade_limit,
        proj,
    };

    let fence = fence_points(&domain, &sizing);
    let fence_xy: Vec<[f64; 2]> = fence.iter().map(|&p| proj.project(p)).collect();
    let n_fence = fence_xy.len();
    if n_fence < 3 {
        return Err(MeshError::InvalidInput(
            "domain too small to fence".to_string(),
        ));
    }

    let mut points = fence_xy;
    poisson_fill(&mut points, &domain, &sizing, seed, opts);
    if points.len() < n_fence + 3 {
        return Err(MeshError::InvalidInput(
            "seeding produced too few interior points".to_string(),
        ));
    }

    lloyd_relax(&mut points, n_fence, &sizing, opts)?;

    // Final triangulation, then crop to triangles whose centroid lies in the
    // domain rectangle: removes hull slivers along concave projected edges.
    let dpoints: Vec<Point> = points.iter().map(|p| Point { x: p[0], y: p[1] }).collect();
    let tri = triangulate(&dpoints);
    let mut kept: Vec<[usize; 3]> = Vec::with_capacity(tri.triangles.len() / 3);
    for t in tri.triangles.chunks_exact(3) {
        let cx = (points[t[0]][0] + points[t[1]][0] + points[t[2]][0]) / 3.0;
        let cy = (points[t[0]][1] + points[t[1]][1] + points[t[2]][1]) / 3.0;
        if domain.contains(proj.unproject([cx, cy]), 1e-9) {
            kept.push([t[0], t[1], t[2]]);
        }
    }

    // Renumber to drop vertices orphaned by the crop.
    let mut remap = vec![u32::MAX; points.len()];
    let mut vertices = Vec::new();
    let mut triangles = Vec::with_capacity(kept.len());
    for t in &kept {
        let mut idx = [0u32; 3];
        for (slot, &old) in idx.iter_mut().zip(t.iter()) {
            if remap[old] == u32::MAX {
                remap[old] = vertices.len() as u32;
                vertices.push(proj.unproject(points[old]));
            }
            *slot = remap[old];
        }
        triangles.push(idx);
    }

    TriMesh::assemble(*e, *roi, *spec, vertices, triangles)
}

/// Samples the domain boundary at the local target spacing. Corners are
/// included exactly once. These points stay fixed through relaxation.
fn fence_points(domain: &Rect, sizing: &Sizing) -> Vec<GeoPoint> {
    let mut out = Vec::new();
    let (lo, hi) = (domain.lon_lo, domain.lon_hi);
    let (la, lb) = (domain.lat_lo, domain.lat_hi);
    // Bottom, right, top, left; each edge includes its start corner.
    sample_edge(lo, hi, |t| GeoPoint::new(t, la), la.to_radians().cos(), sizing, &mut out);
    sample_edge(la, lb, |t| GeoPoint::new(hi, t), 1.0, sizing, &mut out);
    sample_edge(hi, lo, |t| GeoPoint::new(t, lb), lb.to_radians().cos(), sizing, &mut out);
    sample_edge(lb, la, |t| GeoPoint::new(lo, t), 1.0, sizing, &mut out);
    out
}

/// Walks one boundary edge placing points so consecutive gaps match the
/// graded spacing. The edge is parameterized by t with a constant arc-degree
/// rate; points are equally spaced in integrated units of 1/s.
fn sample_edge(
    t0: f64,
    t1: f64,
    point_of: impl Fn(f64) -> GeoPoint,
    arc_per_t: f64,
    sizing: &Sizing,
    out: &mut Vec<GeoPoint>,
) {
    let m = ((t1 - t0).abs() * 4.0).ceil().max(32.0) as usize;
    let dt = (t1 - t0) / m as f64;
    // cum[i] = integral of arc/s from t0 to t0 + i*dt (trapezoid rule).
    let mut cum = Vec::with_capacity(m + 1);
    cum.push(0.0);
    let mut prev = 1.0 / sizing.spacing_deg(point_of(t0));
    for i in 1..=m {
        let cur = 1.0 / sizing.spacing_deg(point_of(t0 + i as f64 * dt));
        let step = 0.5 * (prev + cur) * dt.abs() * arc_per_t;
        cum.push(cum[i - 1] + step);
        prev = cur;
    }
    let total = cum[m];
    let n = total.round().max(1.0) as usize;
    let mut seg = 0;
    for j in 0..n {
        let target = j as f64 * total / n as f64;
        while seg + 1 < m && cum[seg + 1] < target {
            seg += 1;
        }
        let lo = cum[seg];
        let hi = cum[seg + 1];
        let frac = if hi > lo { (target - lo) / (hi - lo) } else { 0.0 };
        out.push(point_of(t0 + (seg as f64 + frac) * dt));
    }
}

/// Uniform background grid for neighbor queries during seeding.
struct NeighborGrid {
    cell: f64,
    x0: f64,
    y0: f64,
    nx: usize,
    ny: usize,
    bins: Vec<Vec<u32>>,
}

impl NeighborGrid {
    fn new(min_xy: [f64; 2], max_xy: [f64; 2], cell: f64) -> Self {
        let nx = (((max_xy[0] - min_xy[0]) / cell).ceil() as usize + 1).max(1);
        let ny = (((max_xy[1] - min_xy[1]) / cell).ceil() as usize + 1).max(1);
        NeighborGrid {
            cell,
            x0: min_xy[0],
            y0: min_xy[1],
            nx,
            ny,
            bins: vec![Vec::new(); nx * ny],
        }
    }

    fn bin_of(&self, p: [f64; 2]) -> (usize, usize) {
        let i = (((p[0] - self.x0) / self.cell) as isize).clamp(0, self.nx as isize - 1) as usize;
        let j = (((p[1] - self.y0) / self.cell) as isize).clamp(0, self.ny as isize - 1) as usize;
        (i, j)
    }

    fn insert(&mut self, p: [f64; 2], idx: u32) {
        let (i, j) = self.bin_of(p);
        self.bins[j * self.nx + i].push(idx);
    }

    /// Visits point indices in all bins within `radius` of p.
    fn for_each_near(&self, p: [f64; 2], radius: f64, mut f: impl FnMut(u32)) {
        let r = (radius / self.cell).ceil() as isize;
        let (ci, cj) = self.bin_of(p);
        let (ci, cj) = (ci as isize, cj as isize);
        for j in (cj - r).max(0)..=(cj + r).min(self.ny as isize - 1) {
            for i in (ci - r).max(0)..=(ci + r).min(self.nx as isize - 1) {
                for &idx in &self.bins[j as usize * self.nx + i as usize] {
                    f(idx);
                }
            }
        }
    }
}

/// Variable-radius Poisson-disk fill seeded from the fence, breadth-first.
/// A candidate q is accepted when every existing point p keeps distance
/// at least beta * min(s(p), s(q)).
fn poisson_fill(
    points: &mut Vec<[f64; 2]>,
    domain: &Rect,
    sizing: &Sizing,
    seed: u64,
    opts: &MeshBuildOptions,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut min_xy = [f64::INFINITY; 2];
    let mut max_xy = [f64::NEG_INFINITY; 2];
    let mut r_min = f64::INFINITY;
    let mut r_max: f64 = 0.0;
    for p in points.iter() {
        min_xy[0] = min_xy[0].min(p[0]);
        min_xy[1] = min_xy[1].min(p[1]);
        max_xy[0] = max_xy[0].max(p[0]);
        max_xy[1] = max_xy[1].max(p[1]);
        let r = sizing.plane(*p);
        r_min = r_min.min(r);
        r_max = r_max.max(r);
    }
    // The interior can be finer than any fence point; the ROI floor bounds it.
    r_min = r_min.min(sizing.spacing.s_roi.to_radians());
    let pad = 2.0 * r_max;
    min_xy = [min_xy[0] - pad, min_xy[1] - pad];
    max_xy = [max_xy[0] + pad, max_xy[1] + pad];

    let cell = opts.beta * r_min / std::f64::consts::SQRT_2;
    let mut grid = NeighborGrid::new(min_xy, max_xy, cell);
    let mut radii: Vec<f64> = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        grid.insert(*p, i as u32);
        radii.push(sizing.plane(*p));
    }

    let mut queue: VecDeque<u32> = (0..points.len() as u32).collect();
    while let Some(pi) = queue.pop_front() {
        let parent = points[pi as usize];
        let r_parent = radii[pi as usize];
        let mut accepted_any = false;
        for _ in 0..opts.candidates {
            let ang = rng.gen::<f64>() * std::f64::consts::TAU;
            let rad = r_parent * (1.0 + rng.gen::<f64>());
            let cand = [parent[0] + rad * ang.cos(), parent[1] + rad * ang.sin()];
            if !domain.contains(sizing.proj.unproject(cand), 0.0) {
                continue;
            }
            let r_cand = sizing.plane(cand);
            let mut ok = true;
            grid.for_each_near(cand, opts.beta * r_cand.max(r_max), |idx| {
                if ok {
                    let q = points[idx as usize];
                    let d2 = (q[0] - cand[0]).powi(2) + (q[1] - cand[1]).powi(2);
                    let thr = opts.beta * radii[idx as usize].min(r_cand);
                    if d2 < thr * thr {
                        ok = false;
                    }
                }
            });
            if ok {
                let idx = points.len() as u32;
                points.push(cand);
                radii.push(r_cand);
                grid.insert(cand, idx);
                queue.push_back(idx);
                accepted_any = true;
            }
        }
        if accepted_any {
            queue.push_back(pi);
        }
    }
}

fn circumcenter(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> [f64; 2] {
    let dx = b[0] - a[0];
    let dy = b[1] - a[1];
    let ex = c[0] - a[0];
    let ey = c[1] - a[1];
    let det = dx * ey - dy * ex;
    if det.abs() < 1e-300 {
        return [
            (a[0] + b[0] + c[0]) / 3.0,
            (a[1] + b[1] + c[1]) / 3.0,
        ];
    }
    let bl = dx * dx + dy * dy;
    let cl = ex * ex + ey * ey;
    let d = 0.5 / det;
    [a[0] + (ey * bl - dy * cl) * d, a[1] + (dx * cl - ex * bl) * d]
}

/// Density-weighted Lloyd relaxation. Interior points move to the weighted
/// centroid of their Voronoi cell with density s^-4, which makes the
/// converged point density track s^-2. Fence points stay fixed.
fn lloyd_relax(
    points: &mut [[f64; 2]],
    n_fixed: usize,
    sizing: &Sizing,
    opts: &MeshBuildOptions,
) -> Result<(), MeshError> {
    let mut max_move = f64::INFINITY;
    let mut iters = 0;
    for _ in 0..opts.lloyd_max_iters {
        iters += 1;
        let dpoints: Vec<Point> = points.iter().map(|p| Point { x: p[0], y: p[1] }).collect();
        let tri = triangulate(&dpoints);
        if tri.triangles.is_empty() {
            return Err(MeshError::InvalidInput(
                "triangulation collapsed during relaxation".to_string(),
            ));
        }

        // One incoming halfedge per vertex, hull edges preferred so open
        // fans start at a boundary.
        let mut incoming = vec![EMPTY; points.len()];
        for e in 0..tri.triangles.len() {
            let end = tri.triangles[next_halfedge(e)];
            if incoming[end] == EMPTY || tri.halfedges[e] == EMPTY {
                incoming[end] = e;
            }
        }

        // Circumcenter cache per triangle, filled lazily.
        let mut ccenters: Vec<Option<[f64; 2]>> = vec![None; tri.triangles.len() / 3];
        let mut cc = |t: usize, pts: &[[f64; 2]]| -> [f64; 2] {
            if let Some(c) = ccenters[t] {
                return c;
            }
            let (i, j, k) = (
                tri.triangles[3 * t],
                tri.triangles[3 * t + 1],
                tri.triangles[3 * t + 2],
            );
            let c = circumcenter(pts[i], pts[j], pts[k]);
            ccenters[t] = Some(c);
            c
        };

        max_move = 0.0;
        let snapshot: Vec<[f64; 2]> = points.to_vec();
        let mut poly: Vec<[f64; 2]> = Vec::with_capacity(16);
        for (v, point) in points.iter_mut().enumerate().skip(n_fixed) {
            let start = incoming[v];
            if start == EMPTY {
                continue;
            }
            poly.clear();
            let mut e = start;
            let mut closed = false;
            for _ in 0..64 {
                poly.push(cc(e / 3, &snapshot));
                let out = next_halfedge(e);
                debug_assert_eq!(tri.triangles[out], v);
                e = tri.halfedges[out];
                if e == EMPTY {
                    break;
                }
                if e == start {
                    closed = true;
                    break;
                }
            }
            if !closed || poly.len() < 3 {
                continue;
            }

            // Weighted centroid over a fan from the site; Voronoi cells are
            // convex and contain their site, so signed areas share a sign.
            let site = snapshot[v];
            let mut wsum = 0.0;
            let mut cx = 0.0;
            let mut cy = 0.0;
            for i in 0..poly.len() {
                let p1 = poly[i];
                let p2 = poly[(i + 1) % poly.len()];
                let area = 0.5
                    * ((p1[0] - site[0]) * (p2[1] - site[1])
                        - (p2[0] - site[0]) * (p1[1] - site[1]));
                let gx = (site[0] + p1[0] + p2[0]) / 3.0;
                let gy = (site[1] + p1[1] + p2[1]) / 3.0;
                let w = area * sizing.plane([gx, gy]).powi(-4);
                wsum += w;
                cx += w * gx;
                cy += w * gy;
            }
            if wsum.abs() < 1e-300 {
                continue;
            }
            let w = opts.lloyd_omega;
            let new = [
                site[0] + w * (cx / wsum - site[0]),
                site[1] + w * (cy / wsum - site[1]),
            ];
            let moved = ((new[0] - site[0]).powi(2) + (new[1] - site[1]).powi(2)).sqrt();
            let rel = moved / sizing.plane(site);
            if rel > max_move {
                max_move = rel;
            }
            *point = new;
        }

        if max_move < opts.lloyd_tol {
            return Ok(());
        }
    }
    if max_move > opts.lloyd_fail {
        return Err(MeshError::RelaxationDiverged { max_move, iters });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_square_mesh() -> TriMesh {
        let roi = RoiSpec {
            lon_min: -1.0,
            lon_max: 1.0,
            lat_min: -1.0,
            lat_max: 1.0,
            belt_dlon: 6.0,
            belt_dlat: 4.0,
        };
        let spec = SpacingSpec {
            s_roi: 1.0,
            s_belt: 1.0,
            s_outer: 1.0,
        };
        let opts = MeshBuildOptions {
            outer_dlon: 6.0,
            outer_dlat: 6.0,
            ..Default::default()
        };
        build_mesh_with(&Ellipsoid::wgs84(), &roi, &spec, 42, &opts).unwrap()
    }

    #[test]
    fn triangle_metric_identities() {
        let (mn, mx, q) = triangle_metrics(1.0, 1.0, 1.0);
        assert!((mn - 60.0).abs() < 1e-9);
        assert!((mx - 60.0).abs() < 1e-9);
        assert!((q - 1.0).abs() < 1e-12);

        let (mn, mx, q) = triangle_metrics(1.0, 1.0, 2.0f64.sqrt());
        assert!((mn - 45.0).abs() < 1e-9);
        assert!((mx - 90.0).abs() < 1e-9);
        let expected = 4.0 * 3.0f64.sqrt() * 0.5 / 4.0;
        assert!((q - expected).abs() < 1e-12, "q={q} expected={expected}");
        assert!((expected - 0.866).abs() < 1e-3);
    }

    #[test]
    fn uniform_square_quality() {
        let mesh = uniform_square_mesh();
        assert_eq!(mesh.euler_characteristic(), 1);

        let report = compute_quality(&mesh, &mesh.roi, &mesh.spacing);
        assert!(
            report.h_r_mean > 0.9 && report.h_r_mean < 1.1,
            "h_r_mean = {}",
            report.h_r_mean
        );
        assert_eq!(report.degree_mean, 2.0 * mesh.n_edges() as f64 / mesh.n_vertices() as f64);
        assert_eq!(report.v, mesh.n_vertices());
        let hist_total: u32 = report.degree_histogram.values().sum();
        assert_eq!(hist_total as usize, mesh.n_vertices());
    }

    #[test]
    fn uniform_square_min_separation() {
        let mesh = uniform_square_mesh();
        // Brute force: no two vertices closer than 0.1 * s(midpoint) of arc.
        let ecef: Vec<[f64; 3]> = mesh
            .vertices
            .iter()
            .map(|&p| geo_to_ecef(&mesh.ellipsoid, p))
            .collect();
        for i in 0..mesh.n_vertices() {
            for j in (i + 1)..mesh.n_vertices() {
                let mid = geo_midpoint(mesh.vertices[i], mesh.vertices[j]);
                let target = spacing_at(&mesh.roi, &mesh.spacing, mid).to_radians()
                    * ecef_norm(geo_to_ecef(&mesh.ellipsoid, mid));
                let d = ecef_dist(ecef[i], ecef[j]);
                assert!(
                    d >= 0.1 * target,
                    "vertices {i},{j} too close: {d} < 0.1*{target}"
                );
            }
        }
    }

    #[test]
    fn zones_and_membership() {
        let mesh = uniform_square_mesh();
        for (v, z) in mesh.vertices.iter().zip(mesh.zones.iter()) {
            assert_eq!(mesh.roi.zone_of(*v), *z);
            match z {
                Zone::Roi => assert!(mesh.roi.contains_roi(*v)),
                Zone::Belt => {
                    assert!(mesh.roi.contains_belt(*v) && !mesh.roi.contains_roi(*v))
                }
                Zone::Outer => assert!(!mesh.roi.contains_belt(*v)),
            }
        }
        let n_roi = mesh.zone_vertices(Zone::Roi).len();
        let n_belt = mesh.zone_vertices(Zone::Belt).len();
        let n_outer = mesh.zone_vertices(Zone::Outer).len();
        assert!(n_roi > 0 && n_belt > 0 && n_outer > 0);
        assert_eq!(n_roi + n_belt + n_outer, mesh.n_vertices());
    }

    #[test]
    fn build_is_deterministic() {
        let roi = RoiSpec {
            lon_min: 0.0,
            lon_max: 3.0,
            lat_min: 40.0,
            lat_max: 43.0,
            belt_dlon: 2.0,
            belt_dlat: 2.0,
        };
        let spec = SpacingSpec {
            s_roi: 0.5,
            s_belt: 0.75,
            s_outer: 1.0,
        };
        let opts = MeshBuildOptions {
            outer_dlon: 3.0,
            outer_dlat: 3.0,
            ..Default::default()
        };
        let ell = Ellipsoid::wgs84();
        let a = build_mesh_with(&ell, &roi, &spec, 7, &opts).unwrap();
        let b = build_mesh_with(&ell, &roi, &spec, 7, &opts).unwrap();
        assert_eq!(a.vertices.len(), b.vertices.len());
        for (pa, pb) in a.vertices.iter().zip(b.vertices.iter()) {
            assert_eq!(pa.lon.to_bits(), pb.lon.to_bits());
            assert_eq!(pa.lat.to_bits(), pb.lat.to_bits());
        }
        assert_eq!(a.triangles, b.triangles);

        let c = build_mesh_with(&ell, &roi, &spec, 8, &opts).unwrap();
        assert_ne!(a.vertices, c.vertices);
    }

    #[test]
    fn degenerate_domain_fails() {
        let roi = RoiSpec {
            lon_min: -11.0,
            lon_max: 2.0,
            lat_min: 49.0,
            lat_max: 59.0,
            belt_dlon: 100.0,
            belt_dlat: 4.0,
        };
        let err = build_mesh(&Ellipsoid::wgs84(), &roi, &SpacingSpec::default(), 1);
        assert!(matches!(err, Err(MeshError::DomainTooLarge(_))));
    }

    #[test]
    fn edge_set_matches_triangle_sides() {
        let mesh = uniform_square_mesh();
        let rebuilt = derive_edges(&mesh.triangles);
        assert_eq!(mesh.edges, rebuilt);
        for w in mesh.edges.windows(2) {
            assert!(w[0] < w[1], "edges must be strictly sorted");
        }
        for e in &mesh.edges {
            assert!(e[0] < e[1]);
        }
    }

    #[test]
    fn assemble_rejects_bad_triangles() {
        let ell = Ellipsoid::wgs84();
        let roi = RoiSpec::uk_default();
        let spec = SpacingSpec::default();
        let verts = vec![
            GeoPoint::new(0.0, 0.0),
            GeoPoint::new(1.0, 0.0),
            GeoPoint::new(0.5, 1.0),
        ];
        assert!(TriMesh::assemble(ell, roi, spec, verts.clone(), vec![[0, 1, 3]]).is_err());
        assert!(TriMesh::assemble(ell, roi, spec, verts, vec![[0, 1, 1]]).is_err());
    }

    #[test]
    #[ignore = "slow; exercised by the acceptance suite"]
    fn uk_default_probe() {
        let t0 = std::time::Instant::now();
        let mesh = build_mesh(
            &Ellipsoid::wgs84(),
            &RoiSpec::uk_default(),
            &SpacingSpec::default(),
            2024,
        )
        .unwrap();
        let report = compute_quality(&mesh, &mesh.roi, &mesh.spacing);
        eprintln!("build time: {:?}", t0.elapsed());
        eprintln!(
            "V={} E={} F={} euler={}",
            report.v,
            report.e,
            report.f,
            mesh.euler_characteristic()
        );
        eprintln!(
            "degree_mean={:.4} min_angle_mean={:.2} (p5={:.2} p95={:.2}) max_angle_mean={:.2}",
            report.degree_mean,
            report.min_angle_mean,
            report.min_angle_p5,
            report.min_angle_p95,
            report.max_angle_mean
        );
        eprintln!(
            "compactness_mean={:.4} h_r_mean={:.4}",
            report.compactness_mean, report.h_r_mean
        );
        let worst = mesh
            .triangles
            .iter()
            .map(|t| {
                let e = |i: u32, j: u32| {
                    ecef_dist(
                        geo_to_ecef(&mesh.ellipsoid, mesh.vertices[i as usize]),
                        geo_to_ecef(&mesh.ellipsoid, mesh.vertices[j as usize]),
                    )
                };
                triangle_metrics(e(t[1], t[2]), e(t[2], t[0]), e(t[0], t[1])).0
            })
            .fold(f64::INFINITY, f64::min);
        eprintln!("worst min angle = {worst:.2}");
    }

    #[test]
    fn near_equilateral_triangle_report() {
        // Small triangle near the equator, close to equilateral in chords.
        let ell = Ellipsoid::wgs84();
        let roi = RoiSpec::uk_default();
        let spec = SpacingSpec::default();
        let h = 0.01f64;
        let verts = vec![
            GeoPoint::new(0.0, 0.0),
            GeoPoint::new(h, 0.0),
            GeoPoint::new(h / 2.0, h * 3.0f64.sqrt() / 2.0),
        ];
        let mesh = TriMesh::assemble(ell, roi, spec, verts, vec![[0, 1, 2]]).unwrap();
        let report = compute_quality(&mesh, &roi, &spec);
        assert!((report.min_angle_mean - 60.0).abs() < 0.5);
        assert!((report.compactness_mean - 1.0).abs() < 1e-3);
        assert_eq!(report.f, 1);
        assert_eq!(report.e, 3);
    }
}
