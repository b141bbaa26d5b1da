//! Geographic primitives: ellipsoid geometry, the region of interest with its
//! tri-band zone classification, and the stepped target-spacing field.
//!
//! Longitudes are always wrapped to [-180, 180). Latitudes are plain degrees
//! in [-90, 90]. All public distances derived from the ellipsoid are in
//! meters; spacing values are in degrees.

use serde::{Deserialize, Serialize};

/// Reference ellipsoid given by semi-major and semi-minor axes in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub a: f64,
    pub b: f64,
}

impl Ellipsoid {
    /// WGS84 axes, the default for every pipeline entry point.
    pub fn wgs84() -> Self {
        Ellipsoid {
            a: 6_378_137.0,
            b: 6_356_752.3,
        }
    }

    /// First eccentricity squared.
    pub fn e2(&self) -> f64 {
        1.0 - (self.b * self.b) / (self.a * self.a)
    }
}

impl Default for Ellipsoid {
    fn default() -> Self {
        Self::wgs84()
    }
}

/// Wraps a longitude in degrees into [-180, 180).
pub fn wrap_lon(lon: f64) -> f64 {
    ((lon + 180.0).rem_euclid(360.0)) - 180.0
}

/// A geographic point. Longitude is wrapped on construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoPoint {
    pub lon: f64,
    pub lat: f64,
}

impl GeoPoint {
    pub fn new(lon: f64, lat: f64) -> Self {
        GeoPoint {
            lon: wrap_lon(lon),
            lat,
        }
    }
}

/// Mesh band a vertex belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Zone {
    Roi,
    Belt,
    Outer,
}

/// Region of interest: the inner box plus the transition-belt margins.
///
/// `lon_min..lon_max` may cross the antimeridian after wrapping; membership
/// tests handle that case. Belt margins extend the box symmetrically.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiSpec {
    pub lon_min: f64,
    pub lon_max: f64,
    pub lat_min: f64,
    pub lat_max: f64,
    pub belt_dlon: f64,
    pub belt_dlat: f64,
}

impl RoiSpec {
    /// Checks field ordering and margin positivity.
    pub fn validate(&self) -> Result<(), String> {
        if !(self.lon_min < self.lon_max) || !(self.lat_min < self.lat_max) {
            return Err(format!(
                "roi bounds must be ordered: lon {}..{}, lat {}..{}",
                self.lon_min, self.lon_max, self.lat_min, self.lat_max
            ));
        }
        if !(self.belt_dlon > 0.0) || !(self.belt_dlat > 0.0) {
            return Err(format!(
                "belt margins must be positive, got ({}, {})",
                self.belt_dlon, self.belt_dlat
            ));
        }
        Ok(())
    }

    /// The UK analysis window used throughout as the default region.
    pub fn uk_default() -> Self {
        RoiSpec {
            lon_min: -11.0,
            lon_max: 2.0,
            lat_min: 49.0,
            lat_max: 59.0,
            belt_dlon: 6.0,
            belt_dlat: 4.0,
        }
    }

    /// Longitude extent in degrees, wrap-aware.
    pub fn lon_extent(&self) -> f64 {
        let w = wrap_lon(self.lon_max) - wrap_lon(self.lon_min);
        if w < 0.0 {
            w + 360.0
        } else {
            w
        }
    }

    pub fn lat_extent(&self) -> f64 {
        self.lat_max - self.lat_min
    }

    /// Whether `lon` lies within [lon_min - pad_lon, lon_max + pad_lon],
    /// crossing the antimeridian if the padded interval does.
    fn lon_within(&self, lon: f64, pad_lon: f64) -> bool {
        let lo = wrap_lon(self.lon_min - pad_lon);
        let span = self.lon_extent() + 2.0 * pad_lon;
        if span >= 360.0 {
            return true;
        }
        let mut d = wrap_lon(lon) - lo;
        if d < 0.0 {
            d += 360.0;
        }
        d <= span
    }

    fn within(&self, p: GeoPoint, pad_lon: f64, pad_lat: f64) -> bool {
        p.lat >= self.lat_min - pad_lat
            && p.lat <= self.lat_max + pad_lat
            && self.lon_within(p.lon, pad_lon)
    }

    /// True inside the inner box (zone boundaries are inclusive).
    pub fn contains_roi(&self, p: GeoPoint) -> bool {
        self.within(p, 0.0, 0.0)
    }

    /// True inside the belt-extended box.
    pub fn contains_belt(&self, p: GeoPoint) -> bool {
        self.within(p, self.belt_dlon, self.belt_dlat)
    }

    /// Zone of a point. Points on a shared boundary take the finer zone.
    pub fn zone_of(&self, p: GeoPoint) -> Zone {
        if self.contains_roi(p) {
            Zone::Roi
        } else if self.contains_belt(p) {
            Zone::Belt
        } else {
            Zone::Outer
        }
    }

    /// Center of the inner box, wrap-aware in longitude.
    pub fn center(&self) -> GeoPoint {
        let lon = wrap_lon(wrap_lon(self.lon_min) + 0.5 * self.lon_extent());
        GeoPoint::new(lon, 0.5 * (self.lat_min + self.lat_max))
    }
}

/// Target spacing per band, in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpacingSpec {
    pub s_roi: f64,
    pub s_belt: f64,
    pub s_outer: f64,
}

impl SpacingSpec {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.s_roi > 0.0 && self.s_roi <= self.s_belt && self.s_belt <= self.s_outer) {
            return Err(format!(
                "spacing must satisfy 0 < s_roi <= s_belt <= s_outer, got {} {} {}",
                self.s_roi, self.s_belt, self.s_outer
            ));
        }
        Ok(())
    }
}

impl Default for SpacingSpec {
    fn default() -> Self {
        SpacingSpec {
            s_roi: 0.25,
            s_belt: 0.5,
            s_outer: 1.0,
        }
    }
}

/// Piecewise-constant target spacing at a point, in degrees.
pub fn spacing_at(roi: &RoiSpec, spacing: &SpacingSpec, p: GeoPoint) -> f64 {
    match roi.zone_of(p) {
        Zone::Roi => spacing.s_roi,
        Zone::Belt => spacing.s_belt,
        Zone::Outer => spacing.s_outer,
    }
}

/// Geodetic degrees to earth-centered earth-fixed meters.
pub fn geo_to_ecef(ell: &Ellipsoid, p: GeoPoint) -> [f64; 3] {
    let lon = p.lon.to_radians();
    let lat = p.lat.to_radians();
    let e2 = ell.e2();
    let sin_lat = lat.sin();
    let n = ell.a / (1.0 - e2 * sin_lat * sin_lat).sqrt();
    [
        n * lat.cos() * lon.cos(),
        n * lat.cos() * lon.sin(),
        n * (1.0 - e2) * sin_lat,
    ]
}

/// Euclidean length of an ECEF vector.
pub fn ecef_norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Euclidean distance between two ECEF points (a chord through the earth).
pub fn ecef_dist(u: [f64; 3], v: [f64; 3]) -> f64 {
    let d = [u[0] - v[0], u[1] - v[1], u[2] - v[2]];
    ecef_norm(d)
}

/// Oblique stereographic projection about a center point, on the unit sphere.
///
/// Conformal, so planar angles match angles on the sphere; local scale is
/// `m = 1 + (x^2 + y^2)/4`, meaning planar lengths overstate spherical ones
/// by `m`. Used internally for mesh generation; outputs are dimensionless
/// (multiply by sphere radius for meters).
#[derive(Debug, Clone, Copy)]
pub(crate) struct Stereographic {
    lon0: f64,
    sin_lat0: f64,
    cos_lat0: f64,
}

impl Stereographic {
    pub(crate) fn new(center: GeoPoint) -> Self {
        let lat0 = center.lat.to_radians();
        Stereographic {
            lon0: center.lon.to_radians(),
            sin_lat0: lat0.sin(),
            cos_lat0: lat0.cos(),
        }
    }

    pub(crate) fn project(&self, p: GeoPoint) -> [f64; 2] {
        let lat = p.lat.to_radians();
        let dlon = p.lon.to_radians() - self.lon0;
        let (sin_lat, cos_lat) = (lat.sin(), lat.cos());
        let (sin_dlon, cos_dlon) = (dlon.sin(), dlon.cos());
        let k = 2.0 / (1.0 + self.sin_lat0 * sin_lat + self.cos_lat0 * cos_lat * cos_dlon);
        [
            k * cos_lat * sin_dlon,
            k * (self.cos_lat0 * sin_lat - self.sin_lat0 * cos_lat * cos_dlon),
        ]
    }

    pub(crate) fn unproject(&self, xy: [f64; 2]) -> GeoPoint {
        let rho = (xy[0] * xy[0] + xy[1] * xy[1]).sqrt();
        if rho < 1e-15 {
            return GeoPoint::new(self.lon0.to_degrees(), self.sin_lat0.asin().to_degrees());
        }
        let c = 2.0 * (rho / 2.0).atan();
        let (sin_c, cos_c) = (c.sin(), c.cos());
        let lat = (cos_c * self.sin_lat0 + xy[1] * sin_c * self.cos_lat0 / rho).asin();
        let lon = self.lon0
            + (xy[0] * sin_c).atan2(rho * self.cos_lat0 * cos_c - xy[1] * self.sin_lat0 * sin_c);
        GeoPoint::new(lon.to_degrees(), lat.to_degrees())
    }

    /// Local scale factor at a planar point: planar length per spherical length.
    pub(crate) fn scale_factor(&self, xy: [f64; 2]) -> f64 {
        1.0 + (xy[0] * xy[0] + xy[1] * xy[1]) / 4.0
    }
}
