//! Grayscale raster export in the binary portable graymap format (P5),
//! plus a nearest-node rasterizer turning per-node field values into an
//! image over a lon/lat box.

use super::IoError;
use crate::geo::GeoPoint;

/// Encodes a P5 graymap, maxval 255, rows top to bottom.
pub fn write_pgm(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>, IoError> {
    if pixels.len() != width * height || width == 0 || height == 0 {
        return Err(IoError::Format(format!(
            "pgm: {} pixels for {width}x{height}",
            pixels.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Rasterizes node values over [lon_min, lon_max] x [lat_min, lat_max]:
/// each pixel takes the value of its nearest node in equirectangular
/// distance, min-max scaled to 0..255. The top row is the highest
/// latitude. Constant fields map to mid-gray.
pub fn rasterize_nodes(
    points: &[GeoPoint],
    values: &[f64],
    bbox: (f64, f64, f64, f64),
    width: usize,
    height: usize,
) -> Result<Vec<u8>, IoError> {
    let (lon_min, lon_max, lat_min, lat_max) = bbox;
    if points.is_empty() || points.len() != values.len() {
        return Err(IoError::Format(format!(
            "raster: {} points for {} values",
            points.len(),
            values.len()
        )));
    }
    if width == 0 || height == 0 || !(lon_min < lon_max) || !(lat_min < lat_max) {
        return Err(IoError::Format("raster: empty image or box".into()));
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in values {
        if !v.is_finite() {
            return Err(IoError::Format("raster: non-finite field value".into()));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = hi - lo;

    // Bucket nodes on a coarse grid, then search outward ring by ring so
    // the lookup stays near O(1) per pixel.
    let cells = 32usize;
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); cells * cells];
    let cell_of = |lon: f64, lat: f64| -> (usize, usize) {
        let cx = (((lon - lon_min) / (lon_max - lon_min)) * cells as f64)
            .clamp(0.0, cells as f64 - 1.0) as usize;
        let cy = (((lat - lat_min) / (lat_max - lat_min)) * cells as f64)
            .clamp(0.0, cells as f64 - 1.0) as usize;
        (cx, cy)
    };
    for (i, p) in points.iter().enumerate() {
        let (cx, cy) = cell_of(p.lon, p.lat);
        buckets[cy * cells + cx].push(i);
    }

    let mut pixels = vec![0u8; width * height];
    for py in 0..height {
        // Pixel centers, top row at lat_max.
        let lat = lat_max - (py as f64 + 0.5) / height as f64 * (lat_max - lat_min);
        for px in 0..width {
            let lon = lon_min + (px as f64 + 0.5) / width as f64 * (lon_max - lon_min);
            let (cx, cy) = cell_of(lon, lat);
            let mut best = usize::MAX;
            let mut best_d = f64::INFINITY;
            let mut ring = 0usize;
            loop {
                let mut any = false;
                for dy in -(ring as i64)..=ring as i64 {
                    for dx in -(ring as i64)..=ring as i64 {
                        if dx.unsigned_abs() as usize != ring && dy.unsigned_abs() as usize != ring
                        {
                            continue;
                        }
                        let (bx, by) = (cx as i64 + dx, cy as i64 + dy);
                        if bx < 0 || by < 0 || bx >= cells as i64 || by >= cells as i64 {
                            continue;
                        }
                        any = true;
                        for &i in &buckets[by as usize * cells + bx as usize] {
                            let dlon = points[i].lon - lon;
                            let dlat = points[i].lat - lat;
                            let d = dlon * dlon + dlat * dlat;
                            if d < best_d {
                                best_d = d;
                                best = i;
                            }
                        }
                    }
                }
                // One extra ring after the first hit covers neighbors that
                // sit across a cell boundary.
                if best != usize::MAX && ring > 0 {
                    break;
                }
                if !any && ring >= cells {
                    break;
                }
                ring += 1;
            }
            let v = values[best];
            pixels[py * width + px] = if span > 0.0 {
                (255.0 * (v - lo) / span).round().clamp(0.0, 255.0) as u8
            } else {
                128
            };
        }
    }
    Ok(pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_payload_are_wellformed() {
        let img = write_pgm(3, 2, &[0, 128, 255, 10, 20, 30]).unwrap();
        assert!(img.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&img[img.len() - 6..], &[0, 128, 255, 10, 20, 30]);
        assert!(write_pgm(2, 2, &[0; 3]).is_err());
    }

    #[test]
    fn raster_reflects_a_left_right_gradient() {
        // Two nodes: low value west, high value east.
        let points = vec![GeoPoint::new(-1.0, 0.0), GeoPoint::new(1.0, 0.0)];
        let values = vec![0.0, 10.0];
        let px = rasterize_nodes(&points, &values, (-2.0, 2.0, -1.0, 1.0), 8, 2).unwrap();
        assert_eq!(px[0], 0, "west pixels take the west node");
        assert_eq!(px[7], 255, "east pixels take the east node");
        // Constant field is mid-gray.
        let px = rasterize_nodes(&points, &[3.0, 3.0], (-2.0, 2.0, -1.0, 1.0), 4, 1).unwrap();
        assert!(px.iter().all(|&p| p == 128));
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let p = vec![GeoPoint::new(0.0, 0.0)];
        assert!(rasterize_nodes(&p, &[], (0.0, 1.0, 0.0, 1.0), 2, 2).is_err());
        assert!(rasterize_nodes(&p, &[f64::NAN], (0.0, 1.0, 0.0, 1.0), 2, 2).is_err());
        assert!(rasterize_nodes(&p, &[1.0], (1.0, 0.0, 0.0, 1.0), 2, 2).is_err());
    }
}
