//! RGRID: the binary grid container. Little-endian: magic `RGRD`,
//! u32 version, u32 C/H/W, f64 resolution, H f64 latitudes, W f64
//! longitudes, C length-prefixed channel names, C*H*W f32 payload
//! (row-major per channel), a mask flag plus H*W mask bytes when present,
//! and a trailing whole-body checksum.

use super::framing::{Reader, Writer};
use super::IoError;
use crate::regrid::RectGrid;

const MAGIC: &[u8; 4] = b"RGRD";
const VERSION: u32 = 1;

pub fn write_rgrid(grid: &RectGrid) -> Vec<u8> {
    let mut w = Writer::new(MAGIC, VERSION);
    w.u32(grid.channel_names.len() as u32);
    w.u32(grid.lats.len() as u32);
    w.u32(grid.lons.len() as u32);
    w.f64(grid.resolution);
    w.f64_slice(&grid.lats);
    w.f64_slice(&grid.lons);
    for name in &grid.channel_names {
        w.str(name);
    }
    w.f32_slice(&grid.data);
    match &grid.water_mask {
        Some(mask) => {
            w.bytes(&[1]);
            let bytes: Vec<u8> = mask.iter().map(|&m| m as u8).collect();
            w.bytes(&bytes);
        }
        None => w.bytes(&[0]),
    }
    w.finish_with_crc()
}

/// Decodes a grid. Non-finite payload values are legal on disk; they are
/// reported per channel in the returned warnings.
pub fn read_rgrid(bytes: &[u8]) -> Result<(RectGrid, Vec<String>), IoError> {
    let mut r = Reader::open_checked("rgrid", MAGIC, VERSION, bytes)?;
    let c = r.u32()? as usize;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let resolution = r.f64()?;
    let lats = r.f64_vec(h, "latitude axis")?;
    let lons = r.f64_vec(w, "longitude axis")?;
    let mut names = Vec::with_capacity(c);
    for i in 0..c {
        names.push(r.str(&format!("channel name {i}"))?);
    }
    let data = r.f32_vec(c * h * w, "payload")?;
    let mask_flag = r.byte_vec(1, "mask flag")?[0];
    let water_mask = match mask_flag {
        0 => None,
        1 => {
            let raw = r.byte_vec(h * w, "water mask")?;
            Some(raw.iter().map(|&b| b != 0).collect())
        }
        other => {
            return Err(IoError::Format(format!(
                "rgrid: mask flag must be 0 or 1, got {other}"
            )))
        }
    };
    r.expect_end()?;
    let mut warnings = Vec::new();
    for (ci, name) in names.iter().enumerate() {
        let bad = data[ci * h * w..(ci + 1) * h * w]
            .iter()
            .filter(|v| !v.is_finite())
            .count();
        if bad > 0 {
            warnings.push(format!(
                "channel {name:?} contains {bad} non-finite values"
            ));
        }
    }
    let grid = RectGrid::new(lons, lats, resolution, names, data, water_mask)?;
    Ok((grid, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_grid(seed: u64) -> RectGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = rng.gen_range(2..6);
        let w = rng.gen_range(2..6);
        let res = [0.25, 0.5, 1.0][rng.gen_range(0..3)];
        let lat0 = rng.gen_range(-60.0f64..60.0);
        let lon0 = rng.gen_range(-170.0f64..160.0);
        let lats: Vec<f64> = (0..h).map(|i| lat0 + i as f64 * res).collect();
        let lons: Vec<f64> = (0..w).map(|i| lon0 + i as f64 * res).collect();
        let c = rng.gen_range(1..4);
        let names: Vec<String> = (0..c).map(|i| format!("ch{i}")).collect();
        let data: Vec<f32> = (0..c * h * w).map(|_| rng.gen::<f32>() * 10.0 - 5.0).collect();
        let mask = if rng.gen_bool(0.5) {
            Some((0..h * w).map(|_| rng.gen_bool(0.3)).collect())
        } else {
            None
        };
        RectGrid::new(lons, lats, res, names, data, mask).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        for seed in 0..50 {
            let grid = random_grid(seed);
            let bytes = write_rgrid(&grid);
            let (back, warnings) = read_rgrid(&bytes).unwrap();
            assert_eq!(grid, back, "seed {seed}");
            assert!(warnings.is_empty());
        }
    }

    #[test]
    fn nan_payload_survives_with_a_warning() {
        let mut grid = random_grid(7);
        grid.data[0] = f32::NAN;
        grid.data[1] = f32::INFINITY;
        let bytes = write_rgrid(&grid);
        let (back, warnings) = read_rgrid(&bytes).unwrap();
        assert!(back.data[0].is_nan());
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("2 non-finite"), "{warnings:?}");
    }

    #[test]
    fn corruption_is_caught() {
        let grid = random_grid(9);
        let mut bytes = write_rgrid(&grid);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        let err = read_rgrid(&bytes).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
        // Truncation is also a checksum failure or a short read.
        let err = read_rgrid(&write_rgrid(&grid)[..20]).unwrap_err();
        assert!(err.to_string().contains("rgrid"), "{err}");
        let err = read_rgrid(b"XXXX").unwrap_err();
        assert!(err.to_string().contains("too short"), "{err}");
    }
}
