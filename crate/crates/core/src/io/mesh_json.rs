//! Mesh JSON: a human-auditable document with vertex coordinates at 9
//! decimal digits, matching the builder's own quantization so the
//! roundtrip is exact. Zones and edges are derived from the geometry on
//! read; the stored zone list is cross-checked against the derivation.

use serde_json::Value;

use super::IoError;
use crate::geo::{Ellipsoid, GeoPoint, RoiSpec, SpacingSpec, Zone};
use crate::mesh::TriMesh;

const VERSION: u64 = 1;

fn zone_str(z: Zone) -> &'static str {
    match z {
        Zone::Roi => "roi",
        Zone::Belt => "belt",
        Zone::Outer => "outer",
    }
}

fn zone_parse(s: &str) -> Result<Zone, IoError> {
    match s {
        "roi" => Ok(Zone::Roi),
        "belt" => Ok(Zone::Belt),
        "outer" => Ok(Zone::Outer),
        other => Err(IoError::Format(format!("mesh: unknown zone tag {other:?}"))),
    }
}

pub fn write_mesh_json(mesh: &TriMesh) -> String {
    let mut s = String::with_capacity(mesh.n_vertices() * 32);
    s.push_str(&format!(
        "{{\n\"version\": {VERSION},\n\"ellipsoid\": {{\"a\": {}, \"b\": {}}},\n",
        mesh.ellipsoid.a, mesh.ellipsoid.b
    ));
    s.push_str(&format!(
        "\"roi\": {{\"lon_min\": {}, \"lon_max\": {}, \"lat_min\": {}, \"lat_max\": {}, \"belt_dlon\": {}, \"belt_dlat\": {}}},\n",
        mesh.roi.lon_min, mesh.roi.lon_max, mesh.roi.lat_min, mesh.roi.lat_max,
        mesh.roi.belt_dlon, mesh.roi.belt_dlat
    ));
    s.push_str(&format!(
        "\"spacing\": {{\"s_roi\": {}, \"s_belt\": {}, \"s_outer\": {}}},\n",
        mesh.spacing.s_roi, mesh.spacing.s_belt, mesh.spacing.s_outer
    ));
    s.push_str("\"vertices\": [\n");
    for (i, p) in mesh.vertices.iter().enumerate() {
        let sep = if i + 1 == mesh.vertices.len() { "" } else { "," };
        s.push_str(&format!("[{:.9},{:.9}]{sep}\n", p.lon, p.lat));
    }
    s.push_str("],\n\"triangles\": [\n");
    for (i, t) in mesh.triangles.iter().enumerate() {
        let sep = if i + 1 == mesh.triangles.len() { "" } else { "," };
        s.push_str(&format!("[{},{},{}]{sep}\n", t[0], t[1], t[2]));
    }
    s.push_str("],\n\"zones\": [");
    for (i, z) in mesh.zones.iter().enumerate() {
        let sep = if i + 1 == mesh.zones.len() { "" } else { "," };
        s.push_str(&format!("\"{}\"{sep}", zone_str(*z)));
    }
    s.push_str("]\n}\n");
    s
}

fn field<'a>(v: &'a Value, name: &str) -> Result<&'a Value, IoError> {
    v.get(name)
        .ok_or_else(|| IoError::Format(format!("mesh: missing field {name:?}")))
}

fn num(v: &Value, name: &str) -> Result<f64, IoError> {
    v.as_f64()
        .ok_or_else(|| IoError::Format(format!("mesh: field {name:?} is not a number")))
}

pub fn read_mesh_json(text: &str) -> Result<TriMesh, IoError> {
    let v: Value = serde_json::from_str(text)?;
    let version = num(field(&v, "version")?, "version")? as u64;
    if version != VERSION {
        return Err(IoError::Format(format!(
            "mesh: unsupported version {version}, expected {VERSION}"
        )));
    }
    let e = field(&v, "ellipsoid")?;
    let ellipsoid = Ellipsoid {
        a: num(field(e, "a")?, "ellipsoid.a")?,
        b: num(field(e, "b")?, "ellipsoid.b")?,
    };
    let r = field(&v, "roi")?;
    let roi = RoiSpec {
        lon_min: num(field(r, "lon_min")?, "roi.lon_min")?,
        lon_max: num(field(r, "lon_max")?, "roi.lon_max")?,
        lat_min: num(field(r, "lat_min")?, "roi.lat_min")?,
        lat_max: num(field(r, "lat_max")?, "roi.lat_max")?,
        belt_dlon: num(field(r, "belt_dlon")?, "roi.belt_dlon")?,
        belt_dlat: num(field(r, "belt_dlat")?, "roi.belt_dlat")?,
    };
    let sp = field(&v, "spacing")?;
    let spacing = SpacingSpec {
        s_roi: num(field(sp, "s_roi")?, "spacing.s_roi")?,
        s_belt: num(field(sp, "s_belt")?, "spacing.s_belt")?,
        s_outer: num(field(sp, "s_outer")?, "spacing.s_outer")?,
    };
    let verts = field(&v, "vertices")?
        .as_array()
        .ok_or_else(|| IoError::Format("mesh: vertices is not an array".into()))?;
    let mut vertices = Vec::with_capacity(verts.len());
    for (i, pt) in verts.iter().enumerate() {
        let pair = pt
            .as_array()
            .filter(|a| a.len() == 2)
            .ok_or_else(|| IoError::Format(format!("mesh: vertex {i} is not a [lon,lat] pair")))?;
        vertices.push(GeoPoint::new(
            num(&pair[0], "vertex lon")?,
            num(&pair[1], "vertex lat")?,
        ));
    }
    let tris = field(&v, "triangles")?
        .as_array()
        .ok_or_else(|| IoError::Format("mesh: triangles is not an array".into()))?;
    let mut triangles = Vec::with_capacity(tris.len());
    for (i, t) in tris.iter().enumerate() {
        let trio = t
            .as_array()
            .filter(|a| a.len() == 3)
            .ok_or_else(|| IoError::Format(format!("mesh: triangle {i} is not an index trio")))?;
        let mut idx = [0u32; 3];
        for (k, x) in trio.iter().enumerate() {
            idx[k] = x.as_u64().ok_or_else(|| {
                IoError::Format(format!("mesh: triangle {i} has a non-integer index"))
            })? as u32;
        }
        triangles.push(idx);
    }
    let mesh = TriMesh::assemble(ellipsoid, roi, spacing, vertices, triangles)?;
    let zone_tags = field(&v, "zones")?
        .as_array()
        .ok_or_else(|| IoError::Format("mesh: zones is not an array".into()))?;
    if zone_tags.len() != mesh.zones.len() {
        return Err(IoError::Format(format!(
            "mesh: {} zone tags for {} vertices",
            zone_tags.len(),
            mesh.zones.len()
        )));
    }
    for (i, tag) in zone_tags.iter().enumerate() {
        let stored = zone_parse(tag.as_str().ok_or_else(|| {
            IoError::Format(format!("mesh: zone {i} is not a string"))
        })?)?;
        if stored != mesh.zones[i] {
            return Err(IoError::Format(format!(
                "mesh: stored zone {:?} for vertex {i} disagrees with the geometry ({:?})",
                zone_str(stored),
                zone_str(mesh.zones[i])
            )));
        }
    }
    Ok(mesh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_mesh_with, MeshBuildOptions};

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
        build_mesh_with(&Ellipsoid::wgs84(), &roi, &spacing, 2024, &opts).unwrap()
    }

    #[test]
    fn roundtrip_is_exact() {
        let mesh = small_mesh();
        let text = write_mesh_json(&mesh);
        let back = read_mesh_json(&text).unwrap();
        assert_eq!(mesh, back);
        // A second write is byte-identical, so the artifact is stable.
        assert_eq!(text, write_mesh_json(&back));
    }

    #[test]
    fn zone_tampering_is_detected() {
        let mesh = small_mesh();
        let text = write_mesh_json(&mesh);
        let tampered = text.replacen("\"outer\"", "\"roi\"", 1);
        let err = read_mesh_json(&tampered).unwrap_err();
        assert!(err.to_string().contains("disagrees"), "{err}");
    }

    #[test]
    fn version_and_field_errors_name_the_problem() {
        let mesh = small_mesh();
        let text = write_mesh_json(&mesh);
        let bad = text.replacen("\"version\": 1", "\"version\": 9", 1);
        assert!(read_mesh_json(&bad)
            .unwrap_err()
            .to_string()
            .contains("version 9"));
        let bad = text.replacen("\"triangles\"", "\"trianglez\"", 1);
        assert!(read_mesh_json(&bad)
            .unwrap_err()
            .to_string()
            .contains("triangles"));
    }
}
