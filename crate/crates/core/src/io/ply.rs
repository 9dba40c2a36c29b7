//! Binary little-endian PLY for feature Gaussians.
//!
//! Per-vertex layout: position (x, y, z), raw quaternion (rot_0..rot_3),
//! log scales (scale_0..scale_2), opacity logit, SH DC (f_dc_0..2), higher
//! SH coefficients channel-major (f_rest_*), then the latent feature
//! channels (feat_*). Files without feat_* properties load with zeroed
//! features and `features_present = false`.

use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::field::{sh_degree_for_len, FeatureGaussian, DEFAULT_FEATURE_DIM};

#[derive(Clone, Debug)]
pub struct GaussianCloud {
    pub gaussians: Vec<FeatureGaussian>,
    pub features_present: bool,
}

fn property_names(sh_len: usize, feature_dim: usize) -> Vec<String> {
    let mut names: Vec<String> = ["x", "y", "z"].iter().map(|s| s.to_string()).collect();
    for i in 0..4 {
        names.push(format!("rot_{i}"));
    }
    for i in 0..3 {
        names.push(format!("scale_{i}"));
    }
    names.push("opacity".to_string());
    for i in 0..3 {
        names.push(format!("f_dc_{i}"));
    }
    let rest = sh_len - 1;
    for c in 0..3 {
        for r in 0..rest {
            names.push(format!("f_rest_{}", c * rest + r));
        }
    }
    for i in 0..feature_dim {
        names.push(format!("feat_{i}"));
    }
    names
}

pub fn save_gaussians(path: &Path, gaussians: &[FeatureGaussian]) -> Result<()> {
    let (sh_len, feature_dim) = match gaussians.first() {
        Some(g) => (g.sh.len(), g.feature.len()),
        None => (1, DEFAULT_FEATURE_DIM),
    };
    sh_degree_for_len(sh_len)?;
    for (i, g) in gaussians.iter().enumerate() {
        if g.sh.len() != sh_len || g.feature.len() != feature_dim {
            return Err(Error::validation(format!(
                "gaussian {i} has sh/feature lengths {}/{}, expected {}/{}",
                g.sh.len(),
                g.feature.len(),
                sh_len,
                feature_dim
            )));
        }
    }

    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let names = property_names(sh_len, feature_dim);
    let mut out = Vec::with_capacity(128 + gaussians.len() * names.len() * 4);
    out.extend_from_slice(b"ply\nformat binary_little_endian 1.0\n");
    out.extend_from_slice(format!("element vertex {}\n", gaussians.len()).as_bytes());
    for name in &names {
        out.extend_from_slice(format!("property float {name}\n").as_bytes());
    }
    out.extend_from_slice(b"end_header\n");

    let rest = sh_len - 1;
    let mut row: Vec<f32> = Vec::with_capacity(names.len());
    for g in gaussians {
        row.clear();
        row.extend_from_slice(&[g.position.x, g.position.y, g.position.z]);
        row.extend_from_slice(&g.rotation);
        row.extend_from_slice(&[g.log_scales.x, g.log_scales.y, g.log_scales.z]);
        row.push(g.opacity_logit);
        row.extend_from_slice(&g.sh[0]);
        for c in 0..3 {
            for r in 0..rest {
                row.push(g.sh[1 + r][c]);
            }
        }
        row.extend_from_slice(&g.feature);
        for v in &row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

struct Header {
    vertex_count: usize,
    properties: Vec<String>,
    data_start: usize,
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<Header> {
    let marker = b"end_header\n";
    let end = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| Error::format(path, "missing end_header"))?;
    let data_start = end + marker.len();
    let text = std::str::from_utf8(&bytes[..end])
        .map_err(|_| Error::format(path, "header is not UTF-8"))?;

    let mut lines = text.lines().map(|l| l.trim_end_matches('\r'));
    if lines.next() != Some("ply") {
        return Err(Error::format(path, "missing ply magic"));
    }
    let mut vertex_count = None;
    let mut properties = Vec::new();
    let mut format_seen = false;
    for line in lines {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("format") => {
                let rest: Vec<&str> = parts.collect();
                if rest != ["binary_little_endian", "1.0"] {
                    return Err(Error::format(
                        path,
                        format!("unsupported format {:?}", rest.join(" ")),
                    ));
                }
                format_seen = true;
            }
            Some("comment") => {}
            Some("element") => {
                let kind = parts.next().unwrap_or("");
                if kind != "vertex" || vertex_count.is_some() {
                    return Err(Error::format(path, format!("unsupported element {kind}")));
                }
                let count: usize = parts
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| Error::format(path, "bad vertex count"))?;
                vertex_count = Some(count);
            }
            Some("property") => {
                let ty = parts.next().unwrap_or("");
                if ty != "float" {
                    return Err(Error::format(
                        path,
                        format!("only float properties supported, got {ty}"),
                    ));
                }
                let name = parts
                    .next()
                    .ok_or_else(|| Error::format(path, "property without a name"))?;
                properties.push(name.to_string());
            }
            Some(other) => {
                return Err(Error::format(path, format!("unexpected header line {other}")));
            }
            None => {}
        }
    }
    if !format_seen {
        return Err(Error::format(path, "missing format line"));
    }
    let vertex_count =
        vertex_count.ok_or_else(|| Error::format(path, "missing vertex element"))?;
    Ok(Header {
        vertex_count,
        properties,
        data_start,
    })
}

fn read_rows(path: &Path, bytes: &[u8], header: &Header) -> Result<Vec<f32>> {
    let stride = header.properties.len();
    let expected = header.vertex_count * stride * 4;
    let data = &bytes[header.data_start..];
    if data.len() < expected {
        return Err(Error::format(
            path,
            format!("payload holds {} bytes, header promises {expected}", data.len()),
        ));
    }
    let mut values = Vec::with_capacity(header.vertex_count * stride);
    for chunk in data[..expected].chunks_exact(4) {
        values.push(f32::from_le_bytes(chunk.try_into().expect("chunk of 4")));
    }
    Ok(values)
}

fn column(header: &Header, path: &Path, name: &str) -> Result<usize> {
    header
        .properties
        .iter()
        .position(|p| p == name)
        .ok_or_else(|| Error::format(path, format!("missing property {name}")))
}

/// Count of properties named `prefix_0 .. prefix_{n-1}`; errors if the
/// indices are not contiguous from zero.
fn indexed_count(header: &Header, path: &Path, prefix: &str) -> Result<usize> {
    let mut indices: Vec<usize> = Vec::new();
    for p in &header.properties {
        if let Some(rest) = p.strip_prefix(prefix) {
            let idx: usize = rest
                .parse()
                .map_err(|_| Error::format(path, format!("bad property index {p}")))?;
            indices.push(idx);
        }
    }
    indices.sort_unstable();
    for (want, got) in indices.iter().enumerate() {
        if want != *got {
            return Err(Error::format(
                path,
                format!("{prefix} indices are not contiguous (missing {prefix}{want})"),
            ));
        }
    }
    Ok(indices.len())
}

pub fn load_gaussians(path: &Path) -> Result<GaussianCloud> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = parse_header(path, &bytes)?;
    let values = read_rows(path, &bytes, &header)?;
    let stride = header.properties.len();

    let xyz = [
        column(&header, path, "x")?,
        column(&header, path, "y")?,
        column(&header, path, "z")?,
    ];
    let rot: [usize; 4] = [
        column(&header, path, "rot_0")?,
        column(&header, path, "rot_1")?,
        column(&header, path, "rot_2")?,
        column(&header, path, "rot_3")?,
    ];
    let scale = [
        column(&header, path, "scale_0")?,
        column(&header, path, "scale_1")?,
        column(&header, path, "scale_2")?,
    ];
    let opacity = column(&header, path, "opacity")?;
    let dc = [
        column(&header, path, "f_dc_0")?,
        column(&header, path, "f_dc_1")?,
        column(&header, path, "f_dc_2")?,
    ];

    let rest_total = indexed_count(&header, path, "f_rest_")?;
    if rest_total % 3 != 0 {
        return Err(Error::format(
            path,
            format!("f_rest count {rest_total} is not divisible by 3"),
        ));
    }
    let rest = rest_total / 3;
    let sh_len = rest + 1;
    sh_degree_for_len(sh_len).map_err(|e| Error::format(path, e.to_string()))?;
    let rest_cols: Vec<usize> = (0..rest_total)
        .map(|i| column(&header, path, &format!("f_rest_{i}")))
        .collect::<Result<_>>()?;

    let feat_dim = indexed_count(&header, path, "feat_")?;
    let features_present = feat_dim > 0;
    let feat_cols: Vec<usize> = (0..feat_dim)
        .map(|i| column(&header, path, &format!("feat_{i}")))
        .collect::<Result<_>>()?;
    let out_dim = if features_present {
        feat_dim
    } else {
        DEFAULT_FEATURE_DIM
    };

    let mut gaussians = Vec::with_capacity(header.vertex_count);
    for v in 0..header.vertex_count {
        let row = &values[v * stride..(v + 1) * stride];
        let mut sh = vec![[0.0f32; 3]; sh_len];
        sh[0] = [row[dc[0]], row[dc[1]], row[dc[2]]];
        for c in 0..3 {
            for r in 0..rest {
                sh[1 + r][c] = row[rest_cols[c * rest + r]];
            }
        }
        let feature = if features_present {
            feat_cols.iter().map(|&c| row[c]).collect()
        } else {
            vec![0.0; out_dim]
        };
        gaussians.push(FeatureGaussian {
            position: Vector3::new(row[xyz[0]], row[xyz[1]], row[xyz[2]]),
            rotation: [row[rot[0]], row[rot[1]], row[rot[2]], row[rot[3]]],
            log_scales: Vector3::new(row[scale[0]], row[scale[1]], row[scale[2]]),
            opacity_logit: row[opacity],
            sh,
            feature,
        });
    }
    Ok(GaussianCloud {
        gaussians,
        features_present,
    })
}

/// Positions from any float PLY exposing x, y, z; other properties are
/// ignored. Used for geometry initialization point sets.
pub fn load_points(path: &Path) -> Result<Vec<Vector3<f32>>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = parse_header(path, &bytes)?;
    let values = read_rows(path, &bytes, &header)?;
    let stride = header.properties.len();
    let xyz = [
        column(&header, path, "x")?,
        column(&header, path, "y")?,
        column(&header, path, "z")?,
    ];
    Ok((0..header.vertex_count)
        .map(|v| {
            let row = &values[v * stride..(v + 1) * stride];
            Vector3::new(row[xyz[0]], row[xyz[1]], row[xyz[2]])
        })
        .collect())
}

/// Plain xyz point cloud writer for init point sets.
pub fn save_points(path: &Path, points: &[Vector3<f32>]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut out = Vec::new();
    out.extend_from_slice(b"ply\nformat binary_little_endian 1.0\n");
    out.extend_from_slice(format!("element vertex {}\n", points.len()).as_bytes());
    out.extend_from_slice(b"property float x\nproperty float y\nproperty float z\nend_header\n");
    for p in points {
        for v in [p.x, p.y, p.z] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
