//! Point-cloud file I/O (ASCII PLY and `x y z` text) and the run-length
//! encoded JSON form of [`ObjectRep`].

use super::{ObjectFrame, ObjectRep, PerceptionError, PointCloud, Result, VoxelGrid};
use crate::geom::{Mat3, Pt3};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

pub const OBJECT_REP_FORMAT_VERSION: u32 = 1;

/// Load a cloud from ASCII PLY (header starting with `ply`) or a plain
/// line-delimited `x y z` text file, both in meters.
pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    let file = std::fs::File::open(path)?;
    let mut reader = BufReader::new(file);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    if first.trim() == "ply" {
        parse_ply(reader)
    } else {
        let mut points = Vec::new();
        if let Some(p) = parse_xyz_line(&first)? {
            points.push(p);
        }
        for line in reader.lines() {
            if let Some(p) = parse_xyz_line(&line?)? {
                points.push(p);
            }
        }
        Ok(PointCloud::new(points))
    }
}

fn parse_xyz_line(line: &str) -> Result<Option<Pt3>> {
    let t = line.trim();
    if t.is_empty() || t.starts_with('#') {
        return Ok(None);
    }
    let mut it = t.split_whitespace();
    let mut next = || -> Result<f64> {
        it.next()
            .ok_or_else(|| PerceptionError::Parse(format!("short line `{t}`")))?
            .parse::<f64>()
            .map_err(|e| PerceptionError::Parse(format!("bad number in `{t}`: {e}")))
    };
    let (x, y, z) = (next()?, next()?, next()?);
    Ok(Some(Pt3::new(x, y, z)))
}

fn parse_ply<R: BufRead>(reader: R) -> Result<PointCloud> {
    let mut lines = reader.lines();
    let mut vertex_count: Option<usize> = None;
    let mut props: Vec<String> = Vec::new();
    let mut in_vertex_element = false;
    for line in lines.by_ref() {
        let line = line?;
        let t = line.trim().to_string();
        if t == "end_header" {
            break;
        }
        let fields: Vec<&str> = t.split_whitespace().collect();
        match fields.as_slice() {
            ["format", "ascii", ..] => {}
            ["format", other, ..] => {
                return Err(PerceptionError::Parse(format!(
                    "unsupported PLY format `{other}` (ascii only)"
                )))
            }
            ["element", "vertex", n] => {
                vertex_count = Some(n.parse().map_err(|e| {
                    PerceptionError::Parse(format!("bad vertex count: {e}"))
                })?);
                in_vertex_element = true;
            }
            ["element", ..] => in_vertex_element = false,
            ["property", _, name] if in_vertex_element => props.push(name.to_string()),
            _ => {}
        }
    }
    let count = vertex_count
        .ok_or_else(|| PerceptionError::Parse("PLY header missing vertex element".into()))?;
    let idx_of = |name: &str| props.iter().position(|p| p == name);
    let (xi, yi, zi) = match (idx_of("x"), idx_of("y"), idx_of("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => {
            return Err(PerceptionError::Parse(
                "PLY vertex element missing x/y/z properties".into(),
            ))
        }
    };

    let mut points = Vec::with_capacity(count);
    for line in lines {
        if points.len() == count {
            break;
        }
        let line = line?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let vals: Vec<f64> = t
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| PerceptionError::Parse(format!("bad PLY vertex `{t}`: {e}")))?;
        if vals.len() < props.len() {
            return Err(PerceptionError::Parse(format!("short PLY vertex `{t}`")));
        }
        points.push(Pt3::new(vals[xi], vals[yi], vals[zi]));
    }
    if points.len() != count {
        return Err(PerceptionError::Parse(format!(
            "PLY declared {count} vertices but {} were present",
            points.len()
        )));
    }
    Ok(PointCloud::new(points))
}

pub fn save_cloud_xyz(cloud: &PointCloud, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in &cloud.points {
        writeln!(out, "{} {} {}", p.x, p.y, p.z)?;
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ObjectRepFile {
    format_version: u32,
    resolution: usize,
    /// Run lengths alternating empty/occupied, starting with empty, over the
    /// flat index `(ix * r + iy) * r + iz`.
    grid_rle: Vec<usize>,
    size: [f64; 3],
    origin: [f64; 3],
    /// Row-major 3x3 frame axes (columns are the object axes in world).
    axes: [f64; 9],
}

/// Run-length encode bits, starting with a (possibly zero-length) empty run.
pub fn rle_encode(bits: &[bool]) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0usize;
    for &b in bits {
        if b == current {
            len += 1;
        } else {
            runs.push(len);
            current = b;
            len = 1;
        }
    }
    runs.push(len);
    runs
}

pub fn rle_decode(runs: &[usize], total: usize) -> Result<Vec<bool>> {
    let mut bits = Vec::with_capacity(total);
    let mut value = false;
    for &run in runs {
        for _ in 0..run {
            bits.push(value);
        }
        value = !value;
    }
    if bits.len() != total {
        return Err(PerceptionError::Parse(format!(
            "RLE decodes to {} bits, expected {total}",
            bits.len()
        )));
    }
    Ok(bits)
}

pub fn object_rep_to_json(rep: &ObjectRep) -> String {
    let file = ObjectRepFile {
        format_version: OBJECT_REP_FORMAT_VERSION,
        resolution: rep.grid.resolution(),
        grid_rle: rle_encode(rep.grid.bits()),
        size: [rep.size.x, rep.size.y, rep.size.z],
        origin: [rep.frame.origin.x, rep.frame.origin.y, rep.frame.origin.z],
        axes: {
            let mut a = [0.0; 9];
            for r in 0..3 {
                for c in 0..3 {
                    a[r * 3 + c] = rep.frame.axes[(r, c)];
                }
            }
            a
        },
    };
    serde_json::to_string_pretty(&file).expect("serializable")
}

pub fn object_rep_from_json(s: &str) -> Result<ObjectRep> {
    let file: ObjectRepFile =
        serde_json::from_str(s).map_err(|e| PerceptionError::Parse(e.to_string()))?;
    if file.format_version != OBJECT_REP_FORMAT_VERSION {
        return Err(PerceptionError::Parse(format!(
            "unsupported object-rep format version {}",
            file.format_version
        )));
    }
    let r = file.resolution;
    let bits = rle_decode(&file.grid_rle, r * r * r)?;
    let mut axes = Mat3::zeros();
    for row in 0..3 {
        for c in 0..3 {
            axes[(row, c)] = file.axes[row * 3 + c];
        }
    }
    Ok(ObjectRep {
        grid: VoxelGrid::from_bits(r, bits)?,
        size: crate::geom::Vec3::new(file.size[0], file.size[1], file.size[2]),
        frame: ObjectFrame {
            origin: Pt3::new(file.origin[0], file.origin[1], file.origin[2]),
            axes,
        },
    })
}
