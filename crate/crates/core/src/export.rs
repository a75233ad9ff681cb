//! File writers (and matching readers) for point clouds, rigidity maps,
//! feature images and trajectories.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, Matrix3, UnitQuaternion, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{Rotation, Se3};
use crate::trackdata::TrackSet;

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn finish(mut w: BufWriter<fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlyVertex {
    pub position: Vector3<f64>,
    pub color: [u8; 3],
    pub frame: usize,
    pub track: usize,
}

/// Where exported points are expressed.
#[derive(Debug, Clone, Copy)]
pub enum PointFrame<'a> {
    /// Each point stays in the camera frame it was observed in.
    Camera,
    /// Points are moved into camera frame `reference` through the given
    /// world-to-camera poses (one per frame).
    Reference { poses: &'a [Se3], reference: usize },
}

/// Unprojects every visible observation with `depths` (track-major `N × T`)
/// and writes an ASCII PLY with per-vertex color, frame and track indices.
pub fn export_pointcloud_ply(
    tracks: &TrackSet,
    depths: &[f64],
    colors: &[[u8; 3]],
    frame: PointFrame<'_>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let (n, t_count) = (tracks.n_tracks(), tracks.n_frames());
    if depths.len() != n * t_count || colors.len() != n {
        return Err(Error::Validation(format!(
            "expected {} depths and {n} colors, got {} and {}",
            n * t_count,
            depths.len(),
            colors.len()
        )));
    }
    let to_ref: Vec<Se3> = match frame {
        PointFrame::Camera => vec![Se3::identity(); t_count],
        PointFrame::Reference { poses, reference } => {
            if poses.len() != t_count || reference >= t_count {
                return Err(Error::Validation(format!(
                    "need {t_count} poses and a reference frame below {t_count}, got {} and {reference}",
                    poses.len()
                )));
            }
            poses
                .iter()
                .map(|p| poses[reference] * p.inverse())
                .collect()
        }
    };
    let mut verts = Vec::new();
    for i in 0..n {
        for t in 0..t_count {
            if !tracks.is_visible(i, t) {
                continue;
            }
            let d = depths[i * t_count + t];
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::NonPositiveDepth(d));
            }
            verts.push(PlyVertex {
                position: to_ref[t].transform_point(&(tracks.ray(i, t) * d)),
                color: colors[i],
                frame: t,
                track: i,
            });
        }
    }
    write_ply(&verts, path)
}

pub fn write_ply(verts: &[PlyVertex], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    let body = (|| -> std::io::Result<()> {
        writeln!(w, "ply")?;
        writeln!(w, "format ascii 1.0")?;
        writeln!(w, "element vertex {}", verts.len())?;
        for p in [
            "double x",
            "double y",
            "double z",
            "uchar red",
            "uchar green",
            "uchar blue",
            "int frame",
            "int track",
        ] {
            writeln!(w, "property {p}")?;
        }
        writeln!(w, "end_header")?;
        for v in verts {
            let p = v.position;
            let c = v.color;
            writeln!(
                w,
                "{:.8e} {:.8e} {:.8e} {} {} {} {} {}",
                p.x, p.y, p.z, c[0], c[1], c[2], v.frame, v.track
            )?;
        }
        Ok(())
    })();
    body.map_err(|e| Error::io(path, e))?;
    finish(w, path)
}

/// Reads files produced by [`write_ply`].
pub fn read_ply(path: impl AsRef<Path>) -> Result<Vec<PlyVertex>> {
    let text = read_text(path.as_ref())?;
    let mut lines = text.lines().enumerate();
    let mut count = None;
    for (k, line) in lines.by_ref() {
        if k == 0 && line != "ply" {
            return Err(Error::parse(1, "missing ply magic"));
        }
        if let Some(c) = line.strip_prefix("element vertex ") {
            count = Some(
                c.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::parse(k + 1, "bad vertex count"))?,
            );
        }
        if line == "end_header" {
            break;
        }
    }
    let count = count.ok_or_else(|| Error::parse(0, "missing vertex element"))?;
    let mut out = Vec::with_capacity(count);
    for (k, line) in lines.take(count) {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 8 {
            return Err(Error::parse(
                k + 1,
                format!("expected 8 fields, got {}", f.len()),
            ));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::parse(k + 1, format!("bad number {s:?}")))
        };
        let int = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::parse(k + 1, format!("bad integer {s:?}")))
        };
        let byte = |s: &str| {
            s.parse::<u8>()
                .map_err(|_| Error::parse(k + 1, format!("bad color {s:?}")))
        };
        out.push(PlyVertex {
            position: Vector3::new(num(f[0])?, num(f[1])?, num(f[2])?),
            color: [byte(f[3])?, byte(f[4])?, byte(f[5])?],
            frame: int(f[6])?,
            track: int(f[7])?,
        });
    }
    if out.len() != count {
        return Err(Error::parse(
            0,
            format!("expected {count} vertices, found {}", out.len()),
        ));
    }
    Ok(out)
}

/// Pixel indices of the 3×3 patch around `p` that fall inside the image.
fn patch(p: &Vector2<f64>, size: (usize, usize)) -> Vec<(usize, usize)> {
    if !(p.x.is_finite() && p.y.is_finite()) {
        return Vec::new();
    }
    let (cx, cy) = (p.x.round() as i64, p.y.round() as i64);
    let mut out = Vec::with_capacity(9);
    for dy in -1..=1 {
        for dx in -1..=1 {
            let (x, y) = (cx + dx, cy + dy);
            if x >= 0 && y >= 0 && (x as usize) < size.0 && (y as usize) < size.1 {
                out.push((x as usize, y as usize));
            }
        }
    }
    out
}

/// Grayscale raster with a 3×3 patch of `round(255·w)` per track; where
/// patches overlap the larger value wins.
pub fn rasterize_weights(
    mask: &[f64],
    positions: &[Vector2<f64>],
    size: (usize, usize),
) -> Result<Vec<u8>> {
    if mask.len() != positions.len() {
        return Err(Error::Validation(format!(
            "{} weights for {} positions",
            mask.len(),
            positions.len()
        )));
    }
    let mut img = vec![0u8; size.0 * size.1];
    for (w, p) in mask.iter().zip(positions) {
        if !(0.0..=1.0).contains(w) {
            return Err(Error::Validation(format!(
                "rigidity weight {w} outside [0, 1]"
            )));
        }
        let v = (255.0 * w).round() as u8;
        for (x, y) in patch(p, size) {
            let px = &mut img[y * size.0 + x];
            *px = (*px).max(v);
        }
    }
    Ok(img)
}

pub fn export_rigidity_map_pgm(
    mask: &[f64],
    positions: &[Vector2<f64>],
    size: (usize, usize),
    path: impl AsRef<Path>,
) -> Result<()> {
    let img = rasterize_weights(mask, positions, size)?;
    let mut bytes = format!("P5\n{} {}\n255\n", size.0, size.1).into_bytes();
    bytes.extend_from_slice(&img);
    fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path.as_ref(), e))
}

fn split_header(bytes: &[u8], magic: &str) -> Result<((usize, usize), usize)> {
    // Four whitespace-separated tokens, then one whitespace byte.
    let mut tokens = Vec::new();
    let mut k = 0;
    while tokens.len() < 4 {
        while k < bytes.len() && bytes[k].is_ascii_whitespace() {
            k += 1;
        }
        let start = k;
        while k < bytes.len() && !bytes[k].is_ascii_whitespace() {
            k += 1;
        }
        if start == k {
            return Err(Error::parse(1, "truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..k]).into_owned());
    }
    if tokens[0] != magic {
        return Err(Error::parse(
            1,
            format!("expected {magic}, got {}", tokens[0]),
        ));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::parse(1, format!("bad header field {s:?}")))
    };
    if num(&tokens[3])? != 255 {
        return Err(Error::parse(1, "only maxval 255 is supported"));
    }
    Ok(((num(&tokens[1])?, num(&tokens[2])?), k + 1))
}

/// Returns `(width, height)` and the row-major pixels.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<((usize, usize), Vec<u8>)> {
    let bytes = fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    let (size, offset) = split_header(&bytes, "P5")?;
    let data = bytes.get(offset..).unwrap_or_default().to_vec();
    if data.len() != size.0 * size.1 {
        return Err(Error::parse(
            0,
            format!("expected {} pixels, got {}", size.0 * size.1, data.len()),
        ));
    }
    Ok((size, data))
}

/// Colors each track's 3×3 patch by its first three PCA coordinates, each
/// rescaled to [0, 255] over the tracks.
pub fn export_pca_ppm(
    coords: &DMatrix<f64>,
    positions: &[Vector2<f64>],
    size: (usize, usize),
    path: impl AsRef<Path>,
) -> Result<()> {
    if coords.nrows() != positions.len() || coords.ncols() < 3 {
        return Err(Error::Validation(format!(
            "need N x 3 coordinates for {} tracks, got {} x {}",
            positions.len(),
            coords.nrows(),
            coords.ncols()
        )));
    }
    let mut img = vec![0u8; 3 * size.0 * size.1];
    let ranges: Vec<(f64, f64)> = (0..3)
        .map(|c| {
            let col = coords.column(c);
            (col.min(), col.max())
        })
        .collect();
    for (i, p) in positions.iter().enumerate() {
        let rgb: Vec<u8> = (0..3)
            .map(|c| {
                let (lo, hi) = ranges[c];
                let s = if hi > lo {
                    (coords[(i, c)] - lo) / (hi - lo)
                } else {
                    0.5
                };
                (255.0 * s).round() as u8
            })
            .collect();
        for (x, y) in patch(p, size) {
            let k = 3 * (y * size.0 + x);
            img[k..k + 3].copy_from_slice(&rgb);
        }
    }
    let mut bytes = format!("P6\n{} {}\n255\n", size.0, size.1).into_bytes();
    bytes.extend_from_slice(&img);
    fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path.as_ref(), e))
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<((usize, usize), Vec<u8>)> {
    let bytes = fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    let (size, offset) = split_header(&bytes, "P6")?;
    let data = bytes.get(offset..).unwrap_or_default().to_vec();
    if data.len() != 3 * size.0 * size.1 {
        return Err(Error::parse(
            0,
            "pixel data length does not match the header",
        ));
    }
    Ok((size, data))
}

/// Hamilton quaternion `(x, y, z, w)` with `w ≥ 0`.
fn quaternion_xyzw(r: &Rotation) -> [f64; 4] {
    let q = r.to_quaternion();
    let c = q.coords;
    let s = if c.w < 0.0 { -1.0 } else { 1.0 };
    [s * c.x, s * c.y, s * c.z, s * c.w]
}

/// One `timestamp tx ty tz qx qy qz qw` line per pose, timestamps equal to
/// the frame index, values in shortest round-trip decimal form. Poses are
/// written as given.
pub fn format_tum(traj: &[Se3]) -> String {
    let mut s = String::new();
    for (t, x) in traj.iter().enumerate() {
        let p = x.translation;
        let q = quaternion_xyzw(&x.rotation);
        s.push_str(&t.to_string());
        for v in [p.x, p.y, p.z, q[0], q[1], q[2], q[3]] {
            // Adding zero turns -0 into 0.
            s.push_str(&format!(" {}", v + 0.0));
        }
        s.push('\n');
    }
    s
}

pub fn export_trajectory_tum(traj: &[Se3], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path.as_ref(), format_tum(traj)).map_err(|e| Error::io(path.as_ref(), e))
}

/// Parses TUM lines; `#` comments and blank lines are skipped.
pub fn parse_tum(text: &str) -> Result<Vec<(f64, Se3)>> {
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| Error::parse(k + 1, format!("bad number {s:?}")))
            })
            .collect::<Result<_>>()?;
        if v.len() != 8 {
            return Err(Error::parse(
                k + 1,
                format!("expected 8 fields, got {}", v.len()),
            ));
        }
        let q = nalgebra::Quaternion::new(v[7], v[4], v[5], v[6]);
        if !(q.norm() > 0.0) {
            return Err(Error::parse(k + 1, "zero quaternion"));
        }
        let r: Matrix3<f64> = UnitQuaternion::from_quaternion(q)
            .to_rotation_matrix()
            .into_inner();
        let rot = Rotation::from_matrix(r).map_err(|e| Error::parse(k + 1, e.to_string()))?;
        out.push((v[0], Se3::new(rot, Vector3::new(v[1], v[2], v[3]))));
    }
    Ok(out)
}

pub fn read_trajectory_tum(path: impl AsRef<Path>) -> Result<Vec<Se3>> {
    Ok(parse_tum(&read_text(path.as_ref())?)?
        .into_iter()
        .map(|(_, x)| x)
        .collect())
}
