//! Synthetic multi-body scenes with known geometry and motion.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::TrackSet;
use crate::error::{Error, Result};
use crate::geometry::{project, se3_exp, Intrinsics, Rotation, Se3};

/// Per-frame rotation increment relative to translation, radians per unit of
/// `motion_magnitude`.
const ROTATION_SCALE: f64 = 0.2;
const MIN_DEPTH: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub n_bodies: usize,
    pub tracks_per_body: usize,
    pub n_static_tracks: usize,
    pub n_frames: usize,
    pub intrinsics: Intrinsics,
    pub image_size: (usize, usize),
    /// Scene units of translation per frame (rotation scaled by 0.2 rad).
    pub motion_magnitude: f64,
    pub pixel_noise_sigma: f64,
    pub rng_seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            n_bodies: 1,
            tracks_per_body: 64,
            n_static_tracks: 128,
            n_frames: 10,
            intrinsics: Intrinsics {
                fx: 240.0,
                fy: 240.0,
                cx: 160.0,
                cy: 120.0,
            },
            image_size: (320, 240),
            motion_magnitude: 0.1,
            pixel_noise_sigma: 0.0,
            rng_seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        if self.n_bodies > 0 && self.tracks_per_body < 4 {
            return fail(format!(
                "tracks_per_body must be >= 4, got {}",
                self.tracks_per_body
            ));
        }
        if self.n_static_tracks < 8 {
            return fail(format!(
                "n_static_tracks must be >= 8, got {}",
                self.n_static_tracks
            ));
        }
        if self.n_frames < 2 {
            return fail(format!("frames must be >= 2, got {}", self.n_frames));
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return fail("image size must be positive".into());
        }
        if !(self.motion_magnitude >= 0.0 && self.motion_magnitude.is_finite()) {
            return fail(format!(
                "motion_magnitude must be >= 0, got {}",
                self.motion_magnitude
            ));
        }
        if !(self.pixel_noise_sigma >= 0.0 && self.pixel_noise_sigma.is_finite()) {
            return fail(format!(
                "pixel_noise_sigma must be >= 0, got {}",
                self.pixel_noise_sigma
            ));
        }
        Intrinsics::new(
            self.intrinsics.fx,
            self.intrinsics.fy,
            self.intrinsics.cx,
            self.intrinsics.cy,
        )?;
        Ok(())
    }

    pub fn n_tracks(&self) -> usize {
        self.n_static_tracks + self.n_bodies * self.tracks_per_body
    }

    /// `key=value` lines, one per field.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let k = &self.intrinsics;
        vec![
            ("n_bodies", self.n_bodies.to_string()),
            ("tracks_per_body", self.tracks_per_body.to_string()),
            ("n_static_tracks", self.n_static_tracks.to_string()),
            ("frames", self.n_frames.to_string()),
            ("width", self.image_size.0.to_string()),
            ("height", self.image_size.1.to_string()),
            ("fx", k.fx.to_string()),
            ("fy", k.fy.to_string()),
            ("cx", k.cx.to_string()),
            ("cy", k.cy.to_string()),
            ("motion_magnitude", self.motion_magnitude.to_string()),
            ("pixel_noise_sigma", self.pixel_noise_sigma.to_string()),
            ("seed", self.rng_seed.to_string()),
        ]
    }

    /// Sets one field from its `key=value` form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |e: &dyn std::fmt::Display| Error::Validation(format!("{key}: `{value}`: {e}"));
        let int = || value.parse::<usize>().map_err(|e| bad(&e));
        let float = || value.parse::<f64>().map_err(|e| bad(&e));
        match key {
            "n_bodies" => self.n_bodies = int()?,
            "tracks_per_body" => self.tracks_per_body = int()?,
            "n_static_tracks" => self.n_static_tracks = int()?,
            "frames" => self.n_frames = int()?,
            "width" => self.image_size.0 = int()?,
            "height" => self.image_size.1 = int()?,
            "fx" => self.intrinsics.fx = float()?,
            "fy" => self.intrinsics.fy = float()?,
            "cx" => self.intrinsics.cx = float()?,
            "cy" => self.intrinsics.cy = float()?,
            "motion_magnitude" => self.motion_magnitude = float()?,
            "pixel_noise_sigma" => self.pixel_noise_sigma = float()?,
            "seed" => self.rng_seed = value.parse::<u64>().map_err(|e| bad(&e))?,
            _ => return Err(Error::Validation(format!("unknown scene key `{key}`"))),
        }
        Ok(())
    }
}

/// Ground truth accompanying a synthetic track set.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Body label per track; 0 is the static background.
    pub body_of_track: Vec<usize>,
    /// `body_trajectories[b][t]` moves body `b` from its frame-0 placement in
    /// world coordinates. Entry 0 is the (identity) background.
    pub body_trajectories: Vec<Vec<Se3>>,
    /// World-to-camera pose per frame; frame 0 is the identity.
    pub camera_trajectory: Vec<Se3>,
    /// Camera-frame depth per track and frame, track-major.
    pub gt_depths: Vec<f64>,
}

impl GroundTruth {
    pub fn n_frames(&self) -> usize {
        self.camera_trajectory.len()
    }

    pub fn depth(&self, track: usize, frame: usize) -> f64 {
        self.gt_depths[track * self.n_frames() + frame]
    }

    pub fn n_bodies(&self) -> usize {
        self.body_trajectories.len()
    }

    /// Camera-frame motion of body `b` from frame `t` to `t + 1`.
    pub fn relative_motion(&self, body: usize, t: usize) -> Se3 {
        let c = &self.camera_trajectory;
        let b = &self.body_trajectories[body];
        c[t + 1] * b[t + 1] * b[t].inverse() * c[t].inverse()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub tracks: TrackSet,
    pub gt: GroundTruth,
}

fn smooth_increments(rng: &mut ChaCha8Rng, n: usize, magnitude: f64) -> Vec<Vector6<f64>> {
    let raw: Vec<Vector6<f64>> = (0..n + 2)
        .map(|_| Vector6::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal)))
        .collect();
    raw.windows(3)
        .map(|w| {
            let f = (w[0] + w[1] + w[2]) / 3.0;
            let mut xi = f * magnitude;
            for k in 0..3 {
                xi[k] *= ROTATION_SCALE;
            }
            xi
        })
        .collect()
}

fn conjugate_about(center: &Vector3<f64>, x: &Se3) -> Se3 {
    Se3::from_translation(*center) * *x * Se3::from_translation(-center)
}

fn sample_point(
    rng: &mut ChaCha8Rng,
    k: &Intrinsics,
    size: (usize, usize),
    lo: f64,
    hi: f64,
    depth: (f64, f64),
) -> Vector3<f64> {
    let u = rng.random_range(lo..hi) * size.0 as f64;
    let v = rng.random_range(lo..hi) * size.1 as f64;
    let d = rng.random_range(depth.0..depth.1);
    k.ray(&Vector2::new(u, v)) * d
}

pub fn generate_scene(spec: &SceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let k = spec.intrinsics;
    let t_count = spec.n_frames;

    let mut camera_trajectory = vec![Se3::identity()];
    for xi in smooth_increments(&mut rng, t_count - 1, spec.motion_magnitude) {
        let last = *camera_trajectory.last().expect("nonempty");
        camera_trajectory.push(se3_exp(&xi) * last);
    }

    let mut world_points = Vec::with_capacity(spec.n_tracks());
    let mut body_of_track = Vec::with_capacity(spec.n_tracks());
    for _ in 0..spec.n_static_tracks {
        world_points.push(sample_point(
            &mut rng,
            &k,
            spec.image_size,
            0.1,
            0.9,
            (3.0, 6.0),
        ));
        body_of_track.push(0);
    }

    let mut body_trajectories = vec![vec![Se3::identity(); t_count]];
    for b in 1..=spec.n_bodies {
        let center = sample_point(&mut rng, &k, spec.image_size, 0.3, 0.7, (2.5, 3.5));
        for _ in 0..spec.tracks_per_body {
            let offset = Vector3::from_fn(|_, _| rng.random_range(-0.5..0.5));
            world_points.push(center + offset);
            body_of_track.push(b);
        }
        let mut traj = vec![Se3::identity()];
        for xi in smooth_increments(&mut rng, t_count - 1, spec.motion_magnitude) {
            let last = *traj.last().expect("nonempty");
            let c_t = last.transform_point(&center);
            traj.push(conjugate_about(&c_t, &se3_exp(&xi)) * last);
        }
        body_trajectories.push(traj);
    }

    let n = world_points.len();
    let (w, h) = (spec.image_size.0 as f64, spec.image_size.1 as f64);
    let mut positions = Vec::with_capacity(n * t_count);
    let mut visibility = Vec::with_capacity(n * t_count);
    let mut gt_depths = Vec::with_capacity(n * t_count);
    for (xw, &b) in world_points.iter().zip(&body_of_track) {
        for t in 0..t_count {
            let xc =
                camera_trajectory[t].transform_point(&body_trajectories[b][t].transform_point(xw));
            let noise = Vector2::new(
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
            ) * spec.pixel_noise_sigma;
            gt_depths.push(xc.z.abs().max(1e-3));
            let p = if xc.z > MIN_DEPTH {
                project(&k, &xc).ok()
            } else {
                None
            };
            match p.map(|p| p + noise) {
                Some(p) if p.x >= 0.0 && p.x < w && p.y >= 0.0 && p.y < h => {
                    positions.push(p);
                    visibility.push(true);
                }
                _ => {
                    positions.push(Vector2::new(f64::NAN, f64::NAN));
                    visibility.push(false);
                }
            }
        }
    }

    let tracks = TrackSet::new(n, t_count, positions, visibility, k, spec.image_size)?;
    Ok(SyntheticScene {
        tracks,
        gt: GroundTruth {
            body_of_track,
            body_trajectories,
            camera_trajectory,
            gt_depths,
        },
    })
}

fn write_pose(out: &mut String, prefix: &str, x: &Se3) {
    let r = x.rotation.matrix();
    let _ = write!(out, "{prefix}");
    for row in 0..3 {
        for col in 0..3 {
            let _ = write!(out, " {}", r[(row, col)]);
        }
    }
    let t = x.translation;
    let _ = writeln!(out, " {} {} {}", t.x, t.y, t.z);
}

/// Ground-truth sidecar: `RTGT 1`, `N T B`, then `body i b`, `depth i t d`,
/// `camera t <R row-major> <t>` and `motion b t <R> <t>` records.
pub fn save_ground_truth(gt: &GroundTruth, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let n = gt.body_of_track.len();
    let t_count = gt.n_frames();
    let mut out = String::new();
    let _ = writeln!(out, "RTGT 1\n{n} {t_count} {}", gt.n_bodies());
    for (i, b) in gt.body_of_track.iter().enumerate() {
        let _ = writeln!(out, "body {i} {b}");
    }
    for i in 0..n {
        for t in 0..t_count {
            let _ = writeln!(out, "depth {i} {t} {}", gt.depth(i, t));
        }
    }
    for (t, x) in gt.camera_trajectory.iter().enumerate() {
        write_pose(&mut out, &format!("camera {t}"), x);
    }
    for (b, traj) in gt.body_trajectories.iter().enumerate() {
        for (t, x) in traj.iter().enumerate() {
            write_pose(&mut out, &format!("motion {b} {t}"), x);
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn parse_pose(no: usize, f: &[&str]) -> Result<Se3> {
    if f.len() != 12 {
        return Err(Error::parse(
            no,
            format!("pose needs 12 values, found {}", f.len()),
        ));
    }
    let v = f
        .iter()
        .map(|s| {
            s.parse::<f64>()
                .map_err(|e| Error::parse(no, format!("`{s}`: {e}")))
        })
        .collect::<Result<Vec<f64>>>()?;
    let r = Matrix3::from_row_slice(&v[..9]);
    let rotation = Rotation::from_matrix(r).map_err(|e| Error::parse(no, e.to_string()))?;
    Ok(Se3::new(rotation, Vector3::new(v[9], v[10], v[11])))
}

pub fn load_ground_truth(path: impl AsRef<Path>) -> Result<GroundTruth> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, l)) if l.trim() == "RTGT 1" => {}
        _ => return Err(Error::parse(1, "expected `RTGT 1`")),
    }
    let (no, header) = lines
        .next()
        .ok_or_else(|| Error::parse(2, "missing header"))?;
    let dims = header
        .split_whitespace()
        .map(|s| {
            s.parse::<usize>()
                .map_err(|e| Error::parse(no, format!("`{s}`: {e}")))
        })
        .collect::<Result<Vec<usize>>>()?;
    let [n, t_count, n_bodies] = dims[..] else {
        return Err(Error::parse(no, "header needs `N T B`"));
    };
    let mut body_of_track = vec![usize::MAX; n];
    let mut gt_depths = vec![f64::NAN; n * t_count];
    let mut camera: Vec<Option<Se3>> = vec![None; t_count];
    let mut motion: Vec<Vec<Option<Se3>>> = vec![vec![None; t_count]; n_bodies];

    for (no, line) in lines {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        let idx = |s: &str, bound: usize| -> Result<usize> {
            let v = s
                .parse::<usize>()
                .map_err(|e| Error::parse(no, format!("`{s}`: {e}")))?;
            if v >= bound {
                return Err(Error::parse(
                    no,
                    format!("index {v} out of range (< {bound})"),
                ));
            }
            Ok(v)
        };
        match (f[0], f.len()) {
            ("body", 3) => body_of_track[idx(f[1], n)?] = idx(f[2], n_bodies)?,
            ("depth", 4) => {
                let (i, t) = (idx(f[1], n)?, idx(f[2], t_count)?);
                gt_depths[i * t_count + t] = f[3]
                    .parse()
                    .map_err(|e| Error::parse(no, format!("`{}`: {e}", f[3])))?;
            }
            ("camera", 14) => camera[idx(f[1], t_count)?] = Some(parse_pose(no, &f[2..])?),
            ("motion", 15) => {
                let (b, t) = (idx(f[1], n_bodies)?, idx(f[2], t_count)?);
                motion[b][t] = Some(parse_pose(no, &f[3..])?);
            }
            (tag, _) => return Err(Error::parse(no, format!("malformed `{tag}` record"))),
        }
    }
    let missing = |what: &str| {
        Error::Validation(format!(
            "{}: incomplete ground truth ({what})",
            path.display()
        ))
    };
    if body_of_track.contains(&usize::MAX) {
        return Err(missing("body labels"));
    }
    if gt_depths.iter().any(|d| !(*d > 0.0)) {
        return Err(missing("depths"));
    }
    let camera_trajectory = camera
        .into_iter()
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| missing("camera"))?;
    let body_trajectories = motion
        .into_iter()
        .map(|m| m.into_iter().collect::<Option<Vec<_>>>())
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| missing("body motion"))?;
    Ok(GroundTruth {
        body_of_track,
        body_trajectories,
        camera_trajectory,
        gt_depths,
    })
}
