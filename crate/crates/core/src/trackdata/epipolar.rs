//! Epipolar static masking: RANSAC over normalized eight-point fundamental
//! matrix fits, scored by Sampson distance.
//!
//! Fits run in normalized camera coordinates (`K⁻¹·p`); distances are
//! converted back to squared pixels with `fx·fy` before thresholding.

use nalgebra::{Matrix3, SMatrix, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TrackSet;
use crate::error::{Error, Result};

/// Squared pixels.
pub const DEFAULT_SAMPSON_THRESHOLD: f64 = 2.0;

const MAX_ITERATIONS: usize = 2000;
const CONFIDENCE: f64 = 0.99;
/// Hypotheses are scored with this fraction of the classification threshold.
const SCORING_FRACTION: f64 = 0.5;

/// First-order geometric error of `x' ↔ x` under `F`, in the units of the
/// (homogeneous, `z = 1`) input coordinates squared.
pub fn sampson_distance(f: &Matrix3<f64>, x: &Vector3<f64>, xp: &Vector3<f64>) -> f64 {
    let fx = f * x;
    let ftx = f.transpose() * xp;
    let e = xp.dot(&fx);
    let denom = fx.x * fx.x + fx.y * fx.y + ftx.x * ftx.x + ftx.y * ftx.y;
    if e == 0.0 {
        0.0
    } else if denom > 0.0 {
        e * e / denom
    } else {
        f64::INFINITY
    }
}

fn hartley_transform(pts: &[Vector3<f64>]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let (mx, my) = pts.iter().fold((0.0, 0.0), |(a, b), p| (a + p.x, b + p.y));
    let (mx, my) = (mx / n, my / n);
    let mean_dist = pts
        .iter()
        .map(|p| ((p.x - mx).powi(2) + (p.y - my).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    let s = if mean_dist > 0.0 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * mx, 0.0, s, -s * my, 0.0, 0.0, 1.0)
}

/// Least-squares rank-2 fundamental matrix from `≥ 8` correspondences
/// `x'ᵀ·F·x = 0`. Returns `None` for degenerate input.
pub fn eight_point(x: &[Vector3<f64>], xp: &[Vector3<f64>]) -> Option<Matrix3<f64>> {
    if x.len() < 8 || x.len() != xp.len() {
        return None;
    }
    let t1 = hartley_transform(x);
    let t2 = hartley_transform(xp);
    let mut ata = SMatrix::<f64, 9, 9>::zeros();
    for (a, b) in x.iter().zip(xp) {
        let (p, q) = (t1 * a, t2 * b);
        let row = SMatrix::<f64, 9, 1>::from_column_slice(&[
            q.x * p.x,
            q.x * p.y,
            q.x,
            q.y * p.x,
            q.y * p.y,
            q.y,
            p.x,
            p.y,
            1.0,
        ]);
        ata += row * row.transpose();
    }
    let eig = ata.symmetric_eigen();
    let (min_idx, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    let v = eig.eigenvectors.column(min_idx);
    let f_hat = Matrix3::from_row_slice(v.as_slice());
    if !f_hat.iter().all(|c| c.is_finite()) {
        return None;
    }
    let mut svd = f_hat.svd(true, true);
    svd.singular_values[2] = 0.0;
    let f_rank2 = svd.recompose().ok()?;
    let f = t2.transpose() * f_rank2 * t1;
    let norm = f.norm();
    (norm > 0.0 && norm.is_finite()).then(|| f / norm)
}

/// Nearest essential matrix: singular values `(1, 1, 0)`.
fn to_essential(f: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    let mut svd = f.svd(true, true);
    svd.singular_values = nalgebra::Vector3::new(1.0, 1.0, 0.0);
    svd.recompose().ok()
}

/// MSAC: hypotheses are ranked by the truncated cost `Σ min(d, threshold)`
/// rather than by inlier count.
fn ransac(
    x: &[Vector3<f64>],
    xp: &[Vector3<f64>],
    pixel_scale: f64,
    threshold: f64,
    seed: u64,
) -> Option<Matrix3<f64>> {
    let n = x.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let score = |f: &Matrix3<f64>| {
        x.iter()
            .zip(xp)
            .fold((0.0, 0usize), |(cost, inliers), (a, b)| {
                let d = sampson_distance(f, a, b) * pixel_scale;
                if d < threshold {
                    (cost + d, inliers + 1)
                } else {
                    (cost + threshold, inliers)
                }
            })
    };
    let mut best: Option<(f64, Matrix3<f64>)> = None;
    let mut needed = MAX_ITERATIONS;
    let mut iter = 0;
    while iter < needed.min(MAX_ITERATIONS) {
        iter += 1;
        let idx = sample(&mut rng, n, 8);
        let (sx, sxp): (Vec<_>, Vec<_>) = idx.iter().map(|i| (x[i], xp[i])).unzip();
        let Some(f) = eight_point(&sx, &sxp).and_then(|f| to_essential(&f)) else {
            continue;
        };
        let (cost, inliers) = score(&f);
        if best.as_ref().is_none_or(|(b, _)| cost < *b) {
            best = Some((cost, f));
            let w = inliers as f64 / n as f64;
            let p_good = w.powi(8);
            needed = if p_good >= 1.0 - 1e-12 {
                0
            } else if p_good <= 0.0 {
                MAX_ITERATIONS
            } else {
                ((1.0 - CONFIDENCE).ln() / (1.0 - p_good).ln()).ceil() as usize
            };
        }
    }
    let (cost, f) = best?;
    // Refit on the consensus set.
    let (ix, ixp): (Vec<_>, Vec<_>) = x
        .iter()
        .zip(xp)
        .filter(|(a, b)| sampson_distance(&f, a, b) * pixel_scale < threshold)
        .map(|(a, b)| (*a, *b))
        .unzip();
    match eight_point(&ix, &ixp).and_then(|f| to_essential(&f)) {
        Some(refit) if score(&refit).0 <= cost => Some(refit),
        _ => Some(f),
    }
}

/// Marks tracks whose frame-pair correspondence agrees with the dominant
/// epipolar geometry (Sampson distance below `threshold` px²).
pub fn sampson_static_mask(
    tracks: &TrackSet,
    frame_pair: (usize, usize),
    threshold: f64,
) -> Result<Vec<bool>> {
    let (t, u) = frame_pair;
    if t >= tracks.n_frames() || u >= tracks.n_frames() {
        return Err(Error::Validation(format!(
            "frame pair ({t}, {u}) out of range"
        )));
    }
    let joint = tracks.joint_visible(t, u);
    if joint.len() < 8 {
        return Err(Error::UnderdeterminedEpipolar(joint.len()));
    }
    let x: Vec<Vector3<f64>> = joint.iter().map(|&i| tracks.ray(i, t)).collect();
    let xp: Vec<Vector3<f64>> = joint.iter().map(|&i| tracks.ray(i, u)).collect();
    let k = &tracks.intrinsics;
    let pixel_scale = k.fx * k.fy;
    let seed = (joint.len() as u64) << 40
        ^ (tracks.n_tracks() as u64) << 20
        ^ ((t as u64) << 10 | u as u64);
    let mut mask = vec![false; tracks.n_tracks()];
    if let Some(f) = ransac(&x, &xp, pixel_scale, threshold * SCORING_FRACTION, seed) {
        for (j, &i) in joint.iter().enumerate() {
            mask[i] = sampson_distance(&f, &x[j], &xp[j]) * pixel_scale < threshold;
        }
    }
    Ok(mask)
}

/// Forces full rigidity between static tracks: when the query track is
/// static, every static entry becomes 1; otherwise the soft weights pass
/// through unchanged.
pub fn merge_static_override(soft: &[f64], static_mask: &[bool], query: usize) -> Vec<f64> {
    let query_static = static_mask.get(query).copied().unwrap_or(false);
    soft.iter()
        .zip(static_mask)
        .map(|(&w, &s)| if query_static && s { 1.0 } else { w })
        .collect()
}
