//! Grouping of per-track pose trajectories into rigid-motion clusters.

use nalgebra::{DVector, Vector6};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{project, se3_exp, se3_log, Se3};
use crate::gradient::ParamVector;
use crate::optimizer::Se3Field;
use crate::trackdata::TrackSet;

pub const DEFAULT_CLUSTERS: usize = 4;
pub const MAX_KMEANS_ITERATIONS: usize = 200;
/// Clusters holding less than this fraction of the tracks are dissolved.
pub const PRUNE_FRACTION: f64 = 0.02;
/// Per-observation cap on the reprojection error in [`MotionClusters::inlier_loss`].
pub const INLIER_TRUNCATION_PX: f64 = 8.0;

#[derive(Debug, Clone, PartialEq)]
pub struct MotionClusters {
    /// Cluster label per track.
    pub assignment: Vec<usize>,
    /// Per-frame-pair mean transform of each cluster.
    pub centroids: Vec<Vec<Se3>>,
    /// Mean reprojection error (pixels, truncated) of all visible tracks
    /// under each centroid trajectory.
    pub inlier_loss: Vec<f64>,
}

impl MotionClusters {
    pub fn n_clusters(&self) -> usize {
        self.centroids.len()
    }

    pub fn members(&self, label: usize) -> usize {
        self.assignment.iter().filter(|&&a| a == label).count()
    }

    /// Minimum inlier loss; ties go to the larger cluster, then the lower label.
    pub fn selected(&self) -> usize {
        (0..self.n_clusters())
            .min_by(|&a, &b| {
                self.inlier_loss[a]
                    .total_cmp(&self.inlier_loss[b])
                    .then(self.members(b).cmp(&self.members(a)))
                    .then(a.cmp(&b))
            })
            .expect("at least one cluster")
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median of the visible depths; 1 when nothing is visible.
fn median_depth(tracks: &TrackSet, theta: &ParamVector) -> f64 {
    let d: Vec<f64> = (0..tracks.n_tracks())
        .flat_map(|i| (0..tracks.n_frames()).map(move |t| (i, t)))
        .filter(|&(i, t)| tracks.is_visible(i, t))
        .map(|(i, t)| theta.depth(i, t))
        .collect();
    if d.is_empty() {
        1.0
    } else {
        median(d)
    }
}

fn feature(x: &Se3, depth_scale: f64) -> Vector6<f64> {
    let mut xi = se3_log(x);
    for k in 3..6 {
        xi[k] /= depth_scale;
    }
    xi
}

fn sq_dist(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm_squared()
}

fn nearest(x: &DVector<f64>, centers: &[DVector<f64>]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (c, m) in centers.iter().enumerate() {
        let d = sq_dist(x, m);
        if d < best.1 {
            best = (c, d);
        }
    }
    best.0
}

fn kmeans_pp(points: &[DVector<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<DVector<f64>> {
    let first = WeightedIndex::new(vec![1.0; points.len()])
        .expect("nonempty")
        .sample(rng);
    let mut centers = vec![points[first].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(rng),
            // Every point coincides with a center already.
            Err(_) => 0,
        };
        centers.push(points[next].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, centers.last().unwrap()));
        }
    }
    centers
}

/// Lloyd iterations; returns the assignment.
fn lloyd(points: &[DVector<f64>], centers: &mut [DVector<f64>]) -> Vec<usize> {
    let mut assign: Vec<usize> = points.iter().map(|p| nearest(p, centers)).collect();
    for _ in 0..MAX_KMEANS_ITERATIONS {
        update_centers(points, &assign, centers);
        let next: Vec<usize> = points.iter().map(|p| nearest(p, centers)).collect();
        if next == assign {
            break;
        }
        assign = next;
    }
    assign
}

/// Mean of each cluster's points; empty clusters keep their center.
fn update_centers(points: &[DVector<f64>], assign: &[usize], centers: &mut [DVector<f64>]) {
    for (c, center) in centers.iter_mut().enumerate() {
        let mut sum = DVector::zeros(center.len());
        let mut n = 0;
        for (p, &a) in points.iter().zip(assign) {
            if a == c {
                sum += p;
                n += 1;
            }
        }
        if n > 0 {
            *center = sum / n as f64;
        }
    }
}

/// k-means on concatenated per-pair log coordinates of every track with a
/// full trajectory. Translations are divided by the median scene depth.
/// Tracks with missing pairs join the nearest centroid on the pairs they
/// have; tracks with none join the largest cluster.
pub fn cluster_trajectories(
    field: &Se3Field,
    tracks: &TrackSet,
    theta: &ParamVector,
    k: usize,
    seed: u64,
) -> Result<MotionClusters> {
    let n = field.n_tracks();
    let n_pairs = field.n_pairs();
    if tracks.n_tracks() != n || theta.layout.n_tracks != n {
        return Err(Error::Validation(
            "field, tracks and parameters disagree on the track count".into(),
        ));
    }
    if k == 0 {
        return Err(Error::Validation("cluster count must be >= 1".into()));
    }
    let scale = median_depth(tracks, theta);
    let complete: Vec<usize> = (0..n).filter(|&i| field.is_complete(i)).collect();
    if k > complete.len() {
        return Err(Error::TooManyClusters {
            requested: k,
            available: complete.len(),
        });
    }
    let feat = |i: usize| -> DVector<f64> {
        DVector::from_iterator(
            6 * n_pairs,
            (0..n_pairs).flat_map(|t| {
                feature(field.get(i, t).unwrap(), scale)
                    .iter()
                    .copied()
                    .collect::<Vec<_>>()
            }),
        )
    };
    let mut order: Vec<(usize, DVector<f64>)> = complete.iter().map(|&i| (i, feat(i))).collect();
    // Canonical order makes the result independent of track numbering.
    order.sort_by(|a, b| {
        a.1.iter()
            .zip(b.1.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let points: Vec<DVector<f64>> = order.iter().map(|(_, f)| f.clone()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = kmeans_pp(&points, k, &mut rng);
    let mut assign = lloyd(&points, &mut centers);

    let min_members = (PRUNE_FRACTION * n as f64).ceil() as usize;
    let counts: Vec<usize> = (0..k)
        .map(|c| assign.iter().filter(|&&a| a == c).count())
        .collect();
    let mut keep: Vec<usize> = (0..k)
        .filter(|&c| counts[c] >= min_members && counts[c] > 0)
        .collect();
    if keep.is_empty() {
        keep.push(
            (0..k)
                .max_by_key(|&c| (counts[c], std::cmp::Reverse(c)))
                .unwrap(),
        );
    }
    if keep.len() < k {
        let mut kept: Vec<DVector<f64>> = keep.iter().map(|&c| centers[c].clone()).collect();
        assign = points.iter().map(|p| nearest(p, &kept)).collect();
        update_centers(&points, &assign, &mut kept);
        centers = kept;
    }

    // Relabel by first appearance in canonical order.
    let mut relabel = vec![usize::MAX; centers.len()];
    let mut next = 0;
    for &a in &assign {
        if relabel[a] == usize::MAX {
            relabel[a] = next;
            next += 1;
        }
    }
    let mut sorted_centers = vec![DVector::zeros(6 * n_pairs); next];
    for (old, &new) in relabel.iter().enumerate() {
        if new != usize::MAX {
            sorted_centers[new] = centers[old].clone();
        }
    }
    let centers = sorted_centers;

    let mut assignment = vec![usize::MAX; n];
    for ((i, _), &a) in order.iter().zip(&assign) {
        assignment[*i] = relabel[a];
    }
    let sizes: Vec<usize> = (0..centers.len())
        .map(|c| assignment.iter().filter(|&&a| a == c).count())
        .collect();
    let largest = (0..centers.len())
        .max_by_key(|&c| (sizes[c], std::cmp::Reverse(c)))
        .unwrap();
    for i in 0..n {
        if assignment[i] != usize::MAX {
            continue;
        }
        let avail: Vec<usize> = (0..n_pairs)
            .filter(|&t| field.get(i, t).is_some())
            .collect();
        assignment[i] = if avail.is_empty() {
            largest
        } else {
            let mut best = (largest, f64::INFINITY);
            for (c, m) in centers.iter().enumerate() {
                let d: f64 = avail
                    .iter()
                    .map(|&t| {
                        let f = feature(field.get(i, t).unwrap(), scale);
                        (0..6).map(|r| (f[r] - m[6 * t + r]).powi(2)).sum::<f64>()
                    })
                    .sum();
                if d < best.1 {
                    best = (c, d);
                }
            }
            best.0
        };
    }

    let centroids: Vec<Vec<Se3>> = centers
        .iter()
        .map(|m| {
            (0..n_pairs)
                .map(|t| {
                    let mut xi = Vector6::from_fn(|r, _| m[6 * t + r]);
                    for r in 3..6 {
                        xi[r] *= scale;
                    }
                    se3_exp(&xi)
                })
                .collect()
        })
        .collect();
    let inlier_loss = centroids
        .iter()
        .map(|c| trajectory_loss(c, tracks, theta))
        .collect();
    Ok(MotionClusters {
        assignment,
        centroids,
        inlier_loss,
    })
}

/// Mean truncated pixel error of every jointly visible track pair when moved
/// by `traj`.
fn trajectory_loss(traj: &[Se3], tracks: &TrackSet, theta: &ParamVector) -> f64 {
    let k = tracks.intrinsics;
    let (mut sum, mut count) = (0.0, 0usize);
    for (t, x) in traj.iter().enumerate() {
        for i in tracks.joint_visible(t, t + 1) {
            let p = x.transform_point(&(tracks.ray(i, t) * theta.depth(i, t)));
            let err = match project(&k, &p) {
                Ok(q) => (q - tracks.position(i, t + 1))
                    .norm()
                    .min(INLIER_TRUNCATION_PX),
                Err(_) => INLIER_TRUNCATION_PX,
            };
            sum += err;
            count += 1;
        }
    }
    if count == 0 {
        f64::INFINITY
    } else {
        sum / count as f64
    }
}

/// World-to-camera poses of the selected cluster, composed from the
/// identity at frame 0.
pub fn extract_camera_trajectory(clusters: &MotionClusters) -> Vec<Se3> {
    let steps = &clusters.centroids[clusters.selected()];
    let mut traj = Vec::with_capacity(steps.len() + 1);
    traj.push(Se3::identity());
    for x in steps {
        let last = *traj.last().unwrap();
        traj.push(*x * last);
    }
    traj
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Intrinsics;
    use crate::gradient::ParamLayout;
    use nalgebra::{Vector2, Vector3};

    fn motion(seed: f64) -> Se3 {
        se3_exp(&Vector6::new(
            0.01 * seed,
            -0.02,
            0.015 * seed,
            0.05,
            -0.03 * seed,
            0.02,
        ))
    }

    /// `groups[i]` picks the per-pair motion of track `i`.
    fn setup(groups: &[usize], n_pairs: usize) -> (Se3Field, TrackSet, ParamVector) {
        let n = groups.len();
        let mut field = Se3Field::new(n, n_pairs);
        for (i, &g) in groups.iter().enumerate() {
            for t in 0..n_pairs {
                field.set(i, t, Some(motion(1.0 + g as f64 * 3.0 + t as f64 * 0.5)));
            }
        }
        let k = Intrinsics::new(100.0, 100.0, 50.0, 50.0).unwrap();
        let t_count = n_pairs + 1;
        let pos = (0..n * t_count)
            .map(|j| Vector2::new(10.0 + (j % 37) as f64, 10.0 + (j % 23) as f64))
            .collect();
        let ts = TrackSet::new(n, t_count, pos, vec![true; n * t_count], k, (100, 100)).unwrap();
        let theta = ParamVector::initial(ParamLayout::new(n, t_count, 2), 0);
        (field, ts, theta)
    }

    #[test]
    fn single_shared_trajectory() {
        let (field, ts, theta) = setup(&[0; 10], 3);
        let c = cluster_trajectories(&field, &ts, &theta, 1, 0).unwrap();
        assert_eq!(c.assignment, vec![0; 10]);
        for t in 0..3 {
            let d = se3_log(&c.centroids[0][t]) - se3_log(field.get(0, t).unwrap());
            assert!(d.amax() < 1e-9);
        }
    }

    #[test]
    fn two_exact_groups_are_recovered() {
        let groups = [0, 1, 1, 0, 0, 1, 0, 1, 1, 0];
        let (field, ts, theta) = setup(&groups, 2);
        let c = cluster_trajectories(&field, &ts, &theta, 2, 7).unwrap();
        for i in 0..10 {
            for j in 0..10 {
                assert_eq!(groups[i] == groups[j], c.assignment[i] == c.assignment[j]);
            }
        }
    }

    #[test]
    fn too_many_clusters() {
        let (mut field, ts, theta) = setup(&[0, 1, 0, 1, 0], 2);
        field.set(4, 1, None);
        let err = cluster_trajectories(&field, &ts, &theta, 5, 0).unwrap_err();
        assert!(matches!(
            err,
            Error::TooManyClusters {
                requested: 5,
                available: 4
            }
        ));
    }

    #[test]
    fn incomplete_tracks_join_nearest_cluster() {
        let groups = [0, 0, 0, 1, 1, 1, 1];
        let (mut field, ts, theta) = setup(&groups, 2);
        field.set(6, 0, None);
        let c = cluster_trajectories(&field, &ts, &theta, 2, 1).unwrap();
        assert_eq!(c.assignment[6], c.assignment[3]);
        assert_ne!(c.assignment[6], c.assignment[0]);
    }

    #[test]
    fn small_clusters_are_pruned() {
        let mut groups = vec![0; 60];
        groups[59] = 1;
        let (field, ts, theta) = setup(&groups, 2);
        let c = cluster_trajectories(&field, &ts, &theta, 2, 3).unwrap();
        assert_eq!(c.n_clusters(), 1);
        assert!(c.assignment.iter().all(|&a| a == 0));
    }

    #[test]
    fn tie_break_prefers_larger_then_lower_label() {
        let c = MotionClusters {
            assignment: vec![0, 1, 1, 2, 2],
            centroids: vec![vec![Se3::identity()]; 3],
            inlier_loss: vec![1.0, 0.5, 0.5],
        };
        assert_eq!(c.selected(), 1);
        let c = MotionClusters {
            assignment: vec![0, 1, 2, 2, 2],
            ..c
        };
        assert_eq!(c.selected(), 2);
    }

    #[test]
    fn camera_trajectory_composes_from_identity() {
        let x = motion(1.0);
        let c = MotionClusters {
            assignment: vec![0],
            centroids: vec![vec![x, x]],
            inlier_loss: vec![0.0],
        };
        let traj = extract_camera_trajectory(&c);
        assert_eq!(traj.len(), 3);
        assert_eq!(traj[0], Se3::identity());
        let p = Vector3::new(0.3, -0.2, 4.0);
        assert!(
            (traj[2].transform_point(&p) - x.transform_point(&x.transform_point(&p))).amax()
                < 1e-12
        );
    }

    #[test]
    fn permuting_tracks_permutes_assignment() {
        let groups = [0, 1, 2, 1, 0, 2, 2, 1, 0, 0, 1, 2];
        let (field, ts, theta) = setup(&groups, 2);
        let a = cluster_trajectories(&field, &ts, &theta, 3, 11).unwrap();
        let perm: Vec<usize> = (0..12).map(|i| (i * 5 + 3) % 12).collect();
        let pg: Vec<usize> = perm.iter().map(|&i| groups[i]).collect();
        let (pfield, pts, ptheta) = setup(&pg, 2);
        let b = cluster_trajectories(&pfield, &pts, &ptheta, 3, 11).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            assert_eq!(b.assignment[new], a.assignment[old]);
        }
        for (ca, cb) in a.centroids.iter().zip(&b.centroids) {
            for (x, y) in ca.iter().zip(cb) {
                assert!((se3_log(x) - se3_log(y)).amax() < 1e-10);
            }
        }
    }
}
