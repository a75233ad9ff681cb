//! Weighted least-squares rigid registration.
//!
//! For weights `wᵢ`, the optimal pose maps the weighted source centroid onto
//! the weighted target centroid and takes the rotation maximizing
//! `tr(Rᵀ·M)` for the cross-covariance `M = Σ wᵢ (yᵢ − ȳ)(xᵢ − x̄)ᵀ`, i.e. the
//! special-orthogonal polar factor of `M`.
//!
//! The optimization path works on raw weighted moments (`Σw`, `Σw·x`,
//! `Σw·y`, `Σw·y·xᵀ`) so that per-query weight vectors reduce to one matrix
//! product, and differentiates the rotation implicitly through the
//! stationarity condition `Rᵀ·M = Mᵀ·R`.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{hat, vee, Rotation, Se3};

/// Correspondences at or below this weight are absent for rank checks.
pub const WEIGHT_FLOOR: f64 = 1e-8;
/// Singular value ratio below which the strict solver rejects the support.
pub const DEGENERATE_RATIO: f64 = 1e-6;
/// Singular value ratio below which the relaxed solver damps `M`.
pub const DAMPING_RATIO: f64 = 1e-3;
pub const DAMPING: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedCorrespondences {
    pub source: Vec<Vector3<f64>>,
    pub target: Vec<Vector3<f64>>,
    pub weights: Vec<f64>,
}

impl WeightedCorrespondences {
    pub fn new(
        source: Vec<Vector3<f64>>,
        target: Vec<Vector3<f64>>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        if source.len() != target.len() || source.len() != weights.len() {
            return Err(Error::Validation(format!(
                "mismatched correspondence lengths: {} source, {} target, {} weights",
                source.len(),
                target.len(),
                weights.len()
            )));
        }
        if let Some(i) = weights.iter().position(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Validation(format!(
                "weight {i} is negative or non-finite"
            )));
        }
        Ok(WeightedCorrespondences {
            source,
            target,
            weights,
        })
    }

    pub fn uniform(source: Vec<Vector3<f64>>, target: Vec<Vector3<f64>>) -> Result<Self> {
        let w = vec![1.0; source.len()];
        Self::new(source, target, w)
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    pub fn effective_count(&self) -> usize {
        self.weights.iter().filter(|&&w| w > WEIGHT_FLOOR).count()
    }
}

/// Rotation maximizing `tr(Rᵀ·M)` with the data needed to differentiate it.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PolarFactor {
    pub rotation: Matrix3<f64>,
    v: Matrix3<f64>,
    /// Eigenvalues of `tr(S)·I − S` for `S = Rᵀ·M`, in the `v` basis.
    lambda: Vector3<f64>,
    /// Singular values of `M`, descending.
    sigma: Vector3<f64>,
}

impl PolarFactor {
    /// `None` when `m` has non-finite entries.
    pub fn new(m: &Matrix3<f64>) -> Option<Self> {
        if !m.iter().all(|c| c.is_finite()) {
            return None;
        }
        let svd = m.svd(true, true);
        let (u, v_t) = (svd.u?, svd.v_t?);
        let sigma = svd.singular_values;
        let sign = if (u * v_t).determinant() < 0.0 {
            -1.0
        } else {
            1.0
        };
        let ds = Vector3::new(sigma[0], sigma[1], sign * sigma[2]);
        let d = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, sign));
        let trace = ds.sum();
        Some(PolarFactor {
            rotation: u * d * v_t,
            v: v_t.transpose(),
            lambda: Vector3::new(trace - ds[0], trace - ds[1], trace - ds[2]),
            sigma,
        })
    }

    /// Pulls `∂L/∂R` back to `∂L/∂M`.
    ///
    /// With `dR = R·[ω]×`, the stationarity of `S = Rᵀ·M` gives
    /// `(tr(S)·I − S)·ω = vee(Rᵀ·dM − dMᵀ·R)`. Small eigenvalues of that
    /// system are Tikhonov-damped.
    pub fn backward(&self, g_rot: &Matrix3<f64>) -> Matrix3<f64> {
        let a = self.rotation.transpose() * g_rot;
        let g_omega = vee(&(a - a.transpose()));
        let mu = 1e-6 * self.sigma[0].max(f64::MIN_POSITIVE);
        let coeff = self.v.transpose() * g_omega;
        let scaled = Vector3::from_fn(|k, _| {
            let l = self.lambda[k];
            coeff[k] * l / (l * l + mu * mu)
        });
        let z = self.v * scaled;
        self.rotation * hat(&z)
    }
}

/// Weighted moments `(Σw, Σw·x, Σw·y, Σw·y·xᵀ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub s0: f64,
    pub sx: Vector3<f64>,
    pub sy: Vector3<f64>,
    pub sxy: Matrix3<f64>,
}

/// Gradient with respect to each moment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentsGrad {
    pub s0: f64,
    pub sx: Vector3<f64>,
    pub sy: Vector3<f64>,
    pub sxy: Matrix3<f64>,
}

impl Moments {
    /// Packs into `[Σw, Σw·x, Σw·y, Σw·y·xᵀ (row-major)]`.
    pub const WIDTH: usize = 16;

    pub fn from_slice(s: &[f64]) -> Self {
        Moments {
            s0: s[0],
            sx: Vector3::new(s[1], s[2], s[3]),
            sy: Vector3::new(s[4], s[5], s[6]),
            sxy: Matrix3::from_row_slice(&s[7..16]),
        }
    }

    /// Per-correspondence feature row whose weighted sum gives the moments.
    pub fn feature(x: &Vector3<f64>, y: &Vector3<f64>) -> [f64; 16] {
        let mut f = [0.0; 16];
        f[0] = 1.0;
        f[1..4].copy_from_slice(x.as_slice());
        f[4..7].copy_from_slice(y.as_slice());
        for a in 0..3 {
            for b in 0..3 {
                f[7 + 3 * a + b] = y[a] * x[b];
            }
        }
        f
    }

    pub fn cross_covariance(&self) -> Matrix3<f64> {
        self.sxy - self.sy * self.sx.transpose() / self.s0
    }
}

impl MomentsGrad {
    pub fn to_array(&self) -> [f64; 16] {
        let mut f = [0.0; 16];
        f[0] = self.s0;
        f[1..4].copy_from_slice(self.sx.as_slice());
        f[4..7].copy_from_slice(self.sy.as_slice());
        for a in 0..3 {
            for b in 0..3 {
                f[7 + 3 * a + b] = self.sxy[(a, b)];
            }
        }
        f
    }
}

/// Pose solved from moments under the relaxed (optimization) policy.
#[derive(Debug, Clone, Copy)]
pub struct MomentSolve {
    pub pose: Se3,
    pub damped: bool,
    polar: PolarFactor,
    moments: Moments,
    mu_x: Vector3<f64>,
}

impl MomentSolve {
    /// Never fails on degenerate support: near-rank-deficient
    /// cross-covariances get `DAMPING·I` added. Returns `None` for
    /// non-finite input or zero total weight.
    pub fn new(moments: &Moments) -> Option<Self> {
        if !(moments.s0 > 0.0) {
            return None;
        }
        let m = moments.cross_covariance();
        let mut polar = PolarFactor::new(&m)?;
        let sv = polar.sigma;
        let damped = !(sv[1] >= DAMPING_RATIO * sv[0]) || sv[0] == 0.0;
        if damped {
            polar = PolarFactor::new(&(m + Matrix3::identity() * DAMPING))?;
        }
        let mu_x = moments.sx / moments.s0;
        let mu_y = moments.sy / moments.s0;
        let translation = mu_y - polar.rotation * mu_x;
        Some(MomentSolve {
            pose: Se3::new(Rotation::from_matrix_unchecked(polar.rotation), translation),
            damped,
            polar,
            moments: *moments,
            mu_x,
        })
    }

    pub fn backward(&self, g_rot: &Matrix3<f64>, g_trans: &Vector3<f64>) -> MomentsGrad {
        let Moments { s0, sx, sy, .. } = self.moments;
        let r = self.polar.rotation;
        // t = μy − R·μx
        let g_mu_y = *g_trans;
        let g_mu_x = -(r.transpose() * g_trans);
        let g_r = g_rot - g_trans * self.mu_x.transpose();
        let g_m = self.polar.backward(&g_r);
        // M = Sxy − Sy·Sxᵀ/S0, μ = S/S0
        MomentsGrad {
            sxy: g_m,
            sy: -(g_m * sx) / s0 + g_mu_y / s0,
            sx: -(g_m.transpose() * sy) / s0 + g_mu_x / s0,
            s0: (g_m.component_mul(&(sy * sx.transpose()))).sum() / (s0 * s0)
                - g_mu_y.dot(&sy) / (s0 * s0)
                - g_mu_x.dot(&sx) / (s0 * s0),
        }
    }
}

fn weighted_centroids(c: &WeightedCorrespondences) -> (f64, Vector3<f64>, Vector3<f64>) {
    let mut total = 0.0;
    let mut sx = Vector3::zeros();
    let mut sy = Vector3::zeros();
    for ((x, y), &w) in c.source.iter().zip(&c.target).zip(&c.weights) {
        total += w;
        sx += x * w;
        sy += y * w;
    }
    (total, sx / total, sy / total)
}

/// `argmin_X Σ wᵢ‖targetᵢ − X(sourceᵢ)‖²` over rigid transforms.
///
/// Fails with fewer than three correspondences above [`WEIGHT_FLOOR`] or
/// when the weighted source support is collinear.
pub fn solve_weighted_procrustes(c: &WeightedCorrespondences) -> Result<Se3> {
    let effective = c.effective_count();
    if effective < 3 {
        return Err(Error::UnderdeterminedPose(effective));
    }
    let (_, mu_x, mu_y) = weighted_centroids(c);

    let mut scatter = Matrix3::zeros();
    let mut m = Matrix3::zeros();
    for ((x, y), &w) in c.source.iter().zip(&c.target).zip(&c.weights) {
        let (xc, yc) = (x - mu_x, y - mu_y);
        if w > WEIGHT_FLOOR {
            scatter += xc * xc.transpose() * w;
        }
        m += yc * xc.transpose() * w;
    }
    // Singular values of the weighted point matrix are √eig(scatter).
    let mut eig: Vec<f64> = scatter
        .symmetric_eigenvalues()
        .iter()
        .map(|e| e.max(0.0).sqrt())
        .collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    let ratio = if eig[0] > 0.0 { eig[1] / eig[0] } else { 0.0 };
    if !(ratio >= DEGENERATE_RATIO) {
        return Err(Error::DegenerateConfiguration(ratio));
    }
    let polar = PolarFactor::new(&m)
        .ok_or_else(|| Error::Validation("non-finite correspondences".into()))?;
    let rotation = Rotation::from_matrix_unchecked(polar.rotation);
    Ok(Se3::new(rotation, mu_y - polar.rotation * mu_x))
}

/// Solver used inside optimization: degenerate support is damped instead of
/// rejected. Still requires some positive weight.
pub fn solve_weighted_procrustes_relaxed(c: &WeightedCorrespondences) -> Result<Se3> {
    let mut acc = [0.0; 16];
    for ((x, y), &w) in c.source.iter().zip(&c.target).zip(&c.weights) {
        for (a, f) in acc.iter_mut().zip(Moments::feature(x, y)) {
            *a += w * f;
        }
    }
    MomentSolve::new(&Moments::from_slice(&acc))
        .map(|s| s.pose)
        .ok_or(Error::UnderdeterminedPose(c.effective_count()))
}

/// `Σᵢ wᵢ‖targetᵢ − X(sourceᵢ)‖²`.
pub fn residual(c: &WeightedCorrespondences, x: &Se3) -> f64 {
    c.source
        .iter()
        .zip(&c.target)
        .zip(&c.weights)
        .map(|((s, t), &w)| w * (t - x.transform_point(s)).norm_squared())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::se3_exp;
    use nalgebra::Vector6;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)))
            .collect()
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Se3 {
        se3_exp(&Vector6::from_fn(|k, _| {
            if k < 3 {
                rng.random_range(-1.5..1.5)
            } else {
                rng.random_range(-3.0..3.0)
            }
        }))
    }

    fn pose_error(a: &Se3, b: &Se3) -> f64 {
        (a.rotation.matrix() - b.rotation.matrix())
            .amax()
            .max((a.translation - b.translation).amax())
    }

    #[test]
    fn identity_and_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let src = random_points(&mut rng, 10);
        let c = WeightedCorrespondences::uniform(src.clone(), src.clone()).unwrap();
        assert!(pose_error(&solve_weighted_procrustes(&c).unwrap(), &Se3::identity()) < 1e-9);
        let shift = Vector3::new(1.0, 2.0, 3.0);
        let tgt = src.iter().map(|p| p + shift).collect();
        let c = WeightedCorrespondences::uniform(src, tgt).unwrap();
        let x = solve_weighted_procrustes(&c).unwrap();
        assert!(pose_error(&x, &Se3::from_translation(shift)) < 1e-9);
    }

    #[test]
    fn recovers_random_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let src = random_points(&mut rng, 20);
            let x = random_pose(&mut rng);
            let tgt = src.iter().map(|p| x.transform_point(p)).collect();
            let c = WeightedCorrespondences::uniform(src, tgt).unwrap();
            assert!(pose_error(&solve_weighted_procrustes(&c).unwrap(), &x) < 1e-9);
        }
    }

    #[test]
    fn zero_weight_excludes_corrupted_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let src = random_points(&mut rng, 12);
        let x = random_pose(&mut rng);
        let tgt: Vec<_> = src.iter().map(|p| x.transform_point(p)).collect();
        let mut noisy_tgt = tgt.clone();
        for p in noisy_tgt.iter_mut() {
            *p += Vector3::from_fn(|_, _| rng.random_range(-0.05..0.05));
        }
        let mut weights: Vec<f64> = (0..12).map(|_| rng.random_range(0.1..2.0)).collect();
        weights[4] = 0.0;
        let clean =
            WeightedCorrespondences::new(src.clone(), noisy_tgt.clone(), weights.clone()).unwrap();
        noisy_tgt[4] += Vector3::new(100.0, 100.0, 100.0);
        let corrupted = WeightedCorrespondences::new(src, noisy_tgt, weights).unwrap();
        let a = solve_weighted_procrustes(&clean).unwrap();
        let b = solve_weighted_procrustes(&corrupted).unwrap();
        assert!(pose_error(&a, &b) < 1e-12);
    }

    #[test]
    fn residual_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let src = random_points(&mut rng, 8);
        let x = random_pose(&mut rng);
        let tgt: Vec<_> = src.iter().map(|p| x.transform_point(p)).collect();
        let c = WeightedCorrespondences::uniform(src.clone(), tgt.clone()).unwrap();
        assert!(residual(&c, &x) < 1e-20);
        let zero = WeightedCorrespondences::new(src, tgt, vec![0.0; 8]).unwrap();
        assert_eq!(residual(&zero, &Se3::identity()), 0.0);
    }

    #[test]
    fn residual_at_solution_beats_random_perturbations() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let src = random_points(&mut rng, 30);
        let x = random_pose(&mut rng);
        let tgt = src
            .iter()
            .map(|p| x.transform_point(p) + Vector3::from_fn(|_, _| rng.random_range(-0.2..0.2)))
            .collect();
        let weights = (0..30).map(|_| rng.random_range(0.0..1.0)).collect();
        let c = WeightedCorrespondences::new(src, tgt, weights).unwrap();
        let best = solve_weighted_procrustes(&c).unwrap();
        let r0 = residual(&c, &best);
        for k in 0..1000 {
            let scale = [1e-4, 1e-2, 1.0][k % 3];
            let delta = Vector6::from_fn(|_, _| rng.random_range(-scale..scale));
            let perturbed = se3_exp(&delta) * best;
            assert!(
                r0 <= residual(&c, &perturbed),
                "perturbation {k} improved the residual"
            );
        }
    }

    #[test]
    fn rejects_underdetermined_and_collinear() {
        let src = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
        ];
        let c =
            WeightedCorrespondences::new(src.clone(), src.clone(), vec![1.0, 1.0, 1e-9]).unwrap();
        assert!(matches!(
            solve_weighted_procrustes(&c),
            Err(Error::UnderdeterminedPose(2))
        ));
        let line: Vec<_> = (0..5).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        let c = WeightedCorrespondences::uniform(line.clone(), line).unwrap();
        let err = solve_weighted_procrustes(&c).unwrap_err();
        assert!(err.to_string().contains("degenerate configuration"));
        // The relaxed solver damps instead of failing.
        assert!(solve_weighted_procrustes_relaxed(&c).is_ok());
    }

    #[test]
    fn reflection_is_corrected() {
        // Mirror-image target: the best proper rotation must still have det +1.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let src = random_points(&mut rng, 10);
        let tgt = src.iter().map(|p| Vector3::new(-p.x, p.y, p.z)).collect();
        let c = WeightedCorrespondences::uniform(src, tgt).unwrap();
        let x = solve_weighted_procrustes(&c).unwrap();
        assert!((x.rotation.matrix().determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn polar_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let g = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let loss = |m: &Matrix3<f64>| {
            PolarFactor::new(m)
                .unwrap()
                .rotation
                .component_mul(&g)
                .sum()
        };
        let analytic = PolarFactor::new(&m).unwrap().backward(&g);
        let h = 1e-6;
        for r in 0..3 {
            for c in 0..3 {
                let mut mp = m;
                let mut mm = m;
                mp[(r, c)] += h;
                mm[(r, c)] -= h;
                let fd = (loss(&mp) - loss(&mm)) / (2.0 * h);
                assert!(
                    (fd - analytic[(r, c)]).abs() < 1e-6,
                    "({r},{c}): {fd} vs {}",
                    analytic[(r, c)]
                );
            }
        }
    }
}
