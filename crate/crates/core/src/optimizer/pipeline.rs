//! Differentiable scene loss: unproject tracks, solve one rigidity-weighted
//! pose per track and frame pair, reproject and compare.
//!
//! All queries of a frame pair share the same correspondences, so their
//! weighted moments come from one product `Rig · Z` where row `j` of `Z` is
//! the confidence-scaled moment feature of track `j`. The adjoint runs the
//! same product backwards.

use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Se3};
use crate::gradient::{sigmoid, Objective, ParamLayout, ParamVector};
use crate::procrustes::{MomentSolve, Moments, WEIGHT_FLOOR};
use crate::rigidity::{rigidity_matrix, rigidity_matrix_backward};
use crate::trackdata::{sampson_static_mask, TrackSet, DEFAULT_SAMPSON_THRESHOLD};

const MIN_Z: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Weight of the scale-invariant depth term; 0 disables it.
    pub lambda_depth: f64,
    /// Huber transition in pixels; `f64::INFINITY` gives squared error.
    pub robust_delta: f64,
    pub use_static_override: bool,
    /// Squared pixels.
    pub sampson_threshold: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_depth: 0.0,
            robust_delta: 4.0,
            use_static_override: false,
            sampson_threshold: DEFAULT_SAMPSON_THRESHOLD,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_depth >= 0.0 && self.lambda_depth.is_finite()) {
            return Err(Error::Validation(format!(
                "lambda_depth must be >= 0, got {}",
                self.lambda_depth
            )));
        }
        if !(self.robust_delta > 0.0) {
            return Err(Error::Validation(format!(
                "robust_delta must be > 0, got {}",
                self.robust_delta
            )));
        }
        if !(self.sampson_threshold > 0.0) {
            return Err(Error::Validation(format!(
                "sampson_threshold must be > 0, got {}",
                self.sampson_threshold
            )));
        }
        Ok(())
    }
}

/// Huber penalty on a residual vector and its gradient.
pub fn huber(e: &Vector2<f64>, delta: f64) -> (f64, Vector2<f64>) {
    let r = e.norm();
    if r <= delta {
        (r * r, e * 2.0)
    } else {
        (delta * (2.0 * r - delta), e * (2.0 * delta / r))
    }
}

/// How rigidity weights between tracks are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RigidityMode {
    /// Clamped cosine of the learned embeddings.
    Learned,
    /// Every pair fully rigid: one global pose per frame pair.
    Static,
}

/// Per-track, per-frame-pair poses; `None` where the track was not
/// supervised.
#[derive(Debug, Clone, PartialEq)]
pub struct Se3Field {
    n_tracks: usize,
    n_pairs: usize,
    transforms: Vec<Option<Se3>>,
}

impl Se3Field {
    pub fn new(n_tracks: usize, n_pairs: usize) -> Self {
        Se3Field {
            n_tracks,
            n_pairs,
            transforms: vec![None; n_tracks * n_pairs],
        }
    }

    pub fn n_tracks(&self) -> usize {
        self.n_tracks
    }

    pub fn n_pairs(&self) -> usize {
        self.n_pairs
    }

    pub fn get(&self, track: usize, pair: usize) -> Option<&Se3> {
        self.transforms[track * self.n_pairs + pair].as_ref()
    }

    pub fn set(&mut self, track: usize, pair: usize, x: Option<Se3>) {
        self.transforms[track * self.n_pairs + pair] = x;
    }

    /// Whether the track has a pose for every frame pair.
    pub fn is_complete(&self, track: usize) -> bool {
        (0..self.n_pairs).all(|t| self.get(track, t).is_some())
    }

    pub fn count(&self) -> usize {
        self.transforms.iter().filter(|x| x.is_some()).count()
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub loss: f64,
    pub reprojection_loss: f64,
    pub depth_loss: f64,
    pub field: Se3Field,
    /// Reprojection error in pixels, `N × (T−1)`, NaN where unsupervised.
    pub residuals: Vec<f64>,
    pub n_supervised: usize,
    /// Frame pairs with fewer than three joint-visible tracks.
    pub skipped_pairs: Vec<usize>,
}

impl ForwardOutput {
    /// Mean pixel error over supervised entries.
    pub fn mean_residual(&self) -> f64 {
        let (s, n) = self
            .residuals
            .iter()
            .filter(|r| !r.is_nan())
            .fold((0.0, 0usize), |(s, n), r| (s + r, n + 1));
        if n == 0 {
            f64::NAN
        } else {
            s / n as f64
        }
    }
}

struct PairData {
    joint: Vec<usize>,
    src_rays: Vec<Vector3<f64>>,
    dst_rays: Vec<Vector3<f64>>,
    targets: Vec<Vector2<f64>>,
    /// Joint-indexed static flags when the override is active.
    static_flags: Option<Vec<bool>>,
}

#[derive(Default)]
struct PairResult {
    loss_sum: f64,
    n_supervised: usize,
    residuals: Vec<(usize, f64)>,
    transforms: Vec<(usize, Se3)>,
    /// `(θ index, ∂/∂θ)` before normalization by the supervised count.
    grads: Vec<(usize, f64)>,
    g_rig: Option<DMatrix<f64>>,
}

/// The training loss for one track set, usable as an [`Objective`].
pub struct Pipeline<'a> {
    tracks: &'a TrackSet,
    layout: ParamLayout,
    cfg: LossConfig,
    mode: RigidityMode,
    depth_target: Option<Vec<f64>>,
    pairs: Vec<PairData>,
}

impl<'a> Pipeline<'a> {
    pub fn new(
        tracks: &'a TrackSet,
        embedding_dim: usize,
        cfg: &LossConfig,
        mode: RigidityMode,
    ) -> Result<Self> {
        cfg.validate()?;
        let layout = ParamLayout::new(tracks.n_tracks(), tracks.n_frames(), embedding_dim);
        let pairs = (0..layout.n_pairs())
            .map(|t| {
                let joint = tracks.joint_visible(t, t + 1);
                let static_flags = if cfg.use_static_override && mode == RigidityMode::Learned {
                    match sampson_static_mask(tracks, (t, t + 1), cfg.sampson_threshold) {
                        Ok(mask) => Some(joint.iter().map(|&i| mask[i]).collect()),
                        Err(e) => {
                            log::warn!("frame pair {t}: no static override ({e})");
                            None
                        }
                    }
                } else {
                    None
                };
                PairData {
                    src_rays: joint.iter().map(|&i| tracks.ray(i, t)).collect(),
                    dst_rays: joint.iter().map(|&i| tracks.ray(i, t + 1)).collect(),
                    targets: joint.iter().map(|&i| tracks.position(i, t + 1)).collect(),
                    joint,
                    static_flags,
                }
            })
            .collect();
        Ok(Pipeline {
            tracks,
            layout,
            cfg: cfg.clone(),
            mode,
            depth_target: None,
            pairs,
        })
    }

    /// Reference depths (track-major `N × T`) for the depth term.
    pub fn with_depth_target(mut self, depths: Vec<f64>) -> Result<Self> {
        if depths.len() != self.layout.n_log_depths() {
            return Err(Error::Validation(format!(
                "depth target has {} entries, expected {}",
                depths.len(),
                self.layout.n_log_depths()
            )));
        }
        if let Some(d) = depths.iter().find(|d| !(**d > 0.0 && d.is_finite())) {
            return Err(Error::NonPositiveDepth(*d));
        }
        self.depth_target = Some(depths);
        Ok(self)
    }

    pub fn layout(&self) -> ParamLayout {
        self.layout
    }

    pub fn mode(&self) -> RigidityMode {
        self.mode
    }

    pub fn tracks(&self) -> &TrackSet {
        self.tracks
    }

    pub fn forward(&self, theta: &ParamVector) -> Result<ForwardOutput> {
        self.check_layout(theta)?;
        Ok(self.evaluate(&theta.values, false)?.0)
    }

    pub fn forward_with_gradient(&self, theta: &ParamVector) -> Result<(ForwardOutput, Vec<f64>)> {
        self.check_layout(theta)?;
        let (out, g) = self.evaluate(&theta.values, true)?;
        Ok((out, g.expect("gradient requested")))
    }

    fn check_layout(&self, theta: &ParamVector) -> Result<()> {
        if theta.layout != self.layout {
            return Err(Error::Validation(format!(
                "parameter layout {:?} does not match pipeline layout {:?}",
                theta.layout, self.layout
            )));
        }
        Ok(())
    }

    fn evaluate(
        &self,
        values: &[f64],
        want_grad: bool,
    ) -> Result<(ForwardOutput, Option<Vec<f64>>)> {
        let layout = self.layout;
        if values.len() != layout.len() {
            return Err(Error::Validation(format!(
                "parameter vector has {} entries, layout expects {}",
                values.len(),
                layout.len()
            )));
        }
        let theta = ParamVector {
            layout,
            values: values.to_vec(),
        };
        let emb = theta.embeddings();
        let base = match self.mode {
            RigidityMode::Learned => Some(rigidity_matrix(&emb)),
            RigidityMode::Static => None,
        };

        let results: Vec<Option<PairResult>> = (0..self.pairs.len())
            .into_par_iter()
            .map(|t| self.pair(t, values, base.as_ref(), want_grad))
            .collect();

        let n = layout.n_tracks;
        let n_pairs = layout.n_pairs();
        let mut field = Se3Field::new(n, n_pairs);
        let mut residuals = vec![f64::NAN; n * n_pairs];
        let mut skipped = Vec::new();
        let mut loss_sum = 0.0;
        let mut n_sup = 0;
        let mut grad = want_grad.then(|| vec![0.0; layout.len()]);
        let mut g_rig =
            (want_grad && self.mode == RigidityMode::Learned).then(|| DMatrix::zeros(n, n));
        for (t, res) in results.into_iter().enumerate() {
            let Some(res) = res else {
                skipped.push(t);
                continue;
            };
            loss_sum += res.loss_sum;
            n_sup += res.n_supervised;
            for (i, r) in res.residuals {
                residuals[i * n_pairs + t] = r;
            }
            for (i, x) in res.transforms {
                field.set(i, t, Some(x));
            }
            if let Some(g) = grad.as_mut() {
                for (k, v) in res.grads {
                    g[k] += v;
                }
            }
            if let (Some(acc), Some(local)) = (g_rig.as_mut(), res.g_rig) {
                let joint = &self.pairs[t].joint;
                for (b, &jb) in joint.iter().enumerate() {
                    for (a, &ja) in joint.iter().enumerate() {
                        acc[(ja, jb)] += local[(a, b)];
                    }
                }
            }
        }
        if n_sup == 0 {
            return Err(Error::NoSupervisablePairs);
        }
        for &t in &skipped {
            log::debug!("frame pair {t} skipped: fewer than 3 joint-visible tracks");
        }

        let scale = 1.0 / n_sup as f64;
        let reprojection_loss = loss_sum * scale;
        if let Some(g) = grad.as_mut() {
            g.iter_mut().for_each(|v| *v *= scale);
            if let Some(acc) = g_rig {
                let g_emb = rigidity_matrix_backward(&emb, &acc);
                for i in 0..n {
                    for m in 0..layout.embedding_dim {
                        g[layout.embedding_index(i, m)] = g_emb[(i, m)] * scale;
                    }
                }
            }
        }

        let depth_loss = match (&self.depth_target, self.cfg.lambda_depth > 0.0) {
            (Some(target), true) => self.depth_term(values, target, grad.as_mut())?,
            (None, true) => {
                return Err(Error::Validation(
                    "lambda_depth > 0 requires reference depths".into(),
                ));
            }
            _ => 0.0,
        };

        let out = ForwardOutput {
            loss: reprojection_loss + self.cfg.lambda_depth * depth_loss,
            reprojection_loss,
            depth_loss,
            field,
            residuals,
            n_supervised: n_sup,
            skipped_pairs: skipped,
        };
        Ok((out, grad))
    }

    /// Per-frame scale-aligned depth error; the gradient holds the optimal
    /// scale fixed since the loss is stationary in it.
    fn depth_term(
        &self,
        values: &[f64],
        target: &[f64],
        grad: Option<&mut Vec<f64>>,
    ) -> Result<f64> {
        let layout = self.layout;
        let mut entries: Vec<(usize, f64, f64, f64, f64)> = Vec::new();
        for t in 0..layout.n_frames {
            let vis: Vec<usize> = (0..layout.n_tracks)
                .filter(|&i| self.tracks.is_visible(i, t))
                .collect();
            if vis.is_empty() {
                continue;
            }
            let (mut pg, mut pp) = (0.0, 0.0);
            let mut gt = Vec::with_capacity(vis.len());
            for &i in &vis {
                let k = layout.log_depth_index(i, t);
                let dp = values[k].exp();
                pg += dp * target[k];
                pp += dp * dp;
                gt.push(target[k]);
            }
            let alpha = pg / pp;
            let med = median(&mut gt);
            for &i in &vis {
                let k = layout.log_depth_index(i, t);
                entries.push((k, values[k].exp(), target[k], alpha, med));
            }
        }
        if entries.is_empty() {
            return Err(Error::NoVisibleEntries);
        }
        let count = entries.len() as f64;
        let lambda = self.cfg.lambda_depth;
        let mut acc = 0.0;
        let mut grad = grad;
        for &(k, dp, dg, alpha, med) in &entries {
            let e = (alpha * dp - dg) / med;
            acc += e * e;
            if let Some(g) = grad.as_deref_mut() {
                g[k] += lambda * 2.0 * e * alpha / med * dp / count;
            }
        }
        Ok(acc / count)
    }

    fn pair(
        &self,
        t: usize,
        values: &[f64],
        base: Option<&DMatrix<f64>>,
        want_grad: bool,
    ) -> Option<PairResult> {
        let pd = &self.pairs[t];
        let nj = pd.joint.len();
        if nj < 3 {
            return None;
        }
        let layout = self.layout;
        let k = &self.tracks.intrinsics;
        let mut src = Vec::with_capacity(nj);
        let mut dst = Vec::with_capacity(nj);
        let mut conf = Vec::with_capacity(nj);
        let mut z = DMatrix::zeros(nj, Moments::WIDTH);
        for (a, &i) in pd.joint.iter().enumerate() {
            let ds = values[layout.log_depth_index(i, t)].exp();
            let dd = values[layout.log_depth_index(i, t + 1)].exp();
            let c = sigmoid(values[layout.logit_index(i, t)]);
            let (x, y) = (pd.src_rays[a] * ds, pd.dst_rays[a] * dd);
            for (col, f) in Moments::feature(&x, &y).iter().enumerate() {
                z[(a, col)] = c * f;
            }
            src.push((ds, x));
            dst.push((dd, y));
            conf.push(c);
        }

        let overridden =
            |a: usize, b: usize| pd.static_flags.as_ref().is_some_and(|s| s[a] && s[b]);
        let rig = match base {
            None => DMatrix::from_element(nj, nj, 1.0),
            Some(base) => DMatrix::from_fn(nj, nj, |a, b| {
                if overridden(a, b) {
                    1.0
                } else {
                    base[(pd.joint[a], pd.joint[b])]
                }
            }),
        };
        let s = &rig * &z;

        let mut res = PairResult::default();
        let mut g_s = want_grad.then(|| DMatrix::zeros(nj, Moments::WIDTH));
        let mut g_x = vec![Vector3::zeros(); nj];
        for a in 0..nj {
            let effective = (0..nj)
                .filter(|&b| rig[(a, b)] * conf[b] > WEIGHT_FLOOR)
                .count();
            if effective < 3 {
                continue;
            }
            let row: Vec<f64> = s.row(a).iter().copied().collect();
            let Some(solve) = MomentSolve::new(&Moments::from_slice(&row)) else {
                continue;
            };
            let pose = solve.pose;
            let x = src[a].1;
            let r = *pose.rotation.matrix();
            let q = r * x + pose.translation;
            let clamped = q.z < MIN_Z;
            let qz = q.z.max(MIN_Z);
            let proj = Vector2::new(k.fx * q.x / qz + k.cx, k.fy * q.y / qz + k.cy);
            let e = proj - pd.targets[a];
            let (rho, g_e) = huber(&e, self.cfg.robust_delta);
            res.loss_sum += rho;
            res.n_supervised += 1;
            res.residuals.push((pd.joint[a], e.norm()));
            res.transforms.push((pd.joint[a], pose));

            if let Some(g_s) = g_s.as_mut() {
                let g_q = project_adjoint(k, &q, qz, clamped, &g_e);
                let g_rot: Matrix3<f64> = g_q * x.transpose();
                g_x[a] += r.transpose() * g_q;
                let gm = solve.backward(&g_rot, &g_q).to_array();
                for (col, v) in gm.iter().enumerate() {
                    g_s[(a, col)] = *v;
                }
            }
        }
        if res.n_supervised == 0 {
            return Some(res);
        }
        let Some(g_s) = g_s else { return Some(res) };

        let g_z = rig.transpose() * &g_s;
        for (a, &i) in pd.joint.iter().enumerate() {
            let (ds, x) = src[a];
            let (dd, y) = dst[a];
            let f = Moments::feature(&x, &y);
            let gz: Vec<f64> = g_z.row(a).iter().copied().collect();
            let g_c: f64 = gz.iter().zip(&f).map(|(g, v)| g * v).sum();
            let c = conf[a];
            let (gx, gy) = feature_adjoint(&gz, &x, &y);
            let gx = gx * c + g_x[a];
            let gy = gy * c;
            res.grads
                .push((layout.log_depth_index(i, t), gx.dot(&pd.src_rays[a]) * ds));
            res.grads.push((
                layout.log_depth_index(i, t + 1),
                gy.dot(&pd.dst_rays[a]) * dd,
            ));
            res.grads
                .push((layout.logit_index(i, t), g_c * c * (1.0 - c)));
        }
        if base.is_some() {
            let mut g_rig = &g_s * z.transpose();
            for a in 0..nj {
                for b in 0..nj {
                    if a == b || overridden(a, b) {
                        g_rig[(a, b)] = 0.0;
                    }
                }
            }
            res.g_rig = Some(g_rig);
        }
        Some(res)
    }
}

/// Pulls the pixel-space gradient back to the camera-frame point.
fn project_adjoint(
    k: &Intrinsics,
    q: &Vector3<f64>,
    qz: f64,
    clamped: bool,
    g_e: &Vector2<f64>,
) -> Vector3<f64> {
    let gz = if clamped {
        0.0
    } else {
        -(g_e.x * k.fx * q.x + g_e.y * k.fy * q.y) / (qz * qz)
    };
    Vector3::new(g_e.x * k.fx / qz, g_e.y * k.fy / qz, gz)
}

/// Gradient of `⟨g, feature(x, y)⟩` with respect to `x` and `y`.
fn feature_adjoint(g: &[f64], x: &Vector3<f64>, y: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let gxy = Matrix3::from_row_slice(&g[7..16]);
    let gx = Vector3::new(g[1], g[2], g[3]) + gxy.transpose() * y;
    let gy = Vector3::new(g[4], g[5], g[6]) + gxy * x;
    (gx, gy)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl Objective for Pipeline<'_> {
    fn dim(&self) -> usize {
        self.layout.len()
    }

    fn value(&self, theta: &[f64]) -> Result<f64> {
        Ok(self.evaluate(theta, false)?.0.loss)
    }

    fn value_and_gradient(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (out, g) = self.evaluate(theta, true)?;
        Ok((out.loss, g.expect("gradient requested")))
    }

    fn param_name(&self, index: usize) -> String {
        self.layout.name(index)
    }
}

/// Loss, pose field and per-track residuals under learned rigidity.
pub fn forward_pass(
    tracks: &TrackSet,
    theta: &ParamVector,
    cfg: &LossConfig,
) -> Result<ForwardOutput> {
    Pipeline::new(
        tracks,
        theta.layout.embedding_dim,
        cfg,
        RigidityMode::Learned,
    )?
    .forward(theta)
}
