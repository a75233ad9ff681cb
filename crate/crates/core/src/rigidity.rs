//! Per-track rigidity embeddings and the clamped-cosine rigidity masks they
//! induce.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const DEFAULT_EMBEDDING_DIM: usize = 16;
pub const INIT_SIGMA: f64 = 0.1;
const NORM_EPS: f64 = 1e-12;

/// `N × M` embedding table; one row per track. Rows are unnormalized.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidityEmbeddings {
    pub features: DMatrix<f64>,
}

impl RigidityEmbeddings {
    pub fn new(features: DMatrix<f64>) -> Self {
        RigidityEmbeddings { features }
    }

    /// Rows drawn around the all-ones vector with isotropic noise: every
    /// pair starts nearly fully rigid.
    pub fn initial(n_tracks: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(1.0, INIT_SIGMA).expect("valid sigma");
        // Row-major draw order so the table is independent of storage layout.
        let mut f = DMatrix::zeros(n_tracks, dim);
        for i in 0..n_tracks {
            for m in 0..dim {
                f[(i, m)] = normal.sample(&mut rng);
            }
        }
        RigidityEmbeddings { features: f }
    }

    pub fn n_tracks(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    fn sq_norms(&self) -> Vec<f64> {
        (0..self.n_tracks()).map(|i| self.dot(i, i)).collect()
    }

    fn dot(&self, i: usize, j: usize) -> f64 {
        let f = &self.features;
        (0..self.dim()).map(|m| f[(i, m)] * f[(j, m)]).sum()
    }
}

/// `max(0, cos(fᵢ, fⱼ))`, computed so that the value is symmetric in `i, j`
/// and exactly 1 for identical rows.
fn clamped_cosine(dot: f64, sq_i: f64, sq_j: f64) -> f64 {
    let denom = (sq_i * sq_j).sqrt().max(NORM_EPS);
    (dot / denom).clamp(0.0, 1.0)
}

/// Rigidity weights from track `i` to every track; entry `i` is 1.
pub fn rigidity_mask(emb: &RigidityEmbeddings, i: usize) -> Vec<f64> {
    let sq_i = emb.dot(i, i);
    (0..emb.n_tracks())
        .map(|j| {
            if j == i {
                1.0
            } else {
                clamped_cosine(emb.dot(i, j), sq_i, emb.dot(j, j))
            }
        })
        .collect()
}

/// All rigidity masks as an `N × N` symmetric matrix (row `i` is
/// [`rigidity_mask`] of `i`).
pub fn rigidity_matrix(emb: &RigidityEmbeddings) -> DMatrix<f64> {
    let n = emb.n_tracks();
    let sq = emb.sq_norms();
    let mut out = DMatrix::from_element(n, n, 1.0);
    for i in 0..n {
        for j in (i + 1)..n {
            let c = clamped_cosine(emb.dot(i, j), sq[i], sq[j]);
            out[(i, j)] = c;
            out[(j, i)] = c;
        }
    }
    out
}

/// Pulls a gradient with respect to the rigidity matrix back to the
/// embedding table. The clamp contributes zero (including at exactly 0),
/// as does the constant diagonal.
pub fn rigidity_matrix_backward(emb: &RigidityEmbeddings, grad: &DMatrix<f64>) -> DMatrix<f64> {
    let n = emb.n_tracks();
    let f = &emb.features;
    let norms: Vec<f64> = emb
        .sq_norms()
        .iter()
        .map(|s| s.sqrt().max(NORM_EPS))
        .collect();
    let unit = DMatrix::from_fn(n, emb.dim(), |i, m| f[(i, m)] / norms[i]);
    let mut h = DMatrix::zeros(n, n);
    let mut diag = vec![0.0; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let cos = (0..emb.dim())
                .map(|m| unit[(i, m)] * unit[(j, m)])
                .sum::<f64>();
            if cos > 0.0 {
                let g = grad[(i, j)] + grad[(j, i)];
                h[(i, j)] = g;
                h[(j, i)] = g;
                diag[i] += g * cos;
                diag[j] += g * cos;
            }
        }
    }
    let mut out = &h * &unit;
    for i in 0..n {
        for m in 0..emb.dim() {
            out[(i, m)] = (out[(i, m)] - diag[i] * unit[(i, m)]) / norms[i];
        }
    }
    out
}

/// Rigidity masks of the tracks laid out in `grid` (row-major cells).
pub fn rigidity_response_grid(
    emb: &RigidityEmbeddings,
    grid: &[Vec<usize>],
) -> Result<Vec<Vec<Vec<f64>>>> {
    let n = emb.n_tracks();
    grid.iter()
        .map(|row| {
            row.iter()
                .map(|&i| {
                    if i < n {
                        Ok(rigidity_mask(emb, i))
                    } else {
                        Err(Error::Validation(format!(
                            "grid track index {i} out of range (N = {n})"
                        )))
                    }
                })
                .collect()
        })
        .collect()
}

/// Projection of the mean-centered rows onto the top `k` principal axes.
/// Axes are ordered by decreasing variance and signed so their
/// largest-magnitude loading is positive.
pub fn feature_pca(emb: &RigidityEmbeddings, k: usize) -> Result<DMatrix<f64>> {
    let (n, dim) = (emb.n_tracks(), emb.dim());
    if n < k {
        return Err(Error::Validation(format!(
            "PCA needs at least {k} rows, got {n}"
        )));
    }
    let mean = emb.features.row_mean();
    let mut centered = emb.features.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let cov = centered.transpose() * &centered / n as f64;
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut axes = DMatrix::zeros(dim, k);
    for (c, &idx) in order.iter().take(k).enumerate() {
        let mut axis = eig.eigenvectors.column(idx).into_owned();
        let pivot = axis.iter().copied().fold(
            0.0f64,
            |best, v| if v.abs() > best.abs() { v } else { best },
        );
        if pivot < 0.0 {
            axis = -axis;
        }
        axes.set_column(c, &axis);
    }
    Ok(centered * axes)
}
