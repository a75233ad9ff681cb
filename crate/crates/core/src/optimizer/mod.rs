//! Per-scene first-order optimization of the parameter tables.

mod pipeline;

pub use pipeline::{
    forward_pass, huber, ForwardOutput, LossConfig, Pipeline, RigidityMode, Se3Field,
};

use crate::error::{Error, Result};
use crate::gradient::{gradient, Objective, ParamVector};
use crate::trackdata::TrackSet;

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub lr: f64,
    pub iterations: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Learning rate reached at the last iteration as a fraction of `lr`;
    /// the rate decays geometrically in between.
    pub lr_final_ratio: f64,
    /// Keep the embedding table at its initial value.
    pub freeze_embeddings: bool,
    /// Iterations at the start during which embeddings stay frozen while
    /// depths and confidences settle under near-rigid weights.
    pub embedding_warmup: usize,
    /// Multiplier on the embedding step relative to the other tables.
    pub embedding_lr_scale: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            lr: 1e-2,
            iterations: 5000,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            lr_final_ratio: 0.01,
            freeze_embeddings: false,
            embedding_warmup: 0,
            embedding_lr_scale: 1.0,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Validation(format!(
                "lr must be > 0, got {}",
                self.lr
            )));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::Validation("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.lr_final_ratio > 0.0 && self.lr_final_ratio <= 1.0) {
            return Err(Error::Validation(format!(
                "lr_final_ratio must lie in (0, 1], got {}",
                self.lr_final_ratio
            )));
        }
        if !(self.embedding_lr_scale > 0.0 && self.embedding_lr_scale.is_finite()) {
            return Err(Error::Validation(format!(
                "embedding_lr_scale must be > 0, got {}",
                self.embedding_lr_scale
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Validation(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    scale: Vec<f64>,
    step: i32,
}

impl Adam {
    pub fn new(dim: usize, schedule: &Schedule) -> Self {
        Adam {
            lr: schedule.lr,
            beta1: schedule.beta1,
            beta2: schedule.beta2,
            epsilon: schedule.epsilon,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            scale: vec![1.0; dim],
            step: 0,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Step multiplier for the coordinates in `range`.
    pub fn set_scale(&mut self, range: std::ops::Range<usize>, scale: f64) {
        self.scale[range].iter_mut().for_each(|s| *s = scale);
    }

    /// Applies one update; coordinates with `frozen[k]` stay fixed.
    pub fn update(&mut self, params: &mut [f64], grad: &[f64], frozen: &[bool]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for k in 0..params.len() {
            if frozen.get(k).copied().unwrap_or(false) {
                continue;
            }
            let g = grad[k];
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[k] / c1;
            let v_hat = self.v[k] / c2;
            params[k] -= self.lr * self.scale[k] * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

/// Loss per iteration; the last entry is the loss at the returned
/// parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FitHistory {
    pub losses: Vec<f64>,
}

impl FitHistory {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }

    /// Trailing-window means, one per full window.
    pub fn moving_average(&self, window: usize) -> Vec<f64> {
        if window == 0 || self.losses.len() < window {
            return Vec::new();
        }
        let mut out = Vec::with_capacity(self.losses.len() - window + 1);
        let mut sum: f64 = self.losses[..window].iter().sum();
        out.push(sum / window as f64);
        for k in window..self.losses.len() {
            sum += self.losses[k] - self.losses[k - window];
            out.push(sum / window as f64);
        }
        out
    }

    /// Indices where the moving average rises by more than `rel_tol`
    /// relative to its previous value.
    pub fn moving_average_increases(&self, window: usize, rel_tol: f64) -> Vec<usize> {
        self.moving_average(window)
            .windows(2)
            .enumerate()
            .filter(|(_, w)| w[1] > w[0] + rel_tol * w[0].abs())
            .map(|(k, _)| k + 1)
            .collect()
    }

    pub fn is_monotone(&self, window: usize, rel_tol: f64) -> bool {
        self.moving_average_increases(window, rel_tol).is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,loss\n");
        for (k, l) in self.losses.iter().enumerate() {
            s.push_str(&format!("{k},{l:e}\n"));
        }
        s
    }
}

fn diagnostics(theta: &ParamVector) -> String {
    let layout = theta.layout;
    let ld = theta.log_depths();
    let (lo, hi) = ld
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
            (a.min(*v), b.max(*v))
        });
    let emb_max = theta.values[layout.embedding_range()]
        .iter()
        .fold(0.0f64, |a, v| a.max(v.abs()));
    let first_bad = theta.values.iter().position(|v| !v.is_finite());
    let mut s = format!("log_depth range [{lo:.4}, {hi:.4}], max |embedding| {emb_max:.4}");
    if let Some(k) = first_bad {
        s.push_str(&format!(", first non-finite parameter {}", layout.name(k)));
    }
    s
}

/// Runs `schedule.iterations` Adam steps on `pipeline` from `init`.
pub fn fit_pipeline(
    pipeline: &Pipeline<'_>,
    init: &ParamVector,
    schedule: &Schedule,
) -> Result<(ParamVector, FitHistory)> {
    schedule.validate()?;
    if init.layout != pipeline.layout() {
        return Err(Error::Validation(
            "initial parameters do not match the track set".into(),
        ));
    }
    let mut theta = init.clone();
    let emb_range = theta.layout.embedding_range();
    let mut frozen = vec![false; theta.values.len()];
    let mut adam = Adam::new(theta.values.len(), schedule);
    adam.set_scale(emb_range.clone(), schedule.embedding_lr_scale);
    let mut history = FitHistory::default();
    for it in 0..schedule.iterations {
        let (loss, grad) = gradient(pipeline, &theta.values).map_err(|e| match e {
            Error::NonFinite { .. } => Error::Diverged {
                iteration: it,
                diagnostics: format!("{e}; {}", diagnostics(&theta)),
            },
            other => other,
        })?;
        history.losses.push(loss);
        if it % 500 == 0 {
            log::info!("iteration {it}: loss {loss:.6e}");
        } else if it % 100 == 0 {
            log::debug!("iteration {it}: loss {loss:.6e}");
        }
        let progress = it as f64 / schedule.iterations.saturating_sub(1).max(1) as f64;
        adam.set_lr(schedule.lr * schedule.lr_final_ratio.powf(progress));
        let freeze = schedule.freeze_embeddings || it < schedule.embedding_warmup;
        frozen[emb_range.clone()]
            .iter_mut()
            .for_each(|f| *f = freeze);
        adam.update(&mut theta.values, &grad, &frozen);
    }
    let last = pipeline.value(&theta.values)?;
    if !last.is_finite() {
        return Err(Error::Diverged {
            iteration: schedule.iterations,
            diagnostics: diagnostics(&theta),
        });
    }
    history.losses.push(last);
    Ok((theta, history))
}

/// Full model: learned rigidity embeddings.
pub fn fit_scene(
    tracks: &TrackSet,
    init: &ParamVector,
    cfg: &LossConfig,
    schedule: &Schedule,
) -> Result<(ParamVector, FitHistory)> {
    let pipeline = Pipeline::new(
        tracks,
        init.layout.embedding_dim,
        cfg,
        RigidityMode::Learned,
    )?;
    fit_pipeline(&pipeline, init, schedule)
}

/// All rigidity weights fixed to one: a single global pose per frame pair.
pub fn static_mode_fit(
    tracks: &TrackSet,
    init: &ParamVector,
    cfg: &LossConfig,
    schedule: &Schedule,
) -> Result<(ParamVector, FitHistory)> {
    let pipeline = Pipeline::new(tracks, init.layout.embedding_dim, cfg, RigidityMode::Static)?;
    fit_pipeline(&pipeline, init, schedule)
}
