//! Reverse-mode differentiation and finite-difference verification.
//!
//! Losses implement [`Objective`]. The scene pipeline supplies a
//! hand-derived adjoint; small closed-form losses can instead be written
//! against the scalar [`Tape`].

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::rigidity::RigidityEmbeddings;

pub const INIT_LOGIT: f64 = 2.0;
pub const INIT_LOG_DEPTH: f64 = 0.0;

// ---------------------------------------------------------------------------
// Scalar tape

#[derive(Debug, Clone, Copy)]
struct Node {
    parents: [(usize, f64); 2],
    arity: u8,
}

/// Wengert list of scalar operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Scalar recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    index: usize,
    value: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({}, {})", self.index, self.value)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn var(&self, value: f64) -> Var<'_> {
        self.push(value, [(0, 0.0); 2], 0)
    }

    pub fn vars(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.var(v)).collect()
    }

    fn push(&self, value: f64, parents: [(usize, f64); 2], arity: u8) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { parents, arity });
        Var {
            tape: self,
            index: nodes.len() - 1,
            value,
        }
    }

    /// Adjoints of `output` with respect to every recorded node.
    pub fn gradient(&self, output: Var<'_>) -> Vec<f64> {
        let nodes = self.nodes.borrow();
        let mut adj = vec![0.0; nodes.len()];
        adj[output.index] = 1.0;
        for k in (0..=output.index).rev() {
            let a = adj[k];
            if a == 0.0 {
                continue;
            }
            let node = nodes[k];
            for &(p, d) in &node.parents[..node.arity as usize] {
                adj[p] += a * d;
            }
        }
        adj
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> f64 {
        self.value
    }

    fn unary(self, value: f64, d: f64) -> Var<'t> {
        self.tape.push(value, [(self.index, d), (0, 0.0)], 1)
    }

    fn binary(self, other: Var<'t>, value: f64, da: f64, db: f64) -> Var<'t> {
        self.tape
            .push(value, [(self.index, da), (other.index, db)], 2)
    }

    pub fn exp(self) -> Var<'t> {
        let e = self.value.exp();
        self.unary(e, e)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(self.value.ln(), 1.0 / self.value)
    }

    pub fn sqrt(self) -> Var<'t> {
        let s = self.value.sqrt();
        self.unary(s, 0.5 / s)
    }

    pub fn powi(self, n: i32) -> Var<'t> {
        self.unary(self.value.powi(n), n as f64 * self.value.powi(n - 1))
    }

    pub fn sin(self) -> Var<'t> {
        self.unary(self.value.sin(), self.value.cos())
    }

    pub fn cos(self) -> Var<'t> {
        self.unary(self.value.cos(), -self.value.sin())
    }

    pub fn sigmoid(self) -> Var<'t> {
        let s = sigmoid(self.value);
        self.unary(s, s * (1.0 - s))
    }

    /// Subgradient 0 at the kink.
    pub fn relu(self) -> Var<'t> {
        if self.value > 0.0 {
            self.unary(self.value, 1.0)
        } else {
            self.unary(0.0, 0.0)
        }
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, self.value + o.value, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, self.value - o.value, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, self.value * o.value, o.value, self.value)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, o: Var<'t>) -> Var<'t> {
        let q = self.value / o.value;
        self.binary(o, q, 1.0 / o.value, -q / o.value)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(-self.value, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, c: f64) -> Var<'t> {
        self.unary(self.value + c, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, c: f64) -> Var<'t> {
        self.unary(self.value - c, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, c: f64) -> Var<'t> {
        self.unary(self.value * c, c)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, c: f64) -> Var<'t> {
        self.unary(self.value / c, 1.0 / c)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// Parameter layout

/// Shapes of the per-scene parameter tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub n_tracks: usize,
    pub n_frames: usize,
    pub embedding_dim: usize,
}

impl ParamLayout {
    pub fn new(n_tracks: usize, n_frames: usize, embedding_dim: usize) -> Self {
        ParamLayout {
            n_tracks,
            n_frames,
            embedding_dim,
        }
    }

    pub fn n_pairs(&self) -> usize {
        self.n_frames.saturating_sub(1)
    }

    pub fn n_log_depths(&self) -> usize {
        self.n_tracks * self.n_frames
    }

    pub fn n_embeddings(&self) -> usize {
        self.n_tracks * self.embedding_dim
    }

    pub fn n_logits(&self) -> usize {
        self.n_tracks * self.n_pairs()
    }

    pub fn len(&self) -> usize {
        self.n_log_depths() + self.n_embeddings() + self.n_logits()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn log_depth_index(&self, track: usize, frame: usize) -> usize {
        track * self.n_frames + frame
    }

    pub fn embedding_index(&self, track: usize, m: usize) -> usize {
        self.n_log_depths() + track * self.embedding_dim + m
    }

    pub fn logit_index(&self, track: usize, pair: usize) -> usize {
        self.n_log_depths() + self.n_embeddings() + track * self.n_pairs() + pair
    }

    pub fn embedding_range(&self) -> std::ops::Range<usize> {
        self.n_log_depths()..self.n_log_depths() + self.n_embeddings()
    }

    /// Human-readable name such as `log_depths[3,1]`.
    pub fn name(&self, index: usize) -> String {
        let (a, b) = (
            self.n_log_depths(),
            self.n_log_depths() + self.n_embeddings(),
        );
        if index < a {
            format!(
                "log_depths[{},{}]",
                index / self.n_frames,
                index % self.n_frames
            )
        } else if index < b {
            let k = index - a;
            format!(
                "embeddings[{},{}]",
                k / self.embedding_dim,
                k % self.embedding_dim
            )
        } else if index < self.len() {
            let k = index - b;
            format!(
                "confidence_logits[{},{}]",
                k / self.n_pairs(),
                k % self.n_pairs()
            )
        } else {
            format!("out_of_layout[{index}]")
        }
    }
}

/// Flat vector of all optimizable reals; see [`ParamLayout`] for offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub layout: ParamLayout,
    pub values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(layout: ParamLayout) -> Self {
        ParamVector {
            layout,
            values: vec![0.0; layout.len()],
        }
    }

    pub fn from_values(layout: ParamLayout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::Validation(format!(
                "parameter vector has {} entries, layout expects {}",
                values.len(),
                layout.len()
            )));
        }
        Ok(ParamVector { layout, values })
    }

    /// Default initialization: unit depths, confident tracks, embeddings
    /// near the all-ones vector.
    pub fn initial(layout: ParamLayout, seed: u64) -> Self {
        let emb = RigidityEmbeddings::initial(layout.n_tracks, layout.embedding_dim, seed);
        let log_depths = vec![INIT_LOG_DEPTH; layout.n_log_depths()];
        let logits = vec![INIT_LOGIT; layout.n_logits()];
        Self::pack(layout, &log_depths, &emb, &logits).expect("consistent shapes")
    }

    pub fn pack(
        layout: ParamLayout,
        log_depths: &[f64],
        embeddings: &RigidityEmbeddings,
        logits: &[f64],
    ) -> Result<Self> {
        let emb = &embeddings.features;
        if log_depths.len() != layout.n_log_depths()
            || emb.nrows() != layout.n_tracks
            || emb.ncols() != layout.embedding_dim
            || logits.len() != layout.n_logits()
        {
            return Err(Error::Validation(
                "parameter tables do not match layout".into(),
            ));
        }
        let mut values = Vec::with_capacity(layout.len());
        values.extend_from_slice(log_depths);
        for i in 0..layout.n_tracks {
            values.extend(emb.row(i).iter());
        }
        values.extend_from_slice(logits);
        Ok(ParamVector { layout, values })
    }

    pub fn unpack(&self) -> (Vec<f64>, RigidityEmbeddings, Vec<f64>) {
        (
            self.log_depths().to_vec(),
            self.embeddings(),
            self.logits().to_vec(),
        )
    }

    pub fn log_depths(&self) -> &[f64] {
        &self.values[..self.layout.n_log_depths()]
    }

    pub fn log_depths_mut(&mut self) -> &mut [f64] {
        let n = self.layout.n_log_depths();
        &mut self.values[..n]
    }

    pub fn logits(&self) -> &[f64] {
        &self.values[self.layout.n_log_depths() + self.layout.n_embeddings()..]
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        let start = self.layout.n_log_depths() + self.layout.n_embeddings();
        &mut self.values[start..]
    }

    pub fn embeddings(&self) -> RigidityEmbeddings {
        let l = self.layout;
        let slice = &self.values[l.embedding_range()];
        RigidityEmbeddings::new(DMatrix::from_row_slice(l.n_tracks, l.embedding_dim, slice))
    }

    pub fn set_embeddings(&mut self, emb: &RigidityEmbeddings) {
        let l = self.layout;
        for i in 0..l.n_tracks {
            for m in 0..l.embedding_dim {
                self.values[l.embedding_index(i, m)] = emb.features[(i, m)];
            }
        }
    }

    pub fn depth(&self, track: usize, frame: usize) -> f64 {
        self.values[self.layout.log_depth_index(track, frame)].exp()
    }

    /// `exp(log_depths)`, track-major.
    pub fn depths(&self) -> Vec<f64> {
        self.log_depths().iter().map(|v| v.exp()).collect()
    }

    pub fn confidence(&self, track: usize, pair: usize) -> f64 {
        sigmoid(self.values[self.layout.logit_index(track, pair)])
    }

    /// `RTPM 1`, then `N T M`, then one value per line in shortest
    /// round-trip form.
    pub fn to_text(&self) -> String {
        let l = &self.layout;
        let mut s = format!(
            "RTPM 1\n{} {} {}\n",
            l.n_tracks, l.n_frames, l.embedding_dim
        );
        for v in &self.values {
            s.push_str(&format!("{v:e}\n"));
        }
        s
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(k, l)| (k + 1, l.trim()));
        match lines.next() {
            Some((_, "RTPM 1")) => {}
            _ => return Err(Error::parse(1, "expected `RTPM 1`")),
        }
        let (ln, header) = lines
            .next()
            .ok_or_else(|| Error::parse(2, "missing shape line"))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|f| {
                f.parse()
                    .map_err(|e| Error::parse(ln, format!("{f:?}: {e}")))
            })
            .collect::<Result<_>>()?;
        let [n, t, m] = dims[..] else {
            return Err(Error::parse(ln, "expected `N T M`"));
        };
        let values = lines
            .filter(|(_, l)| !l.is_empty())
            .map(|(k, l)| {
                l.parse::<f64>()
                    .map_err(|e| Error::parse(k, format!("{l:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_values(ParamLayout::new(n, t, m), values)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text)
    }
}

// ---------------------------------------------------------------------------
// Objectives

/// Scalar loss over a flat parameter vector.
pub trait Objective {
    fn dim(&self) -> usize;

    fn value(&self, theta: &[f64]) -> Result<f64>;

    fn value_and_gradient(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)>;

    fn param_name(&self, index: usize) -> String {
        format!("theta[{index}]")
    }
}

/// Objective defined by a closure over tape variables.
pub struct TapeObjective<F> {
    dim: usize,
    f: F,
}

impl<F> TapeObjective<F>
where
    F: for<'t> Fn(&[Var<'t>]) -> Var<'t>,
{
    pub fn new(dim: usize, f: F) -> Self {
        TapeObjective { dim, f }
    }
}

impl<F> Objective for TapeObjective<F>
where
    F: for<'t> Fn(&[Var<'t>]) -> Var<'t>,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, theta: &[f64]) -> Result<f64> {
        let tape = Tape::new();
        let x = tape.vars(theta);
        Ok((self.f)(&x).value())
    }

    fn value_and_gradient(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let tape = Tape::new();
        let x = tape.vars(theta);
        let out = (self.f)(&x);
        let mut g = tape.gradient(out);
        g.truncate(theta.len());
        Ok((out.value(), g))
    }
}

/// Loss value and gradient, rejecting non-finite results.
///
/// The error names the first non-finite gradient coordinate; for a
/// non-finite loss it names the first non-finite parameter, falling back to
/// the largest-magnitude one.
pub fn gradient<O: Objective + ?Sized>(objective: &O, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
    let (loss, grad) = objective.value_and_gradient(theta)?;
    if !loss.is_finite() {
        let index = theta
            .iter()
            .position(|v| !v.is_finite())
            .or_else(|| grad.iter().position(|v| !v.is_finite()))
            .unwrap_or_else(|| {
                (0..theta.len())
                    .max_by(|&a, &b| theta[a].abs().total_cmp(&theta[b].abs()))
                    .unwrap_or(0)
            });
        return Err(Error::NonFinite {
            what: "loss",
            name: objective.param_name(index),
            index,
        });
    }
    if let Some(index) = grad.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "gradient",
            name: objective.param_name(index),
            index,
        });
    }
    Ok((loss, grad))
}

// ---------------------------------------------------------------------------
// Finite-difference check

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Below this magnitude coordinates are judged by `abs_tol`.
    pub small_gradient: f64,
    /// Coordinates to test; all when `None`.
    pub coords: Option<Vec<usize>>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            rel_tol: 1e-3,
            abs_tol: 1e-6,
            small_gradient: 1e-3,
            coords: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateCheck {
    pub index: usize,
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub abs_err: f64,
    pub rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    /// Largest relative error among coordinates judged relatively.
    pub max_rel_err: f64,
    /// Largest absolute error among coordinates judged absolutely.
    pub max_abs_err: f64,
    /// Coordinate with the largest error-to-tolerance ratio.
    pub worst: Option<CoordinateCheck>,
    pub failures: Vec<CoordinateCheck>,
    pub checked: usize,
    pub passed: bool,
    /// Set when the objective itself failed to evaluate.
    pub error: Option<String>,
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "passed={}", self.passed)?;
        writeln!(f, "checked={}", self.checked)?;
        writeln!(f, "max_rel_err={:.3e}", self.max_rel_err)?;
        writeln!(f, "max_abs_err={:.3e}", self.max_abs_err)?;
        if let Some(w) = &self.worst {
            writeln!(
                f,
                "worst={} analytic={:.9e} numeric={:.9e} rel_err={:.3e}",
                w.name, w.analytic, w.numeric, w.rel_err
            )?;
        }
        for c in &self.failures {
            writeln!(
                f,
                "failed={} analytic={:.9e} numeric={:.9e} rel_err={:.3e} abs_err={:.3e}",
                c.name, c.analytic, c.numeric, c.rel_err, c.abs_err
            )?;
        }
        if let Some(e) = &self.error {
            writeln!(f, "error={e}")?;
        }
        Ok(())
    }
}

/// Compares the analytic gradient with per-coordinate central differences.
/// Failures, including evaluation errors, are reported rather than raised.
pub fn check_gradients<O: Objective + ?Sized>(
    objective: &O,
    theta: &[f64],
    cfg: &GradCheckConfig,
) -> GradReport {
    let mut report = GradReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: None,
        failures: Vec::new(),
        checked: 0,
        passed: false,
        error: None,
    };
    let analytic = match gradient(objective, theta) {
        Ok((_, g)) => g,
        Err(e) => {
            report.error = Some(e.to_string());
            return report;
        }
    };
    let coords: Vec<usize> = match &cfg.coords {
        Some(c) => c.iter().copied().filter(|&i| i < theta.len()).collect(),
        None => (0..theta.len()).collect(),
    };
    let mut probe = theta.to_vec();
    let mut worst_ratio = -1.0;
    for &i in &coords {
        let orig = probe[i];
        probe[i] = orig + cfg.step;
        let plus = objective.value(&probe);
        probe[i] = orig - cfg.step;
        let minus = objective.value(&probe);
        probe[i] = orig;
        let numeric = match (plus, minus) {
            (Ok(p), Ok(m)) => (p - m) / (2.0 * cfg.step),
            (Err(e), _) | (_, Err(e)) => {
                report.error = Some(format!("{} at {}", e, objective.param_name(i)));
                f64::NAN
            }
        };
        let a = analytic[i];
        let abs_err = (a - numeric).abs();
        let scale = a.abs().max(numeric.abs());
        let rel_err = if scale > 0.0 { abs_err / scale } else { 0.0 };
        let relative = scale >= cfg.small_gradient;
        let (passed, ratio) = if relative {
            report.max_rel_err = report.max_rel_err.max(rel_err);
            (rel_err < cfg.rel_tol, rel_err / cfg.rel_tol)
        } else {
            report.max_abs_err = report.max_abs_err.max(abs_err);
            (abs_err < cfg.abs_tol, abs_err / cfg.abs_tol)
        };
        let passed = passed && numeric.is_finite();
        let ratio = if ratio.is_nan() { f64::INFINITY } else { ratio };
        let check = CoordinateCheck {
            index: i,
            name: objective.param_name(i),
            analytic: a,
            numeric,
            abs_err,
            rel_err,
            passed,
        };
        if ratio > worst_ratio {
            worst_ratio = ratio;
            report.worst = Some(check.clone());
        }
        if !passed {
            report.failures.push(check);
        }
        report.checked += 1;
    }
    report.passed = report.failures.is_empty() && report.error.is_none();
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn half_norm_sq() -> TapeObjective<impl for<'t> Fn(&[Var<'t>]) -> Var<'t>> {
        TapeObjective::new(4, |x: &[Var<'_>]| {
            let mut acc = x[0] * x[0] * 0.5;
            for v in &x[1..] {
                acc = acc + *v * *v * 0.5;
            }
            acc
        })
    }

    #[test]
    fn quadratic_gradient_is_identity() {
        let theta = [0.3, -1.7, 2.5, 1e-3];
        let (v, g) = gradient(&half_norm_sq(), &theta).unwrap();
        assert!((v - theta.iter().map(|t| t * t).sum::<f64>() / 2.0).abs() < 1e-15);
        assert_eq!(g, theta.to_vec());
        let report = check_gradients(&half_norm_sq(), &theta, &GradCheckConfig::default());
        assert!(report.passed, "{report}");
        assert!(report.max_rel_err < 1e-8);
    }

    #[test]
    fn constant_coordinate_has_zero_gradient() {
        let obj = TapeObjective::new(3, |x: &[Var<'_>]| (x[0] * x[2]).exp() + x[1] * 0.0);
        let (_, g) = gradient(&obj, &[0.5, 7.0, -0.25]).unwrap();
        assert_eq!(g[1], 0.0);
    }

    struct Corrupted<O>(O, usize);

    impl<O: Objective> Objective for Corrupted<O> {
        fn dim(&self) -> usize {
            self.0.dim()
        }
        fn value(&self, theta: &[f64]) -> Result<f64> {
            self.0.value(theta)
        }
        fn value_and_gradient(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
            let (v, mut g) = self.0.value_and_gradient(theta)?;
            g[self.1] = -g[self.1];
            Ok((v, g))
        }
    }

    #[test]
    fn corrupted_coordinate_is_reported() {
        let obj = Corrupted(half_norm_sq(), 2);
        let report = check_gradients(&obj, &[1.0, 2.0, 3.0, 4.0], &GradCheckConfig::default());
        assert!(!report.passed);
        assert_eq!(report.failures.len(), 1);
        assert_eq!(report.failures[0].name, "theta[2]");
        assert_eq!(report.worst.unwrap().index, 2);
    }

    #[test]
    fn non_finite_loss_names_parameter() {
        let obj = TapeObjective::new(2, |x: &[Var<'_>]| x[0].ln() + x[1]);
        let err = gradient(&obj, &[-1.0, 0.0]).unwrap_err();
        assert!(
            matches!(err, Error::NonFinite { what: "loss", .. }),
            "{err}"
        );
        let obj = TapeObjective::new(2, |x: &[Var<'_>]| x[0] + x[1].sqrt());
        match gradient(&obj, &[1.0, 0.0]).unwrap_err() {
            Error::NonFinite { what, index, name } => {
                assert_eq!((what, index), ("gradient", 1));
                assert_eq!(name, "theta[1]");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn elementary_ops_match_finite_differences() {
        let obj = TapeObjective::new(3, |x: &[Var<'_>]| {
            let a = (x[0].sin() * x[1].cos() + x[2].sigmoid()) / (x[1] * x[1] + 1.0);
            let b = (x[0] - x[2]).powi(3) - (x[2] * 2.0).relu() + (x[1].exp() + 1.0).ln().sqrt();
            a * b - (-x[0]) / 3.0
        });
        let report = check_gradients(&obj, &[0.4, -0.8, 1.3], &GradCheckConfig::default());
        assert!(report.passed, "{report}");
    }

    #[test]
    fn layout_round_trip_and_names() {
        let layout = ParamLayout::new(3, 4, 2);
        assert_eq!(layout.len(), 12 + 6 + 9);
        let p = ParamVector::initial(layout, 5);
        let (d, e, l) = p.unpack();
        assert_eq!(ParamVector::pack(layout, &d, &e, &l).unwrap(), p);
        assert_eq!(layout.name(layout.log_depth_index(2, 3)), "log_depths[2,3]");
        assert_eq!(layout.name(layout.embedding_index(1, 1)), "embeddings[1,1]");
        assert_eq!(
            layout.name(layout.logit_index(2, 0)),
            "confidence_logits[2,0]"
        );
        assert!(l.iter().all(|&v| v == INIT_LOGIT));
        assert!(d.iter().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn pack_unpack_identity(values in prop::collection::vec(-5.0f64..5.0, 3 * 3 + 3 * 2 + 3 * 2)) {
            let layout = ParamLayout::new(3, 3, 2);
            let p = ParamVector::from_values(layout, values.clone()).unwrap();
            let (d, e, l) = p.unpack();
            prop_assert_eq!(ParamVector::pack(layout, &d, &e, &l).unwrap().values, values);
        }

        #[test]
        fn gradient_is_linear(theta in prop::collection::vec(-2.0f64..2.0, 3), a in -3.0f64..3.0) {
            fn f<'t>(x: &[Var<'t>]) -> Var<'t> {
                (x[0] * x[1]).sin() + x[2].exp()
            }
            fn g<'t>(x: &[Var<'t>]) -> Var<'t> {
                x[0] * x[0] * x[2] - x[1].cos()
            }
            let sum = TapeObjective::new(3, move |x: &[Var<'_>]| f(x) * a + g(x));
            let (_, gs) = gradient(&sum, &theta).unwrap();
            let (_, gf) = gradient(&TapeObjective::new(3, f), &theta).unwrap();
            let (_, gg) = gradient(&TapeObjective::new(3, g), &theta).unwrap();
            for k in 0..3 {
                prop_assert!((gs[k] - (a * gf[k] + gg[k])).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn param_text_round_trip_is_exact() {
        let mut theta = ParamVector::initial(ParamLayout::new(5, 3, 4), 9);
        theta.values[0] = -1.0 / 3.0;
        theta.values[1] = f64::MIN_POSITIVE;
        let back = ParamVector::parse_text(&theta.to_text()).unwrap();
        assert_eq!(back, theta);
        assert!(ParamVector::parse_text("RTPM 1\n5 3 4\n0.5\n").is_err());
        assert!(matches!(
            ParamVector::parse_text("RTPM 1\n1 2\n"),
            Err(Error::Parse { line: 2, .. })
        ));
    }
}
