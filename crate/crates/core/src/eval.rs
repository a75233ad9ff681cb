//! Metrics against synthetic ground truth and the frozen-feature probe.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector, Vector2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::clustering::{extract_camera_trajectory, MotionClusters};
use crate::error::{Error, Result};
use crate::geometry::{align_trajectories, project, AlignMode};
use crate::gradient::{sigmoid, ParamVector};
use crate::optimizer::Se3Field;
use crate::rigidity::rigidity_mask;
use crate::trackdata::SyntheticScene;

pub const PROBE_THRESHOLD: f64 = 0.5;

/// Scale-aligned MSE: `α*` is the least-squares scale of `pred` onto `gt`
/// over visible entries.
pub fn depth_error(pred: &[f64], gt: &[f64], visibility: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() || pred.len() != visibility.len() {
        return Err(Error::Validation(format!(
            "length mismatch: {} predictions, {} references, {} visibility flags",
            pred.len(),
            gt.len(),
            visibility.len()
        )));
    }
    let vis: Vec<(f64, f64)> = pred
        .iter()
        .zip(gt)
        .zip(visibility)
        .filter(|(_, &v)| v)
        .map(|((&p, &g), _)| (p, g))
        .collect();
    if vis.is_empty() {
        return Err(Error::NoVisibleEntries);
    }
    let (pg, pp) = vis
        .iter()
        .fold((0.0, 0.0), |(a, b), (p, g)| (a + p * g, b + p * p));
    let alpha = if pp > 0.0 { pg / pp } else { 0.0 };
    Ok(vis
        .iter()
        .map(|(p, g)| (alpha * p - g).powi(2))
        .sum::<f64>()
        / vis.len() as f64)
}

/// Intersection over union; 1 when both masks are empty.
///
/// # Panics
/// If the masks differ in length.
pub fn segmentation_iou(pred: &[bool], gt: &[bool]) -> f64 {
    assert_eq!(pred.len(), gt.len(), "mask lengths differ");
    let inter = pred.iter().zip(gt).filter(|(a, b)| **a && **b).count();
    let union = pred.iter().zip(gt).filter(|(a, b)| **a || **b).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub hidden_units: usize,
    pub epochs: usize,
    pub lr: f64,
    pub threshold: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden_units: 32,
            epochs: 500,
            lr: 1e-2,
            threshold: PROBE_THRESHOLD,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_units == 0 {
            return Err(Error::Validation(
                "probe needs at least one hidden unit".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Validation(format!(
                "probe lr must be > 0, got {}",
                self.lr
            )));
        }
        if self.threshold != PROBE_THRESHOLD {
            return Err(Error::Validation(format!(
                "probe threshold is fixed at 0.5, got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

/// `D → H → 1` perceptron with tanh hidden units and a sigmoid output.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DVector<f64>,
    pub b2: f64,
}

impl Probe {
    fn hidden(&self, x: &DVector<f64>) -> DVector<f64> {
        (&self.w1 * x + &self.b1).map(f64::tanh)
    }

    pub fn predict(&self, x: &DVector<f64>) -> f64 {
        sigmoid(self.w2.dot(&self.hidden(x)) + self.b2)
    }
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl AdamState {
    fn step(&mut self, params: &mut [&mut f64], grad: &[f64], lr: f64) {
        let (b1, b2) = (0.9, 0.999);
        self.step += 1;
        let (c1, c2) = (
            1.0 - f64::powi(b1, self.step),
            1.0 - f64::powi(b2, self.step),
        );
        for (k, p) in params.iter_mut().enumerate() {
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * grad[k];
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * grad[k] * grad[k];
            **p -= lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + 1e-8);
        }
    }
}

/// Trains on even-indexed rows, evaluates IOU at threshold 0.5 on the
/// odd-indexed rows. Full-batch cross-entropy with Adam steps.
pub fn train_probe(
    features: &DMatrix<f64>,
    labels: &[bool],
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<(Probe, f64)> {
    cfg.validate()?;
    let (n, d) = (features.nrows(), features.ncols());
    if labels.len() != n {
        return Err(Error::Validation(format!(
            "{} labels for {n} feature rows",
            labels.len()
        )));
    }
    let train: Vec<usize> = (0..n).step_by(2).collect();
    let test: Vec<usize> = (1..n).step_by(2).collect();
    let positives = train.iter().filter(|&&i| labels[i]).count();
    if positives == 0 || positives == train.len() {
        return Err(Error::DegenerateLabels);
    }
    let h = cfg.hidden_units;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n1 = Normal::new(0.0, (1.0 / d.max(1) as f64).sqrt()).expect("valid sigma");
    let n2 = Normal::new(0.0, (1.0 / h as f64).sqrt()).expect("valid sigma");
    let mut probe = Probe {
        w1: DMatrix::from_fn(h, d, |_, _| n1.sample(&mut rng)),
        b1: DVector::zeros(h),
        w2: DVector::from_fn(h, |_, _| n2.sample(&mut rng)),
        b2: 0.0,
    };
    let rows: Vec<DVector<f64>> = (0..n).map(|i| features.row(i).transpose()).collect();
    let n_params = h * d + 2 * h + 1;
    let mut adam = AdamState {
        m: vec![0.0; n_params],
        v: vec![0.0; n_params],
        step: 0,
    };
    for _ in 0..cfg.epochs {
        let mut gw1 = DMatrix::zeros(h, d);
        let mut gb1 = DVector::zeros(h);
        let mut gw2 = DVector::zeros(h);
        let mut gb2 = 0.0;
        for &i in &train {
            let a = probe.hidden(&rows[i]);
            let p = sigmoid(probe.w2.dot(&a) + probe.b2);
            let dz = p - if labels[i] { 1.0 } else { 0.0 };
            gb2 += dz;
            gw2 += &a * dz;
            let da = (&probe.w2 * dz).component_mul(&a.map(|v| 1.0 - v * v));
            gw1 += &da * rows[i].transpose();
            gb1 += da;
        }
        let scale = 1.0 / train.len() as f64;
        let grad: Vec<f64> = gw1
            .iter()
            .chain(gb1.iter())
            .chain(gw2.iter())
            .chain(std::iter::once(&gb2))
            .map(|g| g * scale)
            .collect();
        let mut params: Vec<&mut f64> = probe
            .w1
            .iter_mut()
            .chain(probe.b1.iter_mut())
            .chain(probe.w2.iter_mut())
            .chain(std::iter::once(&mut probe.b2))
            .collect();
        adam.step(&mut params, &grad, cfg.lr);
    }
    let pred: Vec<bool> = test
        .iter()
        .map(|&i| probe.predict(&rows[i]) >= cfg.threshold)
        .collect();
    let truth: Vec<bool> = test.iter().map(|&i| labels[i]).collect();
    let iou = segmentation_iou(&pred, &truth);
    Ok((probe, iou))
}

/// Scene-level metrics. Missing values (e.g. an alignment that could not be
/// computed) are NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub ate_sim3: f64,
    pub depth_mse: f64,
    /// Rigidity-map IOU per body label, background first.
    pub body_iou: Vec<f64>,
    pub mean_residual_px: f64,
}

impl EvalReport {
    pub fn entries(&self) -> Vec<(String, f64)> {
        let mut v = vec![
            ("ate_sim3".to_string(), self.ate_sim3),
            ("depth_mse".to_string(), self.depth_mse),
            ("mean_residual_px".to_string(), self.mean_residual_px),
        ];
        for (b, iou) in self.body_iou.iter().enumerate() {
            v.push((format!("iou_body_{b}"), *iou));
        }
        v
    }

    pub fn to_csv(&self) -> String {
        let e = self.entries();
        let header: Vec<&str> = e.iter().map(|(k, _)| k.as_str()).collect();
        let row: Vec<String> = e.iter().map(|(_, v)| format!("{v:e}")).collect();
        format!("{}\n{}\n", header.join(","), row.join(","))
    }

    /// Reads the key=value form written by `Display`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::parse(lineno + 1, format!("expected key=value, got {line:?}"))
            })?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::parse(lineno + 1, format!("bad number {:?}", v.trim())))?;
            map.insert(k.trim().to_string(), v);
        }
        let mut take = |k: &str| {
            map.remove(k)
                .ok_or_else(|| Error::parse(0, format!("missing key {k}")))
        };
        let ate_sim3 = take("ate_sim3")?;
        let depth_mse = take("depth_mse")?;
        let mean_residual_px = take("mean_residual_px")?;
        let mut body_iou = Vec::new();
        while let Some(v) = map.remove(&format!("iou_body_{}", body_iou.len())) {
            body_iou.push(v);
        }
        if let Some(k) = map.keys().next() {
            return Err(Error::parse(0, format!("unknown key {k}")));
        }
        Ok(EvalReport {
            ate_sim3,
            depth_mse,
            body_iou,
            mean_residual_px,
        })
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.entries() {
            writeln!(f, "{k}={v:e}")?;
        }
        Ok(())
    }
}

/// The track of `body` whose mean image position is closest to the mean
/// over all of the body's tracks.
fn representative_track(scene: &SyntheticScene, body: usize) -> Option<usize> {
    let members: Vec<(usize, Vector2<f64>)> = (0..scene.tracks.n_tracks())
        .filter(|&i| scene.gt.body_of_track[i] == body)
        .filter_map(|i| scene.tracks.mean_position(i).map(|p| (i, p)))
        .collect();
    if members.is_empty() {
        return None;
    }
    let centroid = members.iter().map(|(_, p)| p).sum::<Vector2<f64>>() / members.len() as f64;
    members
        .iter()
        .min_by(|a, b| {
            (a.1 - centroid)
                .norm_squared()
                .total_cmp(&(b.1 - centroid).norm_squared())
        })
        .map(|(i, _)| *i)
}

/// Rigidity-map IOU of each body's representative track at threshold 0.5.
pub fn body_ious(scene: &SyntheticScene, theta: &ParamVector) -> Vec<f64> {
    let emb = theta.embeddings();
    (0..scene.gt.n_bodies())
        .map(|b| match representative_track(scene, b) {
            Some(r) => {
                let pred: Vec<bool> = rigidity_mask(&emb, r)
                    .iter()
                    .map(|&w| w >= PROBE_THRESHOLD)
                    .collect();
                let truth: Vec<bool> = scene.gt.body_of_track.iter().map(|&l| l == b).collect();
                segmentation_iou(&pred, &truth)
            }
            None => f64::NAN,
        })
        .collect()
}

/// Mean pixel error of every track moved by its own field pose.
pub fn field_residual(scene: &SyntheticScene, theta: &ParamVector, field: &Se3Field) -> f64 {
    let ts = &scene.tracks;
    let (mut sum, mut n) = (0.0, 0usize);
    for i in 0..ts.n_tracks() {
        for t in 0..field.n_pairs() {
            if let Some(x) = field.get(i, t) {
                if !(ts.is_visible(i, t) && ts.is_visible(i, t + 1)) {
                    continue;
                }
                let p = x.transform_point(&(ts.ray(i, t) * theta.depth(i, t)));
                if let Ok(q) = project(&ts.intrinsics, &p) {
                    sum += (q - ts.position(i, t + 1)).norm();
                    n += 1;
                }
            }
        }
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

pub fn evaluate_scene(
    scene: &SyntheticScene,
    theta: &ParamVector,
    field: &Se3Field,
    clusters: &MotionClusters,
) -> EvalReport {
    let traj = extract_camera_trajectory(clusters);
    let ate_sim3 = match align_trajectories(&traj, &scene.gt.camera_trajectory, AlignMode::Sim3) {
        Ok((_, ate)) => ate,
        Err(e) => {
            log::warn!("trajectory alignment failed: {e}");
            f64::NAN
        }
    };
    let depth_mse = depth_error(
        &theta.depths(),
        &scene.gt.gt_depths,
        scene.tracks.visibility(),
    )
    .unwrap_or(f64::NAN);
    EvalReport {
        ate_sim3,
        depth_mse,
        body_iou: body_ious(scene, theta),
        mean_residual_px: field_residual(scene, theta, field),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn depth_error_examples() {
        let gt = [2.0, 3.0, 5.0, 7.0];
        let vis = [true; 4];
        assert_eq!(depth_error(&gt, &gt, &vis).unwrap(), 0.0);
        let twice: Vec<f64> = gt.iter().map(|d| 2.0 * d).collect();
        assert!(depth_error(&twice, &gt, &vis).unwrap() < 1e-28);
        assert!(matches!(
            depth_error(&gt, &gt, &[false; 4]),
            Err(Error::NoVisibleEntries)
        ));
        // Invisible entries are ignored entirely.
        let noisy = [2.0, 3.0, 5.0, 100.0];
        assert_eq!(
            depth_error(&noisy, &gt, &[true, true, true, false]).unwrap(),
            0.0
        );
    }

    #[test]
    fn iou_examples() {
        assert_eq!(
            segmentation_iou(&[true, false, true], &[true, false, true]),
            1.0
        );
        assert_eq!(segmentation_iou(&[true, false], &[false, true]), 0.0);
        assert_eq!(segmentation_iou(&[false; 3], &[false; 3]), 1.0);
        assert_eq!(
            segmentation_iou(&[true, true, false, false], &[true, true, true, true]),
            0.5
        );
    }

    #[test]
    fn probe_on_label_features_is_perfect() {
        let labels: Vec<bool> = (0..40).map(|i| (i / 2) % 3 == 0).collect();
        let f = DMatrix::from_fn(40, 1, |i, _| labels[i] as u8 as f64);
        let cfg = ProbeConfig {
            epochs: 100,
            ..Default::default()
        };
        let (_, iou) = train_probe(&f, &labels, &cfg, 0).unwrap();
        assert_eq!(iou, 1.0);
    }

    #[test]
    fn probe_on_constant_features_predicts_one_class() {
        let labels: Vec<bool> = (0..40).map(|i| i % 6 < 2).collect();
        let f = DMatrix::from_element(40, 3, 0.7);
        let (probe, iou) = train_probe(&f, &labels, &ProbeConfig::default(), 2).unwrap();
        let x = DVector::from_element(3, 0.7);
        let fg = (1..40).step_by(2).filter(|&i| labels[i]).count() as f64 / 20.0;
        assert!(iou == 0.0 || (iou - fg).abs() < 1e-12, "iou {iou}");
        assert!(probe.predict(&x) < 0.5);
    }

    #[test]
    fn probe_rejects_single_class() {
        let f = DMatrix::from_element(10, 2, 1.0);
        let labels = vec![true; 10];
        assert!(matches!(
            train_probe(&f, &labels, &ProbeConfig::default(), 0),
            Err(Error::DegenerateLabels)
        ));
        let bad = ProbeConfig {
            threshold: 0.4,
            ..Default::default()
        };
        assert!(matches!(
            train_probe(&f, &labels, &bad, 0),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn probe_is_deterministic() {
        let labels: Vec<bool> = (0..30).map(|i| i % 3 == 0).collect();
        let f = DMatrix::from_fn(30, 4, |i, j| ((i * 31 + j * 7) % 11) as f64 / 11.0);
        let cfg = ProbeConfig {
            epochs: 50,
            ..Default::default()
        };
        assert_eq!(
            train_probe(&f, &labels, &cfg, 5).unwrap(),
            train_probe(&f, &labels, &cfg, 5).unwrap()
        );
    }

    #[test]
    fn report_round_trip() {
        let r = EvalReport {
            ate_sim3: 1.25e-4,
            depth_mse: 0.1,
            body_iou: vec![1.0, 0.9375, f64::NAN],
            mean_residual_px: 3.0e-2,
        };
        let text = r.to_string();
        let back = EvalReport::parse(&text).unwrap();
        assert_eq!(back.ate_sim3, r.ate_sim3);
        assert_eq!(back.body_iou[..2], r.body_iou[..2]);
        assert!(back.body_iou[2].is_nan());
        assert_eq!(back.to_string(), text);
        let csv = r.to_csv();
        assert!(csv
            .starts_with("ate_sim3,depth_mse,mean_residual_px,iou_body_0,iou_body_1,iou_body_2\n"));
        assert!(EvalReport::parse("ate_sim3=1\n").is_err());
    }

    proptest! {
        #[test]
        fn depth_error_ignores_global_scale(
            pred in prop::collection::vec(0.5f64..10.0, 12),
            gt in prop::collection::vec(0.5f64..10.0, 12),
            s in 0.01f64..100.0,
        ) {
            let vis = vec![true; 12];
            let a = depth_error(&pred, &gt, &vis).unwrap();
            let scaled: Vec<f64> = pred.iter().map(|p| p * s).collect();
            let b = depth_error(&scaled, &gt, &vis).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a));
        }

        #[test]
        fn iou_is_symmetric(a in prop::collection::vec(any::<bool>(), 20), b in prop::collection::vec(any::<bool>(), 20)) {
            prop_assert_eq!(segmentation_iou(&a, &b), segmentation_iou(&b, &a));
        }
    }
}
