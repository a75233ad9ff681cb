use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use nalgebra::DMatrix;
use tempfile::TempDir;

use rigidtrack::eval::EvalReport;
use rigidtrack::geometry::{project, unproject};
use rigidtrack::gradient::{ParamLayout, ParamVector};
use rigidtrack::rigidity::RigidityEmbeddings;
use rigidtrack::trackdata::{load_ground_truth, load_tracks};

fn rigidtrack(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rigidtrack"))
        .args(args)
        .env_remove("RIGIDTRACK_LOG")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = rigidtrack(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small 1-body scene in `dir`.
fn synth(dir: &Path, seed: &str) {
    ok(&[
        "synth",
        "--out",
        p(dir),
        "--seed",
        seed,
        "--n-static-tracks",
        "24",
        "--tracks-per-body",
        "12",
        "--frames",
        "4",
    ]);
}

fn key_values(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn value(text: &str, key: &str) -> f64 {
    key_values(text)
        .into_iter()
        .find(|(k, _)| k == key)
        .unwrap_or_else(|| panic!("no {key} in {text}"))
        .1
        .parse()
        .unwrap()
}

#[test]
fn synth_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&a, "7");
    synth(&b, "7");
    for f in ["tracks.rtrk", "gt.txt", "spec.txt"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let spec = fs::read_to_string(a.join("spec.txt")).unwrap();
    assert!(spec.contains("seed=7\n"));
    assert!(spec.contains("tracks_per_body=12\n"));
}

#[test]
fn invalid_spec_exits_2() {
    let tmp = TempDir::new().unwrap();
    let out = rigidtrack(&["synth", "--out", p(tmp.path()), "--tracks-per-body", "2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("tracks_per_body"));
}

#[test]
fn synthesized_scene_is_self_consistent() {
    let tmp = TempDir::new().unwrap();
    synth(tmp.path(), "11");
    let tracks = load_tracks(tmp.path().join("tracks.rtrk")).unwrap();
    let gt = load_ground_truth(tmp.path().join("gt.txt")).unwrap();
    let k = tracks.intrinsics;
    let mut checked = 0;
    for i in 0..tracks.n_tracks() {
        let b = gt.body_of_track[i];
        for t in 0..tracks.n_frames() - 1 {
            if !(tracks.is_visible(i, t) && tracks.is_visible(i, t + 1)) {
                continue;
            }
            // Camera t -> world -> body motion -> camera t+1.
            let xc = unproject(&k, &tracks.position(i, t), gt.depth(i, t)).unwrap();
            let cam = &gt.camera_trajectory;
            let body = &gt.body_trajectories[b];
            let xw = cam[t].inverse().transform_point(&xc);
            let moved = body[t + 1].transform_point(&body[t].inverse().transform_point(&xw));
            let next = cam[t + 1].transform_point(&moved);
            let proj = project(&k, &next).unwrap();
            assert!((proj - tracks.position(i, t + 1)).norm() < 1e-6);
            // Saved positions are rounded; depths are exact.
            assert!((next.z - gt.depth(i, t + 1)).abs() < 1e-9 * next.z.max(1.0) + 1e-6);
            checked += 1;
        }
    }
    assert!(checked > 50);
}

#[test]
fn fit_on_static_scene_reaches_subpixel_residual() {
    let tmp = TempDir::new().unwrap();
    let scene = tmp.path().join("scene");
    ok(&[
        "synth",
        "--out",
        p(&scene),
        "--n-bodies",
        "0",
        "--n-static-tracks",
        "32",
        "--frames",
        "4",
    ]);
    let run = tmp.path().join("run");
    let out = ok(&[
        "fit",
        p(&scene.join("tracks.rtrk")),
        "--out",
        p(&run),
        "--iterations",
        "1500",
        "--threads",
        "2",
    ]);
    let report = fs::read_to_string(run.join("report.txt")).unwrap();
    assert_eq!(String::from_utf8_lossy(&out.stdout), report);
    assert!(value(&report, "mean_residual_px") < 0.1, "{report}");
    let csv = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 1501);
    for f in [
        "config.txt",
        "params.txt",
        "field.txt",
        "camera.tum",
        "points.ply",
        "rigidity_0.pgm",
        "pca.ppm",
    ] {
        assert!(run.join(f).is_file(), "{f}");
    }
}

#[test]
fn zero_iterations_writes_the_initialization_verbatim() {
    let tmp = TempDir::new().unwrap();
    synth(&tmp.path().join("scene"), "2");
    let run = tmp.path().join("run");
    ok(&[
        "fit",
        p(&tmp.path().join("scene/tracks.rtrk")),
        "--out",
        p(&run),
        "--iterations",
        "0",
        "--seed",
        "5",
        "--embedding-dim",
        "6",
    ]);
    let init = ParamVector::initial(ParamLayout::new(36, 4, 6), 5);
    assert_eq!(
        fs::read_to_string(run.join("params.txt")).unwrap(),
        init.to_text()
    );
}

#[test]
fn check_grads_gate_runs_before_fitting() {
    let tmp = TempDir::new().unwrap();
    synth(&tmp.path().join("scene"), "4");
    let run = tmp.path().join("run");
    ok(&[
        "fit",
        p(&tmp.path().join("scene/tracks.rtrk")),
        "--out",
        p(&run),
        "--iterations",
        "5",
        "--check-grads",
    ]);
    let gc = fs::read_to_string(run.join("gradcheck.txt")).unwrap();
    assert!(gc.starts_with("passed=true\n"), "{gc}");

    let out = ok(&[
        "check-grads",
        p(&tmp.path().join("scene/tracks.rtrk")),
        "--max-coords",
        "40",
    ]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("checked=40\n"), "{text}");
}

#[test]
fn config_file_and_overrides() {
    let tmp = TempDir::new().unwrap();
    synth(&tmp.path().join("scene"), "1");
    let cfg = tmp.path().join("fit.cfg");
    fs::write(
        &cfg,
        "# short run\niterations=3\nlr=0.005\nrobust_delta=inf\n",
    )
    .unwrap();
    let run = tmp.path().join("run");
    ok(&[
        "--config",
        p(&cfg),
        "fit",
        p(&tmp.path().join("scene/tracks.rtrk")),
        "--out",
        p(&run),
        "--iterations",
        "2",
        "--lambda_depth",
        "0",
    ]);
    let resolved = fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(resolved.contains("iterations=2\n"));
    assert!(resolved.contains("lr=0.005\n"));
    assert!(resolved.contains("robust_delta=inf\n"));
    assert_eq!(
        fs::read_to_string(run.join("loss.csv"))
            .unwrap()
            .lines()
            .count(),
        1 + 3
    );

    fs::write(&cfg, "iterations=3\nbogus=1\n").unwrap();
    let out = rigidtrack(&[
        "--config",
        p(&cfg),
        "fit",
        p(&tmp.path().join("scene/tracks.rtrk")),
        "--out",
        p(&run),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}

#[test]
fn depth_supervision_requires_ground_truth() {
    let tmp = TempDir::new().unwrap();
    synth(&tmp.path().join("scene"), "1");
    let tracks = tmp.path().join("scene/tracks.rtrk");
    let run = tmp.path().join("run");
    let out = rigidtrack(&["fit", p(&tracks), "--out", p(&run), "--lambda-depth", "1"]);
    assert_eq!(out.status.code(), Some(2));
    ok(&[
        "fit",
        p(&tracks),
        "--out",
        p(&run),
        "--lambda-depth",
        "1",
        "--iterations",
        "3",
        "--gt",
        p(&tmp.path().join("scene/gt.txt")),
    ]);
    let report = fs::read_to_string(run.join("report.txt")).unwrap();
    assert!(value(&report, "depth_loss") > 0.0);
    assert!(report.contains("ate_sim3="));
}

#[test]
fn missing_inputs_exit_2_with_filename() {
    let tmp = TempDir::new().unwrap();
    let out = rigidtrack(&["fit", "no_such_tracks.rtrk", "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_tracks.rtrk"));

    synth(&tmp.path().join("scene"), "3");
    let run = tmp.path().join("run");
    ok(&[
        "fit",
        p(&tmp.path().join("scene/tracks.rtrk")),
        "--out",
        p(&run),
        "--iterations",
        "1",
    ]);
    let out = rigidtrack(&["eval", p(&run), "--gt", "missing_sidecar.txt"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing_sidecar.txt"));
}

/// A run directory holding ground-truth depths, one-hot body embeddings and
/// saturated confidences.
fn stuffed_run(scene: &Path, run: &Path) {
    let tracks = load_tracks(scene.join("tracks.rtrk")).unwrap();
    let gt = load_ground_truth(scene.join("gt.txt")).unwrap();
    let m = 4;
    let layout = ParamLayout::new(tracks.n_tracks(), tracks.n_frames(), m);
    let log_depths: Vec<f64> = gt.gt_depths.iter().map(|d| d.ln()).collect();
    let emb = RigidityEmbeddings::new(DMatrix::from_fn(tracks.n_tracks(), m, |i, k| {
        (gt.body_of_track[i] == k) as u8 as f64
    }));
    let theta =
        ParamVector::pack(layout, &log_depths, &emb, &vec![30.0; layout.n_logits()]).unwrap();
    fs::create_dir_all(run).unwrap();
    fs::copy(scene.join("tracks.rtrk"), run.join("tracks.rtrk")).unwrap();
    fs::write(
        run.join("config.txt"),
        format!("embedding_dim={m}\nclusters=2\n"),
    )
    .unwrap();
    theta.save(run.join("params.txt")).unwrap();
}

#[test]
fn eval_of_ground_truth_run_is_near_zero() {
    let tmp = TempDir::new().unwrap();
    let scene = tmp.path().join("scene");
    synth(&scene, "9");
    let run = tmp.path().join("run");
    stuffed_run(&scene, &run);
    let out = ok(&["eval", p(&run), "--gt", p(&scene.join("gt.txt"))]);
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    let report = EvalReport::parse(&text).unwrap();
    assert!(report.ate_sim3 < 1e-6, "{text}");
    assert!(report.depth_mse < 1e-12, "{text}");
    assert!(report.mean_residual_px < 1e-6, "{text}");
    assert_eq!(report.body_iou, vec![1.0, 1.0]);
    assert_eq!(fs::read_to_string(run.join("eval.txt")).unwrap(), text);
}

#[test]
fn eval_report_schema_is_stable() {
    let tmp = TempDir::new().unwrap();
    let scene = tmp.path().join("scene");
    synth(&scene, "9");
    let run = tmp.path().join("run");
    stuffed_run(&scene, &run);
    let keys = |dir: &Path| {
        ok(&[
            "eval",
            p(&run),
            "--gt",
            p(&scene.join("gt.txt")),
            "--out",
            p(dir),
        ]);
        let txt: Vec<String> = key_values(&fs::read_to_string(dir.join("eval.txt")).unwrap())
            .into_iter()
            .map(|(k, _)| k)
            .collect();
        let csv = fs::read_to_string(dir.join("eval.csv")).unwrap();
        let header: Vec<String> = csv
            .lines()
            .next()
            .unwrap()
            .split(',')
            .map(String::from)
            .collect();
        assert_eq!(csv.lines().count(), 2);
        assert_eq!(txt, header);
        txt
    };
    let a = keys(&tmp.path().join("e1"));
    let b = keys(&tmp.path().join("e2"));
    assert_eq!(a, b);
    assert_eq!(
        a,
        [
            "ate_sim3",
            "depth_mse",
            "mean_residual_px",
            "iou_body_0",
            "iou_body_1"
        ]
    );
}

#[test]
fn export_rewrites_artifacts() {
    let tmp = TempDir::new().unwrap();
    let scene = tmp.path().join("scene");
    synth(&scene, "9");
    let run = tmp.path().join("run");
    stuffed_run(&scene, &run);
    let dest = tmp.path().join("exports");
    ok(&[
        "export",
        p(&run),
        "--out",
        p(&dest),
        "--query",
        "3",
        "--reference-frame",
        "1",
    ]);
    let pgm = fs::read(dest.join("rigidity_3.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n320 240\n255\n"));
    let tum = fs::read_to_string(dest.join("camera.tum")).unwrap();
    assert_eq!(tum.lines().count(), 4);
    assert_eq!(tum.lines().next().unwrap(), "0 0 0 0 0 0 0 1");
    assert!(fs::read_to_string(dest.join("points.ply"))
        .unwrap()
        .starts_with("ply\n"));

    let out = rigidtrack(&[
        "export",
        p(&run),
        "--out",
        p(&dest),
        "--reference-frame",
        "9",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn log_level_follows_environment() {
    let tmp = TempDir::new().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_rigidtrack"))
        .args(["synth", "--out", p(tmp.path()), "--frames", "3"])
        .env("RIGIDTRACK_LOG", "info")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("wrote"));
    let quiet = rigidtrack(&["synth", "--out", p(tmp.path()), "--frames", "3"]);
    assert!(quiet.stderr.is_empty());
}
