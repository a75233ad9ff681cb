//! `rigidtrack` command-line driver.
//!
//! Exit codes: 0 success, 1 runtime failure (divergence, failed gradient
//! check), 2 invalid input (validation, parse errors, missing files).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};
use nalgebra::Vector2;

use rigidtrack::clustering::{cluster_trajectories, extract_camera_trajectory, MotionClusters};
use rigidtrack::config::{parse_key_values, FitConfig};
use rigidtrack::eval::evaluate_scene;
use rigidtrack::export::{
    export_pca_ppm, export_pointcloud_ply, export_rigidity_map_pgm, export_trajectory_tum,
    PointFrame,
};
use rigidtrack::gradient::{
    check_gradients, GradCheckConfig, GradReport, ParamLayout, ParamVector,
};
use rigidtrack::optimizer::{fit_pipeline, ForwardOutput, Pipeline, RigidityMode, Se3Field};
use rigidtrack::rigidity::{feature_pca, rigidity_mask};
use rigidtrack::trackdata::{
    generate_scene, load_ground_truth, load_tracks, save_ground_truth, save_tracks, GroundTruth,
    SceneSpec, SyntheticScene, TrackSet,
};
use rigidtrack::Error;

const TRACKS_FILE: &str = "tracks.rtrk";
const GT_FILE: &str = "gt.txt";
const SPEC_FILE: &str = "spec.txt";
const CONFIG_FILE: &str = "config.txt";
const PARAMS_FILE: &str = "params.txt";
const FIELD_FILE: &str = "field.txt";
const LOSS_FILE: &str = "loss.csv";
const REPORT_FILE: &str = "report.txt";
const GRADCHECK_FILE: &str = "gradcheck.txt";

/// Failure that maps to exit code 2.
#[derive(Debug)]
struct InputError(String);

impl std::fmt::Display for InputError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

fn input_error(msg: impl Into<String>) -> anyhow::Error {
    InputError(msg.into()).into()
}

fn is_input_error(e: &Error) -> bool {
    match e {
        Error::Validation(_) | Error::Parse { .. } | Error::TooManyClusters { .. } => true,
        Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
        _ => false,
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<InputError>() {
            return 2;
        }
        if let Some(err) = cause.downcast_ref::<Error>() {
            return if is_input_error(err) { 2 } else { 1 };
        }
    }
    1
}

/// The error chain joined by `: `, skipping causes already quoted by the
/// message above them.
fn message(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.ends_with(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

/// One `--key value` option per configuration key. `seed` is global.
fn key_args(keys: &[&'static str]) -> Vec<Arg> {
    keys.iter()
        .filter(|k| **k != "seed")
        .map(|&k| {
            let long: &'static str = Box::leak(flag_name(k).into_boxed_str());
            let mut arg = Arg::new(k)
                .long(long)
                .value_name("VALUE")
                .help_heading("Config overrides");
            if long != k {
                arg = arg.alias(k);
            }
            arg
        })
        .collect()
}

fn scene_keys() -> Vec<&'static str> {
    SceneSpec::default()
        .entries()
        .into_iter()
        .map(|(k, _)| k)
        .collect()
}

fn cli() -> Command {
    let out = Arg::new("out")
        .long("out")
        .short('o')
        .value_name("DIR")
        .value_parser(value_parser!(PathBuf));
    let gt = Arg::new("gt")
        .long("gt")
        .value_name("FILE")
        .value_parser(value_parser!(PathBuf));
    let queries = Arg::new("query")
        .long("query")
        .value_name("TRACK")
        .action(ArgAction::Append)
        .value_parser(value_parser!(usize))
        .help("Query track for a rigidity map (repeatable; default 0)");
    let reference = Arg::new("reference_frame")
        .long("reference-frame")
        .value_name("T")
        .default_value("0")
        .value_parser(value_parser!(usize))
        .help("Frame whose camera coordinates the point cloud uses");
    Command::new("rigidtrack")
        .about("Per-scene rigidity and motion fitting from 2D point tracks")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("seed")
                .long("seed")
                .global(true)
                .value_parser(value_parser!(u64))
                .help("Random seed"),
        )
        .arg(
            Arg::new("threads")
                .long("threads")
                .global(true)
                .value_parser(value_parser!(usize))
                .help("Worker threads (default: all cores)"),
        )
        .arg(
            Arg::new("config")
                .long("config")
                .global(true)
                .value_name("FILE")
                .value_parser(value_parser!(PathBuf))
                .help("key=value configuration file"),
        )
        .subcommand(
            Command::new("synth")
                .about("Generate a synthetic scene: tracks, ground truth and the echoed spec")
                .arg(out.clone().required(true))
                .args(key_args(&scene_keys())),
        )
        .subcommand(
            Command::new("fit")
                .about("Fit depths, rigidity embeddings and confidences to a track file")
                .arg(
                    Arg::new("tracks")
                        .required(true)
                        .value_parser(value_parser!(PathBuf)),
                )
                .arg(out.clone().required(true))
                .arg(
                    gt.clone()
                        .help("Ground-truth sidecar; supplies depth targets and an evaluation"),
                )
                .arg(
                    Arg::new("static")
                        .long("static")
                        .action(ArgAction::SetTrue)
                        .help("Fit in static mode"),
                )
                .arg(
                    Arg::new("check_grads")
                        .long("check-grads")
                        .action(ArgAction::SetTrue)
                        .help("Verify gradients at the initialization first; abort on failure"),
                )
                .arg(queries.clone())
                .arg(reference.clone())
                .args(key_args(&FitConfig::KEYS)),
        )
        .subcommand(
            Command::new("eval")
                .about("Score a fit directory against a ground-truth sidecar")
                .arg(
                    Arg::new("run_dir")
                        .required(true)
                        .value_parser(value_parser!(PathBuf)),
                )
                .arg(gt.required(true))
                .arg(
                    out.clone()
                        .help("Directory for eval.txt and eval.csv (default: the run directory)"),
                ),
        )
        .subcommand(
            Command::new("export")
                .about("Rewrite point cloud, trajectory and image exports from a fit directory")
                .arg(
                    Arg::new("run_dir")
                        .required(true)
                        .value_parser(value_parser!(PathBuf)),
                )
                .arg(out.help("Destination directory (default: the run directory)"))
                .arg(queries)
                .arg(reference),
        )
        .subcommand(
            Command::new("check-grads")
                .about("Compare analytic and finite-difference gradients of the fitting loss")
                .arg(
                    Arg::new("tracks")
                        .required(true)
                        .value_parser(value_parser!(PathBuf)),
                )
                .arg(
                    Arg::new("params")
                        .long("params")
                        .value_name("FILE")
                        .value_parser(value_parser!(PathBuf))
                        .help("Parameters to check at (default: seeded initialization)"),
                )
                .arg(
                    Arg::new("gt")
                        .long("gt")
                        .value_name("FILE")
                        .value_parser(value_parser!(PathBuf)),
                )
                .arg(
                    Arg::new("max_coords")
                        .long("max-coords")
                        .value_name("N")
                        .default_value("512")
                        .value_parser(value_parser!(usize))
                        .help("Check at most N evenly spaced coordinates"),
                )
                .arg(Arg::new("static").long("static").action(ArgAction::SetTrue))
                .args(key_args(&FitConfig::KEYS)),
        )
}

/// Lines of the `--config` file, if any.
fn config_lines(m: &ArgMatches) -> anyhow::Result<Vec<(usize, String, String)>> {
    let Some(path) = m.get_one::<PathBuf>("config") else {
        return Ok(Vec::new());
    };
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    parse_key_values(&text).with_context(|| format!("{}", path.display()))
}

fn resolve_scene(m: &ArgMatches) -> anyhow::Result<SceneSpec> {
    let mut spec = SceneSpec::default();
    for (line, k, v) in config_lines(m)? {
        spec.set(&k, &v)
            .with_context(|| format!("config line {line}"))?;
    }
    for k in scene_keys().into_iter().filter(|k| *k != "seed") {
        if let Some(v) = m.get_one::<String>(k) {
            spec.set(k, v)?;
        }
    }
    if let Some(seed) = m.get_one::<u64>("seed") {
        spec.rng_seed = *seed;
    }
    spec.validate()?;
    Ok(spec)
}

fn resolve_fit(m: &ArgMatches) -> anyhow::Result<FitConfig> {
    let mut cfg = FitConfig::default();
    for (line, k, v) in config_lines(m)? {
        cfg.set(&k, &v)
            .with_context(|| format!("config line {line}"))?;
    }
    for k in FitConfig::KEYS.into_iter().filter(|k| *k != "seed") {
        if let Some(v) = m.get_one::<String>(k) {
            cfg.set(k, v)?;
        }
    }
    if let Some(seed) = m.get_one::<u64>("seed") {
        cfg.seed = *seed;
    }
    if m.get_flag("static") {
        cfg.static_mode = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn mode(cfg: &FitConfig) -> RigidityMode {
    if cfg.static_mode {
        RigidityMode::Static
    } else {
        RigidityMode::Learned
    }
}

fn build_pipeline<'a>(
    tracks: &'a TrackSet,
    cfg: &FitConfig,
    gt: Option<&GroundTruth>,
) -> anyhow::Result<Pipeline<'a>> {
    let pipeline = Pipeline::new(tracks, cfg.embedding_dim, &cfg.loss, mode(cfg))?;
    match gt {
        Some(gt) if cfg.loss.lambda_depth > 0.0 => {
            Ok(pipeline.with_depth_target(gt.gt_depths.clone())?)
        }
        _ => Ok(pipeline),
    }
}

fn check_consistent(tracks: &TrackSet, gt: &GroundTruth) -> anyhow::Result<()> {
    if gt.body_of_track.len() != tracks.n_tracks() || gt.n_frames() != tracks.n_frames() {
        return Err(input_error(format!(
            "ground truth covers {} tracks x {} frames, tracks file has {} x {}",
            gt.body_of_track.len(),
            gt.n_frames(),
            tracks.n_tracks(),
            tracks.n_frames()
        )));
    }
    Ok(())
}

fn run_grad_check(pipeline: &Pipeline<'_>, theta: &ParamVector, max_coords: usize) -> GradReport {
    let dim = theta.values.len();
    let coords = (dim > max_coords).then(|| {
        let n = max_coords.max(1);
        (0..n).map(|k| k * dim / n).collect()
    });
    check_gradients(
        pipeline,
        &theta.values,
        &GradCheckConfig {
            coords,
            ..Default::default()
        },
    )
}

fn format_field(field: &Se3Field) -> String {
    let mut s = String::from("# track pair r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz\n");
    for i in 0..field.n_tracks() {
        for t in 0..field.n_pairs() {
            if let Some(x) = field.get(i, t) {
                let _ = write!(s, "{i} {t}");
                let r = x.rotation.matrix();
                for a in 0..3 {
                    for b in 0..3 {
                        let _ = write!(s, " {:e}", r[(a, b)]);
                    }
                }
                for a in 0..3 {
                    let _ = write!(s, " {:e}", x.translation[a]);
                }
                s.push('\n');
            }
        }
    }
    s
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(path, contents).map_err(|e| {
        Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

fn create_dir(path: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(path).map_err(|e| {
        Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

const PALETTE: [[u8; 3]; 8] = [
    [200, 200, 200],
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

/// Point cloud colored by cluster, camera trajectory, rigidity maps for the
/// query tracks and a PCA image of the embeddings.
fn write_exports(
    dir: &Path,
    tracks: &TrackSet,
    theta: &ParamVector,
    clusters: &MotionClusters,
    queries: &[usize],
    reference: usize,
) -> anyhow::Result<()> {
    let traj = extract_camera_trajectory(clusters);
    if reference >= traj.len() {
        return Err(input_error(format!(
            "reference frame {reference} out of range (0..{})",
            traj.len()
        )));
    }
    export_trajectory_tum(&traj, dir.join("camera.tum"))?;
    let colors: Vec<[u8; 3]> = clusters
        .assignment
        .iter()
        .map(|&c| PALETTE[c % PALETTE.len()])
        .collect();
    export_pointcloud_ply(
        tracks,
        &theta.depths(),
        &colors,
        PointFrame::Reference {
            poses: &traj,
            reference,
        },
        dir.join("points.ply"),
    )?;
    let positions: Vec<_> = (0..tracks.n_tracks())
        .map(|i| {
            tracks
                .mean_position(i)
                .unwrap_or_else(|| Vector2::repeat(f64::NAN))
        })
        .collect();
    let emb = theta.embeddings();
    for &q in queries {
        if q >= tracks.n_tracks() {
            return Err(input_error(format!(
                "query track {q} out of range (0..{})",
                tracks.n_tracks()
            )));
        }
        export_rigidity_map_pgm(
            &rigidity_mask(&emb, q),
            &positions,
            tracks.image_size,
            dir.join(format!("rigidity_{q}.pgm")),
        )?;
    }
    if emb.dim() >= 3 && emb.n_tracks() >= 3 {
        let coords = feature_pca(&emb, 3)?;
        export_pca_ppm(&coords, &positions, tracks.image_size, dir.join("pca.ppm"))?;
    }
    Ok(())
}

fn fit_summary(
    cfg: &FitConfig,
    out: &ForwardOutput,
    final_loss: f64,
    clusters: &MotionClusters,
) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "final_loss={final_loss:e}");
    let _ = writeln!(s, "reprojection_loss={:e}", out.reprojection_loss);
    let _ = writeln!(s, "depth_loss={:e}", out.depth_loss);
    let _ = writeln!(s, "mean_residual_px={:e}", out.mean_residual());
    let _ = writeln!(s, "supervised={}", out.n_supervised);
    let _ = writeln!(s, "skipped_pairs={}", out.skipped_pairs.len());
    let _ = writeln!(s, "iterations={}", cfg.schedule.iterations);
    let _ = writeln!(s, "clusters={}", clusters.n_clusters());
    let _ = writeln!(s, "camera_cluster={}", clusters.selected());
    s
}

fn queries(m: &ArgMatches) -> Vec<usize> {
    m.get_many::<usize>("query")
        .map(|q| q.copied().collect())
        .unwrap_or_else(|| vec![0])
}

fn cmd_synth(m: &ArgMatches) -> anyhow::Result<()> {
    let spec = resolve_scene(m)?;
    let out = m.get_one::<PathBuf>("out").expect("required");
    let scene = generate_scene(&spec)?;
    create_dir(out)?;
    save_tracks(&scene.tracks, out.join(TRACKS_FILE))?;
    save_ground_truth(&scene.gt, out.join(GT_FILE))?;
    write_file(&out.join(SPEC_FILE), spec.to_config_string())?;
    log::info!(
        "wrote {} tracks x {} frames to {}",
        spec.n_tracks(),
        spec.n_frames,
        out.display()
    );
    Ok(())
}

fn cmd_fit(m: &ArgMatches) -> anyhow::Result<()> {
    let cfg = resolve_fit(m)?;
    let tracks = load_tracks(m.get_one::<PathBuf>("tracks").expect("required"))?;
    let out = m.get_one::<PathBuf>("out").expect("required");
    let gt = m
        .get_one::<PathBuf>("gt")
        .map(load_ground_truth)
        .transpose()?;
    if let Some(gt) = &gt {
        check_consistent(&tracks, gt)?;
    }
    let pipeline = build_pipeline(&tracks, &cfg, gt.as_ref())?;
    let init = ParamVector::initial(
        ParamLayout::new(tracks.n_tracks(), tracks.n_frames(), cfg.embedding_dim),
        cfg.seed,
    );
    create_dir(out)?;
    write_file(&out.join(CONFIG_FILE), cfg.to_config_string())?;
    save_tracks(&tracks, out.join(TRACKS_FILE))?;
    if m.get_flag("check_grads") {
        let report = run_grad_check(&pipeline, &init, 512);
        write_file(&out.join(GRADCHECK_FILE), report.to_string())?;
        if !report.passed {
            bail!("gradient check failed; not fitting\n{report}");
        }
        log::info!("gradient check passed ({} coordinates)", report.checked);
    }
    let (theta, history) = fit_pipeline(&pipeline, &init, &cfg.schedule)?;
    write_file(&out.join(LOSS_FILE), history.to_csv())?;
    theta.save(out.join(PARAMS_FILE))?;
    let fwd = pipeline.forward(&theta)?;
    write_file(&out.join(FIELD_FILE), format_field(&fwd.field))?;
    let clusters = cluster_trajectories(&fwd.field, &tracks, &theta, cfg.clusters, cfg.seed)?;
    let mut report = fit_summary(
        &cfg,
        &fwd,
        history.final_loss().unwrap_or(fwd.loss),
        &clusters,
    );
    if let Some(gt) = gt {
        let scene = SyntheticScene {
            tracks: tracks.clone(),
            gt,
        };
        report.push_str(&evaluate_scene(&scene, &theta, &fwd.field, &clusters).to_string());
    }
    write_file(&out.join(REPORT_FILE), &report)?;
    write_exports(
        out,
        &tracks,
        &theta,
        &clusters,
        &queries(m),
        *m.get_one::<usize>("reference_frame").expect("default"),
    )?;
    print!("{report}");
    Ok(())
}

/// Tracks, configuration and parameters saved by `fit`.
fn load_run(dir: &Path) -> anyhow::Result<(TrackSet, FitConfig, ParamVector)> {
    let tracks = load_tracks(dir.join(TRACKS_FILE))?;
    let cfg = FitConfig::load(dir.join(CONFIG_FILE))?;
    let theta = ParamVector::load(dir.join(PARAMS_FILE))?;
    if theta.layout != ParamLayout::new(tracks.n_tracks(), tracks.n_frames(), cfg.embedding_dim) {
        return Err(input_error(format!(
            "{}: parameters do not match the tracks",
            dir.display()
        )));
    }
    Ok((tracks, cfg, theta))
}

fn replay(
    tracks: &TrackSet,
    cfg: &FitConfig,
    theta: &ParamVector,
) -> anyhow::Result<(ForwardOutput, MotionClusters)> {
    let pipeline = Pipeline::new(tracks, cfg.embedding_dim, &cfg.loss, mode(cfg))?;
    let fwd = pipeline.forward(theta)?;
    let clusters = cluster_trajectories(&fwd.field, tracks, theta, cfg.clusters, cfg.seed)?;
    Ok((fwd, clusters))
}

fn cmd_eval(m: &ArgMatches) -> anyhow::Result<()> {
    let dir = m.get_one::<PathBuf>("run_dir").expect("required");
    let gt = load_ground_truth(m.get_one::<PathBuf>("gt").expect("required"))?;
    let (tracks, cfg, theta) = load_run(dir)?;
    check_consistent(&tracks, &gt)?;
    let (fwd, clusters) = replay(&tracks, &cfg, &theta)?;
    let scene = SyntheticScene { tracks, gt };
    let report = evaluate_scene(&scene, &theta, &fwd.field, &clusters);
    let out = m.get_one::<PathBuf>("out").unwrap_or(dir);
    create_dir(out)?;
    write_file(&out.join("eval.txt"), report.to_string())?;
    write_file(&out.join("eval.csv"), report.to_csv())?;
    print!("{report}");
    Ok(())
}

fn cmd_export(m: &ArgMatches) -> anyhow::Result<()> {
    let dir = m.get_one::<PathBuf>("run_dir").expect("required");
    let (tracks, cfg, theta) = load_run(dir)?;
    let (_, clusters) = replay(&tracks, &cfg, &theta)?;
    let out = m.get_one::<PathBuf>("out").unwrap_or(dir);
    create_dir(out)?;
    write_exports(
        out,
        &tracks,
        &theta,
        &clusters,
        &queries(m),
        *m.get_one::<usize>("reference_frame").expect("default"),
    )
}

fn cmd_check_grads(m: &ArgMatches) -> anyhow::Result<()> {
    let cfg = resolve_fit(m)?;
    let tracks = load_tracks(m.get_one::<PathBuf>("tracks").expect("required"))?;
    let gt = m
        .get_one::<PathBuf>("gt")
        .map(load_ground_truth)
        .transpose()?;
    if let Some(gt) = &gt {
        check_consistent(&tracks, gt)?;
    }
    let pipeline = build_pipeline(&tracks, &cfg, gt.as_ref())?;
    let layout = ParamLayout::new(tracks.n_tracks(), tracks.n_frames(), cfg.embedding_dim);
    let theta = match m.get_one::<PathBuf>("params") {
        Some(p) => ParamVector::load(p)?,
        None => ParamVector::initial(layout, cfg.seed),
    };
    if theta.layout != layout {
        return Err(input_error("parameters do not match the tracks"));
    }
    let report = run_grad_check(
        &pipeline,
        &theta,
        *m.get_one::<usize>("max_coords").expect("default"),
    );
    print!("{report}");
    if !report.passed {
        return Err(anyhow!("gradient check failed"));
    }
    Ok(())
}

fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("RIGIDTRACK_LOG", "warn"))
        .format_timestamp(None)
        .init();
}

fn run(m: &ArgMatches) -> anyhow::Result<()> {
    if let Some(&n) = m.get_one::<usize>("threads") {
        if n == 0 {
            return Err(input_error("--threads must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    match m.subcommand() {
        Some(("synth", sub)) => cmd_synth(sub),
        Some(("fit", sub)) => cmd_fit(sub),
        Some(("eval", sub)) => cmd_eval(sub),
        Some(("export", sub)) => cmd_export(sub),
        Some(("check-grads", sub)) => cmd_check_grads(sub),
        _ => unreachable!("subcommand required"),
    }
}

fn main() -> ExitCode {
    init_logging();
    let matches = cli().get_matches();
    match run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", message(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
