//! Subcommands behind the `nflslam` binary. Each command is a plain function
//! so tests and examples can drive it without spawning a process.
//!
//! Run directory layout:
//!
//! ```text
//! config.toml, config.sha256   resolved config and its digest
//! dataset/                     the generated sequence (simulated sources only)
//! trajectory.csv               frame_index,tx,ty,tz,qw,qx,qy,qz (world-to-camera)
//! pointcloud.ply               Gaussian centers
//! scene.json                   final map, replayed by `render`
//! renders/NNNN.png             final map seen from each tracked pose (sRGB)
//! renders/NNNN_depth.png       matching depth, same scale as the dataset
//! steps.json, run.json         optimizer logs and a run summary
//! metrics.json                 written by `eval`
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::{read_resolved, ExperimentConfig, CONFIG_FILE, DIGEST_FILE};
use crate::dataset::{self, read_dataset, write_simulation, Dataset, DepthMode};
use crate::error::{Error, Result};
use crate::evalkit::{self, Alignment, Trajectory};
use crate::geometry::{GaussianScene, Intrinsics};
use crate::maps::Mask;
use crate::shading;
use crate::simulator::{ground_truth_cloud, simulate};
use crate::slam::{run_slam, SlamConfig, SlamRun};
use crate::splatter;

/// Exit status for a run stopped by a tracking failure.
pub const EXIT_TRACKING_FAILURE: i32 = 2;
/// Environment variable read for the log filter (`error` … `trace`).
pub const LOG_ENV: &str = "NFLSLAM_LOG";

#[derive(Debug, Parser)]
#[command(name = "nflslam", version, about = "Gaussian-splatting SLAM with near-field lighting bundle adjustment")]
pub struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: config value, else 1).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory (or metrics file for `eval` with one run).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic sequence.
    Gen,
    /// Run SLAM on the configured sequence.
    Run,
    /// Evaluate run directories and print a comparison table.
    Eval {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Ground-truth sequence; defaults to the one recorded by each run.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Use similarity (scale-aware) alignment instead of the config's.
        #[arg(long)]
        sim3: bool,
    },
    /// Re-render a run's saved map from its trajectory.
    Render { run: PathBuf },
}

pub fn init_logging() {
    let env = env_logger::Env::new().filter_or(LOG_ENV, "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// Parses arguments, dispatches, and maps the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Gen => {
            let cfg = load_for(cli)?;
            let out = output_dir(cli, &cfg)?;
            let digest = in_pool(cfg.threads, || cmd_gen(&cfg, &out))??;
            println!("{digest}  {}", out.display());
            Ok(0)
        }
        Command::Run => {
            let cfg = load_for(cli)?;
            let out = output_dir(cli, &cfg)?;
            let outcome = in_pool(cfg.threads, || cmd_run(&cfg, &out))??;
            match outcome.failure {
                Some(msg) => {
                    eprintln!("{msg} (partial results in {})", out.display());
                    Ok(EXIT_TRACKING_FAILURE)
                }
                None => {
                    println!("{} frames tracked, results in {}", outcome.frames, out.display());
                    Ok(0)
                }
            }
        }
        Command::Eval { runs, dataset, sim3 } => {
            let alignment = sim3.then_some(Alignment::Sim3);
            let reports = in_pool(cli.threads.unwrap_or(1), || {
                runs.iter().map(|r| cmd_eval(r, dataset.as_deref(), alignment)).collect::<Result<Vec<_>>>()
            })??;
            if let (Some(out), [report]) = (&cli.out, reports.as_slice()) {
                write_json(out, report)?;
            }
            let named: Vec<(String, MetricsReport)> =
                runs.iter().map(|r| r.display().to_string()).zip(reports).collect();
            print!("{}", comparison_table(&named));
            Ok(0)
        }
        Command::Render { run } => {
            let out = cli.out.clone().unwrap_or_else(|| run.join("replay"));
            let n = in_pool(cli.threads.unwrap_or(1), || cmd_render(run, &out))??;
            println!("rendered {n} frames into {}", out.display());
            Ok(0)
        }
    }
}

fn load_for(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required for this command".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if let Some(o) = &cli.out {
        cfg.output = Some(o.clone());
    }
    Ok(cfg)
}

fn output_dir(cli: &Cli, cfg: &ExperimentConfig) -> Result<PathBuf> {
    cli.out
        .clone()
        .or_else(|| cfg.output.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set `output`".into()))
}

/// Runs `f` on a pool with exactly `threads` workers.
pub fn in_pool<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Simulates the configured sequence into `out`; returns the digest of the
/// dataset files (computed before the config copy is added).
pub fn cmd_gen(cfg: &ExperimentConfig, out: &Path) -> Result<String> {
    cfg.validate()?;
    let sim_cfg = cfg
        .sim
        .as_ref()
        .ok_or_else(|| Error::Config("gen needs a [sim] table".into()))?;
    let sim = simulate(sim_cfg)?;
    create_dir(out)?;
    // a config copy left by an earlier run would otherwise enter the digest
    for stale in [CONFIG_FILE, DIGEST_FILE] {
        let _ = fs::remove_file(out.join(stale));
    }
    write_simulation(out, &sim)?;
    let digest = dataset::digest_dir(out)?;
    cfg.write_resolved(out)?;
    log::info!("wrote {} frames to {}", sim.frames.len(), out.display());
    Ok(digest)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub frames: usize,
    pub keyframes: Vec<usize>,
    pub gaussians: usize,
    pub inserted: usize,
    pub pruned: usize,
    pub failure: Option<String>,
    pub config_digest: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SavedMap {
    pub intrinsics: Intrinsics,
    pub scene: GaussianScene,
}

/// Loads (or simulates) the configured sequence.
pub fn load_dataset(cfg: &ExperimentConfig, out: &Path) -> Result<Dataset> {
    match (&cfg.dataset, &cfg.sim) {
        (Some(dir), _) => read_dataset(dir, cfg.depth_mode),
        (None, Some(sim_cfg)) => {
            let sim = simulate(sim_cfg)?;
            let dir = out.join("dataset");
            create_dir(&dir)?;
            write_simulation(&dir, &sim)?;
            // read back so SLAM sees exactly the quantized files on disk
            read_dataset(&dir, cfg.depth_mode)
        }
        (None, None) => Err(Error::Config("no data source".into())),
    }
}

/// Runs SLAM and writes every artifact. A tracking failure still writes
/// everything up to the failing frame and is reported in the summary.
pub fn cmd_run(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let config_digest = cfg.write_resolved(out)?;
    let ds = load_dataset(cfg, out)?;
    let run = run_slam(&ds, cfg.depth_mode, &cfg.slam)?;
    write_run(out, &ds, &run, &cfg.slam, config_digest)
}

fn write_run(out: &Path, ds: &Dataset, run: &SlamRun, slam: &SlamConfig, config_digest: String) -> Result<RunSummary> {
    let state = &run.state;
    Trajectory::new(state.trajectory.clone())?.write_csv(&out.join("trajectory.csv"))?;
    if !state.scene.is_empty() {
        evalkit::export_ply(&out.join("pointcloud.ply"), &state.scene, slam.gamma)?;
    }
    let map = SavedMap {
        intrinsics: state.k,
        scene: state.scene.clone(),
    };
    write_json(&out.join("scene.json"), &map)?;
    write_json(&out.join("steps.json"), &state.logs)?;
    if !state.scene.is_empty() {
        render_frames(&map, &state.trajectory, slam, ds.meta.depth_scale, &out.join("renders"))?;
    }
    let summary = RunSummary {
        frames: state.trajectory.len(),
        keyframes: state.keyframe_indices(),
        gaussians: state.scene.len(),
        inserted: state.inserted,
        pruned: state.pruned,
        failure: run.failure.as_ref().map(|e| e.to_string()),
        config_digest,
    };
    write_json(&out.join("run.json"), &summary)?;
    Ok(summary)
}

fn render_frames(
    map: &SavedMap,
    trajectory: &[(usize, crate::geometry::Pose)],
    slam: &SlamConfig,
    depth_scale: f64,
    dir: &Path,
) -> Result<()> {
    create_dir(dir)?;
    for (i, pose) in trajectory {
        let r = splatter::render(&map.scene, pose, &map.intrinsics, &slam.render_options())?;
        let srgb = shading::linear_to_srgb(&r.color, slam.gamma);
        dataset::write_rgb_png(&dir.join(format!("{i:04}.png")), &srgb)?;
        let depth = r.normalized_depth(splatter::NORMALIZED_DEPTH_MIN_ALPHA);
        dataset::write_depth_png(&dir.join(format!("{i:04}_depth.png")), &depth, depth_scale)?;
    }
    Ok(())
}

/// Replays the saved map along the saved trajectory into `out`.
pub fn cmd_render(run_dir: &Path, out: &Path) -> Result<usize> {
    let (cfg, _) = read_resolved(run_dir)?;
    let path = run_dir.join("scene.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let map: SavedMap = serde_json::from_str(&text).map_err(|e| Error::schema(&path, e.to_string()))?;
    if map.scene.is_empty() {
        return Err(Error::EmptyScene);
    }
    let traj = Trajectory::read_csv(&run_dir.join("trajectory.csv"))?;
    let ds_dir = recorded_dataset(run_dir, &cfg, None)?;
    let meta: dataset::DatasetMeta = read_json(&ds_dir.join("meta.json"))?;
    render_frames(&map, &traj.entries, &cfg.slam, meta.depth_scale, out)?;
    Ok(traj.len())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::schema(path, e.to_string()))
}

fn recorded_dataset(run_dir: &Path, cfg: &ExperimentConfig, dataset_dir: Option<&Path>) -> Result<PathBuf> {
    if let Some(d) = dataset_dir {
        return Ok(d.to_path_buf());
    }
    if let Some(d) = &cfg.dataset {
        return Ok(d.clone());
    }
    let local = run_dir.join("dataset");
    if local.is_dir() {
        Ok(local)
    } else {
        Err(Error::Config(format!("{}: no dataset recorded; pass --dataset", run_dir.display())))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub t_err_mm: f64,
    pub r_err_deg: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub depth_rmse_mm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsMetadata {
    /// Images are compared after gamma encoding, as stored on disk.
    pub image_space: String,
    pub alignment: Alignment,
    pub alignment_scale: f64,
    pub frames_evaluated: usize,
    pub frames_in_sequence: usize,
    pub chamfer_stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ate_t_mm: f64,
    pub ate_r_deg: f64,
    pub psnr_db_mean: f64,
    pub ssim_mean: f64,
    pub depth_rmse_mm: Option<f64>,
    pub chamfer_mm: Option<f64>,
    pub per_frame: Vec<FrameMetrics>,
    pub config_digest: String,
    pub metadata: MetricsMetadata,
}

/// Scores one run directory against ground truth and writes `metrics.json`
/// next to it. Depth and Chamfer metrics need the ground-truth depth maps and
/// are `null` without them.
pub fn cmd_eval(run_dir: &Path, dataset_dir: Option<&Path>, alignment: Option<Alignment>) -> Result<MetricsReport> {
    let (cfg, config_digest) = read_resolved(run_dir)?;
    let alignment = alignment.unwrap_or(cfg.eval.alignment);
    let ds_dir = recorded_dataset(run_dir, &cfg, dataset_dir)?;
    let mode = if ds_dir.join("depth_gt").is_dir() {
        DepthMode::Gt
    } else {
        DepthMode::None
    };
    let ds = read_dataset(&ds_dir, mode)?;
    let est = Trajectory::read_csv(&run_dir.join("trajectory.csv"))?;
    let gt_entries = est
        .entries
        .iter()
        .map(|(i, _)| {
            ds.poses_gt
                .get(*i)
                .map(|p| (*i, *p))
                .ok_or_else(|| Error::schema(run_dir.join("trajectory.csv"), format!("frame {i} is not in the sequence")))
        })
        .collect::<Result<Vec<_>>>()?;
    let gt = Trajectory::new(gt_entries)?;
    let ate = evalkit::ate(&est, &gt, alignment)?;
    let similarity = alignment_similarity(&est, &gt, alignment)?;

    let renders = run_dir.join("renders");
    let mut per_frame = Vec::with_capacity(est.len());
    let mut depth_sq = (0.0, 0usize);
    for (n, (i, _)) in est.entries.iter().enumerate() {
        let img = dataset::read_rgb_png(&renders.join(format!("{i:04}.png")))?;
        let m = evalkit::image_metrics(&img, &ds.frames[*i].image_srgb)?;
        let depth_rmse_mm = match &ds.frames[*i].depth_gt {
            Some(gt_depth) => {
                let d = dataset::read_depth_png(&renders.join(format!("{i:04}_depth.png")), ds.meta.depth_scale)?;
                let both = Mask::from_fn(d.width(), d.height(), |x, y| *d.get(x, y) > 0.0 && *gt_depth.get(x, y) > 0.0);
                let r = evalkit::depth_rmse(&d, gt_depth, Some(&both))?;
                if let Some(r) = r {
                    depth_sq.0 += r * r * both.count() as f64;
                    depth_sq.1 += both.count();
                }
                r
            }
            None => None,
        };
        per_frame.push(FrameMetrics {
            frame: *i,
            t_err_mm: ate.translation_errors_mm[n],
            r_err_deg: ate.rotation_errors_deg[n],
            psnr_db: m.psnr_db,
            ssim: m.ssim,
            depth_rmse_mm,
        });
    }

    let chamfer_mm = if mode == DepthMode::Gt {
        let depths: Vec<_> = ds.frames.iter().map(|f| f.depth_gt.clone().expect("gt mode")).collect();
        let gt_cloud = ground_truth_cloud(&depths, &ds.poses_gt, &ds.intrinsics, cfg.eval.chamfer_stride);
        let cloud = evalkit::read_ply(&run_dir.join("pointcloud.ply"))?;
        let est_cloud: Vec<_> = cloud.points.iter().map(|p| similarity.apply(&p.cast::<f64>())).collect();
        Some(evalkit::chamfer_gt_to_est(&gt_cloud, &est_cloud)?)
    } else {
        None
    };

    let n = per_frame.len() as f64;
    let report = MetricsReport {
        ate_t_mm: ate.ate_t_mm,
        ate_r_deg: ate.ate_r_deg,
        psnr_db_mean: per_frame.iter().map(|f| f.psnr_db).sum::<f64>() / n,
        ssim_mean: per_frame.iter().map(|f| f.ssim).sum::<f64>() / n,
        depth_rmse_mm: (depth_sq.1 > 0).then(|| (depth_sq.0 / depth_sq.1 as f64).sqrt()),
        chamfer_mm,
        per_frame,
        config_digest,
        metadata: MetricsMetadata {
            image_space: "8-bit gamma-encoded sRGB".into(),
            alignment,
            alignment_scale: ate.alignment_scale,
            frames_evaluated: est.len(),
            frames_in_sequence: ds.frames.len(),
            chamfer_stride: cfg.eval.chamfer_stride,
        },
    };
    write_json(&run_dir.join("metrics.json"), &report)?;
    Ok(report)
}

/// One row per run.
pub fn comparison_table(rows: &[(String, MetricsReport)]) -> String {
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(3).max(3);
    let mut s = String::new();
    writeln!(
        s,
        "{:<width$}  {:>9}  {:>9}  {:>10}  {:>8}  {:>6}  {:>13}",
        "run", "ATE_t mm", "ATE_r deg", "Chamfer mm", "PSNR dB", "SSIM", "depth RMSE mm"
    )
    .unwrap();
    for (name, r) in rows {
        writeln!(
            s,
            "{:<width$}  {:>9.3}  {:>9.3}  {:>10}  {:>8.2}  {:>6.3}  {:>13}",
            name,
            r.ate_t_mm,
            r.ate_r_deg,
            opt(r.chamfer_mm),
            r.psnr_db_mean,
            r.ssim_mean,
            opt(r.depth_rmse_mm)
        )
        .unwrap();
    }
    s
}

/// Trajectory and map scores of an in-memory run, computed like [`cmd_eval`]
/// but without touching the disk: `(ate, chamfer_mm)`.
pub fn score_run(ds: &Dataset, run: &SlamRun, alignment: Alignment, chamfer_stride: usize) -> Result<(evalkit::AteResult, Option<f64>)> {
    let est = Trajectory::new(run.state.trajectory.clone())?;
    let gt = Trajectory::new(est.entries.iter().map(|(i, _)| (*i, ds.poses_gt[*i])).collect())?;
    let ate = evalkit::ate(&est, &gt, alignment)?;
    let similarity = alignment_similarity(&est, &gt, alignment)?;
    let depths: Option<Vec<_>> = ds.frames.iter().map(|f| f.depth_gt.clone()).collect();
    let chamfer = match depths {
        Some(depths) if !run.state.scene.is_empty() => {
            let gt_cloud = ground_truth_cloud(&depths, &ds.poses_gt, &ds.intrinsics, chamfer_stride);
            let est_cloud: Vec<_> = run.state.scene.gaussians.iter().map(|g| similarity.apply(&g.mean)).collect();
            Some(evalkit::chamfer_gt_to_est(&gt_cloud, &est_cloud)?)
        }
        _ => None,
    };
    Ok((ate, chamfer))
}

fn alignment_similarity(est: &Trajectory, gt: &Trajectory, alignment: Alignment) -> Result<evalkit::Similarity> {
    match alignment {
        Alignment::None => Ok(evalkit::Similarity::identity()),
        Alignment::Se3 => evalkit::align_rigid(est, gt, false),
        Alignment::Sim3 => evalkit::align_rigid(est, gt, true),
    }
}
