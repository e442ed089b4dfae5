//! Runs SLAM on a freshly simulated sequence and reports trajectory error.
//!
//! `cargo run --release --example run_slam -- [gt|noisy|none] [n_frames]`

use nflslam::dataset::{Dataset, DepthMode};
use nflslam::evalkit::{ate, Alignment, Trajectory};
use nflslam::simulator::{simulate, SimConfig};
use nflslam::slam::{run_slam, SlamConfig};

fn main() -> nflslam::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("NFLSLAM_LOG", "info")).init();
    let mut args = std::env::args().skip(1);
    let mode = match args.next().as_deref() {
        Some("noisy") => DepthMode::Noisy,
        Some("none") => DepthMode::None,
        _ => DepthMode::Gt,
    };
    let mut sim_cfg = SimConfig::default();
    if let Some(n) = args.next().and_then(|s| s.parse().ok()) {
        sim_cfg.n_frames = n;
    }
    let dataset = Dataset::from_simulation(&simulate(&sim_cfg)?);
    let cfg = SlamConfig::default();
    let t = std::time::Instant::now();
    let run = run_slam(&dataset, mode, &cfg)?;
    println!("{} frames in {:.2?}, {} gaussians", run.state.trajectory.len(), t.elapsed(), run.state.scene.len());
    if let Some(e) = &run.failure {
        println!("tracking failed: {e}");
    }
    let g0 = dataset.poses_gt[0].inverse();
    for (i, p) in &run.state.trajectory {
        let g = dataset.poses_gt[*i].compose(&g0);
        let d = p.compose(&g.inverse());
        println!("frame {i}: err t {:.3} mm, r {:.3} deg", (p.center() - g.center()).norm(), nflslam::geometry::rotation_angle(&d.rotation).to_degrees());
    }
    let est = Trajectory::new(run.state.trajectory.clone())?;
    let gt = Trajectory::new(est.entries.iter().map(|(i, _)| (*i, dataset.poses_gt[*i])).collect())?;
    let alignment = if mode == DepthMode::None { Alignment::Sim3 } else { Alignment::Se3 };
    let r = ate(&est, &gt, alignment)?;
    println!("ATE {:.3} mm / {:.3} deg", r.ate_t_mm, r.ate_r_deg);
    Ok(())
}

