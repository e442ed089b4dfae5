//! The command-line workflow driven from code: two runs on the same short
//! sequence (near-field loss on and off), evaluation, and a replay render.
//!
//! `cargo run --release --example evaluate_runs -- [work_dir] [n_frames]`

use std::path::{Path, PathBuf};

use nflslam::cli::{cmd_eval, cmd_render, cmd_run, comparison_table};
use nflslam::config::ExperimentConfig;

fn main() -> nflslam::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("NFLSLAM_LOG", "warn")).init();
    let mut args = std::env::args().skip(1);
    let work = args.next().map(PathBuf::from).unwrap_or_else(|| PathBuf::from("evaluate_runs"));
    let n_frames: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(12);
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut rows = Vec::new();
    for name in ["paper_default", "baseline"] {
        let mut cfg = ExperimentConfig::load(&configs.join(format!("{name}.toml")))?;
        if let Some(sim) = &mut cfg.sim {
            sim.n_frames = n_frames;
        }
        let dir = work.join(name);
        let summary = cmd_run(&cfg, &dir)?;
        println!("{name}: {} frames, {} gaussians, keyframes {:?}", summary.frames, summary.gaussians, summary.keyframes);
        rows.push((name.to_string(), cmd_eval(&dir, None, None)?));
    }
    print!("{}", comparison_table(&rows));
    let replayed = cmd_render(&work.join("paper_default"), &work.join("paper_default").join("replay"))?;
    println!("replayed {replayed} frames; metrics.json written next to each run");
    Ok(())
}
