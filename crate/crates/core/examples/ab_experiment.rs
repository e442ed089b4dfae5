//! Near-field loss on/off comparison over several seeds and two sequences,
//! with noisy depth and specular highlights.
//!
//! `cargo run --release --example ab_experiment -- [n_seeds]`

use std::path::Path;

use nflslam::cli::score_run;
use nflslam::config::ExperimentConfig;
use nflslam::dataset::Dataset;
use nflslam::losses::NflPreset;
use nflslam::simulator::simulate;
use nflslam::slam::run_slam;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn main() -> nflslam::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("NFLSLAM_LOG", "warn")).init();
    let n_seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut rows = Vec::new();
    for name in ["paper_default.toml", "paper_default_b.toml"] {
        let base = ExperimentConfig::load(&configs.join(name))?;
        for seed in 0..n_seeds {
            let mut cfg = base.clone();
            cfg.set_seed(seed);
            let ds = Dataset::from_simulation(&simulate(cfg.sim.as_ref().expect("simulated source"))?);
            let mut off = cfg.slam.clone();
            off.weights = NflPreset::Off.weights();
            for (arm, slam) in [("nfl", &cfg.slam), ("off", &off)] {
                let t = std::time::Instant::now();
                let run = run_slam(&ds, cfg.depth_mode, slam)?;
                let (ate, chamfer) = score_run(&ds, &run, cfg.eval.alignment, cfg.eval.chamfer_stride)?;
                let chamfer = chamfer.unwrap_or(f64::NAN);
                println!(
                    "{name:22} seed {seed} {arm}: ATE_t {:.3} mm, ATE_r {:.3} deg, Chamfer {:.3} mm{} ({:.0?})",
                    ate.ate_t_mm,
                    ate.ate_r_deg,
                    chamfer,
                    if run.failure.is_some() { ", tracking failed" } else { "" },
                    t.elapsed()
                );
                rows.push((arm, ate.ate_t_mm, chamfer));
            }
        }
    }
    for arm in ["nfl", "off"] {
        let pick = |f: fn(&(&str, f64, f64)) -> f64| median(rows.iter().filter(|r| r.0 == arm).map(f).collect());
        println!("{arm}: median ATE_t {:.3} mm, median Chamfer {:.3} mm", pick(|r| r.1), pick(|r| r.2));
    }
    Ok(())
}
