//! Generates a synthetic tube sequence and prints per-frame statistics.
//!
//! `cargo run --release --example generate_sequence -- [out_dir] [specular_strength] [shininess]`

use std::path::PathBuf;

use nflslam::dataset::{digest_dir, write_simulation};
use nflslam::simulator::{simulate, SimConfig, Specular};

fn main() -> nflslam::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize, d: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let mut cfg = SimConfig::default();
    cfg.lighting.specular = Some(Specular {
        strength: arg(2, 3.0),
        shininess: arg(3, 40.0),
    });
    cfg.lighting.noise_sigma = 0.005;
    let t = std::time::Instant::now();
    let sim = simulate(&cfg)?;
    println!("generated {} frames in {:.2?}", sim.frames.len(), t.elapsed());
    for f in sim.frames.iter().step_by(5) {
        let valid: Vec<f64> = f.gt.depth.data().iter().copied().filter(|&d| d > 0.0).collect();
        let lo = valid.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = valid.iter().copied().fold(0.0, f64::max);
        let mean_srgb = f.gt.image_srgb.data().iter().map(|c| c.mean()).sum::<f64>() / f.gt.image_srgb.len() as f64;
        let highlights = f.gt.image_linear.data().iter().filter(|c| c.max() >= 0.95).count();
        println!(
            "frame {:2}: depth {:.1}..{:.1} mm, misses {}, clipped {}, lobe px {}, highlight px {}, mean sRGB {:.3}",
            f.index,
            lo,
            hi,
            f.gt.depth.len() - valid.len(),
            f.gt.clipped,
            f.gt.specular_hit.count(),
            highlights,
            mean_srgb
        );
    }
    if let Some(dir) = args.get(1).filter(|s| *s != "-").map(PathBuf::from) {
        write_simulation(&dir, &sim)?;
        println!("wrote {} (digest {})", dir.display(), digest_dir(&dir)?);
    }
    Ok(())
}
