//! Fits the near-field image model to a simulated frame. A global depth
//! scale is absorbed by the fitted light intensity (the loss does not move),
//! while wrong normals change the loss.
//!
//! `cargo run --release --example near_field_fit`

use nalgebra::Vector3;
use nflslam::losses::nfl_ba;
use nflslam::maps::Mask;
use nflslam::shading::{backproject, estimate_albedo, shading_field, srgb_to_linear, MaskSet};
use nflslam::simulator::{simulate, SimConfig};

fn main() -> nflslam::Result<()> {
    let cfg = SimConfig {
        n_frames: 2,
        ..SimConfig::default()
    };
    let sim = simulate(&cfg)?;
    let f = &sim.frames[0];
    let (w, h) = (cfg.width, cfg.height);
    let masks = |valid: &Mask| MaskSet::new(Mask::filled(w, h, true), Mask::filled(w, h, true), valid.clone());

    let field = shading_field(&backproject(&f.gt.depth, &sim.intrinsics), &f.gt.normals, 0.0, &Vector3::z())?;
    let exact = nfl_ba(&f.gt.image_linear, &f.gt.albedo, &field, &masks(&field.valid)?)?;
    println!("true geometry, true albedo: loss {:.2e}, fitted light {:.3} (generator {})", exact.value, exact.scale, cfg.lighting.intensity);

    // the pipeline only sees the 8-bit image: linearize and estimate albedo chroma
    let (linear, clipped) = srgb_to_linear(&f.gt.image_srgb, cfg.lighting.gamma);
    let albedo = estimate_albedo(&f.gt.image_srgb, cfg.lighting.gamma);
    let est = nfl_ba(&linear, &albedo, &field, &masks(&field.valid)?)?;
    println!("true geometry, estimated albedo: loss {:.4}, fitted light {:.3} ({clipped} clipped px)", est.value, est.scale);

    for scale in [0.8, 0.9, 1.1, 1.25] {
        let depth = f.gt.depth.map(|d| d * scale);
        let field = shading_field(&backproject(&depth, &sim.intrinsics), &f.gt.normals, 0.0, &Vector3::z())?;
        let l = nfl_ba(&linear, &albedo, &field, &masks(&field.valid)?)?;
        println!("depth x{scale:<4}: loss {:.4}, fitted light {:.3}", l.value, l.scale);
    }
    for tilt in [0.1, 0.3] {
        let normals = f.gt.normals.map(|n| (n + Vector3::new(tilt, 0.0, 0.0)).normalize());
        let field = shading_field(&backproject(&f.gt.depth, &sim.intrinsics), &normals, 0.0, &Vector3::z())?;
        let l = nfl_ba(&linear, &albedo, &field, &masks(&field.valid)?)?;
        println!("normals tilted {tilt}: loss {:.4}, fitted light {:.3}", l.value, l.scale);
    }
    Ok(())
}
