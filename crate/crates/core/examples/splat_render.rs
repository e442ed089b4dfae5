//! Renders a small Gaussian scene from a few viewpoints and writes color and
//! depth images.
//!
//! `cargo run --release --example splat_render -- [out_dir]`

use std::path::PathBuf;

use nalgebra::{Quaternion, UnitQuaternion, Vector3, Vector6};
use nflslam::dataset::{write_depth_png, write_rgb_png};
use nflslam::geometry::{se3_exp, Gaussian3D, GaussianScene, Intrinsics};
use nflslam::shading::linear_to_srgb;
use nflslam::splatter::{render, RenderOptions, NORMALIZED_DEPTH_MIN_ALPHA};

fn main() -> nflslam::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("splat_render"));
    std::fs::create_dir_all(&out).map_err(|e| nflslam::Error::Io { path: out.clone(), source: e })?;
    // a ring of flattened, tilted Gaussians around the optical axis
    let gaussians = (0..24)
        .map(|i| {
            let a = i as f64 / 24.0 * std::f64::consts::TAU;
            let q: Quaternion<f64> = *UnitQuaternion::from_euler_angles(0.4 * a.cos(), 0.4 * a.sin(), a).quaternion();
            Gaussian3D {
                mean: Vector3::new(12.0 * a.cos(), 12.0 * a.sin(), 40.0 + 6.0 * (2.0 * a).sin()),
                scale: Vector3::new(3.0, 1.5, 0.3),
                rotation: q,
                color: Vector3::new(0.5 + 0.5 * a.cos(), 0.5 + 0.5 * (a + 2.1).cos(), 0.5 + 0.5 * (a + 4.2).cos()),
                opacity: 0.85,
            }
        })
        .collect();
    let scene = GaussianScene::new(gaussians);
    let k = Intrinsics::from_fov(128, 128, 70.0)?;
    for (n, yaw) in [-0.15, 0.0, 0.15].into_iter().enumerate() {
        let pose = se3_exp(&Vector6::new(0.0, 0.0, 0.0, 0.0, yaw, 0.0));
        let t = std::time::Instant::now();
        let r = render(&scene, &pose, &k, &RenderOptions::default())?;
        let covered = r.accum_alpha.data().iter().filter(|&&a| a > 0.5).count();
        println!(
            "view {n}: {} splats, {} contributions, {covered} covered px, {:.2?}",
            r.splats.len(),
            r.contributions.as_ref().map_or(0, |c| c.total()),
            t.elapsed()
        );
        write_rgb_png(&out.join(format!("view{n}.png")), &linear_to_srgb(&r.color, 2.2))?;
        write_depth_png(&out.join(format!("view{n}_depth.png")), &r.normalized_depth(NORMALIZED_DEPTH_MIN_ALPHA), 0.01)?;
    }
    println!("images in {}", out.display());
    Ok(())
}
