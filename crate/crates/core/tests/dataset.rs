mod common;

use std::fs;

use nflslam::dataset::*;
use nflslam::maps::ScalarMap;
use nflslam::simulator::{simulate, SimConfig};

fn tiny() -> SimConfig {
    SimConfig {
        n_frames: 3,
        width: 16,
        height: 12,
        ..SimConfig::default()
    }
}

#[test]
fn write_read_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(&tiny()).unwrap();
    write_simulation(dir.path(), &sim).unwrap();
    let ds = read_dataset(dir.path(), DepthMode::Gt).unwrap();
    assert_eq!(ds.poses_gt, sim.poses);
    assert_eq!(ds.intrinsics, sim.intrinsics);
    assert_eq!(ds.meta, meta_for(&sim.cfg));
    let mem = Dataset::from_simulation(&sim);
    for ((f, m), s) in ds.frames.iter().zip(&mem.frames).zip(&sim.frames) {
        assert_eq!(f.image_srgb, m.image_srgb);
        let d = f.depth_gt.as_ref().unwrap();
        assert_eq!(d, m.depth_gt.as_ref().unwrap());
        for (a, b) in d.data().iter().zip(s.gt.depth.data()) {
            assert!((a - b).abs() <= sim.cfg.depth_scale / 2.0 + 1e-12);
        }
        assert!(f.depth_noisy.is_none());
    }
    let noisy = read_dataset(dir.path(), DepthMode::Noisy).unwrap();
    assert!(noisy.frames.iter().all(|f| f.depth_noisy.is_some() && f.depth_gt.is_none()));
}

#[test]
fn depth_quantization_bound() {
    let mut r = common::rng(2);
    let d = common::random_scalar_map(&mut r, 9, 7, 0.0, 600.0);
    let scale = 0.01;
    let back = dequantize_depth(&quantize_depth(&d, scale), 9, 7, scale).unwrap();
    for (a, b) in back.data().iter().zip(d.data()) {
        assert!((a - b).abs() <= scale / 2.0 + 1e-12);
    }
    // out-of-range values saturate instead of wrapping
    let big = ScalarMap::filled(1, 1, 1e6);
    assert_eq!(quantize_depth(&big, scale), vec![u16::MAX]);
    assert!(dequantize_depth(&[1, 2, 3], 2, 2, scale).is_err());
}

#[test]
fn depth_directory_rules() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(&tiny()).unwrap();
    write_simulation(dir.path(), &sim).unwrap();
    fs::remove_dir_all(dir.path().join("depth_gt")).unwrap();
    // monocular runs never look for depth
    let mono = read_dataset(dir.path(), DepthMode::None).unwrap();
    assert!(mono.frames.iter().all(|f| f.depth_gt.is_none() && f.depth_noisy.is_none()));
    assert!(matches!(read_dataset(dir.path(), DepthMode::Gt), Err(nflslam::Error::Schema { .. })));
}

#[test]
fn malformed_files_are_schema_errors() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(&tiny()).unwrap();
    write_simulation(dir.path(), &sim).unwrap();
    let poses = dir.path().join("poses_gt.json");
    let good = fs::read_to_string(&poses).unwrap();

    fs::write(&poses, "[[1, 2, 3]]").unwrap();
    let err = read_dataset(dir.path(), DepthMode::None).unwrap_err();
    assert!(matches!(err, nflslam::Error::Schema { .. }), "{err}");

    // a scaled rotation is not rigid
    let mut rows: Vec<Vec<f64>> = serde_json::from_str(&good).unwrap();
    rows[1][0] *= 2.0;
    fs::write(&poses, serde_json::to_string(&rows).unwrap()).unwrap();
    assert!(matches!(read_dataset(dir.path(), DepthMode::None), Err(nflslam::Error::Schema { .. })));
    fs::write(&poses, good).unwrap();

    // an 8-bit depth image where 16 bits are expected
    let img = dir.path().join("depth_gt").join("0001.png");
    write_rgb_png(&img, &sim.frames[0].gt.image_srgb).unwrap();
    assert!(matches!(read_dataset(dir.path(), DepthMode::Gt), Err(nflslam::Error::Schema { .. })));

    fs::write(dir.path().join("intrinsics.json"), "{\"fx\": 1}").unwrap();
    assert!(matches!(read_dataset(dir.path(), DepthMode::None), Err(nflslam::Error::Schema { .. })));
}

#[test]
fn digest_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = tiny();
    write_simulation(a.path(), &simulate(&cfg).unwrap()).unwrap();
    write_simulation(b.path(), &simulate(&cfg).unwrap()).unwrap();
    assert_eq!(digest_dir(a.path()).unwrap(), digest_dir(b.path()).unwrap());
    let c = tempfile::tempdir().unwrap();
    write_simulation(c.path(), &simulate(&SimConfig { seed: 1, ..cfg }).unwrap()).unwrap();
    assert_ne!(digest_dir(a.path()).unwrap(), digest_dir(c.path()).unwrap());
    assert_eq!(hex_digest(b"").len(), 64);
}
