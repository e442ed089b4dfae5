mod common;

use nalgebra::{Matrix3, Vector3};
use nflslam::evalkit::*;
use nflslam::geometry::{se3_exp, so3_exp, Gaussian3D, GaussianScene, Pose};
use nflslam::maps::{ScalarMap, VectorMap};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal};

fn wavy_trajectory(n: usize) -> Trajectory {
    Trajectory::from_poses(
        &(0..n)
            .map(|i| {
                let s = i as f64;
                let c = Vector3::new(3.0 * (0.3 * s).sin(), 2.0 * (0.2 * s).cos(), 3.5 * s);
                Pose::from_center(so3_exp(&Vector3::new(0.02 * s, -0.01 * s, 0.03)), c)
            })
            .collect::<Vec<_>>(),
    )
}

/// Applies the world change `x ↦ R x + t` to every camera.
fn move_world(t: &Trajectory, m: &Pose) -> Trajectory {
    let inv = m.inverse();
    Trajectory {
        entries: t.entries.iter().map(|(i, p)| (*i, p.compose(&inv))).collect(),
    }
}

#[test]
fn identical_trajectories_align_to_identity() {
    let gt = wavy_trajectory(20);
    let s = align_rigid(&gt, &gt, false).unwrap();
    assert!((s.rotation - Matrix3::identity()).norm() < 1e-9);
    assert!(s.translation.norm() < 1e-9);
    let r = ate(&gt, &gt, Alignment::Se3).unwrap();
    assert!(r.ate_t_mm < 1e-9 && r.ate_r_deg < 1e-6);
}

#[test]
fn rigid_motion_is_recovered_exactly() {
    let gt = wavy_trajectory(20);
    let m = se3_exp(&nalgebra::Vector6::new(5.0, -2.0, 1.0, 0.3, -0.5, 0.8));
    let est = move_world(&gt, &m);
    let s = align_rigid(&est, &gt, false).unwrap();
    let inv = m.inverse();
    assert!((s.rotation - inv.rotation).norm() < 1e-9);
    assert!((s.translation - inv.translation).norm() < 1e-9);
    let r = ate(&est, &gt, Alignment::Se3).unwrap();
    assert!(r.ate_t_mm < 1e-9 && r.ate_r_deg < 1e-5, "{r:?}");

    // similarity with scale 2
    let scaled = Trajectory {
        entries: gt
            .entries
            .iter()
            .map(|(i, p)| (*i, Pose::from_center(p.rotation, p.center() * 2.0)))
            .collect(),
    };
    let s = align_rigid(&scaled, &gt, true).unwrap();
    assert!((s.scale - 0.5).abs() < 1e-9);
    assert!(ate(&scaled, &gt, Alignment::Sim3).unwrap().ate_t_mm < 1e-9);
}

#[test]
fn alignment_residual_matches_the_noise_floor() {
    // with isotropic noise σ on n centers, a 6-dof fit leaves E[mean ‖r‖²] = σ²(3n − 6)/n
    let gt = wavy_trajectory(25);
    let n = gt.len() as f64;
    let sigma = 0.2;
    let normal = Normal::new(0.0, sigma).unwrap();
    let mut r = common::rng(9);
    let trials = 2000;
    let mut acc = 0.0;
    for _ in 0..trials {
        let est = Trajectory {
            entries: gt
                .entries
                .iter()
                .map(|(i, p)| {
                    let c = p.center() + Vector3::from_fn(|_, _| normal.sample(&mut r));
                    (*i, Pose::from_center(p.rotation, c))
                })
                .collect(),
        };
        acc += ate(&est, &gt, Alignment::Se3).unwrap().ate_t_mm.powi(2);
    }
    let expected = sigma * sigma * (3.0 * n - 6.0) / n;
    let got = acc / trials as f64;
    assert!((got / expected - 1.0).abs() < 0.03, "mean squared residual {got} vs {expected}");
}

#[test]
fn collinear_centers_are_rank_deficient() {
    let line = Trajectory::from_poses(
        &(0..5)
            .map(|i| Pose::from_center(Matrix3::identity(), Vector3::new(0.0, 0.0, i as f64)))
            .collect::<Vec<_>>(),
    );
    assert!(matches!(align_rigid(&line, &line, false), Err(nflslam::Error::RankDeficient(_))));
    let short = wavy_trajectory(3);
    assert!(matches!(ate(&wavy_trajectory(4), &short, Alignment::None), Err(nflslam::Error::LengthMismatch(4, 3))));
}

#[test]
fn constant_offset_with_and_without_alignment() {
    let gt = wavy_trajectory(15);
    let est = Trajectory {
        entries: gt
            .entries
            .iter()
            .map(|(i, p)| (*i, Pose::from_center(p.rotation, p.center() + Vector3::new(0.6, 0.0, 0.8))))
            .collect(),
    };
    assert!(ate(&est, &gt, Alignment::Se3).unwrap().ate_t_mm < 1e-9);
    let raw = ate(&est, &gt, Alignment::None).unwrap();
    assert!((raw.ate_t_mm - 1.0).abs() < 1e-12);
    assert!(raw.ate_r_deg < 1e-6);
}

#[test]
fn rotation_error_is_the_geodesic_angle() {
    let gt = wavy_trajectory(10);
    let est = Trajectory {
        entries: gt
            .entries
            .iter()
            .map(|(i, p)| (*i, Pose::from_center(so3_exp(&Vector3::new(0.0, 0.0, 2f64.to_radians())) * p.rotation, p.center())))
            .collect(),
    };
    let r = ate(&est, &gt, Alignment::None).unwrap();
    assert!((r.ate_r_deg - 2.0).abs() < 1e-9, "{}", r.ate_r_deg);
}

#[test]
fn psnr_and_ssim_definitions() {
    assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-12);
    assert_eq!(psnr_from_mse(0.0), PSNR_CAP_DB);
    let img = VectorMap::from_fn(16, 16, |x, y| Vector3::new(x as f64 / 15.0, y as f64 / 15.0, 0.5));
    let m = image_metrics(&img, &img).unwrap();
    assert_eq!(m.psnr_db, PSNR_CAP_DB);
    assert!((m.ssim - 1.0).abs() < 1e-12);
    assert_eq!(m.rmse, 0.0);
    // uniform error of 0.1 in every channel
    let off = img.map(|c| c.map(|v| if v > 0.5 { v - 0.1 } else { v + 0.1 }));
    assert!((image_metrics(&off, &img).unwrap().psnr_db - 20.0).abs() < 1e-9);
    assert!(image_metrics(&img, &VectorMap::filled(8, 8, Vector3::zeros())).is_err());
    assert!(image_metrics(&VectorMap::filled(8, 8, Vector3::zeros()), &VectorMap::filled(8, 8, Vector3::zeros())).is_err());
}

/// SSIM straight from its definition: per window, weighted moments with a
/// 2D Gaussian built from `exp(-(dx² + dy²)/2σ²)`.
fn ssim_oracle(a: &ScalarMap, b: &ScalarMap) -> f64 {
    let (w, h) = (a.width(), a.height());
    let mut kernel = [[0.0; 11]; 11];
    let mut total = 0.0;
    for (j, row) in kernel.iter_mut().enumerate() {
        for (i, v) in row.iter_mut().enumerate() {
            let (dx, dy) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut sum = 0.0;
    let mut count = 0;
    for y0 in 0..=(h - 11) {
        for x0 in 0..=(w - 11) {
            let px = |m: &ScalarMap, i: usize, j: usize| *m.get(x0 + i, y0 + j);
            let mut mu = (0.0, 0.0);
            for j in 0..11 {
                for i in 0..11 {
                    let k = kernel[j][i] / total;
                    mu.0 += k * px(a, i, j);
                    mu.1 += k * px(b, i, j);
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for j in 0..11 {
                for i in 0..11 {
                    let k = kernel[j][i] / total;
                    let (da, db) = (px(a, i, j) - mu.0, px(b, i, j) - mu.1);
                    va += k * da * da;
                    vb += k * db * db;
                    cov += k * da * db;
                }
            }
            sum += (2.0 * mu.0 * mu.1 + c1) * (2.0 * cov + c2) / ((mu.0 * mu.0 + mu.1 * mu.1 + c1) * (va + vb + c2));
            count += 1;
        }
    }
    sum / count as f64
}

#[test]
fn image_metrics_match_direct_formulas() {
    let mut r = common::rng(4);
    for _ in 0..5 {
        let a = common::random_vector_map(&mut r, 17, 14, 0.0, 1.0);
        let b = common::random_vector_map(&mut r, 17, 14, 0.0, 1.0);
        let m = image_metrics(&a, &b).unwrap();
        let mse: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).norm_squared()).sum::<f64>() / (17.0 * 14.0 * 3.0);
        assert!((m.psnr_db - 10.0 * (1.0 / mse).log10()).abs() < 1e-9);
        assert!((m.rmse - mse.sqrt()).abs() < 1e-12);
        let ssim: f64 = (0..3).map(|c| ssim_oracle(&a.map(|v| v[c]), &b.map(|v| v[c]))).sum::<f64>() / 3.0;
        assert!((m.ssim - ssim).abs() < 1e-9, "{} vs {ssim}", m.ssim);
        assert!(m.ssim >= -1.0 && m.ssim <= 1.0);
    }
}

#[test]
fn psnr_falls_as_noise_grows() {
    let mut r = common::rng(5);
    let clean = common::random_vector_map(&mut r, 32, 32, 0.2, 0.8);
    let mut prev = f64::INFINITY;
    for sigma in [0.01, 0.02, 0.05] {
        let normal = Normal::new(0.0, sigma).unwrap();
        let trials = 20;
        let mut acc = 0.0;
        for _ in 0..trials {
            let noisy = clean.map(|c| c.map(|v| (v + normal.sample(&mut r)).clamp(0.0, 1.0)));
            acc += image_metrics(&noisy, &clean).unwrap().psnr_db;
        }
        let psnr = acc / trials as f64;
        assert!(psnr < prev, "sigma {sigma}: {psnr} dB not below {prev} dB");
        prev = psnr;
    }
}

#[test]
fn depth_rmse_uses_valid_pixels_only() {
    let a = ScalarMap::from_vec(2, 2, vec![1.0, 2.0, 0.0, 5.0]).unwrap();
    let b = ScalarMap::from_vec(2, 2, vec![2.0, 2.0, 3.0, 0.0]).unwrap();
    assert!((depth_rmse(&a, &b, None).unwrap().unwrap() - (0.5f64).sqrt()).abs() < 1e-12);
    let none = ScalarMap::filled(2, 2, 0.0);
    assert_eq!(depth_rmse(&none, &b, None).unwrap(), None);
}

#[test]
fn chamfer_hand_cases() {
    let o = vec![Vector3::zeros()];
    assert_eq!(chamfer_gt_to_est(&o, &o).unwrap(), 0.0);
    assert_eq!(chamfer_gt_to_est(&o, &[Vector3::new(1.0, 0.0, 0.0)]).unwrap(), 1.0);
    assert!(chamfer_gt_to_est(&[], &o).is_err());
    assert!(chamfer_gt_to_est(&o, &[]).is_err());
    // one-directional: extra estimate points far away do not matter
    let est = vec![Vector3::zeros(), Vector3::new(100.0, 0.0, 0.0)];
    assert_eq!(chamfer_gt_to_est(&o, &est).unwrap(), 0.0);
    assert_eq!(chamfer_gt_to_est(&est, &o).unwrap(), 50.0);
}

#[test]
fn chamfer_matches_brute_force() {
    let mut r = common::rng(6);
    let normal = Normal::new(0.0, 0.1).unwrap();
    let gt: Vec<Vector3<f64>> = (0..1000)
        .map(|_| Vector3::new(r.random_range(-10.0..10.0), r.random_range(-10.0..10.0), r.random_range(0.0..3.0)))
        .collect();
    let est: Vec<Vector3<f64>> = gt.iter().map(|p| p + Vector3::from_fn(|_, _| normal.sample(&mut r))).collect();
    let brute = gt
        .iter()
        .map(|g| est.iter().map(|e| (g - e).norm()).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / gt.len() as f64;
    assert!((chamfer_gt_to_est(&gt, &est).unwrap() - brute).abs() < 1e-9);

    // a lopsided cloud exercises the ring search far from any estimate
    let far: Vec<Vector3<f64>> = (0..50).map(|i| Vector3::new(500.0 + i as f64, 0.0, 0.0)).collect();
    let brute = far
        .iter()
        .map(|g| est.iter().map(|e| (g - e).norm()).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / far.len() as f64;
    assert!((chamfer_gt_to_est(&far, &est).unwrap() - brute).abs() < 1e-9);
}

#[test]
fn ply_export_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("one.ply");
    let mut scene = GaussianScene::default();
    scene.push(Gaussian3D::isotropic(Vector3::new(1.0, 2.0, 3.0), 0.1, Vector3::new(1.0, 0.0, 0.0), 0.5));
    export_ply(&path, &scene, 2.2).unwrap();
    let cloud = read_ply(&path).unwrap();
    assert_eq!(cloud.points, vec![Vector3::new(1.0f32, 2.0, 3.0)]);
    assert_eq!(cloud.colors, vec![[255, 0, 0]]);

    let mut r = common::rng(1);
    let pts: Vec<Vector3<f64>> = (0..300).map(|_| Vector3::from_fn(|_, _| r.random_range(-50.0..50.0))).collect();
    let cols: Vec<[u8; 3]> = (0..300).map(|i| [i as u8, (i * 7) as u8, 3]).collect();
    let path = dir.path().join("many.ply");
    write_ply(&path, &pts, &cols).unwrap();
    let back = read_ply(&path).unwrap();
    assert_eq!(back.colors, cols);
    for (a, b) in back.points.iter().zip(&pts) {
        assert_eq!(*a, b.map(|v| v as f32));
    }

    let empty = dir.path().join("empty.ply");
    assert!(matches!(export_ply(&empty, &GaussianScene::default(), 2.2), Err(nflslam::Error::EmptyScene)));
    assert!(!empty.exists());
}

#[test]
fn trajectory_csv_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let t = wavy_trajectory(6);
    let path = dir.path().join("t.csv");
    t.write_csv(&path).unwrap();
    let back = Trajectory::read_csv(&path).unwrap();
    for ((i, a), (j, b)) in back.entries.iter().zip(&t.entries) {
        assert_eq!(i, j);
        assert!((a.rotation - b.rotation).norm() < 1e-12 && (a.translation - b.translation).norm() < 1e-12);
    }
    let mut text = t.to_csv();
    text = text.replacen("\n3,", "\n3,oops,", 1);
    std::fs::write(&path, text).unwrap();
    let err = Trajectory::read_csv(&path).unwrap_err().to_string();
    assert!(err.contains("line 5"), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ate_is_invariant_to_a_shared_rigid_motion(seed in 0u64..1000) {
        let mut r = common::rng(seed);
        let gt = wavy_trajectory(12);
        let est = Trajectory {
            entries: gt.entries.iter().map(|(i, p)| (*i, common::random_pose(&mut r, 0.05).compose(p))).collect(),
        };
        let m = common::random_pose(&mut r, 2.0);
        let before = ate(&est, &gt, Alignment::Se3).unwrap();
        let after = ate(&move_world(&est, &m), &move_world(&gt, &m), Alignment::Se3).unwrap();
        prop_assert!((before.ate_t_mm - after.ate_t_mm).abs() < 1e-9);
        prop_assert!((before.ate_r_deg - after.ate_r_deg).abs() < 1e-7);
    }

    #[test]
    fn adding_estimate_points_never_hurts(seed in 0u64..1000) {
        let mut r = common::rng(seed);
        let a: Vec<Vector3<f64>> = (0..60).map(|_| Vector3::from_fn(|_, _| r.random_range(-5.0..5.0))).collect();
        let subset: Vec<Vector3<f64>> = a.iter().step_by(3).copied().collect();
        let mut union = subset.clone();
        union.extend((0..40).map(|_| Vector3::from_fn(|_, _| r.random_range(-5.0..5.0))));
        prop_assert!(chamfer_gt_to_est(&a, &union).unwrap() <= chamfer_gt_to_est(&a, &subset).unwrap());
        prop_assert!(chamfer_gt_to_est(&a, &subset).unwrap() >= 0.0);
    }
}
