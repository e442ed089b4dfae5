#![allow(dead_code)]

use nalgebra::{Quaternion, Vector3, Vector6};
use nflslam::geometry::{se3_exp, Gaussian3D, GaussianScene, Intrinsics, Pose};
use nflslam::losses::FrameTargets;
use nflslam::maps::{Mask, ScalarMap, VectorMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn small_intrinsics() -> Intrinsics {
    Intrinsics::new(10.0, 10.0, 3.5, 3.5, 8, 8).unwrap()
}

pub fn random_gaussian(r: &mut ChaCha8Rng) -> Gaussian3D {
    let z = r.random_range(3.0..6.0);
    let mut scale = Vector3::new(r.random_range(0.25..0.6), r.random_range(0.25..0.6), r.random_range(0.08..0.2));
    // distinct axes so the normal is well defined
    scale.swap_rows(2, r.random_range(0..3));
    let q = Quaternion::new(
        r.random_range(-1.0..1.0),
        r.random_range(-1.0..1.0),
        r.random_range(-1.0..1.0),
        r.random_range(-1.0..1.0),
    )
    .normalize();
    Gaussian3D {
        mean: Vector3::new(r.random_range(-0.25..0.25) * z, r.random_range(-0.25..0.25) * z, z),
        scale,
        rotation: q,
        color: Vector3::new(r.random_range(0.0..1.0), r.random_range(0.0..1.0), r.random_range(0.0..1.0)),
        opacity: r.random_range(0.3..0.9),
    }
}

pub fn random_scene(r: &mut ChaCha8Rng, n: usize) -> GaussianScene {
    GaussianScene::new((0..n).map(|_| random_gaussian(r)).collect())
}

pub fn random_pose(r: &mut ChaCha8Rng, magnitude: f64) -> Pose {
    let xi = Vector6::from_fn(|_, _| r.random_range(-magnitude..magnitude));
    se3_exp(&xi)
}

pub fn random_vector_map(r: &mut ChaCha8Rng, w: usize, h: usize, lo: f64, hi: f64) -> VectorMap {
    VectorMap::from_fn(w, h, |_, _| Vector3::new(r.random_range(lo..hi), r.random_range(lo..hi), r.random_range(lo..hi)))
}

pub fn random_scalar_map(r: &mut ChaCha8Rng, w: usize, h: usize, lo: f64, hi: f64) -> ScalarMap {
    ScalarMap::from_fn(w, h, |_, _| r.random_range(lo..hi))
}

pub fn random_targets(r: &mut ChaCha8Rng, w: usize, h: usize) -> FrameTargets {
    FrameTargets {
        image_linear: random_vector_map(r, w, h, 0.0, 0.8),
        albedo: random_vector_map(r, w, h, 0.3, 1.0),
        depth: Some(random_scalar_map(r, w, h, 2.0, 7.0)),
        photometric_mask: Mask::filled(w, h, true),
        specular_mask: Mask::filled(w, h, true),
        crop_mask: Mask::filled(w, h, true),
    }
}

/// Combined absolute/relative agreement used by every finite-difference check.
pub fn grad_close(analytic: f64, numeric: f64, rtol: f64, atol: f64) -> bool {
    (analytic - numeric).abs() <= atol + rtol * analytic.abs().max(numeric.abs())
}

/// Every scalar parameter of a scene and pose, addressable for perturbation.
#[derive(Clone, Copy, Debug)]
pub enum Param {
    Mean(usize, usize),
    LogScale(usize, usize),
    Quat(usize, usize),
    Color(usize, usize),
    Opacity(usize),
    Pose(usize),
}

impl Param {
    pub fn step(&self) -> f64 {
        match self {
            Param::Mean(..) | Param::Color(..) => 1e-4,
            _ => 1e-5,
        }
    }
}

pub fn all_params(n: usize) -> Vec<Param> {
    let mut out = Vec::new();
    for i in 0..n {
        for a in 0..3 {
            out.push(Param::Mean(i, a));
        }
        for a in 0..3 {
            out.push(Param::LogScale(i, a));
        }
        for a in 0..4 {
            out.push(Param::Quat(i, a));
        }
        for a in 0..3 {
            out.push(Param::Color(i, a));
        }
        out.push(Param::Opacity(i));
    }
    for a in 0..6 {
        out.push(Param::Pose(a));
    }
    out
}

/// Returns a perturbed copy of `(scene, pose)`; quaternion index order is `(w, x, y, z)`.
pub fn perturb(scene: &GaussianScene, pose: &Pose, p: Param, h: f64) -> (GaussianScene, Pose) {
    let mut s = scene.clone();
    let mut pose = *pose;
    match p {
        Param::Mean(i, a) => s.gaussians[i].mean[a] += h,
        Param::LogScale(i, a) => s.gaussians[i].scale[a] *= h.exp(),
        Param::Quat(i, a) => s.gaussians[i].rotation.coords[(a + 3) % 4] += h,
        Param::Color(i, a) => s.gaussians[i].color[a] += h,
        Param::Opacity(i) => s.gaussians[i].opacity += h,
        Param::Pose(a) => {
            let mut xi = Vector6::zeros();
            xi[a] = h;
            pose = se3_exp(&xi).compose(&pose);
        }
    }
    (s, pose)
}

pub fn analytic_value(grads: &nflslam::splatter::GradientSet, p: Param) -> f64 {
    match p {
        Param::Mean(i, a) => grads.gaussians[i].mean[a],
        Param::LogScale(i, a) => grads.gaussians[i].log_scale[a],
        Param::Quat(i, a) => grads.gaussians[i].rotation[a],
        Param::Color(i, a) => grads.gaussians[i].color[a],
        Param::Opacity(i) => grads.gaussians[i].opacity,
        Param::Pose(a) => grads.pose[a],
    }
}

/// Central differences of `f` for every parameter, compared against `grads`.
/// Returns the list of mismatches as human-readable strings.
pub fn check_gradients(
    scene: &GaussianScene,
    pose: &Pose,
    grads: &nflslam::splatter::GradientSet,
    params: &[Param],
    rtol: f64,
    atol: f64,
    f: impl Fn(&GaussianScene, &Pose) -> f64,
) -> Vec<String> {
    let mut bad = Vec::new();
    for &p in params {
        let h = p.step();
        let (sp, pp) = perturb(scene, pose, p, h);
        let (sm, pm) = perturb(scene, pose, p, -h);
        let fd = (f(&sp, &pp) - f(&sm, &pm)) / (2.0 * h);
        let an = analytic_value(grads, p);
        if !grad_close(an, fd, rtol, atol) {
            bad.push(format!("{p:?}: analytic {an:.9e} vs fd {fd:.9e}"));
        }
    }
    bad
}
