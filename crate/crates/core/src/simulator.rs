//! Synthetic near-field-lit tube sequences.
//!
//! A procedural lumen (curved tube with ridges), a fly-through camera path,
//! a sphere-traced renderer using the same diffuse point-light model as
//! [`crate::shading`] (plus an optional specular lobe that the loss does not
//! model), and a depth-corruption model standing in for a learned depth
//! estimator.
//!
//! Units are millimetres. All randomness is derived from one seed with a
//! separate ChaCha stream per consumer, so generation is a pure function of
//! `(config, seed)`.

use std::f64::consts::TAU;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{so3_exp, Intrinsics, Pose};
use crate::maps::{Mask, ScalarMap, VectorMap};

pub const GENERATOR_VERSION: &str = "tube-sim/1";

/// Hit tolerance of the sphere tracer (mm).
pub const MARCH_TOLERANCE: f64 = 1e-3;
pub const MARCH_MAX_STEPS: usize = 512;

const STREAM_SURFACE: u64 = 1;
const STREAM_TRAJECTORY: u64 = 2;
const STREAM_IMAGE_NOISE: u64 = 1 << 20;
const STREAM_DEPTH_NOISE: u64 = 2 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TubeConfig {
    pub radius_mm: f64,
    /// Peak radial deviation of the wall from `radius_mm`.
    pub ridge_amplitude_mm: f64,
    /// Wavelength of the ring-shaped folds along the axis.
    pub ridge_axial_wavelength_mm: f64,
    /// Wavelength of the bumpy cross-sectional pattern.
    pub ridge_lateral_wavelength_mm: f64,
    pub bend_mm: f64,
    pub bend_wavelength_mm: f64,
    /// Base linear albedo.
    pub albedo: [f64; 3],
    /// Relative strength of the albedo texture (0 = uniform).
    pub texture: f64,
    pub texture_wavelength_mm: f64,
}

impl Default for TubeConfig {
    fn default() -> Self {
        Self {
            radius_mm: 20.0,
            ridge_amplitude_mm: 3.0,
            ridge_axial_wavelength_mm: 30.0,
            ridge_lateral_wavelength_mm: 25.0,
            bend_mm: 8.0,
            bend_wavelength_mm: 240.0,
            albedo: [0.85, 0.45, 0.40],
            texture: 0.35,
            texture_wavelength_mm: 12.0,
        }
    }
}

/// Signed distance (lower bound, scaled by a Lipschitz bound) to a curved,
/// ridged tube. Negative inside the lumen.
#[derive(Clone, Debug, PartialEq)]
pub struct TubeSurface {
    pub cfg: TubeConfig,
    bend_phase: [f64; 2],
    axial_phase: f64,
    lateral_phase: [f64; 2],
    /// Random 3D sinusoids `(direction·frequency, phase, weight)` for the texture.
    texture_waves: Vec<(Vector3<f64>, f64, f64)>,
    vessel_waves: Vec<(Vector3<f64>, f64, f64)>,
    lipschitz: f64,
}

/// 70% of the ridge amplitude goes to the axial folds, 30% to the lateral bumps.
const AXIAL_SHARE: f64 = 0.7;

pub fn make_tube_surface(cfg: &TubeConfig, seed: u64) -> Result<TubeSurface> {
    let positive = |v: f64| v.is_finite() && v > 0.0;
    if !positive(cfg.radius_mm) || !(cfg.ridge_amplitude_mm >= 0.0) || cfg.ridge_amplitude_mm >= cfg.radius_mm {
        return Err(Error::Generation(format!(
            "tube needs radius > ridge amplitude >= 0, got radius {} amplitude {}",
            cfg.radius_mm, cfg.ridge_amplitude_mm
        )));
    }
    if !positive(cfg.ridge_axial_wavelength_mm)
        || !positive(cfg.ridge_lateral_wavelength_mm)
        || !positive(cfg.bend_wavelength_mm)
        || !positive(cfg.texture_wavelength_mm)
        || !(cfg.bend_mm >= 0.0)
        || !(cfg.texture >= 0.0)
    {
        return Err(Error::Generation("tube wavelengths must be positive, bend and texture non-negative".into()));
    }
    if cfg.albedo.iter().any(|&a| !(0.0..=1.0).contains(&a)) {
        return Err(Error::Generation(format!("albedo {:?} outside [0, 1]", cfg.albedo)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_SURFACE);
    let mut phase = || rng.random_range(0.0..TAU);
    let bend_phase = [phase(), phase()];
    let axial_phase = phase();
    let lateral_phase = [phase(), phase()];

    let mut waves = |n: usize| -> Vec<(Vector3<f64>, f64, f64)> {
        (0..n)
            .map(|_| {
                let dir = Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
                .try_normalize(1e-9)
                .unwrap_or_else(Vector3::z);
                let freq = TAU / cfg.texture_wavelength_mm * rng.random_range(0.6..1.6);
                (dir * freq, rng.random_range(0.0..TAU), rng.random_range(0.5..1.0))
            })
            .collect()
    };
    let texture_waves = waves(6);
    let vessel_waves = waves(4);

    // the bump moves with the centerline, so its slope also enters the z part:
    // |∇f|² ≤ (1 + B)² + (|c'(z)|·(1 + B) + |∂fold/∂z|)² with B = |∇bump|
    let a_ax = AXIAL_SHARE * cfg.ridge_amplitude_mm;
    let a_lat = (1.0 - AXIAL_SHARE) * cfg.ridge_amplitude_mm;
    let w_ax = TAU / cfg.ridge_axial_wavelength_mm;
    let w_lat = TAU / cfg.ridge_lateral_wavelength_mm;
    let w_bend = TAU / cfg.bend_wavelength_mm;
    let slope = cfg.bend_mm * w_bend * (1.0 + 0.25f64).sqrt();
    let b = a_lat * w_lat * 2f64.sqrt();
    let lipschitz = ((1.0 + b).powi(2) + (slope * (1.0 + b) + a_ax * w_ax).powi(2)).sqrt();

    Ok(TubeSurface {
        cfg: cfg.clone(),
        bend_phase,
        axial_phase,
        lateral_phase,
        texture_waves,
        vessel_waves,
        lipschitz,
    })
}

/// What the ground-truth renderer needs from a surface.
pub trait SurfaceModel: Sync {
    /// Signed distance lower bound; negative on the camera's side.
    fn sdf(&self, p: &Vector3<f64>) -> f64;
    /// Unit normal facing the camera's side.
    fn inward_normal(&self, p: &Vector3<f64>) -> Vector3<f64>;
    /// Linear albedo.
    fn albedo(&self, p: &Vector3<f64>) -> Vector3<f64>;
}

impl SurfaceModel for TubeSurface {
    fn sdf(&self, p: &Vector3<f64>) -> f64 {
        TubeSurface::sdf(self, p)
    }
    fn inward_normal(&self, p: &Vector3<f64>) -> Vector3<f64> {
        TubeSurface::inward_normal(self, p)
    }
    fn albedo(&self, p: &Vector3<f64>) -> Vector3<f64> {
        TubeSurface::albedo(self, p)
    }
}

impl TubeSurface {
    /// Point on the centerline at axial coordinate `z`.
    pub fn centerline(&self, z: f64) -> Vector3<f64> {
        let w = TAU / self.cfg.bend_wavelength_mm;
        Vector3::new(
            self.cfg.bend_mm * (w * z + self.bend_phase[0]).sin(),
            0.5 * self.cfg.bend_mm * (w * z + self.bend_phase[1]).sin(),
            z,
        )
    }

    /// Unscaled implicit function: in-slice distance to the centerline minus
    /// the local wall radius.
    fn implicit(&self, p: &Vector3<f64>) -> f64 {
        let c = self.centerline(p.z);
        let (dx, dy) = (p.x - c.x, p.y - c.y);
        let rho = (dx * dx + dy * dy).sqrt();
        let a_ax = AXIAL_SHARE * self.cfg.ridge_amplitude_mm;
        let a_lat = (1.0 - AXIAL_SHARE) * self.cfg.ridge_amplitude_mm;
        let w_ax = TAU / self.cfg.ridge_axial_wavelength_mm;
        let w_lat = TAU / self.cfg.ridge_lateral_wavelength_mm;
        let fold = a_ax * (w_ax * p.z + self.axial_phase).sin();
        let bump = a_lat * (w_lat * dx + self.lateral_phase[0]).sin() * (w_lat * dy + self.lateral_phase[1]).sin();
        rho - (self.cfg.radius_mm + fold + bump)
    }

    /// Lower bound on the signed distance; negative inside the lumen.
    pub fn sdf(&self, p: &Vector3<f64>) -> f64 {
        self.implicit(p) / self.lipschitz
    }

    pub fn lipschitz_bound(&self) -> f64 {
        self.lipschitz
    }

    /// Unit normal pointing into the lumen (towards decreasing SDF negated),
    /// i.e. the side a camera inside the tube sees.
    pub fn inward_normal(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let h = 1e-4;
        let g = Vector3::from_fn(|i, _| {
            let mut a = *p;
            let mut b = *p;
            a[i] += h;
            b[i] -= h;
            (self.sdf(&a) - self.sdf(&b)) / (2.0 * h)
        });
        -g.try_normalize(1e-12).unwrap_or_else(Vector3::zeros)
    }

    /// Linear albedo at a world point.
    pub fn albedo(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let base = Vector3::from(self.cfg.albedo);
        if self.cfg.texture == 0.0 {
            return base;
        }
        let field = |waves: &[(Vector3<f64>, f64, f64)]| {
            let total: f64 = waves.iter().map(|w| w.2).sum();
            waves.iter().map(|(k, ph, a)| a * (k.dot(p) + ph).sin()).sum::<f64>() / total
        };
        // broad brightness mottling plus darker, redder vessel-like streaks
        let mottle = 1.0 + self.cfg.texture * field(&self.texture_waves);
        let vessel = (field(&self.vessel_waves) * 3.0).tanh().max(0.0);
        let tint = Vector3::new(1.0, 1.0 - 0.8 * self.cfg.texture * vessel, 1.0 - 0.8 * self.cfg.texture * vessel);
        (base.component_mul(&tint) * mottle).map(|v| v.clamp(0.02, 1.0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryConfig {
    /// Axial distance covered by the whole sequence.
    pub length_mm: f64,
    pub start_z_mm: f64,
    /// Amplitude of the camera's sideways weave around the centerline.
    pub lateral_mm: f64,
    pub lateral_wavelength_mm: f64,
    /// The camera looks at the centerline this far ahead.
    pub look_ahead_mm: f64,
    /// Standard deviation of per-frame rotational jitter.
    pub jitter_deg: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            length_mm: 100.0,
            start_z_mm: 0.0,
            lateral_mm: 3.0,
            lateral_wavelength_mm: 70.0,
            look_ahead_mm: 40.0,
            jitter_deg: 0.5,
        }
    }
}

/// World-to-camera poses with camera `+z` looking down the lumen.
pub fn make_trajectory(surface: &TubeSurface, n_frames: usize, cfg: &TrajectoryConfig, seed: u64) -> Result<Vec<Pose>> {
    if n_frames < 2 {
        return Err(Error::Generation(format!("need at least 2 frames, got {n_frames}")));
    }
    if !(cfg.look_ahead_mm > 0.0) || !(cfg.lateral_wavelength_mm > 0.0) || !(cfg.jitter_deg >= 0.0) {
        return Err(Error::Generation("look-ahead and lateral wavelength must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_TRAJECTORY);
    let jitter = Normal::new(0.0, cfg.jitter_deg.to_radians()).map_err(|e| Error::Generation(e.to_string()))?;
    let step = cfg.length_mm / (n_frames - 1) as f64;
    let mut poses = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        let z = cfg.start_z_mm + step * i as f64;
        let phase = TAU * (z - cfg.start_z_mm) / cfg.lateral_wavelength_mm;
        let center = surface.centerline(z) + Vector3::new(cfg.lateral_mm * phase.sin(), 0.5 * cfg.lateral_mm * (1.0 - phase.cos()), 0.0);
        let sd = surface.sdf(&center);
        if !(sd < -1.0) {
            return Err(Error::Generation(format!(
                "camera {i} at {center:?} is not inside the lumen (sdf {sd:.3})"
            )));
        }
        let forward = (surface.centerline(z + cfg.look_ahead_mm) - center).normalize();
        let right = Vector3::y().cross(&forward).normalize();
        let down = forward.cross(&right);
        let mut r_wc = Matrix3::from_columns(&[right, down, forward]);
        if cfg.jitter_deg > 0.0 {
            let w = Vector3::new(jitter.sample(&mut rng), jitter.sample(&mut rng), jitter.sample(&mut rng));
            r_wc *= so3_exp(&w);
        }
        poses.push(Pose::from_center(r_wc.transpose(), center));
    }
    Ok(poses)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Specular {
    pub strength: f64,
    pub shininess: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LightingSpec {
    pub intensity: f64,
    pub beta: f64,
    pub specular: Option<Specular>,
    pub gamma: f64,
    /// Standard deviation of additive noise on the encoded image.
    pub noise_sigma: f64,
}

impl Default for LightingSpec {
    fn default() -> Self {
        Self {
            intensity: 150.0,
            beta: 0.0,
            specular: None,
            gamma: 2.2,
            noise_sigma: 0.0,
        }
    }
}

impl LightingSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.intensity > 0.0) || !(self.gamma > 0.0) || !(self.beta >= 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::Generation(format!("invalid lighting {self:?}")));
        }
        if let Some(s) = self.specular {
            if !(s.strength >= 0.0) || !(s.shininess > 0.0) {
                return Err(Error::Generation(format!("invalid specular lobe {s:?}")));
            }
        }
        Ok(())
    }
}

/// Everything the renderer knows about one frame.
#[derive(Clone, Debug)]
pub struct GroundTruthFrame {
    /// Gamma-encoded image after noise, in `[0, 1]`.
    pub image_srgb: VectorMap,
    /// Linear intensity before encoding and noise (clamped to `[0, 1]`).
    pub image_linear: VectorMap,
    /// Camera-space z-depth; zero where the ray missed.
    pub depth: ScalarMap,
    /// Camera-frame unit normals facing the camera.
    pub normals: VectorMap,
    pub albedo: VectorMap,
    /// Pixels where the specular lobe contributed.
    pub specular_hit: Mask,
    /// Channel values clipped at 1 before encoding.
    pub clipped: usize,
}

pub struct RayHit {
    pub distance: f64,
    pub point: Vector3<f64>,
}

/// Sphere traces from `origin` along unit `dir`; `None` if no hit within
/// `max_distance` or the step budget.
pub fn sphere_trace<S: SurfaceModel + ?Sized>(surface: &S, origin: &Vector3<f64>, dir: &Vector3<f64>, max_distance: f64) -> Option<RayHit> {
    let mut t = 0.0;
    for _ in 0..MARCH_MAX_STEPS {
        let p = origin + dir * t;
        let s = surface.sdf(&p);
        if s.abs() < MARCH_TOLERANCE {
            // polish: a few more steps shrink the residual far below the tolerance
            for _ in 0..32 {
                let s = surface.sdf(&(origin + dir * t));
                if s.abs() < 1e-9 {
                    break;
                }
                t -= s;
            }
            return Some(RayHit {
                distance: t,
                point: origin + dir * t,
            });
        }
        // inside the lumen the SDF is negative; stepping by -s walks towards the wall
        t -= s;
        if t > max_distance || t < 0.0 {
            return None;
        }
    }
    None
}

pub const MAX_TRACE_DISTANCE: f64 = 300.0;

/// Renders one frame with a point light at the camera center.
pub fn render_ground_truth<S: SurfaceModel + ?Sized>(
    surface: &S,
    pose: &Pose,
    k: &Intrinsics,
    lighting: &LightingSpec,
    noise_seed: u64,
    frame_index: u64,
) -> Result<GroundTruthFrame> {
    lighting.validate()?;
    let center = pose.center();
    if !(surface.sdf(&center) < 0.0) {
        return Err(Error::Generation("camera is outside the lumen".into()));
    }
    let r_cw = pose.rotation.transpose();
    let (w, h) = (k.width, k.height);
    struct Px {
        linear: Vector3<f64>,
        depth: f64,
        normal: Vector3<f64>,
        albedo: Vector3<f64>,
        spec: bool,
    }
    let pixels: Vec<Px> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (x, y) = (i % w, i / w);
            let ray = k.ray(x as f64, y as f64);
            let dir_cam = ray.normalize();
            let miss = Px {
                linear: Vector3::zeros(),
                depth: 0.0,
                normal: Vector3::zeros(),
                albedo: Vector3::zeros(),
                spec: false,
            };
            let Some(hit) = sphere_trace(surface, &center, &(r_cw * dir_cam), MAX_TRACE_DISTANCE) else {
                return miss;
            };
            let x_cam = dir_cam * hit.distance;
            let n_cam = pose.rotation * surface.inward_normal(&hit.point);
            let albedo = surface.albedo(&hit.point);
            let d = x_cam.norm();
            let l_dir = -x_cam / d;
            let angular = if lighting.beta == 0.0 {
                1.0
            } else {
                (x_cam / d).z.clamp(0.0, 1.0).powf(lighting.beta)
            };
            let lambert = l_dir.dot(&n_cam).max(0.0);
            let irradiance = lighting.intensity * angular / (d * d);
            let mut linear = albedo * (irradiance * lambert);
            let mut spec = false;
            if let Some(s) = lighting.specular {
                // the viewer and the light coincide, so the half vector is the light direction
                let lobe = s.strength * irradiance * lambert.powf(s.shininess);
                if lobe > 0.0 {
                    linear += Vector3::repeat(lobe);
                    spec = true;
                }
            }
            Px {
                linear,
                depth: x_cam.z,
                normal: n_cam,
                albedo,
                spec,
            }
        })
        .collect();

    let mut clipped = 0;
    let image_linear = VectorMap::from_fn(w, h, |x, y| {
        let v = pixels[y * w + x].linear;
        clipped += v.iter().filter(|&&c| c > 1.0).count();
        v.map(|c| c.clamp(0.0, 1.0))
    });
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    rng.set_stream(STREAM_IMAGE_NOISE + frame_index);
    let noise = Normal::new(0.0, lighting.noise_sigma.max(0.0)).map_err(|e| Error::Generation(e.to_string()))?;
    let image_srgb = image_linear.map(|c| c.map(|v| v.powf(1.0 / lighting.gamma)));
    let image_srgb = if lighting.noise_sigma > 0.0 {
        image_srgb.map(|c| c.map(|v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0)))
    } else {
        image_srgb
    };
    Ok(GroundTruthFrame {
        image_srgb,
        image_linear,
        depth: ScalarMap::from_fn(w, h, |x, y| pixels[y * w + x].depth),
        normals: VectorMap::from_fn(w, h, |x, y| pixels[y * w + x].normal),
        albedo: VectorMap::from_fn(w, h, |x, y| pixels[y * w + x].albedo),
        specular_hit: Mask::from_fn(w, h, |x, y| pixels[y * w + x].spec),
        clipped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DepthNoiseConfig {
    /// Peak relative amplitude of the smooth multiplicative bias field.
    pub bias: f64,
    /// Per-pixel noise standard deviation as a fraction of depth.
    pub sigma_frac: f64,
}

impl Default for DepthNoiseConfig {
    fn default() -> Self {
        Self {
            bias: 0.1,
            sigma_frac: 0.05,
        }
    }
}

/// `d · (b(p) + σ·n(p))`, clamped at zero, with `b` a smooth field in
/// `[1 − bias, 1 + bias]` and `n` standard normal. Missing depth stays zero.
pub fn corrupt_depth(depth: &ScalarMap, cfg: &DepthNoiseConfig, seed: u64, frame_index: u64) -> ScalarMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_DEPTH_NOISE + frame_index);
    let (w, h) = (depth.width() as f64, depth.height() as f64);
    // three random low-frequency plane waves, normalized to unit peak
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(-1.5..1.5) * TAU / w,
                rng.random_range(-1.5..1.5) * TAU / h,
                rng.random_range(0.0..TAU),
            )
        })
        .collect();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = depth.clone();
    let width = depth.width();
    for (i, d) in out.data_mut().iter_mut().enumerate() {
        let (x, y) = ((i % width) as f64, (i / width) as f64);
        let field = waves.iter().map(|(fx, fy, ph)| (fx * x + fy * y + ph).sin()).sum::<f64>() / waves.len() as f64;
        let n: f64 = normal.sample(&mut rng);
        if *d > 0.0 {
            *d = (*d * (1.0 + cfg.bias * field + cfg.sigma_frac * n)).max(0.0);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub n_frames: usize,
    pub width: usize,
    pub height: usize,
    pub fov_deg: f64,
    /// Millimetres per unit of the 16-bit depth images.
    pub depth_scale: f64,
    pub tube: TubeConfig,
    pub trajectory: TrajectoryConfig,
    pub lighting: LightingSpec,
    pub depth_noise: DepthNoiseConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_frames: 30,
            width: 64,
            height: 64,
            fov_deg: 80.0,
            depth_scale: 0.01,
            tube: TubeConfig::default(),
            trajectory: TrajectoryConfig::default(),
            lighting: LightingSpec::default(),
            depth_noise: DepthNoiseConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn intrinsics(&self) -> Result<Intrinsics> {
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(Error::Generation(format!("field of view {} outside (0, 180)", self.fov_deg)));
        }
        Intrinsics::from_fov(self.width, self.height, self.fov_deg)
    }
}

/// One simulated frame ready to be written or fed to SLAM.
#[derive(Clone, Debug)]
pub struct SimFrame {
    pub index: usize,
    pub gt: GroundTruthFrame,
    pub depth_noisy: ScalarMap,
}

#[derive(Clone, Debug)]
pub struct Simulation {
    pub cfg: SimConfig,
    pub intrinsics: Intrinsics,
    pub surface: TubeSurface,
    pub poses: Vec<Pose>,
    pub frames: Vec<SimFrame>,
}

/// Generates a full sequence from `cfg` (all randomness from `cfg.seed`).
pub fn simulate(cfg: &SimConfig) -> Result<Simulation> {
    let k = cfg.intrinsics()?;
    if !(cfg.depth_scale > 0.0) {
        return Err(Error::Generation("depth_scale must be positive".into()));
    }
    let surface = make_tube_surface(&cfg.tube, cfg.seed)?;
    let poses = make_trajectory(&surface, cfg.n_frames, &cfg.trajectory, cfg.seed)?;
    let frames = poses
        .iter()
        .enumerate()
        .map(|(i, pose)| {
            let gt = render_ground_truth(&surface, pose, &k, &cfg.lighting, cfg.seed, i as u64)?;
            let depth_noisy = corrupt_depth(&gt.depth, &cfg.depth_noise, cfg.seed, i as u64);
            Ok(SimFrame { index: i, gt, depth_noisy })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Simulation {
        cfg: cfg.clone(),
        intrinsics: k,
        surface,
        poses,
        frames,
    })
}

/// Ground-truth point cloud: every valid depth pixel of every frame,
/// back-projected to world coordinates, thinned by `stride`.
pub fn ground_truth_cloud(depths: &[ScalarMap], poses: &[Pose], k: &Intrinsics, stride: usize) -> Vec<Vector3<f64>> {
    let stride = stride.max(1);
    let mut out = Vec::new();
    for (depth, pose) in depths.iter().zip(poses) {
        let inv = pose.inverse();
        for y in (0..depth.height()).step_by(stride) {
            for x in (0..depth.width()).step_by(stride) {
                let d = *depth.get(x, y);
                if d > 0.0 {
                    out.push(inv.transform_point(&(k.ray(x as f64, y as f64) * d)));
                }
            }
        }
    }
    out
}
