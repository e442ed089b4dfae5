//! Alternating tracking / mapping driver.
//!
//! Each incoming frame is first tracked (pose-only optimization of the
//! tracking objective from a constant-velocity guess). Keyframes then grow
//! the map where it is thin and trigger a mapping round over a sliding
//! window of keyframes (Gaussian parameters only, unless pose refinement is
//! enabled). Both phases use Adam with per-parameter-group step sizes.

use nalgebra::{Quaternion, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DepthMode};
use crate::error::{Error, Result};
use crate::geometry::{Gaussian3D, GaussianScene, Intrinsics, Pose};
use crate::losses::{self, FrameTargets, LossReport, LossWeights, ObjectiveOptions, Phase};
use crate::maps::{Mask, ScalarMap, VectorMap};
use crate::shading;
use crate::splatter::{self, GradientSet, RenderOptions, RenderOutput, NORMALIZED_DEPTH_MIN_ALPHA};

/// Where a frame's depth map came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthSource {
    GroundTruth,
    Noisy,
    None,
}

#[derive(Clone, Debug)]
pub struct Frame {
    pub index: usize,
    pub image_srgb: VectorMap,
    pub depth: Option<ScalarMap>,
    pub depth_source: DepthSource,
    pub timestamp: f64,
}

impl Frame {
    pub fn from_dataset(dataset: &Dataset, mode: DepthMode, i: usize) -> Result<Frame> {
        let f = dataset
            .frames
            .get(i)
            .ok_or_else(|| Error::invalid(format!("frame {i} out of range")))?;
        let depth = f.depth(mode).cloned();
        if mode != DepthMode::None && depth.is_none() {
            return Err(Error::Config(format!("frame {i} has no depth for mode {mode:?}")));
        }
        Ok(Frame {
            index: f.index,
            image_srgb: f.image_srgb.clone(),
            depth,
            depth_source: match mode {
                DepthMode::Gt => DepthSource::GroundTruth,
                DepthMode::Noisy => DepthSource::Noisy,
                DepthMode::None => DepthSource::None,
            },
            timestamp: f.index as f64 / FRAME_RATE,
        })
    }
}

/// Nominal frame rate used for timestamps of synthetic sequences.
pub const FRAME_RATE: f64 = 30.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    /// Multiplied by the scene scale (median depth of the first frame).
    pub mean: f64,
    pub log_scale: f64,
    pub rotation: f64,
    pub color: f64,
    pub opacity: f64,
    pub pose_rotation: f64,
    /// Multiplied by the scene scale.
    pub pose_translation: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            mean: 1.6e-4,
            log_scale: 5e-3,
            rotation: 1e-3,
            color: 2.5e-3,
            opacity: 5e-2,
            pose_rotation: 3e-3,
            pose_translation: 1e-2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlamConfig {
    pub weights: LossWeights,
    pub beta: f64,
    pub gamma: f64,
    pub specular_tau: f64,
    pub crop_fraction: f64,
    /// Photometric depth term on alpha-normalized rendered depth.
    pub normalized_depth: bool,
    /// Also exclude specular pixels from the photometric term.
    pub photometric_specular_mask: bool,
    pub tracking_iters: usize,
    /// Tracking step sizes decay exponentially to this fraction over the iterations.
    pub tracking_lr_final: f64,
    pub mapping_iters: usize,
    pub window: usize,
    pub keyframe_every: usize,
    pub keyframe_dist_mm: f64,
    pub mapping_refines_poses: bool,
    pub lr: LearningRates,
    pub densify_stride: usize,
    /// Pixels with less accumulated opacity than this receive new Gaussians.
    pub densify_alpha: f64,
    pub init_scale_factor: f64,
    /// Ratio of the normal-axis scale to the in-plane scale of new Gaussians
    /// (1 = isotropic).
    pub init_flatten: f64,
    pub init_opacity: f64,
    pub prune_opacity: f64,
    pub prune_every: usize,
    /// Depth assumed for new Gaussians when neither the frame nor the map provides one.
    pub mono_init_depth_mm: f64,
    pub near_plane: f64,
    pub tile_size: usize,
}

impl Default for SlamConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            beta: 0.0,
            gamma: 2.2,
            specular_tau: 0.95,
            crop_fraction: 0.75,
            normalized_depth: true,
            photometric_specular_mask: true,
            tracking_iters: 100,
            tracking_lr_final: 0.1,
            mapping_iters: 60,
            window: 10,
            keyframe_every: 5,
            keyframe_dist_mm: 10.0,
            mapping_refines_poses: false,
            lr: LearningRates::default(),
            densify_stride: 2,
            densify_alpha: 0.5,
            init_scale_factor: 0.03,
            init_flatten: 0.3,
            init_opacity: 0.5,
            prune_opacity: 0.05,
            prune_every: 2,
            mono_init_depth_mm: 30.0,
            near_plane: 0.2,
            tile_size: 16,
        }
    }
}

impl SlamConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.beta >= 0.0) {
            return bad("beta must be non-negative");
        }
        if !(self.gamma > 0.0) {
            return bad("gamma must be positive");
        }
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return bad("crop_fraction must lie in (0, 1]");
        }
        if self.window == 0 || self.keyframe_every == 0 || self.densify_stride == 0 || self.prune_every == 0 || self.tile_size == 0 {
            return bad("window, keyframe_every, densify_stride, prune_every and tile_size must be positive");
        }
        if !(self.init_scale_factor > 0.0) || !(self.init_flatten > 0.0 && self.init_flatten <= 1.0) {
            return bad("init_scale_factor must be positive and init_flatten in (0, 1]");
        }
        if !(self.tracking_lr_final > 0.0 && self.tracking_lr_final <= 1.0) {
            return bad("tracking_lr_final must lie in (0, 1]");
        }
        if !(self.init_opacity > 0.0 && self.init_opacity < 1.0) {
            return bad("init_opacity must lie in (0, 1)");
        }
        if !(self.mono_init_depth_mm > self.near_plane) || !(self.near_plane > 0.0) {
            return bad("mono_init_depth_mm must exceed a positive near_plane");
        }
        let lr = &self.lr;
        for v in [lr.mean, lr.log_scale, lr.rotation, lr.color, lr.opacity, lr.pose_rotation, lr.pose_translation] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad("learning rates must be finite and non-negative");
            }
        }
        Ok(())
    }

    pub fn render_options(&self) -> RenderOptions {
        RenderOptions {
            near_plane: self.near_plane,
            tile_size: self.tile_size,
            ..RenderOptions::default()
        }
    }

    pub fn objective_options(&self) -> ObjectiveOptions {
        ObjectiveOptions {
            render: self.render_options(),
            beta: self.beta,
            normalized_depth: self.normalized_depth,
            mapping_pose_gradient: self.mapping_refines_poses,
        }
    }
}

/// Linearized image, albedo estimate and masks for one frame.
pub fn prepare_targets(frame: &Frame, cfg: &SlamConfig) -> Result<FrameTargets> {
    let (w, h) = (frame.image_srgb.width(), frame.image_srgb.height());
    let (image_linear, _) = shading::srgb_to_linear(&frame.image_srgb, cfg.gamma);
    let albedo = shading::estimate_albedo(&frame.image_srgb, cfg.gamma);
    let specular_mask = shading::specular_mask(&image_linear, cfg.specular_tau);
    let crop_mask = shading::center_crop_mask(w, h, cfg.crop_fraction)?;
    let photometric_mask = if cfg.photometric_specular_mask {
        specular_mask.clone()
    } else {
        Mask::filled(w, h, true)
    };
    if let Some(d) = &frame.depth {
        frame.image_srgb.ensure_shape(d, "frame depth")?;
    }
    Ok(FrameTargets {
        image_linear,
        albedo,
        depth: frame.depth.clone(),
        photometric_mask,
        specular_mask,
        crop_mask,
    })
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-12;

/// Per-parameter Adam moments; `t` counts the steps taken by this parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<const N: usize> {
    pub m: [f64; N],
    pub v: [f64; N],
    pub t: u32,
}

impl<const N: usize> Default for Adam<N> {
    fn default() -> Self {
        Self {
            m: [0.0; N],
            v: [0.0; N],
            t: 0,
        }
    }
}

impl<const N: usize> Adam<N> {
    /// Descent step for gradient `g` with per-component learning rates.
    pub fn step(&mut self, g: &[f64; N], lr: &[f64; N]) -> [f64; N] {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let mut out = [0.0; N];
        for i in 0..N {
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g[i];
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            out[i] = -lr[i] * mh / (vh.sqrt() + ADAM_EPS);
        }
        out
    }
}

/// Parameters of one Gaussian in optimizer order: mean (3), log-scale (3),
/// quaternion `(w, x, y, z)` (4), color (3), opacity logit (1).
pub const GAUSSIAN_PARAMS: usize = 14;

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const MIN_SCALE: f64 = 1e-3;
const MAX_SCALE: f64 = 50.0;

fn gaussian_lrs(lr: &LearningRates, scene_scale: f64) -> [f64; GAUSSIAN_PARAMS] {
    let m = lr.mean * scene_scale;
    [
        m, m, m, lr.log_scale, lr.log_scale, lr.log_scale, lr.rotation, lr.rotation, lr.rotation, lr.rotation, lr.color,
        lr.color, lr.color, lr.opacity,
    ]
}

fn pose_lrs(lr: &LearningRates, scene_scale: f64) -> [f64; 6] {
    let t = lr.pose_translation * scene_scale;
    [t, t, t, lr.pose_rotation, lr.pose_rotation, lr.pose_rotation]
}

/// Applies one Adam step to every Gaussian (state kept aligned with the scene).
fn step_gaussians(scene: &mut GaussianScene, adam: &mut [Adam<GAUSSIAN_PARAMS>], grads: &GradientSet, lrs: &[f64; GAUSSIAN_PARAMS]) {
    for ((g, st), gr) in scene.gaussians.iter_mut().zip(adam.iter_mut()).zip(&grads.gaussians) {
        if gr.is_zero() {
            // untouched this iteration: moments keep their value, as for a sparse optimizer
            continue;
        }
        let o = g.opacity;
        let flat: [f64; GAUSSIAN_PARAMS] = [
            gr.mean.x,
            gr.mean.y,
            gr.mean.z,
            gr.log_scale.x,
            gr.log_scale.y,
            gr.log_scale.z,
            gr.rotation[0],
            gr.rotation[1],
            gr.rotation[2],
            gr.rotation[3],
            gr.color.x,
            gr.color.y,
            gr.color.z,
            gr.opacity * o * (1.0 - o),
        ];
        let s = st.step(&flat, lrs);
        g.mean += Vector3::new(s[0], s[1], s[2]);
        for a in 0..3 {
            g.scale[a] = (g.scale[a] * s[3 + a].exp()).clamp(MIN_SCALE, MAX_SCALE);
        }
        let q = g.rotation;
        let q = Quaternion::new(q.w + s[6], q.i + s[7], q.j + s[8], q.k + s[9]);
        g.rotation = if q.norm() > 1e-12 { q.normalize() } else { g.rotation };
        g.color = (g.color + Vector3::new(s[10], s[11], s[12])).map(|c| c.clamp(0.0, 1.0));
        g.opacity = sigmoid(logit(o) + s[13]);
    }
}

#[derive(Clone, Debug)]
pub struct Keyframe {
    pub index: usize,
    pub pose: Pose,
    pub targets: FrameTargets,
    pub pose_adam: Adam<6>,
}

/// Objective values at the start and at the end of one optimization step.
#[derive(Clone, Debug, Serialize)]
pub struct StepLog {
    pub frame: usize,
    pub phase: &'static str,
    pub iterations: usize,
    pub initial: LossReport,
    pub last: LossReport,
    /// Lowest total seen (tracking returns the pose that achieved it).
    pub best_total: f64,
}

#[derive(Clone, Debug)]
pub struct SlamState {
    pub scene: GaussianScene,
    pub trajectory: Vec<(usize, Pose)>,
    pub keyframes: Vec<Keyframe>,
    pub logs: Vec<StepLog>,
    pub adam: Vec<Adam<GAUSSIAN_PARAMS>>,
    /// Median depth of the first frame's seeded points; scales translation step sizes.
    pub scene_scale: f64,
    pub k: Intrinsics,
    pub inserted: usize,
    pub pruned: usize,
}

impl SlamState {
    pub fn new(k: Intrinsics) -> Self {
        Self {
            scene: GaussianScene::default(),
            trajectory: Vec::new(),
            keyframes: Vec::new(),
            logs: Vec::new(),
            adam: Vec::new(),
            scene_scale: 1.0,
            k,
            inserted: 0,
            pruned: 0,
        }
    }

    pub fn keyframe_indices(&self) -> Vec<usize> {
        self.keyframes.iter().map(|k| k.index).collect()
    }

    fn push_gaussian(&mut self, g: Gaussian3D) {
        self.scene.push(g);
        self.adam.push(Adam::default());
        self.inserted += 1;
    }
}

/// Objective with a fallback: when the near-field term is undefined (no
/// pixel with a usable normal, or a vanishing model) it is dropped for this
/// evaluation instead of aborting the step.
pub fn objective_with_fallback(
    targets: &FrameTargets,
    scene: &GaussianScene,
    pose: &Pose,
    k: &Intrinsics,
    weights: &LossWeights,
    phase: Phase,
    opts: &ObjectiveOptions,
) -> Result<(LossReport, GradientSet)> {
    let render = splatter::render(scene, pose, k, &opts.render)?;
    match losses::total_objective_from_render(targets, scene, pose, k, weights, phase, opts, &render) {
        Err(Error::DegenerateModel(_)) | Err(Error::DegenerateMask) if weights.lambda_nfl(phase) > 0.0 => {
            log::debug!("near-field term undefined, evaluating without it");
            losses::total_objective_from_render(targets, scene, pose, k, &weights.without_nfl(), phase, opts, &render)
        }
        other => other,
    }
}

/// Optimizes the pose of one frame against the current map starting from
/// `init`; returns the lowest-objective pose visited.
pub fn track_frame(state: &mut SlamState, targets: &FrameTargets, frame_index: usize, init: Pose, cfg: &SlamConfig) -> Result<Pose> {
    if state.scene.is_empty() {
        return Err(Error::EmptyScene);
    }
    let opts = cfg.objective_options();
    let lrs = pose_lrs(&cfg.lr, state.scene_scale);
    let mut adam = Adam::<6>::default();
    let mut pose = init;
    let mut best = (f64::INFINITY, init);
    let mut initial = None;
    let mut last = LossReport::default();
    let fail = |reason: String, best: Pose| Error::TrackingFailure {
        frame: frame_index,
        reason,
        best: Box::new(best),
    };
    for it in 0..=cfg.tracking_iters {
        let (report, grads) = objective_with_fallback(targets, &state.scene, &pose, &state.k, &cfg.weights, Phase::Tracking, &opts)
            .map_err(|e| fail(e.to_string(), best.1))?;
        if !report.total.is_finite() || !grads.pose.iter().all(|v| v.is_finite()) {
            return Err(fail(format!("objective diverged at iteration {it}"), best.1));
        }
        if report.total < best.0 {
            best = (report.total, pose);
        }
        if initial.is_none() {
            initial = Some(report.clone());
        }
        last = report;
        if it == cfg.tracking_iters {
            break;
        }
        let g: [f64; 6] = grads.pose.into();
        let decay = cfg.tracking_lr_final.powf(it as f64 / cfg.tracking_iters as f64);
        let step = adam.step(&g, &lrs.map(|l| l * decay));
        pose = pose.retract_left(&Vector6::from(step));
    }
    state.logs.push(StepLog {
        frame: frame_index,
        phase: "tracking",
        iterations: cfg.tracking_iters,
        initial: initial.unwrap_or_default(),
        last,
        best_total: best.0,
    });
    Ok(best.1)
}

/// Keyframe rule: every `keyframe_every`-th frame, or when the camera moved
/// more than `keyframe_dist_mm` since the last keyframe.
pub fn select_keyframe(state: &SlamState, frame_index: usize, pose: &Pose, cfg: &SlamConfig) -> bool {
    if frame_index % cfg.keyframe_every == 0 {
        return true;
    }
    match state.keyframes.last() {
        Some(kf) => (kf.pose.center() - pose.center()).norm() > cfg.keyframe_dist_mm,
        None => true,
    }
}

/// Optimizes the map over the last `cfg.window` keyframes, cycling through
/// them for `cfg.mapping_iters` iterations.
pub fn map_update(state: &mut SlamState, cfg: &SlamConfig) -> Result<()> {
    if state.keyframes.is_empty() {
        return Err(Error::NoKeyframes);
    }
    if state.scene.is_empty() {
        return Err(Error::EmptyScene);
    }
    let opts = cfg.objective_options();
    let n = state.keyframes.len();
    let start = n.saturating_sub(cfg.window);
    let window = n - start;
    let glrs = gaussian_lrs(&cfg.lr, state.scene_scale);
    let plrs = pose_lrs(&cfg.lr, state.scene_scale);
    let mut initial = None;
    let mut last = LossReport::default();
    let mut best = f64::INFINITY;
    for it in 0..cfg.mapping_iters {
        // newest keyframe first
        let ki = n - 1 - (it % window);
        let kf = &state.keyframes[ki];
        let (report, grads) = objective_with_fallback(&kf.targets, &state.scene, &kf.pose, &state.k, &cfg.weights, Phase::Mapping, &opts)?;
        if !report.total.is_finite() || !grads.is_finite() {
            return Err(Error::invalid(format!("mapping objective diverged at iteration {it}")));
        }
        if initial.is_none() {
            initial = Some(report.clone());
        }
        best = best.min(report.total);
        last = report;
        step_gaussians(&mut state.scene, &mut state.adam, &grads, &glrs);
        if cfg.mapping_refines_poses && ki != 0 {
            // the first keyframe anchors the world frame
            let kf = &mut state.keyframes[ki];
            let g: [f64; 6] = grads.pose.into();
            let step = kf.pose_adam.step(&g, &plrs);
            kf.pose = kf.pose.retract_left(&Vector6::from(step));
            let (idx, pose) = (kf.index, kf.pose);
            if let Some(entry) = state.trajectory.iter_mut().find(|(i, _)| *i == idx) {
                entry.1 = pose;
            }
        }
    }
    state.logs.push(StepLog {
        frame: state.keyframes[n - 1].index,
        phase: "mapping",
        iterations: cfg.mapping_iters,
        initial: initial.unwrap_or_default(),
        last,
        best_total: best,
    });
    Ok(())
}

/// Sum of the mapping objective over the current window (diagnostics and tests).
pub fn window_objective(state: &SlamState, cfg: &SlamConfig) -> Result<f64> {
    let opts = cfg.objective_options();
    let n = state.keyframes.len();
    let mut total = 0.0;
    for kf in &state.keyframes[n.saturating_sub(cfg.window)..] {
        total += objective_with_fallback(&kf.targets, &state.scene, &kf.pose, &state.k, &cfg.weights, Phase::Mapping, &opts)?
            .0
            .total;
    }
    Ok(total)
}

/// Camera-frame unit normal at pixel `(x, y)` from neighbouring back-projected
/// depth samples `reach` pixels away, oriented towards the camera. Falls
/// back to the reversed viewing ray.
fn depth_normal(depth: &ScalarMap, k: &Intrinsics, x: usize, y: usize, reach: usize) -> Vector3<f64> {
    let (w, h) = (depth.width(), depth.height());
    let point = |x: usize, y: usize| {
        let d = *depth.get(x, y);
        (d > 0.0).then(|| k.ray(x as f64, y as f64) * d)
    };
    let ray = k.ray(x as f64, y as f64);
    let fallback = -ray.normalize();
    let (x0, x1) = (x.saturating_sub(reach), (x + reach).min(w - 1));
    let (y0, y1) = (y.saturating_sub(reach), (y + reach).min(h - 1));
    if x0 == x1 || y0 == y1 {
        return fallback;
    }
    let (Some(a), Some(b), Some(c), Some(d)) = (point(x1, y), point(x0, y), point(x, y1), point(x, y0)) else {
        return fallback;
    };
    let Some(n) = (a - b).cross(&(c - d)).try_normalize(1e-12) else {
        return fallback;
    };
    // grazing estimates from noisy depth are unreliable
    if n.dot(&ray.normalize()).abs() < 0.05 {
        return fallback;
    }
    if n.dot(&ray) > 0.0 {
        -n
    } else {
        n
    }
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    Some(v[v.len() / 2])
}

/// Inserts flattened Gaussians on a `densify_stride` grid wherever the
/// current render is thin, using the frame depth, else the rendered depth,
/// else `mono_init_depth_mm`. Returns the number inserted.
pub fn densify(state: &mut SlamState, targets: &FrameTargets, pose: &Pose, render: Option<&RenderOutput>, cfg: &SlamConfig) -> usize {
    let k = state.k;
    let (w, h) = (k.width, k.height);
    let rendered_depth = render.map(|r| r.normalized_depth(NORMALIZED_DEPTH_MIN_ALPHA));
    let fallback_depth = rendered_depth
        .as_ref()
        .zip(render)
        .and_then(|(d, r)| {
            median(
                d.data()
                    .iter()
                    .zip(r.accum_alpha.data())
                    .filter(|(_, &a)| a > 0.5)
                    .map(|(&d, _)| d)
                    .collect(),
            )
        })
        .unwrap_or(cfg.mono_init_depth_mm);
    let depth_map = match &targets.depth {
        Some(d) => d.clone(),
        None => ScalarMap::filled(w, h, fallback_depth),
    };
    let to_world = pose.inverse();
    let offset = cfg.densify_stride / 2;
    let mut added = 0;
    for y in (offset..h).step_by(cfg.densify_stride) {
        for x in (offset..w).step_by(cfg.densify_stride) {
            if render.is_some_and(|r| *r.accum_alpha.get(x, y) >= cfg.densify_alpha) {
                continue;
            }
            let d = *depth_map.get(x, y);
            if !(d > cfg.near_plane) {
                continue;
            }
            let n_cam = depth_normal(&depth_map, &k, x, y, cfg.densify_stride);
            let n_world = to_world.rotation * n_cam;
            let rot = UnitQuaternion::rotation_between(&Vector3::z(), &n_world)
                .unwrap_or_else(|| UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI));
            let s = d * cfg.init_scale_factor;
            state.push_gaussian(Gaussian3D {
                mean: to_world.transform_point(&(k.ray(x as f64, y as f64) * d)),
                scale: Vector3::new(s, s, s * cfg.init_flatten),
                rotation: rot.into_inner(),
                color: *targets.image_linear.get(x, y),
                opacity: cfg.init_opacity,
            });
            added += 1;
        }
    }
    added
}

/// Drops Gaussians whose opacity fell below `cfg.prune_opacity` (or whose
/// parameters stopped being finite). Returns the number removed.
pub fn prune(state: &mut SlamState, cfg: &SlamConfig) -> usize {
    let keep: Vec<bool> = state
        .scene
        .gaussians
        .iter()
        .map(|g| g.opacity >= cfg.prune_opacity && g.is_finite())
        .collect();
    let removed = state.scene.retain_indexed(|i, _| keep[i]);
    let mut i = 0;
    state.adam.retain(|_| {
        let k = keep[i];
        i += 1;
        k
    });
    state.pruned += removed;
    removed
}

/// Map growth at a keyframe plus periodic pruning.
pub fn densify_and_prune(state: &mut SlamState, targets: &FrameTargets, pose: &Pose, render: Option<&RenderOutput>, cfg: &SlamConfig) -> (usize, usize) {
    let added = densify(state, targets, pose, render, cfg);
    let removed = if !state.keyframes.is_empty() && state.keyframes.len() % cfg.prune_every == 0 {
        prune(state, cfg)
    } else {
        0
    };
    (added, removed)
}

/// Constant-velocity guess `T_{t-1} T_{t-2}⁻¹ T_{t-1}` (the previous pose for the second frame).
pub fn predict_pose(trajectory: &[(usize, Pose)]) -> Pose {
    match trajectory {
        [] => Pose::identity(),
        [(_, p)] => *p,
        [.., (_, a), (_, b)] => b.compose(&a.inverse()).compose(b),
    }
}

/// Result of a full run; `failure` is set when tracking aborted early, in
/// which case the state holds everything up to the failing frame.
#[derive(Debug)]
pub struct SlamRun {
    pub state: SlamState,
    pub failure: Option<Error>,
}

/// Processes one frame (tracking, keyframing, mapping).
pub fn process_frame(state: &mut SlamState, frame: &Frame, cfg: &SlamConfig) -> Result<()> {
    let targets = prepare_targets(frame, cfg)?;
    if let Some((last, _)) = state.trajectory.last() {
        if frame.index <= *last {
            return Err(Error::invalid(format!("frame {} arrives after frame {last}", frame.index)));
        }
    }
    let first = state.trajectory.is_empty();
    let pose = if first {
        Pose::identity()
    } else {
        let init = predict_pose(&state.trajectory);
        track_frame(state, &targets, frame.index, init, cfg)?
    };
    state.trajectory.push((frame.index, pose));
    if first || select_keyframe(state, frame.index, &pose, cfg) {
        let render = if state.scene.is_empty() {
            None
        } else {
            Some(splatter::render(&state.scene, &pose, &state.k, &cfg.render_options())?)
        };
        state.keyframes.push(Keyframe {
            index: frame.index,
            pose,
            targets: targets.clone(),
            pose_adam: Adam::default(),
        });
        let (added, removed) = densify_and_prune(state, &targets, &pose, render.as_ref(), cfg);
        if first {
            state.scene_scale = median(
                state
                    .scene
                    .gaussians
                    .iter()
                    .map(|g| pose.transform_point(&g.mean).norm())
                    .collect(),
            )
            .unwrap_or(1.0);
        }
        log::debug!("frame {}: keyframe, +{added} -{removed} gaussians ({} total)", frame.index, state.scene.len());
        if state.scene.is_empty() {
            return Err(Error::EmptyScene);
        }
        map_update(state, cfg)?;
    }
    Ok(())
}

/// Runs the full alternation over a dataset.
pub fn run_slam(dataset: &Dataset, mode: DepthMode, cfg: &SlamConfig) -> Result<SlamRun> {
    cfg.validate()?;
    if dataset.frames.len() < 2 {
        return Err(Error::invalid(format!("need at least 2 frames, got {}", dataset.frames.len())));
    }
    if mode != DepthMode::None {
        if let Some(f) = dataset.frames.iter().find(|f| f.depth(mode).is_none()) {
            return Err(Error::Config(format!("frame {} has no depth for mode {mode:?}", f.index)));
        }
    }
    let mut state = SlamState::new(dataset.intrinsics);
    for i in 0..dataset.frames.len() {
        let frame = Frame::from_dataset(dataset, mode, i)?;
        match process_frame(&mut state, &frame, cfg) {
            Ok(()) => {}
            Err(e @ Error::TrackingFailure { .. }) => {
                log::error!("{e}");
                return Ok(SlamRun { state, failure: Some(e) });
            }
            Err(e) => return Err(e),
        }
        if let Some(l) = state.logs.last() {
            log::info!("frame {i}: {} {:.5} -> {:.5}, {} gaussians", l.phase, l.initial.total, l.last.total, state.scene.len());
        }
    }
    Ok(SlamRun { state, failure: None })
}
