//! Bundle-adjustment objectives: the photometric re-rendering loss, the
//! scale-invariant near-field lighting loss with its closed-form intensity
//! scale, an isotropy regularizer, and the combined tracking/mapping
//! objective with analytic gradients.

use nalgebra::{Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{GaussianScene, Intrinsics, Pose};
use crate::maps::{Mask, ScalarMap, VectorMap};
use crate::shading::{self, MaskSet, ShadingField};
use crate::splatter::{self, GaussianGrad, GradientSet, RenderOptions, RenderOutput, RenderUpstream};

/// Below this masked sum of squared model values the scale fit is undefined.
pub const DEGENERATE_MODEL_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_depth: f64,
    pub lambda_nfl_tracking: f64,
    pub lambda_nfl_mapping: f64,
    pub lambda_reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        NflPreset::MonogsEstimatedDepth.weights()
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_depth", self.lambda_depth),
            ("lambda_nfl_tracking", self.lambda_nfl_tracking),
            ("lambda_nfl_mapping", self.lambda_nfl_mapping),
            ("lambda_reg", self.lambda_reg),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }

    pub fn lambda_nfl(&self, phase: Phase) -> f64 {
        match phase {
            Phase::Tracking => self.lambda_nfl_tracking,
            Phase::Mapping => self.lambda_nfl_mapping,
        }
    }

    pub fn without_nfl(mut self) -> Self {
        self.lambda_nfl_tracking = 0.0;
        self.lambda_nfl_mapping = 0.0;
        self
    }
}

/// Published near-field loss weightings, selectable by name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NflPreset {
    /// Near-field loss disabled.
    Off,
    /// Monocular (no depth): mapping only, 0.5.
    MonogsMonocular,
    /// Estimated depth: 0.001 tracking and mapping, `lambda_depth` 0.4.
    MonogsEstimatedDepth,
    /// Ground-truth depth: 0.001 tracking and mapping.
    MonogsGtDepth,
    /// Endoscopy pipeline with estimated depth: 0.01 tracking and mapping.
    EndoEstimatedDepth,
    /// Endoscopy pipeline with RGB-D: 0.001 tracking, 0.005 mapping.
    EndoRgbd,
}

impl NflPreset {
    pub const ALL: [NflPreset; 6] = [
        NflPreset::Off,
        NflPreset::MonogsMonocular,
        NflPreset::MonogsEstimatedDepth,
        NflPreset::MonogsGtDepth,
        NflPreset::EndoEstimatedDepth,
        NflPreset::EndoRgbd,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            NflPreset::Off => "off",
            NflPreset::MonogsMonocular => "monogs_monocular",
            NflPreset::MonogsEstimatedDepth => "monogs_estimated_depth",
            NflPreset::MonogsGtDepth => "monogs_gt_depth",
            NflPreset::EndoEstimatedDepth => "endo_estimated_depth",
            NflPreset::EndoRgbd => "endo_rgbd",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    /// `(tracking, mapping)`.
    pub fn nfl_weights(&self) -> (f64, f64) {
        match self {
            NflPreset::Off => (0.0, 0.0),
            NflPreset::MonogsMonocular => (0.0, 0.5),
            NflPreset::MonogsEstimatedDepth => (0.001, 0.001),
            NflPreset::MonogsGtDepth => (0.001, 0.001),
            NflPreset::EndoEstimatedDepth => (0.01, 0.01),
            NflPreset::EndoRgbd => (0.001, 0.005),
        }
    }

    pub fn weights(&self) -> LossWeights {
        let (t, m) = self.nfl_weights();
        LossWeights {
            lambda_depth: match self {
                NflPreset::MonogsMonocular => 0.0,
                _ => 0.4,
            },
            lambda_nfl_tracking: t,
            lambda_nfl_mapping: m,
            lambda_reg: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Tracking,
    Mapping,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub rgb_term: f64,
    pub depth_term: f64,
    pub nfl_term: f64,
    pub reg_term: f64,
    pub optimal_scale_s: f64,
    pub masked_pixel_count: usize,
    pub lambda_depth: f64,
    pub lambda_nfl: f64,
    pub lambda_reg: f64,
}

impl LossReport {
    /// `rgb + λ_depth·depth + λ_nfl·nfl + λ_reg·reg` recomputed from the terms.
    pub fn recombined(&self) -> f64 {
        self.rgb_term + self.lambda_depth * self.depth_term + self.lambda_nfl * self.nfl_term + self.lambda_reg * self.reg_term
    }
}

/// Photometric term values and their gradients on the rendered maps.
#[derive(Clone, Debug)]
pub struct PhotometricLoss {
    /// `rgb_term + λ_depth · depth_term`.
    pub value: f64,
    pub rgb_term: f64,
    pub depth_term: f64,
    pub rgb_residual: VectorMap,
    pub depth_residual: ScalarMap,
    pub masked_pixel_count: usize,
    /// Gradient of `value` on the color map.
    pub grad_color: VectorMap,
    /// Gradient of `value` on the raw depth map.
    pub grad_depth: ScalarMap,
    /// Gradient of `value` on accumulated opacity (normalized depth only).
    pub grad_alpha: ScalarMap,
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Masked mean L1 color error plus `lambda_depth` times masked mean L1
/// depth error (only where the target depth is positive).
pub fn photometric_ba(
    render: &RenderOutput,
    target_image: &VectorMap,
    target_depth: Option<&ScalarMap>,
    mask: &Mask,
    lambda_depth: f64,
    normalized_depth: bool,
) -> Result<PhotometricLoss> {
    render.color.ensure_shape(target_image, "photometric target image")?;
    render.color.ensure_shape(mask, "photometric mask")?;
    let count = mask.count();
    if count == 0 {
        return Err(Error::DegenerateMask);
    }
    let (w, h) = (render.width, render.height);
    let inv = 1.0 / count as f64;
    let mut rgb_residual = VectorMap::filled(w, h, Vector3::zeros());
    let mut grad_color = VectorMap::filled(w, h, Vector3::zeros());
    let mut rgb_sum = 0.0;
    for i in 0..mask.len() {
        let r = render.color.data()[i] - target_image.data()[i];
        rgb_residual.data_mut()[i] = r;
        if mask.data()[i] {
            rgb_sum += r.abs().sum();
            grad_color.data_mut()[i] = r.map(sign) * inv;
        }
    }
    let rgb_term = rgb_sum * inv;

    let mut depth_residual = ScalarMap::filled(w, h, 0.0);
    let mut grad_depth = ScalarMap::filled(w, h, 0.0);
    let mut grad_alpha = ScalarMap::filled(w, h, 0.0);
    let mut depth_term = 0.0;
    if let Some(td) = target_depth {
        render.depth.ensure_shape(td, "photometric target depth")?;
        let rendered = render.depth_map(normalized_depth);
        let active: Vec<bool> = (0..mask.len()).map(|i| mask.data()[i] && td.data()[i] > 0.0).collect();
        let n_depth = active.iter().filter(|&&a| a).count();
        if n_depth > 0 {
            let inv_d = 1.0 / n_depth as f64;
            let mut sum = 0.0;
            for i in 0..mask.len() {
                let r = rendered.data()[i] - td.data()[i];
                depth_residual.data_mut()[i] = r;
                if !active[i] {
                    continue;
                }
                sum += r.abs();
                let g = lambda_depth * sign(r) * inv_d;
                if normalized_depth {
                    let a = render.accum_alpha.data()[i];
                    if a > splatter::NORMALIZED_DEPTH_MIN_ALPHA {
                        grad_depth.data_mut()[i] = g / a;
                        grad_alpha.data_mut()[i] = -g * render.depth.data()[i] / (a * a);
                    }
                } else {
                    grad_depth.data_mut()[i] = g;
                }
            }
            depth_term = sum * inv_d;
        }
    }
    Ok(PhotometricLoss {
        value: rgb_term + lambda_depth * depth_term,
        rgb_term,
        depth_term,
        rgb_residual,
        depth_residual,
        masked_pixel_count: count,
        grad_color,
        grad_depth,
        grad_alpha,
    })
}

/// Least-squares scale `s = Σ I·P / Σ P²` over masked pixels and all channels.
pub fn optimal_scale(intensity: &VectorMap, model: &VectorMap, mask: &Mask) -> Result<f64> {
    intensity.ensure_shape(model, "scale-fit model")?;
    intensity.ensure_shape(mask, "scale-fit mask")?;
    if mask.count() == 0 {
        return Err(Error::DegenerateMask);
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..mask.len() {
        if mask.data()[i] {
            num += intensity.data()[i].dot(&model.data()[i]);
            den += model.data()[i].norm_squared();
        }
    }
    if den < DEGENERATE_MODEL_EPS {
        return Err(Error::DegenerateModel(den));
    }
    Ok(num / den)
}

#[derive(Clone, Debug)]
pub struct NflLoss {
    pub value: f64,
    pub scale: f64,
    /// `I - s·ρ̂·S` per pixel.
    pub residual: VectorMap,
    pub masked_pixel_count: usize,
    /// Exact gradient of `value` on the shading map, including the
    /// dependence of the refitted scale on the shading.
    pub grad_shading: ScalarMap,
}

/// Scale-invariant near-field loss: masked mean over pixels of
/// `‖I − s·ρ̂·S‖₂`, with `s` the least-squares fit of the model to the image.
pub fn nfl_ba(image_linear: &VectorMap, albedo: &VectorMap, field: &ShadingField, mask: &MaskSet) -> Result<NflLoss> {
    image_linear.ensure_shape(albedo, "albedo")?;
    image_linear.ensure_shape(&field.shading, "shading field")?;
    let m = &mask.combined;
    image_linear.ensure_shape(m, "near-field mask")?;
    let (w, h) = (image_linear.width(), image_linear.height());
    let model = VectorMap::from_vec(
        w,
        h,
        albedo.data().iter().zip(field.shading.data()).map(|(a, &s)| a * s).collect(),
    )?;
    let s = optimal_scale(image_linear, &model, m)?;
    let count = m.count();
    let inv = 1.0 / count as f64;

    let mut residual = VectorMap::filled(w, h, Vector3::zeros());
    let mut value = 0.0;
    // dL/dP with s held fixed, and dL/ds
    let mut grad_model = VectorMap::filled(w, h, Vector3::zeros());
    let mut grad_s = 0.0;
    let mut den = 0.0;
    for i in 0..m.len() {
        let p = model.data()[i];
        let r = image_linear.data()[i] - p * s;
        residual.data_mut()[i] = r;
        if !m.data()[i] {
            continue;
        }
        den += p.norm_squared();
        let n = r.norm();
        value += n;
        if n > 0.0 {
            let unit = r / n;
            grad_model.data_mut()[i] = -unit * (s * inv);
            grad_s -= unit.dot(&p) * inv;
        }
    }
    value *= inv;

    let mut grad_shading = ScalarMap::filled(w, h, 0.0);
    for i in 0..m.len() {
        if !m.data()[i] {
            continue;
        }
        let p = model.data()[i];
        // ds/dP = (I - 2 s P) / Σ P²
        let ds_dp = (image_linear.data()[i] - p * (2.0 * s)) / den;
        let g_p = grad_model.data()[i] + ds_dp * grad_s;
        grad_shading.data_mut()[i] = g_p.dot(&albedo.data()[i]);
    }
    Ok(NflLoss {
        value,
        scale: s,
        residual,
        masked_pixel_count: count,
        grad_shading,
    })
}

/// Mean over Gaussians of `(max(scale)/min(scale) − 1)²`.
pub fn scale_regularizer(scene: &GaussianScene) -> f64 {
    if scene.is_empty() {
        return 0.0;
    }
    scene
        .gaussians
        .iter()
        .map(|g| {
            let r = g.scale.max() / g.scale.min();
            (r - 1.0) * (r - 1.0)
        })
        .sum::<f64>()
        / scene.len() as f64
}

/// Gradient of [`scale_regularizer`] with respect to each log-scale.
pub fn scale_regularizer_grad(scene: &GaussianScene) -> Vec<Vector3<f64>> {
    let n = scene.len().max(1) as f64;
    scene
        .gaussians
        .iter()
        .map(|g| {
            let (imax, smax) = g.scale.argmax();
            let (imin, smin) = g.scale.argmin();
            let mut out = Vector3::zeros();
            if imax != imin {
                let r = smax / smin;
                // d/dlog s = s · d/ds; for the ratio this gives ±r
                let common = 2.0 * (r - 1.0) * r / n;
                out[imax] += common;
                out[imin] -= common;
            }
            out
        })
        .collect()
}

/// Per-frame inputs of the objective, prepared once per frame.
#[derive(Clone, Debug)]
pub struct FrameTargets {
    pub image_linear: VectorMap,
    pub albedo: VectorMap,
    pub depth: Option<ScalarMap>,
    /// Weighting map of the photometric term.
    pub photometric_mask: Mask,
    pub specular_mask: Mask,
    pub crop_mask: Mask,
}

#[derive(Clone, Debug)]
pub struct ObjectiveOptions {
    pub render: RenderOptions,
    pub beta: f64,
    /// Photometric depth term compares the alpha-normalized depth.
    pub normalized_depth: bool,
    /// In the mapping phase also return the pose gradient.
    pub mapping_pose_gradient: bool,
}

impl Default for ObjectiveOptions {
    fn default() -> Self {
        Self {
            render: RenderOptions::default(),
            beta: 0.0,
            normalized_depth: false,
            mapping_pose_gradient: false,
        }
    }
}

/// Everything computed for the near-field term of one evaluation.
#[derive(Clone, Debug)]
pub struct NflEvaluation {
    pub field: ShadingField,
    pub masks: MaskSet,
    pub loss: NflLoss,
}

/// Builds the shading field from the render's own alpha-normalized depth
/// and blended normals, then evaluates the near-field loss.
pub fn evaluate_nfl(
    render: &RenderOutput,
    k: &Intrinsics,
    targets: &FrameTargets,
    beta: f64,
    near_plane: f64,
) -> Result<NflEvaluation> {
    let depth = render.normalized_depth(splatter::NORMALIZED_DEPTH_MIN_ALPHA);
    let points = shading::backproject(&depth, k);
    let field = shading::shading_field(&points, &render.normal, beta, &Vector3::z())?;
    let valid = shading::valid_depth_mask(&depth, near_plane).and(&field.valid)?;
    let masks = MaskSet::new(targets.specular_mask.clone(), targets.crop_mask.clone(), valid)?;
    let loss = nfl_ba(&targets.image_linear, &targets.albedo, &field, &masks)?;
    Ok(NflEvaluation { field, masks, loss })
}

/// Pushes `scale · dL/dS` through the shading field onto the raw depth,
/// accumulated opacity and normal maps.
fn nfl_upstream(render: &RenderOutput, k: &Intrinsics, eval: &NflEvaluation, beta: f64, scale: f64, up: &mut RenderUpstream) {
    let (w, h) = (render.width, render.height);
    let g_depth = up.depth.get_or_insert_with(|| ScalarMap::filled(w, h, 0.0));
    let mut g_alpha_acc = vec![0.0; w * h];
    let mut g_normal_acc = vec![Vector3::zeros(); w * h];
    for (x, y, &gs) in eval.loss.grad_shading.enumerate() {
        if gs == 0.0 {
            continue;
        }
        let i = y * w + x;
        let pt = eval.field.points.data()[i];
        let n = render.normal.data()[i];
        let (g_x, g_n) = shading::shade_point_vjp(&pt, &n, beta, &eval.field.axis, gs * scale);
        let g_dn = k.ray(x as f64, y as f64).dot(&g_x);
        let a = render.accum_alpha.data()[i];
        g_depth.data_mut()[i] += g_dn / a;
        g_alpha_acc[i] -= g_dn * render.depth.data()[i] / (a * a);
        g_normal_acc[i] = g_n;
    }
    let g_alpha = up.alpha.get_or_insert_with(|| ScalarMap::filled(w, h, 0.0));
    for (dst, v) in g_alpha.data_mut().iter_mut().zip(g_alpha_acc) {
        *dst += v;
    }
    let g_normal = up.normal.get_or_insert_with(|| VectorMap::filled(w, h, Vector3::zeros()));
    for (dst, v) in g_normal.data_mut().iter_mut().zip(g_normal_acc) {
        *dst += v;
    }
}

/// Value and gradients of the tracking or mapping objective
/// `L_photo + λ_nfl·L_nfl + λ_reg·L_reg` for one frame.
///
/// Tracking returns only the pose gradient (Gaussian gradients are zero);
/// mapping returns Gaussian gradients and, if requested, the pose gradient.
pub fn total_objective(
    targets: &FrameTargets,
    scene: &GaussianScene,
    pose: &Pose,
    k: &Intrinsics,
    weights: &LossWeights,
    phase: Phase,
    opts: &ObjectiveOptions,
) -> Result<(LossReport, GradientSet)> {
    let render = splatter::render(scene, pose, k, &opts.render)?;
    total_objective_from_render(targets, scene, pose, k, weights, phase, opts, &render)
}

#[allow(clippy::too_many_arguments)]
pub fn total_objective_from_render(
    targets: &FrameTargets,
    scene: &GaussianScene,
    pose: &Pose,
    k: &Intrinsics,
    weights: &LossWeights,
    phase: Phase,
    opts: &ObjectiveOptions,
    render: &RenderOutput,
) -> Result<(LossReport, GradientSet)> {
    let lambda_nfl = weights.lambda_nfl(phase);
    let photo = photometric_ba(
        render,
        &targets.image_linear,
        targets.depth.as_ref(),
        &targets.photometric_mask,
        weights.lambda_depth,
        opts.normalized_depth,
    )?;
    let mut up = RenderUpstream {
        color: Some(photo.grad_color.clone()),
        depth: Some(photo.grad_depth.clone()),
        normal: None,
        alpha: Some(photo.grad_alpha.clone()),
    };
    let mut report = LossReport {
        rgb_term: photo.rgb_term,
        depth_term: photo.depth_term,
        masked_pixel_count: photo.masked_pixel_count,
        lambda_depth: weights.lambda_depth,
        lambda_nfl,
        lambda_reg: weights.lambda_reg,
        ..LossReport::default()
    };
    if lambda_nfl > 0.0 {
        let eval = evaluate_nfl(render, k, targets, opts.beta, opts.render.near_plane)?;
        nfl_upstream(render, k, &eval, opts.beta, lambda_nfl, &mut up);
        report.nfl_term = eval.loss.value;
        report.optimal_scale_s = eval.loss.scale;
    }
    let mapping = phase == Phase::Mapping;
    if mapping && weights.lambda_reg > 0.0 {
        report.reg_term = scale_regularizer(scene);
    }
    report.total = report.rgb_term
        + weights.lambda_depth * report.depth_term
        + lambda_nfl * report.nfl_term
        + weights.lambda_reg * report.reg_term;

    let mut grads = splatter::render_backward(scene, pose, k, render, &up)?;
    match phase {
        Phase::Tracking => {
            grads.gaussians.iter_mut().for_each(|g| *g = GaussianGrad::default());
        }
        Phase::Mapping => {
            if weights.lambda_reg > 0.0 {
                for (g, r) in grads.gaussians.iter_mut().zip(scale_regularizer_grad(scene)) {
                    g.log_scale += r * weights.lambda_reg;
                }
            }
            if !opts.mapping_pose_gradient {
                grads.pose = Vector6::zeros();
            }
        }
    }
    Ok((report, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Gaussian3D;

    fn maps_from(vals: &[f64]) -> VectorMap {
        VectorMap::from_vec(vals.len(), 1, vals.iter().map(|&v| Vector3::repeat(v)).collect()).unwrap()
    }

    #[test]
    fn optimal_scale_closed_forms() {
        let p = maps_from(&[0.1, 0.2, 0.05]);
        let i = p.map(|v| v * 2.0);
        let m = Mask::filled(3, 1, true);
        assert!((optimal_scale(&i, &p, &m).unwrap() - 2.0).abs() < 1e-15);

        let i = VectorMap::from_vec(2, 1, vec![Vector3::new(0.2, 0.0, 0.0), Vector3::new(0.4, 0.0, 0.0)]).unwrap();
        let p = VectorMap::from_vec(2, 1, vec![Vector3::new(0.1, 0.0, 0.0), Vector3::new(0.2, 0.0, 0.0)]).unwrap();
        assert!((optimal_scale(&i, &p, &Mask::filled(2, 1, true)).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn optimal_scale_errors() {
        let p = maps_from(&[0.0, 0.0]);
        assert!(matches!(
            optimal_scale(&p, &p, &Mask::filled(2, 1, true)),
            Err(Error::DegenerateModel(_))
        ));
        assert!(matches!(
            optimal_scale(&p, &p, &Mask::filled(2, 1, false)),
            Err(Error::DegenerateMask)
        ));
    }

    #[test]
    fn regularizer_cases() {
        let iso = Gaussian3D::isotropic(Vector3::zeros(), 1.0, Vector3::zeros(), 1.0);
        let mut aniso = iso.clone();
        aniso.scale = Vector3::new(2.0, 1.0, 1.0);
        assert_eq!(scale_regularizer(&GaussianScene::new(vec![iso.clone(), iso.clone()])), 0.0);
        assert_eq!(scale_regularizer(&GaussianScene::new(vec![aniso.clone()])), 1.0);
        assert_eq!(scale_regularizer(&GaussianScene::new(vec![aniso, iso])), 0.5);
    }

    #[test]
    fn regularizer_gradient_matches_finite_differences() {
        let mut g = Gaussian3D::isotropic(Vector3::zeros(), 1.0, Vector3::zeros(), 1.0);
        g.scale = Vector3::new(1.7, 0.4, 0.9);
        let scene = GaussianScene::new(vec![g.clone(), Gaussian3D::isotropic(Vector3::zeros(), 1.0, Vector3::zeros(), 1.0)]);
        let grad = scale_regularizer_grad(&scene);
        let h: f64 = 1e-6;
        for a in 0..3 {
            let mut plus = scene.clone();
            let mut minus = scene.clone();
            plus.gaussians[0].scale[a] *= h.exp();
            minus.gaussians[0].scale[a] *= (-h).exp();
            let fd = (scale_regularizer(&plus) - scale_regularizer(&minus)) / (2.0 * h);
            assert!((grad[0][a] - fd).abs() < 1e-7, "axis {a}: {} vs {fd}", grad[0][a]);
        }
    }

    #[test]
    fn presets_resolve_by_name() {
        for p in NflPreset::ALL {
            assert_eq!(NflPreset::from_name(p.name()), Some(p));
            p.weights().validate().unwrap();
        }
        assert_eq!(NflPreset::MonogsMonocular.nfl_weights(), (0.0, 0.5));
        assert_eq!(NflPreset::EndoRgbd.nfl_weights(), (0.001, 0.005));
        assert!(NflPreset::from_name("nope").is_none());
    }
}
