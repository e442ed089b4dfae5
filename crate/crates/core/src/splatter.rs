//! Differentiable tile-based Gaussian rasterizer.
//!
//! Forward: every Gaussian is projected to a 2D splat (EWA local affine
//! approximation), splats are sorted globally near-to-far by center depth
//! (exact ties broken by splat content, then source index) and alpha-composited per pixel into color,
//! depth, normal and accumulated-opacity maps.
//!
//! Backward: the per-pixel contribution log is traversed in reverse, giving
//! gradients on the splat parameters, which are then chained back to the 3D
//! Gaussian parameters and to a left-multiplied pose perturbation.
//!
//! Pixels are processed in fixed-size tiles. Per-Gaussian gradient sums are
//! reduced tile by tile in raster order, so results do not depend on the
//! number of worker threads.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3, Vector6};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{quaternion_matrix_vjp, GaussianScene, Gaussian3D, Intrinsics, Pose};
use crate::maps::{ScalarMap, VectorMap};

/// Blended normals shorter than this are reported as the zero vector.
pub const NORMAL_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOptions {
    /// Dilation added to the diagonal of every projected covariance (px²).
    pub lowpass: f64,
    /// Splats whose camera-space depth is below this are culled (mm).
    pub near_plane: f64,
    /// Contributions with a smaller splatted alpha are skipped.
    pub min_alpha: f64,
    /// Compositing stops once transmittance drops below this.
    pub min_transmittance: f64,
    /// Footprint (in standard deviations) used to cull splats off-image.
    pub footprint_sigmas: f64,
    /// Splats whose center projects further from the principal point than
    /// this multiple of the half image extent are culled. Near the camera
    /// plane such splats blow up to cover the whole frame.
    pub frustum_guard: f64,
    pub tile_size: usize,
    /// Keep the per-pixel contribution log needed by `render_backward`.
    pub record_contributions: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            lowpass: 0.3,
            near_plane: 0.2,
            min_alpha: 1.0 / 255.0,
            min_transmittance: 1e-4,
            footprint_sigmas: 3.0,
            frustum_guard: 1.3,
            tile_size: 16,
            record_contributions: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splat2D {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    /// Inverse of `cov2d`.
    pub conic: Matrix2<f64>,
    /// Camera-space z of the center (mm).
    pub depth: f64,
    pub cam_mean: Vector3<f64>,
    /// Camera-frame unit normal facing the camera; zero when the shortest
    /// axis is not unique.
    pub normal_cam: Vector3<f64>,
    pub normal_axis: Option<usize>,
    pub normal_sign: f64,
    pub color: Vector3<f64>,
    pub opacity: f64,
    pub source_index: usize,
    pub culled: bool,
    /// Inclusive pixel rectangle `[x0, y0, x1, y1]` outside of which the
    /// splatted alpha is below `min_alpha`.
    pub bbox: [usize; 4],
}

impl Splat2D {
    fn culled(source_index: usize, g: &Gaussian3D, cam_mean: Vector3<f64>) -> Self {
        Self {
            mean2d: Vector2::zeros(),
            cov2d: Matrix2::identity(),
            conic: Matrix2::identity(),
            depth: cam_mean.z,
            cam_mean,
            normal_cam: Vector3::zeros(),
            normal_axis: None,
            normal_sign: 1.0,
            color: g.color,
            opacity: g.opacity,
            source_index,
            culled: true,
            bbox: [0; 4],
        }
    }

    /// Splatted alpha at pixel `p` (before the `min_alpha` cutoff).
    #[inline]
    pub fn alpha_at(&self, p: &Vector2<f64>) -> f64 {
        let d = p - self.mean2d;
        let power = -0.5 * (d.transpose() * self.conic * d)[0];
        self.opacity * power.exp()
    }
}

/// Jacobian of the pinhole projection at camera-space point `m`.
#[inline]
fn projection_jacobian(m: &Vector3<f64>, k: &Intrinsics) -> Matrix2x3<f64> {
    let iz = 1.0 / m.z;
    let iz2 = iz * iz;
    Matrix2x3::new(k.fx * iz, 0.0, -k.fx * m.x * iz2, 0.0, k.fy * iz, -k.fy * m.y * iz2)
}

pub fn project_gaussian(
    g: &Gaussian3D,
    source_index: usize,
    pose: &Pose,
    k: &Intrinsics,
    opts: &RenderOptions,
) -> Splat2D {
    let m = pose.transform_point(&g.mean);
    if !(m.z >= opts.near_plane) {
        return Splat2D::culled(source_index, g, m);
    }
    let rot = g.rotation_matrix();
    let factor = rot * Matrix3::from_diagonal(&g.scale);
    let sigma = factor * factor.transpose();
    let t = projection_jacobian(&m, k) * pose.rotation;
    let mut cov2d = t * sigma * t.transpose();
    cov2d[(0, 0)] += opts.lowpass;
    cov2d[(1, 1)] += opts.lowpass;
    let det = cov2d.determinant();
    let mean2d = k.project(&m);
    if !(det > 0.0) || !mean2d.iter().all(|v| v.is_finite()) {
        return Splat2D::culled(source_index, g, m);
    }
    let conic = Matrix2::new(cov2d[(1, 1)], -cov2d[(0, 1)], -cov2d[(1, 0)], cov2d[(0, 0)]) / det;
    let half_trace = 0.5 * (cov2d[(0, 0)] + cov2d[(1, 1)]);
    let lambda_max = half_trace + (half_trace * half_trace - det).max(0.0).sqrt();
    let sigma_max = lambda_max.sqrt();

    let (w, h) = (k.width as f64, k.height as f64);
    let guard = opts.frustum_guard;
    if mean2d.x < k.cx - guard * (k.cx + 0.5)
        || mean2d.x > k.cx + guard * (w - 0.5 - k.cx)
        || mean2d.y < k.cy - guard * (k.cy + 0.5)
        || mean2d.y > k.cy + guard * (h - 0.5 - k.cy)
    {
        return Splat2D::culled(source_index, g, m);
    }
    let foot = opts.footprint_sigmas * sigma_max;
    let off_image = mean2d.x + foot < 0.0
        || mean2d.x - foot > w - 1.0
        || mean2d.y + foot < 0.0
        || mean2d.y - foot > h - 1.0;
    let ratio = g.opacity / opts.min_alpha.max(f64::MIN_POSITIVE);
    if off_image || ratio <= 1.0 {
        return Splat2D::culled(source_index, g, m);
    }
    // beyond this radius the splatted alpha is below min_alpha in every direction
    let reach = sigma_max * (2.0 * ratio.ln()).sqrt();
    let x0 = (mean2d.x - reach).ceil().max(0.0);
    let x1 = (mean2d.x + reach).floor().min(w - 1.0);
    let y0 = (mean2d.y - reach).ceil().max(0.0);
    let y1 = (mean2d.y + reach).floor().min(h - 1.0);
    if x0 > x1 || y0 > y1 {
        return Splat2D::culled(source_index, g, m);
    }

    let (normal_cam, normal_sign, normal_axis) = match g.shortest_axis() {
        Some(axis) => {
            let n = pose.rotation * rot.column(axis);
            let facing = n.dot(&m);
            let sign = if facing > 0.0 || (facing == 0.0 && n.z > 0.0) { -1.0 } else { 1.0 };
            (n * sign, sign, Some(axis))
        }
        None => (Vector3::zeros(), 1.0, None),
    };

    Splat2D {
        mean2d,
        cov2d,
        conic,
        depth: m.z,
        cam_mean: m,
        normal_cam,
        normal_axis,
        normal_sign,
        color: g.color,
        opacity: g.opacity,
        source_index,
        culled: false,
        bbox: [x0 as usize, y0 as usize, x1 as usize, y1 as usize],
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contribution {
    pub source_index: u32,
    /// Splatted alpha at the pixel.
    pub alpha: f64,
    /// Transmittance before this contribution.
    pub transmittance: f64,
}

/// Per-pixel ordered contributions in CSR layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ContributionLog {
    offsets: Vec<usize>,
    entries: Vec<Contribution>,
}

impl ContributionLog {
    pub fn pixel(&self, index: usize) -> &[Contribution] {
        &self.entries[self.offsets[index]..self.offsets[index + 1]]
    }

    pub fn total(&self) -> usize {
        self.entries.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    /// Linear RGB.
    pub color: VectorMap,
    /// Unnormalized expected depth `Σ wᵢ zᵢ` (mm).
    pub depth: ScalarMap,
    /// Blended camera-frame normals, re-normalized (zero where the blend vanishes).
    pub normal: VectorMap,
    pub normal_raw: VectorMap,
    /// `1 - final transmittance`.
    pub accum_alpha: ScalarMap,
    /// One splat per scene Gaussian, indexed by source index.
    pub splats: Vec<Splat2D>,
    pub contributions: Option<ContributionLog>,
}

impl RenderOutput {
    /// Depth divided by accumulated opacity where it exceeds `min_alpha`, zero elsewhere.
    pub fn normalized_depth(&self, min_alpha: f64) -> ScalarMap {
        let mut out = self.depth.clone();
        for (d, &a) in out.data_mut().iter_mut().zip(self.accum_alpha.data()) {
            *d = if a > min_alpha { *d / a } else { 0.0 };
        }
        out
    }

    pub fn depth_map(&self, normalized: bool) -> ScalarMap {
        if normalized {
            self.normalized_depth(NORMALIZED_DEPTH_MIN_ALPHA)
        } else {
            self.depth.clone()
        }
    }
}

/// Accumulated opacity required for the normalized depth variant.
pub const NORMALIZED_DEPTH_MIN_ALPHA: f64 = 1e-3;

struct Tile {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    /// Indices into the depth-sorted splat order.
    splats: Vec<usize>,
}

/// Orders equal-depth splats by what they draw, so that exact depth ties do not
/// make the output depend on scene order. Splats equal here are interchangeable.
fn content_cmp(a: &Splat2D, b: &Splat2D) -> std::cmp::Ordering {
    let key = |s: &Splat2D| {
        [s.cam_mean.x, s.cam_mean.y, s.cov2d[(0, 0)], s.cov2d[(0, 1)], s.cov2d[(1, 1)]]
            .into_iter()
            .chain(s.color.iter().copied())
            .chain([s.opacity])
            .chain(s.normal_cam.iter().copied())
            .collect::<Vec<f64>>()
    };
    key(a)
        .iter()
        .zip(key(b).iter())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}

fn build_tiles(order: &[usize], splats: &[Splat2D], width: usize, height: usize, tile: usize) -> Vec<Tile> {
    let tile = tile.max(1);
    let tw = width.div_ceil(tile);
    let th = height.div_ceil(tile);
    let mut tiles: Vec<Tile> = (0..tw * th)
        .map(|i| {
            let (tx, ty) = (i % tw, i / tw);
            Tile {
                x0: tx * tile,
                y0: ty * tile,
                x1: ((tx + 1) * tile).min(width) - 1,
                y1: ((ty + 1) * tile).min(height) - 1,
                splats: Vec::new(),
            }
        })
        .collect();
    for (rank, &src) in order.iter().enumerate() {
        let [x0, y0, x1, y1] = splats[src].bbox;
        for ty in y0 / tile..=y1 / tile {
            for tx in x0 / tile..=x1 / tile {
                tiles[ty * tw + tx].splats.push(rank);
            }
        }
    }
    tiles
}

struct PixelResult {
    color: Vector3<f64>,
    depth: f64,
    normal: Vector3<f64>,
    accum: f64,
    log: Vec<Contribution>,
}

pub fn render(scene: &GaussianScene, pose: &Pose, k: &Intrinsics, opts: &RenderOptions) -> Result<RenderOutput> {
    if scene.is_empty() {
        return Err(Error::EmptyScene);
    }
    let splats: Vec<Splat2D> = scene
        .gaussians
        .par_iter()
        .enumerate()
        .map(|(i, g)| project_gaussian(g, i, pose, k, opts))
        .collect();
    let mut order: Vec<usize> = (0..splats.len()).filter(|&i| !splats[i].culled).collect();
    order.sort_by(|&a, &b| {
        splats[a]
            .depth
            .total_cmp(&splats[b].depth)
            .then_with(|| content_cmp(&splats[a], &splats[b]))
            .then(a.cmp(&b))
    });

    let (w, h) = (k.width, k.height);
    let tiles = build_tiles(&order, &splats, w, h, opts.tile_size);
    let tile_results: Vec<Vec<(usize, PixelResult)>> = tiles
        .par_iter()
        .map(|tile| {
            let mut out = Vec::with_capacity((tile.x1 - tile.x0 + 1) * (tile.y1 - tile.y0 + 1));
            for y in tile.y0..=tile.y1 {
                for x in tile.x0..=tile.x1 {
                    out.push((y * w + x, composite_pixel(x, y, tile, &order, &splats, opts)));
                }
            }
            out
        })
        .collect();

    let mut color = VectorMap::filled(w, h, Vector3::zeros());
    let mut depth = ScalarMap::filled(w, h, 0.0);
    let mut normal = VectorMap::filled(w, h, Vector3::zeros());
    let mut normal_raw = VectorMap::filled(w, h, Vector3::zeros());
    let mut accum = ScalarMap::filled(w, h, 0.0);
    let mut logs: Vec<Vec<Contribution>> = if opts.record_contributions {
        (0..w * h).map(|_| Vec::new()).collect()
    } else {
        Vec::new()
    };
    for (idx, px) in tile_results.into_iter().flatten() {
        color.data_mut()[idx] = px.color;
        depth.data_mut()[idx] = px.depth;
        normal_raw.data_mut()[idx] = px.normal;
        let n = px.normal.norm();
        normal.data_mut()[idx] = if n > NORMAL_EPS { px.normal / n } else { Vector3::zeros() };
        accum.data_mut()[idx] = px.accum;
        if opts.record_contributions {
            logs[idx] = px.log;
        }
    }
    let contributions = opts.record_contributions.then(|| {
        let mut offsets = Vec::with_capacity(w * h + 1);
        let mut entries = Vec::with_capacity(logs.iter().map(Vec::len).sum());
        offsets.push(0);
        for l in logs {
            entries.extend(l);
            offsets.push(entries.len());
        }
        ContributionLog { offsets, entries }
    });

    Ok(RenderOutput {
        width: w,
        height: h,
        color,
        depth,
        normal,
        normal_raw,
        accum_alpha: accum,
        splats,
        contributions,
    })
}

fn composite_pixel(
    x: usize,
    y: usize,
    tile: &Tile,
    order: &[usize],
    splats: &[Splat2D],
    opts: &RenderOptions,
) -> PixelResult {
    let p = Vector2::new(x as f64, y as f64);
    let mut t = 1.0;
    let mut res = PixelResult {
        color: Vector3::zeros(),
        depth: 0.0,
        normal: Vector3::zeros(),
        accum: 0.0,
        log: Vec::new(),
    };
    for &rank in &tile.splats {
        let s = &splats[order[rank]];
        let [bx0, by0, bx1, by1] = s.bbox;
        if x < bx0 || x > bx1 || y < by0 || y > by1 {
            continue;
        }
        let a = s.alpha_at(&p);
        if a < opts.min_alpha {
            continue;
        }
        let wgt = a * t;
        res.color += s.color * wgt;
        res.depth += s.depth * wgt;
        res.normal += s.normal_cam * wgt;
        if opts.record_contributions {
            res.log.push(Contribution {
                source_index: s.source_index as u32,
                alpha: a,
                transmittance: t,
            });
        }
        t *= 1.0 - a;
        if t < opts.min_transmittance {
            break;
        }
    }
    res.accum = 1.0 - t;
    res
}

/// Gradients of a scalar loss with respect to the rendered maps. Absent
/// maps are treated as zero. `normal` is taken with respect to the
/// re-normalized normal map and `depth` with respect to the raw depth map.
#[derive(Clone, Debug, Default)]
pub struct RenderUpstream {
    pub color: Option<VectorMap>,
    pub depth: Option<ScalarMap>,
    pub normal: Option<VectorMap>,
    pub alpha: Option<ScalarMap>,
}

impl RenderUpstream {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            color: Some(VectorMap::filled(width, height, Vector3::zeros())),
            depth: Some(ScalarMap::filled(width, height, 0.0)),
            normal: Some(VectorMap::filled(width, height, Vector3::zeros())),
            alpha: Some(ScalarMap::filled(width, height, 0.0)),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GaussianGrad {
    pub mean: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    /// With respect to the raw quaternion components `(w, x, y, z)`.
    pub rotation: [f64; 4],
    pub color: Vector3<f64>,
    pub opacity: f64,
}

impl GaussianGrad {
    pub fn is_zero(&self) -> bool {
        self.mean == Vector3::zeros()
            && self.log_scale == Vector3::zeros()
            && self.rotation == [0.0; 4]
            && self.color == Vector3::zeros()
            && self.opacity == 0.0
    }

    pub fn add_assign(&mut self, o: &GaussianGrad, scale: f64) {
        self.mean += o.mean * scale;
        self.log_scale += o.log_scale * scale;
        for k in 0..4 {
            self.rotation[k] += o.rotation[k] * scale;
        }
        self.color += o.color * scale;
        self.opacity += o.opacity * scale;
    }
}

/// Gradients on every Gaussian and on the twist `xi` of the left
/// perturbation `exp(xi) ∘ pose` (translation first).
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub gaussians: Vec<GaussianGrad>,
    pub pose: Vector6<f64>,
}

impl GradientSet {
    pub fn zeros(n: usize) -> Self {
        Self {
            gaussians: vec![GaussianGrad::default(); n],
            pose: Vector6::zeros(),
        }
    }

    pub fn add_assign(&mut self, other: &GradientSet, scale: f64) {
        for (a, b) in self.gaussians.iter_mut().zip(&other.gaussians) {
            a.add_assign(b, scale);
        }
        self.pose += other.pose * scale;
    }

    pub fn is_finite(&self) -> bool {
        self.pose.iter().all(|v| v.is_finite())
            && self.gaussians.iter().all(|g| {
                g.mean.iter().chain(g.log_scale.iter()).chain(g.color.iter()).all(|v| v.is_finite())
                    && g.rotation.iter().all(|v| v.is_finite())
                    && g.opacity.is_finite()
            })
    }
}

#[derive(Clone, Copy, Default)]
struct SplatGrad {
    mean2d: Vector2<f64>,
    conic: Matrix2<f64>,
    opacity: f64,
    color: Vector3<f64>,
    depth: f64,
    normal: Vector3<f64>,
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        self.mean2d += o.mean2d;
        self.conic += o.conic;
        self.opacity += o.opacity;
        self.color += o.color;
        self.depth += o.depth;
        self.normal += o.normal;
    }
}

pub fn render_backward(
    scene: &GaussianScene,
    pose: &Pose,
    k: &Intrinsics,
    output: &RenderOutput,
    upstream: &RenderUpstream,
) -> Result<GradientSet> {
    let log = output
        .contributions
        .as_ref()
        .ok_or_else(|| Error::invalid("render output carries no contribution log"))?;
    if output.splats.len() != scene.len() {
        return Err(Error::LengthMismatch(output.splats.len(), scene.len()));
    }
    let (w, h) = (output.width, output.height);
    let check = |ok: bool, what: &str| {
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("upstream {what} map does not match the {w}x{h} render")))
        }
    };
    if let Some(m) = &upstream.color {
        check(m.width() == w && m.height() == h, "color")?;
    }
    if let Some(m) = &upstream.depth {
        check(m.width() == w && m.height() == h, "depth")?;
    }
    if let Some(m) = &upstream.normal {
        check(m.width() == w && m.height() == h, "normal")?;
    }
    if let Some(m) = &upstream.alpha {
        check(m.width() == w && m.height() == h, "alpha")?;
    }

    let tile = output_tile_size(w, h);
    let tw = w.div_ceil(tile);
    let th = h.div_ceil(tile);
    let splats = &output.splats;

    // per-tile sparse accumulation, reduced in raster tile order
    let tile_grads: Vec<Vec<(usize, SplatGrad)>> = (0..tw * th)
        .into_par_iter()
        .map(|ti| {
            let (tx, ty) = (ti % tw, ti / tw);
            let mut local: Vec<(usize, SplatGrad)> = Vec::new();
            let mut slot: std::collections::HashMap<usize, usize> = std::collections::HashMap::new();
            for y in ty * tile..((ty + 1) * tile).min(h) {
                for x in tx * tile..((tx + 1) * tile).min(w) {
                    let idx = y * w + x;
                    let contribs = log.pixel(idx);
                    if contribs.is_empty() {
                        continue;
                    }
                    let g_c = upstream.color.as_ref().map_or(Vector3::zeros(), |m| m.data()[idx]);
                    let g_d = upstream.depth.as_ref().map_or(0.0, |m| m.data()[idx]);
                    let g_a = upstream.alpha.as_ref().map_or(0.0, |m| m.data()[idx]);
                    let g_n = match &upstream.normal {
                        Some(m) => {
                            let g = m.data()[idx];
                            let raw = output.normal_raw.data()[idx];
                            let len = raw.norm();
                            if len > NORMAL_EPS {
                                let n = raw / len;
                                (g - n * n.dot(&g)) / len
                            } else {
                                Vector3::zeros()
                            }
                        }
                        None => Vector3::zeros(),
                    };
                    if g_c == Vector3::zeros() && g_d == 0.0 && g_a == 0.0 && g_n == Vector3::zeros() {
                        continue;
                    }
                    let p = Vector2::new(x as f64, y as f64);
                    let mut after_c = Vector3::zeros();
                    let mut after_d = 0.0;
                    let mut after_n = Vector3::zeros();
                    let mut after_a = 0.0;
                    for c in contribs.iter().rev() {
                        let s = &splats[c.source_index as usize];
                        let (a, t) = (c.alpha, c.transmittance);
                        let wgt = a * t;
                        let d_alpha = t
                            * (g_c.dot(&(s.color - after_c))
                                + g_d * (s.depth - after_d)
                                + g_n.dot(&(s.normal_cam - after_n))
                                + g_a * (1.0 - after_a));
                        after_c = s.color * a + after_c * (1.0 - a);
                        after_d = s.depth * a + after_d * (1.0 - a);
                        after_n = s.normal_cam * a + after_n * (1.0 - a);
                        after_a = a + after_a * (1.0 - a);

                        let q = p - s.mean2d;
                        let gauss = a / s.opacity;
                        let cq = s.conic * q;
                        let entry = SplatGrad {
                            mean2d: cq * (d_alpha * a),
                            conic: q * q.transpose() * (-0.5 * d_alpha * a),
                            opacity: d_alpha * gauss,
                            color: g_c * wgt,
                            depth: g_d * wgt,
                            normal: g_n * wgt,
                        };
                        let pos = *slot.entry(s.source_index).or_insert_with(|| {
                            local.push((s.source_index, SplatGrad::default()));
                            local.len() - 1
                        });
                        local[pos].1.add(&entry);
                    }
                }
            }
            local
        })
        .collect();

    let mut splat_grads = vec![SplatGrad::default(); scene.len()];
    for tile_list in &tile_grads {
        for (src, g) in tile_list {
            splat_grads[*src].add(g);
        }
    }

    let per_gaussian: Vec<(GaussianGrad, Vector6<f64>)> = scene
        .gaussians
        .par_iter()
        .zip(splats.par_iter())
        .zip(splat_grads.par_iter())
        .map(|((g, s), sg)| {
            if s.culled {
                (GaussianGrad::default(), Vector6::zeros())
            } else {
                chain_to_gaussian(g, s, sg, pose, k)
            }
        })
        .collect();

    let mut out = GradientSet::zeros(scene.len());
    for (i, (gg, pg)) in per_gaussian.into_iter().enumerate() {
        out.gaussians[i] = gg;
        out.pose += pg;
    }
    Ok(out)
}

/// The backward pass tiles independently of the forward tile size; only the
/// reduction order matters for reproducibility.
fn output_tile_size(_w: usize, _h: usize) -> usize {
    16
}

fn chain_to_gaussian(
    g: &Gaussian3D,
    s: &Splat2D,
    sg: &SplatGrad,
    pose: &Pose,
    k: &Intrinsics,
) -> (GaussianGrad, Vector6<f64>) {
    let m = s.cam_mean;
    let w_rot = pose.rotation;
    let rot = g.rotation_matrix();
    let factor = rot * Matrix3::from_diagonal(&g.scale);
    let sigma = factor * factor.transpose();
    let jac = projection_jacobian(&m, k);
    let t = jac * w_rot;

    // dL/dcov2d from dL/dconic
    let conic_grad = (sg.conic + sg.conic.transpose()) * 0.5;
    let g_cov2d = -(s.conic * conic_grad * s.conic);
    let g_t: Matrix2x3<f64> = g_cov2d * t * sigma * 2.0;
    let g_jac: Matrix2x3<f64> = g_t * w_rot.transpose();

    let iz = 1.0 / m.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let mut g_m = jac.transpose() * sg.mean2d;
    g_m.z += sg.depth;
    g_m.x += g_jac[(0, 2)] * (-k.fx * iz2);
    g_m.y += g_jac[(1, 2)] * (-k.fy * iz2);
    g_m.z += g_jac[(0, 0)] * (-k.fx * iz2)
        + g_jac[(0, 2)] * (2.0 * k.fx * m.x * iz3)
        + g_jac[(1, 1)] * (-k.fy * iz2)
        + g_jac[(1, 2)] * (2.0 * k.fy * m.y * iz3);

    let g_mean = w_rot.transpose() * g_m;

    let g_sigma = t.transpose() * g_cov2d * t;
    let g_sigma = (g_sigma + g_sigma.transpose()) * 0.5;
    let g_factor = g_sigma * factor * 2.0;
    let mut g_rot = g_factor * Matrix3::from_diagonal(&g.scale);
    let g_scale_diag = rot.transpose() * g_factor;
    let g_log_scale = Vector3::new(
        g_scale_diag[(0, 0)] * g.scale.x,
        g_scale_diag[(1, 1)] * g.scale.y,
        g_scale_diag[(2, 2)] * g.scale.z,
    );
    if let Some(axis) = s.normal_axis {
        let g_n_world = w_rot.transpose() * sg.normal * s.normal_sign;
        for r in 0..3 {
            g_rot[(r, axis)] += g_n_world[r];
        }
    }
    let g_q = quaternion_matrix_vjp(&g.rotation, &g_rot);

    // left perturbation: dm = rho + phi x m, dW = [phi]x W
    let g_w_from_t = jac.transpose() * g_t;
    let a = g_w_from_t * w_rot.transpose();
    let mut g_phi = m.cross(&g_m);
    g_phi += Vector3::new(a[(2, 1)] - a[(1, 2)], a[(0, 2)] - a[(2, 0)], a[(1, 0)] - a[(0, 1)]);
    g_phi += s.normal_cam.cross(&sg.normal);
    let g_pose = Vector6::new(g_m.x, g_m.y, g_m.z, g_phi.x, g_phi.y, g_phi.z);

    (
        GaussianGrad {
            mean: g_mean,
            log_scale: g_log_scale,
            rotation: g_q,
            color: sg.color,
            opacity: sg.opacity,
        },
        g_pose,
    )
}
