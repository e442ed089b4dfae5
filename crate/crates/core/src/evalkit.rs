//! Trajectory and reconstruction metrics: rigid/similarity alignment,
//! absolute trajectory error, PSNR/SSIM/RMSE, one-directional Chamfer
//! distance, and a binary PLY writer/reader for point clouds.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotation_angle, GaussianScene, Pose};
use crate::maps::{Mask, ScalarMap, VectorMap};

/// Frame-indexed camera poses (world-to-camera), indices strictly increasing.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub entries: Vec<(usize, Pose)>,
}

impl Trajectory {
    pub fn new(entries: Vec<(usize, Pose)>) -> Result<Self> {
        let t = Self { entries };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        for w in self.entries.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::invalid(format!("trajectory indices not increasing at {}", w[1].0)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn centers(&self) -> Vec<Vector3<f64>> {
        self.entries.iter().map(|(_, p)| p.center()).collect()
    }

    pub fn from_poses(poses: &[Pose]) -> Self {
        Self {
            entries: poses.iter().copied().enumerate().collect(),
        }
    }

    /// `index,tx,ty,tz,qw,qx,qy,qz` per line, world-to-camera.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame_index,tx,ty,tz,qw,qx,qy,qz\n");
        for (i, p) in &self.entries {
            let q = p.quaternion();
            let t = p.translation;
            s.push_str(&format!("{i},{},{},{},{},{},{},{}\n", t.x, t.y, t.z, q[0], q[1], q[2], q[3]));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text).map_err(|(line, msg)| Error::schema(path, format!("line {line}: {msg}")))
    }

    fn parse_csv(text: &str) -> std::result::Result<Self, (usize, String)> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = line.trim();
            if line.is_empty() || (n == 0 && line.starts_with("frame_index")) {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 8 {
                return Err((line_no, format!("expected 8 fields, found {}", fields.len())));
            }
            let index: usize = fields[0].parse().map_err(|_| (line_no, format!("bad frame index {:?}", fields[0])))?;
            let mut v = [0.0f64; 7];
            for (k, f) in fields[1..].iter().enumerate() {
                v[k] = f.parse().map_err(|_| (line_no, format!("bad number {f:?}")))?;
                if !v[k].is_finite() {
                    return Err((line_no, format!("non-finite value {f:?}")));
                }
            }
            let qn = (v[3] * v[3] + v[4] * v[4] + v[5] * v[5] + v[6] * v[6]).sqrt();
            if (qn - 1.0).abs() > 1e-6 {
                return Err((line_no, format!("quaternion norm {qn} is not 1")));
            }
            let pose = Pose::from_quaternion([v[3], v[4], v[5], v[6]], Vector3::new(v[0], v[1], v[2]));
            if let Some((last, _)) = entries.last() {
                if index <= *last {
                    return Err((line_no, format!("frame index {index} not increasing")));
                }
            }
            entries.push((index, pose));
        }
        Ok(Self { entries })
    }
}

/// `x ↦ scale · R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
}

impl Similarity {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            scale: 1.0,
        }
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x * self.scale + self.translation
    }
}

/// Relative size of the second singular value below which the point sets are
/// treated as collinear.
pub const RANK_TOL: f64 = 1e-9;

/// Closed-form least-squares alignment taking `est` onto `gt`
/// (centroids plus SVD of the cross-covariance, with the reflection fix).
pub fn align_points(est: &[Vector3<f64>], gt: &[Vector3<f64>], with_scale: bool) -> Result<Similarity> {
    if est.len() != gt.len() {
        return Err(Error::LengthMismatch(est.len(), gt.len()));
    }
    if est.len() < 3 {
        return Err(Error::RankDeficient(format!("need at least 3 points, got {}", est.len())));
    }
    let n = est.len() as f64;
    let mu_e = est.iter().sum::<Vector3<f64>>() / n;
    let mu_g = gt.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_e = 0.0;
    for (e, g) in est.iter().zip(gt) {
        let de = e - mu_e;
        cov += (g - mu_g) * de.transpose();
        var_e += de.norm_squared();
    }
    cov /= n;
    var_e /= n;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let mut sv: Vec<(usize, f64)> = svd.singular_values.iter().copied().enumerate().collect();
    sv.sort_by(|a, b| b.1.total_cmp(&a.1));
    if !(sv[1].1 > RANK_TOL * sv[0].1.max(f64::MIN_POSITIVE)) {
        return Err(Error::RankDeficient(format!(
            "camera centers are (nearly) collinear: singular values {:?}",
            svd.singular_values.as_slice()
        )));
    }
    let mut s = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        // flip the axis belonging to the smallest singular value
        s[(sv[2].0, sv[2].0)] = -1.0;
    }
    let rotation = u * s * v_t;
    let scale = if with_scale {
        (Matrix3::from_diagonal(&svd.singular_values) * s).trace() / var_e
    } else {
        1.0
    };
    let translation = mu_g - rotation * mu_e * scale;
    Ok(Similarity {
        rotation,
        translation,
        scale,
    })
}

/// Aligns camera centers of `est` onto `gt`; both must carry the same frame indices.
pub fn align_rigid(est: &Trajectory, gt: &Trajectory, with_scale: bool) -> Result<Similarity> {
    check_matching(est, gt)?;
    align_points(&est.centers(), &gt.centers(), with_scale)
}

fn check_matching(est: &Trajectory, gt: &Trajectory) -> Result<()> {
    if est.len() != gt.len() {
        return Err(Error::LengthMismatch(est.len(), gt.len()));
    }
    for ((a, _), (b, _)) in est.entries.iter().zip(&gt.entries) {
        if a != b {
            return Err(Error::invalid(format!("frame index {a} does not match ground truth index {b}")));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AteResult {
    pub ate_t_mm: f64,
    pub ate_r_deg: f64,
    pub translation_errors_mm: Vec<f64>,
    pub rotation_errors_deg: Vec<f64>,
    pub alignment_scale: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alignment {
    None,
    #[default]
    Se3,
    Sim3,
}

/// RMSE of camera-center distances (mm) and of rotation angles (degrees)
/// after the requested alignment.
pub fn ate(est: &Trajectory, gt: &Trajectory, alignment: Alignment) -> Result<AteResult> {
    check_matching(est, gt)?;
    if est.is_empty() {
        return Err(Error::invalid("empty trajectory"));
    }
    let sim = match alignment {
        Alignment::None => Similarity::identity(),
        Alignment::Se3 => align_rigid(est, gt, false)?,
        Alignment::Sim3 => align_rigid(est, gt, true)?,
    };
    let mut te = Vec::with_capacity(est.len());
    let mut re = Vec::with_capacity(est.len());
    for ((_, pe), (_, pg)) in est.entries.iter().zip(&gt.entries) {
        te.push((sim.apply(&pe.center()) - pg.center()).norm());
        // camera-to-world rotation of the estimate expressed in the ground-truth frame
        let r_wc = sim.rotation * pe.rotation.transpose();
        re.push(rotation_angle(&(r_wc * pg.rotation)).to_degrees());
    }
    let rmse = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
    Ok(AteResult {
        ate_t_mm: rmse(&te),
        ate_r_deg: rmse(&re),
        translation_errors_mm: te,
        rotation_errors_deg: re,
        alignment_scale: sim.scale,
    })
}

pub const PSNR_CAP_DB: f64 = 100.0;

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < 1e-10 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub psnr_db: f64,
    pub ssim: f64,
    pub rmse: f64,
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Single-channel SSIM averaged over every window position that fits inside
/// the image (dynamic range 1).
pub fn ssim_channel(a: &ScalarMap, b: &ScalarMap) -> Result<f64> {
    a.ensure_shape(b, "ssim")?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::invalid(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}")));
    }
    let g = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - SSIM_WINDOW {
        for x0 in 0..=w - SSIM_WINDOW {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for j in 0..SSIM_WINDOW {
                for i in 0..SSIM_WINDOW {
                    let wt = g[i] * g[j];
                    let va = *a.get(x0 + i, y0 + j);
                    let vb = *b.get(x0 + i, y0 + j);
                    ma += wt * va;
                    mb += wt * vb;
                    saa += wt * va * va;
                    sbb += wt * vb * vb;
                    sab += wt * va * vb;
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// PSNR (capped), SSIM averaged over channels, and RMSE of two RGB images in `[0, 1]`.
pub fn image_metrics(rendered: &VectorMap, target: &VectorMap) -> Result<ImageMetrics> {
    rendered.ensure_shape(target, "image metrics")?;
    let n = rendered.len() as f64 * 3.0;
    let mse = rendered
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b).norm_squared())
        .sum::<f64>()
        / n;
    let mut ssim = 0.0;
    for c in 0..3 {
        let a = rendered.map(|v| v[c]);
        let b = target.map(|v| v[c]);
        ssim += ssim_channel(&a, &b)?;
    }
    Ok(ImageMetrics {
        psnr_db: psnr_from_mse(mse),
        ssim: ssim / 3.0,
        rmse: mse.sqrt(),
    })
}

/// RMSE over pixels where both depths are positive (and `mask`, if given).
/// `None` when no pixel qualifies.
pub fn depth_rmse(rendered: &ScalarMap, gt: &ScalarMap, mask: Option<&Mask>) -> Result<Option<f64>> {
    rendered.ensure_shape(gt, "depth rmse")?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..rendered.len() {
        let (a, b) = (rendered.data()[i], gt.data()[i]);
        if a > 0.0 && b > 0.0 && mask.is_none_or(|m| m.data()[i]) {
            sum += (a - b).powi(2);
            n += 1;
        }
    }
    Ok((n > 0).then(|| (sum / n as f64).sqrt()))
}

/// Uniform-grid index for exact nearest-neighbour queries.
pub struct PointGrid<'a> {
    points: &'a [Vector3<f64>],
    origin: Vector3<f64>,
    cell: f64,
    dims: [usize; 3],
    /// CSR layout: `starts[c]..starts[c + 1]` indexes `order`.
    starts: Vec<usize>,
    order: Vec<usize>,
}

impl<'a> PointGrid<'a> {
    pub fn new(points: &'a [Vector3<f64>]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("empty point cloud"));
        }
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for p in points {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(Error::invalid("point cloud contains non-finite coordinates"));
            }
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let ext = hi - lo;
        // about two points per cell for a surface-like cloud
        let vol = ext.iter().map(|e| e.max(1e-9)).product::<f64>();
        let mut cell = (vol * 2.0 / points.len() as f64).cbrt();
        let max_ext = ext.max().max(1e-9);
        cell = cell.clamp(max_ext / 256.0, max_ext.max(1e-9));
        let dims = [0, 1, 2].map(|a| ((ext[a] / cell).floor() as usize + 1).min(1024));
        let ncell = dims[0] * dims[1] * dims[2];
        let mut counts = vec![0usize; ncell + 1];
        let cell_of: Vec<usize> = points
            .iter()
            .map(|p| {
                let c = Self::coords_of(p, &lo, cell, &dims);
                (c[2] * dims[1] + c[1]) * dims[0] + c[0]
            })
            .collect();
        for &c in &cell_of {
            counts[c + 1] += 1;
        }
        for i in 0..ncell {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut order = vec![0; points.len()];
        for (i, &c) in cell_of.iter().enumerate() {
            order[fill[c]] = i;
            fill[c] += 1;
        }
        Ok(Self {
            points,
            origin: lo,
            cell,
            dims,
            starts: counts,
            order,
        })
    }

    fn coords_of(p: &Vector3<f64>, origin: &Vector3<f64>, cell: f64, dims: &[usize; 3]) -> [usize; 3] {
        [0, 1, 2].map(|a| (((p[a] - origin[a]) / cell).floor().max(0.0) as usize).min(dims[a] - 1))
    }

    /// Index of and distance to the nearest stored point.
    pub fn nearest(&self, q: &Vector3<f64>) -> (usize, f64) {
        let qc: [i64; 3] = [0, 1, 2].map(|a| ((q[a] - self.origin[a]) / self.cell).floor() as i64);
        let clamp = |a: usize, v: i64| v.clamp(0, self.dims[a] as i64 - 1);
        let start = [0, 1, 2].map(|a| clamp(a, qc[a]));
        let mut best = (usize::MAX, f64::INFINITY);
        let max_ring = *self.dims.iter().max().unwrap() as i64;
        for ring in 0..=max_ring {
            // visit the shell of cells at Chebyshev distance `ring` from the start cell
            for dz in -ring..=ring {
                for dy in -ring..=ring {
                    for dx in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        let c = [start[0] + dx, start[1] + dy, start[2] + dz];
                        if (0..3).any(|a| c[a] < 0 || c[a] >= self.dims[a] as i64) {
                            continue;
                        }
                        let id = ((c[2] as usize * self.dims[1]) + c[1] as usize) * self.dims[0] + c[0] as usize;
                        for &i in &self.order[self.starts[id]..self.starts[id + 1]] {
                            let d = (self.points[i] - q).norm_squared();
                            if d < best.1 || (d == best.1 && i < best.0) {
                                best = (i, d);
                            }
                        }
                    }
                }
            }
            // every unvisited cell is at least this far from the query
            let reach = self.unvisited_distance(q, &start, ring);
            if best.1 <= reach * reach {
                break;
            }
        }
        (best.0, best.1.sqrt())
    }

    /// Lower bound on the distance from `q` to any cell outside the
    /// Chebyshev ring `ring` around `start`.
    fn unvisited_distance(&self, q: &Vector3<f64>, start: &[i64; 3], ring: i64) -> f64 {
        let mut d = f64::INFINITY;
        for a in 0..3 {
            let lo_cell = start[a] - ring;
            let hi_cell = start[a] + ring + 1;
            if lo_cell > 0 {
                let edge = self.origin[a] + lo_cell as f64 * self.cell;
                d = d.min((q[a] - edge).max(0.0));
            }
            if hi_cell < self.dims[a] as i64 {
                let edge = self.origin[a] + hi_cell as f64 * self.cell;
                d = d.min((edge - q[a]).max(0.0));
            }
        }
        d
    }
}

/// Mean over ground-truth points of the distance to the nearest estimated point.
pub fn chamfer_gt_to_est(gt: &[Vector3<f64>], est: &[Vector3<f64>]) -> Result<f64> {
    if gt.is_empty() {
        return Err(Error::invalid("empty ground-truth cloud"));
    }
    let grid = PointGrid::new(est)?;
    use rayon::prelude::*;
    let dists: Vec<f64> = gt.par_iter().map(|p| grid.nearest(p).1).collect();
    Ok(dists.iter().sum::<f64>() / gt.len() as f64)
}

/// Binary little-endian PLY with float32 `x, y, z` and uint8 `red, green, blue`.
pub fn write_ply(path: &Path, points: &[Vector3<f64>], colors: &[[u8; 3]]) -> Result<()> {
    if points.is_empty() {
        return Err(Error::invalid("refusing to write an empty point cloud"));
    }
    if points.len() != colors.len() {
        return Err(Error::LengthMismatch(points.len(), colors.len()));
    }
    let mut buf = Vec::with_capacity(128 + points.len() * 15);
    write!(
        buf,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        points.len()
    )
    .expect("write to vec");
    for (p, c) in points.iter().zip(colors) {
        for v in p.iter() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        buf.extend_from_slice(c);
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Exports Gaussian centers with gamma-encoded colors.
pub fn export_ply(path: &Path, scene: &GaussianScene, gamma: f64) -> Result<()> {
    if scene.is_empty() {
        return Err(Error::EmptyScene);
    }
    let points: Vec<Vector3<f64>> = scene.gaussians.iter().map(|g| g.mean).collect();
    let colors: Vec<[u8; 3]> = scene
        .gaussians
        .iter()
        .map(|g| g.color.map(|c| (c.clamp(0.0, 1.0).powf(1.0 / gamma) * 255.0).round() as u8).into())
        .collect();
    write_ply(path, &points, &colors)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlyCloud {
    pub points: Vec<Vector3<f32>>,
    pub colors: Vec<[u8; 3]>,
}

/// Reads the vertex layout written by [`write_ply`].
pub fn read_ply(path: &Path) -> Result<PlyCloud> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut header = Vec::new();
    let mut count = None;
    loop {
        let mut line = String::new();
        if r.read_line(&mut line).map_err(|e| Error::io(path, e))? == 0 {
            return Err(Error::schema(path, "unterminated PLY header"));
        }
        let line = line.trim_end().to_string();
        if let Some(n) = line.strip_prefix("element vertex ") {
            count = Some(n.trim().parse::<usize>().map_err(|_| Error::schema(path, format!("bad vertex count {n:?}")))?);
        }
        let done = line == "end_header";
        header.push(line);
        if done {
            break;
        }
    }
    let expected = [
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
    ];
    let props: Vec<&str> = header.iter().filter(|l| l.starts_with("property")).map(String::as_str).collect();
    if header.first().map(String::as_str) != Some("ply")
        || !header.iter().any(|l| l == "format binary_little_endian 1.0")
        || props != expected
    {
        return Err(Error::schema(path, "unsupported PLY layout"));
    }
    let n = count.ok_or_else(|| Error::schema(path, "missing vertex count"))?;
    let mut body = Vec::new();
    r.read_to_end(&mut body).map_err(|e| Error::io(path, e))?;
    if body.len() != n * 15 {
        return Err(Error::schema(path, format!("expected {} body bytes, found {}", n * 15, body.len())));
    }
    let mut points = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    for rec in body.chunks_exact(15) {
        let f = |o: usize| f32::from_le_bytes(rec[o..o + 4].try_into().expect("4 bytes"));
        points.push(Vector3::new(f(0), f(4), f(8)));
        colors.push([rec[12], rec[13], rec[14]]);
    }
    Ok(PlyCloud { points, colors })
}
