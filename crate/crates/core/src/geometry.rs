//! Scene and camera primitives: anisotropic 3D Gaussians, SE(3) poses with
//! exponential/logarithm maps, pinhole intrinsics and per-Gaussian normals.
//!
//! Poses are world-to-camera: `x_cam = R * x_world + t`. Lie-algebra vectors
//! are ordered translation first, `xi = (rho, phi)`.

use nalgebra::{Matrix3, Quaternion, Rotation3, SymmetricEigen, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this gap between the two smallest squared axis lengths the
/// shortest axis is not unique.
pub const NORMAL_DEGENERACY_TOL: f64 = 1e-9;

/// Rotation angles at or beyond `PI - CUT_LOCUS_MARGIN` have no unique log.
pub const CUT_LOCUS_MARGIN: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian3D {
    /// Center in world units (mm).
    pub mean: Vector3<f64>,
    /// Per-axis standard deviations, strictly positive.
    pub scale: Vector3<f64>,
    /// Unit quaternion; re-normalized after every optimizer step.
    pub rotation: Quaternion<f64>,
    /// Linear RGB in `[0, 1]`.
    pub color: Vector3<f64>,
    /// In `(0, 1]`.
    pub opacity: f64,
}

impl Gaussian3D {
    pub fn isotropic(mean: Vector3<f64>, sigma: f64, color: Vector3<f64>, opacity: f64) -> Self {
        Self {
            mean,
            scale: Vector3::repeat(sigma),
            rotation: Quaternion::identity(),
            color,
            opacity,
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quaternion_to_matrix(&self.rotation)
    }

    pub fn covariance(&self) -> Result<Matrix3<f64>> {
        covariance_of(&self.scale, &self.rotation)
    }

    /// Index of the shortest axis, or `None` when the two shortest axes tie.
    pub fn shortest_axis(&self) -> Option<usize> {
        shortest_axis(&self.scale)
    }

    /// World-frame normal taken as the shortest axis of the factored
    /// covariance. Sign is arbitrary; callers orient it toward the viewer.
    pub fn axis_normal(&self) -> Option<Vector3<f64>> {
        self.shortest_axis()
            .map(|j| self.rotation_matrix().column(j).into_owned())
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().all(|v| v.is_finite())
            && self.scale.iter().all(|v| v.is_finite())
            && self.rotation.coords.iter().all(|v| v.is_finite())
            && self.color.iter().all(|v| v.is_finite())
            && self.opacity.is_finite()
    }
}

pub(crate) fn shortest_axis(scale: &Vector3<f64>) -> Option<usize> {
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| scale[a].total_cmp(&scale[b]).then(a.cmp(&b)));
    let (s0, s1) = (scale[order[0]], scale[order[1]]);
    if (s1 * s1 - s0 * s0).abs() < NORMAL_DEGENERACY_TOL {
        None
    } else {
        Some(order[0])
    }
}

/// Ordered set of Gaussians plus a generation counter bumped on every
/// structural change (insertion, pruning).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GaussianScene {
    pub gaussians: Vec<Gaussian3D>,
    pub generation: u64,
}

impl GaussianScene {
    pub fn new(gaussians: Vec<Gaussian3D>) -> Self {
        Self {
            gaussians,
            generation: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn push(&mut self, g: Gaussian3D) {
        self.gaussians.push(g);
        self.generation += 1;
    }

    /// Keeps only the Gaussians for which `keep` is true; returns how many were dropped.
    pub fn retain_indexed(&mut self, mut keep: impl FnMut(usize, &Gaussian3D) -> bool) -> usize {
        let before = self.gaussians.len();
        let mut i = 0;
        self.gaussians.retain(|g| {
            let k = keep(i, g);
            i += 1;
            k
        });
        let dropped = before - self.gaussians.len();
        if dropped > 0 {
            self.generation += 1;
        }
        dropped
    }

    /// Diagonal of the axis-aligned bounding box of the means.
    pub fn extent(&self) -> f64 {
        if self.gaussians.is_empty() {
            return 0.0;
        }
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for g in &self.gaussians {
            lo = lo.inf(&g.mean);
            hi = hi.sup(&g.mean);
        }
        (hi - lo).norm()
    }
}

/// Rotation matrix of `q / |q|`.
pub fn quaternion_to_matrix(q: &Quaternion<f64>) -> Matrix3<f64> {
    let n = q.norm();
    let (w, x, y, z) = (q.w / n, q.i / n, q.j / n, q.k / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls a gradient on the rotation matrix back to the raw (possibly
/// unnormalized) quaternion components `(w, x, y, z)`.
pub fn quaternion_matrix_vjp(q: &Quaternion<f64>, grad_r: &Matrix3<f64>) -> [f64; 4] {
    let n = q.norm();
    let (w, x, y, z) = (q.w / n, q.i / n, q.j / n, q.k / n);
    let g = |r: usize, c: usize| grad_r[(r, c)];
    let dw = 2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0)
            + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let dy = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0)
            + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let dz = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));
    // project out the radial direction of the normalization
    let unit = [w, x, y, z];
    let grad = [dw, dx, dy, dz];
    let radial: f64 = unit.iter().zip(&grad).map(|(a, b)| a * b).sum();
    let mut out = [0.0; 4];
    for k in 0..4 {
        out[k] = (grad[k] - unit[k] * radial) / n;
    }
    out
}

/// `R diag(scale²) Rᵀ` with `R` from the normalized quaternion.
pub fn covariance_of(scale: &Vector3<f64>, rotation: &Quaternion<f64>) -> Result<Matrix3<f64>> {
    if !scale.iter().all(|s| s.is_finite()) || !rotation.coords.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("non-finite scale or rotation"));
    }
    if scale.iter().any(|&s| s <= 0.0) {
        return Err(Error::invalid(format!("scale must be positive, got {scale:?}")));
    }
    if rotation.norm() == 0.0 {
        return Err(Error::invalid("zero quaternion"));
    }
    let r = quaternion_to_matrix(rotation);
    let m = r * Matrix3::from_diagonal(scale);
    Ok(m * m.transpose())
}

/// Unit eigenvector of the smallest eigenvalue of an SPD matrix.
///
/// Returned with a non-positive z component (the camera-facing convention
/// when the matrix is expressed in camera coordinates); an exactly zero z
/// falls back to non-positive y, then x.
pub fn gaussian_normal(covariance: &Matrix3<f64>) -> Result<Vector3<f64>> {
    if !covariance.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("non-finite covariance"));
    }
    let sym = (covariance + covariance.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (l0, l1) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]);
    if l0 <= 0.0 {
        return Err(Error::invalid("covariance is not positive definite"));
    }
    if (l1 - l0).abs() < NORMAL_DEGENERACY_TOL {
        return Err(Error::DegenerateNormal(l0, l1));
    }
    let v = eig.eigenvectors.column(order[0]).normalize();
    Ok(orient_toward_negative_z(v))
}

fn orient_toward_negative_z(v: Vector3<f64>) -> Vector3<f64> {
    for k in [2usize, 1, 0] {
        if v[k] > 0.0 {
            return -v;
        }
        if v[k] < 0.0 {
            return v;
        }
    }
    v
}

#[inline]
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rigid world-to-camera transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Camera center in world coordinates, `-Rᵀ t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Pose whose camera sits at `center` with world-to-camera rotation `rotation`.
    pub fn from_center(rotation: Matrix3<f64>, center: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation: -(rotation * center),
        }
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `exp(delta) ∘ self`, re-orthonormalized.
    pub fn retract_left(&self, delta: &Vector6<f64>) -> Pose {
        let mut out = se3_exp(delta).compose(self);
        out.rotation = orthonormalize(&out.rotation);
        out
    }

    pub fn to_matrix(&self) -> nalgebra::Matrix4<f64> {
        let mut m = nalgebra::Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Row-major 4×4 representation.
    pub fn to_row_major(&self) -> [f64; 16] {
        let m = self.to_matrix();
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = m[(r, c)];
            }
        }
        out
    }

    pub fn from_row_major(v: &[f64; 16]) -> Pose {
        Pose {
            rotation: Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]),
            translation: Vector3::new(v[3], v[7], v[11]),
        }
    }

    /// Quaternion `(w, x, y, z)` of the rotation with non-negative `w`.
    pub fn quaternion(&self) -> [f64; 4] {
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation));
        let q = if q.w < 0.0 { -q.into_inner() } else { q.into_inner() };
        [q.w, q.i, q.j, q.k]
    }

    pub fn from_quaternion(q: [f64; 4], translation: Vector3<f64>) -> Pose {
        Pose {
            rotation: quaternion_to_matrix(&Quaternion::new(q[0], q[1], q[2], q[3])),
            translation,
        }
    }

    pub fn rotation_angle(&self) -> f64 {
        rotation_angle(&self.rotation)
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        let orth = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        orth <= tol && (self.rotation.determinant() - 1.0).abs() <= tol && self.translation.iter().all(|v| v.is_finite())
    }
}

pub fn orthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r));
    q.to_rotation_matrix().into_inner()
}

pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let v = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]) * 0.5;
    let c = (r.trace() - 1.0) * 0.5;
    v.norm().atan2(c)
}

/// Rodrigues rotation for the axis-angle vector `phi`.
pub fn so3_exp(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let (a, b) = if theta < 1e-4 {
        (1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0, 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    let k = skew(phi);
    Matrix3::identity() + k * a + k * k * b
}

/// Axis-angle vector of a rotation whose angle is below `PI - CUT_LOCUS_MARGIN`.
pub fn so3_log(r: &Matrix3<f64>) -> Result<Vector3<f64>> {
    let v = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]) * 0.5;
    let s = v.norm();
    let c = (r.trace() - 1.0) * 0.5;
    let theta = s.atan2(c);
    if theta >= std::f64::consts::PI - CUT_LOCUS_MARGIN {
        return Err(Error::NearCutLocus(theta));
    }
    let factor = if theta < 1e-4 {
        1.0 + theta * theta / 6.0 + 7.0 * theta.powi(4) / 360.0
    } else {
        theta / s
    };
    Ok(v * factor)
}

/// Left Jacobian `V` mapping the translational part of a twist to `t`.
fn so3_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let (b, c) = if theta < 1e-4 {
        (0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0, 1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0)
    } else {
        ((1.0 - theta.cos()) / theta2, (theta - theta.sin()) / (theta2 * theta))
    };
    let k = skew(phi);
    Matrix3::identity() + k * b + k * k * c
}

fn so3_left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let d = if theta < 1e-3 {
        1.0 / 12.0 + theta2 / 720.0 + theta2 * theta2 / 30240.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half * half.cos() / half.sin()) / theta2
    };
    let k = skew(phi);
    Matrix3::identity() - k * 0.5 + k * k * d
}

/// Exponential map of a translation-first twist `(rho, phi)`.
pub fn se3_exp(xi: &Vector6<f64>) -> Pose {
    let rho = Vector3::new(xi[0], xi[1], xi[2]);
    let phi = Vector3::new(xi[3], xi[4], xi[5]);
    Pose {
        rotation: so3_exp(&phi),
        translation: so3_left_jacobian(&phi) * rho,
    }
}

pub fn se3_log(pose: &Pose) -> Result<Vector6<f64>> {
    let phi = so3_log(&pose.rotation)?;
    let rho = so3_left_jacobian_inv(&phi) * pose.translation;
    Ok(Vector6::new(rho.x, rho.y, rho.z, phi.x, phi.y, phi.z))
}

/// Pinhole intrinsics. Pixel `(x, y)` integer coordinates are pixel centers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::invalid("focal lengths must be positive and finite"));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64 && self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(Error::invalid("principal point must lie inside the image"));
        }
        Ok(())
    }

    /// Symmetric intrinsics with the given horizontal field of view.
    pub fn from_fov(width: usize, height: usize, fov_x_deg: f64) -> Result<Self> {
        let f = 0.5 * width as f64 / (0.5 * fov_x_deg.to_radians()).tan();
        Self::new(f, f, 0.5 * (width as f64 - 1.0), 0.5 * (height as f64 - 1.0), width, height)
    }

    /// `K⁻¹ [x, y, 1]ᵀ`: the camera ray through pixel `(x, y)` with unit z.
    #[inline]
    pub fn ray(&self, x: f64, y: f64) -> Vector3<f64> {
        Vector3::new((x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0)
    }

    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> nalgebra::Vector2<f64> {
        nalgebra::Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }
}
