//! Near-field point-light image formation for a light co-located with the
//! camera: back-projection, light direction and inverse-square attenuation,
//! Lambertian shading, gamma handling, albedo estimation and the pixel masks
//! used by the losses.
//!
//! Everything here is evaluated in camera coordinates with the light at the
//! camera origin.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::Intrinsics;
use crate::maps::{Mask, ScalarMap, VectorMap};

/// Pixels closer than this to the light are treated as invalid.
pub const MIN_LIGHT_DISTANCE: f64 = 1e-6;

/// `X(p) = depth(p) · K⁻¹ [x, y, 1]ᵀ`; non-positive depths map to the origin.
pub fn backproject(depth: &ScalarMap, k: &Intrinsics) -> VectorMap {
    VectorMap::from_fn(depth.width(), depth.height(), |x, y| {
        let d = *depth.get(x, y);
        if d > 0.0 {
            k.ray(x as f64, y as f64) * d
        } else {
            Vector3::zeros()
        }
    })
}

/// Light geometry and predicted diffuse brightness for a single point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointShading {
    pub light_dir: Vector3<f64>,
    pub attenuation: f64,
    pub shading: f64,
}

fn angular_term(u: &Vector3<f64>, beta: f64, axis: &Vector3<f64>) -> f64 {
    if beta == 0.0 {
        1.0
    } else {
        u.dot(axis).clamp(0.0, 1.0).powf(beta)
    }
}

/// Shading of a camera-space point `x` with unit normal `n`. `None` when
/// the point coincides with the light.
pub fn shade_point(x: &Vector3<f64>, n: &Vector3<f64>, beta: f64, axis: &Vector3<f64>) -> Option<PointShading> {
    let d = x.norm();
    if !(d >= MIN_LIGHT_DISTANCE) {
        return None;
    }
    let u = x / d;
    let light_dir = -u;
    let attenuation = angular_term(&u, beta, axis) / (d * d);
    let shading = attenuation * light_dir.dot(n).max(0.0);
    Some(PointShading {
        light_dir,
        attenuation,
        shading,
    })
}

/// Vector-Jacobian product of [`shade_point`]'s shading with respect to the
/// point and the normal.
pub fn shade_point_vjp(
    x: &Vector3<f64>,
    n: &Vector3<f64>,
    beta: f64,
    axis: &Vector3<f64>,
    grad_shading: f64,
) -> (Vector3<f64>, Vector3<f64>) {
    let d = x.norm();
    if !(d >= MIN_LIGHT_DISTANCE) || grad_shading == 0.0 {
        return (Vector3::zeros(), Vector3::zeros());
    }
    let u = x / d;
    let lambert = -u.dot(n);
    if lambert <= 0.0 {
        return (Vector3::zeros(), Vector3::zeros());
    }
    let a = angular_term(&u, beta, axis);
    let d3 = d * d * d;
    // f = -(x·n) / d³ so that shading = a · f
    let f = lambert / (d * d);
    let df_dx = -n / d3 + x * (3.0 * x.dot(n) / (d3 * d * d));
    let mut g_x = df_dx * a;
    if beta != 0.0 {
        let c = u.dot(axis);
        if c > 0.0 && c < 1.0 {
            let da_dx = (axis - u * c) * (beta * c.powf(beta - 1.0) / d);
            g_x += da_dx * f;
        }
    }
    let g_n = -u * (a / (d * d));
    (g_x * grad_shading, g_n * grad_shading)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShadingField {
    pub points: VectorMap,
    pub light_dir: VectorMap,
    /// Inverse-square (and optional angular) attenuation, mm⁻².
    pub attenuation: ScalarMap,
    /// `attenuation · max(0, light_dirᵀ n)`.
    pub shading: ScalarMap,
    /// False where the point coincides with the light or has no depth.
    pub valid: Mask,
    pub beta: f64,
    pub axis: Vector3<f64>,
}

pub fn shading_field(points: &VectorMap, normals: &VectorMap, beta: f64, axis: &Vector3<f64>) -> Result<ShadingField> {
    points.ensure_shape(normals, "shading normals")?;
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::invalid(format!("beta must be finite and non-negative, got {beta}")));
    }
    let axis = axis.try_normalize(1e-12).ok_or_else(|| Error::invalid("zero optical axis"))?;
    let (w, h) = (points.width(), points.height());
    let mut light_dir = VectorMap::filled(w, h, Vector3::zeros());
    let mut attenuation = ScalarMap::filled(w, h, 0.0);
    let mut shading = ScalarMap::filled(w, h, 0.0);
    let mut valid = Mask::filled(w, h, false);
    for i in 0..points.len() {
        if let Some(ps) = shade_point(&points.data()[i], &normals.data()[i], beta, &axis) {
            light_dir.data_mut()[i] = ps.light_dir;
            attenuation.data_mut()[i] = ps.attenuation;
            shading.data_mut()[i] = ps.shading;
            valid.data_mut()[i] = true;
        }
    }
    Ok(ShadingField {
        points: points.clone(),
        light_dir,
        attenuation,
        shading,
        valid,
        beta,
        axis,
    })
}

/// Elementwise `v^gamma` after clamping to `[0, 1]`; returns the number of
/// clamped channel values.
pub fn srgb_to_linear(image: &VectorMap, gamma: f64) -> (VectorMap, usize) {
    let mut clamped = 0usize;
    let out = image.map(|c| {
        Vector3::from_fn(|i, _| {
            let v = c[i];
            let vc = v.clamp(0.0, 1.0);
            if vc != v || v.is_nan() {
                clamped += 1;
            }
            if v.is_nan() {
                0.0
            } else {
                vc.powf(gamma)
            }
        })
    });
    if clamped > 0 {
        log::warn!("srgb_to_linear clamped {clamped} channel values into [0, 1]");
    }
    (out, clamped)
}

pub fn linear_to_srgb(image: &VectorMap, gamma: f64) -> VectorMap {
    image.map(|c| c.map(|v| v.clamp(0.0, 1.0).powf(1.0 / gamma)))
}

/// RGB in `[0, 1]` to `(hue degrees, saturation, value)`.
pub fn rgb_to_hsv(rgb: &Vector3<f64>) -> (f64, f64, f64) {
    let (r, g, b) = (rgb.x, rgb.y, rgb.z);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let hue = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let sat = if max == 0.0 { 0.0 } else { delta / max };
    (hue, sat, max)
}

pub fn hsv_to_rgb(hue: f64, sat: f64, value: f64) -> Vector3<f64> {
    let c = value * sat;
    let hp = hue.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = value - c;
    Vector3::new(r + m, g + m, b + m)
}

/// Relative albedo: each pixel's HSV value channel is set to one, then the
/// result is linearized with `gamma`. Black pixels map to white.
pub fn estimate_albedo(image_srgb: &VectorMap, gamma: f64) -> VectorMap {
    let chroma = image_srgb.map(|c| {
        let c = c.map(|v| v.clamp(0.0, 1.0));
        let (h, s, v) = rgb_to_hsv(&c);
        if v == 0.0 {
            Vector3::repeat(1.0)
        } else {
            hsv_to_rgb(h, s, 1.0)
        }
    });
    srgb_to_linear(&chroma, gamma).0
}

/// Zero where the brightest channel exceeds `tau`, grown by one 3×3
/// dilation step; one elsewhere.
pub fn specular_mask(image_linear: &VectorMap, tau: f64) -> Mask {
    let (w, h) = (image_linear.width(), image_linear.height());
    let hot = image_linear.map(|c| c.max() > tau);
    Mask::from_fn(w, h, |x, y| {
        for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
            for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                if *hot.get(xx, yy) {
                    return false;
                }
            }
        }
        true
    })
}

/// Round half to even.
fn round_even(v: f64) -> usize {
    let f = v.floor();
    let diff = v - f;
    let r = if diff > 0.5 {
        f + 1.0
    } else if diff < 0.5 {
        f
    } else if (f as i64) % 2 == 0 {
        f
    } else {
        f + 1.0
    };
    r as usize
}

/// Side length and first index of the centered crop along one axis.
pub fn crop_range(dim: usize, fraction: f64) -> (usize, usize) {
    let side = round_even(fraction * dim as f64).clamp(1, dim.max(1));
    ((dim - side) / 2, side)
}

/// Ones inside the centered rectangle covering `fraction` of each side.
pub fn center_crop_mask(width: usize, height: usize, fraction: f64) -> Result<Mask> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("crop fraction must lie in (0, 1], got {fraction}")));
    }
    let (x0, sw) = crop_range(width, fraction);
    let (y0, sh) = crop_range(height, fraction);
    Ok(Mask::from_fn(width, height, |x, y| {
        x >= x0 && x < x0 + sw && y >= y0 && y < y0 + sh
    }))
}

/// The masks gating the near-field loss.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    pub specular: Mask,
    pub crop: Mask,
    pub valid_depth: Mask,
    pub combined: Mask,
}

impl MaskSet {
    pub fn new(specular: Mask, crop: Mask, valid_depth: Mask) -> Result<Self> {
        let combined = specular.and(&crop)?.and(&valid_depth)?;
        Ok(Self {
            specular,
            crop,
            valid_depth,
            combined,
        })
    }

    pub fn all(width: usize, height: usize) -> Self {
        let ones = Mask::filled(width, height, true);
        Self {
            specular: ones.clone(),
            crop: ones.clone(),
            valid_depth: ones.clone(),
            combined: ones,
        }
    }
}

pub fn valid_depth_mask(depth: &ScalarMap, near_plane: f64) -> Mask {
    depth.map(|&d| d > near_plane)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k() -> Intrinsics {
        Intrinsics::new(100.0, 80.0, 32.0, 24.0, 64, 48).unwrap()
    }

    #[test]
    fn backprojection_cases() {
        let k = k();
        let mut depth = ScalarMap::filled(64, 48, 0.0);
        *depth.get_mut(32, 24) = 3.0;
        *depth.get_mut(32 + 100, 0) = 0.0;
        let pts = backproject(&depth, &k);
        assert_eq!(*pts.get(32, 24), Vector3::new(0.0, 0.0, 3.0));
        assert_eq!(*pts.get(0, 0), Vector3::zeros());
        let k2 = Intrinsics::new(10.0, 10.0, 20.0, 20.0, 64, 48).unwrap();
        let mut depth = ScalarMap::filled(64, 48, 0.0);
        *depth.get_mut(30, 20) = 2.0;
        assert_eq!(*backproject(&depth, &k2).get(30, 20), Vector3::new(2.0, 0.0, 2.0));
        assert!(!*valid_depth_mask(&depth, 0.0).get(0, 0));
    }

    #[test]
    fn frontal_surface_follows_inverse_square() {
        let ps = shade_point(&Vector3::new(0.0, 0.0, 2.0), &Vector3::new(0.0, 0.0, -1.0), 0.0, &Vector3::z()).unwrap();
        assert_eq!(ps.light_dir, Vector3::new(0.0, 0.0, -1.0));
        assert_eq!(ps.attenuation, 0.25);
        assert_eq!(ps.shading, 0.25);
    }

    #[test]
    fn cosine_law_and_back_facing_clamp() {
        let a = 60f64.to_radians();
        let n = Vector3::new(a.sin(), 0.0, -a.cos());
        let ps = shade_point(&Vector3::new(0.0, 0.0, 2.0), &n, 0.0, &Vector3::z()).unwrap();
        assert!((ps.shading - 0.125).abs() < 1e-15);
        let ps = shade_point(&Vector3::new(0.0, 0.0, 2.0), &Vector3::z(), 0.0, &Vector3::z()).unwrap();
        assert_eq!(ps.shading, 0.0);
        assert!(shade_point(&Vector3::zeros(), &Vector3::z(), 0.0, &Vector3::z()).is_none());
    }

    #[test]
    fn shading_vjp_matches_finite_differences() {
        let axis = Vector3::new(0.1, -0.05, 1.0).normalize();
        let x = Vector3::new(0.7, -0.4, 3.1);
        let n = Vector3::new(-0.2, 0.3, -0.9).normalize();
        for beta in [0.0, 1.5] {
            let (gx, gn) = shade_point_vjp(&x, &n, beta, &axis, 1.0);
            let f = |x: &Vector3<f64>, n: &Vector3<f64>| shade_point(x, n, beta, &axis).unwrap().shading;
            let h = 1e-6;
            for i in 0..3 {
                let mut e = Vector3::zeros();
                e[i] = h;
                let fdx = (f(&(x + e), &n) - f(&(x - e), &n)) / (2.0 * h);
                let fdn = (f(&x, &(n + e)) - f(&x, &(n - e))) / (2.0 * h);
                assert!((gx[i] - fdx).abs() < 1e-8, "beta {beta} x[{i}] {} vs {fdx}", gx[i]);
                assert!((gn[i] - fdn).abs() < 1e-8, "beta {beta} n[{i}] {} vs {fdn}", gn[i]);
            }
        }
    }

    #[test]
    fn gamma_fixed_points_and_power() {
        let img = VectorMap::from_vec(3, 1, vec![Vector3::repeat(0.0), Vector3::repeat(1.0), Vector3::repeat(0.5)]).unwrap();
        let (lin, clamped) = srgb_to_linear(&img, 2.2);
        assert_eq!(clamped, 0);
        assert_eq!(lin.data()[0], Vector3::zeros());
        assert_eq!(lin.data()[1], Vector3::repeat(1.0));
        assert!((lin.data()[2].x - 0.217_637_640_824_031).abs() < 1e-12);
        assert_eq!(srgb_to_linear(&img, 1.0).0, img);
    }

    #[test]
    fn out_of_range_values_are_counted() {
        let img = VectorMap::from_vec(1, 1, vec![Vector3::new(-0.1, 0.5, 1.2)]).unwrap();
        let (lin, clamped) = srgb_to_linear(&img, 2.2);
        assert_eq!(clamped, 2);
        assert_eq!(lin.data()[0].x, 0.0);
        assert_eq!(lin.data()[0].z, 1.0);
    }

    #[test]
    fn albedo_of_gray_and_black_is_white() {
        let img = VectorMap::from_vec(2, 1, vec![Vector3::repeat(0.3), Vector3::zeros()]).unwrap();
        let alb = estimate_albedo(&img, 2.2);
        assert_eq!(alb.data()[0], Vector3::repeat(1.0));
        assert_eq!(alb.data()[1], Vector3::repeat(1.0));
    }

    #[test]
    fn albedo_of_reddish_pixel() {
        let (h, s, v) = rgb_to_hsv(&Vector3::new(0.5, 0.25, 0.25));
        assert_eq!((h, s, v), (0.0, 0.5, 0.5));
        let img = VectorMap::from_vec(1, 1, vec![Vector3::new(0.5, 0.25, 0.25)]).unwrap();
        let alb = estimate_albedo(&img, 2.2).data()[0];
        let want = 0.5f64.powf(2.2);
        assert!((alb - Vector3::new(1.0, want, want)).norm() < 1e-12);
    }

    #[test]
    fn hsv_round_trip() {
        for c in [
            Vector3::new(0.2, 0.7, 0.4),
            Vector3::new(0.9, 0.1, 0.6),
            Vector3::new(0.3, 0.3, 0.8),
            Vector3::new(0.6, 0.6, 0.1),
        ] {
            let (h, s, v) = rgb_to_hsv(&c);
            assert!((hsv_to_rgb(h, s, v) - c).norm() < 1e-12);
        }
    }

    #[test]
    fn specular_mask_cases() {
        let img = VectorMap::filled(5, 5, Vector3::repeat(0.5));
        assert_eq!(specular_mask(&img, 0.9).count(), 25);
        let mut img2 = img.clone();
        *img2.get_mut(2, 2) = Vector3::repeat(1.0);
        let m = specular_mask(&img2, 0.9);
        assert_eq!(m.count(), 16);
        for y in 1..=3 {
            for x in 1..=3 {
                assert!(!*m.get(x, y));
            }
        }
        assert_eq!(specular_mask(&img2, 1.0 + 1e-9).count(), 25);
    }

    #[test]
    fn crop_mask_cases() {
        assert_eq!(center_crop_mask(8, 8, 1.0).unwrap().count(), 64);
        let m = center_crop_mask(8, 8, 0.5).unwrap();
        assert_eq!(m.count(), 16);
        assert!(*m.get(2, 2) && *m.get(5, 5) && !*m.get(1, 2) && !*m.get(6, 5));
        assert!(center_crop_mask(8, 8, 0.0).is_err());
        assert!(center_crop_mask(8, 8, 1.5).is_err());
    }

    #[test]
    fn crop_mask_matches_center_distance_oracle() {
        // a pixel is inside when its center offset from the image center lies in [-side/2, side/2)
        for dim in [5usize, 7, 8, 9, 13, 16] {
            for fraction in [0.3, 0.5, 0.75, 0.9, 1.0] {
                let m = center_crop_mask(dim, dim, fraction).unwrap();
                let side = m.enumerate().filter(|&(_, y, &v)| y == dim / 2 && v).count() as f64;
                for (x, y, &v) in m.enumerate() {
                    let inside = |i: usize| {
                        let off = i as f64 + 0.5 - dim as f64 / 2.0;
                        off >= -side / 2.0 && off < side / 2.0
                    };
                    assert_eq!(v, inside(x) && inside(y), "dim {dim} fraction {fraction} at ({x},{y})");
                }
            }
        }
        let m = center_crop_mask(7, 7, 0.5).unwrap();
        assert_eq!(m.count(), 16);
        assert!(*m.get(1, 1) && *m.get(4, 4) && !*m.get(5, 4) && !*m.get(0, 3));
    }
}
