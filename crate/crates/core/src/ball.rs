//! Poincaré-ball geometry anchored at the origin.
//!
//! Every map here is a pure function of its inputs and a [`BallConfig`].
//! Curvature is a run-time value, and [`Geometry::Euclidean`] turns the same
//! entry points into flat-space counterparts (identity maps, vector addition,
//! Euclidean distance) so that one model definition serves both geometries.
//!
//! Alongside each differentiable map lives its vector-Jacobian product
//! (`*_vjp`). The autodiff tape wraps these as fused nodes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, norm_sq};

/// Points pushed back inside the ball land at radius `(1 - PROJECTION_MARGIN) / sqrt(c)`.
pub const PROJECTION_MARGIN: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Geometry {
    Hyperbolic,
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BallConfig {
    /// Magnitude `c` of the (negative) curvature `-c`.
    pub curvature_c: f64,
    /// Numerical floor added to norms in denominators.
    pub eps: f64,
    pub dim: usize,
    pub geometry_mode: Geometry,
}

impl Default for BallConfig {
    fn default() -> Self {
        Self {
            curvature_c: 1.0,
            eps: 1e-8,
            dim: 256,
            geometry_mode: Geometry::Hyperbolic,
        }
    }
}

impl BallConfig {
    pub fn hyperbolic(curvature_c: f64, dim: usize) -> Self {
        Self {
            curvature_c,
            dim,
            ..Self::default()
        }
    }

    pub fn euclidean(dim: usize) -> Self {
        Self {
            dim,
            geometry_mode: Geometry::Euclidean,
            ..Self::default()
        }
    }

    pub fn with_dim(self, dim: usize) -> Self {
        Self { dim, ..self }
    }

    pub fn is_hyperbolic(&self) -> bool {
        self.geometry_mode == Geometry::Hyperbolic
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!(
                "eps must be positive, got {}",
                self.eps
            )));
        }
        if self.is_hyperbolic() && !(self.curvature_c > 0.0 && self.curvature_c.is_finite()) {
            return Err(Error::Config(format!(
                "curvature_c must be positive in hyperbolic mode, got {}",
                self.curvature_c
            )));
        }
        if self.dim == 0 {
            return Err(Error::Config("ball dimension must be positive".into()));
        }
        Ok(())
    }

    pub(crate) fn sqrt_c(&self) -> f64 {
        self.curvature_c.sqrt()
    }

    /// Largest admissible Euclidean norm after projection.
    pub fn max_norm(&self) -> f64 {
        (1.0 - PROJECTION_MARGIN) / self.sqrt_c()
    }
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "{what}: non-finite coordinate"
        )))
    }
}

fn check_interior(x: &[f64], cfg: &BallConfig, what: &str) -> Result<()> {
    check_finite(x, what)?;
    if cfg.is_hyperbolic() && cfg.curvature_c * norm_sq(x) >= 1.0 {
        return Err(Error::Domain(format!(
            "{what}: point with norm {} is not inside the ball of radius {}",
            norm(x),
            1.0 / cfg.sqrt_c()
        )));
    }
    Ok(())
}

/// Rescales `x` onto the radius `(1 - margin)/sqrt(c)` when it lies on or
/// outside the ball boundary. Returns whether rescaling happened.
fn project_in_place(x: &mut [f64], cfg: &BallConfig) -> bool {
    if !cfg.is_hyperbolic() {
        return false;
    }
    let n2 = norm_sq(x);
    if cfg.curvature_c * n2 >= 1.0 {
        let scale = cfg.max_norm() / n2.sqrt();
        x.iter_mut().for_each(|xi| *xi *= scale);
        true
    } else {
        false
    }
}

/// VJP of the rescale applied by projection, given the pre-projection vector.
fn project_vjp(pre: &[f64], g: &[f64], cfg: &BallConfig) -> Vec<f64> {
    let n = norm(pre);
    let r = cfg.max_norm();
    let gu = dot(g, pre) / n;
    pre.iter()
        .zip(g)
        .map(|(p, gi)| r / n * (gi - gu * p / n))
        .collect()
}

pub fn project_to_ball(x: &[f64], cfg: &BallConfig) -> Vec<f64> {
    let mut out = x.to_vec();
    project_in_place(&mut out, cfg);
    out
}

// Radial factors of the origin maps. Below SERIES_CUTOFF the closed forms
// cancel catastrophically and their Taylor expansions are used instead.

const SERIES_CUTOFF: f64 = 1e-3;

/// `tanh(x) / x`, equal to 1 at 0.
fn tanhc(x: f64) -> f64 {
    if x < SERIES_CUTOFF {
        1.0 - x * x / 3.0
    } else {
        x.tanh() / x
    }
}

/// `tanhc'(x) / x`.
fn tanhc_slope(x: f64) -> f64 {
    if x < SERIES_CUTOFF {
        -2.0 / 3.0 + 8.0 * x * x / 15.0
    } else {
        let t = x.tanh();
        (x * (1.0 - t * t) - t) / (x * x * x)
    }
}

/// `artanh(x) / x`, equal to 1 at 0.
fn artanhc(x: f64) -> f64 {
    if x < SERIES_CUTOFF {
        1.0 + x * x / 3.0
    } else {
        x.atanh() / x
    }
}

/// `artanhc'(x) / x`.
fn artanhc_slope(x: f64) -> f64 {
    if x < SERIES_CUTOFF {
        2.0 / 3.0 + 4.0 * x * x / 5.0
    } else {
        (x / (1.0 - x * x) - x.atanh()) / (x * x * x)
    }
}

/// Largest `sqrt(c)|x|` handed to artanh.
const ARTANH_CLAMP: f64 = 1.0 - PROJECTION_MARGIN * 1e-3;

// Unchecked kernels. Callers guarantee finiteness and interiority.

fn exp_origin_unprojected(v: &[f64], cfg: &BallConfig) -> Vec<f64> {
    let f = tanhc(cfg.sqrt_c() * norm(v));
    v.iter().map(|vi| f * vi).collect()
}

pub(crate) fn exp_origin_raw(v: &[f64], cfg: &BallConfig) -> Vec<f64> {
    if !cfg.is_hyperbolic() {
        return v.to_vec();
    }
    let mut out = exp_origin_unprojected(v, cfg);
    if exp_saturates(&out, cfg) {
        let scale = cfg.max_norm() / norm(&out);
        out.iter_mut().for_each(|x| *x *= scale);
    }
    out
}

/// Exponential-map outputs past the margin radius are pulled back onto it.
/// Once tanh rounds to within an ulp of 1 the exact map can land on the
/// boundary itself, and the projection rule alone would let that through.
fn exp_saturates(pre: &[f64], cfg: &BallConfig) -> bool {
    cfg.curvature_c * norm_sq(pre) > (1.0 - PROJECTION_MARGIN).powi(2)
}

pub(crate) fn log_origin_raw(x: &[f64], cfg: &BallConfig) -> Vec<f64> {
    if !cfg.is_hyperbolic() {
        return x.to_vec();
    }
    let x_s = cfg.sqrt_c() * norm(x);
    let f = if x_s > ARTANH_CLAMP {
        ARTANH_CLAMP.atanh() / x_s
    } else {
        artanhc(x_s)
    };
    x.iter().map(|xi| f * xi).collect()
}

fn mobius_add_unprojected(x: &[f64], y: &[f64], c: f64) -> Vec<f64> {
    let xy = dot(x, y);
    let x2 = norm_sq(x);
    let y2 = norm_sq(y);
    let alpha = 1.0 + 2.0 * c * xy + c * y2;
    let beta = 1.0 - c * x2;
    let den = 1.0 + 2.0 * c * xy + c * c * x2 * y2;
    x.iter()
        .zip(y)
        .map(|(xi, yi)| (alpha * xi + beta * yi) / den)
        .collect()
}

pub(crate) fn mobius_add_raw(x: &[f64], y: &[f64], cfg: &BallConfig) -> Vec<f64> {
    if !cfg.is_hyperbolic() {
        return x.iter().zip(y).map(|(a, b)| a + b).collect();
    }
    let mut out = mobius_add_unprojected(x, y, cfg.curvature_c);
    project_in_place(&mut out, cfg);
    out
}

pub(crate) fn dist_raw(x: &[f64], y: &[f64], cfg: &BallConfig) -> f64 {
    if !cfg.is_hyperbolic() {
        return x
            .iter()
            .zip(y)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
    }
    let neg_x: Vec<f64> = x.iter().map(|v| -v).collect();
    let u = mobius_add_raw(&neg_x, y, cfg);
    let s = cfg.sqrt_c();
    2.0 / s * (s * norm(&u)).atanh()
}

/// Squared distance; the quantity every loss in the model is built from.
pub(crate) fn dist_sq_raw(x: &[f64], y: &[f64], cfg: &BallConfig) -> f64 {
    if !cfg.is_hyperbolic() {
        return x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    }
    let d = dist_raw(x, y, cfg);
    d * d
}

/// Exponential map at the origin, `tanh(sqrt(c)|v|) v / (sqrt(c)|v|)`, with the
/// result held at least the projection margin away from the boundary.
pub fn exp_origin(v: &[f64], cfg: &BallConfig) -> Result<Vec<f64>> {
    check_finite(v, "exp_origin")?;
    Ok(exp_origin_raw(v, cfg))
}

/// Logarithmic map at the origin, inverse of [`exp_origin`].
pub fn log_origin(x: &[f64], cfg: &BallConfig) -> Result<Vec<f64>> {
    check_interior(x, cfg, "log_origin")?;
    Ok(log_origin_raw(x, cfg))
}

/// Möbius (gyrovector) addition `x ⊕ y`.
pub fn mobius_add(x: &[f64], y: &[f64], cfg: &BallConfig) -> Result<Vec<f64>> {
    if x.len() != y.len() {
        return Err(Error::InvalidInput(format!(
            "mobius_add: dimension mismatch {} vs {}",
            x.len(),
            y.len()
        )));
    }
    check_interior(x, cfg, "mobius_add lhs")?;
    check_interior(y, cfg, "mobius_add rhs")?;
    if cfg.is_hyperbolic() {
        let c = cfg.curvature_c;
        let den = 1.0 + 2.0 * c * dot(x, y) + c * c * norm_sq(x) * norm_sq(y);
        // (1 - sqrt(c)|x| sqrt(c)|y|)^2 bounds den from below for interior points.
        debug_assert!(den.abs() >= cfg.eps, "mobius_add denominator degenerate");
        if den.abs() < cfg.eps {
            return Err(Error::numerical("mobius_add", "denominator below eps"));
        }
    }
    Ok(mobius_add_raw(x, y, cfg))
}

/// Geodesic distance `2/sqrt(c) artanh(sqrt(c) |(-x) ⊕ y|)`.
pub fn dist(x: &[f64], y: &[f64], cfg: &BallConfig) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::InvalidInput(format!(
            "dist: dimension mismatch {} vs {}",
            x.len(),
            y.len()
        )));
    }
    check_interior(x, cfg, "dist lhs")?;
    check_interior(y, cfg, "dist rhs")?;
    Ok(dist_raw(x, y, cfg))
}

// Vector-Jacobian products.

pub(crate) fn exp_origin_vjp(v: &[f64], g: &[f64], cfg: &BallConfig) -> Vec<f64> {
    if !cfg.is_hyperbolic() {
        return g.to_vec();
    }
    let pre = exp_origin_unprojected(v, cfg);
    let g = if exp_saturates(&pre, cfg) {
        project_vjp(&pre, g, cfg)
    } else {
        g.to_vec()
    };
    let s = cfg.sqrt_c();
    let x_s = s * norm(v);
    let f = tanhc(x_s);
    // d/dv [f(s|v|) v] = f I + s^2 (f'(x)/x) v v^T with x = s|v|.
    let coef = s * s * tanhc_slope(x_s) * dot(v, &g);
    g.iter().zip(v).map(|(gi, vi)| f * gi + coef * vi).collect()
}

pub(crate) fn log_origin_vjp(x: &[f64], g: &[f64], cfg: &BallConfig) -> Vec<f64> {
    if !cfg.is_hyperbolic() {
        return g.to_vec();
    }
    let s = cfg.sqrt_c();
    let n = norm(x);
    let x_s = s * n;
    let (h, coef) = if x_s > ARTANH_CLAMP {
        // Clamped: h = artanh(clamp) / (s n), so dh/dn = -h / n.
        let h = ARTANH_CLAMP.atanh() / x_s;
        (h, -h / (n * n) * dot(x, g))
    } else {
        (artanhc(x_s), s * s * artanhc_slope(x_s) * dot(x, g))
    };
    g.iter().zip(x).map(|(gi, xi)| h * gi + coef * xi).collect()
}

pub(crate) fn mobius_add_vjp(
    x: &[f64],
    y: &[f64],
    g: &[f64],
    cfg: &BallConfig,
) -> (Vec<f64>, Vec<f64>) {
    if !cfg.is_hyperbolic() {
        return (g.to_vec(), g.to_vec());
    }
    let c = cfg.curvature_c;
    let pre = mobius_add_unprojected(x, y, c);
    let g = if c * norm_sq(&pre) >= 1.0 {
        project_vjp(&pre, g, cfg)
    } else {
        g.to_vec()
    };
    let xy = dot(x, y);
    let x2 = norm_sq(x);
    let y2 = norm_sq(y);
    let alpha = 1.0 + 2.0 * c * xy + c * y2;
    let beta = 1.0 - c * x2;
    let den = 1.0 + 2.0 * c * xy + c * c * x2 * y2;
    let gx_dot = dot(&g, x);
    let gy_dot = dot(&g, y);
    // <g, numerator> = alpha <g,x> + beta <g,y>; out = numerator / den.
    let g_num = alpha * gx_dot + beta * gy_dot;
    let k = g_num / (den * den);

    let grad_x = (0..x.len())
        .map(|i| {
            alpha * g[i] / den + gx_dot / den * (2.0 * c * y[i]) + gy_dot / den * (-2.0 * c * x[i])
                - k * (2.0 * c * y[i] + 2.0 * c * c * y2 * x[i])
        })
        .collect();
    let grad_y = (0..y.len())
        .map(|i| {
            beta * g[i] / den + gx_dot / den * (2.0 * c * x[i] + 2.0 * c * y[i])
                - k * (2.0 * c * x[i] + 2.0 * c * c * x2 * y[i])
        })
        .collect();
    (grad_x, grad_y)
}

/// Gradient of `dist(x, y)^2` scaled by the upstream scalar `g`.
pub(crate) fn dist_sq_vjp(x: &[f64], y: &[f64], g: f64, cfg: &BallConfig) -> (Vec<f64>, Vec<f64>) {
    if !cfg.is_hyperbolic() {
        let gx: Vec<f64> = x.iter().zip(y).map(|(a, b)| 2.0 * g * (a - b)).collect();
        let gy = gx.iter().map(|v| -v).collect();
        return (gx, gy);
    }
    let s = cfg.sqrt_c();
    let neg_x: Vec<f64> = x.iter().map(|v| -v).collect();
    let u = mobius_add_raw(&neg_x, y, cfg);
    let m = norm(&u);
    let sm = s * m;
    // d/m stays finite as m -> 0 (limit 2).
    let d_over_m = if m < 1e-12 {
        2.0
    } else {
        2.0 / s * sm.atanh() / m
    };
    let coef = g * 4.0 / (1.0 - sm * sm) * d_over_m;
    let gu: Vec<f64> = u.iter().map(|ui| coef * ui).collect();
    let (g_neg_x, gy) = mobius_add_vjp(&neg_x, y, &gu, cfg);
    (g_neg_x.into_iter().map(|v| -v).collect(), gy)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    fn c1(dim: usize) -> BallConfig {
        BallConfig::hyperbolic(1.0, dim)
    }

    #[test]
    fn exp_origin_examples() {
        let cfg = c1(2);
        assert_eq!(exp_origin(&[0.0, 0.0], &cfg).unwrap(), vec![0.0, 0.0]);
        let y = exp_origin(&[0.5, 0.0], &cfg).unwrap();
        assert!(close(&y, &[0.46212, 0.0], 1e-4));
        let y = exp_origin(&[3.0, 0.0], &cfg).unwrap();
        assert!((norm(&y) - 0.99505).abs() < 1e-4);
        assert!(y[0] > 0.0 && y[1] == 0.0);
    }

    #[test]
    fn exp_origin_rejects_nan() {
        let err = exp_origin(&[f64::NAN, 0.0], &c1(2)).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn log_origin_examples() {
        let cfg = c1(2);
        assert_eq!(log_origin(&[0.0, 0.0], &cfg).unwrap(), vec![0.0, 0.0]);
        let x = exp_origin(&[0.7, -0.2], &cfg).unwrap();
        assert!(close(&log_origin(&x, &cfg).unwrap(), &[0.7, -0.2], 1e-5));
        assert!(close(
            &log_origin(&[0.46212, 0.0], &cfg).unwrap(),
            &[0.5, 0.0],
            1e-4
        ));
    }

    #[test]
    fn log_origin_outside_is_domain_error() {
        let err = log_origin(&[1.0, 0.0], &c1(2)).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn mobius_examples() {
        let cfg = c1(1);
        let r = mobius_add(&[0.3], &[0.4], &cfg).unwrap();
        assert!((r[0] - 0.625).abs() < 1e-6);
        let cfg = c1(3);
        let x = [0.1, -0.4, 0.2];
        assert!(close(&mobius_add(&x, &[0.0; 3], &cfg).unwrap(), &x, 1e-15));
        let nx: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!(close(&mobius_add(&nx, &x, &cfg).unwrap(), &[0.0; 3], 1e-7));
    }

    #[test]
    fn dist_examples() {
        let cfg = c1(2);
        let x = [0.2, -0.3];
        assert!(dist(&x, &x, &cfg).unwrap().abs() < 1e-7);
        let d = dist(&[0.0, 0.0], &[0.5, 0.0], &cfg).unwrap();
        assert!((d - 1.09861).abs() < 1e-4);
    }

    #[test]
    fn projection_examples() {
        let cfg = c1(2);
        assert_eq!(project_to_ball(&[0.3, 0.1], &cfg), vec![0.3, 0.1]);
        let p = project_to_ball(&[2.0, 0.0], &cfg);
        assert!(close(&p, &[0.99999, 0.0], 1e-12));
        assert_eq!(project_to_ball(&[0.0, 0.0], &cfg), vec![0.0, 0.0]);
    }

    #[test]
    fn euclidean_mode_is_flat() {
        let cfg = BallConfig::euclidean(2);
        let v = [3.0, -4.0];
        assert_eq!(exp_origin(&v, &cfg).unwrap(), v.to_vec());
        assert_eq!(log_origin(&v, &cfg).unwrap(), v.to_vec());
        assert_eq!(mobius_add(&v, &[1.0, 1.0], &cfg).unwrap(), vec![4.0, -3.0]);
        assert_eq!(dist(&v, &[0.0, 0.0], &cfg).unwrap(), 5.0);
    }

    #[test]
    fn curvature_scales_radius() {
        let cfg = BallConfig::hyperbolic(4.0, 1);
        let p = project_to_ball(&[1.0], &cfg);
        assert!((p[0] - (1.0 - PROJECTION_MARGIN) / 2.0).abs() < 1e-15);
        let x = exp_origin(&[0.3], &cfg).unwrap();
        assert!((x[0] - (0.6f64).tanh() / 2.0).abs() < 1e-15);
        assert!((log_origin(&x, &cfg).unwrap()[0] - 0.3).abs() < 1e-14);
    }

    #[test]
    fn origin_maps_are_accurate_for_tiny_vectors() {
        let cfg = BallConfig::hyperbolic(1.0, 2);
        for scale in [1e-12, 1e-6, 9e-4, 1.1e-3, 0.1] {
            let v = [scale, -0.5 * scale];
            let back = log_origin(&exp_origin(&v, &cfg).unwrap(), &cfg).unwrap();
            for (a, b) in back.iter().zip(&v) {
                assert!((a - b).abs() <= 1e-14 * b.abs(), "{scale}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn radial_slopes_are_continuous_at_the_series_cutoff() {
        let (lo, hi) = (SERIES_CUTOFF * (1.0 - 1e-9), SERIES_CUTOFF * (1.0 + 1e-9));
        assert!((tanhc_slope(lo) - tanhc_slope(hi)).abs() < 1e-9);
        assert!((artanhc_slope(lo) - artanhc_slope(hi)).abs() < 1e-9);
        assert!((tanhc(lo) - tanhc(hi)).abs() < 1e-12);
        assert!((artanhc(lo) - artanhc(hi)).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(BallConfig::hyperbolic(0.0, 2).validate().is_err());
        assert!(BallConfig {
            eps: 0.0,
            ..BallConfig::default()
        }
        .validate()
        .is_err());
        assert!(BallConfig::euclidean(2).validate().is_ok());
    }
}
