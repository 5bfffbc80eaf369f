//! Hyperbolic emotion lens: a learnable power-law warp of the geodesic radius.
//!
//! A ball point `b` at Euclidean radius `rho` sits at tangent radius
//! `r = artanh(sqrt(c) rho) / sqrt(c)`. The lens keeps the direction of `b`
//! and moves it to tangent radius `r^alpha`, i.e. it is
//! `exp_0(r^alpha * log_0(b) / r)`. The warp is evaluated directly as a
//! radial rescale of `b`, which makes `alpha = 1` an exact identity.

use crate::ball::{BallConfig, Geometry};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm};

struct Radial {
    rho: f64,
    r: f64,
    warped_r: f64,
    warped_rho: f64,
}

fn radial(rho: f64, alpha: f64, cfg: &BallConfig) -> Radial {
    match cfg.geometry_mode {
        Geometry::Euclidean => {
            let warped = rho.powf(alpha);
            Radial {
                rho,
                r: rho,
                warped_r: warped,
                warped_rho: warped,
            }
        }
        Geometry::Hyperbolic => {
            let s = cfg.curvature_c.sqrt();
            let r = (s * rho).min(1.0 - 1e-12).atanh() / s;
            let warped_r = r.powf(alpha);
            let warped_rho = ((s * warped_r).tanh() / s).min(cfg.max_norm());
            Radial {
                rho,
                r,
                warped_r,
                warped_rho,
            }
        }
    }
}

pub(crate) fn hel_raw(b: &[f64], alpha: f64, cfg: &BallConfig) -> Vec<f64> {
    let rho = norm(b);
    if rho == 0.0 {
        return vec![0.0; b.len()];
    }
    let rad = radial(rho, alpha, cfg);
    let k = rad.warped_rho / rad.rho;
    b.iter().map(|x| k * x).collect()
}

/// Returns the gradients with respect to the point and to `alpha`.
pub(crate) fn hel_vjp(b: &[f64], alpha: f64, g: &[f64], cfg: &BallConfig) -> (Vec<f64>, f64) {
    let rho = norm(b);
    if rho == 0.0 {
        return (vec![0.0; b.len()], 0.0);
    }
    let rad = radial(rho, alpha, cfg);
    let (dr_drho, dwrho_dwr) = match cfg.geometry_mode {
        Geometry::Euclidean => (1.0, 1.0),
        Geometry::Hyperbolic => {
            let c = cfg.curvature_c;
            (
                1.0 / (1.0 - c * rho * rho),
                1.0 - c * rad.warped_rho * rad.warped_rho,
            )
        }
    };
    let dwr_dr = alpha * rad.r.powf(alpha - 1.0);
    let dwrho_drho = dwrho_dwr * dwr_dr * dr_drho;
    let k = rad.warped_rho / rho;
    let dk = (dwrho_drho * rho - rad.warped_rho) / (rho * rho);
    let bg = dot(b, g);
    let grad_b = b
        .iter()
        .zip(g)
        .map(|(bi, gi)| k * gi + dk * bg / rho * bi)
        .collect();
    let grad_alpha = bg / rho * dwrho_dwr * rad.warped_r * rad.r.ln();
    (grad_b, grad_alpha)
}

/// Applies the lens with exponent `alpha > 0`; the origin is a fixed point.
pub fn hel(b: &[f64], alpha: f64, cfg: &BallConfig) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "hel: alpha must be positive, got {alpha}"
        )));
    }
    if !b.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidInput("hel: non-finite coordinate".into()));
    }
    if cfg.is_hyperbolic() && cfg.curvature_c * crate::linalg::norm_sq(b) >= 1.0 {
        return Err(Error::Domain("hel: point outside the ball".into()));
    }
    Ok(hel_raw(b, alpha, cfg))
}
