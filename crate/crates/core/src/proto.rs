//! Class prototypes as Fréchet means in the ball.

use log::warn;

use crate::ball::{self, BallConfig};
use crate::error::{Error, Result};
use crate::linalg::norm;

pub const DEFAULT_MAX_ITER: usize = 200;
pub const DEFAULT_TOL: f64 = 1e-8;

const MAX_HALVINGS: usize = 40;

#[derive(Debug, Clone, PartialEq)]
pub struct FrechetMean {
    pub mean: Vec<f64>,
    pub iterations: usize,
    /// Norm of the averaged recentred tangent vector at `mean`.
    pub residual: f64,
    pub converged: bool,
}

fn negate(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| -v).collect()
}

fn mean_of(vectors: impl Iterator<Item = Vec<f64>>, dim: usize) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    let mut n = 0usize;
    for v in vectors {
        acc.iter_mut().zip(&v).for_each(|(a, b)| *a += b);
        n += 1;
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    acc
}

/// Average of `log_0((-m) ⊕ p)`; the Riemannian gradient of the Fréchet
/// objective at `m` up to the conformal factor.
pub fn recentred_tangent_mean(m: &[f64], points: &[Vec<f64>], cfg: &BallConfig) -> Vec<f64> {
    let neg_m = negate(m);
    mean_of(
        points.iter().map(|p| {
            let moved = ball::mobius_add_raw(&neg_m, p, cfg);
            ball::log_origin_raw(&moved, cfg)
        }),
        m.len(),
    )
}

/// Mean over the points of `x coth x` with `x = sqrt(c) d(m, p)`; at least 1.
fn curvature_bound(m: &[f64], points: &[Vec<f64>], cfg: &BallConfig) -> f64 {
    let s = cfg.sqrt_c();
    let total: f64 = points
        .iter()
        .map(|p| {
            let x = s * ball::dist_raw(m, p, cfg);
            if x < 1e-6 {
                1.0
            } else {
                x / x.tanh()
            }
        })
        .sum();
    total / points.len() as f64
}

/// Sum of squared geodesic distances from `m` to `points`.
pub fn frechet_objective(m: &[f64], points: &[Vec<f64>], cfg: &BallConfig) -> f64 {
    points.iter().map(|p| ball::dist_sq_raw(m, p, cfg)).sum()
}

/// Damped Karcher fixed-point iteration.
///
/// Each step moves every point so that the current estimate sits at the
/// origin, averages their origin log maps, and walks the estimate along that
/// average: `m <- m ⊕ exp_0(mean_i log_0((-m) ⊕ p_i))`, with the step
/// shortened by the curvature of the objective. In flat geometry the
/// arithmetic mean is returned directly.
pub fn frechet_mean(
    points: &[Vec<f64>],
    cfg: &BallConfig,
    max_iter: usize,
    tol: f64,
) -> Result<FrechetMean> {
    let Some(first) = points.first() else {
        return Err(Error::InvalidInput("frechet_mean: empty point set".into()));
    };
    let dim = first.len();
    for p in points {
        if p.len() != dim {
            return Err(Error::InvalidInput(
                "frechet_mean: ragged point dimensions".into(),
            ));
        }
        if !p.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("frechet_mean: non-finite point".into()));
        }
        if cfg.is_hyperbolic() && cfg.curvature_c * crate::linalg::norm_sq(p) >= 1.0 {
            return Err(Error::Domain("frechet_mean: point outside the ball".into()));
        }
    }
    if !cfg.is_hyperbolic() {
        return Ok(FrechetMean {
            mean: mean_of(points.iter().cloned(), dim),
            iterations: 0,
            residual: 0.0,
            converged: true,
        });
    }
    if points.iter().all(|p| p == first) {
        return Ok(FrechetMean {
            mean: first.clone(),
            iterations: 0,
            residual: 0.0,
            converged: true,
        });
    }

    let tangent_mean = mean_of(points.iter().map(|p| ball::log_origin_raw(p, cfg)), dim);
    let mut m = ball::exp_origin_raw(&tangent_mean, cfg);
    let mut best = (f64::INFINITY, m.clone());
    for it in 0..max_iter {
        let step = recentred_tangent_mean(&m, points, cfg);
        let residual = norm(&step);
        if residual < best.0 {
            best = (residual, m.clone());
        }
        if residual < tol {
            return Ok(FrechetMean {
                mean: m,
                iterations: it,
                residual,
                converged: true,
            });
        }
        // A full step overshoots once the points spread out: along directions
        // orthogonal to a geodesic of length d, half its squared length has
        // curvature sqrt(c) d coth(sqrt(c) d). Dividing by the mean of that
        // bound keeps every step inside the region of descent; the halving
        // loop only guards against roundoff.
        let mut scale = 1.0 / curvature_bound(&m, points, cfg);
        let current = frechet_objective(&m, points, cfg);
        let mut next = m.clone();
        for _ in 0..MAX_HALVINGS {
            let scaled: Vec<f64> = step.iter().map(|v| scale * v).collect();
            next = ball::mobius_add_raw(&m, &ball::exp_origin_raw(&scaled, cfg), cfg);
            if frechet_objective(&next, points, cfg) <= current * (1.0 + 1e-12) {
                break;
            }
            scale *= 0.5;
        }
        m = next;
    }
    let residual = norm(&recentred_tangent_mean(&m, points, cfg));
    if residual < best.0 {
        best = (residual, m);
    }
    warn!(
        "frechet_mean did not converge in {max_iter} iterations (residual {:.3e})",
        best.0
    );
    Ok(FrechetMean {
        mean: best.1,
        iterations: max_iter,
        residual: best.0,
        converged: false,
    })
}

/// Per-class prototypes plus the source class prior.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub prototypes: Vec<Vec<f64>>,
    pub class_prior: Vec<f64>,
    pub class_counts: Vec<u64>,
}

impl PrototypeSet {
    pub fn num_classes(&self) -> usize {
        self.prototypes.len()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.first().map_or(0, Vec::len)
    }
}

/// Builds one prototype per class from labelled utterance embeddings.
pub fn build_prototypes(
    embeddings: &[(Vec<f64>, usize)],
    num_classes: usize,
    cfg: &BallConfig,
) -> Result<PrototypeSet> {
    let mut by_class: Vec<Vec<Vec<f64>>> = vec![Vec::new(); num_classes];
    for (e, y) in embeddings {
        let slot = by_class.get_mut(*y).ok_or_else(|| {
            Error::InvalidInput(format!("label {y} out of range for {num_classes} classes"))
        })?;
        slot.push(e.clone());
    }
    let missing: Vec<usize> = (0..num_classes)
        .filter(|c| by_class[*c].is_empty())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Config(format!(
            "no source samples for class indices {missing:?}; every class needs at least one"
        )));
    }
    let class_counts: Vec<u64> = by_class.iter().map(|v| v.len() as u64).collect();
    let total: u64 = class_counts.iter().sum();
    let class_prior = class_counts
        .iter()
        .map(|&n| n as f64 / total as f64)
        .collect();
    let prototypes = by_class
        .iter()
        .map(|pts| frechet_mean(pts, cfg, DEFAULT_MAX_ITER, DEFAULT_TOL).map(|f| f.mean))
        .collect::<Result<Vec<_>>>()?;
    Ok(PrototypeSet {
        prototypes,
        class_prior,
        class_counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c1() -> BallConfig {
        BallConfig::hyperbolic(1.0, 2)
    }

    #[test]
    fn singleton_is_itself() {
        let p = vec![0.3, -0.4];
        let f = frechet_mean(std::slice::from_ref(&p), &c1(), 200, 1e-8).unwrap();
        assert_eq!(f.mean, p);
    }

    #[test]
    fn antipodal_pair_meets_at_origin() {
        let x = vec![0.6, 0.2];
        let f = frechet_mean(&[x.clone(), negate(&x)], &c1(), 200, 1e-8).unwrap();
        assert!(norm(&f.mean) < 1e-6);
    }

    #[test]
    fn spread_points_near_the_boundary_converge() {
        let pts = vec![
            vec![0.0, -0.9044],
            vec![-0.6596, 0.6769],
            vec![-0.5249, 0.0],
        ];
        let f = frechet_mean(&pts, &c1(), 200, 1e-8).unwrap();
        assert!(f.converged, "{f:?}");
        let best = frechet_objective(&f.mean, &pts, &c1());
        assert!(pts.iter().all(|p| best < frechet_objective(p, &pts, &c1())));
    }

    #[test]
    fn empty_set_rejected() {
        assert!(frechet_mean(&[], &c1(), 200, 1e-8).is_err());
    }

    #[test]
    fn euclidean_mode_is_arithmetic_mean() {
        let cfg = BallConfig::euclidean(2);
        let pts = vec![vec![1.0, 2.0], vec![3.0, -2.0], vec![2.0, 3.0]];
        let f = frechet_mean(&pts, &cfg, 200, 1e-8).unwrap();
        assert_eq!(f.mean, vec![2.0, 1.0]);
    }

    #[test]
    fn reports_non_convergence_with_best_iterate() {
        let pts = vec![vec![0.9, 0.0], vec![-0.5, 0.7], vec![0.1, -0.8]];
        let f = frechet_mean(&pts, &c1(), 1, 1e-30).unwrap();
        assert!(!f.converged);
        assert!(f.residual.is_finite());
    }

    #[test]
    fn prototypes_and_prior() {
        let cfg = c1();
        let mut emb = Vec::new();
        for (class, count) in [(0usize, 10usize), (1, 30), (2, 60)] {
            for i in 0..count {
                let p = vec![0.1 * class as f64, 0.001 * i as f64];
                emb.push((p, class));
            }
        }
        let set = build_prototypes(&emb, 3, &cfg).unwrap();
        let expected = [0.1, 0.3, 0.6];
        for (a, b) in set.class_prior.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((set.class_prior.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn one_sample_per_class_is_the_prototype() {
        let emb = vec![(vec![0.1, 0.2], 0), (vec![-0.3, 0.1], 1)];
        let set = build_prototypes(&emb, 2, &c1()).unwrap();
        assert_eq!(set.prototypes[0], vec![0.1, 0.2]);
        assert_eq!(set.prototypes[1], vec![-0.3, 0.1]);
    }

    #[test]
    fn identical_class_samples() {
        let p = vec![0.25, -0.35];
        let emb = vec![
            (p.clone(), 0),
            (p.clone(), 0),
            (p.clone(), 0),
            (vec![0.5, 0.5], 1),
        ];
        let set = build_prototypes(&emb, 2, &c1()).unwrap();
        assert!(set.prototypes[0]
            .iter()
            .zip(&p)
            .all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn missing_class_is_config_error() {
        let emb = vec![(vec![0.1, 0.2], 0), (vec![-0.3, 0.1], 2)];
        let err = build_prototypes(&emb, 3, &c1()).unwrap_err();
        assert!(
            matches!(err, Error::Config(ref m) if m.contains("[1]")),
            "{err}"
        );
    }
}
