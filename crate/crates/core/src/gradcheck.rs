//! Finite-difference verification of every differentiable tape operation
//! and of the full forward pass.
//!
//! Each check scalarizes the operation with random weights and compares the
//! analytic gradient of every input coordinate against a central difference.
//! Forward evaluations for the differences replay the detached values of the
//! base tape (see [`Detached`](crate::autodiff::Detached)), so stop-gradient
//! and straight-through paths are checked against the function they define.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::Serialize;

use crate::autodiff::{Tape, Tensor, Var};
use crate::ball::{BallConfig, Geometry};
use crate::error::{Error, Result};
use crate::net::ablation::AblationPreset;
use crate::net::{Model, ModelConfig};
use crate::ot;
use crate::vq;

pub const REL_TOL: f64 = 1e-4;
pub const STEP: f64 = 1e-5;
pub const INSTANCES: usize = 50;
const DENOM_FLOOR: f64 = 1e-8;

/// `|a - fd| / max(|a|, |fd|, 1e-8)`.
pub fn relative_error(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(DENOM_FLOOR)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpCheck {
    pub op: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub checks: Vec<OpCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failing(&self) -> Vec<&str> {
        self.checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.op.as_str())
            .collect()
    }

    /// Fixed-width table of per-op maximum errors.
    pub fn table(&self) -> String {
        let width = self
            .checks
            .iter()
            .map(|c| c.op.len())
            .max()
            .unwrap_or(2)
            .max(2);
        let mut out = format!(
            "{:<width$}  {:>9}  {:>13}  result\n",
            "op", "instances", "max rel err"
        );
        for c in &self.checks {
            let _ = writeln!(
                out,
                "{:<width$}  {:>9}  {:>13.3e}  {}",
                c.op,
                c.instances,
                c.max_rel_error,
                if c.passed { "ok" } else { "FAIL" }
            );
        }
        out
    }
}

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

/// Largest relative error over all coordinates of all `inputs`.
pub fn check_instance(inputs: &[Tensor], build: &Build<'_>) -> Result<f64> {
    let mut base = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| base.variable(t.clone())).collect();
    let loss = build(&mut base, &vars)?;
    let grads = base.backward(loss)?;
    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut t = Tape::replaying(&base);
        let v: Vec<Var> = ins.iter().map(|x| t.constant(x.clone())).collect();
        let l = build(&mut t, &v)?;
        Ok(t.scalar(l))
    };
    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[i], input.len());
        for (j, &x) in input.data.iter().enumerate() {
            probe[i].data[j] = x + STEP;
            let up = eval(&probe)?;
            probe[i].data[j] = x - STEP;
            let down = eval(&probe)?;
            probe[i].data[j] = x;
            let fd = (up - down) / (2.0 * STEP);
            let err = relative_error(analytic[j], fd);
            if !err.is_finite() {
                return Err(Error::numerical(
                    "gradcheck",
                    "non-finite finite difference",
                ));
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Largest relative error of directional derivatives: one direction per
/// input tensor and one spanning all inputs. Used for the full forward pass,
/// where single coordinates can carry gradients of order 1e-7 that sit at the
/// roundoff floor of a central difference. Each per-tensor direction is the
/// unit analytic gradient plus half an independent unit random vector, so
/// the direction never cancels and the directional derivative is never
/// vanishingly small, while any error orthogonal to the analytic gradient
/// still shows up through the random part.
pub fn check_directional(
    inputs: &[Tensor],
    build: &Build<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut base = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| base.variable(t.clone())).collect();
    let loss = build(&mut base, &vars)?;
    let grads = base.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get_or_zeros(v, t.len()))
        .collect();
    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut t = Tape::replaying(&base);
        let v: Vec<Var> = ins.iter().map(|x| t.constant(x.clone())).collect();
        let l = build(&mut t, &v)?;
        Ok(t.scalar(l))
    };
    let unit = |v: Vec<f64>| {
        let n = crate::linalg::norm(&v);
        if n > 0.0 {
            v.into_iter().map(|x| x / n).collect()
        } else {
            v
        }
    };
    let mut directions: Vec<Vec<Vec<f64>>> = (0..inputs.len())
        .map(|i| {
            inputs
                .iter()
                .enumerate()
                .map(|(j, t)| {
                    if i == j {
                        let g = unit(analytic[j].clone());
                        let r = unit(gaussian(t.len(), rng));
                        g.iter().zip(r).map(|(a, b)| a + 0.5 * b).collect()
                    } else {
                        vec![0.0; t.len()]
                    }
                })
                .collect()
        })
        .collect();
    directions.push(inputs.iter().map(|t| gaussian(t.len(), rng)).collect());
    let mut worst = 0.0f64;
    for mut dir in directions {
        let n = dir.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().flatten().for_each(|v| *v /= n);
        let shifted = |k: f64| -> Vec<Tensor> {
            inputs
                .iter()
                .zip(&dir)
                .map(|(t, d)| Tensor {
                    shape: t.shape.clone(),
                    data: t.data.iter().zip(d).map(|(x, dx)| x + k * dx).collect(),
                })
                .collect()
        };
        let fd = (eval(&shifted(STEP))? - eval(&shifted(-STEP))?) / (2.0 * STEP);
        let a: f64 = analytic
            .iter()
            .flatten()
            .zip(dir.iter().flatten())
            .map(|(g, d)| g * d)
            .sum();
        let err = relative_error(a, fd);
        if !err.is_finite() {
            return Err(Error::numerical(
                "gradcheck",
                "non-finite finite difference",
            ));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

fn gaussian(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn uniform(n: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Vector with a norm drawn uniformly from `[lo, hi]`.
fn with_norm(n: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v = gaussian(n, rng);
    let r = rng.random_range(lo..hi) / crate::linalg::norm(&v);
    v.into_iter().map(|x| x * r).collect()
}

fn vec_t(v: Vec<f64>) -> Tensor {
    Tensor::vector(v)
}

fn weigh(tape: &mut Tape, out: Var, w: &[f64]) -> Var {
    let w = tape.constant_vec(w.to_vec());
    tape.dot(w, out)
}

fn random_curvature(rng: &mut ChaCha8Rng, dim: usize) -> BallConfig {
    BallConfig::hyperbolic(rng.random_range(0.5..2.0), dim)
}

struct Case {
    inputs: Vec<Tensor>,
    build: Box<Build<'static>>,
}

fn case(inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> Case {
    Case {
        inputs,
        build: Box::new(build),
    }
}

type Sampler = fn(&mut ChaCha8Rng) -> Case;

fn op_cases() -> Vec<(&'static str, Sampler)> {
    vec![
        ("mul", |rng| {
            let w = gaussian(4, rng);
            case(
                vec![vec_t(gaussian(4, rng)), vec_t(gaussian(4, rng))],
                move |t, v| {
                    let o = t.mul(v[0], v[1]);
                    Ok(weigh(t, o, &w))
                },
            )
        }),
        ("mul_scalar", |rng| {
            let w = gaussian(3, rng);
            case(
                vec![
                    vec_t(gaussian(3, rng)),
                    Tensor::scalar(rng.random_range(-2.0..2.0)),
                ],
                move |t, v| {
                    let o = t.mul_scalar(v[0], v[1]);
                    Ok(weigh(t, o, &w))
                },
            )
        }),
        ("affine", |rng| {
            let w = gaussian(3, rng);
            let m = Tensor::new(vec![3, 4], gaussian(12, rng)).expect("shape");
            case(
                vec![m, vec_t(gaussian(4, rng)), vec_t(gaussian(3, rng))],
                move |t, v| {
                    let o = t.affine(v[0], v[1], v[2]);
                    Ok(weigh(t, o, &w))
                },
            )
        }),
        ("matvec_transposed", |rng| {
            let w = gaussian(4, rng);
            let m = Tensor::new(vec![3, 4], gaussian(12, rng)).expect("shape");
            case(vec![m, vec_t(gaussian(3, rng))], move |t, v| {
                let o = t.matvec_transposed(v[0], v[1]);
                Ok(weigh(t, o, &w))
            })
        }),
        ("concat", |rng| {
            let w = gaussian(5, rng);
            case(
                vec![vec_t(gaussian(2, rng)), vec_t(gaussian(3, rng))],
                move |t, v| {
                    let o = t.concat(&[v[0], v[1]]);
                    Ok(weigh(t, o, &w))
                },
            )
        }),
        ("tanh", |rng| {
            let w = gaussian(4, rng);
            case(vec![vec_t(uniform(4, -2.0, 2.0, rng))], move |t, v| {
                let o = t.tanh(v[0]);
                Ok(weigh(t, o, &w))
            })
        }),
        ("artanh", |rng| {
            let w = gaussian(4, rng);
            case(vec![vec_t(uniform(4, -0.8, 0.8, rng))], move |t, v| {
                let o = t.artanh(v[0]);
                Ok(weigh(t, o, &w))
            })
        }),
        ("exp", |rng| {
            let w = gaussian(4, rng);
            case(vec![vec_t(uniform(4, -2.0, 2.0, rng))], move |t, v| {
                let o = t.exp(v[0]);
                Ok(weigh(t, o, &w))
            })
        }),
        ("powf", |rng| {
            let w = gaussian(4, rng);
            let p = rng.random_range(0.3..3.0);
            case(vec![vec_t(uniform(4, 0.2, 2.0, rng))], move |t, v| {
                let o = t.powf(v[0], p);
                Ok(weigh(t, o, &w))
            })
        }),
        ("norm", |rng| {
            let w = rng.random_range(0.5..2.0);
            case(vec![vec_t(with_norm(5, 0.2, 3.0, rng))], move |t, v| {
                let o = t.norm(v[0]);
                Ok(t.scale(o, w))
            })
        }),
        ("softmax", |rng| {
            let w = gaussian(5, rng);
            case(vec![vec_t(gaussian(5, rng))], move |t, v| {
                let o = t.softmax(v[0]);
                Ok(weigh(t, o, &w))
            })
        }),
        ("log_softmax", |rng| {
            let w = gaussian(5, rng);
            case(vec![vec_t(gaussian(5, rng))], move |t, v| {
                let o = t.log_softmax(v[0]);
                Ok(weigh(t, o, &w))
            })
        }),
        ("stop_gradient", |rng| {
            let w = gaussian(3, rng);
            case(vec![vec_t(gaussian(3, rng))], move |t, v| {
                let s = t.stop_gradient(v[0]);
                let o = t.mul(s, v[0]);
                Ok(weigh(t, o, &w))
            })
        }),
        ("straight_through", |rng| {
            let w = gaussian(3, rng);
            case(
                vec![vec_t(gaussian(3, rng)), vec_t(gaussian(3, rng))],
                move |t, v| {
                    let s = t.straight_through(v[0], v[1])?;
                    let o = t.tanh(s);
                    Ok(weigh(t, o, &w))
                },
            )
        }),
        ("exp_origin", |rng| {
            let cfg = random_curvature(rng, 4);
            let w = gaussian(4, rng);
            let v = with_norm(4, 0.05, 2.0, rng);
            case(vec![vec_t(v)], move |t, x| {
                let o = t.exp_origin(x[0], &cfg);
                Ok(weigh(t, o, &w))
            })
        }),
        ("log_origin", |rng| {
            let cfg = random_curvature(rng, 4);
            let w = gaussian(4, rng);
            let x = with_norm(4, 0.05, 0.8 / cfg.curvature_c.sqrt(), rng);
            case(vec![vec_t(x)], move |t, v| {
                let o = t.log_origin(v[0], &cfg);
                Ok(weigh(t, o, &w))
            })
        }),
        ("mobius_add", |rng| {
            let cfg = random_curvature(rng, 4);
            let w = gaussian(4, rng);
            let r = 0.7 / cfg.curvature_c.sqrt();
            let (x, y) = (with_norm(4, 0.0, r, rng), with_norm(4, 0.0, r, rng));
            case(vec![vec_t(x), vec_t(y)], move |t, v| {
                let o = t.mobius_add(v[0], v[1], &cfg);
                Ok(weigh(t, o, &w))
            })
        }),
        ("dist_sq", |rng| {
            let cfg = random_curvature(rng, 4);
            let r = 0.7 / cfg.curvature_c.sqrt();
            let (x, y) = (with_norm(4, 0.0, r, rng), with_norm(4, 0.0, r, rng));
            case(vec![vec_t(x), vec_t(y)], move |t, v| {
                Ok(t.dist_sq(v[0], v[1], &cfg))
            })
        }),
        ("hel", |rng| {
            let cfg = random_curvature(rng, 4);
            let w = gaussian(4, rng);
            let b = with_norm(4, 0.05, 0.7 / cfg.curvature_c.sqrt(), rng);
            let alpha = rng.random_range(0.5..1.5);
            case(vec![vec_t(b), Tensor::scalar(alpha)], move |t, v| {
                let o = t.hel(v[0], v[1], &cfg);
                Ok(weigh(t, o, &w))
            })
        }),
        ("hel_euclidean", |rng| {
            let cfg = BallConfig::euclidean(4);
            let w = gaussian(4, rng);
            let b = with_norm(4, 0.1, 2.0, rng);
            let alpha = rng.random_range(0.5..1.5);
            case(vec![vec_t(b), Tensor::scalar(alpha)], move |t, v| {
                let o = t.hel(v[0], v[1], &cfg);
                Ok(weigh(t, o, &w))
            })
        }),
        ("vq_loss", |rng| {
            let cfg = BallConfig::hyperbolic(1.0, 3);
            let words = vq::init_codebook(4, 3, &cfg, rng);
            let words = Tensor::new(
                words.shape.clone(),
                words.data.iter().map(|v| v * 5.0).collect(),
            )
            .expect("shape");
            let frames: Vec<Tensor> = (0..3)
                .map(|_| vec_t(with_norm(3, 0.05, 0.6, rng)))
                .collect();
            let mut inputs = vec![words];
            inputs.extend(frames);
            case(inputs, move |t, v| {
                let q = vq::quantize(t, &v[1..], v[0], 0.25, &cfg)?;
                Ok(q.loss)
            })
        }),
        ("transport_cost", |rng| {
            transport_case(rng, Geometry::Hyperbolic, true)
        }),
        ("transport_cost_euclidean_ot", |rng| {
            transport_case(rng, Geometry::Euclidean, true)
        }),
        ("transport_soft_ce", |rng| {
            transport_case(rng, Geometry::Hyperbolic, false)
        }),
    ]
}

/// `L_OPT` with respect to the target embeddings, or `L_OT_CE` with respect
/// to the logits; the plan is fixed at the base point.
fn transport_case(rng: &mut ChaCha8Rng, ot_geometry: Geometry, cost: bool) -> Case {
    let (c, n, d) = (3, 4, 3);
    let cfg = BallConfig::hyperbolic(1.0, d);
    let protos: Vec<Vec<f64>> = (0..c).map(|_| with_norm(d, 0.0, 0.6, rng)).collect();
    let targets: Vec<Vec<f64>> = (0..n).map(|_| with_norm(d, 0.0, 0.6, rng)).collect();
    let logits: Vec<Vec<f64>> = (0..n).map(|_| gaussian(c, rng)).collect();
    let m = ot::cost_matrix(&protos, &targets, &cfg, ot_geometry).expect("valid cost");
    let mut prior = uniform(c, 0.5, 1.5, rng);
    let total: f64 = prior.iter().sum();
    prior.iter_mut().for_each(|p| *p /= total);
    let plan = ot::sinkhorn(&m, &prior, &ot::uniform(n), 0.05, 50).expect("valid plan");
    let inputs: Vec<Tensor> = targets.into_iter().chain(logits).map(vec_t).collect();
    case(inputs, move |t, v| {
        let l = ot::target_losses_on_tape(t, &plan, &protos, &v[..n], &v[n..], &cfg, ot_geometry)?;
        Ok(if cost { l.opt } else { l.ot_ce })
    })
}

/// The reference forward instance: T=3, D=8, d=6, d_b=4, K=5, C=3.
pub fn forward_instance_config() -> ModelConfig {
    ModelConfig {
        input_dim: 8,
        latent_dim: 6,
        bottleneck_dim: 4,
        codebook_size: 5,
        num_classes: 3,
        beta: 0.25,
    }
}

/// Ball points with `c|x|^2` above this are within the band where the
/// projection kink and the conformal factor `1/(1 - c|x|^2)` make central
/// differences unreliable; such instances are redrawn.
pub const FORWARD_MAX_RADIUS_SQ: f64 = 0.98;
const FORWARD_MAX_DRAWS: usize = 1000;

/// Cross-entropy plus VQ loss of the full forward pass with respect to every
/// parameter tensor. Weights are redrawn at a larger scale than the training
/// initialization so that no gradient coordinate is vanishingly small.
pub fn forward_case(
    preset: AblationPreset,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Tensor>, Model, Tensor, usize)> {
    for _ in 0..FORWARD_MAX_DRAWS {
        let (model, frames) = draw_forward(preset, rng)?;
        let geo = model.geometry();
        let tr = model.forward(&frames)?;
        let interior = tr
            .frames_x
            .iter()
            .chain(&tr.tokens_q)
            .chain(&tr.bottleneck_b)
            .chain(&tr.calibrated)
            .chain(std::iter::once(&tr.pooled_ball))
            .all(|x| {
                !geo.is_hyperbolic()
                    || geo.curvature_c * crate::linalg::norm_sq(x) < FORWARD_MAX_RADIUS_SQ
            });
        if interior {
            let label = rng.random_range(0..model.config.num_classes);
            let inputs = model
                .params
                .named()
                .into_iter()
                .map(|(_, t)| t.clone())
                .collect();
            return Ok((inputs, model, frames, label));
        }
    }
    Err(Error::numerical(
        "gradcheck",
        "could not draw an interior forward instance",
    ))
}

fn draw_forward(preset: AblationPreset, rng: &mut ChaCha8Rng) -> Result<(Model, Tensor)> {
    let cfg = forward_instance_config();
    let mut model = Model::new(cfg, preset.config(), BallConfig::default(), rng.random())?;
    let normal = Normal::new(0.0, 0.4).expect("positive std");
    let geo = model.geometry();
    let names = model_names(&model);
    for (name, t) in names.into_iter().zip(model.params.tensors_mut()) {
        t.data = match name {
            "codebook" => vq::init_codebook(cfg.codebook_size, cfg.latent_dim, &geo, rng)
                .data
                .iter()
                .map(|v| v * 4.0)
                .collect(),
            "log_alpha" => vec![rng.random_range(-0.3..0.3)],
            _ => (0..t.len()).map(|_| normal.sample(rng)).collect(),
        };
    }
    let frames = Tensor::new(vec![3, cfg.input_dim], gaussian(3 * cfg.input_dim, rng))?;
    Ok((model, frames))
}

fn model_names(model: &Model) -> Vec<&'static str> {
    model.params.named().into_iter().map(|(n, _)| n).collect()
}

pub fn forward_loss(
    model: &Model,
    frames: &Tensor,
    label: usize,
    t: &mut Tape,
    v: &[Var],
) -> Result<Var> {
    let bound = crate::net::BoundParams::from_vars(v.to_vec());
    let g = model.forward_on_tape(t, &bound, frames)?;
    let lp = t.log_softmax(g.logits);
    let picked = t.index(lp, label);
    let ce = t.scale(picked, -1.0);
    Ok(match g.vq_loss {
        Some(vq) => t.add(ce, vq),
        None => ce,
    })
}

fn run_check(op: &str, n: usize, mut sample: impl FnMut() -> Result<f64>) -> OpCheck {
    let mut worst = 0.0f64;
    let mut ok = true;
    for _ in 0..n {
        match sample() {
            Ok(e) => worst = worst.max(e),
            Err(e) => {
                log::warn!("gradcheck `{op}`: {e}");
                ok = false;
                worst = f64::INFINITY;
            }
        }
    }
    OpCheck {
        op: op.to_string(),
        instances: n,
        max_rel_error: worst,
        passed: ok && worst < REL_TOL,
    }
}

/// Runs every op-level check and the full forward check for every ablation
/// preset, `INSTANCES` random instances each.
pub fn run(seed: u64) -> GradcheckReport {
    let mut checks = Vec::new();
    for (i, (name, sampler)) in op_cases().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1000).wrapping_add(i as u64));
        checks.push(run_check(name, INSTANCES, || {
            let c = sampler(&mut rng);
            check_instance(&c.inputs, c.build.as_ref())
        }));
    }
    for (i, preset) in AblationPreset::ALL.into_iter().enumerate() {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1000).wrapping_add(500 + i as u64));
        checks.push(run_check(&format!("forward[{preset}]"), INSTANCES, || {
            let (inputs, model, frames, label) = forward_case(preset, &mut rng)?;
            check_directional(
                &inputs,
                &|t, v| forward_loss(&model, &frames, label, t, v),
                &mut rng,
            )
        }));
    }
    GradcheckReport { seed, checks }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn exp_then_distance_matches_differences() {
        let p = vec![0.1, -0.2, 0.05];
        let cfg = BallConfig::hyperbolic(1.0, 3);
        let err = check_instance(&[Tensor::vector(vec![0.3, 0.4, -0.2])], &move |t, v| {
            let x = t.exp_origin(v[0], &cfg);
            let q = t.constant_vec(p.clone());
            Ok(t.dist_sq(x, q, &cfg))
        })
        .unwrap();
        assert!(err < REL_TOL, "{err}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // stop_gradient on one factor makes the analytic gradient x, not 2x;
        // without replay the difference would see 2x.
        let x = Tensor::vector(vec![0.7]);
        let err = check_instance(&[x], &|t, v| {
            let s = t.stop_gradient(v[0]);
            let o = t.mul(s, v[0]);
            Ok(t.sum(o))
        })
        .unwrap();
        assert!(err < 1e-8);
        crate::autodiff::inject_hel_backward_fault(true);
        let cfg = BallConfig::hyperbolic(1.0, 2);
        let err = check_instance(
            &[Tensor::vector(vec![0.3, 0.1]), Tensor::scalar(1.3)],
            &move |t, v| {
                let o = t.hel(v[0], v[1], &cfg);
                Ok(t.sum(o))
            },
        )
        .unwrap();
        crate::autodiff::inject_hel_backward_fault(false);
        assert!(err > 1.0);
    }

    #[test]
    fn injected_lens_fault_is_reported() {
        crate::autodiff::inject_hel_backward_fault(true);
        let report = run(1);
        crate::autodiff::inject_hel_backward_fault(false);
        let failing = report.failing();
        assert!(failing.contains(&"hel"), "{failing:?}");
        assert!(failing.contains(&"forward[full]"), "{failing:?}");
        assert!(!failing.contains(&"mobius_add"), "{failing:?}");
        assert!(report.table().contains("FAIL"));
    }

    #[test]
    fn forward_check_smoke() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (inputs, model, frames, label) = forward_case(AblationPreset::Full, &mut rng).unwrap();
        let err = check_directional(
            &inputs,
            &|t, v| forward_loss(&model, &frames, label, t, v),
            &mut rng,
        )
        .unwrap();
        assert!(err < REL_TOL, "{err}");
    }
}
