//! The shared forward pass.
//!
//! Frame features are projected into the ball, tokenized against the prosody
//! codebook, fused with their tokens, compressed through a tangent-space
//! bottleneck, radially calibrated by the lens, and attention-pooled in the
//! tangent space at the origin. The pooled tangent vector feeds a linear
//! classifier; its image under `exp_0` is the utterance embedding used for
//! prototypes and transport.

pub mod ablation;
pub mod hel;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use ablation::{AblationConfig, AblationPreset, Branch, Fusion};

use crate::autodiff::{Tape, Tensor, Var};
use crate::ball::BallConfig;
use crate::error::{Error, Result};
use crate::linalg::{argmax, softmax};
use crate::vq;

const INIT_STD: f64 = 0.02;

/// Layer sizes and codebook settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Frame feature dimension `D`; 0 means "take it from the data".
    pub input_dim: usize,
    pub latent_dim: usize,
    pub bottleneck_dim: usize,
    pub codebook_size: usize,
    pub num_classes: usize,
    /// Commitment weight of the VQ loss.
    pub beta: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 0,
            latent_dim: 256,
            bottleneck_dim: 128,
            codebook_size: 256,
            num_classes: 5,
            beta: 0.25,
        }
    }
}

impl ModelConfig {
    /// Layer sizes of the synthetic benchmark (`D = 32`, five classes).
    pub fn desk() -> Self {
        Self {
            input_dim: 32,
            latent_dim: 32,
            bottleneck_dim: 16,
            codebook_size: 32,
            num_classes: 5,
            beta: 0.25,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("input_dim", self.input_dim),
            ("latent_dim", self.latent_dim),
            ("bottleneck_dim", self.bottleneck_dim),
            ("codebook_size", self.codebook_size),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model {name} must be positive")));
        }
        if self.codebook_size < self.num_classes {
            return Err(Error::Config(format!(
                "codebook_size {} is smaller than the number of classes {}",
                self.codebook_size, self.num_classes
            )));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!(
                "beta must be nonnegative, got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

/// Hidden layer of the concatenation fusion used by the `concat-mlp` ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionMlp {
    pub hidden_w: Tensor,
    pub hidden_b: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

/// Every trainable tensor of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    pub codebook: Tensor,
    pub bottleneck_w: Tensor,
    pub bottleneck_b: Tensor,
    /// The lens exponent is `exp(log_alpha)`, which keeps it positive.
    pub log_alpha: Tensor,
    pub pool_w: Tensor,
    pub cls_w: Tensor,
    pub cls_b: Tensor,
    pub fusion_mlp: Option<FusionMlp>,
}

const BASE_NAMES: [&str; 9] = [
    "proj_w",
    "proj_b",
    "codebook",
    "bottleneck_w",
    "bottleneck_b",
    "log_alpha",
    "pool_w",
    "cls_w",
    "cls_b",
];
const MLP_NAMES: [&str; 4] = [
    "fusion_hidden_w",
    "fusion_hidden_b",
    "fusion_out_w",
    "fusion_out_b",
];

fn normal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let dist = Normal::new(0.0, INIT_STD).expect("valid std");
    Tensor {
        shape: vec![rows, cols],
        data: (0..rows * cols).map(|_| dist.sample(rng)).collect(),
    }
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, abl: &AblationConfig, ball: &BallConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d_in, d, db, k, c) = (
            cfg.input_dim,
            cfg.latent_dim,
            cfg.bottleneck_dim,
            cfg.codebook_size,
            cfg.num_classes,
        );
        let proj_w = normal_matrix(d, d_in, &mut rng);
        let codebook = vq::init_codebook(k, d, ball, &mut rng);
        let bottleneck_w = normal_matrix(db, d, &mut rng);
        let pool_w = Tensor::vector(normal_matrix(1, db, &mut rng).data);
        let cls_w = normal_matrix(c, db, &mut rng);
        let fusion_mlp = (abl.fusion == Fusion::ConcatMlp).then(|| FusionMlp {
            hidden_w: normal_matrix(d, 2 * d, &mut rng),
            hidden_b: Tensor::zeros(vec![d]),
            out_w: normal_matrix(d, d, &mut rng),
            out_b: Tensor::zeros(vec![d]),
        });
        Self {
            proj_w,
            proj_b: Tensor::zeros(vec![d]),
            codebook,
            bottleneck_w,
            bottleneck_b: Tensor::zeros(vec![db]),
            log_alpha: Tensor::scalar(0.0),
            pool_w,
            cls_w,
            cls_b: Tensor::zeros(vec![c]),
            fusion_mlp,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.data[0].exp()
    }

    /// Tensors in canonical order, with their names.
    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out: Vec<(&'static str, &Tensor)> = BASE_NAMES
            .iter()
            .copied()
            .zip([
                &self.proj_w,
                &self.proj_b,
                &self.codebook,
                &self.bottleneck_w,
                &self.bottleneck_b,
                &self.log_alpha,
                &self.pool_w,
                &self.cls_w,
                &self.cls_b,
            ])
            .collect();
        if let Some(m) = &self.fusion_mlp {
            out.extend(MLP_NAMES.iter().copied().zip([
                &m.hidden_w,
                &m.hidden_b,
                &m.out_w,
                &m.out_b,
            ]));
        }
        out
    }

    /// Mutable tensors in the same order as [`ModelParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.proj_w,
            &mut self.proj_b,
            &mut self.codebook,
            &mut self.bottleneck_w,
            &mut self.bottleneck_b,
            &mut self.log_alpha,
            &mut self.pool_w,
            &mut self.cls_w,
            &mut self.cls_b,
        ];
        if let Some(m) = &mut self.fusion_mlp {
            out.extend([&mut m.hidden_w, &mut m.hidden_b, &mut m.out_w, &mut m.out_b]);
        }
        out
    }

    /// Rebuilds parameters from `(name, tensor)` pairs in canonical order.
    pub fn from_named(mut named: Vec<(String, Tensor)>) -> Result<Self> {
        let has_mlp = match named.len() {
            9 => false,
            13 => true,
            n => {
                return Err(Error::InvalidInput(format!(
                    "expected 9 or 13 parameter tensors, got {n}"
                )))
            }
        };
        for (i, (name, _)) in named.iter().enumerate() {
            let expected = BASE_NAMES
                .iter()
                .chain(MLP_NAMES.iter())
                .nth(i)
                .copied()
                .unwrap_or("");
            if name != expected {
                return Err(Error::InvalidInput(format!(
                    "parameter {i} is `{name}`, expected `{expected}`"
                )));
            }
        }
        let mut take = || named.remove(0).1;
        let mut params = Self {
            proj_w: take(),
            proj_b: take(),
            codebook: take(),
            bottleneck_w: take(),
            bottleneck_b: take(),
            log_alpha: take(),
            pool_w: take(),
            cls_w: take(),
            cls_b: take(),
            fusion_mlp: None,
        };
        if has_mlp {
            params.fusion_mlp = Some(FusionMlp {
                hidden_w: take(),
                hidden_b: take(),
                out_w: take(),
                out_b: take(),
            });
        }
        Ok(params)
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Order-sensitive hash of every parameter bit pattern.
    pub fn fingerprint(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (name, t) in self.named() {
            name.hash(&mut h);
            t.shape.hash(&mut h);
            for v in &t.data {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Puts every tensor on `tape`, as gradient leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars: Vec<Var> = self
            .named()
            .into_iter()
            .map(|(_, t)| {
                if trainable {
                    tape.variable(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        BoundParams::from_vars(vars)
    }
}

/// Tape handles for [`ModelParams`], in canonical order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        assert!(
            vars.len() == 9 || vars.len() == 13,
            "unexpected parameter count"
        );
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn proj_w(&self) -> Var {
        self.vars[0]
    }
    fn proj_b(&self) -> Var {
        self.vars[1]
    }
    fn codebook(&self) -> Var {
        self.vars[2]
    }
    fn bottleneck_w(&self) -> Var {
        self.vars[3]
    }
    fn bottleneck_b(&self) -> Var {
        self.vars[4]
    }
    fn log_alpha(&self) -> Var {
        self.vars[5]
    }
    fn pool_w(&self) -> Var {
        self.vars[6]
    }
    fn cls_w(&self) -> Var {
        self.vars[7]
    }
    fn cls_b(&self) -> Var {
        self.vars[8]
    }
    fn fusion_mlp(&self) -> Option<[Var; 4]> {
        (self.vars.len() == 13).then(|| [self.vars[9], self.vars[10], self.vars[11], self.vars[12]])
    }
}

/// Tape handles produced by one forward pass over an utterance.
#[derive(Debug, Clone)]
pub struct ForwardGraph {
    pub frames_x: Vec<Var>,
    pub tokens_q: Vec<Var>,
    pub bottleneck_b: Vec<Var>,
    pub calibrated: Vec<Var>,
    pub attention: Var,
    pub pooled_tangent: Var,
    pub pooled_ball: Var,
    pub logits: Var,
    pub vq_loss: Option<Var>,
    pub indices: Vec<usize>,
}

/// Plain values of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub frames_x: Vec<Vec<f64>>,
    pub tokens_q: Vec<Vec<f64>>,
    pub bottleneck_b: Vec<Vec<f64>>,
    pub calibrated: Vec<Vec<f64>>,
    pub attention: Vec<f64>,
    pub pooled_tangent: Vec<f64>,
    pub pooled_ball: Vec<f64>,
    pub logits: Vec<f64>,
    pub vq_loss: f64,
    pub indices: Vec<usize>,
}

impl ForwardTrace {
    pub fn posterior(&self) -> Vec<f64> {
        softmax(&self.logits)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub posterior: Vec<f64>,
}

/// Softmax posterior and its argmax (ties to the lowest class index).
pub fn predict_from_logits(logits: &[f64]) -> Prediction {
    let posterior = softmax(logits);
    Prediction {
        class: argmax(&posterior),
        posterior,
    }
}

/// Configuration plus parameters: everything needed to run the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub ablation: AblationConfig,
    pub ball: BallConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(
        config: ModelConfig,
        ablation: AblationConfig,
        ball: BallConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut ball = ball;
        ball.geometry_mode = ablation.geometry;
        ball.dim = config.latent_dim;
        ball.validate()?;
        let params = ModelParams::init(&config, &ablation, &ball, seed);
        Ok(Self {
            config,
            ablation,
            ball,
            params,
        })
    }

    /// Ball configuration in the model's geometry.
    pub fn geometry(&self) -> BallConfig {
        BallConfig {
            geometry_mode: self.ablation.geometry,
            ..self.ball
        }
    }

    /// Ball configuration used for prototype-to-target costs.
    pub fn ot_geometry(&self) -> BallConfig {
        BallConfig {
            geometry_mode: self.ablation.ot_geometry,
            ..self.ball
        }
    }

    /// Records the forward pass for one utterance (`frames` is `T x D`).
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        frames: &Tensor,
    ) -> Result<ForwardGraph> {
        let cfg = &self.config;
        if frames.shape.len() != 2 || frames.rows() == 0 {
            return Err(Error::InvalidInput(format!(
                "forward: expected a non-empty T x D frame matrix, got shape {:?}",
                frames.shape
            )));
        }
        if frames.cols() != cfg.input_dim {
            return Err(Error::InvalidInput(format!(
                "forward: frame dimension {} does not match model input dimension {}",
                frames.cols(),
                cfg.input_dim
            )));
        }
        let geo = self.geometry();
        let abl = &self.ablation;

        let frames_x: Vec<Var> = (0..frames.rows())
            .map(|t| {
                let z = tape.constant_vec(frames.row(t).to_vec());
                let h = tape.affine(p.proj_w(), z, p.proj_b());
                tape.exp_origin(h, &geo)
            })
            .collect();
        tape.ensure_finite("projection")?;

        let (tokens_q, indices, vq_loss) = if abl.uses_vq() {
            let q = vq::quantize(tape, &frames_x, p.codebook(), cfg.beta, &geo)?;
            (q.tokens, q.indices, Some(q.loss))
        } else {
            (Vec::new(), Vec::new(), None)
        };
        tape.ensure_finite("quantization")?;

        let mut fused = Vec::with_capacity(frames_x.len());
        for (t, &x) in frames_x.iter().enumerate() {
            let f = match abl.branch {
                Branch::ContinuousOnly => x,
                Branch::TokenOnly => tokens_q[t],
                Branch::Both => match abl.fusion {
                    Fusion::Mobius => tape.mobius_add(x, tokens_q[t], &geo),
                    Fusion::ConcatMlp => {
                        let [hw, hb, ow, ob] = p.fusion_mlp().ok_or_else(|| {
                            Error::Config("concat-mlp fusion requires fusion MLP parameters".into())
                        })?;
                        let lx = tape.log_origin(x, &geo);
                        let lq = tape.log_origin(tokens_q[t], &geo);
                        let cat = tape.concat(&[lx, lq]);
                        let h = tape.affine(hw, cat, hb);
                        let h = tape.tanh(h);
                        let o = tape.affine(ow, h, ob);
                        tape.exp_origin(o, &geo)
                    }
                },
            };
            fused.push(f);
        }
        tape.ensure_finite("fusion")?;

        let bottleneck_b: Vec<Var> = fused
            .iter()
            .map(|&f| {
                let v = tape.log_origin(f, &geo);
                let h = tape.affine(p.bottleneck_w(), v, p.bottleneck_b());
                tape.exp_origin(h, &geo)
            })
            .collect();
        tape.ensure_finite("bottleneck")?;

        let calibrated: Vec<Var> = if abl.hel {
            let alpha = tape.exp(p.log_alpha());
            bottleneck_b
                .iter()
                .map(|&b| tape.hel(b, alpha, &geo))
                .collect()
        } else {
            bottleneck_b.clone()
        };
        tape.ensure_finite("hel")?;

        let tangents: Vec<Var> = calibrated
            .iter()
            .map(|&b| tape.log_origin(b, &geo))
            .collect();
        let stacked = tape.stack(&tangents);
        let scores = tape.matvec(stacked, p.pool_w());
        let attention = tape.softmax(scores);
        let pooled_tangent = tape.matvec_transposed(stacked, attention);
        let pooled_ball = tape.exp_origin(pooled_tangent, &geo);
        tape.ensure_finite("pooling")?;

        let logits = tape.affine(p.cls_w(), pooled_tangent, p.cls_b());
        tape.ensure_finite("classifier")?;

        Ok(ForwardGraph {
            frames_x,
            tokens_q,
            bottleneck_b,
            calibrated,
            attention,
            pooled_tangent,
            pooled_ball,
            logits,
            vq_loss,
            indices,
        })
    }

    /// Inference-mode forward pass returning plain values.
    pub fn forward(&self, frames: &Tensor) -> Result<ForwardTrace> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let g = self.forward_on_tape(&mut tape, &bound, frames)?;
        let vals = |vs: &[Var]| {
            vs.iter()
                .map(|v| tape.value(*v).to_vec())
                .collect::<Vec<_>>()
        };
        Ok(ForwardTrace {
            frames_x: vals(&g.frames_x),
            tokens_q: vals(&g.tokens_q),
            bottleneck_b: vals(&g.bottleneck_b),
            calibrated: vals(&g.calibrated),
            attention: tape.value(g.attention).to_vec(),
            pooled_tangent: tape.value(g.pooled_tangent).to_vec(),
            pooled_ball: tape.value(g.pooled_ball).to_vec(),
            logits: tape.value(g.logits).to_vec(),
            vq_loss: g.vq_loss.map_or(0.0, |v| tape.scalar(v)),
            indices: g.indices,
        })
    }

    pub fn predict(&self, frames: &Tensor) -> Result<Prediction> {
        Ok(predict_from_logits(&self.forward(frames)?.logits))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ball::Geometry;

    fn small_model(abl: AblationConfig, seed: u64) -> Model {
        let cfg = ModelConfig {
            input_dim: 8,
            latent_dim: 6,
            bottleneck_dim: 4,
            codebook_size: 5,
            num_classes: 3,
            beta: 0.25,
        };
        Model::new(cfg, abl, BallConfig::default(), seed).unwrap()
    }

    fn frames(t: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 3.0).unwrap();
        Tensor::new(vec![t, d], (0..t * d).map(|_| n.sample(&mut rng)).collect()).unwrap()
    }

    #[test]
    fn single_frame_pools_to_itself() {
        let m = small_model(AblationConfig::default(), 1);
        let tr = m.forward(&frames(1, 8, 2)).unwrap();
        assert_eq!(tr.attention, vec![1.0]);
        let v = crate::ball::log_origin(&tr.calibrated[0], &m.geometry()).unwrap();
        assert_eq!(tr.pooled_tangent, v);
    }

    #[test]
    fn unit_alpha_lens_is_identity() {
        let m = small_model(AblationConfig::default(), 3);
        let tr = m.forward(&frames(4, 8, 4)).unwrap();
        for (b, c) in tr.bottleneck_b.iter().zip(&tr.calibrated) {
            assert!(b.iter().zip(c).all(|(x, y)| (x - y).abs() < 1e-9));
        }
    }

    #[test]
    fn euclidean_mobius_is_addition() {
        let abl = AblationConfig {
            geometry: Geometry::Euclidean,
            ..AblationConfig::default()
        };
        let m = small_model(abl, 5);
        let f = frames(3, 8, 6);
        let mut tape = Tape::new();
        let p = m.params.bind(&mut tape, false);
        let g = m.forward_on_tape(&mut tape, &p, &f).unwrap();
        for t in 0..3 {
            let x = tape.value(g.frames_x[t]).to_vec();
            let q = tape.value(g.tokens_q[t]).to_vec();
            let sum: Vec<f64> = x.iter().zip(&q).map(|(a, b)| a + b).collect();
            let fused = crate::ball::mobius_add(&x, &q, &m.geometry()).unwrap();
            assert_eq!(fused, sum);
        }
    }

    #[test]
    fn attention_is_a_distribution_and_outputs_interior() {
        for preset in AblationPreset::ALL {
            let m = small_model(preset.config(), 7);
            for t in [1, 2, 9] {
                let tr = m.forward(&frames(t, 8, t as u64)).unwrap();
                assert!(tr.attention.iter().all(|a| *a >= 0.0));
                assert!((tr.attention.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!((tr.posterior().iter().sum::<f64>() - 1.0).abs() < 1e-9);
                if m.geometry().is_hyperbolic() {
                    let inside = |p: &Vec<f64>| crate::linalg::norm(p) < 1.0;
                    assert!(tr.frames_x.iter().all(inside), "{preset}");
                    assert!(tr.calibrated.iter().all(inside), "{preset}");
                    assert!(inside(&tr.pooled_ball), "{preset}");
                }
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_invalid_input() {
        let m = small_model(AblationConfig::default(), 1);
        let err = m.forward(&frames(2, 7, 1)).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn predict_examples() {
        let p = predict_from_logits(&[0.3; 5]);
        assert_eq!(p.class, 0);
        assert!(p.posterior.iter().all(|v| (v - 0.2).abs() < 1e-15));

        let p = predict_from_logits(&[5.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(p.class, 0);
        // e^5 / (e^5 + 4)
        let oracle = 5f64.exp() / (5f64.exp() + 4.0);
        assert!((p.posterior[0] - oracle).abs() < 1e-12);

        let logits = [0.4, -1.2, 2.2, 0.1];
        let a = predict_from_logits(&logits);
        let shifted: Vec<f64> = logits.iter().map(|l| l + 17.5).collect();
        let b = predict_from_logits(&shifted);
        assert_eq!(a.class, b.class);
        assert!(a
            .posterior
            .iter()
            .zip(&b.posterior)
            .all(|(x, y)| (x - y).abs() < 1e-9));
    }

    #[test]
    fn named_roundtrip() {
        let m = small_model(AblationPreset::ConcatMlp.config(), 9);
        let named: Vec<(String, Tensor)> = m
            .params
            .named()
            .into_iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        assert_eq!(named.len(), 13);
        assert_eq!(ModelParams::from_named(named).unwrap(), m.params);
    }
}
