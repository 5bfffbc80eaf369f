//! Joint source-supervised and target-adaptation training.

pub mod optim;

use std::fmt::Write as _;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::ball::Geometry;
use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::eval::{metrics, predict_all, UtterancePrediction};
use crate::net::Model;
use crate::ot::{self, TransportDiagnostics, TransportPlan};
use crate::proto::{build_prototypes, PrototypeSet};
use crate::vq::{self, Utilization};
use optim::{clip_global_norm, AdamW, AdamWConfig, Schedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Per domain.
    pub batch_size: usize,
    pub lr_new_layers: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub warmup_fraction: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub lambda_opt: f64,
    pub lambda_ot: f64,
    pub lambda_vq: f64,
    pub eps_ot: f64,
    pub sinkhorn_iters: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr_new_layers: 1e-4,
            weight_decay: 0.01,
            grad_clip_norm: 1.0,
            warmup_fraction: 0.10,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-8,
            lambda_opt: 1.0,
            lambda_ot: 1.0,
            lambda_vq: 1.0,
            eps_ot: ot::DEFAULT_EPS_OT,
            sinkhorn_iters: ot::DEFAULT_ITERS,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Settings of the synthetic benchmark. The small layers of
    /// [`ModelConfig::desk`](crate::ModelConfig::desk) barely move at the
    /// default learning rate within 30 epochs, so it is raised to 1e-2.
    pub fn desk() -> Self {
        Self {
            lr_new_layers: 1e-2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_new_layers", self.lr_new_layers),
            ("grad_clip_norm", self.grad_clip_norm),
            ("adam_eps", self.adam_eps),
            ("eps_ot", self.eps_ot),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("weight_decay", self.weight_decay),
            ("lambda_opt", self.lambda_opt),
            ("lambda_ot", self.lambda_ot),
            ("lambda_vq", self.lambda_vq),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::Config(format!(
                "warmup_fraction must lie in (0, 1), got {}",
                self.warmup_fraction
            )));
        }
        for (name, b) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.batch_size == 0 || self.sinkhorn_iters == 0 {
            return Err(Error::Config(
                "batch_size and sinkhorn_iters must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Whether the target stream contributes to the objective at all.
    pub fn adapts(&self) -> bool {
        self.lambda_opt != 0.0 || self.lambda_ot != 0.0
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Loss components of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepLosses {
    pub ce: f64,
    pub vq_source: f64,
    pub vq_target: f64,
    pub opt: f64,
    pub ot_ce: f64,
    pub total: f64,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

impl StepLosses {
    /// The total recomputed from the logged components.
    pub fn weighted_total(&self, cfg: &TrainConfig) -> f64 {
        self.ce
            + cfg.lambda_vq * (self.vq_source + self.vq_target)
            + cfg.lambda_opt * self.opt
            + cfg.lambda_ot * self.ot_ce
    }
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub losses: StepLosses,
    /// Codeword indices of every frame in both batches.
    pub codes: Vec<usize>,
    pub plan: Option<TransportPlan>,
}

/// Extra regularizers (for example augmentation consistency) attach here.
fn auxiliary_loss(_tape: &mut Tape, _source: &[Var], _target: &[Var]) -> Option<Var> {
    None
}

fn mean_of(tape: &mut Tape, terms: &[Var]) -> Var {
    let s = tape.add_n(terms);
    tape.scale(s, 1.0 / terms.len() as f64)
}

fn zero(tape: &mut Tape) -> Var {
    tape.constant_vec(vec![0.0])
}

/// One joint step on a source and a target batch.
///
/// The plan is computed from detached target embeddings and enters the
/// losses as a constant. When both adaptation weights are zero the target
/// batch is not used at all.
pub fn train_step(
    model: &mut Model,
    opt: &mut AdamW,
    source: &[&Utterance],
    target: &[&Utterance],
    prototypes: &PrototypeSet,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<StepOutcome> {
    if source.is_empty() || (cfg.adapts() && target.is_empty()) {
        return Err(Error::InvalidInput("train_step: empty batch".into()));
    }
    let geo = model.geometry();
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, true);
    let mut codes = Vec::new();

    let mut ce_terms = Vec::with_capacity(source.len());
    let mut vq_s_terms = Vec::new();
    let mut source_logits = Vec::with_capacity(source.len());
    for u in source {
        let y = u
            .label
            .ok_or_else(|| Error::Data(format!("source utterance `{}` has no label", u.id)))?;
        let g = model.forward_on_tape(&mut tape, &bound, &u.frames)?;
        let lp = tape.log_softmax(g.logits);
        let picked = tape.index(lp, y);
        ce_terms.push(tape.scale(picked, -1.0));
        vq_s_terms.extend(g.vq_loss);
        source_logits.push(g.logits);
        codes.extend(g.indices);
    }
    let ce = mean_of(&mut tape, &ce_terms);
    let vq_source = if vq_s_terms.is_empty() {
        zero(&mut tape)
    } else {
        mean_of(&mut tape, &vq_s_terms)
    };

    let (vq_target, l_opt, l_ot_ce, plan, target_logits) = if cfg.adapts() {
        let mut emb = Vec::with_capacity(target.len());
        let mut logits = Vec::with_capacity(target.len());
        let mut vq_terms = Vec::new();
        for u in target {
            let g = model.forward_on_tape(&mut tape, &bound, &u.frames)?;
            emb.push(g.pooled_ball);
            logits.push(g.logits);
            vq_terms.extend(g.vq_loss);
            codes.extend(g.indices);
        }
        let values: Vec<Vec<f64>> = emb.iter().map(|v| tape.value(*v).to_vec()).collect();
        let cost = ot::cost_matrix(
            &prototypes.prototypes,
            &values,
            &geo,
            model.ablation.ot_geometry,
        )?;
        let plan = ot::sinkhorn(
            &cost,
            &prototypes.class_prior,
            &ot::uniform(values.len()),
            cfg.eps_ot,
            cfg.sinkhorn_iters,
        )?;
        let losses = ot::target_losses_on_tape(
            &mut tape,
            &plan,
            &prototypes.prototypes,
            &emb,
            &logits,
            &geo,
            model.ablation.ot_geometry,
        )?;
        let vq_t = if vq_terms.is_empty() {
            zero(&mut tape)
        } else {
            mean_of(&mut tape, &vq_terms)
        };
        (vq_t, losses.opt, losses.ot_ce, Some(plan), logits)
    } else {
        let z = zero(&mut tape);
        (z, z, z, None, Vec::new())
    };

    let vq_sum = tape.add(vq_source, vq_target);
    let mut terms = vec![
        ce,
        tape.scale(vq_sum, cfg.lambda_vq),
        tape.scale(l_opt, cfg.lambda_opt),
        tape.scale(l_ot_ce, cfg.lambda_ot),
    ];
    terms.extend(auxiliary_loss(&mut tape, &source_logits, &target_logits));
    let total = tape.add_n(&terms);

    let named = [
        ("source cross-entropy", ce),
        ("source vq loss", vq_source),
        ("target vq loss", vq_target),
        ("prototype transport loss", l_opt),
        ("transport soft-label cross-entropy", l_ot_ce),
        ("total loss", total),
    ];
    for (name, v) in named {
        let x = tape.scalar(v);
        if !x.is_finite() {
            return Err(Error::numerical("train_step", format!("{name} is {x}")));
        }
    }

    let grads = tape.backward(total)?;
    let mut grads: Vec<Vec<f64>> = bound
        .vars()
        .iter()
        .zip(model.params.named())
        .map(|(v, (_, t))| grads.get_or_zeros(*v, t.len()))
        .collect();
    let grad_norm = clip_global_norm(&mut grads, cfg.grad_clip_norm);
    opt.step(&mut model.params.tensors_mut(), &grads, lr);
    if geo.geometry_mode == Geometry::Hyperbolic {
        vq::project_codebook(&mut model.params.codebook, &geo);
    }

    let losses = StepLosses {
        ce: tape.scalar(ce),
        vq_source: tape.scalar(vq_source),
        vq_target: tape.scalar(vq_target),
        opt: tape.scalar(l_opt),
        ot_ce: tape.scalar(l_ot_ce),
        total: tape.scalar(total),
        lr,
        grad_norm,
    };
    Ok(StepOutcome {
        losses,
        codes,
        plan,
    })
}

/// Per-epoch summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub loss_source_ce: f64,
    pub loss_opt: f64,
    pub loss_ot_ce: f64,
    /// Mean of source + target VQ losses per step.
    pub loss_vq: f64,
    pub loss_total: f64,
    /// Accuracy on the full source set with the end-of-epoch parameters.
    pub source_accuracy: f64,
    pub target_accuracy: Option<f64>,
    pub target_macro_f1: Option<f64>,
    pub codebook: Option<Utilization>,
    pub alpha: f64,
    /// Fingerprint of the parameters used for this epoch's prototypes.
    pub prototype_params_fingerprint: u64,
}

const EPOCH_CSV_HEADER: &str =
    "epoch,loss_source_ce,loss_opt,loss_ot_ce,loss_vq,loss_total,source_accuracy,\
target_accuracy,target_macro_f1,codebook_active_fraction,codebook_perplexity,alpha";

/// One row per epoch; absent values are empty cells.
pub fn epochs_csv(reports: &[EpochReport]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = format!("{EPOCH_CSV_HEADER}\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.loss_source_ce,
            r.loss_opt,
            r.loss_ot_ce,
            r.loss_vq,
            r.loss_total,
            r.source_accuracy,
            opt(r.target_accuracy),
            opt(r.target_macro_f1),
            opt(r.codebook.map(|u| u.active_fraction)),
            opt(r.codebook.map(|u| u.perplexity)),
            r.alpha,
        );
    }
    out
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: Model,
    pub reports: Vec<EpochReport>,
    /// Prototypes from the final parameters; `None` when no epoch ran.
    pub prototypes: Option<PrototypeSet>,
    pub steps: Vec<StepLosses>,
    pub diagnostics: Vec<TransportDiagnostics>,
}

/// Visits a dataset in shuffled order, reshuffling when exhausted.
struct Stream {
    order: Vec<usize>,
    pos: usize,
}

impl Stream {
    fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, pos: 0 }
    }

    fn next_batch(&mut self, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let end = (self.pos + size).min(self.order.len());
        let batch = self.order[self.pos..end].to_vec();
        self.pos = end;
        batch
    }
}

fn source_pass(model: &Model, source: &[Utterance]) -> Result<(Vec<UtterancePrediction>, f64)> {
    let preds = predict_all(model, source)?;
    let correct = preds
        .iter()
        .zip(source)
        .filter(|(p, u)| Some(p.prediction.class) == u.label)
        .count();
    Ok((preds, correct as f64 / source.len() as f64))
}

fn prototypes_from(
    model: &Model,
    source: &[Utterance],
    preds: &[UtterancePrediction],
) -> Result<PrototypeSet> {
    let labelled: Vec<(Vec<f64>, usize)> = preds
        .iter()
        .zip(source)
        .map(|(p, u)| {
            (
                p.pooled_ball.clone(),
                u.label.expect("source labels checked"),
            )
        })
        .collect();
    build_prototypes(&labelled, model.config.num_classes, &model.geometry())
}

/// Trains `model` on labelled `source` and unlabelled `target` utterances.
///
/// `target_labels`, when given, are only used for the per-epoch report.
pub fn fit(
    mut model: Model,
    source: &[Utterance],
    target: &[Utterance],
    cfg: &TrainConfig,
    target_labels: Option<&[usize]>,
) -> Result<FitResult> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::Data("source set is empty".into()));
    }
    if let Some(u) = source.iter().find(|u| u.label.is_none()) {
        return Err(Error::Data(format!(
            "source utterance `{}` has no label",
            u.id
        )));
    }
    if cfg.adapts() && target.is_empty() {
        return Err(Error::Data("target set is empty".into()));
    }
    if let Some(labels) = target_labels {
        if labels.len() != target.len() {
            return Err(Error::Data(
                "target labels do not match the target set".into(),
            ));
        }
    }
    let c = model.config.num_classes;
    if let Some(u) = source.iter().find(|u| u.label.is_some_and(|y| y >= c)) {
        return Err(Error::Data(format!(
            "source utterance `{}` has a label outside {c} classes",
            u.id
        )));
    }

    let steps_per_epoch = source.len().max(target.len()).div_ceil(cfg.batch_size);
    let schedule = Schedule::new(
        cfg.lr_new_layers,
        cfg.warmup_fraction,
        (cfg.epochs * steps_per_epoch) as u64,
    );
    let sizes: Vec<usize> = model.params.named().iter().map(|(_, t)| t.len()).collect();
    let mut opt = AdamW::new(cfg.adamw(), &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0005_eed0_fba7_c4e5);
    let mut reports = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::new();
    let mut diagnostics = Vec::new();
    let mut cached: Option<(u64, Vec<UtterancePrediction>)> = None;
    let mut prototypes = None;

    for epoch in 0..cfg.epochs {
        let fp = model.params.fingerprint();
        let preds = match cached.take() {
            Some((h, p)) if h == fp => p,
            _ => source_pass(&model, source)?.0,
        };
        let protos = prototypes_from(&model, source, &preds)?;
        assert_eq!(
            fp,
            model.params.fingerprint(),
            "prototype refresh mutated parameters"
        );

        let mut src = Stream::new(source.len(), &mut rng);
        let mut tgt = Stream::new(target.len().max(1), &mut rng);
        let mut hist = vec![0u64; model.config.codebook_size];
        let mut sums = [0.0f64; 5];
        for s in 0..steps_per_epoch {
            let sb: Vec<&Utterance> = src
                .next_batch(cfg.batch_size, &mut rng)
                .into_iter()
                .map(|i| &source[i])
                .collect();
            let tb: Vec<&Utterance> = if cfg.adapts() {
                tgt.next_batch(cfg.batch_size, &mut rng)
                    .into_iter()
                    .map(|i| &target[i])
                    .collect()
            } else {
                Vec::new()
            };
            let global = (epoch * steps_per_epoch + s) as u64;
            let out = train_step(
                &mut model,
                &mut opt,
                &sb,
                &tb,
                &protos,
                cfg,
                schedule.lr(global),
            )?;
            for k in out.codes {
                hist[k] += 1;
            }
            if let Some(plan) = &out.plan {
                diagnostics.push(TransportDiagnostics::of(global as usize, plan));
            }
            let l = out.losses;
            debug!(
                "epoch {epoch} step {s}: total {:.6} ce {:.6} lr {:.3e}",
                l.total, l.ce, l.lr
            );
            for (acc, v) in
                sums.iter_mut()
                    .zip([l.ce, l.opt, l.ot_ce, l.vq_source + l.vq_target, l.total])
            {
                *acc += v;
            }
            steps.push(l);
        }

        let (preds, source_accuracy) = source_pass(&model, source)?;
        let (target_accuracy, target_macro_f1) = match target_labels {
            Some(labels) => {
                let pred: Vec<usize> = predict_all(&model, target)?
                    .iter()
                    .map(|p| p.prediction.class)
                    .collect();
                let m = metrics(labels, &pred, c)?;
                (Some(m.accuracy), Some(m.macro_f1))
            }
            None => (None, None),
        };
        let codebook = if model.ablation.uses_vq() {
            vq::utilization(&hist).ok()
        } else {
            None
        };
        let n = steps_per_epoch as f64;
        let report = EpochReport {
            epoch,
            loss_source_ce: sums[0] / n,
            loss_opt: sums[1] / n,
            loss_ot_ce: sums[2] / n,
            loss_vq: sums[3] / n,
            loss_total: sums[4] / n,
            source_accuracy,
            target_accuracy,
            target_macro_f1,
            codebook,
            alpha: model.params.alpha(),
            prototype_params_fingerprint: fp,
        };
        info!(
            "epoch {epoch}: loss {:.4} source acc {:.4} target acc {}",
            report.loss_total,
            report.source_accuracy,
            report
                .target_accuracy
                .map_or("-".into(), |a| format!("{a:.4}"))
        );
        reports.push(report);
        cached = Some((model.params.fingerprint(), preds));
        prototypes = Some(protos);
    }
    if let Some((_, preds)) = &cached {
        prototypes = Some(prototypes_from(&model, source, preds)?);
    }
    Ok(FitResult {
        model,
        reports,
        prototypes,
        steps,
        diagnostics,
    })
}
