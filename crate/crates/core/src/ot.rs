//! Entropic prototype-to-target transport and the two target losses.
//!
//! Sinkhorn runs in the log domain: with squared hyperbolic costs that can
//! reach ~100 and `eps_ot = 0.05`, the Gibbs kernel `exp(-M/eps)` underflows
//! long before the potentials do.

use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::ball::{self, BallConfig, Geometry};
use crate::error::{Error, Result};
use crate::linalg::{log_softmax, log_sum_exp};

pub const DEFAULT_EPS_OT: f64 = 0.05;
pub const DEFAULT_ITERS: usize = 50;

/// Row-major `C x n` matrix of transport quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::InvalidInput(format!(
                "matrix {rows}x{cols} cannot hold {} values",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidInput("ragged matrix rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    /// `C x n` coupling.
    pub plan: Matrix,
    pub cost: Matrix,
    pub eps_ot: f64,
    pub row_marginal: Vec<f64>,
    pub col_marginal: Vec<f64>,
    /// `q[c][j] = plan[c][j] / b_j`; every column sums to one.
    pub soft_labels: Matrix,
}

impl TransportPlan {
    /// `<plan, cost>`.
    pub fn transport_cost(&self) -> f64 {
        self.plan
            .data
            .iter()
            .zip(&self.cost.data)
            .map(|(p, m)| p * m)
            .sum()
    }

    /// Regularized objective `<plan, M> + eps * sum plan (log plan - 1)`.
    pub fn entropic_objective(&self) -> f64 {
        let ent: f64 = self
            .plan
            .data
            .iter()
            .filter(|p| **p > 0.0)
            .map(|p| p * (p.ln() - 1.0))
            .sum();
        self.transport_cost() + self.eps_ot * ent
    }

    /// Largest absolute deviation of either marginal.
    pub fn max_marginal_violation(&self) -> f64 {
        let (c, n) = (self.plan.rows, self.plan.cols);
        let rows =
            (0..c).map(|r| (self.plan.row(r).iter().sum::<f64>() - self.row_marginal[r]).abs());
        let cols =
            (0..n).map(|j| (self.plan.column(j).iter().sum::<f64>() - self.col_marginal[j]).abs());
        rows.chain(cols).fold(0.0, f64::max)
    }

    /// Mean Shannon entropy (nats) of the soft-label columns.
    pub fn mean_soft_label_entropy(&self) -> f64 {
        let n = self.soft_labels.cols;
        (0..n)
            .map(|j| {
                self.soft_labels
                    .column(j)
                    .iter()
                    .filter(|q| **q > 0.0)
                    .map(|q| -q * q.ln())
                    .sum::<f64>()
            })
            .sum::<f64>()
            / n as f64
    }
}

fn check_simplex(v: &[f64], what: &str) -> Result<()> {
    let sum: f64 = v.iter().sum();
    if v.is_empty() || v.iter().any(|x| !(*x > 0.0 && x.is_finite())) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "{what} must be a strictly positive probability vector (sum {sum})"
        )));
    }
    Ok(())
}

/// Uniform weights `1/n`.
pub fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// Log-domain Sinkhorn with `iters` full row/column sweeps.
///
/// On exit every column is rescaled to match `b` exactly, so the soft labels
/// are exact distributions; the row marginal holds to Sinkhorn accuracy.
pub fn sinkhorn(
    cost: &Matrix,
    a: &[f64],
    b: &[f64],
    eps_ot: f64,
    iters: usize,
) -> Result<TransportPlan> {
    let (c, n) = (cost.rows, cost.cols);
    if a.len() != c || b.len() != n {
        return Err(Error::InvalidInput(format!(
            "marginal lengths ({}, {}) do not match cost shape {c}x{n}",
            a.len(),
            b.len()
        )));
    }
    check_simplex(a, "row marginal")?;
    check_simplex(b, "column marginal")?;
    if !cost.data.iter().all(|m| m.is_finite()) {
        return Err(Error::InvalidInput(
            "cost matrix has non-finite entries".into(),
        ));
    }
    if !(eps_ot > 0.0 && eps_ot.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "eps_ot must be positive, got {eps_ot}"
        )));
    }

    // Scaled log kernel K = -M / eps; potentials f, g are in the same units.
    let kernel: Vec<f64> = cost.data.iter().map(|m| -m / eps_ot).collect();
    let log_a: Vec<f64> = a.iter().map(|x| x.ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|x| x.ln()).collect();
    let mut f = vec![0.0; c];
    let mut g = vec![0.0; n];
    for _ in 0..iters {
        for r in 0..c {
            let row = &kernel[r * n..(r + 1) * n];
            f[r] = log_a[r] - log_sum_exp(row.iter().zip(&g).map(|(k, gj)| k + gj));
        }
        for j in 0..n {
            g[j] = log_b[j] - log_sum_exp((0..c).map(|r| f[r] + kernel[r * n + j]));
        }
    }
    if !f.iter().chain(&g).all(|v| v.is_finite()) {
        return Err(Error::numerical(
            "sinkhorn",
            format!("non-finite dual potentials at eps_ot = {eps_ot}; try a larger eps_ot"),
        ));
    }

    let mut plan = vec![0.0; c * n];
    for r in 0..c {
        for j in 0..n {
            plan[r * n + j] = (f[r] + kernel[r * n + j] + g[j]).exp();
        }
    }
    for j in 0..n {
        let col: f64 = (0..c).map(|r| plan[r * n + j]).sum();
        if !(col > 0.0 && col.is_finite()) {
            return Err(Error::numerical(
                "sinkhorn",
                format!("column {j} lost all mass; try a larger eps_ot"),
            ));
        }
        let k = b[j] / col;
        (0..c).for_each(|r| plan[r * n + j] *= k);
    }
    let soft = (0..c * n).map(|i| plan[i] / b[i % n]).collect();
    Ok(TransportPlan {
        plan: Matrix::new(c, n, plan)?,
        cost: cost.clone(),
        eps_ot,
        row_marginal: a.to_vec(),
        col_marginal: b.to_vec(),
        soft_labels: Matrix::new(c, n, soft)?,
    })
}

/// Prototype-to-target cost `M[c][j]`.
///
/// Hyperbolic OT uses the squared geodesic distance; Euclidean OT uses the
/// squared Euclidean distance between origin log maps.
pub fn cost_matrix(
    prototypes: &[Vec<f64>],
    targets: &[Vec<f64>],
    model_geo: &BallConfig,
    ot_geometry: Geometry,
) -> Result<Matrix> {
    let mut data = Vec::with_capacity(prototypes.len() * targets.len());
    match ot_geometry {
        Geometry::Hyperbolic => {
            for mu in prototypes {
                for t in targets {
                    data.push(ball::dist_sq_raw(mu, t, model_geo));
                }
            }
        }
        Geometry::Euclidean => {
            let flat = BallConfig::euclidean(model_geo.dim);
            let logs: Vec<Vec<f64>> = targets
                .iter()
                .map(|t| ball::log_origin_raw(t, model_geo))
                .collect();
            for mu in prototypes {
                let lm = ball::log_origin_raw(mu, model_geo);
                for lt in &logs {
                    data.push(ball::dist_sq_raw(&lm, lt, &flat));
                }
            }
        }
    }
    Matrix::new(prototypes.len(), targets.len(), data)
}

/// Loss values `(L_OPT, L_OT_CE)` for a plan and the target logits
/// (`C x n`, one column per target sample).
pub fn target_losses(plan: &TransportPlan, target_logits: &Matrix) -> Result<(f64, f64)> {
    if target_logits.rows != plan.plan.rows || target_logits.cols != plan.plan.cols {
        return Err(Error::InvalidInput(
            "target logits shape does not match the plan".into(),
        ));
    }
    if !target_logits.data.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidInput("target logits are not finite".into()));
    }
    let n = plan.plan.cols;
    let l_opt = plan.transport_cost();
    let mut ce = 0.0;
    for j in 0..n {
        let lp = log_softmax(&target_logits.column(j));
        ce -= plan
            .soft_labels
            .column(j)
            .iter()
            .zip(&lp)
            .map(|(q, l)| q * l)
            .sum::<f64>();
    }
    Ok((l_opt, ce / n as f64))
}

/// Tape handles of the target losses.
#[derive(Debug, Clone, Copy)]
pub struct TargetLossVars {
    pub opt: Var,
    pub ot_ce: Var,
}

/// Records `L_OPT` and `L_OT_CE` on the tape.
///
/// The plan and soft labels enter as constants; gradients reach the target
/// embeddings only through the cost terms and the logits.
pub fn target_losses_on_tape(
    tape: &mut Tape,
    plan: &TransportPlan,
    prototypes: &[Vec<f64>],
    target_embeddings: &[Var],
    target_logits: &[Var],
    model_geo: &BallConfig,
    ot_geometry: Geometry,
) -> Result<TargetLossVars> {
    let (c, n) = (plan.plan.rows, plan.plan.cols);
    if prototypes.len() != c || target_embeddings.len() != n || target_logits.len() != n {
        return Err(Error::InvalidInput(
            "target loss operands do not match the plan".into(),
        ));
    }
    let flat = BallConfig::euclidean(model_geo.dim);
    let (anchors, points, geo): (Vec<Var>, Vec<Var>, BallConfig) = match ot_geometry {
        Geometry::Hyperbolic => (
            prototypes
                .iter()
                .map(|m| tape.constant_vec(m.clone()))
                .collect(),
            target_embeddings.to_vec(),
            *model_geo,
        ),
        Geometry::Euclidean => (
            prototypes
                .iter()
                .map(|m| tape.constant_vec(ball::log_origin_raw(m, model_geo)))
                .collect(),
            target_embeddings
                .iter()
                .map(|&t| tape.log_origin(t, model_geo))
                .collect(),
            flat,
        ),
    };
    let mut opt_terms = Vec::with_capacity(c * n);
    for (r, &mu) in anchors.iter().enumerate() {
        for (j, &t) in points.iter().enumerate() {
            let d = tape.dist_sq(mu, t, &geo);
            opt_terms.push(tape.scale(d, plan.plan.get(r, j)));
        }
    }
    let opt = tape.add_n(&opt_terms);

    let ce_terms: Vec<Var> = target_logits
        .iter()
        .enumerate()
        .map(|(j, &logits)| {
            let lp = tape.log_softmax(logits);
            let q = tape.constant_vec(plan.soft_labels.column(j));
            tape.dot(q, lp)
        })
        .collect();
    let ce_sum = tape.add_n(&ce_terms);
    let ot_ce = tape.scale(ce_sum, -1.0 / n as f64);
    Ok(TargetLossVars { opt, ot_ce })
}

/// One row of the optional per-batch transport dump.
#[derive(Debug, Clone, Serialize)]
pub struct TransportDiagnostics {
    pub batch: usize,
    pub transport_cost: f64,
    pub max_marginal_violation: f64,
    pub mean_soft_label_entropy: f64,
}

impl TransportDiagnostics {
    pub fn of(batch: usize, plan: &TransportPlan) -> Self {
        Self {
            batch,
            transport_cost: plan.transport_cost(),
            max_marginal_violation: plan.max_marginal_violation(),
            mean_soft_label_entropy: plan.mean_soft_label_entropy(),
        }
    }
}
