//! Hyperbolic vector quantization of frame embeddings.
//!
//! Frames are snapped to their nearest codeword under the geodesic distance.
//! Training uses the usual two-sided objective: the codebook term moves
//! codewords towards (detached) frames and the commitment term, weighted by
//! `beta`, moves frames towards (detached) codewords. Tokens pass gradients
//! straight through to the continuous frames.

use rand::Rng;
use serde::Serialize;

use crate::autodiff::{Tape, Tensor, Var};
use crate::ball::{self, BallConfig};
use crate::error::{Error, Result};

/// Samples `k` codewords as `exp_0(u)` with `u` uniform in `[-0.1, 0.1]^dim`.
pub fn init_codebook(k: usize, dim: usize, cfg: &BallConfig, rng: &mut impl Rng) -> Tensor {
    let mut data = Vec::with_capacity(k * dim);
    for _ in 0..k {
        let u: Vec<f64> = (0..dim).map(|_| rng.random_range(-0.1..=0.1)).collect();
        data.extend(ball::exp_origin_raw(&u, cfg));
    }
    Tensor {
        shape: vec![k, dim],
        data,
    }
}

/// Re-projects every codeword into the ball after an optimizer update.
pub fn project_codebook(codewords: &mut Tensor, cfg: &BallConfig) {
    let cols = codewords.cols();
    for row in codewords.data.chunks_exact_mut(cols) {
        let p = ball::project_to_ball(row, cfg);
        row.copy_from_slice(&p);
    }
}

/// Index of the closest codeword; ties resolve to the lowest index.
pub fn nearest_codeword(frame: &[f64], codewords: &Tensor, cfg: &BallConfig) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for k in 0..codewords.rows() {
        let d = ball::dist_sq_raw(frame, codewords.row(k), cfg);
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct Quantized {
    /// Straight-through tokens, one per frame.
    pub tokens: Vec<Var>,
    pub indices: Vec<usize>,
    /// Frame-averaged codebook + commitment loss.
    pub loss: Var,
}

/// Quantizes `frames` against the codebook matrix node `codebook` (`K x d`).
pub fn quantize(
    tape: &mut Tape,
    frames: &[Var],
    codebook: Var,
    beta: f64,
    cfg: &BallConfig,
) -> Result<Quantized> {
    if frames.is_empty() {
        return Err(Error::InvalidInput("quantize: empty frame sequence".into()));
    }
    let shape = tape.shape(codebook).to_vec();
    let (k, d) = (shape[0], shape[1]);
    let words = Tensor {
        shape,
        data: tape.value(codebook).to_vec(),
    };
    let mut tokens = Vec::with_capacity(frames.len());
    let mut indices = Vec::with_capacity(frames.len());
    let mut terms = Vec::with_capacity(frames.len());
    for &x in frames {
        if tape.value(x).len() != d {
            return Err(Error::InvalidInput(format!(
                "quantize: frame dimension {} vs codeword dimension {d}",
                tape.value(x).len()
            )));
        }
        let idx = tape.choose(nearest_codeword(tape.value(x), &words, cfg));
        debug_assert!(idx < k);
        let word = tape.row(codebook, idx);
        let x_detached = tape.stop_gradient(x);
        let codebook_term = tape.dist_sq(x_detached, word, cfg);
        let word_detached = tape.stop_gradient(word);
        let commit = tape.dist_sq(x, word_detached, cfg);
        let commit = tape.scale(commit, beta);
        terms.push(tape.add(codebook_term, commit));
        tokens.push(tape.straight_through(x, word)?);
        indices.push(idx);
    }
    let total = tape.add_n(&terms);
    let loss = tape.scale(total, 1.0 / frames.len() as f64);
    Ok(Quantized {
        tokens,
        indices,
        loss,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Utilization {
    pub active_fraction: f64,
    pub perplexity: f64,
}

/// Fraction of codewords in use and exponentiated usage entropy.
pub fn utilization(histogram: &[u64]) -> Result<Utilization> {
    let total: u64 = histogram.iter().sum();
    if histogram.is_empty() || total == 0 {
        return Err(Error::InvalidInput("utilization: empty histogram".into()));
    }
    let active = histogram.iter().filter(|&&c| c > 0).count();
    let entropy: f64 = histogram
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    Ok(Utilization {
        active_fraction: active as f64 / histogram.len() as f64,
        perplexity: entropy.exp(),
    })
}
