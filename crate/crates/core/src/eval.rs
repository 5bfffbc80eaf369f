//! Accuracy, macro-F1, confusion matrices and their file formats.

use std::fmt::Write as _;

use serde::Serialize;

use crate::data::{LabelSpace, Utterance};
use crate::error::{Error, Result};
use crate::net::{predict_from_logits, Model, Prediction};

/// `C x C` counts; rows are true classes, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }

    /// CSV with class names heading both the rows and the columns.
    pub fn to_csv(&self, labels: &LabelSpace) -> String {
        let mut out = String::from("true\\pred");
        for name in labels.names() {
            let _ = write!(out, ",{name}");
        }
        out.push('\n');
        for (name, row) in labels.names().iter().zip(&self.counts) {
            out.push_str(name);
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub confusion: ConfusionMatrix,
}

/// Classes with neither support nor predictions score F1 = 0 and still count
/// towards the macro average.
pub fn metrics(truth: &[usize], predicted: &[usize], num_classes: usize) -> Result<Metrics> {
    if truth.len() != predicted.len() || truth.is_empty() {
        return Err(Error::InvalidInput(format!(
            "metrics: need equal-length non-empty label lists, got {} and {}",
            truth.len(),
            predicted.len()
        )));
    }
    if let Some(bad) = truth.iter().chain(predicted).find(|&&y| y >= num_classes) {
        return Err(Error::InvalidInput(format!(
            "metrics: label {bad} out of range for {num_classes} classes"
        )));
    }
    let mut counts = vec![vec![0u64; num_classes]; num_classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        counts[t][p] += 1;
    }
    let per_class_f1: Vec<f64> = (0..num_classes)
        .map(|k| {
            let tp = counts[k][k] as f64;
            let support: u64 = counts[k].iter().sum();
            let predicted_k: u64 = counts.iter().map(|row| row[k]).sum();
            if tp == 0.0 {
                return 0.0;
            }
            let precision = tp / predicted_k as f64;
            let recall = tp / support as f64;
            2.0 * precision * recall / (precision + recall)
        })
        .collect();
    let confusion = ConfusionMatrix { counts };
    Ok(Metrics {
        accuracy: confusion.trace() as f64 / confusion.total() as f64,
        macro_f1: per_class_f1.iter().sum::<f64>() / num_classes as f64,
        per_class_f1,
        confusion,
    })
}

/// Inference output for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct UtterancePrediction {
    pub id: String,
    pub prediction: Prediction,
    /// Pooled tangent-space embedding.
    pub pooled_tangent: Vec<f64>,
    /// Pooled ball embedding.
    pub pooled_ball: Vec<f64>,
    pub indices: Vec<usize>,
}

/// Runs the model over `utterances` in order.
pub fn predict_all(model: &Model, utterances: &[Utterance]) -> Result<Vec<UtterancePrediction>> {
    utterances
        .iter()
        .map(|u| {
            let trace = model.forward(&u.frames)?;
            Ok(UtterancePrediction {
                id: u.id.clone(),
                prediction: predict_from_logits(&trace.logits),
                pooled_tangent: trace.pooled_tangent,
                pooled_ball: trace.pooled_ball,
                indices: trace.indices,
            })
        })
        .collect()
}

/// `id,predicted,p_<class>...` with one row per utterance.
pub fn predictions_csv(preds: &[UtterancePrediction], labels: &LabelSpace) -> String {
    let mut out = String::from("id,predicted");
    for name in labels.names() {
        let _ = write!(out, ",p_{name}");
    }
    out.push('\n');
    for p in preds {
        let _ = write!(out, "{},{}", p.id, labels.name(p.prediction.class));
        for v in &p.prediction.posterior {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// `id,u0,u1,...` rows of pooled tangent embeddings for external projection.
pub fn embeddings_csv(preds: &[UtterancePrediction]) -> String {
    let dim = preds.first().map_or(0, |p| p.pooled_tangent.len());
    let mut out = String::from("id");
    for i in 0..dim {
        let _ = write!(out, ",u{i}");
    }
    out.push('\n');
    for p in preds {
        out.push_str(&p.id);
        for v in &p.pooled_tangent {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}
