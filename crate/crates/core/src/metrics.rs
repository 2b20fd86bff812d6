//! Training losses and per-frame mAP.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::annotations::ClassVocabulary;
use crate::numcore::{Graph, NodeId, NumError, Tensor};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("{what}: shapes {left:?} and {right:?} differ")]
    ShapeMismatch {
        what: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("no class has a positive frame")]
    NoPositives,
    #[error("{0}")]
    Invalid(String),
}

/// Mean binary cross-entropy over all entries, probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_node(g: &mut Graph, probs: NodeId, targets: NodeId) -> Result<NodeId, NumError> {
    g.bce(probs, targets)
}

/// `(1/N) * sum_i ||R*_i - R_i||^2` over the `N` rows.
pub fn cooc_mse_node(g: &mut Graph, pred: NodeId, truth: NodeId) -> Result<NodeId, NumError> {
    let shape = g.value(pred).shape().to_vec();
    if shape.len() != 2 || shape[0] != shape[1] || g.value(truth).shape() != shape.as_slice() {
        return Err(NumError::ShapeMismatch {
            op: "cooc_mse",
            left: shape,
            right: g.value(truth).shape().to_vec(),
        });
    }
    let diff = g.sub(truth, pred)?;
    let sq = g.square(diff)?;
    let total = g.sum(sq)?;
    g.scale(total, 1.0 / shape[0] as f64)
}

fn scalar_of(f: impl FnOnce(&mut Graph) -> Result<NodeId, NumError>) -> Result<f64, NumError> {
    let mut g = Graph::new();
    g.set_recording(false);
    let out = f(&mut g)?;
    Ok(g.value(out).data()[0])
}

pub fn bce_loss(probs: &Tensor, targets: &Tensor) -> Result<f64, MetricsError> {
    if probs.shape() != targets.shape() {
        return Err(MetricsError::ShapeMismatch {
            what: "bce",
            left: probs.shape().to_vec(),
            right: targets.shape().to_vec(),
        });
    }
    scalar_of(|g| {
        let p = g.constant(probs.clone());
        let y = g.constant(targets.clone());
        bce_node(g, p, y)
    })
    .map_err(|e| MetricsError::Invalid(e.to_string()))
}

pub fn cooc_mse_loss(pred: &Tensor, truth: &Tensor) -> Result<f64, MetricsError> {
    scalar_of(|g| {
        let p = g.constant(pred.clone());
        let t = g.constant(truth.clone());
        cooc_mse_node(g, p, t)
    })
    .map_err(|_| MetricsError::ShapeMismatch {
        what: "cooc_mse",
        left: pred.shape().to_vec(),
        right: truth.shape().to_vec(),
    })
}

/// The two loss terms and their weighted sum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bce: f64,
    pub mse: f64,
    pub total: f64,
    pub balance: f64,
}

/// `total = bce + balance * mse`.
pub fn total_loss(bce: f64, mse: f64, balance: f64) -> Result<LossBreakdown, MetricsError> {
    if !(balance >= 0.0) {
        return Err(MetricsError::Invalid(format!("balance factor must be >= 0, got {balance}")));
    }
    Ok(LossBreakdown {
        bce,
        mse,
        total: bce + balance * mse,
        balance,
    })
}

/// Non-interpolated average precision of one class.
///
/// Frames are ranked by descending score, ties by ascending frame index; the
/// result is the mean, over positive frames, of precision at that frame's rank.
/// `None` when there are no positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / positives as f64)
}

/// Per-class AP and their mean over classes with at least one positive frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    pub per_class: IndexMap<String, f64>,
    pub skipped: Vec<String>,
    pub frames: usize,
    pub seed: u64,
    pub config_digest: String,
}

/// Per-frame mAP over pooled frames (`frames x N` scores and binary targets).
pub fn per_frame_map(probs: &Tensor, targets: &Tensor, vocab: &ClassVocabulary) -> Result<EvalReport, MetricsError> {
    if probs.shape() != targets.shape() || probs.rank() != 2 || probs.cols() != vocab.len() {
        return Err(MetricsError::ShapeMismatch {
            what: "per_frame_map",
            left: probs.shape().to_vec(),
            right: targets.shape().to_vec(),
        });
    }
    let (frames, n) = (probs.rows(), probs.cols());
    let mut per_class = IndexMap::new();
    let mut skipped = Vec::new();
    let mut scores = vec![0.0; frames];
    let mut labels = vec![false; frames];
    for (c, label) in vocab.labels().iter().enumerate() {
        for t in 0..frames {
            scores[t] = probs.data()[t * n + c];
            labels[t] = targets.data()[t * n + c] > 0.5;
        }
        match average_precision(&scores, &labels) {
            Some(ap) => {
                per_class.insert(label.clone(), ap);
            }
            None => skipped.push(label.clone()),
        }
    }
    if per_class.is_empty() {
        return Err(MetricsError::NoPositives);
    }
    let map = per_class.values().fold(0.0, |acc, &v| acc + v) / per_class.len() as f64;
    Ok(EvalReport {
        map,
        per_class,
        skipped,
        frames,
        seed: 0,
        config_digest: String::new(),
    })
}
