//! Multi-head prediction: per-head evaluation, entropy, and safe prediction.
//!
//! One eval forward scores every head. Safe prediction picks, per sample,
//! the head whose softmax distribution has the least entropy (ties break
//! toward the deepest head) and answers with that head's argmax class. An
//! optional early-exit mode instead takes the shallowest head whose entropy
//! clears a threshold.

use serde::Serialize;

use crate::data::LabeledData;
use crate::error::{Error, Result};
use crate::model::{Mode, Model};
use crate::tensor::{Element, Tensor};
use crate::train::argmax;

/// Shannon entropy (natural log) of a probability vector; `0*log 0 = 0`.
pub fn entropy(probs: &[f64]) -> Result<f64> {
    let mut sum = 0.0;
    for &p in probs {
        if p < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "entropy input has negative probability {p}"
            )));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidConfig(format!(
            "entropy input sums to {sum}, not 1"
        )));
    }
    Ok(probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum())
}

#[derive(Clone, Debug, Serialize)]
pub struct HeadVote {
    pub head: usize,
    pub class: usize,
    pub entropy: f64,
}

/// One sample's multi-head answer.
#[derive(Clone, Debug, Serialize)]
pub struct Prediction {
    pub per_head: Vec<HeadVote>,
    pub chosen_head: usize,
    pub chosen_class: usize,
}

/// How the answering head is selected.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Selection {
    /// Always the final head.
    FinalHead,
    /// Per-sample argmin entropy, ties toward the deepest head.
    MinEntropy,
    /// Shallowest head with entropy below the threshold; falls back to the
    /// final head when none qualifies.
    EntropyThreshold(f64),
}

fn choose(votes: &[HeadVote], selection: Selection) -> usize {
    match selection {
        Selection::FinalHead => votes.len() - 1,
        Selection::MinEntropy => {
            let mut best = 0;
            for (k, vote) in votes.iter().enumerate() {
                if vote.entropy <= votes[best].entropy {
                    best = k;
                }
            }
            best
        }
        Selection::EntropyThreshold(t) => votes
            .iter()
            .position(|v| v.entropy < t)
            .unwrap_or(votes.len() - 1),
    }
}

/// Scores every head in one eval forward and selects per sample.
pub fn predict_with<T: Element>(
    model: &Model<T>,
    batch: &Tensor<T>,
    selection: Selection,
) -> Result<Vec<Prediction>> {
    let b = batch.shape()[0];
    // labels do not influence probabilities; evaluation reuses the training
    // forward with placeholder labels
    let labels = vec![0usize; b];
    let cache = model.forward_ro(batch, &labels, Mode::Eval)?;
    let n_heads = model.num_heads();
    let classes = model.config.num_classes;

    let mut out = Vec::with_capacity(b);
    for bi in 0..b {
        let mut votes = Vec::with_capacity(n_heads);
        for k in 0..n_heads {
            let probs = &cache.head(k).probs.data()[bi * classes..(bi + 1) * classes];
            let probs_f64: Vec<f64> = probs.iter().map(|p| p.as_f64()).collect();
            votes.push(HeadVote {
                head: k,
                class: argmax(&probs_f64),
                entropy: entropy(&probs_f64)?,
            });
        }
        let chosen_head = choose(&votes, selection);
        let chosen_class = votes[chosen_head].class;
        out.push(Prediction {
            per_head: votes,
            chosen_head,
            chosen_class,
        });
    }
    Ok(out)
}

/// Minimum-entropy selection over all heads.
pub fn safe_predict<T: Element>(model: &Model<T>, batch: &Tensor<T>) -> Result<Vec<Prediction>> {
    predict_with(model, batch, Selection::MinEntropy)
}

/// Percentage of samples each head answered for; sums to 100.
pub fn prediction_ratio(predictions: &[Prediction], n_heads: usize) -> Result<Vec<f64>> {
    if predictions.is_empty() {
        return Err(Error::InvalidConfig("prediction set is empty".into()));
    }
    let mut counts = vec![0usize; n_heads];
    for p in predictions {
        counts[p.chosen_head] += 1;
    }
    let total = predictions.len() as f64;
    Ok(counts.iter().map(|&c| 100.0 * c as f64 / total).collect())
}

/// Per-head error rates plus the safe-prediction error, percent.
#[derive(Clone, Debug)]
pub struct HeadErrorReport {
    pub per_head_err: Vec<f64>,
    pub safe_err: f64,
    pub prediction_ratio: Vec<f64>,
    pub samples: usize,
}

/// Scores every head and the safe-prediction rule over a labeled set.
pub fn evaluate_heads<T: Element>(
    model: &Model<T>,
    data: &LabeledData<T>,
    batch_size: usize,
) -> Result<HeadErrorReport> {
    let n = data.len();
    if n == 0 {
        return Err(Error::InvalidConfig("evaluation set is empty".into()));
    }
    let n_heads = model.num_heads();
    let mut head_wrong = vec![0usize; n_heads];
    let mut safe_wrong = 0usize;
    let mut predictions = Vec::with_capacity(n);

    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let (batch, labels) = data.slice(start, end);
        let preds = safe_predict(model, &batch)?;
        for (p, &label) in preds.iter().zip(&labels) {
            for vote in &p.per_head {
                if vote.class != label {
                    head_wrong[vote.head] += 1;
                }
            }
            if p.chosen_class != label {
                safe_wrong += 1;
            }
        }
        predictions.extend(preds);
        start = end;
    }

    Ok(HeadErrorReport {
        per_head_err: head_wrong
            .iter()
            .map(|&w| 100.0 * w as f64 / n as f64)
            .collect(),
        safe_err: 100.0 * safe_wrong as f64 / n as f64,
        prediction_ratio: prediction_ratio(&predictions, n_heads)?,
        samples: n,
    })
}
