//! Supervision-information ratio measurement.
//!
//! For a layer `l`, the ratio compares the gradient norm injected at the
//! nearest downstream output against the full gradient norm arriving at
//! `x_l`. Small ratios mean the loss signal at that layer is dominated by
//! chain-amplified transport rather than direct supervision.
//!
//! Per strategy:
//! - plain: numerator `||d_xL xi||`, denominator the full gradient of the
//!   final loss at `x_l`.
//! - joint: numerator `||d_xLk xi_k||` for the nearest downstream head k
//!   (unweighted), denominator the gradient of the weighted joint loss.
//! - pairwise / multipath: per head k, numerator `||gamma_k d_xLk xi_k||`
//!   and denominator `||g_k(x_l)||` from that head's own backward; each
//!   layer reports the nearest downstream head's ratio. Pairwise runs one
//!   fresh forward per head, multipath reuses the shared cache; measurement
//!   never updates parameters, so both see the same features.
//!
//! Norms are Frobenius per sample, averaged over the batch before the ratio
//! is formed. Measurement is side-effect free: batch-statistics mode without
//! running-stat updates, and no parameter writes.

use crate::error::{Error, Result};
use crate::model::{HeadTerm, Mode, Model};
use crate::tensor::{Element, Tensor};
use crate::train::Strategy;

/// Per-layer supervision ratios for one (epoch, strategy) measurement.
#[derive(Clone, Debug)]
pub struct RatioTrace {
    pub epoch: usize,
    pub strategy: Strategy,
    /// `(layer index l, rho_l)`, one entry per trunk layer unless skipped.
    pub entries: Vec<(usize, f64)>,
    /// Layers whose denominator was identically zero; flagged, not reported.
    pub skipped: Vec<usize>,
}

/// For each layer l (1-based), the index of the nearest head at or above l.
fn nearest_head(positions: &[usize], l: usize) -> usize {
    positions
        .iter()
        .position(|&p| p >= l)
        .expect("final head covers every layer")
}

/// Measures rho_l for every trunk layer under the given strategy's gradient
/// flow. No side effects on parameters or batchnorm running statistics.
pub fn supervision_ratio<T: Element>(
    model: &Model<T>,
    batch: &Tensor<T>,
    labels: &[usize],
    strategy: Strategy,
    epoch: usize,
) -> Result<RatioTrace> {
    if labels.is_empty() {
        return Err(Error::InvalidConfig("measurement batch is empty".into()));
    }
    let positions = model.config.head_positions.clone();
    let depth = model.depth();
    let final_head = model.num_heads() - 1;

    let mut entries = Vec::with_capacity(depth);
    let mut skipped = Vec::new();
    let mut push = |l: usize, num: f64, den: f64| {
        if den == 0.0 {
            skipped.push(l);
        } else {
            entries.push((l, num / den));
        }
    };

    match strategy {
        Strategy::Plain | Strategy::Joint => {
            let cache = model.forward_ro(batch, labels, Mode::Measure)?;
            let terms: Vec<HeadTerm<T>> = if strategy == Strategy::Plain {
                vec![HeadTerm {
                    head: final_head,
                    weight: T::one(),
                }]
            } else {
                (0..model.num_heads())
                    .map(|k| HeadTerm {
                        head: k,
                        weight: T::from_f64(model.gamma[k]),
                    })
                    .collect()
            };
            let (_, norms) = model.backward(&cache, &terms, true)?;
            let norms = norms.expect("norms requested");
            // unweighted injection norm per head
            let mut injections = vec![0.0; model.num_heads()];
            for (k, n) in &norms.head_injections {
                injections[*k] = n.as_f64() / model.gamma_for_terms(&terms, *k);
            }
            for l in 1..=depth {
                let k = match strategy {
                    Strategy::Plain => final_head,
                    _ => nearest_head(&positions, l),
                };
                let den = norms.layer_norms[l - 1]
                    .expect("full backward visits every layer")
                    .as_f64();
                push(l, injections[k], den);
            }
        }
        Strategy::Multipath | Strategy::Pairwise => {
            let shared = (strategy == Strategy::Multipath)
                .then(|| model.forward_ro(batch, labels, Mode::Measure))
                .transpose()?;
            // per-head records, indexed by head
            let mut per_head = Vec::with_capacity(model.num_heads());
            for k in 0..model.num_heads() {
                let weight = T::from_f64(model.gamma[k]);
                let term = [HeadTerm { head: k, weight }];
                let norms = match &shared {
                    Some(cache) => model.backward(cache, &term, true)?.1,
                    None => {
                        // pairwise measurement: fresh forward per head with the
                        // same (un-updated) parameters
                        let cache = model.forward_partial_ro(
                            batch,
                            labels,
                            Mode::Measure,
                            positions[k],
                            Some(&[k]),
                        )?;
                        model.backward(&cache, &term, true)?.1
                    }
                };
                per_head.push(norms.expect("norms requested"));
            }
            for l in 1..=depth {
                let k = nearest_head(&positions, l);
                let rec = &per_head[k];
                let num = rec.head_injections[0].1.as_f64();
                let den = rec.layer_norms[l - 1]
                    .expect("head-k backward reaches every layer at or below its position")
                    .as_f64();
                push(l, num, den);
            }
        }
    }

    Ok(RatioTrace {
        epoch,
        strategy,
        entries,
        skipped,
    })
}

impl<T: Element> Model<T> {
    /// The weight a term list assigned to head `k` (1.0 when absent).
    fn gamma_for_terms(&self, terms: &[HeadTerm<T>], k: usize) -> f64 {
        terms
            .iter()
            .find(|t| t.head == k)
            .map(|t| t.weight.as_f64())
            .unwrap_or(1.0)
    }
}
