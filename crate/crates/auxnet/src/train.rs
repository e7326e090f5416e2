//! Training strategies over SGD with momentum.
//!
//! Four ways to propagate gradients through a multi-head model:
//!
//! - `Plain`: backward from the final loss only.
//! - `Joint`: one backward of `xi + sum_k gamma_k * xi_k`.
//! - `Pairwise`: per head (shallowest first), a fresh forward up to that
//!   head, a backward of its weighted loss, and an immediate update; the
//!   next head sees the already-updated parameters.
//! - `Multipath`: one shared forward; then per head, a backward of its
//!   weighted loss through the *cached* activations followed by an immediate
//!   update. Features and losses stay fixed within the iteration, parameter
//!   updates are applied between backward passes.
//!
//! One momentum buffer per parameter is shared across per-head micro-steps,
//! so with zero auxiliary heads all four strategies walk bitwise-identical
//! trajectories.

use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::DataSplit;
use crate::error::{Error, Result};
use crate::model::{BlockGrads, Gradients, HeadGrads, HeadTerm, Mode, Model};
use crate::ratio::{supervision_ratio, RatioTrace};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Plain,
    Joint,
    Pairwise,
    Multipath,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Plain,
        Strategy::Joint,
        Strategy::Pairwise,
        Strategy::Multipath,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Plain => "plain",
            Strategy::Joint => "joint",
            Strategy::Pairwise => "pairwise",
            Strategy::Multipath => "multipath",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Strategy::Plain),
            "joint" => Ok(Strategy::Joint),
            "pairwise" => Ok(Strategy::Pairwise),
            "multipath" => Ok(Strategy::Multipath),
            other => Err(Error::InvalidConfig(format!(
                "unknown strategy '{other}' (plain|joint|pairwise|multipath)"
            ))),
        }
    }
}

/// Which way per-head passes sweep the heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadOrder {
    #[default]
    ShallowFirst,
    DeepFirst,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_base_lr")]
    pub base_lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
}

fn default_base_lr() -> f64 {
    0.1
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    1e-4
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            base_lr: default_base_lr(),
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
        }
    }
}

/// Step schedule: the learning rate is divided by 10 at 40% and again at 60%
/// of the total epochs, computed in exact integer arithmetic.
pub fn lr_at_epoch(base: f64, epoch: usize, total_epochs: usize) -> f64 {
    if 5 * epoch >= 3 * total_epochs {
        base / 100.0
    } else if 5 * epoch >= 2 * total_epochs {
        base / 10.0
    } else {
        base
    }
}

fn zeros_block_grads<T: Element>(model: &Model<T>) -> Vec<BlockGrads<T>> {
    model
        .blocks
        .iter()
        .map(|b| BlockGrads {
            conv_w: Tensor::zeros_like(&b.conv.weights),
            conv_b: Tensor::zeros_like(&b.conv.bias),
            bn_gamma: Tensor::zeros_like(&b.bn.gamma),
            bn_beta: Tensor::zeros_like(&b.bn.beta),
            shortcut_w: b.shortcut.as_ref().map(|s| Tensor::zeros_like(&s.weights)),
            shortcut_b: b.shortcut.as_ref().map(|s| Tensor::zeros_like(&s.bias)),
        })
        .collect()
}

/// SGD with momentum; velocity buffers are aligned with the model's
/// parameters and persist across per-head micro-steps and iterations.
pub struct Optimizer<T: Element> {
    pub config: OptimizerConfig,
    vel_blocks: Vec<BlockGrads<T>>,
    vel_heads: Vec<HeadGrads<T>>,
}

impl<T: Element> Optimizer<T> {
    pub fn new(model: &Model<T>, config: OptimizerConfig) -> Result<Self> {
        if !(config.base_lr.is_finite() && config.base_lr >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "base_lr must be finite and >= 0, got {}",
                config.base_lr
            )));
        }
        if !(0.0..1.0).contains(&config.momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum must lie in [0,1), got {}",
                config.momentum
            )));
        }
        Ok(Optimizer {
            config,
            vel_blocks: zeros_block_grads(model),
            vel_heads: model
                .heads
                .iter()
                .map(|h| HeadGrads {
                    fc_w: Tensor::zeros_like(&h.fc.weights),
                    fc_b: Tensor::zeros_like(&h.fc.bias),
                })
                .collect(),
        })
    }

    /// Applies one SGD step over exactly the parameters the gradients cover.
    /// `v = mu*v + (g + wd*p); p -= lr*v`.
    pub fn apply(&mut self, model: &mut Model<T>, grads: &Gradients<T>, lr: f64) {
        let lr = T::from_f64(lr);
        let mu = T::from_f64(self.config.momentum);
        let wd = T::from_f64(self.config.weight_decay);
        for (i, bg) in grads.blocks.iter().enumerate() {
            let block = &mut model.blocks[i];
            let vel = &mut self.vel_blocks[i];
            update_tensor(
                &mut block.conv.weights,
                &bg.conv_w,
                &mut vel.conv_w,
                lr,
                mu,
                wd,
            );
            update_tensor(
                &mut block.conv.bias,
                &bg.conv_b,
                &mut vel.conv_b,
                lr,
                mu,
                wd,
            );
            update_tensor(
                &mut block.bn.gamma,
                &bg.bn_gamma,
                &mut vel.bn_gamma,
                lr,
                mu,
                wd,
            );
            update_tensor(
                &mut block.bn.beta,
                &bg.bn_beta,
                &mut vel.bn_beta,
                lr,
                mu,
                wd,
            );
            if let (Some(proj), Some(gw), Some(gb)) = (
                block.shortcut.as_mut(),
                bg.shortcut_w.as_ref(),
                bg.shortcut_b.as_ref(),
            ) {
                let vw = vel.shortcut_w.as_mut().expect("velocity mirrors params");
                let vb = vel.shortcut_b.as_mut().expect("velocity mirrors params");
                update_tensor(&mut proj.weights, gw, vw, lr, mu, wd);
                update_tensor(&mut proj.bias, gb, vb, lr, mu, wd);
            }
        }
        for (head_idx, hg) in &grads.heads {
            let head = &mut model.heads[*head_idx];
            let vel = &mut self.vel_heads[*head_idx];
            update_tensor(&mut head.fc.weights, &hg.fc_w, &mut vel.fc_w, lr, mu, wd);
            update_tensor(&mut head.fc.bias, &hg.fc_b, &mut vel.fc_b, lr, mu, wd);
        }
    }
}

fn update_tensor<T: Element>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    vel: &mut Tensor<T>,
    lr: T,
    mu: T,
    wd: T,
) {
    let p = param.data_mut();
    let g = grad.data();
    let v = vel.data_mut();
    for i in 0..p.len() {
        let update = g[i] + wd * p[i];
        v[i] = mu * v[i] + update;
        p[i] = p[i] - lr * v[i];
    }
}

/// Per-iteration bookkeeping returned by the step functions.
#[derive(Clone, Debug)]
pub struct StepStats {
    /// One loss per head (for pairwise: each from its own forward).
    pub head_losses: Vec<f64>,
    /// Correct top-1 predictions per head on this batch.
    pub head_correct: Vec<usize>,
    pub examples: usize,
    pub forward_passes: usize,
    pub backward_passes: usize,
}

fn count_correct<T: Element>(probs: &Tensor<T>, labels: &[usize]) -> usize {
    let c = probs.shape()[1];
    probs
        .data()
        .chunks_exact(c)
        .zip(labels)
        .filter(|(row, &label)| argmax(row) == label)
        .count()
}

pub(crate) fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn stats_from_cache<T: Element>(
    cache: &crate::model::ForwardCache<T>,
    forward_passes: usize,
    backward_passes: usize,
) -> StepStats {
    let mut losses = Vec::with_capacity(cache.heads.len());
    let mut correct = Vec::with_capacity(cache.heads.len());
    for trace in cache.heads.iter() {
        let t = trace.as_ref().expect("full forward computes every head");
        losses.push(t.loss.as_f64());
        correct.push(count_correct(&t.probs, &cache.labels));
    }
    StepStats {
        head_losses: losses,
        head_correct: correct,
        examples: cache.labels.len(),
        forward_passes,
        backward_passes,
    }
}

fn head_sweep_order<T: Element>(model: &Model<T>, order: HeadOrder) -> Vec<usize> {
    let mut ks: Vec<usize> = (0..model.num_heads()).collect();
    if order == HeadOrder::DeepFirst {
        ks.reverse();
    }
    ks
}

/// One forward, one backward from the final loss, one update.
pub fn step_plain<T: Element>(
    model: &mut Model<T>,
    opt: &mut Optimizer<T>,
    batch: &Tensor<T>,
    labels: &[usize],
    lr: f64,
) -> Result<StepStats> {
    let cache = model.forward(batch, labels, Mode::Train)?;
    let final_head = model.num_heads() - 1;
    let (grads, _) = model.backward(
        &cache,
        &[HeadTerm {
            head: final_head,
            weight: T::one(),
        }],
        false,
    )?;
    opt.apply(model, &grads, lr);
    Ok(stats_from_cache(&cache, 1, 1))
}

/// One forward, one backward of the gamma-weighted joint loss, one update.
pub fn step_joint<T: Element>(
    model: &mut Model<T>,
    opt: &mut Optimizer<T>,
    batch: &Tensor<T>,
    labels: &[usize],
    lr: f64,
) -> Result<StepStats> {
    let weights = model.gamma.clone();
    step_joint_weighted(model, opt, batch, labels, lr, &weights)
}

/// Joint step with explicit head weights (the final head's weight included).
pub fn step_joint_weighted<T: Element>(
    model: &mut Model<T>,
    opt: &mut Optimizer<T>,
    batch: &Tensor<T>,
    labels: &[usize],
    lr: f64,
    weights: &[f64],
) -> Result<StepStats> {
    if weights.len() != model.num_heads() {
        return Err(Error::InvalidConfig(format!(
            "{} weights for {} heads",
            weights.len(),
            model.num_heads()
        )));
    }
    let cache = model.forward(batch, labels, Mode::Train)?;
    let terms: Vec<HeadTerm<T>> = weights
        .iter()
        .enumerate()
        .map(|(k, &w)| HeadTerm {
            head: k,
            weight: T::from_f64(w),
        })
        .collect();
    let (grads, _) = model.backward(&cache, &terms, false)?;
    opt.apply(model, &grads, lr);
    Ok(stats_from_cache(&cache, 1, 1))
}

/// Per head: fresh forward up to that head with the current (already
/// updated) parameters, backward of its weighted loss, immediate update.
pub fn step_pairwise<T: Element>(
    model: &mut Model<T>,
    opt: &mut Optimizer<T>,
    batch: &Tensor<T>,
    labels: &[usize],
    lr: f64,
    order: HeadOrder,
) -> Result<StepStats> {
    let n_heads = model.num_heads();
    let mut losses = vec![0.0; n_heads];
    let mut correct = vec![0usize; n_heads];
    for k in head_sweep_order(model, order) {
        let pos = model.config.head_positions[k];
        let cache = model.forward_partial(batch, labels, Mode::Train, pos, Some(&[k]))?;
        let trace = cache.head(k);
        losses[k] = trace.loss.as_f64();
        correct[k] = count_correct(&trace.probs, labels);
        let (grads, _) = model.backward(
            &cache,
            &[HeadTerm {
                head: k,
                weight: T::from_f64(model.gamma[k]),
            }],
            false,
        )?;
        opt.apply(model, &grads, lr);
    }
    Ok(StepStats {
        head_losses: losses,
        head_correct: correct,
        examples: labels.len(),
        forward_passes: n_heads,
        backward_passes: n_heads,
    })
}

/// One shared forward; per head, a backward through the cached activations
/// (features and losses fixed) and an immediate update of the parameters on
/// that head's path. Batchnorm running statistics update once, during the
/// shared forward.
pub fn step_multipath<T: Element>(
    model: &mut Model<T>,
    opt: &mut Optimizer<T>,
    batch: &Tensor<T>,
    labels: &[usize],
    lr: f64,
    order: HeadOrder,
) -> Result<StepStats> {
    let cache = model.forward(batch, labels, Mode::Train)?;
    let n_heads = model.num_heads();
    for k in head_sweep_order(model, order) {
        let (grads, _) = model.backward(
            &cache,
            &[HeadTerm {
                head: k,
                weight: T::from_f64(model.gamma[k]),
            }],
            false,
        )?;
        opt.apply(model, &grads, lr);
    }
    Ok(stats_from_cache(&cache, 1, n_heads))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub head_order: HeadOrder,
    /// Record supervision-ratio traces on a held-out batch each epoch.
    #[serde(default)]
    pub measure_ratios: bool,
    #[serde(default = "default_measurement_batch")]
    pub measurement_batch: usize,
}

fn default_batch_size() -> usize {
    128
}
fn default_measurement_batch() -> usize {
    128
}

impl TrainConfig {
    pub fn new(strategy: Strategy, epochs: usize, seed: u64) -> Self {
        TrainConfig {
            strategy,
            epochs,
            batch_size: default_batch_size(),
            optimizer: OptimizerConfig::default(),
            seed,
            head_order: HeadOrder::default(),
            measure_ratios: false,
            measurement_batch: default_measurement_batch(),
        }
    }
}

/// One epoch of the report.
#[derive(Clone, Debug)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: Vec<f64>,
    /// Percent, tallied from the training passes themselves.
    pub train_err: Vec<f64>,
    /// Percent, evaluated on the test split after the epoch.
    pub test_err: Vec<f64>,
    pub seconds: f64,
    pub forward_passes: usize,
    pub backward_passes: usize,
}

#[derive(Clone, Debug)]
pub struct StrategyReport {
    pub strategy: Strategy,
    pub rows: Vec<EpochRow>,
    pub ratio_traces: Vec<RatioTrace>,
}

/// Per-head top-1 error (percent) on a labeled set, batched eval forwards.
pub fn test_errors<T: Element>(
    model: &Model<T>,
    data: &crate::data::LabeledData<T>,
    batch_size: usize,
) -> Result<Vec<f64>> {
    let n = data.len();
    let n_heads = model.num_heads();
    let mut wrong = vec![0usize; n_heads];
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let (batch, labels) = data.slice(start, end);
        let cache = model.forward_ro(&batch, &labels, Mode::Eval)?;
        for (k, trace) in cache.heads.iter().enumerate() {
            let t = trace.as_ref().expect("eval computes every head");
            wrong[k] += labels.len() - count_correct(&t.probs, &labels);
        }
        start = end;
    }
    Ok(wrong
        .into_iter()
        .map(|w| 100.0 * w as f64 / n as f64)
        .collect())
}

/// Runs shuffled mini-batch epochs with the configured strategy, evaluating
/// every head on the test split after each epoch. Deterministic given the
/// seed (the timing column aside).
pub fn train<T: Element>(
    model: &mut Model<T>,
    data: &DataSplit<T>,
    cfg: &TrainConfig,
) -> Result<StrategyReport> {
    if cfg.epochs == 0 {
        return Err(Error::InvalidConfig("epochs must be >= 1".into()));
    }
    if data.train.is_empty() {
        return Err(Error::InvalidConfig("training split is empty".into()));
    }
    let batch_size = cfg.batch_size.max(2).min(data.train.len());
    let mut opt = Optimizer::new(model, cfg.optimizer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_heads = model.num_heads();
    let mut rows = Vec::with_capacity(cfg.epochs);
    let mut ratio_traces = Vec::new();

    // fixed held-out measurement batch for ratio traces
    let measure = cfg.measure_ratios.then(|| {
        let take = cfg.measurement_batch.clamp(2, data.test.len().max(2));
        data.test.slice(0, take.min(data.test.len()))
    });

    let mut indices: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = lr_at_epoch(cfg.optimizer.base_lr, epoch, cfg.epochs);
        indices.shuffle(&mut rng);

        let mut loss_acc = vec![0.0; n_heads];
        let mut correct_acc = vec![0usize; n_heads];
        let mut examples = 0usize;
        let mut fwd = 0usize;
        let mut bwd = 0usize;
        let mut iterations = 0usize;

        for chunk in indices.chunks(batch_size) {
            if chunk.len() < 2 {
                continue; // batchnorm needs at least two samples
            }
            let (batch, labels) = data.train.gather(chunk);
            let stats =
                run_step(model, &mut opt, &batch, &labels, lr, cfg).map_err(|e| match e {
                    Error::Divergence { layer, context } => Error::TrainingDiverged {
                        epoch: epoch + 1,
                        iteration: iterations + 1,
                        detail: format!("non-finite activation at layer {layer}{context}"),
                    },
                    other => other,
                })?;
            for k in 0..n_heads {
                loss_acc[k] += stats.head_losses[k] * stats.examples as f64;
                correct_acc[k] += stats.head_correct[k];
            }
            examples += stats.examples;
            fwd += stats.forward_passes;
            bwd += stats.backward_passes;
            iterations += 1;
        }

        let test_err = test_errors(model, &data.test, 256).map_err(|e| match e {
            Error::Divergence { layer, context } => Error::TrainingDiverged {
                epoch: epoch + 1,
                iteration: iterations,
                detail: format!(
                    "non-finite activation at layer {layer}{context} during evaluation"
                ),
            },
            other => other,
        })?;
        let train_loss: Vec<f64> = loss_acc.iter().map(|l| l / examples as f64).collect();
        let train_err: Vec<f64> = correct_acc
            .iter()
            .map(|&c| 100.0 * (examples - c) as f64 / examples as f64)
            .collect();

        if let Some((mbatch, mlabels)) = &measure {
            ratio_traces.push(supervision_ratio(
                model,
                mbatch,
                mlabels,
                cfg.strategy,
                epoch + 1,
            )?);
        }

        rows.push(EpochRow {
            epoch: epoch + 1,
            lr,
            train_loss,
            train_err,
            test_err,
            seconds: started.elapsed().as_secs_f64(),
            forward_passes: fwd,
            backward_passes: bwd,
        });
    }

    Ok(StrategyReport {
        strategy: cfg.strategy,
        rows,
        ratio_traces,
    })
}

fn run_step<T: Element>(
    model: &mut Model<T>,
    opt: &mut Optimizer<T>,
    batch: &Tensor<T>,
    labels: &[usize],
    lr: f64,
    cfg: &TrainConfig,
) -> Result<StepStats> {
    match cfg.strategy {
        Strategy::Plain => step_plain(model, opt, batch, labels, lr),
        Strategy::Joint => step_joint(model, opt, batch, labels, lr),
        Strategy::Pairwise => step_pairwise(model, opt, batch, labels, lr, cfg.head_order),
        Strategy::Multipath => step_multipath(model, opt, batch, labels, lr, cfg.head_order),
    }
}
