//! Model topology: a residual stack with scaled shortcuts and K+1 output
//! heads (global average pool + fully connected) at configured layer indices.
//!
//! Layer `l` maps `x_{l-1} -> x_l` through one residual unit
//! `y = lambda * shortcut(x) + F(x)`, `x' = h(y)`, where `F` is
//! conv3x3 -> batchnorm (post ordering) or batchnorm -> relu -> conv3x3
//! (pre ordering) and `h` is ReLU unless the identity-activation analysis
//! flag is set. Stage transitions downsample with a stride-2 projection
//! shortcut.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use crate::ops::BnMode as Mode;
use crate::ops::{
    batchnorm_backward, batchnorm_forward_pure, batchnorm_update_running, conv2d_backward,
    conv2d_forward, fc_backward, fc_forward, global_avg_pool_backward, global_avg_pool_forward,
    relu_backward, relu_forward, softmax_xent_backward, softmax_xent_forward, BatchNormCache,
    BatchNormParams, Conv2dParams, FcParams,
};
use crate::tensor::{Element, Tensor};

pub const GAMMA_FLOOR: f64 = 0.01;

/// Residual-block activation ordering.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationOrdering {
    #[default]
    Post,
    Pre,
}

fn default_min_head_position() -> usize {
    10
}
fn default_lambda() -> f64 {
    1.0
}
fn default_nu() -> f64 {
    2.0
}
fn default_in_channels() -> usize {
    1
}

/// Topology description. `head_positions` must be strictly increasing and
/// end at `depth`; every earlier (auxiliary) position must be at least
/// `min_head_position` — heads on very shallow layers hurt training, so
/// placing one there requires an explicit override.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub stage_channels: Vec<usize>,
    /// Blocks per stage; derived near-evenly from `depth` when absent.
    #[serde(default)]
    pub stage_blocks: Option<Vec<usize>>,
    /// Scalar on the shortcut branch; 0 degenerates to a plain network.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    pub head_positions: Vec<usize>,
    /// Head-weight decay exponent; weight of head k is
    /// `max(0.01, (L_k / L)^nu)`, the final head always weighs 1.
    #[serde(default = "default_nu")]
    pub nu: f64,
    pub num_classes: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default)]
    pub activation_ordering: ActivationOrdering,
    /// Analysis mode: h(x) = x instead of ReLU.
    #[serde(default)]
    pub identity_activation: bool,
    #[serde(default = "default_min_head_position")]
    pub min_head_position: usize,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::InvalidConfig("depth must be positive".into()));
        }
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return Err(Error::InvalidConfig(
                "stage_channels must be non-empty positive widths".into(),
            ));
        }
        if let Some(blocks) = &self.stage_blocks {
            if blocks.len() != self.stage_channels.len() {
                return Err(Error::InvalidConfig(format!(
                    "stage_blocks has {} entries for {} stages",
                    blocks.len(),
                    self.stage_channels.len()
                )));
            }
            if blocks.iter().sum::<usize>() != self.depth {
                return Err(Error::InvalidConfig(format!(
                    "stage_blocks sum {} != depth {}",
                    blocks.iter().sum::<usize>(),
                    self.depth
                )));
            }
            if blocks.contains(&0) {
                return Err(Error::InvalidConfig(
                    "stage_blocks entries must be positive".into(),
                ));
            }
        } else if self.stage_channels.len() > self.depth {
            return Err(Error::InvalidConfig(format!(
                "{} stages cannot fit in depth {}",
                self.stage_channels.len(),
                self.depth
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidConfig(format!(
                "lambda must lie in [0,1], got {}",
                self.lambda
            )));
        }
        if self.nu < 0.0 || !self.nu.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "nu must be finite and >= 0, got {}",
                self.nu
            )));
        }
        if self.head_positions.is_empty() {
            return Err(Error::InvalidConfig("at least one head required".into()));
        }
        if !self.head_positions.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidConfig(format!(
                "head_positions must be strictly increasing, got {:?}",
                self.head_positions
            )));
        }
        let last = *self.head_positions.last().unwrap();
        if last != self.depth {
            return Err(Error::InvalidConfig(format!(
                "last head position {last} must equal depth {}",
                self.depth
            )));
        }
        let aux = &self.head_positions[..self.head_positions.len() - 1];
        if let Some(&bad) = aux.iter().find(|&&p| p < self.min_head_position) {
            return Err(Error::InvalidConfig(format!(
                "auxiliary head at layer {bad} is below the minimum position {}; \
                 outputs on very shallow layers degrade training (override \
                 min_head_position to allow this deliberately)",
                self.min_head_position
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("num_classes must be >= 2".into()));
        }
        if self.in_channels == 0 {
            return Err(Error::InvalidConfig("in_channels must be positive".into()));
        }
        Ok(())
    }

    /// Blocks per stage, derived near-evenly when not pinned.
    pub fn resolved_stage_blocks(&self) -> Vec<usize> {
        if let Some(blocks) = &self.stage_blocks {
            return blocks.clone();
        }
        let stages = self.stage_channels.len();
        let base = self.depth / stages;
        let rem = self.depth % stages;
        (0..stages).map(|i| base + usize::from(i < rem)).collect()
    }

    pub fn num_heads(&self) -> usize {
        self.head_positions.len()
    }
}

/// Per-head loss weights: `max(0.01, (L_k/L)^nu)` for auxiliary heads, 1 for
/// the final head.
pub fn head_weights(config: &ModelConfig) -> Result<Vec<f64>> {
    if config.nu < 0.0 || !config.nu.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "nu must be finite and >= 0, got {}",
            config.nu
        )));
    }
    let total = config.depth as f64;
    let mut weights: Vec<f64> = config.head_positions[..config.num_heads() - 1]
        .iter()
        .map(|&pos| (pos as f64 / total).powf(config.nu).max(GAMMA_FLOOR))
        .collect();
    weights.push(1.0);
    Ok(weights)
}

/// Static layout of one residual unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockPlan {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub projection: bool,
}

fn block_plans(config: &ModelConfig) -> Vec<BlockPlan> {
    let stage_blocks = config.resolved_stage_blocks();
    let mut plans = Vec::with_capacity(config.depth);
    let mut in_ch = config.in_channels;
    for (stage, &count) in stage_blocks.iter().enumerate() {
        for b in 0..count {
            let out_ch = config.stage_channels[stage];
            let stride = if stage > 0 && b == 0 { 2 } else { 1 };
            plans.push(BlockPlan {
                in_channels: in_ch,
                out_channels: out_ch,
                stride,
                projection: in_ch != out_ch || stride != 1,
            });
            in_ch = out_ch;
        }
    }
    plans
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T: Element> {
    pub conv: Conv2dParams<T>,
    pub bn: BatchNormParams<T>,
    /// 1x1 projection on the shortcut branch when shape changes.
    pub shortcut: Option<Conv2dParams<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T: Element> {
    pub fc: FcParams<T>,
}

/// A realized parameter set over a [`ModelConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Element> {
    pub config: ModelConfig,
    pub blocks: Vec<BlockParams<T>>,
    pub heads: Vec<HeadParams<T>>,
    /// Loss weights per head, last entry 1.
    pub gamma: Vec<f64>,
}

fn he_tensor<T: Element>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(dist.sample(rng))).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("shape matches data")
}

/// Builds a model with He-initialized parameters; deterministic given
/// `config.seed`.
pub fn build_model<T: Element>(config: &ModelConfig) -> Result<Model<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let plans = block_plans(config);
    let mut blocks = Vec::with_capacity(plans.len());
    for plan in &plans {
        let conv = Conv2dParams {
            weights: he_tensor(
                &mut rng,
                &[plan.out_channels, plan.in_channels, 3, 3],
                plan.in_channels * 9,
            ),
            bias: Tensor::zeros(vec![plan.out_channels]),
            stride: plan.stride,
            padding: 1,
        };
        let shortcut = plan.projection.then(|| Conv2dParams {
            weights: he_tensor(
                &mut rng,
                &[plan.out_channels, plan.in_channels, 1, 1],
                plan.in_channels,
            ),
            bias: Tensor::zeros(vec![plan.out_channels]),
            stride: plan.stride,
            padding: 0,
        });
        // post ordering normalizes the conv output, pre ordering the block input
        let bn_channels = match config.activation_ordering {
            ActivationOrdering::Post => plan.out_channels,
            ActivationOrdering::Pre => plan.in_channels,
        };
        blocks.push(BlockParams {
            conv,
            bn: BatchNormParams::new(bn_channels),
            shortcut,
        });
    }
    let mut heads = Vec::with_capacity(config.num_heads());
    for &pos in &config.head_positions {
        let ch = plans[pos - 1].out_channels;
        heads.push(HeadParams {
            fc: FcParams {
                weights: he_tensor(&mut rng, &[config.num_classes, ch], ch),
                bias: Tensor::zeros(vec![config.num_classes]),
            },
        });
    }
    let gamma = head_weights(config)?;
    Ok(Model {
        config: config.clone(),
        blocks,
        heads,
        gamma,
    })
}

/// Per-block saved state needed by the backward pass.
#[derive(Clone, Debug)]
pub struct BlockTrace<T: Element> {
    pub bn: BatchNormCache<T>,
    /// Pre ordering only: the rectified conv input.
    pub conv_in: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct HeadTrace<T: Element> {
    pub pooled: Tensor<T>,
    pub probs: Tensor<T>,
    pub logits: Tensor<T>,
    pub loss: T,
}

/// Everything one forward pass produced: all layer activations plus
/// per-head logits, probabilities, and losses. Immutable once built; the
/// multipath strategy runs all of its backward passes over one of these.
#[derive(Clone, Debug)]
pub struct ForwardCache<T: Element> {
    pub mode: Mode,
    pub input: Tensor<T>,
    /// `activations[i]` is `x_{i+1}`, the output of block `i+1`.
    pub activations: Vec<Tensor<T>>,
    pub block_traces: Vec<BlockTrace<T>>,
    /// Indexed by head; `None` when a partial forward skipped the head.
    pub heads: Vec<Option<HeadTrace<T>>>,
    pub labels: Vec<usize>,
}

impl<T: Element> ForwardCache<T> {
    pub fn head(&self, k: usize) -> &HeadTrace<T> {
        self.heads[k].as_ref().expect("head computed in this pass")
    }

    pub fn head_losses(&self) -> Vec<Option<T>> {
        self.heads
            .iter()
            .map(|h| h.as_ref().map(|t| t.loss))
            .collect()
    }
}

/// A head term for the backward engine: which head, with what loss weight.
#[derive(Clone, Copy, Debug)]
pub struct HeadTerm<T> {
    pub head: usize,
    pub weight: T,
}

#[derive(Clone, Debug)]
pub struct BlockGrads<T: Element> {
    pub conv_w: Tensor<T>,
    pub conv_b: Tensor<T>,
    pub bn_gamma: Tensor<T>,
    pub bn_beta: Tensor<T>,
    pub shortcut_w: Option<Tensor<T>>,
    pub shortcut_b: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct HeadGrads<T: Element> {
    pub fc_w: Tensor<T>,
    pub fc_b: Tensor<T>,
}

/// Gradients from one backward pass. `blocks[i]` belongs to block `i+1`;
/// only blocks at or below the deepest requested head are present, and only
/// the requested heads appear — the optimizer must not touch anything else.
#[derive(Clone, Debug)]
pub struct Gradients<T: Element> {
    pub blocks: Vec<BlockGrads<T>>,
    pub heads: Vec<(usize, HeadGrads<T>)>,
}

/// Activation-gradient norms recorded during a backward pass, used by the
/// supervision-ratio probe. Norms are Frobenius per sample, averaged over
/// the batch.
#[derive(Clone, Debug)]
pub struct NormRecord<T> {
    /// `layer_norms[i]` is the gradient norm at `x_{i+1}`; `None` where the
    /// pass did not reach.
    pub layer_norms: Vec<Option<T>>,
    /// Per head: the norm of the gradient that head injects at its
    /// attachment layer (already scaled by the head's term weight).
    pub head_injections: Vec<(usize, T)>,
}

impl<T: Element> Model<T> {
    pub fn depth(&self) -> usize {
        self.config.depth
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn parameter_count(&self) -> usize {
        let blocks: usize = self
            .blocks
            .iter()
            .map(|b| {
                b.conv.weights.len()
                    + b.conv.bias.len()
                    + b.bn.gamma.len()
                    + b.bn.beta.len()
                    + b.shortcut
                        .as_ref()
                        .map(|s| s.weights.len() + s.bias.len())
                        .unwrap_or(0)
            })
            .sum();
        let heads: usize = self
            .heads
            .iter()
            .map(|h| h.fc.weights.len() + h.fc.bias.len())
            .sum();
        blocks + heads
    }

    fn lambda(&self) -> T {
        T::from_f64(self.config.lambda)
    }

    fn apply_h(&self, y: Tensor<T>) -> Tensor<T> {
        if self.config.identity_activation {
            y
        } else {
            relu_forward(&y)
        }
    }

    /// Full forward pass. `Train` mode folds batch statistics into the
    /// batchnorm running estimates; `Measure` and `Eval` leave the model
    /// bitwise untouched.
    pub fn forward(
        &mut self,
        batch: &Tensor<T>,
        labels: &[usize],
        mode: Mode,
    ) -> Result<ForwardCache<T>> {
        self.forward_partial(batch, labels, mode, self.depth(), None)
    }

    /// Forward through blocks `1..=upto`, evaluating only heads listed in
    /// `head_filter` (all heads at or below `upto` when `None`).
    pub fn forward_partial(
        &mut self,
        batch: &Tensor<T>,
        labels: &[usize],
        mode: Mode,
        upto: usize,
        head_filter: Option<&[usize]>,
    ) -> Result<ForwardCache<T>> {
        let cache = forward_core(self, batch, labels, mode, upto, head_filter)?;
        if mode == Mode::Train {
            for (block_idx, trace) in cache.block_traces.iter().enumerate() {
                batchnorm_update_running(&mut self.blocks[block_idx].bn, &trace.bn);
            }
        }
        Ok(cache)
    }

    /// Read-only forward (`Eval` or `Measure` mode).
    pub fn forward_ro(
        &self,
        batch: &Tensor<T>,
        labels: &[usize],
        mode: Mode,
    ) -> Result<ForwardCache<T>> {
        assert!(mode != Mode::Train, "Train mode requires forward()");
        forward_core(self, batch, labels, mode, self.depth(), None)
    }

    /// Read-only partial forward (`Eval` or `Measure` mode).
    pub fn forward_partial_ro(
        &self,
        batch: &Tensor<T>,
        labels: &[usize],
        mode: Mode,
        upto: usize,
        head_filter: Option<&[usize]>,
    ) -> Result<ForwardCache<T>> {
        assert!(mode != Mode::Train, "Train mode requires forward_partial()");
        forward_core(self, batch, labels, mode, upto, head_filter)
    }

    /// Backward of the weighted sum of the given head losses through a
    /// cache, using the model's current parameters. Gradients cover exactly
    /// the requested heads and the trunk blocks at or below the deepest of
    /// them. Optionally records activation-gradient norms per layer.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        terms: &[HeadTerm<T>],
        record_norms: bool,
    ) -> Result<(Gradients<T>, Option<NormRecord<T>>)> {
        // zero-weight heads contribute nothing; dropping them keeps e.g. a
        // joint step with all-zero auxiliary weights identical to a plain step
        let terms: Vec<HeadTerm<T>> = terms
            .iter()
            .copied()
            .filter(|t| t.weight != T::zero())
            .collect();
        if terms.is_empty() {
            return Err(Error::InvalidConfig(
                "backward with no effective head terms".into(),
            ));
        }
        let positions = &self.config.head_positions;
        let mut by_position: Vec<Option<(usize, T)>> = vec![None; self.depth() + 1];
        let mut max_pos = 0;
        for term in &terms {
            if term.head >= self.num_heads() {
                return Err(Error::InvalidConfig(format!(
                    "head index {} out of range",
                    term.head
                )));
            }
            if cache.heads[term.head].is_none() {
                return Err(Error::InvalidConfig(format!(
                    "head {} was not computed in this forward pass",
                    term.head
                )));
            }
            let pos = positions[term.head];
            if pos > cache.activations.len() {
                return Err(Error::InvalidConfig(format!(
                    "cache covers {} layers, head {} sits at {}",
                    cache.activations.len(),
                    term.head,
                    pos
                )));
            }
            if by_position[pos].is_some() {
                return Err(Error::InvalidConfig(format!(
                    "duplicate backward term for head {}",
                    term.head
                )));
            }
            by_position[pos] = Some((term.head, term.weight));
            max_pos = max_pos.max(pos);
        }

        let mut block_grads: Vec<Option<BlockGrads<T>>> = (0..max_pos).map(|_| None).collect();
        let mut head_grads: Vec<(usize, HeadGrads<T>)> = Vec::with_capacity(terms.len());
        let mut layer_norms: Vec<Option<T>> = vec![None; self.depth()];
        let mut head_injections: Vec<(usize, T)> = Vec::with_capacity(terms.len());

        let mut grad: Option<Tensor<T>> = None;
        for l in (1..=max_pos).rev() {
            if let Some((head_idx, weight)) = by_position[l] {
                let trace = cache.head(head_idx);
                let x_l = &cache.activations[l - 1];
                let dlogits = softmax_xent_backward(&trace.probs, &cache.labels, weight)?;
                let (dpooled, fc_g) =
                    fc_backward(&trace.pooled, &self.heads[head_idx].fc, &dlogits)?;
                let dx_head = global_avg_pool_backward(x_l.shape(), &dpooled)?;
                head_grads.push((
                    head_idx,
                    HeadGrads {
                        fc_w: fc_g.weights,
                        fc_b: fc_g.bias,
                    },
                ));
                if record_norms {
                    head_injections.push((head_idx, dx_head.batch_mean_frobenius()));
                }
                grad = Some(match grad {
                    None => dx_head,
                    Some(mut g) => {
                        for (a, &b) in g.data_mut().iter_mut().zip(dx_head.data()) {
                            *a = *a + b;
                        }
                        g
                    }
                });
            }
            let g = grad.take().expect("gradient present below deepest head");
            if record_norms {
                layer_norms[l - 1] = Some(g.batch_mean_frobenius());
            }
            let (dx_prev, bg) = self.block_backward(l, cache, g)?;
            block_grads[l - 1] = Some(bg);
            grad = Some(dx_prev);
        }

        head_grads.sort_by_key(|(idx, _)| *idx);
        let grads = Gradients {
            blocks: block_grads
                .into_iter()
                .map(|g| g.expect("filled"))
                .collect(),
            heads: head_grads,
        };
        let norms = record_norms.then_some(NormRecord {
            layer_norms,
            head_injections,
        });
        Ok((grads, norms))
    }

    /// Backward through block `l`, returning the gradient at `x_{l-1}`.
    fn block_backward(
        &self,
        l: usize,
        cache: &ForwardCache<T>,
        dx_l: Tensor<T>,
    ) -> Result<(Tensor<T>, BlockGrads<T>)> {
        let block = &self.blocks[l - 1];
        let trace = &cache.block_traces[l - 1];
        let x_prev = if l == 1 {
            &cache.input
        } else {
            &cache.activations[l - 2]
        };
        let lambda = self.lambda();

        let (dy, d_main, conv_g, bn_g);
        match self.config.activation_ordering {
            ActivationOrdering::Post => {
                // x' = h(lambda*s(x) + bn(conv(x)))
                dy = if self.config.identity_activation {
                    dx_l
                } else {
                    relu_backward(&cache.activations[l - 1], &dx_l)?
                };
                let (d_conv_out, bn_grads) = batchnorm_backward(&block.bn, &trace.bn, &dy)?;
                let (dx_main, conv_grads) = conv2d_backward(x_prev, &block.conv, &d_conv_out)?;
                d_main = dx_main;
                conv_g = conv_grads;
                bn_g = bn_grads;
            }
            ActivationOrdering::Pre => {
                // x' = lambda*s(x) + conv(relu(bn(x)))
                dy = dx_l;
                let conv_in = trace
                    .conv_in
                    .as_ref()
                    .expect("pre ordering caches conv input");
                let (d_conv_in, conv_grads) = conv2d_backward(conv_in, &block.conv, &dy)?;
                let d_rect = if self.config.identity_activation {
                    d_conv_in
                } else {
                    relu_backward(conv_in, &d_conv_in)?
                };
                let (dx_main, bn_grads) = batchnorm_backward(&block.bn, &trace.bn, &d_rect)?;
                d_main = dx_main;
                conv_g = conv_grads;
                bn_g = bn_grads;
            }
        }

        // shortcut branch: y += lambda * s(x)
        let mut dx_prev = d_main;
        let mut shortcut_w = None;
        let mut shortcut_b = None;
        if lambda != T::zero() {
            match &block.shortcut {
                Some(proj) => {
                    let mut d_proj_out = dy.clone();
                    for v in d_proj_out.data_mut() {
                        *v = *v * lambda;
                    }
                    let (dx_short, proj_g) = conv2d_backward(x_prev, proj, &d_proj_out)?;
                    for (a, &b) in dx_prev.data_mut().iter_mut().zip(dx_short.data()) {
                        *a = *a + b;
                    }
                    shortcut_w = Some(proj_g.weights);
                    shortcut_b = Some(proj_g.bias);
                }
                None => {
                    for (a, &b) in dx_prev.data_mut().iter_mut().zip(dy.data()) {
                        *a = *a + lambda * b;
                    }
                }
            }
        } else if let Some(proj) = &block.shortcut {
            // lambda = 0: projection receives no gradient but stays addressable
            shortcut_w = Some(Tensor::zeros_like(&proj.weights));
            shortcut_b = Some(Tensor::zeros_like(&proj.bias));
        }

        Ok((
            dx_prev,
            BlockGrads {
                conv_w: conv_g.weights,
                conv_b: conv_g.bias,
                bn_gamma: bn_g.gamma,
                bn_beta: bn_g.beta,
                shortcut_w,
                shortcut_b,
            },
        ))
    }

    /// Visits every trainable parameter tensor (not running statistics) in a
    /// fixed order: per block conv weight/bias, bn gamma/beta, projection
    /// weight/bias; then per head fc weight/bias.
    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&mut Tensor<T>)) {
        for block in &mut self.blocks {
            f(&mut block.conv.weights);
            f(&mut block.conv.bias);
            f(&mut block.bn.gamma);
            f(&mut block.bn.beta);
            if let Some(proj) = block.shortcut.as_mut() {
                f(&mut proj.weights);
                f(&mut proj.bias);
            }
        }
        for head in &mut self.heads {
            f(&mut head.fc.weights);
            f(&mut head.fc.bias);
        }
    }

    /// Standalone sub-model ending at head `k` (0-based), sharing no state
    /// with the parent.
    pub fn truncate(&self, k: usize) -> Result<Model<T>> {
        if k >= self.num_heads() {
            return Err(Error::InvalidConfig(format!(
                "truncate: head {k} out of range (model has {})",
                self.num_heads()
            )));
        }
        let position = self.config.head_positions[k];
        let parent_blocks = self.config.resolved_stage_blocks();
        let mut stage_blocks = Vec::new();
        let mut stage_channels = Vec::new();
        let mut start = 0usize;
        for (stage, &count) in parent_blocks.iter().enumerate() {
            if position > start {
                let take = count.min(position - start);
                stage_blocks.push(take);
                stage_channels.push(self.config.stage_channels[stage]);
            }
            start += count;
        }
        let config = ModelConfig {
            depth: position,
            stage_channels,
            stage_blocks: Some(stage_blocks),
            head_positions: vec![position],
            min_head_position: self.config.min_head_position.min(position),
            ..self.config.clone()
        };
        config.validate()?;
        Ok(Model {
            config,
            blocks: self.blocks[..position].to_vec(),
            heads: vec![self.heads[k].clone()],
            gamma: vec![1.0],
        })
    }
}

fn forward_core<T: Element>(
    model: &Model<T>,
    batch: &Tensor<T>,
    labels: &[usize],
    mode: Mode,
    upto: usize,
    head_filter: Option<&[usize]>,
) -> Result<ForwardCache<T>> {
    let shape = batch.shape();
    if shape.len() != 4 || shape[1] != model.config.in_channels {
        return Err(Error::shape(
            "forward",
            format!(
                "batch must be [B,{},H,W], got {shape:?}",
                model.config.in_channels
            ),
        ));
    }
    if upto == 0 || upto > model.depth() {
        return Err(Error::InvalidConfig(format!(
            "forward upto {upto} outside 1..={}",
            model.depth()
        )));
    }
    let lambda = model.lambda();
    let identity_h = model.config.identity_activation;

    let mut activations: Vec<Tensor<T>> = Vec::with_capacity(upto);
    let mut traces: Vec<BlockTrace<T>> = Vec::with_capacity(upto);

    let mut x = batch.clone();
    for l in 1..=upto {
        let block = &model.blocks[l - 1];
        let (y, trace) = match model.config.activation_ordering {
            ActivationOrdering::Post => {
                let t = conv2d_forward(&x, &block.conv)?;
                let (u, bn_cache) = batchnorm_forward_pure(&t, &block.bn, mode)?;
                let mut y = u;
                add_shortcut(&mut y, &x, block, lambda)?;
                (
                    model.apply_h(y),
                    BlockTrace {
                        bn: bn_cache,
                        conv_in: None,
                    },
                )
            }
            ActivationOrdering::Pre => {
                let (u, bn_cache) = batchnorm_forward_pure(&x, &block.bn, mode)?;
                let v = if identity_h { u } else { relu_forward(&u) };
                let t = conv2d_forward(&v, &block.conv)?;
                let mut y = t;
                add_shortcut(&mut y, &x, block, lambda)?;
                (
                    y,
                    BlockTrace {
                        bn: bn_cache,
                        conv_in: Some(v),
                    },
                )
            }
        };
        if !y.is_finite() {
            return Err(Error::Divergence {
                layer: l,
                context: String::new(),
            });
        }
        traces.push(trace);
        activations.push(y.clone());
        x = y;
    }

    let mut heads: Vec<Option<HeadTrace<T>>> = vec![None; model.num_heads()];
    for (k, &pos) in model.config.head_positions.iter().enumerate() {
        if pos > upto {
            continue;
        }
        if let Some(filter) = head_filter {
            if !filter.contains(&k) {
                continue;
            }
        }
        let pooled = global_avg_pool_forward(&activations[pos - 1])?;
        let logits = fc_forward(&pooled, &model.heads[k].fc)?;
        let (loss, probs) = softmax_xent_forward(&logits, labels)?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                layer: pos,
                context: format!(" (loss of head {k})"),
            });
        }
        heads[k] = Some(HeadTrace {
            pooled,
            probs,
            logits,
            loss,
        });
    }

    Ok(ForwardCache {
        mode,
        input: batch.clone(),
        activations,
        block_traces: traces,
        heads,
        labels: labels.to_vec(),
    })
}

fn add_shortcut<T: Element>(
    y: &mut Tensor<T>,
    x: &Tensor<T>,
    block: &BlockParams<T>,
    lambda: T,
) -> Result<()> {
    if lambda == T::zero() {
        return Ok(());
    }
    match &block.shortcut {
        Some(proj) => {
            let s = conv2d_forward(x, proj)?;
            for (a, &b) in y.data_mut().iter_mut().zip(s.data()) {
                *a = *a + lambda * b;
            }
        }
        None => {
            if y.shape() != x.shape() {
                return Err(Error::shape(
                    "shortcut",
                    format!("identity shortcut {:?} vs {:?}", x.shape(), y.shape()),
                ));
            }
            for (a, &b) in y.data_mut().iter_mut().zip(x.data()) {
                *a = *a + lambda * b;
            }
        }
    }
    Ok(())
}
