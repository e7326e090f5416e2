//! Spatial batch normalization over `[B,C,H,W]` (per-channel statistics).

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// How batch statistics are sourced.
///
/// `Train` normalizes by batch statistics and updates the running estimates.
/// `Measure` uses batch statistics without touching running state (used by
/// the supervision-ratio probes, which must be side-effect free). `Eval`
/// normalizes by the stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Measure,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<T: Element> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    /// Added to the variance before the square root. Default 1e-5.
    pub epsilon: T,
    /// Weight on the OLD running estimate: `r = m*r + (1-m)*batch`. Default 0.9.
    pub momentum: T,
}

impl<T: Element> BatchNormParams<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormParams {
            gamma: Tensor::filled(vec![channels], T::one()),
            beta: Tensor::zeros(vec![channels]),
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::filled(vec![channels], T::one()),
            epsilon: T::from_f64(1e-5),
            momentum: T::from_f64(0.9),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Normalized activations and the terms the backward pass needs.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T: Element> {
    pub x_hat: Tensor<T>,
    pub inv_std: Vec<T>,
    /// True when batch statistics were used (Train/Measure).
    pub batch_stats: bool,
    /// Batch statistics for deferred running-stat updates (empty in Eval).
    pub batch_means: Vec<T>,
    pub batch_vars: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct BatchNormGrads<T: Element> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

fn check_input<T: Element>(
    input: &Tensor<T>,
    params: &BatchNormParams<T>,
) -> Result<(usize, usize, usize)> {
    let shape = input.shape();
    if shape.len() != 4 {
        return Err(Error::shape(
            "batchnorm",
            format!("input must be [B,C,H,W], got {shape:?}"),
        ));
    }
    if shape[1] != params.channels() {
        return Err(Error::shape(
            "batchnorm",
            format!(
                "input channels {} vs params {}",
                shape[1],
                params.channels()
            ),
        ));
    }
    Ok((shape[0], shape[1], shape[2] * shape[3]))
}

/// Forward pass that updates running statistics in `Train` mode.
pub fn batchnorm_forward<T: Element>(
    input: &Tensor<T>,
    params: &mut BatchNormParams<T>,
    mode: BnMode,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let (out, cache) = batchnorm_forward_pure(input, params, mode)?;
    if mode == BnMode::Train {
        batchnorm_update_running(params, &cache);
    }
    Ok((out, cache))
}

/// Folds the cached batch statistics into the running estimates.
pub fn batchnorm_update_running<T: Element>(
    params: &mut BatchNormParams<T>,
    cache: &BatchNormCache<T>,
) {
    debug_assert!(cache.batch_stats);
    let mom = params.momentum;
    let keep = T::one() - mom;
    for ci in 0..params.channels() {
        let rm = params.running_mean.data_mut();
        rm[ci] = mom * rm[ci] + keep * cache.batch_means[ci];
        let rv = params.running_var.data_mut();
        rv[ci] = mom * rv[ci] + keep * cache.batch_vars[ci];
    }
}

/// Forward pass that never mutates `params`; `Train` and `Measure` both use
/// batch statistics here, the caller decides whether to fold them in.
pub fn batchnorm_forward_pure<T: Element>(
    input: &Tensor<T>,
    params: &BatchNormParams<T>,
    mode: BnMode,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let (b, c, hw) = check_input(input, params)?;
    if mode != BnMode::Eval && b < 2 {
        return Err(Error::InvalidConfig(format!(
            "batchnorm with batch statistics requires batch size >= 2, got {b}"
        )));
    }
    let x = input.data();
    let n = b * hw;
    let n_t = T::from_f64(n as f64);

    let (means, vars) = match mode {
        BnMode::Eval => (
            params.running_mean.data().to_vec(),
            params.running_var.data().to_vec(),
        ),
        _ => {
            let mut means = vec![T::zero(); c];
            let mut vars = vec![T::zero(); c];
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * hw;
                    let mut acc = T::zero();
                    for &v in &x[base..base + hw] {
                        acc = acc + v;
                    }
                    means[ci] = means[ci] + acc;
                }
            }
            for m in means.iter_mut() {
                *m = *m / n_t;
            }
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * hw;
                    let mut acc = T::zero();
                    for &v in &x[base..base + hw] {
                        let d = v - means[ci];
                        acc = acc + d * d;
                    }
                    vars[ci] = vars[ci] + acc;
                }
            }
            for v in vars.iter_mut() {
                *v = *v / n_t;
            }
            (means, vars)
        }
    };

    let inv_std: Vec<T> = vars
        .iter()
        .map(|&v| (v + params.epsilon).sqrt().recip())
        .collect();

    let mut x_hat = Tensor::zeros_like(input);
    let mut out = Tensor::zeros_like(input);
    {
        let xh = x_hat.data_mut();
        let od = out.data_mut();
        let gamma = params.gamma.data();
        let beta = params.beta.data();
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                let (m, is, g, be) = (means[ci], inv_std[ci], gamma[ci], beta[ci]);
                for i in base..base + hw {
                    let h = (x[i] - m) * is;
                    xh[i] = h;
                    od[i] = g * h + be;
                }
            }
        }
    }

    let batch_stats = mode != BnMode::Eval;
    Ok((
        out,
        BatchNormCache {
            x_hat,
            inv_std,
            batch_stats,
            batch_means: if batch_stats { means } else { Vec::new() },
            batch_vars: if batch_stats { vars } else { Vec::new() },
        },
    ))
}

pub fn batchnorm_backward<T: Element>(
    params: &BatchNormParams<T>,
    cache: &BatchNormCache<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, BatchNormGrads<T>)> {
    if grad_out.shape() != cache.x_hat.shape() {
        return Err(Error::shape(
            "batchnorm_backward",
            format!(
                "grad_out {:?} vs cached {:?}",
                grad_out.shape(),
                cache.x_hat.shape()
            ),
        ));
    }
    let shape = grad_out.shape();
    let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let n = b * hw;
    let n_t = T::from_f64(n as f64);

    let go = grad_out.data();
    let xh = cache.x_hat.data();
    let gamma = params.gamma.data();

    let mut sum_go = vec![T::zero(); c];
    let mut sum_go_xh = vec![T::zero(); c];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * hw;
            let mut a0 = T::zero();
            let mut a1 = T::zero();
            for i in base..base + hw {
                a0 = a0 + go[i];
                a1 = a1 + go[i] * xh[i];
            }
            sum_go[ci] = sum_go[ci] + a0;
            sum_go_xh[ci] = sum_go_xh[ci] + a1;
        }
    }

    let mut grad_in = Tensor::zeros_like(grad_out);
    {
        let gi = grad_in.data_mut();
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                let scale = gamma[ci] * cache.inv_std[ci];
                if cache.batch_stats {
                    let s0 = sum_go[ci] / n_t;
                    let s1 = sum_go_xh[ci] / n_t;
                    for i in base..base + hw {
                        gi[i] = scale * (go[i] - s0 - xh[i] * s1);
                    }
                } else {
                    for i in base..base + hw {
                        gi[i] = scale * go[i];
                    }
                }
            }
        }
    }

    Ok((
        grad_in,
        BatchNormGrads {
            gamma: Tensor::from_vec(vec![c], sum_go_xh)?,
            beta: Tensor::from_vec(vec![c], sum_go)?,
        },
    ))
}
