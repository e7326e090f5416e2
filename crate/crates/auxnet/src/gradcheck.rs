//! Finite-difference certification of every backward kernel.
//!
//! Each check builds a random 64-bit instance of one kernel, takes a scalar
//! objective (a fixed random projection of the kernel output, or the loss
//! itself for softmax cross-entropy), and compares the analytic backward
//! against central differences with step 1e-5. Failures are reported, never
//! thrown.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ops::{
    batchnorm_backward, batchnorm_forward, conv2d_backward, conv2d_forward, fc_backward,
    fc_forward, global_avg_pool_backward, global_avg_pool_forward, relu_backward, relu_forward,
    softmax_xent_backward, softmax_xent_forward, BatchNormParams, BnMode, Conv2dParams, FcParams,
};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// Kernels registered for certification.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelKind {
    Conv2d,
    BatchNorm,
    Fc,
    Relu,
    GlobalAvgPool,
    SoftmaxXent,
}

impl KernelKind {
    pub const ALL: [KernelKind; 6] = [
        KernelKind::Conv2d,
        KernelKind::BatchNorm,
        KernelKind::Fc,
        KernelKind::Relu,
        KernelKind::GlobalAvgPool,
        KernelKind::SoftmaxXent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KernelKind::Conv2d => "conv2d",
            KernelKind::BatchNorm => "batchnorm",
            KernelKind::Fc => "fc",
            KernelKind::Relu => "relu",
            KernelKind::GlobalAvgPool => "global_avg_pool",
            KernelKind::SoftmaxXent => "softmax_xent",
        }
    }

    /// Certification tolerance on the max relative error.
    pub fn tolerance(self) -> f64 {
        match self {
            // batch statistics couple every element; slightly looser
            KernelKind::BatchNorm => 1e-5,
            _ => 1e-6,
        }
    }
}

/// A concrete kernel instance to check.
#[derive(Clone, Debug)]
pub enum KernelCase {
    Conv2d {
        batch: usize,
        in_ch: usize,
        out_ch: usize,
        h: usize,
        w: usize,
        k: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        batch: usize,
        ch: usize,
        h: usize,
        w: usize,
    },
    Fc {
        batch: usize,
        in_dim: usize,
        out_dim: usize,
    },
    Relu {
        batch: usize,
        ch: usize,
        h: usize,
        w: usize,
    },
    GlobalAvgPool {
        batch: usize,
        ch: usize,
        h: usize,
        w: usize,
    },
    SoftmaxXent {
        batch: usize,
        classes: usize,
    },
}

impl KernelCase {
    pub fn kind(&self) -> KernelKind {
        match self {
            KernelCase::Conv2d { .. } => KernelKind::Conv2d,
            KernelCase::BatchNorm { .. } => KernelKind::BatchNorm,
            KernelCase::Fc { .. } => KernelKind::Fc,
            KernelCase::Relu { .. } => KernelKind::Relu,
            KernelCase::GlobalAvgPool { .. } => KernelKind::GlobalAvgPool,
            KernelCase::SoftmaxXent { .. } => KernelKind::SoftmaxXent,
        }
    }

    /// Draws a random small instance of the given kernel.
    pub fn random(kind: KernelKind, rng: &mut ChaCha8Rng) -> Self {
        match kind {
            KernelKind::Conv2d => {
                let k = if rng.gen_bool(0.5) { 1 } else { 3 };
                KernelCase::Conv2d {
                    batch: rng.gen_range(1..=3),
                    in_ch: rng.gen_range(1..=3),
                    out_ch: rng.gen_range(1..=3),
                    h: rng.gen_range(k..=6),
                    w: rng.gen_range(k..=6),
                    k,
                    stride: rng.gen_range(1..=2),
                    padding: rng.gen_range(0..=1),
                }
            }
            KernelKind::BatchNorm => KernelCase::BatchNorm {
                batch: rng.gen_range(2..=5),
                ch: rng.gen_range(1..=4),
                h: rng.gen_range(1..=3),
                w: rng.gen_range(1..=3),
            },
            KernelKind::Fc => KernelCase::Fc {
                batch: rng.gen_range(1..=4),
                in_dim: rng.gen_range(1..=6),
                out_dim: rng.gen_range(1..=5),
            },
            KernelKind::Relu => KernelCase::Relu {
                batch: rng.gen_range(1..=3),
                ch: rng.gen_range(1..=3),
                h: rng.gen_range(1..=4),
                w: rng.gen_range(1..=4),
            },
            KernelKind::GlobalAvgPool => KernelCase::GlobalAvgPool {
                batch: rng.gen_range(1..=3),
                ch: rng.gen_range(1..=4),
                h: rng.gen_range(1..=4),
                w: rng.gen_range(1..=4),
            },
            KernelKind::SoftmaxXent => KernelCase::SoftmaxXent {
                batch: rng.gen_range(1..=5),
                classes: rng.gen_range(2..=6),
            },
        }
    }
}

/// Outcome of one finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub kernel: &'static str,
    pub case: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn rel_err(a: f64, n: f64) -> f64 {
    if a.abs() < 1e-8 && n.abs() < 1e-8 {
        0.0
    } else {
        (a - n).abs() / a.abs().max(n.abs())
    }
}

/// One differentiable tensor plus its analytic gradient.
struct Term {
    value: Tensor<f64>,
    analytic: Tensor<f64>,
}

/// Central-difference comparison of all terms against an objective.
fn max_rel_err_fd(terms: &[Term], objective: impl Fn(&[Tensor<f64>]) -> f64) -> f64 {
    let mut worst = 0.0f64;
    let mut values: Vec<Tensor<f64>> = terms.iter().map(|t| t.value.clone()).collect();
    for (ti, term) in terms.iter().enumerate() {
        for ei in 0..term.value.len() {
            let orig = values[ti].data()[ei];
            values[ti].data_mut()[ei] = orig + FD_STEP;
            let plus = objective(&values);
            values[ti].data_mut()[ei] = orig - FD_STEP;
            let minus = objective(&values);
            values[ti].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(term.analytic.data()[ei], numeric));
        }
    }
    worst
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

/// Random projection used as the scalar objective; values bounded away from
/// zero so gradient magnitudes stay well scaled.
fn projection(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    rand_tensor(rng, shape, 0.5, 1.5)
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Runs one finite-difference check of a kernel instance.
pub fn grad_check(case: &KernelCase, seed: u64, tolerance: f64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_rel_err = match *case {
        KernelCase::Conv2d {
            batch,
            in_ch,
            out_ch,
            h,
            w,
            k,
            stride,
            padding,
        } => {
            let input = rand_tensor(&mut rng, &[batch, in_ch, h, w], -1.0, 1.0);
            let weights = rand_tensor(&mut rng, &[out_ch, in_ch, k, k], -1.0, 1.0);
            let bias = rand_tensor(&mut rng, &[out_ch], -0.5, 0.5);
            let params = Conv2dParams {
                weights: weights.clone(),
                bias: bias.clone(),
                stride,
                padding,
            };
            let out = conv2d_forward(&input, &params).unwrap();
            let r = projection(&mut rng, out.shape());
            let (gx, gp) = conv2d_backward(&input, &params, &r).unwrap();
            let terms = [
                Term {
                    value: input,
                    analytic: gx,
                },
                Term {
                    value: weights,
                    analytic: gp.weights,
                },
                Term {
                    value: bias,
                    analytic: gp.bias,
                },
            ];
            max_rel_err_fd(&terms, |vals| {
                let p = Conv2dParams {
                    weights: vals[1].clone(),
                    bias: vals[2].clone(),
                    stride,
                    padding,
                };
                dot(&conv2d_forward(&vals[0], &p).unwrap(), &r)
            })
        }
        KernelCase::BatchNorm { batch, ch, h, w } => {
            let input = rand_tensor(&mut rng, &[batch, ch, h, w], -1.0, 1.0);
            let gamma = rand_tensor(&mut rng, &[ch], 0.5, 1.5);
            let beta = rand_tensor(&mut rng, &[ch], -0.5, 0.5);
            let make = |g: &Tensor<f64>, b: &Tensor<f64>| BatchNormParams {
                gamma: g.clone(),
                beta: b.clone(),
                ..BatchNormParams::new(ch)
            };
            let mut params = make(&gamma, &beta);
            let (out, cache) = batchnorm_forward(&input, &mut params, BnMode::Measure).unwrap();
            let r = projection(&mut rng, out.shape());
            let (gx, gp) = batchnorm_backward(&params, &cache, &r).unwrap();
            let terms = [
                Term {
                    value: input,
                    analytic: gx,
                },
                Term {
                    value: gamma,
                    analytic: gp.gamma,
                },
                Term {
                    value: beta,
                    analytic: gp.beta,
                },
            ];
            max_rel_err_fd(&terms, |vals| {
                let mut p = make(&vals[1], &vals[2]);
                let (out, _) = batchnorm_forward(&vals[0], &mut p, BnMode::Measure).unwrap();
                dot(&out, &r)
            })
        }
        KernelCase::Fc {
            batch,
            in_dim,
            out_dim,
        } => {
            let input = rand_tensor(&mut rng, &[batch, in_dim], -1.0, 1.0);
            let weights = rand_tensor(&mut rng, &[out_dim, in_dim], -1.0, 1.0);
            let bias = rand_tensor(&mut rng, &[out_dim], -0.5, 0.5);
            let params = FcParams {
                weights: weights.clone(),
                bias: bias.clone(),
            };
            let out = fc_forward(&input, &params).unwrap();
            let r = projection(&mut rng, out.shape());
            let (gx, gp) = fc_backward(&input, &params, &r).unwrap();
            let terms = [
                Term {
                    value: input,
                    analytic: gx,
                },
                Term {
                    value: weights,
                    analytic: gp.weights,
                },
                Term {
                    value: bias,
                    analytic: gp.bias,
                },
            ];
            max_rel_err_fd(&terms, |vals| {
                let p = FcParams {
                    weights: vals[1].clone(),
                    bias: vals[2].clone(),
                };
                dot(&fc_forward(&vals[0], &p).unwrap(), &r)
            })
        }
        KernelCase::Relu { batch, ch, h, w } => {
            // keep values away from the kink at 0 so the FD step cannot cross it
            let mut input = rand_tensor(&mut rng, &[batch, ch, h, w], -1.0, 1.0);
            for v in input.data_mut() {
                if v.abs() < 0.05 {
                    *v = 0.1 * v.signum() + if *v == 0.0 { 0.1 } else { 0.0 };
                }
            }
            let out = relu_forward(&input);
            let r = projection(&mut rng, out.shape());
            let gx = relu_backward(&out, &r).unwrap();
            let terms = [Term {
                value: input,
                analytic: gx,
            }];
            max_rel_err_fd(&terms, |vals| dot(&relu_forward(&vals[0]), &r))
        }
        KernelCase::GlobalAvgPool { batch, ch, h, w } => {
            let input = rand_tensor(&mut rng, &[batch, ch, h, w], -1.0, 1.0);
            let out = global_avg_pool_forward(&input).unwrap();
            let r = projection(&mut rng, out.shape());
            let gx = global_avg_pool_backward(input.shape(), &r).unwrap();
            let shape = input.shape().to_vec();
            let terms = [Term {
                value: input,
                analytic: gx,
            }];
            max_rel_err_fd(&terms, move |vals| {
                debug_assert_eq!(vals[0].shape(), &shape[..]);
                dot(&global_avg_pool_forward(&vals[0]).unwrap(), &r)
            })
        }
        KernelCase::SoftmaxXent { batch, classes } => {
            let logits = rand_tensor(&mut rng, &[batch, classes], -2.0, 2.0);
            let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..classes)).collect();
            let (_, probs) = softmax_xent_forward(&logits, &labels).unwrap();
            let grad = softmax_xent_backward(&probs, &labels, 1.0).unwrap();
            let terms = [Term {
                value: logits,
                analytic: grad,
            }];
            max_rel_err_fd(&terms, |vals| {
                softmax_xent_forward(&vals[0], &labels).unwrap().0
            })
        }
    };
    GradCheckReport {
        kernel: case.kind().name(),
        case: format!("{case:?}"),
        max_rel_err,
        tolerance,
        passed: max_rel_err < tolerance,
    }
}

/// Certifies one kernel over `n_cases` random instances.
pub fn certify_kernel(kind: KernelKind, n_cases: usize, tolerance: f64) -> Vec<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6b65726e);
    (0..n_cases)
        .map(|i| {
            let case = KernelCase::random(kind, &mut rng);
            grad_check(&case, 1000 + i as u64, tolerance)
        })
        .collect()
}

/// Certifies the whole layer zoo at a shared tolerance.
pub fn certify_all(n_cases_per_kernel: usize, tolerance: f64) -> Vec<GradCheckReport> {
    KernelKind::ALL
        .iter()
        .flat_map(|&k| certify_kernel(k, n_cases_per_kernel, tolerance))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_named_case_is_tight() {
        let case = KernelCase::Conv2d {
            batch: 2,
            in_ch: 2,
            out_ch: 2,
            h: 5,
            w: 5,
            k: 3,
            stride: 1,
            padding: 1,
        };
        let report = grad_check(&case, 42, 1e-6);
        assert!(report.passed, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn batchnorm_named_case() {
        let case = KernelCase::BatchNorm {
            batch: 4,
            ch: 3,
            h: 2,
            w: 2,
        };
        let report = grad_check(&case, 42, 1e-5);
        assert!(report.passed, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn fc_named_case_is_very_tight() {
        let case = KernelCase::Fc {
            batch: 2,
            in_dim: 3,
            out_dim: 2,
        };
        let report = grad_check(&case, 42, 1e-7);
        assert!(report.passed, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn every_kernel_passes_randomized_certification() {
        // full suite at 1e-5 over randomized shapes
        let reports = certify_all(5, 1e-5);
        for r in &reports {
            assert!(r.passed, "{} {} err {}", r.kernel, r.case, r.max_rel_err);
        }
    }
}
