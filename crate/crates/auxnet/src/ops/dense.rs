//! Fully connected layer, ReLU, and global average pooling.

use crate::error::{Error, Result};
use crate::parallel::axpy;
use crate::tensor::{Element, Tensor};

/// Fully connected parameters: `weights` is `[out, in]`, `bias` is `[out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FcParams<T: Element> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct FcGrads<T: Element> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Element> FcParams<T> {
    pub fn in_dim(&self) -> usize {
        self.weights.shape()[1]
    }
    pub fn out_dim(&self) -> usize {
        self.weights.shape()[0]
    }
}

pub fn fc_forward<T: Element>(input: &Tensor<T>, params: &FcParams<T>) -> Result<Tensor<T>> {
    let shape = input.shape();
    if shape.len() != 2 || shape[1] != params.in_dim() {
        return Err(Error::shape(
            "fc",
            format!("input {shape:?} vs weights {:?}", params.weights.shape()),
        ));
    }
    let (b, din, dout) = (shape[0], params.in_dim(), params.out_dim());
    let mut out = Tensor::zeros(vec![b, dout]);
    let x = input.data();
    let w = params.weights.data();
    let bias = params.bias.data();
    let od = out.data_mut();
    for bi in 0..b {
        let x_row = &x[bi * din..(bi + 1) * din];
        let o_row = &mut od[bi * dout..(bi + 1) * dout];
        for o in 0..dout {
            let mut acc = bias[o];
            let w_row = &w[o * din..(o + 1) * din];
            for i in 0..din {
                acc = acc + w_row[i] * x_row[i];
            }
            o_row[o] = acc;
        }
    }
    Ok(out)
}

pub fn fc_backward<T: Element>(
    input: &Tensor<T>,
    params: &FcParams<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, FcGrads<T>)> {
    let (b, din, dout) = (input.shape()[0], params.in_dim(), params.out_dim());
    if grad_out.shape() != [b, dout] {
        return Err(Error::shape(
            "fc_backward",
            format!("grad_out {:?}, want [{b},{dout}]", grad_out.shape()),
        ));
    }
    let x = input.data();
    let w = params.weights.data();
    let go = grad_out.data();

    let mut grad_in = Tensor::zeros(vec![b, din]);
    let mut grad_w = Tensor::zeros(vec![dout, din]);
    let mut grad_b = Tensor::zeros(vec![dout]);
    {
        let gi = grad_in.data_mut();
        let gw = grad_w.data_mut();
        let gb = grad_b.data_mut();
        for bi in 0..b {
            let g_row = &go[bi * dout..(bi + 1) * dout];
            let x_row = &x[bi * din..(bi + 1) * din];
            let gi_row = &mut gi[bi * din..(bi + 1) * din];
            for o in 0..dout {
                let g = g_row[o];
                axpy(g, &w[o * din..(o + 1) * din], gi_row);
                axpy(g, x_row, &mut gw[o * din..(o + 1) * din]);
                gb[o] = gb[o] + g;
            }
        }
    }
    Ok((
        grad_in,
        FcGrads {
            weights: grad_w,
            bias: grad_b,
        },
    ))
}

pub fn relu_forward<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    let mut out = input.clone();
    for v in out.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    out
}

/// Gradient through ReLU. `output` is the forward result: positions where it
/// is positive pass the gradient, everything else blocks it.
pub fn relu_backward<T: Element>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if output.shape() != grad_out.shape() {
        return Err(Error::shape(
            "relu_backward",
            format!("{:?} vs {:?}", output.shape(), grad_out.shape()),
        ));
    }
    let mut grad_in = grad_out.clone();
    for (g, &y) in grad_in.data_mut().iter_mut().zip(output.data()) {
        if y <= T::zero() {
            *g = T::zero();
        }
    }
    Ok(grad_in)
}

/// `[B,C,H,W] -> [B,C]` spatial mean.
pub fn global_avg_pool_forward<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = input.shape();
    if shape.len() != 4 {
        return Err(Error::shape(
            "global_avg_pool",
            format!("input must be [B,C,H,W], got {shape:?}"),
        ));
    }
    let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let inv = T::from_f64(hw as f64).recip();
    let mut out = Tensor::zeros(vec![b, c]);
    let x = input.data();
    let od = out.data_mut();
    for bc in 0..b * c {
        let mut acc = T::zero();
        for &v in &x[bc * hw..(bc + 1) * hw] {
            acc = acc + v;
        }
        od[bc] = acc * inv;
    }
    Ok(out)
}

pub fn global_avg_pool_backward<T: Element>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if input_shape.len() != 4 || grad_out.shape() != [input_shape[0], input_shape[1]] {
        return Err(Error::shape(
            "global_avg_pool_backward",
            format!("grad_out {:?} vs input {input_shape:?}", grad_out.shape()),
        ));
    }
    let (b, c, hw) = (
        input_shape[0],
        input_shape[1],
        input_shape[2] * input_shape[3],
    );
    let inv = T::from_f64(hw as f64).recip();
    let mut grad_in = Tensor::zeros(input_shape.to_vec());
    let gi = grad_in.data_mut();
    let go = grad_out.data();
    for bc in 0..b * c {
        let g = go[bc] * inv;
        for v in &mut gi[bc * hw..(bc + 1) * hw] {
            *v = g;
        }
    }
    Ok(grad_in)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_negatives() {
        let t = Tensor::from_vec(vec![4], vec![-1.0f64, 2.0, 0.0, -0.5]).unwrap();
        let out = relu_forward(&t);
        assert_eq!(out.data(), &[0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn fc_identity_weights_pass_through() {
        let input = Tensor::from_vec(vec![2, 3], vec![1.0f64, -2.0, 3.0, 0.5, 0.0, -1.0]).unwrap();
        let mut w = Tensor::zeros(vec![3, 3]);
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0;
        }
        let params = FcParams {
            weights: w,
            bias: Tensor::zeros(vec![3]),
        };
        let out = fc_forward(&input, &params).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn gap_of_known_block_is_mean() {
        let input = Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let out = global_avg_pool_forward(&input).unwrap();
        assert_eq!(out.shape(), &[1, 1]);
        assert_eq!(out.data()[0], 2.5);
    }

    #[test]
    fn gap_backward_spreads_gradient() {
        let grad_out = Tensor::from_vec(vec![1, 2], vec![4.0f64, 8.0]).unwrap();
        let gi = global_avg_pool_backward(&[1, 2, 2, 2], &grad_out).unwrap();
        assert_eq!(gi.data(), &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
    }
}
