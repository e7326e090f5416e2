//! 2-D convolution: an im2col fast path and a naive nested-loop reference.
//!
//! Both routes compute the same correlation (no kernel flipping) and must
//! agree elementwise; the naive route exists as the oracle the fast path is
//! tested against.

use crate::error::{Error, Result};
use crate::parallel::{axpy, for_each_chunk_mut};
use crate::tensor::{Element, Tensor};

/// Convolution weights and hyperparameters.
///
/// `weights` has shape `[out_channels, in_channels, k, k]`, `bias` has shape
/// `[out_channels]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dParams<T: Element> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

/// Gradients aligned with [`Conv2dParams`].
#[derive(Clone, Debug)]
pub struct Conv2dGrads<T: Element> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Element> Conv2dParams<T> {
    pub fn kernel_size(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    fn validate(&self, input: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
        let shape = input.shape();
        if shape.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("input must be [B,C,H,W], got {shape:?}"),
            ));
        }
        let wshape = self.weights.shape();
        if wshape.len() != 4 || wshape[2] != wshape[3] {
            return Err(Error::shape(
                "conv2d",
                format!("weights must be [OC,C,k,k], got {wshape:?}"),
            ));
        }
        if shape[1] != wshape[1] {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input channels {} do not match weight channels {}",
                    shape[1], wshape[1]
                ),
            ));
        }
        if self.bias.shape() != [wshape[0]] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {:?}, want [{}]", self.bias.shape(), wshape[0]),
            ));
        }
        if self.stride == 0 {
            return Err(Error::shape(
                "conv2d",
                "stride must be positive".to_string(),
            ));
        }
        let (h2, w2) = output_dims(shape[2], shape[3], wshape[2], self.stride, self.padding)?;
        Ok((shape[0], shape[1], h2, w2))
    }
}

/// Output spatial dims: `(H + 2p - k) / s + 1`, floored like every framework.
pub fn output_dims(
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize)> {
    if h + 2 * padding < k || w + 2 * padding < k {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {k} larger than padded input {h}x{w} (padding {padding})"),
        ));
    }
    Ok((
        (h + 2 * padding - k) / stride + 1,
        (w + 2 * padding - k) / stride + 1,
    ))
}

/// Fast-path forward via im2col, parallel over samples.
pub fn conv2d_forward<T: Element>(
    input: &Tensor<T>,
    params: &Conv2dParams<T>,
) -> Result<Tensor<T>> {
    let (b, c, h2, w2) = params.validate(input)?;
    let (h, w) = (input.shape()[2], input.shape()[3]);
    let (oc, k, s, p) = (
        params.out_channels(),
        params.kernel_size(),
        params.stride,
        params.padding,
    );
    let ckk = c * k * k;
    let pos = h2 * w2;

    let mut out = Tensor::zeros(vec![b, oc, h2, w2]);
    let in_data = input.data();
    let wdata = params.weights.data();
    let bias = params.bias.data();
    let sample_in = c * h * w;
    let sample_out = oc * pos;

    for_each_chunk_mut(out.data_mut(), sample_out, |bi, out_b| {
        let x = &in_data[bi * sample_in..(bi + 1) * sample_in];
        let col = im2col(x, c, h, w, k, s, p, h2, w2);
        for o in 0..oc {
            let out_row = &mut out_b[o * pos..(o + 1) * pos];
            out_row.fill(bias[o]);
            let w_row = &wdata[o * ckk..(o + 1) * ckk];
            for q in 0..ckk {
                axpy(w_row[q], &col[q * pos..(q + 1) * pos], out_row);
            }
        }
    });
    Ok(out)
}

/// Reference forward: direct six-loop correlation.
pub fn conv2d_forward_naive<T: Element>(
    input: &Tensor<T>,
    params: &Conv2dParams<T>,
) -> Result<Tensor<T>> {
    let (b, c, h2, w2) = params.validate(input)?;
    let (h, w) = (input.shape()[2], input.shape()[3]);
    let (oc, k, s, p) = (
        params.out_channels(),
        params.kernel_size(),
        params.stride,
        params.padding,
    );
    let mut out = Tensor::zeros(vec![b, oc, h2, w2]);
    let x = input.data();
    let wd = params.weights.data();
    let bias = params.bias.data();
    let od = out.data_mut();

    for bi in 0..b {
        for o in 0..oc {
            for oy in 0..h2 {
                for ox in 0..w2 {
                    let mut acc = bias[o];
                    for ci in 0..c {
                        for ky in 0..k {
                            let iy = (oy * s + ky) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * s + kx) as isize - p as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((bi * c + ci) * h + iy as usize) * w + ix as usize];
                                let wv = wd[((o * c + ci) * k + ky) * k + kx];
                                acc = acc + xv * wv;
                            }
                        }
                    }
                    od[((bi * oc + o) * h2 + oy) * w2 + ox] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Backward pass. Input gradients are parallel over samples; weight-gradient
/// accumulation runs over a fixed number of batch chunks (independent of
/// thread count) combined in order, so results do not depend on scheduling.
pub fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    params: &Conv2dParams<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Conv2dGrads<T>)> {
    let (b, c, h2, w2) = params.validate(input)?;
    if grad_out.shape() != [b, params.out_channels(), h2, w2] {
        return Err(Error::shape(
            "conv2d_backward",
            format!(
                "grad_out {:?} does not match forward output [{b},{},{h2},{w2}]",
                grad_out.shape(),
                params.out_channels()
            ),
        ));
    }
    let (h, w) = (input.shape()[2], input.shape()[3]);
    let (oc, k, s, p) = (
        params.out_channels(),
        params.kernel_size(),
        params.stride,
        params.padding,
    );
    let ckk = c * k * k;
    let pos = h2 * w2;
    let sample_in = c * h * w;
    let sample_out = oc * pos;
    let in_data = input.data();
    let go = grad_out.data();
    let wdata = params.weights.data();

    // Parameter gradients: fixed-chunk partials, combined sequentially.
    let nchunks = b.min(8);
    let part_len = oc * ckk + oc;
    let mut partials = vec![T::zero(); nchunks * part_len];
    let bounds: Vec<(usize, usize)> = (0..nchunks)
        .map(|ci| {
            let lo = ci * b / nchunks;
            let hi = (ci + 1) * b / nchunks;
            (lo, hi)
        })
        .collect();
    for_each_chunk_mut(&mut partials, part_len, |ci, part| {
        let (lo, hi) = bounds[ci];
        let (pw, pb) = part.split_at_mut(oc * ckk);
        for bi in lo..hi {
            let x = &in_data[bi * sample_in..(bi + 1) * sample_in];
            let colt = im2col_transposed(x, c, h, w, k, s, p, h2, w2);
            let g = &go[bi * sample_out..(bi + 1) * sample_out];
            for o in 0..oc {
                let g_row = &g[o * pos..(o + 1) * pos];
                let w_row = &mut pw[o * ckk..(o + 1) * ckk];
                let mut bias_acc = T::zero();
                for (pi, &gv) in g_row.iter().enumerate() {
                    axpy(gv, &colt[pi * ckk..(pi + 1) * ckk], w_row);
                    bias_acc = bias_acc + gv;
                }
                pb[o] = pb[o] + bias_acc;
            }
        }
    });
    let mut grad_w = Tensor::zeros(params.weights.shape().to_vec());
    let mut grad_b = Tensor::zeros(vec![oc]);
    for ci in 0..nchunks {
        let part = &partials[ci * part_len..(ci + 1) * part_len];
        for (dst, &src) in grad_w.data_mut().iter_mut().zip(&part[..oc * ckk]) {
            *dst = *dst + src;
        }
        for (dst, &src) in grad_b.data_mut().iter_mut().zip(&part[oc * ckk..]) {
            *dst = *dst + src;
        }
    }

    // Input gradients, parallel over samples.
    let mut grad_in = Tensor::zeros(input.shape().to_vec());
    for_each_chunk_mut(grad_in.data_mut(), sample_in, |bi, gx| {
        let g = &go[bi * sample_out..(bi + 1) * sample_out];
        // grad_colT[pos][q] = sum_o g[o][pos] * w[o][q]
        let mut grad_colt = vec![T::zero(); pos * ckk];
        for o in 0..oc {
            let g_row = &g[o * pos..(o + 1) * pos];
            let w_row = &wdata[o * ckk..(o + 1) * ckk];
            for (pi, &gv) in g_row.iter().enumerate() {
                axpy(gv, w_row, &mut grad_colt[pi * ckk..(pi + 1) * ckk]);
            }
        }
        col2im_transposed(&grad_colt, gx, c, h, w, k, s, p, h2, w2);
    });

    Ok((
        grad_in,
        Conv2dGrads {
            weights: grad_w,
            bias: grad_b,
        },
    ))
}

/// Builds the column matrix `[C*k*k, H2*W2]` for one sample.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Element>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    h2: usize,
    w2: usize,
) -> Vec<T> {
    let pos = h2 * w2;
    let mut col = vec![T::zero(); c * k * k * pos];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let q = (ci * k + ky) * k + kx;
                let row = &mut col[q * pos..(q + 1) * pos];
                for oy in 0..h2 {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let x_row = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for ox in 0..w2 {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            row[oy * w2 + ox] = x_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Transposed column matrix `[H2*W2, C*k*k]` for one sample.
#[allow(clippy::too_many_arguments)]
fn im2col_transposed<T: Element>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    h2: usize,
    w2: usize,
) -> Vec<T> {
    let ckk = c * k * k;
    let mut colt = vec![T::zero(); h2 * w2 * ckk];
    for oy in 0..h2 {
        for ox in 0..w2 {
            let entry = &mut colt[(oy * w2 + ox) * ckk..(oy * w2 + ox + 1) * ckk];
            for ci in 0..c {
                for ky in 0..k {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            entry[(ci * k + ky) * k + kx] =
                                x[(ci * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    colt
}

/// Scatters `[H2*W2, C*k*k]` gradients back onto one input sample.
#[allow(clippy::too_many_arguments)]
fn col2im_transposed<T: Element>(
    colt: &[T],
    gx: &mut [T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    h2: usize,
    w2: usize,
) {
    let ckk = c * k * k;
    for oy in 0..h2 {
        for ox in 0..w2 {
            let entry = &colt[(oy * w2 + ox) * ckk..(oy * w2 + ox + 1) * ckk];
            for ci in 0..c {
                for ky in 0..k {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            let idx = (ci * h + iy as usize) * w + ix as usize;
                            gx[idx] = gx[idx] + entry[(ci * k + ky) * k + kx];
                        }
                    }
                }
            }
        }
    }
}
