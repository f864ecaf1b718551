use crate::conv::LayerGrads;
use crate::error::{NnError, Result};
use crate::params::{LayerParams, ParamGrads};
use crate::tensor::Tensor;

pub fn relu(input: &Tensor) -> Tensor {
    let mut out = input.scale(1.0);
    out.values_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

/// Passes the upstream gradient where the forward input was positive.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if input.shape() != grad_out.shape() {
        return Err(NnError::ShapeMismatch(format!(
            "relu backward: {:?} vs {:?}",
            input.shape(),
            grad_out.shape()
        )));
    }
    let values = input
        .values()
        .iter()
        .zip(grad_out.values())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape().to_vec(), values)
}

fn pool_extent(size: usize, window: usize, stride: usize) -> Result<usize> {
    if window == 0 || stride == 0 {
        return Err(NnError::InvalidConfig(
            "pool window and stride must be positive".into(),
        ));
    }
    if window > size {
        return Err(NnError::ShapeMismatch(format!(
            "pool window {window} exceeds extent {size}"
        )));
    }
    if !(size - window).is_multiple_of(stride) {
        return Err(NnError::NonIntegerExtent {
            axis: "pool",
            size,
            padding: 0,
            kernel: window,
            stride,
        });
    }
    Ok((size - window) / stride + 1)
}

/// Per-window argmax in input index space; ties keep the first element in
/// row-major order.
fn pool_argmax(input: &Tensor, window: usize, stride: usize) -> Result<(Vec<usize>, [usize; 3])> {
    let s = input.shape();
    if s.len() != 3 {
        return Err(NnError::ShapeMismatch(format!(
            "max_pool2d expects [C,H,W], got {s:?}"
        )));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let oh = pool_extent(h, window, stride)?;
    let ow = pool_extent(w, window, stride)?;
    let x = input.values();
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = ((ci * h) + oy * stride) * w + ox * stride;
                for dy in 0..window {
                    let row = (ci * h + oy * stride + dy) * w + ox * stride;
                    for i in row..row + window {
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                }
                idx.push(best);
            }
        }
    }
    Ok((idx, [c, oh, ow]))
}

pub fn max_pool2d(input: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    let (idx, shape) = pool_argmax(input, window, stride)?;
    let x = input.values();
    Tensor::new(shape.to_vec(), idx.iter().map(|&i| x[i]).collect())
}

pub fn max_pool2d_backward(
    input: &Tensor,
    window: usize,
    stride: usize,
    grad_out: &Tensor,
) -> Result<Tensor> {
    let (idx, shape) = pool_argmax(input, window, stride)?;
    if grad_out.shape() != shape {
        return Err(NnError::ShapeMismatch(format!(
            "max_pool2d backward: upstream {:?}, expected {shape:?}",
            grad_out.shape()
        )));
    }
    let mut grad = vec![0.0; input.len()];
    for (&i, &g) in idx.iter().zip(grad_out.values()) {
        grad[i] += g;
    }
    Tensor::new(input.shape().to_vec(), grad)
}

fn linear_dims(input: &Tensor, params: &LayerParams) -> Result<(usize, usize)> {
    let k = params.kernels.shape();
    if k.len() != 2 || k[1] != input.len() {
        return Err(NnError::ShapeMismatch(format!(
            "linear kernels {k:?} applied to input of length {}",
            input.len()
        )));
    }
    Ok((k[0], k[1]))
}

/// Affine map `W x + b` of a flattened input; `W` is `[M, N]`.
pub fn linear(input: &Tensor, params: &LayerParams) -> Result<Tensor> {
    let (m, n) = linear_dims(input, params)?;
    let w = params.kernels.values();
    let x = input.values();
    let out = (0..m)
        .map(|i| {
            let row = &w[i * n..(i + 1) * n];
            params.bias.values()[i] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect();
    Ok(Tensor::from_vec(out))
}

pub fn linear_backward(
    input: &Tensor,
    params: &LayerParams,
    grad_out: &Tensor,
) -> Result<LayerGrads> {
    let (m, n) = linear_dims(input, params)?;
    if grad_out.len() != m {
        return Err(NnError::ShapeMismatch(format!(
            "linear backward: upstream length {}, expected {m}",
            grad_out.len()
        )));
    }
    let w = params.kernels.values();
    let x = input.values();
    let g = grad_out.values();
    let mut dx = vec![0.0; n];
    let mut dw = vec![0.0; m * n];
    for i in 0..m {
        let gi = g[i];
        let row = &w[i * n..(i + 1) * n];
        let drow = &mut dw[i * n..(i + 1) * n];
        for j in 0..n {
            dx[j] += row[j] * gi;
            drow[j] = gi * x[j];
        }
    }
    Ok(LayerGrads {
        input: Tensor::new(input.shape().to_vec(), dx)?,
        params: ParamGrads {
            kernels: dw,
            bias: g.to_vec(),
        },
    })
}
