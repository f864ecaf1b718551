//! 2D and 3D convolution via im2col and a dense matrix product.
//!
//! Both operators share one implementation: a 2D convolution is a 3D
//! convolution over a depth-1 volume with a depth-1 kernel.

use crate::error::{NnError, Result};
use crate::params::{LayerParams, ParamGrads};
use crate::tensor::Tensor;

/// Gradients produced by a layer's backward pass.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub input: Tensor,
    pub params: ParamGrads,
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    c: usize,
    d: usize,
    h: usize,
    w: usize,
    kd: usize,
    kh: usize,
    kw: usize,
    od: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: [usize; 3],
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.kd * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.od * self.oh * self.ow
    }
}

fn out_extent(
    axis: &'static str,
    size: usize,
    padding: usize,
    kernel: usize,
    stride: usize,
) -> Result<usize> {
    if stride == 0 {
        return Err(NnError::InvalidConfig("stride must be positive".into()));
    }
    let padded = size + 2 * padding;
    if kernel > padded {
        return Err(NnError::ShapeMismatch(format!(
            "kernel extent {kernel} exceeds padded {axis} extent {padded}"
        )));
    }
    let span = padded - kernel;
    if !span.is_multiple_of(stride) {
        return Err(NnError::NonIntegerExtent {
            axis,
            size,
            padding,
            kernel,
            stride,
        });
    }
    Ok(span / stride + 1)
}

fn geometry(input: &[usize], kernel: &[usize], stride: usize, pad: [usize; 3]) -> Result<Geometry> {
    if input.len() != 4 || kernel.len() != 5 {
        return Err(NnError::ShapeMismatch(format!(
            "conv3d expects [C,D,H,W] input and [C',C,kD,kH,kW] kernels, got {input:?} and {kernel:?}"
        )));
    }
    if input[0] != kernel[1] {
        return Err(NnError::ShapeMismatch(format!(
            "input has {} channels, kernels expect {}",
            input[0], kernel[1]
        )));
    }
    Ok(Geometry {
        c: input[0],
        d: input[1],
        h: input[2],
        w: input[3],
        kd: kernel[2],
        kh: kernel[3],
        kw: kernel[4],
        od: out_extent("depth", input[1], pad[0], kernel[2], stride)?,
        oh: out_extent("height", input[2], pad[1], kernel[3], stride)?,
        ow: out_extent("width", input[3], pad[2], kernel[4], stride)?,
        stride,
        pad,
    })
}

/// Source coordinate for output index `o` and kernel tap `k`, if inside the input.
#[inline]
fn source(o: usize, k: usize, stride: usize, pad: usize, size: usize) -> Option<usize> {
    let pos = o * stride + k;
    if pos < pad || pos - pad >= size {
        None
    } else {
        Some(pos - pad)
    }
}

fn im2col(input: &[f64], g: &Geometry) -> Vec<f64> {
    let cols = g.cols();
    let mut out = vec![0.0; g.rows() * cols];
    let mut row = 0;
    for ci in 0..g.c {
        for a in 0..g.kd {
            for b in 0..g.kh {
                for e in 0..g.kw {
                    let dst = &mut out[row * cols..(row + 1) * cols];
                    let mut p = 0;
                    for oz in 0..g.od {
                        let iz = source(oz, a, g.stride, g.pad[0], g.d);
                        for oy in 0..g.oh {
                            let iy = source(oy, b, g.stride, g.pad[1], g.h);
                            for ox in 0..g.ow {
                                if let (Some(iz), Some(iy), Some(ix)) =
                                    (iz, iy, source(ox, e, g.stride, g.pad[2], g.w))
                                {
                                    dst[p] = input[((ci * g.d + iz) * g.h + iy) * g.w + ix];
                                }
                                p += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    out
}

fn col2im(cols_buf: &[f64], g: &Geometry) -> Vec<f64> {
    let cols = g.cols();
    let mut out = vec![0.0; g.c * g.d * g.h * g.w];
    let mut row = 0;
    for ci in 0..g.c {
        for a in 0..g.kd {
            for b in 0..g.kh {
                for e in 0..g.kw {
                    let src = &cols_buf[row * cols..(row + 1) * cols];
                    let mut p = 0;
                    for oz in 0..g.od {
                        let iz = source(oz, a, g.stride, g.pad[0], g.d);
                        for oy in 0..g.oh {
                            let iy = source(oy, b, g.stride, g.pad[1], g.h);
                            for ox in 0..g.ow {
                                if let (Some(iz), Some(iy), Some(ix)) =
                                    (iz, iy, source(ox, e, g.stride, g.pad[2], g.w))
                                {
                                    out[((ci * g.d + iz) * g.h + iy) * g.w + ix] += src[p];
                                }
                                p += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    out
}

/// `c = op(a) * op(b) + beta * c` for row-major operands, where `op` is an
/// optional transpose. `a` is m×k after `op`, `b` is k×n after `op`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn conv_forward(input: &Tensor, params: &LayerParams, g: &Geometry) -> Result<Tensor> {
    let cout = params.out_channels();
    let cols = im2col(input.values(), g);
    let p = g.cols();
    let mut out = vec![0.0; cout * p];
    for (co, chunk) in out.chunks_mut(p).enumerate() {
        chunk.fill(params.bias.values()[co]);
    }
    gemm(
        cout,
        g.rows(),
        p,
        params.kernels.values(),
        false,
        &cols,
        false,
        1.0,
        &mut out,
    );
    Tensor::new(vec![cout, g.od, g.oh, g.ow], out)
}

fn conv_backward(
    input: &Tensor,
    params: &LayerParams,
    g: &Geometry,
    grad_out: &[f64],
) -> Result<(Vec<f64>, ParamGrads)> {
    let cout = params.out_channels();
    let p = g.cols();
    let r = g.rows();
    if grad_out.len() != cout * p {
        return Err(NnError::ShapeMismatch(format!(
            "upstream gradient has {} values, expected {}",
            grad_out.len(),
            cout * p
        )));
    }
    let cols = im2col(input.values(), g);
    let mut dk = vec![0.0; cout * r];
    gemm(cout, p, r, grad_out, false, &cols, true, 0.0, &mut dk);
    let db = grad_out.chunks(p).map(|c| c.iter().sum()).collect();
    let mut dcols = vec![0.0; r * p];
    gemm(
        r,
        cout,
        p,
        params.kernels.values(),
        true,
        grad_out,
        false,
        0.0,
        &mut dcols,
    );
    Ok((
        col2im(&dcols, g),
        ParamGrads {
            kernels: dk,
            bias: db,
        },
    ))
}

fn geometry_2d(
    input: &Tensor,
    params: &LayerParams,
    stride: usize,
    padding: usize,
) -> Result<Geometry> {
    let s = input.shape();
    let k = params.kernels.shape();
    if s.len() != 3 || k.len() != 4 {
        return Err(NnError::ShapeMismatch(format!(
            "conv2d expects [C,H,W] input and [C',C,kH,kW] kernels, got {s:?} and {k:?}"
        )));
    }
    geometry(
        &[s[0], 1, s[1], s[2]],
        &[k[0], k[1], 1, k[2], k[3]],
        stride,
        [0, padding, padding],
    )
}

/// 2D convolution of a `[C,H,W]` input with `[C',C,kH,kW]` kernels.
pub fn conv2d(
    input: &Tensor,
    params: &LayerParams,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = geometry_2d(input, params, stride, padding)?;
    conv_forward(input, params, &g)?.reshape(&[params.out_channels(), g.oh, g.ow])
}

pub fn conv2d_backward(
    input: &Tensor,
    params: &LayerParams,
    stride: usize,
    padding: usize,
    grad_out: &Tensor,
) -> Result<LayerGrads> {
    let g = geometry_2d(input, params, stride, padding)?;
    let (di, dp) = conv_backward(input, params, &g, grad_out.values())?;
    Ok(LayerGrads {
        input: Tensor::new(input.shape().to_vec(), di)?,
        params: dp,
    })
}

/// 3D convolution of a `[C,D,H,W]` input with `[C',C,kD,kH,kW]` kernels.
/// `padding` is given per axis as `[depth, height, width]`.
pub fn conv3d(
    input: &Tensor,
    params: &LayerParams,
    stride: usize,
    padding: [usize; 3],
) -> Result<Tensor> {
    let g = geometry(input.shape(), params.kernels.shape(), stride, padding)?;
    conv_forward(input, params, &g)
}

pub fn conv3d_backward(
    input: &Tensor,
    params: &LayerParams,
    stride: usize,
    padding: [usize; 3],
    grad_out: &Tensor,
) -> Result<LayerGrads> {
    let g = geometry(input.shape(), params.kernels.shape(), stride, padding)?;
    let (di, dp) = conv_backward(input, params, &g, grad_out.values())?;
    Ok(LayerGrads {
        input: Tensor::new(input.shape().to_vec(), di)?,
        params: dp,
    })
}
