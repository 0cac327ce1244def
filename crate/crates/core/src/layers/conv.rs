//! Convolution with additive bias, lowered to GEMM through im2col.
//!
//! `out[n, y, x, j] = b[j] + sum_{dy, dx, i} in[n, y*s + dy - pad, x*s + dx - pad, i] * k[dy, dx, i, j]`
//! with out-of-range input read as zero.

use crate::error::{Error, Result};
use crate::tensor::{col2im_slice, gemm, im2col_slice, ShapeDisplay, Tensor, Window};

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    /// `kh x kw x Cin x Cout`
    pub kernel: Tensor,
    /// `Cout`
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl ConvParams {
    pub fn new(kernel: Tensor, bias: Tensor, stride: usize, pad: usize) -> Result<Self> {
        let p = ConvParams {
            kernel,
            bias,
            stride,
            pad,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        validate_kernel(&self.kernel, &self.bias)?;
        if self.stride == 0 {
            return Err(Error::config("convolution stride must be at least 1"));
        }
        Ok(())
    }

    pub fn window(&self) -> Window {
        let s = self.kernel.shape();
        Window::new(s[0], s[1], self.stride, self.pad)
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[3]
    }
}

pub(crate) fn validate_kernel(kernel: &Tensor, bias: &Tensor) -> Result<()> {
    if kernel.rank() != 4 {
        return Err(Error::shape(format!(
            "kernel must be kh x kw x Cin x Cout, got {}",
            ShapeDisplay(kernel.shape())
        )));
    }
    if bias.len() != kernel.shape()[3] {
        return Err(Error::shape(format!(
            "bias length {} does not match kernel out-channels {}",
            bias.len(),
            kernel.shape()[3]
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub kernel: Tensor,
    pub bias: Tensor,
}

struct Geometry {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    ho: usize,
    wo: usize,
    cout: usize,
    win: Window,
}

impl Geometry {
    fn of(input: &Tensor, kernel: &Tensor, win: Window) -> Result<Self> {
        let (n, h, w, cin) = input.dims4()?;
        if kernel.shape()[2] != cin {
            return Err(Error::shape(format!(
                "input has {cin} channels but kernel {} expects {}",
                ShapeDisplay(kernel.shape()),
                kernel.shape()[2]
            )));
        }
        let (ho, wo) = win.out_hw(h, w)?;
        Ok(Geometry {
            n,
            h,
            w,
            cin,
            ho,
            wo,
            cout: kernel.shape()[3],
            win,
        })
    }

    fn patch_len(&self) -> usize {
        self.win.kh * self.win.kw * self.cin
    }

    fn rows(&self) -> usize {
        self.n * self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.win.kh == 1 && self.win.kw == 1 && self.win.stride == 1 && self.win.pad == 0
    }

    fn out_shape(&self) -> [usize; 4] {
        [self.n, self.ho, self.wo, self.cout]
    }

    fn lower(&self, input: &Tensor) -> Vec<f64> {
        let per_in = self.h * self.w * self.cin;
        let per_out = self.ho * self.wo * self.patch_len();
        let mut cols = vec![0.0; self.n * per_out];
        for (src, dst) in input
            .data()
            .chunks_exact(per_in)
            .zip(cols.chunks_exact_mut(per_out))
        {
            im2col_slice(src, self.h, self.w, self.cin, &self.win, self.ho, self.wo, dst);
        }
        cols
    }
}

fn add_bias(out: &mut [f64], bias: &[f64]) {
    for row in out.chunks_exact_mut(bias.len()) {
        for (o, b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

fn sum_rows(grad: &[f64], width: usize) -> Vec<f64> {
    let mut acc = vec![0.0; width];
    for row in grad.chunks_exact(width) {
        for (a, g) in acc.iter_mut().zip(row) {
            *a += g;
        }
    }
    acc
}

pub(crate) fn forward_raw(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    win: Window,
) -> Result<Tensor> {
    let g = Geometry::of(input, kernel, win)?;
    let cols = g.lower(input);
    let mut out = Tensor::zeros(&g.out_shape());
    gemm(
        g.rows(),
        g.patch_len(),
        g.cout,
        &cols,
        false,
        kernel.data(),
        false,
        0.0,
        out.data_mut(),
    );
    add_bias(out.data_mut(), bias.data());
    Ok(out)
}

pub(crate) fn forward_1x1_raw(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if kernel.shape()[0] != 1 || kernel.shape()[1] != 1 {
        return Err(Error::config(format!(
            "pointwise path needs a 1x1 kernel, got {}",
            ShapeDisplay(kernel.shape())
        )));
    }
    let g = Geometry::of(input, kernel, Window::new(1, 1, 1, 0))?;
    let mut out = Tensor::zeros(&g.out_shape());
    // NHWC makes the batch a contiguous (N*H*W) x Cin matrix already.
    gemm(
        g.rows(),
        g.cin,
        g.cout,
        input.data(),
        false,
        kernel.data(),
        false,
        0.0,
        out.data_mut(),
    );
    add_bias(out.data_mut(), bias.data());
    Ok(out)
}

pub(crate) fn backward_raw(
    input: &Tensor,
    kernel: &Tensor,
    win: Window,
    grad_out: &Tensor,
    want_input: bool,
) -> Result<ConvGrads> {
    let g = Geometry::of(input, kernel, win)?;
    if grad_out.shape() != g.out_shape() {
        return Err(Error::shape(format!(
            "conv grad_out {} does not match forward output {}",
            ShapeDisplay(grad_out.shape()),
            ShapeDisplay(&g.out_shape())
        )));
    }
    let pointwise = g.is_pointwise();
    let owned_cols;
    let cols: &[f64] = if pointwise {
        input.data()
    } else {
        owned_cols = g.lower(input);
        &owned_cols
    };

    let mut grad_kernel = Tensor::zeros(kernel.shape());
    gemm(
        g.patch_len(),
        g.rows(),
        g.cout,
        cols,
        true,
        grad_out.data(),
        false,
        0.0,
        grad_kernel.data_mut(),
    );
    let grad_bias = Tensor::new(&[g.cout], sum_rows(grad_out.data(), g.cout))?;

    let grad_input = if want_input {
        let mut dcols = vec![0.0; g.rows() * g.patch_len()];
        gemm(
            g.rows(),
            g.cout,
            g.patch_len(),
            grad_out.data(),
            false,
            kernel.data(),
            true,
            0.0,
            &mut dcols,
        );
        if pointwise {
            Some(Tensor::new(input.shape(), dcols)?)
        } else {
            let mut gi = Tensor::zeros(input.shape());
            let per_in = g.h * g.w * g.cin;
            let per_cols = g.ho * g.wo * g.patch_len();
            for (src, dst) in dcols
                .chunks_exact(per_cols)
                .zip(gi.data_mut().chunks_exact_mut(per_in))
            {
                col2im_slice(src, g.h, g.w, g.cin, &g.win, g.ho, g.wo, dst);
            }
            Some(gi)
        }
    } else {
        None
    };

    Ok(ConvGrads {
        input: grad_input,
        kernel: grad_kernel,
        bias: grad_bias,
    })
}

/// General convolution of an `N x H x W x Cin` batch.
pub fn conv_forward(input: &Tensor, p: &ConvParams) -> Result<Tensor> {
    p.validate()?;
    forward_raw(input, &p.kernel, &p.bias, p.window())
}

/// Pointwise convolution: one `(N*H*W) x Cin` by `Cin x Cout` product plus bias.
/// Same values as [`conv_forward`] with a 1x1 kernel.
pub fn conv1x1_forward(input: &Tensor, p: &ConvParams) -> Result<Tensor> {
    p.validate()?;
    if p.stride != 1 || p.pad != 0 {
        return Err(Error::config("pointwise path supports stride 1, pad 0 only"));
    }
    forward_1x1_raw(input, &p.kernel, &p.bias)
}

/// Gradients of the convolution with respect to its input, kernel and bias.
pub fn conv_backward(input: &Tensor, p: &ConvParams, grad_out: &Tensor) -> Result<ConvGrads> {
    p.validate()?;
    backward_raw(input, &p.kernel, p.window(), grad_out, true)
}
