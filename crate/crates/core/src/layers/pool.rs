use crate::error::{Error, Result};
use crate::tensor::{ShapeDisplay, Tensor, Window};

/// Winning input position of every pooled output element, used to route the
/// backward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolIndexMap {
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    /// Flat input offset per flat output offset.
    argmax: Vec<usize>,
}

impl PoolIndexMap {
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn indices(&self) -> &[usize] {
        &self.argmax
    }
}

/// Unpadded channel-wise max pooling of an NHWC batch. Ties resolve to the
/// lowest flat input index.
pub fn maxpool_forward(
    input: &Tensor,
    window: usize,
    stride: usize,
) -> Result<(Tensor, PoolIndexMap)> {
    let (n, h, w, c) = input.dims4()?;
    let win = Window::new(window, window, stride, 0);
    let (ho, wo) = win.out_hw(h, w).map_err(|e| {
        Error::config(format!("max pool {window}/{stride} on {h}x{w}: {e}"))
    })?;
    let mut out = Tensor::zeros(&[n, ho, wo, c]);
    let mut argmax = vec![0usize; out.len()];
    let src = input.data();
    let dst = out.data_mut();
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let o = ((b * ho + oy) * wo + ox) * c;
                for ch in 0..c {
                    // window is scanned in increasing flat index order
                    let mut best = usize::MAX;
                    for dy in 0..window {
                        let row = (b * h + oy * stride + dy) * w;
                        for dx in 0..window {
                            let i = (row + ox * stride + dx) * c + ch;
                            if best == usize::MAX || src[i] > src[best] {
                                best = i;
                            }
                        }
                    }
                    dst[o + ch] = src[best];
                    argmax[o + ch] = best;
                }
            }
        }
    }
    let map = PoolIndexMap {
        input_shape: input.shape().to_vec(),
        output_shape: out.shape().to_vec(),
        argmax,
    };
    Ok((out, map))
}

/// Routes each output gradient to its winning input, summing where windows
/// overlap.
pub fn maxpool_backward(map: &PoolIndexMap, grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.shape() != map.output_shape.as_slice() {
        return Err(Error::shape(format!(
            "pool index map is for output {} but grad is {}",
            ShapeDisplay(&map.output_shape),
            ShapeDisplay(grad_out.shape())
        )));
    }
    let mut grad_in = Tensor::zeros(&map.input_shape);
    let gi = grad_in.data_mut();
    for (&i, &g) in map.argmax.iter().zip(grad_out.data()) {
        gi[i] += g;
    }
    Ok(grad_in)
}
