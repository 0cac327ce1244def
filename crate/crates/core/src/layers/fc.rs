use crate::error::{Error, Result};
use crate::tensor::{gemm, ShapeDisplay, Tensor};

fn rows_cols(input: &Tensor) -> (usize, usize) {
    let n = input.shape()[0];
    (n, input.len() / n)
}

fn check(input: &Tensor, weight: &Tensor) -> Result<(usize, usize, usize)> {
    let (n, din) = rows_cols(input);
    let (wi, dout) = weight.dims2()?;
    if wi != din {
        return Err(Error::shape(format!(
            "fully connected input {} flattens to {din} features but weight is {}",
            ShapeDisplay(input.shape()),
            ShapeDisplay(weight.shape())
        )));
    }
    Ok((n, din, dout))
}

/// `out[n, j] = sum_i in[n, i] * W[i, j] + b[j]`. Any trailing axes of the
/// input are flattened.
pub fn fc_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, din, dout) = check(input, weight)?;
    if bias.len() != dout {
        return Err(Error::shape(format!(
            "bias length {} for {dout} outputs",
            bias.len()
        )));
    }
    let mut out = Tensor::zeros(&[n, dout]);
    gemm(n, din, dout, input.data(), false, weight.data(), false, 0.0, out.data_mut());
    for row in out.data_mut().chunks_exact_mut(dout) {
        for (o, b) in row.iter_mut().zip(bias.data()) {
            *o += b;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct FcGrads {
    /// Same shape as the forward input.
    pub input: Option<Tensor>,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn fc_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    want_input: bool,
) -> Result<FcGrads> {
    let (n, din, dout) = check(input, weight)?;
    if grad_out.shape() != [n, dout] {
        return Err(Error::shape(format!(
            "fully connected grad {} for output [{n}x{dout}]",
            ShapeDisplay(grad_out.shape())
        )));
    }
    let mut gw = Tensor::zeros(&[din, dout]);
    gemm(din, n, dout, input.data(), true, grad_out.data(), false, 0.0, gw.data_mut());
    let mut gb = Tensor::zeros(&[dout]);
    for row in grad_out.data().chunks_exact(dout) {
        for (a, g) in gb.data_mut().iter_mut().zip(row) {
            *a += g;
        }
    }
    let gi = if want_input {
        let mut gi = Tensor::zeros(input.shape());
        gemm(n, dout, din, grad_out.data(), false, weight.data(), true, 0.0, gi.data_mut());
        Some(gi)
    } else {
        None
    };
    Ok(FcGrads {
        input: gi,
        weight: gw,
        bias: gb,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weight() {
        let x = Tensor::from_fn(&[2, 3], |i| i as f64 - 2.0);
        let y = fc_forward(&x, &Tensor::identity(3), &Tensor::zeros(&[3])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_input_gives_bias() {
        let b = Tensor::new(&[2], vec![0.5, -1.5]).unwrap();
        let w = Tensor::from_fn(&[4, 2], |i| i as f64);
        let y = fc_forward(&Tensor::zeros(&[3, 4]), &w, &b).unwrap();
        for row in y.data().chunks(2) {
            assert_eq!(row, b.data());
        }
    }

    #[test]
    fn flattens_trailing_axes() {
        let x = Tensor::from_fn(&[2, 2, 2, 3], |i| i as f64);
        let y = fc_forward(&x, &Tensor::zeros(&[12, 5]), &Tensor::zeros(&[5])).unwrap();
        assert_eq!(y.shape(), &[2, 5]);
        let g = fc_backward(&x, &Tensor::zeros(&[12, 5]), &y, true).unwrap();
        assert_eq!(g.input.unwrap().shape(), x.shape());
    }

    #[test]
    fn dimension_mismatch() {
        assert!(fc_forward(&Tensor::zeros(&[1, 3]), &Tensor::zeros(&[4, 2]), &Tensor::zeros(&[2])).is_err());
        assert!(fc_forward(&Tensor::zeros(&[1, 4]), &Tensor::zeros(&[4, 2]), &Tensor::zeros(&[3])).is_err());
    }
}
