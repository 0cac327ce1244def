use crate::error::{Error, Result};
use crate::tensor::{ShapeDisplay, Tensor};

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|x| x.max(0.0))
}

/// Passes `grad_out` where the forward input was strictly positive. The
/// subgradient at exactly zero is taken as zero.
///
/// The mask only depends on the sign, so the forward *output* may be passed in
/// place of the input.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if input.shape() != grad_out.shape() {
        return Err(Error::shape(format!(
            "relu grad {} vs input {}",
            ShapeDisplay(grad_out.shape()),
            ShapeDisplay(input.shape())
        )));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clamps_negative() {
        let x = Tensor::new(&[3], vec![-1., 0., 2.]).unwrap();
        assert_eq!(relu(&x).data(), &[0., 0., 2.]);
        let g = relu_backward(&x, &Tensor::filled(&[3], 5.0)).unwrap();
        assert_eq!(g.data(), &[0., 0., 5.]);
    }

    #[test]
    fn all_negative() {
        let x = Tensor::filled(&[2, 2], -3.0);
        assert_eq!(relu(&x), Tensor::zeros(&[2, 2]));
        assert_eq!(
            relu_backward(&x, &Tensor::filled(&[2, 2], 1.0)).unwrap(),
            Tensor::zeros(&[2, 2])
        );
    }
}
