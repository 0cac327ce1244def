//! Cross-channel local response normalization.
//!
//! For every pixel the channel vector `x` is mapped to
//!
//! ```text
//! s(x_c) = (k + (alpha / n) * sum_{c' in window(c)} x_{c'}^2) ^ beta
//! out_c  = x_c / s(x_c)
//! ```
//!
//! where `window(c) = [c - n/2, c + n/2]` clipped to the channel range, i.e.
//! zero padding at both ends. There is no spatial extent. The normalizer
//! formula only defines the denominator; the layer divides each input by it.

use crate::error::{Error, Result};
use crate::tensor::{ShapeDisplay, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrnParams {
    /// Local region size, in channels.
    pub size: usize,
    pub k: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LrnParams {
    fn default() -> Self {
        LrnParams {
            size: 5,
            k: 2.0,
            alpha: 1e-4,
            beta: 0.75,
        }
    }
}

impl LrnParams {
    pub fn new(size: usize, k: f64, alpha: f64, beta: f64) -> Result<Self> {
        let p = LrnParams {
            size,
            k,
            alpha,
            beta,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || !(self.k > 0.0) || !(self.alpha >= 0.0) || !(self.beta > 0.0) {
            return Err(Error::config(format!(
                "LRN needs n >= 1, k > 0, alpha >= 0, beta > 0; got {self:?}"
            )));
        }
        Ok(())
    }

    fn half(&self) -> usize {
        self.size / 2
    }
}

/// Which adjoint [`lrn_backward_with`] evaluates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LrnAdjoint {
    #[default]
    Exact,
    /// Keeps only the `c' == c` term of the shared-denominator derivative.
    /// This is wrong on purpose; it exists so gradient checks can be shown to
    /// catch a broken backward pass.
    DropCrossTerms,
}

/// Sum of squares over each channel's window, for one pixel.
fn window_energy(x: &[f64], half: usize, out: &mut [f64]) {
    let c = x.len();
    for (ch, e) in out.iter_mut().enumerate() {
        let lo = ch.saturating_sub(half);
        let hi = (ch + half).min(c - 1);
        *e = x[lo..=hi].iter().map(|v| v * v).sum();
    }
}

fn channels(input: &Tensor) -> usize {
    *input.shape().last().expect("tensor has rank >= 1")
}

pub fn lrn_forward(input: &Tensor, p: &LrnParams) -> Result<Tensor> {
    p.validate()?;
    let c = channels(input);
    let scale = p.alpha / p.size as f64;
    let mut out = Tensor::zeros(input.shape());
    let mut energy = vec![0.0; c];
    for (x, y) in input
        .data()
        .chunks_exact(c)
        .zip(out.data_mut().chunks_exact_mut(c))
    {
        window_energy(x, p.half(), &mut energy);
        for ((yo, &xi), &e) in y.iter_mut().zip(x).zip(&energy) {
            *yo = xi / (p.k + scale * e).powf(p.beta);
        }
    }
    Ok(out)
}

pub fn lrn_backward(input: &Tensor, p: &LrnParams, grad_out: &Tensor) -> Result<Tensor> {
    lrn_backward_with(input, p, grad_out, LrnAdjoint::Exact)
}

/// With `d_c = k + (alpha/n) * E_c`:
///
/// ```text
/// dL/dx_m = g_m * d_m^-beta
///         - (2 alpha beta / n) * x_m * sum_{c : m in window(c)} g_c x_c d_c^(-beta-1)
/// ```
///
/// The window relation is symmetric, so the inner sum runs over `window(m)`.
pub fn lrn_backward_with(
    input: &Tensor,
    p: &LrnParams,
    grad_out: &Tensor,
    adjoint: LrnAdjoint,
) -> Result<Tensor> {
    p.validate()?;
    if input.shape() != grad_out.shape() {
        return Err(Error::shape(format!(
            "LRN grad {} vs input {}",
            ShapeDisplay(grad_out.shape()),
            ShapeDisplay(input.shape())
        )));
    }
    let c = channels(input);
    let half = p.half();
    let scale = p.alpha / p.size as f64;
    let coef = 2.0 * p.alpha * p.beta / p.size as f64;
    let mut grad_in = Tensor::zeros(input.shape());
    let mut energy = vec![0.0; c];
    let mut inv_pow = vec![0.0; c];
    let mut cross = vec![0.0; c];
    for ((x, g), gi) in input
        .data()
        .chunks_exact(c)
        .zip(grad_out.data().chunks_exact(c))
        .zip(grad_in.data_mut().chunks_exact_mut(c))
    {
        window_energy(x, half, &mut energy);
        for ch in 0..c {
            let d = p.k + scale * energy[ch];
            inv_pow[ch] = d.powf(-p.beta);
            cross[ch] = g[ch] * x[ch] * inv_pow[ch] / d;
        }
        for m in 0..c {
            let s = match adjoint {
                LrnAdjoint::Exact => {
                    let lo = m.saturating_sub(half);
                    let hi = (m + half).min(c - 1);
                    cross[lo..=hi].iter().sum::<f64>()
                }
                LrnAdjoint::DropCrossTerms => cross[m],
            };
            gi[m] = g[m] * inv_pow[m] - coef * x[m] * s;
        }
    }
    Ok(grad_in)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_in_zero_out() {
        let z = Tensor::zeros(&[1, 2, 2, 7]);
        assert_eq!(lrn_forward(&z, &LrnParams::default()).unwrap(), z);
    }

    #[test]
    fn constant_channels_against_scalar_oracle() {
        let p = LrnParams::default();
        let x = Tensor::filled(&[1, 1, 1, 96], 2.0);
        let y = lrn_forward(&x, &p).unwrap();
        // window member count per channel, computed independently
        for c in 0..96usize {
            let members = (0..96i64)
                .filter(|&o| (o - c as i64).abs() <= 2)
                .count() as f64;
            let expect = 2.0 / (2.0 + (1e-4 / 5.0) * 4.0 * members).powf(0.75);
            assert!((y.data()[c] - expect).abs() < 1e-15);
        }
        let interior = 2.0 / (2.0f64 + (1e-4 / 5.0) * 20.0).powf(0.75);
        assert_eq!(y.data()[50], interior);
        assert!(y.data()[0] > interior);
    }

    #[test]
    fn degenerate_normalization_is_identity() {
        let x = Tensor::from_fn(&[1, 2, 3, 6], |i| i as f64 - 10.0);
        let p = LrnParams::new(5, 1.0, 0.0, 0.3).unwrap();
        assert_eq!(lrn_forward(&x, &p).unwrap(), x);
    }

    #[test]
    fn constant_denominator_backward() {
        let x = Tensor::from_fn(&[1, 1, 2, 5], |i| i as f64 * 0.7 - 1.0);
        let g = Tensor::from_fn(&[1, 1, 2, 5], |i| 1.0 - i as f64 * 0.3);
        let p = LrnParams::new(3, 2.0, 0.0, 0.75).unwrap();
        let gi = lrn_backward(&x, &p, &g).unwrap();
        let d = 2.0f64.powf(0.75);
        for (a, b) in gi.data().iter().zip(g.data()) {
            assert!((a - b / d).abs() < 1e-15);
        }
        let zero = lrn_backward(&x, &LrnParams::default(), &Tensor::zeros(x.shape())).unwrap();
        assert_eq!(zero.max_abs(), 0.0);
    }

    #[test]
    fn invalid_params() {
        assert!(LrnParams::new(0, 2.0, 1e-4, 0.75).is_err());
        assert!(LrnParams::new(5, 0.0, 1e-4, 0.75).is_err());
        assert!(LrnParams::new(5, 2.0, -1.0, 0.75).is_err());
        assert!(LrnParams::new(5, 2.0, 1e-4, 0.0).is_err());
    }
}
