use crate::error::{Error, Result};
use crate::tensor::{ShapeDisplay, Tensor};

/// Concatenates NHWC tensors along the channel axis, in argument order.
pub fn concat_channels(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::Empty("concat of zero tensors".into()))?;
    let (n, h, w, _) = first.dims4()?;
    let mut widths = Vec::with_capacity(inputs.len());
    for t in inputs {
        let (tn, th, tw, tc) = t.dims4()?;
        if (tn, th, tw) != (n, h, w) {
            return Err(Error::shape(format!(
                "cannot concat {} with {}: spatial extents differ",
                ShapeDisplay(t.shape()),
                ShapeDisplay(first.shape())
            )));
        }
        widths.push(tc);
    }
    let total: usize = widths.iter().sum();
    let mut out = Tensor::zeros(&[n, h, w, total]);
    let dst = out.data_mut();
    let mut at = 0;
    for (t, &c) in inputs.iter().zip(&widths) {
        for (pix, src) in t.data().chunks_exact(c).enumerate() {
            dst[pix * total + at..][..c].copy_from_slice(src);
        }
        at += c;
    }
    Ok(out)
}

/// Inverse of [`concat_channels`]: cuts the channel axis into consecutive
/// slices of the given extents.
pub fn split_channels(grad: &Tensor, extents: &[usize]) -> Result<Vec<Tensor>> {
    let (n, h, w, c) = grad.dims4()?;
    if extents.iter().sum::<usize>() != c {
        return Err(Error::shape(format!(
            "split extents {extents:?} do not sum to {c} channels"
        )));
    }
    let mut parts = Vec::with_capacity(extents.len());
    let mut at = 0;
    for &e in extents {
        let mut part = Tensor::zeros(&[n, h, w, e]);
        for (pix, dst) in part.data_mut().chunks_exact_mut(e).enumerate() {
            dst.copy_from_slice(&grad.data()[pix * c + at..][..e]);
        }
        parts.push(part);
        at += e;
    }
    Ok(parts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stream_concat_width() {
        let a = Tensor::zeros(&[1, 27, 27, 400]);
        let b = Tensor::zeros(&[1, 27, 27, 300]);
        assert_eq!(concat_channels(&[&a, &b]).unwrap().shape(), &[1, 27, 27, 700]);
    }

    #[test]
    fn single_input_identity() {
        let a = Tensor::from_fn(&[2, 2, 3, 4], |i| i as f64);
        assert_eq!(concat_channels(&[&a]).unwrap(), a);
    }

    #[test]
    fn layout_and_inverse() {
        let a = Tensor::from_fn(&[1, 1, 2, 2], |i| i as f64);
        let b = Tensor::from_fn(&[1, 1, 2, 1], |i| 10.0 + i as f64);
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.data(), &[0., 1., 10., 2., 3., 11.]);
        let parts = split_channels(&c, &[2, 1]).unwrap();
        assert_eq!(parts, vec![a, b]);
    }

    #[test]
    fn spatial_mismatch() {
        let a = Tensor::zeros(&[1, 3, 3, 2]);
        let b = Tensor::zeros(&[1, 3, 4, 2]);
        assert!(matches!(concat_channels(&[&a, &b]), Err(Error::Shape(_))));
        assert!(split_channels(&a, &[1, 2]).is_err());
    }
}
