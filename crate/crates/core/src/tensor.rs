//! Dense row-major `f64` tensors and the matrix kernels every layer is built on.
//!
//! Activations are laid out batch, height, width, channels (NHWC); kernels are
//! kh, kw, in-channels, out-channels. With that layout the pixels of one image
//! form a contiguous `(H*W) x C` matrix, which is what the 1x1 path multiplies.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{}", ShapeDisplay(&self.shape))?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

/// Formats a shape as `[a x b x c]`.
pub struct ShapeDisplay<'a>(pub &'a [usize]);

impl fmt::Display for ShapeDisplay<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, "x")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, "]")
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::shape("tensor needs at least one dimension"));
    }
    if shape.contains(&0) {
        return Err(Error::shape(format!(
            "zero extent in shape {}",
            ShapeDisplay(shape)
        )));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != data.len() {
            return Err(Error::shape(format!(
                "shape {} holds {} elements but {} were supplied",
                ShapeDisplay(shape),
                len,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// # Panics
    /// If any extent is zero.
    pub fn zeros(shape: &[usize]) -> Self {
        let len = check_shape(shape).expect("invalid shape");
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {} into {}",
                ShapeDisplay(&self.shape),
                ShapeDisplay(shape)
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Splits an NHWC activation shape into its four extents.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, h, w, c] => Ok((n, h, w, c)),
            _ => Err(Error::shape(format!(
                "expected a rank-4 tensor, got {}",
                ShapeDisplay(&self.shape)
            ))),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(format!(
                "expected a matrix, got {}",
                ShapeDisplay(&self.shape)
            ))),
        }
    }

    /// Row-major flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                debug_assert!(i < d);
                acc * d + i
            })
    }

    /// Inverse of [`Tensor::offset`].
    pub fn unravel(&self, mut offset: usize) -> Vec<usize> {
        let mut index = vec![0; self.shape.len()];
        for (slot, &d) in index.iter_mut().zip(&self.shape).rev() {
            *slot = offset % d;
            offset /= d;
        }
        index
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, alpha: f64) -> Self {
        self.map(|v| alpha * v)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "cannot add {} to {}",
                ShapeDisplay(&other.shape),
                ShapeDisplay(&self.shape)
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Copies sample `n` of a batched tensor out as a batch of one.
    pub fn sample(&self, n: usize) -> Tensor {
        let per = self.data.len() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor {
            shape,
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    /// Stacks equally-shaped tensors along a new leading batch axis.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Empty("nothing to stack".into()))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shape(format!(
                    "cannot stack {} with {}",
                    ShapeDisplay(&t.shape),
                    ShapeDisplay(&first.shape)
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(&shape, data)
    }
}

/// Row-major GEMM on raw slices: `c = op(a) * op(b) + beta * c`, where
/// `op(a)` is `m x k` and `op(b)` is `k x n`.
///
/// Single threaded, so the reduction order (and therefore every rounding)
/// is fixed for a given machine.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the slices, and `c` does not alias `a` or `b` (distinct borrows).
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

/// Matrix product of an `m x k` and a `k x n` matrix.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner extents differ: {} x {}",
            ShapeDisplay(a.shape()),
            ShapeDisplay(b.shape())
        )));
    }
    let mut c = Tensor::zeros(&[m, n]);
    gemm(m, k, n, a.data(), false, b.data(), false, 0.0, c.data_mut());
    Ok(c)
}

/// Index of the largest element; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> Result<usize> {
    if v.is_empty() {
        return Err(Error::Empty("argmax of an empty vector".into()));
    }
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Sliding-window geometry shared by convolution, im2col and pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    pub fn new(kh: usize, kw: usize, stride: usize, pad: usize) -> Self {
        Window { kh, kw, stride, pad }
    }

    /// Output extent along one axis; errors unless `(len + 2*pad - k)` is a
    /// non-negative multiple of the stride.
    pub fn out_extent(&self, len: usize, k: usize) -> Result<usize> {
        if self.stride == 0 {
            return Err(Error::config("stride must be at least 1"));
        }
        let padded = len + 2 * self.pad;
        if padded < k {
            return Err(Error::config(format!(
                "window {k} larger than padded extent {padded}"
            )));
        }
        if !(padded - k).is_multiple_of(self.stride) {
            return Err(Error::config(format!(
                "({padded} - {k}) / {} is not integral",
                self.stride
            )));
        }
        Ok((padded - k) / self.stride + 1)
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((self.out_extent(h, self.kh)?, self.out_extent(w, self.kw)?))
    }
}

/// Lowers one `h x w x c` image (a raw slice) into the `(ho*wo) x (kh*kw*c)`
/// patch matrix. Padding contributes zeros.
pub(crate) fn im2col_slice(
    src: &[f64],
    h: usize,
    w: usize,
    c: usize,
    win: &Window,
    ho: usize,
    wo: usize,
    out: &mut [f64],
) {
    let row_len = win.kh * win.kw * c;
    debug_assert_eq!(out.len(), ho * wo * row_len);
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &mut out[(oy * wo + ox) * row_len..][..row_len];
            for dy in 0..win.kh {
                let iy = (oy * win.stride + dy) as isize - win.pad as isize;
                for dx in 0..win.kw {
                    let ix = (ox * win.stride + dx) as isize - win.pad as isize;
                    let dst = &mut row[(dy * win.kw + dx) * c..][..c];
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                        dst.fill(0.0);
                    } else {
                        let s = (iy as usize * w + ix as usize) * c;
                        dst.copy_from_slice(&src[s..s + c]);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col_slice`]: scatters patch-matrix rows back onto the
/// image, summing where receptive fields overlap.
pub(crate) fn col2im_slice(
    cols: &[f64],
    h: usize,
    w: usize,
    c: usize,
    win: &Window,
    ho: usize,
    wo: usize,
    dst: &mut [f64],
) {
    let row_len = win.kh * win.kw * c;
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &cols[(oy * wo + ox) * row_len..][..row_len];
            for dy in 0..win.kh {
                let iy = (oy * win.stride + dy) as isize - win.pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for dx in 0..win.kw {
                    let ix = (ox * win.stride + dx) as isize - win.pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let d = (iy as usize * w + ix as usize) * c;
                    let s = &row[(dy * win.kw + dx) * c..][..c];
                    for (a, b) in dst[d..d + c].iter_mut().zip(s) {
                        *a += b;
                    }
                }
            }
        }
    }
}

/// Receptive-field matrix of an `H x W x C` image (rank 3, or rank 4 with a
/// batch of one). Row `r` is output position `r` in raster order; columns run
/// over `(dy, dx, channel)`.
pub fn im2col(input: &Tensor, win: &Window) -> Result<Tensor> {
    let (h, w, c) = match input.shape()[..] {
        [h, w, c] | [1, h, w, c] => (h, w, c),
        _ => {
            return Err(Error::shape(format!(
                "im2col expects one H x W x C image, got {}",
                ShapeDisplay(input.shape())
            )))
        }
    };
    let (ho, wo) = win.out_hw(h, w)?;
    let mut out = Tensor::zeros(&[ho * wo, win.kh * win.kw * c]);
    im2col_slice(input.data(), h, w, c, win, ho, wo, out.data_mut());
    Ok(out)
}
