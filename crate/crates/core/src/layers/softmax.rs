use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-wise softmax of an `N x K` logit matrix, shifted by the row max.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let (_, k) = logits.dims2()?;
    let mut p = logits.clone();
    for row in p.data_mut().chunks_exact_mut(k) {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Ok(p)
}

/// Mean softmax cross-entropy over the batch and its gradient with respect
/// to the logits, `(p - onehot(label)) / N`.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::shape(format!(
            "{} labels for {n} logit rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Mismatch(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let mut grad = Tensor::zeros(&[n, k]);
    let mut loss = 0.0;
    let inv_n = 1.0 / n as f64;
    for ((row, g), &label) in logits
        .data()
        .chunks_exact(k)
        .zip(grad.data_mut().chunks_exact_mut(k))
        .zip(labels)
    {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
        let log_z = z.ln();
        // -log p[label] = log z - (x_label - m)
        loss += log_z - (row[label] - m);
        for (gj, &v) in g.iter_mut().zip(row) {
            *gj = (v - m).exp() / z * inv_n;
        }
        g[label] -= inv_n;
    }
    Ok((loss * inv_n, grad))
}
