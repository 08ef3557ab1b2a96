use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<S: Scalar>(logits: ArrayView2<'_, S>) -> Array2<S> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: S = row.iter().copied().sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Per-row cross-entropy losses and the softmax probabilities.
pub fn softmax_xent_rows<S: Scalar>(
    logits: ArrayView2<'_, S>,
    labels: &[usize],
) -> Result<(Vec<S>, Array2<S>)> {
    if labels.len() != logits.nrows() {
        return Err(Error::shape(
            "labels per logit row",
            logits.nrows(),
            labels.len(),
        ));
    }
    let k = logits.ncols();
    let mut losses = Vec::with_capacity(labels.len());
    for (row, &y) in logits.rows().into_iter().zip(labels) {
        if y >= k {
            return Err(Error::Index {
                context: "class label".into(),
                index: y,
                bound: k,
            });
        }
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
        losses.push(lse - row[y]);
    }
    Ok((losses, softmax_rows(logits)))
}

/// Mean softmax cross-entropy and its gradient with respect to the logits,
/// `(softmax - onehot) / rows`.
pub fn softmax_cross_entropy<S: Scalar>(
    logits: ArrayView2<'_, S>,
    labels: &[usize],
) -> Result<(S, Array2<S>)> {
    let (losses, mut grad) = softmax_xent_rows(logits, labels)?;
    let n = S::of(labels.len().max(1) as f64);
    let loss = losses.iter().copied().sum::<S>() / n;
    for (mut row, &y) in grad.rows_mut().into_iter().zip(labels) {
        row[y] -= S::one();
        row.mapv_inplace(|v| v / n);
    }
    Ok((loss, grad))
}
