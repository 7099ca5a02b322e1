use std::cmp::Ordering;

use super::Tensor;
use crate::error::{Error, Result};

/// Indices of the `k` rows with the largest Euclidean norm, in descending
/// norm order. Equal norms resolve to the lower row index.
pub fn topk_rows_by_l2(x: &Tensor, k: usize) -> Result<Vec<usize>> {
    if x.rank() == 0 {
        return Err(Error::Dimension("topk on a scalar".into()));
    }
    topk_by_value(&x.row_norms(), k)
}

/// Top-`k` positions of a vector of non-negative scores with the same
/// tie-break as [`topk_rows_by_l2`].
pub(crate) fn topk_by_value(values: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > values.len() {
        return Err(Error::Parameter(format!(
            "top-k needs 1 ≤ k ≤ T, got k = {k}, T = {}",
            values.len()
        )));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    Ok(order)
}
