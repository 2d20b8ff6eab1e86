use crate::error::{Error, Result};

/// Indices and values of the `k` largest entries of `v`, in descending value
/// order. Equal values rank the lower index first.
pub fn topk(v: &[f64], k: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    if k == 0 || k > v.len() {
        return Err(Error::Argument(format!(
            "top-k with k={k} over {} values",
            v.len()
        )));
    }
    let mut order: Vec<usize> = (0..v.len()).collect();
    // stable sort keeps ascending index order among ties
    order.sort_by(|&a, &b| v[b].total_cmp(&v[a]));
    order.truncate(k);
    let values = order.iter().map(|&i| v[i]).collect();
    Ok((order, values))
}
