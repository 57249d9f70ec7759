use crate::error::{Error, Result};
use crate::matrix::Matrix;

use super::normalize_rows;

/// Zeroes the `⌊ratio · total⌋` smallest-magnitude entries using one global
/// threshold. Ties are broken by position, so exactly that many entries are
/// removed. With `renormalize`, rows are then ε-normalized, which turns any
/// emptied row into a uniform one.
pub fn prune_ratio(matrix: &Matrix, ratio: f64, renormalize: bool, epsilon: f64) -> Result<Matrix> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!(
            "pruning ratio {ratio} outside [0, 1)"
        )));
    }
    if let Some(v) = matrix
        .as_slice()
        .iter()
        .find(|v| !v.is_finite() || **v < 0.0)
    {
        return Err(Error::Domain(format!("cannot prune entry {v}")));
    }
    let total = matrix.len();
    let count = (ratio * total as f64).floor() as usize;
    let mut out = matrix.clone();
    if count > 0 {
        let data = out.as_mut_slice();
        let mut order: Vec<usize> = (0..total).collect();
        order.select_nth_unstable_by(count - 1, |&a, &b| {
            data[a].abs().total_cmp(&data[b].abs()).then(a.cmp(&b))
        });
        for &i in &order[..count] {
            data[i] = 0.0;
        }
    }
    if renormalize {
        out = normalize_rows(&out, epsilon)?;
    }
    Ok(out)
}
