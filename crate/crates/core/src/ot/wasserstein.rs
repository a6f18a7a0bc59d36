use ndarray::ArrayView2;

use super::{solve_assignment, solve_transport, CostMatrix, Metric};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Exact Wasserstein distance between two uniformly weighted point sets.
///
/// `order` 1 uses Euclidean cost; `order` 2 returns the square root of the
/// optimal squared-Euclidean cost. Equal-size sets go through the
/// assignment solver, which is exact for uniform weights.
pub fn empirical_wasserstein<T: Scalar>(
    x: ArrayView2<T>,
    y: ArrayView2<T>,
    order: u8,
) -> Result<T> {
    if x.nrows() == 0 || y.nrows() == 0 {
        return Err(Error::invalid("Wasserstein distance needs nonempty point sets"));
    }
    let metric = match order {
        1 => Metric::Euclidean,
        2 => Metric::SqEuclidean,
        o => return Err(Error::invalid(format!("unsupported Wasserstein order {o}"))),
    };
    let cost = CostMatrix::between(x, y, metric)?;
    let value = if x.nrows() == y.nrows() {
        let cols = solve_assignment(&cost.entries)?;
        let total: T = cols
            .iter()
            .enumerate()
            .map(|(i, &j)| cost.entries[[i, j]])
            .sum();
        total / T::from_usize_lossy(x.nrows())
    } else {
        let p = vec![T::one() / T::from_usize_lossy(x.nrows()); x.nrows()];
        let q = vec![T::one() / T::from_usize_lossy(y.nrows()); y.nrows()];
        solve_transport(&cost, &p, &q)?.0.objective
    };
    let value = value.max(T::zero());
    Ok(if order == 2 { value.sqrt() } else { value })
}
