use ndarray::{Array2, ArrayView2};

use super::{CostMatrix, Metric, Pairing};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default upper bound on the batch size accepted by [`assignment_pairing`].
pub const DEFAULT_PAIRING_CAP: usize = 512;

/// Minimum squared-Euclidean pairing between two equal-size batches.
pub fn assignment_pairing<T: Scalar>(a: ArrayView2<T>, b: ArrayView2<T>) -> Result<Pairing> {
    assignment_pairing_capped(a, b, DEFAULT_PAIRING_CAP)
}

pub fn assignment_pairing_capped<T: Scalar>(
    a: ArrayView2<T>,
    b: ArrayView2<T>,
    cap: usize,
) -> Result<Pairing> {
    if a.nrows() != b.nrows() {
        return Err(Error::shape(format!(
            "pairing needs equal batch sizes, got {} and {}",
            a.nrows(),
            b.nrows()
        )));
    }
    if a.nrows() > cap {
        return Err(Error::CapExceeded {
            what: "batch size",
            value: a.nrows(),
            cap,
            hint: "lower the batch size or raise the pairing cap",
        });
    }
    let cost = CostMatrix::between(a, b, Metric::SqEuclidean)?;
    Ok(Pairing {
        perm: solve_assignment(&cost.entries)?,
    })
}

/// Rectangular linear assignment (rows ≤ columns) by shortest augmenting
/// paths. Returns the column assigned to each row.
pub fn solve_assignment<T: Scalar>(cost: &Array2<T>) -> Result<Vec<usize>> {
    let (nr, nc) = cost.dim();
    if nr > nc {
        return Err(Error::shape(format!(
            "assignment needs rows <= columns, got {nr}x{nc}"
        )));
    }
    if cost.iter().any(|x| !x.is_finite()) {
        return Err(Error::non_finite("assignment cost"));
    }
    const NONE: usize = usize::MAX;
    let inf = T::infinity();
    let mut u = vec![T::zero(); nr];
    let mut v = vec![T::zero(); nc];
    let mut shortest = vec![inf; nc];
    let mut path = vec![NONE; nc];
    let mut col4row = vec![NONE; nr];
    let mut row4col = vec![NONE; nc];
    let mut sr = vec![false; nr];
    let mut sc = vec![false; nc];
    let mut remaining = vec![0usize; nc];

    for cur in 0..nr {
        let mut min_val = T::zero();
        let mut num_remaining = nc;
        for (it, r) in remaining.iter_mut().enumerate() {
            *r = nc - it - 1;
        }
        sr.iter_mut().for_each(|x| *x = false);
        sc.iter_mut().for_each(|x| *x = false);
        shortest.iter_mut().for_each(|x| *x = inf);

        let mut sink = NONE;
        let mut i = cur;
        while sink == NONE {
            let mut index = NONE;
            let mut lowest = inf;
            sr[i] = true;
            for it in 0..num_remaining {
                let j = remaining[it];
                let r = min_val + cost[[i, j]] - u[i] - v[j];
                if r < shortest[j] {
                    path[j] = i;
                    shortest[j] = r;
                }
                if shortest[j] < lowest || (shortest[j] == lowest && row4col[j] == NONE) {
                    lowest = shortest[j];
                    index = it;
                }
            }
            min_val = lowest;
            if index == NONE || !min_val.is_finite() {
                return Err(Error::Infeasible("assignment has no feasible completion".into()));
            }
            let j = remaining[index];
            if row4col[j] == NONE {
                sink = j;
            } else {
                i = row4col[j];
            }
            sc[j] = true;
            num_remaining -= 1;
            remaining[index] = remaining[num_remaining];
        }

        u[cur] += min_val;
        for r in 0..nr {
            if sr[r] && r != cur {
                u[r] += min_val - shortest[col4row[r]];
            }
        }
        for c in 0..nc {
            if sc[c] {
                v[c] -= min_val - shortest[c];
            }
        }

        let mut j = sink;
        loop {
            let r = path[j];
            row4col[j] = r;
            std::mem::swap(&mut col4row[r], &mut j);
            if r == cur {
                break;
            }
        }
    }
    Ok(col4row)
}
