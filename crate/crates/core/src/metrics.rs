//! Two-sample distances: MMD, energy distance, and exact W1/W2.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ot::empirical_wasserstein;
use crate::rng::stream;
use crate::scalar::{sq_dist, Scalar};

/// Default per-side subsample cap used by [`report`].
pub const DEFAULT_SUBSAMPLE_CAP: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport<T> {
    pub mmd: T,
    pub w1: T,
    pub w2: T,
    pub ed: T,
    pub n_x: usize,
    pub n_y: usize,
    pub bandwidth: T,
    pub subsample_cap: usize,
}

fn check_dims<T>(x: &ArrayView2<T>, y: &ArrayView2<T>) -> Result<()> {
    if x.ncols() != y.ncols() {
        return Err(Error::shape(format!(
            "point dimensions differ: {} vs {}",
            x.ncols(),
            y.ncols()
        )));
    }
    Ok(())
}

/// Row sums of `f(a_i, b_j)` computed in parallel, then added in index order.
fn pair_sum<T: Scalar, F>(a: ArrayView2<T>, b: ArrayView2<T>, skip_diag: bool, f: F) -> T
where
    F: Fn(T) -> T + Sync,
{
    let rows: Vec<T> = (0..a.nrows())
        .into_par_iter()
        .map(|i| {
            let ai = a.row(i);
            let ai = ai.as_slice().expect("standard layout");
            let mut s = T::zero();
            for (j, bj) in b.rows().into_iter().enumerate() {
                if skip_diag && i == j {
                    continue;
                }
                s += f(sq_dist(ai, bj.as_slice().expect("standard layout")));
            }
            s
        })
        .collect();
    rows.into_iter().fold(T::zero(), |acc, s| acc + s)
}

/// Median pairwise Euclidean distance over the union of both sets.
pub fn median_bandwidth<T: Scalar>(x: ArrayView2<T>, y: ArrayView2<T>) -> Result<T> {
    check_dims(&x, &y)?;
    let z = ndarray::concatenate(Axis(0), &[x, y]).map_err(|e| Error::shape(e.to_string()))?;
    let n = z.nrows();
    if n < 2 {
        return Err(Error::invalid("bandwidth needs at least two points"));
    }
    let mut d: Vec<T> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        let zi = z.row(i);
        for j in i + 1..n {
            d.push(
                zi.iter()
                    .zip(z.row(j).iter())
                    .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b))
                    .sqrt(),
            );
        }
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, |a, b| a.partial_cmp(b).expect("finite"));
    Ok(*m)
}

fn resolve_bandwidth<T: Scalar>(x: ArrayView2<T>, y: ArrayView2<T>, bandwidth: Option<T>) -> Result<T> {
    let h = match bandwidth {
        Some(h) => h,
        None => median_bandwidth(x, y)?,
    };
    if !(h > T::zero()) || !h.is_finite() {
        return Err(Error::invalid(
            "kernel bandwidth is zero: the point sets are degenerate (all points identical); \
             pass an explicit positive bandwidth",
        ));
    }
    Ok(h)
}

/// Unbiased Gaussian-kernel MMD², clipped at zero and square-rooted.
///
/// `bandwidth` `None` selects the median heuristic. Returns the value and
/// the bandwidth used.
pub fn mmd<T: Scalar>(x: ArrayView2<T>, y: ArrayView2<T>, bandwidth: Option<T>) -> Result<(T, T)> {
    check_dims(&x, &y)?;
    let (m, n) = (x.nrows(), y.nrows());
    if m < 2 || n < 2 {
        return Err(Error::invalid("unbiased MMD needs at least two points per set"));
    }
    let h = resolve_bandwidth(x, y, bandwidth)?;
    let gamma = T::one() / (T::lit(2.0) * h * h);
    let k = |d2: T| (-gamma * d2).exp();
    let (mf, nf) = (T::from_usize_lossy(m), T::from_usize_lossy(n));
    let kxx = pair_sum(x, x, true, k) / (mf * (mf - T::one()));
    let kyy = pair_sum(y, y, true, k) / (nf * (nf - T::one()));
    let kxy = pair_sum(x, y, false, k) / (mf * nf);
    let m2 = kxx + kyy - T::lit(2.0) * kxy;
    Ok((m2.max(T::zero()).sqrt(), h))
}

/// Biased (V-statistic) Gaussian-kernel MMD.
pub fn mmd_biased<T: Scalar>(x: ArrayView2<T>, y: ArrayView2<T>, bandwidth: T) -> Result<T> {
    check_dims(&x, &y)?;
    if x.nrows() == 0 || y.nrows() == 0 {
        return Err(Error::invalid("MMD needs nonempty point sets"));
    }
    let h = resolve_bandwidth(x, y, Some(bandwidth))?;
    let gamma = T::one() / (T::lit(2.0) * h * h);
    let k = |d2: T| (-gamma * d2).exp();
    let (mf, nf) = (T::from_usize_lossy(x.nrows()), T::from_usize_lossy(y.nrows()));
    let m2 = pair_sum(x, x, false, k) / (mf * mf) + pair_sum(y, y, false, k) / (nf * nf)
        - T::lit(2.0) * pair_sum(x, y, false, k) / (mf * nf);
    Ok(m2.max(T::zero()).sqrt())
}

/// Energy distance `sqrt(2E‖x−y‖ − E‖x−x′‖ − E‖y−y′‖)` in V-statistic form.
pub fn energy_distance<T: Scalar>(x: ArrayView2<T>, y: ArrayView2<T>) -> Result<T> {
    check_dims(&x, &y)?;
    if x.nrows() == 0 || y.nrows() == 0 {
        return Err(Error::invalid("energy distance needs nonempty point sets"));
    }
    let (mf, nf) = (T::from_usize_lossy(x.nrows()), T::from_usize_lossy(y.nrows()));
    let dist = |d2: T| d2.sqrt();
    let exy = pair_sum(x, y, false, dist) / (mf * nf);
    let exx = pair_sum(x, x, false, dist) / (mf * mf);
    let eyy = pair_sum(y, y, false, dist) / (nf * nf);
    let e2 = T::lit(2.0) * exy - exx - eyy;
    Ok(e2.max(T::zero()).sqrt())
}

fn subsample<T: Scalar>(x: ArrayView2<T>, cap: usize, seed: u64, side: u64) -> Array2<T> {
    if x.nrows() <= cap {
        return x.as_standard_layout().into_owned();
    }
    let mut rng = stream(&[seed, side, x.nrows() as u64]);
    let mut idx = sample(&mut rng, x.nrows(), cap).into_vec();
    idx.sort_unstable();
    x.select(Axis(0), &idx)
}

/// All four metrics on a shared seeded subsample of at most `cap` points
/// per side.
pub fn report<T: Scalar>(x: ArrayView2<T>, y: ArrayView2<T>, seed: u64) -> Result<MetricReport<T>> {
    report_capped(x, y, seed, DEFAULT_SUBSAMPLE_CAP)
}

pub fn report_capped<T: Scalar>(
    x: ArrayView2<T>,
    y: ArrayView2<T>,
    seed: u64,
    cap: usize,
) -> Result<MetricReport<T>> {
    check_dims(&x, &y)?;
    if cap == 0 {
        return Err(Error::invalid("subsample cap must be positive"));
    }
    let xs = subsample(x, cap, seed, 0);
    let ys = subsample(y, cap, seed, 1);
    let (mmd, bandwidth) = mmd(xs.view(), ys.view(), None)?;
    let ed = energy_distance(xs.view(), ys.view())?;
    let w1 = empirical_wasserstein(xs.view(), ys.view(), 1)?;
    let w2 = empirical_wasserstein(xs.view(), ys.view(), 2)?;
    let r = MetricReport {
        mmd,
        w1,
        w2,
        ed,
        n_x: xs.nrows(),
        n_y: ys.nrows(),
        bandwidth,
        subsample_cap: cap,
    };
    if [r.mmd, r.w1, r.w2, r.ed].iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("metric report"));
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn singleton_energy_distance() {
        let x = array![[0.0]];
        let y = array![[2.0]];
        assert_eq!(energy_distance(x.view(), y.view()).unwrap(), 2.0);
    }

    #[test]
    fn identical_sets_are_zero() {
        let x = array![[0.0, 1.0], [1.0, 0.5], [2.0, -1.0]];
        assert_eq!(energy_distance(x.view(), x.view()).unwrap(), 0.0);
        assert_eq!(mmd(x.view(), x.view(), None).unwrap().0, 0.0);
        assert!(mmd_biased(x.view(), x.view(), 1.0).unwrap() < 1e-7);
    }

    #[test]
    fn degenerate_bandwidth_rejected() {
        let x = array![[1.0, 1.0], [1.0, 1.0]];
        let err = mmd(x.view(), x.view(), None).unwrap_err();
        assert!(err.to_string().contains("bandwidth"));
    }

    #[test]
    fn three_point_closed_form() {
        let x = array![[0.0], [1.0]];
        let y = array![[3.0], [4.0]];
        let h = 1.0f64;
        let k = |d: f64| (-(d * d) / (2.0 * h * h)).exp();
        let kxx = 2.0 * k(1.0) / 2.0;
        let kyy = 2.0 * k(1.0) / 2.0;
        let kxy = (k(3.0) + k(4.0) + k(2.0) + k(3.0)) / 4.0;
        let expect = (kxx + kyy - 2.0 * kxy).max(0.0).sqrt();
        let (got, bw) = mmd(x.view(), y.view(), Some(h)).unwrap();
        assert_eq!(bw, 1.0);
        assert!((got - expect).abs() < 1e-14);
    }
}
