use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::GmmMeasure;
use crate::error::{Error, Result};
use crate::ot::TransportPlan;
use crate::scalar::sq_dist;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub measure: GmmMeasure,
    pub plan: TransportPlan<f64>,
    /// Mode index absorbing each target atom.
    pub assignment: Vec<usize>,
    pub mw2: f64,
    /// Objective after every alternating iteration of the winning restart.
    pub history: Vec<f64>,
}

fn row<'a>(a: ArrayView2<'a, f64>, i: usize) -> &'a [f64] {
    a.index_axis_move(Axis(0), i)
        .to_slice()
        .expect("standard layout")
}

/// Nearest center for each atom; ties go to the lowest index.
fn assign(gamma: ArrayView2<f64>, centers: &Array2<f64>) -> Vec<usize> {
    (0..gamma.nrows())
        .map(|j| {
            let g = row(gamma, j);
            let mut best = (f64::INFINITY, 0);
            for i in 0..centers.nrows() {
                let d = sq_dist(row(centers.view(), i), g);
                if d < best.0 {
                    best = (d, i);
                }
            }
            best.1
        })
        .collect()
}

fn objective(gamma: ArrayView2<f64>, q: &[f64], centers: &Array2<f64>, a: &[usize]) -> f64 {
    a.iter()
        .enumerate()
        .map(|(j, &i)| q[j] * sq_dist(row(centers.view(), i), row(gamma, j)))
        .sum()
}

/// Weighted centroids; empty clusters keep their previous center.
fn update(gamma: ArrayView2<f64>, q: &[f64], a: &[usize], centers: &mut Array2<f64>) -> Vec<f64> {
    let (k, d) = centers.dim();
    let mut mass = vec![0.0; k];
    let mut acc = Array2::<f64>::zeros((k, d));
    for (j, &i) in a.iter().enumerate() {
        mass[i] += q[j];
        for c in 0..d {
            acc[[i, c]] += q[j] * gamma[[j, c]];
        }
    }
    for i in 0..k {
        if mass[i] > 0.0 {
            for c in 0..d {
                centers[[i, c]] = acc[[i, c]] / mass[i];
            }
        }
    }
    mass
}

fn seed_centers<R: Rng + ?Sized>(gamma: ArrayView2<f64>, q: &[f64], k: usize, rng: &mut R) -> Array2<f64> {
    let nj = gamma.nrows();
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    let mut d2 = vec![f64::INFINITY; nj];
    let pick = |weights: &[f64], rng: &mut R| -> Option<usize> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return None;
        }
        let mut u = rng.random::<f64>() * total;
        for (j, &w) in weights.iter().enumerate() {
            if w > 0.0 {
                if u < w {
                    return Some(j);
                }
                u -= w;
            }
        }
        weights.iter().rposition(|&w| w > 0.0)
    };
    while chosen.len() < k {
        let weights: Vec<f64> = (0..nj)
            .map(|j| if chosen.contains(&j) { 0.0 } else if chosen.is_empty() { q[j] } else { q[j] * d2[j] })
            .collect();
        let j = pick(&weights, rng).unwrap_or_else(|| {
            // Remaining atoms coincide with chosen ones or carry no mass.
            let free: Vec<usize> = (0..nj).filter(|j| !chosen.contains(j)).collect();
            free[rng.random_range(0..free.len())]
        });
        chosen.push(j);
        for (t, slot) in d2.iter_mut().enumerate() {
            *slot = slot.min(sq_dist(row(gamma, t), row(gamma, j)));
        }
    }
    Array2::from_shape_fn((k, gamma.ncols()), |(i, c)| gamma[[chosen[i], c]])
}

/// Number of partitions of `n` atoms into at most `k` nonempty groups.
fn partition_count(n: usize, k: usize) -> f64 {
    // Stirling numbers of the second kind, row by row.
    let mut s = vec![0.0f64; k + 1];
    s[0] = 1.0;
    for _ in 0..n {
        for b in (1..=k).rev() {
            s[b] = b as f64 * s[b] + s[b - 1];
        }
        s[0] = 0.0;
    }
    s.iter().sum()
}

/// Largest partition count searched exhaustively.
pub const EXACT_PARTITION_CAP: f64 = 250_000.0;

/// Best hard partition by enumerating restricted growth strings.
fn exhaustive(gamma: ArrayView2<f64>, q: &[f64], k: usize) -> (f64, Array2<f64>, Vec<usize>) {
    let nj = gamma.nrows();
    let mut a = vec![0usize; nj];
    let mut best: Option<(f64, Array2<f64>, Vec<usize>)> = None;
    loop {
        let mut centers = Array2::zeros((k, gamma.ncols()));
        for i in 0..k {
            // Empty groups sit on the first atom; they absorb nothing.
            centers.row_mut(i).assign(&gamma.row(0));
        }
        update(gamma, q, &a, &mut centers);
        let value = objective(gamma, q, &centers, &a);
        if best.as_ref().is_none_or(|b| value < b.0) {
            best = Some((value, centers, a.clone()));
        }
        // Next restricted growth string with at most k groups.
        let mut pos = nj;
        loop {
            if pos <= 1 {
                return best.expect("one partition at least");
            }
            pos -= 1;
            let prefix_max = a[..pos].iter().copied().max().unwrap_or(0);
            if a[pos] <= prefix_max && a[pos] + 1 < k {
                a[pos] += 1;
                for x in &mut a[pos + 1..] {
                    *x = 0;
                }
                break;
            }
        }
    }
}

/// Closest `n_modes`-mode measure to `target` under the mixture distance.
///
/// With free weights the optimal plan sends every target atom wholly to
/// its nearest mode, so the problem is weighted k-means over the atoms.
/// Lloyd iterations from `restarts` k-means++ seeds; the best run wins.
/// Small instances (at most [`EXACT_PARTITION_CAP`] partitions) are also
/// searched exhaustively, so their result is the global minimum.
/// Modes are ordered by the smallest atom index they absorb.
pub fn project_to_i_modes<R: Rng + ?Sized>(
    target: &GmmMeasure,
    n_modes: usize,
    restarts: usize,
    rng: &mut R,
) -> Result<Projection> {
    target.validate()?;
    let gamma = target.modes.view();
    let q = &target.weights;
    let nj = gamma.nrows();
    if n_modes == 0 || n_modes > nj {
        return Err(Error::invalid(format!(
            "cannot project {nj} modes onto {n_modes}; need 1 ≤ I ≤ J"
        )));
    }
    let mut best: Option<(f64, Array2<f64>, Vec<usize>, Vec<f64>)> = None;
    for _ in 0..restarts.max(1) {
        let mut centers = seed_centers(gamma, q, n_modes, rng);
        let mut a = assign(gamma, &centers);
        let mut history = vec![objective(gamma, q, &centers, &a)];
        for _ in 0..1000 {
            update(gamma, q, &a, &mut centers);
            let after_update = objective(gamma, q, &centers, &a);
            let next = assign(gamma, &centers);
            let value = objective(gamma, q, &centers, &next);
            let prev = *history.last().expect("nonempty");
            let slack = 1e-12 * (1.0 + prev.abs());
            if after_update > prev + slack || value > after_update + slack {
                return Err(Error::Infeasible(format!(
                    "projection objective increased from {prev} to {value}"
                )));
            }
            history.push(value);
            if next == a {
                break;
            }
            a = next;
        }
        let value = *history.last().expect("nonempty");
        if best.as_ref().is_none_or(|b| value < b.0 - 1e-12 * (1.0 + b.0.abs())) {
            best = Some((value, centers, a, history));
        }
    }
    if partition_count(nj, n_modes) <= EXACT_PARTITION_CAP {
        let (value, centers, a) = exhaustive(gamma, q, n_modes);
        if best.as_ref().is_some_and(|b| value < b.0 - 1e-12 * (1.0 + b.0.abs())) {
            let mut history = best.take().expect("checked").3;
            history.push(value);
            best = Some((value, centers, a, history));
        }
    }
    let (_, centers, a, history) = best.expect("at least one restart");

    // Canonical order: by first absorbed atom, empty modes last.
    let first = |i: usize| a.iter().position(|&x| x == i).unwrap_or(usize::MAX);
    let mut order: Vec<usize> = (0..n_modes).collect();
    order.sort_by_key(|&i| (first(i), i));
    let mut rank = vec![0; n_modes];
    for (new, &old) in order.iter().enumerate() {
        rank[old] = new;
    }
    let assignment: Vec<usize> = a.iter().map(|&i| rank[i]).collect();
    let mut theta = Array2::zeros(centers.dim());
    for (new, &old) in order.iter().enumerate() {
        theta.row_mut(new).assign(&centers.row(old));
    }
    let mut p = vec![0.0; n_modes];
    for (j, &i) in assignment.iter().enumerate() {
        p[i] += q[j];
    }
    let mut v = Array2::zeros((n_modes, nj));
    for i in 0..n_modes {
        for j in 0..nj {
            v[[i, j]] = if p[i] > 0.0 {
                if assignment[j] == i { q[j] / p[i] } else { 0.0 }
            } else {
                q[j]
            };
        }
    }
    let mw2 = objective(gamma, q, &theta, &assignment);
    let plan = TransportPlan {
        v,
        p: p.clone(),
        q: q.clone(),
        objective: mw2,
        degenerate: n_modes > 1,
    };
    Ok(Projection {
        measure: GmmMeasure {
            modes: theta,
            weights: p,
        },
        plan,
        assignment,
        mw2,
        history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    /// One value per base mode.
    pub values: Vec<f64>,
    /// Largest residual, or spread for the weight check.
    pub max: f64,
    pub passed: bool,
}

fn check_plan(theta: ArrayView2<f64>, gamma: ArrayView2<f64>, plan: &TransportPlan<f64>) -> Result<()> {
    if plan.v.dim() != (theta.nrows(), gamma.nrows()) || theta.ncols() != gamma.ncols() {
        return Err(Error::shape(format!(
            "plan is {:?} for {} modes and {} atoms",
            plan.v.dim(),
            theta.nrows(),
            gamma.nrows()
        )));
    }
    Ok(())
}

/// `‖Θ_i − Σ_j v_ij Γ_j‖` per mode; modes with zero weight pass trivially.
pub fn verify_barycenter(
    theta: ArrayView2<f64>,
    gamma: ArrayView2<f64>,
    plan: &TransportPlan<f64>,
    tol: f64,
) -> Result<ResidualReport> {
    check_plan(theta, gamma, plan)?;
    let (theta, gamma) = (theta.as_standard_layout(), gamma.as_standard_layout());
    let (theta, gamma) = (theta.view(), gamma.view());
    let bary = plan.v.dot(&gamma);
    let values: Vec<f64> = (0..theta.nrows())
        .map(|i| {
            if plan.p[i] > 0.0 {
                sq_dist(row(theta, i), row(bary.view(), i)).sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let max = values.iter().copied().fold(0.0, f64::max);
    Ok(ResidualReport {
        passed: max <= tol,
        values,
        max,
    })
}

/// Per-mode transport cost `Σ_j v_ij ‖Θ_i − Γ_j‖²` and its spread over
/// modes with positive weight.
pub fn verify_weight_optimality(
    theta: ArrayView2<f64>,
    gamma: ArrayView2<f64>,
    plan: &TransportPlan<f64>,
    tol: f64,
) -> Result<ResidualReport> {
    check_plan(theta, gamma, plan)?;
    let (theta, gamma) = (theta.as_standard_layout(), gamma.as_standard_layout());
    let (theta, gamma) = (theta.view(), gamma.view());
    let values: Vec<f64> = (0..theta.nrows())
        .map(|i| {
            (0..gamma.nrows())
                .map(|j| plan.v[[i, j]] * sq_dist(row(theta, i), row(gamma, j)))
                .sum()
        })
        .collect();
    let live: Vec<f64> = values
        .iter()
        .zip(&plan.p)
        .filter(|(_, &p)| p > 0.0)
        .map(|(&r, _)| r)
        .collect();
    let lo = live.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = live.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let spread = if live.is_empty() { 0.0 } else { hi - lo };
    Ok(ResidualReport {
        values,
        max: spread,
        passed: spread <= tol,
    })
}
