//! Exact discrete optimal transport: balanced assignment between equal-size
//! batches and the transportation problem between weighted point sets.

mod assignment;
mod transport;
mod wasserstein;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

pub use assignment::{assignment_pairing, assignment_pairing_capped, solve_assignment, DEFAULT_PAIRING_CAP};
pub use transport::{solve_transport, solve_transport_with, SimplexOptions};
pub use wasserstein::empirical_wasserstein;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    SqEuclidean,
    Euclidean,
}

/// Nonnegative finite ground cost between two point sets.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix<T> {
    pub entries: Array2<T>,
    pub metric: Option<Metric>,
}

impl<T: Scalar> CostMatrix<T> {
    /// Pairwise costs between the rows of `a` and the rows of `b`.
    pub fn between(a: ArrayView2<T>, b: ArrayView2<T>, metric: Metric) -> Result<Self> {
        if a.ncols() != b.ncols() {
            return Err(Error::shape(format!(
                "point dimensions differ: {} vs {}",
                a.ncols(),
                b.ncols()
            )));
        }
        let mut c = Array2::zeros((a.nrows(), b.nrows()));
        for (i, x) in a.rows().into_iter().enumerate() {
            for (j, y) in b.rows().into_iter().enumerate() {
                let d2 = x
                    .iter()
                    .zip(y.iter())
                    .fold(T::zero(), |acc, (&u, &v)| acc + (u - v) * (u - v));
                c[[i, j]] = match metric {
                    Metric::SqEuclidean => d2,
                    Metric::Euclidean => d2.sqrt(),
                };
            }
        }
        Ok(Self {
            entries: c,
            metric: Some(metric),
        })
    }

    /// Wraps an explicit matrix after checking the invariants.
    pub fn new(entries: Array2<T>) -> Result<Self> {
        let c = Self {
            entries,
            metric: None,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.iter().any(|x| !x.is_finite()) {
            return Err(Error::non_finite("cost matrix"));
        }
        if self.entries.iter().any(|&x| x < T::zero()) {
            return Err(Error::invalid("cost matrix has negative entries"));
        }
        Ok(())
    }

    pub fn dim(&self) -> (usize, usize) {
        self.entries.dim()
    }
}

/// Row-conditional optimal plan: `v[i][j]` is the fraction of the mass of
/// source `i` sent to target `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportPlan<T> {
    pub v: Array2<T>,
    pub p: Vec<T>,
    pub q: Vec<T>,
    pub objective: T,
    /// Set when the final basis contains zero-valued basic cells, i.e. the
    /// support is smaller than `I + J − 1`.
    pub degenerate: bool,
}

impl<T: Scalar> TransportPlan<T> {
    /// Coupling `π_ij = v_ij p_i`.
    pub fn coupling(&self) -> Array2<T> {
        let mut pi = self.v.clone();
        for (mut row, &pi_i) in pi.rows_mut().into_iter().zip(&self.p) {
            row.mapv_inplace(|x| x * pi_i);
        }
        pi
    }

    /// Entries counted as nonzero: `π_ij > 1e-10 · max(p)`.
    pub fn support(&self) -> Array2<bool> {
        let pmax = self.p.iter().copied().fold(T::zero(), T::max);
        let thr = T::lit(1e-10) * pmax;
        self.coupling().mapv(|x| x > thr)
    }

    pub fn support_size(&self) -> usize {
        self.support().iter().filter(|&&b| b).count()
    }

    /// Largest violation of the row-sum, marginal and sign constraints.
    pub fn max_violation(&self) -> T {
        let mut worst = T::zero();
        for row in self.v.rows() {
            let s: T = row.iter().copied().sum();
            worst = worst.max((s - T::one()).abs());
            for &x in row {
                worst = worst.max(-x);
            }
        }
        for (j, &qj) in self.q.iter().enumerate() {
            let s: T = (0..self.p.len()).map(|i| self.v[[i, j]] * self.p[i]).sum();
            worst = worst.max((s - qj).abs());
        }
        worst
    }
}

/// Dual vector in the scaled form of the row-conditional problem:
/// `z_i + p_i · z_{I+j} ≤ p_i · c_ij`, objective `Σ_i z_i + Σ_j q_j z_{I+j}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualSolution<T> {
    pub z: Vec<T>,
    pub objective: T,
}

impl<T: Scalar> DualSolution<T> {
    /// Builds the scaled dual from coupling potentials `u_i + w_j ≤ c_ij`.
    pub fn from_potentials(u: &[T], w: &[T], p: &[T], q: &[T]) -> Self {
        let mut z: Vec<T> = u.iter().zip(p).map(|(&ui, &pi)| ui * pi).collect();
        z.extend_from_slice(w);
        let objective = dual_objective(&z, q);
        Self { z, objective }
    }

    /// Largest violation `z_i + p_i z_{I+j} − p_i c_ij` over all cells.
    pub fn max_violation(&self, cost: &Array2<T>, p: &[T]) -> T {
        let (ni, nj) = cost.dim();
        let mut worst = T::neg_infinity();
        for i in 0..ni {
            for j in 0..nj {
                worst = worst.max(self.z[i] + p[i] * self.z[ni + j] - p[i] * cost[[i, j]]);
            }
        }
        worst
    }
}

/// `Σ_i z_i + Σ_j q_j z_{I+j}`.
pub fn dual_objective<T: Scalar>(z: &[T], q: &[T]) -> T {
    let ni = z.len() - q.len();
    z[..ni].iter().copied().sum::<T>() + q.iter().zip(&z[ni..]).map(|(&a, &b)| a * b).sum::<T>()
}

/// A permutation `τ` pairing row `s` of the first batch with row `τ[s]` of
/// the second.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pairing {
    pub perm: Vec<usize>,
}

impl Pairing {
    pub fn identity(n: usize) -> Self {
        Self {
            perm: (0..n).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn is_bijection(&self) -> bool {
        let mut seen = vec![false; self.perm.len()];
        for &j in &self.perm {
            if j >= seen.len() || seen[j] {
                return false;
            }
            seen[j] = true;
        }
        true
    }

    /// `Σ_s ‖b[τ(s)] − a[s]‖²`.
    pub fn cost<T: Scalar>(&self, a: ArrayView2<T>, b: ArrayView2<T>) -> T {
        self.perm
            .iter()
            .enumerate()
            .map(|(s, &t)| {
                a.row(s)
                    .iter()
                    .zip(b.row(t).iter())
                    .fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
            })
            .sum()
    }
}

pub(crate) fn check_simplex<T: Scalar>(w: &[T], name: &str) -> Result<()> {
    if w.is_empty() {
        return Err(Error::shape(format!("{name} is empty")));
    }
    if w.iter().any(|x| !x.is_finite()) {
        return Err(Error::non_finite(name.to_string()));
    }
    if w.iter().any(|&x| x < T::zero()) {
        return Err(Error::invalid(format!("{name} has negative entries")));
    }
    let s: T = w.iter().copied().sum();
    if (s - T::one()).abs() > T::lit(1e-9).max(T::epsilon() * T::lit(64.0)) {
        return Err(Error::Infeasible(format!("{name} sums to {s}, not 1")));
    }
    Ok(())
}
