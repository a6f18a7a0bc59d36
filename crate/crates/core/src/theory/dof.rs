use std::fmt;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{cost_between, SupportPattern};
use crate::error::{Error, Result};
use crate::ot::TransportPlan;
use crate::scalar::sq_dist;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    /// `Σ_j v_ij = 1` for each mode.
    RowSum,
    /// `Σ_j v_ij Γ_j = Θ_i`, `D` rows per mode.
    Barycenter,
    /// `Σ_j v_ij ‖Θ_i − Γ_j‖² − c = 0` with a shared unknown `c`.
    Optimality,
    /// `Σ_i p_i v_ij = q_j` for each target atom; needs `q`.
    Marginal,
}

impl fmt::Display for ConstraintKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConstraintKind::RowSum => "row_sum",
            ConstraintKind::Barycenter => "barycenter",
            ConstraintKind::Optimality => "optimality",
            ConstraintKind::Marginal => "marginal",
        })
    }
}

/// The constraint set used in the degrees-of-freedom count of the testing
/// phase.
pub const PAPER_CONSTRAINTS: [ConstraintKind; 2] = [ConstraintKind::Barycenter, ConstraintKind::Optimality];

/// Constraints usable at test time when `q` is unknown.
pub const RECONSTRUCTION_CONSTRAINTS: [ConstraintKind; 2] = [ConstraintKind::RowSum, ConstraintKind::Barycenter];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSystem {
    /// Support cells, one unknown each, in row-major order.
    pub variables: Vec<(usize, usize)>,
    /// Whether the last unknown is the optimality constant.
    pub has_constant: bool,
    #[serde(with = "crate::serde_mat")]
    pub matrix: Array2<f64>,
    pub rhs: Vec<f64>,
    pub tags: Vec<ConstraintKind>,
    pub singular_values: Vec<f64>,
    pub rank: usize,
    pub num_vars: usize,
    /// `num_vars − rank`.
    pub dof: i64,
    /// `J − I·D`.
    pub paper_dof: i64,
    /// Rank below `min(rows, unknowns)`, e.g. from repeated target modes.
    pub rank_deficient: bool,
}

/// Relative singular-value cutoff for numerical rank.
pub const RANK_TOL: f64 = 1e-8;

fn assemble(
    support: &SupportPattern,
    gamma: ArrayView2<f64>,
    theta: ArrayView2<f64>,
    p: &[f64],
    q: Option<&[f64]>,
    constraints: &[ConstraintKind],
) -> Result<ConstraintSystem> {
    if constraints.is_empty() {
        return Err(Error::invalid("constraint set is empty"));
    }
    let (ni, nj) = support.mask.dim();
    let d = gamma.ncols();
    if gamma.nrows() != nj || theta.dim() != (ni, d) || p.len() != ni {
        return Err(Error::shape(format!(
            "support is {ni}x{nj}, gamma {:?}, theta {:?}, p has {} entries",
            gamma.dim(),
            theta.dim(),
            p.len()
        )));
    }
    let mut set: Vec<ConstraintKind> = constraints.to_vec();
    set.sort();
    set.dedup();
    let q = if set.contains(&ConstraintKind::Marginal) {
        let q = q.ok_or_else(|| Error::invalid("marginal constraints need q"))?;
        if q.len() != nj {
            return Err(Error::shape(format!("q has {} entries, expected {nj}", q.len())));
        }
        Some(q)
    } else {
        None
    };
    let variables: Vec<(usize, usize)> = (0..ni)
        .flat_map(|i| (0..nj).map(move |j| (i, j)))
        .filter(|&(i, j)| support.mask[[i, j]])
        .collect();
    let has_constant = set.contains(&ConstraintKind::Optimality);
    let num_vars = variables.len() + has_constant as usize;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut rhs = Vec::new();
    let mut tags = Vec::new();
    let theta_std = theta.as_standard_layout();
    let gamma_std = gamma.as_standard_layout();
    for &kind in &set {
        match kind {
            ConstraintKind::RowSum => {
                for i in 0..ni {
                    let mut r = vec![0.0; num_vars];
                    for (k, &(a, _)) in variables.iter().enumerate() {
                        if a == i {
                            r[k] = 1.0;
                        }
                    }
                    rows.push(r);
                    rhs.push(1.0);
                    tags.push(kind);
                }
            }
            ConstraintKind::Barycenter => {
                for i in 0..ni {
                    for c in 0..d {
                        let mut r = vec![0.0; num_vars];
                        for (k, &(a, b)) in variables.iter().enumerate() {
                            if a == i {
                                r[k] = gamma[[b, c]];
                            }
                        }
                        rows.push(r);
                        rhs.push(theta[[i, c]]);
                        tags.push(kind);
                    }
                }
            }
            ConstraintKind::Optimality => {
                for i in 0..ni {
                    let mut r = vec![0.0; num_vars];
                    let ti = theta_std.row(i);
                    for (k, &(a, b)) in variables.iter().enumerate() {
                        if a == i {
                            let gb = gamma_std.row(b);
                            r[k] = sq_dist(ti.as_slice().expect("std"), gb.as_slice().expect("std"));
                        }
                    }
                    r[num_vars - 1] = -1.0;
                    rows.push(r);
                    rhs.push(0.0);
                    tags.push(kind);
                }
            }
            ConstraintKind::Marginal => {
                let q = q.expect("checked above");
                for j in 0..nj {
                    let mut r = vec![0.0; num_vars];
                    for (k, &(a, b)) in variables.iter().enumerate() {
                        if b == j {
                            r[k] = p[a];
                        }
                    }
                    rows.push(r);
                    rhs.push(q[j]);
                    tags.push(kind);
                }
            }
        }
    }
    let m = rows.len();
    let matrix = Array2::from_shape_fn((m, num_vars), |(r, c)| rows[r][c]);
    let singular_values: Vec<f64> = if num_vars == 0 {
        Vec::new()
    } else {
        let dm = DMatrix::from_fn(m, num_vars, |r, c| matrix[[r, c]]);
        let mut s: Vec<f64> = dm.singular_values().iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        s
    };
    let smax = singular_values.first().copied().unwrap_or(0.0);
    let rank = singular_values
        .iter()
        .filter(|&&s| smax > 0.0 && s > RANK_TOL * smax)
        .count();
    Ok(ConstraintSystem {
        variables,
        has_constant,
        rank_deficient: rank < m.min(num_vars),
        matrix,
        rhs,
        tags,
        singular_values,
        rank,
        num_vars,
        dof: num_vars as i64 - rank as i64,
        paper_dof: nj as i64 - (ni * d) as i64,
    })
}

/// Linear system over the support unknowns and its numerical rank.
pub fn dof_analysis(
    support: &SupportPattern,
    gamma: ArrayView2<f64>,
    theta: ArrayView2<f64>,
    p: &[f64],
    q: Option<&[f64]>,
    constraints: &[ConstraintKind],
) -> Result<ConstraintSystem> {
    assemble(support, gamma, theta, p, q, constraints)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reconstruction {
    pub system: ConstraintSystem,
    /// Minimum-norm least-squares solution placed on the support.
    pub v: Array2<f64>,
    pub constant: Option<f64>,
    /// Max-norm residual of the least-squares solution.
    pub residual: f64,
    pub null_dim: usize,
    pub consistent: bool,
    /// Present when the system is consistent and has a unique solution.
    pub plan: Option<TransportPlan<f64>>,
}

/// Absolute residual allowed before a system counts as inconsistent.
pub const CONSISTENCY_TOL: f64 = 1e-6;

/// Solves the assembled system on the support by least squares.
pub fn reconstruct_plan(
    support: &SupportPattern,
    gamma: ArrayView2<f64>,
    theta: ArrayView2<f64>,
    p: &[f64],
    q: Option<&[f64]>,
    constraints: &[ConstraintKind],
) -> Result<Reconstruction> {
    support.validate()?;
    let system = assemble(support, gamma, theta, p, q, constraints)?;
    let (ni, nj) = support.mask.dim();
    let (m, n) = system.matrix.dim();
    let a = DMatrix::from_fn(m, n, |r, c| system.matrix[[r, c]]);
    let b = DVector::from_column_slice(&system.rhs);
    let smax = system.singular_values.first().copied().unwrap_or(0.0);
    let svd = a.clone().svd(true, true);
    let x = svd
        .solve(&b, RANK_TOL * smax.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Infeasible(format!("least squares failed: {e}")))?;
    let residual = (&a * &x - &b).amax();
    let consistent = residual <= CONSISTENCY_TOL;
    let mut v = Array2::zeros((ni, nj));
    for (k, &(i, j)) in system.variables.iter().enumerate() {
        v[[i, j]] = x[k];
    }
    let constant = system.has_constant.then(|| x[n - 1]);
    let null_dim = n - system.rank;
    let plan = if consistent && null_dim == 0 {
        let cost = cost_between(theta, gamma)?;
        let q_hat: Vec<f64> = (0..nj).map(|j| (0..ni).map(|i| p[i] * v[[i, j]]).sum()).collect();
        let objective = (0..ni)
            .flat_map(|i| (0..nj).map(move |j| (i, j)))
            .map(|(i, j)| p[i] * v[[i, j]] * cost.entries[[i, j]])
            .sum();
        Some(TransportPlan {
            degenerate: system.variables.len() + 1 < ni + nj,
            v: v.clone(),
            p: p.to_vec(),
            q: q_hat,
            objective,
        })
    } else {
        None
    };
    Ok(Reconstruction {
        system,
        v,
        constant,
        residual,
        null_dim,
        consistent,
        plan,
    })
}
