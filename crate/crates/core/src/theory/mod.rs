//! Mixture-Wasserstein transport between Gaussian mixtures viewed through
//! their mode locations and weights: duality, support recovery, projection
//! onto fewer modes, identifiability counting and the predict-then-transport
//! pipeline.

mod dof;
mod dual;
mod pipeline;
mod projection;
mod report;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ot::{CostMatrix, Metric};

pub use dof::{
    dof_analysis, reconstruct_plan, ConstraintKind, ConstraintSystem, Reconstruction, CONSISTENCY_TOL,
    PAPER_CONSTRAINTS, RANK_TOL, RECONSTRUCTION_CONSTRAINTS,
};
pub use dual::{
    check_subset_sum, demonstrate_i1_illposed, mixture_wasserstein, reduced_dual_objective,
    strictly_complementary_dual, support_from_dual, ComplementaryDual, DualSupport, IllPosedReport,
    MwResult, SubsetSumReport, SUBSET_SUM_CAP,
};
pub use pipeline::{
    theory_pipeline, training_targets, Condition, ConditionReport, PipelineConfig, PipelineReport,
    PredictorKind, TrainingTarget,
};
pub use projection::{
    project_to_i_modes, verify_barycenter, verify_weight_optimality, Projection, ResidualReport, EXACT_PARTITION_CAP,
};
pub use report::{theory_report, ChecksSelection, TheoryInstance, TheoryReport};

/// Mode locations and weights of a Gaussian mixture; the shared variance
/// does not enter the mixture distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmMeasure {
    #[serde(with = "crate::serde_mat")]
    pub modes: Array2<f64>,
    pub weights: Vec<f64>,
}

/// Tolerance on the weight sum of a measure.
pub const SIMPLEX_TOL: f64 = 1e-9;

impl GmmMeasure {
    pub fn new(modes: Array2<f64>, weights: Vec<f64>) -> Result<Self> {
        let m = Self {
            modes: modes.as_standard_layout().into_owned(),
            weights,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn n_modes(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.modes.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes.nrows() != self.weights.len() || self.weights.is_empty() {
            return Err(Error::shape(format!(
                "{} mode rows but {} weights",
                self.modes.nrows(),
                self.weights.len()
            )));
        }
        if !self.modes.is_standard_layout() {
            return Err(Error::invalid("mode matrix must be in standard layout"));
        }
        if self.modes.iter().chain(&self.weights).any(|v| !v.is_finite()) {
            return Err(Error::non_finite("mixture measure"));
        }
        if self.weights.iter().any(|&w| w < 0.0) {
            return Err(Error::invalid("mixture weights must be nonnegative"));
        }
        let s: f64 = self.weights.iter().sum();
        if (s - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::invalid(format!("mixture weights sum to {s}, not 1")));
        }
        Ok(())
    }
}

/// Binary `I × J` mask of plan entries treated as nonzero.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportPattern {
    pub mask: Array2<bool>,
}

impl SupportPattern {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    /// Every row and every column must hold at least one entry.
    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.mask.rows().into_iter().enumerate() {
            if !r.iter().any(|&b| b) {
                return Err(Error::invalid(format!("support row {i} is empty")));
            }
        }
        for (j, c) in self.mask.columns().into_iter().enumerate() {
            if !c.iter().any(|&b| b) {
                return Err(Error::invalid(format!("support column {j} is empty")));
            }
        }
        Ok(())
    }
}

pub(crate) fn cost_between(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<CostMatrix<f64>> {
    CostMatrix::between(a, b, Metric::SqEuclidean)
}

/// Flat Dirichlet draw on the simplex.
pub fn random_simplex<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let e: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Standard normal mode locations.
pub fn random_modes<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| StandardNormal.sample(rng))
}

/// Random measure with normal modes and Dirichlet weights.
pub fn random_measure<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> GmmMeasure {
    GmmMeasure {
        modes: random_modes(n, d, rng),
        weights: random_simplex(n, rng),
    }
}

/// `n` modes split as evenly as possible into `groups` tight clusters:
/// cluster centers at scale `separation`, members at scale `spread`.
pub fn clustered_modes<R: Rng + ?Sized>(
    n: usize,
    groups: usize,
    d: usize,
    separation: f64,
    spread: f64,
    rng: &mut R,
) -> Result<Array2<f64>> {
    if groups == 0 || groups > n {
        return Err(Error::invalid(format!("cannot split {n} modes into {groups} groups")));
    }
    let centers = random_modes(groups, d, rng) * separation;
    let mut out = Array2::zeros((n, d));
    for j in 0..n {
        let g = j * groups / n;
        for c in 0..d {
            let e: f64 = StandardNormal.sample(rng);
            out[[j, c]] = centers[[g, c]] + spread * e;
        }
    }
    Ok(out)
}

/// Cluster index of each mode produced by [`clustered_modes`].
pub fn cluster_of(j: usize, n: usize, groups: usize) -> usize {
    j * groups / n
}
