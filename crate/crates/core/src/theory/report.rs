use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    check_subset_sum, cost_between, demonstrate_i1_illposed, dof_analysis, mixture_wasserstein,
    random_measure, random_modes, reduced_dual_objective, support_from_dual, theory_pipeline,
    training_targets, verify_barycenter, verify_weight_optimality, Condition, GmmMeasure, PipelineConfig,
    PipelineReport, PredictorKind, SupportPattern, PAPER_CONSTRAINTS, RECONSTRUCTION_CONSTRAINTS,
    SUBSET_SUM_CAP,
};
use crate::error::{Error, Result};
use crate::nn::softmax;
use crate::rng::stream;

/// Shared atoms, per-condition weights and descriptors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryInstance {
    pub gamma: Vec<Vec<f64>>,
    pub q_list: Vec<Vec<f64>>,
    pub y_list: Vec<Vec<f64>>,
    #[serde(rename = "I")]
    pub n_modes: usize,
    /// Trailing conditions held out for the pipeline; default a quarter.
    #[serde(default)]
    pub holdout: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl TheoryInstance {
    /// Random atoms with weights `softmax(A y + b)` over uniform
    /// two-dimensional descriptors.
    pub fn random(n_modes: usize, atoms: usize, dim: usize, conditions: usize, seed: u64) -> Result<Self> {
        if n_modes == 0 || atoms == 0 || dim == 0 || conditions == 0 {
            return Err(Error::invalid("I, J, D and the condition count must be positive"));
        }
        let mut rng = stream(&[seed, 0x696e_7374]);
        let gamma = random_modes(atoms, dim, &mut rng);
        let a = random_modes(atoms, 2, &mut rng);
        let b = random_modes(atoms, 1, &mut rng);
        let mut q_list = Vec::new();
        let mut y_list = Vec::new();
        for _ in 0..conditions {
            let y = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let logits: Vec<f64> = (0..atoms).map(|j| a[[j, 0]] * y[0] + a[[j, 1]] * y[1] + b[[j, 0]]).collect();
            q_list.push(softmax(&logits));
            y_list.push(y);
        }
        Ok(Self {
            gamma: gamma.rows().into_iter().map(|r| r.to_vec()).collect(),
            q_list,
            y_list,
            n_modes,
            holdout: None,
            seed,
        })
    }

    pub fn gamma_matrix(&self) -> Result<Array2<f64>> {
        let j = self.gamma.len();
        let d = self.gamma.first().map_or(0, |r| r.len());
        if j == 0 || d == 0 || self.gamma.iter().any(|r| r.len() != d) {
            return Err(Error::shape("gamma must be a nonempty rectangular matrix"));
        }
        Ok(Array2::from_shape_fn((j, d), |(a, b)| self.gamma[a][b]))
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.gamma_matrix()?;
        let j = g.nrows();
        if self.n_modes == 0 || self.n_modes > j {
            return Err(Error::invalid(format!("I = {} must lie in 1..={j}", self.n_modes)));
        }
        if self.n_modes > SUBSET_SUM_CAP || j > SUBSET_SUM_CAP {
            return Err(Error::CapExceeded {
                what: if j > SUBSET_SUM_CAP { "J" } else { "I" },
                value: j.max(self.n_modes),
                cap: SUBSET_SUM_CAP,
                hint: "exhaustive checks enumerate every subset",
            });
        }
        if self.q_list.is_empty() || self.q_list.len() != self.y_list.len() {
            return Err(Error::shape(format!(
                "{} weight vectors but {} descriptors",
                self.q_list.len(),
                self.y_list.len()
            )));
        }
        for (n, q) in self.q_list.iter().enumerate() {
            GmmMeasure::new(g.clone(), q.clone())
                .map_err(|e| Error::invalid(format!("q_list[{n}]: {e}")))?;
        }
        let dy = self.y_list[0].len();
        if let Some(n) = self.y_list.iter().position(|y| y.len() != dy) {
            return Err(Error::shape(format!("y_list[{n}] has length {}, expected {dy}", self.y_list[n].len())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChecksSelection {
    pub duality: bool,
    pub projection: bool,
    pub dof: bool,
    pub illposed: bool,
    pub pipeline: bool,
}

impl ChecksSelection {
    pub fn all() -> Self {
        Self {
            duality: true,
            projection: true,
            dof: true,
            illposed: true,
            pipeline: true,
        }
    }
}

impl FromStr for ChecksSelection {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(Self::all());
        }
        let mut c = Self {
            duality: false,
            projection: false,
            dof: false,
            illposed: false,
            pipeline: false,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "duality" => c.duality = true,
                "projection" => c.projection = true,
                "dof" => c.dof = true,
                "illposed" => c.illposed = true,
                "pipeline" => c.pipeline = true,
                o => {
                    return Err(Error::invalid(format!(
                        "unknown check `{o}` (expected all or a comma list of duality, projection, dof, illposed, pipeline)"
                    )))
                }
            }
        }
        Ok(c)
    }
}

/// Solver checks against a random base with the instance's mode count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualityCheck {
    pub condition: usize,
    pub mw2: f64,
    pub duality_gap: f64,
    pub support_size: usize,
    pub subset_sum_holds: bool,
    pub subset_sum_min_gap: f64,
    pub support_round_trip: bool,
    pub max_rule_disagreements: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionCheck {
    pub condition: usize,
    pub mw2: f64,
    pub solver_mw2: f64,
    pub barycenter_max_residual: f64,
    pub weight_spread: f64,
    pub support_size: usize,
    pub subset_sum_holds: bool,
    pub dual_min_slack: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DofEntry {
    pub condition: usize,
    pub support: String,
    pub constraints: String,
    pub num_vars: usize,
    pub num_constraints: usize,
    pub rank: usize,
    pub dof: i64,
    pub paper_dof: i64,
    pub matches_paper: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IllPosedCheck {
    pub z1_coefficient: f64,
    pub objective_range: f64,
    /// Objective range over the same grid for `z_1` when `I ≥ 2`.
    pub contrast_range: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    #[serde(rename = "I")]
    pub n_modes: usize,
    #[serde(rename = "J")]
    pub atoms: usize,
    #[serde(rename = "D")]
    pub dim: usize,
    pub conditions: usize,
    pub duality: Vec<DualityCheck>,
    pub projection: Vec<ProjectionCheck>,
    pub dof: Vec<DofEntry>,
    pub illposed: Option<IllPosedCheck>,
    pub pipeline_oracle: Option<PipelineReport>,
    pub pipeline_linear: Option<PipelineReport>,
    pub notes: Vec<String>,
}

fn set_name(set: &[super::ConstraintKind]) -> String {
    set.iter().map(|k| k.to_string()).collect::<Vec<_>>().join("+")
}

/// Runs the selected checks on every condition of `inst`.
pub fn theory_report(inst: &TheoryInstance, checks: ChecksSelection) -> Result<TheoryReport> {
    inst.validate()?;
    let gamma = inst.gamma_matrix()?;
    let (nj, d) = gamma.dim();
    let ni = inst.n_modes;
    let n = inst.q_list.len();
    let seed = inst.seed;
    let conditions: Vec<Condition> = inst
        .q_list
        .iter()
        .zip(&inst.y_list)
        .map(|(q, y)| Condition { q: q.clone(), y: y.clone() })
        .collect();
    let mut notes = Vec::new();

    let duality = if checks.duality {
        (0..n)
            .into_par_iter()
            .map(|c| {
                let mut rng = stream(&[seed, 0x6475_616c, c as u64]);
                let base = random_measure(ni, d, &mut rng);
                let target = GmmMeasure::new(gamma.clone(), inst.q_list[c].clone())?;
                let mw = mixture_wasserstein(&base, &target)?;
                let ss = check_subset_sum(&base.weights, &target.weights, 1e-9)?;
                let ds = support_from_dual(base.modes.view(), gamma.view(), &base.weights, &mw.dual.z[..ni], 1e-7)?;
                Ok(DualityCheck {
                    condition: c,
                    mw2: mw.value,
                    duality_gap: mw.duality_gap,
                    support_size: mw.plan.support_size(),
                    subset_sum_holds: ss.holds,
                    subset_sum_min_gap: ss.min_gap,
                    support_round_trip: ds.pattern.mask == mw.plan.support(),
                    max_rule_disagreements: ds.rule_disagreements.len(),
                })
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    if duality.iter().any(|c| c.max_rule_disagreements > 0) {
        notes.push(
            "the max-rule dual completion differs from the min rule on some columns; the min rule is used".into(),
        );
    }

    let need_targets = checks.projection || checks.dof;
    let targets = if need_targets {
        training_targets(&conditions, gamma.view(), ni, 8, seed)?
    } else {
        Vec::new()
    };
    let mut projection = Vec::new();
    if checks.projection {
        for (c, t) in targets.iter().enumerate() {
            let m = &t.projection.measure;
            let target = GmmMeasure::new(gamma.clone(), inst.q_list[c].clone())?;
            let solver = mixture_wasserstein(m, &target)?;
            let bary = verify_barycenter(m.modes.view(), gamma.view(), &t.projection.plan, 1e-7)?;
            let w = verify_weight_optimality(m.modes.view(), gamma.view(), &t.projection.plan, 1e-6)?;
            projection.push(ProjectionCheck {
                condition: c,
                mw2: t.projection.mw2,
                solver_mw2: solver.value,
                barycenter_max_residual: bary.max,
                weight_spread: w.max,
                support_size: t.projection.plan.support_size(),
                subset_sum_holds: check_subset_sum(&m.weights, &inst.q_list[c], 1e-9)?.holds,
                dual_min_slack: t.min_slack,
            });
        }
        if projection.iter().any(|p| p.weight_spread > 1e-6) {
            notes.push(
                "per-mode transport costs are not equal at the projection optimum; the equal-cost condition \
                 does not hold in general"
                    .into(),
            );
        }
    }

    let mut dof = Vec::new();
    if checks.dof {
        for (c, t) in targets.iter().enumerate() {
            let m = &t.projection.measure;
            let sup = SupportPattern {
                mask: t.projection.plan.support(),
            };
            // Spanning-tree support of the solver against a random base.
            let mut rng = stream(&[seed, 0x6475_616c, c as u64]);
            let base = random_measure(ni, d, &mut rng);
            let cost = cost_between(base.modes.view(), gamma.view())?;
            let (plan, _) = crate::ot::solve_transport(&cost, &base.weights, &inst.q_list[c])?;
            let tree = SupportPattern { mask: plan.support() };
            let cases: [(&'static str, &SupportPattern, &GmmMeasure); 2] =
                [("projection", &sup, m), ("random_base", &tree, &base)];
            for (label, s, meas) in cases {
                for set in [&PAPER_CONSTRAINTS[..], &RECONSTRUCTION_CONSTRAINTS[..]] {
                    let sys = dof_analysis(s, gamma.view(), meas.modes.view(), &meas.weights, None, set)?;
                    dof.push(DofEntry {
                        condition: c,
                        support: label.into(),
                        constraints: set_name(set),
                        num_vars: sys.num_vars,
                        num_constraints: sys.rhs.len(),
                        rank: sys.rank,
                        dof: sys.dof,
                        paper_dof: sys.paper_dof,
                        matches_paper: sys.dof == sys.paper_dof,
                    });
                }
            }
        }
    }

    let illposed = if checks.illposed {
        let q0 = &inst.q_list[0];
        let theta1: Vec<f64> = (0..d).map(|k| (0..nj).map(|j| q0[j] * gamma[[j, k]]).sum()).collect();
        let r = demonstrate_i1_illposed(&theta1, gamma.view(), q0)?;
        let contrast_range = if ni >= 2 {
            let mut rng = stream(&[seed, 0x696c_6c70]);
            let base = random_measure(ni, d, &mut rng);
            let vals = r
                .grid
                .iter()
                .map(|&z1| {
                    let mut z = vec![0.0; ni];
                    z[0] = z1;
                    reduced_dual_objective(base.modes.view(), gamma.view(), &base.weights, q0, &z)
                })
                .collect::<Result<Vec<_>>>()?;
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            Some(hi - lo)
        } else {
            None
        };
        Some(IllPosedCheck {
            z1_coefficient: r.z1_coefficient,
            objective_range: r.objective_range,
            contrast_range,
        })
    } else {
        None
    };

    let (pipeline_oracle, pipeline_linear) = if checks.pipeline {
        let hold = inst.holdout.unwrap_or((n / 4).max(1)).clamp(1, n);
        let (train, test) = conditions.split_at(n - hold);
        let oracle_cfg = PipelineConfig {
            predictor: PredictorKind::Oracle,
            seed,
            ..PipelineConfig::default()
        };
        let oracle = theory_pipeline(train, test, gamma.view(), ni, &oracle_cfg)?;
        let linear = if train.len() >= 2 {
            let cfg = PipelineConfig {
                predictor: PredictorKind::Linear,
                ..oracle_cfg
            };
            Some(theory_pipeline(train, test, gamma.view(), ni, &cfg)?)
        } else {
            notes.push("fewer than two training conditions; learned predictors skipped".into());
            None
        };
        (Some(oracle), linear)
    } else {
        (None, None)
    };

    Ok(TheoryReport {
        n_modes: ni,
        atoms: nj,
        dim: d,
        conditions: n,
        duality,
        projection,
        dof,
        illposed,
        pipeline_oracle,
        pipeline_linear,
        notes,
    })
}
