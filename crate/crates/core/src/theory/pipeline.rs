use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    cost_between, mixture_wasserstein, project_to_i_modes, reconstruct_plan, strictly_complementary_dual,
    support_from_dual, GmmMeasure, Projection, RECONSTRUCTION_CONSTRAINTS,
};
use crate::error::{Error, Result};
use crate::nn::{Activation, OptState, Tape};
use crate::rng::stream;
use crate::Mlp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    /// Ground-truth triples of the held-out conditions.
    Oracle,
    Mlp,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub predictor: PredictorKind,
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub restarts: usize,
    pub tight_tol: f64,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            predictor: PredictorKind::Oracle,
            hidden: 64,
            epochs: 2000,
            lr: 1e-2,
            restarts: 8,
            tight_tol: 1e-7,
            seed: 0,
        }
    }
}

/// Target weights over the shared atoms and the descriptor of one condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub q: Vec<f64>,
    pub y: Vec<f64>,
}

/// Projection, plan and partial dual of one training condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTarget {
    pub projection: Projection,
    pub z_head: Vec<f64>,
    /// Off-support slack of the stored dual; positive means the dual pins
    /// down the support exactly.
    pub min_slack: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub index: usize,
    pub tv: Option<f64>,
    /// Error of regressing `q` directly with the same predictor family.
    pub direct_tv: Option<f64>,
    pub mw2: Option<f64>,
    pub q_hat: Option<Vec<f64>>,
    pub support_size: usize,
    pub null_dim: Option<usize>,
    pub residual: Option<f64>,
    pub rule_disagreements: Vec<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub n_modes: usize,
    pub predictor: PredictorKind,
    pub conditions: Vec<ConditionReport>,
    pub failures: usize,
    pub max_tv: Option<f64>,
    pub mean_tv: Option<f64>,
    pub direct_mean_tv: Option<f64>,
}

/// Projects every condition onto `n_modes` modes and stores a strictly
/// complementary dual head.
pub fn training_targets(
    conditions: &[Condition],
    gamma: ArrayView2<f64>,
    n_modes: usize,
    restarts: usize,
    seed: u64,
) -> Result<Vec<TrainingTarget>> {
    conditions
        .par_iter()
        .enumerate()
        .map(|(n, c)| {
            let target = GmmMeasure::new(gamma.to_owned(), c.q.clone())?;
            let mut rng = stream(&[seed, 0x7072_6f6a, n as u64]);
            let projection = project_to_i_modes(&target, n_modes, restarts, &mut rng)?;
            let cost = cost_between(projection.measure.modes.view(), gamma)?;
            let cd = strictly_complementary_dual(&cost, &projection.plan)?;
            Ok(TrainingTarget {
                z_head: cd.dual.z[..n_modes].to_vec(),
                min_slack: cd.min_slack,
                projection,
            })
        })
        .collect()
}

enum Regressor {
    Linear(Array2<f64>),
    Mlp {
        net: Mlp,
        mean: Vec<f64>,
        scale: Vec<f64>,
    },
}

fn fit(x: &Array2<f64>, t: &Array2<f64>, kind: PredictorKind, cfg: &PipelineConfig, tag: u64) -> Result<Regressor> {
    let (n, din) = x.dim();
    let dout = t.ncols();
    match kind {
        PredictorKind::Linear | PredictorKind::Oracle => {
            let a = DMatrix::from_fn(n, din + 1, |r, c| if c < din { x[[r, c]] } else { 1.0 });
            let b = DMatrix::from_fn(n, dout, |r, c| t[[r, c]]);
            let svd = a.svd(true, true);
            let smax = svd.singular_values.max();
            let w = svd
                .solve(&b, 1e-10 * smax.max(f64::MIN_POSITIVE))
                .map_err(|e| Error::Infeasible(format!("linear fit failed: {e}")))?;
            Ok(Regressor::Linear(Array2::from_shape_fn((din + 1, dout), |(r, c)| w[(r, c)])))
        }
        PredictorKind::Mlp => {
            let mean: Vec<f64> = (0..dout).map(|c| t.column(c).mean().unwrap_or(0.0)).collect();
            let scale: Vec<f64> = (0..dout)
                .map(|c| {
                    let s = t.column(c).std(0.0);
                    if s > 1e-12 { s } else { 1.0 }
                })
                .collect();
            let ts = Array2::from_shape_fn((n, dout), |(r, c)| (t[[r, c]] - mean[c]) / scale[c]);
            let mut rng = stream(&[cfg.seed, tag]);
            let mut net = Mlp::init(&[din, cfg.hidden, dout], Activation::Tanh, 0.0, &mut rng)?;
            let mut opt = OptState::adam(cfg.lr);
            let neg = ts.mapv(|v| -v);
            for _ in 0..cfg.epochs {
                let mut tape = Tape::new();
                let inp = tape.constant(x.clone());
                let (out, vars) = net.record_mode(&mut tape, inp, false, &mut rng)?;
                let resid = tape.offset(out, &neg)?;
                let loss = tape.mean_row_sq_norm(resid)?;
                let g = tape.backward(loss)?;
                opt.step(&mut net, &vars.collect(&g, ""))?;
            }
            Ok(Regressor::Mlp { net, mean, scale })
        }
    }
}

impl Regressor {
    fn predict(&self, y: &[f64]) -> Result<Vec<f64>> {
        match self {
            Regressor::Linear(w) => {
                let din = w.nrows() - 1;
                if y.len() != din {
                    return Err(Error::shape(format!("descriptor has {} entries, expected {din}", y.len())));
                }
                Ok((0..w.ncols())
                    .map(|c| w[[din, c]] + (0..din).map(|r| y[r] * w[[r, c]]).sum::<f64>())
                    .collect())
            }
            Regressor::Mlp { net, mean, scale } => {
                let x = Array2::from_shape_vec((1, y.len()), y.to_vec()).map_err(|e| Error::shape(e.to_string()))?;
                let out = net.predict(x.view())?;
                Ok(out.row(0).iter().enumerate().map(|(c, &v)| v * scale[c] + mean[c]).collect())
            }
        }
    }
}

fn to_simplex(w: &[f64], floor: f64) -> Vec<f64> {
    let clipped: Vec<f64> = w.iter().map(|&v| if v.is_finite() { v.max(floor) } else { floor }).collect();
    let s: f64 = clipped.iter().sum();
    if s > 0.0 {
        clipped.into_iter().map(|v| v / s).collect()
    } else {
        vec![1.0 / w.len() as f64; w.len()]
    }
}

fn tv(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

fn stack(rows: &[Vec<f64>]) -> Array2<f64> {
    let (n, d) = (rows.len(), rows.first().map_or(0, |r| r.len()));
    Array2::from_shape_fn((n, d), |(i, j)| rows[i][j])
}

struct Triple {
    theta: Array2<f64>,
    p: Vec<f64>,
    z_head: Vec<f64>,
}

/// Predicts the projected base, partial dual and plan for each held-out
/// condition and pushes the base weights through the plan.
///
/// With a single mode the dual carries no information, so the weights
/// themselves are predicted directly.
pub fn theory_pipeline(
    train: &[Condition],
    test: &[Condition],
    gamma: ArrayView2<f64>,
    n_modes: usize,
    cfg: &PipelineConfig,
) -> Result<PipelineReport> {
    let (nj, d) = gamma.dim();
    if test.is_empty() {
        return Err(Error::invalid("no held-out conditions"));
    }
    if n_modes == 0 || n_modes > nj {
        return Err(Error::invalid(format!("need 1 ≤ I ≤ J = {nj}, got I = {n_modes}")));
    }
    for c in train.iter().chain(test) {
        if c.q.len() != nj {
            return Err(Error::shape(format!("condition has {} weights for {nj} atoms", c.q.len())));
        }
    }
    let oracle = cfg.predictor == PredictorKind::Oracle;
    let triples: Vec<Triple>;
    let mut direct: Option<Vec<Vec<f64>>> = None;
    if oracle {
        triples = training_targets(test, gamma, n_modes, cfg.restarts, cfg.seed)?
            .into_iter()
            .map(|t| Triple {
                theta: t.projection.measure.modes,
                p: t.projection.measure.weights,
                z_head: t.z_head,
            })
            .collect();
        if n_modes == 1 {
            direct = Some(test.iter().map(|c| c.q.clone()).collect());
        }
    } else {
        if train.is_empty() {
            return Err(Error::invalid("learned predictors need training conditions"));
        }
        let targets = training_targets(train, gamma, n_modes, cfg.restarts, cfg.seed)?;
        let x = stack(&train.iter().map(|c| c.y.clone()).collect::<Vec<_>>());
        let th = stack(&targets.iter().map(|t| t.projection.measure.modes.iter().copied().collect()).collect::<Vec<_>>());
        let pw = stack(&targets.iter().map(|t| t.projection.measure.weights.clone()).collect::<Vec<_>>());
        let zh = stack(&targets.iter().map(|t| t.z_head.clone()).collect::<Vec<_>>());
        let qd = stack(&train.iter().map(|c| c.q.clone()).collect::<Vec<_>>());
        let h_theta = fit(&x, &th, cfg.predictor, cfg, 1)?;
        let h_p = fit(&x, &pw, cfg.predictor, cfg, 2)?;
        let h_z = fit(&x, &zh, cfg.predictor, cfg, 3)?;
        let h_q = fit(&x, &qd, cfg.predictor, cfg, 4)?;
        triples = test
            .iter()
            .map(|c| {
                Ok(Triple {
                    theta: Array2::from_shape_vec((n_modes, d), h_theta.predict(&c.y)?)
                        .map_err(|e| Error::shape(e.to_string()))?,
                    p: to_simplex(&h_p.predict(&c.y)?, 1e-9),
                    z_head: h_z.predict(&c.y)?,
                })
            })
            .collect::<Result<_>>()?;
        direct = Some(
            test.iter()
                .map(|c| Ok(to_simplex(&h_q.predict(&c.y)?, 0.0)))
                .collect::<Result<_>>()?,
        );
    }

    let conditions: Vec<ConditionReport> = test
        .par_iter()
        .zip(&triples)
        .enumerate()
        .map(|(index, (c, tr))| {
            let direct_q = direct.as_ref().map(|d| d[index].clone());
            let mut rep = ConditionReport {
                index,
                tv: None,
                direct_tv: direct_q.as_ref().map(|dq| tv(dq, &c.q)),
                mw2: None,
                q_hat: None,
                support_size: 0,
                null_dim: None,
                residual: None,
                rule_disagreements: Vec::new(),
                error: None,
            };
            if let Err(e) = run_condition(c, tr, gamma, n_modes, cfg, direct_q, &mut rep) {
                rep.error = Some(e.to_string());
            }
            rep
        })
        .collect();

    let ok: Vec<f64> = conditions.iter().filter_map(|r| r.tv).collect();
    let direct_ok: Vec<f64> = conditions.iter().filter_map(|r| r.direct_tv).collect();
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Ok(PipelineReport {
        n_modes,
        predictor: cfg.predictor,
        failures: conditions.iter().filter(|r| r.error.is_some()).count(),
        max_tv: ok.iter().copied().reduce(f64::max),
        mean_tv: mean(&ok),
        direct_mean_tv: if oracle { None } else { mean(&direct_ok) },
        conditions,
    })
}

fn run_condition(
    c: &Condition,
    tr: &Triple,
    gamma: ArrayView2<f64>,
    n_modes: usize,
    cfg: &PipelineConfig,
    direct_q: Option<Vec<f64>>,
    rep: &mut ConditionReport,
) -> Result<()> {
    let base = GmmMeasure::new(tr.theta.clone(), tr.p.clone())?;
    let target = GmmMeasure::new(gamma.to_owned(), c.q.clone())?;
    rep.mw2 = Some(mixture_wasserstein(&base, &target)?.value);
    let q_hat = if n_modes == 1 {
        rep.support_size = gamma.nrows();
        direct_q.ok_or_else(|| Error::invalid("single-mode pipeline needs direct weights"))?
    } else {
        let ds = support_from_dual(tr.theta.view(), gamma, &tr.p, &tr.z_head, cfg.tight_tol)?;
        rep.rule_disagreements = ds.rule_disagreements.clone();
        rep.support_size = ds.pattern.count();
        if !ds.consistent() {
            return Err(Error::Infeasible(format!(
                "dual head leaves modes {:?} without a tight constraint",
                ds.untight_rows
            )));
        }
        let rec = reconstruct_plan(&ds.pattern, gamma, tr.theta.view(), &tr.p, None, &RECONSTRUCTION_CONSTRAINTS)?;
        rep.null_dim = Some(rec.null_dim);
        rep.residual = Some(rec.residual);
        let raw: Vec<f64> = (0..gamma.nrows())
            .map(|j| (0..n_modes).map(|i| tr.p[i] * rec.v[[i, j]]).sum())
            .collect();
        to_simplex(&raw, 0.0)
    };
    rep.tv = Some(tv(&q_hat, &c.q));
    rep.q_hat = Some(q_hat);
    Ok(())
}
