//! Alternating training of the velocity field and the base predictors,
//! validation-driven checkpoint selection and sampling from checkpoints.

mod config;
mod planner;

use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::Population;
use crate::error::{Error, Result};
use crate::flow::{integrate, integrate_snapshots, loss_cfm_baseline, loss_geo, loss_ot, standard_normal, VelocityField};
use crate::metrics::{report_capped, MetricReport};
use crate::mixture::{BasePredictor, MixtureNoise, ModeSource};
use crate::nn::OptState;
use crate::ot::assignment_pairing_capped;
use crate::rng::{label_word, mix_seed, stream};

pub use config::{
    BaseConfig, ModelKind, NetConfig, RunConfig, ScheduleConfig, TrainerConfig, ValidationConfig,
};
pub use planner::{Period, PlannerDecision, TrainMode, TrainingPlan};

const TAG_INIT: u64 = 0x696e_6974;
const TAG_STEP: u64 = 0x7374_6570;
const TAG_POP: u64 = 0x706f_7075;
const TAG_VAL: u64 = 0x7661_6c69;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptStates {
    pub velocity: OptState<f64>,
    pub base: Option<OptState<f64>>,
}

/// Every random draw of a run is a function of the seed and the global
/// iteration counter, so these two numbers are the whole generator state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub iteration: u64,
}

/// Complete training state; also the on-disk checkpoint format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub velocity: VelocityField<f64>,
    pub base: Option<BasePredictor<f64>>,
    pub opt_state: OptStates,
    /// Completed epochs.
    pub epoch: usize,
    pub rng_state: RngState,
}

fn check_populations(pops: &[&Population], what: &str) -> Result<(usize, usize)> {
    let first = pops
        .first()
        .ok_or_else(|| Error::invalid(format!("{what} set has no populations")))?;
    let (d, dy) = (first.samples.ncols(), first.descriptor.len());
    for p in pops {
        if p.samples.nrows() == 0 {
            return Err(Error::Data(format!("population {} is empty", p.condition_id)));
        }
        if p.samples.ncols() != d || p.descriptor.len() != dy {
            return Err(Error::shape(format!(
                "population {} has dimension {} and descriptor length {}, expected {d} and {dy}",
                p.condition_id,
                p.samples.ncols(),
                p.descriptor.len()
            )));
        }
    }
    Ok((d, dy))
}

impl Checkpoint {
    /// Fresh parameters for the given training populations. Free mode
    /// tables start at one sample of each mode's assigned condition.
    pub fn init(config: &RunConfig, train: &[&Population]) -> Result<Self> {
        config.validate()?;
        let (dim, dy) = check_populations(train, "training")?;
        let seed = config.seed;
        let mut rng = stream(&[seed, TAG_INIT]);
        let vn = &config.velocity;
        let velocity = VelocityField::new(dim, dy, &vn.hidden, vn.activation, vn.dropout, &mut rng)?;
        let t = &config.trainer;
        let (base, base_opt) = match config.model {
            ModelKind::Cfm => (None, None),
            ModelKind::Mixflow => {
                let b = &config.base;
                let n_modes = b.n_modes.unwrap_or(train.len());
                let bp = match b.mode_source {
                    ModeSource::FreeParameters => {
                        let mut theta = Array2::zeros((n_modes, dim));
                        for i in 0..n_modes {
                            let pop = train[i * train.len() / n_modes];
                            let r = rng.random_range(0..pop.samples.nrows());
                            theta.row_mut(i).assign(&pop.samples.row(r));
                        }
                        BasePredictor::free(dy, theta, &b.net.hidden, b.net.activation, b.net.dropout, b.sigma2, &mut rng)?
                    }
                    ModeSource::Predicted => BasePredictor::predicted(
                        dy,
                        n_modes,
                        dim,
                        &b.net.hidden,
                        b.net.activation,
                        b.net.dropout,
                        b.sigma2,
                        b.init_scale,
                        &mut rng,
                    )?,
                };
                let opt = OptState::with_kind(t.optimizer, t.base_lr.unwrap_or(t.lr));
                (Some(bp), Some(opt))
            }
        };
        Ok(Self {
            config: config.clone(),
            velocity,
            base,
            opt_state: OptStates {
                velocity: OptState::with_kind(t.optimizer, t.lr),
                base: base_opt,
            },
            epoch: 0,
            rng_state: RngState { seed, iteration: 0 },
        })
    }

    pub fn dim(&self) -> usize {
        self.velocity.dim()
    }

    pub fn descriptor_dim(&self) -> usize {
        self.velocity.descriptor_dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.velocity.net.validate()?;
        match (self.config.model, &self.base) {
            (ModelKind::Cfm, None) => {}
            (ModelKind::Mixflow, Some(b)) => {
                b.validate()?;
                if b.dim != self.dim() || b.descriptor_dim() != self.descriptor_dim() {
                    return Err(Error::shape("base predictor and velocity field disagree on dimensions"));
                }
            }
            (m, _) => return Err(Error::invalid(format!("checkpoint base does not match model {m}"))),
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c: Self = serde_json::from_str(&text)?;
        c.validate()?;
        Ok(c)
    }

    fn check_descriptor(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.descriptor_dim() {
            return Err(Error::shape(format!(
                "descriptor has length {}, checkpoint expects {}",
                y.len(),
                self.descriptor_dim()
            )));
        }
        Ok(())
    }

    /// Draws from the base distribution for descriptor `y` in eval mode.
    pub fn base_samples<R: Rng + ?Sized>(&self, y: &[f64], n: usize, rng: &mut R) -> Result<Array2<f64>> {
        self.check_descriptor(y)?;
        match &self.base {
            Some(b) => b.predict_base(y, false, rng)?.sample_hard(n, rng),
            None => Ok(standard_normal(n, self.dim(), rng)),
        }
    }

    /// Base draws pushed through the flow to `t = 1`.
    pub fn sample<R: Rng + ?Sized>(&self, y: &[f64], n: usize, rng: &mut R) -> Result<Array2<f64>> {
        let x0 = self.base_samples(y, n, rng)?;
        integrate(&self.velocity, x0.view(), y, self.config.integrator)
    }

    /// States at the requested times, each rounded to the nearest step.
    pub fn sample_snapshots<R: Rng + ?Sized>(
        &self,
        y: &[f64],
        n: usize,
        times: &[f64],
        rng: &mut R,
    ) -> Result<Vec<Array2<f64>>> {
        if times.is_empty() {
            return Err(Error::invalid("need at least one snapshot time"));
        }
        let steps = self.config.integrator.steps;
        let mut at = Vec::with_capacity(times.len());
        for &t in times {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::invalid(format!("snapshot time {t} is outside [0, 1]")));
            }
            at.push((t * steps as f64).round() as usize);
        }
        let mut order: Vec<usize> = (0..at.len()).collect();
        order.sort_by_key(|&i| at[i]);
        let sorted: Vec<usize> = order.iter().map(|&i| at[i]).collect();
        let x0 = self.base_samples(y, n, rng)?;
        let snaps = integrate_snapshots(&self.velocity, x0.view(), y, self.config.integrator, &sorted)?;
        let mut out = vec![Array2::zeros((0, 0)); at.len()];
        for (snap, &i) in snaps.into_iter().zip(&order) {
            out[i] = snap;
        }
        Ok(out)
    }

    pub fn plan(&self) -> Result<TrainingPlan> {
        TrainingPlan::from_schedule(self.config.trainer.epochs, &self.config.trainer.schedule)
    }

    fn temperature(&self) -> Result<f64> {
        let t = &self.config.trainer;
        let frac = self.plan()?.alternating_progress(self.epoch);
        Ok(t.temperature_start * (t.temperature_end / t.temperature_start).powf(frac))
    }
}

/// `n` rows without replacement when the population is large enough, with
/// replacement otherwise.
pub fn draw_batch<R: Rng + ?Sized>(samples: &Array2<f64>, n: usize, rng: &mut R) -> Array2<f64> {
    let rows = samples.nrows();
    let idx: Vec<usize> = if rows >= n {
        sample_indices(rng, rows, n).into_vec()
    } else {
        (0..n).map(|_| rng.random_range(0..rows)).collect()
    };
    samples.select(Axis(0), &idx)
}

/// Loss and branch of one completed iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationLog {
    pub iteration: u64,
    pub mode: TrainMode,
    pub loss: f64,
}

/// One optimizer step on the parameter group chosen by `decision`. Nothing
/// is modified when the loss or a gradient is non-finite.
pub fn train_iteration(state: &mut Checkpoint, decision: PlannerDecision, pop: &Population) -> Result<IterationLog> {
    let cfg = &state.config;
    let t = &cfg.trainer;
    let it = state.rng_state.iteration;
    let mut rng = stream(&[state.rng_state.seed, TAG_STEP, it]);
    let s = t.batch_size;
    if pop.samples.ncols() != state.dim() {
        return Err(Error::shape(format!(
            "population {} has dimension {}, model expects {}",
            pop.condition_id,
            pop.samples.ncols(),
            state.dim()
        )));
    }
    state.check_descriptor(&pop.descriptor)?;
    let batch = draw_batch(&pop.samples, s, &mut rng);
    let times: Vec<f64> = if t.per_sample_time {
        (0..s).map(|_| rng.random::<f64>()).collect()
    } else {
        vec![rng.random::<f64>()]
    };
    let y = &pop.descriptor;
    let h_train = !decision.flag_settoeval_h;
    let loss = match (cfg.model, decision.mode_train) {
        (ModelKind::Cfm, TrainMode::BaseDistribution) => {
            return Err(Error::invalid("the baseline has no base distribution to train"));
        }
        (ModelKind::Cfm, TrainMode::VelocityField) => {
            let out = loss_cfm_baseline(&state.velocity, batch.view(), &times, y, cfg.coupling, true, &mut rng)?;
            check_loss(out.value, it)?;
            state.opt_state.velocity.step(&mut state.velocity, &out.grads)?;
            out.value
        }
        (ModelKind::Mixflow, mode) => {
            let base = state.base.as_ref().ok_or_else(|| Error::invalid("checkpoint has no base predictor"))?;
            match mode {
                TrainMode::VelocityField => {
                    let x0 = base.predict_base(y, h_train, &mut rng)?.sample_hard(s, &mut rng)?;
                    let tau = assignment_pairing_capped(x0.view(), batch.view(), t.pairing_cap)?;
                    let out = loss_ot(&state.velocity, x0.view(), batch.view(), &tau, &times, y, true, &mut rng)?;
                    check_loss(out.value, it)?;
                    state.opt_state.velocity.step(&mut state.velocity, &out.grads)?;
                    out.value
                }
                TrainMode::BaseDistribution => {
                    let temp = state.temperature()?;
                    let noise = MixtureNoise::draw(s, base.n_modes, base.dim, &mut rng);
                    let (out, _) = loss_geo(base, batch.view(), y, temp, &noise, h_train, t.pairing_cap, &mut rng)?;
                    check_loss(out.value, it)?;
                    let opt = state.opt_state.base.as_mut().ok_or_else(|| Error::invalid("missing base optimizer"))?;
                    opt.step(state.base.as_mut().expect("checked"), &out.grads)?;
                    out.value
                }
            }
        }
    };
    state.rng_state.iteration += 1;
    Ok(IterationLog {
        iteration: it,
        mode: decision.mode_train,
        loss,
    })
}

fn check_loss(v: f64, it: u64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::non_finite(format!("training loss at iteration {it}")))
    }
}

/// One row of the validation log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub condition_id: String,
    pub mmd: f64,
    pub w1: f64,
    pub w2: f64,
    pub ed: f64,
}

/// Metrics of generated against reference samples for each population, in
/// input order. Both sides are fixed draws of `samples` points determined by
/// `seed` and the condition id.
pub fn evaluate(state: &Checkpoint, pops: &[&Population], samples: usize, cap: usize, seed: u64) -> Result<Vec<MetricReport<f64>>> {
    pops.par_iter()
        .map(|p| {
            let label = label_word(&p.condition_id);
            let mut rng = stream(&[seed, TAG_VAL, label]);
            let gen = state.sample(&p.descriptor, samples, &mut rng)?;
            let n = p.samples.nrows().min(samples);
            let mut idx = sample_indices(&mut rng, p.samples.nrows(), n).into_vec();
            idx.sort_unstable();
            let reference = p.samples.select(Axis(0), &idx);
            report_capped(gen.view(), reference.view(), mix_seed(&[seed, label]), cap)
        })
        .collect()
}

/// Result of [`fit`].
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    /// Epoch of the best checkpoint, when validation ran.
    pub best_epoch: Option<usize>,
    pub best_w2: Option<f64>,
    pub log: Vec<MetricRow>,
    /// Set when training stopped on a non-finite value; `last` is then the
    /// last good state.
    pub aborted: Option<String>,
}

impl FitOutcome {
    /// Writes `best.json`, `last.json` and `metrics.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.best.save(&dir.join("best.json"))?;
        self.last.save(&dir.join("last.json"))?;
        write_metric_log(&self.log, &dir.join("metrics.csv"))
    }
}

pub fn write_metric_log(rows: &[MetricRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(["epoch", "condition_id", "mmd", "w1", "w2", "ed"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metric_log(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Trains from scratch and keeps the checkpoint with the lowest mean
/// validation W2. Without validation populations the last state is returned
/// as the best.
pub fn fit(config: &RunConfig, train: &[&Population], val: &[&Population]) -> Result<FitOutcome> {
    let state = Checkpoint::init(config, train)?;
    fit_from(state, train, val)
}

/// [`fit`] starting from an existing state.
pub fn fit_from(mut state: Checkpoint, train: &[&Population], val: &[&Population]) -> Result<FitOutcome> {
    let config = state.config.clone();
    let (d, dy) = check_populations(train, "training")?;
    if !val.is_empty() {
        let (vd, vdy) = check_populations(val, "validation")?;
        if (vd, vdy) != (d, dy) {
            return Err(Error::shape("validation populations do not match the training dimensions"));
        }
    }
    let plan = state.plan()?;
    let iters = config.trainer.iterations_per_epoch.unwrap_or(train.len());
    let seed = config.seed;
    let vcfg = &config.validation;
    let mut best = state.clone();
    let mut best_w2: Option<f64> = None;
    let mut best_epoch = None;
    let mut log = Vec::new();
    let abort = |best: Checkpoint, last: Checkpoint, best_epoch, best_w2, log, e: Error| FitOutcome {
        best,
        last,
        best_epoch,
        best_w2,
        log,
        aborted: Some(e.to_string()),
    };
    for epoch in state.epoch..plan.total() {
        for _ in 0..iters {
            let it = state.rng_state.iteration;
            let k = stream(&[seed, TAG_POP, it]).random_range(0..train.len());
            let mut decision = plan.next(epoch, it)?;
            if config.model == ModelKind::Cfm {
                decision.mode_train = TrainMode::VelocityField;
            }
            match train_iteration(&mut state, decision, train[k]) {
                Ok(_) => {}
                Err(e @ Error::NonFinite { .. }) => {
                    return Ok(abort(best, state, best_epoch, best_w2, log, e));
                }
                Err(e) => return Err(e),
            }
        }
        state.epoch = epoch + 1;
        let due = (epoch + 1) % vcfg.every == 0 || epoch + 1 == plan.total();
        if val.is_empty() || !due {
            continue;
        }
        let reports = match evaluate(&state, val, vcfg.samples, vcfg.subsample_cap, seed) {
            Ok(r) => r,
            Err(e @ Error::NonFinite { .. }) => return Ok(abort(best, state, best_epoch, best_w2, log, e)),
            Err(e) => return Err(e),
        };
        let mean_w2 = reports.iter().map(|r| r.w2).sum::<f64>() / reports.len() as f64;
        for (p, r) in val.iter().zip(&reports) {
            log.push(MetricRow {
                epoch: epoch + 1,
                condition_id: p.condition_id.clone(),
                mmd: r.mmd,
                w1: r.w1,
                w2: r.w2,
                ed: r.ed,
            });
        }
        if best_w2.is_none_or(|b| mean_w2 < b) {
            best = state.clone();
            best_w2 = Some(mean_w2);
            best_epoch = Some(epoch + 1);
        }
    }
    if val.is_empty() {
        best = state.clone();
    }
    Ok(FitOutcome {
        best,
        last: state,
        best_epoch,
        best_w2,
        log,
        aborted: None,
    })
}

/// Mean of each metric over conditions.
pub fn mean_report(reports: &[MetricReport<f64>]) -> Option<[f64; 4]> {
    if reports.is_empty() {
        return None;
    }
    let n = reports.len() as f64;
    let mut m = [0.0; 4];
    for r in reports {
        for (acc, v) in m.iter_mut().zip([r.mmd, r.w1, r.w2, r.ed]) {
            *acc += v / n;
        }
    }
    Some(m)
}
