//! Descriptor-conditioned Gaussian-mixture base distribution.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{argmax, Activation, GradSet, Gradients, MlpParams, MlpVars, Tape, Trainable, Var};
use crate::rng::gumbel;
use crate::scalar::Scalar;

/// Isotropic mixture with shared variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct GmmParams<T> {
    #[serde(with = "crate::serde_mat")]
    pub theta: Array2<T>,
    pub p: Vec<T>,
    pub sigma2: T,
}

impl<T: Scalar> GmmParams<T> {
    pub fn new(theta: Array2<T>, p: Vec<T>, sigma2: T) -> Result<Self> {
        let g = Self { theta, p, sigma2 };
        g.validate()?;
        Ok(g)
    }

    pub fn n_modes(&self) -> usize {
        self.theta.nrows()
    }

    pub fn dim(&self) -> usize {
        self.theta.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.p.len() != self.theta.nrows() || self.p.is_empty() {
            return Err(Error::shape(format!(
                "{} weights for {} modes",
                self.p.len(),
                self.theta.nrows()
            )));
        }
        if self.theta.iter().any(|x| !x.is_finite()) {
            return Err(Error::non_finite("mode locations"));
        }
        if self.p.iter().any(|&x| !(x >= T::zero())) {
            return Err(Error::invalid("mixture weights must be nonnegative"));
        }
        let s: T = self.p.iter().copied().sum();
        if (s - T::one()).abs() > T::lit(1e-9).max(T::epsilon() * T::lit(64.0)) {
            return Err(Error::invalid(format!("mixture weights sum to {s}")));
        }
        if !(self.sigma2 > T::zero()) || !self.sigma2.is_finite() {
            return Err(Error::invalid("sigma2 must be positive and finite"));
        }
        Ok(())
    }

    /// Ancestral sampling: component from `p`, then `Θ_i + σ ε`.
    pub fn sample_hard<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Array2<T>> {
        self.validate()?;
        let (modes, _) = self.sample_hard_labeled(n, rng)?;
        Ok(modes)
    }

    /// Like [`sample_hard`](Self::sample_hard), also returning component labels.
    pub fn sample_hard_labeled<R: Rng + ?Sized>(
        &self,
        n: usize,
        rng: &mut R,
    ) -> Result<(Array2<T>, Vec<usize>)> {
        if n == 0 {
            return Err(Error::invalid("sample count must be at least 1"));
        }
        let weights: Vec<f64> = self.p.iter().map(|x| x.as_f64()).collect();
        let cat = WeightedIndex::new(&weights).map_err(|e| Error::invalid(e.to_string()))?;
        let sigma = self.sigma2.sqrt();
        let d = self.dim();
        let mut out = Array2::zeros((n, d));
        let mut labels = Vec::with_capacity(n);
        for mut row in out.rows_mut() {
            let k = cat.sample(rng);
            labels.push(k);
            for (x, &t) in row.iter_mut().zip(self.theta.row(k).iter()) {
                let e: f64 = rng.sample(StandardNormal);
                *x = t + sigma * T::lit(e);
            }
        }
        Ok((out, labels))
    }

    /// Hard samples from pre-drawn noise: component `argmax(log p + g)`.
    pub fn hard_from_noise(&self, noise: &MixtureNoise<T>) -> Result<Array2<T>> {
        noise.check(self.n_modes(), self.dim())?;
        let sigma = self.sigma2.sqrt();
        let logp: Vec<T> = self.p.iter().map(|&x| x.ln()).collect();
        let n = noise.len();
        let mut out = Array2::zeros((n, self.dim()));
        for s in 0..n {
            let scores: Vec<T> = logp
                .iter()
                .zip(noise.gumbel.row(s).iter())
                .map(|(&l, &g)| l + g)
                .collect();
            let k = argmax(&scores);
            for j in 0..self.dim() {
                out[[s, j]] = self.theta[[k, j]] + sigma * noise.eps[[s, k, j]];
            }
        }
        Ok(out)
    }

    /// Gumbel-softmax relaxed samples `Σ_i w_i (Θ_i + σ ε_i)`.
    pub fn sample_relaxed(&self, noise: &MixtureNoise<T>, temperature: T) -> Result<Array2<T>> {
        self.validate()?;
        noise.check(self.n_modes(), self.dim())?;
        let mut tape = Tape::new();
        let theta = tape.constant(self.theta.clone());
        let logp = Array2::from_shape_fn((1, self.n_modes()), |(_, i)| self.p[i].ln());
        let logits = tape.constant(logp);
        let x = relaxed_on_tape(&mut tape, theta, logits, self.sigma2.sqrt(), noise, temperature)?;
        Ok(tape.value(x).clone())
    }
}

/// Shared randomness for the hard and relaxed sampling paths.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureNoise<T> {
    /// `n × I` standard Gumbel draws.
    pub gumbel: Array2<T>,
    /// `n × I × D` standard normal draws, one per component.
    pub eps: Array3<T>,
}

impl<T: Scalar> MixtureNoise<T> {
    pub fn draw<R: Rng + ?Sized>(n: usize, modes: usize, dim: usize, rng: &mut R) -> Self {
        let gumbel = Array2::from_shape_fn((n, modes), |_| T::lit(gumbel(rng)));
        let eps = Array3::from_shape_fn((n, modes, dim), |_| {
            T::lit(rng.sample::<f64, _>(StandardNormal))
        });
        Self { gumbel, eps }
    }

    pub fn len(&self) -> usize {
        self.gumbel.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.gumbel.nrows() == 0
    }

    fn check(&self, modes: usize, dim: usize) -> Result<()> {
        let (n, i, d) = self.eps.dim();
        if self.gumbel.dim() != (n, i) || i != modes || d != dim {
            return Err(Error::shape(format!(
                "noise shapes {:?}/{:?} do not match {modes} modes in {dim} dimensions",
                self.gumbel.dim(),
                self.eps.dim()
            )));
        }
        Ok(())
    }
}

/// Records `x = w·Θ + σ Σ_i w_i ε_i`, `w = softmax((logits + g)/temperature)`.
pub fn relaxed_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    theta: Var,
    logits: Var,
    sigma: T,
    noise: &MixtureNoise<T>,
    temperature: T,
) -> Result<Var> {
    let (modes, dim) = tape.value(theta).dim();
    noise.check(modes, dim)?;
    let w = tape.gumbel_softmax(logits, &noise.gumbel, temperature)?;
    let mean = tape.matmul(w, theta)?;
    let spread = tape.row_mix(w, noise.eps.clone())?;
    let spread = tape.scale(spread, sigma)?;
    tape.add(mean, spread)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeSource {
    Predicted,
    FreeParameters,
}

/// Predictors `y ↦ (Θ, p)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct BasePredictor<T> {
    pub n_modes: usize,
    pub dim: usize,
    pub mode_source: ModeSource,
    pub mode_head: Option<MlpParams<T>>,
    #[serde(with = "crate::serde_mat::option", rename = "theta")]
    pub theta_table: Option<Array2<T>>,
    pub weight_head: MlpParams<T>,
    pub sigma2: T,
}

/// Tape handles produced by [`BasePredictor::record`].
#[derive(Debug, Clone)]
pub struct BaseVars {
    /// `I × D` mode locations.
    pub theta: Var,
    /// `1 × I` log-weights.
    pub log_p: Var,
    mode_vars: Option<MlpVars>,
    table: Option<Var>,
    weight_vars: MlpVars,
}

impl<T: Scalar> BasePredictor<T> {
    /// Network heads for both `Θ` and `p`. The mode head's output layer is
    /// scaled by `init_scale`.
    #[allow(clippy::too_many_arguments)]
    pub fn predicted<R: Rng + ?Sized>(
        descriptor_dim: usize,
        n_modes: usize,
        dim: usize,
        hidden: &[usize],
        activation: Activation,
        dropout: f64,
        sigma2: T,
        init_scale: T,
        rng: &mut R,
    ) -> Result<Self> {
        let mut sizes = vec![descriptor_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(n_modes * dim);
        let mut mode_head = MlpParams::init(&sizes, activation, dropout, rng)?;
        mode_head.scale_output(init_scale);
        let weight_head = Self::weight_head(descriptor_dim, n_modes, hidden, activation, dropout, rng)?;
        let bp = Self {
            n_modes,
            dim,
            mode_source: ModeSource::Predicted,
            mode_head: Some(mode_head),
            theta_table: None,
            weight_head,
            sigma2,
        };
        bp.validate()?;
        Ok(bp)
    }

    /// Learnable `Θ` table independent of the descriptor, with a network
    /// weight head.
    pub fn free<R: Rng + ?Sized>(
        descriptor_dim: usize,
        theta: Array2<T>,
        hidden: &[usize],
        activation: Activation,
        dropout: f64,
        sigma2: T,
        rng: &mut R,
    ) -> Result<Self> {
        let (n_modes, dim) = theta.dim();
        let weight_head = Self::weight_head(descriptor_dim, n_modes, hidden, activation, dropout, rng)?;
        let bp = Self {
            n_modes,
            dim,
            mode_source: ModeSource::FreeParameters,
            mode_head: None,
            theta_table: Some(theta),
            weight_head,
            sigma2,
        };
        bp.validate()?;
        Ok(bp)
    }

    fn weight_head<R: Rng + ?Sized>(
        descriptor_dim: usize,
        n_modes: usize,
        hidden: &[usize],
        activation: Activation,
        dropout: f64,
        rng: &mut R,
    ) -> Result<MlpParams<T>> {
        let mut sizes = vec![descriptor_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(n_modes);
        MlpParams::init(&sizes, activation, dropout, rng)
    }

    pub fn descriptor_dim(&self) -> usize {
        self.weight_head.input_dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_modes == 0 || self.dim == 0 {
            return Err(Error::shape("mixture needs at least one mode and dimension"));
        }
        if !(self.sigma2 > T::zero()) {
            return Err(Error::invalid("sigma2 must be positive"));
        }
        self.weight_head.validate()?;
        if self.weight_head.output_dim() != self.n_modes {
            return Err(Error::shape("weight head output must equal the mode count"));
        }
        match self.mode_source {
            ModeSource::Predicted => {
                let h = self
                    .mode_head
                    .as_ref()
                    .ok_or_else(|| Error::invalid("predicted modes need a mode head"))?;
                h.validate()?;
                if h.output_dim() != self.n_modes * self.dim
                    || h.input_dim() != self.descriptor_dim()
                {
                    return Err(Error::shape("mode head sizes do not match I·D and the descriptor"));
                }
            }
            ModeSource::FreeParameters => {
                let t = self
                    .theta_table
                    .as_ref()
                    .ok_or_else(|| Error::invalid("free modes need a theta table"))?;
                if t.dim() != (self.n_modes, self.dim) {
                    return Err(Error::shape("theta table shape does not match I×D"));
                }
                if t.iter().any(|x| !x.is_finite()) {
                    return Err(Error::non_finite("theta table"));
                }
            }
        }
        Ok(())
    }

    /// Evaluates the heads on `y`. Dropout is active only when `train` is set.
    pub fn predict_base<R: Rng + ?Sized>(&self, y: &[T], train: bool, rng: &mut R) -> Result<GmmParams<T>> {
        if y.len() != self.descriptor_dim() {
            return Err(Error::shape(format!(
                "descriptor has length {}, predictor expects {}",
                y.len(),
                self.descriptor_dim()
            )));
        }
        let theta = match self.mode_source {
            ModeSource::Predicted => {
                let out = self
                    .mode_head
                    .as_ref()
                    .expect("validated")
                    .forward_mode(y, train, rng)?;
                Array2::from_shape_vec((self.n_modes, self.dim), out).expect("I·D outputs")
            }
            ModeSource::FreeParameters => self.theta_table.clone().expect("validated"),
        };
        let logits = self.weight_head.forward_mode(y, train, rng)?;
        let p = crate::nn::softmax(&logits);
        GmmParams::new(theta, p, self.sigma2)
    }

    /// Records `Θ(y)` and `log p(y)` on a tape.
    pub fn record<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        y: &[T],
        train: bool,
        rng: &mut R,
    ) -> Result<BaseVars> {
        if y.len() != self.descriptor_dim() {
            return Err(Error::shape("descriptor length does not match the predictor"));
        }
        let yv = tape.constant(Array2::from_shape_vec((1, y.len()), y.to_vec()).expect("row"));
        let (theta, mode_vars, table) = match self.mode_source {
            ModeSource::Predicted => {
                let head = self.mode_head.as_ref().expect("validated");
                let (out, vars) = head.record_mode(tape, yv, train, rng)?;
                let theta = tape.reshape(out, self.n_modes, self.dim)?;
                (theta, Some(vars), None)
            }
            ModeSource::FreeParameters => {
                let t = tape.param(self.theta_table.clone().expect("validated"));
                (t, None, Some(t))
            }
        };
        let (logits, weight_vars) = self.weight_head.record_mode(tape, yv, train, rng)?;
        let log_p = tape.log_softmax_rows(logits)?;
        Ok(BaseVars {
            theta,
            log_p,
            mode_vars,
            table,
            weight_vars,
        })
    }

    /// Relaxed samples with gradient paths to all base parameters.
    pub fn record_relaxed(
        &self,
        tape: &mut Tape<T>,
        vars: &BaseVars,
        noise: &MixtureNoise<T>,
        temperature: T,
    ) -> Result<Var> {
        relaxed_on_tape(tape, vars.theta, vars.log_p, self.sigma2.sqrt(), noise, temperature)
    }

    /// Gradients in [`Trainable`] order.
    pub fn collect_grads(&self, vars: &BaseVars, g: &Gradients<T>) -> GradSet<T> {
        let mut out = GradSet::default();
        if let Some(mv) = &vars.mode_vars {
            out.extend(mv.collect(g, "mode_head."));
        }
        if let Some(t) = vars.table {
            out.push("theta".to_string(), g.wrt(t).iter().copied().collect());
        }
        out.extend(vars.weight_vars.collect(g, "weight_head."));
        out
    }

    /// Evaluates `Θ` for a batch of descriptors (eval mode).
    pub fn predict_theta_batch(&self, y: ArrayView2<T>) -> Result<Vec<Array2<T>>> {
        match self.mode_source {
            ModeSource::Predicted => {
                let out = self.mode_head.as_ref().expect("validated").predict(y)?;
                Ok(out
                    .axis_iter(Axis(0))
                    .map(|r| {
                        Array2::from_shape_vec((self.n_modes, self.dim), r.to_vec()).expect("I·D")
                    })
                    .collect())
            }
            ModeSource::FreeParameters => {
                let t = self.theta_table.clone().expect("validated");
                Ok(vec![t; y.nrows()])
            }
        }
    }
}

impl<T: Scalar> Trainable<T> for BasePredictor<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[T])) {
        if let Some(h) = &self.mode_head {
            h.visit(&format!("{prefix}mode_head."), f);
        }
        if let Some(t) = &self.theta_table {
            f(format!("{prefix}theta"), t.as_slice().expect("standard layout"));
        }
        self.weight_head.visit(&format!("{prefix}weight_head."), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [T])) {
        if let Some(h) = &mut self.mode_head {
            h.visit_mut(&format!("{prefix}mode_head."), f);
        }
        if let Some(t) = &mut self.theta_table {
            f(format!("{prefix}theta"), t.as_slice_mut().expect("standard layout"));
        }
        self.weight_head.visit_mut(&format!("{prefix}weight_head."), f);
    }
}
