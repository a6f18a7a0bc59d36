//! Velocity field, flow-matching losses and ODE integration.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::{BasePredictor, MixtureNoise};
use crate::nn::{Activation, GradSet, MlpParams, Tape, Trainable};
use crate::ot::{assignment_pairing_capped, Pairing, DEFAULT_PAIRING_CAP};
use crate::scalar::Scalar;

/// `v(x, t; y)` as a network on `[x, t, y]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent, bound = "T: Scalar")]
pub struct VelocityField<T> {
    pub net: MlpParams<T>,
}

impl<T: Scalar> VelocityField<T> {
    pub fn new<R: Rng + ?Sized>(
        dim: usize,
        descriptor_dim: usize,
        hidden: &[usize],
        activation: Activation,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut sizes = vec![dim + 1 + descriptor_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(dim);
        Ok(Self {
            net: MlpParams::init(&sizes, activation, dropout, rng)?,
        })
    }

    /// Wraps a network, checking that the output size leaves room for `t`
    /// and a descriptor in the input.
    pub fn from_net(net: MlpParams<T>) -> Result<Self> {
        net.validate()?;
        if net.input_dim() < net.output_dim() + 1 {
            return Err(Error::shape(format!(
                "velocity input size {} is smaller than state dimension {} + 1",
                net.input_dim(),
                net.output_dim()
            )));
        }
        Ok(Self { net })
    }

    pub fn dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn descriptor_dim(&self) -> usize {
        self.net.input_dim() - self.dim() - 1
    }

    fn inputs(&self, x: ArrayView2<T>, times: &[T], y: &[T]) -> Result<Array2<T>> {
        let d = self.dim();
        if x.ncols() != d {
            return Err(Error::shape(format!(
                "state has {} columns, field expects {d}",
                x.ncols()
            )));
        }
        if y.len() != self.descriptor_dim() {
            return Err(Error::shape(format!(
                "descriptor has length {}, field expects {}",
                y.len(),
                self.descriptor_dim()
            )));
        }
        if times.len() != 1 && times.len() != x.nrows() {
            return Err(Error::shape("need one shared time or one time per row"));
        }
        let mut inp = Array2::zeros((x.nrows(), self.net.input_dim()));
        for (s, (mut row, xr)) in inp.rows_mut().into_iter().zip(x.rows()).enumerate() {
            for j in 0..d {
                row[j] = xr[j];
            }
            row[d] = if times.len() == 1 { times[0] } else { times[s] };
            for (k, &yk) in y.iter().enumerate() {
                row[d + 1 + k] = yk;
            }
        }
        Ok(inp)
    }

    /// Deterministic evaluation at a shared time.
    pub fn eval(&self, x: ArrayView2<T>, t: T, y: &[T]) -> Result<Array2<T>> {
        let inp = self.inputs(x, &[t], y)?;
        self.net.predict(inp.view())
    }
}

impl<T: Scalar> Trainable<T> for VelocityField<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[T])) {
        self.net.visit(prefix, f)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [T])) {
        self.net.visit_mut(prefix, f)
    }
}

/// `(1 − t) x0 + t x1`.
pub fn interpolate<T: Scalar>(x0: &[T], x1: &[T], t: T) -> Result<Vec<T>> {
    if x0.len() != x1.len() {
        return Err(Error::shape(format!(
            "endpoints have lengths {} and {}",
            x0.len(),
            x1.len()
        )));
    }
    check_time(t)?;
    Ok(x0
        .iter()
        .zip(x1)
        .map(|(&a, &b)| (T::one() - t) * a + t * b)
        .collect())
}

fn check_time<T: Scalar>(t: T) -> Result<()> {
    if !(t >= T::zero() && t <= T::one()) {
        return Err(Error::invalid(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

/// Loss value with gradients for one parameter group.
#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    pub value: T,
    pub grads: GradSet<T>,
}

/// Mini-batch OT flow-matching loss
/// `mean_s ‖v(x_t, t, y) − (x1_{τ(s)} − x0_s)‖²` with
/// `x_t = (1 − t) x0_s + t x1_{τ(s)}`.
///
/// `times` holds one shared time or one per row. Gradients cover the
/// velocity parameters only; the base samples are constants.
#[allow(clippy::too_many_arguments)]
pub fn loss_ot<T: Scalar, R: Rng + ?Sized>(
    v: &VelocityField<T>,
    base: ArrayView2<T>,
    target: ArrayView2<T>,
    tau: &Pairing,
    times: &[T],
    y: &[T],
    train: bool,
    rng: &mut R,
) -> Result<LossOutput<T>> {
    let (n, d) = base.dim();
    if target.dim() != (n, d) {
        return Err(Error::shape(format!(
            "base {:?} and target {:?} batches differ",
            base.dim(),
            target.dim()
        )));
    }
    if tau.len() != n || !tau.is_bijection() {
        return Err(Error::invalid("pairing is not a permutation of the batch"));
    }
    for &t in times {
        check_time(t)?;
    }
    let mut xt = Array2::zeros((n, d));
    let mut disp = Array2::zeros((n, d));
    for s in 0..n {
        let t = if times.len() == 1 { times[0] } else { times[s.min(times.len() - 1)] };
        let j = tau.perm[s];
        for k in 0..d {
            let (a, b) = (base[[s, k]], target[[j, k]]);
            xt[[s, k]] = (T::one() - t) * a + t * b;
            disp[[s, k]] = b - a;
        }
    }
    let inp = v.inputs(xt.view(), times, y)?;
    let mut tape = Tape::new();
    let x = tape.constant(inp);
    let (out, vars) = v.net.record_mode(&mut tape, x, train, rng)?;
    disp.mapv_inplace(|u| -u);
    let resid = tape.offset(out, &disp)?;
    let loss = tape.mean_row_sq_norm(resid)?;
    let g = tape.backward(loss)?;
    Ok(LossOutput {
        value: tape.scalar(loss),
        grads: vars.collect(&g, ""),
    })
}

/// Geodesic-length loss `mean_s ‖x_{τ(s)} − x0_s‖²` with relaxed base samples.
///
/// The pairing `τ` is recomputed from the relaxed sample values and held
/// constant; gradients reach every base parameter through the samples.
#[allow(clippy::too_many_arguments)]
pub fn loss_geo<T: Scalar, R: Rng + ?Sized>(
    bp: &BasePredictor<T>,
    target: ArrayView2<T>,
    y: &[T],
    temperature: T,
    noise: &MixtureNoise<T>,
    train: bool,
    pairing_cap: usize,
    rng: &mut R,
) -> Result<(LossOutput<T>, Pairing)> {
    if noise.len() != target.nrows() {
        return Err(Error::shape("noise rows must match the target batch"));
    }
    if target.ncols() != bp.dim {
        return Err(Error::shape(format!(
            "target has {} columns, base has dimension {}",
            target.ncols(),
            bp.dim
        )));
    }
    let mut tape = Tape::new();
    let vars = bp.record(&mut tape, y, train, rng)?;
    let x0 = bp.record_relaxed(&mut tape, &vars, noise, temperature)?;
    let tau = assignment_pairing_capped(tape.value(x0).view(), target, pairing_cap)?;
    let neg = Array2::from_shape_fn(target.dim(), |(s, k)| -target[[tau.perm[s], k]]);
    let diff = tape.offset(x0, &neg)?;
    let loss = tape.mean_row_sq_norm(diff)?;
    let g = tape.backward(loss)?;
    Ok((
        LossOutput {
            value: tape.scalar(loss),
            grads: bp.collect_grads(&vars, &g),
        },
        tau,
    ))
}

/// Coupling between Gaussian noise and data in the baseline loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    Independent,
    Ot,
}

/// Standard normal base batch.
pub fn standard_normal<T: Scalar, R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Array2<T> {
    Array2::from_shape_fn((n, d), |_| T::lit(rng.sample::<f64, _>(StandardNormal)))
}

/// Conditional flow matching with a fixed `N(0, I)` base.
#[allow(clippy::too_many_arguments)]
pub fn loss_cfm_baseline<T: Scalar, R: Rng + ?Sized>(
    v: &VelocityField<T>,
    target: ArrayView2<T>,
    times: &[T],
    y: &[T],
    coupling: Coupling,
    train: bool,
    rng: &mut R,
) -> Result<LossOutput<T>> {
    let x0 = standard_normal(target.nrows(), target.ncols(), rng);
    loss_cfm_with_base(v, x0.view(), target, times, y, coupling, train, rng)
}

/// [`loss_cfm_baseline`] with the Gaussian draws supplied.
#[allow(clippy::too_many_arguments)]
pub fn loss_cfm_with_base<T: Scalar, R: Rng + ?Sized>(
    v: &VelocityField<T>,
    x0: ArrayView2<T>,
    target: ArrayView2<T>,
    times: &[T],
    y: &[T],
    coupling: Coupling,
    train: bool,
    rng: &mut R,
) -> Result<LossOutput<T>> {
    let tau = match coupling {
        Coupling::Independent => Pairing::identity(x0.nrows()),
        Coupling::Ot => assignment_pairing_capped(x0, target, DEFAULT_PAIRING_CAP)?,
    };
    loss_ot(v, x0, target, &tau, times, y, train, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    Rk4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub method: Method,
    pub steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            method: Method::Rk4,
            steps: 100,
        }
    }
}

/// Integrates `dx/dt = v(x, t; y)` from `t = 0` to `t = 1`.
pub fn integrate<T: Scalar>(
    v: &VelocityField<T>,
    x0: ArrayView2<T>,
    y: &[T],
    cfg: IntegratorConfig,
) -> Result<Array2<T>> {
    let mut snaps = integrate_snapshots(v, x0, y, cfg, &[cfg.steps])?;
    Ok(snaps.pop().expect("one snapshot"))
}

/// States after each requested number of steps (sorted ascending, each at
/// most `cfg.steps`).
pub fn integrate_snapshots<T: Scalar>(
    v: &VelocityField<T>,
    x0: ArrayView2<T>,
    y: &[T],
    cfg: IntegratorConfig,
    at_steps: &[usize],
) -> Result<Vec<Array2<T>>> {
    if cfg.steps == 0 {
        return Err(Error::invalid("integrator needs at least one step"));
    }
    if at_steps.windows(2).any(|w| w[0] > w[1]) || at_steps.iter().any(|&k| k > cfg.steps) {
        return Err(Error::invalid("snapshot steps must be sorted and within the step count"));
    }
    let h = T::one() / T::from_usize_lossy(cfg.steps);
    let half = h / T::lit(2.0);
    let mut x = x0.to_owned();
    let mut out = Vec::with_capacity(at_steps.len());
    let mut next = 0;
    let last = at_steps.last().copied().unwrap_or(0);
    for k in 0..=last {
        while next < at_steps.len() && at_steps[next] == k {
            out.push(x.clone());
            next += 1;
        }
        if k == last {
            break;
        }
        let t = T::from_usize_lossy(k) * h;
        match cfg.method {
            Method::Euler => {
                let k1 = v.eval(x.view(), t, y)?;
                x.scaled_add(h, &k1);
            }
            Method::Rk4 => {
                let k1 = v.eval(x.view(), t, y)?;
                let k2 = v.eval((&x + &(&k1 * half)).view(), t + half, y)?;
                let k3 = v.eval((&x + &(&k2 * half)).view(), t + half, y)?;
                let k4 = v.eval((&x + &(&k3 * h)).view(), t + h, y)?;
                let sixth = h / T::lit(6.0);
                let two = T::lit(2.0);
                ndarray::Zip::from(&mut x)
                    .and(&k1)
                    .and(&k2)
                    .and(&k3)
                    .and(&k4)
                    .for_each(|x, &a, &b, &c, &d| *x += sixth * (a + two * b + two * c + d));
            }
        }
        if x.iter().any(|z| !z.is_finite()) {
            return Err(Error::non_finite(format!("integration step {}", k + 1)));
        }
    }
    Ok(out)
}

/// Concatenates rows of several batches (used to integrate in one call).
pub fn stack_rows<T: Scalar>(parts: &[ArrayView2<T>]) -> Result<Array2<T>> {
    ndarray::concatenate(Axis(0), parts).map_err(|e| Error::shape(e.to_string()))
}
