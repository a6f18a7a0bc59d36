use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::optim::{GradSet, Trainable};
use super::tape::{Gradients, Tape, Var};
use super::Activation;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Parameters of a fully connected network.
///
/// `weights[k]` has shape `(layer_sizes[k + 1], layer_sizes[k])`. Hidden
/// layers apply `activation` followed by inverted dropout; the last layer is
/// affine.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<T> {
    pub layer_sizes: Vec<usize>,
    pub weights: Vec<Array2<T>>,
    pub biases: Vec<Array1<T>>,
    pub activation: Activation,
    pub dropout_rate: T,
    pub train_mode: bool,
}

/// Tape handles of one recorded forward pass.
#[derive(Debug, Clone)]
pub struct MlpVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

impl<T: Scalar> MlpParams<T> {
    /// All-zero network.
    pub fn zeros(layer_sizes: &[usize], activation: Activation) -> Result<Self> {
        check_sizes(layer_sizes)?;
        let weights = layer_sizes
            .windows(2)
            .map(|w| Array2::zeros((w[1], w[0])))
            .collect();
        let biases = layer_sizes[1..].iter().map(|&m| Array1::zeros(m)).collect();
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
            activation,
            dropout_rate: T::zero(),
            train_mode: false,
        })
    }

    /// Uniform fan-in initialization `U(-1/√in, 1/√in)` for weights and biases.
    pub fn init<R: Rng + ?Sized>(
        layer_sizes: &[usize],
        activation: Activation,
        dropout_rate: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut p = Self::zeros(layer_sizes, activation)?;
        p.set_dropout(dropout_rate)?;
        for (w, b) in p.weights.iter_mut().zip(p.biases.iter_mut()) {
            let bound = 1.0 / (w.ncols() as f64).sqrt();
            w.mapv_inplace(|_| T::lit(rng.random_range(-bound..bound)));
            b.mapv_inplace(|_| T::lit(rng.random_range(-bound..bound)));
        }
        Ok(p)
    }

    pub fn set_dropout(&mut self, rate: f64) -> Result<()> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        self.dropout_rate = T::lit(rate);
        Ok(())
    }

    /// Multiplies the last layer by `s` (small-output initialization).
    pub fn scale_output(&mut self, s: T) {
        if let (Some(w), Some(b)) = (self.weights.last_mut(), self.biases.last_mut()) {
            w.mapv_inplace(|x| x * s);
            b.mapv_inplace(|x| x * s);
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated sizes")
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Checks the shape chain and that every entry is finite.
    pub fn validate(&self) -> Result<()> {
        check_sizes(&self.layer_sizes)?;
        let n = self.layer_sizes.len() - 1;
        if self.weights.len() != n || self.biases.len() != n {
            return Err(Error::shape(format!(
                "{} layer sizes need {n} weight matrices and bias vectors, got {} and {}",
                self.layer_sizes.len(),
                self.weights.len(),
                self.biases.len()
            )));
        }
        for (k, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let want = (self.layer_sizes[k + 1], self.layer_sizes[k]);
            if w.dim() != want || b.len() != want.0 {
                return Err(Error::shape(format!(
                    "layer {k}: weight {:?} and bias {} do not match sizes {:?}",
                    w.dim(),
                    b.len(),
                    want
                )));
            }
            if w.iter().chain(b.iter()).any(|x| !x.is_finite()) {
                return Err(Error::non_finite(format!("layer{k} parameters")));
            }
        }
        let r = self.dropout_rate;
        if !(r >= T::zero() && r < T::one()) {
            return Err(Error::invalid("dropout rate outside [0, 1)"));
        }
        Ok(())
    }

    fn dropout_active(&self, train: bool) -> bool {
        train && self.dropout_rate > T::zero()
    }

    fn dropout_mask<R: Rng + ?Sized>(&self, rows: usize, cols: usize, rng: &mut R) -> Array2<T> {
        let keep = T::one() - self.dropout_rate;
        let keep_f = keep.as_f64();
        let scale = T::one() / keep;
        Array2::from_shape_fn((rows, cols), |_| {
            if rng.random::<f64>() < keep_f {
                scale
            } else {
                T::zero()
            }
        })
    }

    /// Single-input forward pass. Dropout is drawn from `rng` only in train
    /// mode with a positive rate.
    pub fn forward<R: Rng + ?Sized>(&self, x: &[T], rng: &mut R) -> Result<Vec<T>> {
        self.forward_mode(x, self.train_mode, rng)
    }

    /// [`forward`](Self::forward) with the train/eval mode given explicitly.
    pub fn forward_mode<R: Rng + ?Sized>(&self, x: &[T], train: bool, rng: &mut R) -> Result<Vec<T>> {
        if x.len() != self.input_dim() {
            return Err(Error::shape(format!(
                "input has length {}, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let last = self.num_layers() - 1;
        let mut h = x.to_vec();
        let mut next = Vec::new();
        for k in 0..self.num_layers() {
            affine_row(&self.weights[k], &self.biases[k], &h, &mut next);
            if k < last {
                let act = self.activation;
                next.iter_mut().for_each(|v| *v = act.apply(*v));
                if self.dropout_active(train) {
                    let mask = self.dropout_mask(1, next.len(), rng);
                    next.iter_mut().zip(mask.iter()).for_each(|(v, &m)| *v *= m);
                }
            }
            std::mem::swap(&mut h, &mut next);
        }
        Ok(h)
    }

    /// Deterministic batched evaluation (dropout off regardless of mode).
    ///
    /// Each row goes through the same fixed-order kernel, so the result for
    /// a row does not depend on the other rows of the batch.
    pub fn predict(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::shape(format!(
                "input has {} columns, network expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        let n = x.nrows();
        let d_out = self.output_dim();
        let run = |r: usize| -> Vec<T> {
            let mut h: Vec<T> = x.row(r).to_vec();
            let mut next = Vec::new();
            let last = self.num_layers() - 1;
            for k in 0..self.num_layers() {
                affine_row(&self.weights[k], &self.biases[k], &h, &mut next);
                if k < last {
                    let act = self.activation;
                    next.iter_mut().for_each(|v| *v = act.apply(*v));
                }
                std::mem::swap(&mut h, &mut next);
            }
            h
        };
        let rows: Vec<Vec<T>> = if n >= 64 && rayon::current_num_threads() > 1 {
            (0..n).into_par_iter().map(run).collect()
        } else {
            (0..n).map(run).collect()
        };
        let flat: Vec<T> = rows.into_iter().flatten().collect();
        let out = Array2::from_shape_vec((n, d_out), flat).expect("row lengths");
        Ok(out)
    }

    /// Records a forward pass over the rows of `input` on `tape`.
    ///
    /// Weights and biases become parameter leaves; dropout masks (train mode
    /// only) are tape constants drawn from `rng`.
    pub fn record<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        input: Var,
        rng: &mut R,
    ) -> Result<(Var, MlpVars)> {
        self.record_mode(tape, input, self.train_mode, rng)
    }

    pub fn record_mode<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        input: Var,
        train: bool,
        rng: &mut R,
    ) -> Result<(Var, MlpVars)> {
        let (n, d) = tape.value(input).dim();
        if d != self.input_dim() {
            return Err(Error::shape(format!(
                "input has {d} columns, network expects {}",
                self.input_dim()
            )));
        }
        let mut vars = MlpVars {
            weights: Vec::with_capacity(self.num_layers()),
            biases: Vec::with_capacity(self.num_layers()),
        };
        let last = self.num_layers() - 1;
        let mut h = input;
        for k in 0..self.num_layers() {
            let w = tape.param(self.weights[k].clone());
            let b = tape.param(self.biases[k].clone().insert_axis(Axis(0)));
            vars.weights.push(w);
            vars.biases.push(b);
            let z = tape.matmul_t(h, w)?;
            h = tape.add_row(z, b)?;
            if k < last {
                h = tape.activation(h, self.activation)?;
                if self.dropout_active(train) {
                    let mask = self.dropout_mask(n, self.layer_sizes[k + 1], rng);
                    h = tape.mul_const(h, mask)?;
                }
            }
        }
        Ok((h, vars))
    }
}

impl MlpVars {
    /// Gradients in the order and naming of [`Trainable::visit`].
    pub fn collect<T: Scalar>(&self, g: &Gradients<T>, prefix: &str) -> GradSet<T> {
        let mut set = GradSet::default();
        for (k, (&w, &b)) in self.weights.iter().zip(&self.biases).enumerate() {
            set.push(
                format!("{prefix}layer{k}.weight"),
                g.wrt(w).iter().copied().collect(),
            );
            set.push(
                format!("{prefix}layer{k}.bias"),
                g.wrt(b).iter().copied().collect(),
            );
        }
        set
    }
}

impl<T: Scalar> Trainable<T> for MlpParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[T])) {
        for (k, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            f(
                format!("{prefix}layer{k}.weight"),
                w.as_slice().expect("standard layout"),
            );
            f(
                format!("{prefix}layer{k}.bias"),
                b.as_slice().expect("standard layout"),
            );
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [T])) {
        for (k, (w, b)) in self.weights.iter_mut().zip(self.biases.iter_mut()).enumerate() {
            f(
                format!("{prefix}layer{k}.weight"),
                w.as_slice_mut().expect("standard layout"),
            );
            f(
                format!("{prefix}layer{k}.bias"),
                b.as_slice_mut().expect("standard layout"),
            );
        }
    }
}

fn check_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 {
        return Err(Error::shape("a network needs at least input and output sizes"));
    }
    if sizes.contains(&0) {
        return Err(Error::shape(format!("layer sizes must be positive: {sizes:?}")));
    }
    Ok(())
}

/// `out = W·x + b` with a fixed eight-way accumulation order.
#[inline]
fn affine_row<T: Scalar>(w: &Array2<T>, b: &Array1<T>, x: &[T], out: &mut Vec<T>) {
    out.clear();
    for (row, &bias) in w.rows().into_iter().zip(b.iter()) {
        let r = row.as_slice().expect("standard layout");
        let mut acc = [T::zero(); 8];
        let chunks = r.len() / 8;
        for c in 0..chunks {
            let o = c * 8;
            for l in 0..8 {
                acc[l] += r[o + l] * x[o + l];
            }
        }
        let mut tail = T::zero();
        for i in chunks * 8..r.len() {
            tail += r[i] * x[i];
        }
        let s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
        out.push(s + tail + bias);
    }
}

#[derive(Serialize, Deserialize)]
struct MlpJson<T> {
    layer_sizes: Vec<usize>,
    weights: Vec<Vec<T>>,
    biases: Vec<Vec<T>>,
    activation: Activation,
    dropout_rate: T,
}

impl<T: Scalar> Serialize for MlpParams<T> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MlpJson {
            layer_sizes: self.layer_sizes.clone(),
            weights: self.weights.iter().map(|w| w.iter().copied().collect()).collect(),
            biases: self.biases.iter().map(|b| b.to_vec()).collect(),
            activation: self.activation,
            dropout_rate: self.dropout_rate,
        }
        .serialize(s)
    }
}

impl<'de, T: Scalar> Deserialize<'de> for MlpParams<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = MlpJson::<T>::deserialize(d)?;
        check_sizes(&raw.layer_sizes).map_err(D::Error::custom)?;
        let n = raw.layer_sizes.len() - 1;
        if raw.weights.len() != n || raw.biases.len() != n {
            return Err(D::Error::custom("weights/biases do not match layer_sizes"));
        }
        let mut weights = Vec::with_capacity(n);
        for (k, w) in raw.weights.into_iter().enumerate() {
            let shape = (raw.layer_sizes[k + 1], raw.layer_sizes[k]);
            weights.push(Array2::from_shape_vec(shape, w).map_err(|_| {
                D::Error::custom(format!("layer {k} weight length does not match {shape:?}"))
            })?);
        }
        let params = MlpParams {
            layer_sizes: raw.layer_sizes,
            weights,
            biases: raw.biases.into_iter().map(Array1::from).collect(),
            activation: raw.activation,
            dropout_rate: raw.dropout_rate,
            train_mode: false,
        };
        params.validate().map_err(D::Error::custom)?;
        Ok(params)
    }
}
