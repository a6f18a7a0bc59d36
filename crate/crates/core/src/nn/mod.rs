//! Dense networks, reverse-mode gradients, relaxed categorical sampling and
//! first-order optimizers.

mod mlp;
mod optim;
mod tape;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use mlp::{MlpParams, MlpVars};
pub use optim::{GradSet, OptKind, OptState, Trainable};
pub use tape::{Gradients, Tape, Var};

#[allow(unused_imports)]
pub(crate) use tape::{log_sum_exp, softmax_in_place};

use crate::error::{Error, Result};
use crate::rng::gumbel;
use crate::scalar::Scalar;

/// Hidden-layer nonlinearity. The output layer is always affine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Silu,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "silu" => Ok(Activation::Silu),
            other => Err(Error::UnsupportedPrimitive(other.to_string())),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Silu => "silu",
        })
    }
}

/// Numerically stable softmax of a vector.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

/// Relaxed one-hot sample `softmax((logits + g) / temperature)` with fresh
/// Gumbel noise `g`.
pub fn gumbel_softmax<T: Scalar, R: Rng + ?Sized>(
    logits: &[T],
    temperature: T,
    rng: &mut R,
) -> Result<Vec<T>> {
    let noise: Vec<T> = logits.iter().map(|_| T::lit(gumbel(rng))).collect();
    gumbel_softmax_with_noise(logits, &noise, temperature)
}

/// Same as [`gumbel_softmax`] with the noise supplied by the caller.
///
/// Entries that underflow are lifted to the smallest positive normal number
/// and the vector renormalized, so the result stays in the open simplex.
pub fn gumbel_softmax_with_noise<T: Scalar>(
    logits: &[T],
    noise: &[T],
    temperature: T,
) -> Result<Vec<T>> {
    if !(temperature > T::zero()) || !temperature.is_finite() {
        return Err(Error::invalid("temperature must be positive and finite"));
    }
    if logits.len() != noise.len() {
        return Err(Error::shape(format!(
            "{} logits but {} noise values",
            logits.len(),
            noise.len()
        )));
    }
    if logits.is_empty() {
        return Err(Error::shape("gumbel_softmax needs at least one logit"));
    }
    if logits.iter().chain(noise).any(|x| !x.is_finite()) {
        return Err(Error::non_finite("gumbel_softmax logits"));
    }
    let mut w: Vec<T> = logits
        .iter()
        .zip(noise)
        .map(|(&l, &g)| (l + g) / temperature)
        .collect();
    softmax_in_place(&mut w);
    let floor = T::min_positive_value();
    if w.iter().any(|&x| x < floor) {
        for x in w.iter_mut() {
            *x = x.max(floor);
        }
        let total: T = w.iter().copied().sum();
        for x in w.iter_mut() {
            *x /= total;
        }
    }
    Ok(w)
}

/// Index of the largest entry (first on ties).
pub fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
