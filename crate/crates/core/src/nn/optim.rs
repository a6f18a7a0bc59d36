use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Anything that exposes named flat parameter tensors in a stable order.
pub trait Trainable<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[T]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [T]));

    /// Copies every tensor into a [`GradSet`]-shaped snapshot.
    fn snapshot(&self) -> GradSet<T>
    where
        T: Copy,
    {
        let mut out = GradSet::default();
        self.visit("", &mut |name, xs| out.push(name, xs.to_vec()));
        out
    }
}

/// Named flat gradients, in the order of [`Trainable::visit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradSet<T> {
    pub entries: Vec<(String, Vec<T>)>,
}

impl<T> Default for GradSet<T> {
    fn default() -> Self {
        Self { entries: Vec::new() }
    }
}

impl<T> GradSet<T> {
    pub fn push(&mut self, name: String, values: Vec<T>) {
        self.entries.push((name, values));
    }
}

impl<T: Scalar> GradSet<T> {
    pub fn extend(&mut self, other: GradSet<T>) {
        self.entries.extend(other.entries);
    }

    pub fn get(&self, name: &str) -> Option<&[T]> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// First tensor path that contains a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.entries
            .iter()
            .find(|(_, v)| v.iter().any(|x| !x.is_finite()))
            .map(|(n, _)| n.as_str())
    }

    pub fn l2_norm(&self) -> T {
        self.entries
            .iter()
            .flat_map(|(_, v)| v.iter())
            .map(|&x| x * x)
            .sum::<T>()
            .sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptKind {
    Sgd,
    Adam,
}

/// Optimizer state for one parameter group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptState<T> {
    pub kind: OptKind,
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub step: u64,
    pub m: BTreeMap<String, Vec<T>>,
    pub v: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> OptState<T> {
    pub fn sgd(lr: T) -> Self {
        Self::with_kind(OptKind::Sgd, lr)
    }

    pub fn adam(lr: T) -> Self {
        Self::with_kind(OptKind::Adam, lr)
    }

    pub fn with_kind(kind: OptKind, lr: T) -> Self {
        Self {
            kind,
            lr,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update. The whole step is rejected, leaving `params`
    /// untouched, when any gradient is non-finite or a tensor is missing.
    pub fn step<P: Trainable<T> + ?Sized>(&mut self, params: &mut P, grads: &GradSet<T>) -> Result<()> {
        if let Some(path) = grads.first_non_finite() {
            return Err(Error::non_finite(format!("gradient of {path}")));
        }
        let mut shapes = Vec::new();
        params.visit("", &mut |name, xs| shapes.push((name, xs.len())));
        if shapes.len() != grads.len() {
            return Err(Error::shape(format!(
                "{} parameter tensors but {} gradients",
                shapes.len(),
                grads.len()
            )));
        }
        for ((name, len), (gname, g)) in shapes.iter().zip(&grads.entries) {
            if name != gname || *len != g.len() {
                return Err(Error::shape(format!(
                    "gradient {gname} (len {}) does not match parameter {name} (len {len})",
                    g.len()
                )));
            }
        }

        self.step += 1;
        let lr = self.lr;
        match self.kind {
            OptKind::Sgd => {
                let mut k = 0;
                params.visit_mut("", &mut |_, xs| {
                    let g = &grads.entries[k].1;
                    for (x, &gi) in xs.iter_mut().zip(g) {
                        *x = *x - lr * gi;
                    }
                    k += 1;
                });
            }
            OptKind::Adam => {
                let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
                let t = self.step as i32;
                let c1 = T::one() - b1.powi(t);
                let c2 = T::one() - b2.powi(t);
                for (name, g) in &grads.entries {
                    let m = self.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
                    let v = self.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
                    if m.len() != g.len() || v.len() != g.len() {
                        return Err(Error::shape(format!("moment shape of {name} changed")));
                    }
                    for ((mi, vi), &gi) in m.iter_mut().zip(v.iter_mut()).zip(g) {
                        *mi = b1 * *mi + (T::one() - b1) * gi;
                        *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                    }
                }
                let (mm, vv) = (&self.m, &self.v);
                params.visit_mut("", &mut |name, xs| {
                    let m = &mm[&name];
                    let v = &vv[&name];
                    for ((x, &mi), &vi) in xs.iter_mut().zip(m).zip(v) {
                        let mh = mi / c1;
                        let vh = vi / c2;
                        *x = *x - lr * mh / (vh.sqrt() + eps);
                    }
                });
            }
        }
        Ok(())
    }
}
