//! Populations, the letter-rotation benchmark, on-disk layout and PCA.

mod glyph;
mod io;
mod pca;

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{label_word, stream};

pub use glyph::{normalize_rotation, render_condition, GlyphSpec, BUILTIN_LETTERS, EXTENT};
pub use io::{load_populations, save_dataset};
pub use pca::{fit_set_hash, lift_orthogonal, pca_reduce, PcaProjection};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Holdout,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Holdout => "holdout",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "holdout" => Ok(Split::Holdout),
            o => Err(Error::invalid(format!(
                "unknown split `{o}` (expected train, val or holdout)"
            ))),
        }
    }
}

/// Samples of one condition together with its descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub condition_id: String,
    pub samples: Array2<f64>,
    pub descriptor: Vec<f64>,
    pub split: Split,
}

impl Population {
    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.samples.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub populations: Vec<Population>,
}

impl Dataset {
    /// Checks the dataset-wide invariants and returns the dataset.
    pub fn new(populations: Vec<Population>) -> Result<Self> {
        let first = populations
            .first()
            .ok_or_else(|| Error::Data("dataset has no populations".into()))?;
        let ds = Self {
            dim: first.dim(),
            populations,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.populations.first() else {
            return Err(Error::Data("dataset has no populations".into()));
        };
        let mut seen = std::collections::HashSet::new();
        for p in &self.populations {
            if !seen.insert(p.condition_id.as_str()) {
                return Err(Error::Data(format!("duplicate condition `{}`", p.condition_id)));
            }
            if p.is_empty() {
                return Err(Error::Data(format!("condition `{}` has no samples", p.condition_id)));
            }
            if p.dim() != self.dim {
                return Err(Error::Data(format!(
                    "condition `{}` has dimension {}, expected {}",
                    p.condition_id,
                    p.dim(),
                    self.dim
                )));
            }
            if p.descriptor.len() != first.descriptor.len() {
                return Err(Error::Data(format!(
                    "descriptor length {} for `{}` differs from {} for `{}`",
                    p.descriptor.len(),
                    p.condition_id,
                    first.descriptor.len(),
                    first.condition_id
                )));
            }
            if p.samples.iter().chain(&p.descriptor).any(|v| !v.is_finite()) {
                return Err(Error::non_finite(format!("condition `{}`", p.condition_id)));
            }
        }
        Ok(())
    }

    pub fn descriptor_dim(&self) -> usize {
        self.populations.first().map_or(0, |p| p.descriptor.len())
    }

    pub fn split(&self, split: Split) -> Vec<&Population> {
        self.populations.iter().filter(|p| p.split == split).collect()
    }

    pub fn get(&self, condition_id: &str) -> Option<&Population> {
        self.populations.iter().find(|p| p.condition_id == condition_id)
    }

    pub fn count(&self, split: Split) -> usize {
        self.populations.iter().filter(|p| p.split == split).count()
    }
}

/// Parameters of the letter-rotation benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub letters: Vec<char>,
    pub rotations: usize,
    pub copies_per_condition: usize,
    pub samples_per_copy: usize,
    pub val_letter: char,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            letters: vec!['A', 'E', 'H', 'L', 'S', 'T'],
            rotations: 20,
            copies_per_condition: 4,
            samples_per_copy: 250,
            val_letter: 'S',
        }
    }
}

pub fn condition_id(letter: char, k: usize) -> String {
    format!("{letter}_r{k:02}")
}

/// Letters × rotations at angles 2πk/R. Even k is train for every letter;
/// odd k is val for `val_letter` and holdout otherwise.
pub fn build_synthetic(cfg: &SyntheticConfig, seed: u64) -> Result<Dataset> {
    let r = cfg.rotations;
    if r == 0 || r % 2 == 1 {
        return Err(Error::invalid(format!("rotation count must be even and positive, got {r}")));
    }
    if cfg.letters.is_empty() {
        return Err(Error::invalid("at least one letter is required"));
    }
    let letters: Vec<char> = cfg.letters.iter().map(|c| c.to_ascii_uppercase()).collect();
    let val = cfg.val_letter.to_ascii_uppercase();
    for (i, l) in letters.iter().enumerate() {
        if letters[..i].contains(l) {
            return Err(Error::invalid(format!("letter '{l}' listed twice")));
        }
    }
    if !letters.contains(&val) {
        return Err(Error::invalid(format!(
            "val_letter '{val}' is not among the letters {}",
            letters.iter().collect::<String>()
        )));
    }
    let n = cfg.copies_per_condition * cfg.samples_per_copy;
    if n == 0 {
        return Err(Error::invalid("copies_per_condition × samples_per_copy must be positive"));
    }
    let glyphs = letters
        .iter()
        .map(|&l| GlyphSpec::builtin(l))
        .collect::<Result<Vec<_>>>()?;

    let jobs: Vec<(usize, usize)> = (0..letters.len())
        .flat_map(|li| (0..r).map(move |k| (li, k)))
        .collect();
    let populations = jobs
        .into_par_iter()
        .map(|(li, k)| {
            let id = condition_id(letters[li], k);
            let angle = TAU * k as f64 / r as f64;
            let mut rng = stream(&[seed, label_word(&id)]);
            let mut blocks = Vec::with_capacity(cfg.copies_per_condition);
            for _ in 0..cfg.copies_per_condition {
                blocks.push(render_condition(&glyphs[li], angle, cfg.samples_per_copy, &mut rng)?);
            }
            let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
            let samples = ndarray::concatenate(ndarray::Axis(0), &views)
                .map_err(|e| Error::shape(e.to_string()))?;
            let mut descriptor = vec![0.0; letters.len() + 1];
            descriptor[li] = 1.0;
            descriptor[letters.len()] = k as f64 / r as f64;
            let split = match (k % 2, letters[li] == val) {
                (0, _) => Split::Train,
                (_, true) => Split::Val,
                _ => Split::Holdout,
            };
            Ok(Population {
                condition_id: id,
                samples,
                descriptor,
                split,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(populations)
}
