use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Population, Split};
use crate::error::{Error, Result};
use crate::rng::stream;

/// Fitted linear projection onto the leading principal components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaProjection {
    pub mean: Vec<f64>,
    /// Rows are orthonormal components, `k × D`.
    #[serde(with = "crate::serde_mat")]
    pub components: Array2<f64>,
    pub explained_variance: Vec<f64>,
    /// Fraction of total variance captured by the kept components.
    pub explained_ratio: f64,
    pub fit_conditions: Vec<String>,
    pub fit_hash: u64,
}

impl PcaProjection {
    pub fn transform(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.mean.len() {
            return Err(Error::shape(format!(
                "PCA expects dimension {}, got {}",
                self.mean.len(),
                x.ncols()
            )));
        }
        let mean = Array1::from(self.mean.clone());
        Ok((&x - &mean).dot(&self.components.t()))
    }

    pub fn inverse(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        if z.ncols() != self.components.nrows() {
            return Err(Error::shape(format!(
                "PCA inverse expects {} components, got {}",
                self.components.nrows(),
                z.ncols()
            )));
        }
        let mean = Array1::from(self.mean.clone());
        Ok(z.dot(&self.components) + &mean)
    }
}

/// FNV-1a over condition ids and the raw bits of their samples.
pub fn fit_set_hash(pops: &[&Population]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3);
        }
    };
    for p in pops {
        eat(p.condition_id.as_bytes());
        eat(&(p.samples.nrows() as u64).to_le_bytes());
        for v in p.samples.iter() {
            eat(&v.to_bits().to_le_bytes());
        }
    }
    h
}

/// Fits PCA on the train split only and projects every population.
pub fn pca_reduce(ds: &Dataset, n_components: usize) -> Result<(Dataset, PcaProjection)> {
    ds.validate()?;
    let train = ds.split(Split::Train);
    if train.is_empty() {
        return Err(Error::Data("PCA needs at least one train population".into()));
    }
    let d = ds.dim;
    let n: usize = train.iter().map(|p| p.len()).sum();
    if n_components == 0 || n_components > d || n_components > n {
        return Err(Error::invalid(format!(
            "n_components = {n_components} must lie in 1..={} (dimension {d}, {n} train samples)",
            d.min(n)
        )));
    }
    let views: Vec<_> = train.iter().map(|p| p.samples.view()).collect();
    let x = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))?;
    let mean = x.mean_axis(Axis(0)).expect("nonempty");
    let xc = &x - &mean;
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let cov = xc.t().dot(&xc) / denom;
    let m = DMatrix::from_fn(d, d, |i, j| cov[[i, j]]);
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let top = eig.eigenvalues[order[0]].max(0.0);
    let kth = eig.eigenvalues[order[n_components - 1]];
    if !(kth > 1e-12 * top.max(f64::MIN_POSITIVE)) || top == 0.0 {
        return Err(Error::Data(format!(
            "train data has rank below n_components = {n_components} (eigenvalue {kth:e} vs largest {top:e})"
        )));
    }
    let mut components = Array2::zeros((n_components, d));
    let mut explained_variance = Vec::with_capacity(n_components);
    for (r, &c) in order.iter().take(n_components).enumerate() {
        let col = eig.eigenvectors.column(c);
        // Sign convention: the largest-magnitude entry is positive.
        let pivot = col.iter().fold(0.0f64, |a, &v| if v.abs() > a.abs() { v } else { a });
        let s = if pivot < 0.0 { -1.0 } else { 1.0 };
        for j in 0..d {
            components[[r, j]] = s * col[j];
        }
        explained_variance.push(eig.eigenvalues[c].max(0.0));
    }
    let proj = PcaProjection {
        mean: mean.to_vec(),
        components,
        explained_ratio: explained_variance.iter().sum::<f64>() / total,
        explained_variance,
        fit_conditions: train.iter().map(|p| p.condition_id.clone()).collect(),
        fit_hash: fit_set_hash(&train),
    };
    let populations = ds
        .populations
        .iter()
        .map(|p| {
            Ok(Population {
                samples: proj.transform(p.samples.view())?,
                ..p.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((Dataset::new(populations)?, proj))
}

/// Embeds every population into `target_dim` dimensions with a random
/// isometry. Returns the lifted dataset and the `target_dim × D` embedding.
pub fn lift_orthogonal(ds: &Dataset, target_dim: usize, seed: u64) -> Result<(Dataset, Array2<f64>)> {
    let d = ds.dim;
    if target_dim < d {
        return Err(Error::invalid(format!(
            "cannot lift dimension {d} into {target_dim} dimensions"
        )));
    }
    let mut rng = stream(&[seed, target_dim as u64, d as u64]);
    let g = DMatrix::from_fn(target_dim, d, |_, _| StandardNormal.sample(&mut rng));
    let q = g.qr().q();
    let embed = Array2::from_shape_fn((target_dim, d), |(i, j)| q[(i, j)]);
    let populations = ds
        .populations
        .iter()
        .map(|p| Population {
            samples: p.samples.dot(&embed.t()),
            ..p.clone()
        })
        .collect();
    Ok((Dataset::new(populations)?, embed))
}
