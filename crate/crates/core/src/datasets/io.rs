use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Dataset, Population, Split};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    descriptor: Vec<f64>,
    split: Split,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    conditions: BTreeMap<String, ManifestEntry>,
    dim: usize,
}

/// Writes `data.csv` and `manifest.json` into `dir`, creating it if needed.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let data_path = dir.join("data.csv");
    let mut w = csv::Writer::from_path(&data_path)?;
    let mut header = vec!["condition_id".to_string()];
    header.extend((0..ds.dim).map(|d| format!("f{d}")));
    w.write_record(&header)?;
    let mut rec = Vec::with_capacity(ds.dim + 1);
    for p in &ds.populations {
        for row in p.samples.rows() {
            rec.clear();
            rec.push(p.condition_id.clone());
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| Error::io(&data_path, e))?;

    let manifest = Manifest {
        conditions: ds
            .populations
            .iter()
            .map(|p| {
                (
                    p.condition_id.clone(),
                    ManifestEntry {
                        descriptor: p.descriptor.clone(),
                        split: p.split,
                    },
                )
            })
            .collect(),
        dim: ds.dim,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Reads a dataset; populations keep the order of first appearance in the
/// data file. Row numbers in errors are 1-based file lines.
pub fn load_populations(data_path: &Path, manifest_path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: {e}", manifest_path.display())))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(data_path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(data_path, io),
            k => Error::Data(format!("{}: {k:?}", data_path.display())),
        })?;
    let header_d = rdr.headers()?.len().saturating_sub(1);
    if header_d == 0 {
        return Err(Error::Data(format!(
            "{}: header needs condition_id plus at least one feature column",
            data_path.display()
        )));
    }
    if header_d != manifest.dim {
        return Err(Error::Data(format!(
            "{} has {header_d} feature columns but the manifest says dim = {}",
            data_path.display(),
            manifest.dim
        )));
    }

    let mut order: Vec<String> = Vec::new();
    let mut rows: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec?;
        if rec.len() != header_d + 1 {
            return Err(Error::Data(format!(
                "row {line}: expected {} feature values, found {}",
                header_d,
                rec.len().saturating_sub(1)
            )));
        }
        let id = &rec[0];
        if !manifest.conditions.contains_key(id) {
            return Err(Error::Data(format!("row {line}: condition `{id}` missing from manifest")));
        }
        let buf = rows.entry(id.to_string()).or_insert_with(|| {
            order.push(id.to_string());
            Vec::new()
        });
        for (c, field) in rec.iter().enumerate().skip(1) {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::Data(format!("row {line}, column {c}: cannot parse `{field}` as a number"))
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!("row {line}, column {c}: non-finite value")));
            }
            buf.push(v);
        }
    }
    for id in manifest.conditions.keys() {
        if !rows.contains_key(id) {
            return Err(Error::Data(format!(
                "condition `{id}` is listed in the manifest but has no rows in {}",
                data_path.display()
            )));
        }
    }

    let populations = order
        .into_iter()
        .map(|id| {
            let flat = rows.remove(&id).expect("grouped");
            let entry = &manifest.conditions[&id];
            let samples = Array2::from_shape_vec((flat.len() / header_d, header_d), flat)
                .map_err(|e| Error::shape(e.to_string()))?;
            Ok(Population {
                condition_id: id,
                samples,
                descriptor: entry.descriptor.clone(),
                split: entry.split,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(populations)
}
