//! Labeled multiclass datasets: synthetic generation, CSV ingestion, splitting.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    class_names: Vec<String>,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::input("features must be a [samples, d] matrix"));
        }
        if features.rows() != labels.len() {
            return Err(Error::input(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::input(format!(
                "label {bad} out of range for {} classes",
                class_names.len()
            )));
        }
        if !features.all_finite() {
            return Err(Error::input("features contain non-finite values"));
        }
        Ok(Dataset {
            features,
            labels,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn sample(&self, i: usize) -> (&[f64], usize) {
        (self.features.row(i), self.labels[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], usize)> + '_ {
        (0..self.len()).map(move |i| self.sample(i))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Sample indices grouped by class.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by = vec![Vec::new(); self.num_classes()];
        for (i, &l) in self.labels.iter().enumerate() {
            by[l].push(i);
        }
        by
    }

    /// Rows at `indices`, in that order. Class names are preserved.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let d = self.num_features();
        let mut values = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            values.extend_from_slice(self.features.row(i));
        }
        Dataset {
            features: Tensor::new(vec![indices.len(), d], values).unwrap(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
        }
    }
}

/// Isotropic unit-variance Gaussian clusters, one per class, with means at
/// distance `separation` from the origin along random directions. Rows are
/// shuffled; the output is a pure function of the arguments.
pub fn generate_synthetic(
    classes: usize,
    features: usize,
    per_class_counts: &[usize],
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 || features < 2 {
        return Err(Error::config(
            "synthetic data needs >= 2 classes and >= 2 features",
        ));
    }
    if per_class_counts.len() != classes {
        return Err(Error::config(format!(
            "{} per-class counts given for {classes} classes",
            per_class_counts.len()
        )));
    }
    if per_class_counts.contains(&0) {
        return Err(Error::config("every class needs at least one sample"));
    }
    if !separation.is_finite() || separation < 0.0 {
        return Err(Error::config("separation must be finite and >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let dir: Vec<f64> = (0..features).map(|_| rng.sample(StandardNormal)).collect();
            let norm = dir
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt()
                .max(f64::MIN_POSITIVE);
            dir.iter().map(|x| separation * x / norm).collect()
        })
        .collect();
    let total: usize = per_class_counts.iter().sum();
    let mut rows: Vec<(Vec<f64>, usize)> = Vec::with_capacity(total);
    for (c, &n) in per_class_counts.iter().enumerate() {
        for _ in 0..n {
            let x = means[c]
                .iter()
                .map(|m| m + rng.sample::<f64, _>(StandardNormal))
                .collect();
            rows.push((x, c));
        }
    }
    rows.shuffle(&mut rng);
    let mut values = Vec::with_capacity(total * features);
    let mut labels = Vec::with_capacity(total);
    for (x, c) in rows {
        values.extend(x);
        labels.push(c);
    }
    Dataset::new(
        Tensor::new(vec![total, features], values)?,
        labels,
        (0..classes).map(|c| format!("class_{c}")).collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scaling {
    #[default]
    MinMax,
    None,
}

/// Reads a headered CSV. Non-label columns must be numeric; labels get dense
/// ids in first-appearance order unless `class_order` fixes the numbering.
pub fn load_csv(
    path: &Path,
    label_column: &str,
    scaling: Scaling,
    class_order: Option<&[String]>,
) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.is_empty() {
        return Err(Error::input(format!("{}: empty file", path.display())));
    }
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| {
            Error::input(format!(
                "{}: label column '{label_column}' not found",
                path.display()
            ))
        })?;
    let feature_cols: Vec<usize> = (0..headers.len()).filter(|&i| i != label_idx).collect();
    if feature_cols.is_empty() {
        return Err(Error::input(format!(
            "{}: no feature columns",
            path.display()
        )));
    }

    let mut class_names: Vec<String> = class_order.map(<[String]>::to_vec).unwrap_or_default();
    let mut class_ids: HashMap<String, usize> = class_names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.clone(), i))
        .collect();
    let fixed_order = class_order.is_some();

    let mut values = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record?;
        let row = record.position().map_or(0, |p| p.line() as usize);
        for &c in &feature_cols {
            let cell = record.get(c).unwrap_or("").trim();
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                row,
                column: headers[c].to_string(),
                message: format!("'{cell}' is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    row,
                    column: headers[c].to_string(),
                    message: "non-finite value".into(),
                });
            }
            values.push(v);
        }
        let name = record.get(label_idx).unwrap_or("").trim().to_string();
        let id = match class_ids.get(&name) {
            Some(&id) => id,
            None if fixed_order => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    row,
                    column: label_column.to_string(),
                    message: format!("label '{name}' missing from class_order"),
                })
            }
            None => {
                class_names.push(name.clone());
                class_ids.insert(name, class_names.len() - 1);
                class_names.len() - 1
            }
        };
        labels.push(id);
    }
    if labels.is_empty() {
        return Err(Error::input(format!("{}: no data rows", path.display())));
    }
    let d = feature_cols.len();
    let mut features = Tensor::new(vec![labels.len(), d], values)?;
    if scaling == Scaling::MinMax {
        minmax_scale(&mut features);
    }
    Dataset::new(features, labels, class_names)
}

/// Maps each column to `[0, 1]`; constant columns become 0.
fn minmax_scale(features: &mut Tensor) {
    let (n, d) = (features.rows(), features.cols());
    let data = features.as_mut_slice();
    for c in 0..d {
        let col = (0..n).map(|r| data[r * d + c]);
        let lo = col.clone().fold(f64::INFINITY, f64::min);
        let hi = col.fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        for r in 0..n {
            let v = &mut data[r * d + c];
            *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
        }
    }
}

/// Writes features as `f0..f{d-1}` plus the label column holding class names.
/// Floats use the shortest round-trip representation.
pub fn save_csv(ds: &Dataset, path: &Path, label_column: &str) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..ds.num_features()).map(|i| format!("f{i}")).collect();
    header.push(label_column.to_string());
    w.write_record(&header)?;
    for (x, y) in ds.iter() {
        let mut rec: Vec<String> = x.iter().map(|v| v.to_string()).collect();
        rec.push(ds.class_names[y].clone());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    #[serde(default)]
    pub stratified: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.8,
            seed: 0,
            stratified: false,
        }
    }
}

/// Train and test index sets of a split, each sorted ascending.
pub fn split_indices(ds: &Dataset, spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    let f = spec.train_fraction;
    if !(f > 0.0 && f < 1.0) {
        return Err(Error::config("train_fraction must lie in (0, 1)"));
    }
    if ds.len() < 2 {
        return Err(Error::input("need at least 2 samples to split"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    if spec.stratified {
        for (c, mut idx) in ds.indices_by_class().into_iter().enumerate() {
            if idx.is_empty() {
                continue;
            }
            if idx.len() == 1 {
                log::warn!("class {c} has a single sample; it goes to the training split");
            }
            idx.shuffle(&mut rng);
            let n_test = ((1.0 - f) * idx.len() as f64 + 1e-9).floor() as usize;
            let n_train = idx.len() - n_test;
            train.extend_from_slice(&idx[..n_train]);
            test.extend_from_slice(&idx[n_train..]);
        }
    } else {
        let mut idx: Vec<usize> = (0..ds.len()).collect();
        idx.shuffle(&mut rng);
        let n_train = (f * ds.len() as f64).round() as usize;
        train.extend_from_slice(&idx[..n_train]);
        test.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    let (train, test) = split_indices(ds, spec)?;
    Ok((ds.subset(&train), ds.subset(&test)))
}
