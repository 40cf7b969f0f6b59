//! Dataset loading (CSV and libsvm text), standardization and splitting.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Regression,
    Classification,
}

/// Dense features and a raw target column, before any label remapping.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTable {
    pub num_features: usize,
    /// Row-major `n × num_features`.
    pub features: Vec<f64>,
    pub targets: Vec<f64>,
}

impl RawTable {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.num_features..(i + 1) * self.num_features]
    }
}

/// Reads a comma-separated file. `label_column` defaults to the last column;
/// `None` together with `has_label = false` reads features only.
pub fn load_csv(
    path: &Path,
    label_column: Option<usize>,
    has_header: bool,
    has_label: bool,
) -> Result<RawTable> {
    let file = std::fs::File::open(path).map_err(|e| Error::Data {
        path: Some(path.to_path_buf()),
        line: None,
        message: format!("cannot open: {e}"),
    })?;
    read_csv(file, label_column, has_header, has_label).map_err(|e| e.at_path(path))
}

/// Whether the first non-empty line of a CSV file has a field that does not
/// parse as a number, i.e. looks like a header.
pub fn csv_has_header(path: &Path) -> Result<bool> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Data {
        path: Some(path.to_path_buf()),
        line: None,
        message: format!("cannot open: {e}"),
    })?;
    Ok(text
        .lines()
        .find(|l| !l.trim().is_empty())
        .is_some_and(|l| l.split(',').any(|f| f.trim().parse::<f64>().is_err())))
}

pub fn read_csv<R: std::io::Read>(
    reader: R,
    label_column: Option<usize>,
    has_header: bool,
    has_label: bool,
) -> Result<RawTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut width: Option<usize> = None;
    let mut features = Vec::new();
    let mut targets = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 1 + usize::from(has_header);
        let rec = rec.map_err(|e| Error::Data {
            path: None,
            line: Some(line),
            message: e.to_string(),
        })?;
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        let w = *width.get_or_insert(rec.len());
        if rec.len() != w {
            return Err(Error::Data {
                path: None,
                line: Some(line),
                message: format!("expected {w} fields, found {}", rec.len()),
            });
        }
        let label_idx = if has_label {
            let idx = label_column.unwrap_or(w.saturating_sub(1));
            if idx >= w {
                return Err(Error::Data {
                    path: None,
                    line: Some(line),
                    message: format!("label column {idx} out of range for {w} fields"),
                });
            }
            Some(idx)
        } else {
            None
        };
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| Error::Data {
                path: None,
                line: Some(line),
                message: format!("cannot parse field {} ({field:?}) as a number", j + 1),
            })?;
            if !v.is_finite() {
                return Err(Error::Data {
                    path: None,
                    line: Some(line),
                    message: format!("field {} is not finite", j + 1),
                });
            }
            if Some(j) == label_idx {
                targets.push(v);
            } else {
                features.push(v);
            }
        }
        if label_idx.is_none() {
            targets.push(0.0);
        }
    }
    let num_features = match width {
        Some(w) => w - usize::from(has_label),
        None => 0,
    };
    Ok(RawTable {
        num_features,
        features,
        targets,
    })
}

/// Reads `label idx:val …` lines with 1-based indices. Missing entries are
/// zero. `dim = None` infers the dimension from the largest index.
pub fn load_libsvm(path: &Path, dim: Option<usize>) -> Result<RawTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Data {
        path: Some(path.to_path_buf()),
        line: None,
        message: format!("cannot read: {e}"),
    })?;
    parse_libsvm(&text, dim).map_err(|e| e.at_path(path))
}

pub fn parse_libsvm(text: &str, dim: Option<usize>) -> Result<RawTable> {
    let mut rows: Vec<(f64, Vec<(usize, f64)>)> = Vec::new();
    let mut max_index = 0usize;
    for (i, raw_line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw_line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::Data {
            path: None,
            line: Some(line_no),
            message,
        };
        let mut parts = line.split_whitespace();
        let label_str = parts.next().unwrap_or("");
        let label: f64 = label_str
            .parse()
            .map_err(|_| err(format!("cannot parse label {label_str:?}")))?;
        let mut entries = Vec::new();
        for tok in parts {
            let (idx, val) = tok
                .split_once(':')
                .ok_or_else(|| err(format!("expected idx:val, found {tok:?}")))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| err(format!("bad feature index {idx:?}")))?;
            if idx == 0 {
                return Err(err("feature indices are 1-based".into()));
            }
            let val: f64 = val
                .parse()
                .map_err(|_| err(format!("bad feature value {val:?}")))?;
            if !val.is_finite() || !label.is_finite() {
                return Err(err("non-finite value".into()));
            }
            if let Some(d) = dim {
                if idx > d {
                    return Err(err(format!("feature index {idx} exceeds dimension {d}")));
                }
            }
            max_index = max_index.max(idx);
            entries.push((idx - 1, val));
        }
        rows.push((label, entries));
    }
    let num_features = dim.unwrap_or(max_index);
    let mut features = vec![0.0; rows.len() * num_features];
    let mut targets = Vec::with_capacity(rows.len());
    for (r, (label, entries)) in rows.into_iter().enumerate() {
        for (j, v) in entries {
            features[r * num_features + j] = v;
        }
        targets.push(label);
    }
    Ok(RawTable {
        num_features,
        features,
        targets,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaling {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl FeatureScaling {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.means.iter().zip(&self.stds))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.means.iter().zip(&self.stds))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetScaling {
    pub mean: f64,
    pub std: f64,
}

impl TargetScaling {
    pub fn apply(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Real(Vec<f64>),
    Labels(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Real(v) => v.len(),
            Targets::Labels(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Loaded data in one task's terms. Features are standardized once
/// [`Dataset::standardize_with`] has been applied.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_features: usize,
    pub features: Vec<f64>,
    pub targets: Targets,
    /// Original label values, indexed by class id (classification only).
    pub label_values: Vec<f64>,
    pub feature_scaling: Option<FeatureScaling>,
    pub target_scaling: Option<TargetScaling>,
}

impl Dataset {
    /// Builds a dataset from a raw table. Classification labels are mapped
    /// to `0..C` in order of first appearance.
    pub fn from_raw(raw: RawTable, task: TaskKind) -> Result<Self> {
        let targets = match task {
            TaskKind::Regression => Targets::Real(raw.targets),
            TaskKind::Classification => {
                let mut ids: HashMap<u64, usize> = HashMap::new();
                let mut values = Vec::new();
                let labels = raw
                    .targets
                    .iter()
                    .map(|&v| {
                        let key = normalize_zero(v).to_bits();
                        *ids.entry(key).or_insert_with(|| {
                            values.push(v);
                            values.len() - 1
                        })
                    })
                    .collect();
                return Ok(Dataset {
                    num_features: raw.num_features,
                    features: raw.features,
                    targets: Targets::Labels(labels),
                    label_values: values,
                    feature_scaling: None,
                    target_scaling: None,
                });
            }
        };
        Ok(Dataset {
            num_features: raw.num_features,
            features: raw.features,
            targets,
            label_values: Vec::new(),
            feature_scaling: None,
            target_scaling: None,
        })
    }

    pub fn task(&self) -> TaskKind {
        match self.targets {
            Targets::Real(_) => TaskKind::Regression,
            Targets::Labels(_) => TaskKind::Classification,
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.label_values.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.num_features..(i + 1) * self.num_features]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.len()).map(move |i| self.row(i))
    }

    /// Copy of the rows at `idx`, sharing label mapping and scaling.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(idx.len() * self.num_features);
        for &i in idx {
            features.extend_from_slice(self.row(i));
        }
        let targets = match &self.targets {
            Targets::Real(v) => Targets::Real(idx.iter().map(|&i| v[i]).collect()),
            Targets::Labels(v) => Targets::Labels(idx.iter().map(|&i| v[i]).collect()),
        };
        Dataset {
            num_features: self.num_features,
            features,
            targets,
            label_values: self.label_values.clone(),
            feature_scaling: self.feature_scaling.clone(),
            target_scaling: self.target_scaling,
        }
    }

    /// Column means and population standard deviations of the features,
    /// plus the target statistics for regression. Constant columns get std 1.
    pub fn fit_scaling(&self) -> (FeatureScaling, Option<TargetScaling>) {
        let n = self.len().max(1) as f64;
        let d = self.num_features;
        let mut means = vec![0.0; d];
        for row in self.rows() {
            for (m, v) in means.iter_mut().zip(row) {
                *m += v;
            }
        }
        means.iter_mut().for_each(|m| *m /= n);
        let mut vars = vec![0.0; d];
        for row in self.rows() {
            for j in 0..d {
                vars[j] += (row[j] - means[j]).powi(2);
            }
        }
        let stds = vars
            .iter()
            .enumerate()
            .map(|(j, v)| {
                let s = (v / n).sqrt();
                if s > 1e-12 * means[j].abs().max(1.0) {
                    s
                } else {
                    log::warn!("feature column {j} is constant; leaving its scale unchanged");
                    1.0
                }
            })
            .collect();
        let target = match &self.targets {
            Targets::Real(y) => {
                let mean = y.iter().sum::<f64>() / n;
                let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                let std = var.sqrt();
                Some(TargetScaling {
                    mean,
                    std: if std > 1e-12 * mean.abs().max(1.0) { std } else { 1.0 },
                })
            }
            Targets::Labels(_) => None,
        };
        (FeatureScaling { means, stds }, target)
    }

    /// Standardizes this dataset with statistics fitted elsewhere (usually
    /// on the training split) and records them.
    pub fn standardize_with(&mut self, features: &FeatureScaling, target: Option<TargetScaling>) -> Result<()> {
        if self.feature_scaling.is_some() {
            return Err(Error::InvalidInput("dataset is already standardized".into()));
        }
        if features.means.len() != self.num_features {
            return Err(Error::Shape(format!(
                "scaling has {} columns, data has {}",
                features.means.len(),
                self.num_features
            )));
        }
        let d = self.num_features;
        for row in self.features.chunks_mut(d.max(1)) {
            for j in 0..d {
                row[j] = (row[j] - features.means[j]) / features.stds[j];
            }
        }
        if let (Targets::Real(y), Some(t)) = (&mut self.targets, target) {
            y.iter_mut().for_each(|v| *v = t.apply(*v));
        }
        self.feature_scaling = Some(features.clone());
        self.target_scaling = target;
        Ok(())
    }

    /// Targets in original units.
    pub fn original_targets(&self) -> Option<Vec<f64>> {
        match &self.targets {
            Targets::Real(y) => Some(match self.target_scaling {
                Some(t) => y.iter().map(|&v| t.invert(v)).collect(),
                None => y.clone(),
            }),
            Targets::Labels(_) => None,
        }
    }

    /// Per-dimension `(min, max)` of the features.
    pub fn feature_ranges(&self) -> Vec<(f64, f64)> {
        let mut ranges = vec![(f64::INFINITY, f64::NEG_INFINITY); self.num_features];
        for row in self.rows() {
            for (r, &v) in ranges.iter_mut().zip(row) {
                r.0 = r.0.min(v);
                r.1 = r.1.max(v);
            }
        }
        ranges
    }
}

fn normalize_zero(v: f64) -> f64 {
    if v == 0.0 {
        0.0
    } else {
        v
    }
}

/// Seeded shuffle-and-partition. Classification splits are stratified per
/// class; every class needs at least two instances.
pub fn split(data: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test fraction {test_fraction} must lie strictly between 0 and 1"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train_idx, mut test_idx) = (Vec::new(), Vec::new());
    match &data.targets {
        Targets::Real(_) => {
            let mut idx: Vec<usize> = (0..data.len()).collect();
            idx.shuffle(&mut rng);
            let n_test = (test_fraction * data.len() as f64).round() as usize;
            test_idx.extend_from_slice(&idx[..n_test]);
            train_idx.extend_from_slice(&idx[n_test..]);
        }
        Targets::Labels(labels) => {
            let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); data.num_classes()];
            for (i, &l) in labels.iter().enumerate() {
                per_class[l].push(i);
            }
            for (c, mut idx) in per_class.into_iter().enumerate() {
                if idx.len() < 2 {
                    return Err(Error::Data {
                        path: None,
                        line: None,
                        message: format!(
                            "class {} has {} instance(s); stratified split needs at least 2",
                            data.label_values[c],
                            idx.len()
                        ),
                    });
                }
                idx.shuffle(&mut rng);
                let n_test = ((test_fraction * idx.len() as f64).round() as usize).min(idx.len() - 1);
                test_idx.extend_from_slice(&idx[..n_test]);
                train_idx.extend_from_slice(&idx[n_test..]);
            }
            train_idx.shuffle(&mut rng);
            test_idx.shuffle(&mut rng);
        }
    }
    Ok((data.subset(&train_idx), data.subset(&test_idx)))
}

/// Builds the task dataset, optionally holds out a seeded split, and
/// standardizes every part with statistics of the training part.
/// `test_fraction = 0` keeps all rows for training.
pub fn prepare(raw: RawTable, task: TaskKind, test_fraction: f64, seed: u64) -> Result<(Dataset, Option<Dataset>)> {
    let data = Dataset::from_raw(raw, task)?;
    if data.is_empty() {
        return Err(Error::data("dataset has no rows"));
    }
    let (mut train, mut test) = if test_fraction == 0.0 {
        (data, None)
    } else {
        let (a, b) = split(&data, test_fraction, seed)?;
        (a, Some(b))
    };
    let (fs, ts) = train.fit_scaling();
    train.standardize_with(&fs, ts)?;
    if let Some(t) = test.as_mut() {
        t.standardize_with(&fs, ts)?;
    }
    Ok((train, test))
}
