//! Labeled datasets: the synthetic Gaussian-mixture generator and the
//! tabular CSV loader.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{standard_normal, Matrix, SeededRng};

/// Feature rows with integer class labels `0..num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Validation(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn x(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn y(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }

    /// The rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.x(i));
        }
        Dataset {
            features: Matrix::from_vec(indices.len(), d, data).expect("rows copied from a valid matrix"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: Dataset,
    pub test: Dataset,
}

/// Gaussian-mixture generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub input_dim: usize,
    pub samples_per_class: usize,
    /// Standard deviation of the class-center draw.
    pub center_scale: f64,
    /// Standard deviation of the within-class noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 10,
            input_dim: 32,
            samples_per_class: 200,
            center_scale: 1.0,
            noise: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("need >= 2 classes, got {}", self.classes)));
        }
        if self.input_dim == 0 || self.samples_per_class == 0 {
            return Err(Error::Config("input_dim and samples_per_class must be positive".into()));
        }
        if !(self.center_scale > 0.0) || !(self.noise >= 0.0) {
            return Err(Error::Config("center_scale must be > 0 and noise >= 0".into()));
        }
        Ok(())
    }

    /// Samples `center_c + noise·ε` per class and splits each class 80/20
    /// into train/test (the test share is `⌊k/5⌋` of `k` samples).
    pub fn generate(&self) -> Result<SplitDataset> {
        self.validate()?;
        let root = SeededRng::new(self.seed);
        let d = self.input_dim;
        let centers = {
            let mut s = root.derive("centers", 0).stream();
            Matrix::from_fn(self.classes, d, |_, _| self.center_scale * standard_normal(&mut s))
        };
        for a in 0..self.classes {
            for b in 0..a {
                if centers.row(a) == centers.row(b) {
                    return Err(Error::Validation(format!("class centers {a} and {b} coincide")));
                }
            }
        }
        let n_test = self.samples_per_class / 5;
        let n_train = self.samples_per_class - n_test;
        let (mut train_x, mut train_y) = (Vec::new(), Vec::new());
        let (mut test_x, mut test_y) = (Vec::new(), Vec::new());
        for c in 0..self.classes {
            let key = root.derive("class", c as u64);
            let mut s = key.stream();
            let mut rows: Vec<Vec<f64>> = (0..self.samples_per_class)
                .map(|_| {
                    centers
                        .row(c)
                        .iter()
                        .map(|&mu| mu + self.noise * standard_normal(&mut s))
                        .collect()
                })
                .collect();
            rows.shuffle(&mut key.derive("split", 0).stream());
            for (i, row) in rows.into_iter().enumerate() {
                if i < n_train {
                    train_x.extend(row);
                    train_y.push(c);
                } else {
                    test_x.extend(row);
                    test_y.push(c);
                }
            }
        }
        Ok(SplitDataset {
            train: Dataset::new(Matrix::from_vec(train_y.len(), d, train_x)?, train_y, self.classes)?,
            test: Dataset::new(Matrix::from_vec(test_y.len(), d, test_x)?, test_y, self.classes)?,
        })
    }
}

/// Row count and class histogram of a loaded file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoadReport {
    pub rows: usize,
    pub class_histogram: Vec<usize>,
}

/// Reads a CSV file with header `label,f0,f1,…`. Labels must be the
/// contiguous integers `0..C`.
pub fn load_tabular(path: &Path) -> Result<(Dataset, LoadReport)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::io(path, std::io::Error::other(e.to_string())),
            _ => Error::Csv(e),
        })?;
    let header = reader.headers().map_err(Error::Csv)?.clone();
    if header.is_empty() || header.get(0) == Some("") {
        return Err(Error::Validation(format!("{}: file is empty", path.display())));
    }
    if header.get(0) != Some("label") {
        return Err(Error::Parse {
            path: path.to_owned(),
            line: 1,
            message: format!("header must start with `label`, found `{}`", &header[0]),
        });
    }
    let dim = header.len() - 1;
    if dim == 0 {
        return Err(Error::Parse {
            path: path.to_owned(),
            line: 1,
            message: "header has no feature columns".into(),
        });
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let line = row_idx + 2;
        let record = record.map_err(|e| Error::Parse {
            path: path.to_owned(),
            line,
            message: e.to_string(),
        })?;
        if record.len() != dim + 1 {
            return Err(Error::Parse {
                path: path.to_owned(),
                line,
                message: format!("expected {} fields, found {}", dim + 1, record.len()),
            });
        }
        let label: usize = record[0].parse().map_err(|_| Error::Parse {
            path: path.to_owned(),
            line,
            message: format!("label `{}` is not a non-negative integer", &record[0]),
        })?;
        labels.push(label);
        for (j, field) in record.iter().skip(1).enumerate() {
            let v: f64 = field.parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| {
                Error::Parse {
                    path: path.to_owned(),
                    line,
                    message: format!("feature f{j} `{field}` is not a finite number"),
                }
            })?;
            data.push(v);
        }
    }
    if labels.is_empty() {
        return Err(Error::Validation(format!("{}: no data rows", path.display())));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut hist = vec![0usize; classes];
    for &y in &labels {
        hist[y] += 1;
    }
    if let Some(missing) = hist.iter().position(|&n| n == 0) {
        return Err(Error::Validation(format!(
            "labels are not contiguous: class {missing} never appears (max label {})",
            classes - 1
        )));
    }
    let rows = labels.len();
    let dataset = Dataset::new(Matrix::from_vec(rows, dim, data)?, labels, classes)?;
    Ok((
        dataset,
        LoadReport {
            rows,
            class_histogram: hist,
        },
    ))
}
