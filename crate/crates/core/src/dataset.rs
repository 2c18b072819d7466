//! Feature/label containers and their CSV persistence.
//!
//! CSV layout: each data row holds `D` comma-separated decimal features
//! followed by one value (an integer class id for [`LatentDataset`], a real
//! target for [`RegressionDataset`]). Writers emit a header row
//! (`f0,...,f{D-1},label` or `x0,...,target`); readers accept files with or
//! without it. An optional JSON manifest next to the CSV
//! (`data.csv` -> `data.manifest.json`) can override the class count and
//! carry train/test splits.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Penultimate-layer features with dense integer labels in `0..num_classes`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentDataset {
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LatentDataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::InvalidDataset(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if num_classes < 2 {
            return Err(Error::InvalidDataset(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= num_classes) {
            return Err(Error::InvalidDataset(format!(
                "label {y} at row {i} is outside 0..{num_classes}"
            )));
        }
        if !features.is_finite() {
            return Err(Error::InvalidDataset("non-finite feature value".into()));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    /// Dataset with no rows; the likelihood of any last layer on it is 1.
    pub fn empty(dim: usize, num_classes: usize) -> Result<Self> {
        Self::new(Matrix::zeros(0, dim), vec![], num_classes)
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
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

    pub fn subset(&self, indices: &[usize]) -> LatentDataset {
        LatentDataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn with_features(&self, features: Matrix) -> Result<LatentDataset> {
        LatentDataset::new(features, self.labels.clone(), self.num_classes)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionDataset {
    inputs: Matrix,
    targets: Vec<f64>,
}

impl RegressionDataset {
    pub fn new(inputs: Matrix, targets: Vec<f64>) -> Result<Self> {
        if inputs.rows() != targets.len() {
            return Err(Error::InvalidDataset(format!(
                "{} input rows but {} targets",
                inputs.rows(),
                targets.len()
            )));
        }
        if !inputs.is_finite() || targets.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidDataset("non-finite value".into()));
        }
        Ok(Self { inputs, targets })
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn with_inputs(&self, inputs: Matrix) -> Result<RegressionDataset> {
        RegressionDataset::new(inputs, self.targets.clone())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub splits: Option<Splits>,
}

pub fn manifest_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("manifest.json")
}

struct RawTable {
    features: Vec<f64>,
    last: Vec<String>,
    last_lines: Vec<usize>,
    dim: usize,
}

fn read_table(path: &Path, header_tag: &str) -> Result<RawTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let malformed = |line: usize, reason: String| Error::MalformedRow {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut table = RawTable {
        features: vec![],
        last: vec![],
        last_lines: vec![],
        dim: 0,
    };
    let mut width: Option<usize> = None;
    let mut seen_first = false;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if !seen_first {
            seen_first = true;
            if fields.last() == Some(&header_tag) {
                continue;
            }
        }
        match width {
            None => {
                if fields.len() < 2 {
                    return Err(malformed(
                        line_no,
                        "need at least one feature column and one trailing value".into(),
                    ));
                }
                width = Some(fields.len());
            }
            Some(w) if w != fields.len() => {
                return Err(malformed(
                    line_no,
                    format!("expected {w} columns, found {}", fields.len()),
                ));
            }
            _ => {}
        }
        let (feats, last) = fields.split_at(fields.len() - 1);
        for (j, f) in feats.iter().enumerate() {
            let v: f64 = f
                .parse()
                .map_err(|_| malformed(line_no, format!("column {j}: '{f}' is not a number")))?;
            if !v.is_finite() {
                return Err(malformed(line_no, format!("column {j}: non-finite value '{f}'")));
            }
            table.features.push(v);
        }
        table.last.push(last[0].to_string());
        table.last_lines.push(line_no);
    }
    let width = width.ok_or_else(|| Error::InvalidDataset(format!("{}: no data rows", path.display())))?;
    table.dim = width - 1;
    Ok(table)
}

/// Reads a latent dataset; `K = 1 + max(label)`.
pub fn load_latent_dataset(path: impl AsRef<Path>) -> Result<LatentDataset> {
    let path = path.as_ref();
    let table = read_table(path, "label")?;
    let mut labels = Vec::with_capacity(table.last.len());
    for (s, &line) in table.last.iter().zip(&table.last_lines) {
        let y: i64 = s.parse().map_err(|_| Error::MalformedRow {
            path: path.to_path_buf(),
            line,
            reason: format!("label '{s}' is not an integer"),
        })?;
        if y < 0 {
            return Err(Error::MalformedRow {
                path: path.to_path_buf(),
                line,
                reason: format!("negative label {y}"),
            });
        }
        labels.push(y as usize);
    }
    let n = labels.len();
    let k = labels.iter().max().map_or(0, |m| m + 1).max(2);
    let features = Matrix::from_vec(n, table.dim, table.features)?;
    LatentDataset::new(features, labels, k)
}

/// Reads a latent dataset together with its manifest, if one exists. The
/// manifest's `num_classes` overrides the inferred class count.
pub fn load_latent_dataset_with_manifest(path: impl AsRef<Path>) -> Result<(LatentDataset, Option<DatasetManifest>)> {
    let path = path.as_ref();
    let data = load_latent_dataset(path)?;
    let mpath = manifest_path(path);
    if !mpath.exists() {
        return Ok((data, None));
    }
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    let data = match manifest.num_classes {
        Some(k) => LatentDataset::new(data.features.clone(), data.labels.clone(), k)?,
        None => data,
    };
    if let Some(splits) = &manifest.splits {
        if let Some(&bad) = splits.train.iter().chain(&splits.test).find(|&&i| i >= data.len()) {
            return Err(Error::InvalidDataset(format!(
                "manifest split index {bad} out of range for {} rows",
                data.len()
            )));
        }
    }
    Ok((data, Some(manifest)))
}

pub fn save_manifest(csv_path: impl AsRef<Path>, manifest: &DatasetManifest) -> Result<()> {
    let mpath = manifest_path(csv_path.as_ref());
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))
}

fn fmt_f64(v: f64) -> String {
    // 17 significant digits round-trips every finite f64 exactly.
    format!("{v:.16e}")
}

fn write_table(path: &Path, header: &str, rows: impl Iterator<Item = String>) -> Result<()> {
    let mut out = String::new();
    out.push_str(header);
    out.push('\n');
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn save_latent_dataset(dataset: &LatentDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if dataset.dim() == 0 {
        return Err(Error::InvalidDataset(
            "cannot save a dataset with zero feature columns".into(),
        ));
    }
    let mut header: Vec<String> = (0..dataset.dim()).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    let rows = (0..dataset.len()).map(|i| {
        let mut fields: Vec<String> = dataset.features.row(i).iter().map(|&v| fmt_f64(v)).collect();
        fields.push(dataset.labels[i].to_string());
        fields.join(",")
    });
    write_table(path, &header.join(","), rows)
}

pub fn load_regression_dataset(path: impl AsRef<Path>) -> Result<RegressionDataset> {
    let path = path.as_ref();
    let table = read_table(path, "target")?;
    let mut targets = Vec::with_capacity(table.last.len());
    for (s, &line) in table.last.iter().zip(&table.last_lines) {
        let t: f64 = s.parse().map_err(|_| Error::MalformedRow {
            path: path.to_path_buf(),
            line,
            reason: format!("target '{s}' is not a number"),
        })?;
        if !t.is_finite() {
            return Err(Error::MalformedRow {
                path: path.to_path_buf(),
                line,
                reason: "non-finite target".into(),
            });
        }
        targets.push(t);
    }
    let inputs = Matrix::from_vec(targets.len(), table.dim, table.features)?;
    RegressionDataset::new(inputs, targets)
}

pub fn save_regression_dataset(dataset: &RegressionDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if dataset.dim() == 0 {
        return Err(Error::InvalidDataset(
            "cannot save a dataset with zero input columns".into(),
        ));
    }
    let mut header: Vec<String> = (0..dataset.dim()).map(|j| format!("x{j}")).collect();
    header.push("target".into());
    let rows = (0..dataset.len()).map(|i| {
        let mut fields: Vec<String> = dataset.inputs.row(i).iter().map(|&v| fmt_f64(v)).collect();
        fields.push(fmt_f64(dataset.targets[i]));
        fields.join(",")
    });
    write_table(path, &header.join(","), rows)
}
