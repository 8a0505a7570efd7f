use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{DataError, Result};
use crate::model::Task;
use crate::tensor::Tensor;

/// JSON description of a multi-view feature dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub task: Task,
    pub class_count: usize,
    pub views: Vec<ViewSpec>,
    pub labels_file: String,
    pub sample_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewSpec {
    pub view_name: String,
    pub matrix_file: String,
    pub feature_dim: usize,
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|_| DataError::MissingFile(path.to_path_buf()))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn parse_cell(file: &Path, row: usize, col: usize, cell: &str) -> Result<f64> {
    let v: f64 = cell.parse().map_err(|_| DataError::NonNumeric {
        file: file.to_path_buf(),
        row,
        col,
        value: cell.to_string(),
    })?;
    if !v.is_finite() {
        return Err(DataError::NonFinite {
            file: file.to_path_buf(),
            row,
            col,
        }
        .into());
    }
    Ok(v)
}

/// Reads a headerless CSV of doubles with exactly `width` columns.
/// Row and column numbers in errors are 1-based.
fn read_matrix(path: &Path, width: usize) -> Result<(usize, Vec<f64>)> {
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, record) in reader(path)?.records().enumerate() {
        let record = record.map_err(|e| DataError::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if record.len() != width {
            return Err(DataError::Width {
                file: path.to_path_buf(),
                row: i + 1,
                expected: width,
                found: record.len(),
            }
            .into());
        }
        for (j, cell) in record.iter().enumerate() {
            data.push(parse_cell(path, i + 1, j + 1, cell)?);
        }
        rows += 1;
    }
    Ok((rows, data))
}

fn read_labels(path: &Path, class_count: usize) -> Result<Vec<usize>> {
    let mut labels = Vec::new();
    for (i, record) in reader(path)?.records().enumerate() {
        let record = record.map_err(|e| DataError::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if record.len() != 1 {
            return Err(DataError::Width {
                file: path.to_path_buf(),
                row: i + 1,
                expected: 1,
                found: record.len(),
            }
            .into());
        }
        let cell = &record[0];
        let v = parse_cell(path, i + 1, 1, cell)?;
        if v.fract() != 0.0 || v < 0.0 || v >= class_count as f64 {
            return Err(DataError::Label {
                file: path.to_path_buf(),
                row: i + 1,
                label: cell.to_string(),
                class_count,
            }
            .into());
        }
        labels.push(v as usize);
    }
    Ok(labels)
}

/// Loads a manifest and every matrix it references. Relative file names are
/// resolved against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|_| DataError::MissingFile(path.to_path_buf()))?;
    let manifest: DatasetManifest = serde_json::from_reader(file).map_err(|e| DataError::Manifest {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if manifest.views.is_empty() {
        return Err(DataError::EmptyViews.into());
    }
    if manifest.task != Task::Classification {
        return Err(DataError::Manifest {
            path: path.to_path_buf(),
            message: "only classification manifests are supported".into(),
        }
        .into());
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    let n = manifest.sample_count;
    let mut modalities = Vec::with_capacity(manifest.views.len());
    for view in &manifest.views {
        let file = base.join(&view.matrix_file);
        let (rows, data) = read_matrix(&file, view.feature_dim)?;
        if rows != n {
            return Err(DataError::CountMismatch {
                what: format!("view {} ({})", view.view_name, file.display()),
                expected: n,
                found: rows,
            }
            .into());
        }
        modalities.push(Tensor::new(&[n, view.feature_dim], data)?);
    }
    let labels_path = base.join(&manifest.labels_file);
    let labels = read_labels(&labels_path, manifest.class_count)?;
    if labels.len() != n {
        return Err(DataError::CountMismatch {
            what: format!("labels ({})", labels_path.display()),
            expected: n,
            found: labels.len(),
        }
        .into());
    }
    Ok(Dataset {
        name: manifest.name,
        task: manifest.task,
        class_count: manifest.class_count,
        view_names: manifest.views.into_iter().map(|v| v.view_name).collect(),
        modalities,
        labels,
        label_shape: Vec::new(),
    })
}
