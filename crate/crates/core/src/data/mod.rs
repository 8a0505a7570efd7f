//! Multi-modal datasets: manifest ingestion, splits, standardization,
//! synthetic generators and OOD perturbation.

mod manifest;
mod synth;

pub use manifest::{load_manifest, DatasetManifest, ViewSpec};
pub use synth::{
    bayes_accuracy_two_class, ood_perturb, synth_clusters, synth_seg2d, threshold_accuracy, ClusterSet, ClusterSpec, Rect,
    Seg2dSpec,
};

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::error::{Error, Result};
use crate::model::{InputKind, Task};
use crate::tensor::{Rng, Tensor};

/// Samples of every modality plus labels.
///
/// Modality tensors share their leading (sample) axis. Labels hold one class
/// per sample for classification, or one per pixel laid out `[S, H, W]` for
/// dense prediction (`label_shape = [H, W]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub task: Task,
    pub class_count: usize,
    pub view_names: Vec<String>,
    pub modalities: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub label_shape: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.modalities.first().map_or(0, |m| m.shape()[0])
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn modality_count(&self) -> usize {
        self.modalities.len()
    }

    /// Labels per sample (`label_shape` product).
    pub fn labels_per_sample(&self) -> usize {
        self.label_shape.iter().product()
    }

    pub fn input_kinds(&self) -> Vec<InputKind> {
        self.modalities
            .iter()
            .map(|m| match m.shape() {
                [_, dim] => InputKind::Vector { dim: *dim },
                [_, c, h, w] => InputKind::Image {
                    channels: *c,
                    height: *h,
                    width: *w,
                },
                other => unreachable!("dataset modality of rank {}", other.len()),
            })
            .collect()
    }

    /// Modality tensors and labels of the given samples, in order.
    pub fn batch(&self, indices: &[usize]) -> (Vec<Tensor>, Vec<usize>) {
        let inputs = self.modalities.iter().map(|m| m.select_rows(indices)).collect();
        let per = self.labels_per_sample();
        let mut labels = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            labels.extend_from_slice(&self.labels[i * per..(i + 1) * per]);
        }
        (inputs, labels)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (modalities, labels) = self.batch(indices);
        Dataset {
            modalities,
            labels,
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            name: self.name.clone(),
            task: self.task,
            class_count: self.class_count,
            view_names: self.view_names.clone(),
            modalities: Vec::new(),
            labels: Vec::new(),
            label_shape: self.label_shape.clone(),
        }
    }

    /// Per-sample labels usable for stratification (classification only).
    pub fn sample_labels(&self) -> Option<&[usize]> {
        (self.labels_per_sample() == 1).then_some(self.labels.as_slice())
    }

    /// SHA-256 (hex) over shapes, values and labels.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for m in &self.modalities {
            for &e in m.shape() {
                h.update((e as u64).to_le_bytes());
            }
            for v in m.data() {
                h.update(v.to_le_bytes());
            }
        }
        for &l in &self.labels {
            h.update((l as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Disjoint, exhaustive train/test index sets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub stratified: bool,
}

/// Splits `n` samples so a `fraction` of each class goes to training.
///
/// Without labels, or when some class has fewer than two samples, the split
/// is a plain random one (with a warning in the latter case).
pub fn split(n: usize, labels: Option<&[usize]>, fraction: f64, seed: u64) -> Result<Split> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::usage(format!("split fraction must lie in (0, 1), got {fraction}")));
    }
    let mut rng = Rng::new(seed);
    if let Some(labels) = labels {
        if labels.len() != n {
            return Err(Error::shape("split labels", &[labels.len()], &[n]));
        }
        let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
        let mut by_class = vec![Vec::new(); classes];
        for (i, &l) in labels.iter().enumerate() {
            by_class[l].push(i);
        }
        let sparse = by_class.iter().any(|c| c.len() == 1);
        if sparse {
            log::warn!("a class has fewer than two samples; falling back to an unstratified split");
        } else {
            let (mut train, mut test) = (Vec::new(), Vec::new());
            for members in &mut by_class {
                rng.shuffle(members);
                let k = (members.len() as f64 * fraction).round() as usize;
                train.extend_from_slice(&members[..k]);
                test.extend_from_slice(&members[k..]);
            }
            train.sort_unstable();
            test.sort_unstable();
            return Ok(Split {
                train,
                test,
                stratified: true,
            });
        }
    }
    let mut order = rng.permutation(n);
    let k = (n as f64 * fraction).round() as usize;
    let mut test = order.split_off(k);
    order.sort_unstable();
    test.sort_unstable();
    Ok(Split {
        train: order,
        test,
        stratified: false,
    })
}

/// Per-feature affine map to zero mean and unit variance, one per vector
/// modality; image modalities pass through.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub views: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl Standardizer {
    /// Fits on `data` (the training split).
    pub fn fit(data: &Dataset) -> Self {
        let views = data
            .modalities
            .iter()
            .map(|m| {
                if m.rank() != 2 {
                    return None;
                }
                let (n, d) = (m.shape()[0], m.shape()[1]);
                let mut mean = vec![0.0; d];
                for i in 0..n {
                    mean.iter_mut().zip(m.row(i)).for_each(|(a, v)| *a += v);
                }
                mean.iter_mut().for_each(|a| *a /= n.max(1) as f64);
                let mut var = vec![0.0; d];
                for i in 0..n {
                    for ((s, v), mu) in var.iter_mut().zip(m.row(i)).zip(&mean) {
                        *s += (v - mu) * (v - mu);
                    }
                }
                let std = var
                    .into_iter()
                    .map(|s| {
                        let sd = (s / n.max(1) as f64).sqrt();
                        if sd > 1e-12 {
                            sd
                        } else {
                            1.0
                        }
                    })
                    .collect();
                Some((mean, std))
            })
            .collect();
        Self { views }
    }

    pub fn apply(&self, data: &Dataset) -> Dataset {
        let mut out = data.clone();
        for (m, view) in out.modalities.iter_mut().zip(&self.views) {
            if let Some((mean, std)) = view {
                let d = mean.len();
                for (i, v) in m.data_mut().iter_mut().enumerate() {
                    *v = (*v - mean[i % d]) / std[i % d];
                }
            }
        }
        out
    }
}
