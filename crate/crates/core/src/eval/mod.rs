//! Metrics, OOD separation, and the density and randomized-prior studies.

mod metrics;
mod studies;

pub use metrics::{accuracy, auroc_binary, auroc_macro, dice_score, mean_foreground_dice, median, midranks, pearson, spearman};
pub use studies::{density_study, theory_demo, DensityReport, DensitySpec, GaussianKde, TheoryReport, TheoryRow, TheorySpec};

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{ood_perturb, Dataset};
use crate::error::{Error, Result};
use crate::fusion::sum_other_scores;
use crate::model::{argmax_class_axis, CrnpModel, Task};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auroc_macro: Option<f64>,
    /// Dataset-level Dice per class (dense prediction).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dice: Option<Vec<f64>>,
    /// Mean per-sample foreground Dice (dense prediction).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_foreground_dice: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ood_auroc: Option<f64>,
    pub seed: u64,
    pub config_digest: String,
    pub wall_clock_secs: f64,
}

impl MetricsReport {
    /// Task metrics of class probabilities `[S, C, ...]` against `data`'s labels.
    pub fn from_probs(probs: &Tensor, data: &Dataset) -> Result<Self> {
        let pred = argmax_class_axis(probs);
        if pred.len() != data.labels.len() {
            return Err(Error::shape("metrics", &[pred.len()], &[data.labels.len()]));
        }
        let mut r = MetricsReport {
            accuracy: Some(accuracy(&pred, &data.labels)?),
            ..Default::default()
        };
        match data.task {
            Task::Classification => r.auroc_macro = Some(auroc_macro(probs, &data.labels)?),
            Task::DensePrediction => {
                r.dice = Some((0..data.class_count).map(|c| dice_score(&pred, &data.labels, c)).collect());
                r.mean_foreground_dice = Some(mean_foreground_dice(
                    &pred,
                    &data.labels,
                    data.labels_per_sample(),
                    data.class_count,
                ));
            }
        }
        Ok(r)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

/// Cross-modal uncertainty maps `u^(p)` for every modality, per sample
/// flattened to one vector.
pub fn cross_uncertainty_vectors(model: &CrnpModel, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
    let scores = model.own_scores(inputs)?;
    (0..scores.len()).map(|p| sum_other_scores(&scores, p)).collect()
}

fn per_sample_totals(maps: &[Tensor]) -> Vec<f64> {
    let n = maps[0].shape()[0];
    (0..n).map(|i| maps.iter().map(|m| m.row(i).iter().sum::<f64>()).sum()).collect()
}

/// Result of scoring an in-distribution set and its noise-perturbed copy.
#[derive(Clone, Debug)]
pub struct OodReport {
    pub auroc: f64,
    pub id_scores: Vec<f64>,
    pub ood_scores: Vec<f64>,
    pub id_maps: Vec<Tensor>,
    pub ood_maps: Vec<Tensor>,
}

impl OodReport {
    /// One row per scored sample (ID rows, then OOD rows): set, sample index,
    /// total uncertainty, then every modality's raw uncertainty vector.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::io("<uncertainty csv>", std::io::Error::other(e));
        let mut header = vec!["set".to_string(), "sample".into(), "total".into()];
        for (p, m) in self.id_maps.iter().enumerate() {
            let width = m.numel() / m.shape()[0].max(1);
            header.extend((0..width).map(|j| format!("u{p}_{j}")));
        }
        w.write_record(&header).map_err(err)?;
        for (set, scores, maps) in [("id", &self.id_scores, &self.id_maps), ("ood", &self.ood_scores, &self.ood_maps)] {
            for (i, s) in scores.iter().enumerate() {
                let mut rec = vec![set.to_string(), i.to_string(), s.to_string()];
                for m in maps {
                    rec.extend(m.row(i).iter().map(f64::to_string));
                }
                w.write_record(&rec).map_err(err)?;
            }
        }
        w.flush().map_err(|e| Error::io("<uncertainty csv>", e))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(f)
    }
}

/// AUROC of total cross-modal uncertainty for telling `inputs` apart from
/// copies perturbed by additive Gaussian noise of scale `sigma`.
pub fn ood_separation(model: &CrnpModel, inputs: &[Tensor], sigma: f64, seed: u64) -> Result<OodReport> {
    if !(sigma >= 0.0) {
        return Err(Error::usage(format!("sigma must be non-negative, got {sigma}")));
    }
    let perturbed: Vec<Tensor> = inputs
        .iter()
        .enumerate()
        .map(|(p, x)| ood_perturb(x, sigma, seed.wrapping_add(p as u64)))
        .collect();
    let id_maps = cross_uncertainty_vectors(model, inputs)?;
    let ood_maps = cross_uncertainty_vectors(model, &perturbed)?;
    let id_scores = per_sample_totals(&id_maps);
    let ood_scores = per_sample_totals(&ood_maps);
    let scores: Vec<f64> = id_scores.iter().chain(&ood_scores).copied().collect();
    let positive: Vec<bool> = (0..scores.len()).map(|i| i >= id_scores.len()).collect();
    let auroc = auroc_binary(&scores, &positive).ok_or_else(|| Error::usage("OOD separation needs samples"))?;
    Ok(OodReport {
        auroc,
        id_scores,
        ood_scores,
        id_maps,
        ood_maps,
    })
}

/// Writes one row per sample per modality: sample, modality, then the raw
/// cross-modal uncertainty values of that modality.
pub fn export_uncertainty(model: &CrnpModel, inputs: &[Tensor], out: impl Write) -> Result<usize> {
    let maps = cross_uncertainty_vectors(model, inputs)?;
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(out);
    let err = |e: csv::Error| Error::io("<uncertainty csv>", std::io::Error::other(e));
    let n = maps[0].shape()[0];
    let mut rows = 0;
    for i in 0..n {
        for (p, m) in maps.iter().enumerate() {
            let mut rec = vec![i.to_string(), p.to_string()];
            rec.extend(m.row(i).iter().map(f64::to_string));
            w.write_record(&rec).map_err(err)?;
            rows += 1;
        }
    }
    w.flush().map_err(|e| Error::io("<uncertainty csv>", e))?;
    Ok(rows)
}
