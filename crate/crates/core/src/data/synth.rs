use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::Dataset;
use crate::error::{DataError, Error, Result};
use crate::model::Task;
use crate::tensor::{Rng, Tensor};

/// Gaussian class clusters observed through several modalities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSpec {
    pub classes: usize,
    pub modalities: usize,
    pub dim: usize,
    pub samples: usize,
    /// Standard deviation of the class means around the origin.
    pub separation: f64,
    /// Per-modality noise standard deviation.
    pub noise: Vec<f64>,
    pub seed: u64,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        Self {
            classes: 2,
            modalities: 2,
            dim: 8,
            samples: 200,
            separation: 1.0,
            noise: vec![1.0, 1.0],
            seed: 0,
        }
    }
}

/// A cluster dataset together with its generating means.
#[derive(Clone, Debug)]
pub struct ClusterSet {
    pub dataset: Dataset,
    /// `means[p][c]` is the class-`c` mean in modality `p`.
    pub means: Vec<Vec<Vec<f64>>>,
    pub noise: Vec<f64>,
}

impl ClusterSet {
    /// Maximum-posterior class under the true generative model (equal
    /// priors, isotropic noise, modalities independent given the class).
    pub fn bayes_predict(&self, inputs: &[Tensor]) -> Vec<usize> {
        let n = inputs[0].shape()[0];
        let classes = self.means[0].len();
        (0..n)
            .map(|i| {
                let score = |c: usize| -> f64 {
                    inputs
                        .iter()
                        .zip(&self.means)
                        .zip(&self.noise)
                        .map(|((x, mu), &s)| {
                            let d2: f64 = x.row(i).iter().zip(&mu[c]).map(|(a, b)| (a - b) * (a - b)).sum();
                            -d2 / (2.0 * s.max(1e-12) * s.max(1e-12))
                        })
                        .sum()
                };
                (0..classes).fold(0, |best, c| if score(c) > score(best) { c } else { best })
            })
            .collect()
    }
}

pub fn synth_clusters(spec: &ClusterSpec) -> Result<ClusterSet> {
    if spec.classes < 2 || spec.modalities == 0 || spec.dim == 0 {
        return Err(DataError::Spec("clusters need >= 2 classes, >= 1 modality and dim >= 1".into()).into());
    }
    if spec.noise.len() != spec.modalities || spec.noise.iter().any(|&s| !(s >= 0.0)) {
        return Err(DataError::Spec(format!(
            "expected {} non-negative noise levels, got {:?}",
            spec.modalities, spec.noise
        ))
        .into());
    }
    let mut rng = Rng::new(spec.seed);
    let means: Vec<Vec<Vec<f64>>> = (0..spec.modalities)
        .map(|_| {
            (0..spec.classes)
                .map(|_| (0..spec.dim).map(|_| spec.separation * rng.normal()).collect())
                .collect()
        })
        .collect();
    let labels: Vec<usize> = (0..spec.samples).map(|i| i % spec.classes).collect();
    let modalities = means
        .iter()
        .zip(&spec.noise)
        .map(|(mu, &s)| {
            let mut data = Vec::with_capacity(spec.samples * spec.dim);
            for &l in &labels {
                for &m in &mu[l] {
                    data.push(m + s * rng.normal());
                }
            }
            Tensor::new(&[spec.samples, spec.dim], data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ClusterSet {
        dataset: Dataset {
            name: "clusters".into(),
            task: Task::Classification,
            class_count: spec.classes,
            view_names: (0..spec.modalities).map(|p| format!("m{p}")).collect(),
            modalities,
            labels,
            label_shape: Vec::new(),
        },
        means,
        noise: spec.noise.clone(),
    })
}

/// Closed-form Bayes accuracy for two equiprobable classes: `Phi(D / 2)`
/// with `D^2 = sum_p ||mu_1 - mu_0||^2 / sigma_p^2`.
pub fn bayes_accuracy_two_class(means: &[Vec<Vec<f64>>], noise: &[f64]) -> f64 {
    let d2: f64 = means
        .iter()
        .zip(noise)
        .map(|(mu, &s)| {
            let dist: f64 = mu[0].iter().zip(&mu[1]).map(|(a, b)| (a - b) * (a - b)).sum();
            dist / (s * s)
        })
        .sum();
    Normal::new(0.0, 1.0).expect("standard normal").cdf(d2.sqrt() / 2.0)
}

/// Axis-aligned pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.width * self.height
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.y && row < self.y + self.height && col >= self.x && col < self.x + self.width
    }
}

/// Two-modality foreground/background images with one ellipse per sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seg2dSpec {
    pub samples: usize,
    pub size: usize,
    /// Noise standard deviation of modality A and B.
    pub noise: [f64; 2],
    /// Region of modality B replaced by pure noise.
    pub corruption: Option<Rect>,
    /// Probability that a sample's modality B is corrupted.
    pub corruption_prob: f64,
    /// Standard deviation of the noise filling the corrupted region.
    pub corruption_noise: f64,
    /// Place the corruption rectangle uniformly at random per sample
    /// (keeping its size) instead of at its fixed position.
    pub random_position: bool,
    pub seed: u64,
}

impl Default for Seg2dSpec {
    fn default() -> Self {
        Self {
            samples: 64,
            size: 32,
            noise: [0.8, 0.3],
            corruption: Some(Rect {
                x: 8,
                y: 8,
                width: 16,
                height: 16,
            }),
            corruption_prob: 1.0,
            corruption_noise: 1.0,
            random_position: false,
            seed: 0,
        }
    }
}

/// Generates the images (`[S, 1, size, size]` per modality) and per-pixel
/// labels (1 inside the ellipse).
pub fn synth_seg2d(spec: &Seg2dSpec) -> Result<Dataset> {
    let s = spec.size;
    if s < 4 || !s.is_multiple_of(4) {
        return Err(DataError::Spec(format!("image size must be a positive multiple of 4, got {s}")).into());
    }
    if let Some(r) = spec.corruption {
        if r.x + r.width > s || r.y + r.height > s {
            return Err(DataError::Spec(format!("corruption region {r:?} extends outside the {s}x{s} image")).into());
        }
    }
    if !(0.0..=1.0).contains(&spec.corruption_prob) {
        return Err(DataError::Spec(format!("corruption_prob {} outside [0, 1]", spec.corruption_prob)).into());
    }
    let mut rng = Rng::new(spec.seed);
    let plane = s * s;
    let mut a = Vec::with_capacity(spec.samples * plane);
    let mut b = Vec::with_capacity(spec.samples * plane);
    let mut labels = Vec::with_capacity(spec.samples * plane);
    let sf = s as f64;
    for _ in 0..spec.samples {
        let cy = rng.uniform(0.25 * sf, 0.75 * sf);
        let cx = rng.uniform(0.25 * sf, 0.75 * sf);
        let ry = rng.uniform(0.125 * sf, 0.3 * sf);
        let rx = rng.uniform(0.125 * sf, 0.3 * sf);
        let theta = rng.uniform(0.0, std::f64::consts::PI);
        let (sin, cos) = theta.sin_cos();
        let rect = match spec.corruption {
            Some(r) if rng.uniform(0.0, 1.0) < spec.corruption_prob => Some(if spec.random_position {
                Rect {
                    x: rng.below(s - r.width + 1),
                    y: rng.below(s - r.height + 1),
                    ..r
                }
            } else {
                r
            }),
            _ => None,
        };
        for row in 0..s {
            for col in 0..s {
                let dy = row as f64 + 0.5 - cy;
                let dx = col as f64 + 0.5 - cx;
                let u = dx * cos + dy * sin;
                let v = -dx * sin + dy * cos;
                let inside = (u / rx).powi(2) + (v / ry).powi(2) <= 1.0;
                let signal = if inside { 1.0 } else { 0.0 };
                labels.push(inside as usize);
                a.push(signal + spec.noise[0] * rng.normal());
                let corrupted = rect.is_some_and(|r| r.contains(row, col));
                b.push(if corrupted {
                    spec.corruption_noise * rng.normal()
                } else {
                    signal + spec.noise[1] * rng.normal()
                });
            }
        }
    }
    let shape = [spec.samples, 1, s, s];
    Ok(Dataset {
        name: "seg2d".into(),
        task: Task::DensePrediction,
        class_count: 2,
        view_names: vec!["a".into(), "b".into()],
        modalities: vec![Tensor::new(&shape, a)?, Tensor::new(&shape, b)?],
        labels,
        label_shape: vec![s, s],
    })
}

/// Pixel accuracy of predicting foreground wherever `modality` exceeds
/// `threshold`, over every pixel of a dense-prediction dataset.
pub fn threshold_accuracy(data: &Dataset, modality: usize, threshold: f64) -> Result<f64> {
    let x = data
        .modalities
        .get(modality)
        .ok_or_else(|| Error::usage(format!("no modality {modality}")))?;
    if data.task != Task::DensePrediction || x.numel() != data.labels.len() {
        return Err(Error::usage("thresholding needs single-channel images with per-pixel labels"));
    }
    let hits = x
        .data()
        .iter()
        .zip(&data.labels)
        .filter(|(&v, &l)| (v > threshold) == (l == 1))
        .count();
    Ok(hits as f64 / data.labels.len() as f64)
}

/// `features + N(0, sigma^2)` elementwise, reproducible per seed.
pub fn ood_perturb(features: &Tensor, sigma: f64, seed: u64) -> Tensor {
    if sigma == 0.0 {
        return features.clone();
    }
    let mut rng = Rng::new(seed);
    features.map(|v| v + sigma * rng.normal())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cluster_shapes_and_balance() {
        let set = synth_clusters(&ClusterSpec::default()).unwrap();
        let d = &set.dataset;
        assert_eq!(d.modalities[0].shape(), &[200, 8]);
        assert_eq!(d.labels.iter().filter(|&&l| l == 0).count(), 100);
    }

    #[test]
    fn noiseless_clusters_repeat_class_means() {
        let spec = ClusterSpec {
            noise: vec![0.0, 0.0],
            ..Default::default()
        };
        let set = synth_clusters(&spec).unwrap();
        let m = &set.dataset.modalities[1];
        assert_eq!(m.row(0), m.row(2));
        assert_eq!(m.row(1), set.means[1][1].as_slice());
    }

    #[test]
    fn corruption_outside_image_is_rejected() {
        let spec = Seg2dSpec {
            corruption: Some(Rect {
                x: 20,
                y: 0,
                width: 16,
                height: 4,
            }),
            ..Default::default()
        };
        assert!(synth_seg2d(&spec).is_err());
    }

    #[test]
    fn perturbation_is_seeded() {
        let x = Tensor::zeros(&[4, 3]);
        assert_eq!(ood_perturb(&x, 0.0, 1), x);
        assert_eq!(ood_perturb(&x, 2.0, 1), ood_perturb(&x, 2.0, 1));
        assert_ne!(ood_perturb(&x, 2.0, 1), ood_perturb(&x, 2.0, 2));
    }
}
