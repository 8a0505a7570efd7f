use serde::{Deserialize, Serialize};

use super::metrics::spearman;
use crate::error::{Error, Result};
use crate::nn::Stack;
use crate::rnp::{LayerKind, RnpConfig, RnpModule};
use crate::tensor::{ParamGroup, ParamStore, Rng, Tape, Tensor};
use crate::train::{Optimizer, OptimizerKind};

/// Product-Gaussian kernel density estimate with per-axis bandwidths.
#[derive(Clone, Debug)]
pub struct GaussianKde {
    points: Vec<Vec<f64>>,
    bandwidth: Vec<f64>,
}

impl GaussianKde {
    /// Bandwidth `h_j = sigma_j (4 / ((d + 2) n))^(1 / (d + 4))` (Silverman).
    pub fn silverman(points: Vec<Vec<f64>>) -> Result<Self> {
        let n = points.len();
        let d = points.first().map_or(0, Vec::len);
        if n < 2 || d == 0 {
            return Err(Error::usage("kernel density estimate needs at least two points"));
        }
        let factor = (4.0 / ((d + 2) as f64 * n as f64)).powf(1.0 / (d + 4) as f64);
        let bandwidth = (0..d)
            .map(|j| {
                let mean = points.iter().map(|p| p[j]).sum::<f64>() / n as f64;
                let var = points.iter().map(|p| (p[j] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                var.sqrt() * factor
            })
            .collect::<Vec<_>>();
        if bandwidth.iter().any(|&h| !(h > 0.0)) {
            return Err(Error::usage("kernel density estimate of degenerate points"));
        }
        Ok(Self { points, bandwidth })
    }

    pub fn bandwidth(&self) -> &[f64] {
        &self.bandwidth
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        let norm: f64 = self
            .bandwidth
            .iter()
            .map(|h| h * (2.0 * std::f64::consts::PI).sqrt())
            .product();
        let total: f64 = self
            .points
            .iter()
            .map(|p| {
                let q: f64 = p
                    .iter()
                    .zip(x)
                    .zip(&self.bandwidth)
                    .map(|((a, b), h)| ((a - b) / h).powi(2))
                    .sum();
                (-0.5 * q).exp()
            })
            .sum();
        total / (self.points.len() as f64 * norm)
    }
}

/// Density study: an RNP fitted to two 2-D Gaussian clusters, scored on a
/// regular grid and compared against a KDE of the training points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensitySpec {
    pub points: usize,
    pub centers: [[f64; 2]; 2],
    pub spread: f64,
    /// Grid points per axis.
    pub grid: usize,
    /// Grid spans `[-extent, extent]` on both axes.
    pub extent: f64,
    pub output_dim: usize,
    pub target_width: usize,
    pub predictor_width: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DensitySpec {
    fn default() -> Self {
        Self {
            points: 500,
            centers: [[-2.0, 0.0], [2.0, 0.0]],
            spread: 0.5,
            grid: 15,
            extent: 5.0,
            output_dim: 32,
            target_width: 32,
            predictor_width: 16,
            steps: 300,
            lr: 1e-2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DensityReport {
    pub spearman: f64,
    pub grid: Vec<[f64; 2]>,
    pub uncertainty: Vec<f64>,
    pub density: Vec<f64>,
}

pub fn density_study(spec: &DensitySpec) -> Result<DensityReport> {
    if spec.grid < 2 || !(spec.extent > 0.0) {
        return Err(Error::usage("density grid needs at least two points per axis and a positive extent"));
    }
    let mut rng = Rng::new(spec.seed);
    let pts: Vec<Vec<f64>> = (0..spec.points)
        .map(|i| {
            let c = spec.centers[i % 2];
            vec![c[0] + spec.spread * rng.normal(), c[1] + spec.spread * rng.normal()]
        })
        .collect();
    let train = Tensor::from_rows(&pts)?;

    let mut store = ParamStore::new();
    let cfg = RnpConfig::new(2, spec.output_dim, LayerKind::Dense).with_widths(spec.target_width, spec.predictor_width);
    let rnp = RnpModule::new(cfg, &mut store, "density", &mut rng.fork())?;
    let mut opt = Optimizer::new(OptimizerKind::adam(), 0.0);
    for _ in 0..spec.steps {
        rnp.fit_step(&mut store, &mut opt, &train, spec.lr)?;
    }

    let step = 2.0 * spec.extent / (spec.grid - 1) as f64;
    let grid: Vec<[f64; 2]> = (0..spec.grid * spec.grid)
        .map(|k| {
            let (i, j) = (k / spec.grid, k % spec.grid);
            [-spec.extent + i as f64 * step, -spec.extent + j as f64 * step]
        })
        .collect();
    let grid_t = Tensor::from_rows(&grid.iter().map(|g| g.to_vec()).collect::<Vec<_>>())?;
    let uncertainty = rnp.score(&store, &grid_t)?.into_data();
    let kde = GaussianKde::silverman(pts)?;
    let density: Vec<f64> = grid.iter().map(|g| kde.density(g)).collect();
    Ok(DensityReport {
        spearman: spearman(&uncertainty, &density)?,
        grid,
        uncertainty,
        density,
    })
}

/// Randomized-prior study on 1-D regression.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheorySpec {
    /// Ensemble size.
    pub k: usize,
    pub n_train: usize,
    /// Training inputs are uniform on this interval.
    pub train_interval: [f64; 2],
    /// Standard deviation of the per-member target perturbation.
    pub target_noise: f64,
    pub grid_points: usize,
    pub grid_range: [f64; 2],
    pub width: usize,
    pub steps: usize,
    pub lr: f64,
    pub rnp_output_dim: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TheorySpec {
    fn default() -> Self {
        Self {
            k: 10,
            n_train: 40,
            train_interval: [-1.0, 1.0],
            target_noise: 0.1,
            grid_points: 41,
            grid_range: [-3.0, 3.0],
            width: 32,
            steps: 400,
            lr: 1e-2,
            rnp_output_dim: 16,
            weight_decay: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryRow {
    pub x: f64,
    pub ensemble_mean: f64,
    pub ensemble_variance: f64,
    pub rnp_error: f64,
}

#[derive(Clone, Debug)]
pub struct TheoryReport {
    pub correlation: f64,
    pub rows: Vec<TheoryRow>,
}

impl TheoryReport {
    /// One row per grid point: `x,ensemble_mean,ensemble_variance,rnp_error`.
    pub fn write_csv(&self, out: impl std::io::Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)
                .map_err(|e| Error::io("<theory csv>", std::io::Error::other(e)))?;
        }
        w.flush().map_err(|e| Error::io("<theory csv>", e))
    }
}

fn column(xs: &[f64]) -> Result<Tensor> {
    Tensor::new(&[xs.len(), 1], xs.to_vec())
}

/// Fits `prior(x) + trainable(x)` to `targets`; returns grid predictions.
fn fit_prior_pair(
    spec: &TheorySpec,
    x: &Tensor,
    targets: &Tensor,
    grid: &Tensor,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let mut store = ParamStore::new();
    let dims = [1, spec.width, spec.width, 1];
    let prior = Stack::dense(&mut store, "prior", &dims, ParamGroup::Frozen, false, rng);
    let net = Stack::dense(&mut store, "net", &dims, ParamGroup::Predictor, false, rng);
    let ids = net.param_ids();
    let mut opt = Optimizer::new(OptimizerKind::adam(), 0.0);
    for _ in 0..spec.steps {
        let mut tape = Tape::tracking(&[ParamGroup::Predictor]);
        let xv = tape.constant(x.clone());
        let a = prior.forward(&mut tape, &store, xv)?;
        let b = net.forward(&mut tape, &store, xv)?;
        let pred = tape.add(a, b)?;
        let t = tape.constant(targets.clone());
        let diff = tape.sub(pred, t)?;
        let sq = tape.square(diff);
        let mut loss = tape.sum(sq);
        for &id in &ids {
            let p = tape.param(&store, id);
            let p2 = tape.square(p);
            let s = tape.sum(p2);
            let s = tape.scale(s, spec.weight_decay);
            loss = tape.add(loss, s)?;
        }
        tape.backward(loss)?;
        tape.accumulate_param_grads(&mut store)?;
        opt.step(&mut store, &ids, spec.lr)?;
    }
    let mut tape = Tape::tracking(&[]);
    let g = tape.constant(grid.clone());
    let a = prior.forward(&mut tape, &store, g)?;
    let b = net.forward(&mut tape, &store, g)?;
    let out = tape.add(a, b)?;
    Ok(tape.data(out).to_vec())
}

/// Trains `k` randomized-prior pairs on noisy-target copies of a 1-D data
/// set and one RNP on its inputs, then correlates RNP error with ensemble
/// variance over a grid.
pub fn theory_demo(spec: &TheorySpec) -> Result<TheoryReport> {
    if spec.k < 5 {
        return Err(Error::usage(format!(
            "ensemble variance needs k >= 5 members, got {}",
            spec.k
        )));
    }
    let [g0, g1] = spec.grid_range;
    if spec.grid_points < 2 || !(g1 > g0) {
        return Err(Error::usage("degenerate grid: need >= 2 points over a non-empty range"));
    }
    if spec.n_train == 0 {
        return Err(Error::usage("theory demo needs training points"));
    }
    let mut rng = Rng::new(spec.seed);
    let [a, b] = spec.train_interval;
    let xs: Vec<f64> = (0..spec.n_train).map(|_| rng.uniform(a, b)).collect();
    let ys: Vec<f64> = xs.iter().map(|x| (2.0 * x).sin()).collect();
    let step = (g1 - g0) / (spec.grid_points - 1) as f64;
    let grid_x: Vec<f64> = (0..spec.grid_points).map(|i| g0 + i as f64 * step).collect();
    let x = column(&xs)?;
    let grid = column(&grid_x)?;

    let mut preds = Vec::with_capacity(spec.k);
    for _ in 0..spec.k {
        let noisy: Vec<f64> = ys.iter().map(|y| y + spec.target_noise * rng.normal()).collect();
        preds.push(fit_prior_pair(spec, &x, &column(&noisy)?, &grid, &mut rng.fork())?);
    }

    let mut store = ParamStore::new();
    let cfg = RnpConfig::new(1, spec.rnp_output_dim, LayerKind::Dense).with_widths(spec.width, spec.width / 2);
    let rnp = RnpModule::new(cfg, &mut store, "theory", &mut rng.fork())?;
    let mut opt = Optimizer::new(OptimizerKind::adam(), 0.0);
    for _ in 0..spec.steps {
        rnp.fit_step(&mut store, &mut opt, &x, spec.lr)?;
    }
    let err = rnp.score(&store, &grid)?.into_data();

    let k = spec.k as f64;
    let rows: Vec<TheoryRow> = grid_x
        .iter()
        .enumerate()
        .map(|(i, &gx)| {
            let mean = preds.iter().map(|p| p[i]).sum::<f64>() / k;
            let var = preds.iter().map(|p| (p[i] - mean).powi(2)).sum::<f64>() / (k - 1.0);
            TheoryRow {
                x: gx,
                ensemble_mean: mean,
                ensemble_variance: var,
                rnp_error: err[i],
            }
        })
        .collect();
    let variance: Vec<f64> = rows.iter().map(|r| r.ensemble_variance).collect();
    Ok(TheoryReport {
        correlation: spearman(&err, &variance)?,
        rows,
    })
}
