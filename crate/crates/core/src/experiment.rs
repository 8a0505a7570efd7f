//! Run configuration, named presets, end-to-end training runs and the
//! ablation grid.

use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::data::{load_manifest, split, synth_clusters, synth_seg2d, ClusterSpec, Dataset, Seg2dSpec, Standardizer};
use crate::error::{Error, Result};
use crate::eval::{ood_separation, MetricsReport, TheorySpec};
use crate::fusion::FusionFn;
use crate::model::{ensemble_predict, CrnpModel, DecoderLayout, Mode, ModelConfig, Task};
use crate::rnp::NormScope;
use crate::tensor::Rng;
use crate::train::{alternating_train_with, OptimizerKind, Schedule, TrainConfig, TrainReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Handwritten,
    Clusters,
    Seg2d,
    Theory,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Manifest,
    Clusters,
    Seg2d,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    Adam,
    SgdMomentum,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Evaluate the weights at the end of training.
    #[default]
    Final,
    /// Keep the weights with the best validation score.
    Best,
}

/// Everything a run needs, as one flat record of named fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub preset: Option<Preset>,
    pub dataset: DatasetKind,
    pub manifest: Option<PathBuf>,
    pub clusters: ClusterSpec,
    pub seg2d: Seg2dSpec,
    pub split_fraction: f64,
    pub standardize: bool,
    pub seed: u64,
    /// Seeds of the ablation grid; empty means `[seed]`.
    pub seeds: Vec<u64>,

    pub mode: Mode,
    pub fusion_fn: FusionFn,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub d_k: usize,
    pub attention_residual: bool,
    pub max_tokens: usize,
    pub decoders: DecoderLayout,
    pub rnp_output_dim: Option<usize>,
    pub rnp_target_width: Option<usize>,
    pub rnp_predictor_width: Option<usize>,
    pub rnp_weight_decay: f64,
    pub norm_scope: Option<NormScope>,

    pub optimizer: OptimizerName,
    pub lr: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub adam_betas: [f64; 2],
    pub weight_decay: f64,
    pub schedule: Schedule,
    /// Passes over the training split; overrides `total_iterations`.
    pub epochs: Option<usize>,
    pub total_iterations: usize,
    pub batch_size: usize,
    pub cadence: usize,
    pub rnp_warmup_steps: usize,
    pub rnp_lr: Option<f64>,
    /// Optimizer of the predictor phase; `None` uses `optimizer`.
    pub rnp_optimizer: Option<OptimizerName>,

    /// Number of independently seeded models whose logits are averaged.
    pub ensemble: usize,
    pub select: Selection,
    /// Main iterations between validation checks when `select = "best"`.
    pub eval_every: usize,
    /// Additive-noise scale for the OOD report; `None` skips it.
    pub ood_sigma: Option<f64>,

    pub ablate_modes: Vec<Mode>,
    pub ablate_fusions: Vec<FusionFn>,

    pub theory: TheorySpec,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::classification();
        Self {
            name: "run".into(),
            preset: None,
            dataset: DatasetKind::Clusters,
            manifest: None,
            clusters: ClusterSpec::default(),
            seg2d: Seg2dSpec::default(),
            split_fraction: 0.8,
            standardize: true,
            seed: 0,
            seeds: Vec::new(),
            mode: Mode::Crnp,
            fusion_fn: FusionFn::Residual,
            feature_dim: 32,
            hidden_dim: 64,
            d_k: 16,
            attention_residual: true,
            max_tokens: 256,
            decoders: DecoderLayout::Shared,
            rnp_output_dim: None,
            rnp_target_width: None,
            rnp_predictor_width: None,
            rnp_weight_decay: 1e-5,
            norm_scope: None,
            optimizer: OptimizerName::Adam,
            lr: t.lr,
            lr_min: t.lr_min,
            momentum: 0.99,
            adam_betas: [0.9, 0.999],
            weight_decay: t.weight_decay,
            schedule: t.schedule,
            epochs: None,
            total_iterations: t.total_iterations,
            batch_size: t.batch_size,
            cadence: t.cadence,
            rnp_warmup_steps: t.rnp_warmup_steps,
            rnp_lr: None,
            rnp_optimizer: None,
            ensemble: 1,
            select: Selection::Final,
            eval_every: 100,
            ood_sigma: None,
            ablate_modes: Mode::ALL.to_vec(),
            ablate_fusions: vec![FusionFn::Residual],
            theory: TheorySpec::default(),
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let base = Self {
            name: format!("{preset:?}").to_lowercase(),
            preset: Some(preset),
            ..Self::default()
        };
        match preset {
            Preset::Handwritten => Self {
                dataset: DatasetKind::Manifest,
                manifest: Some(PathBuf::from("data/handwritten/manifest.json")),
                epochs: Some(500),
                batch_size: 200,
                ..base
            },
            Preset::Clusters => Self {
                dataset: DatasetKind::Clusters,
                clusters: ClusterSpec {
                    classes: 2,
                    modalities: 2,
                    dim: 8,
                    samples: 400,
                    separation: 1.0,
                    noise: vec![0.5, 2.0],
                    seed: 0,
                },
                feature_dim: 16,
                hidden_dim: 32,
                lr: 1e-3,
                total_iterations: 400,
                rnp_warmup_steps: 200,
                ..base
            },
            Preset::Seg2d => Self {
                dataset: DatasetKind::Seg2d,
                standardize: false,
                seg2d: Seg2dSpec {
                    corruption_prob: 0.5,
                    random_position: true,
                    ..Seg2dSpec::default()
                },
                mode: Mode::CrnpSa,
                optimizer: OptimizerName::SgdMomentum,
                lr: 1e-3,
                momentum: 0.99,
                schedule: Schedule::Cosine,
                batch_size: 2,
                rnp_optimizer: Some(OptimizerName::Adam),
                rnp_lr: Some(1e-3),
                total_iterations: 600,
                ..base
            },
            Preset::Theory => base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::config(format!("split_fraction must lie in (0, 1), got {}", self.split_fraction)));
        }
        if self.ensemble == 0 {
            return Err(Error::config("ensemble must be at least 1"));
        }
        if self.dataset == DatasetKind::Manifest && self.manifest.is_none() {
            return Err(Error::config("dataset = \"manifest\" requires the manifest field"));
        }
        if self.select == Selection::Best && self.eval_every == 0 {
            return Err(Error::config("eval_every must be positive when select = \"best\""));
        }
        if let Some(s) = self.ood_sigma {
            if !(s >= 0.0) {
                return Err(Error::config(format!("ood_sigma must be non-negative, got {s}")));
            }
        }
        self.train_config(1)?.validate()
    }

    pub fn optimizer_kind(&self) -> OptimizerKind {
        self.kind_of(self.optimizer)
    }

    fn kind_of(&self, name: OptimizerName) -> OptimizerKind {
        match name {
            OptimizerName::Adam => OptimizerKind::Adam {
                beta1: self.adam_betas[0],
                beta2: self.adam_betas[1],
                eps: 1e-8,
            },
            OptimizerName::SgdMomentum => OptimizerKind::sgd(self.momentum),
        }
    }

    /// Training schedule for a split of `train_len` samples.
    pub fn train_config(&self, train_len: usize) -> Result<TrainConfig> {
        let total_iterations = match self.epochs {
            Some(e) => e * train_len.div_ceil(self.batch_size.max(1)),
            None => self.total_iterations,
        };
        Ok(TrainConfig {
            optimizer: self.optimizer_kind(),
            lr: self.lr,
            lr_min: self.lr_min,
            weight_decay: self.weight_decay,
            schedule: self.schedule,
            total_iterations,
            batch_size: self.batch_size,
            cadence: self.cadence,
            rnp_warmup_steps: self.rnp_warmup_steps,
            rnp_lr: self.rnp_lr,
            rnp_optimizer: self.rnp_optimizer.map(|n| self.kind_of(n)),
            seed: self.seed,
        })
    }

    pub fn model_config(&self, data: &Dataset) -> ModelConfig {
        ModelConfig {
            task: data.task,
            class_count: data.class_count,
            inputs: data.input_kinds(),
            feature_dim: self.feature_dim,
            hidden_dim: self.hidden_dim,
            mode: self.mode,
            fusion_fn: self.fusion_fn,
            d_k: self.d_k,
            attention_residual: self.attention_residual,
            max_tokens: self.max_tokens,
            decoders: self.decoders,
            rnp_output_dim: self.rnp_output_dim,
            rnp_target_width: self.rnp_target_width,
            rnp_predictor_width: self.rnp_predictor_width,
            rnp_weight_decay: self.rnp_weight_decay,
            norm_scope: self.norm_scope,
        }
    }

    /// SHA-256 (hex) of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("run config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match self.dataset {
            DatasetKind::Manifest => {
                let path = self.manifest.as_ref().ok_or_else(|| Error::config("manifest path missing"))?;
                load_manifest(path)
            }
            DatasetKind::Clusters => Ok(synth_clusters(&self.clusters)?.dataset),
            DatasetKind::Seg2d => synth_seg2d(&self.seg2d),
        }
    }
}

/// Train/test partition of a run's dataset after preprocessing.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
    pub standardizer: Option<Standardizer>,
    pub digest: String,
}

pub fn prepare_data(cfg: &RunConfig, data: &Dataset) -> Result<PreparedData> {
    let s = split(data.len(), data.sample_labels(), cfg.split_fraction, cfg.seed)?;
    let (mut train, mut test) = (data.subset(&s.train), data.subset(&s.test));
    let standardizer = (cfg.standardize && data.task == Task::Classification).then(|| Standardizer::fit(&train));
    if let Some(st) = &standardizer {
        train = st.apply(&train);
        test = st.apply(&test);
    }
    Ok(PreparedData {
        train,
        test,
        standardizer,
        digest: data.digest(),
    })
}

/// Trained ensemble with its training traces and test metrics.
pub struct RunOutcome {
    pub config: RunConfig,
    pub models: Vec<CrnpModel>,
    pub reports: Vec<TrainReport>,
    pub metrics: MetricsReport,
    pub data: PreparedData,
}

/// Seed of ensemble member `member` of a run seeded with `seed`.
pub fn member_seed(seed: u64, member: usize) -> u64 {
    Rng::new(seed).derive(member as u64).next_u64()
}

fn validation_score(model: &CrnpModel, data: &Dataset) -> Result<f64> {
    let pred = model.predict(&data.modalities)?;
    let m = MetricsReport::from_probs(&pred.probs, data)?;
    Ok(m.mean_foreground_dice.or(m.accuracy).unwrap_or(0.0))
}

/// Trains one model on `train`, honoring the selection policy.
pub fn train_member(cfg: &RunConfig, train: &Dataset, seed: u64) -> Result<(CrnpModel, TrainReport)> {
    let mut model = CrnpModel::new(cfg.model_config(train), &mut Rng::new(seed))?;
    match cfg.select {
        Selection::Final => {
            let mut tc = cfg.train_config(train.len())?;
            tc.seed = seed;
            let report = alternating_train_with(&mut model, train, &tc, 0, |_, _| Ok(()))?;
            Ok((model, report))
        }
        Selection::Best => {
            let inner = split(train.len(), train.sample_labels(), 0.9, seed)?;
            let (fit, val) = (train.subset(&inner.train), train.subset(&inner.test));
            let mut tc = cfg.train_config(fit.len())?;
            tc.seed = seed;
            let mut best: Option<(f64, CrnpModel)> = None;
            let report = alternating_train_with(&mut model, &fit, &tc, cfg.eval_every, |_, m| {
                let score = validation_score(m, &val)?;
                if best.as_ref().is_none_or(|(b, _)| score > *b) {
                    best = Some((score, m.clone()));
                }
                Ok(())
            })?;
            let score = validation_score(&model, &val)?;
            let chosen = match best {
                Some((b, m)) if b > score => m,
                _ => model,
            };
            Ok((chosen, report))
        }
    }
}

/// Loads data, trains `cfg.ensemble` models and evaluates on the test split.
pub fn run_training(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let data = cfg.load_dataset()?;
    let prepared = prepare_data(cfg, &data)?;
    let mut models = Vec::with_capacity(cfg.ensemble);
    let mut reports = Vec::with_capacity(cfg.ensemble);
    for e in 0..cfg.ensemble {
        let (m, r) = train_member(cfg, &prepared.train, member_seed(cfg.seed, e))?;
        models.push(m);
        reports.push(r);
    }
    let metrics = evaluate(cfg, &models, &prepared.test, started)?;
    Ok(RunOutcome {
        config: cfg.clone(),
        models,
        reports,
        metrics,
        data: prepared,
    })
}

/// Test metrics of a (possibly single-member) ensemble.
pub fn evaluate(cfg: &RunConfig, models: &[CrnpModel], test: &Dataset, started: Instant) -> Result<MetricsReport> {
    let refs: Vec<&CrnpModel> = models.iter().collect();
    let pred = ensemble_predict(&refs, &test.modalities)?;
    let mut metrics = MetricsReport::from_probs(&pred.probs, test)?;
    if let Some(sigma) = cfg.ood_sigma {
        metrics.ood_auroc = Some(ood_separation(&models[0], &test.modalities, sigma, cfg.seed)?.auroc);
    }
    metrics.seed = cfg.seed;
    metrics.config_digest = cfg.digest();
    metrics.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(metrics)
}

/// One row of the ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: Mode,
    /// Empty for the base mode, which does not fuse uncertainty.
    pub fusion_fn: Option<FusionFn>,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub auroc_macro: Option<f64>,
    pub mean_foreground_dice: Option<f64>,
    pub dataset_digest: String,
}

/// Runs every (mode, fusion) cell of the grid for every seed. The base mode
/// ignores the fusion function, so it appears once per seed.
pub fn ablation_grid(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    if cfg.ablate_modes.is_empty() || cfg.ablate_fusions.is_empty() {
        return Err(Error::config("ablate_modes and ablate_fusions must be non-empty"));
    }
    let seeds = if cfg.seeds.is_empty() { vec![cfg.seed] } else { cfg.seeds.clone() };
    let data = cfg.load_dataset()?;
    let mut rows = Vec::new();
    for &seed in &seeds {
        let seeded = RunConfig { seed, ..cfg.clone() };
        let prepared = prepare_data(&seeded, &data)?;
        for &mode in &cfg.ablate_modes {
            let fusions: Vec<Option<FusionFn>> = if mode.uses_uncertainty() {
                cfg.ablate_fusions.iter().copied().map(Some).collect()
            } else {
                vec![None]
            };
            for fusion_fn in fusions {
                let cell = RunConfig {
                    mode,
                    fusion_fn: fusion_fn.unwrap_or(cfg.fusion_fn),
                    ..seeded.clone()
                };
                let started = Instant::now();
                let models = (0..cell.ensemble)
                    .map(|e| train_member(&cell, &prepared.train, member_seed(seed, e)).map(|(m, _)| m))
                    .collect::<Result<Vec<_>>>()?;
                let m = evaluate(&cell, &models, &prepared.test, started)?;
                log::info!("ablation seed {seed} {} {:?}: {:?}", mode.label(), fusion_fn, m);
                rows.push(AblationRow {
                    mode,
                    fusion_fn,
                    seed,
                    accuracy: m.accuracy,
                    auroc_macro: m.auroc_macro,
                    mean_foreground_dice: m.mean_foreground_dice,
                    dataset_digest: prepared.digest.clone(),
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_ablation_csv(rows: &[AblationRow], out: impl std::io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::io("<ablation csv>", std::io::Error::other(e));
    w.write_record(["mode", "fusion_fn", "seed", "accuracy", "auroc_macro", "mean_foreground_dice", "dataset_digest"])
        .map_err(err)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let fusion = r
            .fusion_fn
            .map(|f| serde_json::to_value(f).expect("serializes").as_str().unwrap_or_default().to_string())
            .unwrap_or_default();
        w.write_record([
            r.mode.label().to_string(),
            fusion,
            r.seed.to_string(),
            opt(r.accuracy),
            opt(r.auroc_macro),
            opt(r.mean_foreground_dice),
            r.dataset_digest.clone(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io("<ablation csv>", e))
}
