//! Run configuration, presets and the ablation grid.

use crnp::data::ClusterSpec;
use crnp::experiment::{ablation_grid, run_training, write_ablation_csv, Preset, RunConfig, Selection};
use crnp::fusion::FusionFn;
use crnp::model::Mode;

fn tiny() -> RunConfig {
    RunConfig {
        clusters: ClusterSpec {
            samples: 60,
            dim: 3,
            ..Default::default()
        },
        feature_dim: 4,
        hidden_dim: 6,
        total_iterations: 6,
        rnp_warmup_steps: 2,
        batch_size: 16,
        ..Default::default()
    }
}

#[test]
fn presets_validate_and_round_trip() {
    for p in [Preset::Handwritten, Preset::Clusters, Preset::Seg2d, Preset::Theory] {
        let cfg = RunConfig::preset(p);
        cfg.validate().unwrap();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest(), cfg.digest());
    }
}

#[test]
fn unknown_keys_are_rejected() {
    assert!(serde_json::from_str::<RunConfig>(r#"{"learning_rate": 0.1}"#).is_err());
    assert!(serde_json::from_str::<RunConfig>(r#"{"seg2d": {"sise": 8}}"#).is_err());
    let partial: RunConfig = serde_json::from_str(r#"{"lr": 0.5}"#).unwrap();
    assert_eq!(partial, RunConfig { lr: 0.5, ..RunConfig::default() });
}

#[test]
fn epochs_count_batches_per_pass() {
    let cfg = RunConfig::preset(Preset::Handwritten);
    assert_eq!(cfg.train_config(1600).unwrap().total_iterations, 500 * 8);
    assert_eq!(cfg.train_config(1601).unwrap().total_iterations, 500 * 9);
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        RunConfig { lr: -1.0, ..tiny() },
        RunConfig { ensemble: 0, ..tiny() },
        RunConfig { split_fraction: 1.0, ..tiny() },
        RunConfig { ood_sigma: Some(-0.1), ..tiny() },
        RunConfig { select: Selection::Best, eval_every: 0, ..tiny() },
        RunConfig { dataset: crnp::experiment::DatasetKind::Manifest, ..tiny() },
    ];
    for cfg in bad {
        assert!(matches!(cfg.validate(), Err(crnp::Error::Config(_))), "{cfg:?}");
    }
}

#[test]
fn training_runs_are_reproducible() {
    let cfg = RunConfig { ensemble: 2, ood_sigma: Some(1.0), ..tiny() };
    let a = run_training(&cfg).unwrap();
    let b = run_training(&cfg).unwrap();
    assert_eq!(a.models.len(), 2);
    assert_eq!(a.metrics.accuracy, b.metrics.accuracy);
    assert_eq!(a.metrics.auroc_macro, b.metrics.auroc_macro);
    assert!(a.metrics.ood_auroc.is_some());
    assert_eq!(a.metrics.config_digest, cfg.digest());
    for (x, y) in a.models.iter().zip(&b.models) {
        assert_eq!(x.store, y.store);
    }
}

#[test]
fn best_selection_trains() {
    let cfg = RunConfig { select: Selection::Best, eval_every: 2, ..tiny() };
    let out = run_training(&cfg).unwrap();
    assert!(out.metrics.accuracy.is_some());
}

#[test]
fn ablation_lists_base_once_per_seed() {
    let cfg = RunConfig {
        seeds: vec![1, 2],
        ablate_modes: vec![Mode::Base, Mode::Crnp],
        ablate_fusions: vec![FusionFn::Residual, FusionFn::Replace],
        ..tiny()
    };
    let rows = ablation_grid(&cfg).unwrap();
    assert_eq!(rows.len(), 2 * (1 + 2));
    assert_eq!(rows.iter().filter(|r| r.mode == Mode::Base).count(), 2);
    assert!(rows.iter().filter(|r| r.mode == Mode::Base).all(|r| r.fusion_fn.is_none()));
    assert!(rows.iter().all(|r| r.dataset_digest == rows[0].dataset_digest));

    let mut buf = Vec::new();
    write_ablation_csv(&rows, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "mode,fusion_fn,seed,accuracy,auroc_macro,mean_foreground_dice,dataset_digest");
    assert_eq!(lines.len(), 1 + rows.len());
    assert!(lines[1].starts_with(&format!("{},,1,", Mode::Base.label())));
    assert!(lines[2].contains(",residual,1,"));
    assert!(lines[3].contains(",replace,1,"));
}
