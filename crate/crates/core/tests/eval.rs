//! Metrics against brute-force oracles and the uncertainty exports.

use crnp::eval::{
    auroc_binary, auroc_macro, dice_score, export_uncertainty, mean_foreground_dice, ood_separation, spearman,
    MetricsReport,
};
use crnp::data::{synth_seg2d, Seg2dSpec};
use crnp::model::{CrnpModel, InputKind, Mode, ModelConfig};
use crnp::tensor::{Rng, Tensor};
use proptest::prelude::*;

/// Fraction of (positive, negative) pairs ranked correctly, ties counting half.
fn pair_count_auroc(scores: &[f64], positive: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0usize);
    for (&si, _) in scores.iter().zip(positive).filter(|(_, &p)| p) {
        for (&sj, _) in scores.iter().zip(positive).filter(|(_, &p)| !p) {
            pairs += 1;
            wins += if si > sj {
                1.0
            } else if si == sj {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / pairs as f64
}

fn vector_model(seed: u64) -> CrnpModel {
    let mut cfg = ModelConfig::classification(vec![InputKind::Vector { dim: 3 }, InputKind::Vector { dim: 2 }], 2);
    cfg.feature_dim = 4;
    cfg.hidden_dim = 6;
    cfg.mode = Mode::Crnp;
    CrnpModel::new(cfg, &mut Rng::new(seed)).unwrap()
}

fn vector_inputs(n: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = Rng::new(seed);
    vec![Tensor::randn(&[n, 3], 1.0, &mut rng), Tensor::randn(&[n, 2], 1.0, &mut rng)]
}

proptest! {
    #[test]
    fn auroc_equals_pair_count(
        cells in prop::collection::vec((0u8..6, any::<bool>()), 2..50),
    ) {
        let scores: Vec<f64> = cells.iter().map(|&(s, _)| s as f64 / 2.0).collect();
        let positive: Vec<bool> = cells.iter().map(|&(_, p)| p).collect();
        let both = positive.iter().any(|&p| p) && positive.iter().any(|&p| !p);
        match auroc_binary(&scores, &positive) {
            Some(a) => {
                prop_assert!(both);
                prop_assert!((a - pair_count_auroc(&scores, &positive)).abs() < 1e-12);
            }
            None => prop_assert!(!both),
        }
    }

    #[test]
    fn dice_is_symmetric(
        pairs in prop::collection::vec((0usize..3, 0usize..3), 1..60),
        class in 0usize..3,
    ) {
        let a: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let b: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let d = dice_score(&a, &b, class);
        prop_assert_eq!(d, dice_score(&b, &a, class));
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(dice_score(&a, &a, class), 1.0);
    }
}

#[test]
fn uninformative_scores_give_chance_auroc() {
    let mut rng = Rng::new(4);
    let n = 20_000;
    let scores: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let positive: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
    let a = auroc_binary(&scores, &positive).unwrap();
    assert!((a - 0.5).abs() < 0.02, "{a}");
}

#[test]
fn macro_auroc_averages_one_vs_rest() {
    let probs = Tensor::new(&[4, 3], vec![0.8, 0.1, 0.1, 0.1, 0.8, 0.1, 0.1, 0.2, 0.7, 0.6, 0.3, 0.1]).unwrap();
    let truth = [0, 1, 2, 0];
    assert_eq!(auroc_macro(&probs, &truth).unwrap(), 1.0);
    let flipped = [1, 0, 2, 1];
    let expected = (1.0 / 6.0 + 1.0 / 4.0 + 1.0) / 3.0;
    assert!((auroc_macro(&probs, &flipped).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn foreground_dice_averages_samples() {
    let truth = [1, 1, 0, 0, 0, 0, 1, 1];
    let pred = [1, 0, 0, 0, 0, 0, 1, 1];
    let first = 2.0 * 1.0 / 3.0;
    assert!((mean_foreground_dice(&pred, &truth, 4, 2) - (first + 1.0) / 2.0).abs() < 1e-12);
}

#[test]
fn dense_metrics_report_dice_per_class() {
    let data = synth_seg2d(&Seg2dSpec {
        samples: 2,
        size: 8,
        corruption: None,
        ..Default::default()
    })
    .unwrap();
    let mut probs = vec![0.0; 2 * 2 * 64];
    for s in 0..2 {
        for px in 0..64 {
            let l = data.labels[s * 64 + px];
            probs[s * 128 + l * 64 + px] = 1.0;
        }
    }
    let report = MetricsReport::from_probs(&Tensor::new(&[2, 2, 8, 8], probs).unwrap(), &data).unwrap();
    assert_eq!(report.accuracy, Some(1.0));
    assert_eq!(report.dice, Some(vec![1.0, 1.0]));
    assert_eq!(report.mean_foreground_dice, Some(1.0));
    assert!(report.auroc_macro.is_none());
}

#[test]
fn zero_perturbation_is_indistinguishable() {
    let model = vector_model(1);
    let report = ood_separation(&model, &vector_inputs(30, 2), 0.0, 5).unwrap();
    assert_eq!(report.id_scores, report.ood_scores);
    assert_eq!(report.auroc, 0.5);
}

#[test]
fn ood_csv_has_one_row_per_scored_sample() {
    let model = vector_model(1);
    let n = 12;
    let report = ood_separation(&model, &vector_inputs(n, 2), 3.0, 5).unwrap();
    let mut buf = Vec::new();
    report.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1 + 2 * n);
    let header: Vec<&str> = lines[0].split(',').collect();
    assert_eq!(&header[..3], ["set", "sample", "total"]);
    assert_eq!(header.len(), 3 + 2 * 4);
    assert!(lines[1].starts_with("id,0,"));
    assert!(lines[n + 1].starts_with("ood,0,"));
    let total: f64 = lines[1].split(',').nth(2).unwrap().parse().unwrap();
    assert_eq!(total, report.id_scores[0]);
}

#[test]
fn exported_uncertainty_covers_every_sample_and_modality() {
    let model = vector_model(3);
    let n = 5;
    let mut buf = Vec::new();
    assert_eq!(export_uncertainty(&model, &vector_inputs(n, 4), &mut buf).unwrap(), 2 * n);
    let text = String::from_utf8(buf).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2 * n);
    assert_eq!(rows[3][..2], ["1", "1"]);
    assert!(rows.iter().all(|r| r.len() == 2 + 4));
    assert!(rows.iter().flat_map(|r| &r[2..]).all(|v| v.parse::<f64>().unwrap() >= 0.0));
}

#[test]
fn spearman_is_rank_invariant() {
    let a = [0.3, 1.0, -2.0, 5.0, 0.0];
    let b = [1.0, 2.0, 0.5, 4.0, 3.0];
    let r = spearman(&a, &b).unwrap();
    let cubed: Vec<f64> = a.iter().map(|v: &f64| v.powi(3)).collect();
    assert_eq!(spearman(&cubed, &b).unwrap(), r);
    assert!((r - 0.7).abs() < 1e-12, "{r}");
}
