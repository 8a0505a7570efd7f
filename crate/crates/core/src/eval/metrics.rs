use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::usage("accuracy of an empty prediction set"));
    }
    if pred.len() != truth.len() {
        return Err(Error::shape("accuracy", &[pred.len()], &[truth.len()]));
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// 1-based ranks with ties sharing their mean rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = rank;
        }
        i = j;
    }
    ranks
}

/// Area under the ROC curve of `scores` for separating `positive` samples
/// (Mann-Whitney statistic with midranks). `None` if either class is empty.
pub fn auroc_binary(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// One-vs-rest AUROC per class, averaged over classes present in `truth`.
pub fn auroc_macro(probs: &Tensor, truth: &[usize]) -> Result<f64> {
    if probs.rank() != 2 || probs.shape()[0] != truth.len() {
        return Err(Error::shape("auroc_macro", probs.shape(), &[truth.len()]));
    }
    let c = probs.shape()[1];
    let mut total = 0.0;
    let mut used = 0;
    for class in 0..c {
        let scores: Vec<f64> = (0..truth.len()).map(|i| probs.row(i)[class]).collect();
        let positive: Vec<bool> = truth.iter().map(|&t| t == class).collect();
        match auroc_binary(&scores, &positive) {
            Some(a) => {
                total += a;
                used += 1;
            }
            None => log::warn!("class {class} has no positive or no negative samples; excluded from macro AUROC"),
        }
    }
    if used == 0 {
        return Err(Error::usage("no class has both positive and negative samples"));
    }
    Ok(total / used as f64)
}

/// `2|P ∩ T| / (|P| + |T|)` for class `class`; 1 when both masks are empty.
pub fn dice_score(pred: &[usize], truth: &[usize], class: usize) -> f64 {
    let (mut inter, mut p, mut t) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(truth) {
        let (ia, ib) = (a == class, b == class);
        inter += (ia && ib) as usize;
        p += ia as usize;
        t += ib as usize;
    }
    if p + t == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p + t) as f64
    }
}

/// Mean over samples of the per-sample Dice of every non-background class,
/// for label maps laid out `[S, pixels]`.
pub fn mean_foreground_dice(pred: &[usize], truth: &[usize], pixels: usize, classes: usize) -> f64 {
    let samples = truth.len() / pixels.max(1);
    let mut total = 0.0;
    for s in 0..samples {
        let range = s * pixels..(s + 1) * pixels;
        for c in 1..classes {
            total += dice_score(&pred[range.clone()], &truth[range.clone()], c);
        }
    }
    total / (samples * (classes - 1)).max(1) as f64
}

/// Spearman rank correlation (Pearson correlation of midranks).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("spearman", &[a.len()], &[b.len()]));
    }
    if a.len() < 2 {
        return Err(Error::usage("spearman correlation needs at least two points"));
    }
    pearson(&midranks(a), &midranks(b))
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::usage("correlation of a constant sequence is undefined"));
    }
    Ok(cov / (va * vb).sqrt())
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 0], &[0, 1]).unwrap(), 0.0);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn ties_share_midranks() {
        assert_eq!(midranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn all_tied_scores_give_half() {
        assert_eq!(auroc_binary(&[1.0; 4], &[true, false, true, false]), Some(0.5));
        assert_eq!(auroc_binary(&[1.0, 2.0], &[true, true]), None);
    }

    #[test]
    fn dice_examples() {
        assert_eq!(dice_score(&[1, 0, 1], &[1, 0, 1], 1), 1.0);
        assert_eq!(dice_score(&[1, 1, 0, 0], &[0, 0, 1, 1], 1), 0.0);
        assert_eq!(dice_score(&[0, 0], &[0, 0], 1), 1.0);
    }

    #[test]
    fn spearman_of_monotone_maps() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&a, &[10.0, 20.0, 30.0, 40.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&a, &[4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(spearman(&a, &[1.0; 4]).is_err());
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
