use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Smoothing term of the soft Dice loss.
pub const DICE_SMOOTH: f64 = 1e-5;

fn check_one_hot(target: &Tensor) -> Result<()> {
    let s = target.shape();
    if s.len() < 2 {
        return Err(Error::shape("dice target", s, &[]));
    }
    let (b, c) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let d = target.data();
    if let Some(v) = d.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::usage(format!("dice target is not one-hot: found value {v}")));
    }
    for n in 0..b {
        for i in 0..inner {
            let total: f64 = (0..c).map(|ch| d[(n * c + ch) * inner + i]).sum();
            if total != 1.0 {
                return Err(Error::usage(format!(
                    "dice target is not one-hot: sample {n}, position {i} has {total} active classes"
                )));
            }
        }
    }
    Ok(())
}

/// Soft Dice loss `1 - mean_c (2 sum p t + s) / (sum p + sum t + s)` over
/// class axis 1 of `[B, C, ...]` probabilities; sums run over every other
/// axis.
pub fn dice_loss(tape: &mut Tape, probs: Var, target: &Tensor) -> Result<Var> {
    if tape.shape(probs) != target.shape() {
        return Err(Error::shape("dice_loss", tape.shape(probs), target.shape()));
    }
    check_one_hot(target)?;
    let shape = target.shape().to_vec();
    let c = shape[1];
    let mut perm: Vec<usize> = (0..shape.len()).collect();
    perm.swap(0, 1);
    let per_class = target.numel() / c;

    let t = tape.constant(target.clone());
    let pt = tape.mul(probs, t)?;
    let pt = tape.permute(pt, &perm)?;
    let pt = tape.reshape(pt, &[c, per_class])?;
    let inter = tape.sum_axis(pt, 1)?;

    let p = tape.permute(probs, &perm)?;
    let p = tape.reshape(p, &[c, per_class])?;
    let psum = tape.sum_axis(p, 1)?;

    let tsum = class_sums(target);
    let denom_const = tape.constant(Tensor::vector(tsum.iter().map(|v| v + DICE_SMOOTH).collect()));
    let denom = tape.add(psum, denom_const)?;
    let num = tape.scale(inter, 2.0);
    let num = tape.add_scalar(num, DICE_SMOOTH);
    let ratio = tape.div(num, denom)?;
    let mean = tape.mean(ratio);
    let neg = tape.scale(mean, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Value of [`dice_loss`] without recording gradients.
pub fn dice_loss_value(probs: &Tensor, target: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(probs.clone());
    let l = dice_loss(&mut tape, p, target)?;
    tape.scalar(l)
}

fn class_sums(t: &Tensor) -> Vec<f64> {
    let s = t.shape();
    let (b, c) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let mut out = vec![0.0; c];
    for n in 0..b {
        for (ch, o) in out.iter_mut().enumerate() {
            *o += t.data()[(n * c + ch) * inner..][..inner].iter().sum::<f64>();
        }
    }
    out
}

/// Mean cross-entropy of `[B, C, ...]` logits against per-position labels
/// (for rank 2 this is ordinary row-wise cross-entropy).
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() == 2 {
        return tape.softmax_cross_entropy(logits, labels);
    }
    if shape.len() < 2 {
        return Err(Error::shape("cross_entropy", &shape, &[labels.len()]));
    }
    let c = shape[1];
    let mut perm = vec![0];
    perm.extend(2..shape.len());
    perm.push(1);
    let moved = tape.permute(logits, &perm)?;
    let rows = tape.reshape(moved, &[shape.iter().product::<usize>() / c, c])?;
    tape.softmax_cross_entropy(rows, labels)
}

/// One-hot encoding of per-position labels into `[B, C, rest...]`, where
/// labels are laid out as `[B, rest...]`.
pub fn one_hot(labels: &[usize], batch: usize, classes: usize, rest: &[usize]) -> Result<Tensor> {
    let inner: usize = rest.iter().product();
    if labels.len() != batch * inner {
        return Err(Error::shape("one_hot", &[labels.len()], &[batch, inner]));
    }
    let mut data = vec![0.0; batch * classes * inner];
    for n in 0..batch {
        for i in 0..inner {
            let l = labels[n * inner + i];
            if l >= classes {
                return Err(Error::usage(format!("label {l} outside 0..{classes}")));
            }
            data[(n * classes + l) * inner + i] = 1.0;
        }
    }
    let mut shape = vec![batch, classes];
    shape.extend_from_slice(rest);
    Tensor::new(&shape, data)
}
