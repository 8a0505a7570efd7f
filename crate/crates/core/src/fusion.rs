//! Cross-modal uncertainty weighting, fusion functions and attention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Layer;
use crate::rnp::RnpModule;
use crate::tensor::{kaiming_uniform, ParamGroup, ParamId, ParamStore, Rng, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionFn {
    /// `u ⊙ x`
    Replace,
    /// `proj([x, u ⊙ x])` back to the input width
    Concat,
    /// `x + u ⊙ x`
    #[default]
    Residual,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    #[default]
    None,
    /// Queries from one modality, keys and values from the others.
    Cross,
    /// Queries, keys and values from all modalities' tokens.
    #[serde(rename = "self")]
    SelfAttention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub fusion_fn: FusionFn,
    pub attention: AttentionMode,
    pub d_k: usize,
    /// Add the attention output to its input tokens.
    pub attention_residual: bool,
    /// Upper bound on tokens per sample fed to attention.
    pub max_tokens: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            fusion_fn: FusionFn::Residual,
            attention: AttentionMode::None,
            d_k: 16,
            attention_residual: true,
            max_tokens: 256,
        }
    }
}

/// `u^(p) = sum over q != p of scores[q]`.
pub fn sum_other_scores(scores: &[Tensor], p: usize) -> Result<Tensor> {
    if scores.len() < 2 {
        return Err(Error::usage("cross-modal uncertainty needs at least two modalities"));
    }
    if p >= scores.len() {
        return Err(Error::usage(format!("modality {p} out of range for {} modalities", scores.len())));
    }
    let mut others = scores.iter().enumerate().filter(|(q, _)| *q != p).map(|(_, s)| s);
    let first = others.next().expect("at least one other modality");
    let mut acc = first.data().to_vec();
    for s in others {
        if s.shape() != first.shape() {
            return Err(Error::shape("cross_uncertainty", first.shape(), s.shape()));
        }
        acc.iter_mut().zip(s.data()).for_each(|(a, v)| *a += v);
    }
    Tensor::new(first.shape(), acc)
}

/// Raw uncertainty weighting modality `p`: the other modalities' RNP scores
/// on their own features, summed.
pub fn cross_uncertainty(rnps: &[&RnpModule], store: &ParamStore, features: &[Tensor], p: usize) -> Result<Tensor> {
    if rnps.len() != features.len() {
        return Err(Error::usage(format!(
            "{} RNP modules for {} feature tensors",
            rnps.len(),
            features.len()
        )));
    }
    let scores = rnps
        .iter()
        .zip(features)
        .map(|(m, x)| m.score(store, x))
        .collect::<Result<Vec<_>>>()?;
    sum_other_scores(&scores, p)
}

/// Expands a per-location map `[B, rest..]` across the channel axis of
/// `[B, C, rest..]`; a map that already matches is returned as is.
pub fn broadcast_over_channels(u: &Tensor, feature_shape: &[usize]) -> Result<Tensor> {
    if u.shape() == feature_shape {
        return Ok(u.clone());
    }
    let mut without_channels = feature_shape.to_vec();
    if without_channels.len() < 2 {
        return Err(Error::shape("broadcast uncertainty", u.shape(), feature_shape));
    }
    let c = without_channels.remove(1);
    if u.shape() != without_channels.as_slice() {
        return Err(Error::shape("broadcast uncertainty", u.shape(), feature_shape));
    }
    let b = feature_shape[0];
    let inner: usize = feature_shape[2..].iter().product();
    let mut data = Vec::with_capacity(b * c * inner);
    for n in 0..b {
        let plane = &u.data()[n * inner..(n + 1) * inner];
        for _ in 0..c {
            data.extend_from_slice(plane);
        }
    }
    Tensor::new(feature_shape, data)
}

/// Combines features with their normalized uncertainty map. `projection`
/// is required for [`FusionFn::Concat`] and maps `2N` channels back to `N`.
pub fn fuse(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    u_hat: &Tensor,
    fusion_fn: FusionFn,
    projection: Option<&Layer>,
) -> Result<Var> {
    let u = broadcast_over_channels(u_hat, tape.shape(x))?;
    let u = tape.constant(u);
    let gated = tape.mul(u, x)?;
    match fusion_fn {
        FusionFn::Replace => Ok(gated),
        FusionFn::Residual => tape.add(x, gated),
        FusionFn::Concat => {
            let proj = projection.ok_or_else(|| Error::config("concat fusion requires a projection"))?;
            let both = tape.concat(&[x, gated], 1)?;
            let out = proj.forward(tape, store, both)?;
            if tape.shape(out) != tape.shape(x) {
                return Err(Error::shape("concat projection", tape.shape(out), tape.shape(x)));
            }
            Ok(out)
        }
    }
}

/// Single-head scaled dot-product attention weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub dim: usize,
    pub d_k: usize,
}

impl AttentionParams {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, d_k: usize, rng: &mut Rng) -> Result<Self> {
        if d_k == 0 {
            return Err(Error::config("attention key dimension d_k must be positive"));
        }
        if dim == 0 {
            return Err(Error::config("attention token dimension must be positive"));
        }
        let mut init = |name: String, cols: usize| {
            let t = kaiming_uniform(&[dim, cols], dim, 1.0, rng);
            store.add(name, ParamGroup::Main, t)
        };
        let w_q = init(format!("{name}.w_q"), d_k);
        let w_k = init(format!("{name}.w_k"), d_k);
        let w_v = init(format!("{name}.w_v"), dim);
        Ok(Self { w_q, w_k, w_v, dim, d_k })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w_q, self.w_k, self.w_v]
    }

    fn project(&self, tape: &mut Tape, store: &ParamStore, tokens: Var, w: ParamId) -> Result<Var> {
        let s = tape.shape(tokens).to_vec();
        if s.len() != 3 || s[2] != self.dim {
            return Err(Error::shape("attention tokens", &s, &[self.dim]));
        }
        let flat = tape.reshape(tokens, &[s[0] * s[1], s[2]])?;
        let w = tape.param(store, w);
        let out = tape.matmul(flat, w)?;
        let cols = tape.shape(out)[1];
        tape.reshape(out, &[s[0], s[1], cols])
    }
}

/// Output of an attention block.
pub struct Attended {
    /// `[B, T_q, N]`
    pub output: Var,
    /// `[B, T_q, T_k]`, rows on the simplex.
    pub weights: Var,
}

/// `softmax(Q W_q (K W_k)^T / sqrt(d_k)) V W_v` over `[B, T, N]` tokens,
/// with `K = V`.
pub fn attention(tape: &mut Tape, store: &ParamStore, params: &AttentionParams, queries: Var, keys: Var) -> Result<Attended> {
    let (sq, sk) = (tape.shape(queries).to_vec(), tape.shape(keys).to_vec());
    if sq.len() != 3 || sk.len() != 3 || sq[0] != sk[0] {
        return Err(Error::shape("attention", &sq, &sk));
    }
    let q = params.project(tape, store, queries, params.w_q)?;
    let k = params.project(tape, store, keys, params.w_k)?;
    let v = params.project(tape, store, keys, params.w_v)?;
    let kt = tape.transpose(k)?;
    let logits = tape.bmm(q, kt)?;
    let logits = tape.scale(logits, 1.0 / (params.d_k as f64).sqrt());
    let weights = tape.softmax(logits, 2)?;
    let output = tape.bmm(weights, v)?;
    Ok(Attended { output, weights })
}

/// Attention over the concatenation of all modalities' tokens.
pub fn self_attention(tape: &mut Tape, store: &ParamStore, params: &AttentionParams, tokens: &[Var]) -> Result<Attended> {
    let all = tape.concat(tokens, 1)?;
    attention(tape, store, params, all, all)
}

/// Attention with queries from `x_p` and keys/values from the concatenated
/// tokens of `others`.
pub fn cross_attention(
    tape: &mut Tape,
    store: &ParamStore,
    params: &AttentionParams,
    x_p: Var,
    others: &[Var],
) -> Result<Attended> {
    let kv = tape.concat(others, 1)?;
    attention(tape, store, params, x_p, kv)
}

/// `[B, N]` features become one token per sample; `[B, N, H, W]` features
/// become one token per spatial position.
pub fn to_tokens(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    match s.len() {
        2 => tape.reshape(x, &[s[0], 1, s[1]]),
        4 => {
            let flat = tape.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
            tape.permute(flat, &[0, 2, 1])
        }
        _ => Err(Error::shape("to_tokens", &s, &[])),
    }
}

/// Inverse of [`to_tokens`] for a feature tensor of shape `like`.
pub fn from_tokens(tape: &mut Tape, tokens: Var, like: &[usize]) -> Result<Var> {
    match like.len() {
        2 => tape.reshape(tokens, like),
        4 => {
            let t = tape.permute(tokens, &[0, 2, 1])?;
            tape.reshape(t, like)
        }
        _ => Err(Error::shape("from_tokens", like, &[])),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_params(store: &mut ParamStore, dim: usize) -> AttentionParams {
        let mut rng = Rng::new(0);
        let p = AttentionParams::new(store, "att", dim, dim, &mut rng).unwrap();
        for id in p.param_ids() {
            store.assign(id, Tensor::identity(dim)).unwrap();
        }
        p
    }

    #[test]
    fn cross_uncertainty_stubs() {
        let s = |v: f64| Tensor::vector(vec![v]);
        assert_eq!(sum_other_scores(&[s(0.0), s(7.0)], 0).unwrap().data(), &[7.0]);
        assert_eq!(sum_other_scores(&[s(9.0), s(1.0), s(2.0)], 0).unwrap().data(), &[3.0]);
        let sym = [s(4.0), s(4.0), s(4.0)];
        let all: Vec<_> = (0..3).map(|p| sum_other_scores(&sym, p).unwrap()).collect();
        assert!(all.windows(2).all(|w| w[0] == w[1]));
        assert!(matches!(sum_other_scores(&[s(1.0)], 0), Err(Error::Usage(_))));
    }

    #[test]
    fn fusion_examples() {
        let store = ParamStore::new();
        let u = Tensor::from_rows(&[vec![0.5, 1.0]]).unwrap();
        for (f, expected) in [(FusionFn::Residual, [3.0, 4.0]), (FusionFn::Replace, [1.0, 2.0])] {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::from_rows(&[vec![2.0, 2.0]]).unwrap());
            let y = fuse(&mut tape, &store, x, &u, f, None).unwrap();
            assert_eq!(tape.data(y), &expected);
        }
    }

    #[test]
    fn scalar_map_broadcasts_over_channels() {
        let u = Tensor::new(&[1, 1, 2], vec![1.0, 2.0]).unwrap();
        let b = broadcast_over_channels(&u, &[1, 3, 1, 2]).unwrap();
        assert_eq!(b.data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert!(broadcast_over_channels(&u, &[1, 3, 2, 2]).is_err());
    }

    #[test]
    fn zero_key_dimension_is_rejected() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(0);
        assert!(matches!(
            AttentionParams::new(&mut store, "a", 4, 0, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn single_token_identity_attention_returns_token() {
        let mut store = ParamStore::new();
        let p = identity_params(&mut store, 3);
        let mut tape = Tape::new();
        let t = tape.constant(Tensor::new(&[1, 1, 3], vec![1.0, -2.0, 0.5]).unwrap());
        let a = self_attention(&mut tape, &store, &p, &[t]).unwrap();
        assert_eq!(tape.data(a.output), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn identical_tokens_are_reproduced() {
        let mut store = ParamStore::new();
        let p = identity_params(&mut store, 2);
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(&[1, 1, 2], vec![0.3, 0.7]).unwrap());
        let b = tape.constant(Tensor::new(&[1, 1, 2], vec![0.3, 0.7]).unwrap());
        let out = self_attention(&mut tape, &store, &p, &[a, b]).unwrap();
        let d = tape.data(out.output);
        assert!((d[0] - 0.3).abs() < 1e-15 && (d[3] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn cross_attention_values_come_from_other_modality() {
        let mut store = ParamStore::new();
        let p = identity_params(&mut store, 2);
        let mut tape = Tape::new();
        let xp = tape.constant(Tensor::new(&[1, 1, 2], vec![5.0, 1.0]).unwrap());
        let xq = tape.constant(Tensor::new(&[1, 1, 2], vec![-1.0, 2.0]).unwrap());
        let out = cross_attention(&mut tape, &store, &p, xp, &[xq]).unwrap();
        assert_eq!(tape.data(out.output), &[-1.0, 2.0]);
        let zero = tape.constant(Tensor::zeros(&[1, 1, 2]));
        let out = cross_attention(&mut tape, &store, &p, xp, &[zero]).unwrap();
        assert_eq!(tape.data(out.output), &[0.0, 0.0]);
    }

    #[test]
    fn tokens_round_trip() {
        let mut rng = Rng::new(1);
        let x = Tensor::randn(&[2, 3, 2, 2], 1.0, &mut rng);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let t = to_tokens(&mut tape, v).unwrap();
        assert_eq!(tape.shape(t), &[2, 4, 3]);
        assert_eq!(tape.data(t)[1], x.data()[4]);
        let back = from_tokens(&mut tape, t, x.shape()).unwrap();
        assert_eq!(tape.value(back).data(), x.data());
    }
}
