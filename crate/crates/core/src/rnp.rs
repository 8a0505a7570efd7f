//! Random network prediction.
//!
//! A fixed, randomly initialized target network `f_psi` and a smaller
//! trainable predictor `f_phi` map the same features to the same output
//! space. The predictor is fitted to the target on training features; its
//! squared residual is small where training features are dense and large
//! where they are sparse.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvSpec, Layer, Stack};
use crate::tensor::{Digest, ParamGroup, ParamId, ParamStore, Rng, Tape, Tensor, Var};
use crate::train::Optimizer;

/// How the RNP networks are built.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    /// Fully connected layers over `[B, N]` features.
    Dense,
    /// Depthwise `k×k` hidden convolutions over `[B, N, H, W]` features,
    /// followed by a pointwise projection to the output channels.
    DepthwiseConv { kernel: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RnpConfig {
    pub input_dim: usize,
    pub output_dim: usize,
    pub layer_kind: LayerKind,
    /// Hidden width of the target network (dense only); defaults to `input_dim`.
    pub target_width: Option<usize>,
    /// Hidden width of the predictor (dense only); defaults to `input_dim`.
    pub predictor_width: Option<usize>,
    pub target_hidden_layers: usize,
    pub predictor_hidden_layers: usize,
    /// Coefficient of `||phi||^2` in the fitting objective.
    pub weight_decay: f64,
}

impl RnpConfig {
    pub fn new(input_dim: usize, output_dim: usize, layer_kind: LayerKind) -> Self {
        Self {
            input_dim,
            output_dim,
            layer_kind,
            target_width: None,
            predictor_width: None,
            target_hidden_layers: 3,
            predictor_hidden_layers: 2,
            weight_decay: 1e-5,
        }
    }

    pub fn with_widths(mut self, target: usize, predictor: usize) -> Self {
        self.target_width = Some(target);
        self.predictor_width = Some(predictor);
        self
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    /// Per-channel residuals when the output space matches the feature
    /// space, otherwise one summed residual per location.
    pub fn mode(&self) -> UncertaintyMode {
        if self.output_dim == self.input_dim {
            UncertaintyMode::Vector
        } else {
            UncertaintyMode::Scalar
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum UncertaintyMode {
    Vector,
    Scalar,
}

/// One modality's RNP: parameter handles into a [`ParamStore`] plus the
/// digest of the target weights taken at construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RnpModule {
    pub config: RnpConfig,
    target: Stack,
    predictor: Stack,
    #[serde(skip)]
    target_digest: Option<Digest>,
}

impl RnpModule {
    pub fn new(config: RnpConfig, store: &mut ParamStore, name: &str, rng: &mut Rng) -> Result<Self> {
        let (n, m) = (config.input_dim, config.output_dim);
        if n == 0 || m == 0 {
            return Err(Error::config(format!("{name}: RNP dimensions must be positive (N={n}, M={m})")));
        }
        let target = build_net(store, &format!("{name}.target"), &config, true, ParamGroup::Frozen, rng)?;
        let predictor = build_net(store, &format!("{name}.predictor"), &config, false, ParamGroup::Predictor, rng)?;
        let (pt, pp) = (target.param_count(store), predictor.param_count(store));
        if pp >= pt {
            return Err(Error::config(format!(
                "{name}: predictor has {pp} parameters, target has {pt}; the predictor must be smaller"
            )));
        }
        let mut module = Self {
            config,
            target,
            predictor,
            target_digest: None,
        };
        module.target_digest = Some(store.digest(&module.target_ids()));
        Ok(module)
    }

    pub fn target_ids(&self) -> Vec<ParamId> {
        self.target.param_ids()
    }

    pub fn predictor_ids(&self) -> Vec<ParamId> {
        self.predictor.param_ids()
    }

    pub fn target_param_count(&self, store: &ParamStore) -> usize {
        self.target.param_count(store)
    }

    pub fn predictor_param_count(&self, store: &ParamStore) -> usize {
        self.predictor.param_count(store)
    }

    /// Digest of the target weights recorded at construction (or load).
    pub fn target_digest(&self) -> Digest {
        self.target_digest.expect("digest is set on construction")
    }

    pub(crate) fn set_target_digest(&mut self, digest: Digest) {
        self.target_digest = Some(digest);
    }

    /// Fails unless the target weights still hash to the recorded digest.
    pub fn verify_target(&self, store: &ParamStore) -> Result<()> {
        let now = store.digest(&self.target_ids());
        if now != self.target_digest() {
            return Err(Error::Invariant(format!(
                "random target network changed: digest {} != recorded {}",
                now,
                self.target_digest()
            )));
        }
        Ok(())
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let ok = match self.config.layer_kind {
            LayerKind::Dense => shape.len() == 2 && shape[1] == self.config.input_dim,
            LayerKind::DepthwiseConv { .. } => shape.len() == 4 && shape[1] == self.config.input_dim,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::shape("rnp input", shape, &[self.config.input_dim]))
        }
    }

    /// Records `(f_phi(x), f_psi(x))` on `tape`.
    pub fn outputs(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<(Var, Var)> {
        self.check_input(tape.shape(x))?;
        let z_phi = self.predictor.forward(tape, store, x)?;
        let z_psi = self.target.forward(tape, store, x)?;
        Ok((z_phi, z_psi))
    }

    /// `sum_i ||f_phi(x_i) - f_psi(x_i)||^2` without the regularizer.
    pub fn data_term(&self, store: &ParamStore, x: &Tensor) -> Result<f64> {
        let u = self.score(store, x)?;
        Ok(u.data().iter().sum())
    }

    /// Raw uncertainty: elementwise squared residual (vector mode, same shape
    /// as the output) or its sum over channels (scalar mode, one value per
    /// sample or per spatial position). No parameter changes.
    pub fn score(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::tracking(&[]);
        let xv = tape.constant(x.clone());
        let (z_phi, z_psi) = self.outputs(&mut tape, store, xv)?;
        let u = squared_residual(tape.value(z_phi), tape.value(z_psi))?;
        match self.config.mode() {
            UncertaintyMode::Vector => Ok(u),
            UncertaintyMode::Scalar => sum_channels(&u),
        }
    }

    /// One optimizer step on the predictor for `sum_i ||f_phi(x_i) - f_psi(x_i)||^2 + lambda ||phi||^2`.
    ///
    /// Only predictor parameters are updated; the target digest is checked
    /// before and after. Returns the objective value before the update.
    pub fn fit_step(&self, store: &mut ParamStore, optimizer: &mut Optimizer, x: &Tensor, lr: f64) -> Result<f64> {
        self.verify_target(store)?;
        let ids = self.predictor_ids();
        let mut tape = Tape::tracking(&[ParamGroup::Predictor]);
        let xv = tape.constant(x.clone());
        let (z_phi, z_psi) = self.outputs(&mut tape, store, xv)?;
        let diff = tape.sub(z_phi, z_psi)?;
        let sq = tape.square(diff);
        let mut loss = tape.sum(sq);
        if self.config.weight_decay > 0.0 {
            for &id in &ids {
                let p = tape.param(store, id);
                let p2 = tape.square(p);
                let s = tape.sum(p2);
                let s = tape.scale(s, self.config.weight_decay);
                loss = tape.add(loss, s)?;
            }
        }
        let value = tape.scalar(loss)?;
        tape.backward(loss)?;
        for &id in &ids {
            store.get_mut(id).value.zero_grad();
        }
        tape.accumulate_param_grads(store)?;
        optimizer.step(store, &ids, lr)?;
        self.verify_target(store)?;
        Ok(value)
    }
}

fn build_net(
    store: &mut ParamStore,
    name: &str,
    cfg: &RnpConfig,
    is_target: bool,
    group: ParamGroup,
    rng: &mut Rng,
) -> Result<Stack> {
    let hidden = if is_target {
        cfg.target_hidden_layers
    } else {
        cfg.predictor_hidden_layers
    };
    match cfg.layer_kind {
        LayerKind::Dense => {
            let width = if is_target { cfg.target_width } else { cfg.predictor_width }.unwrap_or(cfg.input_dim);
            let mut dims = vec![cfg.input_dim];
            dims.extend(std::iter::repeat_n(width, hidden));
            dims.push(cfg.output_dim);
            Ok(Stack::dense(store, name, &dims, group, false, rng))
        }
        LayerKind::DepthwiseConv { kernel } => {
            if kernel % 2 == 0 {
                return Err(Error::config(format!("{name}: depthwise kernel must be odd, got {kernel}")));
            }
            let n = cfg.input_dim;
            let mut layers = Vec::with_capacity(hidden + 1);
            for i in 0..hidden {
                let conv = Conv2d::new(store, &format!("{name}.{i}"), ConvSpec::depthwise(n, kernel), group, rng)?;
                layers.push(Layer::Conv(conv));
            }
            let proj = Conv2d::new(
                store,
                &format!("{name}.{hidden}"),
                ConvSpec::same(n, cfg.output_dim, 1),
                group,
                rng,
            )?;
            layers.push(Layer::Conv(proj));
            Ok(Stack::new(layers, false))
        }
    }
}

/// Elementwise `(a - b)^2`.
pub fn squared_residual(z_phi: &Tensor, z_psi: &Tensor) -> Result<Tensor> {
    if z_phi.shape() != z_psi.shape() {
        return Err(Error::shape("squared_residual", z_phi.shape(), z_psi.shape()));
    }
    let data = z_phi
        .data()
        .iter()
        .zip(z_psi.data())
        .map(|(a, b)| (a - b) * (a - b))
        .collect();
    Tensor::new(z_phi.shape(), data)
}

/// Sums axis 1 (channels) of `[B, C]` or `[B, C, H, W]`.
pub fn sum_channels(u: &Tensor) -> Result<Tensor> {
    let s = u.shape();
    if s.len() < 2 {
        return Err(Error::shape("sum_channels", s, &[]));
    }
    let (b, c) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let mut out = vec![0.0; b * inner];
    for n in 0..b {
        for ch in 0..c {
            let src = &u.data()[(n * c + ch) * inner..][..inner];
            for (o, v) in out[n * inner..(n + 1) * inner].iter_mut().zip(src) {
                *o += v;
            }
        }
    }
    let mut shape = vec![b];
    shape.extend_from_slice(&s[2..]);
    Tensor::new(&shape, out)
}

/// Which entries share a normalizing maximum.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormScope {
    /// Per channel, over the leading (batch) axis.
    Batch,
    /// Per sample and channel, over the trailing two (spatial) axes.
    Spatial,
    /// One maximum over the whole tensor.
    Global,
}

/// Raw residuals plus their normalized counterpart.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyMap {
    pub raw: Tensor,
    pub normalized: Tensor,
}

impl UncertaintyMap {
    pub fn new(raw: Tensor, scope: NormScope) -> Result<Self> {
        let normalized = normalize_uncertainty(&raw, scope)?;
        Ok(Self { raw, normalized })
    }
}

pub const NORM_EPS: f64 = 1e-8;

/// `u / max(m, eps)` where `m` is the maximum of `u` over `scope`.
///
/// Zeros stay zero, order within a scope is preserved, and a map whose
/// maximum is already 1 is returned unchanged.
pub fn normalize_uncertainty(u: &Tensor, scope: NormScope) -> Result<Tensor> {
    if let Some(bad) = u.data().iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::usage(format!("uncertainty must be non-negative, found {bad}")));
    }
    let s = u.shape();
    let mut out = u.data().to_vec();
    let divide = |vals: &mut [f64], idx: &mut dyn Iterator<Item = usize>| {
        let idx: Vec<usize> = idx.collect();
        let m = idx.iter().map(|&i| vals[i]).fold(0.0, f64::max).max(NORM_EPS);
        for i in idx {
            vals[i] /= m;
        }
    };
    match scope {
        NormScope::Global => {
            let n = out.len();
            divide(&mut out, &mut (0..n));
        }
        NormScope::Batch => {
            let b = s.first().copied().unwrap_or(1).max(1);
            let inner = out.len() / b;
            for j in 0..inner {
                divide(&mut out, &mut (0..b).map(|n| n * inner + j));
            }
        }
        NormScope::Spatial => {
            if s.len() < 3 {
                return Err(Error::shape("spatial normalization", s, &[]));
            }
            let plane = s[s.len() - 2] * s[s.len() - 1];
            let planes = out.len() / plane.max(1);
            for p in 0..planes {
                divide(&mut out, &mut (p * plane..(p + 1) * plane));
            }
        }
    }
    Tensor::new(s, out)
}
