//! The full network: per-modality encoders and RNP units, cross-modal
//! fusion, optional attention, and decoders onto the class simplex.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{self, AttentionMode, AttentionParams, FusionConfig, FusionFn};
use crate::nn::{Conv2d, ConvSpec, Layer, Linear, Stack, LEAKY_SLOPE};
use crate::rnp::{LayerKind, NormScope, RnpConfig, RnpModule, UncertaintyMap};
use crate::tensor::{conv2d_output_extent, Digest, ParamGroup, ParamId, ParamStore, Rng, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    DensePrediction,
}

/// Ablation modes: equal fusion, uncertainty-weighted fusion, and the
/// latter followed by cross- or self-attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Base,
    Crnp,
    CrnpCa,
    CrnpSa,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Base, Mode::Crnp, Mode::CrnpCa, Mode::CrnpSa];

    pub fn attention(self) -> AttentionMode {
        match self {
            Mode::Base | Mode::Crnp => AttentionMode::None,
            Mode::CrnpCa => AttentionMode::Cross,
            Mode::CrnpSa => AttentionMode::SelfAttention,
        }
    }

    pub fn uses_uncertainty(self) -> bool {
        self != Mode::Base
    }

    pub fn label(self) -> &'static str {
        match self {
            Mode::Base => "base",
            Mode::Crnp => "crnp",
            Mode::CrnpCa => "crnp_ca",
            Mode::CrnpSa => "crnp_sa",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderLayout {
    /// One decoder over all modalities' fused features.
    #[default]
    Shared,
    /// One decoder per modality; the model output averages their logits.
    Separate,
}

/// Shape of one modality's raw input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputKind {
    Vector { dim: usize },
    Image { channels: usize, height: usize, width: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub task: Task,
    pub class_count: usize,
    pub inputs: Vec<InputKind>,
    /// Encoder output width `N`, the space the RNP units and fusion act on.
    pub feature_dim: usize,
    /// Hidden width of dense encoders.
    pub hidden_dim: usize,
    pub mode: Mode,
    pub fusion_fn: FusionFn,
    pub d_k: usize,
    pub attention_residual: bool,
    pub max_tokens: usize,
    pub decoders: DecoderLayout,
    /// RNP output width `M`; `None` means `M = N`.
    pub rnp_output_dim: Option<usize>,
    pub rnp_target_width: Option<usize>,
    pub rnp_predictor_width: Option<usize>,
    pub rnp_weight_decay: f64,
    /// Normalization scope of uncertainty maps; `None` picks batch scope for
    /// vector features and spatial scope for feature maps.
    pub norm_scope: Option<NormScope>,
}

impl ModelConfig {
    pub fn classification(inputs: Vec<InputKind>, class_count: usize) -> Self {
        Self {
            task: Task::Classification,
            class_count,
            inputs,
            feature_dim: 32,
            hidden_dim: 64,
            mode: Mode::Crnp,
            fusion_fn: FusionFn::Residual,
            d_k: 16,
            attention_residual: true,
            max_tokens: 256,
            decoders: DecoderLayout::Shared,
            rnp_output_dim: None,
            rnp_target_width: None,
            rnp_predictor_width: None,
            rnp_weight_decay: 1e-5,
            norm_scope: None,
        }
    }

    pub fn dense_prediction(inputs: Vec<InputKind>, class_count: usize) -> Self {
        Self {
            task: Task::DensePrediction,
            ..Self::classification(inputs, class_count)
        }
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            fusion_fn: self.fusion_fn,
            attention: self.mode.attention(),
            d_k: self.d_k,
            attention_residual: self.attention_residual,
            max_tokens: self.max_tokens,
        }
    }

    pub fn modality_count(&self) -> usize {
        self.inputs.len()
    }

    fn scope(&self) -> NormScope {
        self.norm_scope.unwrap_or(match self.task {
            Task::Classification => NormScope::Batch,
            Task::DensePrediction => NormScope::Spatial,
        })
    }

    fn validate(&self) -> Result<()> {
        if self.inputs.len() < 2 {
            return Err(Error::config(format!(
                "a cross-modal model needs at least two modalities, got {}",
                self.inputs.len()
            )));
        }
        if self.class_count < 2 {
            return Err(Error::config("class_count must be at least 2"));
        }
        if self.feature_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::config("feature_dim and hidden_dim must be positive"));
        }
        for (p, input) in self.inputs.iter().enumerate() {
            let ok = match (self.task, input) {
                (Task::Classification, InputKind::Vector { dim }) => *dim > 0,
                (Task::DensePrediction, InputKind::Image { channels, height, width }) => {
                    *channels > 0 && height % 4 == 0 && width % 4 == 0 && *height >= 4 && *width >= 4
                }
                _ => false,
            };
            if !ok {
                return Err(Error::config(format!("modality {p}: input {input:?} does not fit task {:?}", self.task)));
            }
        }
        if self.inputs.windows(2).any(|w| w[0] != w[1]) && self.task == Task::DensePrediction {
            return Err(Error::config("dense-prediction modalities must share one image geometry"));
        }
        Ok(())
    }
}

/// Per-modality encoder, RNP unit and (for concat fusion) projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityBundle {
    pub encoder: Stack,
    pub rnp: RnpModule,
    pub projection: Option<Layer>,
}

/// Conv decoder restoring the input resolution from the bottleneck.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseDecoder {
    pub convs: Vec<Conv2d>,
}

impl DenseDecoder {
    fn new(store: &mut ParamStore, name: &str, in_channels: usize, classes: usize, rng: &mut Rng) -> Result<Self> {
        let widths = [in_channels, 16, 8, classes];
        let convs = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Conv2d::new(store, &format!("{name}.{i}"), ConvSpec::same(w[0], w[1], 3), ParamGroup::Main, rng))
            .collect::<Result<_>>()?;
        Ok(Self { convs })
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, mut x: Var) -> Result<Var> {
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(tape, store, x)?;
            if i < last {
                x = tape.leaky_relu(x, LEAKY_SLOPE);
                x = tape.upsample_nearest(x, 2)?;
            }
        }
        Ok(x)
    }

    fn param_ids(&self) -> Vec<ParamId> {
        self.convs.iter().flat_map(Conv2d::param_ids).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Decoder {
    Linear(Linear),
    Dense(DenseDecoder),
}

impl Decoder {
    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        match self {
            Decoder::Linear(l) => l.forward(tape, store, x),
            Decoder::Dense(d) => d.forward(tape, store, x),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            Decoder::Linear(l) => l.param_ids(),
            Decoder::Dense(d) => d.param_ids(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Replace every normalized uncertainty map by zeros.
    pub zero_uncertainty: bool,
    /// Skip uncertainty weighting entirely (features pass through).
    pub disable_fusion: bool,
}

/// Tape handles produced by [`CrnpModel::forward`].
pub struct Forward {
    /// Encoder outputs `x^(p)`.
    pub features: Vec<Var>,
    /// Features after fusion and attention, as fed to the decoders.
    pub fused: Vec<Var>,
    /// One entry per decoder.
    pub decoder_logits: Vec<Var>,
    /// Mean of `decoder_logits`.
    pub logits: Var,
    /// Softmax of `logits` over the class axis.
    pub probs: Var,
    /// Cross-modal maps weighting each modality (empty when unused).
    pub uncertainty: Vec<UncertaintyMap>,
    /// Attention weights, when attention ran.
    pub attention: Vec<Var>,
}

/// Detached results of a forward pass.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub logits: Tensor,
    pub probs: Tensor,
    pub uncertainty: Vec<UncertaintyMap>,
}

impl Prediction {
    /// Arg-max class per sample (classification) or per pixel, laid out as
    /// `[B, H, W]`.
    pub fn labels(&self) -> Vec<usize> {
        argmax_class_axis(&self.probs)
    }
}

/// Arg-max over axis 1 of `[B, C, ...]`; first index wins ties.
pub fn argmax_class_axis(t: &Tensor) -> Vec<usize> {
    let s = t.shape();
    let (b, c) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let d = t.data();
    let mut out = Vec::with_capacity(b * inner);
    for n in 0..b {
        for i in 0..inner {
            let mut best = 0;
            for ch in 1..c {
                if d[(n * c + ch) * inner + i] > d[(n * c + best) * inner + i] {
                    best = ch;
                }
            }
            out.push(best);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrnpModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub bundles: Vec<ModalityBundle>,
    pub attention: Option<AttentionParams>,
    pub decoders: Vec<Decoder>,
}

impl CrnpModel {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let n = config.feature_dim;
        let p_count = config.modality_count();
        let mut bundles = Vec::with_capacity(p_count);
        let mut tokens_per_modality = 1;
        for (p, input) in config.inputs.iter().enumerate() {
            let name = format!("m{p}");
            let (encoder, rnp_kind) = match *input {
                InputKind::Vector { dim } => {
                    let h = config.hidden_dim;
                    let enc = Stack::dense(&mut store, &format!("{name}.encoder"), &[dim, h, h, n], ParamGroup::Main, true, rng);
                    (enc, LayerKind::Dense)
                }
                InputKind::Image { channels, height, width } => {
                    let specs = [
                        ConvSpec::same(channels, 8, 3).strided(2),
                        ConvSpec::same(8, 16, 3).strided(2),
                        ConvSpec::same(16, n, 3),
                    ];
                    let mut layers = Vec::new();
                    let (mut h, mut w) = (height, width);
                    for (i, spec) in specs.into_iter().enumerate() {
                        h = conv2d_output_extent(h, spec.kernel_size, spec.stride, spec.padding);
                        w = conv2d_output_extent(w, spec.kernel_size, spec.stride, spec.padding);
                        let conv = Conv2d::new(&mut store, &format!("{name}.encoder.{i}"), spec, ParamGroup::Main, rng)?;
                        layers.push(Layer::Conv(conv));
                    }
                    tokens_per_modality = h * w;
                    (Stack::new(layers, true), LayerKind::DepthwiseConv { kernel: 3 })
                }
            };
            let mut rnp_cfg = RnpConfig::new(n, config.rnp_output_dim.unwrap_or(n), rnp_kind)
                .with_weight_decay(config.rnp_weight_decay);
            rnp_cfg.target_width = config.rnp_target_width;
            rnp_cfg.predictor_width = config.rnp_predictor_width;
            let rnp = RnpModule::new(rnp_cfg, &mut store, &format!("{name}.rnp"), rng)?;
            let projection = match (config.fusion_fn, config.mode.uses_uncertainty()) {
                (FusionFn::Concat, true) => Some(match input {
                    InputKind::Vector { .. } => Layer::Linear(Linear::new(
                        &mut store,
                        &format!("{name}.projection"),
                        2 * n,
                        n,
                        ParamGroup::Main,
                        true,
                        rng,
                    )),
                    InputKind::Image { .. } => Layer::Conv(Conv2d::new(
                        &mut store,
                        &format!("{name}.projection"),
                        ConvSpec::same(2 * n, n, 1),
                        ParamGroup::Main,
                        rng,
                    )?),
                }),
                _ => None,
            };
            bundles.push(ModalityBundle {
                encoder,
                rnp,
                projection,
            });
        }

        let attention = match config.mode.attention() {
            AttentionMode::None => None,
            _ => {
                let total = tokens_per_modality * p_count;
                if total > config.max_tokens {
                    return Err(Error::config(format!(
                        "attention over {total} tokens exceeds max_tokens = {}",
                        config.max_tokens
                    )));
                }
                Some(AttentionParams::new(&mut store, "attention", n, config.d_k, rng)?)
            }
        };

        let c = config.class_count;
        let decoder_inputs = match config.decoders {
            DecoderLayout::Shared => vec![p_count * n],
            DecoderLayout::Separate => vec![n; p_count],
        };
        let decoders = decoder_inputs
            .into_iter()
            .enumerate()
            .map(|(i, width)| {
                let name = format!("decoder{i}");
                Ok(match config.task {
                    Task::Classification => {
                        Decoder::Linear(Linear::new(&mut store, &name, width, c, ParamGroup::Main, true, rng))
                    }
                    Task::DensePrediction => Decoder::Dense(DenseDecoder::new(&mut store, &name, width, c, rng)?),
                })
            })
            .collect::<Result<_>>()?;

        Ok(Self {
            config,
            store,
            bundles,
            attention,
            decoders,
        })
    }

    pub fn modality_count(&self) -> usize {
        self.bundles.len()
    }

    pub fn rnp_modules(&self) -> Vec<&RnpModule> {
        self.bundles.iter().map(|b| &b.rnp).collect()
    }

    pub fn psi_digests(&self) -> Vec<Digest> {
        self.bundles.iter().map(|b| b.rnp.target_digest()).collect()
    }

    /// Parameters updated in the main phase.
    pub fn main_ids(&self) -> Vec<ParamId> {
        self.store.ids_in(ParamGroup::Main)
    }

    /// Parameters updated in the RNP phase.
    pub fn predictor_ids(&self) -> Vec<ParamId> {
        self.store.ids_in(ParamGroup::Predictor)
    }

    fn check_inputs(&self, inputs: &[Tensor]) -> Result<usize> {
        if inputs.len() != self.modality_count() {
            return Err(Error::usage(format!(
                "model has {} modalities, got {} inputs",
                self.modality_count(),
                inputs.len()
            )));
        }
        let batch = inputs[0].shape().first().copied().unwrap_or(0);
        for (x, kind) in inputs.iter().zip(&self.config.inputs) {
            let expected: Vec<usize> = match *kind {
                InputKind::Vector { dim } => vec![batch, dim],
                InputKind::Image { channels, height, width } => vec![batch, channels, height, width],
            };
            if x.shape() != expected.as_slice() {
                return Err(Error::shape("model input", x.shape(), &expected));
            }
        }
        Ok(batch)
    }

    /// Encoder outputs without recording gradients.
    pub fn encode(&self, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
        self.check_inputs(inputs)?;
        let mut tape = Tape::tracking(&[]);
        self.bundles
            .iter()
            .zip(inputs)
            .map(|(b, x)| {
                let v = tape.constant(x.clone());
                let f = b.encoder.forward(&mut tape, &self.store, v)?;
                Ok(tape.value(f).clone())
            })
            .collect()
    }

    /// Each modality's own RNP score on its own features.
    pub fn own_scores(&self, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
        let feats = self.encode(inputs)?;
        self.bundles.iter().zip(&feats).map(|(b, f)| b.rnp.score(&self.store, f)).collect()
    }

    /// Records the full pipeline on `tape`.
    pub fn forward(&self, tape: &mut Tape, inputs: &[Tensor], opts: ForwardOptions) -> Result<Forward> {
        self.check_inputs(inputs)?;
        let mut features = Vec::with_capacity(inputs.len());
        for (b, x) in self.bundles.iter().zip(inputs) {
            let v = tape.constant(x.clone());
            features.push(b.encoder.forward(tape, &self.store, v)?);
        }

        let mut uncertainty = Vec::new();
        let mut fused = features.clone();
        if self.config.mode.uses_uncertainty() && !opts.disable_fusion {
            let scores = self
                .bundles
                .iter()
                .zip(&features)
                .map(|(b, &f)| b.rnp.score(&self.store, tape.value(f)))
                .collect::<Result<Vec<_>>>()?;
            for (p, b) in self.bundles.iter().enumerate() {
                let raw = fusion::sum_other_scores(&scores, p)?;
                let map = if opts.zero_uncertainty {
                    UncertaintyMap {
                        normalized: Tensor::zeros(raw.shape()),
                        raw,
                    }
                } else {
                    UncertaintyMap::new(raw, self.config.scope())?
                };
                fused[p] = fusion::fuse(
                    tape,
                    &self.store,
                    features[p],
                    &map.normalized,
                    self.config.fusion_fn,
                    b.projection.as_ref(),
                )?;
                uncertainty.push(map);
            }
        }

        let mut attention = Vec::new();
        if let Some(params) = &self.attention {
            let shapes: Vec<Vec<usize>> = fused.iter().map(|&f| tape.shape(f).to_vec()).collect();
            let tokens = fused
                .iter()
                .map(|&f| fusion::to_tokens(tape, f))
                .collect::<Result<Vec<_>>>()?;
            let attended: Vec<Var> = match self.config.mode.attention() {
                AttentionMode::SelfAttention => {
                    let out = fusion::self_attention(tape, &self.store, params, &tokens)?;
                    attention.push(out.weights);
                    let mut start = 0;
                    let mut parts = Vec::with_capacity(tokens.len());
                    for &t in &tokens {
                        let len = tape.shape(t)[1];
                        parts.push(tape.slice(out.output, 1, start, len)?);
                        start += len;
                    }
                    parts
                }
                AttentionMode::Cross => {
                    let mut parts = Vec::with_capacity(tokens.len());
                    for p in 0..tokens.len() {
                        let others: Vec<Var> = (0..tokens.len()).filter(|&q| q != p).map(|q| tokens[q]).collect();
                        let out = fusion::cross_attention(tape, &self.store, params, tokens[p], &others)?;
                        attention.push(out.weights);
                        parts.push(out.output);
                    }
                    parts
                }
                AttentionMode::None => unreachable!("attention params exist only with attention"),
            };
            for (p, a) in attended.into_iter().enumerate() {
                let a = if self.config.attention_residual {
                    tape.add(tokens[p], a)?
                } else {
                    a
                };
                fused[p] = fusion::from_tokens(tape, a, &shapes[p])?;
            }
        }

        let decoder_logits = match self.config.decoders {
            DecoderLayout::Shared => {
                let joined = tape.concat(&fused, 1)?;
                vec![self.decoders[0].forward(tape, &self.store, joined)?]
            }
            DecoderLayout::Separate => self
                .decoders
                .iter()
                .zip(&fused)
                .map(|(d, &f)| d.forward(tape, &self.store, f))
                .collect::<Result<_>>()?,
        };
        let logits = if decoder_logits.len() == 1 {
            decoder_logits[0]
        } else {
            let mut acc = decoder_logits[0];
            for &l in &decoder_logits[1..] {
                acc = tape.add(acc, l)?;
            }
            tape.scale(acc, 1.0 / decoder_logits.len() as f64)
        };
        let probs = tape.softmax(logits, 1)?;
        Ok(Forward {
            features,
            fused,
            decoder_logits,
            logits,
            probs,
            uncertainty,
            attention,
        })
    }

    pub fn predict(&self, inputs: &[Tensor]) -> Result<Prediction> {
        self.predict_with(inputs, ForwardOptions::default())
    }

    pub fn predict_with(&self, inputs: &[Tensor], opts: ForwardOptions) -> Result<Prediction> {
        let mut tape = Tape::tracking(&[]);
        let f = self.forward(&mut tape, inputs, opts)?;
        Ok(Prediction {
            logits: tape.value(f.logits).clone(),
            probs: tape.value(f.probs).clone(),
            uncertainty: f.uncertainty,
        })
    }

    /// Re-reads every RNP target digest from the current weights.
    pub(crate) fn refresh_target_digests(&mut self) {
        for b in &mut self.bundles {
            let d = self.store.digest(&b.rnp.target_ids());
            b.rnp.set_target_digest(d);
        }
    }
}

/// Averages logits elementwise, then applies softmax over axis 1.
pub fn average_logits(logits: &[Tensor]) -> Result<Tensor> {
    let first = logits.first().ok_or_else(|| Error::usage("ensemble of zero models"))?;
    let mut acc = vec![0.0; first.numel()];
    for l in logits {
        if l.shape() != first.shape() {
            return Err(Error::shape("ensemble logits", first.shape(), l.shape()));
        }
        acc.iter_mut().zip(l.data()).for_each(|(a, v)| *a += v);
    }
    let k = logits.len() as f64;
    acc.iter_mut().for_each(|a| *a /= k);
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::new(first.shape(), acc)?);
    let p = tape.softmax(v, 1)?;
    Ok(tape.value(p).clone())
}

/// Ensemble prediction: mean of the members' logits, then softmax.
pub fn ensemble_predict(models: &[&CrnpModel], inputs: &[Tensor]) -> Result<Prediction> {
    let first = models.first().ok_or_else(|| Error::usage("ensemble of zero models"))?;
    for m in models {
        if m.config.task != first.config.task || m.config.class_count != first.config.class_count {
            return Err(Error::usage(format!(
                "ensemble members disagree: {:?} with {} classes vs {:?} with {} classes",
                first.config.task, first.config.class_count, m.config.task, m.config.class_count
            )));
        }
    }
    let preds = models.iter().map(|m| m.predict(inputs)).collect::<Result<Vec<_>>>()?;
    let logits: Vec<Tensor> = preds.iter().map(|p| p.logits.clone()).collect();
    let probs = average_logits(&logits)?;
    let k = logits.len() as f64;
    let mut mean = logits[0].clone();
    for l in &logits[1..] {
        mean.data_mut().iter_mut().zip(l.data()).for_each(|(a, v)| *a += v);
    }
    mean.data_mut().iter_mut().for_each(|a| *a /= k);
    let uncertainty = preds.into_iter().next().map(|p| p.uncertainty).unwrap_or_default();
    Ok(Prediction {
        logits: mean,
        probs,
        uncertainty,
    })
}
