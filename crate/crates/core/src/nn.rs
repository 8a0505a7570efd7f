//! Layers over [`Tape`] with weights held in a [`ParamStore`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{bias_uniform, kaiming_uniform, ParamGroup, ParamId, ParamStore, Rng, Tape, Var};

/// LeakyReLU negative slope used throughout.
pub const LEAKY_SLOPE: f64 = 0.25;

/// Fully connected layer, `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        group: ParamGroup,
        with_bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let w = kaiming_uniform(&[in_dim, out_dim], in_dim, LEAKY_SLOPE, rng);
        let weight = store.add(format!("{name}.weight"), group, w);
        let bias = with_bias.then(|| store.add(format!("{name}.bias"), group, bias_uniform(out_dim, in_dim, rng)));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// `x: [R, in] -> [R, out]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_bias(y, b, 1)
            }
            None => Ok(y),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// 2-D convolution over `[B, C, H, W]`; `groups == in == out` is depthwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub kernel: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn same(in_channels: usize, out_channels: usize, kernel_size: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_size,
            stride: 1,
            padding: kernel_size / 2,
            groups: 1,
        }
    }

    pub fn depthwise(channels: usize, kernel_size: usize) -> Self {
        Self {
            groups: channels,
            ..Self::same(channels, channels, kernel_size)
        }
    }

    pub fn strided(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        spec: ConvSpec,
        group: ParamGroup,
        rng: &mut Rng,
    ) -> Result<Self> {
        let ConvSpec {
            in_channels,
            out_channels,
            kernel_size,
            stride,
            padding,
            groups,
        } = spec;
        if groups == 0 || in_channels % groups != 0 || out_channels % groups != 0 {
            return Err(Error::config(format!(
                "{name}: {in_channels}->{out_channels} channels not divisible into {groups} groups"
            )));
        }
        let per_group = in_channels / groups;
        let fan_in = per_group * kernel_size * kernel_size;
        let k = kaiming_uniform(
            &[out_channels, per_group, kernel_size, kernel_size],
            fan_in,
            LEAKY_SLOPE,
            rng,
        );
        let kernel = store.add(format!("{name}.kernel"), group, k);
        let bias = Some(store.add(format!("{name}.bias"), group, bias_uniform(out_channels, fan_in, rng)));
        Ok(Self {
            kernel,
            bias,
            in_channels,
            out_channels,
            kernel_size,
            stride,
            padding,
            groups,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let k = tape.param(store, self.kernel);
        let y = tape.conv2d(x, k, self.stride, self.padding, self.groups)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_bias(y, b, 1)
            }
            None => Ok(y),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.kernel).chain(self.bias).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Linear(Linear),
    Conv(Conv2d),
}

impl Layer {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        match self {
            Layer::Linear(l) => l.forward(tape, store, x),
            Layer::Conv(c) => c.forward(tape, store, x),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            Layer::Linear(l) => l.param_ids(),
            Layer::Conv(c) => c.param_ids(),
        }
    }
}

/// Layers separated by LeakyReLU. With `activate_output` the last layer is
/// followed by an activation as well.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stack {
    pub layers: Vec<Layer>,
    pub slope: f64,
    pub activate_output: bool,
}

impl Stack {
    pub fn new(layers: Vec<Layer>, activate_output: bool) -> Self {
        Self {
            layers,
            slope: LEAKY_SLOPE,
            activate_output,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, mut x: Var) -> Result<Var> {
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, store, x)?;
            if i < last || self.activate_output {
                x = tape.leaky_relu(x, self.slope);
            }
        }
        Ok(x)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Layer::param_ids).collect()
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        store.count(&self.param_ids())
    }

    /// Dense stack `dims[0] -> dims[1] -> ... -> dims[n]`.
    pub fn dense(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        group: ParamGroup,
        activate_output: bool,
        rng: &mut Rng,
    ) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Layer::Linear(Linear::new(store, &format!("{name}.{i}"), w[0], w[1], group, true, rng)))
            .collect();
        Self::new(layers, activate_output)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn dense_stack_shapes() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(1);
        let s = Stack::dense(&mut store, "s", &[4, 8, 3], ParamGroup::Main, false, &mut rng);
        assert_eq!(s.param_count(&store), 4 * 8 + 8 + 8 * 3 + 3);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[5, 4]));
        let y = s.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.shape(y), &[5, 3]);
    }

    #[test]
    fn conv_rejects_bad_groups() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(1);
        let spec = ConvSpec {
            groups: 2,
            ..ConvSpec::same(3, 4, 3)
        };
        assert!(Conv2d::new(&mut store, "c", spec, ParamGroup::Main, &mut rng).is_err());
    }
}
