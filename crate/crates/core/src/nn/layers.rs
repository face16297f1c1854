use serde::{Deserialize, Serialize};

use crate::autodiff::{Padding, ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    /// Affine map followed by the activation.
    Dense,
    /// 3×3 'same' convolution, bias, relu, 2×2 max-pool.
    ConvBlock,
    /// Dense layer inside the discriminator MLP.
    MlpHead,
    /// Dense layer producing the task prediction.
    TaskHead,
}

/// Shape and behaviour of one layer. For conv blocks the fans count channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub fan_in: usize,
    pub fan_out: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(
        kind: LayerKind,
        fan_in: usize,
        fan_out: usize,
        activation: Activation,
    ) -> Result<Self> {
        if fan_in == 0 || fan_out == 0 {
            return Err(Error::Config(format!(
                "{kind:?} layer needs positive fans, got {fan_in}→{fan_out}"
            )));
        }
        Ok(Self {
            kind,
            fan_in,
            fan_out,
            activation,
        })
    }

    pub fn dense(fan_in: usize, fan_out: usize, activation: Activation) -> Result<Self> {
        Self::new(LayerKind::Dense, fan_in, fan_out, activation)
    }

    pub fn conv_block(in_channels: usize, out_channels: usize) -> Result<Self> {
        Self::new(
            LayerKind::ConvBlock,
            in_channels,
            out_channels,
            Activation::Relu,
        )
    }

    /// Spatial kernel extent of conv blocks.
    pub const KERNEL: usize = 3;

    pub fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::ConvBlock => vec![self.fan_out, self.fan_in, Self::KERNEL, Self::KERNEL],
            _ => vec![self.fan_in, self.fan_out],
        }
    }

    /// Fan-in and fan-out as seen by the initializer (receptive field included).
    pub fn init_fans(&self) -> (usize, usize) {
        match self.kind {
            LayerKind::ConvBlock => {
                let rf = Self::KERNEL * Self::KERNEL;
                (self.fan_in * rf, self.fan_out * rf)
            }
            _ => (self.fan_in, self.fan_out),
        }
    }
}

/// A named layer whose parameters live in a [`ParamStore`] as
/// `<name>.weight` and `<name>.bias`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub spec: LayerSpec,
}

impl Layer {
    pub fn new(name: impl Into<String>, spec: LayerSpec) -> Self {
        Self {
            name: name.into(),
            spec,
        }
    }

    pub fn weight_id(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_id(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, &self.weight_id())?;
        let b = tape.param(store, &self.bias_id())?;
        match self.spec.kind {
            LayerKind::ConvBlock => {
                let s = tape.shape(x);
                if s.len() != 4 || s[1] != self.spec.fan_in {
                    return Err(Error::dim(
                        "conv_block",
                        format!(
                            "`{}` expects {} channels, got input {s:?}",
                            self.name, self.spec.fan_in
                        ),
                    ));
                }
                let y = tape.conv2d(x, w, Padding::Same)?;
                let y = tape.add_channel_bias(y, b)?;
                let y = apply(tape, y, self.spec.activation);
                tape.max_pool2(y)
            }
            _ => {
                let s = tape.shape(x);
                if s.len() != 2 || s[1] != self.spec.fan_in {
                    return Err(Error::dim(
                        "dense",
                        format!(
                            "`{}` expects fan_in {}, got input {s:?}",
                            self.name, self.spec.fan_in
                        ),
                    ));
                }
                let y = tape.matmul(x, w)?;
                let y = tape.add_row_bias(y, b)?;
                Ok(apply(tape, y, self.spec.activation))
            }
        }
    }
}

fn apply(tape: &mut Tape, x: Var, act: Activation) -> Var {
    match act {
        Activation::Identity => x,
        Activation::Relu => tape.relu(x),
        Activation::Sigmoid => tape.sigmoid(x),
    }
}
