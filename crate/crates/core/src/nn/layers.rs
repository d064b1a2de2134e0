//! Layer and model descriptions.
//!
//! The layer set is fixed: 3x3 same-padding convolution, ReLU, 2x2/stride-2
//! max pooling, flatten, and a fully connected layer. A [`ModelSpec`] is an
//! ordered layer list plus a cut position splitting it into a client segment
//! and a server segment.

use serde::{Deserialize, Serialize};

use super::tensor::TensorShape;
use super::NnError;

pub const CONV_KERNEL: usize = 3;
pub const POOL_KERNEL: usize = 2;
pub const POOL_STRIDE: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    /// 3x3 convolution, stride 1, padding 1 (spatial dims preserved).
    Conv2d { in_channels: usize, out_channels: usize },
    Relu,
    /// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
    MaxPool2d,
    Flatten,
    Linear { in_features: usize, out_features: usize },
}

impl LayerSpec {
    /// Output shape for a given input shape, or an error when the layer
    /// cannot consume it.
    pub fn output_shape(&self, input: &TensorShape) -> Result<TensorShape, NnError> {
        match self {
            LayerSpec::Conv2d { in_channels, out_channels } => match input.dims.as_slice() {
                [c, h, w] if *c == *in_channels => Ok(TensorShape::chw(*out_channels, *h, *w)),
                _ => Err(NnError::ShapeMismatch {
                    expected: format!("{}xHxW", in_channels),
                    got: input.to_string(),
                }),
            },
            LayerSpec::Relu => Ok(input.clone()),
            LayerSpec::MaxPool2d => match input.dims.as_slice() {
                [c, h, w] if *h >= POOL_KERNEL && *w >= POOL_KERNEL => {
                    Ok(TensorShape::chw(*c, h / POOL_STRIDE, w / POOL_STRIDE))
                }
                _ => Err(NnError::ShapeMismatch {
                    expected: "CxHxW with H,W >= 2".to_string(),
                    got: input.to_string(),
                }),
            },
            LayerSpec::Flatten => Ok(TensorShape::flat(input.elems())),
            LayerSpec::Linear { in_features, out_features } => {
                if input.elems() == *in_features && input.dims.len() == 1 {
                    Ok(TensorShape::flat(*out_features))
                } else {
                    Err(NnError::ShapeMismatch {
                        expected: format!("flat {}", in_features),
                        got: input.to_string(),
                    })
                }
            }
        }
    }

    /// Number of trainable parameters.
    pub fn param_count(&self) -> usize {
        match self {
            LayerSpec::Conv2d { in_channels, out_channels } => {
                out_channels * in_channels * CONV_KERNEL * CONV_KERNEL + out_channels
            }
            LayerSpec::Linear { in_features, out_features } => {
                in_features * out_features + out_features
            }
            _ => 0,
        }
    }

    /// Forward multiply-accumulate count for one example with the given
    /// input shape. Constants per kind:
    /// Conv2d: out_c*H*W*in_c*9; Linear: in*out; ReLU: elems;
    /// MaxPool2d: 4 compares per output element; Flatten: 0.
    pub fn forward_macs(&self, input: &TensorShape) -> u64 {
        match self {
            LayerSpec::Conv2d { in_channels, out_channels } => {
                let (h, w) = (input.dims[1], input.dims[2]);
                (out_channels * h * w * in_channels * CONV_KERNEL * CONV_KERNEL) as u64
            }
            LayerSpec::Relu => input.elems() as u64,
            LayerSpec::MaxPool2d => {
                let out = self.output_shape(input).map(|s| s.elems()).unwrap_or(0);
                (out * POOL_KERNEL * POOL_KERNEL) as u64
            }
            LayerSpec::Flatten => 0,
            LayerSpec::Linear { in_features, out_features } => {
                (*in_features * *out_features) as u64
            }
        }
    }

    /// Backward cost: input-gradient plus parameter-gradient work, modelled
    /// as twice the forward cost for parameterised layers and the forward
    /// cost otherwise.
    pub fn backward_macs(&self, input: &TensorShape) -> u64 {
        match self {
            LayerSpec::Conv2d { .. } | LayerSpec::Linear { .. } => 2 * self.forward_macs(input),
            _ => self.forward_macs(input),
        }
    }
}

/// An ordered layer stack with a cut position. Layers `[0, split_index)`
/// form the client segment, `[split_index, len)` the server segment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layers: Vec<LayerSpec>,
    pub split_index: usize,
    pub input_shape: TensorShape,
}

impl ModelSpec {
    pub fn new(
        layers: Vec<LayerSpec>,
        split_index: usize,
        input_shape: TensorShape,
    ) -> Result<Self, NnError> {
        if layers.is_empty() || split_index == 0 || split_index >= layers.len() {
            return Err(NnError::InvalidSpec(format!(
                "split index {} out of range for {} layers",
                split_index,
                layers.len()
            )));
        }
        let spec = Self { layers, split_index, input_shape };
        spec.output_shape()?; // validates every layer transition
        Ok(spec)
    }

    /// The two-conv image classifier used throughout the simulator, cut
    /// after the client-side pooling layer (split index 3).
    ///
    /// Client: Conv2d(d->32) / ReLU / MaxPool2d.
    /// Server: Conv2d(32->64) / ReLU / MaxPool2d / Flatten /
    ///         Linear(->128) / ReLU / Linear(128->10).
    pub fn two_conv_classifier(depth: usize, height: usize, width: usize) -> Self {
        let (ph, pw) = (height / 2, width / 2);
        let flat = 64 * (ph / 2) * (pw / 2);
        Self::new(
            vec![
                LayerSpec::Conv2d { in_channels: depth, out_channels: 32 },
                LayerSpec::Relu,
                LayerSpec::MaxPool2d,
                LayerSpec::Conv2d { in_channels: 32, out_channels: 64 },
                LayerSpec::Relu,
                LayerSpec::MaxPool2d,
                LayerSpec::Flatten,
                LayerSpec::Linear { in_features: flat, out_features: 128 },
                LayerSpec::Relu,
                LayerSpec::Linear { in_features: 128, out_features: 10 },
            ],
            3,
            TensorShape::chw(depth, height, width),
        )
        .expect("classifier spec is well formed")
    }

    /// Per-layer input shapes, plus the final output shape at the end.
    pub fn shape_chain(&self) -> Result<Vec<TensorShape>, NnError> {
        let mut shapes = vec![self.input_shape.clone()];
        for layer in &self.layers {
            let next = layer.output_shape(shapes.last().unwrap())?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<TensorShape, NnError> {
        Ok(self.shape_chain()?.pop().unwrap())
    }

    /// Shape entering the server segment (= client segment output).
    pub fn cut_shape(&self) -> Result<TensorShape, NnError> {
        Ok(self.shape_chain()?[self.split_index].clone())
    }

    pub fn client_layers(&self) -> &[LayerSpec] {
        &self.layers[..self.split_index]
    }

    pub fn server_layers(&self) -> &[LayerSpec] {
        &self.layers[self.split_index..]
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    /// Forward MACs for one example over a layer range.
    pub fn forward_macs_range(&self, range: std::ops::Range<usize>) -> u64 {
        let shapes = self.shape_chain().expect("validated at construction");
        range.map(|i| self.layers[i].forward_macs(&shapes[i])).sum()
    }

    pub fn client_forward_macs(&self) -> u64 {
        self.forward_macs_range(0..self.split_index)
    }

    pub fn server_forward_macs(&self) -> u64 {
        self.forward_macs_range(self.split_index..self.layers.len())
    }

    pub fn client_backward_macs(&self) -> u64 {
        let shapes = self.shape_chain().expect("validated at construction");
        (0..self.split_index).map(|i| self.layers[i].backward_macs(&shapes[i])).sum()
    }

    pub fn server_backward_macs(&self) -> u64 {
        let shapes = self.shape_chain().expect("validated at construction");
        (self.split_index..self.layers.len())
            .map(|i| self.layers[i].backward_macs(&shapes[i]))
            .sum()
    }
}
