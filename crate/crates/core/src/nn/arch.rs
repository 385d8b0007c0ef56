use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One layer of a feed-forward network. Convolutions use stride 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv1d {
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        #[serde(default)]
        padding: usize,
    },
    /// Non-overlapping max pooling (window = stride = `size`), floor semantics.
    MaxPool1d {
        size: usize,
    },
    Dense {
        n_in: usize,
        n_out: usize,
    },
    Relu,
    Flatten,
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel_size: usize) -> Self {
        LayerSpec::Conv1d {
            in_channels,
            out_channels,
            kernel_size,
            padding: 0,
        }
    }

    pub fn dense(n_in: usize, n_out: usize) -> Self {
        LayerSpec::Dense { n_in, n_out }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv1d { .. } | LayerSpec::Dense { .. })
    }

    /// Shape of the weight tensor: `[out, in, k]` for conv, `[out, in]` for dense.
    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                kernel_size,
                ..
            } => Some(vec![out_channels, in_channels, kernel_size]),
            LayerSpec::Dense { n_in, n_out } => Some(vec![n_out, n_in]),
            _ => None,
        }
    }

    pub fn bias_len(&self) -> Option<usize> {
        match *self {
            LayerSpec::Conv1d { out_channels, .. } => Some(out_channels),
            LayerSpec::Dense { n_out, .. } => Some(n_out),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv1d { .. } => "conv1d",
            LayerSpec::MaxPool1d { .. } => "maxpool1d",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Relu => "relu",
            LayerSpec::Flatten => "flatten",
        }
    }
}

/// Activation shape flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActShape {
    /// Channel-major sequence `[channels][len]`.
    Seq {
        channels: usize,
        len: usize,
    },
    Flat(usize),
}

impl ActShape {
    pub fn size(&self) -> usize {
        match *self {
            ActShape::Seq { channels, len } => channels * len,
            ActShape::Flat(n) => n,
        }
    }
}

/// Network topology; the input is a single-channel sequence of `input_len` features.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_len: usize,
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    /// Conv1d(1→32,K3) → ReLU → Conv1d(32→64,K3) → ReLU → Flatten → Dense(→128) → ReLU → Dense(128→classes).
    pub fn reference(input_len: usize, classes: usize) -> Self {
        Self::two_conv(input_len, classes, 32, 64, 128)
    }

    /// The reference layout with configurable widths.
    pub fn two_conv(input_len: usize, classes: usize, c1: usize, c2: usize, hidden: usize) -> Self {
        let flat = c2 * input_len.saturating_sub(4);
        Architecture {
            input_len,
            layers: vec![
                LayerSpec::conv(1, c1, 3),
                LayerSpec::Relu,
                LayerSpec::conv(c1, c2, 3),
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::dense(flat, hidden),
                LayerSpec::Relu,
                LayerSpec::dense(hidden, classes),
            ],
        }
    }

    /// Padded conv + max-pool layout whose parameter and FLOP counts match
    /// the published per-dataset cost figures.
    pub fn pooled(input_len: usize, classes: usize) -> Self {
        let pooled_len = input_len / 2 / 2;
        Architecture {
            input_len,
            layers: vec![
                LayerSpec::Conv1d {
                    in_channels: 1,
                    out_channels: 64,
                    kernel_size: 3,
                    padding: 1,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool1d { size: 2 },
                LayerSpec::Conv1d {
                    in_channels: 64,
                    out_channels: 128,
                    kernel_size: 3,
                    padding: 1,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool1d { size: 2 },
                LayerSpec::Flatten,
                LayerSpec::dense(128 * pooled_len, 128),
                LayerSpec::Relu,
                LayerSpec::dense(128, classes),
            ],
        }
    }

    /// Activation shapes: element 0 is the input, element `i + 1` the output of layer `i`.
    pub fn trace(&self) -> Result<Vec<ActShape>> {
        if self.input_len == 0 {
            return Err(Error::config("input length must be >= 1"));
        }
        if self.layers.is_empty() {
            return Err(Error::config("architecture has no layers"));
        }
        let mut shapes = vec![ActShape::Seq {
            channels: 1,
            len: self.input_len,
        }];
        for (i, layer) in self.layers.iter().enumerate() {
            let cur = *shapes.last().unwrap();
            let next = match (*layer, cur) {
                (
                    LayerSpec::Conv1d {
                        in_channels,
                        out_channels,
                        kernel_size,
                        padding,
                    },
                    ActShape::Seq { channels, len },
                ) => {
                    if kernel_size == 0 || in_channels == 0 || out_channels == 0 {
                        return Err(Error::config(format!("layer {i}: conv sizes must be >= 1")));
                    }
                    if in_channels != channels {
                        return Err(Error::config(format!(
                            "layer {i}: conv expects {in_channels} input channels, got {channels}"
                        )));
                    }
                    let padded = len + 2 * padding;
                    if padded < kernel_size {
                        return Err(Error::config(format!(
                            "layer {i}: input length {len} too short for kernel {kernel_size}"
                        )));
                    }
                    ActShape::Seq {
                        channels: out_channels,
                        len: padded - kernel_size + 1,
                    }
                }
                (LayerSpec::MaxPool1d { size }, ActShape::Seq { channels, len }) => {
                    if size == 0 || len / size == 0 {
                        return Err(Error::config(format!(
                            "layer {i}: pool size {size} invalid for length {len}"
                        )));
                    }
                    ActShape::Seq {
                        channels,
                        len: len / size,
                    }
                }
                (LayerSpec::Dense { n_in, n_out }, ActShape::Flat(n)) => {
                    if n_in == 0 || n_out == 0 {
                        return Err(Error::config(format!(
                            "layer {i}: dense sizes must be >= 1"
                        )));
                    }
                    if n_in != n {
                        return Err(Error::config(format!(
                            "layer {i}: dense expects {n_in} inputs, previous layer yields {n}"
                        )));
                    }
                    ActShape::Flat(n_out)
                }
                (LayerSpec::Relu, s) => s,
                (LayerSpec::Flatten, s) => ActShape::Flat(s.size()),
                (l, s) => {
                    return Err(Error::config(format!(
                        "layer {i}: {} cannot follow activation shape {:?}",
                        l.name(),
                        s
                    )))
                }
            };
            shapes.push(next);
        }
        match shapes.last() {
            Some(ActShape::Flat(n)) if *n >= 2 => Ok(shapes),
            other => Err(Error::config(format!(
                "network must end in a flat output with >= 2 classes, got {other:?}"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.trace().map(|_| ())
    }

    pub fn num_classes(&self) -> Result<usize> {
        Ok(self.trace()?.last().unwrap().size())
    }

    pub fn param_layers(&self) -> impl Iterator<Item = (usize, &LayerSpec)> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.has_params())
    }
}
