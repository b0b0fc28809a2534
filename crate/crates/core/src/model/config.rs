use std::fmt;

use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Transformer,
    Conformer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Discrete,
    Continuous,
}

/// One stage of the waveform convolution stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "layer", rename_all = "snake_case")]
pub enum ConvLayer {
    /// 1D convolution applied to each component with shared filters.
    PerComponent {
        filters: usize,
        kernel: usize,
        stride: usize,
    },
    /// 2D convolution over (time, component) taking the per-component
    /// filters as input channels; the result is flattened to 1D.
    Conv2d {
        filters: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
    },
    Conv1d {
        filters: usize,
        kernel: usize,
        stride: usize,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
}

impl fmt::Display for ConvLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ConvLayer::PerComponent {
                filters,
                kernel,
                stride,
            } => write!(f, "per-component conv1d {filters} filters k{kernel} s{stride}"),
            ConvLayer::Conv2d {
                filters,
                kernel,
                stride,
            } => write!(
                f,
                "conv2d {filters} filters {}x{} s{}x{}",
                kernel.0, kernel.1, stride.0, stride.1
            ),
            ConvLayer::Conv1d {
                filters,
                kernel,
                stride,
            } => write!(f, "conv1d {filters} filters k{kernel} s{stride}"),
            ConvLayer::MaxPool { kernel, stride } => write!(f, "max-pool k{kernel} s{stride}"),
        }
    }
}

/// Activation shape after a layer: `channels x length`, plus the component
/// axis while it still exists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageShape {
    pub layer: String,
    pub channels: usize,
    pub length: usize,
    pub width: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStackSpec {
    pub layers: Vec<ConvLayer>,
}

fn out_len(len: usize, kernel: usize, stride: usize) -> Option<usize> {
    (len >= kernel && kernel > 0 && stride > 0).then(|| (len - kernel) / stride + 1)
}

impl ConvStackSpec {
    /// The published configuration, valid only for long traces (at least
    /// 3780 samples).
    pub fn table_one() -> Self {
        use ConvLayer::*;
        Self {
            layers: vec![
                PerComponent {
                    filters: 8,
                    kernel: 5,
                    stride: 5,
                },
                Conv2d {
                    filters: 32,
                    kernel: (16, 3),
                    stride: (1, 3),
                },
                Conv1d {
                    filters: 64,
                    kernel: 16,
                    stride: 5,
                },
                MaxPool { kernel: 2, stride: 2 },
                Conv1d {
                    filters: 128,
                    kernel: 16,
                    stride: 1,
                },
                MaxPool { kernel: 2, stride: 2 },
                Conv1d {
                    filters: 32,
                    kernel: 8,
                    stride: 1,
                },
                MaxPool { kernel: 2, stride: 2 },
                Conv1d {
                    filters: 32,
                    kernel: 8,
                    stride: 1,
                },
                Conv1d {
                    filters: 16,
                    kernel: 4,
                    stride: 1,
                },
            ],
        }
    }

    /// Same layer sequence with smaller kernels and widths; valid from 500
    /// samples upward and cheap enough for single-core training.
    pub fn compact() -> Self {
        use ConvLayer::*;
        Self {
            layers: vec![
                PerComponent {
                    filters: 4,
                    kernel: 5,
                    stride: 5,
                },
                Conv2d {
                    filters: 8,
                    kernel: (4, 3),
                    stride: (1, 3),
                },
                Conv1d {
                    filters: 16,
                    kernel: 4,
                    stride: 2,
                },
                MaxPool { kernel: 2, stride: 2 },
                Conv1d {
                    filters: 16,
                    kernel: 4,
                    stride: 1,
                },
                MaxPool { kernel: 2, stride: 2 },
                Conv1d {
                    filters: 16,
                    kernel: 3,
                    stride: 1,
                },
                MaxPool { kernel: 2, stride: 2 },
                Conv1d {
                    filters: 16,
                    kernel: 2,
                    stride: 1,
                },
                Conv1d {
                    filters: 8,
                    kernel: 2,
                    stride: 1,
                },
            ],
        }
    }

    /// Shape after every layer for a `3 x t` input, or the first layer whose
    /// input is too short for its kernel.
    pub fn trace(&self, t: usize) -> Result<Vec<StageShape>, ModelError> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        let (mut channels, mut length, mut width) = (1usize, t, Some(3usize));
        for (i, layer) in self.layers.iter().enumerate() {
            let fail = |detail: String| ModelError::StackTooShort {
                index: i + 1,
                layer: layer.to_string(),
                detail,
            };
            match (*layer, i, width) {
                (
                    ConvLayer::PerComponent {
                        filters,
                        kernel,
                        stride,
                    },
                    0,
                    _,
                ) => {
                    length = out_len(length, kernel, stride)
                        .ok_or_else(|| fail(format!("input length {length} < kernel {kernel}")))?;
                    channels = filters;
                }
                (
                    ConvLayer::Conv2d {
                        filters,
                        kernel,
                        stride,
                    },
                    1,
                    Some(w),
                ) => {
                    length = out_len(length, kernel.0, stride.0)
                        .ok_or_else(|| fail(format!("input length {length} < kernel {}", kernel.0)))?;
                    let w2 = out_len(w, kernel.1, stride.1)
                        .ok_or_else(|| fail(format!("component axis {w} < kernel {}", kernel.1)))?;
                    channels = filters * w2;
                    width = None;
                }
                (
                    ConvLayer::Conv1d {
                        filters,
                        kernel,
                        stride,
                    },
                    _,
                    None,
                ) => {
                    length = out_len(length, kernel, stride)
                        .ok_or_else(|| fail(format!("input length {length} < kernel {kernel}")))?;
                    channels = filters;
                }
                (ConvLayer::MaxPool { kernel, stride }, _, None) => {
                    length = out_len(length, kernel, stride)
                        .ok_or_else(|| fail(format!("input length {length} < kernel {kernel}")))?;
                }
                _ => {
                    return Err(ModelError::Config(format!(
                        "layer {} ({layer}) is out of place: the stack must start with a \
                         per-component conv followed by a conv2d",
                        i + 1
                    )))
                }
            }
            shapes.push(StageShape {
                layer: layer.to_string(),
                channels,
                length,
                width,
            });
        }
        if width.is_some() {
            return Err(ModelError::Config(
                "conv stack must contain the per-component conv and the conv2d".into(),
            ));
        }
        Ok(shapes)
    }

    /// Element count handed to the projection onto `d_model`.
    pub fn flat_len(&self, t: usize) -> Result<usize, ModelError> {
        let shapes = self.trace(t)?;
        let last = shapes.last().expect("non-empty stack");
        Ok(last.channels * last.length)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub n_blocks: usize,
    pub n_stations: usize,
    pub window_samples: usize,
    pub n_levels: usize,
    pub n_mixtures: usize,
    pub block_kind: BlockKind,
    pub head_kind: HeadKind,
    pub conv_stack: ConvStackSpec,
    /// Waveforms enter the conv stack as `sign(x) * ln(1 + |x| / amplitude_floor)`, %g.
    pub amplitude_floor: f32,
    /// Wavelength range in degrees for the longitude and latitude encodings.
    pub angle_wavelengths: (f64, f64),
    /// Wavelength range in meters for the height encoding.
    pub height_wavelengths: (f64, f64),
}

impl ModelConfig {
    /// Desk-scale profile used for smoke training.
    pub fn test_profile(n_stations: usize, n_levels: usize, head_kind: HeadKind) -> Self {
        Self {
            d_model: 128,
            n_heads: 8,
            ffn_hidden: 256,
            n_blocks: 2,
            n_stations,
            window_samples: 3000,
            n_levels,
            n_mixtures: 3,
            block_kind: BlockKind::Transformer,
            head_kind,
            conv_stack: ConvStackSpec::compact(),
            amplitude_floor: 0.01,
            angle_wavelengths: (0.01, 10.0),
            height_wavelengths: (1.0, 1000.0),
        }
    }

    /// Published layer sizes; the published conv stack needs 120 s traces.
    pub fn full_profile(n_stations: usize, n_levels: usize, head_kind: HeadKind) -> Self {
        Self {
            d_model: 500,
            n_heads: 10,
            ffn_hidden: 1000,
            n_blocks: 6,
            window_samples: 12000,
            n_mixtures: 5,
            conv_stack: ConvStackSpec::table_one(),
            ..Self::test_profile(n_stations, n_levels, head_kind)
        }
    }

    /// Smallest useful model, for gradient checks.
    pub fn tiny(n_stations: usize, n_levels: usize, head_kind: HeadKind) -> Self {
        Self {
            d_model: 32,
            n_heads: 4,
            ffn_hidden: 64,
            n_blocks: 1,
            window_samples: 500,
            ..Self::test_profile(n_stations, n_levels, head_kind)
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.d_model < 6 || !self.d_model.is_multiple_of(2) {
            return bad(format!(
                "d_model {} must be even and at least 6 for the positional encoding",
                self.d_model
            ));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_blocks == 0 {
            return bad("n_blocks must be at least 1".into());
        }
        if self.ffn_hidden == 0 || self.n_stations == 0 {
            return bad("ffn_hidden and n_stations must be positive".into());
        }
        if self.n_levels == 0 || self.n_mixtures == 0 {
            return bad("n_levels and n_mixtures must be at least 1".into());
        }
        if !(self.amplitude_floor.is_finite() && self.amplitude_floor > 0.0) {
            return bad("amplitude_floor must be positive".into());
        }
        for (lo, hi) in [self.angle_wavelengths, self.height_wavelengths] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return bad(format!("wavelength range ({lo}, {hi}) is invalid"));
            }
        }
        self.conv_stack.flat_len(self.window_samples)?;
        Ok(())
    }
}
