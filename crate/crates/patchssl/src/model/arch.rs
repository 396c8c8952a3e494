use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One entry of the discriminator's layer stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DiscLayerSpec {
    Dropout { rate: f64 },
    Conv { out: usize, kernel: usize, stride: usize, pad: usize },
}

/// Discriminator / ConvNet-baseline architecture.
///
/// The stack is `blocks` (convs with leaky ReLU, dropout interleaved),
/// then 1x1 NiN convs, a global average pool, and a dense head with
/// `classes` outputs. The feature-matching tap `h(x)` is the pooled output
/// of the last NiN layer by default; set `feature_after_pool = false` to
/// tap the flattened pre-pool activations instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscArch {
    pub input: usize,
    pub in_ch: usize,
    pub blocks: Vec<DiscLayerSpec>,
    pub nin: Vec<usize>,
    pub classes: usize,
    pub lrelu_slope: f64,
    pub feature_after_pool: bool,
}

impl DiscArch {
    /// The full-scale architecture: three 96-channel convs, three
    /// 192-channel convs, two valid-padding stride-2 convs, two NiN
    /// layers, global pool, dense head. Dropout 0.2 on the input and 0.5
    /// after each strided block. The valid-padding convs fall back to
    /// stride 1 when stride 2 would collapse the map below 1x1.
    pub fn paper(input: usize, classes: usize) -> Result<Self> {
        let mut blocks = vec![
            DiscLayerSpec::Dropout { rate: 0.2 },
            DiscLayerSpec::Conv { out: 96, kernel: 3, stride: 1, pad: 1 },
            DiscLayerSpec::Conv { out: 96, kernel: 3, stride: 1, pad: 1 },
            DiscLayerSpec::Conv { out: 96, kernel: 3, stride: 2, pad: 1 },
            DiscLayerSpec::Dropout { rate: 0.5 },
            DiscLayerSpec::Conv { out: 192, kernel: 3, stride: 1, pad: 1 },
            DiscLayerSpec::Conv { out: 192, kernel: 3, stride: 1, pad: 1 },
            DiscLayerSpec::Conv { out: 192, kernel: 3, stride: 2, pad: 1 },
            DiscLayerSpec::Dropout { rate: 0.5 },
        ];
        let mut size = input;
        for b in &blocks {
            if let DiscLayerSpec::Conv { kernel, stride, pad, .. } = b {
                size = conv_out(size, *kernel, *stride, *pad)?;
            }
        }
        for _ in 0..2 {
            let stride = if conv_out(size, 3, 2, 0).is_ok() { 2 } else { 1 };
            size = conv_out(size, 3, stride, 0)?;
            blocks.push(DiscLayerSpec::Conv { out: 192, kernel: 3, stride, pad: 0 });
        }
        let arch = DiscArch {
            input,
            in_ch: 3,
            blocks,
            nin: vec![192, 192],
            classes,
            lrelu_slope: 0.2,
            feature_after_pool: true,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// A small stack for desk-scale experiments: two strided convs and one
    /// NiN layer around the given channel widths.
    pub fn tiny(input: usize, classes: usize, ch: (usize, usize), dropout: f64) -> Result<Self> {
        let arch = DiscArch {
            input,
            in_ch: 3,
            blocks: vec![
                DiscLayerSpec::Dropout { rate: dropout },
                DiscLayerSpec::Conv { out: ch.0, kernel: 3, stride: 2, pad: 1 },
                DiscLayerSpec::Conv { out: ch.1, kernel: 3, stride: 2, pad: 1 },
            ],
            nin: vec![ch.1],
            classes,
            lrelu_slope: 0.2,
            feature_after_pool: true,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// Spatial size entering the NiN layers.
    pub fn prepool_size(&self) -> Result<usize> {
        let mut size = self.input;
        for b in &self.blocks {
            if let DiscLayerSpec::Conv { kernel, stride, pad, .. } = b {
                size = conv_out(size, *kernel, *stride, *pad)?;
            }
        }
        Ok(size)
    }

    /// Channel count of the feature-matching tap (and the head input).
    pub fn feature_dim(&self) -> usize {
        *self.nin.last().expect("arch has at least one NiN layer")
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "discriminator needs at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.nin.is_empty() {
            return Err(Error::InvalidArgument("arch needs at least one NiN layer".into()));
        }
        let size = self.prepool_size()?;
        if size == 0 {
            return Err(Error::Geometry("conv stack collapses below 1x1".into()));
        }
        Ok(())
    }
}

fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = size + 2 * pad;
    if padded < kernel {
        return Err(Error::Geometry(format!(
            "conv kernel {kernel} does not fit input {size} with pad {pad}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Generator architecture: a dense projection to `s0 x s0 x ch0`, a chain
/// of stride-2 transposed convs with batch norm and ReLU over `hidden`
/// channel widths, and a weight-normalized tanh output layer. Each
/// transposed conv doubles the spatial size, so the output is
/// `s0 * 2^(hidden.len() + 1)` square.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenArch {
    pub latent: usize,
    pub s0: usize,
    pub ch0: usize,
    pub hidden: Vec<usize>,
    pub kernel: usize,
    pub out_ch: usize,
}

impl GenArch {
    /// The full-scale generator, adjusted to emit 32x32: projection to
    /// 4x4x512, stride-2 transposed convs through 256 and 128 channels,
    /// and a 5x5 weight-normalized tanh layer (4 -> 8 -> 16 -> 32).
    pub fn paper(latent: usize) -> Self {
        GenArch {
            latent,
            s0: 4,
            ch0: 512,
            hidden: vec![256, 128],
            kernel: 5,
            out_ch: 3,
        }
    }

    /// Small generator reaching `output` pixels from a 4x4 projection.
    pub fn tiny(latent: usize, output: usize, ch0: usize) -> Result<Self> {
        let mut ups = 0usize;
        let mut size = 4usize;
        while size < output {
            size *= 2;
            ups += 1;
        }
        if size != output || ups == 0 {
            return Err(Error::Geometry(format!(
                "generator output {output} is not 4 * 2^k with k >= 1"
            )));
        }
        let hidden = (1..ups).map(|i| (ch0 >> i).max(4)).collect();
        Ok(GenArch {
            latent,
            s0: 4,
            ch0,
            hidden,
            kernel: 4,
            out_ch: 3,
        })
    }

    pub fn output_size(&self) -> usize {
        self.s0 << (self.hidden.len() + 1)
    }
}
