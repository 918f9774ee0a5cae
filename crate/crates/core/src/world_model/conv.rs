use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{elu, Bundle, Conv2d, ConvTranspose2d, Init, Linear};

/// Number of stride-2 stages taking `image_size` down to 2x2.
pub fn conv_stages(image_size: usize) -> usize {
    (image_size.trailing_zeros() as usize).saturating_sub(1).max(1)
}

fn top_channels(depth: usize, stages: usize) -> usize {
    depth << (stages - 1)
}

/// Strided 4x4 convolutions with ELU, flattened at 2x2.
#[derive(Debug, Clone)]
pub struct ConvEncoder {
    layers: Vec<Conv2d>,
    image_size: usize,
    embed_size: usize,
}

impl ConvEncoder {
    pub fn new(bundle: &mut Bundle, image_size: usize, depth: usize, init: &mut Init) -> Result<Self> {
        let stages = conv_stages(image_size);
        let mut layers = Vec::with_capacity(stages);
        let mut in_ch = 3;
        for i in 0..stages {
            let out_ch = depth << i;
            layers.push(Conv2d::new(bundle, &format!("conv{i}"), in_ch, out_ch, 4, 2, 1, init)?);
            in_ch = out_ch;
        }
        let side = image_size >> stages;
        Ok(Self {
            layers,
            image_size,
            embed_size: in_ch * side * side,
        })
    }

    pub fn embed_size(&self) -> usize {
        self.embed_size
    }

    /// `[N, 3, H, W]` in `[0, 1]` to `[N, embed]`. Pixels are centered to
    /// `[-0.5, 0.5]` first.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let dims = images.dims();
        if dims.len() != 4 || dims[1] != 3 || dims[2] != self.image_size || dims[3] != self.image_size {
            return Err(Error::Shape(format!(
                "encoder expects [N, 3, {0}, {0}], got {dims:?}",
                self.image_size
            )));
        }
        let mut h = (images - 0.5)?;
        for layer in &self.layers {
            h = elu(&layer.forward(&h)?)?;
        }
        Ok(h.flatten_from(1)?)
    }
}

/// Dense projection to 2x2 followed by mirrored transposed convolutions.
#[derive(Debug, Clone)]
pub struct ConvDecoder {
    input: Linear,
    layers: Vec<ConvTranspose2d>,
    top: usize,
}

impl ConvDecoder {
    pub fn new(
        bundle: &mut Bundle,
        feature_size: usize,
        image_size: usize,
        depth: usize,
        out_channels: usize,
        init: &mut Init,
    ) -> Result<Self> {
        let stages = conv_stages(image_size);
        let top = top_channels(depth, stages);
        let input = Linear::new(bundle, "input", feature_size, top * 4, init)?;
        let mut layers = Vec::with_capacity(stages);
        let mut in_ch = top;
        for i in 0..stages {
            let out_ch = if i + 1 == stages { out_channels } else { in_ch / 2 };
            layers.push(ConvTranspose2d::new(
                bundle,
                &format!("deconv{i}"),
                in_ch,
                out_ch,
                4,
                2,
                1,
                init,
            )?);
            in_ch = out_ch;
        }
        Ok(Self { input, layers, top })
    }

    /// `[N, feature] -> [N, out_channels, H, W]`, linear output.
    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        let n = features.dim(0)?;
        let mut h = self.input.forward(features)?.reshape((n, self.top, 2, 2))?;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = elu(&h)?;
            }
        }
        Ok(h)
    }
}
