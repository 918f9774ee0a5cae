use candle_core::{Tensor, D};

use crate::error::Result;
use crate::nn::softplus;

/// Diagonal Gaussian over the last dimension of `mean` / `std`.
#[derive(Debug, Clone)]
pub struct DiagonalGaussian {
    pub mean: Tensor,
    pub std: Tensor,
}

impl DiagonalGaussian {
    /// Splits `[N, 2S]` head output into a mean and a softplus stddev
    /// floored at `min_std`.
    pub fn from_head(raw: &Tensor, min_std: f64) -> Result<Self> {
        let size = raw.dim(D::Minus1)? / 2;
        let mean = raw.narrow(D::Minus1, 0, size)?;
        let std = (softplus(&raw.narrow(D::Minus1, size, size)?)? + min_std)?;
        Ok(Self { mean, std })
    }

    /// Reparameterized draw `mean + std * noise`.
    pub fn sample(&self, noise: &Tensor) -> Result<Tensor> {
        Ok((&self.mean + (&self.std * noise)?)?)
    }

    /// `KL(self || other)` summed over the last dimension.
    pub fn kl(&self, other: &DiagonalGaussian) -> Result<Tensor> {
        let var_ratio = (self.std.sqr()? / other.std.sqr()?)?;
        let mean_term = ((&self.mean - &other.mean)?.sqr()? / other.std.sqr()?)?;
        let log_term = (other.std.log()? - self.std.log()?)?;
        let per_dim = ((log_term + ((var_ratio + mean_term)? * 0.5)?)? - 0.5)?;
        Ok(per_dim.sum(D::Minus1)?)
    }

    pub fn detach(&self) -> Self {
        Self {
            mean: self.mean.detach(),
            std: self.std.detach(),
        }
    }

    /// Concatenates along dimension 0.
    pub fn cat(parts: &[DiagonalGaussian]) -> Result<Self> {
        let means: Vec<&Tensor> = parts.iter().map(|g| &g.mean).collect();
        let stds: Vec<&Tensor> = parts.iter().map(|g| &g.std).collect();
        Ok(Self {
            mean: Tensor::cat(&means, 0)?,
            std: Tensor::cat(&stds, 0)?,
        })
    }
}
