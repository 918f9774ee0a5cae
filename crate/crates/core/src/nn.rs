//! Minimal layer toolkit over candle tensors.
//!
//! Every trainable tensor lives in exactly one named [`Bundle`]. Layers keep
//! plain tensor handles to their variables so that a [`Linear::frozen`] copy
//! can be evaluated without routing gradients back into the bundle.

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};

use crate::error::{Error, Result};
use crate::rng::RandomSource;

/// A named, disjoint group of trainable variables.
#[derive(Debug, Clone)]
pub struct Bundle {
    name: String,
    params: Vec<(String, Var)>,
}

impl Bundle {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            params: Vec::new(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    fn add(&mut self, local: &str, value: Tensor) -> Result<Tensor> {
        let var = Var::from_tensor(&value)?;
        let handle = var.as_tensor().clone();
        self.params.push((format!("{}/{}", self.name, local), var));
        Ok(handle)
    }

    pub fn named(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn vars(&self) -> Vec<Var> {
        self.params.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|(_, v)| v.elem_count()).sum()
    }
}

/// Parameter initializer. Draws come from the crate's seeded source.
pub struct Init<'a> {
    pub rng: &'a mut RandomSource,
    pub dtype: DType,
    pub device: Device,
}

impl Init<'_> {
    fn glorot(&mut self, shape: &[usize], fan_in: usize, fan_out: usize) -> Result<Tensor> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.rng.uniform_tensor(shape, -limit, limit, self.dtype, &self.device)
    }

    fn zeros(&self, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::zeros(shape, self.dtype, &self.device)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(bundle: &mut Bundle, name: &str, inputs: usize, outputs: usize, init: &mut Init) -> Result<Self> {
        let w = init.glorot(&[inputs, outputs], inputs, outputs)?;
        Self::from_parts(bundle, name, w, init.zeros(&[outputs])?)
    }

    /// All-zero weights and bias.
    pub fn zeroed(bundle: &mut Bundle, name: &str, inputs: usize, outputs: usize, init: &mut Init) -> Result<Self> {
        Self::from_parts(bundle, name, init.zeros(&[inputs, outputs])?, init.zeros(&[outputs])?)
    }

    fn from_parts(bundle: &mut Bundle, name: &str, w: Tensor, b: Tensor) -> Result<Self> {
        Ok(Self {
            weight: bundle.add(&format!("{name}.weight"), w)?,
            bias: bundle.add(&format!("{name}.bias"), b)?,
        })
    }

    /// `[N, in] -> [N, out]`
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight)?.broadcast_add(&self.bias)?)
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn frozen(&self) -> Self {
        Self {
            weight: self.weight.detach(),
            bias: self.bias.detach(),
        }
    }
}

/// Dense stack with ELU between layers and a linear head.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    /// `widths` lists every layer size from input to output. With
    /// `zero_head`, the final layer starts at exactly zero.
    pub fn new(bundle: &mut Bundle, name: &str, widths: &[usize], zero_head: bool, init: &mut Init) -> Result<Self> {
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let lname = format!("{name}.{i}");
                if zero_head && i + 1 == n {
                    Linear::zeroed(bundle, &lname, widths[i], widths[i + 1], init)
                } else {
                    Linear::new(bundle, &lname, widths[i], widths[i + 1], init)
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = elu(&h)?;
            }
        }
        Ok(h)
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn frozen(&self) -> Self {
        Self {
            layers: self.layers.iter().map(Linear::frozen).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        bundle: &mut Bundle,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        init: &mut Init,
    ) -> Result<Self> {
        let rf = kernel * kernel;
        let w = init.glorot(&[out_ch, in_ch, kernel, kernel], in_ch * rf, out_ch * rf)?;
        Ok(Self {
            weight: bundle.add(&format!("{name}.weight"), w)?,
            bias: bundle.add(&format!("{name}.bias"), init.zeros(&[out_ch])?)?,
            stride,
            padding,
        })
    }

    /// `[N, C, H, W] -> [N, C', H', W']`
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        let c = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        bundle: &mut Bundle,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        init: &mut Init,
    ) -> Result<Self> {
        let rf = kernel * kernel;
        let w = init.glorot(&[in_ch, out_ch, kernel, kernel], in_ch * rf, out_ch * rf)?;
        Ok(Self {
            weight: bundle.add(&format!("{name}.weight"), w)?,
            bias: bundle.add(&format!("{name}.bias"), init.zeros(&[out_ch])?)?,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv_transpose2d(&self.weight, self.padding, 0, self.stride, 1)?;
        let c = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// Dreamer-style GRU cell: one fused projection of `[x, h]` into reset,
/// candidate and update parts, with the update gate biased toward keeping `h`.
#[derive(Debug, Clone)]
pub struct GruCell {
    proj: Linear,
    hidden: usize,
}

impl GruCell {
    pub fn new(bundle: &mut Bundle, name: &str, inputs: usize, hidden: usize, init: &mut Init) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(bundle, name, inputs + hidden, 3 * hidden, init)?,
            hidden,
        })
    }

    pub fn forward(&self, x: &Tensor, h: &Tensor) -> Result<Tensor> {
        let parts = self.proj.forward(&Tensor::cat(&[x, h], 1)?)?;
        let n = self.hidden;
        let reset = sigmoid(&parts.narrow(1, 0, n)?)?;
        let cand = (reset * parts.narrow(1, n, n)?)?.tanh()?;
        let update = sigmoid(&(parts.narrow(1, 2 * n, n)? - 1.0)?)?;
        let keep = update.affine(-1.0, 1.0)?;
        Ok(((update * cand)? + (keep * h)?)?)
    }
}

/// `x` for `x > 0`, `exp(x) - 1` otherwise; the derivative at 0 is 1.
pub fn elu(x: &Tensor) -> Result<Tensor> {
    Ok(x.elu(1.0)?)
}

/// Derivative of [`elu`], written with differentiable primitives so it can
/// itself be differentiated.
pub fn elu_grad(x: &Tensor) -> Result<Tensor> {
    Ok(x.minimum(0.0)?.exp()?)
}

/// Overflow-free `ln(1 + exp(x))`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    Ok((x.relu()? + (x.abs()?.neg()?.exp()? + 1.0)?.log()?)?)
}

/// Logistic function through `tanh`, which stays finite for any input.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? + 1.0)?.affine(0.5, 0.0)?)
}

/// Global L2 norm over the gradients of `vars` present in `grads`.
pub fn grad_norm(grads: &candle_core::backprop::GradStore, vars: &[Var]) -> Result<f64> {
    let mut total = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            total += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
        }
    }
    Ok(total.sqrt())
}

/// Rescales the gradients of `vars` so their global norm is at most
/// `max_norm`. Returns `(norm before, norm after)`.
pub fn clip_grad_norm(grads: &mut candle_core::backprop::GradStore, vars: &[Var], max_norm: f64) -> Result<(f64, f64)> {
    let before = grad_norm(grads, vars)?;
    if !before.is_finite() {
        return Err(Error::Invalid(format!("gradient norm is {before}")));
    }
    if before <= max_norm {
        return Ok((before, before));
    }
    let scale = max_norm / before;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            let scaled = g.affine(scale, 0.0)?;
            grads.insert(v.as_tensor(), scaled);
        }
    }
    Ok((before, grad_norm(grads, vars)?))
}

/// Adam over one parameter group with global-norm clipping.
pub struct ClippedAdam {
    vars: Vec<Var>,
    adam: AdamW,
    max_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub norm_before: f64,
    pub norm_after: f64,
}

impl ClippedAdam {
    pub fn new(vars: Vec<Var>, lr: f64, max_norm: f64) -> Result<Self> {
        let params = ParamsAdamW {
            lr,
            weight_decay: 0.0,
            ..ParamsAdamW::default()
        };
        Ok(Self {
            adam: AdamW::new(vars.clone(), params)?,
            vars,
            max_norm,
        })
    }

    /// Backpropagates `loss` and applies one clipped update to this group
    /// only. Gradients reaching variables outside the group are discarded.
    pub fn backward_step(&mut self, loss: &Tensor) -> Result<StepStats> {
        let mut grads = loss.backward()?;
        let (norm_before, norm_after) = clip_grad_norm(&mut grads, &self.vars, self.max_norm)?;
        self.adam.step(&grads)?;
        Ok(StepStats {
            norm_before,
            norm_after,
        })
    }
}

/// Sum over the last dimension.
pub fn sum_last(x: &Tensor) -> Result<Tensor> {
    Ok(x.sum(D::Minus1)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_slice(v, v.len(), &Device::Cpu).unwrap()
    }

    fn vals(x: &Tensor) -> Vec<f64> {
        x.to_vec1::<f64>().unwrap()
    }

    #[test]
    fn activations_match_scalar_definitions() {
        let xs = [-30.0, -2.0, -0.5, 0.0, 0.7, 3.0, 40.0];
        let x = t(&xs);
        for ((e, s), (sp, x)) in vals(&elu(&x).unwrap())
            .iter()
            .zip(vals(&sigmoid(&x).unwrap()))
            .zip(vals(&softplus(&x).unwrap()).iter().zip(xs))
        {
            let e_ref = if x > 0.0 { x } else { x.exp() - 1.0 };
            let s_ref = 1.0 / (1.0 + (-x).exp());
            let sp_ref = if x > 30.0 { x } else { (1.0 + x.exp()).ln() };
            assert!((e - e_ref).abs() < 1e-12, "elu({x})");
            assert!((s - s_ref).abs() < 1e-12, "sigmoid({x})");
            assert!((sp - sp_ref).abs() < 1e-12, "softplus({x})");
        }
    }

    #[test]
    fn elu_grad_matches_autodiff() {
        let x = Var::from_tensor(&t(&[-1.5, -0.2, 0.3, 2.0])).unwrap();
        let grads = elu(x.as_tensor()).unwrap().sum_all().unwrap().backward().unwrap();
        let auto = vals(grads.get(x.as_tensor()).unwrap());
        let manual = vals(&elu_grad(x.as_tensor()).unwrap());
        for (a, m) in auto.iter().zip(manual) {
            assert!((a - m).abs() < 1e-12);
        }
    }

    #[test]
    fn smooth_activations_have_exact_derivatives_at_zero() {
        let x = Var::from_tensor(&t(&[0.0])).unwrap();
        let g = elu(x.as_tensor()).unwrap().sum_all().unwrap().backward().unwrap();
        assert_eq!(vals(g.get(x.as_tensor()).unwrap()), vec![1.0]);
        let g = softplus(x.as_tensor()).unwrap().sum_all().unwrap().backward().unwrap();
        assert_eq!(vals(g.get(x.as_tensor()).unwrap()), vec![0.5]);
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        let a = Var::from_tensor(&t(&[1.0, 2.0])).unwrap();
        let b = Var::from_tensor(&t(&[3.0])).unwrap();
        let loss = ((a.as_tensor().sum_all().unwrap() * 300.0).unwrap()
            + (b.as_tensor().sum_all().unwrap() * 400.0).unwrap())
        .unwrap();
        let mut grads = loss.backward().unwrap();
        let (before, after) = clip_grad_norm(&mut grads, &[a.clone(), b.clone()], 100.0).unwrap();
        assert!((before - (2.0f64 * 300.0 * 300.0 + 400.0 * 400.0).sqrt()).abs() < 1e-9);
        assert!(after <= 100.0 + 1e-9);
    }

    #[test]
    fn frozen_linear_blocks_gradients() {
        let mut rng = RandomSource::new(0);
        let mut init = Init {
            rng: &mut rng,
            dtype: DType::F64,
            device: Device::Cpu,
        };
        let mut bundle = Bundle::new("b");
        let lin = Linear::new(&mut bundle, "l", 3, 2, &mut init).unwrap();
        let x = Var::from_tensor(&Tensor::ones((4, 3), DType::F64, &Device::Cpu).unwrap()).unwrap();
        let y = lin.frozen().forward(x.as_tensor()).unwrap().sum_all().unwrap();
        let grads = y.backward().unwrap();
        assert!(grads.get(x.as_tensor()).is_some());
        for v in bundle.vars() {
            assert!(grads.get(v.as_tensor()).is_none());
        }
    }
}
