//! Latent-space discriminator over task states and actions.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::nn::{elu, elu_grad, sigmoid, Bundle, Init, Mlp};
use crate::rng::RandomSource;
use crate::world_model::BranchState;

/// Probabilities are kept inside `[EPS, 1 - EPS]` before any log.
pub const PROB_EPS: f64 = 1e-6;

/// Added under the square root of the penalty norm so its gradient stays
/// finite when the input gradient vanishes.
const NORM_EPS: f64 = 1e-12;

/// `(z+, a)` pairs flattened to one input matrix `[N, S + D + A]`.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub inputs: Tensor,
}

impl PairBatch {
    pub fn new(z_plus: &BranchState, actions: &Tensor) -> Result<Self> {
        if actions.rank() != 2 || actions.dim(0)? != z_plus.batch_size() {
            return Err(Error::Shape(format!(
                "{} task states but actions of shape {:?}",
                z_plus.batch_size(),
                actions.dims()
            )));
        }
        Ok(Self {
            inputs: Tensor::cat(&[&z_plus.feature()?, actions], 1)?,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn detach(&self) -> Self {
        Self {
            inputs: self.inputs.detach(),
        }
    }

    pub fn select(&self, rows: &Tensor) -> Result<Self> {
        Ok(Self {
            inputs: self.inputs.index_select(rows, 0)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct DiscriminatorLoss {
    pub total: Tensor,
    pub bce: Tensor,
    pub penalty: Tensor,
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    bundle: Bundle,
    net: Mlp,
    input_size: usize,
}

impl Discriminator {
    /// Two ELU hidden layers of `hidden` units and a zero-initialized
    /// scalar head, so a fresh discriminator outputs exactly 0.5.
    pub fn new(input_size: usize, hidden: usize, init: &mut Init) -> Result<Self> {
        let mut bundle = Bundle::new("discriminator");
        let net = Mlp::new(&mut bundle, "mlp", &[input_size, hidden, hidden, 1], true, init)?;
        Ok(Self {
            bundle,
            net,
            input_size,
        })
    }

    pub fn bundle(&self) -> &Bundle {
        &self.bundle
    }

    /// Copy whose outputs carry no gradient into the discriminator's
    /// parameters. Used when the discriminator acts as a fixed reward.
    pub fn frozen(&self) -> Self {
        Self {
            bundle: self.bundle.clone(),
            net: self.net.frozen(),
            input_size: self.input_size,
        }
    }

    fn check(&self, pairs: &PairBatch) -> Result<()> {
        if pairs.inputs.rank() != 2 || pairs.inputs.dim(1)? != self.input_size {
            return Err(Error::Shape(format!(
                "discriminator expects [N, {}] inputs, got {:?}",
                self.input_size,
                pairs.inputs.dims()
            )));
        }
        Ok(())
    }

    /// Pre-sigmoid output, `[N]`.
    pub fn logit(&self, pairs: &PairBatch) -> Result<Tensor> {
        self.check(pairs)?;
        Ok(self.net.forward(&pairs.inputs)?.squeeze(1)?)
    }

    /// Unclamped probability that each pair is expert, `[N]`.
    pub fn probability(&self, pairs: &PairBatch) -> Result<Tensor> {
        sigmoid(&self.logit(pairs)?)
    }

    /// Probability clamped to `[1e-6, 1 - 1e-6]`, `[N]`.
    pub fn classify(&self, pairs: &PairBatch) -> Result<Tensor> {
        Ok(self.probability(pairs)?.clamp(PROB_EPS, 1.0 - PROB_EPS)?)
    }

    /// `log D(z+, a)`, `[N]`, always `<= 0`.
    pub fn pseudo_reward(&self, pairs: &PairBatch) -> Result<Tensor> {
        Ok(self.classify(pairs)?.log()?)
    }

    /// Gradient of the sigmoid output with respect to the input, built from
    /// forward ops so it can itself be differentiated. `[N, input]`.
    pub fn input_gradient(&self, inputs: &Tensor) -> Result<Tensor> {
        let layers = self.net.layers();
        let mut pre = Vec::with_capacity(layers.len());
        let mut h = inputs.clone();
        for (i, layer) in layers.iter().enumerate() {
            let z = layer.forward(&h)?;
            if i + 1 < layers.len() {
                h = elu(&z)?;
            }
            pre.push(z);
        }
        let logit = pre.last().expect("at least one layer");
        let p = sigmoid(logit)?;
        // d sigmoid / d logit, [N, 1]
        let mut g = (&p * p.affine(-1.0, 1.0)?)?;
        for i in (0..layers.len()).rev() {
            g = g.matmul(&layers[i].weight().t()?)?;
            if i > 0 {
                g = (g * elu_grad(&pre[i - 1])?)?;
            }
        }
        Ok(g)
    }

    /// `mean((|grad_x D(x)| - 1)^2)` at random interpolates of the two sets.
    pub fn gradient_penalty(&self, expert: &PairBatch, agent: &PairBatch, rng: &mut RandomSource) -> Result<Tensor> {
        self.check(expert)?;
        self.check(agent)?;
        if expert.len() != agent.len() {
            return Err(Error::Shape(format!(
                "penalty needs equal-sized sets, got {} expert and {} agent pairs",
                expert.len(),
                agent.len()
            )));
        }
        let n = expert.len();
        let u = rng.uniform_tensor(&[n, 1], 0.0, 1.0, expert.inputs.dtype(), expert.inputs.device())?;
        let mixed = (u.broadcast_mul(&expert.inputs.detach())?
            + u.affine(-1.0, 1.0)?.broadcast_mul(&agent.inputs.detach())?)?;
        self.penalty_at(&mixed)
    }

    /// Penalty evaluated at fixed inputs.
    pub fn penalty_at(&self, inputs: &Tensor) -> Result<Tensor> {
        penalty_from_gradient(&self.input_gradient(inputs)?)
    }

    /// Mean binary cross-entropy with expert labelled 1 and agent 0, plus
    /// `gp_weight` times the gradient penalty.
    pub fn loss(
        &self,
        expert: &PairBatch,
        agent: &PairBatch,
        gp_weight: f64,
        rng: &mut RandomSource,
    ) -> Result<DiscriminatorLoss> {
        if expert.is_empty() || agent.is_empty() {
            return Err(Error::Invalid("discriminator loss needs expert and agent pairs".into()));
        }
        let bce = self.bce(expert, agent)?;
        let penalty = if gp_weight > 0.0 {
            self.gradient_penalty(expert, agent, rng)?
        } else {
            bce.zeros_like()?
        };
        Ok(DiscriminatorLoss {
            total: (&bce + (&penalty * gp_weight)?)?,
            bce,
            penalty,
        })
    }

    pub fn bce(&self, expert: &PairBatch, agent: &PairBatch) -> Result<Tensor> {
        let on_expert = self.classify(expert)?.log()?.mean_all()?;
        let on_agent = self.classify(agent)?.affine(-1.0, 1.0)?.log()?.mean_all()?;
        Ok((on_expert + on_agent)?.neg()?)
    }
}

/// `mean((|g| - 1)^2)` over the rows of `g`.
pub fn penalty_from_gradient(g: &Tensor) -> Result<Tensor> {
    let norm = (g.sqr()?.sum(D::Minus1)? + NORM_EPS)?.sqrt()?;
    Ok((norm - 1.0)?.sqr()?.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn disc(seed: u64, width: usize, dtype: DType) -> Discriminator {
        let mut rng = RandomSource::new(seed);
        let mut init = Init {
            rng: &mut rng,
            dtype,
            device: Device::Cpu,
        };
        Discriminator::new(width, 16, &mut init).unwrap()
    }

    fn randomize_head(d: &Discriminator, rng: &mut RandomSource) {
        for (name, var) in d.bundle().named() {
            if name.contains("mlp.2") {
                var.set(&rng.normal_tensor(var.dims(), var.dtype(), var.device()).unwrap())
                    .unwrap();
            }
        }
    }

    fn pairs(n: usize, width: usize, rng: &mut RandomSource) -> PairBatch {
        PairBatch {
            inputs: rng.normal_tensor(&[n, width], DType::F64, &Device::Cpu).unwrap(),
        }
    }

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn fresh_discriminator_is_balanced() {
        let d = disc(0, 5, DType::F64);
        let mut rng = RandomSource::new(1);
        let (e, a) = (pairs(4, 5, &mut rng), pairs(4, 5, &mut rng));
        let p: Vec<f64> = d.classify(&e).unwrap().to_vec1().unwrap();
        assert!(p.iter().all(|&v| v == 0.5));
        let loss = d.loss(&e, &a, 1.0, &mut rng).unwrap();
        assert!((scalar(&loss.bce) - 2.0 * 2f64.ln()).abs() < 1e-12);
        // constant function: gradient norm 0, penalty (0 - 1)^2
        assert!((scalar(&loss.penalty) - 1.0).abs() < 1e-5);
        let r: Vec<f64> = d.pseudo_reward(&e).unwrap().to_vec1().unwrap();
        assert!((r[0] - 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let d = disc(3, 4, DType::F64);
        let mut rng = RandomSource::new(4);
        randomize_head(&d, &mut rng);
        let x = rng.normal_tensor(&[3, 4], DType::F64, &Device::Cpu).unwrap();
        let g: Vec<Vec<f64>> = d.input_gradient(&x).unwrap().to_vec2().unwrap();
        let base: Vec<Vec<f64>> = x.to_vec2().unwrap();
        let eps = 1e-6;
        for (r, row) in base.iter().enumerate() {
            for c in 0..row.len() {
                let eval = |delta: f64| {
                    let mut m = base.clone();
                    m[r][c] += delta;
                    let t = Tensor::new(m, &Device::Cpu).unwrap();
                    d.probability(&PairBatch { inputs: t })
                        .unwrap()
                        .to_vec1::<f64>()
                        .unwrap()[r]
                };
                let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
                assert!((fd - g[r][c]).abs() < 1e-8, "{fd} vs {}", g[r][c]);
            }
        }
    }

    #[test]
    fn unit_gradients_have_zero_penalty() {
        let mut rng = RandomSource::new(2);
        let g = rng.normal_tensor(&[5, 3], DType::F64, &Device::Cpu).unwrap();
        let unit = g
            .broadcast_div(&g.sqr().unwrap().sum_keepdim(1).unwrap().sqrt().unwrap())
            .unwrap();
        assert!(scalar(&penalty_from_gradient(&unit).unwrap()) < 1e-20);
        let zero = unit.zeros_like().unwrap();
        assert!((scalar(&penalty_from_gradient(&zero).unwrap()) - 1.0).abs() < 1e-5);
    }

    #[test]
    fn penalty_nonnegative_and_sizes_checked() {
        let d = disc(5, 3, DType::F64);
        let mut rng = RandomSource::new(6);
        randomize_head(&d, &mut rng);
        for _ in 0..10 {
            let (e, a) = (pairs(6, 3, &mut rng), pairs(6, 3, &mut rng));
            assert!(scalar(&d.gradient_penalty(&e, &a, &mut rng).unwrap()) >= 0.0);
        }
        let (e, a) = (pairs(6, 3, &mut rng), pairs(5, 3, &mut rng));
        assert!(d.gradient_penalty(&e, &a, &mut rng).is_err());
        assert!(d.loss(&pairs(0, 3, &mut rng), &a, 1.0, &mut rng).is_err());
    }

    #[test]
    fn frozen_copy_blocks_gradients() {
        let d = disc(7, 3, DType::F64);
        let mut rng = RandomSource::new(8);
        randomize_head(&d, &mut rng);
        let e = pairs(4, 3, &mut rng);
        let loss = d.frozen().classify(&e).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        assert!(d.bundle().vars().iter().all(|v| grads.get(v.as_tensor()).is_none()));
    }
}
