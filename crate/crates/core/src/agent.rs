//! Actor and value function on task states, trained in imagination.

use candle_core::{Tensor, D};

use crate::discriminator::{Discriminator, PairBatch};
use crate::episode::Action;
use crate::error::{Error, Result};
use crate::nn::{softplus, Bundle, Init, Mlp};
use crate::rng::RandomSource;
use crate::world_model::{ActionSource, BranchState, Imagined, WorldModel};

const MEAN_SCALE: f64 = 5.0;
const INIT_STD: f64 = 5.0;
const MIN_STD: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    Train,
    Eval,
}

/// Tanh-squashed diagonal Gaussian policy over `[-1, 1]^A`.
#[derive(Debug, Clone)]
pub struct Policy {
    bundle: Bundle,
    net: Mlp,
    action_dim: usize,
    noise_std: f64,
}

/// Pre-squash Gaussian parameters, each `[N, A]`.
#[derive(Debug, Clone)]
pub struct ActionDistribution {
    pub mean: Tensor,
    pub std: Tensor,
}

impl ActionDistribution {
    /// Entropy of the pre-squash Gaussian up to a constant, `[N]`.
    pub fn log_std_sum(&self) -> Result<Tensor> {
        Ok(self.std.log()?.sum(D::Minus1)?)
    }
}

impl Policy {
    pub fn new(feature_size: usize, hidden: usize, action_dim: usize, noise_std: f64, init: &mut Init) -> Result<Self> {
        let mut bundle = Bundle::new("policy");
        let net = Mlp::new(
            &mut bundle,
            "mlp",
            &[feature_size, hidden, hidden, 2 * action_dim],
            false,
            init,
        )?;
        Ok(Self {
            bundle,
            net,
            action_dim,
            noise_std,
        })
    }

    pub fn bundle(&self) -> &Bundle {
        &self.bundle
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn distribution(&self, feature: &Tensor) -> Result<ActionDistribution> {
        let raw = self.net.forward(feature)?;
        let a = self.action_dim;
        let mean = ((raw.narrow(1, 0, a)? / MEAN_SCALE)?.tanh()? * MEAN_SCALE)?;
        let raw_init = INIT_STD.exp_m1().ln();
        let std = (softplus(&(raw.narrow(1, a, a)? + raw_init)?)? + MIN_STD)?;
        Ok(ActionDistribution { mean, std })
    }

    /// Reparameterized squashed sample, `[N, A]`, differentiable.
    pub fn sample(&self, feature: &Tensor, rng: &mut RandomSource) -> Result<Tensor> {
        let dist = self.distribution(feature)?;
        let noise = rng.normal_tensor(dist.mean.dims(), dist.mean.dtype(), dist.mean.device())?;
        Ok((&dist.mean + (&dist.std * noise)?)?.tanh()?)
    }

    /// Environment actions for a batch of filtered task states. Train mode
    /// samples then adds Gaussian exploration noise and clips; eval mode
    /// is `tanh(mean)`.
    pub fn act(&self, z_plus: &BranchState, mode: ActMode, rng: &mut RandomSource) -> Result<Vec<Action>> {
        let feature = z_plus.feature()?.detach();
        let squashed = match mode {
            ActMode::Eval => self.distribution(&feature)?.mean.tanh()?,
            ActMode::Train => self.sample(&feature, rng)?,
        };
        let rows: Vec<Vec<f64>> = squashed.to_dtype(candle_core::DType::F64)?.to_vec2()?;
        Ok(rows
            .into_iter()
            .map(|row| match mode {
                ActMode::Eval => Action::clipped(row),
                ActMode::Train => Action::clipped(row.into_iter().map(|v| v + self.noise_std * rng.normal())),
            })
            .collect())
    }
}

impl ActionSource for Policy {
    fn imagine_action(&self, feature: &Tensor, rng: &mut RandomSource) -> Result<Tensor> {
        self.sample(feature, rng)
    }
}

#[derive(Debug, Clone)]
pub struct ValueFunction {
    bundle: Bundle,
    net: Mlp,
}

impl ValueFunction {
    pub fn new(feature_size: usize, hidden: usize, init: &mut Init) -> Result<Self> {
        let mut bundle = Bundle::new("value");
        let net = Mlp::new(&mut bundle, "mlp", &[feature_size, hidden, hidden, 1], false, init)?;
        Ok(Self { bundle, net })
    }

    pub fn bundle(&self) -> &Bundle {
        &self.bundle
    }

    pub fn frozen(&self) -> Self {
        Self {
            bundle: self.bundle.clone(),
            net: self.net.frozen(),
        }
    }

    /// `[N, S + D]` to `[N]`.
    pub fn evaluate(&self, feature: &Tensor) -> Result<Tensor> {
        Ok(self.net.forward(feature)?.squeeze(1)?)
    }
}

/// TD(lambda) returns. `next_values[:, t]` is the value of the state reached
/// after step `t`, so the last column is the bootstrap.
///
/// `R_t = r_t + g * ((1 - l) * v_{t+1} + l * R_{t+1})`, `R_{H-1} = r_{H-1} + g * v_H`.
pub fn lambda_returns(rewards: &Tensor, next_values: &Tensor, discount: f64, lambda: f64) -> Result<Tensor> {
    if rewards.dims() != next_values.dims() || rewards.rank() != 2 || rewards.dim(1)? == 0 {
        return Err(Error::Shape(format!(
            "lambda returns need matching [N, H >= 1] tensors, got {:?} and {:?}",
            rewards.dims(),
            next_values.dims()
        )));
    }
    let h = rewards.dim(1)?;
    let mut columns = Vec::with_capacity(h);
    let mut next_return = next_values.narrow(1, h - 1, 1)?;
    for t in (0..h).rev() {
        let r = rewards.narrow(1, t, 1)?;
        let v = next_values.narrow(1, t, 1)?;
        let mix = ((v * (1.0 - lambda))? + (next_return * lambda)?)?;
        let ret = (r + (mix * discount)?)?;
        columns.push(ret.clone());
        next_return = ret;
    }
    columns.reverse();
    Ok(Tensor::cat(&columns, 1)?)
}

#[derive(Debug, Clone, Copy)]
pub struct ImaginationParams {
    pub horizon: usize,
    pub discount: f64,
    pub lambda: f64,
    pub entropy_weight: f64,
}

#[derive(Debug, Clone)]
pub struct ActorOutcome {
    pub loss: Tensor,
    pub rollout: Imagined,
    /// Detached lambda-return targets, `[N, H]`.
    pub returns: Tensor,
    /// Mean pseudo-reward over the rollout.
    pub mean_reward: f64,
}

/// Imagines from `starts` and returns the negative mean lambda-return. The
/// discriminator and value function enter as fixed functions.
pub fn actor_loss(
    policy: &Policy,
    model: &WorldModel,
    discriminator: &Discriminator,
    value: &ValueFunction,
    starts: &BranchState,
    params: ImaginationParams,
    rng: &mut RandomSource,
) -> Result<ActorOutcome> {
    if params.horizon == 0 {
        return Err(Error::Invalid("imagination horizon must be at least 1".into()));
    }
    let rollout = model.imagine_rollout(&starts.detach(), policy, params.horizon, rng)?;
    let disc = discriminator.frozen();
    let value = value.frozen();
    let mut rewards = Vec::with_capacity(params.horizon);
    let mut next_values = Vec::with_capacity(params.horizon);
    for k in 0..params.horizon {
        let pairs = PairBatch::new(&rollout.states[k], &rollout.actions[k])?;
        rewards.push(disc.pseudo_reward(&pairs)?.unsqueeze(1)?);
        next_values.push(value.evaluate(&rollout.states[k + 1].feature()?)?.unsqueeze(1)?);
    }
    let rewards = Tensor::cat(&rewards, 1)?;
    let returns = lambda_returns(&rewards, &Tensor::cat(&next_values, 1)?, params.discount, params.lambda)?;
    let mut loss = returns.mean_all()?.neg()?;
    if params.entropy_weight > 0.0 {
        let mut entropy = Vec::with_capacity(params.horizon);
        for k in 0..params.horizon {
            let dist = policy.distribution(&rollout.states[k].feature()?)?;
            entropy.push(dist.log_std_sum()?.mean_all()?);
        }
        let entropy = (Tensor::stack(&entropy, 0)?.mean_all()? * params.entropy_weight)?;
        loss = (loss - entropy)?;
    }
    let mean_reward = rewards
        .mean_all()?
        .to_dtype(candle_core::DType::F64)?
        .to_scalar::<f64>()?;
    Ok(ActorOutcome {
        loss,
        returns: returns.detach(),
        rollout,
        mean_reward,
    })
}

/// Mean squared error between `v(z_k)` for `k = 0..H-1` and the targets.
pub fn value_loss(value: &ValueFunction, states: &[BranchState], targets: &Tensor) -> Result<Tensor> {
    let h = targets.dim(1)?;
    if states.len() < h {
        return Err(Error::Shape(format!("{} states for {h} target columns", states.len())));
    }
    let mut preds = Vec::with_capacity(h);
    for state in &states[..h] {
        preds.push(value.evaluate(&state.feature()?.detach())?.unsqueeze(1)?);
    }
    let preds = Tensor::cat(&preds, 1)?;
    Ok((preds - targets.detach())?.sqr()?.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn t2(rows: &[Vec<f64>]) -> Tensor {
        Tensor::new(rows.to_vec(), &Device::Cpu).unwrap()
    }

    fn brute_force(r: &[f64], nv: &[f64], g: f64, l: f64) -> Vec<f64> {
        // expands the recursion into n-step returns weighted by lambda
        let h = r.len();
        (0..h)
            .map(|t| {
                let n_step = |n: usize| {
                    let mut acc = 0.0;
                    for k in 0..n {
                        acc += g.powi(k as i32) * r[t + k];
                    }
                    acc + g.powi(n as i32) * nv[t + n - 1]
                };
                let last = h - t;
                let mut total = 0.0;
                for n in 1..last {
                    total += (1.0 - l) * l.powi(n as i32 - 1) * n_step(n);
                }
                total + l.powi(last as i32 - 1) * n_step(last)
            })
            .collect()
    }

    #[test]
    fn recursion_matches_direct_summation() {
        let mut rng = RandomSource::new(0);
        for &l in &[0.0, 0.3, 0.95, 1.0] {
            let r: Vec<f64> = rng.normals(7);
            let v: Vec<f64> = rng.normals(7);
            let got: Vec<Vec<f64>> =
                lambda_returns(&t2(std::slice::from_ref(&r)), &t2(std::slice::from_ref(&v)), 0.9, l)
                    .unwrap()
                    .to_vec2()
                    .unwrap();
            for (a, b) in got[0].iter().zip(brute_force(&r, &v, 0.9, l)) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn degenerate_lambdas() {
        let r = vec![-0.75; 3];
        let zeros = vec![0.0; 3];
        let got: Vec<Vec<f64>> = lambda_returns(&t2(std::slice::from_ref(&r)), &t2(&[zeros]), 0.99, 1.0)
            .unwrap()
            .to_vec2()
            .unwrap();
        assert!((got[0][0] - (-0.75 * (1.0 + 0.99 + 0.9801))).abs() < 1e-12);
        let v = vec![1.0, 2.0, 3.0];
        let got: Vec<Vec<f64>> = lambda_returns(&t2(std::slice::from_ref(&r)), &t2(std::slice::from_ref(&v)), 0.5, 0.0)
            .unwrap()
            .to_vec2()
            .unwrap();
        for t in 0..3 {
            assert!((got[0][t] - (r[t] + 0.5 * v[t])).abs() < 1e-12);
        }
    }

    fn policy(seed: u64) -> Policy {
        let mut rng = RandomSource::new(seed);
        let mut init = Init {
            rng: &mut rng,
            dtype: DType::F32,
            device: Device::Cpu,
        };
        Policy::new(6, 8, 2, 0.3, &mut init).unwrap()
    }

    #[test]
    fn actions_stay_in_range_and_eval_is_deterministic() {
        let p = policy(1);
        let mut rng = RandomSource::new(2);
        let z = BranchState {
            deter: rng.normal_tensor(&[16, 4], DType::F32, &Device::Cpu).unwrap(),
            stoch: (rng.normal_tensor(&[16, 2], DType::F32, &Device::Cpu).unwrap() * 10.0).unwrap(),
        };
        for a in p.act(&z, ActMode::Train, &mut rng).unwrap() {
            assert!(a.values().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        let e1 = p.act(&z, ActMode::Eval, &mut rng).unwrap();
        let e2 = p.act(&z, ActMode::Eval, &mut rng).unwrap();
        assert_eq!(e1, e2);
    }

    #[test]
    fn value_loss_is_mse() {
        let mut rng = RandomSource::new(3);
        let mut init = Init {
            rng: &mut rng,
            dtype: DType::F64,
            device: Device::Cpu,
        };
        let v = ValueFunction::new(3, 4, &mut init).unwrap();
        let states: Vec<BranchState> = (0..2)
            .map(|_| BranchState {
                deter: rng.normal_tensor(&[5, 2], DType::F64, &Device::Cpu).unwrap(),
                stoch: rng.normal_tensor(&[5, 1], DType::F64, &Device::Cpu).unwrap(),
            })
            .collect();
        let preds: Vec<Tensor> = states
            .iter()
            .map(|s| v.evaluate(&s.feature().unwrap()).unwrap().unsqueeze(1).unwrap())
            .collect();
        let preds = Tensor::cat(&preds, 1).unwrap();
        let zero = value_loss(&v, &states, &preds).unwrap().to_scalar::<f64>().unwrap();
        assert!(zero.abs() < 1e-24);
        let shifted = (&preds + 0.7).unwrap();
        let c2 = value_loss(&v, &states, &shifted).unwrap().to_scalar::<f64>().unwrap();
        assert!((c2 - 0.49).abs() < 1e-12);
    }
}
