//! Separated latent dynamics models.
//!
//! The world model is two recurrent state-space branches that never exchange
//! activations: a task branch whose transitions read the action and a
//! background branch whose transitions do not. Each branch has its own
//! encoder, dynamics, posterior and decoder. A small convolution fuses the two
//! decoder masks into the final compositing mask, and a separate
//! background-only (BoR) decoder reconstructs the whole frame from the
//! background state alone.

mod conv;
mod gaussian;

use candle_core::{DType, Device, IndexOp, Tensor, Var};

pub use conv::{conv_stages, ConvDecoder, ConvEncoder};
pub use gaussian::DiagonalGaussian;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::nn::{elu, sigmoid, Bundle, Conv2d, GruCell, Init, Linear, Mlp};
use crate::rng::RandomSource;

/// Names of the ten world-model parameter bundles, in checkpoint order.
pub const BUNDLE_NAMES: [&str; 10] = [
    "task_encoder",
    "background_encoder",
    "task_dynamics",
    "background_dynamics",
    "task_posterior",
    "background_posterior",
    "task_decoder",
    "background_decoder",
    "mask_fusion",
    "bor_decoder",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ModelDims {
    pub image_size: usize,
    pub cnn_depth: usize,
    pub deter: usize,
    pub stoch: usize,
    pub hidden: usize,
    pub action_dim: usize,
    pub min_std: f64,
    /// Ablation: the background dynamics also read the action.
    pub no_act: bool,
    /// Baseline: the task branch alone reconstructs the frame.
    pub single_branch: bool,
}

impl ModelDims {
    pub fn from_config(cfg: &ExperimentConfig, action_dim: usize) -> Self {
        Self {
            image_size: cfg.image_size,
            cnn_depth: cfg.cnn_depth,
            deter: cfg.deter_size,
            stoch: cfg.stoch_size,
            hidden: cfg.dense_units,
            action_dim,
            min_std: cfg.min_std,
            no_act: cfg.no_act,
            single_branch: cfg.single_branch,
        }
    }

    /// Tiny model used by the gradient audits.
    pub fn micro() -> Self {
        Self {
            image_size: 8,
            cnn_depth: 2,
            deter: 8,
            stoch: 4,
            hidden: 16,
            action_dim: 2,
            min_std: 0.1,
            no_act: false,
            single_branch: false,
        }
    }

    pub fn feature_size(&self) -> usize {
        self.deter + self.stoch
    }
}

/// Recurrent state of one branch: `deter` `[N, D]` and `stoch` `[N, S]`.
#[derive(Debug, Clone)]
pub struct BranchState {
    pub deter: Tensor,
    pub stoch: Tensor,
}

impl BranchState {
    pub fn zeros(n: usize, dims: &ModelDims, dtype: DType, device: &Device) -> Result<Self> {
        Ok(Self {
            deter: Tensor::zeros((n, dims.deter), dtype, device)?,
            stoch: Tensor::zeros((n, dims.stoch), dtype, device)?,
        })
    }

    /// `[stoch, deter]` concatenated, `[N, S + D]`.
    pub fn feature(&self) -> Result<Tensor> {
        Ok(Tensor::cat(&[&self.stoch, &self.deter], 1)?)
    }

    pub fn batch_size(&self) -> usize {
        self.deter.dims()[0]
    }

    pub fn detach(&self) -> Self {
        Self {
            deter: self.deter.detach(),
            stoch: self.stoch.detach(),
        }
    }

    pub fn cat(states: &[BranchState]) -> Result<Self> {
        let d: Vec<&Tensor> = states.iter().map(|s| &s.deter).collect();
        let s: Vec<&Tensor> = states.iter().map(|s| &s.stoch).collect();
        Ok(Self {
            deter: Tensor::cat(&d, 0)?,
            stoch: Tensor::cat(&s, 0)?,
        })
    }

    pub fn select(&self, rows: &Tensor) -> Result<Self> {
        Ok(Self {
            deter: self.deter.index_select(rows, 0)?,
            stoch: self.stoch.index_select(rows, 0)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct SplitLatentState {
    pub task: BranchState,
    pub background: BranchState,
}

/// Per-branch images and masks plus their composite. Images live in the
/// centered pixel range used by the decoders (`observation - 0.5`).
#[derive(Debug, Clone)]
pub struct MaskedReconstruction {
    /// `[N, 3, H, W]`
    pub o_hat_plus: Tensor,
    pub o_hat_minus: Tensor,
    /// `[N, 1, H, W]`
    pub mask_plus: Tensor,
    pub mask_minus: Tensor,
    pub mask_final: Tensor,
    pub o_hat: Tensor,
}

impl MaskedReconstruction {
    /// Recomposites the branch images under a different mask.
    pub fn with_mask(&self, mask: &Tensor) -> Result<Self> {
        Ok(Self {
            mask_final: mask.clone(),
            o_hat: fuse(&self.o_hat_plus, &self.o_hat_minus, mask)?,
            ..self.clone()
        })
    }
}

/// `mask * plus + (1 - mask) * minus`, mask broadcast over channels.
pub fn fuse(plus: &Tensor, minus: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let keep = mask.affine(-1.0, 1.0)?;
    Ok((mask.broadcast_mul(plus)? + keep.broadcast_mul(minus)?)?)
}

/// Anything that can pick actions for imagined task states.
pub trait ActionSource {
    /// `[N, S + D]` features to `[N, A]` differentiable actions.
    fn imagine_action(&self, feature: &Tensor, rng: &mut RandomSource) -> Result<Tensor>;
}

#[derive(Debug, Clone)]
struct Dynamics {
    input: Linear,
    cell: GruCell,
    prior: Mlp,
    takes_action: bool,
}

#[derive(Debug, Clone)]
struct Branch {
    encoder: ConvEncoder,
    dynamics: Dynamics,
    posterior: Mlp,
    decoder: ConvDecoder,
    min_std: f64,
}

impl Branch {
    fn transition(&self, prev: &BranchState, action: Option<&Tensor>) -> Result<(Tensor, DiagonalGaussian)> {
        let x = match (action, self.dynamics.takes_action) {
            (Some(a), true) => Tensor::cat(&[&prev.stoch, a], 1)?,
            (None, false) => prev.stoch.clone(),
            (Some(_), false) => return Err(Error::Shape("action passed to an action-free branch".into())),
            (None, true) => {
                return Err(Error::Shape(
                    "action-conditioned branch called without an action".into(),
                ))
            }
        };
        let x = elu(&self.dynamics.input.forward(&x)?)?;
        let deter = self.dynamics.cell.forward(&x, &prev.deter)?;
        let prior = DiagonalGaussian::from_head(&self.dynamics.prior.forward(&deter)?, self.min_std)?;
        Ok((deter, prior))
    }

    fn posterior(&self, deter: &Tensor, embed: &Tensor) -> Result<DiagonalGaussian> {
        let raw = self.posterior.forward(&Tensor::cat(&[deter, embed], 1)?)?;
        DiagonalGaussian::from_head(&raw, self.min_std)
    }

    fn prior_step(
        &self,
        prev: &BranchState,
        action: Option<&Tensor>,
        rng: &mut RandomSource,
    ) -> Result<(BranchState, DiagonalGaussian)> {
        let (deter, prior) = self.transition(prev, action)?;
        let noise = noise_like(&prior.mean, rng)?;
        let stoch = prior.sample(&noise)?;
        Ok((BranchState { deter, stoch }, prior))
    }

    fn posterior_step(
        &self,
        embed: &Tensor,
        prev: &BranchState,
        action: Option<&Tensor>,
        rng: &mut RandomSource,
    ) -> Result<PosteriorStep> {
        let (deter, prior) = self.transition(prev, action)?;
        let posterior = self.posterior(&deter, embed)?;
        let noise = noise_like(&posterior.mean, rng)?;
        let stoch = posterior.sample(&noise)?;
        Ok(PosteriorStep {
            state: BranchState { deter, stoch },
            prior,
            posterior,
        })
    }
}

fn noise_like(t: &Tensor, rng: &mut RandomSource) -> Result<Tensor> {
    rng.normal_tensor(t.dims(), t.dtype(), t.device())
}

#[derive(Debug, Clone)]
pub struct PosteriorStep {
    pub state: BranchState,
    pub prior: DiagonalGaussian,
    pub posterior: DiagonalGaussian,
}

/// Filtering output of one branch over a `[B, L]` batch, one entry per step.
#[derive(Debug, Clone, Default)]
pub struct BranchSequence {
    pub states: Vec<BranchState>,
    pub priors: Vec<DiagonalGaussian>,
    pub posteriors: Vec<DiagonalGaussian>,
}

impl BranchSequence {
    fn push(&mut self, step: PosteriorStep) {
        self.states.push(step.state);
        self.priors.push(step.prior);
        self.posteriors.push(step.posterior);
    }

    /// States flattened time-major to `[L * B, ...]`.
    pub fn flat_states(&self) -> Result<BranchState> {
        BranchState::cat(&self.states)
    }

    pub fn flat_priors(&self) -> Result<DiagonalGaussian> {
        DiagonalGaussian::cat(&self.priors)
    }

    pub fn flat_posteriors(&self) -> Result<DiagonalGaussian> {
        DiagonalGaussian::cat(&self.posteriors)
    }
}

#[derive(Debug, Clone)]
pub struct Observed {
    pub task: BranchSequence,
    pub background: BranchSequence,
}

/// Imagined task-branch rollout: `states[0]` is the start, `actions[k]` is
/// taken in `states[k]` and leads to `states[k + 1]`.
#[derive(Debug, Clone)]
pub struct Imagined {
    pub states: Vec<BranchState>,
    pub actions: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct ReconstructionLoss {
    pub total: Tensor,
    /// Negative log-likelihood of the frame under the fused reconstruction.
    pub joint: Tensor,
    /// BoR negative log-likelihood already multiplied by its weight.
    pub bor: Tensor,
}

pub struct WorldModel {
    dims: ModelDims,
    dtype: DType,
    device: Device,
    task: Branch,
    background: Branch,
    fusion: Conv2d,
    bor: ConvDecoder,
    bundles: Vec<Bundle>,
}

impl WorldModel {
    pub fn new(dims: ModelDims, dtype: DType, device: &Device, rng: &mut RandomSource) -> Result<Self> {
        let mut init = Init {
            rng,
            dtype,
            device: device.clone(),
        };
        let mut bundles: Vec<Bundle> = BUNDLE_NAMES.iter().map(|n| Bundle::new(*n)).collect();
        let [te, be, td, bd, tp, bp, tdec, bdec, fusion_b, bor_b] = &mut bundles[..] else {
            unreachable!("ten bundle names")
        };

        let branch = |enc: &mut Bundle,
                      dynb: &mut Bundle,
                      post: &mut Bundle,
                      dec: &mut Bundle,
                      takes_action: bool,
                      init: &mut Init|
         -> Result<Branch> {
            let encoder = ConvEncoder::new(enc, dims.image_size, dims.cnn_depth, init)?;
            let in_size = dims.stoch + if takes_action { dims.action_dim } else { 0 };
            let dynamics = Dynamics {
                input: Linear::new(dynb, "input", in_size, dims.hidden, init)?,
                cell: GruCell::new(dynb, "gru", dims.hidden, dims.deter, init)?,
                prior: Mlp::new(dynb, "prior", &[dims.deter, dims.hidden, 2 * dims.stoch], false, init)?,
                takes_action,
            };
            let posterior = Mlp::new(
                post,
                "head",
                &[dims.deter + encoder.embed_size(), dims.hidden, 2 * dims.stoch],
                false,
                init,
            )?;
            let decoder = ConvDecoder::new(dec, dims.feature_size(), dims.image_size, dims.cnn_depth, 4, init)?;
            Ok(Branch {
                encoder,
                dynamics,
                posterior,
                decoder,
                min_std: dims.min_std,
            })
        };
        let task = branch(te, td, tp, tdec, true, &mut init)?;
        let background = branch(be, bd, bp, bdec, dims.no_act, &mut init)?;
        let fusion = Conv2d::new(fusion_b, "conv", 2, 1, 3, 1, 1, &mut init)?;
        let bor = ConvDecoder::new(
            bor_b,
            dims.feature_size(),
            dims.image_size,
            dims.cnn_depth,
            3,
            &mut init,
        )?;
        Ok(Self {
            dims,
            dtype,
            device: device.clone(),
            task,
            background,
            fusion,
            bor,
            bundles,
        })
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn bundles(&self) -> &[Bundle] {
        &self.bundles
    }

    pub fn bundle(&self, name: &str) -> Option<&Bundle> {
        self.bundles.iter().find(|b| b.name() == name)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.bundles.iter().flat_map(|b| b.vars()).collect()
    }

    /// Variables of every bundle whose name starts with `prefix`.
    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<Var> {
        self.bundles
            .iter()
            .filter(|b| b.name().starts_with(prefix))
            .flat_map(|b| b.vars())
            .collect()
    }

    pub fn initial_state(&self, n: usize) -> Result<BranchState> {
        BranchState::zeros(n, &self.dims, self.dtype, &self.device)
    }

    /// One task-model prior step `p(z+' | z+, a)`.
    pub fn prior_task(
        &self,
        prev: &BranchState,
        action: &Tensor,
        rng: &mut RandomSource,
    ) -> Result<(BranchState, DiagonalGaussian)> {
        self.check_action(action, prev.batch_size())?;
        self.task.prior_step(prev, Some(action), rng)
    }

    /// One background prior step `p(z-' | z-)`. Takes no action.
    pub fn prior_background(
        &self,
        prev: &BranchState,
        rng: &mut RandomSource,
    ) -> Result<(BranchState, DiagonalGaussian)> {
        self.background.prior_step(prev, None, rng)
    }

    /// Background prior step of the `no_act` ablation, `p(z-' | z-, a)`.
    pub fn prior_background_with_action(
        &self,
        prev: &BranchState,
        action: &Tensor,
        rng: &mut RandomSource,
    ) -> Result<(BranchState, DiagonalGaussian)> {
        self.check_action(action, prev.batch_size())?;
        self.background.prior_step(prev, Some(action), rng)
    }

    /// Task posterior `q(z+_t | o_t, z+_{t-1}, a_{t-1})`.
    pub fn posterior_task(
        &self,
        embed: &Tensor,
        prev: &BranchState,
        action: &Tensor,
        rng: &mut RandomSource,
    ) -> Result<PosteriorStep> {
        self.check_action(action, prev.batch_size())?;
        self.task.posterior_step(embed, prev, Some(action), rng)
    }

    /// Background posterior `q(z-_t | o_t, z-_{t-1})`. Takes no action.
    pub fn posterior_background(
        &self,
        embed: &Tensor,
        prev: &BranchState,
        rng: &mut RandomSource,
    ) -> Result<PosteriorStep> {
        self.background.posterior_step(embed, prev, None, rng)
    }

    pub fn posterior_background_with_action(
        &self,
        embed: &Tensor,
        prev: &BranchState,
        action: &Tensor,
        rng: &mut RandomSource,
    ) -> Result<PosteriorStep> {
        self.check_action(action, prev.batch_size())?;
        self.background.posterior_step(embed, prev, Some(action), rng)
    }

    fn check_action(&self, action: &Tensor, n: usize) -> Result<()> {
        if action.dims() != [n, self.dims.action_dim] {
            return Err(Error::Shape(format!(
                "expected actions [{n}, {}], got {:?}",
                self.dims.action_dim,
                action.dims()
            )));
        }
        Ok(())
    }

    /// `[N, 3, H, W]` images in `[0, 1]` to `(task_embed, background_embed)`.
    pub fn encode(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((
            self.task.encoder.forward(images)?,
            self.background.encoder.forward(images)?,
        ))
    }

    pub fn encode_task(&self, images: &Tensor) -> Result<Tensor> {
        self.task.encoder.forward(images)
    }

    pub fn decode_joint(&self, z: &SplitLatentState) -> Result<MaskedReconstruction> {
        let plus = self.task.decoder.forward(&z.task.feature()?)?;
        let o_hat_plus = plus.narrow(1, 0, 3)?;
        let mask_plus = sigmoid(&plus.narrow(1, 3, 1)?)?;
        if self.dims.single_branch {
            let ones = mask_plus.ones_like()?;
            return Ok(MaskedReconstruction {
                o_hat: o_hat_plus.clone(),
                o_hat_minus: o_hat_plus.zeros_like()?,
                mask_minus: ones.zeros_like()?,
                o_hat_plus,
                mask_plus,
                mask_final: ones,
            });
        }
        let minus = self.background.decoder.forward(&z.background.feature()?)?;
        let o_hat_minus = minus.narrow(1, 0, 3)?;
        let mask_minus = sigmoid(&minus.narrow(1, 3, 1)?)?;
        let mask_final = sigmoid(&self.fusion.forward(&Tensor::cat(&[&mask_plus, &mask_minus], 1)?)?)?;
        let o_hat = fuse(&o_hat_plus, &o_hat_minus, &mask_final)?;
        Ok(MaskedReconstruction {
            o_hat_plus,
            o_hat_minus,
            mask_plus,
            mask_minus,
            mask_final,
            o_hat,
        })
    }

    /// Full frame from the background state alone, `[N, 3, H, W]`.
    pub fn decode_background_only(&self, z_minus: &BranchState) -> Result<Tensor> {
        self.bor.forward(&z_minus.feature()?)
    }

    /// Left-to-right filtering of both branches over `[B, L, 3, H, W]`
    /// observations and `[B, L, A]` actions, from zero initial states.
    /// Step `t` conditions on `a_{t-1}` (zero at `t = 0`).
    pub fn observe_sequence(
        &self,
        observations: &Tensor,
        actions: &Tensor,
        rng: &mut RandomSource,
    ) -> Result<Observed> {
        let (b, l) = self.check_sequence(observations, actions)?;
        let flat = observations.reshape((b * l, 3, self.dims.image_size, self.dims.image_size))?;
        let (task_embed, bg_embed) = self.encode(&flat)?;
        let task_embed = task_embed.reshape((b, l, ()))?;
        let bg_embed = bg_embed.reshape((b, l, ()))?;

        let mut task_state = self.initial_state(b)?;
        let mut bg_state = self.initial_state(b)?;
        let zero_action = Tensor::zeros((b, self.dims.action_dim), self.dtype, &self.device)?;
        let mut task = BranchSequence::default();
        let mut background = BranchSequence::default();
        for t in 0..l {
            let prev_action = if t == 0 {
                zero_action.clone()
            } else {
                actions.i((.., t - 1))?.contiguous()?
            };
            let step = self.posterior_task(&task_embed.i((.., t))?.contiguous()?, &task_state, &prev_action, rng)?;
            task_state = step.state.clone();
            task.push(step);

            let embed = bg_embed.i((.., t))?.contiguous()?;
            let step = if self.dims.no_act {
                self.posterior_background_with_action(&embed, &bg_state, &prev_action, rng)?
            } else {
                self.posterior_background(&embed, &bg_state, rng)?
            };
            bg_state = step.state.clone();
            background.push(step);
        }
        Ok(Observed { task, background })
    }

    /// Task-branch filtering only; used for expert pairs and acting.
    pub fn filter_task(
        &self,
        observations: &Tensor,
        actions: &Tensor,
        rng: &mut RandomSource,
    ) -> Result<Vec<BranchState>> {
        let (b, l) = self.check_sequence(observations, actions)?;
        let flat = observations.reshape((b * l, 3, self.dims.image_size, self.dims.image_size))?;
        let embed = self.task.encoder.forward(&flat)?.reshape((b, l, ()))?;
        let mut state = self.initial_state(b)?;
        let zero_action = Tensor::zeros((b, self.dims.action_dim), self.dtype, &self.device)?;
        let mut states = Vec::with_capacity(l);
        for t in 0..l {
            let prev_action = if t == 0 {
                zero_action.clone()
            } else {
                actions.i((.., t - 1))?.contiguous()?
            };
            state = self
                .posterior_task(&embed.i((.., t))?.contiguous()?, &state, &prev_action, rng)?
                .state;
            states.push(state.clone());
        }
        Ok(states)
    }

    fn check_sequence(&self, observations: &Tensor, actions: &Tensor) -> Result<(usize, usize)> {
        let od = observations.dims();
        let ad = actions.dims();
        let n = self.dims.image_size;
        if od.len() != 5 || od[2..] != [3, n, n] || ad.len() != 3 || ad[..2] != od[..2] || ad[2] != self.dims.action_dim
        {
            return Err(Error::Shape(format!(
                "sequence batch expects [B, L, 3, {n}, {n}] / [B, L, {}], got {od:?} / {ad:?}",
                self.dims.action_dim
            )));
        }
        Ok((od[0], od[1]))
    }

    /// Open-loop rollout of the task prior under `policy`. The background
    /// branch is not touched.
    pub fn imagine_rollout(
        &self,
        start: &BranchState,
        policy: &dyn ActionSource,
        horizon: usize,
        rng: &mut RandomSource,
    ) -> Result<Imagined> {
        let mut states = vec![start.clone()];
        let mut actions = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            let current = states.last().expect("rollout starts non-empty");
            let action = policy.imagine_action(&current.feature()?, rng)?;
            let (next, _) = self.prior_task(current, &action, rng)?;
            actions.push(action);
            states.push(next);
        }
        Ok(Imagined { states, actions })
    }

    /// KL term of the model objective over both branches (task only under
    /// `single_branch`).
    pub fn kl_loss(&self, observed: &Observed, free_nats: f64, kl_beta: f64) -> Result<Tensor> {
        let mut branches = vec![&observed.task];
        if !self.dims.single_branch {
            branches.push(&observed.background);
        }
        kl_loss(&branches, free_nats, kl_beta)
    }

    /// Joint reconstruction negative log-likelihood plus `bor_weight` times
    /// the BoR term. `observations` is the `[B, L, 3, H, W]` batch that
    /// produced `observed`.
    pub fn reconstruction_loss(
        &self,
        observations: &Tensor,
        observed: &Observed,
        bor_weight: f64,
    ) -> Result<ReconstructionLoss> {
        let (b, l) = (observations.dim(0)?, observations.dim(1)?);
        let n = self.dims.image_size;
        // time-major to match the flattened states
        let target = (observations.transpose(0, 1)?.contiguous()?.reshape((l * b, 3, n, n))? - 0.5)?;
        let z = SplitLatentState {
            task: observed.task.flat_states()?,
            background: observed.background.flat_states()?,
        };
        let rec = self.decode_joint(&z)?;
        let joint = gaussian_nll(&rec.o_hat, &target)?;
        let bor = if bor_weight > 0.0 && !self.dims.single_branch {
            (gaussian_nll(&self.decode_background_only(&z.background)?, &target)? * bor_weight)?
        } else {
            joint.zeros_like()?
        };
        Ok(ReconstructionLoss {
            total: (&joint + &bor)?,
            joint,
            bor,
        })
    }
}

/// Mean over the batch of the per-image negative log-likelihood under a
/// unit-variance Gaussian centered at `pred`.
pub fn gaussian_nll(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let per_pixel = ((pred - target)?.sqr()? * 0.5)? + half_log_2pi;
    Ok(per_pixel?.flatten_from(1)?.sum(1)?.mean_all()?)
}

/// `kl_beta * sum_branch mean_{batch, time} max(KL(q || p), free_nats)`.
pub fn kl_loss(branches: &[&BranchSequence], free_nats: f64, kl_beta: f64) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for branch in branches {
        let kl = branch.flat_posteriors()?.kl(&branch.flat_priors()?)?;
        let term = kl.maximum(free_nats)?.mean_all()?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    let total = total.ok_or_else(|| Error::Invalid("kl_loss needs at least one branch".into()))?;
    Ok((total * kl_beta)?)
}
