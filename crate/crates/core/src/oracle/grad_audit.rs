//! Central finite-difference checks of the analytic gradients on a micro
//! model evaluated in `f64`.

use candle_core::{DType, Device, Tensor, Var};

use crate::agent::{actor_loss, value_loss, ImaginationParams, Policy, ValueFunction};
use crate::discriminator::{Discriminator, PairBatch};
use crate::error::{Error, Result};
use crate::nn::Init;
use crate::rng::RandomSource;
use crate::world_model::{BranchState, ModelDims, WorldModel};

pub const AUDIT_EPS: f64 = 1e-4;
pub const AUDIT_COORDINATES: usize = 50;
pub const AUDIT_TOLERANCE: f64 = 1e-3;
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuditLoss {
    Kl,
    Reconstruction,
    Discriminator,
    Actor,
    Value,
}

impl AuditLoss {
    pub const ALL: [AuditLoss; 5] = [
        AuditLoss::Kl,
        AuditLoss::Reconstruction,
        AuditLoss::Discriminator,
        AuditLoss::Actor,
        AuditLoss::Value,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AuditLoss::Kl => "kl_loss",
            AuditLoss::Reconstruction => "reconstruction_loss",
            AuditLoss::Discriminator => "discriminator_loss",
            AuditLoss::Actor => "actor_loss",
            AuditLoss::Value => "value_loss",
        }
    }
}

#[derive(Debug, Clone)]
pub struct AuditReport {
    pub loss: AuditLoss,
    pub max_rel_err: f64,
    pub coordinates: usize,
    /// `(parameter, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

const BATCH: usize = 2;
const LENGTH: usize = 3;
const HORIZON: usize = 3;
const STARTS: usize = 4;

struct Fixture {
    model: WorldModel,
    disc: Discriminator,
    policy: Policy,
    value: ValueFunction,
    observations: Tensor,
    actions: Tensor,
    expert: PairBatch,
    agent: PairBatch,
    starts: BranchState,
    value_states: Vec<BranchState>,
    targets: Tensor,
}

fn random_state(n: usize, dims: &ModelDims, rng: &mut RandomSource) -> Result<BranchState> {
    Ok(BranchState {
        deter: rng.normal_tensor(&[n, dims.deter], DType::F64, &Device::Cpu)?,
        stoch: rng.normal_tensor(&[n, dims.stoch], DType::F64, &Device::Cpu)?,
    })
}

impl Fixture {
    fn new(seed: u64) -> Result<Self> {
        let mut rng = RandomSource::new(seed);
        let dims = ModelDims::micro();
        let dev = Device::Cpu;
        let model = WorldModel::new(dims.clone(), DType::F64, &dev, &mut rng)?;
        let feature = dims.feature_size();
        let (disc, policy, value) = {
            let mut init = Init {
                rng: &mut rng,
                dtype: DType::F64,
                device: dev.clone(),
            };
            (
                Discriminator::new(feature + dims.action_dim, dims.hidden, &mut init)?,
                Policy::new(feature, dims.hidden, dims.action_dim, 0.3, &mut init)?,
                ValueFunction::new(feature, dims.hidden, &mut init)?,
            )
        };
        // the zero-initialized head would make the reward constant
        for (name, var) in disc.bundle().named() {
            if name.contains("mlp.2") {
                let v = (rng.normal_tensor(var.dims(), DType::F64, &dev)? * 0.5)?;
                var.set(&v)?;
            }
        }
        let n = dims.image_size;
        let observations = rng.uniform_tensor(&[BATCH, LENGTH, 3, n, n], 0.0, 1.0, DType::F64, &dev)?;
        let actions = rng.uniform_tensor(&[BATCH, LENGTH, dims.action_dim], -1.0, 1.0, DType::F64, &dev)?;
        let pair = |rng: &mut RandomSource| -> Result<PairBatch> {
            let z = random_state(6, &dims, rng)?;
            let a = rng.uniform_tensor(&[6, dims.action_dim], -1.0, 1.0, DType::F64, &dev)?;
            PairBatch::new(&z, &a)
        };
        let expert = pair(&mut rng)?;
        let agent = pair(&mut rng)?;
        let starts = random_state(STARTS, &dims, &mut rng)?;
        let value_states = (0..HORIZON)
            .map(|_| random_state(STARTS, &dims, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let targets = rng.normal_tensor(&[STARTS, HORIZON], DType::F64, &dev)?;
        Ok(Self {
            model,
            disc,
            policy,
            value,
            observations,
            actions,
            expert,
            agent,
            starts,
            value_states,
            targets,
        })
    }

    fn vars(&self, loss: AuditLoss) -> Vec<(String, Var)> {
        let named = |b: &crate::nn::Bundle| b.named().to_vec();
        match loss {
            AuditLoss::Kl | AuditLoss::Reconstruction => self.model.bundles().iter().flat_map(named).collect(),
            AuditLoss::Discriminator => named(self.disc.bundle()),
            AuditLoss::Actor => {
                let mut v = named(self.policy.bundle());
                v.extend(named(self.model.bundle("task_dynamics").expect("task dynamics bundle")));
                v
            }
            AuditLoss::Value => named(self.value.bundle()),
        }
    }

    fn loss(&self, loss: AuditLoss, mut rng: RandomSource) -> Result<Tensor> {
        match loss {
            AuditLoss::Kl => {
                let seq = self
                    .model
                    .observe_sequence(&self.observations, &self.actions, &mut rng)?;
                self.model.kl_loss(&seq, 0.0, 1.0)
            }
            AuditLoss::Reconstruction => {
                let seq = self
                    .model
                    .observe_sequence(&self.observations, &self.actions, &mut rng)?;
                Ok(self.model.reconstruction_loss(&self.observations, &seq, 1.5)?.total)
            }
            AuditLoss::Discriminator => Ok(self.disc.loss(&self.expert, &self.agent, 1.0, &mut rng)?.total),
            AuditLoss::Actor => {
                let params = ImaginationParams {
                    horizon: HORIZON,
                    discount: 0.99,
                    lambda: 0.95,
                    entropy_weight: 0.0,
                };
                Ok(actor_loss(
                    &self.policy,
                    &self.model,
                    &self.disc,
                    &self.value,
                    &self.starts,
                    params,
                    &mut rng,
                )?
                .loss)
            }
            AuditLoss::Value => value_loss(&self.value, &self.value_states, &self.targets),
        }
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_scalar::<f64>()?)
}

fn set_coordinate(var: &Var, index: usize, value: f64) -> Result<()> {
    let mut flat = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
    flat[index] = value;
    var.set(&Tensor::from_vec(flat, var.dims(), var.device())?)?;
    Ok(())
}

/// Compares backpropagated gradients with central differences on
/// [`AUDIT_COORDINATES`] random coordinates of the parameters that the loss
/// reaches. The loss is re-evaluated with an identical noise stream each
/// time.
pub fn gradient_audit(loss: AuditLoss, seed: u64) -> Result<AuditReport> {
    let fx = Fixture::new(seed)?;
    let noise = RandomSource::new(seed ^ 0xA5A5_A5A5);
    let base = fx.loss(loss, noise.clone())?;
    let grads = base.backward()?;

    let mut candidates: Vec<(String, Var, Vec<f64>)> = Vec::new();
    for (name, var) in fx.vars(loss) {
        if let Some(g) = grads.get(var.as_tensor()) {
            candidates.push((name, var.clone(), g.flatten_all()?.to_vec1::<f64>()?));
        }
    }
    let mut coords: Vec<(usize, usize)> = candidates
        .iter()
        .enumerate()
        .flat_map(|(i, (_, _, g))| (0..g.len()).map(move |j| (i, j)))
        .collect();
    if coords.is_empty() {
        return Err(Error::Invalid(format!("{} reaches no audited parameter", loss.name())));
    }
    let mut pick = RandomSource::new(seed ^ 0x5A5A_5A5A);
    pick.shuffle(&mut coords);
    coords.truncate(AUDIT_COORDINATES);

    let mut max_rel_err: f64 = 0.0;
    let mut worst = None;
    for &(i, j) in &coords {
        let (name, var, grad) = &candidates[i];
        let original = var.as_tensor().flatten_all()?.to_vec1::<f64>()?[j];
        set_coordinate(var, j, original + AUDIT_EPS)?;
        let plus = scalar(&fx.loss(loss, noise.clone())?)?;
        set_coordinate(var, j, original - AUDIT_EPS)?;
        let minus = scalar(&fx.loss(loss, noise.clone())?)?;
        set_coordinate(var, j, original)?;
        let numeric = (plus - minus) / (2.0 * AUDIT_EPS);
        let analytic = grad[j];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        if rel >= max_rel_err {
            max_rel_err = rel;
            worst = Some((name.clone(), j, analytic, numeric));
        }
    }
    Ok(AuditReport {
        loss,
        max_rel_err,
        coordinates: coords.len(),
        worst,
    })
}
