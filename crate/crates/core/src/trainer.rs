//! The training loop: seeding, collection with posterior filtering, model
//! learning on the union of agent and expert data, discriminator updates and
//! actor/value learning in imagination.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};

use crate::agent::{actor_loss, value_loss, ActMode, ImaginationParams, Policy, ValueFunction};
use crate::buffer::{sample_union_sequences, ReplayBuffer};
use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::discriminator::{Discriminator, PairBatch};
use crate::env::{random_action, run_episode, DistractedPointMass, PointMassParams, StripePattern, ACTION_DIM};
use crate::episode::{Action, EpisodeRecord, ImageObservation};
use crate::error::{Error, Result};
use crate::nn::{Bundle, ClippedAdam, Init};
use crate::rng::RandomSource;
use crate::viz::{self, mask_iou, AGENT_BORDER, EXPERT_BORDER};
use crate::world_model::{BranchState, ModelDims, SplitLatentState, WorldModel};

/// Training runs in `f32` on the CPU.
pub const TRAIN_DTYPE: DType = DType::F32;

/// World model, discriminator, policy and value function.
pub struct Models {
    pub world: WorldModel,
    pub discriminator: Discriminator,
    pub policy: Policy,
    pub value: ValueFunction,
}

impl Models {
    pub fn new(cfg: &ExperimentConfig, action_dim: usize, rng: &mut RandomSource) -> Result<Self> {
        let device = Device::Cpu;
        let dims = ModelDims::from_config(cfg, action_dim);
        let feature = dims.feature_size();
        let world = WorldModel::new(dims, TRAIN_DTYPE, &device, rng)?;
        let mut init = Init {
            rng,
            dtype: TRAIN_DTYPE,
            device,
        };
        Ok(Self {
            world,
            discriminator: Discriminator::new(feature + action_dim, cfg.dense_units, &mut init)?,
            policy: Policy::new(
                feature,
                cfg.dense_units,
                action_dim,
                cfg.exploration_noise_std,
                &mut init,
            )?,
            value: ValueFunction::new(feature, cfg.dense_units, &mut init)?,
        })
    }

    /// The ten world-model bundles followed by discriminator, policy, value.
    pub fn bundles(&self) -> Vec<&Bundle> {
        let mut out: Vec<&Bundle> = self.world.bundles().iter().collect();
        out.push(self.discriminator.bundle());
        out.push(self.policy.bundle());
        out.push(self.value.bundle());
        out
    }

    pub fn checkpoint(&self, cfg: &ExperimentConfig) -> Result<Checkpoint> {
        Checkpoint::capture(cfg.to_text(), self.bundles())
    }

    /// Rebuilds models from a checkpoint whose metadata is the config text.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(ExperimentConfig, Self)> {
        let cfg = ExperimentConfig::parse(&ck.meta)?;
        let mut rng = RandomSource::new(cfg.seed);
        let models = Self::new(&cfg, ACTION_DIM, &mut rng)?;
        ck.restore(models.bundles())?;
        Ok((cfg, models))
    }

    /// One filtering step of the task branch on a raw observation.
    pub fn filter_task_step(
        &self,
        obs: &ImageObservation,
        prev: &BranchState,
        prev_action: &Action,
        rng: &mut RandomSource,
    ) -> Result<BranchState> {
        let images = images_tensor(std::slice::from_ref(obs))?;
        let embed = self.world.encode_task(&images)?;
        let action =
            Tensor::from_slice(prev_action.values(), (1, prev_action.dim()), &Device::Cpu)?.to_dtype(TRAIN_DTYPE)?;
        Ok(self.world.posterior_task(&embed, prev, &action, rng)?.state.detach())
    }

    /// Rolls one episode, filtering the task branch and acting with the
    /// policy in `mode`.
    pub fn rollout(
        &self,
        env: &mut DistractedPointMass,
        mode: ActMode,
        rng: &mut RandomSource,
        mut on_step: impl FnMut(&DistractedPointMass) -> Result<()>,
    ) -> Result<EpisodeRecord> {
        let mut state = self.world.initial_state(1)?;
        let mut prev_action = Action::zeros(self.policy.action_dim());
        run_episode(env, rng, false, |env, obs, rng| {
            on_step(env)?;
            state = self.filter_task_step(obs, &state, &prev_action, rng)?;
            let action = self
                .policy
                .act(&state, mode, rng)?
                .pop()
                .ok_or_else(|| Error::Invalid("policy returned no action".into()))?;
            prev_action = action.clone();
            Ok(action)
        })
    }
}

/// `[N, 3, H, W]` tensor of observations in `[0, 1]`.
pub fn images_tensor(obs: &[ImageObservation]) -> Result<Tensor> {
    let n = obs
        .first()
        .map(|o| o.size())
        .ok_or_else(|| Error::Invalid("no observations".into()))?;
    let flat: Vec<f32> = obs.iter().flat_map(|o| o.pixels().iter().copied()).collect();
    let t = Tensor::from_vec(flat, (obs.len(), n, n, 3), &Device::Cpu)?;
    Ok(t.permute((0, 3, 1, 2))?.contiguous()?.to_dtype(TRAIN_DTYPE)?)
}

/// First `T` observations and actions of an episode as `[1, T, ...]`.
pub fn episode_tensors(ep: &EpisodeRecord) -> Result<(Tensor, Tensor)> {
    let t = ep.len();
    let obs = images_tensor(&ep.observations()[..t])?.unsqueeze(0)?;
    let flat: Vec<f32> = ep.actions().iter().flat_map(|a| a.values().iter().copied()).collect();
    let act = Tensor::from_vec(flat, (1, t, ep.action_dim()), &Device::Cpu)?.to_dtype(TRAIN_DTYPE)?;
    Ok((obs, act))
}

pub const METRICS_HEADER: &str =
    "step,episode,kl_loss,recon_loss,bor_loss,disc_loss,mean_D_on_agent,actor_loss,value_loss,eval_return,mask_iou";

/// One CSV row. Training rows leave the evaluation columns empty and
/// evaluation rows leave the loss columns empty.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub episode: usize,
    pub kl_loss: Option<f64>,
    pub recon_loss: Option<f64>,
    pub bor_loss: Option<f64>,
    pub disc_loss: Option<f64>,
    pub mean_d_on_agent: Option<f64>,
    pub actor_loss: Option<f64>,
    pub value_loss: Option<f64>,
    pub eval_return: Option<f64>,
    pub mask_iou: Option<f64>,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.episode,
            f(self.kl_loss),
            f(self.recon_loss),
            f(self.bor_loss),
            f(self.disc_loss),
            f(self.mean_d_on_agent),
            f(self.actor_loss),
            f(self.value_loss),
            f(self.eval_return),
            f(self.mask_iou)
        )
    }
}

/// Where metrics rows go.
pub trait MetricsSink {
    fn record(&mut self, row: &MetricsRow) -> Result<()>;
}

impl MetricsSink for Vec<MetricsRow> {
    fn record(&mut self, row: &MetricsRow) -> Result<()> {
        self.push(row.clone());
        Ok(())
    }
}

pub struct CsvMetrics {
    path: PathBuf,
    out: BufWriter<File>,
}

impl CsvMetrics {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        writeln!(out, "{METRICS_HEADER}").map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out,
        })
    }
}

impl MetricsSink for CsvMetrics {
    fn record(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.out, "{}", row.to_csv()).map_err(|e| Error::io(&self.path, e))?;
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Losses of one training iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationStats {
    pub kl_loss: f64,
    pub recon_loss: f64,
    pub bor_loss: f64,
    pub disc_loss: f64,
    pub mean_d_on_agent: f64,
    pub actor_loss: f64,
    pub value_loss: f64,
    /// Post-clip gradient norms of the model, discriminator, actor and
    /// value updates.
    pub clipped_norms: [f64; 4],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalStats {
    pub mean_return: f64,
    pub std_return: f64,
    pub mask_iou: f64,
}

pub struct TrainState {
    pub cfg: ExperimentConfig,
    pub models: Models,
    model_opt: ClippedAdam,
    disc_opt: ClippedAdam,
    policy_opt: ClippedAdam,
    value_opt: ClippedAdam,
    pub agent_buffer: ReplayBuffer,
    pub expert_buffer: ReplayBuffer,
    pub env: DistractedPointMass,
    pub step: usize,
    pub episode: usize,
    pub rng: RandomSource,
    /// `mean_D_on_agent` of every iteration so far.
    pub p_e_series: Vec<f64>,
}

fn scalar(t: &Tensor, name: &'static str, step: usize) -> Result<f64> {
    let v = t.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !v.is_finite() {
        return Err(Error::NonFinite {
            name,
            step: step as u64,
        });
    }
    Ok(v)
}

/// Pattern the agent trains and is evaluated on.
pub fn agent_pattern(cfg: &ExperimentConfig) -> StripePattern {
    if cfg.non_overlap {
        StripePattern::B
    } else {
        StripePattern::A
    }
}

impl TrainState {
    pub fn new(cfg: ExperimentConfig, demos: Vec<EpisodeRecord>) -> Result<Self> {
        cfg.validate()?;
        if demos.is_empty() {
            return Err(Error::Invalid(
                "training needs at least one expert demonstration".into(),
            ));
        }
        let mut rng = RandomSource::new(cfg.seed);
        let mut init_rng = rng.fork();
        let models = Models::new(&cfg, ACTION_DIM, &mut init_rng)?;
        let clip = cfg.grad_clip_norm;
        let model_opt = ClippedAdam::new(models.world.vars(), cfg.model_lr, clip)?;
        let disc_opt = ClippedAdam::new(models.discriminator.bundle().vars(), cfg.ac_disc_lr, clip)?;
        let policy_opt = ClippedAdam::new(models.policy.bundle().vars(), cfg.ac_disc_lr, clip)?;
        let value_opt = ClippedAdam::new(models.value.bundle().vars(), cfg.ac_disc_lr, clip)?;
        let mut expert_buffer = ReplayBuffer::new(demos.len());
        for d in demos {
            if d.image_size() != cfg.image_size || d.action_dim() != ACTION_DIM {
                return Err(Error::Shape(format!(
                    "demonstration has {}px images and {}-d actions, config expects {}px and {ACTION_DIM}-d",
                    d.image_size(),
                    d.action_dim(),
                    cfg.image_size
                )));
            }
            expert_buffer.add_episode(d)?;
        }
        let env = DistractedPointMass::new(PointMassParams::from_config(&cfg, agent_pattern(&cfg)));
        Ok(Self {
            agent_buffer: ReplayBuffer::new(cfg.buffer_capacity),
            expert_buffer,
            env,
            models,
            model_opt,
            disc_opt,
            policy_opt,
            value_opt,
            step: 0,
            episode: 0,
            rng,
            p_e_series: Vec::new(),
            cfg,
        })
    }

    /// Fills the agent buffer with `n` uniform-random-action episodes.
    pub fn seed_phase(&mut self, n: usize) -> Result<()> {
        if !self.agent_buffer.is_empty() {
            return Err(Error::Invalid("seeding requires an empty agent buffer".into()));
        }
        for _ in 0..n {
            let ep = run_episode(&mut self.env, &mut self.rng, false, |_, _, rng| Ok(random_action(rng)))?;
            self.agent_buffer.add_episode(ep)?;
            self.episode += 1;
        }
        Ok(())
    }

    /// One episode with task-branch filtering and noisy policy actions.
    pub fn collect_episode(&mut self) -> Result<()> {
        let ep = self
            .models
            .rollout(&mut self.env, ActMode::Train, &mut self.rng, |_| Ok(()))?;
        self.agent_buffer.add_episode(ep)?;
        self.episode += 1;
        Ok(())
    }

    fn imagination_params(&self) -> ImaginationParams {
        ImaginationParams {
            horizon: self.cfg.imagination_horizon,
            discount: self.cfg.discount,
            lambda: self.cfg.return_lambda,
            entropy_weight: self.cfg.entropy_weight,
        }
    }

    fn subsample(&mut self, n: usize, keep: usize) -> Result<Option<Tensor>> {
        if keep >= n {
            return Ok(None);
        }
        let mut rows: Vec<u32> = (0..n as u32).collect();
        self.rng.shuffle(&mut rows);
        rows.truncate(keep);
        Ok(Some(Tensor::from_vec(rows, keep, &Device::Cpu)?))
    }

    pub fn train_iteration(&mut self) -> Result<IterationStats> {
        let cfg = self.cfg.clone();
        let step = self.step;
        let dev = Device::Cpu;

        // model learning on the union of agent and expert windows
        let batch = sample_union_sequences(
            &self.agent_buffer,
            &self.expert_buffer,
            cfg.batch,
            cfg.seq_len,
            &mut self.rng,
        )?;
        let obs = batch.observation_tensor(TRAIN_DTYPE, &dev)?;
        let act = batch.action_tensor(TRAIN_DTYPE, &dev)?;
        let world = &self.models.world;
        let observed = world.observe_sequence(&obs, &act, &mut self.rng)?;
        let kl = world.kl_loss(&observed, cfg.free_nats, cfg.kl_beta)?;
        let rec = world.reconstruction_loss(&obs, &observed, cfg.effective_bor_weight())?;
        let model_loss = (&kl + &rec.total)?;
        let kl_v = scalar(&kl, "kl_loss", step)?;
        let recon_v = scalar(&rec.joint, "recon_loss", step)?;
        let bor_v = scalar(&rec.bor, "bor_loss", step)?;
        let model_stats = self.model_opt.backward_step(&model_loss)?;

        // expert pairs from filtered expert windows
        let empty = ReplayBuffer::new(1);
        let expert_batch = sample_union_sequences(&empty, &self.expert_buffer, cfg.batch, cfg.seq_len, &mut self.rng)?;
        let e_obs = expert_batch.observation_tensor(TRAIN_DTYPE, &dev)?;
        let e_act = expert_batch.action_tensor(TRAIN_DTYPE, &dev)?;
        let e_states = self.models.world.filter_task(&e_obs, &e_act, &mut self.rng)?;
        let e_flat = BranchState::cat(&e_states)?.detach();
        let e_actions = e_act
            .transpose(0, 1)?
            .contiguous()?
            .reshape((cfg.seq_len * cfg.batch, ACTION_DIM))?;
        let mut expert_pairs = PairBatch::new(&e_flat, &e_actions)?;

        // imagined agent pairs from filtered starts
        let mut starts = observed.task.flat_states()?.detach();
        if cfg.imagine_starts > 0 {
            if let Some(rows) = self.subsample(starts.batch_size(), cfg.imagine_starts)? {
                starts = starts.select(&rows)?;
            }
        }
        let imagined =
            self.models
                .world
                .imagine_rollout(&starts, &self.models.policy, cfg.imagination_horizon, &mut self.rng)?;
        let agent_states: Vec<BranchState> = imagined.states[1..cfg.imagination_horizon].to_vec();
        let agent_actions = Tensor::cat(&imagined.actions[1..cfg.imagination_horizon], 0)?;
        let mut agent_pairs = PairBatch::new(&BranchState::cat(&agent_states)?, &agent_actions)?.detach();

        let n = expert_pairs.len().min(agent_pairs.len());
        if let Some(rows) = self.subsample(expert_pairs.len(), n)? {
            expert_pairs = expert_pairs.select(&rows)?;
        }
        if let Some(rows) = self.subsample(agent_pairs.len(), n)? {
            agent_pairs = agent_pairs.select(&rows)?;
        }
        let mean_d = scalar(
            &self.models.discriminator.probability(&agent_pairs)?.mean_all()?,
            "mean_D_on_agent",
            step,
        )?;
        let disc = self
            .models
            .discriminator
            .loss(&expert_pairs, &agent_pairs, cfg.gp_weight, &mut self.rng)?;
        let disc_v = scalar(&disc.total, "disc_loss", step)?;
        let disc_stats = self.disc_opt.backward_step(&disc.total)?;

        // actor and value on fresh imagination
        let actor = actor_loss(
            &self.models.policy,
            &self.models.world,
            &self.models.discriminator,
            &self.models.value,
            &starts,
            self.imagination_params(),
            &mut self.rng,
        )?;
        let actor_v = scalar(&actor.loss, "actor_loss", step)?;
        let actor_stats = self.policy_opt.backward_step(&actor.loss)?;
        let vloss = value_loss(&self.models.value, &actor.rollout.states, &actor.returns)?;
        let value_v = scalar(&vloss, "value_loss", step)?;
        let value_stats = self.value_opt.backward_step(&vloss)?;

        self.step += 1;
        self.p_e_series.push(mean_d);
        Ok(IterationStats {
            kl_loss: kl_v,
            recon_loss: recon_v,
            bor_loss: bor_v,
            disc_loss: disc_v,
            mean_d_on_agent: mean_d,
            actor_loss: actor_v,
            value_loss: value_v,
            clipped_norms: [
                model_stats.norm_after,
                disc_stats.norm_after,
                actor_stats.norm_after,
                value_stats.norm_after,
            ],
        })
    }

    pub fn metrics_row(&self, s: &IterationStats) -> MetricsRow {
        MetricsRow {
            step: self.step,
            episode: self.episode,
            kl_loss: Some(s.kl_loss),
            recon_loss: Some(s.recon_loss),
            bor_loss: Some(s.bor_loss),
            disc_loss: Some(s.disc_loss),
            mean_d_on_agent: Some(s.mean_d_on_agent),
            actor_loss: Some(s.actor_loss),
            value_loss: Some(s.value_loss),
            ..MetricsRow::default()
        }
    }

    /// Deterministic evaluation on a fresh environment with its own stream.
    pub fn evaluate(&self, episodes: usize) -> Result<EvalStats> {
        let mut env = DistractedPointMass::new(PointMassParams::from_config(&self.cfg, agent_pattern(&self.cfg)));
        let mut rng = RandomSource::new(self.cfg.seed ^ 0xE7A1_0000 ^ self.episode as u64);
        evaluate_policy(&self.models, &mut env, episodes, &mut rng)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.models.checkpoint(&self.cfg)?.save(path)
    }

    /// Reconstruction panels for one agent and one expert episode plus the
    /// discriminator series.
    pub fn dump_visualizations(&self, dir: &Path, tag: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut rng = RandomSource::new(self.cfg.seed ^ 0x0715_0000);
        let sources = [
            ("agent", self.agent_buffer.episodes().last(), AGENT_BORDER),
            ("expert", self.expert_buffer.episodes().next(), EXPERT_BORDER),
        ];
        for (name, ep, border) in sources {
            if let Some(ep) = ep {
                let img = reconstruction_panel(&self.models.world, ep, border, &mut rng)?;
                img.save(&dir.join(format!("{tag}_{name}.png")))?;
            }
        }
        viz::plot_series(&self.p_e_series, 320, 120).save(&dir.join(format!("{tag}_p_e.png")))
    }
}

/// Panel rows for up to six evenly spaced frames of an episode.
pub fn reconstruction_panel(
    world: &WorldModel,
    ep: &EpisodeRecord,
    border: [u8; 3],
    rng: &mut RandomSource,
) -> Result<viz::RgbImage> {
    let (obs, act) = episode_tensors(ep)?;
    let observed = world.observe_sequence(&obs, &act, rng)?;
    let z = SplitLatentState {
        task: observed.task.flat_states()?,
        background: observed.background.flat_states()?,
    };
    let rec = world.decode_joint(&z)?;
    let t = ep.len();
    let frames: Vec<usize> = (0..6.min(t)).map(|i| i * (t - 1) / 5).collect();
    let rows = viz::panel_rows(&obs.squeeze(0)?, &rec, &frames)?;
    viz::render_panel(&rows, border)
}

/// Mean learned-mask IoU against the true sprite masks over an episode.
pub fn episode_mask_iou(
    world: &WorldModel,
    ep: &EpisodeRecord,
    truth: &[Vec<bool>],
    rng: &mut RandomSource,
) -> Result<f64> {
    let (obs, act) = episode_tensors(ep)?;
    let observed = world.observe_sequence(&obs, &act, rng)?;
    let z = SplitLatentState {
        task: observed.task.flat_states()?,
        background: observed.background.flat_states()?,
    };
    let mask = world
        .decode_joint(&z)?
        .mask_final
        .flatten_from(1)?
        .to_dtype(DType::F32)?;
    let rows: Vec<Vec<f32>> = mask.to_vec2()?;
    let total: f64 = rows
        .iter()
        .zip(truth)
        .map(|(m, t)| {
            let pred: Vec<bool> = m.iter().map(|&v| v >= 0.5).collect();
            mask_iou(&pred, t)
        })
        .sum();
    Ok(total / rows.len().max(1) as f64)
}

/// `episodes` deterministic rollouts: mean and std of the true return and
/// the mean mask IoU.
pub fn evaluate_policy(
    models: &Models,
    env: &mut DistractedPointMass,
    episodes: usize,
    rng: &mut RandomSource,
) -> Result<EvalStats> {
    if episodes == 0 {
        return Err(Error::Invalid("evaluation needs at least one episode".into()));
    }
    let mut returns = Vec::with_capacity(episodes);
    let mut ious = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut truth = Vec::new();
        let ep = models.rollout(env, ActMode::Eval, rng, |env| {
            truth.push(env.ground_truth_mask()?.mask);
            Ok(())
        })?;
        returns.push(ep.eval_return());
        let mut iou_rng = rng.fork();
        ious.push(episode_mask_iou(&models.world, &ep, &truth, &mut iou_rng)?);
    }
    let (mean, std) = mean_std(&returns);
    Ok(EvalStats {
        mean_return: mean,
        std_return: std,
        mask_iou: ious.iter().sum::<f64>() / ious.len() as f64,
    })
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Output locations of a run.
#[derive(Debug, Clone)]
pub struct RunOutputs {
    pub dir: PathBuf,
}

impl RunOutputs {
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.semail")
    }

    pub fn viz_dir(&self) -> PathBuf {
        self.dir.join("viz")
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub iterations: usize,
    pub evaluations: Vec<EvalStats>,
}

/// Seeds, then alternates training blocks with collection, evaluating and
/// checkpointing every `eval_every` collected episodes and at the end.
pub fn run(
    cfg: ExperimentConfig,
    demos: Vec<EpisodeRecord>,
    out: Option<&RunOutputs>,
) -> Result<(TrainState, RunSummary)> {
    let mut sink: Box<dyn MetricsSink> = match out {
        Some(o) => {
            std::fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
            Box::new(CsvMetrics::create(&o.metrics())?)
        }
        None => Box::new(Vec::new()),
    };
    let mut state = TrainState::new(cfg, demos)?;
    state.seed_phase(state.cfg.seed_episodes)?;
    let mut evaluations = Vec::new();
    let collect = state.cfg.episodes.saturating_sub(state.cfg.seed_episodes);
    for ep in 0..collect {
        for _ in 0..state.cfg.train_iters_per_episode {
            let stats = state.train_iteration()?;
            sink.record(&state.metrics_row(&stats))?;
        }
        state.collect_episode()?;
        let last = ep + 1 == collect;
        if (ep + 1) % state.cfg.eval_every == 0 || last {
            let eval = state.evaluate(state.cfg.eval_episodes)?;
            sink.record(&MetricsRow {
                step: state.step,
                episode: state.episode,
                eval_return: Some(eval.mean_return),
                mask_iou: Some(eval.mask_iou),
                ..MetricsRow::default()
            })?;
            evaluations.push(eval);
            if let Some(o) = out {
                state.save_checkpoint(&o.checkpoint())?;
                state.dump_visualizations(&o.viz_dir(), &format!("ep{:04}", state.episode))?;
            }
        }
    }
    let iterations = state.step;
    Ok((
        state,
        RunSummary {
            iterations,
            evaluations,
        },
    ))
}

/// Mean returns of the scripted expert and of uniform random actions, the
/// anchors of the normalized score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreAnchors {
    pub random: f64,
    pub expert: f64,
}

impl ScoreAnchors {
    pub fn measure(params: &PointMassParams, expert_gain: f64, episodes: usize, seed: u64) -> Result<Self> {
        let mut env = DistractedPointMass::new(params.clone());
        let mut rng = RandomSource::new(seed ^ 0xA11C_0000);
        let expert = crate::env::ScriptedExpert { gain: expert_gain };
        let mut e = Vec::new();
        let mut r = Vec::new();
        for _ in 0..episodes {
            e.push(run_episode(&mut env, &mut rng, true, |env, _, _| Ok(expert.act(env)))?.eval_return());
            r.push(run_episode(&mut env, &mut rng, false, |_, _, rng| Ok(random_action(rng)))?.eval_return());
        }
        Ok(Self {
            random: mean_std(&r).0,
            expert: mean_std(&e).0,
        })
    }

    /// `(return - random) / (expert - random)`.
    pub fn normalize(&self, ret: f64) -> f64 {
        (ret - self.random) / (self.expert - self.random)
    }
}
