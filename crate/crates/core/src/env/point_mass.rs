use std::f64::consts::TAU;

use crate::episode::{Action, EpisodeRecord, ImageObservation};
use crate::error::{Error, Result};
use crate::rng::RandomSource;

pub const ACTION_DIM: usize = 2;

const SPRITE_COLOR: [f32; 3] = [0.95, 0.35, 0.10];

/// Spatial frequency of the scrolling background stripes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StripePattern {
    /// Two stripe cycles per frame height.
    A,
    /// Five stripe cycles per frame height.
    B,
}

impl StripePattern {
    fn cycles(self) -> f64 {
        match self {
            StripePattern::A => 2.0,
            StripePattern::B => 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointMassParams {
    pub image_size: usize,
    pub step_size: f64,
    /// Environment steps per episode, before action repeat.
    pub max_steps: usize,
    pub action_repeat: usize,
    /// Phase advance of the stripes per environment step, in radians.
    pub background_velocity: f64,
    /// Hidden target. Not rendered.
    pub goal: [f64; 2],
    pub pattern: StripePattern,
}

impl Default for PointMassParams {
    fn default() -> Self {
        Self {
            image_size: 32,
            step_size: 0.1,
            max_steps: 100,
            action_repeat: 2,
            background_velocity: 0.25,
            goal: [0.5, -0.4],
            pattern: StripePattern::A,
        }
    }
}

impl PointMassParams {
    pub fn from_config(cfg: &crate::config::ExperimentConfig, pattern: StripePattern) -> Self {
        Self {
            image_size: cfg.image_size,
            step_size: cfg.step_size,
            max_steps: cfg.max_steps,
            action_repeat: cfg.action_repeat,
            background_velocity: cfg.background_velocity,
            pattern,
            ..Self::default()
        }
    }

    pub fn sprite_side(&self) -> usize {
        ((self.image_size as f64 / 6.0).round() as usize).max(1)
    }

    /// Agent decisions per episode.
    pub fn episode_len(&self) -> usize {
        self.max_steps / self.action_repeat
    }
}

/// Binary `H x W` mask of the agent sprite in the latest frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthSegmentation {
    pub size: usize,
    pub mask: Vec<bool>,
}

impl GroundTruthSegmentation {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub observation: ImageObservation,
    /// Negative goal distance summed over the repeats. Evaluation only.
    pub eval_reward: f64,
    pub done: bool,
}

/// A point agent moving in `[-1, 1]^2` over an autonomously scrolling
/// stripe background. The background never reads the action.
#[derive(Debug, Clone)]
pub struct DistractedPointMass {
    params: PointMassParams,
    agent_pos: [f64; 2],
    phase: f64,
    env_steps: usize,
    rendered: bool,
}

impl DistractedPointMass {
    pub fn new(params: PointMassParams) -> Self {
        Self {
            params,
            agent_pos: [0.0; 2],
            phase: 0.0,
            env_steps: 0,
            rendered: false,
        }
    }

    pub fn params(&self) -> &PointMassParams {
        &self.params
    }

    pub fn agent_pos(&self) -> [f64; 2] {
        self.agent_pos
    }

    pub fn goal_pos(&self) -> [f64; 2] {
        self.params.goal
    }

    pub fn background_phase(&self) -> f64 {
        self.phase
    }

    pub fn is_done(&self) -> bool {
        self.env_steps >= self.params.max_steps
    }

    pub fn reset(&mut self, rng: &mut RandomSource) -> ImageObservation {
        self.agent_pos = [rng.uniform_range(-0.8, 0.8), rng.uniform_range(-0.8, 0.8)];
        self.phase = rng.uniform_range(0.0, TAU);
        self.env_steps = 0;
        self.render()
    }

    /// Places the agent directly. Test and evaluation hook.
    pub fn set_state(&mut self, agent_pos: [f64; 2], phase: f64) {
        self.agent_pos = agent_pos.map(|v| v.clamp(-1.0, 1.0));
        self.phase = phase;
        self.env_steps = 0;
    }

    pub fn step(&mut self, action: &Action) -> Result<StepOutcome> {
        if self.is_done() {
            return Err(Error::Env("step called on a finished episode".into()));
        }
        if action.dim() != ACTION_DIM {
            return Err(Error::Shape(format!(
                "expected a {ACTION_DIM}-d action, got {}",
                action.dim()
            )));
        }
        let a = action.values();
        let mut reward = 0.0;
        for _ in 0..self.params.action_repeat {
            for (p, &da) in self.agent_pos.iter_mut().zip(a) {
                *p = (*p + self.params.step_size * da as f64).clamp(-1.0, 1.0);
            }
            self.phase += self.params.background_velocity;
            let [gx, gy] = self.params.goal;
            reward -= ((self.agent_pos[0] - gx).powi(2) + (self.agent_pos[1] - gy).powi(2)).sqrt();
            self.env_steps += 1;
            if self.is_done() {
                break;
            }
        }
        Ok(StepOutcome {
            observation: self.render(),
            eval_reward: reward,
            done: self.is_done(),
        })
    }

    fn sprite_bounds(&self) -> (i64, i64, i64, i64) {
        let n = self.params.image_size as f64;
        let side = self.params.sprite_side() as i64;
        let col = ((self.agent_pos[0] + 1.0) / 2.0 * (n - 1.0)).round() as i64;
        let row = ((1.0 - self.agent_pos[1]) / 2.0 * (n - 1.0)).round() as i64;
        let r0 = row - side / 2;
        let c0 = col - side / 2;
        (r0, r0 + side, c0, c0 + side)
    }

    fn in_sprite(&self, row: usize, col: usize) -> bool {
        let (r0, r1, c0, c1) = self.sprite_bounds();
        let (r, c) = (row as i64, col as i64);
        (r0..r1).contains(&r) && (c0..c1).contains(&c)
    }

    fn stripe_color(&self, row: usize) -> [f32; 3] {
        let n = self.params.image_size as f64;
        let s = 0.5 + 0.5 * (TAU * self.params.pattern.cycles() * row as f64 / n + self.phase).sin();
        let s = s as f32;
        [0.15 + 0.6 * s, 0.15 + 0.6 * s, 0.25 + 0.6 * s]
    }

    /// Full frame: sprite composited over the background.
    pub fn render(&mut self) -> ImageObservation {
        self.rendered = true;
        let n = self.params.image_size;
        let mut pixels = Vec::with_capacity(n * n * 3);
        for row in 0..n {
            let bg = self.stripe_color(row);
            for col in 0..n {
                let c = if self.in_sprite(row, col) { SPRITE_COLOR } else { bg };
                pixels.extend_from_slice(&c);
            }
        }
        ImageObservation::new(n, pixels).expect("rendered pixels lie in [0, 1]")
    }

    /// Background layer alone, as it would look without the agent.
    pub fn render_background(&self) -> ImageObservation {
        let n = self.params.image_size;
        let mut pixels = Vec::with_capacity(n * n * 3);
        for row in 0..n {
            let bg = self.stripe_color(row);
            for _ in 0..n {
                pixels.extend_from_slice(&bg);
            }
        }
        ImageObservation::new(n, pixels).expect("stripe colors lie in [0, 1]")
    }

    /// Sprite layer alone over black.
    pub fn render_sprite_layer(&self) -> ImageObservation {
        let n = self.params.image_size;
        let mut pixels = Vec::with_capacity(n * n * 3);
        for row in 0..n {
            for col in 0..n {
                let c = if self.in_sprite(row, col) {
                    SPRITE_COLOR
                } else {
                    [0.0; 3]
                };
                pixels.extend_from_slice(&c);
            }
        }
        ImageObservation::new(n, pixels).expect("sprite colors lie in [0, 1]")
    }

    pub fn ground_truth_mask(&self) -> Result<GroundTruthSegmentation> {
        if !self.rendered {
            return Err(Error::Env("ground_truth_mask requested before any render".into()));
        }
        let n = self.params.image_size;
        let mask = (0..n * n).map(|i| self.in_sprite(i / n, i % n)).collect();
        Ok(GroundTruthSegmentation { size: n, mask })
    }
}

/// Proportional controller toward the hidden goal.
#[derive(Debug, Clone, Copy)]
pub struct ScriptedExpert {
    pub gain: f64,
}

impl Default for ScriptedExpert {
    fn default() -> Self {
        Self { gain: 0.5 }
    }
}

impl ScriptedExpert {
    pub fn act(&self, env: &DistractedPointMass) -> Action {
        let p = env.agent_pos();
        let g = env.goal_pos();
        Action::clipped([self.gain * (g[0] - p[0]), self.gain * (g[1] - p[1])])
    }
}

/// Rolls one full episode, asking `policy` for each action.
pub fn run_episode(
    env: &mut DistractedPointMass,
    rng: &mut RandomSource,
    is_expert: bool,
    mut policy: impl FnMut(&DistractedPointMass, &ImageObservation, &mut RandomSource) -> Result<Action>,
) -> Result<EpisodeRecord> {
    let mut obs = env.reset(rng);
    let mut observations = vec![obs.clone()];
    let mut actions = Vec::new();
    let mut rewards = Vec::new();
    loop {
        let action = policy(env, &obs, rng)?;
        let out = env.step(&action)?;
        actions.push(action);
        rewards.push(out.eval_reward as f32);
        observations.push(out.observation.clone());
        obs = out.observation;
        if out.done {
            break;
        }
    }
    EpisodeRecord::new(observations, actions, rewards, is_expert)
}

pub fn random_action(rng: &mut RandomSource) -> Action {
    Action::clipped([rng.uniform_range(-1.0, 1.0), rng.uniform_range(-1.0, 1.0)])
}

pub fn collect_demonstrations(
    env: &mut DistractedPointMass,
    expert: &ScriptedExpert,
    n: usize,
    rng: &mut RandomSource,
) -> Result<Vec<EpisodeRecord>> {
    if n == 0 {
        return Err(Error::Invalid("at least one demonstration is required".into()));
    }
    (0..n)
        .map(|_| run_episode(env, rng, true, |env, _, _| Ok(expert.act(env))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env() -> DistractedPointMass {
        DistractedPointMass::new(PointMassParams::default())
    }

    #[test]
    fn reset_is_seeded() {
        let (mut a, mut b) = (env(), env());
        let fa = a.reset(&mut RandomSource::new(5));
        let fb = b.reset(&mut RandomSource::new(5));
        assert_eq!(fa, fb);
        let fc = b.reset(&mut RandomSource::new(6));
        assert_ne!(fa, fc);
        assert!(fa.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn step_moves_by_step_size_times_repeat() {
        let mut e = env();
        e.set_state([0.0, 0.0], 0.0);
        e.step(&Action::new(vec![1.0, 0.0]).unwrap()).unwrap();
        let p = e.agent_pos();
        assert!((p[0] - 0.2).abs() < 1e-12 && p[1] == 0.0, "{p:?}");
    }

    #[test]
    fn position_is_clipped() {
        let mut e = env();
        e.set_state([0.95, 0.0], 0.0);
        e.step(&Action::new(vec![1.0, 0.0]).unwrap()).unwrap();
        assert_eq!(e.agent_pos(), [1.0, 0.0]);
    }

    #[test]
    fn background_moves_without_action() {
        let mut e = env();
        e.set_state([0.1, 0.1], 0.3);
        let zero = Action::zeros(2);
        let first = e.step(&zero).unwrap().observation;
        let phase1 = e.background_phase();
        let second = e.step(&zero).unwrap().observation;
        assert_eq!(e.agent_pos(), [0.1, 0.1]);
        assert_ne!(phase1, e.background_phase());
        assert_ne!(first, second);
    }

    #[test]
    fn background_phase_ignores_actions() {
        let mut rng = RandomSource::new(9);
        let mut a = env();
        let mut b = env();
        a.reset(&mut rng.clone());
        b.reset(&mut rng.clone());
        for _ in 0..20 {
            a.step(&random_action(&mut rng)).unwrap();
            b.step(&Action::new(vec![-1.0, 1.0]).unwrap()).unwrap();
            assert_eq!(a.background_phase().to_bits(), b.background_phase().to_bits());
        }
    }

    #[test]
    fn episode_terminates_and_rejects_further_steps() {
        let mut e = env();
        let mut rng = RandomSource::new(1);
        let ep = run_episode(&mut e, &mut rng, false, |_, _, r| Ok(random_action(r))).unwrap();
        assert_eq!(ep.len(), 50);
        assert!(e.step(&Action::zeros(2)).is_err());
    }

    #[test]
    fn expert_at_goal_stays_put() {
        let mut e = env();
        e.set_state(e.goal_pos(), 0.0);
        let a = ScriptedExpert::default().act(&e);
        assert!(a.values().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn sprite_mask_counts_square_pixels() {
        let mut e = env();
        e.set_state([0.0, 0.0], 0.0);
        e.render();
        let mask = e.ground_truth_mask().unwrap();
        // count by direct rasterization of the bounds
        let side = e.params().sprite_side();
        assert_eq!(side, 5);
        assert_eq!(mask.count(), side * side);
    }

    #[test]
    fn mask_requires_render() {
        assert!(env().ground_truth_mask().is_err());
    }

    #[test]
    fn full_render_differs_from_background_exactly_on_mask() {
        let mut e = env();
        let full = e.reset(&mut RandomSource::new(21));
        let bg = e.render_background();
        let mask = e.ground_truth_mask().unwrap();
        let n = e.params().image_size;
        for i in 0..n * n {
            let differs = full.pixel(i / n, i % n) != bg.pixel(i / n, i % n);
            assert_eq!(differs, mask.mask[i], "pixel {i}");
        }
    }
}
