//! Experiment configuration.
//!
//! The on-disk format is flat `key = value` text, one entry per line, with
//! `#` comments. Keys are exactly the field names of [`ExperimentConfig`];
//! missing keys take their defaults and unknown keys are rejected.

use std::path::Path;

use crate::error::{Error, Result};

macro_rules! config_struct {
    ($( $(#[$doc:meta])* $field:ident : $ty:ty = $default:expr ),* $(,)?) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct ExperimentConfig {
            $( $(#[$doc])* pub $field: $ty, )*
        }

        impl Default for ExperimentConfig {
            fn default() -> Self {
                Self { $( $field: $default, )* }
            }
        }

        impl ExperimentConfig {
            /// Every recognised key, in serialization order.
            pub const KEYS: &'static [&'static str] = &[ $( stringify!($field), )* ];

            /// Sets one field from its textual value without validating the
            /// config as a whole.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($field) => {
                        self.$field = <$ty as ConfigValue>::parse_value(value).ok_or_else(|| {
                            Error::Config(format!("cannot parse {value:?} for key `{key}`"))
                        })?;
                    } )*
                    other => return Err(Error::Config(format!("unknown key `{other}`"))),
                }
                Ok(())
            }

            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $( out.push_str(&format!("{} = {}\n", stringify!($field), self.$field.render())); )*
                out
            }
        }
    };
}

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Option<Self>;
    fn render(&self) -> String;
}

impl ConfigValue for f64 {
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn render(&self) -> String {
        format!("{self:?}")
    }
}

impl ConfigValue for usize {
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for u64 {
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for bool {
    fn parse_value(s: &str) -> Option<Self> {
        match s {
            "true" | "1" => Some(true),
            "false" | "0" => Some(false),
            _ => None,
        }
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

config_struct! {
    /// Discount factor for imagined returns.
    discount: f64 = 0.99,
    action_repeat: usize = 2,
    imagination_horizon: usize = 15,
    /// Weight of the background-only reconstruction term.
    bor_weight: f64 = 1.5,
    model_lr: f64 = 6e-5,
    /// Learning rate shared by actor, value function and discriminator.
    ac_disc_lr: f64 = 8e-5,
    grad_clip_norm: f64 = 100.0,
    gp_weight: f64 = 1.0,
    exploration_noise_std: f64 = 0.3,
    seed_episodes: usize = 5,
    train_iters_per_episode: usize = 100,
    num_expert_demos: usize = 10,
    deter_size: usize = 200,
    stoch_size: usize = 30,
    dense_units: usize = 300,
    batch: usize = 64,
    seq_len: usize = 50,
    /// Per-branch, per-step KL floor.
    free_nats: f64 = 3.0,
    return_lambda: f64 = 0.95,
    kl_beta: f64 = 1.0,
    /// Ablation: condition the background dynamics on actions.
    no_act: bool = false,
    /// Ablation: drop the background-only reconstruction term.
    no_bor: bool = false,
    image_size: usize = 32,

    seed: u64 = 0,
    /// Floor added to the softplus stddev of latent Gaussians.
    min_std: f64 = 0.1,
    /// Channel multiplier of the convolutional encoders and decoders.
    cnn_depth: usize = 16,
    /// Environment steps per episode, counted before action repeat.
    max_steps: usize = 100,
    step_size: f64 = 0.1,
    background_velocity: f64 = 0.25,
    expert_gain: f64 = 0.5,
    buffer_capacity: usize = 1000,
    /// Total agent episodes, seed episodes included.
    episodes: usize = 200,
    eval_every: usize = 10,
    eval_episodes: usize = 10,
    /// Imagination start states per iteration; 0 uses every filtered state.
    imagine_starts: usize = 0,
    entropy_weight: f64 = 0.0,
    /// Agent trains on stripe pattern B while demos use pattern A.
    non_overlap: bool = false,
    /// Baseline without separation: the task branch alone explains the frame.
    single_branch: bool = false,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(0.0..1.0).contains(&self.discount) {
            return fail(format!("discount must lie in [0, 1), got {}", self.discount));
        }
        if self.imagination_horizon < 2 {
            return fail(format!(
                "imagination_horizon must be >= 2, got {}",
                self.imagination_horizon
            ));
        }
        for (name, lr) in [("model_lr", self.model_lr), ("ac_disc_lr", self.ac_disc_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return fail(format!("{name} must be positive, got {lr}"));
            }
        }
        for (name, v) in [
            ("bor_weight", self.bor_weight),
            ("gp_weight", self.gp_weight),
            ("free_nats", self.free_nats),
            ("kl_beta", self.kl_beta),
            ("exploration_noise_std", self.exploration_noise_std),
            ("entropy_weight", self.entropy_weight),
            ("step_size", self.step_size),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be a finite value >= 0, got {v}"));
            }
        }
        if !(self.grad_clip_norm > 0.0) {
            return fail(format!("grad_clip_norm must be positive, got {}", self.grad_clip_norm));
        }
        if !(self.min_std > 0.0) {
            return fail(format!("min_std must be positive, got {}", self.min_std));
        }
        if !(0.0..=1.0).contains(&self.return_lambda) {
            return fail(format!("return_lambda must lie in [0, 1], got {}", self.return_lambda));
        }
        if !self.image_size.is_power_of_two() || self.image_size < 8 {
            return fail(format!(
                "image_size must be a power of two >= 8, got {}",
                self.image_size
            ));
        }
        for (name, v) in [
            ("action_repeat", self.action_repeat),
            ("deter_size", self.deter_size),
            ("stoch_size", self.stoch_size),
            ("dense_units", self.dense_units),
            ("batch", self.batch),
            ("seq_len", self.seq_len),
            ("cnn_depth", self.cnn_depth),
            ("buffer_capacity", self.buffer_capacity),
            ("eval_every", self.eval_every),
            ("eval_episodes", self.eval_episodes),
            ("num_expert_demos", self.num_expert_demos),
        ] {
            if v == 0 {
                return fail(format!("{name} must be >= 1"));
            }
        }
        if self.seq_len > self.episode_len() {
            return fail(format!(
                "seq_len {} exceeds the episode length {} (max_steps / action_repeat)",
                self.seq_len,
                self.episode_len()
            ));
        }
        if self.no_act && self.single_branch {
            return fail("no_act and single_branch are mutually exclusive".into());
        }
        Ok(())
    }

    /// Agent decisions per episode.
    pub fn episode_len(&self) -> usize {
        self.max_steps / self.action_repeat.max(1)
    }

    /// BoR weight after applying the `no_bor` and `single_branch` switches.
    pub fn effective_bor_weight(&self) -> f64 {
        if self.no_bor || self.single_branch {
            0.0
        } else {
            self.bor_weight
        }
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ExperimentConfig::parse(&text)
}
