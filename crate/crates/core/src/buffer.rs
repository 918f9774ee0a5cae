use std::collections::VecDeque;

use candle_core::{DType, Device, Tensor};

use crate::episode::EpisodeRecord;
use crate::error::{Error, Result};
use crate::rng::RandomSource;

/// FIFO episode store. The oldest episode is evicted once `capacity` is hit.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    episodes: VecDeque<EpisodeRecord>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay buffer capacity must be positive");
        Self {
            episodes: VecDeque::new(),
            capacity,
        }
    }

    pub fn add_episode(&mut self, episode: EpisodeRecord) -> Result<()> {
        if let Some(first) = self.episodes.front() {
            if first.image_size() != episode.image_size() || first.action_dim() != episode.action_dim() {
                return Err(Error::Shape(format!(
                    "episode with image {} / action dim {} does not match buffer ({} / {})",
                    episode.image_size(),
                    episode.action_dim(),
                    first.image_size(),
                    first.action_dim()
                )));
            }
        }
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(episode);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn episodes(&self) -> impl Iterator<Item = &EpisodeRecord> {
        self.episodes.iter()
    }

    pub fn get(&self, index: usize) -> Option<&EpisodeRecord> {
        self.episodes.get(index)
    }

    fn eligible(&self, length: usize) -> impl Iterator<Item = (&EpisodeRecord, usize)> {
        self.episodes
            .iter()
            .filter(move |ep| ep.len() >= length)
            .map(move |ep| (ep, ep.len() - length + 1))
    }
}

/// Fixed-length windows of `(observation, action)` pairs.
///
/// Row `b`, step `t` holds observation `o_t` and the action `a_t` taken after
/// it, so `observations[b, t + 1]` is the stored successor of
/// `(observations[b, t], actions[b, t])`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    pub batch: usize,
    pub length: usize,
    pub image_size: usize,
    pub action_dim: usize,
    /// `[B, L, H, W, 3]`
    pub observations: Vec<f32>,
    /// `[B, L, A]`
    pub actions: Vec<f32>,
    /// `true` for rows drawn from the expert buffer.
    pub source_flags: Vec<bool>,
}

impl SequenceBatch {
    fn frame_len(&self) -> usize {
        self.image_size * self.image_size * 3
    }

    pub fn observation(&self, row: usize, t: usize) -> &[f32] {
        let f = self.frame_len();
        let start = (row * self.length + t) * f;
        &self.observations[start..start + f]
    }

    pub fn action(&self, row: usize, t: usize) -> &[f32] {
        let start = (row * self.length + t) * self.action_dim;
        &self.actions[start..start + self.action_dim]
    }

    /// Observations as a channels-first tensor `[B, L, 3, H, W]` in `[0, 1]`.
    pub fn observation_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let (b, l, h) = (self.batch, self.length, self.image_size);
        let t = Tensor::from_slice(&self.observations, (b, l, h, h, 3), device)?;
        Ok(t.permute((0, 1, 4, 2, 3))?.contiguous()?.to_dtype(dtype)?)
    }

    /// Actions as `[B, L, A]`.
    pub fn action_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.actions, (self.batch, self.length, self.action_dim), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Keeps only the listed rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> SequenceBatch {
        let f = self.frame_len() * self.length;
        let a = self.action_dim * self.length;
        SequenceBatch {
            batch: rows.len(),
            length: self.length,
            image_size: self.image_size,
            action_dim: self.action_dim,
            observations: rows
                .iter()
                .flat_map(|&r| self.observations[r * f..(r + 1) * f].iter().copied())
                .collect(),
            actions: rows
                .iter()
                .flat_map(|&r| self.actions[r * a..(r + 1) * a].iter().copied())
                .collect(),
            source_flags: rows.iter().map(|&r| self.source_flags[r]).collect(),
        }
    }
}

/// Draws `batch` windows of `length` steps, uniform over every eligible
/// `(episode, start)` pair in the union of both buffers.
pub fn sample_union_sequences(
    agent: &ReplayBuffer,
    expert: &ReplayBuffer,
    batch: usize,
    length: usize,
    rng: &mut RandomSource,
) -> Result<SequenceBatch> {
    if length == 0 || batch == 0 {
        return Err(Error::Invalid("batch and length must be positive".into()));
    }
    let pool: Vec<(&EpisodeRecord, usize)> = agent.eligible(length).chain(expert.eligible(length)).collect();
    let total: usize = pool.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(Error::NoEligibleEpisode(length));
    }
    let image_size = pool[0].0.image_size();
    let action_dim = pool[0].0.action_dim();
    if pool
        .iter()
        .any(|(ep, _)| ep.image_size() != image_size || ep.action_dim() != action_dim)
    {
        return Err(Error::Shape("agent and expert episodes disagree on shapes".into()));
    }

    let frame = image_size * image_size * 3;
    let mut out = SequenceBatch {
        batch,
        length,
        image_size,
        action_dim,
        observations: Vec::with_capacity(batch * length * frame),
        actions: Vec::with_capacity(batch * length * action_dim),
        source_flags: Vec::with_capacity(batch),
    };
    for _ in 0..batch {
        let mut pick = rng.below(total);
        let (episode, start) = pool
            .iter()
            .find_map(|&(ep, n)| {
                if pick < n {
                    Some((ep, pick))
                } else {
                    pick -= n;
                    None
                }
            })
            .expect("pick is below the total start count");
        for t in start..start + length {
            out.observations.extend_from_slice(episode.observations()[t].pixels());
            out.actions.extend_from_slice(episode.actions()[t].values());
        }
        out.source_flags.push(episode.is_expert());
    }
    Ok(out)
}
