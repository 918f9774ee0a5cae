//! Observations, actions, episodes and the episode file format.
//!
//! An episode file is a single ASCII header line
//!
//! ```text
//! SEMAIL-EPISODE 1 T=<steps> H=<height> W=<width> A=<action dim> expert=<0|1>
//! ```
//!
//! followed by three shape-prefixed little-endian `f32` arrays:
//! observations `[T+1, H, W, 3]`, actions `[T, A]` and rewards `[T]`.
//! A shape prefix is a `u32` rank followed by that many `u32` extents.

use std::path::Path;

use crate::error::{Error, Result};

pub const EPISODE_MAGIC: &str = "SEMAIL-EPISODE";
pub const EPISODE_VERSION: u32 = 1;

/// Square RGB frame, row-major `H x W x 3`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageObservation {
    size: usize,
    pixels: Vec<f32>,
}

impl ImageObservation {
    pub fn new(size: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != size * size * 3 {
            return Err(Error::Shape(format!(
                "image of size {size} needs {} values, got {}",
                size * size * 3,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self { size, pixels })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.size + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Action(Vec<f32>);

impl Action {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!("action component {bad} outside [-1, 1]")));
        }
        Ok(Self(values))
    }

    /// Clips every component into `[-1, 1]`; non-finite components become 0.
    pub fn clipped(values: impl IntoIterator<Item = f64>) -> Self {
        Self(
            values
                .into_iter()
                .map(|v| if v.is_finite() { v.clamp(-1.0, 1.0) as f32 } else { 0.0 })
                .collect(),
        )
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    observations: Vec<ImageObservation>,
    actions: Vec<Action>,
    env_rewards: Vec<f32>,
    is_expert: bool,
}

impl EpisodeRecord {
    pub fn new(
        observations: Vec<ImageObservation>,
        actions: Vec<Action>,
        env_rewards: Vec<f32>,
        is_expert: bool,
    ) -> Result<Self> {
        if observations.len() != actions.len() + 1 || actions.is_empty() {
            return Err(Error::EpisodeLength {
                observations: observations.len(),
                actions: actions.len(),
            });
        }
        if env_rewards.len() != actions.len() {
            return Err(Error::Invalid(format!(
                "{} rewards for {} actions",
                env_rewards.len(),
                actions.len()
            )));
        }
        let size = observations[0].size();
        if observations.iter().any(|o| o.size() != size) {
            return Err(Error::Shape("observations of differing sizes".into()));
        }
        let dim = actions[0].dim();
        if actions.iter().any(|a| a.dim() != dim) {
            return Err(Error::Shape("actions of differing dimension".into()));
        }
        Ok(Self {
            observations,
            actions,
            env_rewards,
            is_expert,
        })
    }

    /// Number of actions `T`.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn observations(&self) -> &[ImageObservation] {
        &self.observations
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    pub fn is_expert(&self) -> bool {
        self.is_expert
    }

    pub fn image_size(&self) -> usize {
        self.observations[0].size()
    }

    pub fn action_dim(&self) -> usize {
        self.actions[0].dim()
    }

    /// Ground-truth environment rewards. Evaluation only: nothing on the
    /// learning path reads these.
    pub fn eval_rewards(&self) -> &[f32] {
        &self.env_rewards
    }

    pub fn eval_return(&self) -> f64 {
        self.env_rewards.iter().map(|&r| r as f64).sum()
    }

    pub fn encode(&self) -> Vec<u8> {
        let t = self.len();
        let h = self.image_size();
        let a = self.action_dim();
        let mut out = format!(
            "{EPISODE_MAGIC} {EPISODE_VERSION} T={t} H={h} W={h} A={a} expert={}\n",
            u8::from(self.is_expert)
        )
        .into_bytes();
        write_array(
            &mut out,
            &[t + 1, h, h, 3],
            self.observations.iter().flat_map(|o| o.pixels.iter().copied()),
        );
        write_array(&mut out, &[t, a], self.actions.iter().flat_map(|x| x.0.iter().copied()));
        write_array(&mut out, &[t], self.env_rewards.iter().copied());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format("episode", "missing header line"))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::format("episode", "header is not UTF-8"))?;
        let header = parse_header(header)?;
        let mut cursor = Cursor::new(&bytes[nl + 1..]);

        let obs = cursor.array("observations", 4)?;
        let h = header.height;
        if obs.shape != [header.steps + 1, h, h, 3] {
            return Err(Error::format(
                "episode",
                format!("observation shape {:?} disagrees with header", obs.shape),
            ));
        }
        let acts = cursor.array("actions", 2)?;
        if acts.shape != [header.steps, header.action_dim] {
            return Err(Error::format(
                "episode",
                format!("action shape {:?} disagrees with header", acts.shape),
            ));
        }
        let rewards = cursor.array("rewards", 1)?;
        if rewards.shape != [header.steps] {
            return Err(Error::format(
                "episode",
                format!("reward shape {:?} disagrees with header", rewards.shape),
            ));
        }
        if !cursor.is_empty() {
            return Err(Error::format("episode", "trailing bytes after reward array"));
        }

        let frame = h * h * 3;
        let observations = obs
            .data
            .chunks_exact(frame.max(1))
            .map(|c| ImageObservation::new(h, c.to_vec()))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::format("episode", e.to_string()))?;
        let actions = acts
            .data
            .chunks_exact(header.action_dim.max(1))
            .map(|c| Action::new(c.to_vec()))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::format("episode", e.to_string()))?;
        if rewards.data.iter().any(|r| !r.is_finite()) {
            return Err(Error::format("episode", "non-finite reward"));
        }
        EpisodeRecord::new(observations, actions, rewards.data, header.is_expert)
            .map_err(|e| Error::format("episode", e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

struct Header {
    steps: usize,
    height: usize,
    action_dim: usize,
    is_expert: bool,
}

fn parse_header(line: &str) -> Result<Header> {
    let mut parts = line.split(' ');
    if parts.next() != Some(EPISODE_MAGIC) {
        return Err(Error::format("episode", "bad magic"));
    }
    let version: u32 = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::format("episode", "missing version"))?;
    if version != EPISODE_VERSION {
        return Err(Error::format("episode", format!("unsupported version {version}")));
    }
    let mut field = |name: &str| -> Result<usize> {
        let part = parts
            .next()
            .ok_or_else(|| Error::format("episode", format!("missing header field {name}")))?;
        part.strip_prefix(name)
            .and_then(|rest| rest.strip_prefix('='))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::format("episode", format!("bad header field {part:?}")))
    };
    let steps = field("T")?;
    let height = field("H")?;
    let width = field("W")?;
    let action_dim = field("A")?;
    let expert = field("expert")?;
    if parts.next().is_some() {
        return Err(Error::format("episode", "unexpected header fields"));
    }
    if height != width {
        return Err(Error::format("episode", "non-square frames"));
    }
    if steps > u32::MAX as usize || height > 1 << 14 || action_dim > 1 << 16 {
        return Err(Error::format("episode", "header values out of range"));
    }
    if steps == 0 || height == 0 || action_dim == 0 || expert > 1 {
        return Err(Error::format("episode", "degenerate header values"));
    }
    Ok(Header {
        steps,
        height,
        action_dim,
        is_expert: expert == 1,
    })
}

pub(crate) struct ShapedArray {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub(crate) fn write_array(out: &mut Vec<u8>, shape: &[usize], data: impl Iterator<Item = f32>) {
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Bounds-checked little-endian reader shared by the binary formats.
pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
}

impl<'a> Cursor<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes }
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.bytes.len() < n {
            return None;
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Some(head)
    }

    pub fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn array(&mut self, what: &'static str, max_rank: usize) -> Result<ShapedArray> {
        let truncated = || Error::format("array", format!("{what}: truncated"));
        let rank = self.u32().ok_or_else(truncated)? as usize;
        if rank > max_rank {
            return Err(Error::format(
                "array",
                format!("{what}: rank {rank} exceeds {max_rank}"),
            ));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut count: usize = 1;
        for _ in 0..rank {
            let d = self.u32().ok_or_else(truncated)? as usize;
            count = count
                .checked_mul(d)
                .ok_or_else(|| Error::format("array", format!("{what}: element count overflows")))?;
            shape.push(d);
        }
        let nbytes = count
            .checked_mul(4)
            .ok_or_else(|| Error::format("array", format!("{what}: byte count overflows")))?;
        let raw = self.take(nbytes).ok_or_else(truncated)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(ShapedArray { shape, data })
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn toy_episode(t: usize, size: usize, expert: bool) -> EpisodeRecord {
        let obs = (0..=t)
            .map(|i| ImageObservation::new(size, vec![i as f32 / (t as f32 + 1.0); size * size * 3]).unwrap())
            .collect();
        let acts = (0..t)
            .map(|i| Action::new(vec![0.1 * (i % 3) as f32, -0.5]).unwrap())
            .collect();
        let rewards = (0..t).map(|i| -(i as f32)).collect();
        EpisodeRecord::new(obs, acts, rewards, expert).unwrap()
    }

    #[test]
    fn mismatched_lengths_rejected() {
        let obs = vec![ImageObservation::new(2, vec![0.0; 12]).unwrap(); 5];
        let acts = vec![Action::zeros(2); 5];
        let err = EpisodeRecord::new(obs, acts, vec![0.0; 5], false).unwrap_err();
        assert!(matches!(
            err,
            Error::EpisodeLength {
                observations: 5,
                actions: 5
            }
        ));
    }

    #[test]
    fn encode_decode_round_trip() {
        let ep = toy_episode(7, 4, true);
        let bytes = ep.encode();
        assert!(bytes.starts_with(b"SEMAIL-EPISODE 1 T=7 H=4 W=4 A=2 expert=1\n"));
        assert_eq!(EpisodeRecord::decode(&bytes).unwrap(), ep);
    }

    #[test]
    fn truncated_and_corrupt_files_rejected() {
        let bytes = toy_episode(3, 4, false).encode();
        for cut in [0, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(EpisodeRecord::decode(&bytes[..cut]).is_err());
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(EpisodeRecord::decode(&extra).is_err());
        let bad = String::from_utf8_lossy(&bytes).replacen("T=3", "T=4", 1);
        assert!(EpisodeRecord::decode(bad.as_bytes()).is_err());
    }

    #[test]
    fn pixel_range_enforced() {
        assert!(ImageObservation::new(1, vec![0.0, 1.5, 0.0]).is_err());
        assert!(Action::new(vec![1.01]).is_err());
        assert_eq!(Action::clipped([2.0, -3.0, f64::NAN]).values(), &[1.0, -1.0, 0.0]);
    }
}
