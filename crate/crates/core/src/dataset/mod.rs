//! Random-policy transition datasets.

mod format;
mod norm;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{EnvError, Image, NavConfig, NavEnv, NUM_ACTIONS};
use crate::rng::{mix_seed, stream_rng};

pub use format::{DATASET_MAGIC, DATASET_VERSION};
pub use norm::{NormMode, NormStats, NORM_EPS};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a dataset file (bad magic bytes)")]
    BadMagic,
    #[error(
        "dataset format version {found} is not supported (this build reads version {supported})"
    )]
    Version { found: u32, supported: u32 },
    #[error("dataset file truncated: {0}")]
    Truncated(String),
    #[error("dataset checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed dataset: {0}")]
    Malformed(String),
    #[error("cannot split: {0}")]
    Split(String),
    #[error("dimension mismatch: expected {expected}, got {found}")]
    Dimension { expected: usize, found: usize },
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// One environment step: `(obs, action, reward, next_obs)` plus bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionRecord {
    pub obs: Image,
    pub action: u8,
    pub reward: i8,
    pub next_obs: Image,
    pub episode_id: u64,
    pub step_index: u32,
    pub gt_state: Vec<f64>,
    pub next_gt_state: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub env: NavConfig,
    pub sample_count: usize,
    pub image_size: usize,
    pub collection_seed: u64,
    /// Index of the first validation record, if a split was recorded.
    pub split_marker: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<TransitionRecord>,
}

/// Borrowed run of whole episodes.
#[derive(Clone, Copy, Debug)]
pub struct DatasetView<'a> {
    pub records: &'a [TransitionRecord],
}

impl<'a> DatasetView<'a> {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn episode_ids(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.records.iter().map(|r| r.episode_id).collect();
        ids.dedup();
        ids
    }
}

/// Runs one uniform-random-action episode of at most `steps` transitions.
fn collect_episode(
    config: &NavConfig,
    seed: u64,
    episode_id: u64,
    steps: usize,
) -> Result<Vec<TransitionRecord>, DatasetError> {
    let mut env = NavEnv::new(config.clone())?;
    let mut actions = stream_rng(seed, episode_id.wrapping_mul(2) + 1);
    let mut current = env.reset(mix_seed(seed, episode_id.wrapping_mul(2)));
    let mut out = Vec::with_capacity(steps);
    for step_index in 0..steps {
        let action = actions.random_range(0..NUM_ACTIONS);
        let next = env.step(action)?;
        out.push(TransitionRecord {
            obs: current.observation,
            action: action as u8,
            reward: next.reward,
            next_obs: next.observation.clone(),
            episode_id,
            step_index: step_index as u32,
            gt_state: current.gt_state,
            next_gt_state: next.gt_state.clone(),
        });
        let done = next.done;
        current = next;
        if done {
            break;
        }
    }
    Ok(out)
}

/// Collects `n_samples` random-policy transitions, deterministic in `seed`.
pub fn collect(config: &NavConfig, n_samples: usize, seed: u64) -> Result<Dataset, DatasetError> {
    collect_with_workers(config, n_samples, seed, 1)
}

/// Like [`collect`], spreading episodes over `workers` threads. Episode
/// contents depend only on `(seed, episode_id)` and records are ordered by
/// `(episode_id, step_index)` before returning, so the result does not depend
/// on the worker count.
pub fn collect_with_workers(
    config: &NavConfig,
    n_samples: usize,
    seed: u64,
    workers: usize,
) -> Result<Dataset, DatasetError> {
    config.validate()?;
    if n_samples == 0 {
        return Err(DatasetError::Malformed(
            "n_samples must be at least 1".into(),
        ));
    }
    let per_episode = config.max_steps;
    let n_episodes = n_samples.div_ceil(per_episode);
    let plan: Vec<(u64, usize)> = (0..n_episodes)
        .map(|e| {
            let steps = per_episode.min(n_samples - e * per_episode);
            (e as u64, steps)
        })
        .collect();
    let workers = workers.clamp(1, n_episodes);
    let mut episodes: Vec<(u64, Vec<TransitionRecord>)> = if workers == 1 {
        plan.iter()
            .map(|&(e, s)| collect_episode(config, seed, e, s).map(|r| (e, r)))
            .collect::<Result<_, _>>()?
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let plan = &plan;
                    scope.spawn(move || {
                        plan.iter()
                            .skip(w)
                            .step_by(workers)
                            .map(|&(e, s)| collect_episode(config, seed, e, s).map(|r| (e, r)))
                            .collect::<Result<Vec<_>, _>>()
                    })
                })
                .collect();
            let mut all = Vec::with_capacity(n_episodes);
            for h in handles {
                all.extend(h.join().expect("collection worker panicked")?);
            }
            Ok::<_, DatasetError>(all)
        })?
    };
    episodes.sort_by_key(|(e, _)| *e);
    let records: Vec<TransitionRecord> = episodes.into_iter().flat_map(|(_, r)| r).collect();
    Ok(Dataset {
        header: DatasetHeader {
            format_version: DATASET_VERSION,
            env: config.clone(),
            sample_count: records.len(),
            image_size: config.image_size,
            collection_seed: seed,
            split_marker: None,
        },
        records,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn view(&self) -> DatasetView<'_> {
        DatasetView {
            records: &self.records,
        }
    }

    /// Index of the first record of each episode, plus `len()` at the end.
    fn episode_starts(&self) -> Vec<usize> {
        let mut starts = vec![0];
        for i in 1..self.records.len() {
            if self.records[i].episode_id != self.records[i - 1].episode_id {
                starts.push(i);
            }
        }
        starts.push(self.records.len());
        starts
    }

    /// Index where validation records begin: whole trailing episodes are
    /// moved to validation while that brings the count closer to
    /// `round(val_fraction * n)`; at least one episode lands on each side.
    pub fn split_index(&self, val_fraction: f64) -> Result<usize, DatasetError> {
        if !(val_fraction > 0.0 && val_fraction < 1.0) {
            return Err(DatasetError::Split(format!(
                "val_fraction must be in (0, 1), got {val_fraction}"
            )));
        }
        let starts = self.episode_starts();
        let n_episodes = starts.len() - 1;
        if n_episodes < 2 {
            return Err(DatasetError::Split(format!(
                "need at least two episodes for a train/validation split, found {n_episodes}"
            )));
        }
        let n = self.records.len();
        let target = (val_fraction * n as f64).round() as usize;
        // candidate k = number of trailing episodes in validation
        let mut best = 1;
        let mut best_gap = usize::MAX;
        for k in 1..n_episodes {
            let val = n - starts[n_episodes - k];
            let gap = val.abs_diff(target);
            if gap < best_gap {
                best_gap = gap;
                best = k;
            }
        }
        Ok(starts[n_episodes - best])
    }

    pub fn split(
        &self,
        val_fraction: f64,
    ) -> Result<(DatasetView<'_>, DatasetView<'_>), DatasetError> {
        let at = self.split_index(val_fraction)?;
        Ok(self.split_at(at))
    }

    pub fn split_at(&self, at: usize) -> (DatasetView<'_>, DatasetView<'_>) {
        let (train, val) = self.records.split_at(at);
        (DatasetView { records: train }, DatasetView { records: val })
    }

    /// Train/validation views from the recorded marker, or a fresh split.
    pub fn train_val(
        &self,
        val_fraction: f64,
    ) -> Result<(DatasetView<'_>, DatasetView<'_>), DatasetError> {
        match self.header.split_marker {
            Some(at) if at > 0 && at < self.records.len() => Ok(self.split_at(at)),
            _ => self.split(val_fraction),
        }
    }

    /// Records the split marker in the header.
    pub fn mark_split(&mut self, val_fraction: f64) -> Result<usize, DatasetError> {
        let at = self.split_index(val_fraction)?;
        self.header.split_marker = Some(at);
        Ok(at)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<(), DatasetError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, DatasetError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(max_steps: usize) -> NavConfig {
        NavConfig {
            max_steps,
            ..NavConfig::default()
        }
    }

    #[test]
    fn collect_counts_and_episodes() {
        let d = collect(&small_cfg(10), 35, 3).unwrap();
        assert_eq!(d.len(), 35);
        assert_eq!(d.view().episode_ids(), vec![0, 1, 2, 3]);
        assert_eq!(d.records.last().unwrap().step_index, 4);
    }

    #[test]
    fn workers_do_not_change_result() {
        let a = collect(&small_cfg(10), 57, 9).unwrap();
        let b = collect_with_workers(&small_cfg(10), 57, 9, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_twenty_equal_episodes() {
        let d = collect(&small_cfg(10), 200, 1).unwrap();
        let (train, val) = d.split(0.1).unwrap();
        assert_eq!(val.episode_ids().len(), 2);
        assert_eq!(train.len() + val.len(), 200);
    }

    #[test]
    fn single_episode_cannot_split() {
        let d = collect(&small_cfg(50), 20, 1).unwrap();
        assert!(matches!(d.split(0.5), Err(DatasetError::Split(_))));
        let d2 = collect(&small_cfg(10), 40, 1).unwrap();
        assert!(d2.split(0.0).is_err());
        assert!(d2.split(1.0).is_err());
    }
}
