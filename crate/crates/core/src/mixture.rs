//! Multi-task mixing strategies and a deterministic batch sampler.

use std::fmt;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    ConcatImages,
    Equal,
    ConcatPairs,
    ConcatUniqueImages,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::ConcatImages,
        Strategy::Equal,
        Strategy::ConcatPairs,
        Strategy::ConcatUniqueImages,
    ];
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::ConcatImages => "concat_images",
            Strategy::Equal => "equal",
            Strategy::ConcatPairs => "concat_pairs",
            Strategy::ConcatUniqueImages => "concat_unique_images",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.to_string() == s)
            .ok_or_else(|| Error::config(format!("unknown mixing strategy {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Composition {
    /// Every batch slot picks its task independently.
    #[default]
    Mixed,
    /// One task per batch.
    Homogeneous,
}

impl fmt::Display for Composition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Composition::Mixed => "mixed",
            Composition::Homogeneous => "homogeneous",
        })
    }
}

impl FromStr for Composition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixed" => Ok(Composition::Mixed),
            "homogeneous" => Ok(Composition::Homogeneous),
            _ => Err(Error::config(format!("unknown batch composition {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureTask {
    pub name: String,
    /// Number of images.
    pub size: usize,
    pub pairs_per_image: f64,
    /// Tasks sharing images carry the same group id.
    pub group: Option<String>,
}

impl MixtureTask {
    pub fn new(name: impl Into<String>, size: usize) -> Self {
        Self {
            name: name.into(),
            size,
            pairs_per_image: 1.0,
            group: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub strategy: Strategy,
    pub tasks: Vec<MixtureTask>,
    pub batch_size: usize,
    pub composition: Composition,
    pub seed: u64,
}

impl MixtureSpec {
    pub fn new(strategy: Strategy, tasks: Vec<MixtureTask>, batch_size: usize, seed: u64) -> Self {
        Self {
            strategy,
            tasks,
            batch_size,
            composition: Composition::Mixed,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::config("mixture has no tasks"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        for t in &self.tasks {
            if t.size == 0 {
                return Err(Error::config(format!("task {} has size 0", t.name)));
            }
            if !(t.pairs_per_image >= 1.0 && t.pairs_per_image.is_finite()) {
                return Err(Error::config(format!(
                    "task {} has pairs_per_image {}",
                    t.name, t.pairs_per_image
                )));
            }
        }
        Ok(())
    }
}

/// Unnormalized sampling mass per task; also the strategy's example count.
///
/// Under `ConcatUniqueImages` a group of tasks sharing images counts that image
/// set once (its largest member's size) and splits it evenly among members.
pub fn sampling_masses(spec: &MixtureSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    Ok(spec
        .tasks
        .iter()
        .map(|t| match spec.strategy {
            Strategy::ConcatImages => t.size as f64,
            Strategy::Equal => 1.0,
            Strategy::ConcatPairs => t.size as f64 * t.pairs_per_image,
            Strategy::ConcatUniqueImages => match &t.group {
                None => t.size as f64,
                Some(g) => {
                    let members: Vec<&MixtureTask> = spec
                        .tasks
                        .iter()
                        .filter(|o| o.group.as_ref() == Some(g))
                        .collect();
                    let shared = members.iter().map(|m| m.size).max().unwrap() as f64;
                    shared / members.len() as f64
                }
            },
        })
        .collect())
}

pub fn sampling_weights(spec: &MixtureSpec) -> Result<Vec<f64>> {
    let m = sampling_masses(spec)?;
    let total: f64 = m.iter().sum();
    Ok(m.iter().map(|x| x / total).collect())
}

/// Steps in one multi-task epoch. `Equal` runs as long as `ConcatImages`.
pub fn epoch_length(spec: &MixtureSpec) -> Result<usize> {
    let total: f64 = match spec.strategy {
        Strategy::Equal => spec.tasks.iter().map(|t| t.size as f64).sum(),
        _ => sampling_masses(spec)?.iter().sum(),
    };
    spec.validate()?;
    Ok((total / spec.batch_size as f64).ceil() as usize)
}

/// Deterministic stream of `(task index, example index)` batches.
#[derive(Clone, Debug)]
pub struct Sampler {
    spec: MixtureSpec,
    weights: Vec<f64>,
    dist: WeightedIndex<f64>,
    rng: ChaCha8Rng,
    orders: Vec<Option<TaskOrder>>,
}

#[derive(Clone, Debug)]
struct TaskOrder {
    perm: Vec<usize>,
    cursor: usize,
    epoch: u64,
}

impl Sampler {
    pub fn new(spec: MixtureSpec) -> Result<Self> {
        let weights = sampling_weights(&spec)?;
        let dist = WeightedIndex::new(&weights)
            .map_err(|e| Error::config(format!("mixture weights: {e}")))?;
        let rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let orders = vec![None; spec.tasks.len()];
        Ok(Self {
            spec,
            weights,
            dist,
            rng,
            orders,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn spec(&self) -> &MixtureSpec {
        &self.spec
    }

    pub fn sample_task(&mut self) -> usize {
        self.dist.sample(&mut self.rng)
    }

    fn shuffled(&self, task: usize, epoch: u64) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.spec.tasks[task].size).collect();
        let seed =
            self.spec.seed ^ ((task as u64 + 1) << 32) ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        perm
    }

    /// Next example of `task` in its shuffled order, reshuffling per pass.
    pub fn next_example(&mut self, task: usize) -> usize {
        if self.orders[task].is_none() {
            self.orders[task] = Some(TaskOrder {
                perm: self.shuffled(task, 0),
                cursor: 0,
                epoch: 0,
            });
        }
        let exhausted = {
            let o = self.orders[task].as_ref().unwrap();
            o.cursor == o.perm.len()
        };
        if exhausted {
            let epoch = self.orders[task].as_ref().unwrap().epoch + 1;
            let perm = self.shuffled(task, epoch);
            self.orders[task] = Some(TaskOrder {
                perm,
                cursor: 0,
                epoch,
            });
        }
        let o = self.orders[task].as_mut().unwrap();
        let i = o.perm[o.cursor];
        o.cursor += 1;
        i
    }

    pub fn next_batch(&mut self) -> Vec<(usize, usize)> {
        let n = self.spec.batch_size;
        match self.spec.composition {
            Composition::Mixed => (0..n)
                .map(|_| {
                    let t = self.sample_task();
                    (t, self.next_example(t))
                })
                .collect(),
            Composition::Homogeneous => {
                let t = self.sample_task();
                (0..n).map(|_| (t, self.next_example(t))).collect()
            }
        }
    }
}

/// Task sizes of the reference ten-task mixture (images per task).
pub fn reference_mixture() -> Vec<MixtureTask> {
    let mut tasks = vec![
        MixtureTask::new("inet1k", 1_200_000),
        MixtureTask::new("sun397", 76_000),
        MixtureTask::new("food101", 74_000),
        MixtureTask::new("resisc45", 19_000),
        MixtureTask::new("pet", 2_944),
        MixtureTask::new("coco", 112_000),
        MixtureTask::new("flickr30k", 28_000),
        MixtureTask::new("ocrvqa", 166_000),
        MixtureTask::new("vqav2", 83_000),
        MixtureTask::new("gqa", 72_000),
    ];
    tasks[7].pairs_per_image = 4.8;
    for t in [5, 8, 9] {
        tasks[t].group = Some("coco_images".into());
    }
    tasks
}
