//! Online random forest: Hoeffding trees over random feature subspaces with
//! Poisson(1) online bagging.

use rand::seq::index::sample;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{Error, Result};

use super::check_input;
use super::hoeffding::{HoeffdingConfig, HoeffdingTree};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_trees: usize,
    /// Features per tree; `None` means `ceil(sqrt(k))`.
    pub max_features: Option<usize>,
    pub tree: HoeffdingConfig,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 10,
            max_features: None,
            tree: HoeffdingConfig::default(),
        }
    }
}

/// Counter-addressed random stream; one `u64` per draw so the position can
/// be serialized as a plain counter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicationStream {
    pub seed: u64,
    pub stream: u64,
    pub draws: u64,
}

impl ReplicationStream {
    fn next_u64(&mut self) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.draws as u128 * 2);
        self.draws += 1;
        rng.next_u64()
    }

    /// Poisson(1) by CDF inversion of a single uniform draw.
    pub fn poisson_one(&mut self) -> u32 {
        let u = (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        let mut k = 0u32;
        let mut p = (-1.0f64).exp();
        let mut cdf = p;
        while u >= cdf && k < 64 {
            k += 1;
            p /= k as f64;
            cdf += p;
        }
        k
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub t_max: usize,
    pub n_features: usize,
    pub trees: Vec<HoeffdingTree>,
    /// Sorted feature indices seen by each tree.
    pub masks: Vec<Vec<usize>>,
    pub streams: Vec<ReplicationStream>,
}

impl ForestModel {
    /// `n_trees` empty trees, each with a random feature mask drawn from
    /// its own seeded stream.
    pub fn new(n_features: usize, config: &ForestConfig, seed: u64) -> Result<Self> {
        if config.n_trees == 0 {
            return Err(Error::InvalidArgument("forest needs at least one tree".into()));
        }
        if n_features == 0 {
            return Err(Error::InvalidArgument("forest needs at least one feature".into()));
        }
        let m = config
            .max_features
            .unwrap_or_else(|| (n_features as f64).sqrt().ceil() as usize)
            .clamp(1, n_features);
        let mut trees = Vec::with_capacity(config.n_trees);
        let mut masks = Vec::with_capacity(config.n_trees);
        let mut streams = Vec::with_capacity(config.n_trees);
        for i in 0..config.n_trees as u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(2 * i);
            let mut mask = sample(&mut rng, n_features, m).into_vec();
            mask.sort_unstable();
            trees.push(HoeffdingTree::new(m, config.tree)?);
            masks.push(mask);
            streams.push(ReplicationStream {
                seed,
                stream: 2 * i + 1,
                draws: 0,
            });
        }
        Ok(Self {
            t_max: config.n_trees,
            n_features,
            trees,
            masks,
            streams,
        })
    }

    pub fn len(&self) -> usize {
        self.trees.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trees.is_empty()
    }

    /// Replications drawn for each tree.
    pub fn learn_one(&mut self, x: &[f64], y: Label) -> Result<Vec<u32>> {
        check_input(x, self.n_features)?;
        let mut reps = Vec::with_capacity(self.trees.len());
        for ((tree, mask), stream) in self.trees.iter_mut().zip(&self.masks).zip(&mut self.streams) {
            let m = stream.poisson_one();
            if m > 0 {
                let sub = project(x, mask);
                for _ in 0..m {
                    tree.learn_one(&sub, y)?;
                }
            }
            reps.push(m);
        }
        Ok(reps)
    }

    pub fn tree_predict(&self, i: usize, x: &[f64]) -> Result<Label> {
        check_input(x, self.n_features)?;
        self.trees[i].predict(&project(x, &self.masks[i]))
    }

    /// Majority vote; ties go to benign.
    pub fn predict(&self, x: &[f64]) -> Result<Label> {
        if self.trees.is_empty() {
            return Err(Error::ModelMismatch("forest has no trees".into()));
        }
        let mut malicious = 0usize;
        for i in 0..self.trees.len() {
            if self.tree_predict(i, x)?.is_malicious() {
                malicious += 1;
            }
        }
        Ok(if 2 * malicious > self.trees.len() {
            Label::Malicious
        } else {
            Label::Benign
        })
    }
}

fn project(x: &[f64], mask: &[usize]) -> Vec<f64> {
    mask.iter().map(|&j| x[j]).collect()
}

/// Mean replication count over `n` draws; used to check the bagging rate.
pub fn mean_replication(stream: &mut ReplicationStream, n: usize) -> f64 {
    (0..n).map(|_| stream.poisson_one() as f64).sum::<f64>() / n as f64
}
