//! Hoeffding tree (VFDT) for numeric features and binary labels.
//!
//! Each leaf keeps per-class Gaussian estimators for every feature. Split
//! candidates are evenly spaced between the observed minimum and maximum of a
//! feature, and class counts on either side are estimated from the Gaussian
//! CDFs. A leaf splits once the best candidate beats the runner-up by more
//! than the Hoeffding bound, or the bound falls below the tie threshold.

use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{Error, Result};

use super::check_input;

/// `sqrt(R² ln(1/δ) / 2N)`.
pub fn hoeffding_bound(range: f64, delta: f64, n: u64) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArgument("hoeffding bound needs N >= 1".into()));
    }
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "hoeffding bound needs 0 < delta <= 1, got {delta}"
        )));
    }
    if !(range >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "hoeffding bound needs R >= 0, got {range}"
        )));
    }
    Ok(bound(range, delta, n as f64))
}

fn bound(range: f64, delta: f64, n: f64) -> f64 {
    (range * range * (1.0 / delta).ln() / (2.0 * n)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitCriterion {
    InfoGain,
    Gini,
}

impl SplitCriterion {
    /// Range of the merit for two classes.
    pub fn range(self) -> f64 {
        match self {
            SplitCriterion::InfoGain => 2f64.log2(),
            SplitCriterion::Gini => 1.0,
        }
    }

    fn impurity(self, dist: [f64; 2]) -> f64 {
        let total = dist[0] + dist[1];
        if total <= 0.0 {
            return 0.0;
        }
        match self {
            SplitCriterion::InfoGain => dist
                .iter()
                .filter(|&&w| w > 0.0)
                .map(|&w| {
                    let p = w / total;
                    -p * p.log2()
                })
                .sum(),
            SplitCriterion::Gini => 1.0 - dist.iter().map(|w| (w / total).powi(2)).sum::<f64>(),
        }
    }

    fn merit(self, pre: [f64; 2], branches: [[f64; 2]; 2], min_branch_fraction: f64) -> f64 {
        let total = pre[0] + pre[1];
        let weights = branches.map(|b| b[0] + b[1]);
        let populated = weights.iter().filter(|&&w| w / total >= min_branch_fraction).count();
        if populated < 2 {
            return f64::NEG_INFINITY;
        }
        self.impurity(pre)
            - branches
                .iter()
                .zip(weights)
                .map(|(b, w)| w / total * self.impurity(*b))
                .sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HoeffdingConfig {
    pub delta: f64,
    pub grace_period: u64,
    pub tie_threshold: f64,
    pub split_criterion: SplitCriterion,
    /// Merit range `R`; defaults to the criterion's range.
    pub value_range: Option<f64>,
    /// Candidate thresholds per feature.
    pub n_thresholds: usize,
    /// Splits leaving fewer than two branches with this share of the weight are rejected.
    pub min_branch_fraction: f64,
}

impl Default for HoeffdingConfig {
    fn default() -> Self {
        Self {
            delta: 1e-7,
            grace_period: 200,
            tie_threshold: 0.05,
            split_criterion: SplitCriterion::InfoGain,
            value_range: None,
            n_thresholds: 10,
            min_branch_fraction: 0.01,
        }
    }
}

impl HoeffdingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(Error::Config(format!("delta must lie in (0, 1], got {}", self.delta)));
        }
        if self.grace_period == 0 {
            return Err(Error::Config("grace_period must be >= 1".into()));
        }
        if self.n_thresholds == 0 {
            return Err(Error::Config("n_thresholds must be >= 1".into()));
        }
        if !(self.tie_threshold >= 0.0) {
            return Err(Error::Config("tie_threshold must be >= 0".into()));
        }
        Ok(())
    }

    fn range(&self) -> f64 {
        self.value_range.unwrap_or_else(|| self.split_criterion.range())
    }
}

/// Weighted running mean and variance.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GaussianStat {
    pub weight: f64,
    pub mean: f64,
    pub m2: f64,
}

impl GaussianStat {
    fn seeded(weight: f64, mean: f64, variance: f64) -> Self {
        if weight <= 0.0 {
            return Self::default();
        }
        Self {
            weight,
            mean,
            m2: if weight > 1.0 { variance.max(0.0) * (weight - 1.0) } else { 0.0 },
        }
    }

    fn add(&mut self, x: f64) {
        self.weight += 1.0;
        let delta = x - self.mean;
        self.mean += delta / self.weight;
        self.m2 += delta * (x - self.mean);
    }

    pub fn variance(&self) -> f64 {
        if self.weight > 1.0 {
            (self.m2 / (self.weight - 1.0)).max(0.0)
        } else {
            0.0
        }
    }

    pub fn std_dev(&self) -> f64 {
        self.variance().sqrt()
    }

    /// Estimated weight at or below `t`.
    fn weight_below(&self, t: f64) -> f64 {
        if self.weight <= 0.0 {
            return 0.0;
        }
        let sd = self.std_dev();
        if sd <= 0.0 {
            return if self.mean <= t { self.weight } else { 0.0 };
        }
        self.weight * normal_cdf((t - self.mean) / sd)
    }

    /// Moments of this Gaussian truncated to `x <= t` (left) or `x > t`.
    fn truncated(&self, t: f64, left: bool) -> GaussianStat {
        let below = self.weight_below(t);
        let weight = if left { below } else { self.weight - below };
        if weight <= 1e-12 {
            return GaussianStat::default();
        }
        let sd = self.std_dev();
        if sd <= 0.0 {
            return GaussianStat::seeded(weight, self.mean, 0.0);
        }
        let a = (t - self.mean) / sd;
        let pdf = normal_pdf(a);
        let mass = weight / self.weight;
        let (mean, var) = if left {
            let r = pdf / mass;
            (self.mean - sd * r, sd * sd * (1.0 - a * r - r * r))
        } else {
            let r = pdf / mass;
            (self.mean + sd * r, sd * sd * (1.0 + a * r - r * r))
        };
        GaussianStat::seeded(weight, mean, var)
    }
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafNode {
    /// Samples observed at this leaf since it was created, per class.
    pub class_counts: [u64; 2],
    /// Class weight inherited from the parent when the leaf was created by a split.
    pub prior: [f64; 2],
    /// `gaussians[feature][class]`.
    pub gaussians: Vec<[GaussianStat; 2]>,
    /// Observed `(min, max)` per feature.
    pub ranges: Vec<Option<(f64, f64)>>,
    pub since_check: u64,
    /// Prediction when the leaf holds no weight.
    pub fallback: Label,
}

impl LeafNode {
    fn empty(n_features: usize, fallback: Label) -> Self {
        Self {
            class_counts: [0, 0],
            prior: [0.0, 0.0],
            gaussians: vec![[GaussianStat::default(); 2]; n_features],
            ranges: vec![None; n_features],
            since_check: 0,
            fallback,
        }
    }

    pub fn class_weights(&self) -> [f64; 2] {
        [
            self.class_counts[0] as f64 + self.prior[0],
            self.class_counts[1] as f64 + self.prior[1],
        ]
    }

    pub fn samples_seen(&self) -> u64 {
        self.class_counts[0] + self.class_counts[1]
    }

    /// Majority class of the samples seen here; a leaf that has seen none
    /// falls back to the statistics inherited from its parent. Ties go to
    /// benign.
    pub fn majority(&self) -> Label {
        let w = if self.samples_seen() > 0 {
            self.class_counts.map(|c| c as f64)
        } else {
            self.prior
        };
        if w[0] + w[1] <= 0.0 {
            self.fallback
        } else if w[1] > w[0] {
            Label::Malicious
        } else {
            Label::Benign
        }
    }

    fn observe(&mut self, x: &[f64], y: Label) {
        let c = y.index();
        self.class_counts[c] += 1;
        for ((g, r), &v) in self.gaussians.iter_mut().zip(&mut self.ranges).zip(x) {
            g[c].add(v);
            *r = Some(match *r {
                Some((lo, hi)) => (lo.min(v), hi.max(v)),
                None => (v, v),
            });
        }
        self.since_check += 1;
    }

    /// Best threshold and merit per feature.
    fn candidates(&self, config: &HoeffdingConfig) -> Vec<(usize, f64, f64)> {
        let pre = self.class_weights();
        let mut out = Vec::new();
        for (f, (g, range)) in self.gaussians.iter().zip(&self.ranges).enumerate() {
            let Some((lo, hi)) = *range else { continue };
            if !(hi > lo) {
                continue;
            }
            let mut best: Option<(f64, f64)> = None;
            for i in 1..=config.n_thresholds {
                let t = lo + (hi - lo) * i as f64 / (config.n_thresholds + 1) as f64;
                let left = [g[0].weight_below(t), g[1].weight_below(t)];
                let right = [g[0].weight - left[0], g[1].weight - left[1]];
                let merit = config.split_criterion.merit(
                    pre,
                    [left, right.map(|w| w.max(0.0))],
                    config.min_branch_fraction,
                );
                if best.map_or(true, |(m, _)| merit > m) {
                    best = Some((merit, t));
                }
            }
            if let Some((merit, t)) = best {
                if merit.is_finite() {
                    out.push((f, t, merit));
                }
            }
        }
        out
    }

    /// Child leaf seeded with this leaf's statistics on one side of the
    /// threshold. Seeds are scaled down to at most `max_seed` total weight so
    /// that samples reaching the child soon outweigh the approximation.
    fn split_child(&self, feature: usize, threshold: f64, left: bool, max_seed: f64) -> LeafNode {
        let mut child = LeafNode::empty(self.gaussians.len(), self.majority());
        let total = self.class_weights();
        for c in 0..2 {
            let g = &self.gaussians[feature][c];
            let share = if g.weight > 0.0 {
                let below = g.weight_below(threshold) / g.weight;
                if left {
                    below
                } else {
                    1.0 - below
                }
            } else {
                0.0
            };
            child.prior[c] = total[c] * share;
            for (f, stats) in self.gaussians.iter().enumerate() {
                child.gaussians[f][c] = if f == feature {
                    stats[c].truncated(threshold, left)
                } else {
                    let s = stats[c];
                    GaussianStat::seeded(s.weight * share, s.mean, s.variance())
                };
            }
        }
        let seeded = child.prior[0] + child.prior[1];
        if seeded > max_seed {
            let k = max_seed / seeded;
            child.prior = child.prior.map(|w| w * k);
            for g in child.gaussians.iter_mut().flatten() {
                g.weight *= k;
                g.m2 *= k;
            }
        }
        for (f, range) in self.ranges.iter().enumerate() {
            child.ranges[f] = match *range {
                Some((lo, _)) if f == feature && left => Some((lo, threshold)),
                Some((_, hi)) if f == feature => Some((threshold, hi)),
                other => other,
            };
        }
        child
    }
}

/// Internal node: `x[feature] <= threshold` goes to `children[0]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitNode {
    pub feature: usize,
    pub threshold: f64,
    /// Samples the node absorbed while it was still a leaf.
    pub absorbed: u64,
    pub children: Box<[Node; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    Split(SplitNode),
    Leaf(LeafNode),
}

/// Path from the root to a leaf: `false` = left, `true` = right.
pub type LeafPath = Vec<bool>;

#[derive(Debug, Clone, PartialEq)]
pub struct LearnOutcome {
    pub leaf: LeafPath,
    pub split: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoeffdingTree {
    pub n_features: usize,
    pub config: HoeffdingConfig,
    pub root: Node,
}

impl HoeffdingTree {
    pub fn new(n_features: usize, config: HoeffdingConfig) -> Result<Self> {
        if n_features == 0 {
            return Err(Error::InvalidArgument("tree needs at least one feature".into()));
        }
        config.validate()?;
        Ok(Self {
            n_features,
            config,
            root: Node::Leaf(LeafNode::empty(n_features, Label::Benign)),
        })
    }

    pub fn learn_one(&mut self, x: &[f64], y: Label) -> Result<LearnOutcome> {
        check_input(x, self.n_features)?;
        let mut path = Vec::new();
        let mut node = &mut self.root;
        while let Node::Split(s) = node {
            let right = x[s.feature] > s.threshold;
            path.push(right);
            node = &mut s.children[right as usize];
        }
        let Node::Leaf(leaf) = node else { unreachable!() };
        leaf.observe(x, y);
        if leaf.since_check < self.config.grace_period {
            return Ok(LearnOutcome { leaf: path, split: false });
        }
        leaf.since_check = 0;
        let split = match Self::split_decision(leaf, &self.config) {
            Some((feature, threshold)) => {
                let children = Box::new([
                    Node::Leaf(leaf.split_child(feature, threshold, true, self.config.grace_period as f64)),
                    Node::Leaf(leaf.split_child(feature, threshold, false, self.config.grace_period as f64)),
                ]);
                let absorbed = leaf.samples_seen();
                *node = Node::Split(SplitNode {
                    feature,
                    threshold,
                    absorbed,
                    children,
                });
                true
            }
            None => false,
        };
        Ok(LearnOutcome { leaf: path, split })
    }

    fn split_decision(leaf: &LeafNode, config: &HoeffdingConfig) -> Option<(usize, f64)> {
        let weights = leaf.class_weights();
        if weights[0] <= 0.0 || weights[1] <= 0.0 {
            return None;
        }
        let mut cands = leaf.candidates(config);
        // stable: equal merits keep the lower feature index first
        cands.sort_by(|a, b| b.2.total_cmp(&a.2));
        let &(feature, threshold, best) = cands.first()?;
        if best <= 0.0 {
            return None;
        }
        // the "no split" option has merit 0
        let second = cands.get(1).map_or(0.0, |c| c.2).max(0.0);
        let eps = bound(config.range(), config.delta, weights[0] + weights[1]);
        (best - second > eps || eps < config.tie_threshold).then_some((feature, threshold))
    }

    fn leaf(&self, x: &[f64]) -> &LeafNode {
        let mut node = &self.root;
        loop {
            match node {
                Node::Split(s) => node = &s.children[(x[s.feature] > s.threshold) as usize],
                Node::Leaf(l) => return l,
            }
        }
    }

    pub fn route(&self, x: &[f64]) -> Result<LeafPath> {
        check_input(x, self.n_features)?;
        let mut path = Vec::new();
        let mut node = &self.root;
        while let Node::Split(s) = node {
            let right = x[s.feature] > s.threshold;
            path.push(right);
            node = &s.children[right as usize];
        }
        Ok(path)
    }

    pub fn predict(&self, x: &[f64]) -> Result<Label> {
        check_input(x, self.n_features)?;
        Ok(self.leaf(x).majority())
    }

    pub fn leaves(&self) -> Vec<&LeafNode> {
        let mut out = Vec::new();
        let mut stack = vec![&self.root];
        while let Some(node) = stack.pop() {
            match node {
                Node::Leaf(l) => out.push(l),
                Node::Split(s) => stack.extend(s.children.iter().rev()),
            }
        }
        out
    }

    pub fn split_rules(&self) -> Vec<&SplitNode> {
        let mut out = Vec::new();
        let mut stack = vec![&self.root];
        while let Some(node) = stack.pop() {
            if let Node::Split(s) = node {
                out.push(s);
                stack.extend(s.children.iter().rev());
            }
        }
        out
    }

    pub fn depth(&self) -> usize {
        fn depth(n: &Node) -> usize {
            match n {
                Node::Leaf(_) => 0,
                Node::Split(s) => 1 + s.children.iter().map(depth).max().unwrap_or(0),
            }
        }
        depth(&self.root)
    }

    /// Samples observed by the tree: leaf counts plus those absorbed by
    /// leaves that later became split nodes.
    pub fn samples_seen(&self) -> u64 {
        self.leaves().iter().map(|l| l.samples_seen()).sum::<u64>()
            + self.split_rules().iter().map(|s| s.absorbed).sum::<u64>()
    }
}
