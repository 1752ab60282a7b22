//! Per-model-kind aggregation of peer models.
//!
//! Linear models are averaged coordinate-wise. Trees cannot be averaged, so
//! the candidate with the best validation accuracy wins. Forests pool every
//! received tree and keep the most accurate ones up to the ensemble cap.

use crate::data::FlowRecord;
use crate::error::{Error, Result};
use crate::models::{accuracy, ForestModel, HoeffdingTree, LinearModel, Model};

/// Models gathered by one node for aggregation. When the node holds a model
/// of its own it comes first; the rest are ordered by sender id.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet<M> {
    /// `None` for an aggregation server that trains nothing itself.
    pub owner: Option<usize>,
    pub models: Vec<(usize, M)>,
}

impl<M> CandidateSet<M> {
    pub fn new(owner: Option<usize>, models: Vec<(usize, M)>) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::InvalidArgument("empty candidate set".into()));
        }
        if let Some(own) = owner {
            if models[0].0 != own {
                return Err(Error::InvalidArgument(
                    "owner's model must come first in the candidate set".into(),
                ));
            }
        }
        Ok(Self { owner, models })
    }

    fn is_own(&self, i: usize) -> bool {
        self.owner.is_some() && i == 0
    }
}

/// Coordinate-wise unweighted mean of weights and bias.
///
/// Each coordinate is accumulated in sorted order as offsets from its
/// minimum, so the result does not depend on input order and the mean of
/// identical models is exact.
pub fn aggregate_mean(params: &[LinearModel]) -> Result<LinearModel> {
    let first = params
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to average".into()))?;
    for p in &params[1..] {
        if p.loss_kind != first.loss_kind {
            return Err(Error::ModelMismatch(format!(
                "cannot average {:?} with {:?} models",
                first.loss_kind, p.loss_kind
            )));
        }
        if p.dimension() != first.dimension() {
            return Err(Error::DimensionMismatch {
                expected: first.dimension(),
                found: p.dimension(),
            });
        }
    }
    let mut column = Vec::with_capacity(params.len());
    let mut mean_of = |get: &dyn Fn(&LinearModel) -> f64| {
        column.clear();
        column.extend(params.iter().map(get));
        column.sort_by(f64::total_cmp);
        let pivot = column[0];
        pivot + column.iter().map(|v| v - pivot).sum::<f64>() / column.len() as f64
    };
    let weights = (0..first.dimension())
        .map(|j| mean_of(&|p: &LinearModel| p.weights[j]))
        .collect();
    let bias = mean_of(&|p: &LinearModel| p.bias);
    Ok(LinearModel {
        loss_kind: first.loss_kind,
        weights,
        bias,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub index: usize,
    pub sender: usize,
    pub accuracy: f64,
    pub scores: Vec<f64>,
}

/// Picks the candidate tree with the highest validation accuracy; ties go to
/// the owner's own tree, then to the lowest sender id.
pub fn select_best_tree(
    candidates: &CandidateSet<HoeffdingTree>,
    validation: &[FlowRecord],
) -> Result<Selection> {
    if validation.is_empty() {
        return Err(Error::EmptyValidation);
    }
    let scores = candidates
        .models
        .iter()
        .map(|(_, t)| accuracy(t, validation))
        .collect::<Result<Vec<_>>>()?;
    let index = (0..scores.len())
        .min_by(|&a, &b| {
            scores[b]
                .total_cmp(&scores[a])
                .then(candidates.is_own(b).cmp(&candidates.is_own(a)))
                .then(candidates.models[a].0.cmp(&candidates.models[b].0))
                .then(a.cmp(&b))
        })
        .expect("non-empty candidate set");
    Ok(Selection {
        index,
        sender: candidates.models[index].0,
        accuracy: scores[index],
        scores,
    })
}

/// Pools every tree of every forest, scores each on `validation`, and keeps
/// the `cap` most accurate. Ties favour the owner's trees, then earlier
/// positions in the pool. Survivors keep their pool order, masks and
/// replication streams.
pub fn flatten_and_prune(
    forests: &CandidateSet<ForestModel>,
    validation: &[FlowRecord],
    cap: usize,
) -> Result<ForestModel> {
    if cap == 0 {
        return Err(Error::InvalidArgument("forest cap must be >= 1".into()));
    }
    if validation.is_empty() {
        return Err(Error::EmptyValidation);
    }
    let n_features = forests.models[0].1.n_features;
    let mut pool = Vec::new();
    for (i, (_, forest)) in forests.models.iter().enumerate() {
        if forest.n_features != n_features {
            return Err(Error::DimensionMismatch {
                expected: n_features,
                found: forest.n_features,
            });
        }
        for t in 0..forest.len() {
            pool.push((forests.is_own(i), i, t));
        }
    }
    if pool.is_empty() {
        return Err(Error::InvalidArgument("no trees to pool".into()));
    }
    let mut scores = Vec::with_capacity(pool.len());
    for &(_, f, t) in &pool {
        let forest = &forests.models[f].1;
        let mut correct = 0usize;
        for r in validation {
            if forest.tree_predict(t, &r.features)? == r.label {
                correct += 1;
            }
        }
        scores.push(correct as f64 / validation.len() as f64);
    }
    let mut ranked: Vec<usize> = (0..pool.len()).collect();
    ranked.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then(pool[b].0.cmp(&pool[a].0))
            .then(a.cmp(&b))
    });
    ranked.truncate(cap);
    ranked.sort_unstable();

    let mut out = ForestModel {
        t_max: cap,
        n_features,
        trees: Vec::with_capacity(ranked.len()),
        masks: Vec::with_capacity(ranked.len()),
        streams: Vec::with_capacity(ranked.len()),
    };
    for p in ranked {
        let (_, f, t) = pool[p];
        let src = &forests.models[f].1;
        out.trees.push(src.trees[t].clone());
        out.masks.push(src.masks[t].clone());
        out.streams.push(src.streams[t]);
    }
    Ok(out)
}

pub fn evaluate_candidate(model: &Model, validation: &[FlowRecord]) -> Result<f64> {
    accuracy(model, validation)
}

/// Aggregates a candidate set of any model kind with the matching rule.
pub fn aggregate_models(
    candidates: CandidateSet<Model>,
    validation: &[FlowRecord],
    forest_cap: usize,
) -> Result<Model> {
    let owner = candidates.owner;
    let kind = candidates.models[0].1.kind_name();
    let mismatch = |m: &Model| Error::ModelMismatch(format!("{} among {kind} candidates", m.kind_name()));
    match &candidates.models[0].1 {
        Model::Linear(_) => {
            let params = candidates
                .models
                .iter()
                .map(|(_, m)| match m {
                    Model::Linear(l) => Ok(l.clone()),
                    other => Err(mismatch(other)),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Model::Linear(aggregate_mean(&params)?))
        }
        Model::Tree(_) => {
            let mut trees = Vec::with_capacity(candidates.models.len());
            for (s, m) in candidates.models {
                match m {
                    Model::Tree(t) => trees.push((s, t)),
                    other => return Err(mismatch(&other)),
                }
            }
            let set = CandidateSet::new(owner, trees)?;
            let pick = select_best_tree(&set, validation)?;
            Ok(Model::Tree(set.models.into_iter().nth(pick.index).expect("index").1))
        }
        Model::Forest(_) => {
            let mut forests = Vec::with_capacity(candidates.models.len());
            for (s, m) in candidates.models {
                match m {
                    Model::Forest(f) => forests.push((s, f)),
                    other => return Err(mismatch(&other)),
                }
            }
            let set = CandidateSet::new(owner, forests)?;
            Ok(Model::Forest(flatten_and_prune(&set, validation, forest_cap)?))
        }
    }
}
