//! Incremental binary classifiers and their shared serialized form.

pub mod forest;
pub mod hoeffding;
pub mod linear;

use serde::{Deserialize, Serialize};

use crate::data::{FlowRecord, Label};
use crate::error::{Error, Result};

pub use forest::{ForestConfig, ForestModel, ReplicationStream};
pub use hoeffding::{
    hoeffding_bound, HoeffdingConfig, HoeffdingTree, LeafNode, LearnOutcome, Node, SplitCriterion,
    SplitNode,
};
pub use linear::{sigmoid, LearningRate, LinearModel, LossKind, SgdHyper};

pub const MODEL_VERSION: u32 = 1;

pub(crate) fn check_input(x: &[f64], dimension: usize) -> Result<()> {
    if x.len() != dimension {
        return Err(Error::DimensionMismatch {
            expected: dimension,
            found: x.len(),
        });
    }
    match x.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

pub trait Classifier {
    fn predict(&self, x: &[f64]) -> Result<Label>;
}

impl Classifier for LinearModel {
    fn predict(&self, x: &[f64]) -> Result<Label> {
        LinearModel::predict(self, x)
    }
}

impl Classifier for HoeffdingTree {
    fn predict(&self, x: &[f64]) -> Result<Label> {
        HoeffdingTree::predict(self, x)
    }
}

impl Classifier for ForestModel {
    fn predict(&self, x: &[f64]) -> Result<Label> {
        ForestModel::predict(self, x)
    }
}

/// Fraction of `validation` records whose label the classifier reproduces.
pub fn accuracy<C: Classifier + ?Sized>(model: &C, validation: &[FlowRecord]) -> Result<f64> {
    if validation.is_empty() {
        return Err(Error::EmptyValidation);
    }
    let mut correct = 0usize;
    for r in validation {
        if model.predict(&r.features)? == r.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / validation.len() as f64)
}

/// Any model that can be shared between peers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Model {
    Linear(LinearModel),
    Tree(HoeffdingTree),
    Forest(ForestModel),
}

#[derive(Serialize)]
struct ModelDocRef<'a> {
    version: u32,
    #[serde(flatten)]
    model: &'a Model,
}

#[derive(Deserialize)]
struct ModelDoc {
    version: u32,
    #[serde(flatten)]
    model: Model,
}

impl Model {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Model::Linear(_) => "linear",
            Model::Tree(_) => "tree",
            Model::Forest(_) => "forest",
        }
    }

    /// Versioned JSON encoding; its length is the transfer size of the model.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(&ModelDocRef {
            version: MODEL_VERSION,
            model: self,
        })?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let doc: ModelDoc = serde_json::from_slice(bytes)?;
        if doc.version != MODEL_VERSION {
            return Err(Error::Version {
                expected: MODEL_VERSION,
                found: doc.version,
            });
        }
        Ok(doc.model)
    }
}

impl Classifier for Model {
    fn predict(&self, x: &[f64]) -> Result<Label> {
        match self {
            Model::Linear(m) => m.predict(x),
            Model::Tree(m) => m.predict(x),
            Model::Forest(m) => m.predict(x),
        }
    }
}
