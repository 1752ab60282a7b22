//! Round engine: local training, model sharing under one of four scenarios,
//! aggregation, and per-round evaluation with a byte-exact transfer ledger.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{aggregate_models, CandidateSet};
use crate::data::{make_batches, BatchSchedule, DatasetSplit, FlowRecord, Label};
use crate::error::{Error, Result};
use crate::metrics::{compute_metrics, ConfusionCounts};
use crate::models::{
    Classifier, ForestConfig, ForestModel, HoeffdingConfig, HoeffdingTree, LinearModel, LossKind,
    Model, SgdHyper,
};

const GOSSIP_STREAM: u64 = 1 << 40;
const FOREST_STREAM: u64 = 1 << 41;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Linear SVM trained with hinge-loss SGD.
    Svm,
    /// Logistic regression trained with log-loss SGD.
    Lr,
    /// Hoeffding tree.
    Dt,
    /// Online random forest of Hoeffding trees.
    Rf,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Svm, ModelKind::Lr, ModelKind::Dt, ModelKind::Rf];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Svm => "svm",
            ModelKind::Lr => "lr",
            ModelKind::Dt => "dt",
            ModelKind::Rf => "rf",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown model `{s}` (expected svm, lr, dt or rf)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Scenario {
    /// No federation; every entity trains alone.
    Nfl,
    /// Central server averages or selects, then broadcasts.
    Cfl,
    /// Every entity sends to every other entity.
    Dfl,
    /// Every entity pushes to one uniformly chosen peer.
    DflGossip,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::Nfl, Scenario::Cfl, Scenario::Dfl, Scenario::DflGossip];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Nfl => "NFL",
            Scenario::Cfl => "CFL",
            Scenario::Dfl => "DFL",
            Scenario::DflGossip => "DFL_GOSSIP",
        }
    }

    pub fn is_federated(self) -> bool {
        self != Scenario::Nfl
    }

    /// Transfers per round for `n` entities.
    pub fn transfers(self, n: usize) -> usize {
        match self {
            Scenario::Nfl => 0,
            Scenario::Cfl => 2 * n,
            Scenario::Dfl => n * n.saturating_sub(1),
            Scenario::DflGossip => n,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        match norm.as_str() {
            "GOSSIP" => Ok(Scenario::DflGossip),
            _ => Scenario::ALL
                .into_iter()
                .find(|sc| sc.as_str() == norm)
                .ok_or_else(|| {
                    Error::Config(format!(
                        "unknown scenario `{s}` (expected NFL, CFL, DFL or DFL_GOSSIP)"
                    ))
                }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Local,
    Global,
}

/// Validation set used to score candidate trees during aggregation.
/// The server in CFL holds no local data and always uses the global set.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValidationSource {
    Local,
    #[default]
    Global,
}

impl FromStr for ValidationSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "local" => Ok(ValidationSource::Local),
            "global" => Ok(ValidationSource::Global),
            _ => Err(Error::Config(format!(
                "unknown validation source `{s}` (expected local or global)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub model: ModelKind,
    pub rounds: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub sgd: SgdHyper,
    pub tree: HoeffdingConfig,
    pub forest: ForestConfig,
    pub validation_source: ValidationSource,
    /// Worker threads; 0 lets the pool decide. Never affects results.
    pub threads: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::DflGossip,
            model: ModelKind::Dt,
            rounds: 20,
            batch_size: 153,
            seed: 0,
            sgd: SgdHyper::default(),
            tree: HoeffdingConfig::default(),
            forest: ForestConfig::default(),
            validation_source: ValidationSource::Global,
            threads: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        self.sgd.validate()?;
        self.tree.validate()?;
        self.forest.tree.validate()?;
        if self.forest.n_trees == 0 {
            return Err(Error::Config("n_trees must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    Edgeless,
    FullMesh,
    StarWithServer,
}

/// Static undirected graph over entity positions `0..n`; in a star the
/// server is node `n`. Edges are stored once as `(a, b)` with `a < b`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    pub node_ids: Vec<usize>,
    pub edges: Vec<(usize, usize)>,
    pub kind: TopologyKind,
}

impl Topology {
    pub fn server(&self) -> Option<usize> {
        (self.kind == TopologyKind::StarWithServer).then(|| *self.node_ids.last().expect("server"))
    }

    pub fn neighbours(&self, v: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter_map(|&(a, b)| {
                if a == v {
                    Some(b)
                } else if b == v {
                    Some(a)
                } else {
                    None
                }
            })
            .collect()
    }
}

pub fn build_topology(n: usize, scenario: Scenario) -> Result<Topology> {
    let min = if scenario.is_federated() { 2 } else { 1 };
    if n < min {
        return Err(Error::Config(format!(
            "{scenario} needs at least {min} entities, got {n}"
        )));
    }
    Ok(match scenario {
        Scenario::Nfl => Topology {
            node_ids: (0..n).collect(),
            edges: Vec::new(),
            kind: TopologyKind::Edgeless,
        },
        Scenario::Cfl => Topology {
            node_ids: (0..=n).collect(),
            edges: (0..n).map(|v| (v, n)).collect(),
            kind: TopologyKind::StarWithServer,
        },
        Scenario::Dfl | Scenario::DflGossip => Topology {
            node_ids: (0..n).collect(),
            edges: (0..n)
                .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
                .collect(),
            kind: TopologyKind::FullMesh,
        },
    })
}

/// One push per node to a peer chosen uniformly among the other nodes.
pub fn gossip_pairing<R: Rng + ?Sized>(node_ids: &[usize], rng: &mut R) -> Result<Vec<(usize, usize)>> {
    let n = node_ids.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "gossip needs at least 2 nodes, got {n}"
        )));
    }
    Ok(node_ids
        .iter()
        .enumerate()
        .map(|(i, &sender)| {
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            (sender, node_ids[j])
        })
        .collect())
}

/// Bytes moved per round for `n` entities sharing models of `b` bytes.
pub fn comm_cost_model(scenario: Scenario, n: u64, b: u64) -> u64 {
    match scenario {
        Scenario::Nfl => 0,
        Scenario::Cfl => 2 * n * b,
        Scenario::Dfl => n * n.saturating_sub(1) * b,
        Scenario::DflGossip => n * b,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Endpoint {
    Entity(usize),
    Server,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub round: usize,
    pub sender: String,
    pub receiver: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommLedger {
    pub entries: Vec<LedgerEntry>,
}

impl CommLedger {
    pub fn round_total(&self, round: usize) -> u64 {
        self.entries.iter().filter(|e| e.round == round).map(|e| e.bytes).sum()
    }

    pub fn round_transfers(&self, round: usize) -> usize {
        self.entries.iter().filter(|e| e.round == round).count()
    }

    pub fn total(&self) -> u64 {
        self.entries.iter().map(|e| e.bytes).sum()
    }

    /// CSV with header `round,sender,receiver,bytes`; header only when empty.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
        wtr.write_record(["round", "sender", "receiver", "bytes"])?;
        for e in &self.entries {
            wtr.serialize(e)?;
        }
        wtr.flush().map_err(|e| Error::io("<ledger output>", e))?;
        Ok(())
    }
}

/// One evaluation of one entity's model on one validation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub round: usize,
    pub entity: String,
    pub scenario: Scenario,
    pub model: ModelKind,
    pub scope: Scope,
    #[serde(flatten)]
    pub counts: ConfusionCounts,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InboxItem {
    pub sender: usize,
    pub payload: Vec<u8>,
    pub byte_length: usize,
}

#[derive(Debug, Clone)]
pub struct NodeState {
    pub entity_id: usize,
    pub name: String,
    pub model: Model,
    pub cursor: usize,
    /// SGD steps taken so far; drives the learning-rate schedule.
    pub step: u64,
    pub schedule: BatchSchedule,
    pub inbox: Vec<InboxItem>,
}

fn initial_model(cfg: &ScenarioConfig, dim: usize, entity_id: usize) -> Result<Model> {
    Ok(match cfg.model {
        ModelKind::Svm => Model::Linear(LinearModel::new(dim, LossKind::Hinge)?),
        ModelKind::Lr => Model::Linear(LinearModel::new(dim, LossKind::Log)?),
        ModelKind::Dt => Model::Tree(HoeffdingTree::new(dim, cfg.tree)?),
        ModelKind::Rf => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(FOREST_STREAM + entity_id as u64);
            Model::Forest(ForestModel::new(dim, &cfg.forest, rng.next_u64())?)
        }
    })
}

impl NodeState {
    fn train(&mut self, train: &[FlowRecord], hyper: &SgdHyper) -> Result<()> {
        let batch = self
            .schedule
            .batches
            .get(self.cursor)
            .ok_or(Error::ScheduleExhausted {
                entity: self.entity_id,
                round: self.cursor + 1,
            })?;
        match &mut self.model {
            Model::Linear(m) => {
                let pairs: Vec<(&[f64], Label)> = batch
                    .iter()
                    .map(|&i| (train[i].features.as_slice(), train[i].label))
                    .collect();
                let (next, step) = m.partial_fit_from(&pairs, hyper, self.step)?;
                *m = next;
                self.step = step;
            }
            Model::Tree(t) => {
                for &i in batch {
                    t.learn_one(&train[i].features, train[i].label)?;
                }
            }
            Model::Forest(f) => {
                for &i in batch {
                    f.learn_one(&train[i].features, train[i].label)?;
                }
            }
        }
        self.cursor += 1;
        Ok(())
    }

    /// Aggregates own model with the inbox (sorted by sender) and clears it.
    fn aggregate(&mut self, validation: &[FlowRecord], forest_cap: usize) -> Result<()> {
        if self.inbox.is_empty() {
            return Ok(());
        }
        self.inbox.sort_by_key(|m| m.sender);
        let mut models = Vec::with_capacity(self.inbox.len() + 1);
        models.push((self.entity_id, self.model.clone()));
        for item in self.inbox.drain(..) {
            models.push((item.sender, Model::from_bytes(&item.payload)?));
        }
        self.model = aggregate_models(
            CandidateSet::new(Some(self.entity_id), models)?,
            validation,
            forest_cap,
        )?;
        Ok(())
    }
}

fn evaluate(model: &Model, validation: &[FlowRecord]) -> Result<ConfusionCounts> {
    if validation.is_empty() {
        return Err(Error::EmptyValidation);
    }
    let mut c = ConfusionCounts::default();
    for r in validation {
        c.record(model.predict(&r.features)?, r.label);
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub metrics: Vec<MetricsRecord>,
    pub ledger: CommLedger,
    /// Final model of every entity, by entity id.
    pub final_models: Vec<(String, Model)>,
}

/// Step-wise simulation; `run_scenario` drives it to completion.
pub struct Simulation<'a> {
    cfg: ScenarioConfig,
    split: &'a DatasetSplit,
    topology: Topology,
    nodes: Vec<NodeState>,
    round: usize,
    ledger: CommLedger,
    metrics: Vec<MetricsRecord>,
    gossip_rng: ChaCha8Rng,
    server_model: Option<Model>,
    pool: rayon::ThreadPool,
}

impl<'a> Simulation<'a> {
    pub fn new(cfg: &ScenarioConfig, split: &'a DatasetSplit) -> Result<Self> {
        cfg.validate()?;
        let topology = build_topology(split.shards.len(), cfg.scenario)?;
        let dim = split
            .dimension()
            .ok_or_else(|| Error::InvalidArgument("dataset has no training records".into()))?;
        if split.global_validation.is_empty() {
            return Err(Error::EmptyValidation);
        }
        let nodes = split
            .shards
            .iter()
            .map(|shard| {
                Ok(NodeState {
                    entity_id: shard.entity_id,
                    name: shard.provider_name.clone(),
                    model: initial_model(cfg, dim, shard.entity_id)?,
                    cursor: 0,
                    step: 0,
                    schedule: make_batches(shard, cfg.batch_size, cfg.rounds, cfg.seed)?,
                    inbox: Vec::new(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut gossip_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        gossip_rng.set_stream(GOSSIP_STREAM);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        Ok(Self {
            cfg: cfg.clone(),
            split,
            topology,
            nodes,
            round: 0,
            ledger: CommLedger::default(),
            metrics: Vec::new(),
            gossip_rng,
            server_model: None,
            pool,
        })
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn nodes(&self) -> &[NodeState] {
        &self.nodes
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    /// The model the CFL server broadcast last round.
    pub fn server_model(&self) -> Option<&Model> {
        self.server_model.as_ref()
    }

    pub fn ledger(&self) -> &CommLedger {
        &self.ledger
    }

    pub fn metrics(&self) -> &[MetricsRecord] {
        &self.metrics
    }

    fn endpoint_name(&self, e: Endpoint) -> String {
        match e {
            Endpoint::Entity(i) => self.nodes[i].name.clone(),
            Endpoint::Server => "server".into(),
        }
    }

    fn log(&mut self, sender: Endpoint, receiver: Endpoint, bytes: usize) {
        let entry = LedgerEntry {
            round: self.round,
            sender: self.endpoint_name(sender),
            receiver: self.endpoint_name(receiver),
            bytes: bytes as u64,
        };
        self.ledger.entries.push(entry);
    }

    /// Runs one train, share, aggregate, evaluate cycle.
    pub fn step(&mut self) -> Result<()> {
        if self.round >= self.cfg.rounds {
            return Err(Error::ScheduleExhausted {
                entity: self.nodes[0].entity_id,
                round: self.round + 1,
            });
        }
        self.round += 1;
        let split = self.split;
        let hyper = self.cfg.sgd;

        self.pool.install(|| {
            self.nodes
                .par_iter_mut()
                .zip(&split.shards)
                .try_for_each(|(node, shard)| node.train(&shard.train, &hyper))
        })?;

        let payloads = if self.cfg.scenario.is_federated() {
            self.pool.install(|| {
                self.nodes
                    .par_iter()
                    .map(|n| n.model.to_bytes())
                    .collect::<Result<Vec<_>>>()
            })?
        } else {
            Vec::new()
        };
        let cap = self.cfg.forest.n_trees;
        let n = self.nodes.len();

        match self.cfg.scenario {
            Scenario::Nfl => {}
            Scenario::Cfl => {
                let mut received = Vec::with_capacity(n);
                for (i, p) in payloads.iter().enumerate() {
                    self.log(Endpoint::Entity(i), Endpoint::Server, p.len());
                    received.push((self.nodes[i].entity_id, Model::from_bytes(p)?));
                }
                let global = aggregate_models(
                    CandidateSet::new(None, received)?,
                    &split.global_validation,
                    cap,
                )?;
                let broadcast = global.to_bytes()?;
                for i in 0..n {
                    self.log(Endpoint::Server, Endpoint::Entity(i), broadcast.len());
                }
                let decoded = Model::from_bytes(&broadcast)?;
                for node in &mut self.nodes {
                    node.model = decoded.clone();
                }
                self.server_model = Some(decoded);
            }
            Scenario::Dfl | Scenario::DflGossip => {
                let pairs = if self.cfg.scenario == Scenario::Dfl {
                    (0..n)
                        .flat_map(|s| (0..n).filter(move |&r| r != s).map(move |r| (s, r)))
                        .collect()
                } else {
                    let ids: Vec<usize> = (0..n).collect();
                    gossip_pairing(&ids, &mut self.gossip_rng)?
                };
                for (s, r) in pairs {
                    self.log(Endpoint::Entity(s), Endpoint::Entity(r), payloads[s].len());
                    let sender = self.nodes[s].entity_id;
                    self.nodes[r].inbox.push(InboxItem {
                        sender,
                        payload: payloads[s].clone(),
                        byte_length: payloads[s].len(),
                    });
                }
                let source = self.cfg.validation_source;
                self.pool.install(|| {
                    self.nodes
                        .par_iter_mut()
                        .zip(&split.shards)
                        .try_for_each(|(node, shard)| {
                            let validation = match source {
                                ValidationSource::Local => &shard.local_validation,
                                ValidationSource::Global => &split.global_validation,
                            };
                            node.aggregate(validation, cap)
                        })
                })?;
            }
        }

        let counts = self.pool.install(|| {
            self.nodes
                .par_iter()
                .zip(&split.shards)
                .map(|(node, shard)| {
                    Ok([
                        evaluate(&node.model, &shard.local_validation)?,
                        evaluate(&node.model, &split.global_validation)?,
                    ])
                })
                .collect::<Result<Vec<_>>>()
        })?;
        for (node, pair) in self.nodes.iter().zip(counts) {
            for (scope, c) in [Scope::Local, Scope::Global].into_iter().zip(pair) {
                let m = compute_metrics(&c)?;
                self.metrics.push(MetricsRecord {
                    round: self.round,
                    entity: node.name.clone(),
                    scenario: self.cfg.scenario,
                    model: self.cfg.model,
                    scope,
                    counts: c,
                    accuracy: m.accuracy,
                    precision: m.precision,
                    recall: m.recall,
                    f1: m.f1,
                });
            }
        }
        Ok(())
    }

    pub fn finish(self) -> Outcome {
        Outcome {
            metrics: self.metrics,
            ledger: self.ledger,
            final_models: self.nodes.into_iter().map(|n| (n.name, n.model)).collect(),
        }
    }
}

/// Executes all configured rounds and returns the full per-round history.
pub fn run_scenario(cfg: &ScenarioConfig, split: &DatasetSplit) -> Result<Outcome> {
    let mut sim = Simulation::new(cfg, split)?;
    for _ in 0..cfg.rounds {
        sim.step()?;
    }
    Ok(sim.finish())
}
