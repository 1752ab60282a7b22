//! Command-line front end: `synth`, `prepare`, `run`, `sweep-pca`, `report`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::data::{
    generate_synthetic, load_flow_csv, partition_by_entity, read_records_csv, split_validation,
    synthetic_resolver, write_flow_csv, write_records_csv, CsvSchema, DatasetSplit, EntityShard,
    PartitionRule, PartitionSpec, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::features::{sweep_components, Preprocessor};
use crate::federation::{run_scenario, MetricsRecord, ModelKind, Scenario, Scope, ValidationSource};
use crate::models::Model;

pub const PREPARED_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "dohfl", version, about = "Federated DoH tunnel detection simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic flow CSV with a matching schema and partition spec.
    Synth(SynthArgs),
    /// Partition a flow CSV by entity, split validation sets, fit preprocessing.
    Prepare(PrepareArgs),
    /// Run one federation scenario on prepared data.
    Run(RunArgs),
    /// Sweep the number of principal components.
    SweepPca(SweepArgs),
    /// Compare final-round metrics across runs.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 4)]
    pub entities: usize,
    #[arg(long, default_value_t = 8)]
    pub dimension: usize,
    /// Benign flows per entity.
    #[arg(long, default_value_t = 1000)]
    pub benign: usize,
    /// Attack flows per entity, all from the entity's own cluster.
    #[arg(long, default_value_t = 400)]
    pub attacks: usize,
    #[arg(long, default_value_t = 4.0)]
    pub separation: f64,
    /// JSON synthetic spec; replaces the disjoint-attack layout above.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Flow CSV export.
    #[arg(long)]
    pub input: PathBuf,
    /// TOML partition spec (`[[rules]]` with entity_id, name, resolvers).
    #[arg(long)]
    pub partition: PathBuf,
    /// TOML column mapping; defaults to the DoHLyzer layout.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    pub global_fraction: f64,
    #[arg(long, default_value_t = 0.1)]
    pub local_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Every configuration key, each optional; set values override the file.
#[derive(Debug, Default, Args, Serialize)]
pub struct Overrides {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scenario: Option<Scenario>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelKind>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rounds: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pca_k: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation_source: Option<ValidationSource>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta0: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decay: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l2: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grace_period: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tie_threshold: Option<f64>,
    /// `info_gain` or `gini`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split_criterion: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_thresholds: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_branch_fraction: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_trees: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_features: Option<usize>,
}

impl Overrides {
    fn to_table(&self) -> Result<toml::Table> {
        toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub k_min: usize,
    /// Defaults to the feature count.
    #[arg(long)]
    pub k_max: Option<usize>,
    /// Comma-separated model kinds.
    #[arg(long, value_delimiter = ',', default_values_t = ModelKind::ALL.to_vec())]
    pub models: Vec<ModelKind>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// metrics.jsonl files written by `run`.
    #[arg(required = true)]
    pub metrics: Vec<PathBuf>,
    #[arg(long, default_value = "global")]
    pub scope: String,
    /// Directory for report.csv and curves.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args`, runs the command, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let class = e.class();
            eprintln!("error[{}]: {e}", class.as_str());
            class.exit_code()
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Prepare(a) => cmd_prepare(&a).map(|table| print!("{table}")),
        Command::Run(a) => cmd_run(&a).map(|_| ()),
        Command::SweepPca(a) => cmd_sweep_pca(&a),
        Command::Report(a) => cmd_report(&a).map(|text| print!("{text}")),
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// Writes `bytes` to a temporary file beside `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub duration_seconds: f64,
}

impl RunManifest {
    fn new(command: &str, seed: u64, config: serde_json::Value) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed,
            config,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            duration_seconds: 0.0,
        }
    }

    fn write(mut self, dir: &Path, started: Instant) -> Result<()> {
        self.duration_seconds = started.elapsed().as_secs_f64();
        let mut text = serde_json::to_string_pretty(&self)?;
        text.push('\n');
        write_atomic(&dir.join("manifest.json"), text.as_bytes())
    }
}

fn write_output(dir: &Path, name: &str, bytes: &[u8], manifest: &mut RunManifest) -> Result<()> {
    write_atomic(&dir.join(name), bytes)?;
    manifest.outputs.insert(name.into(), sha256_hex(bytes));
    Ok(())
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let spec = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str::<SyntheticSpec>(&text)?
        }
        None => {
            if a.entities == 0 || a.dimension == 0 {
                return Err(Error::InvalidArgument(
                    "entities and dimension must be positive".into(),
                ));
            }
            SyntheticSpec::disjoint_attacks(a.entities, a.dimension, a.benign, a.attacks, a.separation)
        }
    };
    let entities = generate_synthetic(&spec, a.seed)?;
    let schema = CsvSchema {
        features: (0..spec.dimension).map(|i| format!("f{i}")).collect(),
        ..CsvSchema::default()
    };
    let mut csv = Vec::new();
    write_flow_csv(&mut csv, &entities, &schema)?;
    write_atomic(&a.out.join("flows.csv"), &csv)?;
    let partition = PartitionSpec {
        rules: entities
            .iter()
            .map(|e| PartitionRule {
                entity_id: e.entity_id,
                name: e.name.clone(),
                resolvers: vec![synthetic_resolver(e.entity_id)],
            })
            .collect(),
    };
    write_atomic(&a.out.join("schema.toml"), to_toml(&schema)?.as_bytes())?;
    write_atomic(&a.out.join("partition.toml"), to_toml(&partition)?.as_bytes())?;
    println!(
        "wrote {} flows for {} entities to {}",
        entities.iter().map(|e| e.records.len()).sum::<usize>(),
        entities.len(),
        a.out.display()
    );
    Ok(())
}

fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string(value).map_err(|e| Error::Config(e.to_string()))
}

/// Per-entity counts written to `entities.json` and printed by `prepare`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityInfo {
    pub entity_id: usize,
    pub name: String,
    pub flows: usize,
    pub malicious: usize,
    pub benign: usize,
    pub train: usize,
    pub local_validation: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedIndex {
    pub version: u32,
    pub seed: u64,
    pub feature_names: Vec<String>,
    pub global_validation: usize,
    pub discarded: usize,
    pub entities: Vec<EntityInfo>,
}

/// Split data and preprocessing loaded from a `prepare` output directory.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub index: PreparedIndex,
    pub split: DatasetSplit,
    pub preprocessor: Preprocessor,
}

fn train_file(id: usize) -> String {
    format!("train_{id}.csv")
}

fn local_file(id: usize) -> String {
    format!("local_{id}.csv")
}

const GLOBAL_FILE: &str = "global_validation.csv";

pub fn count_table(index: &PreparedIndex) -> String {
    let width = index
        .entities
        .iter()
        .map(|e| e.name.len())
        .max()
        .unwrap_or(0)
        .max("entity".len());
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>9}  {:>9}  {:>9}", "entity", "flows", "malicious", "benign");
    for e in &index.entities {
        let _ = writeln!(
            out,
            "{:<width$}  {:>9}  {:>9}  {:>9}",
            e.name, e.flows, e.malicious, e.benign
        );
    }
    let sum = |f: fn(&EntityInfo) -> usize| index.entities.iter().map(f).sum::<usize>();
    let _ = writeln!(
        out,
        "{:<width$}  {:>9}  {:>9}  {:>9}",
        "total",
        sum(|e| e.flows),
        sum(|e| e.malicious),
        sum(|e| e.benign)
    );
    out
}

/// Returns the printed per-entity count table.
pub fn cmd_prepare(a: &PrepareArgs) -> Result<String> {
    let started = Instant::now();
    let schema: CsvSchema = match &a.schema {
        Some(p) => read_toml(p)?,
        None => CsvSchema::default(),
    };
    let spec: PartitionSpec = read_toml(&a.partition)?;
    let table = load_flow_csv(&a.input, &schema)?;
    let partition = partition_by_entity(&table, &spec)?;
    let split = split_validation(&partition.entities, a.global_fraction, a.local_fraction, a.seed)?;
    let dims = schema.features.len();
    let preprocessor = Preprocessor::fit_on_training(&split, dims)?;

    let mut manifest = RunManifest::new(
        "prepare",
        a.seed,
        serde_json::json!({
            "global_fraction": a.global_fraction,
            "local_fraction": a.local_fraction,
            "schema": schema,
            "partition": spec,
        }),
    );
    manifest.inputs.insert(a.input.display().to_string(), file_digest(&a.input)?);
    manifest
        .inputs
        .insert(a.partition.display().to_string(), file_digest(&a.partition)?);
    if let Some(p) = &a.schema {
        manifest.inputs.insert(p.display().to_string(), file_digest(p)?);
    }

    let mut entities = Vec::new();
    for (ent, shard) in partition.entities.iter().zip(&split.shards) {
        let malicious = ent.malicious_count();
        entities.push(EntityInfo {
            entity_id: ent.entity_id,
            name: ent.name.clone(),
            flows: ent.records.len(),
            malicious,
            benign: ent.records.len() - malicious,
            train: shard.train.len(),
            local_validation: shard.local_validation.len(),
        });
        for (name, records) in [
            (train_file(shard.entity_id), &shard.train),
            (local_file(shard.entity_id), &shard.local_validation),
        ] {
            let mut buf = Vec::new();
            write_records_csv(&mut buf, &schema.features, records)?;
            write_output(&a.out, &name, &buf, &mut manifest)?;
        }
    }
    let mut buf = Vec::new();
    write_records_csv(&mut buf, &schema.features, &split.global_validation)?;
    write_output(&a.out, GLOBAL_FILE, &buf, &mut manifest)?;

    let index = PreparedIndex {
        version: PREPARED_VERSION,
        seed: a.seed,
        feature_names: schema.features.clone(),
        global_validation: split.global_validation.len(),
        discarded: partition.discarded.len(),
        entities,
    };
    let text = serde_json::to_string_pretty(&index)? + "\n";
    write_output(&a.out, "entities.json", text.as_bytes(), &mut manifest)?;
    let text = preprocessor.to_json()? + "\n";
    write_output(&a.out, "preprocessing.json", text.as_bytes(), &mut manifest)?;
    manifest.write(&a.out, started)?;

    let mut out = count_table(&index);
    if index.discarded > 0 {
        let _ = writeln!(out, "({} flows matched no entity and were discarded)", index.discarded);
    }
    Ok(out)
}

fn read_records(path: &Path) -> Result<(Vec<String>, Vec<crate::data::FlowRecord>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_records_csv(file)
}

pub fn load_prepared(dir: &Path) -> Result<Prepared> {
    let path = dir.join("entities.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: PreparedIndex = serde_json::from_str(&text)?;
    if index.version != PREPARED_VERSION {
        return Err(Error::Version {
            expected: PREPARED_VERSION,
            found: index.version,
        });
    }
    let load = |name: String| -> Result<Vec<crate::data::FlowRecord>> {
        let (names, records) = read_records(&dir.join(&name))?;
        if names != index.feature_names {
            return Err(Error::Config(format!(
                "{name}: feature columns differ from entities.json"
            )));
        }
        Ok(records)
    };
    let shards = index
        .entities
        .iter()
        .map(|e| {
            Ok(EntityShard {
                entity_id: e.entity_id,
                provider_name: e.name.clone(),
                train: load(train_file(e.entity_id))?,
                local_validation: load(local_file(e.entity_id))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let split = DatasetSplit {
        shards,
        global_validation: load(GLOBAL_FILE.into())?,
        seed: index.seed,
    };
    let path = dir.join("preprocessing.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let preprocessor = Preprocessor::from_json(&text)?;
    Ok(Prepared {
        index,
        split,
        preprocessor,
    })
}

fn prepared_digests(dir: &Path, index: &PreparedIndex) -> Result<BTreeMap<String, String>> {
    let mut names = vec!["entities.json".to_string(), "preprocessing.json".into(), GLOBAL_FILE.into()];
    for e in &index.entities {
        names.push(train_file(e.entity_id));
        names.push(local_file(e.entity_id));
    }
    names
        .into_iter()
        .map(|n| {
            let d = file_digest(&dir.join(&n))?;
            Ok((dir.join(n).display().to_string(), d))
        })
        .collect()
}

/// Applies the configured projection, or passes features through when
/// `pca_k` is 0.
pub fn project(prepared: &Prepared, pca_k: usize) -> Result<DatasetSplit> {
    if pca_k == 0 {
        return Ok(prepared.split.clone());
    }
    let dims = prepared.index.feature_names.len();
    if pca_k > dims {
        return Err(Error::Config(format!(
            "pca_k = {pca_k} exceeds the {dims} available features"
        )));
    }
    prepared.preprocessor.with_k(pca_k)?.apply_split(&prepared.split)
}

#[derive(Serialize)]
struct ModelsDoc<'a> {
    version: u32,
    scenario: Scenario,
    model: ModelKind,
    entities: Vec<EntityModel<'a>>,
}

#[derive(Serialize)]
struct EntityModel<'a> {
    entity: &'a str,
    model: &'a Model,
}

/// Runs the configured scenario and writes metrics.jsonl, ledger.csv,
/// models.json and manifest.json into the output directory.
pub fn cmd_run(a: &RunArgs) -> Result<PathBuf> {
    let started = Instant::now();
    let cfg = RunConfig::load(a.config.as_deref(), a.overrides.to_table()?)?;
    let scenario = cfg.scenario_config()?;
    let prepared = load_prepared(&cfg.data)?;
    let split = project(&prepared, cfg.pca_k)?;
    let outcome = run_scenario(&scenario, &split)?;

    let mut manifest = RunManifest::new(
        "run",
        cfg.seed,
        serde_json::to_value(&cfg).map_err(Error::from)?,
    );
    manifest.inputs = prepared_digests(&cfg.data, &prepared.index)?;
    if let Some(p) = &a.config {
        manifest.inputs.insert(p.display().to_string(), file_digest(p)?);
    }

    let mut metrics = String::new();
    for m in &outcome.metrics {
        metrics.push_str(&serde_json::to_string(m)?);
        metrics.push('\n');
    }
    let mut ledger = Vec::new();
    outcome.ledger.write_csv(&mut ledger)?;
    let doc = ModelsDoc {
        version: crate::models::MODEL_VERSION,
        scenario: cfg.scenario,
        model: cfg.model,
        entities: outcome
            .final_models
            .iter()
            .map(|(entity, model)| EntityModel { entity, model })
            .collect(),
    };
    let models = serde_json::to_string(&doc)? + "\n";

    write_output(&cfg.out, "metrics.jsonl", metrics.as_bytes(), &mut manifest)?;
    write_output(&cfg.out, "ledger.csv", &ledger, &mut manifest)?;
    write_output(&cfg.out, "models.json", models.as_bytes(), &mut manifest)?;
    manifest.write(&cfg.out, started)?;

    let last = scenario.rounds;
    println!(
        "{} {} after {last} rounds (global validation):",
        cfg.scenario, cfg.model
    );
    for m in outcome
        .metrics
        .iter()
        .filter(|m| m.round == last && m.scope == Scope::Global)
    {
        println!("  {:<20} accuracy {:.4}  f1 {:.4}", m.entity, m.accuracy, m.f1);
    }
    println!("  bytes transferred: {}", outcome.ledger.total());
    Ok(cfg.out)
}

pub fn cmd_sweep_pca(a: &SweepArgs) -> Result<()> {
    let started = Instant::now();
    let cfg = RunConfig::load(a.config.as_deref(), a.overrides.to_table()?)?;
    let scenario = cfg.scenario_config()?;
    let prepared = load_prepared(&cfg.data)?;
    let dims = prepared.index.feature_names.len();
    let k_max = a.k_max.unwrap_or(dims);
    if a.k_min == 0 || a.k_min > k_max {
        return Err(Error::InvalidArgument(format!(
            "empty component range {}..={k_max}",
            a.k_min
        )));
    }
    if k_max > dims {
        return Err(Error::Config(format!(
            "k_max = {k_max} exceeds the {dims} available features"
        )));
    }
    let ks: Vec<usize> = (a.k_min..=k_max).collect();
    let table = sweep_components(&ks, &scenario, &a.models, &prepared.split, &prepared.preprocessor)?;

    let mut manifest = RunManifest::new(
        "sweep-pca",
        cfg.seed,
        serde_json::json!({ "run": cfg, "k_min": a.k_min, "k_max": k_max, "models": a.models }),
    );
    manifest.inputs = prepared_digests(&cfg.data, &prepared.index)?;

    let mut rows = csv::Writer::from_writer(Vec::new());
    for r in &table.rows {
        rows.serialize(r)?;
    }
    let rows = rows.into_inner().map_err(|e| Error::io("<csv output>", e.into_error()))?;
    let mut stats = csv::Writer::from_writer(Vec::new());
    for s in &table.stats {
        stats.serialize(s)?;
    }
    let stats = stats.into_inner().map_err(|e| Error::io("<csv output>", e.into_error()))?;
    write_output(&cfg.out, "sweep.csv", &rows, &mut manifest)?;
    write_output(&cfg.out, "sweep_stats.csv", &stats, &mut manifest)?;
    manifest.write(&cfg.out, started)?;

    println!("{:>4}  {:>8}  {:>8}  {:>7}", "k", "mean", "spread", "score");
    for s in &table.stats {
        println!(
            "{:>4}  {:>8.4}  {:>8.4}  {:>7.4}{}",
            s.k,
            s.mean_accuracy,
            s.spread,
            s.score,
            if s.selected { "  <- selected" } else { "" }
        );
    }
    Ok(())
}

/// Parses a metrics JSON-lines document; errors name the offending line.
pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Malformed {
                what: "metrics record",
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub model: ModelKind,
    pub entity: String,
    pub scenario: Scenario,
    pub round: usize,
    pub accuracy: f64,
    pub f1: f64,
}

/// Renders final-round accuracy and F1 per entity, one column group per
/// scenario, one table per model kind.
pub fn cmd_report(a: &ReportArgs) -> Result<String> {
    let scope = match a.scope.as_str() {
        "local" => Scope::Local,
        "global" => Scope::Global,
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown scope `{other}` (expected local or global)"
            )))
        }
    };
    let mut runs: Vec<Vec<MetricsRecord>> = Vec::new();
    for path in &a.metrics {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let records = parse_metrics(&text).map_err(|e| match e {
            Error::Malformed { what, line, message } => Error::Malformed {
                what,
                line,
                message: format!("{}: {message}", path.display()),
            },
            other => other,
        })?;
        if records.is_empty() {
            return Err(Error::EmptyFile { path: path.clone() });
        }
        runs.push(records);
    }

    let mut final_rows = Vec::new();
    let mut curves = Vec::new();
    for records in &runs {
        let last = records.iter().map(|r| r.round).max().unwrap_or(0);
        for r in records.iter().filter(|r| r.scope == scope) {
            curves.push(r.clone());
            if r.round == last {
                if final_rows.iter().any(|x: &ReportRow| {
                    x.model == r.model && x.scenario == r.scenario && x.entity == r.entity
                }) {
                    return Err(Error::InvalidArgument(format!(
                        "more than one {} {} run for entity {}",
                        r.scenario, r.model, r.entity
                    )));
                }
                final_rows.push(ReportRow {
                    model: r.model,
                    entity: r.entity.clone(),
                    scenario: r.scenario,
                    round: r.round,
                    accuracy: r.accuracy,
                    f1: r.f1,
                });
            }
        }
    }
    final_rows.sort_by(|a, b| {
        (a.model, &a.entity, a.scenario).cmp(&(b.model, &b.entity, b.scenario))
    });

    let mut text = String::new();
    let mut models: Vec<ModelKind> = final_rows.iter().map(|r| r.model).collect();
    models.dedup();
    for model in models {
        let rows: Vec<&ReportRow> = final_rows.iter().filter(|r| r.model == model).collect();
        let mut scenarios: Vec<Scenario> = rows.iter().map(|r| r.scenario).collect();
        scenarios.sort();
        scenarios.dedup();
        let mut entities: Vec<&str> = Vec::new();
        for r in &rows {
            if !entities.contains(&r.entity.as_str()) {
                entities.push(&r.entity);
            }
        }
        let width = entities.iter().map(|e| e.len()).max().unwrap_or(0).max(6);
        let _ = writeln!(text, "model {model}, {} validation, final round", a.scope);
        let _ = write!(text, "{:<width$}", "entity");
        for s in &scenarios {
            let _ = write!(text, "  {:>21}", format!("{s} acc / f1"));
        }
        text.push('\n');
        for e in entities {
            let _ = write!(text, "{e:<width$}");
            for s in &scenarios {
                match rows.iter().find(|r| r.entity == e && r.scenario == *s) {
                    Some(r) => {
                        let _ = write!(text, "  {:>21}", format!("{:.4} / {:.4}", r.accuracy, r.f1));
                    }
                    None => {
                        let _ = write!(text, "  {:>21}", "-");
                    }
                }
            }
            text.push('\n');
        }
        text.push('\n');
    }

    if let Some(out) = &a.out {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &final_rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::io("<csv output>", e.into_error()))?;
        write_atomic(&out.join("report.csv"), &bytes)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["model", "scenario", "entity", "scope", "round", "accuracy", "f1"])?;
        for r in &curves {
            w.write_record([
                r.model.to_string(),
                r.scenario.to_string(),
                r.entity.clone(),
                a.scope.clone(),
                r.round.to_string(),
                r.accuracy.to_string(),
                r.f1.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::io("<csv output>", e.into_error()))?;
        write_atomic(&out.join("curves.csv"), &bytes)?;
    }
    Ok(text)
}
