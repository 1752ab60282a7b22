//! Flow records: CSV ingestion, per-provider partitioning, validation
//! splits, stratified per-round batches and synthetic cluster data.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::net::IpAddr;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary flow label. Malicious is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Benign,
    Malicious,
}

impl Label {
    pub fn is_malicious(self) -> bool {
        self == Label::Malicious
    }

    pub fn index(self) -> usize {
        match self {
            Label::Benign => 0,
            Label::Malicious => 1,
        }
    }

    pub fn from_index(i: usize) -> Label {
        if i == 0 {
            Label::Benign
        } else {
            Label::Malicious
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Benign => "benign",
            Label::Malicious => "malicious",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowRecord {
    pub features: Vec<f64>,
    pub label: Label,
    pub entity_id: usize,
    pub source_row: usize,
}

/// Non-feature columns kept for partitioning; never fed to a model.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FlowMeta {
    pub source_ip: String,
    pub destination_ip: String,
}

/// The 28 statistical columns of a DoHLyzer flow export.
pub const DOHLYZER_FEATURES: [&str; 28] = [
    "FlowBytesSent",
    "FlowSentRate",
    "FlowBytesReceived",
    "FlowReceivedRate",
    "PacketLengthVariance",
    "PacketLengthStandardDeviation",
    "PacketLengthMean",
    "PacketLengthMedian",
    "PacketLengthMode",
    "PacketLengthSkewFromMedian",
    "PacketLengthSkewFromMode",
    "PacketLengthCoefficientofVariation",
    "PacketTimeVariance",
    "PacketTimeStandardDeviation",
    "PacketTimeMean",
    "PacketTimeMedian",
    "PacketTimeMode",
    "PacketTimeSkewFromMedian",
    "PacketTimeSkewFromMode",
    "PacketTimeCoefficientofVariation",
    "ResponseTimeTimeVariance",
    "ResponseTimeTimeStandardDeviation",
    "ResponseTimeTimeMean",
    "ResponseTimeTimeMedian",
    "ResponseTimeTimeMode",
    "ResponseTimeTimeSkewFromMedian",
    "ResponseTimeTimeSkewFromMode",
    "ResponseTimeTimeCoefficientofVariation",
];

/// Column mapping for a flow CSV export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsvSchema {
    pub features: Vec<String>,
    pub label: String,
    pub source_ip: String,
    pub destination_ip: String,
    /// Label cell values (case-insensitive) meaning benign.
    pub benign_values: Vec<String>,
    /// Label cell values (case-insensitive) meaning malicious.
    pub malicious_values: Vec<String>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            features: DOHLYZER_FEATURES.iter().map(|s| s.to_string()).collect(),
            label: "Label".into(),
            source_ip: "SourceIP".into(),
            destination_ip: "DestinationIP".into(),
            benign_values: vec!["benign".into()],
            malicious_values: vec!["malicious".into()],
        }
    }
}

impl CsvSchema {
    fn parse_label(&self, cell: &str) -> Option<Label> {
        let cell = cell.trim();
        if self.benign_values.iter().any(|v| v.eq_ignore_ascii_case(cell)) {
            Some(Label::Benign)
        } else if self.malicious_values.iter().any(|v| v.eq_ignore_ascii_case(cell)) {
            Some(Label::Malicious)
        } else {
            None
        }
    }
}

/// Records loaded from one CSV file, with per-record side metadata.
#[derive(Debug, Clone, Default)]
pub struct FlowTable {
    pub feature_names: Vec<String>,
    pub records: Vec<FlowRecord>,
    pub meta: Vec<FlowMeta>,
}

pub fn load_flow_csv(path: &Path, schema: &CsvSchema) -> Result<FlowTable> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut table = read_flow_csv(file, schema)?;
    if table.records.is_empty() {
        return Err(Error::EmptyFile {
            path: path.to_path_buf(),
        });
    }
    table.feature_names = schema.features.clone();
    Ok(table)
}

/// Reader-based variant of [`load_flow_csv`]; an empty body yields an empty table.
pub fn read_flow_csv<R: std::io::Read>(reader: R, schema: &CsvSchema) -> Result<FlowTable> {
    if schema.features.is_empty() {
        return Err(Error::Config("schema lists no feature columns".into()));
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn {
                column: name.to_string(),
            })
    };
    let feature_cols = schema
        .features
        .iter()
        .map(|f| column(f))
        .collect::<Result<Vec<_>>>()?;
    let label_col = column(&schema.label)?;
    let src_col = column(&schema.source_ip)?;
    let dst_col = column(&schema.destination_ip)?;

    let mut table = FlowTable {
        feature_names: schema.features.clone(),
        ..Default::default()
    };
    for (row, result) in rdr.records().enumerate() {
        let rec = result?;
        let cell = |col: usize| rec.get(col).unwrap_or("");
        let mut features = Vec::with_capacity(feature_cols.len());
        for (name, &col) in schema.features.iter().zip(&feature_cols) {
            let value: f64 = cell(col).parse().map_err(|_| Error::Row {
                row: row + 1,
                column: name.clone(),
                message: format!("non-numeric value `{}`", cell(col)),
            })?;
            if !value.is_finite() {
                return Err(Error::Row {
                    row: row + 1,
                    column: name.clone(),
                    message: format!("non-finite value `{}`", cell(col)),
                });
            }
            features.push(value);
        }
        let label = schema.parse_label(cell(label_col)).ok_or_else(|| Error::Row {
            row: row + 1,
            column: schema.label.clone(),
            message: format!("unrecognized label `{}`", cell(label_col)),
        })?;
        table.records.push(FlowRecord {
            features,
            label,
            entity_id: 0,
            source_row: row,
        });
        table.meta.push(FlowMeta {
            source_ip: cell(src_col).to_string(),
            destination_ip: cell(dst_col).to_string(),
        });
    }
    Ok(table)
}

/// Destination address pattern: `*`, an exact address, or CIDR notation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AddrPattern {
    Any,
    Exact(IpAddr),
    Cidr(IpAddr, u8),
}

impl AddrPattern {
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "*" {
            return Ok(AddrPattern::Any);
        }
        let bad = || Error::Config(format!("invalid address pattern `{s}`"));
        match s.split_once('/') {
            Some((addr, len)) => {
                let addr: IpAddr = addr.parse().map_err(|_| bad())?;
                let len: u8 = len.parse().map_err(|_| bad())?;
                let max = if addr.is_ipv4() { 32 } else { 128 };
                if len > max {
                    return Err(bad());
                }
                Ok(AddrPattern::Cidr(addr, len))
            }
            None => Ok(AddrPattern::Exact(s.parse().map_err(|_| bad())?)),
        }
    }

    pub fn matches(&self, ip: Option<IpAddr>) -> bool {
        match (self, ip) {
            (AddrPattern::Any, _) => true,
            (AddrPattern::Exact(a), Some(ip)) => *a == ip,
            (AddrPattern::Cidr(net, len), Some(ip)) => prefix_match(*net, ip, *len),
            _ => false,
        }
    }
}

fn prefix_match(net: IpAddr, ip: IpAddr, len: u8) -> bool {
    fn masked(bits: u128, len: u8, width: u8) -> u128 {
        if len == 0 {
            0
        } else {
            bits >> (width - len)
        }
    }
    match (net, ip) {
        (IpAddr::V4(a), IpAddr::V4(b)) => {
            masked(u32::from(a) as u128, len, 32) == masked(u32::from(b) as u128, len, 32)
        }
        (IpAddr::V6(a), IpAddr::V6(b)) => {
            masked(u128::from(a), len, 128) == masked(u128::from(b), len, 128)
        }
        _ => false,
    }
}

/// Maps destination resolver addresses to one entity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionRule {
    pub entity_id: usize,
    pub name: String,
    pub resolvers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub rules: Vec<PartitionRule>,
}

/// Raw records owned by one entity, before any validation split.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityRecords {
    pub entity_id: usize,
    pub name: String,
    pub records: Vec<FlowRecord>,
}

impl EntityRecords {
    pub fn malicious_count(&self) -> usize {
        self.records.iter().filter(|r| r.label.is_malicious()).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    /// Ordered by entity id.
    pub entities: Vec<EntityRecords>,
    pub discarded: Vec<FlowRecord>,
}

impl Partition {
    pub fn assigned_count(&self) -> usize {
        self.entities.iter().map(|e| e.records.len()).sum()
    }
}

pub fn partition_by_entity(table: &FlowTable, spec: &PartitionSpec) -> Result<Partition> {
    let mut seen = HashMap::new();
    for rule in &spec.rules {
        if let Some(prev) = seen.insert(rule.entity_id, &rule.name) {
            return Err(Error::Config(format!(
                "entity id {} used by both `{prev}` and `{}`",
                rule.entity_id, rule.name
            )));
        }
    }
    let compiled = spec
        .rules
        .iter()
        .map(|r| {
            r.resolvers
                .iter()
                .map(|p| AddrPattern::parse(p))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut buckets: BTreeMap<usize, EntityRecords> = spec
        .rules
        .iter()
        .map(|r| {
            (
                r.entity_id,
                EntityRecords {
                    entity_id: r.entity_id,
                    name: r.name.clone(),
                    records: Vec::new(),
                },
            )
        })
        .collect();
    let mut discarded = Vec::new();

    for (i, record) in table.records.iter().enumerate() {
        let dst = table
            .meta
            .get(i)
            .and_then(|m| m.destination_ip.parse::<IpAddr>().ok());
        let mut hit: Option<usize> = None;
        for (rule, patterns) in spec.rules.iter().zip(&compiled) {
            if patterns.iter().any(|p| p.matches(dst)) {
                if let Some(prev) = hit {
                    return Err(Error::Config(format!(
                        "row {}: matched by rules for entity {prev} and entity {}",
                        record.source_row + 1,
                        rule.entity_id
                    )));
                }
                hit = Some(rule.entity_id);
            }
        }
        let mut record = record.clone();
        match hit {
            Some(id) => {
                record.entity_id = id;
                buckets.get_mut(&id).expect("bucket per rule").records.push(record);
            }
            None => discarded.push(record),
        }
    }
    Ok(Partition {
        entities: buckets.into_values().collect(),
        discarded,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntityShard {
    pub entity_id: usize,
    pub provider_name: String,
    pub train: Vec<FlowRecord>,
    pub local_validation: Vec<FlowRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub shards: Vec<EntityShard>,
    pub global_validation: Vec<FlowRecord>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn dimension(&self) -> Option<usize> {
        self.shards
            .iter()
            .flat_map(|s| s.train.first())
            .next()
            .map(|r| r.features.len())
    }
}

fn check_fraction(name: &str, f: f64) -> Result<()> {
    if f > 0.0 && f < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "{name} must lie strictly between 0 and 1, got {f}"
        )))
    }
}

/// Draws the global validation set uniformly from the union of all entities,
/// then a local validation set from each entity's remainder.
///
/// If the uniform draw misses an entity entirely, one of its records is
/// swapped in for a record of the best-represented entity so that every
/// entity appears in the global set.
pub fn split_validation(
    entities: &[EntityRecords],
    global_fraction: f64,
    local_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    check_fraction("global_fraction", global_fraction)?;
    check_fraction("local_fraction", local_fraction)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut pool: Vec<(usize, usize)> = entities
        .iter()
        .enumerate()
        .flat_map(|(e, ent)| (0..ent.records.len()).map(move |r| (e, r)))
        .collect();
    let total = pool.len();
    let n_global = (global_fraction * total as f64).round() as usize;
    pool.shuffle(&mut rng);

    if n_global >= entities.len() {
        let mut per_entity = vec![0usize; entities.len()];
        for &(e, _) in &pool[..n_global] {
            per_entity[e] += 1;
        }
        for missing in 0..entities.len() {
            if per_entity[missing] > 0 || entities[missing].records.is_empty() {
                continue;
            }
            let donor_entity = (0..entities.len())
                .max_by_key(|&e| (per_entity[e], std::cmp::Reverse(e)))
                .expect("at least one entity");
            let out_pos = (0..n_global)
                .rev()
                .find(|&i| pool[i].0 == donor_entity)
                .expect("donor has a selected record");
            let in_pos = (n_global..total)
                .find(|&i| pool[i].0 == missing)
                .expect("missing entity has unselected records");
            pool.swap(out_pos, in_pos);
            per_entity[donor_entity] -= 1;
            per_entity[missing] += 1;
        }
    }

    let mut in_global = vec![Vec::new(); entities.len()];
    for &(e, r) in &pool[..n_global] {
        in_global[e].push(r);
    }
    let mut global_validation: Vec<FlowRecord> = pool[..n_global]
        .iter()
        .map(|&(e, r)| entities[e].records[r].clone())
        .collect();
    global_validation.sort_by_key(|r| r.source_row);

    let mut shards = Vec::with_capacity(entities.len());
    for (e, ent) in entities.iter().enumerate() {
        let mut taken = vec![false; ent.records.len()];
        for &r in &in_global[e] {
            taken[r] = true;
        }
        let mut remainder: Vec<usize> = (0..ent.records.len()).filter(|&r| !taken[r]).collect();
        remainder.shuffle(&mut rng);
        let n_local = (local_fraction * remainder.len() as f64).round() as usize;
        if n_local >= remainder.len() {
            return Err(Error::EmptyTrainSet {
                entity: ent.entity_id,
            });
        }
        let (local, train) = remainder.split_at(n_local);
        let collect = |idx: &[usize]| {
            let mut v: Vec<FlowRecord> = idx.iter().map(|&r| ent.records[r].clone()).collect();
            v.sort_by_key(|r| r.source_row);
            v
        };
        shards.push(EntityShard {
            entity_id: ent.entity_id,
            provider_name: ent.name.clone(),
            train: collect(train),
            local_validation: collect(local),
        });
    }
    Ok(DatasetSplit {
        shards,
        global_validation,
        seed,
    })
}

/// Per-round training batches for one entity, as indices into `shard.train`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSchedule {
    pub entity_id: usize,
    pub batch_size: usize,
    pub rounds: usize,
    pub batches: Vec<Vec<usize>>,
}

/// Stratified batches consumed without replacement.
///
/// Batch `b` takes `round((b+1)·s·p) − round(b·s·p)` malicious records where
/// `p` is the malicious share of the train set, so every batch is within one
/// sample of the train-set proportion.
pub fn make_batches(
    shard: &EntityShard,
    batch_size: usize,
    rounds: usize,
    seed: u64,
) -> Result<BatchSchedule> {
    if batch_size == 0 || rounds == 0 {
        return Err(Error::InvalidArgument(
            "batch_size and rounds must be positive".into(),
        ));
    }
    let required = batch_size * rounds;
    if shard.train.len() < required {
        return Err(Error::InsufficientSamples {
            entity: shard.entity_id,
            required,
            available: shard.train.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(shard.entity_id as u64 + 1);

    let (mut malicious, mut benign): (Vec<usize>, Vec<usize>) =
        (0..shard.train.len()).partition(|&i| shard.train[i].label.is_malicious());
    malicious.shuffle(&mut rng);
    benign.shuffle(&mut rng);
    let share = malicious.len() as f64 / shard.train.len() as f64;
    let quota = |b: usize| (b as f64 * batch_size as f64 * share).round() as usize;

    let (mut mi, mut bi) = (0, 0);
    let mut batches = Vec::with_capacity(rounds);
    for b in 0..rounds {
        let n_mal = quota(b + 1) - quota(b);
        let mut batch: Vec<usize> = malicious[mi..mi + n_mal].to_vec();
        batch.extend_from_slice(&benign[bi..bi + (batch_size - n_mal)]);
        mi += n_mal;
        bi += batch_size - n_mal;
        batch.shuffle(&mut rng);
        batches.push(batch);
    }
    Ok(BatchSchedule {
        entity_id: shard.entity_id,
        batch_size,
        rounds,
        batches,
    })
}

/// Isotropic Gaussian cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub center: Vec<f64>,
    pub scale: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticEntity {
    pub name: String,
    pub benign: Vec<Cluster>,
    pub attacks: Vec<Cluster>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub dimension: usize,
    pub entities: Vec<SyntheticEntity>,
}

impl SyntheticSpec {
    /// Shared benign traffic at the origin; entity `i` sees a single attack
    /// cluster displaced by `separation` along its own direction.
    pub fn disjoint_attacks(
        n_entities: usize,
        dimension: usize,
        benign_per_entity: usize,
        attacks_per_entity: usize,
        separation: f64,
    ) -> Self {
        let entities = (0..n_entities)
            .map(|i| {
                let mut center = vec![0.0; dimension];
                let axis = i % dimension.max(1);
                let sign = if (i / dimension.max(1)) % 2 == 0 { 1.0 } else { -1.0 };
                if dimension > 0 {
                    center[axis] = sign * separation;
                }
                SyntheticEntity {
                    name: format!("entity{i}"),
                    benign: vec![Cluster {
                        center: vec![0.0; dimension],
                        scale: 1.0,
                        count: benign_per_entity,
                    }],
                    attacks: vec![Cluster {
                        center,
                        scale: 1.0,
                        count: attacks_per_entity,
                    }],
                }
            })
            .collect();
        Self {
            dimension,
            entities,
        }
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Vec<EntityRecords>> {
    for ent in &spec.entities {
        for c in ent.benign.iter().chain(&ent.attacks) {
            if c.center.len() != spec.dimension {
                return Err(Error::DimensionMismatch {
                    expected: spec.dimension,
                    found: c.center.len(),
                });
            }
            if !(c.scale >= 0.0 && c.scale.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "cluster scale must be non-negative, got {}",
                    c.scale
                )));
            }
            if c.count == 0 {
                return Err(Error::InvalidArgument("cluster count must be positive".into()));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut row = 0;
    let mut out = Vec::with_capacity(spec.entities.len());
    for (id, ent) in spec.entities.iter().enumerate() {
        let mut records = Vec::new();
        let clusters = ent
            .benign
            .iter()
            .map(|c| (c, Label::Benign))
            .chain(ent.attacks.iter().map(|c| (c, Label::Malicious)));
        for (cluster, label) in clusters {
            for _ in 0..cluster.count {
                let features = cluster
                    .center
                    .iter()
                    .map(|&mu| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        mu + cluster.scale * z
                    })
                    .collect();
                records.push(FlowRecord {
                    features,
                    label,
                    entity_id: id,
                    source_row: row,
                });
                row += 1;
            }
        }
        out.push(EntityRecords {
            entity_id: id,
            name: ent.name.clone(),
            records,
        });
    }
    Ok(out)
}

/// Synthetic resolver address used for entity `id` when exporting CSVs.
pub fn synthetic_resolver(id: usize) -> String {
    format!("10.53.{}.{}", id / 250, id % 250 + 1)
}

/// Writes entity records as a flow CSV readable by [`load_flow_csv`] with
/// `schema`, using [`synthetic_resolver`] destinations.
pub fn write_flow_csv<W: std::io::Write>(
    writer: W,
    entities: &[EntityRecords],
    schema: &CsvSchema,
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec![schema.source_ip.clone(), schema.destination_ip.clone()];
    header.extend(schema.features.iter().cloned());
    header.push(schema.label.clone());
    wtr.write_record(&header)?;
    let mut rows: Vec<(&FlowRecord, usize)> = entities
        .iter()
        .flat_map(|e| e.records.iter().map(move |r| (r, e.entity_id)))
        .collect();
    rows.sort_by_key(|(r, _)| r.source_row);
    for (r, entity) in rows {
        if r.features.len() != schema.features.len() {
            return Err(Error::DimensionMismatch {
                expected: schema.features.len(),
                found: r.features.len(),
            });
        }
        let mut fields = vec![
            format!("192.168.{}.{}", r.source_row / 250 % 250, r.source_row % 250 + 1),
            synthetic_resolver(entity),
        ];
        fields.extend(r.features.iter().map(|v| v.to_string()));
        fields.push(match r.label {
            Label::Benign => "Benign".into(),
            Label::Malicious => "Malicious".into(),
        });
        wtr.write_record(&fields)?;
    }
    wtr.flush().map_err(|e| Error::io("<csv output>", e))?;
    Ok(())
}

/// Writes records in the prepared-shard layout: `entity_id,source_row,label`
/// followed by one column per feature. Floats use shortest round-trip text.
pub fn write_records_csv<W: std::io::Write>(
    writer: W,
    feature_names: &[String],
    records: &[FlowRecord],
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["entity_id".to_string(), "source_row".into(), "label".into()];
    header.extend(feature_names.iter().cloned());
    wtr.write_record(&header)?;
    for r in records {
        if r.features.len() != feature_names.len() {
            return Err(Error::DimensionMismatch {
                expected: feature_names.len(),
                found: r.features.len(),
            });
        }
        let mut fields = vec![r.entity_id.to_string(), r.source_row.to_string(), r.label.to_string()];
        fields.extend(r.features.iter().map(|v| v.to_string()));
        wtr.write_record(&fields)?;
    }
    wtr.flush().map_err(|e| Error::io("<csv output>", e))?;
    Ok(())
}

/// Inverse of [`write_records_csv`]; returns the feature names and records.
pub fn read_records_csv<R: std::io::Read>(reader: R) -> Result<(Vec<String>, Vec<FlowRecord>)> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let fixed = ["entity_id", "source_row", "label"];
    for (i, name) in fixed.iter().enumerate() {
        if headers.get(i) != Some(*name) {
            return Err(Error::MissingColumn {
                column: name.to_string(),
            });
        }
    }
    let names: Vec<String> = headers.iter().skip(3).map(String::from).collect();
    let mut records = Vec::new();
    for (row, result) in rdr.records().enumerate() {
        let rec = result?;
        let bad = |column: &str, cell: &str| Error::Row {
            row: row + 1,
            column: column.to_string(),
            message: format!("cannot parse `{cell}`"),
        };
        let int = |i: usize| -> Result<usize> {
            let cell = rec.get(i).unwrap_or("");
            cell.parse().map_err(|_| bad(fixed[i], cell))
        };
        let label = match rec.get(2).unwrap_or("") {
            "benign" => Label::Benign,
            "malicious" => Label::Malicious,
            other => return Err(bad("label", other)),
        };
        let features = names
            .iter()
            .enumerate()
            .map(|(j, name)| {
                let cell = rec.get(j + 3).unwrap_or("");
                cell.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| bad(name, cell))
            })
            .collect::<Result<Vec<_>>>()?;
        records.push(FlowRecord {
            features,
            label,
            entity_id: int(0)?,
            source_row: int(1)?,
        });
    }
    Ok((names, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema2() -> CsvSchema {
        CsvSchema {
            features: vec!["a".into(), "b".into()],
            ..CsvSchema::default()
        }
    }

    fn entity(id: usize, n: usize, malicious_every: usize) -> EntityRecords {
        EntityRecords {
            entity_id: id,
            name: format!("e{id}"),
            records: (0..n)
                .map(|i| FlowRecord {
                    features: vec![i as f64],
                    label: if i % malicious_every == 0 {
                        Label::Malicious
                    } else {
                        Label::Benign
                    },
                    entity_id: id,
                    source_row: id * 100_000 + i,
                })
                .collect(),
        }
    }

    #[test]
    fn reads_small_csv() {
        let csv = "SourceIP,DestinationIP,a,b,Label\n\
                   1.2.3.4,8.8.8.8,1.5,2,Benign\n\
                   1.2.3.4,1.1.1.1,3,-4e2,Malicious\n\
                   1.2.3.5,9.9.9.9,0,0,benign\n";
        let t = read_flow_csv(csv.as_bytes(), &schema2()).unwrap();
        assert_eq!(t.records.len(), 3);
        assert!(t.records.iter().all(|r| r.features.len() == 2));
        assert_eq!(t.records[1].features, vec![3.0, -400.0]);
        assert_eq!(t.records[1].label, Label::Malicious);
        assert_eq!(t.meta[1].destination_ip, "1.1.1.1");
        assert_eq!(t.records[2].source_row, 2);
    }

    #[test]
    fn missing_column_is_named() {
        let csv = "SourceIP,DestinationIP,a,b\n1.2.3.4,8.8.8.8,1,2\n";
        match read_flow_csv(csv.as_bytes(), &schema2()) {
            Err(Error::MissingColumn { column }) => assert_eq!(column, "Label"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_numeric_cell_reports_row() {
        let csv = "SourceIP,DestinationIP,a,b,Label\n1,2,1,2,Benign\n1,2,x,2,Benign\n";
        match read_flow_csv(csv.as_bytes(), &schema2()) {
            Err(Error::Row { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "a");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn header_only_file_is_empty_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        std::fs::write(&path, "SourceIP,DestinationIP,a,b,Label\n").unwrap();
        assert!(matches!(
            load_flow_csv(&path, &schema2()),
            Err(Error::EmptyFile { .. })
        ));
    }

    fn table_with_destinations(dsts: &[&str]) -> FlowTable {
        FlowTable {
            feature_names: vec!["a".into()],
            records: dsts
                .iter()
                .enumerate()
                .map(|(i, _)| FlowRecord {
                    features: vec![i as f64],
                    label: Label::Benign,
                    entity_id: 0,
                    source_row: i,
                })
                .collect(),
            meta: dsts
                .iter()
                .map(|d| FlowMeta {
                    source_ip: "192.168.1.1".into(),
                    destination_ip: d.to_string(),
                })
                .collect(),
        }
    }

    fn rule(id: usize, resolvers: &[&str]) -> PartitionRule {
        PartitionRule {
            entity_id: id,
            name: format!("p{id}"),
            resolvers: resolvers.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn partition_is_exhaustive_and_exclusive() {
        let t = table_with_destinations(&["8.8.8.8", "1.1.1.1", "8.8.4.4", "10.0.0.1", "1.0.0.1"]);
        let spec = PartitionSpec {
            rules: vec![rule(0, &["8.8.8.8", "8.8.4.4"]), rule(1, &["1.0.0.0/8"])],
        };
        let p = partition_by_entity(&t, &spec).unwrap();
        assert_eq!(p.entities[0].records.len(), 2);
        assert_eq!(p.entities[1].records.len(), 2);
        assert_eq!(p.discarded.len(), 1);
        assert_eq!(p.assigned_count() + p.discarded.len(), t.records.len());
        assert!(p.entities[1].records.iter().all(|r| r.entity_id == 1));
    }

    #[test]
    fn catch_all_rule() {
        let t = table_with_destinations(&["203.0.113.9"]);
        let p = partition_by_entity(&t, &PartitionSpec { rules: vec![rule(7, &["*"])] }).unwrap();
        assert_eq!(p.entities.len(), 1);
        assert_eq!(p.entities[0].records.len(), 1);
        assert_eq!(p.entities[0].records[0].entity_id, 7);
    }

    #[test]
    fn overlapping_rules_rejected() {
        let t = table_with_destinations(&["8.8.8.8"]);
        let spec = PartitionSpec {
            rules: vec![rule(0, &["8.8.8.8"]), rule(1, &["8.8.0.0/16"])],
        };
        assert!(matches!(partition_by_entity(&t, &spec), Err(Error::Config(_))));
        let dup = PartitionSpec {
            rules: vec![rule(0, &["8.8.8.8"]), rule(0, &["1.1.1.1"])],
        };
        assert!(matches!(partition_by_entity(&t, &dup), Err(Error::Config(_))));
    }

    #[test]
    fn cidr_matching() {
        let p = AddrPattern::parse("10.1.0.0/16").unwrap();
        assert!(p.matches("10.1.200.3".parse().ok()));
        assert!(!p.matches("10.2.0.1".parse().ok()));
        assert!(!p.matches(None));
        assert!(AddrPattern::parse("0.0.0.0/0").unwrap().matches("1.2.3.4".parse().ok()));
        assert!(AddrPattern::parse("1.2.3.4/33").is_err());
        assert!(AddrPattern::parse("2001:db8::/32")
            .unwrap()
            .matches("2001:db8::1".parse().ok()));
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let ents: Vec<_> = (0..4).map(|i| entity(i, 250, 3)).collect();
        let split = split_validation(&ents, 0.10, 0.10, 42).unwrap();
        assert_eq!(split.global_validation.len(), 100);
        let mut rows = std::collections::HashSet::new();
        for r in &split.global_validation {
            assert!(rows.insert(r.source_row));
        }
        let mut covered = std::collections::HashSet::new();
        for r in &split.global_validation {
            covered.insert(r.entity_id);
        }
        assert_eq!(covered.len(), 4);
        for (shard, ent) in split.shards.iter().zip(&ents) {
            let remaining = ent.records.len()
                - split
                    .global_validation
                    .iter()
                    .filter(|r| r.entity_id == ent.entity_id)
                    .count();
            let expected = (0.10 * remaining as f64).round() as i64;
            assert!((shard.local_validation.len() as i64 - expected).abs() <= 1);
            for r in shard.train.iter().chain(&shard.local_validation) {
                assert!(rows.insert(r.source_row), "record {} reused", r.source_row);
            }
        }
        assert_eq!(rows.len(), 1000);
    }

    #[test]
    fn split_is_deterministic() {
        let ents: Vec<_> = (0..3).map(|i| entity(i, 120, 4)).collect();
        let a = split_validation(&ents, 0.1, 0.1, 42).unwrap();
        let b = split_validation(&ents, 0.1, 0.1, 42).unwrap();
        assert_eq!(a, b);
        let c = split_validation(&ents, 0.1, 0.1, 43).unwrap();
        assert_ne!(a.global_validation, c.global_validation);
    }

    #[test]
    fn split_covers_every_entity_even_when_tiny() {
        let ents = vec![entity(0, 990, 2), entity(1, 10, 2)];
        for seed in 0..20 {
            let split = split_validation(&ents, 0.01, 0.1, seed).unwrap();
            assert_eq!(split.global_validation.len(), 10);
            assert!(split.global_validation.iter().any(|r| r.entity_id == 1));
        }
    }

    #[test]
    fn split_rejects_empty_train_and_bad_fractions() {
        let ents = vec![entity(0, 10, 2)];
        assert!(matches!(
            split_validation(&ents, 0.1, 0.999, 1),
            Err(Error::EmptyTrainSet { entity: 0 })
        ));
        assert!(split_validation(&ents, 0.0, 0.1, 1).is_err());
        assert!(split_validation(&ents, 0.1, 1.0, 1).is_err());
    }

    fn shard_of(ent: &EntityRecords) -> EntityShard {
        EntityShard {
            entity_id: ent.entity_id,
            provider_name: ent.name.clone(),
            train: ent.records.clone(),
            local_validation: Vec::new(),
        }
    }

    #[test]
    fn batches_consume_without_replacement() {
        let shard = shard_of(&entity(0, 4000, 5));
        let sched = make_batches(&shard, 153, 20, 9).unwrap();
        let all: Vec<usize> = sched.batches.iter().flatten().copied().collect();
        assert_eq!(all.len(), 3060);
        let uniq: std::collections::HashSet<_> = all.iter().collect();
        assert_eq!(uniq.len(), 3060);
        assert_eq!(sched, make_batches(&shard, 153, 20, 9).unwrap());
    }

    #[test]
    fn insufficient_samples() {
        let shard = shard_of(&entity(0, 200, 2));
        match make_batches(&shard, 153, 2, 1) {
            Err(Error::InsufficientSamples {
                required,
                available,
                ..
            }) => assert_eq!((required, available), (306, 200)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn batches_stratified_ninety_percent_malicious() {
        // every 10th record benign -> 90% malicious
        let mut ent = entity(0, 1000, 1);
        for (i, r) in ent.records.iter_mut().enumerate() {
            if i % 10 == 0 {
                r.label = Label::Benign;
            }
        }
        let shard = shard_of(&ent);
        let sched = make_batches(&shard, 10, 50, 3).unwrap();
        for batch in &sched.batches {
            let mal = batch.iter().filter(|&&i| shard.train[i].label.is_malicious()).count();
            assert!((mal as i64 - 9).abs() <= 1, "batch has {mal} malicious");
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_checked() {
        let spec = SyntheticSpec::disjoint_attacks(2, 3, 60, 40, 6.0);
        let a = generate_synthetic(&spec, 5).unwrap();
        assert_eq!(a, generate_synthetic(&spec, 5).unwrap());
        assert_eq!(a.len(), 2);
        assert_eq!(a[0].records.len(), 100);
        assert_eq!(a[1].malicious_count(), 40);
        let mut bad = spec.clone();
        bad.entities[0].attacks[0].center.push(1.0);
        assert!(matches!(
            generate_synthetic(&bad, 5),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn synthetic_csv_round_trip() {
        let spec = SyntheticSpec::disjoint_attacks(2, 2, 5, 3, 6.0);
        let ents = generate_synthetic(&spec, 1).unwrap();
        let mut buf = Vec::new();
        write_flow_csv(&mut buf, &ents, &schema2()).unwrap();
        let table = read_flow_csv(buf.as_slice(), &schema2()).unwrap();
        assert_eq!(table.records.len(), 16);
        assert_eq!(table.records[0].features, ents[0].records[0].features);
        let spec = PartitionSpec {
            rules: vec![
                rule(0, &[synthetic_resolver(0).as_str()]),
                rule(1, &[synthetic_resolver(1).as_str()]),
            ],
        };
        let p = partition_by_entity(&table, &spec).unwrap();
        assert_eq!(p.entities[0].records.len(), 8);
        assert_eq!(p.entities[1].malicious_count(), 3);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn every_batch_within_one_sample(n in 60usize..400, every in 1usize..7, bs in 1usize..20, seed in any::<u64>()) {
                let shard = shard_of(&entity(0, n, every));
                let rounds = (n / bs).min(10);
                prop_assume!(rounds >= 1);
                let sched = make_batches(&shard, bs, rounds, seed).unwrap();
                let share = shard.train.iter().filter(|r| r.label.is_malicious()).count() as f64 / n as f64;
                for batch in &sched.batches {
                    prop_assert_eq!(batch.len(), bs);
                    let mal = batch.iter().filter(|&&i| shard.train[i].label.is_malicious()).count() as f64;
                    prop_assert!((mal / bs as f64 - share).abs() <= 1.0 / bs as f64 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn records_csv_round_trip() {
        let names = vec!["a".to_string(), "b".to_string()];
        let records = vec![
            FlowRecord {
                features: vec![0.1, -3.0e-300],
                label: Label::Malicious,
                entity_id: 2,
                source_row: 17,
            },
            FlowRecord {
                features: vec![1.0 / 3.0, 7.0],
                label: Label::Benign,
                entity_id: 0,
                source_row: 3,
            },
        ];
        let mut buf = Vec::new();
        write_records_csv(&mut buf, &names, &records).unwrap();
        let (back_names, back) = read_records_csv(buf.as_slice()).unwrap();
        assert_eq!(back_names, names);
        assert_eq!(back, records);
        let bad = "entity_id,source_row,label,a\n0,1,benign,x\n";
        assert!(matches!(
            read_records_csv(bad.as_bytes()),
            Err(Error::Row { row: 1, .. })
        ));
    }
}
