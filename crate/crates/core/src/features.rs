//! Z-score standardization, principal component projection and the
//! component-count sweep.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, FlowRecord};
use crate::error::{Error, Result};
use crate::federation::{run_scenario, ModelKind, ScenarioConfig, Scope};

pub const PREPROCESSING_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub stddevs: Vec<f64>,
    /// Columns that were constant during fitting (assigned stddev 1).
    pub zero_variance: Vec<usize>,
}

impl Standardizer {
    pub fn dims(&self) -> usize {
        self.means.len()
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                found: x.len(),
            });
        }
        Ok(x
            .iter()
            .zip(self.means.iter().zip(&self.stddevs))
            .map(|(v, (m, s))| (v - m) / s)
            .collect())
    }
}

/// Per-column sample mean and sample standard deviation (n − 1).
pub fn fit_standardizer<'a, I>(records: I) -> Result<Standardizer>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let rows: Vec<&[f64]> = records.into_iter().collect();
    if rows.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "standardizer needs at least 2 records, got {}",
            rows.len()
        )));
    }
    let dims = rows[0].len();
    if let Some(bad) = rows.iter().find(|r| r.len() != dims) {
        return Err(Error::DimensionMismatch {
            expected: dims,
            found: bad.len(),
        });
    }
    let n = rows.len() as f64;
    let mut means = vec![0.0; dims];
    for r in &rows {
        for (m, v) in means.iter_mut().zip(r.iter()) {
            *m += v;
        }
    }
    means.iter_mut().for_each(|m| *m /= n);

    let mut stddevs = vec![0.0; dims];
    let mut zero_variance = Vec::new();
    for j in 0..dims {
        let first = rows[0][j];
        if rows.iter().all(|r| r[j] == first) {
            means[j] = first;
            stddevs[j] = 1.0;
            zero_variance.push(j);
            continue;
        }
        let ss: f64 = rows.iter().map(|r| (r[j] - means[j]).powi(2)).sum();
        stddevs[j] = (ss / (n - 1.0)).sqrt();
    }
    Ok(Standardizer {
        means,
        stddevs,
        zero_variance,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    /// `k` rows of length `dims`, orthonormal.
    pub components: Vec<Vec<f64>>,
    /// Non-increasing, non-negative.
    pub explained_variance: Vec<f64>,
    /// Sum of all eigenvalues of the fitted covariance, regardless of `k`.
    pub total_variance: f64,
}

impl PcaModel {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn dims(&self) -> usize {
        self.components.first().map_or(0, |c| c.len())
    }

    /// Keeps the leading `k` components.
    pub fn truncate(&self, k: usize) -> Result<PcaModel> {
        if k == 0 || k > self.k() {
            return Err(Error::InvalidArgument(format!(
                "k = {k} outside 1..={}",
                self.k()
            )));
        }
        Ok(PcaModel {
            components: self.components[..k].to_vec(),
            explained_variance: self.explained_variance[..k].to_vec(),
            total_variance: self.total_variance,
        })
    }

    pub fn project(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                found: z.len(),
            });
        }
        Ok(self
            .components
            .iter()
            .map(|c| c.iter().zip(z).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// Maps a projected vector back into the standardized space.
    pub fn inverse_project(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.k() {
            return Err(Error::DimensionMismatch {
                expected: self.k(),
                found: y.len(),
            });
        }
        let mut out = vec![0.0; self.dims()];
        for (c, &w) in self.components.iter().zip(y) {
            for (o, v) in out.iter_mut().zip(c) {
                *o += w * v;
            }
        }
        Ok(out)
    }

    pub fn cumulative_variance_ratio(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.explained_variance
            .iter()
            .map(|v| {
                acc += v;
                if self.total_variance > 0.0 {
                    acc / self.total_variance
                } else {
                    1.0
                }
            })
            .collect()
    }
}

/// Top-`k` eigenvectors of the sample covariance, ordered by variance.
/// Each component is signed so that its largest-magnitude loading is positive.
pub fn fit_pca<'a, I>(records: I, k: usize) -> Result<PcaModel>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let rows: Vec<&[f64]> = records.into_iter().collect();
    let dims = rows.first().map_or(0, |r| r.len());
    if k == 0 || k > dims {
        return Err(Error::InvalidArgument(format!("k = {k} outside 1..={dims}")));
    }
    if rows.len() < k || rows.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "PCA with k = {k} needs at least max(k, 2) records, got {}",
            rows.len()
        )));
    }
    if let Some(bad) = rows.iter().find(|r| r.len() != dims) {
        return Err(Error::DimensionMismatch {
            expected: dims,
            found: bad.len(),
        });
    }
    let n = rows.len();
    let mut mean = vec![0.0; dims];
    for r in &rows {
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, dims, |i, j| rows[i][j] - mean[j]);
    let cov = (centered.transpose() * &centered) / (n as f64 - 1.0);

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dims).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let total_variance = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();

    let mut components = Vec::with_capacity(k);
    let mut explained_variance = Vec::with_capacity(k);
    for &idx in order.iter().take(k) {
        let mut c: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        let pivot = c
            .iter()
            .enumerate()
            .fold(0, |best, (i, v)| if v.abs() > c[best].abs() { i } else { best });
        if c[pivot] < 0.0 {
            c.iter_mut().for_each(|v| *v = -*v);
        }
        components.push(c);
        explained_variance.push(eig.eigenvalues[idx].max(0.0));
    }
    Ok(PcaModel {
        components,
        explained_variance,
        total_variance,
    })
}

pub fn transform(pca: &PcaModel, standardizer: &Standardizer, record: &[f64]) -> Result<Vec<f64>> {
    pca.project(&standardizer.apply(record)?)
}

/// Standardizer plus projection, fitted once and shared by every entity.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessor {
    pub standardizer: Standardizer,
    pub pca: PcaModel,
}

#[derive(Serialize, Deserialize)]
struct PreprocessingDoc {
    version: u32,
    dims: usize,
    k: usize,
    means: Vec<f64>,
    stddevs: Vec<f64>,
    zero_variance: Vec<usize>,
    components: Vec<f64>,
    explained_variance: Vec<f64>,
    total_variance: f64,
}

impl Preprocessor {
    /// Fits the standardizer and a `k`-component projection on `records`.
    pub fn fit<'a, I>(records: I, k: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let rows: Vec<&[f64]> = records.into_iter().collect();
        let standardizer = fit_standardizer(rows.iter().copied())?;
        let standardized = rows
            .iter()
            .map(|r| standardizer.apply(r))
            .collect::<Result<Vec<_>>>()?;
        let pca = fit_pca(standardized.iter().map(|r| r.as_slice()), k)?;
        Ok(Self { standardizer, pca })
    }

    /// Fits on the union of every entity's training records.
    pub fn fit_on_training(split: &DatasetSplit, k: usize) -> Result<Self> {
        Self::fit(
            split
                .shards
                .iter()
                .flat_map(|s| s.train.iter().map(|r| r.features.as_slice())),
            k,
        )
    }

    pub fn with_k(&self, k: usize) -> Result<Self> {
        Ok(Self {
            standardizer: self.standardizer.clone(),
            pca: self.pca.truncate(k)?,
        })
    }

    pub fn transform(&self, x: &[f64]) -> Result<Vec<f64>> {
        transform(&self.pca, &self.standardizer, x)
    }

    pub fn apply(&self, record: &FlowRecord) -> Result<FlowRecord> {
        Ok(FlowRecord {
            features: self.transform(&record.features)?,
            ..record.clone()
        })
    }

    pub fn apply_split(&self, split: &DatasetSplit) -> Result<DatasetSplit> {
        let map = |v: &[FlowRecord]| v.iter().map(|r| self.apply(r)).collect::<Result<Vec<_>>>();
        let mut out = split.clone();
        for shard in &mut out.shards {
            shard.train = map(&shard.train)?;
            shard.local_validation = map(&shard.local_validation)?;
        }
        out.global_validation = map(&split.global_validation)?;
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = PreprocessingDoc {
            version: PREPROCESSING_VERSION,
            dims: self.pca.dims(),
            k: self.pca.k(),
            means: self.standardizer.means.clone(),
            stddevs: self.standardizer.stddevs.clone(),
            zero_variance: self.standardizer.zero_variance.clone(),
            components: self.pca.components.iter().flatten().copied().collect(),
            explained_variance: self.pca.explained_variance.clone(),
            total_variance: self.pca.total_variance,
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: PreprocessingDoc = serde_json::from_str(s)?;
        if doc.version != PREPROCESSING_VERSION {
            return Err(Error::Version {
                expected: PREPROCESSING_VERSION,
                found: doc.version,
            });
        }
        if doc.means.len() != doc.dims
            || doc.stddevs.len() != doc.dims
            || doc.components.len() != doc.k * doc.dims
            || doc.explained_variance.len() != doc.k
        {
            return Err(Error::Config(
                "preprocessing document has inconsistent dimensions".into(),
            ));
        }
        Ok(Self {
            standardizer: Standardizer {
                means: doc.means,
                stddevs: doc.stddevs,
                zero_variance: doc.zero_variance,
            },
            pca: PcaModel {
                components: doc.components.chunks(doc.dims).map(|c| c.to_vec()).collect(),
                explained_variance: doc.explained_variance,
                total_variance: doc.total_variance,
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub k: usize,
    pub model: ModelKind,
    pub entity: String,
    pub accuracy: f64,
}

/// Aggregate statistics for one component count.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepStats {
    pub k: usize,
    /// Mean final accuracy over every (entity, model) pair.
    pub mean_accuracy: f64,
    /// Mean over models of the population standard deviation across entities.
    pub spread: f64,
    pub norm_mean: f64,
    pub norm_spread: f64,
    /// `norm_mean − norm_spread`.
    pub score: f64,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub stats: Vec<SweepStats>,
}

impl SweepTable {
    pub fn selected_k(&self) -> Option<usize> {
        self.stats.iter().find(|s| s.selected).map(|s| s.k)
    }
}

/// Runs one full scenario per component count and model, recording each
/// entity's final-round accuracy on the global validation set.
///
/// Selection: mean accuracy and spread are min-max normalized across the
/// swept `k`; the chosen `k` maximizes `norm_mean − norm_spread`, ties going
/// to higher mean accuracy, then lower spread, then smaller `k`.
pub fn sweep_components(
    ks: &[usize],
    config: &ScenarioConfig,
    models: &[ModelKind],
    split: &DatasetSplit,
    preprocessor: &Preprocessor,
) -> Result<SweepTable> {
    if ks.is_empty() {
        return Err(Error::InvalidArgument("empty component range".into()));
    }
    if models.is_empty() {
        return Err(Error::InvalidArgument("no models to sweep".into()));
    }
    let mut rows = Vec::new();
    let mut raw_stats = Vec::new();
    for &k in ks {
        let projected = preprocessor.with_k(k)?.apply_split(split)?;
        let mut accs = Vec::new();
        let mut spreads = Vec::new();
        for &model in models {
            let cfg = ScenarioConfig {
                model,
                ..config.clone()
            };
            let outcome = run_scenario(&cfg, &projected)?;
            let final_round = cfg.rounds;
            let per_entity: Vec<(String, f64)> = outcome
                .metrics
                .iter()
                .filter(|m| m.round == final_round && m.scope == Scope::Global)
                .map(|m| (m.entity.clone(), m.accuracy))
                .collect();
            let mean = per_entity.iter().map(|e| e.1).sum::<f64>() / per_entity.len() as f64;
            let var = per_entity.iter().map(|e| (e.1 - mean).powi(2)).sum::<f64>()
                / per_entity.len() as f64;
            spreads.push(var.sqrt());
            for (entity, accuracy) in per_entity {
                accs.push(accuracy);
                rows.push(SweepRow {
                    k,
                    model,
                    entity,
                    accuracy,
                });
            }
        }
        let mean_accuracy = accs.iter().sum::<f64>() / accs.len() as f64;
        let spread = spreads.iter().sum::<f64>() / spreads.len() as f64;
        raw_stats.push((k, mean_accuracy, spread));
    }

    let normalize = |v: f64, lo: f64, hi: f64| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
    let (mlo, mhi) = min_max(raw_stats.iter().map(|s| s.1));
    let (slo, shi) = min_max(raw_stats.iter().map(|s| s.2));
    let mut stats: Vec<SweepStats> = raw_stats
        .iter()
        .map(|&(k, mean_accuracy, spread)| {
            let norm_mean = normalize(mean_accuracy, mlo, mhi);
            let norm_spread = normalize(spread, slo, shi);
            SweepStats {
                k,
                mean_accuracy,
                spread,
                norm_mean,
                norm_spread,
                score: norm_mean - norm_spread,
                selected: false,
            }
        })
        .collect();
    let best = (0..stats.len())
        .min_by(|&a, &b| {
            let (x, y) = (&stats[a], &stats[b]);
            y.score
                .total_cmp(&x.score)
                .then(y.mean_accuracy.total_cmp(&x.mean_accuracy))
                .then(x.spread.total_cmp(&y.spread))
                .then(x.k.cmp(&y.k))
        })
        .expect("non-empty sweep");
    stats[best].selected = true;
    Ok(SweepTable { rows, stats })
}

fn min_max(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    })
}
