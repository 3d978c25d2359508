//! The evaluation protocol: K-shot and full-data runs over several seeds,
//! the one-factor-at-a-time hyperparameter sweep, and comparison against
//! published reference numbers.
//!
//! Every run trains on a subset of the training file and is scored on the
//! whole test file, so the evaluated rows never change between regimes or
//! configurations.

mod reference;
mod sweep;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::{build_label_index, find_split_file, few_shot_sample, Dataset, Digest, FewShotSplit, LabelIndex};
use crate::embeddings::{combine, l2_normalize_rows, EmbeddingStore};
use crate::error::{Error, Result};
use crate::mlp::{init_model, train, MlpConfig, MlpModel};

pub use reference::{
    compare_to_reference, data_trend_flags, ComparisonCell, ComparisonReport, ComparisonStatus,
    Observation, ReferenceRow, ReferenceTable, DEFAULT_TOLERANCE,
};
pub use sweep::{run_sweep, sweep_grid, Aggregate, SweepEntry, SweepReport, SweepSpec};

pub const DEFAULT_SEED_COUNT: usize = 5;

/// Training-data regime: `k` examples per intent, or the whole training file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Regime {
    Shots(usize),
    Full,
}

impl Regime {
    pub const K10: Regime = Regime::Shots(10);
    pub const K30: Regime = Regime::Shots(30);
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Regime::Shots(k) => write!(f, "k{k}"),
            Regime::Full => f.write_str("full"),
        }
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        if lower == "full" {
            return Ok(Regime::Full);
        }
        lower
            .strip_prefix('k')
            .and_then(|k| k.parse::<usize>().ok())
            .filter(|&k| k > 0)
            .map(Regime::Shots)
            .ok_or_else(|| Error::Usage(format!("unknown regime `{s}` (expected k10, k30, full)")))
    }
}

impl Serialize for Regime {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Regime {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Inputs of one experiment cell.
///
/// Stores are listed per split in concatenation order; the `i`-th test store
/// must come from the same encoder as the `i`-th train store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub dataset: String,
    pub train_path: PathBuf,
    pub test_path: PathBuf,
    pub train_stores: Vec<PathBuf>,
    pub test_stores: Vec<PathBuf>,
    pub regime: Regime,
    pub config: MlpConfig,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub normalize: bool,
    /// Fixed training subset used for every seed instead of sampling.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_file: Option<PathBuf>,
}

impl ExperimentSpec {
    /// Resolves the conventional dataset directory layout:
    /// `DIR/train.{csv,jsonl}`, `DIR/test.{csv,jsonl}`,
    /// `DIR/stores/train/<store>` and `DIR/stores/test/<store>`.
    pub fn from_dataset_dir(
        dir: &Path,
        stores: &[String],
        regime: Regime,
        config: MlpConfig,
        seeds: Vec<u64>,
    ) -> Result<Self> {
        let dataset = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into());
        Ok(Self {
            dataset,
            train_path: find_split_file(dir, "train")?,
            test_path: find_split_file(dir, "test")?,
            train_stores: stores.iter().map(|s| dir.join("stores/train").join(s)).collect(),
            test_stores: stores.iter().map(|s| dir.join("stores/test").join(s)).collect(),
            regime,
            config,
            seeds,
            normalize: false,
            split_file: None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.train_stores.is_empty() {
            return Err(Error::Usage("no embedding stores given".into()));
        }
        if self.train_stores.len() != self.test_stores.len() {
            return Err(Error::Usage(format!(
                "{} train stores but {} test stores",
                self.train_stores.len(),
                self.test_stores.len()
            )));
        }
        Ok(())
    }

    /// Short content hash naming this spec's result file.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serialises");
        Digest::of_bytes(&json).to_hex()[..16].to_string()
    }
}

/// Loaded, validated features for one dataset and store combination.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub dataset: String,
    pub train: Dataset,
    pub labels: LabelIndex,
    pub train_x: Array2<f32>,
    pub train_y: Vec<usize>,
    pub test_x: Array2<f32>,
    pub test_y: Vec<usize>,
    pub encoder_tag: String,
}

fn load_stores(paths: &[PathBuf], dataset: &Dataset) -> Result<EmbeddingStore> {
    let stores = paths
        .iter()
        .map(|p| EmbeddingStore::read_for(p, dataset))
        .collect::<Result<Vec<_>>>()?;
    combine(&stores)
}

/// Loads both splits, binds every store to its dataset digest and
/// concatenates stores in the given order.
pub fn prepare(spec: &ExperimentSpec) -> Result<PreparedData> {
    spec.validate()?;
    let train = Dataset::load(&spec.train_path)?;
    let test = Dataset::load(&spec.test_path)?;
    let labels = build_label_index(&train)?;
    let train_y = labels.class_ids(&train)?;
    let test_y = labels.class_ids(&test)?;

    let train_store = load_stores(&spec.train_stores, &train)?;
    let test_store = load_stores(&spec.test_stores, &test)?;
    if train_store.dim() != test_store.dim() || train_store.encoder_tag() != test_store.encoder_tag() {
        return Err(Error::Incompatible(format!(
            "train features `{}` (dim {}) do not match test features `{}` (dim {})",
            train_store.encoder_tag(),
            train_store.dim(),
            test_store.encoder_tag(),
            test_store.dim()
        )));
    }
    let all_train: Vec<usize> = (0..train.len()).collect();
    let all_test: Vec<usize> = (0..test.len()).collect();
    let mut train_x = train_store.gather(&all_train)?;
    let mut test_x = test_store.gather(&all_test)?;
    if spec.normalize {
        l2_normalize_rows(&mut train_x);
        l2_normalize_rows(&mut test_x);
    }
    Ok(PreparedData {
        dataset: spec.dataset.clone(),
        train,
        labels,
        train_x,
        train_y,
        test_x,
        test_y,
        encoder_tag: train_store.encoder_tag().to_string(),
    })
}

impl PreparedData {
    /// Training rows for one seed under `regime`.
    pub fn training_rows(&self, regime: Regime, seed: u64, split: Option<&FewShotSplit>) -> Result<Vec<usize>> {
        if let Some(split) = split {
            return Ok(split.row_indices.clone());
        }
        match regime {
            Regime::Full => Ok((0..self.train.len()).collect()),
            Regime::Shots(k) => Ok(few_shot_sample(&self.train, &self.labels, k, seed)?.row_indices),
        }
    }

    /// Samples, trains and scores one model on the full test set.
    pub fn run_once(
        &self,
        regime: Regime,
        config: &MlpConfig,
        seed: u64,
        split: Option<&FewShotSplit>,
    ) -> Result<(MlpModel, f64)> {
        let rows = self.training_rows(regime, seed, split)?;
        let x = self.train_x.select(Axis(0), &rows);
        let y: Vec<usize> = rows.iter().map(|&r| self.train_y[r]).collect();
        let config = config.clone().with_seed(seed);
        let model = init_model(self.train_x.ncols(), self.labels.num_classes(), &config)?;
        let (model, _) = train(model, x.view(), &y)?;
        let acc = model.evaluate(self.test_x.view(), &self.test_y)?;
        Ok((model, acc))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub seed: u64,
    pub error: String,
}

/// Outcome of one experiment cell. `seeds` and `accuracies` are aligned and
/// hold the successful runs; diverged runs are listed in `failures`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub spec: ExperimentSpec,
    pub encoder: String,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub train_seconds: f64,
    #[serde(default)]
    pub failures: Vec<RunFailure>,
}

/// Arithmetic mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs every seed of `spec` on already prepared data.
pub fn run_prepared(spec: &ExperimentSpec, data: &PreparedData) -> Result<ExperimentResult> {
    run_prepared_keeping_model(spec, data).map(|(result, _)| result)
}

/// Like [`run_prepared`], also returning the model of the first seed that
/// trained successfully.
pub fn run_prepared_keeping_model(
    spec: &ExperimentSpec,
    data: &PreparedData,
) -> Result<(ExperimentResult, Option<MlpModel>)> {
    let split = match &spec.split_file {
        Some(p) => {
            let split = FewShotSplit::read(p)?;
            split.validate(&data.train, &data.labels)?;
            Some(split)
        }
        None => None,
    };
    let mut seeds = Vec::new();
    let mut accuracies = Vec::new();
    let mut failures = Vec::new();
    let mut first_model = None;
    let started = Instant::now();
    for &seed in &spec.seeds {
        match data.run_once(spec.regime, &spec.config, seed, split.as_ref()) {
            Ok((model, acc)) => {
                first_model.get_or_insert(model);
                seeds.push(seed);
                accuracies.push(acc);
            }
            Err(e @ Error::Divergence { .. }) => failures.push(RunFailure {
                seed,
                error: e.to_string(),
            }),
            Err(e) => return Err(e),
        }
    }
    let train_seconds = started.elapsed().as_secs_f64();
    let (mean, std) = mean_std(&accuracies);
    let result = ExperimentResult {
        spec: spec.clone(),
        encoder: data.encoder_tag.clone(),
        seeds,
        accuracies,
        mean,
        std,
        train_seconds,
        failures,
    };
    Ok((result, first_model))
}

/// Loads data and runs every seed of `spec`.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    let data = prepare(spec)?;
    run_prepared(spec, &data)
}

impl ExperimentResult {
    pub fn observation(&self) -> Observation {
        Observation {
            model: self.encoder.clone(),
            dataset: self.spec.dataset.clone(),
            regime: self.spec.regime.to_string(),
            accuracy: self.mean,
        }
    }

    /// Writes `<dir>/<spec hash>.json` atomically and returns its path.
    pub fn persist(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(format!("{}.json", self.spec.content_hash()));
        write_json_atomic(&path, self)?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))
    }

    /// A previously persisted result for exactly this spec, if any.
    pub fn cached(dir: &Path, spec: &ExperimentSpec) -> Option<Self> {
        let path = dir.join(format!("{}.json", spec.content_hash()));
        Self::read(&path).ok().filter(|r| &r.spec == spec)
    }
}

/// Serialises `value` into a temporary file beside `path`, then renames it.
pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    serde_json::to_writer_pretty(tmp.as_file(), value).map_err(|e| Error::json(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}
