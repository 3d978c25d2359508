use std::fmt;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{prepare, run_prepared, ExperimentResult, ExperimentSpec, Regime, RunFailure};
use crate::error::{Error, Result};
use crate::mlp::{MlpConfig, Optimizer};

const DROPOUTS: [f64; 3] = [0.75, 0.5, 0.25];
const HIDDEN_LAYERS: [usize; 3] = [0, 1, 2];
const HIDDEN_DIMS: [usize; 4] = [128, 256, 512, 1024];

/// One-factor-at-a-time variants of `pivot`, each under SGD (at the pivot's
/// rate) and Adam (at its default rate). Duplicates are removed, keeping
/// first occurrences, so the pivot appears once per optimizer.
pub fn sweep_grid(pivot: &MlpConfig) -> Vec<MlpConfig> {
    let mut variants = vec![pivot.clone()];
    variants.extend(DROPOUTS.iter().map(|&dropout| MlpConfig { dropout, ..pivot.clone() }));
    variants.extend(HIDDEN_LAYERS.iter().map(|&hidden_layers| MlpConfig {
        hidden_layers,
        ..pivot.clone()
    }));
    variants.extend(HIDDEN_DIMS.iter().map(|&hidden_dim| MlpConfig {
        hidden_dim,
        ..pivot.clone()
    }));

    let mut grid: Vec<MlpConfig> = Vec::new();
    for optimizer in [Optimizer::Sgd, Optimizer::Adam] {
        for v in &variants {
            let cfg = MlpConfig {
                optimizer,
                initial_lr: match optimizer {
                    Optimizer::Sgd if pivot.optimizer == Optimizer::Sgd => pivot.initial_lr,
                    other => other.default_lr(),
                },
                ..v.clone()
            };
            if !grid.contains(&cfg) {
                grid.push(cfg);
            }
        }
    }
    grid
}

/// A sweep: the grid around `base.config`, every cell sharing the data,
/// regime and seeds of `base`.
#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub base: ExperimentSpec,
    pub jobs: usize,
    /// Where per-config results are persisted and reused from.
    pub results_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub config: MlpConfig,
    pub accuracies: Vec<f64>,
    /// `None` when every seed of this config diverged.
    pub mean: Option<f64>,
    pub failures: Vec<RunFailure>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub avg: f64,
    pub max: f64,
    pub min: f64,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let avg = values.iter().sum::<f64>() / values.len() as f64;
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        Some(Self { avg, max, min })
    }
}

/// `avg (max) [min]` in percent with one decimal.
impl fmt::Display for Aggregate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:.1} ({:.1}) [{:.1}]",
            self.avg * 100.0,
            self.max * 100.0,
            self.min * 100.0
        )
    }
}

/// Per-config mean accuracies and their aggregate. Configs whose every run
/// diverged are listed with `mean: None` and left out of `aggregate`;
/// `excluded_configs` counts them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub dataset: String,
    pub encoder: String,
    pub regime: Regime,
    pub seeds: Vec<u64>,
    pub entries: Vec<SweepEntry>,
    pub aggregate: Option<Aggregate>,
    pub excluded_configs: usize,
}

impl SweepReport {
    pub fn from_entries(dataset: String, encoder: String, regime: Regime, seeds: Vec<u64>, entries: Vec<SweepEntry>) -> Self {
        let means: Vec<f64> = entries.iter().filter_map(|e| e.mean).collect();
        let excluded_configs = entries.len() - means.len();
        Self {
            dataset,
            encoder,
            regime,
            seeds,
            aggregate: Aggregate::of(&means),
            entries,
            excluded_configs,
        }
    }

    pub fn failures(&self) -> impl Iterator<Item = (&MlpConfig, &RunFailure)> {
        self.entries
            .iter()
            .flat_map(|e| e.failures.iter().map(move |f| (&e.config, f)))
    }

    /// Human-readable table: one line per config, then the aggregate.
    pub fn render(&self) -> String {
        let mut out = format!("{} / {} / {}\n", self.encoder, self.dataset, self.regime);
        for e in &self.entries {
            let mean = e
                .mean
                .map(|m| format!("{:6.2}", m * 100.0))
                .unwrap_or_else(|| "failed".into());
            out.push_str(&format!("  {:<40} {mean}", e.config.label()));
            if !e.failures.is_empty() {
                out.push_str(&format!("  ({} diverged)", e.failures.len()));
            }
            out.push('\n');
        }
        match &self.aggregate {
            Some(a) => out.push_str(&format!("avg (max) [min]: {a}\n")),
            None => out.push_str("avg (max) [min]: n/a\n"),
        }
        if self.excluded_configs > 0 {
            out.push_str(&format!(
                "{} config(s) excluded from the aggregate: every run diverged\n",
                self.excluded_configs
            ));
        }
        out
    }
}

fn entry_from(result: &ExperimentResult) -> SweepEntry {
    SweepEntry {
        config: result.spec.config.clone(),
        accuracies: result.accuracies.clone(),
        mean: (!result.accuracies.is_empty()).then_some(result.mean),
        failures: result.failures.clone(),
    }
}

/// Runs every grid config on shared data. With `jobs > 1` configs train in
/// parallel; each run is deterministic, so the report does not depend on it.
pub fn run_sweep(sweep: &SweepSpec) -> Result<SweepReport> {
    let data = prepare(&sweep.base)?;
    let grid = sweep_grid(&sweep.base.config);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(sweep.jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;

    let results: Vec<Result<ExperimentResult>> = pool.install(|| {
        grid.par_iter()
            .map(|config| {
                let spec = ExperimentSpec {
                    config: config.clone(),
                    ..sweep.base.clone()
                };
                if let Some(dir) = &sweep.results_dir {
                    if let Some(hit) = ExperimentResult::cached(dir, &spec) {
                        return Ok(hit);
                    }
                }
                let result = run_prepared(&spec, &data)?;
                if let Some(dir) = &sweep.results_dir {
                    result.persist(dir)?;
                }
                Ok(result)
            })
            .collect()
    });
    let entries = results
        .into_iter()
        .map(|r| r.map(|r| entry_from(&r)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepReport::from_entries(
        data.dataset.clone(),
        data.encoder_tag.clone(),
        sweep.base.regime,
        sweep.base.seeds.clone(),
        entries,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_has_sixteen_unique_configs() {
        let pivot = MlpConfig::pivot();
        let grid = sweep_grid(&pivot);
        assert_eq!(grid.len(), 16);
        for (i, a) in grid.iter().enumerate() {
            assert!(grid[i + 1..].iter().all(|b| a != b));
        }
        assert_eq!(grid.iter().filter(|c| **c == pivot).count(), 1);
        let adam_pivot = pivot.clone().with_optimizer(Optimizer::Adam);
        assert_eq!(grid.iter().filter(|c| **c == adam_pivot).count(), 1);
    }

    #[test]
    fn variants_differ_in_one_factor() {
        let pivot = MlpConfig::pivot();
        for cfg in sweep_grid(&pivot) {
            let changed = [
                cfg.dropout != pivot.dropout,
                cfg.hidden_layers != pivot.hidden_layers,
                cfg.hidden_dim != pivot.hidden_dim,
            ]
            .iter()
            .filter(|&&c| c)
            .count();
            assert!(changed <= 1, "{}", cfg.label());
            assert_eq!(cfg.initial_lr, cfg.optimizer.default_lr());
            assert_eq!(cfg.iterations, pivot.iterations);
        }
    }

    #[test]
    fn eight_per_optimizer() {
        let grid = sweep_grid(&MlpConfig::pivot());
        for opt in [Optimizer::Sgd, Optimizer::Adam] {
            assert_eq!(grid.iter().filter(|c| c.optimizer == opt).count(), 8);
        }
    }

    #[test]
    fn aggregate_and_format() {
        let a = Aggregate::of(&[0.852, 0.855, 0.848]).unwrap();
        assert!(a.min <= a.avg && a.avg <= a.max);
        assert_eq!(a.to_string(), "85.2 (85.5) [84.8]");
        assert!(Aggregate::of(&[]).is_none());
    }

    #[test]
    fn failed_configs_are_reported_not_dropped() {
        let entry = |mean: Option<f64>, failures: usize| SweepEntry {
            config: MlpConfig::pivot(),
            accuracies: mean.into_iter().collect(),
            mean,
            failures: (0..failures)
                .map(|seed| RunFailure {
                    seed: seed as u64,
                    error: "diverged".into(),
                })
                .collect(),
        };
        let report = SweepReport::from_entries(
            "d".into(),
            "e".into(),
            Regime::K10,
            vec![1],
            vec![entry(Some(0.9), 0), entry(None, 1), entry(Some(0.7), 1)],
        );
        assert_eq!(report.excluded_configs, 1);
        assert_eq!(report.failures().count(), 2);
        let agg = report.aggregate.unwrap();
        assert!((agg.avg - 0.8).abs() < 1e-12);
        assert!(report.render().contains("excluded"));
    }
}
