use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Accuracy points, as a fraction, a reproduced cell may deviate by.
pub const DEFAULT_TOLERANCE: f64 = 0.015;

const ACCURACY_CSV: &str = include_str!("../../data/reference_accuracy.csv");
const SWEEP_CSV: &str = include_str!("../../data/reference_sweep.csv");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub model: String,
    pub dataset: String,
    pub regime: String,
    pub accuracy: f64,
    #[serde(default)]
    pub max: Option<f64>,
    #[serde(default)]
    pub min: Option<f64>,
}

/// Published accuracies keyed by `(model, dataset, regime)`, all fractions.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTable {
    rows: Vec<ReferenceRow>,
}

fn key(model: &str, dataset: &str, regime: &str) -> (String, String, String) {
    (
        model.to_ascii_lowercase(),
        dataset.to_ascii_lowercase(),
        regime.to_ascii_lowercase(),
    )
}

impl ReferenceTable {
    /// Per-cell accuracies of the fixed-feature classifiers and baselines.
    pub fn accuracy() -> Self {
        Self::parse(ACCURACY_CSV).expect("bundled table parses")
    }

    /// `avg (max) [min]` over the hyperparameter sweep; `accuracy` holds avg.
    pub fn sweep() -> Self {
        Self::parse(SWEEP_CSV).expect("bundled table parses")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let mut rows = Vec::new();
        for (i, rec) in reader.deserialize::<ReferenceRow>().enumerate() {
            let row = rec.map_err(|e| Error::Format(format!("reference row {}: {e}", i + 2)))?;
            let values = [Some(row.accuracy), row.max, row.min];
            if values.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Format(format!(
                    "reference row {}: accuracies must be fractions in [0, 1]",
                    i + 2
                )));
            }
            rows.push(row);
        }
        Ok(Self { rows })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn rows(&self) -> &[ReferenceRow] {
        &self.rows
    }

    pub fn lookup(&self, model: &str, dataset: &str, regime: &str) -> Option<&ReferenceRow> {
        let want = key(model, dataset, regime);
        self.rows
            .iter()
            .find(|r| key(&r.model, &r.dataset, &r.regime) == want)
    }
}

/// One reproduced number to check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub model: String,
    pub dataset: String,
    pub regime: String,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonCell {
    pub model: String,
    pub dataset: String,
    pub regime: String,
    pub observed: f64,
    pub reference: f64,
    /// `observed - reference`.
    pub delta: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComparisonStatus {
    Pass,
    Fail,
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub tolerance: f64,
    pub cells: Vec<ComparisonCell>,
    pub status: ComparisonStatus,
    /// Soft data-trend warnings; never affect `status`.
    pub flags: Vec<String>,
}

impl ComparisonReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.cells {
            out.push_str(&format!(
                "{} {}/{}/{}: observed {:.2} reference {:.2} delta {:+.2}\n",
                if c.pass { "PASS" } else { "FAIL" },
                c.model,
                c.dataset,
                c.regime,
                c.observed * 100.0,
                c.reference * 100.0,
                c.delta * 100.0
            ));
        }
        for f in &self.flags {
            out.push_str(&format!("note: {f}\n"));
        }
        out.push_str(&format!(
            "status: {} (tolerance {:.2} points)\n",
            match self.status {
                ComparisonStatus::Pass => "pass",
                ComparisonStatus::Fail => "fail",
                ComparisonStatus::Empty => "empty",
            },
            self.tolerance * 100.0
        ));
        out
    }
}

/// Checks each observation against its reference cell. A cell passes when
/// `|delta| <= tolerance`; an observation without a reference cell is an error.
pub fn compare_to_reference(
    observations: &[Observation],
    reference: &ReferenceTable,
    tolerance: f64,
) -> Result<ComparisonReport> {
    let mut cells = Vec::with_capacity(observations.len());
    for o in observations {
        let row = reference
            .lookup(&o.model, &o.dataset, &o.regime)
            .ok_or_else(|| Error::MissingReference {
                model: o.model.clone(),
                dataset: o.dataset.clone(),
                regime: o.regime.clone(),
            })?;
        let delta = o.accuracy - row.accuracy;
        cells.push(ComparisonCell {
            model: o.model.clone(),
            dataset: o.dataset.clone(),
            regime: o.regime.clone(),
            observed: o.accuracy,
            reference: row.accuracy,
            delta,
            // Rounding slack so a delta printed as the tolerance still passes.
            pass: delta.abs() <= tolerance + 1e-12,
        });
    }
    let status = if cells.is_empty() {
        ComparisonStatus::Empty
    } else if cells.iter().all(|c| c.pass) {
        ComparisonStatus::Pass
    } else {
        ComparisonStatus::Fail
    };
    Ok(ComparisonReport {
        tolerance,
        cells,
        status,
        flags: data_trend_flags(observations),
    })
}

/// Flags any model/dataset whose mean accuracy drops as training data grows
/// (`k10 > k30` or `k30 > full`, or `k10 > full` when k30 is absent).
pub fn data_trend_flags(observations: &[Observation]) -> Vec<String> {
    let mut groups: BTreeMap<(String, String), BTreeMap<String, f64>> = BTreeMap::new();
    for o in observations {
        groups
            .entry((o.model.to_ascii_lowercase(), o.dataset.to_ascii_lowercase()))
            .or_default()
            .insert(o.regime.to_ascii_lowercase(), o.accuracy);
    }
    let mut flags = Vec::new();
    for ((model, dataset), cells) in groups {
        let present: Vec<(&str, f64)> = ["k10", "k30", "full"]
            .into_iter()
            .filter_map(|r| cells.get(r).map(|&a| (r, a)))
            .collect();
        for pair in present.windows(2) {
            let ((lo, a), (hi, b)) = (pair[0], pair[1]);
            if b < a {
                flags.push(format!(
                    "{model}/{dataset}: {hi} ({:.2}) below {lo} ({:.2})",
                    b * 100.0,
                    a * 100.0
                ));
            }
        }
    }
    flags
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(model: &str, dataset: &str, regime: &str, accuracy: f64) -> Observation {
        Observation {
            model: model.into(),
            dataset: dataset.into(),
            regime: regime.into(),
            accuracy,
        }
    }

    #[test]
    fn bundled_tables_are_complete() {
        let acc = ReferenceTable::accuracy();
        assert_eq!(acc.rows().len(), 5 * 3 * 3);
        let sweep = ReferenceTable::sweep();
        assert_eq!(sweep.rows().len(), 4 * 3 * 2);
        for r in sweep.rows() {
            let (max, min) = (r.max.unwrap(), r.min.unwrap());
            assert!(min <= r.accuracy && r.accuracy <= max, "{r:?}");
        }
    }

    #[test]
    fn close_result_passes() {
        let report = compare_to_reference(
            &[obs("use+convert", "banking77", "k10", 0.852)],
            &ReferenceTable::sweep(),
            DEFAULT_TOLERANCE,
        )
        .unwrap();
        assert_eq!(report.status, ComparisonStatus::Pass);
    }

    #[test]
    fn distant_result_fails_with_signed_delta() {
        let report = compare_to_reference(
            &[obs("USE+ConveRT", "BANKING77", "k10", 0.80)],
            &ReferenceTable::accuracy(),
            DEFAULT_TOLERANCE,
        )
        .unwrap();
        assert_eq!(report.status, ComparisonStatus::Fail);
        assert!((report.cells[0].delta - (-0.0519)).abs() < 1e-12);
    }

    #[test]
    fn empty_and_missing() {
        let table = ReferenceTable::accuracy();
        let report = compare_to_reference(&[], &table, DEFAULT_TOLERANCE).unwrap();
        assert_eq!(report.status, ComparisonStatus::Empty);
        let err = compare_to_reference(&[obs("elmo", "banking77", "k10", 0.5)], &table, 0.01);
        assert!(matches!(err, Err(Error::MissingReference { .. })));
    }

    #[test]
    fn rejects_percentages() {
        assert!(ReferenceTable::parse("model,dataset,regime,accuracy\nm,d,k10,85.2\n").is_err());
    }

    #[test]
    fn trend_flags() {
        let ok = [
            obs("m", "d", "k10", 0.8),
            obs("m", "d", "k30", 0.85),
            obs("m", "d", "full", 0.9),
        ];
        assert!(data_trend_flags(&ok).is_empty());
        let bad = [obs("m", "d", "k10", 0.8), obs("m", "d", "full", 0.7)];
        assert_eq!(data_trend_flags(&bad).len(), 1);
        // The published table itself is monotone.
        let published: Vec<Observation> = ReferenceTable::accuracy()
            .rows()
            .iter()
            .map(|r| obs(&r.model, &r.dataset, &r.regime, r.accuracy))
            .collect();
        assert!(data_trend_flags(&published).is_empty());
    }
}
