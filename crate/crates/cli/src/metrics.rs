//! Evaluation records. Aggregates are stored next to the per-run values they
//! summarize and are checked against them on load.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Result};
use serde::{Deserialize, Serialize};

use crate::config::PlantKind;
use crate::manifest::{read_json, Provenance};
use crate::stats::Summary;

/// One scalar per run; `None` marks a failed run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub values: Vec<Option<f64>>,
    pub failed: usize,
    /// Over the successful runs only.
    pub summary: Option<Summary>,
}

impl MetricSeries {
    pub fn new(values: Vec<Option<f64>>) -> Self {
        let ok: Vec<f64> = values.iter().flatten().copied().collect();
        Self {
            failed: values.len() - ok.len(),
            summary: Summary::of(&ok),
            values,
        }
    }

    pub fn successful(&self) -> Vec<f64> {
        self.values.iter().flatten().copied().collect()
    }

    pub fn median(&self) -> Option<f64> {
        self.summary.map(|s| s.median)
    }

    pub fn is_consistent(&self) -> bool {
        *self == Self::new(self.values.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub provenance: Provenance,
    pub plant: PlantKind,
    pub dt: f64,
    /// One-step prediction MSE per model.
    pub prediction: BTreeMap<String, MetricSeries>,
    /// Controller → metric name → per-run values.
    pub closed_loop: BTreeMap<String, BTreeMap<String, MetricSeries>>,
    /// Controller → run → steps that fell back to the previous input.
    pub fallbacks: BTreeMap<String, Vec<usize>>,
    /// Controller → run → tracking error per step (empty for failed runs).
    pub error_series: BTreeMap<String, Vec<Vec<f64>>>,
}

impl Metrics {
    pub fn check(&self) -> Result<()> {
        for (model, series) in &self.prediction {
            if !series.is_consistent() {
                bail!("prediction aggregates for `{model}` do not match the per-run values");
            }
        }
        for (ctl, metrics) in &self.closed_loop {
            for (name, series) in metrics {
                if !series.is_consistent() {
                    bail!("closed-loop aggregates `{name}` for `{ctl}` do not match the per-run values");
                }
            }
        }
        Ok(())
    }

    /// Reads a metrics file and verifies its aggregates.
    pub fn read(path: &Path) -> Result<Self> {
        let m: Self = read_json(path)?;
        m.check()?;
        Ok(m)
    }
}
