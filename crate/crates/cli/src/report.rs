//! Delimited-text tables for external plotting, merged over any number of
//! metrics files. Each table starts with one `# source: hash seed` comment per
//! input followed by a header row.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use crate::manifest::Provenance;
use crate::metrics::{MetricSeries, Metrics};
use crate::stats::quantile;

pub const SUMMARY_HEADER: &str = "source,section,scheme,metric,count,failed,min,q1,median,q3,max";
pub const PER_RUN_HEADER: &str = "source,section,scheme,metric,run,value";
pub const BANDS_HEADER: &str = "source,scheme,step,time,median,min,max";

/// A metrics record and the label it is reported under.
pub struct Source {
    pub label: String,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tables {
    pub summary: String,
    pub per_run: String,
    pub bands: String,
}

fn preamble(sources: &[Source], header: &str) -> String {
    let mut out = String::new();
    for s in sources {
        let Provenance { config_hash, seed } = &s.metrics.provenance;
        let _ = writeln!(out, "# {}: config_hash {config_hash} seed {seed}", s.label);
    }
    out.push_str(header);
    out.push('\n');
    out
}

fn series(m: &Metrics) -> Vec<(&'static str, &str, &str, &MetricSeries)> {
    let mut out: Vec<_> = m
        .prediction
        .iter()
        .map(|(scheme, s)| ("prediction", scheme.as_str(), "mse", s))
        .collect();
    for (scheme, metrics) in &m.closed_loop {
        for (metric, s) in metrics {
            out.push(("closed_loop", scheme.as_str(), metric.as_str(), s));
        }
    }
    out
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:e}"))
}

pub fn tables(sources: &[Source]) -> Tables {
    let mut summary = preamble(sources, SUMMARY_HEADER);
    let mut per_run = preamble(sources, PER_RUN_HEADER);
    let mut bands = preamble(sources, BANDS_HEADER);
    for src in sources {
        for (section, scheme, metric, s) in series(&src.metrics) {
            let sum = s.summary;
            let _ = writeln!(
                summary,
                "{},{section},{scheme},{metric},{},{},{},{},{},{},{}",
                src.label,
                sum.map_or(0, |x| x.count),
                s.failed,
                opt(sum.map(|x| x.min)),
                opt(sum.map(|x| x.q1)),
                opt(sum.map(|x| x.median)),
                opt(sum.map(|x| x.q3)),
                opt(sum.map(|x| x.max)),
            );
            for (run, v) in s.values.iter().enumerate() {
                let _ = writeln!(per_run, "{},{section},{scheme},{metric},{run},{}", src.label, opt(*v));
            }
        }
        for (scheme, runs) in &src.metrics.error_series {
            let runs: Vec<&Vec<f64>> = runs.iter().filter(|r| !r.is_empty()).collect();
            let len = runs.iter().map(|r| r.len()).min().unwrap_or(0);
            for k in 0..len {
                let mut at: Vec<f64> = runs.iter().map(|r| r[k]).collect();
                at.sort_by(f64::total_cmp);
                let _ = writeln!(
                    bands,
                    "{},{scheme},{k},{},{:e},{:e},{:e}",
                    src.label,
                    k as f64 * src.metrics.dt,
                    quantile(&at, 0.5),
                    at[0],
                    at[at.len() - 1]
                );
            }
        }
    }
    Tables {
        summary,
        per_run,
        bands,
    }
}

/// Loads each metrics file (checking its aggregates) under its file stem.
pub fn load_sources(paths: &[PathBuf]) -> Result<Vec<Source>> {
    paths
        .iter()
        .map(|p| {
            let metrics = Metrics::read(p).with_context(|| format!("loading {}", p.display()))?;
            let label = p
                .parent()
                .and_then(|d| d.file_name())
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| metrics.plant.name().to_string());
            Ok(Source { label, metrics })
        })
        .collect()
}

pub fn write_tables(dir: &Path, t: &Tables) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut written = Vec::new();
    for (name, text) in [("summary.csv", &t.summary), ("per_run.csv", &t.per_run), ("bands.csv", &t.bands)] {
        let path = dir.join(name);
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::config::PlantKind;

    fn record(values: Vec<Option<f64>>, errors: Vec<Vec<f64>>) -> Metrics {
        Metrics {
            provenance: Provenance {
                config_hash: "abc".into(),
                seed: 7,
            },
            plant: PlantKind::Pendulum,
            dt: 0.1,
            prediction: BTreeMap::from([("equal".to_string(), MetricSeries::new(values.clone()))]),
            closed_loop: BTreeMap::from([(
                "equal".to_string(),
                BTreeMap::from([("steady_state_error".to_string(), MetricSeries::new(values))]),
            )]),
            fallbacks: BTreeMap::new(),
            error_series: BTreeMap::from([("equal".to_string(), errors)]),
        }
    }

    fn data_rows(table: &str) -> Vec<&str> {
        table.lines().filter(|l| !l.starts_with('#')).skip(1).collect()
    }

    #[test]
    fn empty_input_gives_headers_only() {
        let t = tables(&[]);
        assert_eq!(t.summary, format!("{SUMMARY_HEADER}\n"));
        assert_eq!(t.per_run, format!("{PER_RUN_HEADER}\n"));
        assert_eq!(t.bands, format!("{BANDS_HEADER}\n"));
    }

    #[test]
    fn single_run_collapses_the_summary() {
        let src = Source {
            label: "a".into(),
            metrics: record(vec![Some(0.25)], vec![vec![1.0, 2.0]]),
        };
        let t = tables(&[src]);
        let row = data_rows(&t.summary)[0];
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields[4], "1");
        assert!(fields[6..].iter().all(|f| f.parse::<f64>().unwrap() == 0.25));
    }

    #[test]
    fn bands_have_three_series_per_scheme() {
        let src = Source {
            label: "a".into(),
            metrics: record(
                vec![Some(1.0), None, Some(3.0)],
                vec![vec![1.0, 4.0], vec![], vec![3.0, 2.0], vec![2.0, 0.0]],
            ),
        };
        let t = tables(&[src]);
        let rows = data_rows(&t.bands);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0], "a,equal,0,0,2e0,1e0,3e0");
        assert_eq!(rows[1].split(',').count(), 7);
        let per_run = data_rows(&t.per_run);
        assert!(per_run.contains(&"a,prediction,equal,mse,1,"));
    }
}
