//! Sampled trajectory data `(t_i, x_i, u_i)` and its delimited-text format.
//!
//! Files look like
//!
//! ```text
//! # plant: pendulum
//! # dt: 0.01
//! t,x1,x2,u1
//! 0.0,0.1,0.0,-0.25
//! ...
//! ```
//!
//! Lines starting with `#` carry `key: value` metadata. The input `u_i` is the
//! one held over `[t_i, t_{i+1})`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::DVector;
use thiserror::Error;

use crate::ode::Trajectory;

const SPACING_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset is empty")]
    Empty,
    #[error("sample {index}: timestamps must be strictly increasing with uniform spacing {dt}")]
    Spacing { index: usize, dt: f64 },
    #[error("sample {index}: expected state dimension {n} and input dimension {m}")]
    Dimension { index: usize, n: usize, m: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Ordered samples from one trajectory with uniform spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    /// Free-form metadata (plant name, dt, generating controller, provenance).
    pub metadata: BTreeMap<String, String>,
}

impl TrajectoryDataset {
    pub fn new(
        times: Vec<f64>,
        states: Vec<DVector<f64>>,
        inputs: Vec<DVector<f64>>,
        metadata: BTreeMap<String, String>,
    ) -> Result<Self, DatasetError> {
        let d = Self {
            times,
            states,
            inputs,
            metadata,
        };
        d.validate()?;
        Ok(d)
    }

    /// Keeps every state that has an input applied after it, i.e. all but the
    /// final state of the trajectory.
    pub fn from_trajectory(traj: &Trajectory, metadata: BTreeMap<String, String>) -> Result<Self, DatasetError> {
        let k = traj.inputs.len();
        Self::new(
            traj.times[..k].to_vec(),
            traj.states[..k].to_vec(),
            traj.inputs.clone(),
            metadata,
        )
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.states.first().map_or(0, |x| x.len())
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.first().map_or(0, |u| u.len())
    }

    /// Sampling interval (spacing of the first two samples).
    pub fn dt(&self) -> Option<f64> {
        (self.len() >= 2).then(|| self.times[1] - self.times[0])
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.is_empty() {
            return Err(DatasetError::Empty);
        }
        let (n, m) = (self.states[0].len(), self.inputs[0].len());
        if self.states.len() != self.len() || self.inputs.len() != self.len() {
            return Err(DatasetError::Dimension { index: 0, n, m });
        }
        for (i, (x, u)) in self.states.iter().zip(&self.inputs).enumerate() {
            if x.len() != n || u.len() != m {
                return Err(DatasetError::Dimension { index: i, n, m });
            }
        }
        if let Some(dt) = self.dt() {
            for i in 1..self.len() {
                let step = self.times[i] - self.times[i - 1];
                if !(step > 0.0) || (step - dt).abs() > SPACING_TOL {
                    return Err(DatasetError::Spacing { index: i, dt });
                }
            }
        }
        Ok(())
    }

    /// Samples `range` as a new dataset with the same metadata.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            times: self.times[range.clone()].to_vec(),
            states: self.states[range.clone()].to_vec(),
            inputs: self.inputs[range].to_vec(),
            metadata: self.metadata.clone(),
        }
    }

    /// Consecutive pairs `(t_i, x_i, u_i, Δt_i, x_{i+1})`.
    pub fn transitions(&self) -> impl Iterator<Item = Transition<'_>> {
        (1..self.len()).map(move |i| Transition {
            t: self.times[i - 1],
            x: &self.states[i - 1],
            u: &self.inputs[i - 1],
            dt: self.times[i] - self.times[i - 1],
            next: &self.states[i],
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.metadata {
            let _ = writeln!(out, "# {k}: {v}");
        }
        out.push('t');
        for i in 1..=self.state_dim() {
            let _ = write!(out, ",x{i}");
        }
        for i in 1..=self.input_dim() {
            let _ = write!(out, ",u{i}");
        }
        out.push('\n');
        for i in 0..self.len() {
            let _ = write!(out, "{:?}", self.times[i]);
            for v in self.states[i].iter().chain(self.inputs[i].iter()) {
                let _ = write!(out, ",{v:?}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, DatasetError> {
        let mut metadata = BTreeMap::new();
        let mut header: Option<(usize, usize)> = None;
        let (mut times, mut states, mut inputs) = (Vec::new(), Vec::new(), Vec::new());
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let parse_err = |message: String| DatasetError::Parse {
                line: lineno + 1,
                message,
            };
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some((k, v)) = rest.split_once(':') {
                    metadata.insert(k.trim().to_string(), v.trim().to_string());
                }
                continue;
            }
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            match header {
                None => {
                    if cells.first() != Some(&"t") {
                        return Err(parse_err("header must start with `t`".into()));
                    }
                    let n = cells.iter().filter(|c| c.starts_with('x')).count();
                    let m = cells.iter().filter(|c| c.starts_with('u')).count();
                    let expected: Vec<String> = std::iter::once("t".to_string())
                        .chain((1..=n).map(|i| format!("x{i}")))
                        .chain((1..=m).map(|i| format!("u{i}")))
                        .collect();
                    if cells != expected {
                        return Err(parse_err(format!("unexpected header `{line}`")));
                    }
                    header = Some((n, m));
                }
                Some((n, m)) => {
                    if cells.len() != 1 + n + m {
                        return Err(parse_err(format!("expected {} columns, got {}", 1 + n + m, cells.len())));
                    }
                    let vals = cells
                        .iter()
                        .map(|c| c.parse::<f64>().map_err(|e| parse_err(format!("`{c}`: {e}"))))
                        .collect::<Result<Vec<_>, _>>()?;
                    times.push(vals[0]);
                    states.push(DVector::from_column_slice(&vals[1..1 + n]));
                    inputs.push(DVector::from_column_slice(&vals[1 + n..]));
                }
            }
        }
        Self::new(times, states, inputs, metadata)
    }

    pub fn write(&self, path: impl AsRef<std::path::Path>) -> Result<(), DatasetError> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<std::path::Path>) -> Result<Self, DatasetError> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Transition<'a> {
    pub t: f64,
    pub x: &'a DVector<f64>,
    pub u: &'a DVector<f64>,
    pub dt: f64,
    pub next: &'a DVector<f64>,
}
