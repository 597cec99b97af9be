//! Run configuration: one TOML file per experiment plus `key=value`
//! overrides. Missing keys take the defaults of the selected plant.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Environment variable that overrides the configured output directory.
pub const OUTPUT_DIR_ENV: &str = "KNODE_MPC_OUT";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid TOML: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("override `{0}` is not of the form key=value")]
    Override(String),
    #[error("override key `{0}` does not name a configuration field")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {reason}")]
    Invalid { key: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlantKind {
    Pendulum,
    Quadrotor,
}

impl PlantKind {
    pub fn name(self) -> &'static str {
        match self {
            PlantKind::Pendulum => "pendulum",
            PlantKind::Quadrotor => "quadrotor",
        }
    }
}

impl std::str::FromStr for PlantKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pendulum" => Ok(Self::Pendulum),
            "quadrotor" => Ok(Self::Quadrotor),
            other => Err(format!("unknown plant `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PendulumConfig {
    pub true_mass: f64,
    pub nominal_mass: f64,
    pub length: f64,
    pub gravity: f64,
    /// Step commands are uniform in `[−step_max, step_max]` rad.
    pub step_max: f64,
    pub hold_min: f64,
    pub hold_max: f64,
    /// Evaluation initial states are uniform in `±initial_angle` rad and
    /// `±initial_rate` rad/s.
    pub initial_angle: f64,
    pub initial_rate: f64,
}

impl Default for PendulumConfig {
    fn default() -> Self {
        Self {
            true_mass: 0.55,
            nominal_mass: 1.0,
            length: 1.0,
            gravity: 9.81,
            step_max: 0.4,
            hold_min: 2.0,
            hold_max: 5.0,
            initial_angle: 0.1,
            initial_rate: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadrotorConfig {
    pub mass: f64,
    pub inertia: [f64; 3],
    pub drag: [f64; 3],
    pub gravity: f64,
    pub altitude: f64,
    /// Circle used while collecting training data.
    pub collect_radius: f64,
    pub collect_speed: f64,
    /// Evaluation circles draw radius and speed uniformly from these ranges.
    pub radius: [f64; 2],
    pub speed: [f64; 2],
    /// Initial position and velocity are uniform within this offset of the
    /// reference start.
    pub initial_offset: f64,
}

impl Default for QuadrotorConfig {
    fn default() -> Self {
        Self {
            mass: 0.03,
            inertia: [1.43e-5, 1.43e-5, 2.17e-5],
            drag: [0.02, 0.02, 0.04],
            gravity: 9.81,
            altitude: 1.0,
            collect_radius: 1.0,
            collect_speed: 0.8,
            radius: [0.5, 1.5],
            speed: [0.3, 0.8],
            initial_offset: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Length of the collected training run in seconds.
    pub duration: f64,
    /// Leading fraction used for training; the rest is the hold-out set.
    pub train_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    /// Hidden width of each member; one member per entry.
    pub widths: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightConstraint {
    Simplex,
    Affine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightSettings {
    pub constraint: WeightConstraint,
    pub iterations: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TerminalChoice {
    Off,
    Soft,
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JacobianChoice {
    Fd,
    Analytic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpcSettings {
    pub horizon: usize,
    /// Diagonal of Q.
    pub q: Vec<f64>,
    /// Diagonal of R.
    pub r: Vec<f64>,
    pub rho: f64,
    pub gamma: f64,
    pub terminal: TerminalChoice,
    /// Penalty per unit violation of the terminal set in soft mode.
    pub soft_weight: f64,
    pub u_lower: Vec<f64>,
    pub u_upper: Vec<f64>,
    /// SQP iteration cap per control step.
    pub max_iterations: usize,
    pub kkt_tol: f64,
    pub jacobian: JacobianChoice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelChoice {
    True,
    Nominal,
    Equal,
    Optimized,
}

impl ModelChoice {
    pub fn name(self) -> &'static str {
        match self {
            ModelChoice::True => "true",
            ModelChoice::Nominal => "nominal",
            ModelChoice::Equal => "equal",
            ModelChoice::Optimized => "optimized",
        }
    }
}

impl std::str::FromStr for ModelChoice {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "true" => Ok(Self::True),
            "nominal" => Ok(Self::Nominal),
            "equal" => Ok(Self::Equal),
            "optimized" => Ok(Self::Optimized),
            other => Err(format!("unknown model `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifySettings {
    /// Model whose linearization defines the terminal ingredients used by
    /// every controller.
    pub model: ModelChoice,
    /// Radius of the ball on which the linearization error is sampled.
    pub delta: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSettings {
    /// Test trajectories for one-step prediction error.
    pub prediction_runs: usize,
    pub prediction_duration: f64,
    /// Closed-loop runs per controller.
    pub closed_loop_runs: usize,
    pub closed_loop_duration: f64,
    /// Seconds after the last reference change before steady-state error is
    /// averaged (pendulum only).
    pub settle_time: f64,
    /// Worker threads; 0 uses all available cores.
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub plant: PlantKind,
    /// Master seed; every other seed is derived from it.
    pub seed: u64,
    pub dt: f64,
    pub output_dir: PathBuf,
    pub pendulum: PendulumConfig,
    pub quadrotor: QuadrotorConfig,
    pub data: DataConfig,
    pub train: TrainSettings,
    pub weights: WeightSettings,
    pub mpc: MpcSettings,
    pub certify: CertifySettings,
    pub evaluate: EvaluateSettings,
}

impl RunConfig {
    pub fn defaults(plant: PlantKind) -> Self {
        match plant {
            PlantKind::Pendulum => Self {
                plant,
                seed: 1,
                dt: 0.01,
                output_dir: PathBuf::from("out/pendulum"),
                pendulum: PendulumConfig::default(),
                quadrotor: QuadrotorConfig::default(),
                data: DataConfig {
                    duration: 20.0,
                    train_fraction: 0.75,
                },
                train: TrainSettings {
                    widths: vec![64, 128, 192, 256, 320],
                    epochs: 500,
                    learning_rate: 2e-2,
                    weight_decay: 1e-8,
                },
                weights: WeightSettings {
                    constraint: WeightConstraint::Simplex,
                    iterations: 1500,
                    learning_rate: 2e-3,
                    weight_decay: 1e-9,
                },
                mpc: MpcSettings {
                    horizon: 10,
                    q: vec![1.0, 0.1],
                    r: vec![1e-5],
                    rho: 1.1,
                    gamma: 0.01,
                    terminal: TerminalChoice::Soft,
                    soft_weight: 100.0,
                    u_lower: vec![-3.0],
                    u_upper: vec![3.0],
                    max_iterations: 30,
                    kkt_tol: 1e-6,
                    jacobian: JacobianChoice::Analytic,
                },
                certify: CertifySettings {
                    model: ModelChoice::Nominal,
                    delta: 0.5,
                    samples: 10_000,
                },
                evaluate: EvaluateSettings {
                    prediction_runs: 30,
                    prediction_duration: 5.0,
                    closed_loop_runs: 30,
                    closed_loop_duration: 10.0,
                    settle_time: 1.0,
                    threads: 0,
                },
            },
            PlantKind::Quadrotor => {
                let mut q = vec![0.05; 6];
                q.extend([0.1; 7]);
                Self {
                    plant,
                    seed: 1,
                    dt: 0.005,
                    output_dir: PathBuf::from("out/quadrotor"),
                    pendulum: PendulumConfig::default(),
                    quadrotor: QuadrotorConfig::default(),
                    data: DataConfig {
                        duration: 20.0,
                        train_fraction: 0.75,
                    },
                    train: TrainSettings {
                        widths: vec![8, 16, 24, 32, 40],
                        epochs: 1000,
                        learning_rate: 2e-2,
                        weight_decay: 1e-9,
                    },
                    weights: WeightSettings {
                        constraint: WeightConstraint::Simplex,
                        iterations: 1500,
                        learning_rate: 3e-2,
                        weight_decay: 1e-9,
                    },
                    mpc: MpcSettings {
                        horizon: 20,
                        q,
                        r: vec![1e-3; 4],
                        rho: 1.1,
                        gamma: 0.5,
                        terminal: TerminalChoice::Soft,
                        soft_weight: 1.0,
                        u_lower: vec![0.0, -0.01, -0.01, -0.01],
                        u_upper: vec![0.575, 0.01, 0.01, 0.01],
                        max_iterations: 2,
                        kkt_tol: 1e-6,
                        jacobian: JacobianChoice::Analytic,
                    },
                    certify: CertifySettings {
                        model: ModelChoice::Nominal,
                        delta: 0.5,
                        samples: 10_000,
                    },
                    evaluate: EvaluateSettings {
                        prediction_runs: 30,
                        prediction_duration: 5.0,
                        closed_loop_runs: 30,
                        closed_loop_duration: 5.0,
                        settle_time: 1.0,
                        threads: 0,
                    },
                }
            }
        }
    }

    /// Parses `text` on top of the defaults of the plant it names (pendulum
    /// when absent), then applies `overrides` in order.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let user: toml::Table = text.parse()?;
        let mut parsed = Vec::with_capacity(overrides.len());
        for item in overrides {
            parsed.push(parse_override(item)?);
        }
        let plant_name = parsed
            .iter()
            .rev()
            .find(|(k, _)| k == "plant")
            .map(|(_, v)| v.clone())
            .or_else(|| user.get("plant").cloned())
            .unwrap_or_else(|| toml::Value::String("pendulum".into()));
        let plant: PlantKind = plant_name
            .as_str()
            .ok_or_else(|| invalid("plant", "expected a string"))?
            .parse()
            .map_err(|e: String| invalid("plant", &e))?;

        let mut table = toml::Table::try_from(Self::defaults(plant)).expect("defaults serialize");
        merge(&mut table, user);
        for (key, value) in parsed {
            set_path(&mut table, &key, value)?;
        }
        let cfg: Self = toml::Value::Table(table).try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// SHA-256 of the canonical TOML form, leaving out the output directory
    /// and thread count, which do not affect results.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        canonical.evaluate.threads = 0;
        hex::encode(Sha256::digest(canonical.to_toml().as_bytes()))
    }

    /// Output directory after the environment override.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_DIR_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.output_dir.clone(),
        }
    }

    pub fn state_dim(&self) -> usize {
        match self.plant {
            PlantKind::Pendulum => 2,
            PlantKind::Quadrotor => 13,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self.plant {
            PlantKind::Pendulum => 1,
            PlantKind::Quadrotor => 4,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let (n, m) = (self.state_dim(), self.input_dim());
        let positive = |key: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(invalid(key, "must be positive and finite"))
            }
        };
        positive("dt", self.dt)?;
        positive("data.duration", self.data.duration)?;
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return Err(invalid("data.train_fraction", "must lie in (0, 1)"));
        }
        let p = &self.pendulum;
        for (key, v) in [
            ("pendulum.true_mass", p.true_mass),
            ("pendulum.nominal_mass", p.nominal_mass),
            ("pendulum.length", p.length),
            ("pendulum.gravity", p.gravity),
            ("pendulum.hold_min", p.hold_min),
        ] {
            positive(key, v)?;
        }
        if p.hold_max < p.hold_min || p.step_max < 0.0 || p.initial_angle < 0.0 || p.initial_rate < 0.0 {
            return Err(invalid("pendulum", "ranges must be ordered and nonnegative"));
        }
        let qd = &self.quadrotor;
        positive("quadrotor.mass", qd.mass)?;
        positive("quadrotor.gravity", qd.gravity)?;
        if qd.inertia.iter().any(|v| !(*v > 0.0)) {
            return Err(invalid("quadrotor.inertia", "entries must be positive"));
        }
        if qd.drag.iter().any(|v| *v < 0.0) {
            return Err(invalid("quadrotor.drag", "entries must be nonnegative"));
        }
        positive("quadrotor.collect_radius", qd.collect_radius)?;
        if !(qd.radius[0] > 0.0 && qd.radius[1] >= qd.radius[0]) || !(qd.speed[0] >= 0.0 && qd.speed[1] >= qd.speed[0])
        {
            return Err(invalid("quadrotor", "radius and speed ranges must be ordered and positive"));
        }
        if self.train.widths.is_empty() || self.train.widths.contains(&0) {
            return Err(invalid("train.widths", "need at least one member with a positive width"));
        }
        positive("train.learning_rate", self.train.learning_rate)?;
        positive("weights.learning_rate", self.weights.learning_rate)?;
        if self.train.weight_decay < 0.0 || self.weights.weight_decay < 0.0 {
            return Err(invalid("weight_decay", "must be nonnegative"));
        }
        let mpc = &self.mpc;
        if mpc.horizon == 0 {
            return Err(invalid("mpc.horizon", "must be at least 1"));
        }
        if mpc.q.len() != n || mpc.q.iter().any(|v| !(*v > 0.0)) {
            return Err(invalid("mpc.q", &format!("needs {n} positive entries")));
        }
        if mpc.r.len() != m || mpc.r.iter().any(|v| !(*v > 0.0)) {
            return Err(invalid("mpc.r", &format!("needs {m} positive entries")));
        }
        if mpc.u_lower.len() != m || mpc.u_upper.len() != m {
            return Err(invalid("mpc.u_lower/u_upper", &format!("need {m} entries")));
        }
        if mpc.u_lower.iter().zip(&mpc.u_upper).any(|(lo, hi)| !(lo <= hi)) {
            return Err(invalid("mpc.u_lower/u_upper", "box is empty"));
        }
        if !(mpc.rho > 1.0 && mpc.rho.is_finite()) {
            return Err(invalid("mpc.rho", "must exceed 1"));
        }
        positive("mpc.gamma", mpc.gamma)?;
        positive("mpc.soft_weight", mpc.soft_weight)?;
        positive("mpc.kkt_tol", mpc.kkt_tol)?;
        if mpc.max_iterations == 0 {
            return Err(invalid("mpc.max_iterations", "must be at least 1"));
        }
        positive("certify.delta", self.certify.delta)?;
        if self.certify.samples == 0 {
            return Err(invalid("certify.samples", "must be at least 1"));
        }
        let ev = &self.evaluate;
        positive("evaluate.prediction_duration", ev.prediction_duration)?;
        positive("evaluate.closed_loop_duration", ev.closed_loop_duration)?;
        if ev.settle_time < 0.0 {
            return Err(invalid("evaluate.settle_time", "must be nonnegative"));
        }
        Ok(())
    }
}

fn invalid(key: &str, reason: &str) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        reason: reason.to_string(),
    }
}

fn merge(base: &mut toml::Table, top: toml::Table) {
    for (key, value) in top {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

/// Splits `a.b=value`; the value is read as a TOML literal and falls back to
/// a bare string.
fn parse_override(item: &str) -> Result<(String, toml::Value), ConfigError> {
    let (key, raw) = item.split_once('=').ok_or_else(|| ConfigError::Override(item.to_string()))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(ConfigError::Override(item.to_string()));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), ConfigError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields at least one part");
    let mut cur = table;
    for part in parts {
        cur = match cur.get_mut(part) {
            Some(toml::Value::Table(t)) => t,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        };
    }
    match cur.get_mut(last) {
        Some(slot) if !matches!(slot, toml::Value::Table(_)) => {
            *slot = coerce(slot, value);
            Ok(())
        }
        _ => Err(ConfigError::UnknownKey(key.to_string())),
    }
}

/// Lets `--set dt=1` fill a float field.
fn coerce(slot: &toml::Value, value: toml::Value) -> toml::Value {
    match (slot, value) {
        (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (toml::Value::Array(a), toml::Value::Array(v)) if a.first().is_some_and(|x| x.is_float()) => {
            toml::Value::Array(
                v.into_iter()
                    .map(|x| match x {
                        toml::Value::Integer(i) => toml::Value::Float(i as f64),
                        other => other,
                    })
                    .collect(),
            )
        }
        (_, v) => v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_pendulum_defaults() {
        let cfg = RunConfig::from_toml_str("", &[]).unwrap();
        assert_eq!(cfg, RunConfig::defaults(PlantKind::Pendulum));
    }

    #[test]
    fn plant_selects_defaults() {
        let cfg = RunConfig::from_toml_str("plant = \"quadrotor\"", &[]).unwrap();
        assert_eq!(cfg.mpc.horizon, 20);
        assert_eq!(cfg.dt, 0.005);
        let cfg = RunConfig::from_toml_str("", &["plant=quadrotor".into()]).unwrap();
        assert_eq!(cfg.train.widths, vec![8, 16, 24, 32, 40]);
    }

    #[test]
    fn overrides_apply_in_order() {
        let cfg = RunConfig::from_toml_str(
            "[mpc]\nhorizon = 7\n",
            &["mpc.horizon=9".into(), "dt=1".into(), "train.widths=[4, 4]".into()],
        )
        .unwrap();
        assert_eq!(cfg.mpc.horizon, 9);
        assert_eq!(cfg.dt, 1.0);
        assert_eq!(cfg.train.widths, vec![4, 4]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            RunConfig::from_toml_str("", &["mpc.horizn=3".into()]),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(RunConfig::from_toml_str("[mpc]\nhorizn = 3\n", &[]).is_err());
        assert!(matches!(
            RunConfig::from_toml_str("", &["seed".into()]),
            Err(ConfigError::Override(_))
        ));
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_toml_str("", &["mpc.q=[1.0]".into()]).is_err());
        assert!(RunConfig::from_toml_str("", &["data.train_fraction=1.0".into()]).is_err());
        assert!(RunConfig::from_toml_str("", &["mpc.u_lower=[4.0]".into()]).is_err());
        assert!(RunConfig::from_toml_str("", &["plant=boat".into()]).is_err());
    }

    #[test]
    fn round_trip_is_idempotent() {
        for plant in [PlantKind::Pendulum, PlantKind::Quadrotor] {
            let cfg = RunConfig::defaults(plant);
            let text = cfg.to_toml();
            let back = RunConfig::from_toml_str(&text, &[]).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.to_toml(), text);
            assert_eq!(back.hash(), cfg.hash());
        }
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::defaults(PlantKind::Pendulum);
        let mut b = a.clone();
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        let mut c = a.clone();
        c.evaluate.threads = 4;
        c.output_dir = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), c.hash());
    }
}
