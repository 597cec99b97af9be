//! The five stages of an experiment. Each reads and writes files under the
//! resolved output directory:
//!
//! | stage | reads | writes |
//! |---|---|---|
//! | collect | | `config.toml`, `dataset.csv` |
//! | train | `dataset.csv` | `ensemble.json` |
//! | certify | `ensemble.json` (learned models only) | `certificate.json` |
//! | evaluate | `ensemble.json` | `metrics.json`, `telemetry/*.csv` |
//! | report | metrics files | `summary.csv`, `per_run.csv`, `bands.csv` |

use std::collections::BTreeMap;
use std::convert::Infallible;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use knode_mpc::certify::{certify_terminal_set, lyapunov_residual, CertifyConfig, InputBox};
use knode_mpc::ensemble::{chronological_split, fit_weights, equal_weights, WeightConfig, WeightMode, WeightObjective};
use knode_mpc::knode::{train_knode, KnodeError};
use knode_mpc::nmpc::{OcpConfig, StepTelemetry};
use knode_mpc::ode::{simulate_closed_loop, Trajectory};
use knode_mpc::{TrainConfig, TrajectoryDataset};
use nalgebra::DVector;
use rayon::prelude::*;
use thiserror::Error;

use crate::config::{ConfigError, PlantKind, RunConfig, WeightConstraint};
use crate::experiment::{
    chosen_model, collection_scenario, controller, evaluation_scenario, member_name, ocp_config, terminal_ingredients,
    terminal_model,
    LearnedModels, Model, Plant, Scenario,
};
use crate::manifest::{
    matrix_rows, read_json, write_json, Certificate, EnsembleManifest, FailedMember, MemberRecord, Provenance,
    WeightRecord,
};
use crate::metrics::{MetricSeries, Metrics};
use crate::seeds::derive;

pub const CONFIG_FILE: &str = "config.toml";
pub const DATASET_FILE: &str = "dataset.csv";
pub const MANIFEST_FILE: &str = "ensemble.json";
pub const CERTIFICATE_FILE: &str = "certificate.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const TELEMETRY_DIR: &str = "telemetry";

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Failed(#[from] anyhow::Error),
    #[error("certification failed: {0}")]
    Certification(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Usage(_) => 1,
            Self::Failed(_) => 2,
            Self::Certification(_) => 3,
        }
    }
}

pub type RunResult<T> = Result<T, RunError>;

pub fn provenance(cfg: &RunConfig) -> Provenance {
    Provenance {
        config_hash: cfg.hash(),
        seed: cfg.seed,
    }
}

/// Runs `f` on a pool of `threads` workers (all cores when 0).
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> anyhow::Result<T> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
    Ok(pool.install(f))
}

/// A finished closed-loop run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub trajectory: Trajectory,
    pub telemetry: Vec<StepTelemetry>,
}

impl RunOutcome {
    pub fn fallbacks(&self) -> usize {
        self.telemetry.iter().filter(|t| t.fallback).count()
    }
}

/// Simulates the true plant under MPC with prediction model `model`.
pub fn simulate(
    cfg: &RunConfig,
    plant: &Plant,
    model: Model,
    ocp: OcpConfig,
    scenario: &Scenario,
) -> anyhow::Result<RunOutcome> {
    let mut ctl = controller(cfg, model, ocp, scenario);
    let trajectory = simulate_closed_loop(
        plant.truth.as_ref(),
        &scenario.initial_state,
        |x, k| Ok::<_, Infallible>(ctl.step(x, k).input),
        scenario.steps,
        &plant.integrator,
    )
    .map_err(|e| anyhow!("{e}"))?;
    Ok(RunOutcome {
        trajectory,
        telemetry: ctl.telemetry,
    })
}

fn output_path(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.resolved_output_dir().join(name)
}

fn nominal_ocp(cfg: &RunConfig, plant: &Plant) -> anyhow::Result<OcpConfig> {
    let ing = terminal_ingredients(cfg, plant, &plant.nominal_model())?;
    Ok(ocp_config(cfg, &ing))
}

/// Collects training data with nominal MPC on the true plant.
pub fn collect(cfg: &RunConfig) -> RunResult<PathBuf> {
    let path = output_path(cfg, DATASET_FILE);
    if path.exists() {
        std::fs::remove_file(&path).with_context(|| format!("removing {}", path.display()))?;
    }
    let plant = Plant::new(cfg)?;
    let scenario = collection_scenario(cfg, derive(cfg.seed, "collect", 0));
    let outcome = simulate(cfg, &plant, plant.nominal_model(), nominal_ocp(cfg, &plant)?, &scenario)
        .context("data collection run")?;

    let prov = provenance(cfg);
    let metadata = BTreeMap::from([
        ("plant".to_string(), cfg.plant.name().to_string()),
        ("dt".to_string(), format!("{}", cfg.dt)),
        ("controller".to_string(), "nominal-mpc".to_string()),
        ("fallbacks".to_string(), outcome.fallbacks().to_string()),
        ("config_hash".to_string(), prov.config_hash),
        ("seed".to_string(), prov.seed.to_string()),
    ]);
    let data = TrajectoryDataset::from_trajectory(&outcome.trajectory, metadata).context("collected dataset")?;
    std::fs::create_dir_all(cfg.resolved_output_dir()).context("creating output directory")?;
    std::fs::write(output_path(cfg, CONFIG_FILE), cfg.to_toml()).context("writing config")?;
    data.write(&path).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn require(path: &Path, producer: &str) -> RunResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(RunError::Usage(format!("{} not found; run `{producer}` first", path.display())))
    }
}

fn read_dataset(cfg: &RunConfig) -> RunResult<TrajectoryDataset> {
    let path = output_path(cfg, DATASET_FILE);
    require(&path, "collect")?;
    let data = TrajectoryDataset::read(&path).with_context(|| format!("reading {}", path.display()))?;
    if data.state_dim() != cfg.state_dim() || data.input_dim() != cfg.input_dim() {
        return Err(RunError::Usage(format!(
            "{} does not hold {} data",
            path.display(),
            cfg.plant.name()
        )));
    }
    if let Some(dt) = data.dt() {
        if (dt - cfg.dt).abs() > 1e-12 {
            return Err(RunError::Usage(format!(
                "dataset spacing {dt} differs from configured dt {}",
                cfg.dt
            )));
        }
    }
    Ok(data)
}

/// Trains the ensemble members in parallel, then fits the blend weights on
/// the validation split.
pub fn train(cfg: &RunConfig) -> RunResult<PathBuf> {
    let data = read_dataset(cfg)?;
    let plant = Plant::new(cfg)?;
    let (train_set, validation) = chronological_split(&data, cfg.data.train_fraction).context("splitting data")?;

    let jobs: Vec<(usize, usize, u64)> = cfg
        .train
        .widths
        .iter()
        .enumerate()
        .map(|(j, &w)| (j, w, derive(cfg.seed, "member", j as u64)))
        .collect();
    let results: Vec<Result<MemberRecord, FailedMember>> = with_threads(cfg.evaluate.threads, || {
        jobs.par_iter()
            .map(|&(index, width, seed)| {
                let hyper = TrainConfig {
                    epochs: cfg.train.epochs,
                    learning_rate: cfg.train.learning_rate,
                    weight_decay: cfg.train.weight_decay,
                    hidden: vec![width],
                    seed,
                };
                let fail = |reason: String| FailedMember {
                    index,
                    width,
                    seed,
                    reason,
                };
                let outcome = train_knode(plant.nominal.clone(), &train_set, plant.integrator, &hyper)
                    .map_err(|e| fail(e.to_string()))?;
                let validation_loss = knode_mpc::knode::knode_loss(&outcome.model, &validation)
                    .map_err(|e: KnodeError| fail(format!("validation: {e}")))?;
                Ok(MemberRecord {
                    width,
                    seed,
                    train_loss: outcome.final_loss(),
                    validation_loss,
                    checkpoint: outcome.model.residual.clone().into(),
                })
            })
            .collect()
    })?;
    let mut members = Vec::new();
    let mut failed = Vec::new();
    for r in results {
        match r {
            Ok(m) => members.push(m),
            Err(f) => failed.push(f),
        }
    }
    if members.is_empty() {
        return Err(anyhow!("every ensemble member diverged").into());
    }

    let params: Vec<_> = members
        .iter()
        .map(|m| m.checkpoint.clone().try_into())
        .collect::<Result<_, _>>()
        .context("member checkpoints")?;
    let objective = WeightObjective::new(plant.nominal.as_ref(), &params, &validation).context("weight objective")?;
    let fit = fit_weights(
        &objective,
        &WeightConfig {
            mode: match cfg.weights.constraint {
                WeightConstraint::Simplex => WeightMode::Simplex,
                WeightConstraint::Affine => WeightMode::Affine,
            },
            iterations: cfg.weights.iterations,
            learning_rate: cfg.weights.learning_rate,
            weight_decay: cfg.weights.weight_decay,
        },
    );
    let manifest = EnsembleManifest {
        provenance: provenance(cfg),
        plant: cfg.plant,
        dt: cfg.dt,
        train_samples: train_set.len(),
        validation_samples: validation.len(),
        members,
        failed,
        weights: WeightRecord {
            constraint: cfg.weights.constraint,
            equal: equal_weights(params.len()).iter().copied().collect(),
            optimized: fit.weights.iter().copied().collect(),
            equal_loss: fit.equal_loss,
            optimized_loss: fit.loss,
        },
    };
    let path = output_path(cfg, MANIFEST_FILE);
    write_json(&path, &manifest)?;
    Ok(path)
}

pub fn read_manifest(cfg: &RunConfig) -> RunResult<EnsembleManifest> {
    let path = output_path(cfg, MANIFEST_FILE);
    require(&path, "train")?;
    let manifest: EnsembleManifest = read_json(&path)?;
    manifest.validate()?;
    if manifest.plant != cfg.plant {
        return Err(RunError::Usage(format!(
            "{} was trained for the {} plant",
            path.display(),
            manifest.plant.name()
        )));
    }
    Ok(manifest)
}

/// Certifies the terminal ingredients of the configured model. The
/// certificate is written whether or not it passes.
pub fn certify(cfg: &RunConfig) -> RunResult<Certificate> {
    let plant = Plant::new(cfg)?;
    let choice = cfg.certify.model;
    let manifest = match choice {
        crate::config::ModelChoice::Equal | crate::config::ModelChoice::Optimized => Some(read_manifest(cfg)?),
        _ => None,
    };
    let model = chosen_model(cfg, &plant, choice, manifest.as_ref())?;
    let mut ing = terminal_ingredients(cfg, &plant, &model)?;
    let (x_eq, u_eq) = plant.equilibrium(cfg);
    let bounds = InputBox::new(
        DVector::from_vec(cfg.mpc.u_lower.clone()),
        DVector::from_vec(cfg.mpc.u_upper.clone()),
    );
    let report = certify_terminal_set(
        terminal_model(&plant, &model).as_ref(),
        &x_eq,
        &u_eq,
        &mut ing,
        &bounds,
        &CertifyConfig {
            delta: cfg.certify.delta,
            samples: cfg.certify.samples,
            seed: derive(cfg.seed, "certify", 0),
            requested_gamma: Some(cfg.mpc.gamma),
        },
    )
    .context("certification")?;
    let cert = Certificate {
        provenance: provenance(cfg),
        plant: cfg.plant,
        model: choice.name().to_string(),
        rho: ing.rho,
        p: matrix_rows(&ing.p),
        k: matrix_rows(&ing.k),
        lyapunov_residual: lyapunov_residual(&ing.a_cl, &ing.p, &(ing.stage_weight() * ing.rho)),
        passed: report.passed(),
        report,
    };
    write_json(&output_path(cfg, CERTIFICATE_FILE), &cert)?;
    if !cert.passed {
        let r = &cert.report;
        return Err(RunError::Certification(match r.descent_margin {
            None => format!("empty terminal set (input-box radius {:e})", r.delta1),
            Some(m) => format!(
                "descent margin {m:e}, {} containment and {} invariance failures",
                r.containment_failures, r.invariance_failures
            ),
        }));
    }
    Ok(cert)
}

/// Mean squared one-step prediction error of `model` along `traj`.
pub fn prediction_mse(model: &Model, traj: &Trajectory) -> Option<f64> {
    let mut sum = 0.0;
    for (i, u) in traj.inputs.iter().enumerate() {
        let pred = model.step(&traj.states[i], u, i).ok()?;
        sum += (pred - &traj.states[i + 1]).norm_squared();
    }
    let mse = sum / traj.inputs.len().max(1) as f64;
    mse.is_finite().then_some(mse)
}

/// Per-step tracking error and scalar metrics of one closed-loop run.
pub fn tracking_metrics(
    cfg: &RunConfig,
    scenario: &Scenario,
    traj: &Trajectory,
) -> (Vec<f64>, BTreeMap<String, f64>) {
    let steps = traj.states.len();
    let mut metrics = BTreeMap::new();
    match cfg.plant {
        PlantKind::Pendulum => {
            let errors: Vec<f64> = (0..steps)
                .map(|k| (traj.states[k][0] - scenario.reference_at(k)[0]).abs())
                .collect();
            let settle = (cfg.evaluate.settle_time / cfg.dt).round() as usize;
            let from = (scenario.last_change + settle).min(steps - 1);
            let window = &errors[from..];
            metrics.insert(
                "steady_state_error".into(),
                window.iter().sum::<f64>() / window.len() as f64,
            );
            metrics.insert(
                "angle_mse".into(),
                errors.iter().map(|e| e * e).sum::<f64>() / steps as f64,
            );
            (errors, metrics)
        }
        PlantKind::Quadrotor => {
            let mut pos = Vec::with_capacity(steps);
            let mut vel_sq = 0.0;
            for k in 0..steps {
                let (x, r) = (&traj.states[k], scenario.reference_at(k));
                pos.push((x.rows(0, 3) - r.rows(0, 3)).norm());
                vel_sq += (x.rows(3, 3) - r.rows(3, 3)).norm_squared();
            }
            metrics.insert(
                "position_mse".into(),
                pos.iter().map(|e| e * e).sum::<f64>() / steps as f64,
            );
            metrics.insert("velocity_mse".into(), vel_sq / steps as f64);
            (pos, metrics)
        }
    }
}

fn telemetry_csv(prov: &Provenance, rows: &[StepTelemetry]) -> String {
    let mut out = format!(
        "# config_hash: {}\n# seed: {}\nstep,sqp_iterations,kkt_residual,cost,status,fallback,wall_time\n",
        prov.config_hash, prov.seed
    );
    for t in rows {
        let status = t.status.map_or("error".to_string(), |s| format!("{s:?}"));
        let _ = writeln!(
            out,
            "{},{},{:e},{:e},{},{},{:e}",
            t.step, t.sqp_iterations, t.kkt_residual, t.cost, status, t.fallback, t.wall_time
        );
    }
    out
}

struct ClosedLoopRun {
    errors: Vec<f64>,
    metrics: BTreeMap<String, f64>,
    fallbacks: usize,
    telemetry: Vec<StepTelemetry>,
}

/// Prediction and closed-loop evaluation over seeded test runs.
pub fn evaluate(cfg: &RunConfig, write_telemetry: bool) -> RunResult<Metrics> {
    let manifest = read_manifest(cfg)?;
    let plant = Plant::new(cfg)?;
    let learned = LearnedModels::new(cfg, &plant, &manifest)?;
    let certify_manifest = Some(&manifest);
    let weight_model = chosen_model(cfg, &plant, cfg.certify.model, certify_manifest)?;
    let ing = terminal_ingredients(cfg, &plant, &weight_model)?;
    let ocp = ocp_config(cfg, &ing);
    let nominal_ocp = nominal_ocp(cfg, &plant)?;

    let mut predictors: Vec<(String, Model)> = vec![
        ("true".into(), plant.true_model()),
        ("nominal".into(), plant.nominal_model()),
    ];
    predictors.extend(learned.named());
    let mut controllers: Vec<(String, Model)> = vec![("nominal".into(), plant.nominal_model())];
    controllers.extend(learned.named());

    let prediction_jobs: Vec<usize> = (0..cfg.evaluate.prediction_runs).collect();
    let closed_jobs: Vec<(usize, usize)> = (0..cfg.evaluate.closed_loop_runs)
        .flat_map(|r| (0..controllers.len()).map(move |c| (r, c)))
        .collect();

    let (prediction_rows, closed_rows) = with_threads(cfg.evaluate.threads, || {
        let prediction_rows: Vec<Vec<Option<f64>>> = prediction_jobs
            .par_iter()
            .map(|&r| {
                let scenario =
                    evaluation_scenario(cfg, derive(cfg.seed, "prediction", r as u64), cfg.evaluate.prediction_duration);
                match simulate(cfg, &plant, plant.nominal_model(), nominal_ocp.clone(), &scenario) {
                    Ok(run) => predictors
                        .iter()
                        .map(|(_, m)| prediction_mse(m, &run.trajectory))
                        .collect(),
                    Err(_) => vec![None; predictors.len()],
                }
            })
            .collect();
        let closed_rows: Vec<Option<ClosedLoopRun>> = closed_jobs
            .par_iter()
            .map(|&(r, c)| {
                let scenario = evaluation_scenario(
                    cfg,
                    derive(cfg.seed, "closed-loop", r as u64),
                    cfg.evaluate.closed_loop_duration,
                );
                let ocp = if c == 0 { nominal_ocp.clone() } else { ocp.clone() };
                let run = simulate(cfg, &plant, controllers[c].1.clone(), ocp, &scenario).ok()?;
                let (errors, metrics) = tracking_metrics(cfg, &scenario, &run.trajectory);
                metrics.values().all(|v| v.is_finite()).then(|| ClosedLoopRun {
                    errors,
                    metrics,
                    fallbacks: run.fallbacks(),
                    telemetry: run.telemetry,
                })
            })
            .collect();
        (prediction_rows, closed_rows)
    })?;

    let prov = provenance(cfg);
    let prediction = predictors
        .iter()
        .enumerate()
        .map(|(i, (name, _))| {
            let values = prediction_rows.iter().map(|row| row[i]).collect();
            (name.clone(), MetricSeries::new(values))
        })
        .collect();

    let metric_names: Vec<&str> = match cfg.plant {
        PlantKind::Pendulum => vec!["steady_state_error", "angle_mse"],
        PlantKind::Quadrotor => vec!["position_mse", "velocity_mse"],
    };
    let telemetry_dir = output_path(cfg, TELEMETRY_DIR);
    if write_telemetry {
        std::fs::create_dir_all(&telemetry_dir).context("creating telemetry directory")?;
    }
    let mut closed_loop = BTreeMap::new();
    let mut fallbacks = BTreeMap::new();
    let mut error_series = BTreeMap::new();
    for (c, (name, _)) in controllers.iter().enumerate() {
        let runs: Vec<&Option<ClosedLoopRun>> = (0..cfg.evaluate.closed_loop_runs)
            .map(|r| &closed_rows[r * controllers.len() + c])
            .collect();
        let per_metric = metric_names
            .iter()
            .map(|&metric| {
                let values = runs
                    .iter()
                    .map(|run| run.as_ref().map(|run| run.metrics[metric]))
                    .collect();
                (metric.to_string(), MetricSeries::new(values))
            })
            .collect();
        closed_loop.insert(name.clone(), per_metric);
        fallbacks.insert(
            name.clone(),
            runs.iter().map(|run| run.as_ref().map_or(0, |r| r.fallbacks)).collect(),
        );
        error_series.insert(
            name.clone(),
            runs.iter()
                .map(|run| run.as_ref().map_or_else(Vec::new, |r| r.errors.clone()))
                .collect(),
        );
        if write_telemetry {
            for (r, run) in runs.iter().enumerate() {
                if let Some(run) = run {
                    let path = telemetry_dir.join(format!("{name}-run{r}.csv"));
                    std::fs::write(&path, telemetry_csv(&prov, &run.telemetry))
                        .with_context(|| format!("writing {}", path.display()))?;
                }
            }
        }
    }

    let metrics = Metrics {
        provenance: prov,
        plant: cfg.plant,
        dt: cfg.dt,
        prediction,
        closed_loop,
        fallbacks,
        error_series,
    };
    write_json(&output_path(cfg, METRICS_FILE), &metrics)?;
    Ok(metrics)
}

/// Names of the member controllers in `metrics`, in order.
pub fn member_names(metrics: &Metrics) -> Vec<String> {
    (0..)
        .map(member_name)
        .take_while(|n| metrics.closed_loop.contains_key(n))
        .collect()
}

pub fn default_metrics_path(cfg: &RunConfig) -> PathBuf {
    output_path(cfg, METRICS_FILE)
}
