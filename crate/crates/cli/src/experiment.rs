//! Builds plants, prediction models, references and controllers from a
//! [`RunConfig`].

use std::sync::Arc;

use anyhow::{Context, Result};
use knode_mpc::certify::{linearize, TerminalIngredients};
use knode_mpc::ensemble::KnodeEnsemble;
use knode_mpc::knode::{JacobianMode, NominalModel};
use knode_mpc::linalg::diag;
use knode_mpc::nmpc::{MpcController, OcpConfig, ReferenceFn, SolverSettings, TerminalMode};
use knode_mpc::ode::{Discretized, DiscreteDynamics, DynamicsFn, IntegratorConfig, OdeError};
use knode_mpc::plants::{
    step_reference, CircleReference, Pendulum, PendulumParams, Quadrotor, QuadrotorParams, StepReferenceConfig,
};
use knode_mpc::MlpParams;
use nalgebra::{DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{JacobianChoice, ModelChoice, PlantKind, RunConfig, TerminalChoice};
use crate::manifest::EnsembleManifest;

pub type Model = Arc<dyn DiscreteDynamics>;

/// True and nominal vector fields of the configured plant.
#[derive(Clone)]
pub struct Plant {
    pub kind: PlantKind,
    pub truth: Arc<dyn DynamicsFn>,
    pub nominal: Arc<dyn DynamicsFn>,
    pub integrator: IntegratorConfig,
}

impl Plant {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let integrator = IntegratorConfig::new(cfg.dt).context("integrator step")?;
        let (truth, nominal): (Arc<dyn DynamicsFn>, Arc<dyn DynamicsFn>) = match cfg.plant {
            PlantKind::Pendulum => {
                let p = &cfg.pendulum;
                (
                    Arc::new(Pendulum::new(PendulumParams::new(p.true_mass, p.length, p.gravity))),
                    Arc::new(Pendulum::new(PendulumParams::new(p.nominal_mass, p.length, p.gravity))),
                )
            }
            PlantKind::Quadrotor => {
                let params = quadrotor_params(cfg);
                (
                    Arc::new(Quadrotor::new(params.clone(), true)),
                    Arc::new(Quadrotor::new(params, false)),
                )
            }
        };
        Ok(Self {
            kind: cfg.plant,
            truth,
            nominal,
            integrator,
        })
    }

    /// The simulated plant: RK4 on the true field.
    pub fn true_model(&self) -> Model {
        Arc::new(Discretized::new(self.truth.clone(), self.integrator))
    }

    pub fn nominal_model(&self) -> Model {
        Arc::new(NominalModel::new(self.nominal.clone(), self.integrator))
    }

    /// Equilibrium about which terminal ingredients are computed.
    pub fn equilibrium(&self, cfg: &RunConfig) -> (DVector<f64>, DVector<f64>) {
        match self.kind {
            PlantKind::Pendulum => (DVector::zeros(2), DVector::zeros(1)),
            PlantKind::Quadrotor => (
                Quadrotor::level_state(Vector3::new(0.0, 0.0, cfg.quadrotor.altitude), Vector3::zeros()),
                quadrotor_params(cfg).hover_input(),
            ),
        }
    }
}

pub fn quadrotor_params(cfg: &RunConfig) -> QuadrotorParams {
    let q = &cfg.quadrotor;
    QuadrotorParams {
        mass: q.mass,
        inertia: q.inertia,
        gravity: [0.0, 0.0, -q.gravity],
        drag: q.drag,
    }
}

/// The learned models of one manifest.
pub struct LearnedModels {
    pub members: Vec<Model>,
    pub equal: Model,
    pub optimized: Model,
}

impl LearnedModels {
    pub fn new(cfg: &RunConfig, plant: &Plant, manifest: &EnsembleManifest) -> Result<Self> {
        let mode = match cfg.mpc.jacobian {
            JacobianChoice::Fd => JacobianMode::FiniteDifference,
            JacobianChoice::Analytic => JacobianMode::Analytic,
        };
        let params: Vec<MlpParams> = manifest.member_params()?;
        let build = |members: Vec<MlpParams>, weights: DVector<f64>| -> Result<Model> {
            let ens = KnodeEnsemble::new(plant.nominal.clone(), members, weights, plant.integrator)?;
            Ok(Arc::new(ens.with_jacobian_mode(mode)))
        };
        let members = params
            .iter()
            .map(|p| build(vec![p.clone()], DVector::from_element(1, 1.0)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            members,
            equal: build(params.clone(), DVector::from_vec(manifest.weights.equal.clone()))?,
            optimized: build(params, DVector::from_vec(manifest.weights.optimized.clone()))?,
        })
    }

    /// `(name, model)` for every learned model, members first.
    pub fn named(&self) -> Vec<(String, Model)> {
        let mut out: Vec<(String, Model)> = self
            .members
            .iter()
            .enumerate()
            .map(|(j, m)| (member_name(j), m.clone()))
            .collect();
        out.push(("equal".into(), self.equal.clone()));
        out.push(("optimized".into(), self.optimized.clone()));
        out
    }
}

pub fn member_name(j: usize) -> String {
    format!("member-{j}")
}

/// Model selected for certification.
pub fn chosen_model(
    cfg: &RunConfig,
    plant: &Plant,
    choice: ModelChoice,
    manifest: Option<&EnsembleManifest>,
) -> Result<Model> {
    Ok(match choice {
        ModelChoice::True => plant.true_model(),
        ModelChoice::Nominal => plant.nominal_model(),
        ModelChoice::Equal | ModelChoice::Optimized => {
            let manifest = manifest.context("a trained ensemble is required for this model")?;
            let learned = LearnedModels::new(cfg, plant, manifest)?;
            if choice == ModelChoice::Equal {
                learned.equal
            } else {
                learned.optimized
            }
        }
    })
}

/// `model` followed by the plant's state projection (quaternion
/// renormalization for the quadrotor). Without it the quaternion norm is an
/// uncontrollable mode on the unit circle and no LQR gain exists.
pub struct Projected {
    pub model: Model,
    pub field: Arc<dyn DynamicsFn>,
}

impl DiscreteDynamics for Projected {
    fn state_dim(&self) -> usize {
        self.model.state_dim()
    }
    fn input_dim(&self) -> usize {
        self.model.input_dim()
    }
    fn step(&self, x: &DVector<f64>, u: &DVector<f64>, k: usize) -> Result<DVector<f64>, OdeError> {
        let mut next = self.model.step(x, u, k)?;
        self.field.project_state(&mut next);
        Ok(next)
    }
}

/// The map terminal ingredients are derived and certified on.
pub fn terminal_model(plant: &Plant, model: &Model) -> Model {
    Arc::new(Projected {
        model: model.clone(),
        field: plant.nominal.clone(),
    })
}

/// DLQR-based terminal ingredients of `model` at the plant equilibrium.
pub fn terminal_ingredients(cfg: &RunConfig, plant: &Plant, model: &Model) -> Result<TerminalIngredients> {
    let (x_eq, u_eq) = plant.equilibrium(cfg);
    let lin = linearize(terminal_model(plant, model).as_ref(), &x_eq, &u_eq, 1e-5).context("linearization")?;
    let ing = TerminalIngredients::new(&lin, &diag(&cfg.mpc.q), &diag(&cfg.mpc.r), cfg.mpc.rho)
        .context("terminal ingredients")?;
    Ok(ing)
}

pub fn ocp_config(cfg: &RunConfig, ing: &TerminalIngredients) -> OcpConfig {
    let mpc = &cfg.mpc;
    let mode = match mpc.terminal {
        TerminalChoice::Off => TerminalMode::Off,
        TerminalChoice::Soft => TerminalMode::Soft {
            weight: mpc.soft_weight,
        },
        TerminalChoice::Hard => TerminalMode::Hard,
    };
    OcpConfig::new(
        mpc.horizon,
        diag(&mpc.q),
        diag(&mpc.r),
        ing.p.clone(),
        DVector::from_vec(mpc.u_lower.clone()),
        DVector::from_vec(mpc.u_upper.clone()),
    )
    .with_terminal_set(mpc.gamma, mode)
}

pub fn solver_settings(cfg: &RunConfig) -> SolverSettings {
    SolverSettings {
        max_iterations: cfg.mpc.max_iterations,
        kkt_tol: cfg.mpc.kkt_tol,
        ..SolverSettings::default()
    }
}

pub fn controller(cfg: &RunConfig, model: Model, ocp: OcpConfig, scenario: &Scenario) -> MpcController<Model> {
    MpcController::new(model, ocp, solver_settings(cfg), scenario.reference_fn())
}

/// Reference and initial state of one run.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub initial_state: DVector<f64>,
    /// Reference states for `k = 0..steps`, extended by holding the last
    /// entry.
    pub reference: Vec<DVector<f64>>,
    pub reference_input: DVector<f64>,
    pub steps: usize,
    /// Index of the last reference change (pendulum) or 0.
    pub last_change: usize,
}

impl Scenario {
    pub fn reference_at(&self, k: usize) -> &DVector<f64> {
        &self.reference[k.min(self.reference.len() - 1)]
    }

    pub fn reference_fn(&self) -> ReferenceFn {
        let states = Arc::new(self.reference.clone());
        let u = self.reference_input.clone();
        Arc::new(move |k| (states[k.min(states.len() - 1)].clone(), u.clone()))
    }
}

fn steps_for(duration: f64, dt: f64) -> usize {
    (duration / dt).round() as usize
}

/// Run used to collect training data: zero initial state for the pendulum,
/// the circle start for the quadrotor.
pub fn collection_scenario(cfg: &RunConfig, seed: u64) -> Scenario {
    let steps = steps_for(cfg.data.duration, cfg.dt);
    match cfg.plant {
        PlantKind::Pendulum => pendulum_scenario(cfg, seed, steps, DVector::zeros(2)),
        PlantKind::Quadrotor => {
            let q = &cfg.quadrotor;
            let circle = CircleReference::new(q.collect_radius, q.collect_speed, q.altitude);
            let reference = circle_states(&circle, steps + cfg.mpc.horizon + 1, cfg.dt);
            Scenario {
                initial_state: reference[0].clone(),
                reference,
                reference_input: quadrotor_params(cfg).hover_input(),
                steps,
                last_change: 0,
            }
        }
    }
}

/// Randomized evaluation run: random initial state and random steps
/// (pendulum) or a random circle (quadrotor).
pub fn evaluation_scenario(cfg: &RunConfig, seed: u64, duration: f64) -> Scenario {
    let steps = steps_for(duration, cfg.dt);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match cfg.plant {
        PlantKind::Pendulum => {
            let p = &cfg.pendulum;
            let x0 = DVector::from_vec(vec![
                symmetric(&mut rng, p.initial_angle),
                symmetric(&mut rng, p.initial_rate),
            ]);
            pendulum_scenario(cfg, rng.random(), steps, x0)
        }
        PlantKind::Quadrotor => {
            let q = &cfg.quadrotor;
            let circle = CircleReference::random(
                rng.random(),
                (q.radius[0], q.radius[1]),
                (q.speed[0], q.speed[1]),
                q.altitude,
            );
            let reference = circle_states(&circle, steps + cfg.mpc.horizon + 1, cfg.dt);
            let mut x0 = reference[0].clone();
            for i in 0..6 {
                x0[i] += symmetric(&mut rng, q.initial_offset);
            }
            Scenario {
                initial_state: x0,
                reference,
                reference_input: quadrotor_params(cfg).hover_input(),
                steps,
                last_change: 0,
            }
        }
    }
}

fn symmetric(rng: &mut ChaCha8Rng, bound: f64) -> f64 {
    if bound > 0.0 {
        rng.random_range(-bound..=bound)
    } else {
        0.0
    }
}

fn circle_states(circle: &CircleReference, count: usize, dt: f64) -> Vec<DVector<f64>> {
    (0..count).map(|k| circle.state(k as f64 * dt)).collect()
}

/// Step commands over all but the final `settle_time + 1` seconds, then the
/// last command held, so every run ends with a settled window.
fn pendulum_scenario(cfg: &RunConfig, seed: u64, steps: usize, x0: DVector<f64>) -> Scenario {
    let p = &cfg.pendulum;
    let step_cfg = StepReferenceConfig {
        max_magnitude: p.step_max,
        min_hold: p.hold_min,
        max_hold: p.hold_max,
    };
    let tail = steps_for(cfg.evaluate.settle_time + 1.0, cfg.dt).min(steps.saturating_sub(1));
    let active = steps - tail;
    let mut angles = if active > 0 {
        step_reference(seed, active as f64 * cfg.dt, cfg.dt, &step_cfg)
    } else {
        vec![0.0]
    };
    let last = *angles.last().expect("nonempty reference");
    angles.resize(steps + cfg.mpc.horizon + 1, last);
    let last_change = (1..angles.len()).rev().find(|&k| angles[k] != angles[k - 1]).unwrap_or(0);
    Scenario {
        initial_state: x0,
        reference: angles.iter().map(|&a| DVector::from_vec(vec![a, 0.0])).collect(),
        reference_input: DVector::zeros(1),
        steps,
        last_change,
    }
}
