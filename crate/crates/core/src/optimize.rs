//! Steepest-descent optimal-control loop.

use std::fmt;
use std::time::Instant;

use crate::adjoint::{
    check_observations, gradient, objective, solve_adjoint, steepest_descent_update, update_norm, Objective,
    Observation,
};
use crate::error::{Error, Result};
use crate::forward::{Control, ForwardSolver, MultiplierSettings, StateTrajectory};
use crate::mesh::{Field, Mesh};
use crate::phase_field::{positive_part_mass, MassTarget, ModelParams};
use crate::sparse::CgSettings;

/// Initial state, timed observations and model parameters of one fit.
#[derive(Clone, Debug)]
pub struct TrackingProblem {
    pub mesh: Mesh,
    pub params: ModelParams,
    pub phi0: Field,
    pub observations: Vec<Observation>,
    /// Enforce the positive-part mass target along the trajectory.
    pub constrained: bool,
}

impl TrackingProblem {
    pub fn new(
        mesh: Mesh,
        params: ModelParams,
        phi0: Field,
        observations: Vec<Observation>,
        constrained: bool,
    ) -> Result<Self> {
        mesh.check(&phi0)?;
        check_observations(&mesh, &params, &observations)?;
        let problem = Self {
            mesh,
            params,
            phi0,
            observations,
            constrained,
        };
        if constrained {
            problem.mass_target()?;
        }
        Ok(problem)
    }

    /// Piecewise-linear mass target through the initial and observed masses.
    /// Observations before the final level make the target end early, so
    /// it is extended flat up to `T`.
    pub fn mass_target(&self) -> Result<MassTarget> {
        let m0 = positive_part_mass(&self.mesh, &self.phi0)?;
        let mut knots = Vec::with_capacity(self.observations.len() + 1);
        for o in &self.observations {
            knots.push((self.params.time(o.step), positive_part_mass(&self.mesh, &o.field)?));
        }
        let last = *knots.last().expect("validated non-empty");
        if last.0 < self.params.end_time {
            knots.push((self.params.end_time, last.1));
        }
        MassTarget::through(m0, knots)
    }

    pub fn final_observation(&self) -> &Observation {
        self.observations.last().expect("validated non-empty")
    }
}

/// Step size and stopping rule of the descent loop.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizationConfig {
    pub alpha: f64,
    pub tol_cost: f64,
    pub tol_update: f64,
    pub max_iterations: usize,
    pub cg: CgSettings,
    pub multiplier: MultiplierSettings,
}

impl Default for OptimizationConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            tol_cost: 1e-4,
            tol_update: 1e-4,
            max_iterations: 3500,
            cg: CgSettings::default(),
            multiplier: MultiplierSettings::default(),
        }
    }
}

impl OptimizationConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.alpha) {
            return Err(Error::invalid("alpha", "must be positive"));
        }
        if !positive(self.tol_cost) {
            return Err(Error::invalid("tol_J", "must be positive"));
        }
        if !positive(self.tol_update) {
            return Err(Error::invalid("tol_eta", "must be positive"));
        }
        if self.max_iterations == 0 {
            return Err(Error::invalid("K_max", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TerminationCause {
    CostBelowTol,
    UpdateBelowTol,
    MaxIterations,
}

impl fmt::Display for TerminationCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TerminationCause::CostBelowTol => "J_below_tol",
            TerminationCause::UpdateBelowTol => "update_below_tol",
            TerminationCause::MaxIterations => "max_iters",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub cost: f64,
    pub fidelity: f64,
    pub regularization: f64,
    pub update_norm: f64,
    pub max_mass_error: f64,
    pub mean_secant_iters: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default)]
pub struct OptimizationReport {
    pub records: Vec<IterationRecord>,
    pub termination: Option<TerminationCause>,
}

impl OptimizationReport {
    pub fn first(&self) -> Option<&IterationRecord> {
        self.records.first()
    }

    pub fn last(&self) -> Option<&IterationRecord> {
        self.records.last()
    }
}

#[derive(Clone, Debug)]
pub struct TrackingOutcome {
    pub control: Control,
    pub trajectory: StateTrajectory,
    pub report: OptimizationReport,
}

/// A failed run together with everything recorded before the failure.
#[derive(Debug)]
pub struct TrackingFailure {
    pub error: Error,
    pub report: OptimizationReport,
}

impl fmt::Display for TrackingFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "tracking aborted after {} iterations: {}", self.report.records.len(), self.error)
    }
}

impl std::error::Error for TrackingFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Forward solve and cost for one control.
pub fn evaluate(
    problem: &TrackingProblem,
    control: &Control,
    config: &OptimizationConfig,
) -> Result<(StateTrajectory, Objective)> {
    let mut forward =
        ForwardSolver::with_settings(&problem.mesh, problem.params, config.cg, config.multiplier)?;
    let target = problem.constrained.then(|| problem.mass_target()).transpose()?;
    let trajectory = forward.solve(&problem.phi0, control, target.as_ref())?;
    let cost = objective(&problem.mesh, &trajectory, control, &problem.observations, &problem.params)?;
    Ok((trajectory, cost))
}

/// Adjoint gradient of the reduced cost at `control`, given its trajectory.
pub fn reduced_gradient(
    problem: &TrackingProblem,
    control: &Control,
    trajectory: &StateTrajectory,
    cg: CgSettings,
) -> Result<Control> {
    let adjoint = solve_adjoint(&problem.mesh, trajectory, &problem.observations, &problem.params, cg)?;
    gradient(control, &adjoint, &problem.params)
}

pub fn run_tracking(
    problem: &TrackingProblem,
    config: &OptimizationConfig,
    initial_control: Control,
) -> std::result::Result<TrackingOutcome, TrackingFailure> {
    run_tracking_with(problem, config, initial_control, |_| {})
}

/// The descent loop: state solve, cost, adjoint solve, update. Stops when
/// `J < tol_J`, when `α‖θη + (c_G/ε)p‖ < tol_η`, or after `K_max`
/// evaluated iterates. The returned control is the last evaluated iterate
/// and the returned trajectory is its state.
pub fn run_tracking_with(
    problem: &TrackingProblem,
    config: &OptimizationConfig,
    initial_control: Control,
    mut observer: impl FnMut(&IterationRecord),
) -> std::result::Result<TrackingOutcome, TrackingFailure> {
    let mut report = OptimizationReport::default();
    let fail = |error: Error, report: OptimizationReport| TrackingFailure { error, report };
    if let Err(e) = config
        .validate()
        .and_then(|_| initial_control.check(&problem.mesh, &problem.params))
    {
        return Err(fail(e, report));
    }
    let mut control = initial_control;
    let start = Instant::now();
    loop {
        let iteration = report.records.len();
        let (trajectory, cost) = match evaluate(problem, &control, config) {
            Ok(v) => v,
            Err(e) => return Err(fail(e, report)),
        };
        let grad = match reduced_gradient(problem, &control, &trajectory, config.cg) {
            Ok(g) => g,
            Err(e) => return Err(fail(e, report)),
        };
        let norm = update_norm(&problem.mesh, &grad, config.alpha, &problem.params);
        let record = IterationRecord {
            iteration,
            cost: cost.cost,
            fidelity: cost.fidelity,
            regularization: cost.regularization,
            update_norm: norm,
            max_mass_error: trajectory.max_mass_error(),
            mean_secant_iters: trajectory.mean_secant_iters(),
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        observer(&record);
        report.records.push(record);

        let cause = if cost.cost < config.tol_cost {
            Some(TerminationCause::CostBelowTol)
        } else if norm < config.tol_update {
            Some(TerminationCause::UpdateBelowTol)
        } else if report.records.len() >= config.max_iterations {
            Some(TerminationCause::MaxIterations)
        } else {
            None
        };
        if let Some(cause) = cause {
            report.termination = Some(cause);
            return Ok(TrackingOutcome {
                control,
                trajectory,
                report,
            });
        }
        control = steepest_descent_update(&control, &grad, config.alpha);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::Rectangle;

    fn circle(mesh: &Mesh, cx: f64, r: f64, eps: f64) -> Field {
        mesh.interpolate(|x, y| ((r - ((x - cx).powi(2) + y * y).sqrt()) / (std::f64::consts::SQRT_2 * eps)).tanh())
    }

    #[test]
    fn already_optimal_stops_immediately() {
        let mesh = Mesh::new(Rectangle::new(-1.0, -1.0, 1.0, 1.0).unwrap(), 8, 8).unwrap();
        let params = ModelParams::new(0.2, 0.01, 0.05, 0.01).unwrap();
        let phi0 = Field::constant(&mesh, 1.0);
        let obs = vec![Observation { step: params.steps, field: phi0.clone() }];
        let problem = TrackingProblem::new(mesh.clone(), params, phi0, obs, true).unwrap();
        let out = run_tracking(&problem, &OptimizationConfig::default(), Control::zeros(&mesh, params.steps)).unwrap();
        assert_eq!(out.report.records.len(), 1);
        assert_eq!(out.report.termination, Some(TerminationCause::CostBelowTol));
        assert!(out.report.records[0].cost < 1e-20);
    }

    #[test]
    fn descent_reduces_cost_and_caps_iterations() {
        let mesh = Mesh::new(Rectangle::new(-2.0, -1.5, 2.0, 1.5).unwrap(), 16, 12).unwrap();
        let params = ModelParams::new(0.25, 0.01, 0.1, 0.01).unwrap();
        let phi0 = circle(&mesh, -0.2, 0.8, 0.25);
        let obs = vec![Observation { step: params.steps, field: circle(&mesh, 0.2, 0.8, 0.25) }];
        let problem = TrackingProblem::new(mesh.clone(), params, phi0, obs, false).unwrap();
        let config = OptimizationConfig {
            alpha: 0.5,
            max_iterations: 15,
            ..Default::default()
        };
        let mut seen = 0;
        let out = run_tracking_with(&problem, &config, Control::zeros(&mesh, params.steps), |_| seen += 1).unwrap();
        assert_eq!(seen, 15);
        assert_eq!(out.report.termination, Some(TerminationCause::MaxIterations));
        let first = out.report.first().unwrap().cost;
        let last = out.report.last().unwrap().cost;
        assert!(last < first, "{last} !< {first}");
    }

    #[test]
    fn invalid_config_is_reported_with_empty_history() {
        let mesh = Mesh::new(Rectangle::new(0.0, 0.0, 1.0, 1.0).unwrap(), 4, 4).unwrap();
        let params = ModelParams::new(0.2, 0.01, 0.02, 0.01).unwrap();
        let phi0 = Field::constant(&mesh, 1.0);
        let obs = vec![Observation { step: params.steps, field: phi0.clone() }];
        let problem = TrackingProblem::new(mesh.clone(), params, phi0, obs, false).unwrap();
        let config = OptimizationConfig { alpha: -1.0, ..Default::default() };
        let err = run_tracking(&problem, &config, Control::zeros(&mesh, params.steps)).unwrap_err();
        assert!(err.report.records.is_empty());
        assert!(matches!(err.error, Error::InvalidParameter { name: "alpha", .. }));
    }
}
