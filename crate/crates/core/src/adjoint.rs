//! Objective, discrete adjoint and gradient of the reduced cost.
//!
//! The adjoint is the exact transpose of the linearised IMEX step, so the
//! gradient it produces is the gradient of the discrete reduced objective
//! `η ↦ J(φ(η), η)` with respect to the space-time pairing
//! `τ Σ_n (aⁿ, bⁿ)_M`. Writing `A = M/τ + K`, the costates satisfy
//!
//! ```text
//! p^M     = φ^M − φ_obs
//! A pⁿ    = (M/τ) sⁿ⁺¹,    n = M−1 … 0
//! s^M     = p^M
//! sᵏ      = pᵏ − (τ/ε²) G″(φᵏ) pᵏ + (φᵏ − φ_obs,ᵏ)      (k < M)
//! ```
//!
//! where the last term only appears at interior observation levels, and
//! the gradient slice paired with `ηⁿ` is `θ ηⁿ + (c_G/ε) pⁿ`.
//!
//! The multiplier of the mass constraint does not enter the adjoint; for
//! constrained trajectories the same recursion is used with the
//! constrained states.

use crate::error::{Error, Result};
use crate::forward::{Control, StateTrajectory};
use crate::mesh::{Field, Mesh};
use crate::phase_field::{d2potential, ModelParams};
use crate::sparse::{CgSettings, CgSolver, ImexOperator};

/// Target field observed at time level `step` (`1 ≤ step ≤ M`).
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub step: usize,
    pub field: Field,
}

impl Observation {
    pub fn at_time(params: &ModelParams, time: f64, field: Field) -> Result<Self> {
        match params.step_of(time) {
            Some(step) if step >= 1 => Ok(Self { step, field }),
            _ => Err(Error::ObservationOffGrid { time, tau: params.tau }),
        }
    }
}

pub(crate) fn check_observations(mesh: &Mesh, params: &ModelParams, obs: &[Observation]) -> Result<()> {
    if obs.is_empty() {
        return Err(Error::invalid("observations", "at least one observation required"));
    }
    let mut last = 0;
    for o in obs {
        mesh.check(&o.field)?;
        if o.step <= last || o.step > params.steps {
            return Err(Error::invalid(
                "observations",
                format!("time levels must increase within 1..={}, got {}", params.steps, o.step),
            ));
        }
        last = o.step;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub cost: f64,
    pub fidelity: f64,
    pub regularization: f64,
}

/// `J = ½ Σ_obs |φ(t_i) − φ_obs,i|²_M + (θ/2) τ Σ_{n<M} |ηⁿ|²_M`.
pub fn objective(
    mesh: &Mesh,
    trajectory: &StateTrajectory,
    control: &Control,
    observations: &[Observation],
    params: &ModelParams,
) -> Result<Objective> {
    check_observations(mesh, params, observations)?;
    control.check(mesh, params)?;
    let mut fidelity = 0.0;
    for o in observations {
        let state = trajectory
            .states
            .get(o.step)
            .ok_or_else(|| Error::Shape(format!("trajectory lacks level {}", o.step)))?;
        mesh.check(state)?;
        fidelity += 0.5 * misfit_sq(mesh, state.values(), o.field.values());
    }
    let regularization = 0.5 * params.theta * control.inner(mesh, params.tau, control);
    Ok(Objective {
        cost: fidelity + regularization,
        fidelity,
        regularization,
    })
}

fn misfit_sq(mesh: &Mesh, a: &[f64], b: &[f64]) -> f64 {
    mesh.lumped_mass()
        .iter()
        .zip(a.iter().zip(b))
        .map(|(m, (x, y))| m * (x - y) * (x - y))
        .sum()
}

/// Costates `p⁰ … p^M`.
#[derive(Clone, Debug)]
pub struct AdjointTrajectory {
    pub costates: Vec<Field>,
}

/// Backward sweep of the discrete adjoint.
pub fn solve_adjoint(
    mesh: &Mesh,
    trajectory: &StateTrajectory,
    observations: &[Observation],
    params: &ModelParams,
    cg: CgSettings,
) -> Result<AdjointTrajectory> {
    check_observations(mesh, params, observations)?;
    let steps = params.steps;
    if trajectory.states.len() != steps + 1 {
        return Err(Error::Shape(format!(
            "trajectory has {} levels, expected {}",
            trajectory.states.len(),
            steps + 1
        )));
    }
    let op = ImexOperator::new(mesh, params.tau)?;
    let mut solver = CgSolver::new(cg)?;
    let n_dof = mesh.num_vertices();
    let jump_at = |level: usize| observations.iter().find(|o| o.step == level);
    let reaction = params.tau / (params.epsilon * params.epsilon);
    let m_tau = op.mass_over_tau();

    let mut costates = vec![Field::zeros(mesh); steps + 1];
    if let Some(o) = jump_at(steps) {
        let phi = trajectory.states[steps].values();
        let p = costates[steps].values_mut();
        for i in 0..n_dof {
            p[i] = phi[i] - o.field.values()[i];
        }
    }

    let mut rhs = vec![0.0; n_dof];
    for level in (1..=steps).rev() {
        // sˡ from pˡ, then A p^{l−1} = (M/τ) sˡ
        let p_next = costates[level].values();
        let phi = trajectory.states[level].values();
        for i in 0..n_dof {
            let mut s = p_next[i];
            if level < steps {
                s -= reaction * d2potential(phi[i]) * p_next[i];
            }
            rhs[i] = m_tau[i] * s;
        }
        if level < steps {
            if let Some(o) = jump_at(level) {
                for i in 0..n_dof {
                    rhs[i] += m_tau[i] * (phi[i] - o.field.values()[i]);
                }
            }
        }
        let mut p = costates[level].clone();
        solver
            .solve(&op, &rhs, p.values_mut())
            .map_err(|e| e.at_step(level - 1))?;
        costates[level - 1] = p;
    }
    Ok(AdjointTrajectory { costates })
}

/// Riesz representative of the reduced gradient: slice `n` is
/// `θ ηⁿ + (c_G/ε) pⁿ`.
pub fn gradient(control: &Control, adjoint: &AdjointTrajectory, params: &ModelParams) -> Result<Control> {
    if adjoint.costates.len() != control.len() + 1 {
        return Err(Error::Shape(format!(
            "{} costates for {} control slices",
            adjoint.costates.len(),
            control.len()
        )));
    }
    let k = params.c_g / params.epsilon;
    let slices = control
        .slices
        .iter()
        .zip(&adjoint.costates)
        .map(|(eta, p)| {
            let mut g = eta.clone();
            for (gi, pi) in g.values_mut().iter_mut().zip(p.values()) {
                *gi = params.theta * *gi + k * pi;
            }
            g
        })
        .collect();
    Ok(Control { slices })
}

/// `η ← η − α g`.
pub fn steepest_descent_update(control: &Control, grad: &Control, alpha: f64) -> Control {
    control.axpy(-alpha, grad)
}

/// `α ‖g‖_{L²(Ω × [0,T))}` with the lumped, left-endpoint quadrature.
pub fn update_norm(mesh: &Mesh, grad: &Control, alpha: f64, params: &ModelParams) -> f64 {
    alpha * grad.inner(mesh, params.tau, grad).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::ForwardSolver;
    use crate::mesh::Rectangle;

    fn domain() -> Mesh {
        Mesh::new(Rectangle::new(0.0, 0.0, 8.0, 6.0).unwrap(), 8, 6).unwrap()
    }

    #[test]
    fn objective_closed_forms() {
        let m = domain();
        let p = ModelParams::new(0.1, 1e-3, 0.4, 0.01).unwrap();
        let mut states = vec![Field::zeros(&m); p.steps + 1];
        states[p.steps] = Field::constant(&m, 0.1);
        let traj = StateTrajectory {
            states,
            multipliers: vec![0.0; p.steps],
            secant_iters: vec![0; p.steps],
            mass_errors: vec![0.0; p.steps],
            constrained: false,
        };
        let obs = vec![Observation { step: p.steps, field: Field::zeros(&m) }];
        let j = objective(&m, &traj, &Control::zeros(&m, p.steps), &obs, &p).unwrap();
        assert!((j.fidelity - 0.24).abs() < 1e-12);
        assert_eq!(j.regularization, 0.0);
        let j = objective(&m, &traj, &Control::constant(&m, p.steps, 1.0), &obs, &p).unwrap();
        assert!((j.regularization - 0.096).abs() < 1e-12);
        assert!((j.cost - 0.336).abs() < 1e-12);
    }

    #[test]
    fn observation_must_sit_on_grid() {
        let m = domain();
        let p = ModelParams::new(0.1, 1e-3, 0.4, 0.01).unwrap();
        assert!(Observation::at_time(&p, 0.4, Field::zeros(&m)).is_ok());
        assert!(matches!(
            Observation::at_time(&p, 0.1234567, Field::zeros(&m)),
            Err(Error::ObservationOffGrid { .. })
        ));
        assert!(Observation::at_time(&p, 0.0, Field::zeros(&m)).is_err());
    }

    #[test]
    fn matched_terminal_state_gives_zero_costates() {
        let m = domain();
        let p = ModelParams::new(0.1, 1e-3, 0.005, 0.01).unwrap();
        let phi0 = m.interpolate(|x, y| (1.5 - ((x - 4.0).powi(2) + (y - 3.0).powi(2)).sqrt()).tanh());
        let traj = ForwardSolver::new(&m, p).unwrap().solve(&phi0, &Control::zeros(&m, p.steps), None).unwrap();
        let obs = vec![Observation { step: p.steps, field: traj.final_state().clone() }];
        let adj = solve_adjoint(&m, &traj, &obs, &p, CgSettings::default()).unwrap();
        assert!(adj.costates.iter().all(|c| c.values().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn uniform_costates_follow_scalar_recurrence() {
        let m = domain();
        let p = ModelParams::new(0.1, 1e-3, 0.005, 0.01).unwrap();
        let traj = StateTrajectory {
            states: vec![Field::constant(&m, 1.0); p.steps + 1],
            multipliers: vec![0.0; p.steps],
            secant_iters: vec![0; p.steps],
            mass_errors: vec![0.0; p.steps],
            constrained: false,
        };
        let obs = vec![Observation { step: p.steps, field: Field::constant(&m, 0.5) }];
        let cg = CgSettings { rtol: 1e-14, max_iter: None };
        let adj = solve_adjoint(&m, &traj, &obs, &p, cg).unwrap();
        let at = |n: usize| adj.costates[n].values()[0];
        assert_eq!(at(p.steps), 0.5);
        // the last step carries no reaction factor, earlier ones 1 − (τ/ε²) G″(1) = 0.8
        assert!((at(p.steps - 1) - 0.5).abs() < 1e-12);
        for n in 0..p.steps - 1 {
            assert!((at(n) - 0.8 * at(n + 1)).abs() < 1e-12, "level {n}");
        }
    }

    #[test]
    fn gradient_and_update_rules() {
        let m = domain();
        let p = ModelParams::new(0.1, 1e-3, 0.003, 0.01).unwrap();
        let eta = Control::constant(&m, p.steps, 2.0);
        let zero_adj = AdjointTrajectory { costates: vec![Field::zeros(&m); p.steps + 1] };
        let g = gradient(&eta, &zero_adj, &p).unwrap();
        assert!(g.slices.iter().all(|s| s.values().iter().all(|&v| (v - 0.02).abs() < 1e-15)));
        let shrunk = steepest_descent_update(&eta, &g, 0.01);
        assert!(shrunk.slices[0].values().iter().all(|&v| (v - 2.0 * (1.0 - 1e-4)).abs() < 1e-14));

        let adj = AdjointTrajectory {
            costates: (0..=p.steps).map(|n| Field::constant(&m, n as f64 + 1.0)).collect(),
        };
        let g = gradient(&Control::zeros(&m, p.steps), &adj, &p).unwrap();
        for (n, s) in g.slices.iter().enumerate() {
            let expect = p.c_g / p.epsilon * (n as f64 + 1.0);
            assert!(s.values().iter().all(|&v| (v - expect).abs() < 1e-12));
        }
        assert!(gradient(&Control::zeros(&m, p.steps + 1), &adj, &p).is_err());
    }

    #[test]
    fn update_norm_arithmetic() {
        let m = domain();
        let p = ModelParams::new(0.1, 1e-3, 0.4, 0.01).unwrap();
        let one = Control::constant(&m, p.steps, 1.0);
        let n = update_norm(&m, &one, 0.01, &p);
        assert!((n - 0.01 * 19.2f64.sqrt()).abs() < 1e-12);
        assert!((update_norm(&m, &one, 0.02, &p) - 2.0 * n).abs() < 1e-12);
        assert_eq!(update_norm(&m, &Control::zeros(&m, p.steps), 0.01, &p), 0.0);
    }
}
