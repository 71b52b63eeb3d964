//! IMEX time stepping of the forced Allen-Cahn equation with an optional
//! positive-part mass constraint enforced through a spatially uniform
//! Lagrange multiplier.
//!
//! One step solves
//!
//! ```text
//! (M/τ + K) φⁿ⁺¹ = (M/τ) φⁿ − (1/ε²) M G′(φⁿ) + (1/ε) M (c_G ηⁿ − λⁿ⁺¹)
//! ```
//!
//! with lumped `M`, so the nonlinear term is the nodal interpolant of `G′`.

use crate::error::{Error, Result};
use crate::mesh::{Field, Mesh};
use crate::phase_field::{dpotential, positive_mass_of, MassTarget, ModelParams};
use crate::sparse::{CgSettings, CgSolver, ImexOperator};

/// Space-time control, one slice per forward step (`η⁰ … η^{M−1}`).
#[derive(Clone, Debug, PartialEq)]
pub struct Control {
    pub slices: Vec<Field>,
}

impl Control {
    pub fn constant(mesh: &Mesh, steps: usize, c: f64) -> Self {
        Self {
            slices: vec![Field::constant(mesh, c); steps],
        }
    }

    pub fn zeros(mesh: &Mesh, steps: usize) -> Self {
        Self::constant(mesh, steps, 0.0)
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn check(&self, mesh: &Mesh, params: &ModelParams) -> Result<()> {
        if self.slices.len() != params.steps {
            return Err(Error::Shape(format!(
                "control has {} slices, expected {}",
                self.slices.len(),
                params.steps
            )));
        }
        self.slices.iter().try_for_each(|s| mesh.check(s))
    }

    /// `self + a * other`, slice-wise.
    pub fn axpy(&self, a: f64, other: &Control) -> Control {
        let slices = self
            .slices
            .iter()
            .zip(&other.slices)
            .map(|(s, o)| {
                let mut out = s.clone();
                for (v, w) in out.values_mut().iter_mut().zip(o.values()) {
                    *v += a * w;
                }
                out
            })
            .collect();
        Control { slices }
    }

    /// Space-time pairing `τ Σ_n (aⁿ, bⁿ)_M`.
    pub fn inner(&self, mesh: &Mesh, tau: f64, other: &Control) -> f64 {
        tau * self
            .slices
            .iter()
            .zip(&other.slices)
            .map(|(a, b)| mesh.lumped_dot(a.values(), b.values()))
            .sum::<f64>()
    }
}

/// Settings of the multiplier iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MultiplierSettings {
    pub lambda_tol: f64,
    pub max_iter: usize,
}

impl Default for MultiplierSettings {
    fn default() -> Self {
        Self {
            lambda_tol: 1e-8,
            max_iter: 100,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstrainedStep {
    pub lambda: f64,
    pub iterations: usize,
    pub mass_error: f64,
}

/// States `φ⁰ … φ^M` with the multipliers `λ¹ … λ^M` of each step.
#[derive(Clone, Debug)]
pub struct StateTrajectory {
    pub states: Vec<Field>,
    pub multipliers: Vec<f64>,
    pub secant_iters: Vec<usize>,
    /// `|mass(φⁿ) − M_φ(tⁿ)|` for `n ≥ 1`; zeros when unconstrained.
    pub mass_errors: Vec<f64>,
    pub constrained: bool,
}

impl StateTrajectory {
    pub fn final_state(&self) -> &Field {
        self.states.last().expect("trajectory has at least the initial state")
    }

    pub fn max_mass_error(&self) -> f64 {
        self.mass_errors.iter().copied().fold(0.0, f64::max)
    }

    pub fn mean_secant_iters(&self) -> f64 {
        if self.secant_iters.is_empty() {
            return 0.0;
        }
        self.secant_iters.iter().sum::<usize>() as f64 / self.secant_iters.len() as f64
    }
}

/// Forward solver bound to a mesh and a parameter set.
pub struct ForwardSolver<'a> {
    mesh: &'a Mesh,
    params: ModelParams,
    op: ImexOperator<'a>,
    cg: CgSolver,
    multiplier: MultiplierSettings,
    rhs: Vec<f64>,
}

impl<'a> ForwardSolver<'a> {
    pub fn new(mesh: &'a Mesh, params: ModelParams) -> Result<Self> {
        Self::with_settings(mesh, params, CgSettings::default(), MultiplierSettings::default())
    }

    pub fn with_settings(
        mesh: &'a Mesh,
        params: ModelParams,
        cg: CgSettings,
        multiplier: MultiplierSettings,
    ) -> Result<Self> {
        if !(multiplier.lambda_tol > 0.0) {
            return Err(Error::invalid("lambda_tol", "must be positive"));
        }
        if multiplier.max_iter < 2 {
            return Err(Error::invalid("max_secant", "needs at least two iterations"));
        }
        Ok(Self {
            mesh,
            params,
            op: ImexOperator::new(mesh, params.tau)?,
            cg: CgSolver::new(cg)?,
            multiplier,
            rhs: vec![0.0; mesh.num_vertices()],
        })
    }

    pub fn mesh(&self) -> &'a Mesh {
        self.mesh
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// Unconstrained step (`λ = 0`). `out` holds the warm start on entry.
    pub(crate) fn step_into(&mut self, phi: &[f64], eta: &[f64], out: &mut [f64]) -> Result<()> {
        let p = &self.params;
        let inv_eps2 = 1.0 / (p.epsilon * p.epsilon);
        let force = p.c_g / p.epsilon;
        let mass = self.mesh.lumped_mass();
        let m_tau = self.op.mass_over_tau();
        for i in 0..phi.len() {
            self.rhs[i] = m_tau[i] * phi[i] - mass[i] * (inv_eps2 * dpotential(phi[i]) - force * eta[i]);
        }
        self.cg.solve(&self.op, &self.rhs, out)?;
        Ok(())
    }

    pub fn step_unconstrained(&mut self, phi: &Field, eta: &Field) -> Result<Field> {
        self.mesh.check(phi)?;
        self.mesh.check(eta)?;
        let mut out = phi.clone();
        self.step_into(phi.values(), eta.values(), out.values_mut())?;
        Ok(out)
    }

    /// Constrained step: finds `λ` with `mass(φⁿ⁺¹(λ)) = target_mass`.
    ///
    /// The step is affine in `λ`: `φ(λ) = φ_base − λ u` with
    /// `(M/τ + K) u = (1/ε) M 1`. Since `K` annihilates constants that
    /// system is solved exactly by `u ≡ τ/ε`, so every secant iterate costs
    /// one mass evaluation and no further linear solves.
    pub(crate) fn step_constrained_into(
        &mut self,
        phi: &[f64],
        eta: &[f64],
        target_mass: f64,
        out: &mut [f64],
    ) -> Result<ConstrainedStep> {
        let area = self.mesh.area();
        if !(target_mass >= 0.0 && target_mass <= area * (1.0 + 1e-12)) {
            return Err(Error::TargetMassOutOfRange { target: target_mass, area });
        }
        self.step_into(phi, eta, out)?;
        let shift = self.params.tau / self.params.epsilon;
        let mass = self.mesh.lumped_mass();
        let base: &[f64] = out;
        let mass_at = |lambda: f64| -> f64 {
            mass.iter()
                .zip(base)
                .map(|(m, b)| m * (b - lambda * shift).max(0.0))
                .sum()
        };
        let (lambda, iterations) =
            secant_multiplier(mass_at, target_mass, &self.params, self.multiplier)?;
        for v in out.iter_mut() {
            *v -= lambda * shift;
        }
        let mass_error = (positive_mass_of(mass, out) - target_mass).abs();
        Ok(ConstrainedStep {
            lambda,
            iterations,
            mass_error,
        })
    }

    pub fn step_constrained(
        &mut self,
        phi: &Field,
        eta: &Field,
        target_mass: f64,
    ) -> Result<(Field, ConstrainedStep)> {
        self.mesh.check(phi)?;
        self.mesh.check(eta)?;
        let mut out = phi.clone();
        let info = self.step_constrained_into(phi.values(), eta.values(), target_mass, out.values_mut())?;
        Ok((out, info))
    }

    /// Runs all `M` steps from `phi0` under `control`.
    pub fn solve(
        &mut self,
        phi0: &Field,
        control: &Control,
        constraint: Option<&MassTarget>,
    ) -> Result<StateTrajectory> {
        self.mesh.check(phi0)?;
        control.check(self.mesh, &self.params)?;
        let steps = self.params.steps;
        let mut states = Vec::with_capacity(steps + 1);
        states.push(phi0.clone());
        let mut multipliers = Vec::with_capacity(steps);
        let mut secant_iters = Vec::with_capacity(steps);
        let mut mass_errors = Vec::with_capacity(steps);
        for n in 0..steps {
            let prev = &states[n];
            let mut next = prev.clone();
            let eta = control.slices[n].values();
            match constraint {
                None => {
                    self.step_into(prev.values(), eta, next.values_mut())
                        .map_err(|e| e.at_step(n + 1))?;
                    multipliers.push(0.0);
                    secant_iters.push(0);
                    mass_errors.push(0.0);
                }
                Some(target) => {
                    let m = target.at(self.params.time(n + 1))?;
                    let info = self
                        .step_constrained_into(prev.values(), eta, m, next.values_mut())
                        .map_err(|e| e.at_step(n + 1))?;
                    multipliers.push(info.lambda);
                    secant_iters.push(info.iterations);
                    mass_errors.push(info.mass_error);
                }
            }
            states.push(next);
        }
        Ok(StateTrajectory {
            states,
            multipliers,
            secant_iters,
            mass_errors,
            constrained: constraint.is_some(),
        })
    }
}

/// Secant iteration on the decreasing function `mass_at`, started from
/// `λ¹ = −2ε/τ + 1`, `λ² = 2ε/τ − 1`, stopping once `|Δλ| < tol`.
///
/// Iterates are kept inside a bracket of the root; a secant step that
/// leaves it, or whose denominator vanishes, is replaced by bisection.
/// Returns the multiplier and the number of updates after the two
/// initializers.
fn secant_multiplier(
    mass_at: impl Fn(f64) -> f64,
    target: f64,
    params: &ModelParams,
    settings: MultiplierSettings,
) -> Result<(f64, usize)> {
    let r = 2.0 * params.epsilon / params.tau;
    let mut prev = (-r + 1.0, 0.0);
    let mut cur = (r - 1.0, 0.0);
    if prev.0 > cur.0 {
        std::mem::swap(&mut prev, &mut cur);
    }
    prev.1 = mass_at(prev.0) - target;
    cur.1 = mass_at(cur.0) - target;
    if prev.1 == 0.0 {
        return Ok((prev.0, 0));
    }
    if cur.1 == 0.0 {
        return Ok((cur.0, 0));
    }

    // residual decreases in λ: lo has residual > 0, hi has residual < 0
    let (mut lo, mut hi) = (prev, cur);
    let width = (hi.0 - lo.0).max(1.0);
    let mut grow = width;
    for _ in 0..64 {
        if lo.1 > 0.0 {
            break;
        }
        hi = lo;
        lo.0 -= grow;
        lo.1 = mass_at(lo.0) - target;
        grow *= 2.0;
    }
    grow = width;
    for _ in 0..64 {
        if hi.1 < 0.0 {
            break;
        }
        lo = hi;
        hi.0 += grow;
        hi.1 = mass_at(hi.0) - target;
        grow *= 2.0;
    }
    if !(lo.1 >= 0.0 && hi.1 <= 0.0) {
        return Err(Error::MultiplierFailed {
            iterations: 0,
            last_change: f64::INFINITY,
        });
    }

    let mut last_change = f64::INFINITY;
    for k in 1..=settings.max_iter {
        let denom = cur.1 - prev.1;
        let mut next = if denom != 0.0 {
            cur.0 - cur.1 * (cur.0 - prev.0) / denom
        } else {
            f64::NAN
        };
        if !(next >= lo.0 && next <= hi.0) {
            next = 0.5 * (lo.0 + hi.0);
        }
        last_change = (next - cur.0).abs();
        let res = mass_at(next) - target;
        prev = cur;
        cur = (next, res);
        if res == 0.0 || last_change < settings.lambda_tol {
            return Ok((next, k));
        }
        if res > 0.0 {
            lo = cur;
        } else {
            hi = cur;
        }
        if hi.0 - lo.0 < settings.lambda_tol {
            return Ok((next, k));
        }
    }
    Err(Error::MultiplierFailed {
        iterations: settings.max_iter,
        last_change,
    })
}
