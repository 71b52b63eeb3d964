//! Double-well potential, model parameters and the positive-part mass target.

use crate::error::{Error, Result};
use crate::mesh::{Field, Mesh};

/// Quartic double well `G(φ) = (φ² - 1)² / 4`.
pub fn potential(phi: f64) -> f64 {
    let s = phi * phi - 1.0;
    0.25 * s * s
}

pub fn dpotential(phi: f64) -> f64 {
    phi * phi * phi - phi
}

pub fn d2potential(phi: f64) -> f64 {
    3.0 * phi * phi - 1.0
}

/// `c_G = (1/√2) ∫_{-1}^{1} G(r)^{1/2} dr` for the quartic well, which is `√2 / 3`.
pub fn c_g() -> f64 {
    std::f64::consts::SQRT_2 / 3.0
}

/// Evaluates the scaling constant for an arbitrary well by composite
/// 5-point Gauss-Legendre quadrature over `[-1, 1]`.
pub fn scaling_constant(well: impl Fn(f64) -> f64) -> f64 {
    const NODES: [f64; 5] = [
        -0.906_179_845_938_664,
        -0.538_469_310_105_683,
        0.0,
        0.538_469_310_105_683,
        0.906_179_845_938_664,
    ];
    const WEIGHTS: [f64; 5] = [
        0.236_926_885_056_189,
        0.478_628_670_499_366,
        0.568_888_888_888_889,
        0.478_628_670_499_366,
        0.236_926_885_056_189,
    ];
    let panels = 64;
    let h = 2.0 / panels as f64;
    let mut sum = 0.0;
    for k in 0..panels {
        let mid = -1.0 + (k as f64 + 0.5) * h;
        for (x, w) in NODES.iter().zip(WEIGHTS) {
            sum += w * 0.5 * h * well(mid + 0.5 * h * x).max(0.0).sqrt();
        }
    }
    sum / std::f64::consts::SQRT_2
}

/// Parameters of the forced Allen-Cahn state equation and its time grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelParams {
    pub epsilon: f64,
    pub tau: f64,
    pub end_time: f64,
    pub steps: usize,
    pub theta: f64,
    pub c_g: f64,
}

impl ModelParams {
    pub fn new(epsilon: f64, tau: f64, end_time: f64, theta: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::invalid("epsilon", format!("must be positive, got {epsilon}")));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::invalid("tau", format!("must be positive, got {tau}")));
        }
        if !(end_time > 0.0 && end_time.is_finite()) {
            return Err(Error::invalid("T", format!("must be positive, got {end_time}")));
        }
        if !(theta > 0.0 && theta.is_finite()) {
            return Err(Error::invalid("theta", format!("must be positive, got {theta}")));
        }
        let steps = (end_time / tau).round();
        if steps < 1.0 || (steps * tau - end_time).abs() > 1e-12 * end_time {
            return Err(Error::invalid(
                "T",
                format!("T = {end_time} must equal M * tau for an integer M >= 1 (tau = {tau})"),
            ));
        }
        let params = Self {
            epsilon,
            tau,
            end_time,
            steps: steps as usize,
            theta,
            c_g: c_g(),
        };
        if !params.is_stable() {
            log::warn!(
                "tau = {tau} exceeds epsilon^2 / 2 = {}; the explicit reaction term may oscillate",
                0.5 * epsilon * epsilon
            );
        }
        Ok(params)
    }

    /// `τ ≤ ε²/2`, the stability scale of the explicit reaction term.
    pub fn is_stable(&self) -> bool {
        self.tau <= 0.5 * self.epsilon * self.epsilon
    }

    pub fn time(&self, step: usize) -> f64 {
        if step == self.steps {
            self.end_time
        } else {
            step as f64 * self.tau
        }
    }

    /// Time level of `t`, if it lies on the grid.
    pub fn step_of(&self, t: f64) -> Option<usize> {
        let n = (t / self.tau).round();
        if n < 0.0 || n as usize > self.steps {
            return None;
        }
        ((n * self.tau - t).abs() <= 1e-9 * self.tau).then_some(n as usize)
    }
}

/// `Σ_i m_i [φ_i]₊`.
pub fn positive_part_mass(mesh: &Mesh, field: &Field) -> Result<f64> {
    mesh.check(field)?;
    Ok(positive_mass_of(mesh.lumped_mass(), field.values()))
}

pub(crate) fn positive_mass_of(mass: &[f64], values: &[f64]) -> f64 {
    mass.iter().zip(values).map(|(m, v)| m * v.max(0.0)).sum()
}

/// Piecewise-linear interpolant of positive-part masses through the
/// observation times.
#[derive(Clone, Debug, PartialEq)]
pub struct MassTarget {
    knots: Vec<(f64, f64)>,
}

impl MassTarget {
    /// Affine target between the initial mass at `t = 0` and the observed
    /// mass at `t = end_time`.
    pub fn linear(m0: f64, m_obs: f64, end_time: f64) -> Result<Self> {
        Self::through(m0, vec![(end_time, m_obs)])
    }

    /// Target through `(0, m0)` and each `(t_i, m_i)`; times must increase.
    pub fn through(m0: f64, observations: Vec<(f64, f64)>) -> Result<Self> {
        let mut knots = vec![(0.0, m0)];
        for (t, m) in observations {
            let last = knots.last().unwrap().0;
            if !(t > last) {
                return Err(Error::invalid("observation times", "must be positive and increasing"));
            }
            knots.push((t, m));
        }
        if knots.len() < 2 {
            return Err(Error::invalid("observation times", "at least one observation required"));
        }
        if knots.iter().any(|&(_, m)| !(m >= 0.0 && m.is_finite())) {
            return Err(Error::invalid("mass", "masses must be finite and non-negative"));
        }
        Ok(Self { knots })
    }

    pub fn initial(&self) -> f64 {
        self.knots[0].1
    }

    pub fn end_time(&self) -> f64 {
        self.knots.last().unwrap().0
    }

    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }

    pub fn at(&self, t: f64) -> Result<f64> {
        let end = self.end_time();
        // tolerate roundoff in n * tau at the final level
        let slack = 1e-12 * end;
        if !(t >= -slack && t <= end + slack) {
            return Err(Error::TimeOutOfRange { t, end });
        }
        let t = t.clamp(0.0, end);
        let k = self.knots.partition_point(|&(tk, _)| tk < t).max(1);
        let (ta, ma) = self.knots[k - 1];
        let (tb, mb) = self.knots[k];
        if t == tb {
            return Ok(mb);
        }
        Ok(ma + (t - ta) / (tb - ta) * (mb - ma))
    }
}
