//! Independent oracles for the solvers.
//!
//! The dense oracle re-derives the discrete scheme from the grid geometry
//! alone (five-point stencil form of the right-triangle P1 stiffness, lumped
//! mass by cell corners) and solves it with a hand-written Cholesky
//! factorisation. It shares no code with [`crate::mesh`], [`crate::sparse`],
//! [`crate::forward`] or [`crate::adjoint`].

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::analysis::{centroid, extract_zero_levelset};
use crate::error::{Error, Result};
use crate::forward::{Control, ForwardSolver, MultiplierSettings};
use crate::mesh::{Field, Mesh, Rectangle};
use crate::optimize::{evaluate, reduced_gradient, OptimizationConfig, TrackingProblem};
use crate::adjoint::Observation;
use crate::phase_field::{MassTarget, ModelParams};
use crate::sparse::CgSettings;

/// Largest system the dense oracle accepts.
pub const DENSE_LIMIT: usize = 400;

#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub name: String,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl OracleReport {
    /// Pass/fail is judged on the relative error.
    pub fn new(name: impl Into<String>, max_abs_error: f64, max_rel_error: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            max_abs_error,
            max_rel_error,
            tolerance,
            passed: max_rel_error <= tolerance,
        }
    }
}

pub fn write_reports_csv(path: &Path, reports: &[OracleReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["name", "max_abs_error", "max_rel_error", "tolerance", "passed"])?;
    for r in reports {
        w.write_record([
            r.name.clone(),
            format!("{:e}", r.max_abs_error),
            format!("{:e}", r.max_rel_error),
            format!("{:e}", r.tolerance),
            r.passed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Dense matrices of the scheme on a structured grid.
#[derive(Clone, Debug)]
pub struct DenseModel {
    n: usize,
    mass: Vec<f64>,
    stiffness: Vec<f64>,
}

impl DenseModel {
    pub fn new(rect: Rectangle, nx: usize, ny: usize) -> Result<Self> {
        let n = (nx + 1) * (ny + 1);
        if n > DENSE_LIMIT {
            return Err(Error::OracleTooLarge { dofs: n, limit: DENSE_LIMIT });
        }
        let hx = rect.width() / nx as f64;
        let hy = rect.height() / ny as f64;
        let id = |i: usize, j: usize| j * (nx + 1) + i;
        let mut mass = vec![0.0; n];
        let mut stiffness = vec![0.0; n * n];
        let mut couple = |a: usize, b: usize, w: f64| {
            stiffness[a * n + a] += w;
            stiffness[b * n + b] += w;
            stiffness[a * n + b] -= w;
            stiffness[b * n + a] -= w;
        };
        for j in 0..ny {
            for i in 0..nx {
                // the two triangles share the lower-left/upper-right diagonal,
                // whose cotangent weight vanishes; axis edges get half a
                // five-point weight from each side
                couple(id(i, j), id(i + 1, j), 0.5 * hy / hx);
                couple(id(i, j + 1), id(i + 1, j + 1), 0.5 * hy / hx);
                couple(id(i, j), id(i, j + 1), 0.5 * hx / hy);
                couple(id(i + 1, j), id(i + 1, j + 1), 0.5 * hx / hy);
                let cell = hx * hy;
                mass[id(i, j)] += cell / 3.0;
                mass[id(i + 1, j + 1)] += cell / 3.0;
                mass[id(i + 1, j)] += cell / 6.0;
                mass[id(i, j + 1)] += cell / 6.0;
            }
        }
        Ok(Self { n, mass, stiffness })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn stiffness(&self) -> &[f64] {
        &self.stiffness
    }

    fn system(&self, tau: f64) -> Cholesky {
        let mut a = self.stiffness.clone();
        for i in 0..self.n {
            a[i * self.n + i] += self.mass[i] / tau;
        }
        Cholesky::factor(a, self.n)
    }

    fn positive_mass(&self, v: &[f64]) -> f64 {
        self.mass.iter().zip(v).map(|(m, x)| m * x.max(0.0)).sum()
    }
}

/// Dense lower-triangular factorisation `A = L Lᵀ`.
pub struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

impl Cholesky {
    pub fn factor(mut a: Vec<f64>, n: usize) -> Self {
        for j in 0..n {
            let mut d = a[j * n + j];
            for k in 0..j {
                d -= a[j * n + k] * a[j * n + k];
            }
            assert!(d > 0.0, "matrix not positive definite");
            let d = d.sqrt();
            a[j * n + j] = d;
            for i in j + 1..n {
                let mut s = a[i * n + j];
                for k in 0..j {
                    s -= a[i * n + k] * a[j * n + k];
                }
                a[i * n + j] = s / d;
            }
            for i in 0..j {
                a[i * n + j] = 0.0;
            }
        }
        Self { n, l: a }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= self.l[i * n + k] * y[k];
            }
            y[i] = s / self.l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= self.l[k * n + i] * y[k];
            }
            y[i] = s / self.l[i * n + i];
        }
        y
    }
}

#[derive(Clone, Debug)]
pub struct DenseTrajectory {
    pub states: Vec<Vec<f64>>,
    pub multipliers: Vec<f64>,
}

/// The IMEX scheme with dense matrices. With a mass target the multiplier
/// of every step is found by plain bisection to `1e-12`, re-solving the
/// full linear system at each probe.
pub fn dense_forward_oracle(
    model: &DenseModel,
    params: &ModelParams,
    phi0: &[f64],
    control: &[Vec<f64>],
    constraint: Option<&MassTarget>,
) -> Result<DenseTrajectory> {
    let n = model.dim();
    if phi0.len() != n || control.len() != params.steps || control.iter().any(|c| c.len() != n) {
        return Err(Error::Shape("dense oracle input shape".into()));
    }
    let chol = model.system(params.tau);
    let eps = params.epsilon;
    let mut states = vec![phi0.to_vec()];
    let mut multipliers = Vec::with_capacity(params.steps);
    for step in 0..params.steps {
        let phi = &states[step];
        let rhs: Vec<f64> = (0..n)
            .map(|i| {
                let reaction = phi[i] * phi[i] * phi[i] - phi[i];
                model.mass[i] * (phi[i] / params.tau - reaction / (eps * eps) + params.c_g / eps * control[step][i])
            })
            .collect();
        let solve_with = |lambda: f64| -> Vec<f64> {
            let b: Vec<f64> = rhs.iter().zip(&model.mass).map(|(r, m)| r - m * lambda / eps).collect();
            chol.solve(&b)
        };
        let (next, lambda) = match constraint {
            None => (solve_with(0.0), 0.0),
            Some(target) => {
                let goal = target.at(params.time(step + 1))?;
                let f = |l: f64| model.positive_mass(&solve_with(l)) - goal;
                let mut width = 2.0 * eps / params.tau;
                let (mut lo, mut hi) = (-width, width);
                while f(lo) < 0.0 {
                    width *= 2.0;
                    lo = -width;
                }
                while f(hi) > 0.0 {
                    width *= 2.0;
                    hi = width;
                }
                for _ in 0..300 {
                    let mid = 0.5 * (lo + hi);
                    if hi - lo <= 1e-12 || mid == lo || mid == hi {
                        break;
                    }
                    if f(mid) > 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                let l = 0.5 * (lo + hi);
                (solve_with(l), l)
            }
        };
        states.push(next);
        multipliers.push(lambda);
    }
    Ok(DenseTrajectory { states, multipliers })
}

/// Euclidean gradient of the discrete reduced cost with respect to every
/// nodal control value, by forward (tangent-linear) propagation of the
/// dense sensitivity matrices. Single observation at the final level,
/// unconstrained model.
pub fn dense_gradient_oracle(
    model: &DenseModel,
    params: &ModelParams,
    phi0: &[f64],
    control: &[Vec<f64>],
    target: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let n = model.dim();
    let traj = dense_forward_oracle(model, params, phi0, control, None)?;
    let chol = model.system(params.tau);
    let eps = params.epsilon;
    let residual: Vec<f64> = (0..n)
        .map(|i| model.mass[i] * (traj.states[params.steps][i] - target[i]))
        .collect();
    let mut grads = Vec::with_capacity(params.steps);
    for slice in 0..params.steps {
        // columns of d φ^{slice+1} / d η^{slice}
        let mut sens: Vec<Vec<f64>> = (0..n)
            .map(|j| {
                let mut e = vec![0.0; n];
                e[j] = params.c_g / eps * model.mass[j];
                chol.solve(&e)
            })
            .collect();
        for level in slice + 1..params.steps {
            let phi = &traj.states[level];
            for col in sens.iter_mut() {
                let b: Vec<f64> = (0..n)
                    .map(|i| {
                        let g2 = 3.0 * phi[i] * phi[i] - 1.0;
                        model.mass[i] * (1.0 / params.tau - g2 / (eps * eps)) * col[i]
                    })
                    .collect();
                *col = chol.solve(&b);
            }
        }
        let g: Vec<f64> = (0..n)
            .map(|j| {
                let fid: f64 = sens[j].iter().zip(&residual).map(|(s, r)| s * r).sum();
                fid + params.theta * params.tau * model.mass[j] * control[slice][j]
            })
            .collect();
        grads.push(g);
    }
    Ok(grads)
}

/// Gradient check outcome: the worst relative error over all directions
/// and step sizes, plus the worst error per step size.
#[derive(Clone, Debug)]
pub struct GradientCheck {
    pub report: OracleReport,
    pub per_step: Vec<(f64, f64)>,
}

/// Small unconstrained circle-translation problem for gradient checks.
pub fn gradcheck_problem(cells: usize, steps: usize) -> Result<TrackingProblem> {
    let rect = Rectangle::new(-2.0, -2.0, 2.0, 2.0)?;
    let mesh = Mesh::new(rect, cells, cells)?;
    let params = ModelParams::new(0.25, 0.01, 0.01 * steps as f64, 0.01)?;
    let disk = |cx: f64| {
        mesh.interpolate(move |x, y| ((1.0 - ((x - cx).powi(2) + y * y).sqrt()) / (std::f64::consts::SQRT_2 * 0.25)).tanh())
    };
    let phi0 = disk(-0.3);
    let obs = vec![Observation { step: params.steps, field: disk(0.3) }];
    TrackingProblem::new(mesh, params, phi0, obs, false)
}

pub fn random_control(mesh: &Mesh, steps: usize, amplitude: f64, rng: &mut impl Rng) -> Control {
    Control {
        slices: (0..steps)
            .map(|_| {
                let v = (0..mesh.num_vertices()).map(|_| amplitude * rng.gen_range(-1.0..1.0)).collect();
                Field::from_values(mesh, v).expect("finite by construction")
            })
            .collect(),
    }
}

/// Central differences of the discrete reduced cost along random
/// directions, compared with the adjoint directional derivative.
pub fn fd_gradient_oracle(
    problem: &TrackingProblem,
    control: &Control,
    n_directions: usize,
    steps: &[f64],
    tolerance: f64,
    seed: u64,
) -> Result<GradientCheck> {
    if problem.constrained {
        return Err(Error::invalid("constraint", "the gradient check needs the unconstrained model"));
    }
    let dofs = problem.mesh.num_vertices();
    if dofs > DENSE_LIMIT {
        return Err(Error::OracleTooLarge { dofs, limit: DENSE_LIMIT });
    }
    let config = OptimizationConfig {
        cg: CgSettings {
            rtol: 1e-14,
            max_iter: Some(10 * dofs),
        },
        ..Default::default()
    };
    let (traj, _) = evaluate(problem, control, &config)?;
    let grad = reduced_gradient(problem, control, &traj, config.cg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let directions: Vec<Control> = (0..n_directions)
        .map(|_| random_control(&problem.mesh, problem.params.steps, 1.0, &mut rng))
        .collect();
    let cost = |c: &Control| evaluate(problem, c, &config).map(|(_, j)| j.cost);

    let rows: Vec<Vec<(f64, f64)>> = directions
        .par_iter()
        .map(|dir| {
            let exact = grad.inner(&problem.mesh, problem.params.tau, dir);
            steps
                .iter()
                .map(|&h| {
                    let plus = cost(&control.axpy(h, dir))?;
                    let minus = cost(&control.axpy(-h, dir))?;
                    let fd = (plus - minus) / (2.0 * h);
                    let abs = (fd - exact).abs();
                    Ok((abs, abs / exact.abs().max(f64::MIN_POSITIVE)))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut per_step: Vec<(f64, f64)> = steps.iter().map(|&h| (h, 0.0)).collect();
    let (mut max_abs, mut max_rel) = (0.0f64, 0.0f64);
    for row in &rows {
        for (k, &(abs, rel)) in row.iter().enumerate() {
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
            per_step[k].1 = per_step[k].1.max(rel);
        }
    }
    Ok(GradientCheck {
        report: OracleReport::new("fd_gradient", max_abs, max_rel, tolerance),
        per_step,
    })
}

/// One sample of an unforced circle run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadiusSample {
    pub time: f64,
    pub radius: f64,
    pub exact: f64,
}

#[derive(Clone, Debug)]
pub struct CircleFlowCheck {
    pub report: OracleReport,
    pub samples: Vec<RadiusSample>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CircleFlowSetup {
    pub epsilon: f64,
    pub r0: f64,
    /// Cells per axis on `[-L, L]²`.
    pub cells: usize,
    pub half_width: f64,
    pub tau: f64,
    pub end_time: f64,
    pub sample_every: usize,
    /// Hold the positive-part mass at its initial value.
    pub conserve_mass: bool,
}

/// Unforced circle against the curve-shortening law `r(t) = √(r₀² − 2t)`
/// (or against `r₀` when the mass is conserved). The radius is the mean
/// distance of the zero level-set vertices to the positive-part centroid.
pub fn mcf_circle_oracle(setup: CircleFlowSetup, tolerance: f64) -> Result<CircleFlowCheck> {
    if setup.r0 <= 3.0 * setup.epsilon {
        return Err(Error::invalid("r0", "must exceed 3 epsilon"));
    }
    let l = setup.half_width;
    let mesh = Mesh::new(Rectangle::new(-l, -l, l, l)?, setup.cells, setup.cells)?;
    let params = ModelParams::new(setup.epsilon, setup.tau, setup.end_time, 1.0)?;
    let scale = std::f64::consts::SQRT_2 * setup.epsilon;
    let phi0 = mesh.interpolate(|x, y| ((setup.r0 - (x * x + y * y).sqrt()) / scale).tanh());
    let mut forward = ForwardSolver::with_settings(&mesh, params, CgSettings::default(), MultiplierSettings::default())?;
    let zero = Field::zeros(&mesh);
    let target = if setup.conserve_mass {
        let m0 = crate::phase_field::positive_part_mass(&mesh, &phi0)?;
        Some(MassTarget::linear(m0, m0, params.end_time)?)
    } else {
        None
    };

    let mut samples = Vec::new();
    let mut phi = phi0;
    let exact_at = |t: f64| {
        if setup.conserve_mass {
            setup.r0
        } else {
            (setup.r0 * setup.r0 - 2.0 * t).max(0.0).sqrt()
        }
    };
    for step in 0..=params.steps {
        if step % setup.sample_every == 0 || step == params.steps {
            let t = params.time(step);
            let exact = exact_at(t);
            // stop sampling once the disk is under-resolved
            if exact <= 3.0 * setup.epsilon {
                break;
            }
            let contour = extract_zero_levelset(&mesh, &phi, t)?;
            if contour.is_empty() {
                break;
            }
            let center = centroid(&mesh, &phi)?;
            let (sum, count) = contour
                .polylines
                .iter()
                .flat_map(|p| p.points.iter())
                .fold((0.0, 0usize), |(s, c), q| (s + ((q[0] - center[0]).powi(2) + (q[1] - center[1]).powi(2)).sqrt(), c + 1));
            samples.push(RadiusSample {
                time: t,
                radius: sum / count as f64,
                exact,
            });
        }
        if step < params.steps {
            phi = match &target {
                None => forward.step_unconstrained(&phi, &zero),
                Some(mt) => forward
                    .step_constrained(&phi, &zero, mt.at(params.time(step + 1))?)
                    .map(|(f, _)| f),
            }
            .map_err(|e| e.at_step(step + 1))?;
        }
    }
    let (mut max_abs, mut max_rel) = (0.0f64, 0.0f64);
    for s in &samples {
        let abs = (s.radius - s.exact).abs();
        max_abs = max_abs.max(abs);
        max_rel = max_rel.max(abs / s.exact);
    }
    Ok(CircleFlowCheck {
        report: OracleReport::new(format!("mcf_circle_eps_{}", setup.epsilon), max_abs, max_rel, tolerance),
        samples,
    })
}

pub fn write_radius_csv(path: &Path, samples: &[RadiusSample]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "t,radius,exact")?;
    for s in samples {
        writeln!(f, "{},{},{}", s.time, s.radius, s.exact)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_solves_small_system() {
        let a = vec![4.0, 2.0, 0.0, 2.0, 5.0, 1.0, 0.0, 1.0, 3.0];
        let c = Cholesky::factor(a.clone(), 3);
        let x = c.solve(&[1.0, 2.0, 3.0]);
        for i in 0..3 {
            let r: f64 = (0..3).map(|k| a[i * 3 + k] * x[k]).sum();
            assert!((r - [1.0, 2.0, 3.0][i]).abs() < 1e-14);
        }
    }

    #[test]
    fn dense_model_matches_partition_of_unity() {
        let m = DenseModel::new(Rectangle::new(0.0, 0.0, 2.0, 3.0).unwrap(), 4, 6).unwrap();
        assert!((m.mass().iter().sum::<f64>() - 6.0).abs() < 1e-12);
        assert!(DenseModel::new(Rectangle::new(0.0, 0.0, 1.0, 1.0).unwrap(), 20, 20).is_err());
    }

    #[test]
    fn dense_uniform_recurrence() {
        let rect = Rectangle::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let m = DenseModel::new(rect, 4, 4).unwrap();
        let p = ModelParams::new(0.1, 1e-3, 2e-3, 0.01).unwrap();
        let t = dense_forward_oracle(&m, &p, &[0.5; 25], &vec![vec![0.0; 25]; 2], None).unwrap();
        assert!(t.states[1].iter().all(|v| (v - 0.5375).abs() < 1e-12));
    }
}
