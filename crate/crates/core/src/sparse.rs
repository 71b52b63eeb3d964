//! Jacobi-preconditioned conjugate gradients for `(M/τ + K) u = b`.

use crate::error::{Error, Result};
use crate::mesh::{csr_apply, Mesh};

/// The operator `diag(m/τ) + K` of every forward and adjoint step.
#[derive(Clone, Debug)]
pub struct ImexOperator<'a> {
    mesh: &'a Mesh,
    mass_over_tau: Vec<f64>,
    diagonal: Vec<f64>,
}

impl<'a> ImexOperator<'a> {
    pub fn new(mesh: &'a Mesh, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::invalid("tau", format!("must be positive, got {tau}")));
        }
        let mass_over_tau: Vec<f64> = mesh.lumped_mass().iter().map(|m| m / tau).collect();
        let k = mesh.stiffness();
        let diagonal = mass_over_tau
            .iter()
            .enumerate()
            .map(|(i, d)| d + k.get(i, i).copied().unwrap_or(0.0))
            .collect();
        Ok(Self {
            mesh,
            mass_over_tau,
            diagonal,
        })
    }

    pub fn mesh(&self) -> &'a Mesh {
        self.mesh
    }

    pub fn mass_over_tau(&self) -> &[f64] {
        &self.mass_over_tau
    }

    pub fn dim(&self) -> usize {
        self.mass_over_tau.len()
    }

    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        csr_apply(self.mesh.stiffness(), x, y);
        for ((yi, xi), d) in y.iter_mut().zip(x).zip(&self.mass_over_tau) {
            *yi += d * xi;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CgSettings {
    pub rtol: f64,
    /// `None` selects `10 * sqrt(n)` (at least 50).
    pub max_iter: Option<usize>,
}

impl Default for CgSettings {
    fn default() -> Self {
        Self {
            rtol: 1e-10,
            max_iter: None,
        }
    }
}

impl CgSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0 && self.rtol < 1.0) {
            return Err(Error::invalid("cg_rtol", format!("must lie in (0, 1), got {}", self.rtol)));
        }
        Ok(())
    }

    pub fn max_iter_for(&self, n: usize) -> usize {
        self.max_iter
            .unwrap_or_else(|| ((10.0 * (n as f64).sqrt()).ceil() as usize).max(50))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CgStats {
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Conjugate-gradient solver holding its scratch buffers.
#[derive(Clone, Debug, Default)]
pub struct CgSolver {
    settings: CgSettings,
    r: Vec<f64>,
    z: Vec<f64>,
    p: Vec<f64>,
    q: Vec<f64>,
}

impl CgSolver {
    pub fn new(settings: CgSettings) -> Result<Self> {
        settings.validate()?;
        Ok(Self {
            settings,
            ..Default::default()
        })
    }

    pub fn settings(&self) -> CgSettings {
        self.settings
    }

    /// Solves `op x = rhs`, starting from the current contents of `x`.
    pub fn solve(&mut self, op: &ImexOperator<'_>, rhs: &[f64], x: &mut [f64]) -> Result<CgStats> {
        let n = op.dim();
        assert_eq!(rhs.len(), n, "rhs dimension");
        assert_eq!(x.len(), n, "solution dimension");
        for buf in [&mut self.r, &mut self.z, &mut self.p, &mut self.q] {
            buf.resize(n, 0.0);
        }
        let rhs_norm = norm(rhs);
        if rhs_norm == 0.0 {
            x.iter_mut().for_each(|v| *v = 0.0);
            return Ok(CgStats {
                iterations: 0,
                relative_residual: 0.0,
            });
        }
        let tol = self.settings.rtol * rhs_norm;
        let max_iter = self.settings.max_iter_for(n);

        op.apply(x, &mut self.q);
        for i in 0..n {
            self.r[i] = rhs[i] - self.q[i];
        }
        let mut res = norm(&self.r);
        if res <= tol {
            return Ok(CgStats {
                iterations: 0,
                relative_residual: res / rhs_norm,
            });
        }
        let diag = &op.diagonal;
        for i in 0..n {
            self.z[i] = self.r[i] / diag[i];
        }
        self.p.copy_from_slice(&self.z);
        let mut rz = dot(&self.r, &self.z);

        for it in 1..=max_iter {
            op.apply(&self.p, &mut self.q);
            let alpha = rz / dot(&self.p, &self.q);
            for i in 0..n {
                x[i] += alpha * self.p[i];
                self.r[i] -= alpha * self.q[i];
            }
            res = norm(&self.r);
            if res <= tol {
                return Ok(CgStats {
                    iterations: it,
                    relative_residual: res / rhs_norm,
                });
            }
            for i in 0..n {
                self.z[i] = self.r[i] / diag[i];
            }
            let rz_new = dot(&self.r, &self.z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                self.p[i] = self.z[i] + beta * self.p[i];
            }
        }
        Err(Error::SolverDiverged {
            iterations: max_iter,
            residual: res / rhs_norm,
        })
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
