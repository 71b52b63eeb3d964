//! Structured P1 triangulation of a rectangle and its finite-element operators.
//!
//! Vertices are numbered row-major: vertex `(i, j)` with `0 <= i <= nx`,
//! `0 <= j <= ny` has index `j * (nx + 1) + i`. Every cell is split along
//! the diagonal from its lower-left to its upper-right corner.

use sprs::{CsMat, TriMat};

use crate::error::{Error, Result};

/// Axis-aligned rectangle `[x0, x1] x [y0, y1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rectangle {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rectangle {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let finite = [x0, y0, x1, y1].iter().all(|v| v.is_finite());
        if !finite || x1 <= x0 || y1 <= y0 {
            return Err(Error::DegenerateRectangle { x0, y0, x1, y1 });
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.x0 && p[0] <= self.x1 && p[1] >= self.y0 && p[1] <= self.y1
    }
}

/// Identifies a mesh by its geometry, so that fields read back from disk
/// remain compatible with a freshly built mesh of the same shape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeshKey {
    pub nx: usize,
    pub ny: usize,
    pub rect: Rectangle,
}

/// Nodal coefficient vector of a P1 function on a [`Mesh`].
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    key: MeshKey,
    values: Vec<f64>,
}

impl Field {
    pub fn from_values(mesh: &Mesh, values: Vec<f64>) -> Result<Self> {
        if values.len() != mesh.num_vertices() {
            return Err(Error::LengthMismatch {
                expected: mesh.num_vertices(),
                found: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index: i });
        }
        Ok(Self {
            key: mesh.key(),
            values,
        })
    }

    pub fn constant(mesh: &Mesh, c: f64) -> Self {
        Self {
            key: mesh.key(),
            values: vec![c; mesh.num_vertices()],
        }
    }

    pub fn zeros(mesh: &Mesh) -> Self {
        Self::constant(mesh, 0.0)
    }

    pub(crate) fn from_raw(key: MeshKey, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), (key.nx + 1) * (key.ny + 1));
        Self { key, values }
    }

    pub fn key(&self) -> MeshKey {
        self.key
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Pointwise map, keeping the owning mesh.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            key: self.key,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_on(&self, mesh: &Mesh) -> bool {
        self.key == mesh.key()
    }

    pub fn max_abs_diff(&self, other: &Field) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Structured triangulation with assembled P1 stiffness and lumped mass.
#[derive(Clone, Debug)]
pub struct Mesh {
    rect: Rectangle,
    nx: usize,
    ny: usize,
    vertices: Vec<[f64; 2]>,
    triangles: Vec<[usize; 3]>,
    stiffness: CsMat<f64>,
    lumped_mass: Vec<f64>,
}

impl Mesh {
    pub fn new(rect: Rectangle, nx: usize, ny: usize) -> Result<Self> {
        // re-validate: the fields are public and may have been set directly
        let rect = Rectangle::new(rect.x0, rect.y0, rect.x1, rect.y1)?;
        if nx == 0 || ny == 0 {
            return Err(Error::EmptyGrid { nx, ny });
        }
        let hx = rect.width() / nx as f64;
        let hy = rect.height() / ny as f64;
        let n = (nx + 1) * (ny + 1);

        let mut vertices = Vec::with_capacity(n);
        for j in 0..=ny {
            // pin the far edge exactly, avoiding x0 + nx * hx roundoff
            let y = if j == ny { rect.y1 } else { rect.y0 + j as f64 * hy };
            for i in 0..=nx {
                let x = if i == nx { rect.x1 } else { rect.x0 + i as f64 * hx };
                vertices.push([x, y]);
            }
        }

        let idx = |i: usize, j: usize| j * (nx + 1) + i;
        let mut triangles = Vec::with_capacity(2 * nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                let (v00, v10, v01, v11) = (idx(i, j), idx(i + 1, j), idx(i, j + 1), idx(i + 1, j + 1));
                triangles.push([v00, v10, v11]);
                triangles.push([v00, v11, v01]);
            }
        }

        let mut lumped_mass = vec![0.0; n];
        let mut tri = TriMat::with_capacity((n, n), 9 * triangles.len());
        for t in &triangles {
            let p = t.map(|v| vertices[v]);
            let (area, grads) = p1_gradients(p);
            for a in 0..3 {
                lumped_mass[t[a]] += area / 3.0;
                for b in 0..3 {
                    let k = area * (grads[a][0] * grads[b][0] + grads[a][1] * grads[b][1]);
                    tri.add_triplet(t[a], t[b], k);
                }
            }
        }
        // to_csr sums duplicate triplets
        let stiffness: CsMat<f64> = tri.to_csr();

        Ok(Self {
            rect,
            nx,
            ny,
            vertices,
            triangles,
            stiffness,
            lumped_mass,
        })
    }

    pub fn rect(&self) -> Rectangle {
        self.rect
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn hx(&self) -> f64 {
        self.rect.width() / self.nx as f64
    }

    pub fn hy(&self) -> f64 {
        self.rect.height() / self.ny as f64
    }

    pub fn key(&self) -> MeshKey {
        MeshKey {
            nx: self.nx,
            ny: self.ny,
            rect: self.rect,
        }
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    pub fn vertex(&self, i: usize) -> [f64; 2] {
        self.vertices[i]
    }

    /// Index of grid vertex `(i, j)`.
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * (self.nx + 1) + i
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn stiffness(&self) -> &CsMat<f64> {
        &self.stiffness
    }

    pub fn lumped_mass(&self) -> &[f64] {
        &self.lumped_mass
    }

    pub fn area(&self) -> f64 {
        self.rect.area()
    }

    pub fn is_boundary(&self, v: usize) -> bool {
        let (i, j) = (v % (self.nx + 1), v / (self.nx + 1));
        i == 0 || j == 0 || i == self.nx || j == self.ny
    }

    /// `y = K x`.
    pub fn apply_stiffness(&self, x: &[f64], y: &mut [f64]) {
        csr_apply(&self.stiffness, x, y);
    }

    /// Lagrange interpolant of `f`.
    pub fn interpolate(&self, f: impl Fn(f64, f64) -> f64) -> Field {
        let values = self.vertices.iter().map(|&[x, y]| f(x, y)).collect();
        Field::from_raw(self.key(), values)
    }

    /// Discrete L² pairing `sum_i m_i a_i b_i`.
    pub fn lumped_inner(&self, a: &Field, b: &Field) -> Result<f64> {
        self.check(a)?;
        self.check(b)?;
        Ok(self.lumped_dot(a.values(), b.values()))
    }

    pub(crate) fn lumped_dot(&self, a: &[f64], b: &[f64]) -> f64 {
        self.lumped_mass
            .iter()
            .zip(a.iter().zip(b))
            .map(|(m, (x, y))| m * x * y)
            .sum()
    }

    pub fn check(&self, f: &Field) -> Result<()> {
        if f.key() != self.key() {
            return Err(Error::MeshMismatch);
        }
        Ok(())
    }

    /// Constant gradient of a P1 field on triangle `t`.
    pub fn triangle_gradient(&self, t: usize, values: &[f64]) -> [f64; 2] {
        let tri = self.triangles[t];
        let (_, grads) = p1_gradients(tri.map(|v| self.vertices[v]));
        let mut g = [0.0; 2];
        for a in 0..3 {
            g[0] += values[tri[a]] * grads[a][0];
            g[1] += values[tri[a]] * grads[a][1];
        }
        g
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        p1_gradients(self.triangles[t].map(|v| self.vertices[v])).0
    }
}

/// Area and hat-function gradients of a triangle.
fn p1_gradients(p: [[f64; 2]; 3]) -> (f64, [[f64; 2]; 3]) {
    let det = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
    let area = 0.5 * det.abs();
    let mut grads = [[0.0; 2]; 3];
    for a in 0..3 {
        let (b, c) = ((a + 1) % 3, (a + 2) % 3);
        // grad of hat a is perpendicular to the opposite edge b-c
        grads[a] = [(p[b][1] - p[c][1]) / det, (p[c][0] - p[b][0]) / det];
    }
    (area, grads)
}

pub(crate) fn csr_apply(mat: &CsMat<f64>, x: &[f64], y: &mut [f64]) {
    for (row, vec) in mat.outer_iterator().enumerate() {
        let mut acc = 0.0;
        for (col, &v) in vec.iter() {
            acc += v * x[col];
        }
        y[row] = acc;
    }
}
