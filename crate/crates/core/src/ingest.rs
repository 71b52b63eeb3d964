//! Building diffuse-interface fields from shapes and rasters, initial
//! controls, and the built-in datasets.

use std::path::Path;

use crate::adjoint::Observation;
use crate::error::{Error, Result};
use crate::forward::{Control, ForwardSolver, MultiplierSettings};
use crate::mesh::{Field, Mesh, Rectangle};
use crate::optimize::TrackingProblem;
use crate::phase_field::ModelParams;
use crate::sparse::CgSettings;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Axis {
    X,
    Y,
}

/// `amplitude * sin(frequency * x_axis)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SineTerm {
    pub amplitude: f64,
    pub frequency: f64,
    pub axis: Axis,
}

/// `(x/scale_x − cx)² + (y − cy)² − r² + Σ bⱼ sin(ωⱼ x_kⱼ)`; the region is
/// where this is negative.
#[derive(Clone, Debug, PartialEq)]
pub struct ImplicitCurve {
    pub scale_x: f64,
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub terms: Vec<SineTerm>,
}

impl ImplicitCurve {
    pub fn value(&self, x: f64, y: f64) -> f64 {
        let u = x / self.scale_x - self.cx;
        let v = y - self.cy;
        let mut f = u * u + v * v - self.radius * self.radius;
        for t in &self.terms {
            let s = match t.axis {
                Axis::X => x,
                Axis::Y => y,
            };
            f += t.amplitude * (t.frequency * s).sin();
        }
        f
    }
}

fn sine(amplitude: f64, frequency: f64, axis: Axis) -> SineTerm {
    SineTerm {
        amplitude,
        frequency,
        axis,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Region {
    Circle { center: [f64; 2], radius: f64 },
    Implicit(ImplicitCurve),
    /// Simple polygon, vertices in order, not repeated at the end.
    Polygon(Vec<[f64; 2]>),
    Union(Vec<Region>),
}

impl Region {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        match self {
            Region::Circle { center, radius } => (p[0] - center[0]).hypot(p[1] - center[1]) < *radius,
            Region::Implicit(c) => c.value(p[0], p[1]) < 0.0,
            Region::Polygon(v) => point_in_polygon(v, p),
            Region::Union(parts) => parts.iter().any(|r| r.contains(p)),
        }
    }

    /// Signed distance to the boundary, positive inside. Implicit curves
    /// have none; unions take the maximum over parts, which is exact
    /// outside and for disjoint parts.
    pub fn signed_distance(&self, p: [f64; 2]) -> Option<f64> {
        match self {
            Region::Circle { center, radius } => Some(radius - (p[0] - center[0]).hypot(p[1] - center[1])),
            Region::Implicit(_) => None,
            Region::Polygon(v) => {
                let d = (0..v.len())
                    .map(|i| segment_distance(p, v[i], v[(i + 1) % v.len()]))
                    .fold(f64::INFINITY, f64::min);
                Some(if point_in_polygon(v, p) { d } else { -d })
            }
            Region::Union(parts) => parts
                .iter()
                .map(|r| r.signed_distance(p))
                .try_fold(f64::NEG_INFINITY, |acc, d| d.map(|d| acc.max(d))),
        }
    }
}

fn point_in_polygon(v: &[[f64; 2]], p: [f64; 2]) -> bool {
    let mut inside = false;
    let mut j = v.len() - 1;
    for i in 0..v.len() {
        let (a, b) = (v[i], v[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) && p[0] < (b[0] - a[0]) * (p[1] - a[1]) / (b[1] - a[1]) + a[0] {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let s = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p[0] - a[0] - s * dx).hypot(p[1] - a[1] - s * dy)
}

fn check_boundary(mesh: &Mesh, inside: impl Fn(usize) -> bool) -> Result<()> {
    if (0..mesh.num_vertices()).any(|v| mesh.is_boundary(v) && inside(v)) {
        return Err(Error::GeometryEscapesDomain);
    }
    Ok(())
}

/// `+1` at nodes inside `region`, `−1` elsewhere.
pub fn indicator_field(mesh: &Mesh, region: &Region) -> Result<Field> {
    let values: Vec<f64> = mesh
        .vertices()
        .iter()
        .map(|&p| if region.contains(p) { 1.0 } else { -1.0 })
        .collect();
    check_boundary(mesh, |v| values[v] > 0.0)?;
    Field::from_values(mesh, values)
}

/// `tanh(d / (√2 ε))` with `d` the signed distance to the region boundary.
pub fn tanh_profile_field(mesh: &Mesh, region: &Region, epsilon: f64) -> Result<Field> {
    let scale = std::f64::consts::SQRT_2 * epsilon;
    let mut values = Vec::with_capacity(mesh.num_vertices());
    for &p in mesh.vertices() {
        let d = region
            .signed_distance(p)
            .ok_or_else(|| Error::invalid("region", "no signed distance for implicit curves"))?;
        values.push((d / scale).tanh());
    }
    check_boundary(mesh, |v| values[v] > 0.0)?;
    Field::from_values(mesh, values)
}

/// Runs `n_steps` unforced, unconstrained steps. The step length is
/// `min(τ, ε²/10)` so that coarse time grids still smooth stably.
pub fn smooth_indicator(mesh: &Mesh, field: &Field, params: &ModelParams, n_steps: usize) -> Result<Field> {
    mesh.check(field)?;
    if n_steps == 0 {
        return Ok(field.clone());
    }
    let tau = params.tau.min(0.1 * params.epsilon * params.epsilon);
    let smoothing = ModelParams::new(params.epsilon, tau, tau * n_steps as f64, params.theta)?;
    let mut fwd = ForwardSolver::new(mesh, smoothing)?;
    let zero = Field::zeros(mesh);
    let mut phi = field.clone();
    for _ in 0..n_steps {
        phi = fwd.step_unconstrained(&phi, &zero)?;
    }
    Ok(phi)
}

/// Grayscale image covering a rectangle; row 0 is the top edge.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterImage {
    pub width: usize,
    pub height: usize,
    pub intensities: Vec<f64>,
    pub rect: Rectangle,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, intensities: Vec<f64>, rect: Rectangle) -> Result<Self> {
        if width == 0 || height == 0 || intensities.len() != width * height {
            return Err(Error::Shape(format!(
                "{width}x{height} raster with {} intensities",
                intensities.len()
            )));
        }
        if let Some(i) = intensities.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("intensity", format!("pixel {i} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            intensities,
            rect,
        })
    }

    /// Intensity of the pixel containing `p`, clamped to the image.
    pub fn sample(&self, p: [f64; 2]) -> f64 {
        let r = self.rect;
        let col = ((p[0] - r.x0) / r.width() * self.width as f64).floor();
        let row = ((r.y1 - p[1]) / r.height() * self.height as f64).floor();
        let col = (col.max(0.0) as usize).min(self.width - 1);
        let row = (row.max(0.0) as usize).min(self.height - 1);
        self.intensities[row * self.width + col]
    }
}

/// `+1` where the nearest pixel is brighter than `threshold`.
pub fn raster_indicator(mesh: &Mesh, image: &RasterImage, threshold: f64) -> Result<Field> {
    let values: Vec<f64> = mesh
        .vertices()
        .iter()
        .map(|&p| if image.sample(p) > threshold { 1.0 } else { -1.0 })
        .collect();
    check_boundary(mesh, |v| values[v] > 0.0)?;
    Field::from_values(mesh, values)
}

/// Reads a plain (P2) or raw (P5) PGM file onto `rect`.
pub fn read_pgm(path: &Path, rect: Rectangle) -> Result<RasterImage> {
    let bytes = std::fs::read(path)?;
    let bad = |message: &str| Error::Format {
        path: path.to_path_buf(),
        message: message.to_string(),
    };
    let mut pos = 0;
    let token = |pos: &mut usize| -> Option<String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        (start < *pos).then(|| String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    let magic = token(&mut pos).ok_or_else(|| bad("empty file"))?;
    let number = |pos: &mut usize, what: &str| -> Result<usize> {
        token(pos)
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad(&format!("bad {what}")))
    };
    let width = number(&mut pos, "width")?;
    let height = number(&mut pos, "height")?;
    let maxval = number(&mut pos, "maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(bad("maxval must be in 1..=65535"));
    }
    let count = width * height;
    let raw: Vec<usize> = match magic.as_str() {
        "P2" => (0..count)
            .map(|_| number(&mut pos, "pixel value"))
            .collect::<Result<_>>()?,
        "P5" => {
            // exactly one whitespace byte separates the header from the data
            pos += 1;
            let wide = maxval > 255;
            let need = count * if wide { 2 } else { 1 };
            let data = bytes.get(pos..pos + need).ok_or_else(|| bad("truncated pixel data"))?;
            if wide {
                data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as usize).collect()
            } else {
                data.iter().map(|&b| b as usize).collect()
            }
        }
        _ => return Err(bad("expected P2 or P5 magic")),
    };
    if raw.iter().any(|&v| v > maxval) {
        return Err(bad("pixel value exceeds maxval"));
    }
    let intensities = raw.into_iter().map(|v| v as f64 / maxval as f64).collect();
    RasterImage::new(width, height, intensities, rect)
}

/// Writes an 8-bit plain PGM.
pub fn write_pgm(path: &Path, image: &RasterImage) -> Result<()> {
    use std::fmt::Write as _;
    let mut s = format!("P2\n{} {}\n255\n", image.width, image.height);
    for row in image.intensities.chunks(image.width) {
        let line: Vec<String> = row.iter().map(|v| ((v * 255.0).round() as u8).to_string()).collect();
        let _ = writeln!(s, "{}", line.join(" "));
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Vertex gradients: per-triangle gradients averaged with area weights.
pub fn nodal_gradient(mesh: &Mesh, field: &Field) -> Result<Vec<[f64; 2]>> {
    mesh.check(field)?;
    let mut grad = vec![[0.0; 2]; mesh.num_vertices()];
    let mut weight = vec![0.0; mesh.num_vertices()];
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let g = mesh.triangle_gradient(t, field.values());
        let a = mesh.triangle_area(t);
        for &v in tri {
            grad[v][0] += a * g[0];
            grad[v][1] += a * g[1];
            weight[v] += a;
        }
    }
    for (g, w) in grad.iter_mut().zip(&weight) {
        g[0] /= w;
        g[1] /= w;
    }
    Ok(grad)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitialControl {
    Zero,
    Constant(f64),
    /// Transport guess `η = −c·∇φ` recorded along one forward pass.
    Feedback([f64; 2]),
}

/// Builds the starting control of the descent loop. The feedback mode
/// steps the state once through `[0, T]`, setting `ηⁿ` from `φⁿ` before
/// each step (under the mass constraint if the problem has one), and
/// returns the recorded slices as a fixed control.
///
/// With `φ = +1` inside and forcing entering as `+c_G η / ε`, a positive
/// `η` grows the phase, so the guess that advects the shape along `c` is
/// `−c·∇φ`: positive on the leading edge, negative on the trailing edge.
pub fn make_initial_control(
    problem: &TrackingProblem,
    mode: InitialControl,
    cg: CgSettings,
    multiplier: MultiplierSettings,
) -> Result<Control> {
    let (mesh, params) = (&problem.mesh, problem.params);
    match mode {
        InitialControl::Zero => Ok(Control::zeros(mesh, params.steps)),
        InitialControl::Constant(c) => {
            if !c.is_finite() {
                return Err(Error::invalid("initial_control", "constant must be finite"));
            }
            Ok(Control::constant(mesh, params.steps, c))
        }
        InitialControl::Feedback(c) => {
            let target = problem.constrained.then(|| problem.mass_target()).transpose()?;
            let mut fwd = ForwardSolver::with_settings(mesh, params, cg, multiplier)?;
            let mut phi = problem.phi0.clone();
            let mut slices = Vec::with_capacity(params.steps);
            for n in 0..params.steps {
                let g = nodal_gradient(mesh, &phi)?;
                let eta = Field::from_values(mesh, g.iter().map(|g| -(c[0] * g[0] + c[1] * g[1])).collect())?;
                phi = match &target {
                    None => fwd.step_unconstrained(&phi, &eta),
                    Some(t) => fwd.step_constrained(&phi, &eta, t.at(params.time(n + 1))?).map(|(f, _)| f),
                }
                .map_err(|e| e.at_step(n + 1))?;
                slices.push(eta);
            }
            Ok(Control { slices })
        }
    }
}

/// Cell counts giving about `target` vertices with near-square cells.
pub fn grid_for_dofs(rect: Rectangle, target: usize) -> (usize, usize) {
    let h = (rect.area() / target as f64).sqrt();
    let nx = ((rect.width() / h).round() as usize).max(2) - 1;
    let ny = ((rect.height() / h).round() as usize).max(2) - 1;
    (nx.max(1), ny.max(1))
}

/// Geometry and time horizon of a built-in experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: &'static str,
    pub rect: Rectangle,
    pub initial: Region,
    pub target: Region,
    pub end_time: f64,
    pub initial_control: InitialControl,
    /// Invented geometry standing in for data that is not distributed.
    pub stand_in: bool,
}

pub const DATASET_NAMES: [&str; 4] = ["translated_circle", "multicell_pair", "multicell_split", "synthetic_cell_like"];

/// Default number of vertices of the built-in problems.
pub const DEFAULT_DOFS: usize = 8321;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetOptions {
    pub cells: Option<(usize, usize)>,
    pub epsilon: f64,
    pub tau: f64,
    pub end_time: Option<f64>,
    pub theta: f64,
    pub smoothing_steps: usize,
    pub constrained: bool,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self {
            cells: None,
            epsilon: 0.1,
            tau: 1e-3,
            end_time: None,
            theta: 0.01,
            smoothing_steps: 10,
            constrained: true,
        }
    }
}

fn implicit(scale_x: f64, cx: f64, cy: f64, radius: f64, terms: Vec<SineTerm>) -> Region {
    Region::Implicit(ImplicitCurve {
        scale_x,
        cx,
        cy,
        radius,
        terms,
    })
}

pub fn builtin_dataset(name: &str) -> Result<Dataset> {
    use Axis::{X, Y};
    let ds = match name {
        "translated_circle" => Dataset {
            name: "translated_circle",
            rect: Rectangle::new(-3.0, -3.0, 6.0, 3.0)?,
            initial: Region::Circle { center: [0.0, 0.0], radius: 1.0 },
            target: Region::Circle { center: [3.0, 0.0], radius: 1.0 },
            end_time: 0.8,
            initial_control: InitialControl::Zero,
            stand_in: false,
        },
        "multicell_pair" => Dataset {
            name: "multicell_pair",
            rect: Rectangle::new(-2.0, -2.0, 8.0, 2.0)?,
            initial: Region::Union(vec![
                implicit(1.0, 0.0, 0.0, 0.8, vec![sine(0.1, 4.0, X), sine(0.1, 3.0, Y)]),
                implicit(2.0, 2.0, 0.6, 0.7, vec![sine(0.1, 2.5, X), sine(0.3, 2.0, Y)]),
            ]),
            target: Region::Union(vec![
                implicit(1.0, 0.4, 0.5, 0.8, vec![sine(0.1, 6.0, X), sine(0.1, 7.0, Y)]),
                implicit(2.0, 2.5, 1.0, 0.7, vec![sine(0.1, 3.5, X), sine(0.1, 1.5, Y)]),
            ]),
            end_time: 0.4,
            initial_control: InitialControl::Constant(1.0),
            stand_in: false,
        },
        "multicell_split" => Dataset {
            name: "multicell_split",
            rect: Rectangle::new(-2.0, -2.5, 6.3, 2.5)?,
            initial: Region::Union(vec![
                implicit(1.0, 0.0, 0.0, 0.9, vec![sine(0.1, 4.5, X), sine(0.11, 3.0, Y)]),
                implicit(1.0, 5.0, 0.0, 0.7, vec![sine(0.1, 2.5, X), sine(0.3, 2.0, Y)]),
            ]),
            target: Region::Union(vec![
                implicit(1.0, 0.35, 0.7, 0.8, vec![sine(0.1, 6.0, X), sine(0.1, 7.0, Y)]),
                implicit(1.0, 0.3, 1.1, 0.7, vec![sine(-0.1, 3.5, X), sine(0.1, 1.5, Y)]),
            ]),
            end_time: 0.4,
            initial_control: InitialControl::Constant(1.0),
            stand_in: false,
        },
        "synthetic_cell_like" => Dataset {
            name: "synthetic_cell_like",
            rect: Rectangle::new(0.0, 0.0, 8.0, 6.0)?,
            initial: implicit(1.4, 2.0, 3.0, 0.9, vec![sine(0.08, 3.0, X), sine(0.06, 4.0, Y)]),
            target: implicit(1.3, 3.4, 3.3, 0.95, vec![sine(0.07, 2.5, Y), sine(0.05, 5.0, X)]),
            end_time: 0.4,
            initial_control: InitialControl::Zero,
            stand_in: true,
        },
        other => return Err(Error::UnknownDataset(other.to_string())),
    };
    Ok(ds)
}

impl Dataset {
    pub fn default_cells(&self) -> (usize, usize) {
        grid_for_dofs(self.rect, DEFAULT_DOFS)
    }

    pub fn mesh(&self, opts: &DatasetOptions) -> Result<Mesh> {
        let (nx, ny) = opts.cells.unwrap_or_else(|| self.default_cells());
        Mesh::new(self.rect, nx, ny)
    }

    /// Smoothed initial and target indicators on `mesh`.
    pub fn fields(&self, mesh: &Mesh, params: &ModelParams, smoothing_steps: usize) -> Result<(Field, Field)> {
        let phi0 = smooth_indicator(mesh, &indicator_field(mesh, &self.initial)?, params, smoothing_steps)?;
        let obs = smooth_indicator(mesh, &indicator_field(mesh, &self.target)?, params, smoothing_steps)?;
        Ok((phi0, obs))
    }

    pub fn problem(&self, opts: &DatasetOptions) -> Result<TrackingProblem> {
        let mesh = self.mesh(opts)?;
        let end = opts.end_time.unwrap_or(self.end_time);
        let params = ModelParams::new(opts.epsilon, opts.tau, end, opts.theta)?;
        let (phi0, obs) = self.fields(&mesh, &params, opts.smoothing_steps)?;
        let observations = vec![Observation {
            step: params.steps,
            field: obs,
        }];
        TrackingProblem::new(mesh, params, phi0, observations, opts.constrained)
    }
}
