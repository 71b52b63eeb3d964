//! Run configuration, field files and CSV reports.
//!
//! Config files are flat `key = value` lines; `#` starts a comment.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::adjoint::Observation;
use crate::analysis::{centroid, centroid_speed, control_extrema, extract_zero_levelset, fidelity_history, mass_area};
use crate::error::{Error, Result};
use crate::forward::{Control, MultiplierSettings, StateTrajectory};
use crate::ingest::{
    builtin_dataset, grid_for_dofs, raster_indicator, read_pgm, smooth_indicator, InitialControl,
    DEFAULT_DOFS,
};
use crate::mesh::{Field, Mesh, Rectangle};
use crate::optimize::{OptimizationConfig, OptimizationReport, TrackingProblem};
use crate::phase_field::{MassTarget, ModelParams};
use crate::sparse::CgSettings;

const KNOWN_KEYS: &[&str] = &[
    "dataset",
    "domain",
    "nx",
    "ny",
    "epsilon",
    "tau",
    "T",
    "theta",
    "alpha",
    "tol_J",
    "tol_eta",
    "K_max",
    "lambda_tol",
    "cg_rtol",
    "constraint",
    "initial_control",
    "initial_field",
    "observation_fields",
    "observation_times",
    "threshold",
    "smoothing_steps",
    "output_dir",
    "snapshot_stride",
    "full_dump",
];

#[derive(Clone, Debug, PartialEq)]
pub enum Source {
    Dataset(String),
    Files {
        domain: Rectangle,
        initial: PathBuf,
        observations: Vec<PathBuf>,
        times: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub source: Source,
    pub nx: usize,
    pub ny: usize,
    pub epsilon: f64,
    pub tau: f64,
    pub end_time: f64,
    pub theta: f64,
    pub alpha: f64,
    pub tol_cost: f64,
    pub tol_update: f64,
    pub max_iterations: usize,
    pub lambda_tol: f64,
    pub cg_rtol: f64,
    pub constrained: bool,
    pub initial_control: InitialControl,
    pub threshold: f64,
    pub smoothing_steps: usize,
    pub output_dir: PathBuf,
    pub snapshot_stride: usize,
    pub full_dump: bool,
}

fn config_err(key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        message: message.into(),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| config_err(key, format!("cannot parse `{raw}` as a number")))
}

fn parse_list(key: &str, raw: &str) -> Result<Vec<f64>> {
    raw.split(',').map(|s| parse_num(key, s.trim())).collect()
}

fn parse_bool(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(config_err(key, format!("expected on/off, got `{raw}`"))),
    }
}

/// `zero`, `constant:<c>` or `feedback:<cx>,<cy>`.
pub fn parse_initial_control(raw: &str) -> Result<InitialControl> {
    let key = "initial_control";
    let (mode, arg) = raw.split_once(':').map_or((raw, None), |(m, a)| (m, Some(a.trim())));
    match (mode.trim(), arg) {
        ("zero", None) => Ok(InitialControl::Zero),
        ("constant", Some(a)) => Ok(InitialControl::Constant(parse_num(key, a)?)),
        ("feedback", Some(a)) => match parse_list(key, a)?.as_slice() {
            [cx, cy] => Ok(InitialControl::Feedback([*cx, *cy])),
            _ => Err(config_err(key, "feedback needs two components")),
        },
        _ => Err(config_err(key, format!("expected zero, constant:<c> or feedback:<cx>,<cy>, got `{raw}`"))),
    }
}

fn format_initial_control(c: InitialControl) -> String {
    match c {
        InitialControl::Zero => "zero".into(),
        InitialControl::Constant(v) => format!("constant:{v}"),
        InitialControl::Feedback([x, y]) => format!("feedback:{x},{y}"),
    }
}

/// Splits config text into key/value pairs, rejecting unknown and
/// repeated keys.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| config_err(&format!("line {}", lineno + 1), "expected key = value"))?;
        let (k, v) = (k.trim(), v.trim());
        if !KNOWN_KEYS.contains(&k) {
            return Err(config_err(k, "unknown key"));
        }
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(config_err(k, "given more than once"));
        }
    }
    Ok(map)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(parse_pairs(text)?)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Applies defaults (standard optimisation settings, `ε = 0.1`,
    /// `τ = 10⁻³`, dataset geometry) and validates everything.
    pub fn from_pairs(map: BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| map.get(k).map(String::as_str);
        let num = |k: &str, default: f64| -> Result<f64> { get(k).map_or(Ok(default), |v| parse_num(k, v)) };
        let count = |k: &str| -> Result<Option<usize>> { get(k).map(|v| parse_num(k, v)).transpose() };

        let (source, domain, default_end, default_control) = match (get("dataset"), get("initial_field")) {
            (Some(_), Some(_)) => return Err(config_err("initial_field", "cannot be combined with `dataset`")),
            (Some(name), None) => {
                if get("domain").is_some() {
                    return Err(config_err("domain", "fixed by the dataset"));
                }
                let ds = builtin_dataset(name)?;
                (Source::Dataset(name.to_string()), ds.rect, Some(ds.end_time), ds.initial_control)
            }
            (None, Some(initial)) => {
                let d = parse_list("domain", get("domain").ok_or_else(|| config_err("domain", "required with file inputs"))?)?;
                let [x0, y0, x1, y1] = d[..] else {
                    return Err(config_err("domain", "expected x0,y0,x1,y1"));
                };
                let domain = Rectangle::new(x0, y0, x1, y1)?;
                let observations: Vec<PathBuf> = get("observation_fields")
                    .ok_or_else(|| config_err("observation_fields", "required with file inputs"))?
                    .split(',')
                    .map(|s| PathBuf::from(s.trim()))
                    .collect();
                let times = parse_list(
                    "observation_times",
                    get("observation_times").ok_or_else(|| config_err("observation_times", "required with file inputs"))?,
                )?;
                if times.len() != observations.len() {
                    return Err(config_err("observation_times", "one time per observation field"));
                }
                let end = times.last().copied();
                let source = Source::Files {
                    domain,
                    initial: PathBuf::from(initial),
                    observations,
                    times,
                };
                (source, domain, end, InitialControl::Zero)
            }
            (None, None) => return Err(config_err("dataset", "give a dataset name or initial_field")),
        };

        let (dnx, dny) = grid_for_dofs(domain, DEFAULT_DOFS);
        let cfg = Self {
            source,
            nx: count("nx")?.unwrap_or(dnx),
            ny: count("ny")?.unwrap_or(dny),
            epsilon: num("epsilon", 0.1)?,
            tau: num("tau", 1e-3)?,
            end_time: match get("T") {
                Some(v) => parse_num("T", v)?,
                None => default_end.ok_or_else(|| config_err("T", "required"))?,
            },
            theta: num("theta", 0.01)?,
            alpha: num("alpha", 0.01)?,
            tol_cost: num("tol_J", 1e-4)?,
            tol_update: num("tol_eta", 1e-4)?,
            max_iterations: count("K_max")?.unwrap_or(3500),
            lambda_tol: num("lambda_tol", 1e-8)?,
            cg_rtol: num("cg_rtol", 1e-10)?,
            constrained: get("constraint").map_or(Ok(true), |v| parse_bool("constraint", v))?,
            initial_control: get("initial_control").map_or(Ok(default_control), parse_initial_control)?,
            threshold: num("threshold", 0.5)?,
            smoothing_steps: count("smoothing_steps")?.unwrap_or(10),
            output_dir: PathBuf::from(get("output_dir").unwrap_or("out")),
            snapshot_stride: count("snapshot_stride")?.unwrap_or(20),
            full_dump: get("full_dump").map_or(Ok(false), |v| parse_bool("full_dump", v))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 {
            return Err(Error::EmptyGrid { nx: self.nx, ny: self.ny });
        }
        let params = self.params()?;
        self.optimization().validate()?;
        CgSettings {
            rtol: self.cg_rtol,
            max_iter: None,
        }
        .validate()?;
        if !(self.lambda_tol > 0.0) {
            return Err(Error::invalid("lambda_tol", "must be positive"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::invalid("threshold", "must lie in (0, 1)"));
        }
        if self.snapshot_stride == 0 {
            return Err(Error::invalid("snapshot_stride", "must be at least 1"));
        }
        if let Source::Files { times, .. } = &self.source {
            for &t in times {
                if params.step_of(t).is_none_or(|s| s == 0) {
                    return Err(Error::ObservationOffGrid { time: t, tau: self.tau });
                }
            }
            if times.last().copied() != Some(self.end_time) {
                return Err(config_err("observation_times", "the last observation must be at T"));
            }
        }
        Ok(())
    }

    pub fn params(&self) -> Result<ModelParams> {
        ModelParams::new(self.epsilon, self.tau, self.end_time, self.theta)
    }

    pub fn optimization(&self) -> OptimizationConfig {
        OptimizationConfig {
            alpha: self.alpha,
            tol_cost: self.tol_cost,
            tol_update: self.tol_update,
            max_iterations: self.max_iterations,
            cg: CgSettings {
                rtol: self.cg_rtol,
                max_iter: None,
            },
            multiplier: MultiplierSettings {
                lambda_tol: self.lambda_tol,
                ..Default::default()
            },
        }
    }

    /// Assembles the mesh, initial state and observations.
    pub fn problem(&self) -> Result<TrackingProblem> {
        let params = self.params()?;
        match &self.source {
            Source::Dataset(name) => {
                let ds = builtin_dataset(name)?;
                let mesh = Mesh::new(ds.rect, self.nx, self.ny)?;
                let (phi0, obs) = ds.fields(&mesh, &params, self.smoothing_steps)?;
                let observations = vec![Observation {
                    step: params.steps,
                    field: obs,
                }];
                TrackingProblem::new(mesh, params, phi0, observations, self.constrained)
            }
            Source::Files {
                domain,
                initial,
                observations,
                times,
            } => {
                let mesh = Mesh::new(*domain, self.nx, self.ny)?;
                let phi0 = self.load_input(&mesh, &params, initial)?;
                let observations = observations
                    .iter()
                    .zip(times)
                    .map(|(p, &t)| Observation::at_time(&params, t, self.load_input(&mesh, &params, p)?))
                    .collect::<Result<Vec<_>>>()?;
                TrackingProblem::new(mesh, params, phi0, observations, self.constrained)
            }
        }
    }

    /// PHF1 fields are used as stored; PGM rasters are thresholded and
    /// smoothed.
    fn load_input(&self, mesh: &Mesh, params: &ModelParams, path: &Path) -> Result<Field> {
        let is_pgm = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
        if is_pgm {
            let image = read_pgm(path, mesh.rect())?;
            let sharp = raster_indicator(mesh, &image, self.threshold)?;
            return smooth_indicator(mesh, &sharp, params, self.smoothing_steps);
        }
        let file = read_field(path)?;
        if file.nx != mesh.nx() || file.ny != mesh.ny() || file.rect != mesh.rect() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("field is on a {}x{} grid over {:?}, config expects {}x{} over {:?}", file.nx, file.ny, file.rect, mesh.nx(), mesh.ny(), mesh.rect()),
            });
        }
        Field::from_values(mesh, file.values)
    }

    /// The config as key = value text, with every default spelled out.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        match &self.source {
            Source::Dataset(name) => kv("dataset", name.clone()),
            Source::Files {
                domain,
                initial,
                observations,
                times,
            } => {
                kv("domain", format!("{},{},{},{}", domain.x0, domain.y0, domain.x1, domain.y1));
                kv("initial_field", initial.display().to_string());
                let obs: Vec<String> = observations.iter().map(|p| p.display().to_string()).collect();
                kv("observation_fields", obs.join(","));
                let t: Vec<String> = times.iter().map(|t| t.to_string()).collect();
                kv("observation_times", t.join(","));
            }
        }
        kv("nx", self.nx.to_string());
        kv("ny", self.ny.to_string());
        kv("epsilon", self.epsilon.to_string());
        kv("tau", self.tau.to_string());
        kv("T", self.end_time.to_string());
        kv("theta", self.theta.to_string());
        kv("alpha", self.alpha.to_string());
        kv("tol_J", self.tol_cost.to_string());
        kv("tol_eta", self.tol_update.to_string());
        kv("K_max", self.max_iterations.to_string());
        kv("lambda_tol", self.lambda_tol.to_string());
        kv("cg_rtol", self.cg_rtol.to_string());
        kv("constraint", if self.constrained { "on" } else { "off" }.into());
        kv("initial_control", format_initial_control(self.initial_control));
        kv("threshold", self.threshold.to_string());
        kv("smoothing_steps", self.smoothing_steps.to_string());
        kv("output_dir", self.output_dir.display().to_string());
        kv("snapshot_stride", self.snapshot_stride.to_string());
        kv("full_dump", self.full_dump.to_string());
        s
    }
}

/// Contents of a PHF1 field file.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldFile {
    pub nx: usize,
    pub ny: usize,
    pub rect: Rectangle,
    pub epsilon: f64,
    pub time: f64,
    pub values: Vec<f64>,
}

impl FieldFile {
    pub fn mesh(&self) -> Result<Mesh> {
        Mesh::new(self.rect, self.nx, self.ny)
    }

    pub fn field(&self, mesh: &Mesh) -> Result<Field> {
        Field::from_values(mesh, self.values.clone())
    }
}

pub fn write_field(path: &Path, mesh: &Mesh, field: &Field, epsilon: f64, time: f64) -> Result<()> {
    mesh.check(field)?;
    let r = mesh.rect();
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "PHF1")?;
    writeln!(w, "{} {} {:.16e} {:.16e} {:.16e} {:.16e}", mesh.nx(), mesh.ny(), r.x0, r.y0, r.x1, r.y1)?;
    writeln!(w, "{epsilon:.16e} {time:.16e}")?;
    for v in field.values() {
        writeln!(w, "{v:.16e}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_field(path: &Path) -> Result<FieldFile> {
    let text = fs::read_to_string(path)?;
    let bad = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    let mut lines = text.lines();
    if lines.next() != Some("PHF1") {
        return Err(bad("missing PHF1 magic".into()));
    }
    let header: Vec<&str> = lines.next().unwrap_or("").split_whitespace().collect();
    let meta: Vec<&str> = lines.next().unwrap_or("").split_whitespace().collect();
    if header.len() != 6 || meta.len() != 2 {
        return Err(bad("malformed header".into()));
    }
    let int = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad integer `{s}`")));
    let float = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number `{s}`")));
    let (nx, ny) = (int(header[0])?, int(header[1])?);
    let rect = Rectangle::new(float(header[2])?, float(header[3])?, float(header[4])?, float(header[5])?)?;
    let values: Vec<f64> = lines.filter(|l| !l.trim().is_empty()).map(|l| float(l.trim())).collect::<Result<_>>()?;
    let expected = (nx + 1) * (ny + 1);
    if values.len() != expected {
        return Err(bad(format!("expected {expected} values, found {}", values.len())));
    }
    Ok(FieldFile {
        nx,
        ny,
        rect,
        epsilon: float(meta[0])?,
        time: float(meta[1])?,
        values,
    })
}

fn csv_writer(path: &Path, header: &[&str]) -> Result<csv::Writer<fs::File>> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    w.write_record(header)?;
    Ok(w)
}

fn num(v: f64) -> String {
    format!("{v:.12e}")
}

pub fn write_cost_history(path: &Path, report: &OptimizationReport) -> Result<()> {
    let mut w = csv_writer(path, &["iter", "J", "fidelity", "regularization", "update_norm", "misfit_l2"])?;
    let misfit = fidelity_history(report);
    for (r, m) in report.records.iter().zip(misfit) {
        w.write_record([r.iteration.to_string(), num(r.cost), num(r.fidelity), num(r.regularization), num(r.update_norm), num(m)])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-level geometry of a stored trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelStats {
    pub time: f64,
    pub mass_area: f64,
    pub target_mass: Option<f64>,
    pub polygon_area: f64,
    pub loops: usize,
    pub centroid: Option<[f64; 2]>,
}

pub fn level_stats(mesh: &Mesh, levels: &[(f64, &Field)], target: Option<&MassTarget>) -> Result<Vec<LevelStats>> {
    levels
        .iter()
        .map(|&(t, f)| {
            let contour = extract_zero_levelset(mesh, f, t)?;
            Ok(LevelStats {
                time: t,
                mass_area: mass_area(mesh, f)?,
                target_mass: target.map(|m| m.at(t)).transpose()?,
                polygon_area: contour.enclosed_area(),
                loops: contour.loop_count(),
                centroid: match centroid(mesh, f) {
                    Ok(c) => Some(c),
                    Err(Error::ZeroMass) => None,
                    Err(e) => return Err(e),
                },
            })
        })
        .collect()
}

pub fn write_level_stats(dir: &Path, stats: &[LevelStats]) -> Result<()> {
    let mut area = csv_writer(&dir.join("area.csv"), &["t", "mass_area", "target_mass", "polygon_area", "loops"])?;
    for s in stats {
        area.write_record([
            num(s.time),
            num(s.mass_area),
            s.target_mass.map_or(String::new(), num),
            num(s.polygon_area),
            s.loops.to_string(),
        ])?;
    }
    area.flush()?;

    let series: Vec<(f64, [f64; 2])> = stats.iter().filter_map(|s| s.centroid.map(|c| (s.time, c))).collect();
    let speed = centroid_speed(&series);
    let mut cw = csv_writer(&dir.join("centroid.csv"), &["t", "x", "y", "speed"])?;
    for ((t, c), v) in series.iter().zip(speed) {
        cw.write_record([num(*t), num(c[0]), num(c[1]), num(v)])?;
    }
    cw.flush()?;
    Ok(())
}

pub fn write_control_extrema(path: &Path, control: &Control, params: &ModelParams) -> Result<()> {
    let mut w = csv_writer(path, &["t", "min", "max"])?;
    for (n, (lo, hi)) in control_extrema(control).into_iter().enumerate() {
        w.write_record([num(params.time(n)), num(lo), num(hi)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_multipliers(path: &Path, traj: &StateTrajectory, params: &ModelParams) -> Result<()> {
    let mut w = csv_writer(path, &["t", "lambda", "secant_iters", "mass_error"])?;
    for n in 0..traj.multipliers.len() {
        w.write_record([
            num(params.time(n + 1)),
            num(traj.multipliers[n]),
            traj.secant_iters[n].to_string(),
            num(traj.mass_errors[n]),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn snapshot_name(step: usize) -> String {
    format!("phi_{step:06}.phf")
}

pub fn observation_name(step: usize) -> String {
    format!("obs_{step:06}.phf")
}

/// Writes every report of a finished (or aborted) run into `dir`.
pub fn write_run_outputs(
    dir: &Path,
    config: &RunConfig,
    problem: &TrackingProblem,
    control: &Control,
    traj: &StateTrajectory,
    report: &OptimizationReport,
) -> Result<()> {
    fs::create_dir_all(dir.join("fields"))?;
    let params = &problem.params;
    let mesh = &problem.mesh;
    fs::write(dir.join("config.txt"), config.to_text())?;
    write_cost_history(&dir.join("cost_history.csv"), report)?;
    let target = problem.mass_target()?;
    let levels: Vec<(f64, &Field)> = traj.states.iter().enumerate().map(|(n, f)| (params.time(n), f)).collect();
    write_level_stats(dir, &level_stats(mesh, &levels, Some(&target))?)?;
    write_control_extrema(&dir.join("control_extrema.csv"), control, params)?;
    write_multipliers(&dir.join("lambda.csv"), traj, params)?;

    for (n, f) in traj.states.iter().enumerate() {
        if config.full_dump || n % config.snapshot_stride == 0 || n == params.steps {
            write_field(&dir.join("fields").join(snapshot_name(n)), mesh, f, params.epsilon, params.time(n))?;
        }
    }
    for o in &problem.observations {
        write_field(&dir.join("fields").join(observation_name(o.step)), mesh, &o.field, params.epsilon, params.time(o.step))?;
    }
    write_report(&dir.join("report.txt"), problem, report)
}

pub fn write_report(path: &Path, problem: &TrackingProblem, report: &OptimizationReport) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    let p = &problem.params;
    writeln!(w, "vertices: {}", problem.mesh.num_vertices())?;
    writeln!(w, "epsilon: {}", p.epsilon)?;
    writeln!(w, "tau: {}", p.tau)?;
    writeln!(w, "steps: {}", p.steps)?;
    writeln!(w, "constraint: {}", if problem.constrained { "on" } else { "off" })?;
    writeln!(w, "iterations: {}", report.records.len())?;
    if let (Some(first), Some(last)) = (report.first(), report.last()) {
        writeln!(w, "initial_J: {:.12e}", first.cost)?;
        writeln!(w, "final_J: {:.12e}", last.cost)?;
        writeln!(w, "final_fidelity: {:.12e}", last.fidelity)?;
        writeln!(w, "final_misfit_l2: {:.12e}", (2.0 * last.fidelity).sqrt())?;
        writeln!(w, "final_update_norm: {:.12e}", last.update_norm)?;
    }
    match report.termination {
        Some(cause) => writeln!(w, "termination_cause: {cause}")?,
        None => writeln!(w, "termination_cause: solver_failure")?,
    }
    w.flush()?;
    Ok(())
}

/// Stored snapshots of a run directory, sorted by time, plus its
/// observations.
pub struct StoredRun {
    pub mesh: Mesh,
    pub snapshots: Vec<(f64, Field)>,
    pub observations: Vec<(f64, Field)>,
}

pub fn load_run(dir: &Path) -> Result<StoredRun> {
    let fields_dir = dir.join("fields");
    let mut names: Vec<PathBuf> = fs::read_dir(&fields_dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    names.sort();
    let mut mesh: Option<Mesh> = None;
    let mut snapshots = Vec::new();
    let mut observations = Vec::new();
    for path in names {
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        let is_snap = name.starts_with("phi_");
        if !(is_snap || name.starts_with("obs_")) || !name.ends_with(".phf") {
            continue;
        }
        let file = read_field(&path)?;
        let m = match &mesh {
            Some(m) => m,
            None => mesh.insert(file.mesh()?),
        };
        if file.nx != m.nx() || file.ny != m.ny() || file.rect != m.rect() {
            return Err(Error::Format {
                path,
                message: "grid differs from the other snapshots".into(),
            });
        }
        let entry = (file.time, file.field(m)?);
        if is_snap {
            snapshots.push(entry);
        } else {
            observations.push(entry);
        }
    }
    let mesh = mesh.ok_or_else(|| Error::Format {
        path: fields_dir,
        message: "no snapshots found".into(),
    })?;
    snapshots.sort_by(|a, b| a.0.total_cmp(&b.0));
    observations.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(StoredRun {
        mesh,
        snapshots,
        observations,
    })
}

/// Recomputes `area.csv` and `centroid.csv` from stored snapshots.
pub fn analyze_run(dir: &Path, out: &Path) -> Result<Vec<LevelStats>> {
    let run = load_run(dir)?;
    let target = match run.snapshots.first() {
        Some((t0, phi0)) if *t0 == 0.0 && !run.observations.is_empty() => {
            let m0 = mass_area(&run.mesh, phi0)?;
            let knots = run
                .observations
                .iter()
                .map(|(t, f)| Ok((*t, mass_area(&run.mesh, f)?)))
                .collect::<Result<Vec<_>>>()?;
            Some(MassTarget::through(m0, knots)?)
        }
        _ => None,
    };
    let end = target.as_ref().map(|t| t.end_time());
    let levels: Vec<(f64, &Field)> = run.snapshots.iter().map(|(t, f)| (*t, f)).collect();
    // snapshots past the last observation have no target value
    let stats = levels
        .iter()
        .map(|&lv| {
            let tgt = target.as_ref().filter(|_| end.is_some_and(|e| lv.0 <= e));
            level_stats(&run.mesh, &[lv], tgt).map(|mut v| v.remove(0))
        })
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out)?;
    write_level_stats(out, &stats)?;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_from_dataset() {
        let c = RunConfig::parse("dataset = translated_circle\n").unwrap();
        assert_eq!(c.epsilon, 0.1);
        assert_eq!(c.tau, 1e-3);
        assert_eq!(c.end_time, 0.8);
        assert_eq!(c.alpha, 0.01);
        assert_eq!(c.theta, 0.01);
        assert_eq!(c.tol_cost, 1e-4);
        assert_eq!(c.tol_update, 1e-4);
        assert_eq!(c.max_iterations, 3500);
        assert!(c.constrained);
        assert_eq!(c.snapshot_stride, 20);
        let n = (c.nx + 1) * (c.ny + 1);
        assert!((n as f64 / DEFAULT_DOFS as f64 - 1.0).abs() < 0.05);
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn validation_names_keys() {
        let e = RunConfig::parse("dataset = translated_circle\ntau = 0\n").unwrap_err();
        assert!(matches!(e, Error::InvalidParameter { name: "tau", .. }), "{e}");
        let e = RunConfig::parse("dataset = translated_circle\ntau = 0.003\n").unwrap_err();
        assert!(e.to_string().contains("M * tau"), "{e}");
        let e = RunConfig::parse("dataset = translated_circle\nalpha = x\n").unwrap_err();
        assert!(matches!(e, Error::Config { ref key, .. } if key == "alpha"));
        let e = RunConfig::parse("dataset = translated_circle\nbogus = 1\n").unwrap_err();
        assert!(matches!(e, Error::Config { ref key, .. } if key == "bogus"));
        assert!(matches!(RunConfig::parse("dataset = nope\n"), Err(Error::UnknownDataset(_))));
        assert!(RunConfig::parse("").is_err());
    }

    #[test]
    fn initial_control_modes() {
        assert_eq!(parse_initial_control("zero").unwrap(), InitialControl::Zero);
        assert_eq!(parse_initial_control("constant:1").unwrap(), InitialControl::Constant(1.0));
        assert_eq!(parse_initial_control("feedback:2.5,0").unwrap(), InitialControl::Feedback([2.5, 0.0]));
        assert!(parse_initial_control("feedback:1").is_err());
    }

    #[test]
    fn field_file_layout() {
        let dir = tempfile::tempdir().unwrap();
        let mesh = Mesh::new(Rectangle::new(0.0, 0.0, 1.0, 1.0).unwrap(), 2, 2).unwrap();
        let path = dir.path().join("ones.phf");
        write_field(&path, &mesh, &Field::constant(&mesh, 1.0), 0.1, 0.0).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "PHF1");
        assert_eq!(lines.len(), 3 + 9);
        let back = read_field(&path).unwrap();
        assert_eq!(back.values, vec![1.0; 9]);
        assert_eq!(back.rect, mesh.rect());

        fs::write(&path, text.replacen("PHF1", "PHF2", 1)).unwrap();
        assert!(matches!(read_field(&path), Err(Error::Format { .. })));
        let truncated: String = text.lines().take(10).map(|l| format!("{l}\n")).collect();
        fs::write(&path, truncated).unwrap();
        assert!(matches!(read_field(&path), Err(Error::Format { .. })));
    }
}
