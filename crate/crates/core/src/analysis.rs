//! Zero level-sets, areas, centroids and control statistics of a run.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::forward::Control;
use crate::mesh::{Field, Mesh};
use crate::optimize::OptimizationReport;
use crate::phase_field::positive_part_mass;

/// Node values exactly at zero are nudged by this amount before marching.
const ZERO_NUDGE: f64 = 1e-14;

/// A piece of the zero level-set. Closed loops repeat their first point at
/// the end; open chains end on the domain boundary. The positive phase lies
/// to the left of the direction of travel.
#[derive(Clone, Debug, PartialEq)]
pub struct Polyline {
    pub points: Vec<[f64; 2]>,
    pub closed: bool,
}

impl Polyline {
    /// Signed shoelace area; positive for counter-clockwise loops.
    pub fn signed_area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| w[0][0] * w[1][1] - w[1][0] * w[0][1])
            .sum::<f64>()
            * 0.5
    }

    pub fn length(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]))
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Contour {
    pub time: f64,
    pub polylines: Vec<Polyline>,
}

impl Contour {
    pub fn loop_count(&self) -> usize {
        self.polylines.iter().filter(|p| p.closed).count()
    }

    pub fn is_empty(&self) -> bool {
        self.polylines.is_empty()
    }

    /// Area enclosed by the closed loops. Outer boundaries run
    /// counter-clockwise and holes clockwise, so the signed sum subtracts
    /// holes. Chains cut by the domain boundary are ignored.
    pub fn enclosed_area(&self) -> f64 {
        self.polylines.iter().filter(|p| p.closed).map(Polyline::signed_area).sum()
    }

    pub fn perimeter(&self) -> f64 {
        self.polylines.iter().map(Polyline::length).sum()
    }
}

type EdgeKey = (usize, usize);

fn edge_key(a: usize, b: usize) -> EdgeKey {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Marching triangles on the P1 interpolant of `field`.
pub fn extract_zero_levelset(mesh: &Mesh, field: &Field, time: f64) -> Result<Contour> {
    mesh.check(field)?;
    let vals: Vec<f64> = field
        .values()
        .iter()
        .map(|&v| if v == 0.0 { ZERO_NUDGE } else { v })
        .collect();
    let verts = mesh.vertices();
    let crossing = |k: EdgeKey| -> [f64; 2] {
        let (a, b) = k;
        let s = vals[a] / (vals[a] - vals[b]);
        [
            verts[a][0] + s * (verts[b][0] - verts[a][0]),
            verts[a][1] + s * (verts[b][1] - verts[a][1]),
        ]
    };

    // segment start edge -> end edge; every triangle is counter-clockwise
    let mut next: HashMap<EdgeKey, EdgeKey> = HashMap::new();
    let mut starts: Vec<EdgeKey> = Vec::new();
    for tri in mesh.triangles() {
        let mut from_pos = None;
        let mut to_pos = None;
        for e in 0..3 {
            let (a, b) = (tri[e], tri[(e + 1) % 3]);
            match (vals[a] > 0.0, vals[b] > 0.0) {
                (true, false) => from_pos = Some(edge_key(a, b)),
                (false, true) => to_pos = Some(edge_key(a, b)),
                _ => {}
            }
        }
        if let (Some(s), Some(t)) = (from_pos, to_pos) {
            next.insert(s, t);
            starts.push(s);
        }
    }

    let ends: std::collections::HashSet<EdgeKey> = next.values().copied().collect();
    let mut used: std::collections::HashSet<EdgeKey> = std::collections::HashSet::new();
    let mut polylines = Vec::new();

    let trace = |first: EdgeKey, used: &mut std::collections::HashSet<EdgeKey>| -> Polyline {
        let mut points = vec![crossing(first)];
        let mut cur = first;
        loop {
            used.insert(cur);
            match next.get(&cur) {
                Some(&n) => {
                    points.push(crossing(n));
                    if n == first {
                        return Polyline { points, closed: true };
                    }
                    if used.contains(&n) {
                        return Polyline { points, closed: false };
                    }
                    cur = n;
                }
                None => return Polyline { points, closed: false },
            }
        }
    };

    // open chains start on a boundary edge that no segment ends on
    for &s in &starts {
        if !ends.contains(&s) && !used.contains(&s) {
            polylines.push(trace(s, &mut used));
        }
    }
    for &s in &starts {
        if !used.contains(&s) {
            polylines.push(trace(s, &mut used));
        }
    }
    Ok(Contour { time, polylines })
}

pub fn enclosed_area(contour: &Contour) -> f64 {
    contour.enclosed_area()
}

pub fn mass_area(mesh: &Mesh, field: &Field) -> Result<f64> {
    positive_part_mass(mesh, field)
}

/// Positive-part-mass weighted centroid.
pub fn centroid(mesh: &Mesh, field: &Field) -> Result<[f64; 2]> {
    mesh.check(field)?;
    let mut total = 0.0;
    let mut acc = [0.0, 0.0];
    for ((m, v), p) in mesh.lumped_mass().iter().zip(field.values()).zip(mesh.vertices()) {
        let w = m * v.max(0.0);
        total += w;
        acc[0] += w * p[0];
        acc[1] += w * p[1];
    }
    if total <= 0.0 {
        return Err(Error::ZeroMass);
    }
    Ok([acc[0] / total, acc[1] / total])
}

/// Speeds by central differences, one-sided at the ends.
pub fn centroid_speed(series: &[(f64, [f64; 2])]) -> Vec<f64> {
    let n = series.len();
    if n < 2 {
        return vec![0.0; n];
    }
    (0..n)
        .map(|i| {
            let (a, b) = match i {
                0 => (0, 1),
                i if i == n - 1 => (n - 2, n - 1),
                i => (i - 1, i + 1),
            };
            let (ta, pa) = series[a];
            let (tb, pb) = series[b];
            (pb[0] - pa[0]).hypot(pb[1] - pa[1]) / (tb - ta)
        })
        .collect()
}

/// Nodal `(min, max)` of each control slice.
pub fn control_extrema(control: &Control) -> Vec<(f64, f64)> {
    control
        .slices
        .iter()
        .map(|s| {
            s.values()
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
        })
        .collect()
}

/// `‖φ(T) − φ_obs‖` per iteration, recovered from the fidelity term.
pub fn fidelity_history(report: &OptimizationReport) -> Vec<f64> {
    report.records.iter().map(|r| (2.0 * r.fidelity).sqrt()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::Rectangle;

    fn disk(mesh: &Mesh, cx: f64, cy: f64, r: f64, eps: f64) -> Field {
        mesh.interpolate(|x, y| ((r - (x - cx).hypot(y - cy)) / (std::f64::consts::SQRT_2 * eps)).tanh())
    }

    #[test]
    fn constant_field_has_no_contour() {
        let m = Mesh::new(Rectangle::new(0.0, 0.0, 1.0, 1.0).unwrap(), 4, 4).unwrap();
        let c = extract_zero_levelset(&m, &Field::constant(&m, 1.0), 0.0).unwrap();
        assert!(c.is_empty());
        assert_eq!(c.enclosed_area(), 0.0);
    }

    #[test]
    fn circle_single_loop_area() {
        let m = Mesh::new(Rectangle::new(-2.0, -2.0, 2.0, 2.0).unwrap(), 128, 128).unwrap();
        let c = extract_zero_levelset(&m, &disk(&m, 0.0, 0.0, 1.0, 0.1), 0.0).unwrap();
        assert_eq!(c.loop_count(), 1);
        assert_eq!(c.polylines.len(), 1);
        let p = &c.polylines[0];
        assert_eq!(p.points.first(), p.points.last());
        assert!((c.enclosed_area() - std::f64::consts::PI).abs() < 0.02 * std::f64::consts::PI);
    }

    #[test]
    fn two_disks_two_loops_and_negation() {
        let m = Mesh::new(Rectangle::new(-3.0, -2.0, 3.0, 2.0).unwrap(), 60, 40).unwrap();
        let f = disk(&m, -1.5, 0.0, 0.8, 0.1).map(|v| v);
        let g = disk(&m, 1.5, 0.0, 0.8, 0.1);
        let both = Field::from_values(&m, f.values().iter().zip(g.values()).map(|(a, b)| a.max(*b)).collect()).unwrap();
        let c = extract_zero_levelset(&m, &both, 0.0).unwrap();
        assert_eq!(c.loop_count(), 2);
        let neg = extract_zero_levelset(&m, &both.map(|v| -v), 0.0).unwrap();
        assert_eq!(neg.loop_count(), 2);
        assert!((neg.enclosed_area() + c.enclosed_area()).abs() < 1e-12);
    }

    #[test]
    fn annulus_subtracts_hole() {
        let m = Mesh::new(Rectangle::new(-2.0, -2.0, 2.0, 2.0).unwrap(), 100, 100).unwrap();
        let ring = m.interpolate(|x, y| {
            let r = x.hypot(y);
            ((1.5 - r).min(r - 0.7) / 0.1).tanh()
        });
        let c = extract_zero_levelset(&m, &ring, 0.0).unwrap();
        assert_eq!(c.loop_count(), 2);
        let exact = std::f64::consts::PI * (1.5f64.powi(2) - 0.7f64.powi(2));
        assert!((c.enclosed_area() - exact).abs() < 0.02 * exact);
    }

    #[test]
    fn square_loop_area() {
        let sq = Polyline {
            points: vec![[0.0, 0.0], [2.0, 0.0], [2.0, 2.0], [0.0, 2.0], [0.0, 0.0]],
            closed: true,
        };
        assert_eq!(sq.signed_area(), 4.0);
        let c = Contour { time: 0.0, polylines: vec![sq] };
        assert_eq!(enclosed_area(&c), 4.0);
    }

    #[test]
    fn centroid_and_speed() {
        let m = Mesh::new(Rectangle::new(-3.0, -3.0, 6.0, 3.0).unwrap(), 90, 60).unwrap();
        let c = centroid(&m, &disk(&m, 0.0, 0.0, 1.0, 0.1)).unwrap();
        assert!(c[0].abs() < 1e-10 && c[1].abs() < 1e-10);
        let c = centroid(&m, &disk(&m, 3.0, 0.0, 1.0, 0.1)).unwrap();
        assert!((c[0] - 3.0).abs() < 0.1 && c[1].abs() < 0.1);
        assert!(matches!(centroid(&m, &Field::constant(&m, -1.0)), Err(Error::ZeroMass)));
        assert_eq!(mass_area(&m, &Field::constant(&m, -1.0)).unwrap(), 0.0);

        let still = vec![(0.0, [1.0, 2.0]), (0.1, [1.0, 2.0]), (0.2, [1.0, 2.0])];
        assert_eq!(centroid_speed(&still), vec![0.0; 3]);
        let moving = vec![(0.0, [0.0, 0.0]), (0.5, [1.0, 0.0]), (1.0, [2.0, 0.0])];
        for s in centroid_speed(&moving) {
            assert!((s - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn extrema_per_slice() {
        let m = Mesh::new(Rectangle::new(0.0, 0.0, 1.0, 1.0).unwrap(), 1, 1).unwrap();
        let ctl = Control {
            slices: vec![
                Field::zeros(&m),
                Field::from_values(&m, vec![-2.0, 5.0, 0.0, 1.0]).unwrap(),
            ],
        };
        assert_eq!(control_extrema(&ctl), vec![(0.0, 0.0), (-2.0, 5.0)]);
    }
}
