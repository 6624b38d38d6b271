//! Steady states: constructors for the homogeneous and strictly aligned
//! states, residuals of the pointwise steady-state conditions, intersection
//! balance via the projection matrix, and validators for patchy networks and
//! the mixed aligned/uniform ansatz.

use std::f64::consts::{FRAC_2_PI, PI};
use std::fmt;

use log::warn;
use thiserror::Error;

use crate::kinetic::Grid;
use crate::measures::{
    alignment_b, angular_gap, bin_center, lambda_at, lift, turning_apply, DirectionMeasure,
    MeasureError, SpeedMeasure, VelocityMeasure, ATOM_MERGE_TOL,
};

/// Default row-sum spread tolerance.
pub const BALANCE_TOL: f64 = 1e-10;
/// Default order of the trigonometric test basis.
pub const DEFAULT_BASIS: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SteadyError {
    #[error("need at least 2 directions, got {0}")]
    TooFewDirections(usize),
    #[error("directions {0} and {1} coincide")]
    DuplicateDirection(usize, usize),
    #[error("direction {0} is zero or not finite")]
    BadDirection(usize),
    #[error("weights must be nonnegative and sum to 1 (sum = {0})")]
    BadWeights(f64),
    #[error("expected {expected} weights, got {got}")]
    WeightCount { expected: usize, got: usize },
    #[error("density must be finite and nonnegative, got {0}")]
    BadDensity(f64),
    #[error("mixing weight {0} outside [0, 1]")]
    BadMixing(f64),
    #[error("malformed network: {0}")]
    Malformed(String),
    #[error("field sizes do not match the grid: {0}")]
    Layout(String),
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

fn check_density(rho: f64) -> Result<(), SteadyError> {
    if rho.is_finite() && rho >= 0.0 {
        Ok(())
    } else {
        Err(SteadyError::BadDensity(rho))
    }
}

fn unit(v: [f64; 2]) -> Option<[f64; 2]> {
    let n = v[0].hypot(v[1]);
    (n.is_finite() && n > 0.0).then(|| [v[0] / n, v[1] / n])
}

fn angle_of(v: [f64; 2]) -> f64 {
    v[1].atan2(v[0])
}

/// Uniform fibres `q = dθ/2π` and `p = ϱ·q̃`.
pub fn construct_homogeneous(
    rho: f64,
    n_theta: usize,
    speeds: &SpeedMeasure,
) -> Result<(VelocityMeasure, DirectionMeasure), SteadyError> {
    check_density(rho)?;
    let q = DirectionMeasure::uniform(n_theta);
    Ok((lift(&q, speeds).scaled(rho), q))
}

/// Strict alignment along `±γ`: `q = ½δ_γ + ½δ_{-γ}`, `p = ϱ·q̃`.
/// A non-unit `γ` is normalized.
pub fn construct_aligned(
    gamma: [f64; 2],
    rho: f64,
    n_theta: usize,
    speeds: &SpeedMeasure,
) -> Result<(VelocityMeasure, DirectionMeasure), SteadyError> {
    check_density(rho)?;
    let g = unit(gamma).ok_or(SteadyError::BadDirection(0))?;
    let norm = gamma[0].hypot(gamma[1]);
    if (norm - 1.0).abs() > 1e-12 {
        warn!("aligned state: normalizing direction of length {norm}");
    }
    let q = DirectionMeasure::axial(angle_of(g), n_theta);
    Ok((lift(&q, speeds).scaled(rho), q))
}

/// `Γ = (|γ_i · γ_j|)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl ProjectionMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.entries.chunks(self.n).map(|r| r.iter().sum()).collect()
    }

    /// `Γ·w`.
    pub fn apply(&self, w: &[f64]) -> Vec<f64> {
        self.entries
            .chunks(self.n)
            .map(|r| r.iter().zip(w).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Builds `Γ` from unit (or nonzero, normalized here) directions. Directions
/// closer than the atom merging tolerance are rejected.
pub fn build_projection_matrix(directions: &[[f64; 2]]) -> Result<ProjectionMatrix, SteadyError> {
    let n = directions.len();
    if n < 2 {
        return Err(SteadyError::TooFewDirections(n));
    }
    let dirs = directions
        .iter()
        .enumerate()
        .map(|(i, d)| unit(*d).ok_or(SteadyError::BadDirection(i)))
        .collect::<Result<Vec<_>, _>>()?;
    for i in 0..n {
        for j in i + 1..n {
            if angular_gap(angle_of(dirs[i]), angle_of(dirs[j])) <= ATOM_MERGE_TOL {
                return Err(SteadyError::DuplicateDirection(i, j));
            }
        }
    }
    let mut entries = vec![0.0; n * n];
    for i in 0..n {
        entries[i * n + i] = 1.0;
        for j in i + 1..n {
            let g = (dirs[i][0] * dirs[j][0] + dirs[i][1] * dirs[j][1]).abs().min(1.0);
            entries[i * n + j] = g;
            entries[j * n + i] = g;
        }
    }
    Ok(ProjectionMatrix { n, entries })
}

fn spread(v: &[f64]) -> f64 {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    hi - lo
}

/// Whether `(1, …, 1)ᵀ` is an eigenvector of `Γ`, i.e. all row sums agree
/// within `tol`. Returns the row sums alongside.
pub fn is_balanced_intersection(g: &ProjectionMatrix, tol: f64) -> (bool, Vec<f64>) {
    let rows = g.row_sums();
    (spread(&rows) <= tol, rows)
}

/// Fibre directions meeting at one point. With `symmetric`, each `γ_i`
/// stands for the axis `{γ_i, -γ_i}`.
#[derive(Clone, Debug, PartialEq)]
pub struct IntersectionSpec {
    pub directions: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
    pub symmetric: bool,
}

impl IntersectionSpec {
    /// Equal weights.
    pub fn equal(directions: Vec<[f64; 2]>, symmetric: bool) -> Self {
        let n = directions.len();
        Self {
            directions,
            weights: vec![1.0 / n as f64; n],
            symmetric,
        }
    }

    /// From angles in degrees.
    pub fn from_degrees(angles: &[f64], weights: Option<Vec<f64>>, symmetric: bool) -> Self {
        let directions: Vec<[f64; 2]> = angles
            .iter()
            .map(|a| {
                let r = a.to_radians();
                [r.cos(), r.sin()]
            })
            .collect();
        match weights {
            Some(weights) => Self { directions, weights, symmetric },
            None => Self::equal(directions, symmetric),
        }
    }

    /// The fibre measure at the intersection.
    pub fn fibre_measure(&self, n_theta: usize) -> Result<DirectionMeasure, SteadyError> {
        let mut atoms = Vec::new();
        for (d, w) in self.directions.iter().zip(&self.weights) {
            let a = angle_of(*d);
            if self.symmetric {
                atoms.push(crate::measures::Atom::new(a, 0.5 * w));
                atoms.push(crate::measures::Atom::new(a + PI, 0.5 * w));
            } else {
                atoms.push(crate::measures::Atom::new(a, *w));
            }
        }
        Ok(DirectionMeasure::new(atoms, vec![0.0; n_theta])?)
    }
}

/// Shape-specific condition reported alongside the general test.
#[derive(Clone, Debug, PartialEq)]
pub enum NamedCondition {
    /// Two directions: admissible iff `α = ½` or the directions are parallel.
    TwoDirections { alpha: f64, parallel: bool, holds: bool },
    /// Three directions: pairwise equal angles.
    EqualAngle { holds: bool },
    /// Four directions: `|γ₁γ₂| = |γ₃γ₄|`, `|γ₁γ₃| = |γ₂γ₄|`, `|γ₁γ₄| = |γ₂γ₃|`.
    /// Sufficient for balance, not necessary.
    Pairwise { holds: bool },
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntersectionReport {
    pub n: usize,
    pub symmetric: bool,
    /// `Γ` balance (equal row sums).
    pub balanced: bool,
    pub row_sums: Vec<f64>,
    /// `Γ·w` restricted to directions with positive weight; admissible iff
    /// these agree within tolerance.
    pub weighted_projection: Vec<f64>,
    pub admissible: bool,
    pub named: NamedCondition,
}

impl fmt::Display for IntersectionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let fmt_list = |v: &[f64]| v.iter().map(|x| format!("{x:.12}")).collect::<Vec<_>>().join(" ");
        writeln!(
            f,
            "intersection of {} {} directions: {}",
            self.n,
            if self.symmetric { "symmetric" } else { "unsymmetric" },
            if self.admissible { "admissible" } else { "inadmissible" }
        )?;
        writeln!(f, "  row sums: {}", fmt_list(&self.row_sums))?;
        writeln!(f, "  balanced: {}", self.balanced)?;
        writeln!(f, "  weighted projections: {}", fmt_list(&self.weighted_projection))?;
        match &self.named {
            NamedCondition::TwoDirections { alpha, parallel, holds } => writeln!(
                f,
                "  two-direction weight condition (alpha = {alpha}, parallel = {parallel}): {holds}"
            ),
            NamedCondition::EqualAngle { holds } => writeln!(f, "  equal-angle condition: {holds}"),
            NamedCondition::Pairwise { holds } => {
                writeln!(f, "  pairwise condition (sufficient): {holds}")
            }
            NamedCondition::None => Ok(()),
        }
    }
}

/// Checks the pointwise steady-state condition at an intersection: with
/// `p = ϱ q̃` the fitness on direction `i` is `ϱ(Γw)_i`, and it must be the
/// same on every direction carrying fibres.
pub fn classify_intersection(spec: &IntersectionSpec, tol: f64) -> Result<IntersectionReport, SteadyError> {
    let n = spec.directions.len();
    if spec.weights.len() != n {
        return Err(SteadyError::WeightCount { expected: n, got: spec.weights.len() });
    }
    let total: f64 = spec.weights.iter().sum();
    if spec.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || (total - 1.0).abs() > 1e-12 {
        return Err(SteadyError::BadWeights(total));
    }
    let g = build_projection_matrix(&spec.directions)?;
    let (balanced, row_sums) = is_balanced_intersection(&g, tol);
    let proj = g.apply(&spec.weights);
    let weighted: Vec<f64> = proj
        .iter()
        .zip(&spec.weights)
        .filter(|(_, w)| **w > 0.0)
        .map(|(p, _)| *p)
        .collect();
    let admissible = spread(&weighted) <= tol;
    let named = match n {
        2 => {
            let alpha = spec.weights[0];
            let parallel = (1.0 - g.get(0, 1)).abs() <= tol;
            NamedCondition::TwoDirections {
                alpha,
                parallel,
                holds: parallel || (alpha - 0.5).abs() <= tol,
            }
        }
        3 => NamedCondition::EqualAngle {
            holds: spread(&[g.get(0, 1), g.get(0, 2), g.get(1, 2)]) <= tol,
        },
        4 => NamedCondition::Pairwise {
            holds: (g.get(0, 1) - g.get(2, 3)).abs() <= tol
                && (g.get(0, 2) - g.get(1, 3)).abs() <= tol
                && (g.get(0, 3) - g.get(1, 2)).abs() <= tol,
        },
        _ => NamedCondition::None,
    };
    Ok(IntersectionReport {
        n,
        symmetric: spec.symmetric,
        balanced,
        row_sums,
        weighted_projection: weighted,
        admissible,
        named,
    })
}

/// Quadrature points of a direction measure: atoms and occupied bin centres.
fn support_points(q: &DirectionMeasure) -> Vec<(f64, f64)> {
    let n = q.n_theta();
    q.atoms()
        .iter()
        .map(|a| (a.angle, a.weight))
        .chain(
            q.bins()
                .iter()
                .enumerate()
                .filter(|(_, w)| **w != 0.0)
                .map(|(j, w)| (bin_center(j, n), *w)),
        )
        .collect()
}

fn trig_basis(k_max: usize) -> impl Iterator<Item = Box<dyn Fn(f64) -> f64>> {
    std::iter::once(Box::new(|_: f64| 1.0) as Box<dyn Fn(f64) -> f64>).chain((1..=k_max).flat_map(|k| {
        let k = k as f64;
        [
            Box::new(move |t: f64| (k * t).cos()) as Box<dyn Fn(f64) -> f64>,
            Box::new(move |t: f64| (k * t).sin()) as Box<dyn Fn(f64) -> f64>,
        ]
    }))
}

/// Residuals of the two pointwise steady-state conditions, tested against
/// `{1, cos kθ, sin kθ : k ≤ basis_size}`:
///
/// * `r_q = max_Ψ |∫ (Λ(p) - B(p, q)) Ψ dq|`;
/// * `r_p = max_{k, Ψ} |∫ Ψ d(p̄ q̃ - p)|` on each speed node `k`.
pub fn residual_pointwise(
    p: &VelocityMeasure,
    q: &DirectionMeasure,
    speeds: &SpeedMeasure,
    basis_size: usize,
) -> Result<(f64, f64), SteadyError> {
    let b = alignment_b(p, q);
    let pts: Vec<(f64, f64, f64)> = support_points(q)
        .into_iter()
        .map(|(a, w)| (a, w, lambda_at(p, a) - b))
        .collect();
    let defect = turning_apply(q, speeds, p)?;
    let mut r_q: f64 = 0.0;
    let mut r_p: f64 = 0.0;
    for psi in trig_basis(basis_size) {
        let v: f64 = pts.iter().map(|(a, w, d)| w * d * psi(*a)).sum();
        r_q = r_q.max(v.abs());
        for c in &defect.components {
            let n = c.bins.len();
            let v: f64 = c.atoms.iter().map(|a| a.weight * psi(a.angle)).sum::<f64>()
                + c.bins.iter().enumerate().map(|(j, w)| w * psi(bin_center(j, n))).sum::<f64>();
            r_p = r_p.max(v.abs());
        }
    }
    Ok((r_q, r_p))
}

/// One polyline vertex with the fibre tangent assigned there.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Vertex {
    pub position: [f64; 2],
    pub tangent: [f64; 2],
}

/// A fibre curve carrying cell density `density` in the aligned state.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub vertices: Vec<Vertex>,
    pub closed: bool,
    pub density: f64,
}

/// A region of homogeneous tissue.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub label: String,
    pub density: f64,
    pub bounded: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub curves: Vec<Curve>,
    pub patches: Vec<Patch>,
    /// Tolerance for tangency, coincident vertices and intersection balance.
    pub tolerance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    /// The assigned tangent leaves the geometric curve: `|n·γ|` is `misalignment`.
    Tangency { curve: usize, vertex: usize, misalignment: f64 },
    /// Cells on an unbounded patch with positive density.
    UnboundedMass { patch: String, density: f64 },
    /// The homogeneous patch state fails the residual test.
    PatchResidual { patch: String, r_q: f64, r_p: f64 },
    /// Curves meet in an inadmissible intersection.
    Intersection { position: [f64; 2], report: IntersectionReport },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Tangency { curve, vertex, misalignment } => write!(
                f,
                "tangency: curve {curve} vertex {vertex}: |n.gamma| = {misalignment:.6e}"
            ),
            Violation::UnboundedMass { patch, density } => {
                write!(f, "unbounded patch `{patch}` has density {density}")
            }
            Violation::PatchResidual { patch, r_q, r_p } => {
                write!(f, "patch `{patch}` residual r_q = {r_q:e}, r_p = {r_p:e}")
            }
            Violation::Intersection { position, report } => write!(
                f,
                "intersection at ({}, {}) inadmissible: row sums {:?}",
                position[0], position[1], report.row_sums
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkReport {
    pub violations: Vec<Violation>,
    pub intersections: Vec<([f64; 2], IntersectionReport)>,
    pub vertices_checked: usize,
}

impl NetworkReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

fn validate_curve(i: usize, c: &Curve) -> Result<(), SteadyError> {
    let min = if c.closed { 3 } else { 2 };
    if c.vertices.len() < min {
        return Err(SteadyError::Malformed(format!(
            "curve {i} needs at least {min} vertices, has {}",
            c.vertices.len()
        )));
    }
    if !(c.density.is_finite() && c.density >= 0.0) {
        return Err(SteadyError::Malformed(format!("curve {i} has density {}", c.density)));
    }
    for (k, v) in c.vertices.iter().enumerate() {
        if !(v.position.iter().all(|x| x.is_finite())) {
            return Err(SteadyError::Malformed(format!("curve {i} vertex {k} is not finite")));
        }
        if unit(v.tangent).is_none() {
            return Err(SteadyError::Malformed(format!("curve {i} vertex {k} has a zero tangent")));
        }
    }
    let n = c.vertices.len();
    let edges = if c.closed { n } else { n - 1 };
    for k in 0..edges {
        let a = c.vertices[k].position;
        let b = c.vertices[(k + 1) % n].position;
        if a == b {
            return Err(SteadyError::Malformed(format!(
                "curve {i} repeats vertex {k} at ({}, {})",
                a[0], a[1]
            )));
        }
    }
    Ok(())
}

/// Geometric tangent at vertex `k` from its neighbours.
fn chord_tangent(c: &Curve, k: usize) -> [f64; 2] {
    let n = c.vertices.len();
    let (prev, next) = if c.closed {
        ((k + n - 1) % n, (k + 1) % n)
    } else {
        (k.saturating_sub(1), (k + 1).min(n - 1))
    };
    let a = c.vertices[prev].position;
    let b = c.vertices[next].position;
    unit([b[0] - a[0], b[1] - a[1]]).expect("validated polyline")
}

/// Checks a candidate patchy network: aligned states tangent to every curve,
/// homogeneous patches with no mass on unbounded ones, and admissible
/// intersections wherever curves share a vertex.
pub fn validate_patchy_network(net: &NetworkSpec) -> Result<NetworkReport, SteadyError> {
    if !(net.tolerance.is_finite() && net.tolerance > 0.0) {
        return Err(SteadyError::Malformed(format!("tolerance {}", net.tolerance)));
    }
    for (i, c) in net.curves.iter().enumerate() {
        validate_curve(i, c)?;
    }
    let tol = net.tolerance;
    let mut violations = Vec::new();
    let mut vertices_checked = 0;

    for (i, c) in net.curves.iter().enumerate() {
        for k in 0..c.vertices.len() {
            let g = unit(c.vertices[k].tangent).expect("validated");
            let t = chord_tangent(c, k);
            // Normal to the curve applied to the support ±γ of the aligned state.
            let mis = (-t[1] * g[0] + t[0] * g[1]).abs();
            if mis > tol {
                violations.push(Violation::Tangency { curve: i, vertex: k, misalignment: mis });
            }
            vertices_checked += 1;
        }
    }

    for patch in &net.patches {
        check_density(patch.density)?;
        if !patch.bounded && patch.density != 0.0 {
            violations.push(Violation::UnboundedMass { patch: patch.label.clone(), density: patch.density });
        }
        let (p, q) = construct_homogeneous(patch.density, 32, &SpeedMeasure::default())?;
        let (r_q, r_p) = residual_pointwise(&p, &q, &SpeedMeasure::default(), DEFAULT_BASIS)?;
        if r_q > 1e-10 * patch.density.max(1.0) || r_p > 1e-10 * patch.density.max(1.0) {
            violations.push(Violation::PatchResidual { patch: patch.label.clone(), r_q, r_p });
        }
    }

    // Group vertices of different curves by position.
    struct Hit {
        curve: usize,
        vertex: usize,
    }
    let mut groups: Vec<([f64; 2], Vec<Hit>)> = Vec::new();
    for (i, c) in net.curves.iter().enumerate() {
        for (k, v) in c.vertices.iter().enumerate() {
            let pos = v.position;
            match groups
                .iter_mut()
                .find(|(p, _)| (p[0] - pos[0]).hypot(p[1] - pos[1]) <= tol)
            {
                Some((_, hits)) => hits.push(Hit { curve: i, vertex: k }),
                None => groups.push((pos, vec![Hit { curve: i, vertex: k }])),
            }
        }
    }
    let mut intersections = Vec::new();
    for (pos, hits) in groups {
        let mut curves: Vec<usize> = hits.iter().map(|h| h.curve).collect();
        curves.sort_unstable();
        curves.dedup();
        if curves.len() < 2 {
            continue;
        }
        // A curve passing through contributes an axis; a curve ending here
        // contributes one branch pointing away from the intersection.
        let mut axes: Vec<[f64; 2]> = Vec::new();
        let mut branches: Vec<[f64; 2]> = Vec::new();
        for h in &hits {
            let c = &net.curves[h.curve];
            let n = c.vertices.len();
            let g = unit(c.vertices[h.vertex].tangent).expect("validated");
            let end = !c.closed && (h.vertex == 0 || h.vertex == n - 1);
            if end {
                let other = if h.vertex == 0 { 1 } else { n - 2 };
                let o = c.vertices[other].position;
                let away = [o[0] - pos[0], o[1] - pos[1]];
                let s = if away[0] * g[0] + away[1] * g[1] >= 0.0 { 1.0 } else { -1.0 };
                branches.push([s * g[0], s * g[1]]);
            } else {
                axes.push(g);
            }
        }
        let spec = if branches.is_empty() {
            IntersectionSpec::equal(dedup_directions(axes, true), true)
        } else {
            let mut dirs = branches;
            for a in axes {
                dirs.push(a);
                dirs.push([-a[0], -a[1]]);
            }
            IntersectionSpec::equal(dedup_directions(dirs, false), false)
        };
        if spec.directions.len() < 2 {
            continue;
        }
        let report = classify_intersection(&spec, net.tolerance.max(BALANCE_TOL))?;
        if !report.admissible {
            violations.push(Violation::Intersection { position: pos, report: report.clone() });
        }
        intersections.push((pos, report));
    }

    Ok(NetworkReport { violations, intersections, vertices_checked })
}

fn dedup_directions(dirs: Vec<[f64; 2]>, as_axes: bool) -> Vec<[f64; 2]> {
    let mut out: Vec<[f64; 2]> = Vec::new();
    for d in dirs {
        let a = angle_of(d);
        let dup = out.iter().any(|o| {
            let b = angle_of(*o);
            angular_gap(a, b) <= 1e-9 || (as_axes && angular_gap(a + PI, b) <= 1e-9)
        });
        if !dup {
            out.push(d);
        }
    }
    out
}

/// Outcome of [`check_general_ansatz`].
#[derive(Clone, Debug, PartialEq)]
pub struct AnsatzReport {
    /// `f + (1 - f)·2/π` per cell.
    pub constant: Vec<f64>,
    /// Spread of `Λ(p)/ϱ` over the support of `q`, per cell (0 where `ϱ = 0`).
    pub lambda_spread: Vec<f64>,
    pub condition_q: bool,
    /// Largest total variation of the centred difference quotients of `ϱ q`
    /// over cells with `ϱ ≠ 0`.
    pub max_gradient: f64,
    pub condition_rho: bool,
}

/// `q = f·½(δ_γ + δ_{-γ}) + (1 - f)·uniform` for one cell.
pub fn ansatz_measure(f: f64, gamma: f64, n_theta: usize) -> Result<DirectionMeasure, SteadyError> {
    if !(0.0..=1.0).contains(&f) {
        return Err(SteadyError::BadMixing(f));
    }
    let aligned = DirectionMeasure::axial(gamma, n_theta).scaled(f);
    Ok(aligned.add(&DirectionMeasure::uniform(n_theta).scaled(1.0 - f))?)
}

/// Checks the mixed ansatz on a grid. `f`, `gamma` (fibre angle) and `rho`
/// are cell-centred fields.
///
/// The first condition asks `∫|θ·ψ| dq(ψ)` to be constant on `supp q`; the
/// reported `constant` is the value it would take. The second asks `ϱ q̃` to
/// be spatially constant where `ϱ ≠ 0`.
pub fn check_general_ansatz(
    f: &[f64],
    gamma: &[f64],
    rho: &[f64],
    grid: &Grid,
    n_theta: usize,
    tol: f64,
) -> Result<AnsatzReport, SteadyError> {
    let cells = grid.cells();
    for (name, v) in [("f", f), ("gamma", gamma), ("rho", rho)] {
        if v.len() != cells {
            return Err(SteadyError::Layout(format!("{name} has {} cells, grid has {cells}", v.len())));
        }
    }
    for &r in rho {
        check_density(r)?;
    }
    let q: Vec<DirectionMeasure> = (0..cells)
        .map(|c| ansatz_measure(f[c], gamma[c], n_theta))
        .collect::<Result<_, _>>()?;
    let m = SpeedMeasure::default();
    let mut constant = Vec::with_capacity(cells);
    let mut lambda_spread = Vec::with_capacity(cells);
    for c in 0..cells {
        constant.push(f[c] + (1.0 - f[c]) * FRAC_2_PI);
        if rho[c] == 0.0 {
            lambda_spread.push(0.0);
            continue;
        }
        let p = lift(&q[c], &m);
        let vals: Vec<f64> = support_points(&q[c]).iter().map(|(a, _)| lambda_at(&p, *a)).collect();
        lambda_spread.push(spread(&vals));
    }
    let condition_q = lambda_spread.iter().all(|s| *s <= tol);

    let mut max_gradient: f64 = 0.0;
    for iy in 0..grid.ny {
        for ix in 0..grid.nx {
            let c = grid.index(ix, iy);
            if rho[c] == 0.0 {
                continue;
            }
            let at = |i: usize, j: usize| {
                let k = grid.index(i, j);
                q[k].scaled(rho[k])
            };
            let (nx, ny) = (grid.nx, grid.ny);
            let gx = at((ix + 1) % nx, iy).tv_distance(&at((ix + nx - 1) % nx, iy)) / (2.0 * grid.dx);
            let gy = at(ix, (iy + 1) % ny).tv_distance(&at(ix, (iy + ny - 1) % ny)) / (2.0 * grid.dy);
            max_gradient = max_gradient.max(gx).max(gy);
        }
    }
    Ok(AnsatzReport {
        constant,
        lambda_spread,
        condition_q,
        max_gradient,
        condition_rho: max_gradient <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::unit_vector;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn deg(a: f64) -> [f64; 2] {
        unit_vector(a.to_radians())
    }

    #[test]
    fn homogeneous_state_mass_and_residual() {
        let m = SpeedMeasure::default();
        let (p, q) = construct_homogeneous(1.0, 128, &m).unwrap();
        assert_abs_diff_eq!(p.mass_bar(), 1.0, epsilon = 1e-14);
        let (rq, rp) = residual_pointwise(&p, &q, &m, DEFAULT_BASIS).unwrap();
        assert!(rq <= 1e-10 && rp <= 1e-10, "{rq} {rp}");
        let (p0, _) = construct_homogeneous(0.0, 16, &m).unwrap();
        assert_eq!(p0.mass_bar(), 0.0);
    }

    #[test]
    fn aligned_state_lambda_and_b() {
        let m = SpeedMeasure::default();
        let g = deg(30.0);
        let (p, q) = construct_aligned(g, 2.0, 32, &m).unwrap();
        for k in 0..12 {
            let th = k as f64 * 0.5;
            let t = unit_vector(th);
            assert_abs_diff_eq!(lambda_at(&p, th), 2.0 * (t[0] * g[0] + t[1] * g[1]).abs(), epsilon = 1e-14);
        }
        assert_abs_diff_eq!(alignment_b(&p, &q), 2.0, epsilon = 1e-14);
        let (rq, rp) = residual_pointwise(&p, &q, &m, DEFAULT_BASIS).unwrap();
        assert!(rq <= 1e-12 && rp <= 1e-12);
    }

    #[test]
    fn aligned_normalizes_direction() {
        let m = SpeedMeasure::default();
        let (_, q) = construct_aligned([3.0, 0.0], 1.0, 8, &m).unwrap();
        assert_abs_diff_eq!(q.atoms()[0].angle, 0.0, epsilon = 1e-15);
        assert!(construct_aligned([0.0, 0.0], 1.0, 8, &m).is_err());
    }

    #[test]
    fn projection_matrix_examples() {
        let g = build_projection_matrix(&[deg(0.0), deg(90.0)]).unwrap();
        assert_eq!(g.get(0, 1), 0.0);
        let g = build_projection_matrix(&[deg(0.0), deg(60.0), deg(120.0)]).unwrap();
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            assert_abs_diff_eq!(g.get(i, j), 0.5, epsilon = 1e-15);
        }
        assert!(matches!(
            build_projection_matrix(&[deg(10.0), deg(10.0)]),
            Err(SteadyError::DuplicateDirection(0, 1))
        ));
        assert!(build_projection_matrix(&[deg(10.0)]).is_err());
    }

    #[test]
    fn balance_verdicts() {
        let g = build_projection_matrix(&[deg(0.0), deg(45.0), deg(90.0)]).unwrap();
        let (ok, rows) = is_balanced_intersection(&g, BALANCE_TOL);
        assert!(!ok);
        let h = 2f64.sqrt() / 2.0;
        assert_abs_diff_eq!(rows[0], 1.0 + h, epsilon = 1e-15);
        assert_abs_diff_eq!(rows[1], 1.0 + 2.0 * h, epsilon = 1e-15);
        assert_abs_diff_eq!(rows[2], 1.0 + h, epsilon = 1e-15);
        let g = build_projection_matrix(&[deg(0.0), deg(60.0), deg(120.0)]).unwrap();
        assert!(is_balanced_intersection(&g, BALANCE_TOL).0);
        let g = build_projection_matrix(&[deg(0.0), deg(90.0), deg(45.0), deg(135.0)]).unwrap();
        assert!(is_balanced_intersection(&g, BALANCE_TOL).0);
    }

    #[test]
    fn two_direction_weights() {
        let spec = IntersectionSpec::from_degrees(&[0.0, 60.0], Some(vec![0.3, 0.7]), true);
        let r = classify_intersection(&spec, BALANCE_TOL).unwrap();
        assert!(r.balanced);
        assert!(!r.admissible);
        assert!(matches!(r.named, NamedCondition::TwoDirections { holds: false, .. }));
        let spec = IntersectionSpec::from_degrees(&[0.0, 60.0], None, true);
        assert!(classify_intersection(&spec, BALANCE_TOL).unwrap().admissible);
    }

    #[test]
    fn weights_must_be_normalized() {
        let spec = IntersectionSpec::from_degrees(&[0.0, 60.0], Some(vec![0.3, 0.3]), true);
        assert!(matches!(classify_intersection(&spec, BALANCE_TOL), Err(SteadyError::BadWeights(_))));
    }

    #[test]
    fn star_and_pairwise_patterns() {
        let star = IntersectionSpec::from_degrees(&[0.0, 120.0, 240.0], None, false);
        let r = classify_intersection(&star, BALANCE_TOL).unwrap();
        assert!(r.admissible);
        assert_eq!(r.named, NamedCondition::EqualAngle { holds: true });
        let four = IntersectionSpec::from_degrees(&[0.0, 90.0, 45.0, 135.0], None, true);
        let r = classify_intersection(&four, BALANCE_TOL).unwrap();
        assert!(r.admissible);
        assert_eq!(r.named, NamedCondition::Pairwise { holds: true });
    }

    #[test]
    fn unbalanced_two_direction_residual() {
        // Oracle: Λ(γ₁) - Λ(γ₂) = ϱ(2α-1)(1-|γ₁γ₂|) with ϱ = 1.
        let m = SpeedMeasure::default();
        let spec = IntersectionSpec::from_degrees(&[0.0, 60.0], Some(vec![0.3, 0.7]), true);
        let q = spec.fibre_measure(16).unwrap();
        let p = lift(&q, &m);
        let gap = (lambda_at(&p, 0.0) - lambda_at(&p, PI / 3.0)).abs();
        assert_abs_diff_eq!(gap, (2.0 * 0.3 - 1.0f64).abs() * 0.5, epsilon = 1e-15);
        let (rq, rp) = residual_pointwise(&p, &q, &m, DEFAULT_BASIS).unwrap();
        assert!(rq > 0.01, "r_q = {rq}");
        assert!(rp < 1e-14);
    }

    fn circle(n: usize, r: f64, rotate_vertex: Option<(usize, f64)>) -> Curve {
        let vertices = (0..n)
            .map(|k| {
                let a = 2.0 * PI * k as f64 / n as f64;
                let mut t = a + PI / 2.0;
                if let Some((v, d)) = rotate_vertex {
                    if v == k {
                        t += d.to_radians();
                    }
                }
                Vertex { position: [r * a.cos(), r * a.sin()], tangent: unit_vector(t) }
            })
            .collect();
        Curve { vertices, closed: true, density: 1.0 }
    }

    fn encapsulation(rotate: Option<(usize, f64)>) -> NetworkSpec {
        NetworkSpec {
            curves: vec![circle(48, 1.0, rotate)],
            patches: vec![
                Patch { label: "inside".into(), density: 0.7, bounded: true },
                Patch { label: "outside".into(), density: 0.0, bounded: false },
            ],
            tolerance: 1e-9,
        }
    }

    #[test]
    fn encapsulation_is_valid() {
        let r = validate_patchy_network(&encapsulation(None)).unwrap();
        assert!(r.is_valid(), "{:?}", r.violations);
        assert_eq!(r.vertices_checked, 48);
    }

    #[test]
    fn rotated_tangent_is_flagged() {
        let r = validate_patchy_network(&encapsulation(Some((5, 30.0)))).unwrap();
        assert_eq!(r.violations.len(), 1);
        match &r.violations[0] {
            Violation::Tangency { curve, vertex, misalignment } => {
                assert_eq!((*curve, *vertex), (0, 5));
                assert_abs_diff_eq!(*misalignment, 0.5, epsilon = 1e-12);
            }
            v => panic!("unexpected {v:?}"),
        }
    }

    #[test]
    fn unbounded_patch_mass_is_flagged() {
        let mut net = encapsulation(None);
        net.patches[1].density = 0.2;
        let r = validate_patchy_network(&net).unwrap();
        assert!(matches!(r.violations[0], Violation::UnboundedMass { .. }));
    }

    fn ray(angle_deg: f64) -> Curve {
        let d = deg(angle_deg);
        Curve {
            vertices: (0..4)
                .map(|k| Vertex { position: [k as f64 * d[0], k as f64 * d[1]], tangent: d })
                .collect(),
            closed: false,
            density: 1.0,
        }
    }

    #[test]
    fn three_pointed_star_network() {
        let net = NetworkSpec {
            curves: vec![ray(0.0), ray(120.0), ray(240.0)],
            patches: vec![],
            tolerance: 1e-9,
        };
        let r = validate_patchy_network(&net).unwrap();
        assert!(r.is_valid(), "{:?}", r.violations);
        assert_eq!(r.intersections.len(), 1);
        assert!(!r.intersections[0].1.symmetric);

        let bad = NetworkSpec {
            curves: vec![ray(0.0), ray(45.0), ray(90.0)],
            patches: vec![],
            tolerance: 1e-9,
        };
        let r = validate_patchy_network(&bad).unwrap();
        assert!(matches!(r.violations[0], Violation::Intersection { .. }));
    }

    #[test]
    fn malformed_polyline_rejected() {
        let mut c = ray(0.0);
        c.vertices.truncate(1);
        let net = NetworkSpec { curves: vec![c], patches: vec![], tolerance: 1e-9 };
        assert!(matches!(validate_patchy_network(&net), Err(SteadyError::Malformed(_))));
    }

    #[test]
    fn ansatz_pure_cases() {
        let g = Grid::new(4, 4, 1.0, 1.0).unwrap();
        let n = 64;
        let zeros = vec![0.0; 16];
        let r = check_general_ansatz(&zeros, &[0.3; 16], &[1.0; 16], &g, n, 1e-12).unwrap();
        assert_abs_diff_eq!(r.constant[0], 2.0 / PI, epsilon = 1e-15);
        assert!(r.condition_q && r.condition_rho);
        // Circle quadrature oracle for 2/π from the discrete uniform measure.
        let p = lift(&DirectionMeasure::uniform(n), &SpeedMeasure::default());
        assert_abs_diff_eq!(lambda_at(&p, 0.0), 2.0 / PI, epsilon = 1e-3);

        let r = check_general_ansatz(&[1.0; 16], &[0.3; 16], &[2.0; 16], &g, n, 1e-12).unwrap();
        assert_eq!(r.constant[0], 1.0);
        assert!(r.condition_q && r.condition_rho);
    }

    #[test]
    fn ansatz_mixture_is_not_steady() {
        let g = Grid::new(4, 4, 1.0, 1.0).unwrap();
        let r = check_general_ansatz(&[0.5; 16], &[0.0; 16], &[1.0; 16], &g, 64, 1e-8).unwrap();
        assert!(!r.condition_q);
        assert!(r.lambda_spread[0] > 0.45);
        assert!(r.condition_rho);
    }

    #[test]
    fn ansatz_gradient_detects_variation() {
        let g = Grid::new(4, 4, 1.0, 1.0).unwrap();
        let rho: Vec<f64> = (0..16).map(|c| 1.0 + (c % 4) as f64).collect();
        let r = check_general_ansatz(&[1.0; 16], &[0.0; 16], &rho, &g, 16, 1e-12).unwrap();
        assert!(!r.condition_rho);
        assert!(check_general_ansatz(&[1.5; 16], &[0.0; 16], &rho, &g, 16, 1e-12).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn projection_matrix_structure(angles in proptest::collection::vec(0.0..PI, 2..6)) {
            let dirs: Vec<[f64; 2]> = angles.iter().map(|a| unit_vector(*a)).collect();
            if let Ok(g) = build_projection_matrix(&dirs) {
                for i in 0..g.n() {
                    prop_assert_eq!(g.get(i, i), 1.0);
                    for j in 0..g.n() {
                        prop_assert_eq!(g.get(i, j), g.get(j, i));
                        prop_assert!((0.0..=1.0).contains(&g.get(i, j)));
                    }
                }
            }
        }

        #[test]
        fn balance_invariances(angles in proptest::collection::vec(0.0..PI, 2..6), rot in 0.0..6.3f64, seed in 0u64..1000) {
            let dirs: Vec<[f64; 2]> = angles.iter().map(|a| unit_vector(*a)).collect();
            let Ok(g) = build_projection_matrix(&dirs) else { return Ok(()); };
            let (base, _) = is_balanced_intersection(&g, 1e-9);
            if dirs.len() == 2 {
                prop_assert!(base);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut moved: Vec<[f64; 2]> = angles
                .iter()
                .map(|a| {
                    let flip = if rng.random::<bool>() { PI } else { 0.0 };
                    unit_vector(a + rot + flip)
                })
                .collect();
            moved.reverse();
            let g2 = build_projection_matrix(&moved).unwrap();
            let (_, r1) = is_balanced_intersection(&g, 1e-9);
            let (_, r2) = is_balanced_intersection(&g2, 1e-9);
            prop_assert!((spread(&r1) - spread(&r2)).abs() <= 1e-12);
        }

        #[test]
        fn symmetric_and_unsymmetric_agree(angles in proptest::collection::vec(0.0..PI, 2..5)) {
            let dirs: Vec<[f64; 2]> = angles.iter().map(|a| unit_vector(*a)).collect();
            if build_projection_matrix(&dirs).is_err() { return Ok(()); }
            let a = classify_intersection(&IntersectionSpec::equal(dirs.clone(), true), BALANCE_TOL).unwrap();
            let b = classify_intersection(&IntersectionSpec::equal(dirs, false), BALANCE_TOL).unwrap();
            prop_assert_eq!(a.balanced, b.balanced);
        }

        #[test]
        fn steady_constructors_have_zero_residual(rho in 0.0..10.0f64, gamma in 0.0..6.3f64) {
            let m = SpeedMeasure::default();
            let (p, q) = construct_aligned(unit_vector(gamma), rho, 16, &m).unwrap();
            let (rq, rp) = residual_pointwise(&p, &q, &m, DEFAULT_BASIS).unwrap();
            prop_assert!(rq <= 1e-12 * rho.max(1.0) && rp <= 1e-12 * rho.max(1.0));
            let (p, q) = construct_homogeneous(rho, 64, &m).unwrap();
            let (rq, rp) = residual_pointwise(&p, &q, &m, DEFAULT_BASIS).unwrap();
            prop_assert!(rq <= 1e-10 * rho.max(1.0) && rp <= 1e-10 * rho.max(1.0));
        }
    }
}
