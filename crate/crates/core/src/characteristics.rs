//! Closed-form evaluation of the cell equation along characteristics when
//! the fibre field `q(x, t)` is prescribed (no remodelling).
//!
//! Integrating `∂p/∂t + v·∇p = μ(p̄ q̃ - p)` along `x - v(t - s)` gives the
//! memory kernel
//!
//! ```text
//! K(x, t) = μ ∫₀ᵗ e^{-μ(t-s)} q̃(x - V(t-s), s, V) ds
//! ```
//!
//! and from it `p̄` and `p`. All functions work on the discrete velocity set
//! used by the solver (speed nodes × bin centres).
//!
//! The time integrals are evaluated with a product trapezoid rule: the
//! integrand is interpolated linearly between nodes and integrated exactly
//! against `μ e^{-μ(t-s)}`. For `q` constant in time this is exact.

use thiserror::Error;

use crate::exec::Exec;
use crate::kinetic::{node_velocity, CellField, Grid, SolverError};
use crate::measures::{DirectionMeasure, SpeedMeasure};

/// Smallest admissible `|1 - K|`.
pub const SINGULARITY_GUARD: f64 = 1e-10;
/// Default number of quadrature intervals in time.
pub const DEFAULT_QUAD: usize = 128;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CharError {
    #[error("quadrature needs at least 2 intervals, got {0}")]
    QuadTooCoarse(usize),
    #[error("time must be finite and nonnegative, got {0}")]
    InvalidTime(f64),
    #[error("turning rate must be finite and nonnegative, got {0}")]
    InvalidRate(f64),
    #[error("huygens_pbar requires a fibre field constant in space and time")]
    NotConstant,
    #[error("1 - K = {one_minus_k:e} at x = {x:?}, t = {t}: kernel is singular")]
    Singular { x: [f64; 2], t: f64, one_minus_k: f64 },
    #[error("layout mismatch: {0}")]
    Layout(String),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// A fibre field given as a function of position and time.
pub trait PrescribedFibreField: Sync {
    /// Number of direction bins of the returned measures.
    fn n_theta(&self) -> usize;

    /// The normalized fibre measure at `(x, t)`.
    fn measure_at(&self, x: [f64; 2], t: f64) -> DirectionMeasure;

    /// Bin masses at `(x, t)`; atoms are deposited into their bins.
    fn bins_at(&self, x: [f64; 2], t: f64) -> Vec<f64> {
        self.measure_at(x, t).binned()
    }

    fn constant_in_time(&self) -> bool {
        false
    }

    fn constant_in_space(&self) -> bool {
        false
    }
}

/// The same normalized measure everywhere and always.
#[derive(Clone, Debug)]
pub struct ConstantFibre {
    q: DirectionMeasure,
    bins: Vec<f64>,
}

impl ConstantFibre {
    pub fn new(q: DirectionMeasure) -> Self {
        let q = q.normalized();
        let bins = q.binned();
        Self { q, bins }
    }
}

impl PrescribedFibreField for ConstantFibre {
    fn n_theta(&self) -> usize {
        self.q.n_theta()
    }

    fn measure_at(&self, _x: [f64; 2], _t: f64) -> DirectionMeasure {
        self.q.clone()
    }

    fn bins_at(&self, _x: [f64; 2], _t: f64) -> Vec<f64> {
        self.bins.clone()
    }

    fn constant_in_time(&self) -> bool {
        true
    }

    fn constant_in_space(&self) -> bool {
        true
    }
}

/// A fibre field defined by a closure. The closure's result is normalized.
pub struct FnFibre<F> {
    n_theta: usize,
    f: F,
    constant_in_time: bool,
    constant_in_space: bool,
}

impl<F> FnFibre<F>
where
    F: Fn([f64; 2], f64) -> DirectionMeasure + Sync,
{
    pub fn new(n_theta: usize, f: F) -> Self {
        Self {
            n_theta,
            f,
            constant_in_time: false,
            constant_in_space: false,
        }
    }

    pub fn constant_in_time(mut self, yes: bool) -> Self {
        self.constant_in_time = yes;
        self
    }

    pub fn constant_in_space(mut self, yes: bool) -> Self {
        self.constant_in_space = yes;
        self
    }
}

impl<F> PrescribedFibreField for FnFibre<F>
where
    F: Fn([f64; 2], f64) -> DirectionMeasure + Sync,
{
    fn n_theta(&self) -> usize {
        self.n_theta
    }

    fn measure_at(&self, x: [f64; 2], t: f64) -> DirectionMeasure {
        (self.f)(x, t).normalized()
    }

    fn constant_in_time(&self) -> bool {
        self.constant_in_time
    }

    fn constant_in_space(&self) -> bool {
        self.constant_in_space
    }
}

/// Initial cell datum `p₀`, evaluated per discrete velocity node.
pub trait InitialDatum: Sync {
    fn n_speeds(&self) -> usize;
    fn n_theta(&self) -> usize;
    /// Density of node `(k, j)` at position `x`.
    fn density(&self, k: usize, j: usize, x: [f64; 2]) -> f64;
}

/// A grid field, evaluated off-grid by periodic bilinear interpolation.
#[derive(Clone, Copy, Debug)]
pub struct GridDatum<'a> {
    field: &'a CellField,
}

impl<'a> GridDatum<'a> {
    pub fn new(field: &'a CellField) -> Self {
        Self { field }
    }
}

impl InitialDatum for GridDatum<'_> {
    fn n_speeds(&self) -> usize {
        self.field.n_speeds()
    }

    fn n_theta(&self) -> usize {
        self.field.n_theta()
    }

    fn density(&self, k: usize, j: usize, x: [f64; 2]) -> f64 {
        self.field.grid().interpolate(self.field.slice(k, j), x)
    }
}

/// Analytic datum `p₀(x) = ϱ₀(x)·m ⊗ q₀`.
pub struct LiftedDatum<F> {
    rho: F,
    weights: Vec<f64>,
    bins: Vec<f64>,
}

impl<F> LiftedDatum<F>
where
    F: Fn([f64; 2]) -> f64 + Sync,
{
    pub fn new(rho: F, q: &DirectionMeasure, speeds: &SpeedMeasure) -> Self {
        Self {
            rho,
            weights: speeds.nodes().iter().map(|n| n.weight).collect(),
            bins: q.binned(),
        }
    }
}

impl<F> InitialDatum for LiftedDatum<F>
where
    F: Fn([f64; 2]) -> f64 + Sync,
{
    fn n_speeds(&self) -> usize {
        self.weights.len()
    }

    fn n_theta(&self) -> usize {
        self.bins.len()
    }

    fn density(&self, k: usize, j: usize, x: [f64; 2]) -> f64 {
        (self.rho)(x) * self.weights[k] * self.bins[j]
    }
}

fn check_time(t: f64) -> Result<(), CharError> {
    if t.is_finite() && t >= 0.0 {
        Ok(())
    } else {
        Err(CharError::InvalidTime(t))
    }
}

fn check_rate(mu: f64) -> Result<(), CharError> {
    if mu.is_finite() && mu >= 0.0 {
        Ok(())
    } else {
        Err(CharError::InvalidRate(mu))
    }
}

fn check_datum(p0: &dyn InitialDatum, speeds: &SpeedMeasure) -> Result<(), CharError> {
    if p0.n_speeds() != speeds.len() {
        return Err(CharError::Layout(format!(
            "datum has {} speed nodes, speed measure has {}",
            p0.n_speeds(),
            speeds.len()
        )));
    }
    Ok(())
}

fn check_fibre(q: &dyn PrescribedFibreField, n_theta: usize) -> Result<(), CharError> {
    if q.n_theta() != n_theta {
        return Err(CharError::Layout(format!(
            "fibre field has {} bins, datum has {}",
            q.n_theta(),
            n_theta
        )));
    }
    Ok(())
}

// (x - 1 + e^{-x}) / x, accurate for small x.
fn phi(x: f64) -> f64 {
    if x < 1e-2 {
        x * (0.5 - x * (1.0 / 6.0 - x * (1.0 / 24.0 - x * (1.0 / 120.0 - x / 720.0))))
    } else {
        (x + (-x).exp_m1()) / x
    }
}

/// Weights `w_i` with `Σ w_i g(s_i) ≈ μ ∫₀ᵗ e^{-μ(t-s)} g(s) ds` on the
/// nodes `s_i = i·t/quad`, exact for piecewise-linear `g`.
pub fn exp_trapezoid_weights(mu: f64, t: f64, quad: usize) -> Result<Vec<f64>, CharError> {
    if quad < 2 {
        return Err(CharError::QuadTooCoarse(quad));
    }
    check_time(t)?;
    check_rate(mu)?;
    let h = t / quad as f64;
    let x = mu * h;
    let mut w = vec![0.0; quad + 1];
    for i in 0..quad {
        let e_next = (-mu * (t - (i + 1) as f64 * h)).exp();
        let d = -e_next * (-x).exp_m1(); // E_{i+1} - E_i
        let b = e_next * phi(x);
        w[i] += d - b;
        w[i + 1] += b;
    }
    Ok(w)
}

/// Position `x - v_kj·τ`.
fn back(speeds: &SpeedMeasure, k: usize, j: usize, n_theta: usize, x: [f64; 2], tau: f64) -> [f64; 2] {
    let v = node_velocity(speeds, k, j, n_theta, 1.0);
    [x[0] - v[0] * tau, x[1] - v[1] * tau]
}

/// `∫_V q̃(x - Vτ, s, dv)`, the lifted fibre mass seen along all characteristics.
fn lifted_mass(q: &dyn PrescribedFibreField, speeds: &SpeedMeasure, x: [f64; 2], s: f64, tau: f64) -> f64 {
    let n = q.n_theta();
    if q.constant_in_space() {
        return q.bins_at(x, s).iter().sum::<f64>() * speeds.nodes().iter().map(|n| n.weight).sum::<f64>();
    }
    let mut acc = 0.0;
    for (k, node) in speeds.nodes().iter().enumerate() {
        for j in 0..n {
            let y = back(speeds, k, j, n, x, tau);
            acc += node.weight * q.bins_at(y, s)[j];
        }
    }
    acc
}

/// The memory kernel `K(x, t)`, in `[0, 1)`.
pub fn kernel_k(
    x: [f64; 2],
    t: f64,
    q: &dyn PrescribedFibreField,
    mu: f64,
    speeds: &SpeedMeasure,
    quad: usize,
) -> Result<f64, CharError> {
    let w = exp_trapezoid_weights(mu, t, quad)?;
    if t == 0.0 || mu == 0.0 {
        return Ok(0.0);
    }
    let h = t / quad as f64;
    if q.constant_in_time() && q.constant_in_space() {
        let g = lifted_mass(q, speeds, x, 0.0, 0.0);
        return Ok(g * w.iter().sum::<f64>());
    }
    Ok(w
        .iter()
        .enumerate()
        .map(|(i, wi)| {
            let s = i as f64 * h;
            wi * lifted_mass(q, speeds, x, s, t - s)
        })
        .sum())
}

/// `p₀(x - Vt, V) = Σ_kj p₀_kj(x - t·v_kj)`.
pub fn shifted_mass(p0: &dyn InitialDatum, speeds: &SpeedMeasure, x: [f64; 2], t: f64) -> f64 {
    let n = p0.n_theta();
    let mut acc = 0.0;
    for k in 0..p0.n_speeds() {
        for j in 0..n {
            acc += p0.density(k, j, back(speeds, k, j, n, x, t));
        }
    }
    acc
}

/// Mass density for a fibre field constant in space and time, read off the
/// initial datum on the domain of dependence `{x - tv : v ∈ V}`.
pub fn huygens_pbar(
    x: [f64; 2],
    t: f64,
    p0: &dyn InitialDatum,
    q: &dyn PrescribedFibreField,
    speeds: &SpeedMeasure,
) -> Result<f64, CharError> {
    if !(q.constant_in_time() && q.constant_in_space()) {
        return Err(CharError::NotConstant);
    }
    check_time(t)?;
    check_datum(p0, speeds)?;
    Ok(shifted_mass(p0, speeds, x, t))
}

/// `p̄ = e^{-μt} p₀(x - Vt, V) / (1 - K(x, t))`.
pub fn pbar_general(
    x: [f64; 2],
    t: f64,
    p0: &dyn InitialDatum,
    q: &dyn PrescribedFibreField,
    mu: f64,
    speeds: &SpeedMeasure,
    quad: usize,
) -> Result<f64, CharError> {
    check_datum(p0, speeds)?;
    check_fibre(q, p0.n_theta())?;
    let k = kernel_k(x, t, q, mu, speeds, quad)?;
    let one_minus_k = 1.0 - k;
    if one_minus_k.abs() <= SINGULARITY_GUARD {
        return Err(CharError::Singular { x, t, one_minus_k });
    }
    Ok((-mu * t).exp() * shifted_mass(p0, speeds, x, t) / one_minus_k)
}

/// Per-node values `p_kj(x, t)`, laid out `[k·n_theta + j]`.
pub fn explicit_solution_nodes(
    x: [f64; 2],
    t: f64,
    p0: &dyn InitialDatum,
    q: &dyn PrescribedFibreField,
    mu: f64,
    speeds: &SpeedMeasure,
    quad: usize,
) -> Result<Vec<f64>, CharError> {
    check_datum(p0, speeds)?;
    let n = p0.n_theta();
    check_fibre(q, n)?;
    let w = exp_trapezoid_weights(mu, t, quad)?;
    let k_val = kernel_k(x, t, q, mu, speeds, quad)?;
    let one_minus_k = 1.0 - k_val;
    if one_minus_k.abs() <= SINGULARITY_GUARD {
        return Err(CharError::Singular { x, t, one_minus_k });
    }
    let decay = (-mu * t).exp();
    let amp = decay * shifted_mass(p0, speeds, x, t) / one_minus_k;
    let h = t / quad as f64;
    let frozen = q.constant_in_time() && q.constant_in_space();
    let fixed = if frozen { Some(q.bins_at(x, 0.0)) } else { None };
    let wsum: f64 = w.iter().sum();
    let mut out = Vec::with_capacity(speeds.len() * n);
    for (k, node) in speeds.nodes().iter().enumerate() {
        for j in 0..n {
            let free = decay * p0.density(k, j, back(speeds, k, j, n, x, t));
            // μ ∫ e^{-μ(t-s)} q̃_kj(x - v_kj (t-s), s) ds
            let memory = match &fixed {
                Some(bins) => node.weight * bins[j] * wsum,
                None if mu == 0.0 || t == 0.0 => 0.0,
                None => w
                    .iter()
                    .enumerate()
                    .map(|(i, wi)| {
                        let s = i as f64 * h;
                        let y = back(speeds, k, j, n, x, t - s);
                        wi * node.weight * q.bins_at(y, s)[j]
                    })
                    .sum(),
            };
            out.push(free + amp * memory);
        }
    }
    Ok(out)
}

fn nodes_to_measure(values: Vec<f64>, speeds: &SpeedMeasure, n_theta: usize) -> crate::VelocityMeasure {
    use crate::measures::VelocityComponent;
    let comps = speeds
        .nodes()
        .iter()
        .zip(values.chunks(n_theta))
        .map(|(node, bins)| VelocityComponent {
            speed: node.speed,
            directions: DirectionMeasure::from_bins(bins.iter().map(|v| v.max(0.0)).collect())
                .expect("finite nonnegative bins"),
        })
        .collect();
    crate::VelocityMeasure::new(comps).expect("speeds are positive")
}

/// The full velocity-resolved solution `p(x, t, ·)` for a prescribed `q`.
pub fn explicit_solution(
    x: [f64; 2],
    t: f64,
    p0: &dyn InitialDatum,
    q: &dyn PrescribedFibreField,
    mu: f64,
    speeds: &SpeedMeasure,
    quad: usize,
) -> Result<crate::VelocityMeasure, CharError> {
    let nodes = explicit_solution_nodes(x, t, p0, q, mu, speeds, quad)?;
    Ok(nodes_to_measure(nodes, speeds, p0.n_theta()))
}

/// Per-node values of the constant-`q` solution
/// `p = e^{-μt} p₀(x - t·v) + (1 - e^{-μt}) p̄(x, t) q̃`.
pub fn constant_q_solution_nodes(
    x: [f64; 2],
    t: f64,
    p0: &dyn InitialDatum,
    q: &DirectionMeasure,
    mu: f64,
    speeds: &SpeedMeasure,
) -> Result<Vec<f64>, CharError> {
    check_time(t)?;
    check_rate(mu)?;
    check_datum(p0, speeds)?;
    let n = p0.n_theta();
    let bins = q.normalized().binned();
    if bins.len() != n {
        return Err(CharError::Layout(format!(
            "fibre measure has {} bins, datum has {}",
            bins.len(),
            n
        )));
    }
    let keep = (-mu * t).exp();
    let gain = -(-mu * t).exp_m1();
    let pbar = shifted_mass(p0, speeds, x, t);
    let mut out = Vec::with_capacity(speeds.len() * n);
    for (k, node) in speeds.nodes().iter().enumerate() {
        for j in 0..n {
            let free = p0.density(k, j, back(speeds, k, j, n, x, t));
            out.push(keep * free + gain * pbar * node.weight * bins[j]);
        }
    }
    Ok(out)
}

pub fn constant_q_solution(
    x: [f64; 2],
    t: f64,
    p0: &dyn InitialDatum,
    q: &DirectionMeasure,
    mu: f64,
    speeds: &SpeedMeasure,
) -> Result<crate::VelocityMeasure, CharError> {
    let nodes = constant_q_solution_nodes(x, t, p0, q, mu, speeds)?;
    Ok(nodes_to_measure(nodes, speeds, p0.n_theta()))
}

/// [`huygens_pbar`] at every cell centre of `grid`.
pub fn huygens_pbar_grid(
    grid: &Grid,
    t: f64,
    p0: &dyn InitialDatum,
    q: &dyn PrescribedFibreField,
    speeds: &SpeedMeasure,
    exec: Exec,
) -> Result<Vec<f64>, CharError> {
    // Validate once; the per-cell calls cannot fail afterwards.
    huygens_pbar(grid.center(0), t, p0, q, speeds)?;
    Ok(exec.map_collect(grid.cells(), |c| shifted_mass(p0, speeds, grid.center(c), t)))
}

/// [`constant_q_solution`] at every cell centre, as a solver field.
pub fn constant_q_solution_grid(
    grid: &Grid,
    t: f64,
    p0: &dyn InitialDatum,
    q: &DirectionMeasure,
    mu: f64,
    speeds: &SpeedMeasure,
    exec: Exec,
) -> Result<CellField, CharError> {
    let n = p0.n_theta();
    let per_cell: Vec<Result<Vec<f64>, CharError>> = exec.map_collect(grid.cells(), |c| {
        constant_q_solution_nodes(grid.center(c), t, p0, q, mu, speeds)
    });
    let cells = grid.cells();
    let mut data = vec![0.0; cells * speeds.len() * n];
    for (c, vals) in per_cell.into_iter().enumerate() {
        for (s, v) in vals?.into_iter().enumerate() {
            data[s * cells + c] = v;
        }
    }
    Ok(CellField::from_data(*grid, speeds.len(), n, data)?)
}
