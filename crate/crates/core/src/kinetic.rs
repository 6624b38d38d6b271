//! Split-step solver for the coupled cell/fibre system on a periodic grid.
//!
//! One step is built from three sub-steps, each exact for its frozen
//! sub-problem:
//!
//! * [`advect_step`]: each discrete velocity slice is translated by
//!   `-(v/ε)·dt` with periodic bilinear interpolation;
//! * [`turning_step`]: per-cell exponential relaxation towards `p̄ q̃`;
//! * [`fibre_step`]: normalized-exponential (replicator) update of `q` with
//!   the fitness `Λ(p)` frozen over the step.
//!
//! The discrete velocity set is the product of the speed nodes and the
//! angular bin centres, so the lifted fibre measure is exact on the grid.

use std::f64::consts::TAU;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::exec::Exec;
use crate::measures::{
    bin_center, unit_vector, DirectionMeasure, MeasureError, SpeedMeasure, Sym2,
    VelocityComponent, VelocityMeasure,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid parameter `{name}` = {value}: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error("per-step shift {shift} exceeds half the domain ({limit})")]
    ShiftTooLarge { shift: f64, limit: f64 },
    #[error("field layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("numerical abort at step {step} (t = {time}): {detail}")]
    NumericalAbort { step: u64, time: f64, detail: String },
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

/// Uniform periodic grid (a flat torus). Cell `(ix, iy)` is centred on
/// `((ix + ½)·dx, (iy + ½)·dy)`; storage is row-major with `ix` fastest.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dy: f64,
}

impl Grid {
    pub fn new(nx: usize, ny: usize, dx: f64, dy: f64) -> Result<Self, SolverError> {
        if nx < 4 || ny < 4 {
            return Err(SolverError::InvalidGrid(format!(
                "need at least 4 cells per axis, got {nx}x{ny}"
            )));
        }
        if !(dx.is_finite() && dx > 0.0 && dy.is_finite() && dy > 0.0) {
            return Err(SolverError::InvalidGrid(format!(
                "cell sizes must be positive, got dx={dx}, dy={dy}"
            )));
        }
        Ok(Self { nx, ny, dx, dy })
    }

    pub fn cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn cell_area(&self) -> f64 {
        self.dx * self.dy
    }

    pub fn lx(&self) -> f64 {
        self.nx as f64 * self.dx
    }

    pub fn ly(&self) -> f64 {
        self.ny as f64 * self.dy
    }

    pub fn index(&self, ix: usize, iy: usize) -> usize {
        iy * self.nx + ix
    }

    pub fn center(&self, cell: usize) -> [f64; 2] {
        let ix = cell % self.nx;
        let iy = cell / self.nx;
        [(ix as f64 + 0.5) * self.dx, (iy as f64 + 0.5) * self.dy]
    }

    /// Shortest periodic displacement from `a` to `b`.
    pub fn periodic_delta(&self, a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
        let wrap = |d: f64, l: f64| d - l * (d / l).round();
        [wrap(b[0] - a[0], self.lx()), wrap(b[1] - a[1], self.ly())]
    }

    /// Bilinear interpolation of a cell-centred periodic field at `x`.
    pub fn interpolate(&self, field: &[f64], x: [f64; 2]) -> f64 {
        debug_assert_eq!(field.len(), self.cells());
        let gx = x[0] / self.dx - 0.5;
        let gy = x[1] / self.dy - 0.5;
        let fx = gx.floor();
        let fy = gy.floor();
        let ax = gx - fx;
        let ay = gy - fy;
        let nx = self.nx as i64;
        let ny = self.ny as i64;
        let i0 = (fx as i64).rem_euclid(nx) as usize;
        let i1 = (fx as i64 + 1).rem_euclid(nx) as usize;
        let j0 = (fy as i64).rem_euclid(ny) as usize;
        let j1 = (fy as i64 + 1).rem_euclid(ny) as usize;
        let r0 = j0 * self.nx;
        let r1 = j1 * self.nx;
        (1.0 - ay) * ((1.0 - ax) * field[r0 + i0] + ax * field[r0 + i1])
            + ay * ((1.0 - ax) * field[r1 + i0] + ax * field[r1 + i1])
    }
}

/// Velocity of node `(k, j)` in transport units, `(s_k/ε)·θ_j`.
pub fn node_velocity(speeds: &SpeedMeasure, k: usize, j: usize, n_theta: usize, epsilon: f64) -> [f64; 2] {
    let c = speeds.nodes()[k].speed / epsilon;
    let d = unit_vector(bin_center(j, n_theta));
    [c * d[0], c * d[1]]
}

/// Cell velocity densities: nonnegative mass per (speed node, direction bin)
/// per grid cell. Stored slice-major, `data[(k·n_theta + j)·cells + cell]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CellField {
    grid: Grid,
    n_speeds: usize,
    n_theta: usize,
    data: Vec<f64>,
}

impl CellField {
    pub fn zeros(grid: Grid, n_speeds: usize, n_theta: usize) -> Self {
        Self {
            grid,
            n_speeds,
            n_theta,
            data: vec![0.0; grid.cells() * n_speeds * n_theta],
        }
    }

    pub fn from_data(
        grid: Grid,
        n_speeds: usize,
        n_theta: usize,
        data: Vec<f64>,
    ) -> Result<Self, SolverError> {
        if data.len() != grid.cells() * n_speeds * n_theta {
            return Err(SolverError::LayoutMismatch(format!(
                "expected {} values, got {}",
                grid.cells() * n_speeds * n_theta,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(SolverError::InvalidParameter {
                name: "cell density",
                value: *v,
                reason: "must be finite and nonnegative",
            });
        }
        Ok(Self {
            grid,
            n_speeds,
            n_theta,
            data,
        })
    }

    /// `p(x) = ϱ(x)·m ⊗ q(x)`.
    pub fn from_density(rho: &[f64], q: &FibreField, speeds: &SpeedMeasure) -> Result<Self, SolverError> {
        let grid = q.grid;
        if rho.len() != grid.cells() {
            return Err(SolverError::LayoutMismatch(format!(
                "density has {} cells, grid has {}",
                rho.len(),
                grid.cells()
            )));
        }
        let n_theta = q.n_theta;
        let mut out = Self::zeros(grid, speeds.len(), n_theta);
        let cells = grid.cells();
        for (k, node) in speeds.nodes().iter().enumerate() {
            for j in 0..n_theta {
                let s = out.slice_mut(k, j);
                for c in 0..cells {
                    s[c] = rho[c] * node.weight * q.cell(c)[j];
                }
            }
        }
        Ok(out)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn n_speeds(&self) -> usize {
        self.n_speeds
    }

    pub fn n_theta(&self) -> usize {
        self.n_theta
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn slice(&self, k: usize, j: usize) -> &[f64] {
        let n = self.grid.cells();
        let s = (k * self.n_theta + j) * n;
        &self.data[s..s + n]
    }

    pub fn slice_mut(&mut self, k: usize, j: usize) -> &mut [f64] {
        let n = self.grid.cells();
        let s = (k * self.n_theta + j) * n;
        &mut self.data[s..s + n]
    }

    pub fn value(&self, k: usize, j: usize, cell: usize) -> f64 {
        self.data[(k * self.n_theta + j) * self.grid.cells() + cell]
    }

    /// Mass density `p̄` per cell.
    pub fn pbar(&self, exec: Exec) -> Vec<f64> {
        let cells = self.grid.cells();
        let slices = self.n_speeds * self.n_theta;
        let data = &self.data;
        exec.map_collect(cells, |c| (0..slices).map(|s| data[s * cells + c]).sum())
    }

    /// Direction marginal `Σ_k p_kj`, laid out `[j][cell]`.
    pub fn direction_marginal(&self) -> Vec<f64> {
        let cells = self.grid.cells();
        let mut out = vec![0.0; cells * self.n_theta];
        for k in 0..self.n_speeds {
            for j in 0..self.n_theta {
                let src = self.slice(k, j);
                let dst = &mut out[j * cells..(j + 1) * cells];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        out
    }

    /// `∫ p̄ dx`.
    pub fn total_mass(&self) -> f64 {
        self.data.iter().sum::<f64>() * self.grid.cell_area()
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            data: self.data.iter().map(|v| c * v).collect(),
            ..self.clone()
        }
    }

    /// The velocity measure held by one cell.
    pub fn cell_measure(&self, cell: usize, speeds: &SpeedMeasure) -> VelocityMeasure {
        let comps = speeds
            .nodes()
            .iter()
            .enumerate()
            .map(|(k, node)| VelocityComponent {
                speed: node.speed,
                directions: DirectionMeasure::from_bins(
                    (0..self.n_theta).map(|j| self.value(k, j, cell)).collect(),
                )
                .expect("cell field is nonnegative"),
            })
            .collect();
        VelocityMeasure::new(comps).expect("speeds are positive")
    }

    fn check_speeds(&self, speeds: &SpeedMeasure) -> Result<(), SolverError> {
        if speeds.len() != self.n_speeds {
            return Err(SolverError::LayoutMismatch(format!(
                "field has {} speed nodes, speed measure has {}",
                self.n_speeds,
                speeds.len()
            )));
        }
        Ok(())
    }
}

/// Fibre orientation per cell as bin masses, laid out `[cell][j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FibreField {
    grid: Grid,
    n_theta: usize,
    data: Vec<f64>,
}

impl FibreField {
    pub fn uniform(grid: Grid, n_theta: usize) -> Self {
        Self::from_measure(grid, &DirectionMeasure::uniform(n_theta))
    }

    /// The same direction measure in every cell. Atoms are deposited into
    /// their containing bins.
    pub fn from_measure(grid: Grid, q: &DirectionMeasure) -> Self {
        if !q.atoms().is_empty() {
            warn!(
                "fibre measure has {} atoms; depositing them into their {}-bin cells",
                q.atoms().len(),
                q.n_theta()
            );
        }
        let bins = q.binned();
        let n_theta = bins.len();
        let mut data = Vec::with_capacity(grid.cells() * n_theta);
        for _ in 0..grid.cells() {
            data.extend_from_slice(&bins);
        }
        Self { grid, n_theta, data }
    }

    /// Per-cell bin masses; each cell must be a probability vector within 1e-12.
    pub fn from_data(grid: Grid, n_theta: usize, data: Vec<f64>) -> Result<Self, SolverError> {
        if n_theta == 0 || data.len() != grid.cells() * n_theta {
            return Err(SolverError::LayoutMismatch(format!(
                "expected {} fibre values, got {}",
                grid.cells() * n_theta,
                data.len()
            )));
        }
        for cell in data.chunks(n_theta) {
            if let Some(v) = cell.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
                return Err(SolverError::InvalidParameter {
                    name: "fibre mass",
                    value: *v,
                    reason: "must be finite and nonnegative",
                });
            }
            let s: f64 = cell.iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(SolverError::InvalidParameter {
                    name: "fibre normalization",
                    value: s,
                    reason: "each cell must carry unit mass",
                });
            }
        }
        Ok(Self { grid, n_theta, data })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn n_theta(&self) -> usize {
        self.n_theta
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn cell(&self, cell: usize) -> &[f64] {
        &self.data[cell * self.n_theta..(cell + 1) * self.n_theta]
    }

    pub fn cell_measure(&self, cell: usize) -> DirectionMeasure {
        DirectionMeasure::from_bins(self.cell(cell).to_vec()).expect("fibre field is nonnegative")
    }

    /// Smallest and largest per-cell total mass.
    pub fn normalization_range(&self) -> (f64, f64) {
        self.data
            .chunks(self.n_theta)
            .map(|c| c.iter().sum::<f64>())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
                (lo.min(s), hi.max(s))
            })
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// `𝕍(q)` of one cell.
    pub fn covariance(&self, cell: usize) -> Sym2 {
        let mut acc = Sym2::default();
        for (j, w) in self.cell(cell).iter().enumerate() {
            acc.add_scaled(Sym2::outer(unit_vector(bin_center(j, self.n_theta))), *w);
        }
        acc
    }

    /// Alignment order parameter per cell (largest eigenvalue of `𝕍(q)` - ½).
    pub fn order_parameter(&self) -> Vec<f64> {
        (0..self.grid.cells())
            .map(|c| self.covariance(c).deviation())
            .collect()
    }

    /// Mean fibre axis per cell, as an angle in `(-π/2, π/2]`.
    pub fn mean_direction(&self) -> Vec<f64> {
        (0..self.grid.cells())
            .map(|c| self.covariance(c).principal_angle())
            .collect()
    }
}

/// Operator splitting order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Splitting {
    /// advect(dt), turn(dt), fibre(dt)
    #[default]
    Lie,
    /// advect(dt/2), turn(dt), fibre(dt), advect(dt/2)
    Strang,
}

/// Model and discretization parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SimParams {
    /// Turning rate `μ`.
    pub mu: f64,
    /// Fibre degradation rate `κ`.
    pub kappa: f64,
    /// Parabolic scaling parameter; 1 gives the unscaled system.
    pub epsilon: f64,
    pub dt: f64,
    pub speeds: SpeedMeasure,
    pub splitting: Splitting,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            mu: 1.0,
            kappa: 5.0,
            epsilon: 1.0,
            dt: 0.1,
            speeds: SpeedMeasure::default(),
            splitting: Splitting::Lie,
        }
    }
}

fn positive(name: &'static str, value: f64) -> Result<(), SolverError> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(SolverError::InvalidParameter {
            name,
            value,
            reason: "must be finite and positive",
        })
    }
}

fn nonnegative(name: &'static str, value: f64) -> Result<(), SolverError> {
    if value.is_finite() && value >= 0.0 {
        Ok(())
    } else {
        Err(SolverError::InvalidParameter {
            name,
            value,
            reason: "must be finite and nonnegative",
        })
    }
}

impl SimParams {
    /// Checks parameter ranges and that one transport step stays within half
    /// the periodic domain.
    pub fn validate(&self, grid: &Grid) -> Result<(), SolverError> {
        // μ = 0 or κ = 0 switch the corresponding process off.
        nonnegative("mu", self.mu)?;
        nonnegative("kappa", self.kappa)?;
        positive("epsilon", self.epsilon)?;
        positive("dt", self.dt)?;
        let shift = self.dt * self.speeds.max_speed() / self.epsilon;
        let limit = 0.5 * grid.lx().min(grid.ly());
        if shift > limit {
            return Err(SolverError::ShiftTooLarge { shift, limit });
        }
        Ok(())
    }

    /// Effective turning rate `μ/ε²`.
    pub fn turning_rate(&self) -> f64 {
        self.mu / (self.epsilon * self.epsilon)
    }
}

fn shift_periodic(src: &[f64], dst: &mut [f64], nx: usize, ny: usize, sx: f64, sy: f64) {
    // dst(x) = src(x - s) with s in cells: split s = n + a, a ∈ [0, 1).
    let fx = sx.floor();
    let fy = sy.floor();
    let ax = sx - fx;
    let ay = sy - fy;
    let (nxi, nyi) = (nx as i64, ny as i64);
    let bx = fx as i64;
    let by = fy as i64;
    let col0: Vec<usize> = (0..nxi).map(|i| (i - bx).rem_euclid(nxi) as usize).collect();
    let col1: Vec<usize> = (0..nxi).map(|i| (i - bx - 1).rem_euclid(nxi) as usize).collect();
    for iy in 0..ny {
        let r0 = (iy as i64 - by).rem_euclid(nyi) as usize * nx;
        let r1 = (iy as i64 - by - 1).rem_euclid(nyi) as usize * nx;
        let row = &mut dst[iy * nx..(iy + 1) * nx];
        for ix in 0..nx {
            let a = (1.0 - ax) * src[r0 + col0[ix]] + ax * src[r0 + col1[ix]];
            let b = (1.0 - ax) * src[r1 + col0[ix]] + ax * src[r1 + col1[ix]];
            row[ix] = (1.0 - ay) * a + ay * b;
        }
    }
}

/// Free transport over `dt`: slice `(k, j)` is translated by
/// `(s_k/ε)·θ_j·dt` with periodic bilinear interpolation.
pub fn advect_step(
    p: &CellField,
    dt: f64,
    speeds: &SpeedMeasure,
    epsilon: f64,
    exec: Exec,
) -> Result<CellField, SolverError> {
    p.check_speeds(speeds)?;
    nonnegative("dt", dt)?;
    positive("epsilon", epsilon)?;
    let grid = p.grid;
    let limit_x = 0.5 * grid.lx();
    let limit_y = 0.5 * grid.ly();
    let n_theta = p.n_theta;
    let mut shifts = Vec::with_capacity(speeds.len() * n_theta);
    for k in 0..speeds.len() {
        for j in 0..n_theta {
            let v = node_velocity(speeds, k, j, n_theta, epsilon);
            let (ddx, ddy) = (v[0] * dt, v[1] * dt);
            if ddx.abs() > limit_x {
                return Err(SolverError::ShiftTooLarge { shift: ddx.abs(), limit: limit_x });
            }
            if ddy.abs() > limit_y {
                return Err(SolverError::ShiftTooLarge { shift: ddy.abs(), limit: limit_y });
            }
            shifts.push((ddx / grid.dx, ddy / grid.dy));
        }
    }
    let mut out = CellField::zeros(grid, p.n_speeds, n_theta);
    let cells = grid.cells();
    exec.for_each_chunk_mut(&mut out.data, cells, |s, dst| {
        let (sx, sy) = shifts[s];
        let src = &p.data[s * cells..(s + 1) * cells];
        if sx == 0.0 && sy == 0.0 {
            dst.copy_from_slice(src);
        } else {
            shift_periodic(src, dst, grid.nx, grid.ny, sx, sy);
        }
    });
    Ok(out)
}

/// Exact relaxation of `∂p/∂t = (μ/ε²)(p̄ q̃ - p)` over `dt` with `q` frozen:
/// `p ← e^{-(μ/ε²)dt} p + (1 - e^{-(μ/ε²)dt}) p̄ q̃`.
pub fn turning_step(
    p: &CellField,
    q: &FibreField,
    dt: f64,
    mu: f64,
    epsilon: f64,
    speeds: &SpeedMeasure,
    exec: Exec,
) -> Result<CellField, SolverError> {
    p.check_speeds(speeds)?;
    if q.n_theta != p.n_theta || q.grid != p.grid {
        return Err(SolverError::LayoutMismatch(
            "fibre and cell fields use different grids or bins".into(),
        ));
    }
    if dt.is_nan() || dt < 0.0 {
        return Err(SolverError::InvalidParameter {
            name: "dt",
            value: dt,
            reason: "must be nonnegative",
        });
    }
    let rate = mu / (epsilon * epsilon);
    let x = rate * dt;
    let keep = (-x).exp();
    let gain = -(-x).exp_m1();
    let pbar = p.pbar(exec);
    let cells = p.grid.cells();
    let n_theta = p.n_theta;
    let mut out = CellField::zeros(p.grid, p.n_speeds, n_theta);
    exec.for_each_chunk_mut(&mut out.data, cells, |s, dst| {
        let k = s / n_theta;
        let j = s % n_theta;
        let m = speeds.nodes()[k].weight;
        let src = &p.data[s * cells..(s + 1) * cells];
        for c in 0..cells {
            dst[c] = keep * src[c] + gain * pbar[c] * m * q.data[c * n_theta + j];
        }
    });
    Ok(out)
}

/// Precomputed `|θ_i · θ_l|` on the bin centres, used to evaluate `Λ(p)` on bins.
#[derive(Clone, Debug)]
pub struct AlignmentKernel {
    n_theta: usize,
    weights: Vec<f64>,
}

impl AlignmentKernel {
    pub fn new(n_theta: usize) -> Self {
        let u0 = unit_vector(0.0);
        let weights = (0..n_theta)
            .map(|d| {
                let u = unit_vector(bin_center(d, n_theta));
                (u0[0] * u[0] + u0[1] * u[1]).abs()
            })
            .collect();
        Self { n_theta, weights }
    }

    /// `Λ_j = Σ_l P_l |θ_j · θ_l|` for a direction marginal `P`.
    pub fn lambda(&self, marginal: &[f64], out: &mut [f64]) {
        let n = self.n_theta;
        if n.is_multiple_of(2) {
            // |θ·ψ| is invariant under ψ ↦ ψ + π: fold antipodal bins first.
            let h = n / 2;
            let folded: Vec<f64> = (0..h).map(|l| marginal[l] + marginal[l + h]).collect();
            for j in 0..h {
                let mut acc = 0.0;
                for (l, f) in folded.iter().enumerate() {
                    acc += f * self.weights[(j + n - l) % n];
                }
                out[j] = acc;
                out[j + h] = acc;
            }
        } else {
            for j in 0..n {
                out[j] = marginal
                    .iter()
                    .enumerate()
                    .map(|(l, p)| p * self.weights[(j + n - l) % n])
                    .sum();
            }
        }
    }
}

/// Replicator update of one probability vector under frozen fitness:
/// `q_j ← q_j e^{κ dt Λ_j} / Σ_l q_l e^{κ dt Λ_l}`.
pub fn replicator_update(q: &mut [f64], fitness: &[f64], kappa_dt: f64) {
    let top = fitness.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (w, f) in q.iter_mut().zip(fitness) {
        *w *= (kappa_dt * (f - top)).exp();
        total += *w;
    }
    if total > 0.0 {
        let inv = 1.0 / total;
        for w in q.iter_mut() {
            *w *= inv;
        }
    }
}

/// Fibre remodelling `∂q/∂t = κ(Λ(p) - B(p, q)) q` over `dt` with `p`
/// frozen. Cells with `p̄ = 0` are left unchanged.
pub fn fibre_step(
    q: &FibreField,
    p: &CellField,
    dt: f64,
    kappa: f64,
    exec: Exec,
) -> Result<FibreField, SolverError> {
    if q.n_theta != p.n_theta || q.grid != p.grid {
        return Err(SolverError::LayoutMismatch(
            "fibre and cell fields use different grids or bins".into(),
        ));
    }
    nonnegative("dt", dt)?;
    let mut out = q.clone();
    let kdt = kappa * dt;
    if kdt == 0.0 {
        return Ok(out);
    }
    let n_theta = q.n_theta;
    let cells = q.grid.cells();
    let marginal = p.direction_marginal();
    let kernel = AlignmentKernel::new(n_theta);
    // Chunks of cells keep the scratch buffers per task.
    let block = 256usize;
    exec.for_each_chunk_mut(&mut out.data, block * n_theta, |b, chunk| {
        let mut local = vec![0.0; n_theta];
        let mut lambda = vec![0.0; n_theta];
        for (i, qc) in chunk.chunks_mut(n_theta).enumerate() {
            let c = b * block + i;
            let mut mass = 0.0;
            for j in 0..n_theta {
                local[j] = marginal[j * cells + c];
                mass += local[j];
            }
            if mass == 0.0 {
                continue;
            }
            kernel.lambda(&local, &mut lambda);
            replicator_update(qc, &lambda, kdt);
        }
    });
    Ok(out)
}

/// Summary of the structural invariants of one state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Invariants {
    pub total_mass: f64,
    pub q_norm_min: f64,
    pub q_norm_max: f64,
    pub p_min: f64,
    pub q_min: f64,
}

/// Solver state at one time level.
#[derive(Clone, Debug, PartialEq)]
pub struct SimState {
    pub time: f64,
    pub step: u64,
    pub p: CellField,
    pub q: FibreField,
}

impl SimState {
    pub fn new(p: CellField, q: FibreField) -> Result<Self, SolverError> {
        if p.grid != q.grid || p.n_theta != q.n_theta {
            return Err(SolverError::LayoutMismatch(
                "cell and fibre fields must share grid and bins".into(),
            ));
        }
        Ok(Self {
            time: 0.0,
            step: 0,
            p,
            q,
        })
    }

    pub fn invariants(&self) -> Invariants {
        let (q_norm_min, q_norm_max) = self.q.normalization_range();
        Invariants {
            total_mass: self.p.total_mass(),
            q_norm_min,
            q_norm_max,
            p_min: self.p.min_value(),
            q_min: self.q.min_value(),
        }
    }

    fn check(&self) -> Result<(), SolverError> {
        let abort = |detail: String| SolverError::NumericalAbort {
            step: self.step,
            time: self.time,
            detail,
        };
        if let Some(i) = self.p.data.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(abort(format!(
                "cell density {} at flat index {i}",
                self.p.data[i]
            )));
        }
        if let Some(i) = self.q.data.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(abort(format!(
                "fibre mass {} at flat index {i}",
                self.q.data[i]
            )));
        }
        Ok(())
    }
}

/// A run that stopped on a numerical fault, with the last state that passed
/// the checks.
#[derive(Debug, Clone)]
pub struct AbortedRun {
    pub error: SolverError,
    pub last_good: SimState,
}

/// Time stepper for the coupled system.
#[derive(Clone, Debug)]
pub struct KineticSolver {
    pub params: SimParams,
    pub exec: Exec,
}

impl KineticSolver {
    pub fn new(params: SimParams, exec: Exec) -> Self {
        Self { params, exec }
    }

    /// Advances `state` by `dt`.
    pub fn step_by(&self, state: &SimState, dt: f64) -> Result<SimState, SolverError> {
        let prm = &self.params;
        let ex = self.exec;
        let (p, q) = match prm.splitting {
            Splitting::Lie => {
                let p = advect_step(&state.p, dt, &prm.speeds, prm.epsilon, ex)?;
                let p = turning_step(&p, &state.q, dt, prm.mu, prm.epsilon, &prm.speeds, ex)?;
                let q = fibre_step(&state.q, &p, dt, prm.kappa, ex)?;
                (p, q)
            }
            Splitting::Strang => {
                let p = advect_step(&state.p, 0.5 * dt, &prm.speeds, prm.epsilon, ex)?;
                let p = turning_step(&p, &state.q, dt, prm.mu, prm.epsilon, &prm.speeds, ex)?;
                let q = fibre_step(&state.q, &p, dt, prm.kappa, ex)?;
                let p = advect_step(&p, 0.5 * dt, &prm.speeds, prm.epsilon, ex)?;
                (p, q)
            }
        };
        let next = SimState {
            time: state.time + dt,
            step: state.step + 1,
            p,
            q,
        };
        next.check()?;
        Ok(next)
    }

    /// One step of the configured `dt`.
    pub fn step(&self, state: &SimState) -> Result<SimState, SolverError> {
        self.step_by(state, self.params.dt)
    }

    /// Integrates until `t_end`. `observer` sees the initial state, every
    /// `snapshot_every`-th state and the final state. The last step is
    /// shortened if `t_end` is not a multiple of `dt`.
    pub fn run<F>(
        &self,
        initial: SimState,
        t_end: f64,
        snapshot_every: u64,
        mut observer: F,
    ) -> Result<SimState, Box<AbortedRun>>
    where
        F: FnMut(&SimState),
    {
        let fail = |error: SolverError, last_good: SimState| Box::new(AbortedRun { error, last_good });
        if let Err(e) = self.params.validate(initial.p.grid()) {
            return Err(fail(e, initial));
        }
        if let Err(e) = initial.check() {
            return Err(fail(e, initial));
        }
        let dt = self.params.dt;
        let span = t_end - initial.time;
        let mut n_steps = (span / dt).round().max(0.0) as u64;
        let mut tail = span - n_steps as f64 * dt;
        if tail.abs() <= 1e-9 * dt {
            tail = 0.0;
        } else if tail < 0.0 {
            n_steps -= 1;
            tail += dt;
        }
        let every = snapshot_every.max(1);
        observer(&initial);
        let mut state = initial;
        for i in 1..=n_steps {
            match self.step(&state) {
                Ok(next) => state = next,
                Err(e) => return Err(fail(e, state)),
            }
            if tail == 0.0 && i == n_steps {
                state.time = t_end;
            }
            if i % every == 0 || (i == n_steps && tail == 0.0) {
                observer(&state);
            }
        }
        if tail > 0.0 {
            match self.step_by(&state, tail) {
                Ok(next) => state = next,
                Err(e) => return Err(fail(e, state)),
            }
            state.time = t_end;
            observer(&state);
        }
        Ok(state)
    }
}

/// Named initial conditions.
pub mod initial {
    use super::*;

    fn lifted(rho: &[f64], q: FibreField, speeds: &SpeedMeasure) -> Result<SimState, SolverError> {
        let p = CellField::from_density(rho, &q, speeds)?;
        SimState::new(p, q)
    }

    /// Uniform unit density and uniform fibres, each bin perturbed by a
    /// relative uniform noise of size `amplitude`, reproducible from `seed`.
    pub fn uniform_noise(
        grid: Grid,
        n_theta: usize,
        speeds: &SpeedMeasure,
        amplitude: f64,
        seed: u64,
    ) -> Result<SimState, SolverError> {
        if !(0.0..1.0).contains(&amplitude) {
            return Err(SolverError::InvalidParameter {
                name: "amplitude",
                value: amplitude,
                reason: "relative noise amplitude must lie in [0, 1)",
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cells = grid.cells();
        let mut qdata = vec![0.0; cells * n_theta];
        for cell in qdata.chunks_mut(n_theta) {
            for w in cell.iter_mut() {
                *w = 1.0 + amplitude * rng.random_range(-1.0..1.0);
            }
            let s: f64 = cell.iter().sum();
            for w in cell.iter_mut() {
                *w /= s;
            }
        }
        let q = FibreField::from_data(grid, n_theta, qdata)?;
        let mut p = CellField::zeros(grid, speeds.len(), n_theta);
        let base = 1.0 / n_theta as f64;
        for (k, node) in speeds.nodes().iter().enumerate() {
            for j in 0..n_theta {
                for v in p.slice_mut(k, j) {
                    *v = node.weight * base * (1.0 + amplitude * rng.random_range(-1.0..1.0));
                }
            }
        }
        SimState::new(p, q)
    }

    /// Periodized Gaussian density `mass/(2πw²) e^{-|x-c|²/2w²}` lifted with `q`.
    pub fn gaussian_bump(
        grid: Grid,
        q: &DirectionMeasure,
        speeds: &SpeedMeasure,
        center: [f64; 2],
        width: f64,
        mass: f64,
    ) -> Result<SimState, SolverError> {
        let rho = gaussian_density(&grid, center, width, mass)?;
        lifted(&rho, FibreField::from_measure(grid, q), speeds)
    }

    /// Cell-centred samples of a periodized isotropic Gaussian.
    pub fn gaussian_density(
        grid: &Grid,
        center: [f64; 2],
        width: f64,
        mass: f64,
    ) -> Result<Vec<f64>, SolverError> {
        positive("width", width)?;
        nonnegative("mass", mass)?;
        let norm = mass / (TAU * width * width);
        Ok((0..grid.cells())
            .map(|c| {
                let d = grid.periodic_delta(center, grid.center(c));
                norm * (-(d[0] * d[0] + d[1] * d[1]) / (2.0 * width * width)).exp()
            })
            .collect())
    }

    /// Spatially uniform density `rho` with every cell aligned along `gamma`.
    pub fn aligned(
        grid: Grid,
        n_theta: usize,
        speeds: &SpeedMeasure,
        gamma: f64,
        rho: f64,
    ) -> Result<SimState, SolverError> {
        nonnegative("rho", rho)?;
        let q = FibreField::from_measure(grid, &DirectionMeasure::axial(gamma, n_theta));
        lifted(&vec![rho; grid.cells()], q, speeds)
    }

    /// Total `mass` placed in one cell, lifted with `q`.
    pub fn point_mass(
        grid: Grid,
        q: &DirectionMeasure,
        speeds: &SpeedMeasure,
        cell: (usize, usize),
        mass: f64,
    ) -> Result<SimState, SolverError> {
        nonnegative("mass", mass)?;
        if cell.0 >= grid.nx || cell.1 >= grid.ny {
            return Err(SolverError::InvalidGrid(format!(
                "cell {:?} outside {}x{} grid",
                cell, grid.nx, grid.ny
            )));
        }
        let mut rho = vec![0.0; grid.cells()];
        rho[grid.index(cell.0, cell.1)] = mass / grid.cell_area();
        lifted(&rho, FibreField::from_measure(grid, q), speeds)
    }
}
