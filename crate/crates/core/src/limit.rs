//! Parabolic limit: diffusion tensor of a fibre distribution, an explicit
//! anisotropic diffusion solver, and the ε-ladder experiment comparing the
//! scaled kinetic solver with its diffusion limit.

use std::f64::consts::TAU;

use thiserror::Error;

use crate::exec::Exec;
use crate::kinetic::{
    CellField, FibreField, Grid, KineticSolver, SimParams, SimState, SolverError, Splitting,
};
use crate::measures::{bin_center, lift, DirectionMeasure, SpeedMeasure, Sym2};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LimitError {
    #[error("turning rate must be positive, got {0}")]
    BadRate(f64),
    #[error("time step {dt} exceeds the stability bound {bound}")]
    Unstable { dt: f64, bound: f64 },
    #[error("diffusion tensor in cell {cell} is not positive semidefinite")]
    NotPsd { cell: usize },
    #[error("density must be finite and nonnegative (cell {cell}: {value})")]
    BadDensity { cell: usize, value: f64 },
    #[error("fibre measure must be symmetric under θ ↦ θ + π for the diffusion limit (asymmetry {0:e})")]
    Asymmetric(f64),
    #[error("invalid experiment setup: {0}")]
    Setup(String),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// `D[q] = (1/μ) ∫ v ⊗ v dq̃(v)`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct DiffusionTensor(pub Sym2);

impl DiffusionTensor {
    pub fn isotropic(d: f64) -> Self {
        Self(Sym2::new(d, 0.0, d))
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.0.eigenvalues()[1]
    }

    pub fn is_psd(&self, tol: f64) -> bool {
        self.0.eigenvalues()[0] >= -tol
    }
}

/// `σ = (1/μ) ∫ s² dm(s)`.
pub fn sigma(speeds: &SpeedMeasure, mu: f64) -> Result<f64, LimitError> {
    if !(mu.is_finite() && mu > 0.0) {
        return Err(LimitError::BadRate(mu));
    }
    Ok(speeds.second_moment() / mu)
}

/// Diffusion tensor from the second moment of the lifted measure.
pub fn diffusion_tensor(q: &DirectionMeasure, speeds: &SpeedMeasure, mu: f64) -> Result<DiffusionTensor, LimitError> {
    if !(mu.is_finite() && mu > 0.0) {
        return Err(LimitError::BadRate(mu));
    }
    Ok(DiffusionTensor(lift(q, speeds).second_moment().scaled(1.0 / mu)))
}

/// The same tensor through the factorization `σ·𝕍(q)`.
pub fn diffusion_tensor_factored(
    q: &DirectionMeasure,
    speeds: &SpeedMeasure,
    mu: f64,
) -> Result<DiffusionTensor, LimitError> {
    Ok(DiffusionTensor(q.second_moment().scaled(sigma(speeds, mu)?)))
}

/// Nonnegative cell-centred density on a periodic grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityField {
    grid: Grid,
    data: Vec<f64>,
}

impl DensityField {
    pub fn new(grid: Grid, data: Vec<f64>) -> Result<Self, LimitError> {
        if data.len() != grid.cells() {
            return Err(LimitError::Setup(format!(
                "density has {} cells, grid has {}",
                data.len(),
                grid.cells()
            )));
        }
        if let Some((cell, v)) = data.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
            return Err(LimitError::BadDensity { cell, value: *v });
        }
        Ok(Self { grid, data })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn total_mass(&self) -> f64 {
        self.data.iter().sum::<f64>() * self.grid.cell_area()
    }

    /// `∫ |self - other| dx` on the cell grid.
    pub fn l1_distance(&self, other: &[f64]) -> f64 {
        self.data.iter().zip(other).map(|(a, b)| (a - b).abs()).sum::<f64>() * self.grid.cell_area()
    }
}

/// Diffusion tensor field: one tensor everywhere or one per cell.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorField {
    Constant(DiffusionTensor),
    PerCell(Vec<DiffusionTensor>),
}

impl TensorField {
    fn at(&self, cell: usize) -> Sym2 {
        match self {
            TensorField::Constant(d) => d.0,
            TensorField::PerCell(v) => v[cell].0,
        }
    }

    fn max_eigenvalue(&self) -> f64 {
        match self {
            TensorField::Constant(d) => d.max_eigenvalue(),
            TensorField::PerCell(v) => v.iter().map(|d| d.max_eigenvalue()).fold(0.0, f64::max),
        }
    }
}

/// Largest stable explicit step, `h²/(4 λ_max)` with `h = min(dx, dy)`.
pub fn stable_dt(grid: &Grid, d: &TensorField) -> f64 {
    let h = grid.dx.min(grid.dy);
    let lam = d.max_eigenvalue();
    if lam <= 0.0 {
        f64::INFINITY
    } else {
        h * h / (4.0 * lam)
    }
}

fn diffusion_step(grid: &Grid, rho: &[f64], d: &TensorField, dt: f64, exec: Exec, out: &mut [f64]) {
    let (nx, ny) = (grid.nx, grid.ny);
    let (dx, dy) = (grid.dx, grid.dy);
    let r = |i: usize, j: usize| rho[j * nx + i];
    // Face flux in +x between (i, j) and (i+1, j).
    let fx = |i: usize, j: usize| {
        let ip = (i + 1) % nx;
        let jp = (j + 1) % ny;
        let jm = (j + ny - 1) % ny;
        let a = d.at(j * nx + i);
        let b = d.at(j * nx + ip);
        let dxx = 0.5 * (a.xx + b.xx);
        let dxy = 0.5 * (a.xy + b.xy);
        dxx * (r(ip, j) - r(i, j)) / dx + dxy * (r(i, jp) + r(ip, jp) - r(i, jm) - r(ip, jm)) / (4.0 * dy)
    };
    // Face flux in +y between (i, j) and (i, j+1).
    let fy = |i: usize, j: usize| {
        let jp = (j + 1) % ny;
        let ip = (i + 1) % nx;
        let im = (i + nx - 1) % nx;
        let a = d.at(j * nx + i);
        let b = d.at(jp * nx + i);
        let dyy = 0.5 * (a.yy + b.yy);
        let dxy = 0.5 * (a.xy + b.xy);
        dyy * (r(i, jp) - r(i, j)) / dy + dxy * (r(ip, j) + r(ip, jp) - r(im, j) - r(im, jp)) / (4.0 * dx)
    };
    exec.for_each_chunk_mut(out, nx, |j, row| {
        let jm = (j + ny - 1) % ny;
        for (i, o) in row.iter_mut().enumerate() {
            let im = (i + nx - 1) % nx;
            let div = (fx(i, j) - fx(im, j)) / dx + (fy(i, j) - fy(i, jm)) / dy;
            *o = r(i, j) + dt * div;
        }
    });
}

/// Integrates `∂ϱ/∂t = ∇·(D∇ϱ)` to `t_end` with the explicit conservative
/// scheme. `observer` sees `(t, ϱ)` after every step; the last step is
/// shortened to land on `t_end`.
pub fn diffusion_solve<F>(
    rho0: &DensityField,
    d: &TensorField,
    dt: f64,
    t_end: f64,
    exec: Exec,
    mut observer: F,
) -> Result<DensityField, LimitError>
where
    F: FnMut(f64, &DensityField),
{
    let grid = rho0.grid;
    if let TensorField::PerCell(v) = d {
        if v.len() != grid.cells() {
            return Err(LimitError::Setup(format!(
                "tensor field has {} cells, grid has {}",
                v.len(),
                grid.cells()
            )));
        }
    }
    for c in 0..grid.cells() {
        if !DiffusionTensor(d.at(c)).is_psd(1e-14) {
            return Err(LimitError::NotPsd { cell: c });
        }
        if matches!(d, TensorField::Constant(_)) {
            break;
        }
    }
    if !(dt.is_finite() && dt > 0.0) || !(t_end.is_finite() && t_end >= 0.0) {
        return Err(LimitError::Setup(format!("dt = {dt}, t_end = {t_end}")));
    }
    let bound = stable_dt(&grid, d);
    if dt > bound * (1.0 + 1e-12) {
        return Err(LimitError::Unstable { dt, bound });
    }
    let mut cur = rho0.clone();
    let mut next = vec![0.0; grid.cells()];
    let mut t = 0.0;
    let n_full = (t_end / dt * (1.0 + 1e-12)).floor() as u64;
    for _ in 0..n_full {
        diffusion_step(&grid, &cur.data, d, dt, exec, &mut next);
        std::mem::swap(&mut cur.data, &mut next);
        t += dt;
        observer(t, &cur);
    }
    let tail = t_end - n_full as f64 * dt;
    if tail > 1e-12 * dt {
        diffusion_step(&grid, &cur.data, d, tail, exec, &mut next);
        std::mem::swap(&mut cur.data, &mut next);
        observer(t_end, &cur);
    }
    Ok(cur)
}

/// Periodized anisotropic Gaussian `N(center, cov)` of total `mass`, sampled
/// at cell centres (images up to two periods away).
pub fn periodic_gaussian(grid: &Grid, center: [f64; 2], cov: Sym2, mass: f64) -> Vec<f64> {
    let det = cov.det();
    let inv = Sym2::new(cov.yy / det, -cov.xy / det, cov.xx / det);
    let norm = mass / (TAU * det.sqrt());
    let (lx, ly) = (grid.lx(), grid.ly());
    (0..grid.cells())
        .map(|c| {
            let d = grid.periodic_delta(center, grid.center(c));
            let mut acc = 0.0;
            for a in -2..=2 {
                for b in -2..=2 {
                    let x = d[0] + a as f64 * lx;
                    let y = d[1] + b as f64 * ly;
                    let q = inv.xx * x * x + 2.0 * inv.xy * x * y + inv.yy * y * y;
                    acc += (-0.5 * q).exp();
                }
            }
            norm * acc
        })
        .collect()
}

/// Heat kernel solution at time `t` for a Gaussian datum of covariance
/// `cov0` under constant `D`: covariance `cov0 + 2Dt`.
pub fn heat_kernel(grid: &Grid, center: [f64; 2], cov0: Sym2, d: &DiffusionTensor, t: f64, mass: f64) -> Vec<f64> {
    let mut cov = cov0;
    cov.add_scaled(d.0, 2.0 * t);
    periodic_gaussian(grid, center, cov, mass)
}

/// Setup of the ε-ladder comparison. `q` is constant in space and time and
/// `κ = 0`; the kinetic runs start from the equilibrium `ϱ₀·q̃`.
#[derive(Clone, Debug)]
pub struct LimitExperiment {
    pub grid: Grid,
    pub q: DirectionMeasure,
    pub mu: f64,
    pub speeds: SpeedMeasure,
    pub eps_list: Vec<f64>,
    pub t_end: f64,
    pub center: [f64; 2],
    /// Standard deviation of the initial isotropic Gaussian bump.
    pub width: f64,
    pub mass: f64,
    /// Kinetic step as a fraction of the relaxation time, `dt·μ/ε²`.
    pub relax_fraction: f64,
    pub splitting: Splitting,
    /// Diffusion step as a fraction of the stability bound.
    pub diffusion_cfl: f64,
}

/// One row of the ε table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LimitRow {
    pub epsilon: f64,
    pub kinetic_dt: f64,
    pub steps: u64,
    /// `∫ |p̄_ε - ϱ| dx`.
    pub l1: f64,
    /// `max_φ |∫∫ φ d(p_ε - ϱ q̃)|` over the test set.
    pub weak: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LimitReport {
    pub tensor: DiffusionTensor,
    /// L1 distance of the diffusion reference from the analytic heat kernel,
    /// relative to the mass.
    pub reference_rel_l1: f64,
    pub rows: Vec<LimitRow>,
}

impl LimitReport {
    pub fn l1_decreasing(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].l1 < w[0].l1)
    }

    pub fn weak_decreasing(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].weak < w[0].weak)
    }

    /// CSV with header `epsilon,kinetic_dt,steps,l1,weak`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epsilon,kinetic_dt,steps,l1,weak\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{:.16e},{:.16e},{},{:.16e},{:.16e}\n",
                r.epsilon, r.kinetic_dt, r.steps, r.l1, r.weak
            ));
        }
        s
    }
}

/// Spatial × directional test functions: `{1, cos kx, cos ky, cos kx·cos ky}
/// × {1, cos 2θ}` with the fundamental wave numbers of the box.
pub fn weak_test_functions(grid: &Grid, n_theta: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
    let kx = TAU / grid.lx();
    let ky = TAU / grid.ly();
    let spatial: Vec<Box<dyn Fn([f64; 2]) -> f64>> = vec![
        Box::new(|_| 1.0),
        Box::new(move |x| (kx * x[0]).cos()),
        Box::new(move |x| (ky * x[1]).cos()),
        Box::new(move |x| (kx * x[0]).cos() * (ky * x[1]).cos()),
    ];
    let angular: [fn(f64) -> f64; 2] = [|_| 1.0, |t| (2.0 * t).cos()];
    let mut out = Vec::new();
    for phi in &spatial {
        let xs: Vec<f64> = (0..grid.cells()).map(|c| phi(grid.center(c))).collect();
        for psi in angular {
            let ts: Vec<f64> = (0..n_theta).map(|j| psi(bin_center(j, n_theta))).collect();
            out.push((xs.clone(), ts));
        }
    }
    out
}

/// `max_φ |∫∫ φ d(p - ϱ q̃)|`.
pub fn weak_pairing_error(p: &CellField, rho: &[f64], q_bins: &[f64], speeds: &SpeedMeasure) -> f64 {
    let grid = *p.grid();
    let n = p.n_theta();
    let area = grid.cell_area();
    weak_test_functions(&grid, n)
        .iter()
        .map(|(xs, ts)| {
            let mut acc = 0.0;
            for (k, node) in speeds.nodes().iter().enumerate() {
                for j in 0..n {
                    let s = p.slice(k, j);
                    let target = node.weight * q_bins[j];
                    let v: f64 = (0..grid.cells()).map(|c| xs[c] * (s[c] - rho[c] * target)).sum();
                    acc += ts[j] * v;
                }
            }
            (acc * area).abs()
        })
        .fold(0.0, f64::max)
}

impl LimitExperiment {
    /// The reference setup: uniform fibres, a centred Gaussian bump and the
    /// given ladder on an `n × n` grid of the box `[0, l)²`.
    pub fn gaussian_benchmark(n: usize, l: f64, n_theta: usize, mu: f64, speed: f64, width: f64, eps_list: Vec<f64>) -> Result<Self, LimitError> {
        Ok(Self {
            grid: Grid::new(n, n, l / n as f64, l / n as f64)?,
            q: DirectionMeasure::uniform(n_theta),
            mu,
            speeds: SpeedMeasure::dirac(speed).map_err(SolverError::from)?,
            eps_list,
            t_end: 1.0,
            center: [0.5 * l, 0.5 * l],
            width,
            mass: 1.0,
            relax_fraction: 0.05,
            splitting: Splitting::Lie,
            diffusion_cfl: 0.5,
        })
    }

    fn check(&self) -> Result<(), LimitError> {
        let asym = self.q.tv_distance(&self.q.flipped());
        if !self.q.bins().len().is_multiple_of(2) || asym > 1e-12 {
            return Err(LimitError::Asymmetric(asym));
        }
        if (self.q.total_mass() - 1.0).abs() > 1e-12 {
            return Err(LimitError::Setup(format!("fibre mass {} is not 1", self.q.total_mass())));
        }
        if self.eps_list.is_empty() || self.eps_list.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
            return Err(LimitError::Setup("epsilon list must be nonempty and positive".into()));
        }
        if !(self.relax_fraction > 0.0 && self.diffusion_cfl > 0.0 && self.diffusion_cfl <= 1.0) {
            return Err(LimitError::Setup("step fractions must be positive (cfl ≤ 1)".into()));
        }
        if !(self.width > 0.0 && self.t_end > 0.0) {
            return Err(LimitError::Setup("width and final time must be positive".into()));
        }
        Ok(())
    }

    fn initial_density(&self) -> Vec<f64> {
        let w2 = self.width * self.width;
        periodic_gaussian(&self.grid, self.center, Sym2::new(w2, 0.0, w2), self.mass)
    }

    /// The diffusion reference at `t_end` and its distance from the heat kernel.
    pub fn reference(&self, exec: Exec) -> Result<(DiffusionTensor, DensityField, f64), LimitError> {
        self.check()?;
        let d = diffusion_tensor(&self.q, &self.speeds, self.mu)?;
        let field = TensorField::Constant(d);
        let rho0 = DensityField::new(self.grid, self.initial_density())?;
        let dt = self.diffusion_cfl * stable_dt(&self.grid, &field).min(self.t_end);
        let rho = diffusion_solve(&rho0, &field, dt, self.t_end, exec, |_, _| {})?;
        let w2 = self.width * self.width;
        let exact = heat_kernel(&self.grid, self.center, Sym2::new(w2, 0.0, w2), &d, self.t_end, self.mass);
        let rel = rho.l1_distance(&exact) / self.mass;
        Ok((d, rho, rel))
    }

    /// Runs the scaled kinetic solver for one `ε`.
    pub fn kinetic_run(&self, epsilon: f64, exec: Exec) -> Result<(SimState, f64, u64), LimitError> {
        self.check()?;
        let dt = self.relax_fraction * epsilon * epsilon / self.mu;
        let params = SimParams {
            mu: self.mu,
            kappa: 0.0,
            epsilon,
            dt,
            speeds: self.speeds.clone(),
            splitting: self.splitting,
        };
        let q = FibreField::from_measure(self.grid, &self.q);
        let p = CellField::from_density(&self.initial_density(), &q, &self.speeds)?;
        let state = SimState::new(p, q)?;
        let mut steps = 0u64;
        let end = KineticSolver::new(params, exec)
            .run(state, self.t_end, u64::MAX, |s| steps = s.step)
            .map_err(|e| LimitError::Solver(e.error))?;
        Ok((end, dt, steps))
    }

    pub fn run(&self, exec: Exec) -> Result<LimitReport, LimitError> {
        let (tensor, rho, reference_rel_l1) = self.reference(exec)?;
        let q_bins = self.q.binned();
        let mut rows = Vec::with_capacity(self.eps_list.len());
        for &eps in &self.eps_list {
            let (state, kinetic_dt, steps) = self.kinetic_run(eps, exec)?;
            let pbar = state.p.pbar(exec);
            rows.push(LimitRow {
                epsilon: eps,
                kinetic_dt,
                steps,
                l1: rho.l1_distance(&pbar),
                weak: weak_pairing_error(&state.p, rho.data(), &q_bins, &self.speeds),
            });
        }
        Ok(LimitReport { tensor, reference_rel_l1, rows })
    }
}

/// Mass marginal `∫ ϱ(x) dx` along lines parallel to `gamma`, binned by the
/// transverse coordinate `x·γ^⊥` into `bins` slots over one period of width
/// `period`.
pub fn transverse_marginal(grid: &Grid, rho: &[f64], gamma: f64, bins: usize, period: f64) -> Vec<f64> {
    let n = [-gamma.sin(), gamma.cos()];
    let mut out = vec![0.0; bins];
    for c in 0..grid.cells() {
        let x = grid.center(c);
        let s = (x[0] * n[0] + x[1] * n[1]).rem_euclid(period);
        let k = ((s / period * bins as f64) as usize).min(bins - 1);
        out[k] += rho[c] * grid.cell_area();
    }
    out
}

/// `∫ θ⊗θ dθ/2π = I/2` on the continuum; used as a quadrature check.
pub fn uniform_covariance() -> Sym2 {
    Sym2::new(0.5, 0.0, 0.5)
}
