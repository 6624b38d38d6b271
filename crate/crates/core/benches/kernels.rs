use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mesenchymal_core::kinetic::{
    advect_step, fibre_step, initial, turning_step, Grid, KineticSolver, SimParams,
};
use mesenchymal_core::limit::{diffusion_solve, stable_dt, DensityField, DiffusionTensor, TensorField};
use mesenchymal_core::measures::Sym2;
use mesenchymal_core::{Exec, SpeedMeasure};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn sub_steps(c: &mut Criterion) {
    let speeds = SpeedMeasure::default();
    for n in [64usize, 128] {
        let grid = Grid::new(n, n, 0.25, 0.25).unwrap();
        let state = initial::uniform_noise(grid, 32, &speeds, 0.05, 7).unwrap();

        let mut g = c.benchmark_group(format!("advect/{n}x{n}"));
        for (name, exec) in MODES {
            g.bench_function(BenchmarkId::from_parameter(name), |b| {
                b.iter(|| advect_step(black_box(&state.p), 0.1, &speeds, 1.0, exec).unwrap())
            });
        }
        g.finish();

        let mut g = c.benchmark_group(format!("turning/{n}x{n}"));
        for (name, exec) in MODES {
            g.bench_function(BenchmarkId::from_parameter(name), |b| {
                b.iter(|| turning_step(black_box(&state.p), &state.q, 0.1, 1.0, 1.0, &speeds, exec).unwrap())
            });
        }
        g.finish();

        let mut g = c.benchmark_group(format!("fibre/{n}x{n}"));
        for (name, exec) in MODES {
            g.bench_function(BenchmarkId::from_parameter(name), |b| {
                b.iter(|| fibre_step(black_box(&state.q), &state.p, 0.1, 10.0, exec).unwrap())
            });
        }
        g.finish();

        let mut g = c.benchmark_group(format!("coupled_step/{n}x{n}"));
        for (name, exec) in MODES {
            let solver = KineticSolver::new(SimParams { kappa: 10.0, ..SimParams::default() }, exec);
            g.bench_function(BenchmarkId::from_parameter(name), |b| {
                b.iter(|| solver.step(black_box(&state)).unwrap())
            });
        }
        g.finish();
    }
}

fn diffusion(c: &mut Criterion) {
    let n = 256;
    let grid = Grid::new(n, n, 1.0 / 32.0, 1.0 / 32.0).unwrap();
    let rho: Vec<f64> = (0..grid.cells())
        .map(|k| {
            let x = grid.center(k);
            (-((x[0] - 4.0).powi(2) + (x[1] - 4.0).powi(2))).exp()
        })
        .collect();
    let rho = DensityField::new(grid, rho).unwrap();
    let d = TensorField::Constant(DiffusionTensor(Sym2::new(0.3, 0.1, 0.2)));
    let dt = stable_dt(&grid, &d);
    let mut g = c.benchmark_group("diffusion/256x256x10");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| diffusion_solve(black_box(&rho), &d, dt, 10.0 * dt, exec, |_, _| {}).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, sub_steps, diffusion);
criterion_main!(benches);
