use std::f64::consts::{PI, TAU};

use mesenchymal_core::characteristics::{
    constant_q_solution_nodes, explicit_solution_nodes, huygens_pbar, pbar_general, ConstantFibre, LiftedDatum,
};
use mesenchymal_core::kinetic::{initial, turning_step, CellField, Grid, KineticSolver, SimParams, Splitting};
use mesenchymal_core::limit::{diffusion_solve, diffusion_tensor, sigma, stable_dt, DensityField, DiffusionTensor, TensorField};
use mesenchymal_core::measures::{
    alignment_b, first_moment, lambda_of, lift, total_variation, turning_apply, Atom, SpeedNode, Sym2,
};
use mesenchymal_core::steady::{
    build_projection_matrix, classify_intersection, construct_aligned, construct_homogeneous, is_balanced_intersection,
    residual_pointwise, IntersectionSpec, BALANCE_TOL, DEFAULT_BASIS,
};
use mesenchymal_core::{DirectionMeasure, Exec, SpeedMeasure, VelocityMeasure};
use proptest::collection::vec;
use proptest::prelude::{prop_assert, prop_assert_eq, proptest, Just, ProptestConfig, Strategy};

const N: usize = 16;

fn direction_measure() -> impl Strategy<Value = DirectionMeasure> {
    (vec(0.0..1.0f64, N), vec((0.0..TAU, 0.05..1.0f64), 0..3)).prop_map(|(bins, atoms)| {
        let atoms = atoms.into_iter().map(|(a, w)| Atom::new(a, w)).collect();
        DirectionMeasure::new(atoms, bins).unwrap().normalized()
    })
}

fn speeds() -> impl Strategy<Value = SpeedMeasure> {
    vec((0.1..2.0f64, 0.1..1.0f64), 1..4).prop_map(|nodes| {
        let total: f64 = nodes.iter().map(|n| n.1).sum();
        let mut nodes: Vec<SpeedNode> = nodes.into_iter().map(|(s, w)| SpeedNode { speed: s, weight: w / total }).collect();
        nodes.sort_by(|a, b| a.speed.total_cmp(&b.speed));
        nodes.dedup_by(|a, b| {
            let same = (a.speed - b.speed).abs() < 1e-6;
            if same {
                b.weight += a.weight;
            }
            same
        });
        SpeedMeasure::new(nodes).unwrap()
    })
}

fn angles() -> Vec<f64> {
    (0..24).map(|i| i as f64 * TAU / 24.0 + 0.1).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn lift_preserves_total_variation(q in direction_measure(), m in speeds(), c in 0.0..5.0f64) {
        let q = q.scaled(c);
        let lifted = lift(&q, &m);
        prop_assert!((total_variation(&lifted) - total_variation(&q)).abs() <= 1e-12 * c.max(1.0));
    }

    #[test]
    fn turning_operator_has_zero_mass(q in direction_measure(), r in direction_measure(), m in speeds(), c in 0.0..10.0f64) {
        let p = lift(&r, &m).scaled(c);
        let d = turning_apply(&q, &m, &p).unwrap();
        prop_assert!(d.mass().abs() <= 1e-13 * p.mass_bar().max(1e-300) + 1e-300);
    }

    #[test]
    fn lambda_is_positively_homogeneous(r in direction_measure(), m in speeds(), c in 0.0..10.0f64) {
        let p = lift(&r, &m);
        let a = lambda_of(&p.scaled(c), &angles());
        let b = lambda_of(&p, &angles());
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - c * y).abs() <= 4.0 * f64::EPSILON * (c * y).abs());
        }
    }

    #[test]
    fn alignment_with_uniform_fibres_is_direction_average(r in direction_measure(), m in speeds()) {
        let p = lift(&r, &m);
        let n = 128;
        let q = DirectionMeasure::uniform(n);
        let centres: Vec<f64> = (0..n).map(|j| j as f64 * TAU / n as f64).collect();
        let avg = lambda_of(&p, &centres).iter().sum::<f64>() / n as f64;
        prop_assert!((alignment_b(&p, &q) - avg).abs() <= 1e-10);
    }

    #[test]
    fn antipodally_symmetric_lift_has_no_drift(q in direction_measure(), m in speeds()) {
        let sym = q.add(&q.flipped()).unwrap().scaled(0.5);
        let v = first_moment(&lift(&sym, &m));
        prop_assert!(v[0].abs() <= 1e-12 && v[1].abs() <= 1e-12);
    }
}

fn small_state(seed: u64, m: &SpeedMeasure) -> (CellField, mesenchymal_core::kinetic::FibreField) {
    let g = Grid::new(8, 8, 0.5, 0.5).unwrap();
    let s = initial::uniform_noise(g, 8, m, 0.5, seed).unwrap();
    (s.p, s.q)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn turning_step_commutes_with_scaling(seed in 0u64..500, c in 0.0..10.0f64, dt in 0.01..2.0f64, mu in 0.0..3.0f64) {
        let m = SpeedMeasure::default();
        let (p, q) = small_state(seed, &m);
        let a = turning_step(&p.scaled(c), &q, dt, mu, 1.0, &m, Exec::Sequential).unwrap();
        let b = turning_step(&p, &q, dt, mu, 1.0, &m, Exec::Sequential).unwrap().scaled(c);
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() <= 8.0 * f64::EPSILON * y.abs().max(f64::MIN_POSITIVE));
        }
    }

    #[test]
    fn epsilon_scaling_matches_rescaled_parameters(seed in 0u64..500, eps in 0.2..1.0f64, kappa in 0.0..5.0f64) {
        let m = SpeedMeasure::new(vec![
            SpeedNode { speed: 0.5, weight: 0.4 },
            SpeedNode { speed: 1.0, weight: 0.6 },
        ])
        .unwrap();
        let (p, q) = small_state(seed, &m);
        let state = mesenchymal_core::kinetic::SimState::new(p, q).unwrap();
        let mu = 1.0;
        let dt = 0.05 * eps;
        let scaled = SimParams { mu, kappa, epsilon: eps, dt, speeds: m.clone(), splitting: Splitting::Strang };
        let fast = SpeedMeasure::new(m.nodes().iter().map(|n| SpeedNode { speed: n.speed / eps, weight: n.weight }).collect()).unwrap();
        let plain = SimParams { mu: mu / (eps * eps), kappa, epsilon: 1.0, dt, speeds: fast, splitting: Splitting::Strang };
        let a = KineticSolver::new(scaled, Exec::Sequential).step(&state).unwrap();
        let b = KineticSolver::new(plain, Exec::Sequential).step(&state).unwrap();
        for (x, y) in a.p.data().iter().zip(b.p.data()) {
            prop_assert!((x - y).abs() <= 1e-13 * y.abs().max(1e-12));
        }
        for (x, y) in a.q.data().iter().zip(b.q.data()) {
            prop_assert!((x - y).abs() <= 1e-13);
        }
    }

    #[test]
    fn coupled_strang_run_keeps_invariants(seed in 0u64..500, kappa in 0.0..20.0f64, mu in 0.0..4.0f64) {
        let m = SpeedMeasure::default();
        let (p, q) = small_state(seed, &m);
        let state = mesenchymal_core::kinetic::SimState::new(p, q).unwrap();
        let m0 = state.p.total_mass();
        let params = SimParams { mu, kappa, dt: 0.1, splitting: Splitting::Strang, ..SimParams::default() };
        let mut ok = true;
        let end = KineticSolver::new(params, Exec::Parallel)
            .run(state, 1.0, 1, |s| {
                let inv = s.invariants();
                ok &= (inv.total_mass - m0).abs() <= 1e-12 * m0
                    && (inv.q_norm_min - 1.0).abs() <= 1e-12
                    && (inv.q_norm_max - 1.0).abs() <= 1e-12
                    && inv.p_min >= 0.0
                    && inv.q_min >= 0.0;
            })
            .unwrap();
        prop_assert!(ok);
        prop_assert_eq!(end.time, 1.0);
    }

    #[test]
    fn general_pbar_reduces_to_huygens_for_constant_fibres(
        q in direction_measure(), mu in 0.0..4.0f64, t in 0.0..5.0f64, x in 0.0..4.0f64, y in 0.0..4.0f64,
    ) {
        let m = SpeedMeasure::default();
        let p0 = LiftedDatum::new(|z: [f64; 2]| 1.0 + (z[0]).sin() * (z[1]).cos() * 0.5, &q, &m);
        let fibre = ConstantFibre::new(q.clone());
        let h = huygens_pbar([x, y], t, &p0, &fibre, &m).unwrap();
        let g = pbar_general([x, y], t, &p0, &fibre, mu, &m, 64).unwrap();
        // 1 - K is about e^{-μt}, so rounding in K is amplified by e^{μt}.
        let tol = (1e-12 + 4.0 * f64::EPSILON * (mu * t).exp()) * h.max(1.0);
        prop_assert!((g - h).abs() <= tol);
    }

    #[test]
    fn explicit_mass_matches_pbar(q in direction_measure(), mu in 0.0..4.0f64, t in 0.0..5.0f64, x in 0.0..4.0f64) {
        let m = SpeedMeasure::default();
        let p0 = LiftedDatum::new(|z: [f64; 2]| (-(z[0] - 1.0).powi(2) - z[1].powi(2)).exp(), &DirectionMeasure::uniform(N), &m);
        let fibre = ConstantFibre::new(q.clone());
        let nodes = explicit_solution_nodes([x, 0.3], t, &p0, &fibre, mu, &m, 256).unwrap();
        let pb = pbar_general([x, 0.3], t, &p0, &fibre, mu, &m, 256).unwrap();
        let cond = 4.0 * f64::EPSILON * (mu * t).exp();
        prop_assert!((nodes.iter().sum::<f64>() - pb).abs() <= (1e-8 + cond) * pb.max(1.0));
        let cq = constant_q_solution_nodes([x, 0.3], t, &p0, &q, mu, &m).unwrap();
        for (a, b) in nodes.iter().zip(&cq) {
            prop_assert!((a - b).abs() <= (1e-12 + cond) * b.abs().max(1.0));
        }
    }
}

fn distinct_axes() -> impl Strategy<Value = Vec<f64>> {
    vec(0.0..PI, 2..6).prop_filter("axes must be distinct", |a| {
        a.iter().enumerate().all(|(i, x)| {
            a[..i].iter().all(|y| {
                let d = (x - y).rem_euclid(PI);
                d.min(PI - d) > 1e-3
            })
        })
    })
}

fn dirs(angles: &[f64]) -> Vec<[f64; 2]> {
    angles.iter().map(|a| [a.cos(), a.sin()]).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_matrix_is_symmetric_with_unit_diagonal(a in distinct_axes()) {
        let g = build_projection_matrix(&dirs(&a)).unwrap();
        for i in 0..g.n() {
            prop_assert_eq!(g.get(i, i), 1.0);
            for j in 0..g.n() {
                prop_assert_eq!(g.get(i, j), g.get(j, i));
                prop_assert!((0.0..=1.0).contains(&g.get(i, j)));
            }
        }
    }

    #[test]
    fn balance_verdict_is_invariant(a in distinct_axes(), rot in 0.0..TAU, flips in vec(proptest::bool::ANY, 6), shift in 0usize..6) {
        let (base, _) = is_balanced_intersection(&build_projection_matrix(&dirs(&a)).unwrap(), 1e-9);
        let mut b: Vec<f64> = a.iter().zip(&flips).map(|(x, f)| x + rot + if *f { PI } else { 0.0 }).collect();
        let s = shift % b.len();
        b.rotate_left(s);
        let (moved, _) = is_balanced_intersection(&build_projection_matrix(&dirs(&b)).unwrap(), 1e-9);
        prop_assert_eq!(base, moved);
    }

    #[test]
    fn two_directions_always_balance(a in distinct_axes().prop_map(|v| v[..2].to_vec())) {
        let (ok, _) = is_balanced_intersection(&build_projection_matrix(&dirs(&a)).unwrap(), BALANCE_TOL);
        prop_assert!(ok);
    }

    #[test]
    fn symmetric_and_unsymmetric_share_the_verdict(a in distinct_axes()) {
        let deg: Vec<f64> = a.iter().map(|x| x.to_degrees()).collect();
        let s = classify_intersection(&IntersectionSpec::from_degrees(&deg, None, true), 1e-9).unwrap();
        let u = classify_intersection(&IntersectionSpec::from_degrees(&deg, None, false), 1e-9).unwrap();
        prop_assert_eq!(s.balanced, u.balanced);
    }

    #[test]
    fn homogeneous_and_aligned_states_are_steady(rho in 0.0..10.0f64, gamma in 0.0..TAU, m in speeds()) {
        let (p, q) = construct_homogeneous(rho, 64, &m).unwrap();
        let (rq, rp) = residual_pointwise(&p, &q, &m, DEFAULT_BASIS).unwrap();
        prop_assert!(rq <= 1e-10 * rho.max(1.0) && rp <= 1e-10 * rho.max(1.0));
        let (p, q) = construct_aligned([gamma.cos(), gamma.sin()], rho, 64, &m).unwrap();
        let (rq, rp) = residual_pointwise(&p, &q, &m, DEFAULT_BASIS).unwrap();
        prop_assert!(rq <= 1e-12 * rho.max(1.0) && rp <= 1e-12 * rho.max(1.0));
    }

    #[test]
    fn diffusion_tensor_is_psd_with_trace_sigma(q in direction_measure(), m in speeds(), mu in 0.1..5.0f64) {
        let d = diffusion_tensor(&q, &m, mu).unwrap();
        let ev = d.0.eigenvalues();
        prop_assert!(ev[0] >= -1e-14);
        prop_assert!((d.0.trace() - sigma(&m, mu).unwrap()).abs() <= 1e-12 * d.0.trace().max(1.0));
        let f = diffusion_tensor(&q.flipped(), &m, mu).unwrap();
        prop_assert!(d.0.max_abs_diff(&f.0) <= 1e-15 * d.0.trace().max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn diffusion_conserves_mass_and_sign(
        dxx in 0.01..1.0f64, dyy in 0.01..1.0f64, c in -1.0..1.0f64, seed in vec(0.0..1.0f64, 256), cfl in Just(1.0),
    ) {
        let dxy = c * (dxx * dyy).sqrt();
        let grid = Grid::new(16, 16, 0.25, 0.25).unwrap();
        let rho0 = DensityField::new(grid, seed).unwrap();
        let d = TensorField::Constant(DiffusionTensor(Sym2::new(dxx, dxy, dyy)));
        let dt = cfl * stable_dt(&grid, &d);
        let out = diffusion_solve(&rho0, &d, dt, 20.0 * dt, Exec::Sequential, |_, _| {}).unwrap();
        let m0 = rho0.total_mass();
        prop_assert!((out.total_mass() - m0).abs() <= 1e-12 * m0);
        prop_assert!(out.data().iter().all(|v| *v >= 0.0));
    }
}

#[test]
fn velocity_measure_from_lift_is_probability() {
    let m = SpeedMeasure::default();
    let p: VelocityMeasure = lift(&DirectionMeasure::uniform(N), &m);
    assert!((p.mass_bar() - 1.0).abs() < 1e-15);
}
