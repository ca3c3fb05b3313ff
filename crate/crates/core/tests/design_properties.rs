mod common;

use anc_core::design::{
    gain_residuals, gm_bound, hyperbola_residuals, loop_response, max_violation, objective_gradient,
    objective_value, pm_bound, solve, DesignProblem, Profiles, SolverOptions, StabilitySpec,
    WeightProfile,
};
use anc_core::spectral::{dft_grid, ComplexSpectrum};
use common::{direct_response, random_problem, random_vector, rng};
use num_complex::Complex64;
use proptest::prelude::*;

#[test]
fn objective_matches_direct_summation() {
    for seed in 0..5 {
        let (p, _) = random_problem(seed, 1, 4, 16);
        let w = random_vector(&mut rng(100 + seed), 4, 1.0);
        let grid = p.grid();
        let oracle: f64 = (0..grid.num_bins())
            .map(|k| {
                let t = direct_response(&w, &grid, k) * p.s_hat()[0].values[k];
                (1.0 + t).norm_sqr() * p.g1()[k]
            })
            .sum();
        let j = objective_value(&w, &p).unwrap();
        assert!((j - oracle).abs() <= 1e-10 * oracle, "{j} vs {oracle}");
    }
}

#[test]
fn gain_residual_matches_direct_dft() {
    let (p, _) = random_problem(9, 2, 6, 32);
    let w = random_vector(&mut rng(9), 12, 1.0);
    let r = gain_residuals(&w, &p).unwrap();
    let grid = p.grid();
    let k_bins = grid.num_bins();
    for l in 0..2 {
        for k in 0..k_bins {
            let mag = direct_response(&w[l * 6..(l + 1) * 6], &grid, k).norm();
            assert!((r[l * k_bins + k] + p.g3()[k] - mag).abs() < 1e-10);
        }
    }
}

#[test]
fn hyperbola_residual_matches_definition() {
    let (p, _) = random_problem(4, 2, 5, 32);
    let w = random_vector(&mut rng(4), 10, 0.5);
    let t = loop_response(&w, &p).unwrap();
    let r = hyperbola_residuals(&w, &p).unwrap();
    for (t, r) in t.iter().zip(&r) {
        let expect = (2.0 - t).norm() - (2.0 + t).norm() - 1.6;
        assert!((r - expect).abs() < 1e-12);
    }
}

// J is quadratic, so central differences carry no truncation error and a
// wide step only reduces rounding noise.
fn finite_difference(p: &DesignProblem, w: &[f64], i: usize) -> f64 {
    let h = 1e-3 * (1.0 + w[i].abs());
    let mut plus = w.to_vec();
    let mut minus = w.to_vec();
    plus[i] += h;
    minus[i] -= h;
    (objective_value(&plus, p).unwrap() - objective_value(&minus, p).unwrap()) / (2.0 * h)
}

#[test]
fn gradient_matches_central_differences() {
    let mut seed = 0;
    for channels in [1, 2] {
        for taps in [4, 16, 64] {
            for _ in 0..2 {
                seed += 1;
                let (p, _) = random_problem(seed, channels, taps, 256);
                let w = random_vector(&mut rng(1000 + seed), channels * taps, 0.2);
                let g = objective_gradient(&w, &p).unwrap();
                let scale = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                for i in 0..w.len() {
                    let fd = finite_difference(&p, &w, i);
                    let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-6 * scale);
                    assert!(rel < 1e-6, "L={channels} N={taps} i={i}: {} vs {fd}", g[i]);
                }
            }
        }
    }
}

#[test]
fn gradient_is_affine() {
    let (p, _) = random_problem(77, 2, 16, 128);
    let mut r = rng(77);
    let w1 = random_vector(&mut r, 32, 1.0);
    let w2 = random_vector(&mut r, 32, 1.0);
    let sum: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| a + b).collect();
    let g0 = objective_gradient(&[0.0; 32], &p).unwrap();
    let g1 = objective_gradient(&w1, &p).unwrap();
    let g2 = objective_gradient(&w2, &p).unwrap();
    let g12 = objective_gradient(&sum, &p).unwrap();
    for i in 0..32 {
        assert!((g1[i] + g2[i] - g0[i] - g12[i]).abs() < 1e-10 * (1.0 + g12[i].abs()));
    }
}

#[test]
fn solve_on_random_instances_is_feasible_and_improves() {
    for seed in 0..4 {
        let (p, _) = random_problem(500 + seed, 1 + (seed as usize % 2), 8, 64);
        let rep = solve(&p, &SolverOptions::default()).unwrap();
        let w = rep.controller.to_vector();
        assert!(max_violation(&w, &p).unwrap() <= 1e-6);
        assert!(rep.objective_value >= rep.initial_objective);
        assert_eq!(rep.initial_objective, p.g1().iter().sum::<f64>());
    }
}

/// Toy instance whose optimum is not grid-aligned: the solver must do at
/// least as well as the best feasible point of a grid search, up to the
/// grid resolution.
#[test]
fn toy_solver_beats_coarse_grid_search() {
    let grid = dft_grid(8, 8).unwrap();
    let values = (0..grid.num_bins())
        .map(|k| Complex64::from_polar(0.6, -grid.omega(k)) + 0.2)
        .collect();
    let profiles = Profiles {
        g1: WeightProfile::constant(1.0),
        g2: WeightProfile::constant(1.5849),
        g3: WeightProfile::constant(1.5),
    };
    let p = DesignProblem::new(
        vec![ComplexSpectrum::new(values, grid).unwrap()],
        2,
        profiles,
        StabilitySpec::default(),
    )
    .unwrap();
    let rep = solve(
        &p,
        &SolverOptions {
            restarts: 8,
            ..SolverOptions::default()
        },
    )
    .unwrap();
    let step = 0.01;
    let mut best = f64::NEG_INFINITY;
    for i in 0..=400 {
        for j in 0..=400 {
            let w = [-2.0 + i as f64 * step, -2.0 + j as f64 * step];
            if max_violation(&w, &p).unwrap() <= 1e-6 {
                best = best.max(objective_value(&w, &p).unwrap());
            }
        }
    }
    assert!(rep.objective_value >= best * (1.0 - 1e-9), "{} < {best}", rep.objective_value);
    assert!(rep.objective_value <= best * 1.02);
}

#[test]
fn dead_plant_solve_returns_zero() {
    let grid = dft_grid(64, 8000).unwrap();
    let p = DesignProblem::new(
        vec![ComplexSpectrum::zeros(grid), ComplexSpectrum::zeros(grid)],
        8,
        Profiles::default(),
        StabilitySpec::default(),
    )
    .unwrap();
    let rep = solve(&p, &SolverOptions::default()).unwrap();
    assert!(rep.controller.to_vector().iter().all(|&c| c.abs() < 1e-12));
    assert!((rep.objective_value - p.g1().iter().sum::<f64>()).abs() < 1e-9);
}

fn hyperbola(t: Complex64, rho: f64, varrho: f64) -> f64 {
    (varrho - t).norm() - (varrho + t).norm() - 2.0 * rho
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn objective_is_convex(seed in 0u64..1000, t in 0.0f64..1.0) {
        let (p, _) = random_problem(seed, 2, 6, 32);
        let mut r = rng(seed ^ 0xabc);
        let w1 = random_vector(&mut r, 12, 2.0);
        let w2 = random_vector(&mut r, 12, 2.0);
        let mix: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| t * a + (1.0 - t) * b).collect();
        let lhs = objective_value(&mix, &p).unwrap();
        let rhs = t * objective_value(&w1, &p).unwrap() + (1.0 - t) * objective_value(&w2, &p).unwrap();
        prop_assert!(lhs <= rhs * (1.0 + 1e-12) + 1e-12);
    }

    #[test]
    fn zero_controller_is_strictly_feasible(seed in 0u64..1000) {
        let (p, _) = random_problem(seed, 1 + (seed as usize % 2), 4, 32);
        prop_assert!(max_violation(&vec![0.0; p.num_variables()], &p).unwrap() < 0.0);
    }

    // The feasible side of the hyperbola is the complement of the convex
    // region enclosed by the left branch, so it is the infeasible region that
    // is closed under midpoints.
    #[test]
    fn infeasible_region_is_convex(
        rho in 0.05f64..0.95,
        extra in 0.01f64..3.0,
        a in (-6.0f64..0.0, -4.0f64..4.0),
        b in (-6.0f64..0.0, -4.0f64..4.0),
    ) {
        let varrho = rho + extra;
        let ta = Complex64::new(a.0, a.1);
        let tb = Complex64::new(b.0, b.1);
        prop_assume!(hyperbola(ta, rho, varrho) > 0.0 && hyperbola(tb, rho, varrho) > 0.0);
        prop_assert!(hyperbola((ta + tb) / 2.0, rho, varrho) > -1e-12);
    }

    #[test]
    fn gm_bound_decreases_in_rho(r1 in 0.01f64..0.98, dr in 0.001f64..0.01) {
        let a = StabilitySpec::new(r1, 2.0).unwrap();
        let b = StabilitySpec::new(r1 + dr, 2.0).unwrap();
        prop_assert!(gm_bound(&b) < gm_bound(&a));
    }

    #[test]
    fn pm_bound_decreases_in_rho(r1 in 0.01f64..0.98, dr in 0.001f64..0.01, varrho in 1.0f64..10.0) {
        let a = StabilitySpec::new(r1, varrho).unwrap();
        let b = StabilitySpec::new(r1 + dr, varrho).unwrap();
        prop_assert!(pm_bound(&b).unwrap() < pm_bound(&a).unwrap());
    }

    // Widening the hyperbola moves its intersection with the unit circle
    // toward the real axis, so the guaranteed phase margin grows toward
    // arccos ρ.
    #[test]
    fn pm_bound_increases_toward_limit_in_varrho(rho in 0.05f64..0.95, v in 1.0f64..50.0, dv in 0.01f64..5.0) {
        let a = StabilitySpec::new(rho, rho + v).unwrap();
        let b = StabilitySpec::new(rho, rho + v + dv).unwrap();
        let (pa, pb) = (pm_bound(&a).unwrap(), pm_bound(&b).unwrap());
        prop_assert!(pb >= pa);
        prop_assert!(pb <= rho.acos() + 1e-12);
    }
}
