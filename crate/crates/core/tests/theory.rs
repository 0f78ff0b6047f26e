// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use common::{coordinatewise_loss, rel_close};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use snrf_core::theory::*;
use snrf_core::Matrix64;

fn params(seed: u64) -> ScenarioParams {
    ScenarioParams { rows: 8, cols: 6, s_size: 4, epsilon: 0.1, eta: 0.5, mu_s: 1.0, mu_perp: 10.0, seed }
}

#[test]
fn loss_matches_coordinatewise_oracle() {
    let sc = make_scenario(params(23)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let w0: Vec<Vec<f64>> = (0..8).map(|_| (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
    for d in [sc.delta.clone(), snrf_update(&sc, 2).unwrap()] {
        for beta in [0.01, 0.3, 1.0, 2.5] {
            let moved: Vec<Vec<f64>> =
                (0..8).map(|i| (0..6).map(|j| w0[i][j] + beta * d.get(i, j)).collect()).collect();
            let want = coordinatewise_loss(&sc, &w0, &moved) - coordinatewise_loss(&sc, &w0, &w0);
            let got = exact_loss_delta(&sc, &d, beta).unwrap();
            assert!(rel_close(got, want, 1e-10), "beta {beta}: {got} vs {want}");
        }
    }
}

#[test]
fn seed_17_scenario_satisfies_all_assumptions() {
    let sc = make_scenario(ScenarioParams { seed: 17, ..params(0) }).unwrap();
    let flags = verify_assumptions(&sc, 2).unwrap();
    assert!(flags.all(), "{flags:?}");
}

#[test]
fn degenerate_equality_case() {
    // S is everything, full rank inside S, no leakage.
    let sc = make_scenario(ScenarioParams { s_size: 8, epsilon: 0.0, ..params(5) }).unwrap();
    let c = check_gap(&sc, 6, 0.2).unwrap();
    assert!(c.gap.abs() < 1e-12 && c.rhs.abs() < 1e-12, "{c:?}");
    assert!(c.gap_holds);
}

#[test]
fn dominant_curvature_gives_strict_improvement() {
    let sc = make_scenario(ScenarioParams { epsilon: 0.0, eta: 0.0, mu_perp: 1000.0, ..params(31) }).unwrap();
    for beta in [0.01, 0.05, 0.1] {
        let c = check_gap(&sc, 2, beta).unwrap();
        assert!(c.condition_holds && c.improvement_holds, "{c:?}");
    }
}

/// The exact gap decomposes as
/// `β⟨P_S g, E⟩ + β⟨P_⊥ g, Δ_⊥⟩ + (β²/2)(μ_S ‖E‖² + μ_⊥ ‖Δ_⊥‖²)` with
/// `E = Δ_S − Δ_S^(r)`, because the truncation residual is orthogonal to the
/// truncation.
#[test]
fn gap_has_closed_form_decomposition() {
    for seed in 0..20 {
        let sc = make_scenario(params(seed)).unwrap();
        let snrf = snrf_update(&sc, 2).unwrap();
        let e = sc.project_s(&sc.delta).sub(&snrf).unwrap();
        let dp = sc.project_perp(&sc.delta);
        let (gs, gp) = (sc.project_s(&sc.g), sc.project_perp(&sc.g));
        for beta in [0.01, 0.1, 1.0] {
            let want = beta * gs.dot(&e).unwrap()
                + beta * gp.dot(&dp).unwrap()
                + 0.5
                    * beta
                    * beta
                    * (sc.params.mu_s * e.frobenius_norm_sq() + sc.params.mu_perp * dp.frobenius_norm_sq());
            let got = check_gap(&sc, 2, beta).unwrap().gap;
            assert!((got - want).abs() <= 1e-10 * want.abs().max(1e-3), "seed {seed} beta {beta}");
        }
    }
}

#[test]
fn implication_holds_without_truncation_loss() {
    // r = rank(Δ_S) leaves no truncation residual; with η ≤ 1 the
    // condition then implies improvement.
    let cfg = SweepConfig {
        scenarios: 300,
        rows: 8,
        cols: 6,
        s_size: 4,
        epsilon: 0.3,
        eta: 1.0,
        mu_s: 1.0,
        mu_perp: 4.0,
        rank: 4,
        betas: vec![0.01, 0.05, 0.1, 0.5, 1.0],
        seed: 40,
    };
    let s = summarize(&run_sweep(&cfg).unwrap());
    assert!(s.condition_holds > 0);
    assert_eq!(s.implication_violations, 0, "{s:?}");
}

#[test]
fn sweep_csv_keeps_every_row() {
    let cfg = SweepConfig {
        scenarios: 40,
        rows: 8,
        cols: 6,
        s_size: 4,
        epsilon: 0.1,
        eta: 0.5,
        mu_s: 1.0,
        mu_perp: 10.0,
        rank: 2,
        betas: vec![0.01, 0.5],
        seed: 1,
    };
    let rows = run_sweep(&cfg).unwrap();
    let csv = sweep_csv(&rows);
    let s = summarize(&rows);
    let failing = csv.lines().skip(1).filter(|l| l.split(',').nth(11) == Some("false")).count();
    assert_eq!(failing, s.rows - s.gap_holds);
    assert_eq!(csv.lines().count(), 81);
    assert_eq!(run_sweep(&cfg).unwrap(), rows);
}

fn any_params() -> impl Strategy<Value = ScenarioParams> {
    (2usize..=8, 1usize..=6, 0.0f64..1.0, 0.0f64..2.0, 0.1f64..5.0, 1.0f64..10.0, any::<u64>()).prop_flat_map(
        |(rows, cols, epsilon, eta, mu_s, ratio, seed)| {
            (1usize..=rows).prop_map(move |s_size| ScenarioParams {
                rows,
                cols,
                s_size,
                epsilon,
                eta,
                mu_s,
                mu_perp: mu_s * ratio,
                seed,
            })
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn constructed_scenarios_satisfy_assumptions(p in any_params()) {
        let sc = make_scenario(p).unwrap();
        let flags = verify_assumptions(&sc, 1).unwrap();
        prop_assert!(flags.all(), "{:?}", flags);
        prop_assert_eq!(make_scenario(p).unwrap(), sc);
    }

    #[test]
    fn loss_is_quadratic_in_beta(p in any_params(), beta in 0.001f64..2.0) {
        let sc = make_scenario(p).unwrap();
        let d = &sc.delta;
        let lhs = exact_loss_delta(&sc, d, 2.0 * beta).unwrap() - 2.0 * exact_loss_delta(&sc, d, beta).unwrap();
        let rhs = beta * beta * sc.curvature(d);
        prop_assert!((lhs - rhs).abs() <= 1e-10 * rhs.abs().max(1.0));
    }

    #[test]
    fn bound_check_fields_are_finite(p in any_params(), beta in 0.0f64..1.0) {
        let sc = make_scenario(p).unwrap();
        let c = check_gap(&sc, 1, beta).unwrap();
        prop_assert!(c.gap.is_finite() && c.rhs.is_finite() && c.loss_lin.is_finite() && c.loss_snrf.is_finite());
        let zero = Matrix64::zeros(p.rows, p.cols);
        prop_assert_eq!(exact_loss_delta(&sc, &zero, beta).unwrap(), 0.0);
    }
}
