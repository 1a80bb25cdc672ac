use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use roblog_core::bsde::{solve_value_bsde, SolveMode, SolverSpec};
use roblog_core::constraints::{ConstraintSet, Primitive};
use roblog_core::generator::{Convention, GeneratorBundle};
use roblog_core::model::{MarketModel, PiecewiseConstant, ProblemWeights, StrategyProcess};
use roblog_core::penalty::{PenaltyKind, PenaltySpec};
use roblog_core::verify::{
    check_supermartingale, default_checkpoints, dual_objective, entropic_closed_form, DensityScenario, Direction,
    XiDescription,
};

fn v1(x: f64) -> DVector<f64> {
    DVector::from_element(1, x)
}

fn one_asset(b: f64, sigma: f64) -> MarketModel {
    MarketModel::constant(v1(b), DMatrix::from_element(1, 1, sigma), 1e-3, 100.0).unwrap()
}

fn weights(alpha_bar: f64, beta: f64, horizon: f64, x: f64) -> ProblemWeights {
    ProblemWeights::new(0.0, alpha_bar, beta, PiecewiseConstant::constant(0.0), horizon, x).unwrap()
}

fn entropic_bundle(model: MarketModel, w: ProblemWeights) -> GeneratorBundle {
    GeneratorBundle::new(
        model,
        w,
        PenaltySpec::entropic(),
        ConstraintSet::whole(1),
        ConstraintSet::point(vec![0.0]),
        Convention::Calibrated,
    )
    .unwrap()
}

fn ode(steps: usize) -> SolverSpec {
    SolverSpec { steps, mode: SolveMode::Ode, ..SolverSpec::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    // max_pi min_eta alpha_bar [pi sigma (theta + eta) - (pi sigma)^2 / 2] + beta eta^2 / 2
    #[test]
    fn entropic_one_asset_value_and_strategy(
        b in -0.5f64..0.5, sigma in 0.3f64..2.0, beta in 0.2f64..5.0,
        horizon in 0.2f64..2.0, x in 0.1f64..10.0, alpha_bar in 0.5f64..2.0,
    ) {
        let bundle = entropic_bundle(one_asset(b, sigma), weights(alpha_bar, beta, horizon, x));
        let report = solve_value_bsde(&bundle, &ode(200)).unwrap();
        let theta = b / sigma;
        let k = beta / alpha_bar;
        let v = alpha_bar * (x.ln() + horizon * theta * theta * k / (2.0 * (1.0 + k)));
        prop_assert!((report.v0 - v).abs() <= 1e-9 * (1.0 + v.abs()), "{} vs {}", report.v0, v);
        let pi = report.strategy.control(0, 0).pi[0];
        prop_assert!((pi - theta * k / ((1.0 + k) * sigma)).abs() <= 1e-6);
    }

    #[test]
    fn value_shifts_with_log_wealth(x in 0.1f64..10.0, s in -2.0f64..2.0, alpha in 0.0f64..2.0) {
        let w = ProblemWeights::new(alpha, 1.0, 1.0, PiecewiseConstant::constant(0.1), 1.0, x).unwrap();
        let shifted = ProblemWeights { initial_wealth: x * s.exp(), ..w.clone() };
        let cset = if alpha > 0.0 { ConstraintSet::interval(0.0, f64::INFINITY).unwrap() } else { ConstraintSet::point(vec![0.0]) };
        let mk = |w: ProblemWeights| GeneratorBundle::new(
            one_asset(0.2, 1.0), w, PenaltySpec::entropic(), ConstraintSet::whole(1), cset.clone(), Convention::Calibrated,
        ).unwrap();
        let a = solve_value_bsde(&mk(w), &ode(100)).unwrap();
        let b = solve_value_bsde(&mk(shifted), &ode(100)).unwrap();
        prop_assert!((b.v0 - a.v0 - a.alpha_bar * a.h0 * s).abs() <= 1e-10 * (1.0 + a.v0.abs()));
    }

    // Zero strategy: ln x is deterministic, so only the normalized density's penalty remains.
    #[test]
    fn density_is_normalized(eta in -3.0f64..3.0, x in 0.1f64..10.0, beta in 0.2f64..5.0) {
        let w = weights(1.0, beta, 1.0, x);
        let zero = StrategyProcess::constant(v1(0.0), 0.0, 20, 1.0);
        let d = dual_objective(&DensityScenario::constant(v1(eta), 20), &zero, &one_asset(0.2, 1.0), &w, &PenaltySpec::entropic()).unwrap();
        prop_assert!((d.value - x.ln() - 0.5 * beta * eta * eta).abs() <= 1e-12 * (1.0 + d.value.abs()));
    }

    #[test]
    fn dual_constant_controls(pi in -1.0f64..1.0, eta in -2.0f64..2.0, b in -0.5f64..0.5, sigma in 0.5f64..2.0) {
        let w = weights(1.0, 1.0, 1.0, 1.0);
        let s = StrategyProcess::constant(v1(pi), 0.0, 20, 1.0);
        let d = dual_objective(&DensityScenario::constant(v1(eta), 20), &s, &one_asset(b, sigma), &w, &PenaltySpec::entropic()).unwrap();
        let u = pi * sigma;
        let expect = u * (b / sigma + eta) - 0.5 * u * u + 0.5 * eta * eta;
        prop_assert!((d.value - expect).abs() <= 1e-12);
    }

    // The optimal strategy at eta = 0 is evaluated under P, where the
    // non-robust expectation dominates the robust value.
    #[test]
    fn reference_measure_dominates_value(b in -0.5f64..0.5, beta in 0.2f64..5.0) {
        let bundle = entropic_bundle(one_asset(b, 1.0), weights(1.0, beta, 1.0, 1.0));
        let report = solve_value_bsde(&bundle, &ode(50)).unwrap();
        let d = dual_objective(&DensityScenario::constant(v1(0.0), 50), &report.strategy, &bundle.model, &bundle.weights, &bundle.penalty).unwrap();
        prop_assert!(d.value >= report.v0 - 1e-12);
        let worst = -report.strategy.control(0, 0).pi[0] / beta;
        let d = dual_objective(&DensityScenario::constant(v1(worst), 50), &report.strategy, &bundle.model, &bundle.weights, &bundle.penalty).unwrap();
        prop_assert!((d.value - report.v0).abs() <= 1e-9);
    }

    #[test]
    fn jensen_orders_entropic_values(a in -2.0f64..2.0, b in -1.0f64..1.0, beta in 0.5f64..5.0, horizon in 0.1f64..1.0) {
        let xi = XiDescription::Affine { a, b: v1(b) };
        let up = entropic_closed_form(&xi, beta, horizon, Direction::Convex).unwrap();
        let down = entropic_closed_form(&xi, beta, horizon, Direction::Concave).unwrap();
        prop_assert!(up >= a && a >= down);
        prop_assert!((up + down - 2.0 * a).abs() <= 1e-12);

        let q = b.abs() * 0.1;
        let xi = XiDescription::Quadratic { a, q, dim: 2 };
        let mean = a + q * 2.0 * horizon;
        let up = entropic_closed_form(&xi, beta, horizon, Direction::Convex).unwrap();
        let down = entropic_closed_form(&xi, beta, horizon, Direction::Concave).unwrap();
        prop_assert!(up >= mean - 1e-12 && mean >= down - 1e-12);
    }

    #[test]
    fn quadratic_conjugate_fenchel_young(w in 0.2f64..5.0, x in prop::collection::vec(-3.0f64..3.0, 2), y in prop::collection::vec(-3.0f64..3.0, 2)) {
        let p = PenaltySpec::new(PenaltyKind::Quadratic { w }, w / 2.0, 0.0).unwrap();
        let hs = p.conjugate(&y).unwrap();
        let dot: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        prop_assert!(hs + p.evaluate(&x) >= dot - 1e-12);
        let ny2: f64 = y.iter().map(|v| v * v).sum();
        prop_assert!((hs - ny2 / (2.0 * w)).abs() <= 1e-12 * (1.0 + hs));
    }

    #[test]
    fn projection_is_nearest_member(
        p in prop::collection::vec(-3.0f64..3.0, 2),
        probes in prop::collection::vec(prop::collection::vec(-1.5f64..1.5, 2), 20),
    ) {
        let set = ConstraintSet::new(2, vec![
            Primitive::Ball { center: vec![1.0, 0.0], radius: 0.5 },
            Primitive::Box { lo: vec![-1.0, -1.0], hi: vec![0.0, 0.5] },
        ]).unwrap();
        let p = DVector::from_vec(p);
        let (proj, _) = set.project(&p);
        prop_assert!(set.contains(&proj));
        let (again, _) = set.project(&proj);
        prop_assert!((&again - &proj).norm() <= 1e-12);
        let d = (&proj - &p).norm();
        for q in probes {
            let q = DVector::from_vec(q);
            if set.contains(&q) {
                prop_assert!(d <= (&q - &p).norm() + 1e-12);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn optimal_r_process_is_martingale(b in -0.5f64..0.5, beta in 0.5f64..3.0, x in 0.5f64..4.0) {
        let bundle = entropic_bundle(one_asset(b, 1.0), weights(1.0, beta, 1.0, x));
        let spec = SolverSpec { steps: 40, mode: SolveMode::Lattice, ..SolverSpec::default() };
        let report = solve_value_bsde(&bundle, &spec).unwrap();
        let sm = check_supermartingale(&report, &report.strategy, &bundle, &default_checkpoints(1.0), 1).unwrap();
        for (_, g) in &sm.gaps {
            prop_assert!(g.abs() <= 1e-10, "{:?}", sm.gaps);
        }
    }
}
