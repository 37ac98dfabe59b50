//! Structural facts about the benchmark problem that bound what any
//! estimator can recover, and how the damping choice changes the outcome
//! of unconstrained LM.

use dgparam::benchmark::{self, EXCITER_GAINS, FREE};
use dgparam::dynmodel::ParamId;
use dgparam::hbclm::{bclm_solve, lm_solve_unconstrained, LmOptions};
use dgparam::integrator::SimConfig;
use dgparam::nlsq::{self, DampingMatrix, ResponseModel};

fn index(id: ParamId) -> usize {
    FREE.iter().position(|&p| p == id).unwrap()
}

#[test]
fn exciter_gain_scaling_leaves_response_unchanged() {
    let problem = benchmark::synthetic_problem(&SimConfig::default());
    let truth = problem.response(&benchmark::true_theta()).unwrap();
    for c in [0.5, 1.7, 3.0] {
        let mut theta = benchmark::true_theta();
        theta[index(ParamId::Kv)] *= c;
        theta[index(ParamId::Kpe)] /= c;
        theta[index(ParamId::Kie)] /= c;
        let y = problem.response(&theta).unwrap();
        let worst = y.iter().zip(&truth).map(|(a, b)| (a - b).abs()).fold(0.0_f64, f64::max);
        assert!(worst < 1e-12, "scale {c}: response moves by {worst}");
    }
}

#[test]
fn exciter_gains_flagged_after_exact_fit() {
    let problem = benchmark::synthetic_problem(&SimConfig::default());
    let init = benchmark::case_init(1).unwrap();
    let fit = bclm_solve(&problem, &init, &benchmark::bound_specs(), &LmOptions::default()).unwrap();
    assert!(fit.converged);
    assert!(fit.rmse_f < 1e-10 && fit.rmse_v < 1e-10);
    let non_exciter: Vec<ParamId> = FREE.iter().copied().filter(|p| !EXCITER_GAINS.contains(p)).collect();
    assert!(benchmark::max_relative_error(&fit.theta_final, &non_exciter) < 1e-6);
    // The gains lie somewhere on the null line; their product structure is
    // what the data determine.
    let kv = fit.theta_final[index(ParamId::Kv)];
    let kpe = fit.theta_final[index(ParamId::Kpe)];
    let kie = fit.theta_final[index(ParamId::Kie)];
    assert!((kv * kpe / 10.0 - 1.0).abs() < 1e-6);
    assert!((kv * kie / 20.0 - 1.0).abs() < 1e-6);
    let weak: Vec<ParamId> = fit.weak.iter().map(|&j| FREE[j]).collect();
    for gain in EXCITER_GAINS {
        assert!(weak.contains(&gain), "{gain:?} not flagged: {weak:?}");
    }
}

#[test]
fn swapped_engine_lags_report_in_canonical_order() {
    let problem = benchmark::synthetic_problem(&SimConfig::default());
    let mut start = benchmark::true_theta();
    start.swap(index(ParamId::T2), index(ParamId::T3));
    let fit = bclm_solve(&problem, &start, &benchmark::bound_specs(), &LmOptions::default()).unwrap();
    assert!(fit.theta_final[index(ParamId::T2)] <= fit.theta_final[index(ParamId::T3)]);
    assert!(nlsq::objective(&problem, &fit.theta_final).cost <= 1e-20);
}

#[test]
fn identity_damping_lets_unconstrained_lm_leave_feasible_region() {
    let problem = benchmark::synthetic_problem(&SimConfig::default());
    let init = benchmark::case_init(2).unwrap();
    let fit = lm_solve_unconstrained(&problem, &init, &LmOptions::with_damping(DampingMatrix::Identity)).unwrap();
    let infeasible = [ParamId::T1, ParamId::T3, ParamId::Df].iter().any(|&id| {
        let got = fit.theta_final[index(id)];
        got < 0.0 || got.abs() > 100.0 * benchmark::true_parameters().get(id)
    });
    assert!(infeasible, "final estimate {:?}", fit.theta_final);
}

#[test]
fn diagonal_damping_keeps_unconstrained_lm_feasible() {
    let problem = benchmark::synthetic_problem(&SimConfig::default());
    let init = benchmark::case_init(2).unwrap();
    let fit = lm_solve_unconstrained(&problem, &init, &LmOptions::default()).unwrap();
    assert!(fit.converged);
    assert!(benchmark::in_bounds(&fit.theta_final));
}
