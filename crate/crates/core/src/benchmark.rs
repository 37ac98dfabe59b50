//! Reference 50 kVA generator used as a self-contained estimation
//! benchmark: synthetic load-step data from known parameters, the bounds
//! derived from basic physical knowledge, and four starting scenarios.

use std::fmt::Write as _;

use crate::boxmap::BoundSpec;
use crate::dynmodel::{EngineParams, ExciterParams, GenParams, ParamId, ParameterSet};
use crate::golga::GaConfig;
use crate::hbclm::{bclm_solve, hbclm_fit, lm_solve_unconstrained, FitReport, LmOptions, Method};
use crate::integrator::{simulate, LoadStepProfile, SimConfig};
use crate::measurement::MeasurementSeries;
use crate::nlsq::DampingMatrix;
use crate::problem::GeneratorProblem;

/// 30 % of rated power.
pub const R_LIGHT: f64 = 1.0 / 0.3;
/// 80 % of rated power.
pub const R_HEAVY: f64 = 1.25;
/// Instant at which the load is switched.
pub const T_STEP: f64 = 0.5;
/// Seed for the genetic stage of the no-estimate case.
pub const DEFAULT_SEED: u64 = 2024;

/// Estimated parameters in estimation-vector order.
pub const FREE: [ParamId; 12] = [
    ParamId::M,
    ParamId::T1,
    ParamId::T2,
    ParamId::T3,
    ParamId::Tv,
    ParamId::Kv,
    ParamId::Kpe,
    ParamId::Kie,
    ParamId::H,
    ParamId::Df,
    ParamId::Tdop,
    ParamId::Rs,
];

/// Exciter gains; only their products with `K_V` reach the outputs.
pub const EXCITER_GAINS: [ParamId; 3] = [ParamId::Kv, ParamId::Kpe, ParamId::Kie];

/// Datasheet reactances. They stay fixed: together with `T_dop` they
/// span a direction the two outputs cannot resolve.
pub const XD: f64 = 3.79;
pub const XQ: f64 = 2.12;
pub const XDP: f64 = 0.342;

pub fn true_parameters() -> ParameterSet {
    let mut p = ParameterSet::new(
        EngineParams {
            m: 40.0,
            t1: 0.025,
            t2: 0.009,
            t3: 0.038,
            p_ref: 1.0,
            omega_ref: 1.0,
        },
        ExciterParams {
            t_v: 0.05,
            k_v: 2.0,
            k_pe: 5.0,
            k_ie: 10.0,
            vt_ref: 1.0,
            vf_max: 10.0,
        },
        GenParams {
            h: 0.074,
            omega_s: 1.0,
            d_f: 0.020,
            x_d: XD,
            x_q: XQ,
            x_dp: XDP,
            t_dop: 1.16,
            r_s: 0.04,
        },
    );
    for id in FREE {
        p.set_free(id, true);
    }
    p
}

pub fn true_theta() -> Vec<f64> {
    true_parameters().theta()
}

pub fn parameter_names() -> Vec<&'static str> {
    FREE.iter().map(|p| p.name()).collect()
}

/// Bounds in estimation-vector order.
pub fn bound_specs() -> Vec<BoundSpec> {
    let lower0 = BoundSpec::TypeII { lo: 0.0 };
    let time = BoundSpec::TypeI { lo: 0.0, hi: 0.5 };
    FREE.iter()
        .map(|id| match id {
            ParamId::T1 | ParamId::T2 | ParamId::T3 | ParamId::Tv => time,
            ParamId::H => BoundSpec::TypeI { lo: 0.05, hi: 0.15 },
            _ => lower0,
        })
        .collect()
}

/// Initialization widths for the semi-infinite bounds (ignored for the
/// two-sided ones).
pub fn ga_caps() -> Vec<f64> {
    FREE.iter()
        .map(|id| match id {
            ParamId::M => 200.0,
            ParamId::Kv => 10.0,
            ParamId::Kpe => 25.0,
            ParamId::Kie => 50.0,
            ParamId::Df => 0.1,
            ParamId::Tdop => 5.0,
            ParamId::Rs => 0.2,
            _ => 1.0,
        })
        .collect()
}

pub fn ga_config() -> GaConfig {
    GaConfig {
        caps: ga_caps(),
        ..GaConfig::default()
    }
}

/// Starting estimate of cases 1-3, `None` for any other case.
pub fn case_init(case: u8) -> Option<Vec<f64>> {
    // m, T1, T2, T3, T_V, K_V, K_pe, K_ie, H, D_f, T_dop, R_s
    let row = match case {
        1 => [120.0, 0.125, 0.045, 0.19, 0.25, 10.0, 25.0, 50.0, 0.14, 0.1, 5.0, 0.2],
        2 => [80.0, 0.25, 0.09, 0.4, 0.5, 20.0, 50.0, 100.0, 0.14, 0.2, 2.3, 0.4],
        3 => [400.0, 0.25, 0.09, 0.4, 0.5, 20.0, 50.0, 100.0, 0.14, 0.2, 5.0, 0.4],
        _ => return None,
    };
    Some(row.to_vec())
}

pub fn step_up() -> LoadStepProfile {
    LoadStepProfile {
        r_pre: R_LIGHT,
        r_post: R_HEAVY,
        t_step: T_STEP,
    }
}

pub fn step_down() -> LoadStepProfile {
    LoadStepProfile {
        r_pre: R_HEAVY,
        r_post: R_LIGHT,
        t_step: T_STEP,
    }
}

/// Noise-free recordings of both load tests from the true parameters.
pub fn synthetic_data(sim: &SimConfig) -> Vec<(LoadStepProfile, MeasurementSeries)> {
    let p = true_parameters();
    [(step_up(), "synthetic step-up"), (step_down(), "synthetic step-down")]
        .into_iter()
        .map(|(profile, label)| {
            let traj = simulate(&p, &profile, sim).expect("reference parameters simulate");
            (profile, MeasurementSeries::from_trajectory(&traj, label))
        })
        .collect()
}

pub fn synthetic_problem(sim: &SimConfig) -> GeneratorProblem {
    problem_from(synthetic_data(sim), sim)
}

/// Same as [`synthetic_problem`] with Gaussian noise of `sigma` added to
/// every sample.
pub fn noisy_problem(sim: &SimConfig, sigma: f64, seed: u64) -> GeneratorProblem {
    let data = synthetic_data(sim)
        .into_iter()
        .enumerate()
        .map(|(i, (profile, s))| (profile, s.with_noise(sigma, seed.wrapping_add(i as u64))))
        .collect();
    problem_from(data, sim)
}

fn problem_from(data: Vec<(LoadStepProfile, MeasurementSeries)>, sim: &SimConfig) -> GeneratorProblem {
    GeneratorProblem::new(true_parameters(), *sim, data).expect("benchmark problem is well formed")
}

/// Largest relative deviation from the truth over `ids`.
pub fn max_relative_error(theta: &[f64], ids: &[ParamId]) -> f64 {
    let truth = true_theta();
    ids.iter()
        .map(|id| {
            let j = FREE.iter().position(|p| p == id).expect("benchmark parameter");
            ((theta[j] - truth[j]) / truth[j]).abs()
        })
        .fold(0.0, f64::max)
}

pub fn in_bounds(theta: &[f64]) -> bool {
    bound_specs().iter().zip(theta).all(|(s, &t)| s.contains(t))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            pass,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CaseRow {
    pub method: Method,
    pub outcome: Result<FitReport, String>,
    pub checks: Vec<Check>,
}

impl CaseRow {
    pub fn passed(&self) -> bool {
        self.outcome.is_ok() && self.checks.iter().all(|c| c.pass)
    }
}

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub case: u8,
    pub rows: Vec<CaseRow>,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(CaseRow::passed)
    }

    /// Table of truth, start and final estimates, followed by the checks.
    pub fn render(&self) -> String {
        let names = parameter_names();
        let mut out = String::new();
        let _ = writeln!(out, "benchmark case {}", self.case);
        let _ = write!(out, "{:<12}", "");
        for n in &names {
            let _ = write!(out, "{n:>11}");
        }
        out.push('\n');
        let mut line = |label: &str, values: &[f64]| {
            let _ = write!(out, "{label:<12}");
            for v in values {
                let _ = write!(out, "{:>11}", format_value(*v));
            }
            out.push('\n');
        };
        line("truth", &true_theta());
        if let Some(init) = case_init(self.case) {
            line("init", &init);
        }
        for row in &self.rows {
            if let Ok(r) = &row.outcome {
                line(row.method.label(), &r.theta_final);
            }
        }
        for row in &self.rows {
            match &row.outcome {
                Ok(r) => {
                    let _ = writeln!(
                        out,
                        "{}: cost {:.3e}, rmse f {:.2e} V {:.2e}, {} GA + {} local iterations, {}",
                        row.method.label(),
                        r.cost_final,
                        r.rmse_f,
                        r.rmse_v,
                        r.iterations_ga,
                        r.iterations_local,
                        r.reason.describe()
                    );
                    if !r.weak.is_empty() {
                        let _ = writeln!(out, "  weakly determined: {}", r.names_of(&r.weak).join(", "));
                    }
                }
                Err(e) => {
                    let _ = writeln!(out, "{}: failed: {e}", row.method.label());
                }
            }
            for c in &row.checks {
                let _ = writeln!(
                    out,
                    "  [{}] {}: {}",
                    if c.pass { "PASS" } else { "FAIL" },
                    c.name,
                    c.detail
                );
            }
        }
        let _ = writeln!(
            out,
            "case {}: {}",
            self.case,
            if self.passed() { "PASS" } else { "FAIL" }
        );
        out
    }
}

fn format_value(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-3) {
        format!("{v:.3e}")
    } else {
        format!("{v:.4}")
    }
}

fn recovery_check(r: &FitReport, tol: f64) -> Check {
    let err = max_relative_error(&r.theta_final, &FREE);
    Check::new(
        format!("all parameters within {:.0}%", tol * 100.0),
        err <= tol,
        format!("largest relative error {err:.3e}"),
    )
}

fn bounds_check(r: &FitReport) -> Check {
    let ok = in_bounds(&r.theta_final);
    Check::new("estimate within bounds", ok, if ok { "yes" } else { "no" })
}

fn diverged_check(r: &FitReport) -> Check {
    let truth = true_theta();
    let bad: Vec<&str> = [ParamId::T1, ParamId::T3, ParamId::Df]
        .iter()
        .filter(|id| {
            let j = FREE.iter().position(|p| p == *id).expect("benchmark parameter");
            let v = r.theta_final[j];
            v < 0.0 || v.abs() > 100.0 * truth[j]
        })
        .map(|id| id.name())
        .collect();
    Check::new(
        "T1, T3 or D_f infeasible",
        !bad.is_empty(),
        if bad.is_empty() {
            "all feasible".to_string()
        } else {
            bad.join(", ")
        },
    )
}

fn out_of_bounds_check(r: &FitReport) -> Check {
    let specs = bound_specs();
    let bad: Vec<&str> = specs
        .iter()
        .zip(&r.theta_final)
        .zip(FREE)
        .filter(|((s, &t), _)| !s.contains(t))
        .map(|(_, id)| id.name())
        .collect();
    Check::new(
        "unconstrained estimate leaves the bounds",
        !bad.is_empty(),
        if bad.is_empty() {
            "all in bounds".to_string()
        } else {
            bad.join(", ")
        },
    )
}

fn response_check(r: &FitReport, tol: f64) -> Check {
    Check::new(
        format!("per-channel RMSE <= {tol:e}"),
        r.rmse_f <= tol && r.rmse_v <= tol,
        format!("f {:.2e}, V {:.2e}", r.rmse_f, r.rmse_v),
    )
}

fn non_exciter_check(r: &FitReport, tol: f64) -> Check {
    let ids: Vec<ParamId> = FREE.iter().copied().filter(|p| !EXCITER_GAINS.contains(p)).collect();
    let err = max_relative_error(&r.theta_final, &ids);
    Check::new(
        format!("non-exciter parameters within {:.0}%", tol * 100.0),
        err <= tol,
        format!("largest relative error {err:.3e}"),
    )
}

fn exciter_flag_check(r: &FitReport, tol: f64) -> Check {
    let err = max_relative_error(&r.theta_final, &EXCITER_GAINS);
    let flagged = EXCITER_GAINS.iter().all(|id| {
        let j = FREE.iter().position(|p| p == id).expect("benchmark parameter");
        r.weak.contains(&j)
    });
    Check::new(
        "exciter gains recovered or flagged",
        err <= tol || flagged,
        format!("largest relative error {err:.3e}, flagged {flagged}"),
    )
}

fn iterations_check(r: &FitReport, max: usize) -> Check {
    Check::new(
        format!("converged in <= {max} total iterations"),
        r.converged && r.total_iterations() <= max,
        format!("{} iterations, {}", r.total_iterations(), r.reason.describe()),
    )
}

fn row(method: Method, outcome: Result<FitReport, String>, checks: impl Fn(&FitReport) -> Vec<Check>) -> CaseRow {
    let checks = outcome.as_ref().map(&checks).unwrap_or_default();
    CaseRow {
        method,
        outcome,
        checks,
    }
}

/// Runs one benchmark scenario on both load tests jointly.
///
/// Cases 1-3 run unconstrained and box-constrained LM from the tabulated
/// starting estimate; case 4 runs the hybrid method with no estimate.
pub fn run_case(case: u8, sim: &SimConfig, seed: u64, damping: DampingMatrix) -> Option<CaseResult> {
    let problem = synthetic_problem(sim);
    let specs = bound_specs();
    let stop = LmOptions::with_damping(damping);
    let rows = match case {
        1..=3 => {
            let init = case_init(case)?;
            let lm = lm_solve_unconstrained(&problem, &init, &stop).map_err(|e| e.to_string());
            let bclm = bclm_solve(&problem, &init, &specs, &stop).map_err(|e| e.to_string());
            match case {
                1 => vec![
                    row(Method::Lm, lm, |r| vec![recovery_check(r, 0.01)]),
                    row(Method::Bclm, bclm, |r| vec![recovery_check(r, 0.01), bounds_check(r)]),
                ],
                2 => vec![
                    row(Method::Lm, lm, |r| vec![diverged_check(r)]),
                    row(Method::Bclm, bclm, |r| {
                        vec![
                            bounds_check(r),
                            response_check(r, 1e-4),
                            non_exciter_check(r, 0.05),
                            exciter_flag_check(r, 0.05),
                        ]
                    }),
                ],
                _ => vec![
                    row(Method::Lm, lm, |r| vec![out_of_bounds_check(r)]),
                    row(Method::Bclm, bclm, |r| vec![bounds_check(r)]),
                ],
            }
        }
        4 => {
            let fit = hbclm_fit(&problem, &specs, &ga_config(), &stop, seed).map_err(|e| e.to_string());
            vec![row(Method::Hbclm, fit, |r| {
                vec![recovery_check(r, 0.02), iterations_check(r, 60), bounds_check(r)]
            })]
        }
        _ => return None,
    };
    Some(CaseResult { case, rows })
}
