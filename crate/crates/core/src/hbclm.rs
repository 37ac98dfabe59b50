//! Two-stage estimation: a seeded genetic search inside the bounds, then
//! Levenberg-Marquardt iterations carried out in the unbounded search
//! space so every evaluated parameter vector respects its box.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxmap::{self, BoundSpec, BoxError};
use crate::golga::{run_ga, GaConfig, GaError, GenerationRecord};
use crate::nlsq::{
    self, channel_rmse, choose_lambda, evaluate, fd_sensitivity, hessian_spectrum, lm_step_with, weak_parameters,
    DampingMatrix, DampingState, Evaluation, NlsqError, ResponseModel,
};

/// Column-norm ratio below which a parameter is reported as weakly
/// determined.
pub const WEAK_COLUMN_RATIO: f64 = 1e-6;
/// Eigenvalue ratio marking a near-null direction of the normal matrix.
pub const NULL_EIGEN_RATIO: f64 = 1e-9;
/// Cost at or below which the data are reproduced to rounding error and
/// the local search ends as converged.
pub const EXACT_FIT_COST: f64 = 1e-20;

#[derive(Debug, Error)]
pub enum FitError {
    #[error(transparent)]
    OutOfBounds(#[from] BoxError),
    #[error("the model cannot be evaluated at the starting point")]
    InfeasibleStart,
    #[error(transparent)]
    Ga(#[from] GaError),
    #[error("starting vector has {got} entries, the model has {expected} free parameters")]
    Dimension { expected: usize, got: usize },
    #[error("invalid stopping criteria: {0}")]
    BadStopping(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StoppingCriteria {
    pub max_iterations: usize,
    pub rel_cost_tol: f64,
}

impl Default for StoppingCriteria {
    fn default() -> Self {
        StoppingCriteria {
            max_iterations: 50,
            rel_cost_tol: 1e-6,
        }
    }
}

impl StoppingCriteria {
    pub fn validate(&self) -> Result<(), FitError> {
        if self.max_iterations == 0 {
            return Err(FitError::BadStopping("max_iterations must be >= 1".into()));
        }
        if self.rel_cost_tol.is_nan() || self.rel_cost_tol <= 0.0 {
            return Err(FitError::BadStopping("rel_cost_tol must be > 0".into()));
        }
        Ok(())
    }
}

/// Settings of the local (damped least-squares) stage.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LmOptions {
    pub stopping: StoppingCriteria,
    pub damping: DampingMatrix,
}

impl LmOptions {
    pub fn with_damping(damping: DampingMatrix) -> Self {
        LmOptions {
            damping,
            ..LmOptions::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// `|h_i - h_{i-1}| / h_i` fell below the tolerance.
    RelativeCost,
    /// The cost reached [`EXACT_FIT_COST`].
    ExactFit,
    MaxIterations,
    /// No damping value produced an acceptable step.
    Stalled,
}

impl StopReason {
    pub fn converged(self) -> bool {
        matches!(self, StopReason::RelativeCost | StopReason::ExactFit)
    }

    pub fn describe(self) -> &'static str {
        match self {
            StopReason::RelativeCost => "relative cost change below tolerance",
            StopReason::ExactFit => "data reproduced to rounding error",
            StopReason::MaxIterations => "iteration limit reached",
            StopReason::Stalled => "no damping value reduced the cost",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Lm,
    Bclm,
    Hbclm,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Lm => "LM",
            Method::Bclm => "BCLM",
            Method::Hbclm => "H-BCLM",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub method: Method,
    pub names: Vec<String>,
    pub theta_initial: Vec<f64>,
    pub theta_final: Vec<f64>,
    pub cost_initial: f64,
    pub cost_final: f64,
    /// Cost after each accepted local iteration.
    pub cost_trace: Vec<f64>,
    /// Damping adopted at each accepted local iteration.
    pub lambda_trace: Vec<f64>,
    pub theta_trace: Vec<Vec<f64>>,
    pub rmse_f: f64,
    pub rmse_v: f64,
    pub iterations_ga: usize,
    pub iterations_local: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub reason: StopReason,
    /// Eigenvalues of `S^T S` at the solution, descending.
    pub spectrum: Vec<f64>,
    /// Parameters whose sensitivity column failed to evaluate.
    pub fd_failures: Vec<usize>,
    /// Parameters sitting on (or within 1e-6 of) a bound.
    pub bound_touching: Vec<usize>,
    /// Parameters the data barely determines.
    pub weak: Vec<usize>,
    pub ga_trace: Vec<GenerationRecord>,
}

impl FitReport {
    pub fn total_iterations(&self) -> usize {
        self.iterations_ga + self.iterations_local
    }

    pub fn names_of(&self, idx: &[usize]) -> Vec<&str> {
        idx.iter().map(|&j| self.names[j].as_str()).collect()
    }
}

/// Maps the solver's working vector to model parameters.
enum Space<'a> {
    Physical,
    Boxed(&'a [BoundSpec]),
}

impl Space<'_> {
    fn theta(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Space::Physical => x.to_vec(),
            Space::Boxed(specs) => boxmap::forward(x, specs),
        }
    }

    fn nudge(&self, x: &mut [f64]) {
        if let Space::Boxed(specs) = self {
            boxmap::nudge_stationary(x, specs);
        }
    }
}

struct LocalRun {
    theta: Vec<f64>,
    eval: Evaluation,
    cost_trace: Vec<f64>,
    lambda_trace: Vec<f64>,
    theta_trace: Vec<Vec<f64>>,
    iterations: usize,
    evaluations: usize,
    reason: StopReason,
    fd_failures: Vec<usize>,
}

fn local_search<M: ResponseModel + ?Sized>(
    model: &M,
    x0: Vec<f64>,
    space: Space<'_>,
    opts: &LmOptions,
) -> Result<LocalRun, FitError> {
    let stop = &opts.stopping;
    stop.validate()?;
    let mut x = x0;
    space.nudge(&mut x);
    let mut theta = space.theta(&x);
    let mut eval = evaluate(model, &theta).ok_or(FitError::InfeasibleStart)?;
    let mut evaluations = 1;
    let mut damping = DampingState::default();
    let mut cost_trace = Vec::new();
    let mut lambda_trace = Vec::new();
    let mut theta_trace = Vec::new();
    let mut fd_failures = Vec::new();
    let mut reason = StopReason::MaxIterations;
    let mut iterations = 0;

    while iterations < stop.max_iterations {
        let sens = fd_sensitivity(model, &theta, &eval.outputs);
        evaluations += theta.len();
        for j in sens.failed_columns() {
            if !fd_failures.contains(&j) {
                fd_failures.push(j);
            }
        }
        let s = match &space {
            Space::Physical => sens.entries,
            Space::Boxed(specs) => boxmap::beta_sensitivity(&sens.entries, &boxmap::mapping_jacobian(&x, specs)),
        };
        let residuals = &eval.residuals.residuals;
        let cost = eval.residuals.cost;

        let attempt = choose_lambda(&damping, cost, |lambda| {
            let step = lm_step_with(&s, residuals, lambda, opts.damping);
            let mut next: Vec<f64> = (DVector::from_column_slice(&x) + step).iter().copied().collect();
            space.nudge(&mut next);
            let th = space.theta(&next);
            match evaluate(model, &th) {
                Some(e) => (e.residuals.cost, Some((next, th, e))),
                None => (f64::INFINITY, None),
            }
        });

        let (state, choice) = match attempt {
            Ok(ok) => ok,
            Err(NlsqError::StalledIteration { .. }) => {
                // All retries are full objective calls.
                evaluations += 3 + nlsq::STALL_RETRIES;
                reason = if cost <= EXACT_FIT_COST {
                    StopReason::ExactFit
                } else {
                    StopReason::Stalled
                };
                break;
            }
            Err(e) => unreachable!("damping selection only stalls: {e}"),
        };
        evaluations += choice.evaluations;
        iterations += 1;
        damping = state;
        let (next_x, next_theta, next_eval) = choice.payload.expect("accepted step has a finite cost");
        let new_cost = next_eval.residuals.cost;
        x = next_x;
        theta = next_theta;
        eval = next_eval;
        cost_trace.push(new_cost);
        lambda_trace.push(damping.lambda);
        theta_trace.push(theta.clone());

        let rel = (new_cost - cost).abs() / new_cost.max(1e-30);
        log::info!(
            "iteration {iterations}: cost {new_cost:.6e}, lambda {:.3e}",
            damping.lambda
        );
        if rel <= stop.rel_cost_tol {
            reason = StopReason::RelativeCost;
            break;
        }
        if new_cost <= EXACT_FIT_COST {
            reason = StopReason::ExactFit;
            break;
        }
    }

    Ok(LocalRun {
        theta,
        eval,
        cost_trace,
        lambda_trace,
        theta_trace,
        iterations,
        evaluations,
        reason,
        fd_failures,
    })
}

fn touching(theta: &[f64], specs: &[BoundSpec]) -> Vec<usize> {
    specs
        .iter()
        .filter(|s| !s.is_fixed())
        .zip(theta)
        .enumerate()
        .filter(|(_, (s, &t))| {
            let tol = 1e-6 * t.abs().max(1.0);
            (t - s.lower()).abs() <= tol || (s.upper() - t).abs() <= tol
        })
        .map(|(j, _)| j)
        .collect()
}

fn assemble<M: ResponseModel + ?Sized>(
    model: &M,
    method: Method,
    theta0: Vec<f64>,
    cost0: f64,
    run: LocalRun,
    specs: Option<&[BoundSpec]>,
) -> FitReport {
    let mut run = run;
    let mut canonical = run.theta.clone();
    model.canonicalize(&mut canonical);
    let admissible = specs.is_none_or(|s| {
        s.iter()
            .filter(|b| !b.is_fixed())
            .zip(&canonical)
            .all(|(b, &t)| b.contains(t))
    });
    if canonical != run.theta && admissible {
        if let Some(eval) = evaluate(model, &canonical) {
            run.theta = canonical;
            run.eval = eval;
        }
    }
    let (rmse_f, rmse_v) = channel_rmse(&run.eval.residuals);
    let sens = fd_sensitivity(model, &run.theta, &run.eval.outputs);
    let spectrum = hessian_spectrum(&sens.entries);
    let weak = weak_parameters(&sens.entries, WEAK_COLUMN_RATIO, NULL_EIGEN_RATIO);
    let mut fd_failures = run.fd_failures;
    for j in sens.failed_columns() {
        if !fd_failures.contains(&j) {
            fd_failures.push(j);
        }
    }
    fd_failures.sort_unstable();
    FitReport {
        method,
        names: model.param_names(),
        theta_initial: theta0,
        cost_initial: cost0,
        cost_final: run.eval.residuals.cost,
        bound_touching: specs.map(|s| touching(&run.theta, s)).unwrap_or_default(),
        theta_final: run.theta,
        cost_trace: run.cost_trace,
        lambda_trace: run.lambda_trace,
        theta_trace: run.theta_trace,
        rmse_f,
        rmse_v,
        iterations_ga: 0,
        iterations_local: run.iterations,
        evaluations: run.evaluations + 1 + model.n_params(),
        converged: run.reason.converged(),
        reason: run.reason,
        spectrum,
        fd_failures,
        weak,
        ga_trace: Vec::new(),
    }
}

fn check_dimension<M: ResponseModel + ?Sized>(model: &M, theta0: &[f64]) -> Result<(), FitError> {
    if theta0.len() != model.n_params() {
        return Err(FitError::Dimension {
            expected: model.n_params(),
            got: theta0.len(),
        });
    }
    Ok(())
}

/// Box-constrained LM from an in-bounds start.
pub fn bclm_solve<M: ResponseModel + ?Sized>(
    model: &M,
    theta0: &[f64],
    specs: &[BoundSpec],
    opts: &LmOptions,
) -> Result<FitReport, FitError> {
    check_dimension(model, theta0)?;
    boxmap::check_specs(specs)?;
    let beta0 = boxmap::inverse(theta0, specs)?;
    let cost0 = nlsq::objective(model, theta0).cost;
    let run = local_search(model, beta0, Space::Boxed(specs), opts)?;
    Ok(assemble(model, Method::Bclm, theta0.to_vec(), cost0, run, Some(specs)))
}

/// Plain LM directly on the physical parameters; nothing keeps them in a
/// physical range.
pub fn lm_solve_unconstrained<M: ResponseModel + ?Sized>(
    model: &M,
    theta0: &[f64],
    opts: &LmOptions,
) -> Result<FitReport, FitError> {
    check_dimension(model, theta0)?;
    let cost0 = nlsq::objective(model, theta0).cost;
    let run = local_search(model, theta0.to_vec(), Space::Physical, opts)?;
    Ok(assemble(model, Method::Lm, theta0.to_vec(), cost0, run, None))
}

/// Genetic search within the bounds, then box-constrained LM from the
/// best chromosome.
pub fn hbclm_fit<M: ResponseModel + ?Sized>(
    model: &M,
    specs: &[BoundSpec],
    ga: &GaConfig,
    opts: &LmOptions,
    seed: u64,
) -> Result<FitReport, FitError> {
    boxmap::check_specs(specs)?;
    let objective = |theta: &[f64]| nlsq::objective(model, theta).cost;
    let outcome = run_ga(objective, specs, ga, seed)?;
    log::info!(
        "global search: best cost {:.6e} after {} generations, {} evaluations",
        outcome.best.cost,
        ga.generations,
        outcome.evaluations
    );
    let mut report = bclm_solve(model, &outcome.best.theta, specs, opts)?;
    report.method = Method::Hbclm;
    report.iterations_ga = ga.generations;
    report.evaluations += outcome.evaluations;
    report.ga_trace = outcome.trace;
    Ok(report)
}
