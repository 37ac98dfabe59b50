//! Least-squares machinery for dynamic models: residuals and cost,
//! forward-difference output sensitivities, Gauss-Newton and damped
//! (Levenberg-Marquardt) updates, damping selection, and spectral
//! diagnostics of the normal matrix.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Normal matrices with `lambda_max / lambda_min` above this are singular.
pub const SINGULAR_CONDITION: f64 = 1e14;

/// Maximum number of damping inflations after all three candidates fail.
pub const STALL_RETRIES: usize = 10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NlsqError {
    #[error("normal matrix is numerically singular (condition estimate {condition:e})")]
    SingularNormalMatrix { condition: f64 },
    #[error("no damping value improved the cost (last lambda {lambda:e})")]
    StalledIteration { lambda: f64 },
}

/// A parameterised model whose stacked outputs are compared against data.
///
/// Row `r` of the stacked vectors belongs to channel `r % channels()`.
pub trait ResponseModel: Sync {
    fn n_params(&self) -> usize;

    fn channels(&self) -> usize {
        2
    }

    /// Measured values, same layout as [`ResponseModel::response`].
    fn measured(&self) -> &[f64];

    /// Simulated outputs, or `None` when the model cannot be evaluated
    /// (invalid parameters, blown-up simulation).
    fn response(&self, theta: &[f64]) -> Option<Vec<f64>>;

    fn param_names(&self) -> Vec<String> {
        (0..self.n_params()).map(|j| format!("p{j}")).collect()
    }

    /// Rewrites `theta` into a preferred representative of the parameter
    /// vectors producing the same response (for example, ordering two
    /// interchangeable time constants). The default keeps `theta`.
    fn canonicalize(&self, _theta: &mut [f64]) {}
}

/// Residuals `z - y` and the cost `0.5 * sum(residual^2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSet {
    pub residuals: Vec<f64>,
    pub channels: usize,
    pub cost: f64,
}

impl ResidualSet {
    pub fn new(residuals: Vec<f64>, channels: usize) -> Self {
        let cost = 0.5 * residuals.iter().map(|r| r * r).sum::<f64>();
        let cost = if cost.is_finite() { cost } else { f64::INFINITY };
        ResidualSet {
            residuals,
            channels,
            cost,
        }
    }

    pub fn from_outputs(measured: &[f64], outputs: &[f64], channels: usize) -> Self {
        assert_eq!(measured.len(), outputs.len(), "output length mismatch");
        Self::new(measured.iter().zip(outputs).map(|(z, y)| z - y).collect(), channels)
    }

    /// Marker for a parameter vector the model could not evaluate.
    pub fn infeasible(channels: usize) -> Self {
        ResidualSet {
            residuals: Vec::new(),
            channels,
            cost: f64::INFINITY,
        }
    }

    pub fn is_feasible(&self) -> bool {
        self.cost.is_finite()
    }
}

/// Model outputs together with their residuals.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub outputs: Vec<f64>,
    pub residuals: ResidualSet,
}

pub fn evaluate<M: ResponseModel + ?Sized>(model: &M, theta: &[f64]) -> Option<Evaluation> {
    let outputs = model.response(theta)?;
    let residuals = ResidualSet::from_outputs(model.measured(), &outputs, model.channels());
    if !residuals.is_feasible() {
        return None;
    }
    Some(Evaluation { outputs, residuals })
}

/// Cost and residuals at `theta`; infinite cost when the model fails.
pub fn objective<M: ResponseModel + ?Sized>(model: &M, theta: &[f64]) -> ResidualSet {
    evaluate(model, theta)
        .map(|e| e.residuals)
        .unwrap_or_else(|| ResidualSet::infeasible(model.channels()))
}

/// Forward-difference perturbation used for parameter `theta_j`.
pub fn fd_perturbation(theta_j: f64) -> f64 {
    1e-6 * theta_j.abs().max(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColumnStatus {
    Ok,
    /// First perturbation failed, the reduced one succeeded.
    Retried,
    /// Both perturbations failed; the column is zero.
    Failed,
}

/// `d y / d theta` stacked over samples and channels.
#[derive(Debug, Clone)]
pub struct SensitivityMatrix {
    pub entries: DMatrix<f64>,
    pub status: Vec<ColumnStatus>,
}

impl SensitivityMatrix {
    pub fn failed_columns(&self) -> Vec<usize> {
        self.status
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == ColumnStatus::Failed)
            .map(|(j, _)| j)
            .collect()
    }
}

/// Forward-difference sensitivities from one extra simulation per
/// parameter. `base_outputs` must be the response at `theta`.
///
/// A diverging perturbed simulation is retried once with a tenth of the
/// perturbation; if that also fails the column is zeroed and marked.
pub fn fd_sensitivity<M: ResponseModel + ?Sized>(model: &M, theta: &[f64], base_outputs: &[f64]) -> SensitivityMatrix {
    let n = theta.len();
    let rows = base_outputs.len();
    let columns: Vec<(Option<Vec<f64>>, ColumnStatus)> = (0..n)
        .into_par_iter()
        .map(|j| {
            let mut step = fd_perturbation(theta[j]);
            for attempt in 0..2 {
                let mut perturbed = theta.to_vec();
                perturbed[j] += step;
                // Re-read the step so it is exactly representable in theta.
                let actual = perturbed[j] - theta[j];
                if let Some(y) = model.response(&perturbed) {
                    if y.iter().all(|v| v.is_finite()) {
                        let col = y.iter().zip(base_outputs).map(|(a, b)| (a - b) / actual).collect();
                        let status = if attempt == 0 {
                            ColumnStatus::Ok
                        } else {
                            ColumnStatus::Retried
                        };
                        return (Some(col), status);
                    }
                }
                step /= 10.0;
            }
            (None, ColumnStatus::Failed)
        })
        .collect();

    let mut entries = DMatrix::zeros(rows, n);
    let mut status = Vec::with_capacity(n);
    for (j, (col, st)) in columns.into_iter().enumerate() {
        if let Some(col) = col {
            entries.set_column(j, &DVector::from_vec(col));
        }
        status.push(st);
    }
    SensitivityMatrix { entries, status }
}

fn normal_equations(s: &DMatrix<f64>, residuals: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
    assert_eq!(s.nrows(), residuals.len(), "sensitivity/residual row mismatch");
    let r = DVector::from_column_slice(residuals);
    (s.tr_mul(s), s.tr_mul(&r))
}

/// Gauss-Newton update: solves `(S^T S) d = S^T r`.
pub fn gn_step(s: &DMatrix<f64>, residuals: &[f64]) -> Result<DVector<f64>, NlsqError> {
    let (a, g) = normal_equations(s, residuals);
    let eig = SymmetricEigen::new(a.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if max.is_nan() || max <= 0.0 || condition.is_nan() || condition > SINGULAR_CONDITION {
        return Err(NlsqError::SingularNormalMatrix { condition });
    }
    a.cholesky()
        .map(|c| c.solve(&g))
        .ok_or(NlsqError::SingularNormalMatrix { condition })
}

/// Matrix multiplying the damping parameter in the damped normal
/// equations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DampingMatrix {
    /// `lambda I`: the step shrinks toward a plain gradient step.
    Identity,
    /// `lambda diag(S^T S)`: invariant to the units of each parameter, so
    /// a parameter with a small sensitivity is not frozen by a damping
    /// value sized for the others.
    #[default]
    Diagonal,
}

/// Relative floor applied to the diagonal scaling so columns without
/// sensitivity still get a positive damping term.
const DIAGONAL_FLOOR: f64 = 1e-12;

/// Damped update: solves `(S^T S + lambda I) d = S^T r`.
pub fn lm_step(s: &DMatrix<f64>, residuals: &[f64], lambda: f64) -> DVector<f64> {
    lm_step_with(s, residuals, lambda, DampingMatrix::Identity)
}

/// Damped update with the chosen damping matrix `D`: solves
/// `(S^T S + lambda D) d = S^T r`.
pub fn lm_step_with(s: &DMatrix<f64>, residuals: &[f64], lambda: f64, damping: DampingMatrix) -> DVector<f64> {
    assert!(lambda > 0.0, "damping must be positive");
    let (a, g) = normal_equations(s, residuals);
    let n = a.nrows();
    let weights: Vec<f64> = match damping {
        DampingMatrix::Identity => vec![1.0; n],
        DampingMatrix::Diagonal => {
            let top = a.diagonal().max();
            if top > 0.0 {
                a.diagonal().iter().map(|d| d.max(DIAGONAL_FLOOR * top)).collect()
            } else {
                vec![1.0; n]
            }
        }
    };
    // Solve in the variables u = W^(1/2) d, where the damping term is
    // isotropic.
    let w_sqrt: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
    let scaled_a = DMatrix::from_fn(n, n, |i, j| a[(i, j)] / (w_sqrt[i] * w_sqrt[j]));
    let scaled_g = DVector::from_fn(n, |i, _| g[i] / w_sqrt[i]);
    let u = solve_damped(scaled_a, &scaled_g, lambda);
    DVector::from_fn(n, |i, _| u[i] / w_sqrt[i])
}

fn solve_damped(a: DMatrix<f64>, g: &DVector<f64>, lambda: f64) -> DVector<f64> {
    let n = a.nrows();
    let damped = &a + DMatrix::identity(n, n) * lambda;
    if let Some(c) = damped.cholesky() {
        return c.solve(g);
    }
    // Rounding can break positive definiteness for tiny lambda on a
    // singular normal matrix; the eigen route is exact in the null space.
    let eig = SymmetricEigen::new(a);
    let proj = eig.eigenvectors.tr_mul(g);
    let scaled = DVector::from_iterator(
        n,
        proj.iter()
            .zip(eig.eigenvalues.iter())
            .map(|(p, mu)| p / (mu.max(0.0) + lambda)),
    );
    eig.eigenvectors * scaled
}

/// Levenberg-Marquardt damping parameter and its adjustment factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DampingState {
    pub lambda: f64,
    pub a: f64,
}

impl Default for DampingState {
    fn default() -> Self {
        DampingState { lambda: 1e-3, a: 0.1 }
    }
}

/// Outcome of one damping selection.
#[derive(Debug, Clone)]
pub struct LambdaChoice<T> {
    pub lambda: f64,
    pub cost: f64,
    pub payload: T,
    /// Objective evaluations spent.
    pub evaluations: usize,
}

fn sanitize(cost: f64) -> f64 {
    if cost.is_nan() {
        f64::INFINITY
    } else {
        cost
    }
}

/// Compares the steps for `a*lambda`, `lambda` and `lambda/a` and adopts
/// the cheapest, provided it does not raise the cost. If all three do,
/// the damping is inflated by `1/a` and the step re-evaluated, up to
/// [`STALL_RETRIES`] times.
///
/// `eval(lambda)` must return the cost of the step taken with that damping
/// plus anything the caller wants back for the winner.
pub fn choose_lambda<T, F>(
    state: &DampingState,
    current_cost: f64,
    eval: F,
) -> Result<(DampingState, LambdaChoice<T>), NlsqError>
where
    T: Send,
    F: Fn(f64) -> (f64, T) + Sync,
{
    let lam = state.lambda;
    let candidates = [state.a * lam, lam, lam / state.a];
    let mut results: Vec<(f64, f64, T)> = candidates
        .par_iter()
        .map(|&l| {
            let (c, t) = eval(l);
            (l, sanitize(c), t)
        })
        .collect();

    let best = results
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
        .map(|(i, _)| i)
        .expect("three candidates");
    let evaluations = results.len();
    if results[best].1 <= current_cost {
        let (lambda, cost, payload) = results.swap_remove(best);
        return Ok((
            DampingState { lambda, ..*state },
            LambdaChoice {
                lambda,
                cost,
                payload,
                evaluations,
            },
        ));
    }

    let mut lambda = lam / state.a;
    for retry in 1..=STALL_RETRIES {
        lambda /= state.a;
        let (cost, payload) = eval(lambda);
        if sanitize(cost) <= current_cost {
            return Ok((
                DampingState { lambda, ..*state },
                LambdaChoice {
                    lambda,
                    cost,
                    payload,
                    evaluations: evaluations + retry,
                },
            ));
        }
    }
    Err(NlsqError::StalledIteration { lambda })
}

/// Eigenvalues of `S^T S` in descending order.
pub fn hessian_spectrum(s: &DMatrix<f64>) -> Vec<f64> {
    let eig = SymmetricEigen::new(s.tr_mul(s));
    let mut values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    values.sort_by(|a, b| b.total_cmp(a));
    values
}

/// `min / max` of a descending spectrum; 0 for an empty or all-zero one.
pub fn spectrum_ratio(spectrum: &[f64]) -> f64 {
    match (spectrum.first(), spectrum.last()) {
        (Some(&max), Some(&min)) if max > 0.0 => min / max,
        _ => 0.0,
    }
}

/// Per-channel root-mean-square residual, frequency first then voltage.
pub fn channel_rmse(r: &ResidualSet) -> (f64, f64) {
    if !r.is_feasible() {
        return (f64::INFINITY, f64::INFINITY);
    }
    let ch = r.channels.max(1);
    let rms = |c: usize| {
        let (sum, n) = r
            .residuals
            .iter()
            .skip(c)
            .step_by(ch)
            .fold((0.0, 0usize), |(s, n), v| (s + v * v, n + 1));
        if n == 0 {
            0.0
        } else {
            (sum / n as f64).sqrt()
        }
    };
    (rms(0), if ch > 1 { rms(1) } else { 0.0 })
}

/// Columns that are poorly determined by the data: either their norm is
/// below `rel_tol` of the largest column norm, or they take part in a
/// near-null direction of `S^T S` (eigenvalue below `null_tol * max`, with
/// an eigenvector component above 0.1 after column scaling).
pub fn weak_parameters(s: &DMatrix<f64>, rel_tol: f64, null_tol: f64) -> Vec<usize> {
    let n = s.ncols();
    let norms: Vec<f64> = (0..n).map(|j| s.column(j).norm()).collect();
    let max_norm = norms.iter().copied().fold(0.0, f64::max);
    if max_norm == 0.0 {
        return (0..n).collect();
    }
    let mut weak: Vec<bool> = norms.iter().map(|&c| c < rel_tol * max_norm).collect();
    // Scale columns to unit norm so the null-space test sees directions,
    // not units.
    let mut scaled = s.clone();
    for (j, &c) in norms.iter().enumerate() {
        if c > 0.0 {
            scaled.column_mut(j).scale_mut(1.0 / c);
        }
    }
    let eig = SymmetricEigen::new(scaled.tr_mul(&scaled));
    let max = eig.eigenvalues.max();
    for (k, &mu) in eig.eigenvalues.iter().enumerate() {
        if mu <= null_tol * max {
            for (j, w) in weak.iter_mut().enumerate() {
                if eig.eigenvectors[(j, k)].abs() > 0.1 {
                    *w = true;
                }
            }
        }
    }
    (0..n).filter(|&j| weak[j]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// `y(t) = exp(-theta t)` sampled at fixed times, one channel, integrated
    /// with RK4.
    struct Decay {
        times: Vec<f64>,
        data: Vec<f64>,
    }

    impl Decay {
        fn simulate(&self, theta: f64) -> Vec<f64> {
            let h = 1e-3;
            let mut y = [1.0];
            let mut t = 0.0;
            let mut out = Vec::new();
            let mut step = 0usize;
            for &tk in &self.times {
                let target = (tk / h).round() as usize;
                while step < target {
                    y = crate::integrator::rk4_step_with(&y, t, h, |_, s| Ok::<_, ()>([-theta * s[0]])).unwrap();
                    step += 1;
                    t = step as f64 * h;
                }
                out.push(y[0]);
            }
            out
        }
    }

    impl ResponseModel for Decay {
        fn n_params(&self) -> usize {
            1
        }
        fn channels(&self) -> usize {
            1
        }
        fn measured(&self) -> &[f64] {
            &self.data
        }
        fn response(&self, theta: &[f64]) -> Option<Vec<f64>> {
            Some(self.simulate(theta[0]))
        }
    }

    /// Linear model `y = A theta`, two channels.
    struct Linear {
        a: DMatrix<f64>,
        data: Vec<f64>,
    }

    impl ResponseModel for Linear {
        fn n_params(&self) -> usize {
            self.a.ncols()
        }
        fn measured(&self) -> &[f64] {
            &self.data
        }
        fn response(&self, theta: &[f64]) -> Option<Vec<f64>> {
            Some((&self.a * DVector::from_column_slice(theta)).as_slice().to_vec())
        }
    }

    #[test]
    fn self_residual_is_zero() {
        let m = Decay {
            times: vec![0.5, 1.0, 2.0],
            data: vec![],
        };
        let data = m.simulate(0.7);
        let m = Decay { data, ..m };
        assert!(objective(&m, &[0.7]).cost <= 1e-20);
    }

    #[test]
    fn unit_offset_cost() {
        let n = 37;
        let measured: Vec<f64> = (0..2 * n).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }).collect();
        let r = ResidualSet::from_outputs(&measured, &vec![0.0; 2 * n], 2);
        assert_eq!(r.cost, n as f64 / 2.0);
        assert_eq!(channel_rmse(&r), (1.0, 0.0));
    }

    #[test]
    fn infeasible_model_has_infinite_cost() {
        struct Broken(Vec<f64>);
        impl ResponseModel for Broken {
            fn n_params(&self) -> usize {
                1
            }
            fn measured(&self) -> &[f64] {
                &self.0
            }
            fn response(&self, _: &[f64]) -> Option<Vec<f64>> {
                None
            }
        }
        let r = objective(&Broken(vec![0.0, 0.0]), &[1.0]);
        assert_eq!(r.cost, f64::INFINITY);
        assert_eq!(channel_rmse(&r), (f64::INFINITY, f64::INFINITY));
    }

    #[test]
    fn fd_matches_closed_form_decay_sensitivity() {
        let theta = 0.8;
        let m = Decay {
            times: vec![0.5, 1.0, 2.0],
            data: vec![0.0; 3],
        };
        let y = m.simulate(theta);
        let s = fd_sensitivity(&m, &[theta], &y);
        for (k, &t) in m.times.iter().enumerate() {
            let exact = -t * (-theta * t).exp();
            let rel = (s.entries[(k, 0)] - exact).abs() / exact.abs();
            assert!(rel < 1e-4, "t={t}: {} vs {exact}", s.entries[(k, 0)]);
        }
    }

    #[test]
    fn fd_error_scales_with_perturbation() {
        // d/dtheta exp(-theta t) with two explicit step sizes: halving the
        // step halves the truncation error.
        let (theta, t) = (0.8f64, 2.0f64);
        let f = |th: f64| (-th * t).exp();
        let exact = -t * (-theta * t).exp();
        let e1 = ((f(theta + 2e-4) - f(theta)) / 2e-4 - exact).abs();
        let e2 = ((f(theta + 1e-4) - f(theta)) / 1e-4 - exact).abs();
        assert!((e1 / e2 - 2.0).abs() < 0.05, "{}", e1 / e2);
    }

    #[test]
    fn structural_zero_column() {
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 2.0, 0.0, 3.0, 0.0, 4.0, 0.0]);
        let m = Linear { a, data: vec![0.0; 4] };
        let y = m.response(&[1.0, 1.0]).unwrap();
        let s = fd_sensitivity(&m, &[1.0, 1.0], &y);
        assert_eq!(s.entries.column(1).amax(), 0.0);
        assert!((s.entries[(3, 0)] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn diverging_perturbation_is_retried_then_zeroed() {
        struct Fragile {
            data: Vec<f64>,
            limit: f64,
        }
        impl ResponseModel for Fragile {
            fn n_params(&self) -> usize {
                2
            }
            fn measured(&self) -> &[f64] {
                &self.data
            }
            fn response(&self, theta: &[f64]) -> Option<Vec<f64>> {
                (theta[1] <= self.limit).then(|| vec![theta[0], theta[1]])
            }
        }
        // Full step on theta_1 crosses the limit; a tenth of it does not.
        let m = Fragile {
            data: vec![0.0, 0.0],
            limit: 5e-7,
        };
        let y = m.response(&[1.0, 0.0]).unwrap();
        let s = fd_sensitivity(&m, &[1.0, 0.0], &y);
        assert_eq!(s.status, vec![ColumnStatus::Ok, ColumnStatus::Retried]);
        assert!((s.entries[(1, 1)] - 1.0).abs() < 1e-6);

        let m = Fragile {
            data: vec![0.0, 0.0],
            limit: 0.0,
        };
        let s = fd_sensitivity(&m, &[1.0, 0.0], &y);
        assert_eq!(s.failed_columns(), vec![1]);
        assert_eq!(s.entries.column(1).amax(), 0.0);
    }

    #[test]
    fn gn_identity() {
        let s = DMatrix::identity(3, 3);
        let d = gn_step(&s, &[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(d.as_slice(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn gn_zero_column_is_singular() {
        let s = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 2.0, 0.0, 3.0, 0.0]);
        assert!(matches!(
            gn_step(&s, &[1.0, 1.0, 1.0]),
            Err(NlsqError::SingularNormalMatrix { .. })
        ));
    }

    #[test]
    fn gn_matches_qr_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = DMatrix::from_fn(10, 4, |_, _| rng.random_range(-1.0..1.0));
        let r: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let d = gn_step(&s, &r).unwrap();
        // Oracle: min ||S d - r|| via QR of S itself.
        let qr = s.clone().qr();
        let qtr = qr.q().tr_mul(&DVector::from_vec(r));
        let oracle = qr.r().solve_upper_triangular(&qtr).unwrap();
        assert!((d - oracle).amax() < 1e-10);
    }

    #[test]
    fn lm_large_damping_is_scaled_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = DMatrix::from_fn(8, 3, |_, _| rng.random_range(-1.0..1.0));
        let r: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lam = 1e12;
        let d = lm_step(&s, &r, lam);
        let grad = s.tr_mul(&DVector::from_column_slice(&r)) / lam;
        assert!((&d - &grad).amax() <= 1e-9 * grad.amax());
    }

    #[test]
    fn lm_tiny_damping_is_gauss_newton() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = DMatrix::from_fn(12, 4, |_, _| rng.random_range(-1.0..1.0));
        let r: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let gn = gn_step(&s, &r).unwrap();
        let lm = lm_step(&s, &r, 1e-12);
        assert!((&lm - &gn).norm() <= 1e-6 * gn.norm());
    }

    #[test]
    fn lm_rank_deficient_has_no_null_component() {
        // y = theta_0 on both rows; theta_1 unobserved.
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]);
        let d = lm_step(&s, &[1.0, 3.0], 1e-3);
        // (2 + 1e-3) d0 = 4
        assert!((d[0] - 4.0 / 2.001).abs() < 1e-14);
        assert_eq!(d[1], 0.0);
    }

    #[test]
    fn diagonal_damping_is_unit_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = DMatrix::from_fn(10, 3, |_, _| rng.random_range(-1.0..1.0));
        let r: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let scale = [1e-3, 1.0, 250.0];
        let mut scaled = s.clone();
        for (j, c) in scale.iter().enumerate() {
            scaled.column_mut(j).scale_mut(*c);
        }
        let d = lm_step_with(&s, &r, 0.3, DampingMatrix::Diagonal);
        let ds = lm_step_with(&scaled, &r, 0.3, DampingMatrix::Diagonal);
        for j in 0..3 {
            assert!((ds[j] * scale[j] - d[j]).abs() <= 1e-10 * d.amax());
        }
        // The identity-damped step has no such invariance.
        let di = lm_step_with(&scaled, &r, 0.3, DampingMatrix::Identity);
        assert!((di[0] * scale[0] - d[0]).abs() > 1e-3 * d.amax());
    }

    #[test]
    fn diagonal_damping_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let s = DMatrix::from_fn(12, 4, |_, _| rng.random_range(-1.0..1.0));
        let r: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let gn = gn_step(&s, &r).unwrap();
        let lm = lm_step_with(&s, &r, 1e-12, DampingMatrix::Diagonal);
        assert!((&lm - &gn).norm() <= 1e-6 * gn.norm());

        let z = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]);
        let d = lm_step_with(&z, &[1.0, 3.0], 1e-3, DampingMatrix::Diagonal);
        assert!(d.iter().all(|v| v.is_finite()));
        assert_eq!(d[1], 0.0);
    }

    #[test]
    fn choose_lambda_adopts_the_only_improvement() {
        let state = DampingState::default();
        let (next, pick) = choose_lambda(&state, 1.0, |l| {
            let c = if (l - 1e-2).abs() < 1e-15 { 0.5 } else { 2.0 };
            (c, l)
        })
        .unwrap();
        assert_eq!(pick.payload, 1e-2);
        assert_eq!(next.lambda, 1e-2);
        assert_eq!(pick.evaluations, 3);
    }

    #[test]
    fn choose_lambda_prefers_small_damping_on_quadratic() {
        // h(x) = 0.5 ||A x - b||^2, exactly linear residuals.
        let a = DMatrix::from_row_slice(3, 2, &[2.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let b = [1.0, 2.0, 3.0];
        let x0 = DVector::from_vec(vec![0.0, 0.0]);
        let residual = |x: &DVector<f64>| {
            let y = &a * x;
            b.iter().zip(y.iter()).map(|(b, y)| b - y).collect::<Vec<_>>()
        };
        let r0 = residual(&x0);
        let cost0 = ResidualSet::new(r0.clone(), 1).cost;
        let state = DampingState::default();
        let (next, _) = choose_lambda(&state, cost0, |l| {
            let x = &x0 + lm_step(&a, &r0, l);
            (ResidualSet::new(residual(&x), 1).cost, ())
        })
        .unwrap();
        assert!((next.lambda - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn choose_lambda_inflates_when_everything_worsens() {
        let state = DampingState::default();
        // Only damping >= 1 produces an acceptable step.
        let (next, pick) = choose_lambda(&state, 1.0, |l| (if l >= 0.5 { 0.9 } else { 5.0 }, ())).unwrap();
        assert!((next.lambda - 1.0).abs() < 1e-12);
        assert_eq!(pick.evaluations, 3 + 2);
        let err = choose_lambda(&state, 1.0, |_| (5.0, ())).unwrap_err();
        assert!(matches!(err, NlsqError::StalledIteration { .. }));
    }

    #[test]
    fn spectrum_of_identity_and_duplicates() {
        let spec = hessian_spectrum(&DMatrix::identity(4, 4));
        assert!(spec.iter().all(|v| (v - 1.0).abs() < 1e-14));
        let s = DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 2.0, 2.0, 2.0, 0.5, 3.0, 3.0, 1.0]);
        let spec = hessian_spectrum(&s);
        assert!(spec[2] <= 1e-12 * spec[0]);
        assert!(spec.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn rmse_matches_direct_computation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let res: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = ResidualSet::new(res.clone(), 2);
        let f: Vec<f64> = res.iter().step_by(2).copied().collect();
        let v: Vec<f64> = res.iter().skip(1).step_by(2).copied().collect();
        let direct = |x: &[f64]| (x.iter().map(|a| a * a).sum::<f64>() / x.len() as f64).sqrt();
        let (rf, rv) = channel_rmse(&r);
        assert!((rf - direct(&f)).abs() < 1e-15);
        assert!((rv - direct(&v)).abs() < 1e-15);
        assert_eq!(channel_rmse(&ResidualSet::new(vec![0.0; 6], 2)), (0.0, 0.0));
        assert_eq!(channel_rmse(&ResidualSet::new(vec![0.3, -0.3, 0.3, -0.3], 2)).1, 0.3);
    }

    #[test]
    fn weak_parameters_flags_products() {
        // y = (p0 * p1) * t + p2 * t^2: p0 and p1 only enter as a product.
        let ts: Vec<f64> = (0..20).map(|i| i as f64 * 0.1).collect();
        let (p0, p1) = (2.0, 5.0);
        let mut s = DMatrix::zeros(ts.len(), 3);
        for (k, t) in ts.iter().enumerate() {
            s[(k, 0)] = p1 * t;
            s[(k, 1)] = p0 * t;
            s[(k, 2)] = t * t;
        }
        assert_eq!(weak_parameters(&s, 1e-6, 1e-9), vec![0, 1]);
        s.column_mut(2).fill(0.0);
        assert!(weak_parameters(&s, 1e-6, 1e-9).contains(&2));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #[test]
            fn damping_shrinks_step(
                seed in 0u64..1000,
                l1 in 1e-6f64..1.0,
                factor in 1.0f64..1e6,
                rank_deficient in any::<bool>(),
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut s = DMatrix::from_fn(6, 4, |_, _| rng.random_range(-1.0..1.0));
                if rank_deficient {
                    let c = s.column(0).clone_owned();
                    s.set_column(3, &c);
                }
                let r: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
                let d1 = lm_step(&s, &r, l1).norm();
                let d2 = lm_step(&s, &r, l1 * factor).norm();
                prop_assert!(d1 >= d2 * (1.0 - 1e-12));
                prop_assert!(d1.is_finite() && d2.is_finite());
            }

            #[test]
            fn cost_is_order_invariant(values in proptest::collection::vec(-10.0f64..10.0, 2..40), seed in 0u64..100) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut shuffled = values.clone();
                for i in (1..shuffled.len()).rev() {
                    let j = rng.random_range(0..=i);
                    shuffled.swap(i, j);
                }
                let a = ResidualSet::new(values, 1).cost;
                let b = ResidualSet::new(shuffled, 1).cost;
                prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
            }
        }
    }
}
