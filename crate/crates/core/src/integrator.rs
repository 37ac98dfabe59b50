//! Fixed-step classical Runge-Kutta integration under a single load step.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynmodel::{
    derivative_array, output_map, steady_state, ModelError, OutputVector, ParameterSet, StateVector,
};

/// States larger than this in magnitude count as a blown-up simulation.
pub const BLOW_UP_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("simulation blew up at t = {time} s")]
    BlewUp { time: f64 },
    #[error("invalid simulation setup: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Resistive load before and after a step at `t_step`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoadStepProfile {
    pub r_pre: f64,
    pub r_post: f64,
    pub t_step: f64,
}

impl LoadStepProfile {
    /// Load resistance drawing power fraction `p` at 1 p.u. voltage.
    pub fn resistance_for_power(p: f64) -> f64 {
        1.0 / p
    }

    pub fn from_power_fractions(p_pre: f64, p_post: f64, t_step: f64) -> Self {
        LoadStepProfile {
            r_pre: Self::resistance_for_power(p_pre),
            r_post: Self::resistance_for_power(p_post),
            t_step,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let ok = |r: f64| r.is_finite() && r > 0.0;
        if !ok(self.r_pre) || !ok(self.r_post) {
            return Err(SimError::BadConfig(format!(
                "load resistances must be positive, got {} -> {}",
                self.r_pre, self.r_post
            )));
        }
        if !(self.t_step.is_finite() && self.t_step >= 0.0) {
            return Err(SimError::BadConfig(format!("t_step must be >= 0, got {}", self.t_step)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub t_end: f64,
    pub h: f64,
    /// Emit every `sample_stride`-th grid point.
    pub sample_stride: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            t_end: 5.0,
            h: 1e-3,
            sample_stride: 10,
        }
    }
}

impl SimConfig {
    /// 30 s at 100 us, sampled every 10 ms.
    pub fn paper_scale() -> Self {
        SimConfig {
            t_end: 30.0,
            h: 1e-4,
            sample_stride: 100,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.h.is_finite() && self.h > 0.0) {
            return Err(SimError::BadConfig(format!("h must be > 0, got {}", self.h)));
        }
        if !(self.t_end.is_finite() && self.t_end > 0.0) {
            return Err(SimError::BadConfig(format!("t_end must be > 0, got {}", self.t_end)));
        }
        if self.sample_stride == 0 {
            return Err(SimError::BadConfig("sample_stride must be >= 1".into()));
        }
        Ok(())
    }

    /// Number of integration steps covering `[0, t_end]`.
    pub fn steps(&self) -> usize {
        (self.t_end / self.h).round() as usize
    }

    /// Grid index of the first point at or after `t`.
    pub fn grid_index_at_or_after(&self, t: f64) -> usize {
        (t / self.h - 1e-9).ceil().max(0.0) as usize
    }

    pub fn sample_interval(&self) -> f64 {
        self.h * self.sample_stride as f64
    }

    /// Number of emitted samples.
    pub fn sample_count(&self) -> usize {
        self.steps() / self.sample_stride + 1
    }

    pub fn sample_time(&self, k: usize) -> f64 {
        (k * self.sample_stride) as f64 * self.h
    }
}

/// Sampled model outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub outputs: Vec<OutputVector>,
    pub final_state: StateVector,
}

/// One classical RK4 step of `dx/dt = f(t, x)`.
pub fn rk4_step_with<const N: usize, E>(
    x: &[f64; N],
    t: f64,
    h: f64,
    mut f: impl FnMut(f64, &[f64; N]) -> Result<[f64; N], E>,
) -> Result<[f64; N], E> {
    let half = 0.5 * h;
    let k1 = f(t, x)?;
    let mut tmp = [0.0; N];
    for i in 0..N {
        tmp[i] = x[i] + half * k1[i];
    }
    let k2 = f(t + half, &tmp)?;
    for i in 0..N {
        tmp[i] = x[i] + half * k2[i];
    }
    let k3 = f(t + half, &tmp)?;
    for i in 0..N {
        tmp[i] = x[i] + h * k3[i];
    }
    let k4 = f(t + h, &tmp)?;
    let mut out = [0.0; N];
    for i in 0..N {
        out[i] = x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    Ok(out)
}

/// RK4 step of the generator model with the load held at `r_load`.
pub fn rk4_step(x: &StateVector, t: f64, h: f64, r_load: f64, p: &ParameterSet) -> Result<StateVector, ModelError> {
    let next = rk4_step_with(&x.to_array(), t, h, |_, s| derivative_array(s, r_load, p))?;
    Ok(StateVector::from_array(next))
}

/// Simulates from the equilibrium at `profile.r_pre`.
pub fn simulate(p: &ParameterSet, profile: &LoadStepProfile, cfg: &SimConfig) -> Result<Trajectory, SimError> {
    profile.validate()?;
    let x0 = steady_state(profile.r_pre, p)?;
    simulate_from(p, profile, cfg, x0)
}

pub fn simulate_from(
    p: &ParameterSet,
    profile: &LoadStepProfile,
    cfg: &SimConfig,
    x0: StateVector,
) -> Result<Trajectory, SimError> {
    cfg.validate()?;
    profile.validate()?;
    p.check_hard_limits()?;

    let steps = cfg.steps();
    let i_step = cfg.grid_index_at_or_after(profile.t_step);
    let load_at = |i: usize| if i >= i_step { profile.r_post } else { profile.r_pre };

    let n_samples = cfg.sample_count();
    let mut times = Vec::with_capacity(n_samples);
    let mut outputs = Vec::with_capacity(n_samples);

    let mut x = x0.to_array();
    for i in 0..=steps {
        let t = i as f64 * cfg.h;
        let r = load_at(i);
        if i % cfg.sample_stride == 0 {
            let y = output_map(&StateVector::from_array(x), r, p).map_err(|_| SimError::BlewUp { time: t })?;
            times.push(t);
            outputs.push(y);
        }
        if i == steps {
            break;
        }
        x = match rk4_step_with(&x, t, cfg.h, |_, s| derivative_array(s, r, p)) {
            Ok(next) => next,
            Err(ModelError::NonFiniteState) | Err(ModelError::NonFiniteInput) => {
                return Err(SimError::BlewUp { time: t + cfg.h })
            }
            Err(e) => return Err(e.into()),
        };
        if x.iter().any(|v| !v.is_finite() || v.abs() > BLOW_UP_LIMIT) {
            return Err(SimError::BlewUp { time: t + cfg.h });
        }
    }

    Ok(Trajectory {
        times,
        outputs,
        final_state: StateVector::from_array(x),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmark;
    use crate::dynmodel::state_derivative;

    fn decay(y0: f64, h: f64, t_end: f64) -> f64 {
        let steps = (t_end / h).round() as usize;
        let mut y = [y0];
        for i in 0..steps {
            y = rk4_step_with(&y, i as f64 * h, h, |_, s| Ok::<_, ()>([-s[0]])).unwrap();
        }
        y[0]
    }

    #[test]
    fn one_step_of_exponential_decay() {
        let y = decay(1.0, 0.1, 0.1);
        assert!((y - (-0.1f64).exp()).abs() < 1e-7);
        assert!((y - 0.90483742).abs() < 1e-7);
    }

    #[test]
    fn halving_step_cuts_error_sixteenfold() {
        let exact = (-1.0f64).exp();
        let e1 = (decay(1.0, 0.1, 1.0) - exact).abs();
        let e2 = (decay(1.0, 0.05, 1.0) - exact).abs();
        let ratio = e1 / e2;
        assert!((14.0..18.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn equilibrium_only_drifts_delta() {
        let p = benchmark::true_parameters();
        let x = steady_state(benchmark::R_HEAVY, &p).unwrap();
        let h = 1e-3;
        let next = rk4_step(&x, 0.0, h, benchmark::R_HEAVY, &p).unwrap();
        let (a, b) = (x.to_array(), next.to_array());
        for i in 0..6 {
            assert!((a[i] - b[i]).abs() < 1e-12, "state {i}: {} vs {}", a[i], b[i]);
        }
        let drift = h * (x.omega - p.gen.omega_s);
        assert!((b[6] - a[6] - drift).abs() < 1e-15);
    }

    #[test]
    fn no_disturbance_stays_constant() {
        let p = benchmark::true_parameters();
        let r = benchmark::R_LIGHT;
        let profile = LoadStepProfile {
            r_pre: r,
            r_post: r,
            t_step: 0.5,
        };
        let traj = simulate(&p, &profile, &SimConfig::default()).unwrap();
        let first = traj.outputs[0];
        for y in &traj.outputs {
            assert!((y.f - first.f).abs() < 1e-8);
            assert!((y.vt - first.vt).abs() < 1e-8);
        }
    }

    #[test]
    fn step_up_dips_then_recovers() {
        let p = benchmark::true_parameters();
        let traj = simulate(&p, &benchmark::step_up(), &SimConfig::default()).unwrap();
        let f0 = traj.outputs[0].f;
        let v0 = traj.outputs[0].vt;
        let fmin = traj.outputs.iter().map(|y| y.f).fold(f64::INFINITY, f64::min);
        let vmin = traj.outputs.iter().map(|y| y.vt).fold(f64::INFINITY, f64::min);
        let last = traj.outputs.last().unwrap();
        let f_end = steady_state(benchmark::R_HEAVY, &p).unwrap().omega;
        assert!(fmin < f_end && f_end < f0);
        assert!((last.f - f_end).abs() < 1e-3);
        assert!(vmin < v0 - 1e-3);
        assert!((last.vt - p.exciter.vt_ref).abs() < 5e-3);
    }

    #[test]
    fn step_down_overshoots() {
        let p = benchmark::true_parameters();
        let traj = simulate(&p, &benchmark::step_down(), &SimConfig::default()).unwrap();
        let fmax = traj.outputs.iter().map(|y| y.f).fold(f64::NEG_INFINITY, f64::max);
        let f_end = steady_state(benchmark::R_LIGHT, &p).unwrap().omega;
        assert!(fmax > f_end);
        assert!(fmax > 1.0);
    }

    #[test]
    fn load_switches_on_grid() {
        let cfg = SimConfig {
            t_end: 1.0,
            h: 0.01,
            sample_stride: 1,
        };
        assert_eq!(cfg.grid_index_at_or_after(0.5), 50);
        assert_eq!(cfg.grid_index_at_or_after(0.501), 51);
        assert_eq!(cfg.grid_index_at_or_after(0.0), 0);
        assert_eq!(cfg.sample_count(), 101);
    }

    #[test]
    fn voltage_jumps_at_step_instant_then_regulates() {
        let p = benchmark::true_parameters();
        let cfg = SimConfig {
            t_end: 5.0,
            h: 1e-3,
            sample_stride: 1,
        };
        let traj = simulate(&p, &benchmark::step_up(), &cfg).unwrap();
        let k = cfg.grid_index_at_or_after(benchmark::T_STEP);
        // The flux cannot change instantly, so the network alone moves the
        // terminal voltage at the switching sample.
        assert!((traj.outputs[k].vt - traj.outputs[k - 1].vt).abs() > 1e-3);
        assert!((traj.outputs[k - 1].vt - 1.0).abs() < 1e-8);
        assert!((traj.outputs.last().unwrap().vt - 1.0).abs() < 1e-3);
    }

    #[test]
    fn deterministic_and_decimation_consistent() {
        let p = benchmark::true_parameters();
        let fine = SimConfig {
            t_end: 2.0,
            h: 1e-3,
            sample_stride: 1,
        };
        let coarse = SimConfig {
            sample_stride: 10,
            ..fine
        };
        let a = simulate(&p, &benchmark::step_up(), &fine).unwrap();
        let b = simulate(&p, &benchmark::step_up(), &fine).unwrap();
        assert_eq!(a, b);
        let c = simulate(&p, &benchmark::step_up(), &coarse).unwrap();
        assert_eq!(c.times.len(), 201);
        for (k, (t, y)) in c.times.iter().zip(&c.outputs).enumerate() {
            assert_eq!(t.to_bits(), a.times[10 * k].to_bits());
            assert_eq!(*y, a.outputs[10 * k]);
        }
        assert_eq!(a.final_state, c.final_state);
    }

    #[test]
    fn unstable_parameters_blow_up() {
        let mut p = benchmark::true_parameters();
        // Fast engine pole far outside the RK4 stability region at h = 1 ms.
        p.engine.t2 = 1e-5;
        let err = simulate(&p, &benchmark::step_up(), &SimConfig::default()).unwrap_err();
        assert!(matches!(err, SimError::BlewUp { .. }), "{err:?}");
    }

    #[test]
    fn bad_config_rejected() {
        let p = benchmark::true_parameters();
        let cfg = SimConfig {
            h: 0.0,
            ..SimConfig::default()
        };
        assert!(matches!(
            simulate(&p, &benchmark::step_up(), &cfg),
            Err(SimError::BadConfig(_))
        ));
        let profile = LoadStepProfile {
            r_pre: -1.0,
            ..benchmark::step_up()
        };
        assert!(simulate(&p, &profile, &SimConfig::default()).is_err());
    }

    #[test]
    fn derivative_used_by_step_matches_public_one() {
        let p = benchmark::true_parameters();
        let x = steady_state(benchmark::R_LIGHT, &p).unwrap();
        let h = 1e-6;
        let next = rk4_step(&x, 0.0, h, benchmark::R_HEAVY, &p).unwrap();
        let d = state_derivative(&x, benchmark::R_HEAVY, &p).unwrap();
        assert!(((next.omega - x.omega) / h - d.omega).abs() < 1e-3 * d.omega.abs());
    }
}
