//! Seventh-order diesel-generator model: proportional-droop diesel engine,
//! AVR + PI exciter with output saturation, and a flux-decay synchronous
//! machine feeding a purely resistive load.
//!
//! All quantities are per-unit on the machine base except time constants,
//! which are in seconds. The rotor angle `delta` is integrated but no other
//! equation reads it, so it never influences the outputs.

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of entries in [`ParamId::ALL`].
pub const PARAM_COUNT: usize = 20;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("non-finite input to the network solve")]
    NonFiniteInput,
    #[error("state derivative is not finite")]
    NonFiniteState,
    #[error("no equilibrium found after {iterations} Newton iterations (residual {residual:e})")]
    NoEquilibrium { iterations: usize, residual: f64 },
    #[error("parameter {name} = {value} violates {rule}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        rule: &'static str,
    },
    #[error("load resistance must be positive and finite, got {0}")]
    BadLoad(f64),
}

/// Identifies one scalar model parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamId {
    M,
    T1,
    T2,
    T3,
    PRef,
    OmegaRef,
    Tv,
    Kv,
    Kpe,
    Kie,
    VtRef,
    VfMax,
    H,
    OmegaS,
    Df,
    Xd,
    Xq,
    Xdp,
    Tdop,
    Rs,
}

impl ParamId {
    /// Canonical ordering; the estimation vector follows it.
    pub const ALL: [ParamId; PARAM_COUNT] = [
        ParamId::M,
        ParamId::T1,
        ParamId::T2,
        ParamId::T3,
        ParamId::PRef,
        ParamId::OmegaRef,
        ParamId::Tv,
        ParamId::Kv,
        ParamId::Kpe,
        ParamId::Kie,
        ParamId::VtRef,
        ParamId::VfMax,
        ParamId::H,
        ParamId::OmegaS,
        ParamId::Df,
        ParamId::Xd,
        ParamId::Xq,
        ParamId::Xdp,
        ParamId::Tdop,
        ParamId::Rs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamId::M => "m",
            ParamId::T1 => "T1",
            ParamId::T2 => "T2",
            ParamId::T3 => "T3",
            ParamId::PRef => "P_ref",
            ParamId::OmegaRef => "omega_ref",
            ParamId::Tv => "T_V",
            ParamId::Kv => "K_V",
            ParamId::Kpe => "K_pe",
            ParamId::Kie => "K_ie",
            ParamId::VtRef => "V_tref",
            ParamId::VfMax => "vf_max",
            ParamId::H => "H",
            ParamId::OmegaS => "omega_s",
            ParamId::Df => "D_f",
            ParamId::Xd => "X_d",
            ParamId::Xq => "X_q",
            ParamId::Xdp => "X_dp",
            ParamId::Tdop => "T_dop",
            ParamId::Rs => "R_s",
        }
    }

    pub fn from_name(name: &str) -> Option<ParamId> {
        ParamId::ALL.iter().copied().find(|p| p.name() == name)
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// References that stay at their configured value in every fit.
    pub fn is_reference(self) -> bool {
        matches!(
            self,
            ParamId::OmegaRef | ParamId::PRef | ParamId::VtRef | ParamId::OmegaS
        )
    }
}

impl std::fmt::Display for ParamId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineParams {
    pub m: f64,
    pub t1: f64,
    pub t2: f64,
    pub t3: f64,
    pub p_ref: f64,
    pub omega_ref: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExciterParams {
    pub t_v: f64,
    pub k_v: f64,
    pub k_pe: f64,
    pub k_ie: f64,
    pub vt_ref: f64,
    /// Ceiling of the excitation-voltage clamp; the floor is zero.
    pub vf_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub h: f64,
    pub omega_s: f64,
    pub d_f: f64,
    pub x_d: f64,
    pub x_q: f64,
    pub x_dp: f64,
    pub t_dop: f64,
    pub r_s: f64,
}

/// Full parameter vector plus the mask of which entries are estimated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    pub engine: EngineParams,
    pub exciter: ExciterParams,
    pub gen: GenParams,
    pub free_mask: [bool; PARAM_COUNT],
}

impl ParameterSet {
    pub fn new(engine: EngineParams, exciter: ExciterParams, gen: GenParams) -> Self {
        ParameterSet {
            engine,
            exciter,
            gen,
            free_mask: [false; PARAM_COUNT],
        }
    }

    pub fn get(&self, id: ParamId) -> f64 {
        match id {
            ParamId::M => self.engine.m,
            ParamId::T1 => self.engine.t1,
            ParamId::T2 => self.engine.t2,
            ParamId::T3 => self.engine.t3,
            ParamId::PRef => self.engine.p_ref,
            ParamId::OmegaRef => self.engine.omega_ref,
            ParamId::Tv => self.exciter.t_v,
            ParamId::Kv => self.exciter.k_v,
            ParamId::Kpe => self.exciter.k_pe,
            ParamId::Kie => self.exciter.k_ie,
            ParamId::VtRef => self.exciter.vt_ref,
            ParamId::VfMax => self.exciter.vf_max,
            ParamId::H => self.gen.h,
            ParamId::OmegaS => self.gen.omega_s,
            ParamId::Df => self.gen.d_f,
            ParamId::Xd => self.gen.x_d,
            ParamId::Xq => self.gen.x_q,
            ParamId::Xdp => self.gen.x_dp,
            ParamId::Tdop => self.gen.t_dop,
            ParamId::Rs => self.gen.r_s,
        }
    }

    pub fn set(&mut self, id: ParamId, value: f64) {
        let slot = match id {
            ParamId::M => &mut self.engine.m,
            ParamId::T1 => &mut self.engine.t1,
            ParamId::T2 => &mut self.engine.t2,
            ParamId::T3 => &mut self.engine.t3,
            ParamId::PRef => &mut self.engine.p_ref,
            ParamId::OmegaRef => &mut self.engine.omega_ref,
            ParamId::Tv => &mut self.exciter.t_v,
            ParamId::Kv => &mut self.exciter.k_v,
            ParamId::Kpe => &mut self.exciter.k_pe,
            ParamId::Kie => &mut self.exciter.k_ie,
            ParamId::VtRef => &mut self.exciter.vt_ref,
            ParamId::VfMax => &mut self.exciter.vf_max,
            ParamId::H => &mut self.gen.h,
            ParamId::OmegaS => &mut self.gen.omega_s,
            ParamId::Df => &mut self.gen.d_f,
            ParamId::Xd => &mut self.gen.x_d,
            ParamId::Xq => &mut self.gen.x_q,
            ParamId::Xdp => &mut self.gen.x_dp,
            ParamId::Tdop => &mut self.gen.t_dop,
            ParamId::Rs => &mut self.gen.r_s,
        };
        *slot = value;
    }

    pub fn is_free(&self, id: ParamId) -> bool {
        self.free_mask[id.index()]
    }

    /// Marks `id` as estimated. References are never freed.
    pub fn set_free(&mut self, id: ParamId, free: bool) {
        self.free_mask[id.index()] = free && !id.is_reference();
    }

    /// Free parameters in canonical order.
    pub fn free_params(&self) -> Vec<ParamId> {
        ParamId::ALL.iter().copied().filter(|&p| self.is_free(p)).collect()
    }

    /// Current values of the free parameters (the estimation vector).
    pub fn theta(&self) -> Vec<f64> {
        self.free_params().into_iter().map(|p| self.get(p)).collect()
    }

    /// Copy with the free parameters replaced by `theta`, in canonical order.
    pub fn with_theta(&self, theta: &[f64]) -> ParameterSet {
        let free = self.free_params();
        assert_eq!(free.len(), theta.len(), "theta length mismatch");
        let mut out = self.clone();
        for (id, &v) in free.iter().zip(theta) {
            out.set(*id, v);
        }
        out
    }

    /// Limits outside of which the model cannot be evaluated at all:
    /// positive divisors and a positive network determinant.
    pub fn check_hard_limits(&self) -> Result<(), ModelError> {
        let positive = [
            ParamId::T2,
            ParamId::T3,
            ParamId::Tv,
            ParamId::H,
            ParamId::Tdop,
            ParamId::Xq,
            ParamId::Xdp,
            ParamId::VfMax,
        ];
        for id in ParamId::ALL {
            let v = self.get(id);
            if !v.is_finite() {
                return Err(ModelError::InvalidParameter {
                    name: id.name(),
                    value: v,
                    rule: "finite value",
                });
            }
        }
        for id in positive {
            let v = self.get(id);
            if v <= 0.0 {
                return Err(ModelError::InvalidParameter {
                    name: id.name(),
                    value: v,
                    rule: "> 0",
                });
            }
        }
        Ok(())
    }
}

/// The seven dynamic states.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StateVector {
    pub q1: f64,
    pub q2: f64,
    pub xi1: f64,
    pub xi2: f64,
    pub omega: f64,
    pub eqp: f64,
    pub delta: f64,
}

impl StateVector {
    pub const LEN: usize = 7;

    pub fn to_array(self) -> [f64; 7] {
        [self.q1, self.q2, self.xi1, self.xi2, self.omega, self.eqp, self.delta]
    }

    pub fn from_array(a: [f64; 7]) -> Self {
        StateVector {
            q1: a[0],
            q2: a[1],
            xi1: a[2],
            xi2: a[3],
            omega: a[4],
            eqp: a[5],
            delta: a[6],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.to_array().iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// dq currents and voltages of the generator-load network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetworkSolution {
    pub id: f64,
    pub iq: f64,
    pub vd: f64,
    pub vq: f64,
    pub vt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlgebraicOutputs {
    pub id: f64,
    pub iq: f64,
    pub vd: f64,
    pub vq: f64,
    pub vt: f64,
    pub pm: f64,
    /// Excitation voltage after the `[0, vf_max]` clamp.
    pub vf: f64,
}

/// Measured channels: electrical frequency (equal to rotor speed) and
/// terminal voltage magnitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutputVector {
    pub f: f64,
    pub vt: f64,
}

/// Solves the resistive-load network
/// `[0; E'q] = [[Rs + R, -Xq], [X'd, Rs + R]] [Id; Iq]`, `V = R I`.
pub fn solve_network(eqp: f64, r_load: f64, gen: &GenParams) -> Result<NetworkSolution, ModelError> {
    if !(eqp.is_finite() && r_load.is_finite() && gen.r_s.is_finite() && gen.x_q.is_finite() && gen.x_dp.is_finite()) {
        return Err(ModelError::NonFiniteInput);
    }
    let k = gen.r_s + r_load;
    let det = k * k + gen.x_q * gen.x_dp;
    let id = gen.x_q * eqp / det;
    let iq = k * eqp / det;
    let vd = r_load * id;
    let vq = r_load * iq;
    let vt = (vd * vd + vq * vq).sqrt();
    Ok(NetworkSolution { id, iq, vd, vq, vt })
}

fn clamp_vf(vf: f64, vf_max: f64) -> f64 {
    vf.max(0.0).min(vf_max)
}

pub fn algebraic_outputs(x: &StateVector, r_load: f64, p: &ParameterSet) -> Result<AlgebraicOutputs, ModelError> {
    let net = solve_network(x.eqp, r_load, &p.gen)?;
    let e = &p.engine;
    let a = &p.exciter;
    let t23 = e.t2 * e.t3;
    let pm = (x.q1 + e.t1 * x.q2) / t23;
    let vf_raw = a.k_v / a.t_v * (a.k_ie * x.xi1 + a.k_pe * x.xi2);
    Ok(AlgebraicOutputs {
        id: net.id,
        iq: net.iq,
        vd: net.vd,
        vq: net.vq,
        vt: net.vt,
        pm,
        vf: clamp_vf(vf_raw, a.vf_max),
    })
}

/// Time derivative of the state under a held load resistance.
pub fn state_derivative(x: &StateVector, r_load: f64, p: &ParameterSet) -> Result<StateVector, ModelError> {
    let d = derivative_array(&x.to_array(), r_load, p)?;
    Ok(StateVector::from_array(d))
}

pub(crate) fn derivative_array(x: &[f64; 7], r_load: f64, p: &ParameterSet) -> Result<[f64; 7], ModelError> {
    let [q1, q2, xi1, xi2, omega, eqp, _delta] = *x;
    let e = &p.engine;
    let a = &p.exciter;
    let g = &p.gen;

    let net = solve_network(eqp, r_load, g)?;

    let t23 = e.t2 * e.t3;
    let dq1 = q2;
    let dq2 = -q1 / t23 - (e.t2 + e.t3) / t23 * q2 + e.p_ref + e.m * (e.omega_ref - omega);
    let pm = (q1 + e.t1 * q2) / t23;

    let dxi1 = xi2;
    let dxi2 = -xi2 / a.t_v + (a.vt_ref - net.vt);
    let vf = clamp_vf(a.k_v / a.t_v * (a.k_ie * xi1 + a.k_pe * xi2), a.vf_max);

    let domega = g.omega_s / (2.0 * g.h) * (pm - eqp * net.iq - (g.x_q - g.x_dp) * net.id * net.iq - g.d_f * omega);
    let deqp = (-eqp - (g.x_d - g.x_dp) * net.id + vf) / g.t_dop;
    let ddelta = omega - g.omega_s;

    let out = [dq1, dq2, dxi1, dxi2, domega, deqp, ddelta];
    if out.iter().all(|v| v.is_finite()) {
        Ok(out)
    } else {
        Err(ModelError::NonFiniteState)
    }
}

pub fn output_map(x: &StateVector, r_load: f64, p: &ParameterSet) -> Result<OutputVector, ModelError> {
    if !x.is_finite() {
        return Err(ModelError::NonFiniteState);
    }
    let net = solve_network(x.eqp, r_load, &p.gen)?;
    Ok(OutputVector { f: x.omega, vt: net.vt })
}

const NEWTON_MAX_ITER: usize = 200;
const NEWTON_TOL: f64 = 1e-12;

/// Closed-form equilibrium of the unsaturated model with integral AVR action
/// (terminal voltage sits exactly on `V_tref`). Used to seed Newton.
fn equilibrium_seed(r_load: f64, p: &ParameterSet) -> [f64; 6] {
    let e = &p.engine;
    let a = &p.exciter;
    let g = &p.gen;
    let k = g.r_s + r_load;
    let det = k * k + g.x_q * g.x_dp;
    let vt_per_eqp = r_load * (g.x_q * g.x_q + k * k).sqrt() / det;
    let mut eqp = a.vt_ref / vt_per_eqp;
    if !eqp.is_finite() || eqp <= 0.0 {
        eqp = 1.0;
    }
    let id = g.x_q * eqp / det;
    let iq = k * eqp / det;
    let vf = eqp + (g.x_d - g.x_dp) * id;
    let gain = a.k_v * a.k_ie / a.t_v;
    let xi1 = if gain != 0.0 { vf / gain } else { 0.0 };
    let pe = eqp * iq + (g.x_q - g.x_dp) * id * iq;
    let stiffness = e.m + g.d_f;
    let omega = if stiffness != 0.0 {
        (e.p_ref + e.m * e.omega_ref - pe) / stiffness
    } else {
        e.omega_ref
    };
    let q1 = e.t2 * e.t3 * (e.p_ref + e.m * (e.omega_ref - omega));
    [q1, 0.0, xi1, 0.0, omega, eqp]
}

fn reduced_residual(y: &[f64; 6], r_load: f64, p: &ParameterSet) -> Result<SVector<f64, 6>, ModelError> {
    let x = [y[0], y[1], y[2], y[3], y[4], y[5], 0.0];
    let d = derivative_array(&x, r_load, p)?;
    Ok(SVector::<f64, 6>::from_column_slice(&d[..6]))
}

/// Equilibrium at a constant load: damped Newton on the six states other
/// than `delta`, seeded from the closed-form steady-state algebra.
/// `delta` is returned as zero.
pub fn steady_state(r_load: f64, p: &ParameterSet) -> Result<StateVector, ModelError> {
    if !(r_load.is_finite() && r_load > 0.0) {
        return Err(ModelError::BadLoad(r_load));
    }
    p.check_hard_limits()?;

    let mut y = equilibrium_seed(r_load, p);
    let mut f = reduced_residual(&y, r_load, p)?;
    let mut iterations = 0;
    while f.amax() > NEWTON_TOL {
        if iterations == NEWTON_MAX_ITER {
            return Err(ModelError::NoEquilibrium {
                iterations,
                residual: f.amax(),
            });
        }
        iterations += 1;

        let mut jac = SMatrix::<f64, 6, 6>::zeros();
        for j in 0..6 {
            let step = 1e-7 * y[j].abs().max(1.0);
            let mut plus = y;
            let mut minus = y;
            plus[j] += step;
            minus[j] -= step;
            let col = (reduced_residual(&plus, r_load, p)? - reduced_residual(&minus, r_load, p)?) / (2.0 * step);
            jac.set_column(j, &col);
        }
        let Some(dy) = jac.lu().solve(&(-f)) else {
            return Err(ModelError::NoEquilibrium {
                iterations,
                residual: f.amax(),
            });
        };

        // Backtrack until the residual norm drops.
        let mut alpha = 1.0;
        loop {
            let mut trial = y;
            for j in 0..6 {
                trial[j] += alpha * dy[j];
            }
            if let Ok(ft) = reduced_residual(&trial, r_load, p) {
                if ft.norm() < f.norm() {
                    y = trial;
                    f = ft;
                    break;
                }
            }
            alpha *= 0.5;
            if alpha < 1e-6 {
                return Err(ModelError::NoEquilibrium {
                    iterations,
                    residual: f.amax(),
                });
            }
        }
    }
    Ok(StateVector {
        q1: y[0],
        q2: y[1],
        xi1: y[2],
        xi2: y[3],
        omega: y[4],
        eqp: y[5],
        delta: 0.0,
    })
}
