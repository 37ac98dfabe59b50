//! TOML fit configuration.
//!
//! ```toml
//! seed = 7
//!
//! [parameters]
//! m    = { value = 120.0, lower = 0.0 }
//! T1   = { value = 0.125, lower = 0.0, upper = 0.5 }
//! X_d  = { value = 3.79, fixed = true }
//!
//! [profile]
//! t_step = 0.5
//! tests = [
//!     { p_pre = 0.3, p_post = 0.8, data = "step_up.csv" },
//!     { r_pre = 1.25, r_post = 3.333, data = "step_down.csv" },
//! ]
//!
//! [sim]       # t_end, h, sample_stride
//! [ga]        # size, generations, mutate_fraction, caps = { m = 200.0 }
//! [stopping]  # max_iterations, rel_cost_tol
//! [fit]       # method = "hbclm" | "bclm" | "lm", damping = "diagonal" | "identity"
//! ```
//!
//! Every model parameter other than the references (`P_ref`, `omega_ref`,
//! `V_tref`, `omega_s`, default 1.0) and `vf_max` (default 10.0) must be
//! listed. A parameter is estimated unless it is marked `fixed`; estimated
//! parameters need at least one bound.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::boxmap::BoundSpec;
use crate::dynmodel::{EngineParams, ExciterParams, GenParams, ParamId, ParameterSet};
use crate::golga::GaConfig;
use crate::hbclm::{LmOptions, Method, StoppingCriteria};
use crate::integrator::{LoadStepProfile, SimConfig};
use crate::nlsq::DampingMatrix;

pub const DEFAULT_VF_MAX: f64 = 10.0;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Syntax(#[from] toml::de::Error),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("parameter `{0}` is missing")]
    MissingParameter(&'static str),
    #[error("parameter `{name}`: {reason}")]
    BadParameter { name: String, reason: String },
    #[error("profile: {0}")]
    BadProfile(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterEntry {
    pub value: Option<f64>,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    #[serde(default)]
    pub fixed: bool,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestEntry {
    pub p_pre: Option<f64>,
    pub p_post: Option<f64>,
    pub r_pre: Option<f64>,
    pub r_post: Option<f64>,
    /// Measurement file, relative to the config file.
    pub data: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSection {
    pub t_step: f64,
    pub tests: Vec<TestEntry>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaSection {
    pub size: usize,
    pub generations: usize,
    pub mutate_fraction: f64,
    pub caps: BTreeMap<String, f64>,
}

impl Default for GaSection {
    fn default() -> Self {
        let d = GaConfig::default();
        GaSection {
            size: d.size,
            generations: d.generations,
            mutate_fraction: d.mutate_fraction,
            caps: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    pub method: Method,
    #[serde(default)]
    pub damping: DampingMatrix,
}

impl Default for FitSection {
    fn default() -> Self {
        FitSection {
            method: Method::Hbclm,
            damping: DampingMatrix::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    seed: u64,
    parameters: BTreeMap<String, ParameterEntry>,
    profile: ProfileSection,
    #[serde(default)]
    sim: SimConfig,
    #[serde(default)]
    ga: GaSection,
    #[serde(default)]
    stopping: StoppingCriteria,
    #[serde(default)]
    fit: FitSection,
}

/// One load test with its (optional) measurement file.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSpec {
    pub profile: LoadStepProfile,
    pub data: Option<PathBuf>,
}

/// Validated configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    /// Values and free mask. Free parameters without a starting value hold
    /// the midpoint of their sampling range.
    pub parameters: ParameterSet,
    /// Bounds of the free parameters in estimation-vector order.
    pub bounds: Vec<BoundSpec>,
    /// Free parameters that were given a starting value.
    pub has_start: bool,
    pub tests: Vec<TestSpec>,
    pub sim: SimConfig,
    pub ga: GaConfig,
    pub local: LmOptions,
    pub method: Method,
    pub seed: u64,
}

impl FitConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::from_str_in(&text, base)
    }

    /// Parses `text`, resolving data paths against `base`.
    pub fn from_str_in(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(text)?;
        for name in raw.parameters.keys() {
            if ParamId::from_name(name).is_none() {
                return Err(ConfigError::UnknownParameter(name.clone()));
            }
        }

        let mut values = [0.0; crate::dynmodel::PARAM_COUNT];
        let mut free = Vec::new();
        let mut bounds = Vec::new();
        let mut starts = Vec::new();
        for id in ParamId::ALL {
            let entry = raw.parameters.get(id.name());
            let bad = |reason: &str| ConfigError::BadParameter {
                name: id.name().to_string(),
                reason: reason.to_string(),
            };
            let default = match id {
                _ if id.is_reference() => Some(1.0),
                ParamId::VfMax => Some(DEFAULT_VF_MAX),
                _ => None,
            };
            let Some(entry) = entry else {
                values[id.index()] = default.ok_or(ConfigError::MissingParameter(id.name()))?;
                continue;
            };
            if let Some(v) = entry.value {
                if !v.is_finite() {
                    return Err(bad("value must be finite"));
                }
            }
            if entry.fixed || id.is_reference() {
                if entry.lower.is_some() || entry.upper.is_some() {
                    return Err(bad("a fixed parameter takes no bounds"));
                }
                values[id.index()] = entry
                    .value
                    .or(default)
                    .ok_or_else(|| bad("a fixed parameter needs a value"))?;
                continue;
            }
            let spec = match (entry.lower, entry.upper) {
                (Some(lo), Some(hi)) => BoundSpec::TypeI { lo, hi },
                (Some(lo), None) => BoundSpec::TypeII { lo },
                (None, Some(hi)) => BoundSpec::TypeIII { hi },
                (None, None) => return Err(bad("an estimated parameter needs `lower`, `upper` or both")),
            };
            if !spec.is_well_formed() {
                return Err(bad("bounds must be finite with lower < upper"));
            }
            if let Some(v) = entry.value {
                if !spec.contains(v) {
                    return Err(bad("starting value lies outside its bounds"));
                }
            }
            let cap = raw.ga.caps.get(id.name()).copied().unwrap_or(crate::golga::DEFAULT_CAP);
            values[id.index()] = entry.value.unwrap_or(match spec {
                BoundSpec::TypeI { lo, hi } => 0.5 * (lo + hi),
                BoundSpec::TypeII { lo } => lo + 0.5 * cap,
                BoundSpec::TypeIII { hi } => hi - 0.5 * cap,
                BoundSpec::Fixed { value } => value,
            });
            starts.push(entry.value.is_some());
            free.push(id);
            bounds.push(spec);
        }
        for name in raw.ga.caps.keys() {
            let known = ParamId::from_name(name).is_some_and(|id| free.contains(&id));
            if !known {
                return Err(ConfigError::BadParameter {
                    name: name.clone(),
                    reason: "GA cap given for a parameter that is not estimated".into(),
                });
            }
        }

        let mut parameters = ParameterSet::new(
            EngineParams {
                m: 0.0,
                t1: 0.0,
                t2: 0.0,
                t3: 0.0,
                p_ref: 0.0,
                omega_ref: 0.0,
            },
            ExciterParams {
                t_v: 0.0,
                k_v: 0.0,
                k_pe: 0.0,
                k_ie: 0.0,
                vt_ref: 0.0,
                vf_max: 0.0,
            },
            GenParams {
                h: 0.0,
                omega_s: 0.0,
                d_f: 0.0,
                x_d: 0.0,
                x_q: 0.0,
                x_dp: 0.0,
                t_dop: 0.0,
                r_s: 0.0,
            },
        );
        for id in ParamId::ALL {
            parameters.set(id, values[id.index()]);
        }
        for &id in &free {
            parameters.set_free(id, true);
        }

        let tests = raw
            .profile
            .tests
            .iter()
            .enumerate()
            .map(|(i, t)| test_spec(i, t, raw.profile.t_step, base))
            .collect::<Result<Vec<_>, _>>()?;
        if tests.is_empty() {
            return Err(ConfigError::BadProfile("at least one test is needed".into()));
        }
        raw.sim.validate().map_err(|e| ConfigError::BadProfile(e.to_string()))?;

        let ga = GaConfig {
            size: raw.ga.size,
            generations: raw.ga.generations,
            mutate_fraction: raw.ga.mutate_fraction,
            caps: free
                .iter()
                .map(|id| raw.ga.caps.get(id.name()).copied().unwrap_or(crate::golga::DEFAULT_CAP))
                .collect(),
        };

        Ok(FitConfig {
            parameters,
            bounds,
            has_start: !starts.is_empty() && starts.iter().all(|&s| s),
            tests,
            sim: raw.sim,
            ga,
            local: LmOptions {
                stopping: raw.stopping,
                damping: raw.fit.damping,
            },
            method: raw.fit.method,
            seed: raw.seed,
        })
    }

    pub fn free_params(&self) -> Vec<ParamId> {
        self.parameters.free_params()
    }
}

fn test_spec(index: usize, t: &TestEntry, t_step: f64, base: &Path) -> Result<TestSpec, ConfigError> {
    let bad = |msg: &str| ConfigError::BadProfile(format!("test {index}: {msg}"));
    let profile = match (t.p_pre, t.p_post, t.r_pre, t.r_post) {
        (Some(a), Some(b), None, None) => {
            if !(a > 0.0 && b > 0.0) {
                return Err(bad("power fractions must be > 0"));
            }
            LoadStepProfile::from_power_fractions(a, b, t_step)
        }
        (None, None, Some(r_pre), Some(r_post)) => LoadStepProfile { r_pre, r_post, t_step },
        _ => return Err(bad("give either p_pre/p_post or r_pre/r_post")),
    };
    profile.validate().map_err(|e| bad(&e.to_string()))?;
    Ok(TestSpec {
        profile,
        data: t.data.as_ref().map(|d| base.join(d)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        seed = 3
        [parameters]
        m = { value = 40.0, lower = 0.0 }
        T1 = { value = 0.025, fixed = true }
        T2 = { value = 0.009, fixed = true }
        T3 = { value = 0.038, fixed = true }
        T_V = { value = 0.05, lower = 0.0, upper = 0.5 }
        K_V = { value = 2.0, fixed = true }
        K_pe = { value = 5.0, fixed = true }
        K_ie = { value = 10.0, fixed = true }
        H = { value = 0.074, fixed = true }
        D_f = { value = 0.02, fixed = true }
        X_d = { value = 3.79, fixed = true }
        X_q = { value = 2.12, fixed = true }
        X_dp = { value = 0.342, fixed = true }
        T_dop = { value = 1.16, fixed = true }
        R_s = { value = 0.04, upper = 1.0 }
        [profile]
        t_step = 0.5
        tests = [{ p_pre = 0.3, p_post = 0.8, data = "up.csv" }, { r_pre = 1.25, r_post = 3.0 }]
        [ga]
        caps = { m = 100.0 }
    "#;

    #[test]
    fn minimal_config() {
        let c = FitConfig::from_str_in(MINIMAL, Path::new("/data")).unwrap();
        assert_eq!(c.free_params(), vec![ParamId::M, ParamId::Tv, ParamId::Rs]);
        assert_eq!(
            c.bounds,
            vec![
                BoundSpec::TypeII { lo: 0.0 },
                BoundSpec::TypeI { lo: 0.0, hi: 0.5 },
                BoundSpec::TypeIII { hi: 1.0 }
            ]
        );
        assert_eq!(
            c.ga.caps,
            vec![100.0, crate::golga::DEFAULT_CAP, crate::golga::DEFAULT_CAP]
        );
        assert!(c.has_start);
        assert_eq!(c.seed, 3);
        assert_eq!(c.method, Method::Hbclm);
        assert_eq!(c.parameters.get(ParamId::VfMax), DEFAULT_VF_MAX);
        assert_eq!(c.parameters.get(ParamId::PRef), 1.0);
        assert_eq!(c.tests.len(), 2);
        assert!((c.tests[0].profile.r_pre - 1.0 / 0.3).abs() < 1e-12);
        assert_eq!(c.tests[0].data.as_deref(), Some(Path::new("/data/up.csv")));
        assert_eq!(c.tests[1].data, None);
        assert_eq!(c.sim, SimConfig::default());
        assert_eq!(c.local, LmOptions::default());
    }

    #[test]
    fn missing_parameter() {
        let text = MINIMAL.replace("H = { value = 0.074, fixed = true }", "");
        assert!(matches!(
            FitConfig::from_str_in(&text, Path::new("")),
            Err(ConfigError::MissingParameter("H"))
        ));
    }

    #[test]
    fn unknown_parameter() {
        let text = MINIMAL.replace("[profile]", "Q = { value = 1.0, fixed = true }\n[profile]");
        assert!(matches!(
            FitConfig::from_str_in(&text, Path::new("")),
            Err(ConfigError::UnknownParameter(_))
        ));
    }

    #[test]
    fn start_outside_bounds() {
        let text = MINIMAL.replace("T_V = { value = 0.05,", "T_V = { value = 0.6,");
        assert!(matches!(
            FitConfig::from_str_in(&text, Path::new("")),
            Err(ConfigError::BadParameter { .. })
        ));
    }

    #[test]
    fn unbounded_free_parameter_rejected() {
        let text = MINIMAL.replace("R_s = { value = 0.04, upper = 1.0 }", "R_s = { value = 0.04 }");
        assert!(matches!(
            FitConfig::from_str_in(&text, Path::new("")),
            Err(ConfigError::BadParameter { .. })
        ));
    }

    #[test]
    fn missing_start_values_take_range_midpoints() {
        let text = MINIMAL
            .replace("m = { value = 40.0, lower = 0.0 }", "m = { lower = 0.0 }")
            .replace("T_V = { value = 0.05,", "T_V = {");
        let c = FitConfig::from_str_in(&text, Path::new("")).unwrap();
        assert!(!c.has_start);
        assert_eq!(c.parameters.get(ParamId::M), 50.0);
        assert_eq!(c.parameters.get(ParamId::Tv), 0.25);
    }

    #[test]
    fn mixed_profile_forms_rejected() {
        let text = MINIMAL.replace("{ r_pre = 1.25, r_post = 3.0 }", "{ p_pre = 0.3, r_post = 3.0 }");
        assert!(matches!(
            FitConfig::from_str_in(&text, Path::new("")),
            Err(ConfigError::BadProfile(_))
        ));
    }

    #[test]
    fn method_and_sections() {
        let text = format!(
            "{MINIMAL}\n[fit]\nmethod = \"lm\"\n[sim]\nt_end = 2.0\nh = 0.002\nsample_stride = 5\n[stopping]\nmax_iterations = 7\nrel_cost_tol = 1e-8\n"
        );
        let c = FitConfig::from_str_in(&text, Path::new("")).unwrap();
        assert_eq!(c.method, Method::Lm);
        assert_eq!(c.sim.sample_stride, 5);
        assert_eq!(c.local.stopping.max_iterations, 7);
    }
}
