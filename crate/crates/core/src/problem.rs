//! The generator model wrapped as a least-squares response model: one or
//! more load-step experiments fitted jointly by concatenating residuals.

use thiserror::Error;

use crate::dynmodel::{ParamId, ParameterSet};
use crate::integrator::{simulate, LoadStepProfile, SimConfig, SimError, Trajectory};
use crate::measurement::{MeasurementError, MeasurementSeries, MIN_FIT_ROWS};
use crate::nlsq::ResponseModel;

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("experiment {index}: {source}")]
    Measurement {
        index: usize,
        #[source]
        source: MeasurementError,
    },
    #[error("experiment {index}: {source}")]
    Sim {
        index: usize,
        #[source]
        source: SimError,
    },
    #[error("no experiments given")]
    Empty,
    #[error("no free parameters to estimate")]
    NothingFree,
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub profile: LoadStepProfile,
    pub data: MeasurementSeries,
    indices: Vec<usize>,
    off_grid: usize,
}

impl Experiment {
    pub fn off_grid(&self) -> usize {
        self.off_grid
    }
}

#[derive(Debug, Clone)]
pub struct GeneratorProblem {
    base: ParameterSet,
    free: Vec<ParamId>,
    sim: SimConfig,
    experiments: Vec<Experiment>,
    measured: Vec<f64>,
}

impl GeneratorProblem {
    /// `base` supplies the fixed values and the free mask.
    pub fn new(
        base: ParameterSet,
        sim: SimConfig,
        experiments: Vec<(LoadStepProfile, MeasurementSeries)>,
    ) -> Result<Self, ProblemError> {
        if experiments.is_empty() {
            return Err(ProblemError::Empty);
        }
        let free = base.free_params();
        if free.is_empty() {
            return Err(ProblemError::NothingFree);
        }
        sim.validate()
            .map_err(|source| ProblemError::Sim { index: 0, source })?;

        let mut measured = Vec::new();
        let mut out = Vec::with_capacity(experiments.len());
        for (index, (profile, data)) in experiments.into_iter().enumerate() {
            profile
                .validate()
                .map_err(|source| ProblemError::Sim { index, source })?;
            if data.len() < MIN_FIT_ROWS {
                return Err(ProblemError::Measurement {
                    index,
                    source: MeasurementError::TooFew {
                        rows: data.len(),
                        min: MIN_FIT_ROWS,
                    },
                });
            }
            let alignment = data
                .align(&sim)
                .map_err(|source| ProblemError::Measurement { index, source })?;
            if alignment.off_grid > 0 {
                log::warn!(
                    "experiment {index} ({}): {} samples off the {} s output grid, snapped to nearest point",
                    data.source,
                    alignment.off_grid,
                    sim.sample_interval()
                );
            }
            for (f, v) in data.freq.iter().zip(&data.volt) {
                measured.push(*f);
                measured.push(*v);
            }
            out.push(Experiment {
                profile,
                data,
                indices: alignment.indices,
                off_grid: alignment.off_grid,
            });
        }
        Ok(GeneratorProblem {
            base,
            free,
            sim,
            experiments: out,
            measured,
        })
    }

    pub fn base(&self) -> &ParameterSet {
        &self.base
    }

    pub fn free_params(&self) -> &[ParamId] {
        &self.free
    }

    pub fn sim(&self) -> &SimConfig {
        &self.sim
    }

    pub fn experiments(&self) -> &[Experiment] {
        &self.experiments
    }

    pub fn parameters(&self, theta: &[f64]) -> ParameterSet {
        self.base.with_theta(theta)
    }

    /// Full trajectories of every experiment at `theta`.
    pub fn simulate_all(&self, theta: &[f64]) -> Result<Vec<Trajectory>, SimError> {
        let p = self.parameters(theta);
        self.experiments
            .iter()
            .map(|e| simulate(&p, &e.profile, &self.sim))
            .collect()
    }
}

impl ResponseModel for GeneratorProblem {
    fn n_params(&self) -> usize {
        self.free.len()
    }

    fn measured(&self) -> &[f64] {
        &self.measured
    }

    fn response(&self, theta: &[f64]) -> Option<Vec<f64>> {
        let p = self.parameters(theta);
        p.check_hard_limits().ok()?;
        let mut out = Vec::with_capacity(self.measured.len());
        for e in &self.experiments {
            let traj = simulate(&p, &e.profile, &self.sim).ok()?;
            for &k in &e.indices {
                let y = traj.outputs[k];
                out.push(y.f);
                out.push(y.vt);
            }
        }
        Some(out)
    }

    fn param_names(&self) -> Vec<String> {
        self.free.iter().map(|p| p.name().to_string()).collect()
    }

    /// The engine lags `T2` and `T3` enter the model symmetrically; report
    /// them with `T2 <= T3`.
    fn canonicalize(&self, theta: &mut [f64]) {
        let pos = |id| self.free.iter().position(|&p| p == id);
        if let (Some(i), Some(j)) = (pos(ParamId::T2), pos(ParamId::T3)) {
            if theta[i] > theta[j] {
                theta.swap(i, j);
            }
        }
    }
}
