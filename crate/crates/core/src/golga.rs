//! Genetic algorithm with generalized opposition-based mutation, used as a
//! bounded global search that seeds the local solver.
//!
//! One generation: roulette selection on `1/h`, blend crossover, elitism,
//! then the lowest-fitness members are reflected through the centre of the
//! population's current per-parameter range.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxmap::BoundSpec;

/// Added to the cost before taking the reciprocal.
pub const FITNESS_EPS: f64 = 1e-30;

/// Sampling width above (below) a one-sided lower (upper) bound when no
/// cap is configured.
pub const DEFAULT_CAP: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GaError {
    #[error("every member of the population has zero fitness")]
    AllInfeasible,
    #[error("bound {index} is malformed: {spec:?}")]
    BadBounds { index: usize, spec: BoundSpec },
    #[error("invalid GA configuration: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chromosome {
    pub theta: Vec<f64>,
    pub cost: f64,
    pub fitness: f64,
}

impl Chromosome {
    fn unevaluated(theta: Vec<f64>) -> Self {
        Chromosome {
            theta,
            cost: f64::INFINITY,
            fitness: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub members: Vec<Chromosome>,
    pub generation: usize,
    pub dyn_lo: Vec<f64>,
    pub dyn_hi: Vec<f64>,
}

impl Population {
    /// Recomputes the per-parameter min/max over the members.
    pub fn refresh_dynamic_bounds(&mut self) {
        let n = self.members.first().map_or(0, |m| m.theta.len());
        self.dyn_lo = vec![f64::INFINITY; n];
        self.dyn_hi = vec![f64::NEG_INFINITY; n];
        for m in &self.members {
            for (i, &v) in m.theta.iter().enumerate() {
                self.dyn_lo[i] = self.dyn_lo[i].min(v);
                self.dyn_hi[i] = self.dyn_hi[i].max(v);
            }
        }
    }

    pub fn best(&self) -> Option<&Chromosome> {
        self.members.iter().max_by(|a, b| a.fitness.total_cmp(&b.fitness))
    }

    fn best_index(&self) -> usize {
        self.members
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.fitness.total_cmp(&b.1.fitness))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaConfig {
    pub size: usize,
    pub generations: usize,
    /// Share of each generation replaced by opposition mutation.
    pub mutate_fraction: f64,
    /// Sampling width for one-sided bounds, one per free parameter; empty
    /// means [`DEFAULT_CAP`] everywhere.
    pub caps: Vec<f64>,
}

impl Default for GaConfig {
    fn default() -> Self {
        GaConfig {
            size: 40,
            generations: 10,
            mutate_fraction: 0.2,
            caps: Vec::new(),
        }
    }
}

impl GaConfig {
    pub fn validate(&self, n_free: usize) -> Result<(), GaError> {
        if self.size < 4 {
            return Err(GaError::BadConfig(format!("population size {} < 4", self.size)));
        }
        if !(0.0..=1.0).contains(&self.mutate_fraction) {
            return Err(GaError::BadConfig(format!(
                "mutate_fraction {} outside [0, 1]",
                self.mutate_fraction
            )));
        }
        if !self.caps.is_empty() && self.caps.len() != n_free {
            return Err(GaError::BadConfig(format!(
                "{} caps given for {} free parameters",
                self.caps.len(),
                n_free
            )));
        }
        if self.caps.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
            return Err(GaError::BadConfig("caps must be positive".into()));
        }
        Ok(())
    }

    fn cap(&self, i: usize) -> f64 {
        self.caps.get(i).copied().unwrap_or(DEFAULT_CAP)
    }
}

/// Finite sampling interval for one free parameter.
fn sampling_range(spec: &BoundSpec, cap: f64) -> (f64, f64) {
    match *spec {
        BoundSpec::TypeI { lo, hi } => (lo, hi),
        BoundSpec::TypeII { lo } => (lo, lo + cap),
        BoundSpec::TypeIII { hi } => (hi - cap, hi),
        BoundSpec::Fixed { value } => (value, value),
    }
}

fn free_specs(specs: &[BoundSpec]) -> Vec<BoundSpec> {
    specs.iter().copied().filter(|s| !s.is_fixed()).collect()
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Uniform population within the bounds; one-sided ranges are truncated
/// by the configured caps.
pub fn init_population(
    specs: &[BoundSpec],
    size: usize,
    caps: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<Population, GaError> {
    for (index, spec) in specs.iter().enumerate() {
        if !spec.is_well_formed() {
            return Err(GaError::BadBounds { index, spec: *spec });
        }
    }
    let free = free_specs(specs);
    let ranges: Vec<(f64, f64)> = free
        .iter()
        .enumerate()
        .map(|(i, s)| sampling_range(s, caps.get(i).copied().unwrap_or(DEFAULT_CAP)))
        .collect();
    let members = (0..size)
        .map(|_| {
            let theta = ranges.iter().map(|&(lo, hi)| uniform(rng, lo, hi)).collect();
            Chromosome::unevaluated(theta)
        })
        .collect();
    let mut pop = Population {
        members,
        generation: 0,
        dyn_lo: Vec::new(),
        dyn_hi: Vec::new(),
    };
    pop.refresh_dynamic_bounds();
    Ok(pop)
}

/// `1 / (h + eps)`; failed or non-finite costs get zero fitness.
pub fn fitness_of(cost: f64) -> f64 {
    if cost.is_finite() && cost >= 0.0 {
        1.0 / (cost + FITNESS_EPS)
    } else {
        0.0
    }
}

/// Evaluates the members whose fitness is not yet known, concurrently.
/// Returns the number of objective calls.
pub fn evaluate_fitness<F>(members: &mut [Chromosome], objective: &F) -> usize
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    members
        .par_iter_mut()
        .map(|m| {
            m.cost = objective(&m.theta);
            m.fitness = fitness_of(m.cost);
            1
        })
        .sum()
}

/// Fitness-proportionate draws with replacement, `pairs` parent pairs.
pub fn select_parents(pop: &Population, pairs: usize, rng: &mut ChaCha8Rng) -> Result<Vec<(usize, usize)>, GaError> {
    let weights: Vec<f64> = pop.members.iter().map(|m| m.fitness).collect();
    let dist = WeightedIndex::new(&weights).map_err(|_| GaError::AllInfeasible)?;
    Ok((0..pairs).map(|_| (dist.sample(rng), dist.sample(rng))).collect())
}

/// Blend crossover with a given mixing weight.
pub fn crossover_with(a: &[f64], b: &[f64], blend: f64) -> (Vec<f64>, Vec<f64>) {
    let child_a = a.iter().zip(b).map(|(x, y)| (1.0 - blend) * x + blend * y).collect();
    let child_b = a.iter().zip(b).map(|(x, y)| blend * x + (1.0 - blend) * y).collect();
    (child_a, child_b)
}

/// Blend crossover with one random weight per event.
pub fn crossover(a: &[f64], b: &[f64], rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let blend: f64 = rng.random_range(0.0..=1.0);
    crossover_with(a, b, blend)
}

/// Opposition candidate `w (lo + hi) - theta`, kept if inside the dynamic
/// range; `None` means the caller must resample.
pub fn gol_candidate(theta: f64, lo: f64, hi: f64, weight: f64) -> Option<f64> {
    let c = weight * (lo + hi) - theta;
    (lo <= c && c <= hi).then_some(c)
}

/// Generalized opposition mutation of member `m` against the population's
/// dynamic bounds.
pub fn mutate_gol(pop: &Population, m: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    pop.members[m]
        .theta
        .iter()
        .enumerate()
        .map(|(i, &theta)| {
            let (lo, hi) = (pop.dyn_lo[i], pop.dyn_hi[i]);
            let weight: f64 = rng.random_range(0.0..=1.0);
            gol_candidate(theta, lo, hi, weight).unwrap_or_else(|| uniform(rng, lo, hi))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: usize,
    pub best_cost: f64,
    pub best_ever_cost: f64,
    pub best_theta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaOutcome {
    pub best: Chromosome,
    pub trace: Vec<GenerationRecord>,
    pub evaluations: usize,
    pub reinitialized: bool,
    pub final_population: Population,
}

fn better(a: &Chromosome, b: &Chromosome) -> bool {
    a.fitness > b.fitness
}

/// Full evolution from a seeded initial population. Returns the best
/// member ever evaluated.
pub fn run_ga<F>(objective: F, specs: &[BoundSpec], config: &GaConfig, seed: u64) -> Result<GaOutcome, GaError>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let free = free_specs(specs);
    config.validate(free.len())?;
    let caps: Vec<f64> = (0..free.len()).map(|i| config.cap(i)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut pop = init_population(specs, config.size, &caps, &mut rng)?;
    let mut evaluations = evaluate_fitness(&mut pop.members, &objective);
    let mut reinitialized = false;
    if pop.members.iter().all(|m| m.fitness == 0.0) {
        pop = init_population(specs, config.size, &caps, &mut rng)?;
        evaluations += evaluate_fitness(&mut pop.members, &objective);
        reinitialized = true;
        if pop.members.iter().all(|m| m.fitness == 0.0) {
            return Err(GaError::AllInfeasible);
        }
    }

    let mut best = pop.best().cloned().expect("non-empty population");
    let mut trace = vec![GenerationRecord {
        generation: 0,
        best_cost: best.cost,
        best_ever_cost: best.cost,
        best_theta: best.theta.clone(),
    }];
    let n_mutants = ((config.mutate_fraction * config.size as f64).round() as usize).min(config.size - 1);

    for g in 1..=config.generations {
        let elite = pop.members[pop.best_index()].clone();
        let offspring_needed = config.size - 1;
        let pairs = select_parents(&pop, offspring_needed.div_ceil(2), &mut rng)?;

        let mut next = Vec::with_capacity(config.size);
        next.push(elite);
        for (k, l) in pairs {
            let (a, b) = crossover(&pop.members[k].theta, &pop.members[l].theta, &mut rng);
            next.push(Chromosome::unevaluated(a));
            if next.len() < config.size {
                next.push(Chromosome::unevaluated(b));
            }
        }
        evaluations += evaluate_fitness(&mut next[1..], &objective);

        let mut next_pop = Population {
            members: next,
            generation: g,
            dyn_lo: Vec::new(),
            dyn_hi: Vec::new(),
        };
        next_pop.refresh_dynamic_bounds();

        if n_mutants > 0 {
            // Lowest-fitness non-elite members, worst first.
            let mut order: Vec<usize> = (1..config.size).collect();
            order.sort_by(|&a, &b| next_pop.members[a].fitness.total_cmp(&next_pop.members[b].fitness));
            let targets = &order[..n_mutants];
            let mut mutants: Vec<(usize, Chromosome)> = targets
                .iter()
                .map(|&m| (m, Chromosome::unevaluated(mutate_gol(&next_pop, m, &mut rng))))
                .collect();
            evaluations += mutants
                .par_iter_mut()
                .map(|(_, c)| {
                    c.cost = objective(&c.theta);
                    c.fitness = fitness_of(c.cost);
                    1
                })
                .sum::<usize>();
            for (m, c) in mutants {
                next_pop.members[m] = c;
            }
            next_pop.refresh_dynamic_bounds();
        }

        pop = next_pop;
        let gen_best = pop.best().cloned().expect("non-empty population");
        if better(&gen_best, &best) {
            best = gen_best.clone();
        }
        trace.push(GenerationRecord {
            generation: g,
            best_cost: gen_best.cost,
            best_ever_cost: best.cost,
            best_theta: best.theta.clone(),
        });
    }

    Ok(GaOutcome {
        best,
        trace,
        evaluations,
        reinitialized,
        final_population: pop,
    })
}
