//! Command-line front end: `fit`, `simulate`, `benchmark` and `diagnose`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::benchmark;
use crate::config::FitConfig;
use crate::dynmodel::{ParamId, ParameterSet};
use crate::hbclm::{
    bclm_solve, hbclm_fit, lm_solve_unconstrained, FitReport, Method, NULL_EIGEN_RATIO, WEAK_COLUMN_RATIO,
};
use crate::integrator::{simulate, SimConfig};
use crate::measurement::{parse_measurements, MeasurementSeries};
use crate::nlsq::{evaluate, fd_sensitivity, hessian_spectrum, spectrum_ratio, weak_parameters, DampingMatrix};
use crate::problem::GeneratorProblem;

/// Ratio of smallest to largest eigenvalue below which the normal matrix
/// is reported as rank deficient.
pub const RANK_DEFICIENT_RATIO: f64 = 1e-9;

#[derive(Debug, Parser)]
#[command(
    name = "dgparam",
    version,
    about = "Diesel-generator model simulation and parameter estimation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate the free parameters from load-step recordings.
    Fit {
        #[arg(long)]
        config: PathBuf,
        /// Measurement files, one per configured test, in order. Overrides
        /// the `data` entries of the config.
        #[arg(long)]
        data: Vec<PathBuf>,
        #[arg(long, default_value = "fit_report.toml")]
        report: PathBuf,
        #[arg(long, default_value = "fit_trajectory.csv")]
        trajectory: PathBuf,
    },
    /// Simulate one configured load test and write its outputs.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Take parameter values from a fit report instead of the config.
        #[arg(long)]
        theta: Option<PathBuf>,
        /// Index of the configured test to run.
        #[arg(long, default_value_t = 0)]
        test: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a built-in estimation scenario on synthetic data.
    Benchmark {
        /// 1-3: LM and box-constrained LM from a given start; 4: hybrid
        /// search with no start.
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
        case: u8,
        /// 30 s horizon at 100 us steps instead of 5 s at 1 ms.
        #[arg(long)]
        paper_scale: bool,
        #[arg(long, default_value_t = benchmark::DEFAULT_SEED)]
        seed: u64,
        /// Matrix scaling the damping parameter.
        #[arg(long, value_enum, default_value_t = DampingMatrix::Diagonal)]
        damping: DampingMatrix,
    },
    /// Print the eigenvalues of the Gauss-Newton normal matrix.
    Diagnose {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Vec<PathBuf>,
        #[arg(long)]
        theta: Option<PathBuf>,
    },
}

/// Process exit status of a command that did not error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// The fit did not meet its convergence test or a benchmark check
    /// failed; results were still written.
    BestEffort,
}

impl Outcome {
    pub fn code(self) -> i32 {
        match self {
            Outcome::Success => 0,
            Outcome::BestEffort => 2,
        }
    }
}

pub fn run(cli: Cli, out: &mut dyn std::io::Write) -> Result<Outcome> {
    match cli.command {
        Command::Fit {
            config,
            data,
            report,
            trajectory,
        } => cmd_fit(&config, &data, &report, &trajectory, out),
        Command::Simulate {
            config,
            theta,
            test,
            out: path,
        } => cmd_simulate(&config, theta.as_deref(), test, &path, out),
        Command::Benchmark {
            case,
            paper_scale,
            seed,
            damping,
        } => cmd_benchmark(case, paper_scale, seed, damping, out),
        Command::Diagnose { config, data, theta } => cmd_diagnose(&config, &data, theta.as_deref(), out),
    }
}

/// Machine-readable part of the report file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportDoc {
    /// Every model parameter after the fit, by name.
    pub parameters: BTreeMap<String, f64>,
    #[serde(default, skip_deserializing)]
    pub fit: Option<FitReport>,
}

fn load_problem(cfg: &FitConfig, data: &[PathBuf], base: ParameterSet) -> Result<GeneratorProblem> {
    if !data.is_empty() && data.len() != cfg.tests.len() {
        bail!(
            "{} data files given for {} configured tests",
            data.len(),
            cfg.tests.len()
        );
    }
    let mut experiments = Vec::with_capacity(cfg.tests.len());
    for (i, test) in cfg.tests.iter().enumerate() {
        let path = match data.get(i) {
            Some(p) => p.clone(),
            None => test
                .data
                .clone()
                .with_context(|| format!("test {i} has no measurement file"))?,
        };
        let series = parse_measurements(&path).with_context(|| format!("reading {}", path.display()))?;
        experiments.push((test.profile, series));
    }
    Ok(GeneratorProblem::new(base, cfg.sim, experiments)?)
}

fn apply_theta_file(mut p: ParameterSet, path: &Path) -> Result<ParameterSet> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let doc: ReportDoc = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    for (name, value) in doc.parameters {
        let id =
            ParamId::from_name(&name).with_context(|| format!("unknown parameter `{name}` in {}", path.display()))?;
        p.set(id, value);
    }
    Ok(p)
}

fn cmd_fit(
    config: &Path,
    data: &[PathBuf],
    report_path: &Path,
    traj_path: &Path,
    out: &mut dyn std::io::Write,
) -> Result<Outcome> {
    let cfg = FitConfig::load(config)?;
    let problem = load_problem(&cfg, data, cfg.parameters.clone())?;
    let theta0 = cfg.parameters.theta();
    if cfg.method != Method::Hbclm && !cfg.has_start {
        bail!(
            "method {} needs a starting value for every estimated parameter",
            cfg.method.label()
        );
    }
    let report = match cfg.method {
        Method::Lm => lm_solve_unconstrained(&problem, &theta0, &cfg.local)?,
        Method::Bclm => bclm_solve(&problem, &theta0, &cfg.bounds, &cfg.local)?,
        Method::Hbclm => hbclm_fit(&problem, &cfg.bounds, &cfg.ga, &cfg.local, cfg.seed)?,
    };
    let summary = render_fit(&report, &cfg);
    out.write_all(summary.as_bytes())?;

    let outside: Vec<&str> = cfg
        .bounds
        .iter()
        .zip(&report.theta_final)
        .zip(&report.names)
        .filter(|((s, &t), _)| !s.contains(t))
        .map(|(_, n)| n.as_str())
        .collect();
    if !outside.is_empty() {
        writeln!(
            out,
            "estimate leaves the configured bounds ({}); no report written",
            outside.join(", ")
        )?;
        return Ok(Outcome::BestEffort);
    }

    let fitted = problem.parameters(&report.theta_final);
    let doc = ReportDoc {
        parameters: ParamId::ALL
            .iter()
            .map(|&id| (id.name().to_string(), fitted.get(id)))
            .collect(),
        fit: Some(report.clone()),
    };
    let mut text = String::new();
    for line in summary.lines() {
        let _ = writeln!(text, "# {line}");
    }
    text.push_str(&toml::to_string(&doc).context("serializing report")?);
    std::fs::write(report_path, text).with_context(|| format!("writing {}", report_path.display()))?;
    write_fit_trajectory(&problem, &report.theta_final, traj_path)?;
    writeln!(
        out,
        "report: {}\ntrajectory: {}",
        report_path.display(),
        traj_path.display()
    )?;

    Ok(if report.converged {
        Outcome::Success
    } else {
        Outcome::BestEffort
    })
}

fn render_fit(r: &FitReport, cfg: &FitConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "method: {}", r.method.label());
    let _ = writeln!(s, "{:<10} {:>14} {:>14}  bounds", "parameter", "initial", "final");
    for (j, name) in r.names.iter().enumerate() {
        let spec = cfg.bounds[j];
        let mut flags = Vec::new();
        if r.weak.contains(&j) {
            flags.push("weak");
        }
        if r.bound_touching.contains(&j) {
            flags.push("at bound");
        }
        if r.fd_failures.contains(&j) {
            flags.push("sensitivity failed");
        }
        let init = if r.method == Method::Hbclm {
            "-".to_string()
        } else {
            format!("{:.6e}", r.theta_initial[j])
        };
        let _ = writeln!(
            s,
            "{name:<10} {init:>14} {:>14.6e}  [{}, {}] {}",
            r.theta_final[j],
            spec.lower(),
            spec.upper(),
            flags.join(", ")
        );
    }
    let _ = writeln!(s, "cost: {:.6e} -> {:.6e}", r.cost_initial, r.cost_final);
    let _ = writeln!(s, "rmse: f {:.4e} p.u., V {:.4e} p.u.", r.rmse_f, r.rmse_v);
    let _ = writeln!(
        s,
        "iterations: {} global + {} local, {} model evaluations",
        r.iterations_ga, r.iterations_local, r.evaluations
    );
    let _ = writeln!(
        s,
        "status: {} ({})",
        if r.converged { "converged" } else { "not converged" },
        r.reason.describe()
    );
    if let (Some(hi), Some(lo)) = (r.spectrum.first(), r.spectrum.last()) {
        let _ = writeln!(s, "normal-matrix eigenvalues: largest {hi:.3e}, smallest {lo:.3e}");
    }
    s
}

fn write_fit_trajectory(problem: &GeneratorProblem, theta: &[f64], path: &Path) -> Result<()> {
    let trajs = problem.simulate_all(theta)?;
    let file = std::fs::File::create(path).with_context(|| format!("writing {}", path.display()))?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "test,time_s,freq_meas,volt_meas,freq_fit,volt_fit")?;
    let cfg = problem.sim();
    for (i, (e, traj)) in problem.experiments().iter().zip(&trajs).enumerate() {
        let align = e.data.align(cfg)?;
        for (row, &k) in align.indices.iter().enumerate() {
            let y = traj.outputs[k];
            writeln!(
                w,
                "{i},{},{},{},{},{}",
                e.data.times[row], e.data.freq[row], e.data.volt[row], y.f, y.vt
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

fn cmd_simulate(
    config: &Path,
    theta: Option<&Path>,
    test: usize,
    path: &Path,
    out: &mut dyn std::io::Write,
) -> Result<Outcome> {
    let cfg = FitConfig::load(config)?;
    let mut p = cfg.parameters.clone();
    if let Some(t) = theta {
        p = apply_theta_file(p, t)?;
    }
    let spec = cfg
        .tests
        .get(test)
        .with_context(|| format!("test {test} not configured ({} tests)", cfg.tests.len()))?;
    let traj = simulate(&p, &spec.profile, &cfg.sim)?;
    let series = MeasurementSeries::from_trajectory(&traj, format!("simulated test {test}"));
    series.write(path)?;
    writeln!(out, "{} samples written to {}", series.len(), path.display())?;
    Ok(Outcome::Success)
}

fn cmd_benchmark(
    case: u8,
    paper_scale: bool,
    seed: u64,
    damping: DampingMatrix,
    out: &mut dyn std::io::Write,
) -> Result<Outcome> {
    let sim = if paper_scale {
        SimConfig::paper_scale()
    } else {
        SimConfig::default()
    };
    let result = benchmark::run_case(case, &sim, seed, damping).with_context(|| format!("no benchmark case {case}"))?;
    out.write_all(result.render().as_bytes())?;
    Ok(if result.passed() {
        Outcome::Success
    } else {
        Outcome::BestEffort
    })
}

fn cmd_diagnose(
    config: &Path,
    data: &[PathBuf],
    theta: Option<&Path>,
    out: &mut dyn std::io::Write,
) -> Result<Outcome> {
    let cfg = FitConfig::load(config)?;
    let mut base = cfg.parameters.clone();
    if let Some(t) = theta {
        base = apply_theta_file(base, t)?;
    }
    let problem = load_problem(&cfg, data, base.clone())?;
    let theta = base.theta();
    let eval = evaluate(&problem, &theta).context("the model cannot be simulated at these parameters")?;
    let sens = fd_sensitivity(&problem, &theta, &eval.outputs);
    let spectrum = hessian_spectrum(&sens.entries);
    let ratio = spectrum_ratio(&spectrum);
    let names: Vec<&str> = problem.free_params().iter().map(|p| p.name()).collect();
    out.write_all(render_spectrum(&spectrum, ratio).as_bytes())?;
    let weak = weak_parameters(&sens.entries, WEAK_COLUMN_RATIO, NULL_EIGEN_RATIO);
    if !weak.is_empty() {
        let w: Vec<&str> = weak.iter().map(|&j| names[j]).collect();
        writeln!(out, "weakly determined: {}", w.join(", "))?;
    }
    let failed = sens.failed_columns();
    if !failed.is_empty() {
        let f: Vec<&str> = failed.iter().map(|&j| names[j]).collect();
        writeln!(out, "sensitivity failed: {}", f.join(", "))?;
    }
    Ok(Outcome::Success)
}

/// Eigenvalue listing plus the conditioning verdict.
pub fn render_spectrum(spectrum: &[f64], ratio: f64) -> String {
    let mut s = String::from("eigenvalues of S^T S (descending):\n");
    for (i, mu) in spectrum.iter().enumerate() {
        let _ = writeln!(s, "  {:>3}  {mu:.6e}", i + 1);
    }
    let verdict = if ratio < RANK_DEFICIENT_RATIO {
        "RANK-DEFICIENT"
    } else {
        "OK"
    };
    let _ = writeln!(s, "smallest/largest: {ratio:.3e} {verdict}");
    s
}
