//! Frequency/voltage time series: parsing, writing and grid alignment.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::integrator::{SimConfig, Trajectory};

pub const HEADER: [&str; 3] = ["time_s", "freq_pu", "volt_pu"];

/// Fewest rows accepted for fitting.
pub const MIN_FIT_ROWS: usize = 10;

#[derive(Debug, Error)]
pub enum MeasurementError {
    #[error("line {line}: {reason}")]
    Parse { line: u64, reason: String },
    #[error("line {line}: time is not strictly increasing")]
    NonMonotonicTime { line: u64 },
    #[error("sample at t = {time} s lies beyond the simulated horizon of {horizon} s")]
    OutOfRange { time: f64, horizon: f64 },
    #[error("{rows} samples given, at least {min} needed")]
    TooFew { rows: usize, min: usize },
    #[error("column lengths differ")]
    Ragged,
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSeries {
    pub times: Vec<f64>,
    pub freq: Vec<f64>,
    pub volt: Vec<f64>,
    pub source: String,
}

/// Sample index on the simulation output grid for each measurement row.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub indices: Vec<usize>,
    /// Rows that were moved to the nearest grid point.
    pub off_grid: usize,
}

impl MeasurementSeries {
    pub fn new(
        times: Vec<f64>,
        freq: Vec<f64>,
        volt: Vec<f64>,
        source: impl Into<String>,
    ) -> Result<Self, MeasurementError> {
        if times.len() != freq.len() || times.len() != volt.len() {
            return Err(MeasurementError::Ragged);
        }
        for (i, ((t, f), v)) in times.iter().zip(&freq).zip(&volt).enumerate() {
            if !(t.is_finite() && f.is_finite() && v.is_finite()) {
                return Err(MeasurementError::Parse {
                    line: i as u64 + 1,
                    reason: "non-finite value".into(),
                });
            }
            if i > 0 && *t <= times[i - 1] {
                return Err(MeasurementError::NonMonotonicTime { line: i as u64 + 1 });
            }
        }
        Ok(MeasurementSeries {
            times,
            freq,
            volt,
            source: source.into(),
        })
    }

    pub fn from_trajectory(traj: &Trajectory, source: impl Into<String>) -> Self {
        MeasurementSeries {
            times: traj.times.clone(),
            freq: traj.outputs.iter().map(|y| y.f).collect(),
            volt: traj.outputs.iter().map(|y| y.vt).collect(),
            source: source.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Mean sampling rate in Hz.
    pub fn sample_rate(&self) -> f64 {
        match (self.times.first(), self.times.last()) {
            (Some(a), Some(b)) if self.len() > 1 => (self.len() - 1) as f64 / (b - a),
            _ => 0.0,
        }
    }

    /// Adds independent zero-mean Gaussian noise to both channels.
    pub fn with_noise(&self, sigma: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sigma).expect("finite sigma");
        let mut out = self.clone();
        for (f, v) in out.freq.iter_mut().zip(out.volt.iter_mut()) {
            *f += normal.sample(&mut rng);
            *v += normal.sample(&mut rng);
        }
        out
    }

    /// Maps every row to the nearest point of the output grid of `cfg`.
    pub fn align(&self, cfg: &SimConfig) -> Result<Alignment, MeasurementError> {
        let dt = cfg.sample_interval();
        let last = cfg.sample_count() - 1;
        let horizon = cfg.sample_time(last);
        let mut indices = Vec::with_capacity(self.len());
        let mut off_grid = 0;
        for &t in &self.times {
            let k = (t / dt).round();
            if k < 0.0 || k as usize > last {
                return Err(MeasurementError::OutOfRange { time: t, horizon });
            }
            let k = k as usize;
            if (cfg.sample_time(k) - t).abs() > 1e-6 * dt {
                off_grid += 1;
            }
            indices.push(k);
        }
        Ok(Alignment { indices, off_grid })
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii output")
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        if !self.source.is_empty() {
            writeln!(w, "# source: {}", self.source)?;
        }
        writeln!(w, "{}", HEADER.join(","))?;
        for i in 0..self.len() {
            // Display prints the shortest string that parses back exactly.
            writeln!(w, "{},{},{}", self.times[i], self.freq[i], self.volt[i])?;
        }
        Ok(())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), MeasurementError> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

pub fn parse_measurements(path: impl AsRef<Path>) -> Result<MeasurementSeries, MeasurementError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_measurements_str(&text, path.display().to_string())
}

/// Parses `time_s,freq_pu,volt_pu` text; `#` lines are comments.
pub fn parse_measurements_str(text: &str, source: impl Into<String>) -> Result<MeasurementSeries, MeasurementError> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .has_headers(true)
        .from_reader(text.as_bytes());

    let header_line = |rdr: &csv::Reader<&[u8]>| rdr.position().line();
    let headers = rdr.headers().map_err(|e| MeasurementError::Parse {
        line: 1,
        reason: e.to_string(),
    })?;
    if headers.iter().collect::<Vec<_>>() != HEADER {
        return Err(MeasurementError::Parse {
            line: header_line(&rdr).max(1),
            reason: format!("expected header `{}`", HEADER.join(",")),
        });
    }

    let (mut times, mut freq, mut volt) = (Vec::new(), Vec::new(), Vec::new());
    for record in rdr.records() {
        let record = record.map_err(|e| MeasurementError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 3 {
            return Err(MeasurementError::Parse {
                line,
                reason: format!("expected 3 fields, found {}", record.len()),
            });
        }
        let field = |i: usize| -> Result<f64, MeasurementError> {
            let raw = &record[i];
            let v: f64 = raw.parse().map_err(|_| MeasurementError::Parse {
                line,
                reason: format!("`{raw}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(MeasurementError::Parse {
                    line,
                    reason: format!("`{raw}` is not finite"),
                });
            }
            Ok(v)
        };
        let t = field(0)?;
        if let Some(&prev) = times.last() {
            if t <= prev {
                return Err(MeasurementError::NonMonotonicTime { line });
            }
        }
        times.push(t);
        freq.push(field(1)?);
        volt.push(field(2)?);
    }
    Ok(MeasurementSeries {
        times,
        freq,
        volt,
        source: source.into(),
    })
}
