//! Diesel-generator dynamic model, fixed-step simulation and
//! box-constrained Levenberg-Marquardt parameter estimation with a
//! genetic global stage.

pub mod benchmark;
pub mod boxmap;
pub mod cli;
pub mod config;
pub mod dynmodel;
pub mod golga;
pub mod hbclm;
pub mod integrator;
pub mod measurement;
pub mod nlsq;
pub mod problem;
