#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Digital twin and analysis toolkit for a piezo-tuned superconducting
//! microwave resonator.
//!
//! - [`resonator`]: LC model, capacitive trim and pin screening
//! - [`transmission`]: notch lineshape, synthetic sweeps, photon bookkeeping
//! - [`fitting`]: lineshape extraction of `f_r`, `Q_L`, `Q_e`, `φ`
//! - [`piezo`]: stick-slip stage and closed-loop tuning controller
//! - [`stability`]: drift, peak-to-peak and vibration analysis
//! - [`config`], [`io`], [`cli`]: experiment documents, file formats, commands

pub mod cli;
pub mod config;
pub mod fitting;
pub mod io;
pub mod piezo;
pub mod resonator;
pub mod stability;
pub mod transmission;
pub mod units;

pub use fitting::{fit_power_series, fit_resonance, initial_guess, FitError, FitResult, InitialGuess};
pub use resonator::{
    calibrate_pin_model, tuned_frequency, CalibrationAnchors, ModelError, PinCouplingModel,
    ResonatorParams, TuningState,
};
pub use transmission::{synthesize_sweep, NoiseModel, SweepConfig, SweepTrace, TlsLossModel};
