//! Command-line surface: `simulate`, `fit`, `tune`, `drift`, `calibrate`.
//!
//! Exit codes: 0 success, 1 I/O, 2 validation, 3 no resonance, 4 non-physical
//! fit, 5 unreachable target, 6 convergence failure.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, ExperimentConfig};
use crate::fitting::{fit_resonance, FitError, FitResult, InitialGuess};
use crate::io::{self, IoError, SessionRecord};
use crate::piezo::{tune_to_target, Outcome, TuningSession};
use crate::resonator::{self, calibrate_pin_model, calibration_residuals, CalibrationAnchors, PinCouplingModel};
use crate::stability::{allan_deviation, drift_rate, peak_to_peak_deviation};
use crate::transmission::{linewidth, loaded_q, synthesize_sweep};
use crate::units::{GHZ, UM};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NO_RESONANCE: i32 = 3;
pub const EXIT_NON_PHYSICAL: i32 = 4;
pub const EXIT_UNREACHABLE: i32 = 5;
pub const EXIT_CONVERGENCE: i32 = 6;

#[derive(Debug, Parser)]
#[command(name = "resotune", version, about = "Pin-tuned superconducting resonator twin")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Experiment configuration (JSON). Defaults reproduce the measured device.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// RNG seed, overriding the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a transmission sweep and write it as CSV.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Sweep center; defaults to the simulated resonance.
        #[arg(long)]
        center_ghz: Option<f64>,
        #[arg(long)]
        span_mhz: Option<f64>,
        #[arg(long)]
        n_points: Option<usize>,
        /// Power at the resonator (dBm).
        #[arg(long)]
        p_in_dbm: Option<f64>,
        /// Pin height (μm).
        #[arg(long)]
        position_um: Option<f64>,
    },
    /// Fit the lineshape of a trace CSV.
    Fit {
        trace: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Input power, needed when the trace gives pout_dbm only.
        #[arg(long)]
        p_in_dbm: Option<f64>,
        /// Start the optimizer here instead of at the automatic guess.
        #[arg(long, requires_all = ["guess_ql", "guess_qe"])]
        guess_f_ghz: Option<f64>,
        #[arg(long)]
        guess_ql: Option<f64>,
        #[arg(long)]
        guess_qe: Option<f64>,
        #[arg(long, default_value_t = 0.0)]
        guess_phi: f64,
    },
    /// Run the closed-loop controller on the virtual plant.
    Tune {
        #[command(flatten)]
        common: Common,
        /// Target resonance; defaults to the Rb-87 hyperfine splitting.
        #[arg(long)]
        target_ghz: Option<f64>,
        #[arg(long)]
        tolerance_ppm: Option<f64>,
        /// Starting pin height (μm).
        #[arg(long)]
        start_um: Option<f64>,
    },
    /// Drift metrics of a `time_s,f_r_hz` CSV.
    Drift {
        series: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Reference frequency; defaults to the first sample.
        #[arg(long)]
        f0_hz: Option<f64>,
    },
    /// Calibrate the pin coupling model from measured anchors.
    Calibrate {
        #[command(flatten)]
        common: Common,
        /// Resonance with the pin withdrawn.
        #[arg(long)]
        baseline_ghz: Option<f64>,
        /// Resonance at the closest pin height.
        #[arg(long)]
        closest_ghz: Option<f64>,
        #[arg(long)]
        d_min_um: Option<f64>,
        /// Peak |df/dd| at the closest pin height.
        #[arg(long)]
        sensitivity_hz_per_m: Option<f64>,
    },
    /// Print the default experiment configuration.
    DefaultConfig {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Validation(String),
    #[error(transparent)]
    Io(#[from] IoError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(ConfigError::Read { .. }) | CliError::Io(_) => EXIT_IO,
            CliError::Config(_) | CliError::Validation(_) => EXIT_VALIDATION,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(IoError::Io(e))
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::Io(IoError::Invalid(format!("{}: {e}", path.display()))))
}

/// Parses arguments and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> Result<i32, CliError> {
    match command {
        Command::Simulate { common, center_ghz, span_mhz, n_points, p_in_dbm, position_um } => {
            let mut cfg = load_config(&common)?;
            if center_ghz.is_some() {
                cfg.sweep.center_ghz = center_ghz;
            }
            cfg.sweep.span_mhz = span_mhz.unwrap_or(cfg.sweep.span_mhz);
            cfg.sweep.n_points = n_points.unwrap_or(cfg.sweep.n_points);
            cfg.sweep.p_in_dbm = p_in_dbm.unwrap_or(cfg.sweep.p_in_dbm);
            cfg.stage.position_um = position_um.unwrap_or(cfg.stage.position_um);
            cfg.validate()?;
            simulate(&cfg, &common.out)
        }
        Command::Fit { trace, common, p_in_dbm, guess_f_ghz, guess_ql, guess_qe, guess_phi } => {
            let cfg = load_config(&common)?;
            let guess = match (guess_f_ghz, guess_ql, guess_qe) {
                (Some(f), Some(q_l), Some(q_e)) => {
                    Some(InitialGuess { f_r: f * GHZ, q_l, q_e, phi: guess_phi, low_confidence: false })
                }
                _ => None,
            };
            fit(&cfg, &trace, p_in_dbm, guess, &common.out)
        }
        Command::Tune { common, target_ghz, tolerance_ppm, start_um } => {
            let mut cfg = load_config(&common)?;
            cfg.controller.f_target_ghz = target_ghz.unwrap_or(cfg.controller.f_target_ghz);
            cfg.controller.tolerance_ppm = tolerance_ppm.unwrap_or(cfg.controller.tolerance_ppm);
            cfg.stage.position_um = start_um.unwrap_or(cfg.stage.position_um);
            cfg.validate()?;
            tune(&cfg, &common.out)
        }
        Command::Drift { series, common, f0_hz } => {
            let cfg = load_config(&common)?;
            drift(&cfg, &series, f0_hz, &common.out)
        }
        Command::Calibrate { common, baseline_ghz, closest_ghz, d_min_um, sensitivity_hz_per_m } => {
            let mut cfg = load_config(&common)?;
            cfg.pin.f_baseline_ghz = baseline_ghz.unwrap_or(cfg.pin.f_baseline_ghz);
            cfg.pin.f_closest_ghz = closest_ghz.unwrap_or(cfg.pin.f_closest_ghz);
            cfg.pin.d_min_um = d_min_um.unwrap_or(cfg.pin.d_min_um);
            cfg.pin.peak_sensitivity_hz_per_m =
                sensitivity_hz_per_m.unwrap_or(cfg.pin.peak_sensitivity_hz_per_m);
            calibrate(&cfg, &common.out)
        }
        Command::DefaultConfig { out } => {
            io::write_json(output(&out)?, &ExperimentConfig::default())?;
            Ok(EXIT_OK)
        }
    }
}

fn simulate(cfg: &ExperimentConfig, out: &Option<PathBuf>) -> Result<i32, CliError> {
    let model_err = |e: resonator::ModelError| CliError::Validation(e.to_string());
    let plant = cfg.plant().map_err(model_err)?;
    let f_r = plant.true_frequency().map_err(model_err)?;
    let sweep = cfg.sweep_config(f_r);
    let trace = synthesize_sweep(&sweep, &plant.params, &plant.state, &plant.pin, &plant.noise)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    io::write_trace_csv(output(out)?, &trace)?;

    let (i_min, min) = trace
        .power_ratio
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, p)| (i, *p))
        .expect("at least two points");
    let q_l = loaded_q(plant.params.qi0, plant.params.qe);
    eprintln!(
        "simulated {} points: f_r = {:.6} GHz (minimum at {:.6} GHz), depth = {:.4}, linewidth = {:.1} kHz",
        trace.len(),
        f_r / GHZ,
        trace.frequencies[i_min] / GHZ,
        1.0 - min,
        linewidth(f_r, q_l) / 1e3
    );
    Ok(EXIT_OK)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    pub result: Option<FitResult>,
}

fn fit(
    cfg: &ExperimentConfig,
    path: &Path,
    p_in_dbm: Option<f64>,
    guess: Option<InitialGuess>,
    out: &Option<PathBuf>,
) -> Result<i32, CliError> {
    let trace = io::read_trace_csv(open(path)?, p_in_dbm.or(Some(cfg.sweep.p_in_dbm)))?;
    let (code, report) = match fit_resonance(&trace, guess) {
        Ok(r) => {
            eprintln!(
                "f_r = {:.9} GHz, Q_L = {:.1}, Q_e = {:.1}, Q_i = {:.1}, phi = {:.4}, rms = {:.3e} ({} iterations)",
                r.f_r / GHZ,
                r.q_l,
                r.q_e,
                r.q_i,
                r.phi,
                r.rms_residual,
                r.n_iterations
            );
            (EXIT_OK, FitReport { status: "converged".into(), message: None, result: Some(r) })
        }
        Err(e) => {
            eprintln!("fit failed: {e}");
            let message = Some(e.to_string());
            match e {
                FitError::NoResonance(_) => {
                    (EXIT_NO_RESONANCE, FitReport { status: "no_resonance".into(), message, result: None })
                }
                FitError::InvalidTrace(_) => {
                    (EXIT_VALIDATION, FitReport { status: "invalid_trace".into(), message, result: None })
                }
                FitError::NonPhysicalFit { best } => (
                    EXIT_NON_PHYSICAL,
                    FitReport { status: "non_physical_fit".into(), message, result: Some(*best) },
                ),
                FitError::ConvergenceFailure { best } => (
                    EXIT_CONVERGENCE,
                    FitReport { status: "convergence_failure".into(), message, result: Some(*best) },
                ),
            }
        }
    };
    io::write_json(output(out)?, &SessionRecord::new("fit", cfg, report))?;
    Ok(code)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub session: TuningSession,
    /// Noiseless resonance at the final pin height.
    pub true_final_f_r_hz: f64,
}

fn tune(cfg: &ExperimentConfig, out: &Option<PathBuf>) -> Result<i32, CliError> {
    let mut plant = cfg.plant().map_err(|e| CliError::Validation(e.to_string()))?;
    let mut stage = cfg.stage();
    let controller = cfg.controller();
    let session = tune_to_target(&mut plant, &mut stage, &controller)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let true_final_f_r_hz = plant.true_frequency().map_err(|e| CliError::Validation(e.to_string()))?;
    let code = match session.outcome {
        Outcome::Converged => EXIT_OK,
        Outcome::Unreachable => EXIT_UNREACHABLE,
        Outcome::StepBudgetExhausted | Outcome::MeasurementFailed => EXIT_CONVERGENCE,
    };
    eprintln!(
        "{:?} after {} steps and {} sweeps; final error {} Hz, pin at {:.3} um",
        session.outcome,
        session.total_steps,
        session.measurements,
        session.final_error_hz.map_or("n/a".to_string(), |e| format!("{e:.1}")),
        session.final_position / UM
    );
    let report = TuneReport { session, true_final_f_r_hz };
    io::write_json(output(out)?, &SessionRecord::new("tune", cfg, report))?;
    Ok(code)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllanPoint {
    pub tau_s: f64,
    pub adev: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub n_samples: usize,
    pub f0_hz: f64,
    pub slope_hz_per_hour: f64,
    pub ppb_per_hour: f64,
    pub peak_to_peak_hz: f64,
    /// Overlapping Allan deviation of the fractional frequency.
    pub allan: Vec<AllanPoint>,
}

fn drift(
    cfg: &ExperimentConfig,
    path: &Path,
    f0_hz: Option<f64>,
    out: &Option<PathBuf>,
) -> Result<i32, CliError> {
    let series = io::read_series_csv(open(path)?, f0_hz)?;
    let rate = drift_rate(&series).map_err(|e| CliError::Validation(e.to_string()))?;
    let p2p = peak_to_peak_deviation(&series).map_err(|e| CliError::Validation(e.to_string()))?;
    let factors: Vec<usize> = std::iter::successors(Some(1usize), |m| Some(m * 2))
        .take_while(|m| 2 * m < series.len())
        .collect();
    let allan = allan_deviation(&series, &factors)
        .into_iter()
        .map(|(tau_s, adev)| AllanPoint { tau_s, adev })
        .collect();
    eprintln!(
        "drift {:.3} Hz/h ({:.3} ppb/h), peak-to-peak {:.1} Hz over {} samples",
        rate.slope_hz_per_hour,
        rate.ppb_per_hour,
        p2p,
        series.len()
    );
    let report = DriftReport {
        n_samples: series.len(),
        f0_hz: series.f0,
        slope_hz_per_hour: rate.slope_hz_per_hour,
        ppb_per_hour: rate.ppb_per_hour,
        peak_to_peak_hz: p2p,
        allan,
    };
    io::write_json(output(out)?, &SessionRecord::new("drift", cfg, report))?;
    Ok(EXIT_OK)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub anchors: CalibrationAnchors,
    pub model: PinCouplingModel,
    pub tuning_range_hz: f64,
    pub shift_residual_rel: f64,
    pub slope_residual_rel: f64,
}

fn calibrate(cfg: &ExperimentConfig, out: &Option<PathBuf>) -> Result<i32, CliError> {
    let anchors = cfg.anchors();
    let model = calibrate_pin_model(&anchors).map_err(|e| CliError::Validation(e.to_string()))?;
    let (shift, slope) =
        calibration_residuals(&model, &anchors).map_err(|e| CliError::Validation(e.to_string()))?;
    eprintln!(
        "m_max = {:.5}, lambda = {:.2} um, d_min = {:.1} um; anchor residuals: shift {:.2e}, slope {:.2e}",
        model.m_max,
        model.lambda / UM,
        model.d_min / UM,
        shift,
        slope
    );
    let report = CalibrationReport {
        anchors,
        model,
        tuning_range_hz: anchors.f_closest - anchors.f_baseline,
        shift_residual_rel: shift,
        slope_residual_rel: slope,
    };
    io::write_json(output(out)?, &SessionRecord::new("calibrate", cfg, report))?;
    Ok(EXIT_OK)
}
