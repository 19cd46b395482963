//! Stick-slip piezo stage and the closed-loop tuning controller.
//!
//! The stage moves the pin in discrete steps whose length grows linearly with
//! the drive voltage above the stall threshold. The controller repeats
//! measure → fit → step until the fitted resonance sits within tolerance of
//! the target.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fitting::{fit_resonance, FitError};
use crate::resonator::{self, ModelError, PinCouplingModel, ResonatorParams, TuningState};
use crate::transmission::{self, stream_key, NoiseModel, SweepConfig, TransmissionError};
use crate::units::{F_RB, MHZ, NM};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StageError {
    #[error("stage stalled: {voltage} V is below the {min_voltage} V threshold")]
    Stalled { voltage: f64, min_voltage: f64 },
    #[error("step would move the pin to {target} m, below the limit {d_min} m")]
    MechanicalLimit { target: f64, d_min: f64 },
    #[error("invalid stage: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Decreasing pin height, raising the resonance.
    Toward,
    Away,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Toward => -1.0,
            Direction::Away => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiezoStage {
    /// Step length at `reference_voltage` (m).
    pub step_size: f64,
    pub reference_voltage: f64,
    /// Below this drive the stage does not move.
    pub min_voltage: f64,
    /// Voltage at which the linear step-length law extrapolates to zero.
    pub zero_step_voltage: f64,
    pub max_voltage: f64,
    pub voltage: f64,
    /// Pin height (m).
    pub position: f64,
    /// Closest allowed pin height (m).
    pub d_min: f64,
    /// Dead band lost on a direction reversal (m).
    pub backlash: f64,
    #[serde(default)]
    pub last_direction: Option<Direction>,
}

impl PiezoStage {
    /// Stage parked at `position`, driven at 36 V with 60 nm steps.
    pub fn new(position: f64, d_min: f64) -> Self {
        Self {
            step_size: 60.0 * NM,
            reference_voltage: 36.0,
            min_voltage: 30.0,
            zero_step_voltage: 28.0,
            max_voltage: 70.0,
            voltage: 36.0,
            position,
            d_min,
            backlash: 0.0,
            last_direction: None,
        }
    }

    pub fn validate(&self) -> Result<(), StageError> {
        let bad = |msg: &str| Err(StageError::Invalid(msg.to_string()));
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad("step_size must be positive");
        }
        if !(self.zero_step_voltage < self.min_voltage
            && self.min_voltage <= self.reference_voltage
            && self.reference_voltage <= self.max_voltage)
        {
            return bad("voltages must satisfy zero_step < min <= reference <= max");
        }
        if !(self.backlash >= 0.0) {
            return bad("backlash must be non-negative");
        }
        if !(self.d_min > 0.0) {
            return bad("d_min must be positive");
        }
        if !(self.position >= self.d_min) {
            return bad("position is below d_min");
        }
        Ok(())
    }

    /// Step length at drive voltage `v`; zero when the stage stalls.
    pub fn step_length_at(&self, v: f64) -> f64 {
        if v < self.min_voltage {
            return 0.0;
        }
        self.step_size * (v - self.zero_step_voltage) / (self.reference_voltage - self.zero_step_voltage)
    }

    pub fn step_length(&self) -> f64 {
        self.step_length_at(self.voltage)
    }

    /// Voltage whose step length is `len`, clamped to the operating range.
    pub fn voltage_for_step(&self, len: f64) -> f64 {
        let v = self.zero_step_voltage
            + len / self.step_size * (self.reference_voltage - self.zero_step_voltage);
        v.clamp(self.min_voltage, self.max_voltage)
    }

    /// Fires one step. Returns the new position.
    pub fn step(&mut self, direction: Direction) -> Result<f64, StageError> {
        if self.voltage < self.min_voltage {
            return Err(StageError::Stalled { voltage: self.voltage, min_voltage: self.min_voltage });
        }
        let mut len = self.step_length();
        if self.last_direction.is_some_and(|d| d != direction) {
            len = (len - self.backlash).max(0.0);
        }
        let target = self.position + direction.sign() * len;
        if target < self.d_min {
            return Err(StageError::MechanicalLimit { target, d_min: self.d_min });
        }
        self.position = target;
        self.last_direction = Some(direction);
        Ok(target)
    }
}

/// Frequency change per step (Hz) at the current pin height for steps of
/// length `step_length`.
pub fn frequency_sensitivity(
    state: &TuningState,
    params: &ResonatorParams,
    pin: &PinCouplingModel,
    step_length: f64,
) -> Result<f64, ModelError> {
    Ok(resonator::tuning_slope(params, state, pin)?.abs() * step_length)
}

/// The simulated device under control.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plant {
    pub params: ResonatorParams,
    pub state: TuningState,
    pub pin: PinCouplingModel,
    pub noise: NoiseModel,
}

impl Plant {
    /// Noiseless resonance at the current pin height.
    pub fn true_frequency(&self) -> Result<f64, ModelError> {
        resonator::tuned_frequency(&self.params, &self.state, &self.pin)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPlan {
    /// Span of the wide sweep used to acquire the resonance (Hz), added to
    /// the tuning band.
    pub acquisition_margin_hz: f64,
    pub acquisition_points: usize,
    pub tracking_span_hz: f64,
    pub tracking_points: usize,
    pub p_in_dbm: f64,
    pub duration_s: f64,
}

impl Default for SweepPlan {
    fn default() -> Self {
        Self {
            acquisition_margin_hz: 2.0 * MHZ,
            acquisition_points: 4001,
            tracking_span_hz: 3.0 * MHZ,
            tracking_points: 601,
            p_in_dbm: -131.0,
            duration_s: 160.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub f_target: f64,
    pub tolerance_ppm: f64,
    pub max_steps: usize,
    pub steps_per_measurement: usize,
    pub sweep: SweepPlan,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            f_target: F_RB,
            tolerance_ppm: 0.3,
            max_steps: 2000,
            steps_per_measurement: 8,
            sweep: SweepPlan::default(),
        }
    }
}

impl ControllerConfig {
    pub fn tolerance_hz(&self) -> f64 {
        self.tolerance_ppm * 1e-6 * self.f_target
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.f_target > 0.0 && self.f_target.is_finite()) {
            return Err("f_target must be positive".into());
        }
        if !(self.tolerance_ppm > 0.0 && self.tolerance_ppm.is_finite()) {
            return Err("tolerance_ppm must be positive".into());
        }
        if self.max_steps == 0 {
            return Err("max_steps must be positive".into());
        }
        if self.steps_per_measurement == 0 {
            return Err("steps_per_measurement must be positive".into());
        }
        let s = &self.sweep;
        if s.acquisition_points < 16 || s.tracking_points < 16 {
            return Err("sweeps need at least 16 points".into());
        }
        if !(s.tracking_span_hz > 0.0 && s.acquisition_margin_hz >= 0.0 && s.duration_s > 0.0) {
            return Err("sweep spans and duration must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Converged,
    Unreachable,
    StepBudgetExhausted,
    /// Two consecutive fits failed.
    MeasurementFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    /// Steps fired so far.
    pub step_index: usize,
    pub position: f64,
    pub voltage: f64,
    /// Session clock at the end of the measurement (s).
    pub time_s: f64,
    pub measured_f_r: Option<f64>,
    pub error_hz: Option<f64>,
    pub fit_rms_residual: Option<f64>,
    pub fit_iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningSession {
    pub f_target: f64,
    pub tolerance_hz: f64,
    pub outcome: Outcome,
    /// `|f_r - f_target|` of the last successful measurement (Hz).
    pub final_error_hz: Option<f64>,
    pub final_position: f64,
    pub total_steps: usize,
    pub measurements: usize,
    pub log: Vec<LogEntry>,
}

struct Measurement {
    f_r: f64,
    rms: f64,
    iterations: usize,
}

struct Session<'a> {
    plant: &'a mut Plant,
    cfg: &'a ControllerConfig,
    band: (f64, f64),
    measurements: usize,
    clock: f64,
}

impl Session<'_> {
    fn sweep(&mut self, center: f64, wide: bool) -> Result<Measurement, FitError> {
        let plan = &self.cfg.sweep;
        let (span, n) = if wide {
            (self.band.1 - self.band.0 + plan.acquisition_margin_hz, plan.acquisition_points)
        } else {
            (plan.tracking_span_hz, plan.tracking_points)
        };
        let center = if wide { 0.5 * (self.band.0 + self.band.1) } else { center };
        let mut sweep = SweepConfig::centered(center, span, n, plan.p_in_dbm);
        sweep.duration_s = plan.duration_s;
        sweep.start_time_s = self.clock;
        let noise = NoiseModel {
            seed: stream_key(self.plant.noise.seed, self.measurements as u64),
            ..self.plant.noise
        };
        self.measurements += 1;
        self.clock += plan.duration_s;
        let trace = transmission::synthesize_sweep(
            &sweep,
            &self.plant.params,
            &self.plant.state,
            &self.plant.pin,
            &noise,
        )
        .map_err(|e| FitError::InvalidTrace(e.to_string()))?;
        let fit = fit_resonance(&trace, None)?;
        Ok(Measurement { f_r: fit.f_r, rms: fit.rms_residual, iterations: fit.n_iterations })
    }
}

/// Drives the plant's resonance onto `cfg.f_target`.
///
/// Each round fits a sweep, estimates `df/dd` from the last two measurements
/// (falling back to the model slope), and fires up to
/// `steps_per_measurement` steps toward the target. The drive voltage is
/// chosen per round so that the planned displacement is spread over the
/// round's steps, between the stall threshold and the maximum drive; close to
/// the target this settles at the finest steps the stage can make.
pub fn tune_to_target(
    plant: &mut Plant,
    stage: &mut PiezoStage,
    cfg: &ControllerConfig,
) -> Result<TuningSession, TuningError> {
    cfg.validate().map_err(TuningError::Config)?;
    stage.validate()?;
    plant.params.validate()?;
    plant.pin.validate()?;
    plant.noise.validate()?;
    plant.state.d = stage.position;
    plant.state.validate(&plant.pin)?;

    let tolerance = cfg.tolerance_hz();
    let band = resonator::tuning_band(&plant.params, plant.state.trim_shift, &plant.pin)?;
    let mut log = Vec::new();
    let finish = |outcome, final_error_hz, stage: &PiezoStage, steps, measurements, log| TuningSession {
        f_target: cfg.f_target,
        tolerance_hz: tolerance,
        outcome,
        final_error_hz,
        final_position: stage.position,
        total_steps: steps,
        measurements,
        log,
    };

    if cfg.f_target < band.0 || cfg.f_target > band.1 {
        log.push(LogEntry {
            step_index: 0,
            position: stage.position,
            voltage: stage.voltage,
            time_s: 0.0,
            measured_f_r: None,
            error_hz: None,
            fit_rms_residual: None,
            fit_iterations: None,
            note: Some(format!(
                "target outside the reachable band [{:.9e}, {:.9e}] Hz",
                band.0, band.1
            )),
        });
        return Ok(finish(Outcome::Unreachable, None, stage, 0, 0, log));
    }

    let mut session = Session { plant, cfg, band, measurements: 0, clock: 0.0 };
    let mut steps = 0usize;
    let mut predicted: Option<f64> = None;
    let mut previous: Option<(f64, f64)> = None; // (position, f_r)
    let mut last_error = None;

    loop {
        let attempt = match predicted {
            Some(center) => session.sweep(center, false),
            None => session.sweep(0.0, true),
        };
        let measured = match attempt {
            Ok(m) => m,
            Err(first) => {
                log.push(entry(stage, steps, session.clock, None, Some(format!("fit failed: {first}; retrying wide"))));
                match session.sweep(0.0, true) {
                    Ok(m) => m,
                    Err(second) => {
                        log.push(entry(stage, steps, session.clock, None, Some(format!("fit failed: {second}"))));
                        let n = session.measurements;
                        return Ok(finish(Outcome::MeasurementFailed, last_error, stage, steps, n, log));
                    }
                }
            }
        };

        let error = cfg.f_target - measured.f_r;
        last_error = Some(error.abs());
        log.push(entry(stage, steps, session.clock, Some((&measured, error)), None));
        let n_meas = session.measurements;
        if error.abs() <= tolerance {
            return Ok(finish(Outcome::Converged, last_error, stage, steps, n_meas, log));
        }
        if steps >= cfg.max_steps {
            return Ok(finish(Outcome::StepBudgetExhausted, last_error, stage, steps, n_meas, log));
        }

        let model_slope = resonator::tuning_slope(
            &session.plant.params,
            &session.plant.state,
            &session.plant.pin,
        )?;
        let slope = match previous {
            Some((d0, f0)) if d0 != stage.position => {
                let s = (measured.f_r - f0) / (stage.position - d0);
                if s < 0.0 && s.is_finite() && (s / model_slope).abs() < 10.0 && (s / model_slope).abs() > 0.1 {
                    s
                } else {
                    model_slope
                }
            }
            _ => model_slope,
        };
        previous = Some((stage.position, measured.f_r));

        let displacement = error / slope;
        let direction = if displacement < 0.0 { Direction::Toward } else { Direction::Away };
        let budget = cfg.steps_per_measurement.min(cfg.max_steps - steps);
        stage.voltage = stage.voltage_for_step(displacement.abs() / budget as f64);
        let len = stage.step_length();
        let wanted = (displacement.abs() / len).round().max(1.0) as usize;
        let n = wanted.min(budget);

        let start = stage.position;
        let mut note = None;
        for _ in 0..n {
            match stage.step(direction) {
                Ok(_) => steps += 1,
                Err(e @ StageError::MechanicalLimit { .. }) => {
                    note = Some(e.to_string());
                    break;
                }
                Err(e) => return Err(e.into()),
            }
        }
        session.plant.state.d = stage.position;
        if stage.position == start && note.is_some() {
            log.push(entry(stage, steps, session.clock, None, note));
            return Ok(finish(Outcome::Unreachable, last_error, stage, steps, session.measurements, log));
        }
        if let Some(text) = note {
            log.push(entry(stage, steps, session.clock, None, Some(text)));
        }
        predicted = Some(measured.f_r + slope * (stage.position - start));
    }
}

fn entry(
    stage: &PiezoStage,
    steps: usize,
    clock: f64,
    measurement: Option<(&Measurement, f64)>,
    note: Option<String>,
) -> LogEntry {
    LogEntry {
        step_index: steps,
        position: stage.position,
        voltage: stage.voltage,
        time_s: clock,
        measured_f_r: measurement.map(|(m, _)| m.f_r),
        error_hz: measurement.map(|(_, e)| e),
        fit_rms_residual: measurement.map(|(m, _)| m.rms),
        fit_iterations: measurement.map(|(m, _)| m.iterations),
        note,
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TuningError {
    #[error("invalid controller configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Stage(#[from] StageError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Transmission(#[from] TransmissionError),
}
