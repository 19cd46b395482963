//! The experiment document: one JSON file describing a full virtual
//! experiment in laboratory units (GHz, μm, nH).
//!
//! Every section has defaults reproducing the measured device, so `{}` is a
//! valid configuration. [`ExperimentConfig::validate`] checks every invariant
//! of the domain types and names the offending field.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::piezo::{ControllerConfig, PiezoStage, Plant, SweepPlan};
use crate::resonator::{
    self, calibrate_pin_model, CalibrationAnchors, PinCouplingModel, ResonatorParams, TuningState,
};
use crate::transmission::{NoiseModel, SweepConfig, TlsLossModel, DEFAULT_VIB_SAMPLES};
use crate::units::{F_RB, GHZ, MHZ, NH, NM, UM};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("config is not valid JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResonatorSection {
    pub l0_nh: f64,
    /// Un-screened, untrimmed resonance; sets the capacitance.
    pub f_base_ghz: f64,
    pub qi0: f64,
    pub qe: f64,
    pub phi: f64,
    /// Effective added finger length of the coarse trim (μm).
    pub trim_um: f64,
}

impl Default for ResonatorSection {
    fn default() -> Self {
        Self { l0_nh: 1.0, f_base_ghz: 6.8278, qi0: 35_000.0, qe: 5e5, phi: 0.0, trim_um: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PinSection {
    pub f_baseline_ghz: f64,
    pub f_closest_ghz: f64,
    pub d_min_um: f64,
    pub peak_sensitivity_hz_per_m: f64,
}

impl Default for PinSection {
    fn default() -> Self {
        Self {
            f_baseline_ghz: 6.8278,
            f_closest_ghz: 6.8454,
            d_min_um: 40.0,
            // 8.7 kHz per 60 nm step
            peak_sensitivity_hz_per_m: 1.45e11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    pub sigma_rel: f64,
    pub vib_amplitude_um: f64,
    /// Vibration phases averaged into each sweep point.
    pub vib_samples: usize,
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self { sigma_rel: 0.0, vib_amplitude_um: 0.0, vib_samples: DEFAULT_VIB_SAMPLES }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// Defaults to the simulated resonance.
    pub center_ghz: Option<f64>,
    pub span_mhz: f64,
    pub n_points: usize,
    pub p_in_dbm: f64,
    pub duration_s: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { center_ghz: None, span_mhz: 3.0, n_points: 1601, p_in_dbm: -131.0, duration_s: 160.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSection {
    pub position_um: f64,
    pub step_nm: f64,
    pub reference_voltage: f64,
    pub min_voltage: f64,
    pub zero_step_voltage: f64,
    pub max_voltage: f64,
    pub voltage: f64,
    pub backlash_nm: f64,
}

impl Default for StageSection {
    fn default() -> Self {
        Self {
            position_um: 300.0,
            step_nm: 60.0,
            reference_voltage: 36.0,
            min_voltage: 30.0,
            zero_step_voltage: 28.0,
            max_voltage: 70.0,
            voltage: 36.0,
            backlash_nm: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerSection {
    pub f_target_ghz: f64,
    pub tolerance_ppm: f64,
    pub max_steps: usize,
    pub steps_per_measurement: usize,
    pub acquisition_margin_mhz: f64,
    pub acquisition_points: usize,
    pub tracking_span_mhz: f64,
    pub tracking_points: usize,
}

impl Default for ControllerSection {
    fn default() -> Self {
        let plan = SweepPlan::default();
        Self {
            f_target_ghz: F_RB / GHZ,
            tolerance_ppm: 0.3,
            max_steps: 2000,
            steps_per_measurement: 8,
            acquisition_margin_mhz: plan.acquisition_margin_hz / MHZ,
            acquisition_points: plan.acquisition_points,
            tracking_span_mhz: plan.tracking_span_hz / MHZ,
            tracking_points: plan.tracking_points,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub resonator: ResonatorSection,
    pub pin: PinSection,
    pub noise: NoiseSection,
    /// Power-dependent internal loss; when absent `resonator.qi0` is used.
    pub tls: Option<TlsLossModel>,
    pub sweep: SweepSection,
    pub stage: StageSection,
    pub controller: ControllerSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            resonator: ResonatorSection::default(),
            pin: PinSection::default(),
            noise: NoiseSection::default(),
            tls: None,
            sweep: SweepSection::default(),
            stage: StageSection::default(),
            controller: ControllerSection::default(),
        }
    }
}

struct Checker(Vec<String>);

impl Checker {
    fn positive(&mut self, field: &str, v: f64) {
        if !(v > 0.0 && v.is_finite()) {
            self.0.push(format!("{field}: must be positive and finite, got {v}"));
        }
    }

    fn non_negative(&mut self, field: &str, v: f64) {
        if !(v >= 0.0 && v.is_finite()) {
            self.0.push(format!("{field}: must be non-negative and finite, got {v}"));
        }
    }

    fn finite(&mut self, field: &str, v: f64) {
        if !v.is_finite() {
            self.0.push(format!("{field}: must be finite, got {v}"));
        }
    }

    fn check(&mut self, field: &str, ok: bool, msg: impl std::fmt::Display) {
        if !ok {
            self.0.push(format!("{field}: {msg}"));
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.display().to_string(), source })?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut c = Checker(Vec::new());
        let r = &self.resonator;
        c.positive("resonator.l0_nh", r.l0_nh);
        c.positive("resonator.f_base_ghz", r.f_base_ghz);
        c.positive("resonator.qi0", r.qi0);
        c.positive("resonator.qe", r.qe);
        c.check("resonator.phi", r.phi.abs() < std::f64::consts::FRAC_PI_2, "must satisfy |phi| < pi/2");
        c.non_negative("resonator.trim_um", r.trim_um);
        if r.f_base_ghz > 0.0 && r.trim_um >= 0.0 {
            let trimmed = r.f_base_ghz * GHZ + resonator::TRIM_HZ_PER_UM * r.trim_um;
            c.check("resonator.trim_um", trimmed > 0.0, "trim drives the baseline frequency below zero");
        }

        let p = &self.pin;
        c.positive("pin.f_baseline_ghz", p.f_baseline_ghz);
        c.positive("pin.f_closest_ghz", p.f_closest_ghz);
        c.positive("pin.d_min_um", p.d_min_um);
        c.positive("pin.peak_sensitivity_hz_per_m", p.peak_sensitivity_hz_per_m);
        c.check(
            "pin.f_closest_ghz",
            !(p.f_closest_ghz < p.f_baseline_ghz),
            "must not be below pin.f_baseline_ghz",
        );

        c.non_negative("noise.sigma_rel", self.noise.sigma_rel);
        c.non_negative("noise.vib_amplitude_um", self.noise.vib_amplitude_um);
        c.check("noise.vib_samples", self.noise.vib_samples > 0, "must be at least 1");

        if let Some(tls) = &self.tls {
            c.positive("tls.q_tls_low", tls.q_tls_low);
            c.positive("tls.q_other", tls.q_other);
            c.finite("tls.p_sat_dbm", tls.p_sat_dbm);
        }

        let s = &self.sweep;
        if let Some(center) = s.center_ghz {
            c.positive("sweep.center_ghz", center);
        }
        c.positive("sweep.span_mhz", s.span_mhz);
        c.check("sweep.n_points", s.n_points >= 2, format!("must be at least 2, got {}", s.n_points));
        c.finite("sweep.p_in_dbm", s.p_in_dbm);
        c.positive("sweep.duration_s", s.duration_s);
        if let Some(center) = s.center_ghz {
            c.check(
                "sweep.span_mhz",
                center * GHZ > 0.5 * s.span_mhz * MHZ,
                "span reaches below zero frequency",
            );
        }

        let st = &self.stage;
        c.positive("stage.step_nm", st.step_nm);
        c.non_negative("stage.backlash_nm", st.backlash_nm);
        c.check(
            "stage.position_um",
            st.position_um.is_finite() && st.position_um >= p.d_min_um,
            format!("must be at least pin.d_min_um = {}", p.d_min_um),
        );
        c.check(
            "stage.min_voltage",
            st.zero_step_voltage < st.min_voltage
                && st.min_voltage <= st.reference_voltage
                && st.reference_voltage <= st.max_voltage,
            "voltages must satisfy zero_step_voltage < min_voltage <= reference_voltage <= max_voltage",
        );
        c.finite("stage.voltage", st.voltage);

        let ct = &self.controller;
        c.positive("controller.f_target_ghz", ct.f_target_ghz);
        c.positive("controller.tolerance_ppm", ct.tolerance_ppm);
        c.check("controller.max_steps", ct.max_steps > 0, "must be positive");
        c.check("controller.steps_per_measurement", ct.steps_per_measurement > 0, "must be positive");
        c.non_negative("controller.acquisition_margin_mhz", ct.acquisition_margin_mhz);
        c.positive("controller.tracking_span_mhz", ct.tracking_span_mhz);
        c.check("controller.acquisition_points", ct.acquisition_points >= 16, "must be at least 16");
        c.check("controller.tracking_points", ct.tracking_points >= 16, "must be at least 16");

        if c.0.is_empty() {
            // invariants that need the assembled model
            if let Err(e) = self.pin_model() {
                c.0.push(format!("pin: {e}"));
            }
        }
        if c.0.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(c.0))
        }
    }

    pub fn anchors(&self) -> CalibrationAnchors {
        CalibrationAnchors {
            f_baseline: self.pin.f_baseline_ghz * GHZ,
            f_closest: self.pin.f_closest_ghz * GHZ,
            d_min: self.pin.d_min_um * UM,
            peak_sensitivity: self.pin.peak_sensitivity_hz_per_m,
        }
    }

    pub fn pin_model(&self) -> Result<PinCouplingModel, resonator::ModelError> {
        calibrate_pin_model(&self.anchors())
    }

    /// Resonator parameters, with the internal Q taken from the TLS model at
    /// the sweep power when one is configured.
    pub fn resonator_params(&self) -> Result<ResonatorParams, resonator::ModelError> {
        let r = &self.resonator;
        let qi = match &self.tls {
            Some(tls) => crate::transmission::power_dependent_qi(self.sweep.p_in_dbm, tls),
            None => r.qi0,
        };
        ResonatorParams::from_frequency(r.l0_nh * NH, r.f_base_ghz * GHZ, qi, r.qe, r.phi)
    }

    pub fn tuning_state(&self) -> TuningState {
        TuningState {
            d: self.stage.position_um * UM,
            trim_shift: resonator::TRIM_HZ_PER_UM * self.resonator.trim_um,
        }
    }

    pub fn noise_model(&self) -> NoiseModel {
        NoiseModel {
            sigma_rel: self.noise.sigma_rel,
            vib_amplitude: self.noise.vib_amplitude_um * UM,
            vib_samples: self.noise.vib_samples,
            seed: self.seed,
        }
    }

    pub fn plant(&self) -> Result<Plant, resonator::ModelError> {
        Ok(Plant {
            params: self.resonator_params()?,
            state: self.tuning_state(),
            pin: self.pin_model()?,
            noise: self.noise_model(),
        })
    }

    pub fn stage(&self) -> PiezoStage {
        let s = &self.stage;
        PiezoStage {
            step_size: s.step_nm * NM,
            reference_voltage: s.reference_voltage,
            min_voltage: s.min_voltage,
            zero_step_voltage: s.zero_step_voltage,
            max_voltage: s.max_voltage,
            voltage: s.voltage,
            position: s.position_um * UM,
            d_min: self.pin.d_min_um * UM,
            backlash: s.backlash_nm * NM,
            last_direction: None,
        }
    }

    pub fn controller(&self) -> ControllerConfig {
        let c = &self.controller;
        ControllerConfig {
            f_target: c.f_target_ghz * GHZ,
            tolerance_ppm: c.tolerance_ppm,
            max_steps: c.max_steps,
            steps_per_measurement: c.steps_per_measurement,
            sweep: SweepPlan {
                acquisition_margin_hz: c.acquisition_margin_mhz * MHZ,
                acquisition_points: c.acquisition_points,
                tracking_span_hz: c.tracking_span_mhz * MHZ,
                tracking_points: c.tracking_points,
                p_in_dbm: self.sweep.p_in_dbm,
                duration_s: self.sweep.duration_s,
            },
        }
    }

    /// Sweep around `center` (Hz), or around the sweep section's own center.
    pub fn sweep_config(&self, default_center: f64) -> SweepConfig {
        let s = &self.sweep;
        let center = s.center_ghz.map(|c| c * GHZ).unwrap_or(default_center);
        let mut cfg = SweepConfig::centered(center, s.span_mhz * MHZ, s.n_points, s.p_in_dbm);
        cfg.duration_s = s.duration_s;
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        let cfg = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        let plant = cfg.plant().unwrap();
        assert!((plant.params.base_frequency() / (6.8278 * GHZ) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn default_round_trips_through_json() {
        let cfg = ExperimentConfig::default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
    }

    fn rejected(json: &str, field: &str) {
        match ExperimentConfig::from_json(json) {
            Err(ConfigError::Invalid(msgs)) => {
                assert!(msgs.iter().any(|m| m.starts_with(field)), "{field} not named in {msgs:?}")
            }
            other => panic!("expected rejection naming {field}, got {other:?}"),
        }
    }

    #[test]
    fn invariant_violations_name_the_field() {
        rejected(r#"{"resonator": {"l0_nh": 0}}"#, "resonator.l0_nh");
        rejected(r#"{"resonator": {"qi0": -1}}"#, "resonator.qi0");
        rejected(r#"{"resonator": {"qe": 0}}"#, "resonator.qe");
        rejected(r#"{"resonator": {"phi": 1.6}}"#, "resonator.phi");
        rejected(r#"{"resonator": {"trim_um": -3}}"#, "resonator.trim_um");
        rejected(r#"{"pin": {"d_min_um": 0}}"#, "pin.d_min_um");
        rejected(r#"{"pin": {"f_closest_ghz": 6.8}}"#, "pin.f_closest_ghz");
        rejected(r#"{"pin": {"peak_sensitivity_hz_per_m": 0}}"#, "pin.peak_sensitivity_hz_per_m");
        rejected(r#"{"noise": {"sigma_rel": -0.1}}"#, "noise.sigma_rel");
        rejected(r#"{"noise": {"vib_amplitude_um": -1}}"#, "noise.vib_amplitude_um");
        rejected(r#"{"noise": {"vib_samples": 0}}"#, "noise.vib_samples");
        rejected(r#"{"tls": {"q_tls_low": 0, "p_sat_dbm": -120, "q_other": 1e5}}"#, "tls.q_tls_low");
        rejected(r#"{"sweep": {"n_points": 1}}"#, "sweep.n_points");
        rejected(r#"{"sweep": {"span_mhz": 0}}"#, "sweep.span_mhz");
        rejected(r#"{"sweep": {"duration_s": 0}}"#, "sweep.duration_s");
        rejected(r#"{"stage": {"position_um": 10}}"#, "stage.position_um");
        rejected(r#"{"stage": {"step_nm": 0}}"#, "stage.step_nm");
        rejected(r#"{"stage": {"min_voltage": 40}}"#, "stage.min_voltage");
        rejected(r#"{"controller": {"tolerance_ppm": 0}}"#, "controller.tolerance_ppm");
        rejected(r#"{"controller": {"max_steps": 0}}"#, "controller.max_steps");
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(matches!(
            ExperimentConfig::from_json(r#"{"resonator": {"l1_nh": 1}}"#),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn tls_sets_internal_q() {
        let mut cfg = ExperimentConfig { tls: Some(TlsLossModel::default()), ..Default::default() };
        cfg.sweep.p_in_dbm = -160.0;
        let qi = cfg.resonator_params().unwrap().qi0;
        assert!((qi - 35_000.0).abs() < 5.0);
    }
}
