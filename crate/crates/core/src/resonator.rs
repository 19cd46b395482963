//! Lumped-element model of the pin-tuned resonator.
//!
//! The resonator is an LC circuit. A superconducting pin hovering above the
//! inductor screens it through image currents, reducing the effective
//! inductance to `L0 (1 - M²/L0²)` and raising the resonance. The coupling
//! ratio `m = M/L0` decays exponentially with pin height; its two parameters
//! are fixed from measured anchors by [`calibrate_pin_model`].

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Frequency change per micrometer of added interdigitated finger length (Hz/μm).
pub const TRIM_HZ_PER_UM: f64 = -0.8e6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("{name} must be positive and finite, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("lineshape asymmetry |phi| must be below pi/2, got {0}")]
    PhaseOutOfRange(f64),
    #[error("mutual inductance |M| = {m} must be smaller than L0 = {l0}")]
    ScreeningTooStrong { m: f64, l0: f64 },
    #[error("coupling peak m_max must lie in [0, 1), got {0}")]
    CouplingOutOfRange(f64),
    #[error("pin distance {d} m is below the closest allowed height {d_min} m")]
    BelowMinimumDistance { d: f64, d_min: f64 },
    #[error("finger length increase must be non-negative, got {0} um")]
    NegativeTrim(f64),
    #[error("calibration anchors are inconsistent: {0}")]
    Calibration(String),
}

pub(crate) fn require_positive(name: &'static str, value: f64) -> Result<(), ModelError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(ModelError::NonPositive { name, value })
    }
}

/// Electrical description of the resonator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResonatorParams {
    /// Un-screened self-inductance (H).
    pub l0: f64,
    /// Capacitance (F).
    pub c: f64,
    /// Internal quality factor at low power.
    pub qi0: f64,
    /// External (coupling) quality factor.
    pub qe: f64,
    /// Lineshape asymmetry angle (rad).
    pub phi: f64,
}

impl ResonatorParams {
    pub fn new(l0: f64, c: f64, qi0: f64, qe: f64, phi: f64) -> Result<Self, ModelError> {
        let p = Self { l0, c, qi0, qe, phi };
        p.validate()?;
        Ok(p)
    }

    /// Builds parameters whose un-screened resonance sits at `f_base`, solving
    /// for the capacitance with the given inductance.
    pub fn from_frequency(
        l0: f64,
        f_base: f64,
        qi0: f64,
        qe: f64,
        phi: f64,
    ) -> Result<Self, ModelError> {
        require_positive("f_base", f_base)?;
        require_positive("l0", l0)?;
        let omega = TAU * f_base;
        Self::new(l0, 1.0 / (omega * omega * l0), qi0, qe, phi)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        require_positive("l0", self.l0)?;
        require_positive("c", self.c)?;
        require_positive("qi0", self.qi0)?;
        require_positive("qe", self.qe)?;
        if !(self.phi.abs() < PI / 2.0) {
            return Err(ModelError::PhaseOutOfRange(self.phi));
        }
        Ok(())
    }

    /// Un-screened, untrimmed resonance frequency (Hz).
    pub fn base_frequency(&self) -> f64 {
        // validated on construction
        1.0 / (TAU * (self.l0 * self.c).sqrt())
    }

    pub fn with_qi(self, qi0: f64) -> Self {
        Self { qi0, ..self }
    }
}

/// Exponential distance-to-coupling map `m(d) = m_max exp(-(d - d_min)/lambda)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PinCouplingModel {
    pub m_max: f64,
    /// Decay length (m).
    pub lambda: f64,
    /// Closest reachable pin height (m).
    pub d_min: f64,
}

impl PinCouplingModel {
    pub fn new(m_max: f64, lambda: f64, d_min: f64) -> Result<Self, ModelError> {
        let m = Self { m_max, lambda, d_min };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(0.0..1.0).contains(&self.m_max) {
            return Err(ModelError::CouplingOutOfRange(self.m_max));
        }
        require_positive("lambda", self.lambda)?;
        require_positive("d_min", self.d_min)?;
        Ok(())
    }
}

/// Pin position and accumulated lithographic trim.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuningState {
    /// Pin to resonator separation (m).
    pub d: f64,
    /// Coarse-trim frequency offset (Hz), non-positive for added capacitance.
    pub trim_shift: f64,
}

impl TuningState {
    pub fn at(d: f64) -> Self {
        Self { d, trim_shift: 0.0 }
    }

    pub fn validate(&self, pin: &PinCouplingModel) -> Result<(), ModelError> {
        if !self.d.is_finite() || self.d < pin.d_min {
            return Err(ModelError::BelowMinimumDistance { d: self.d, d_min: pin.d_min });
        }
        Ok(())
    }

    /// Applies a coarse trim of the given effective finger-length increase.
    pub fn apply_trim(&mut self, finger_length_increase_um: f64) -> Result<f64, ModelError> {
        let shift = coarse_trim(finger_length_increase_um)?;
        self.trim_shift += shift;
        Ok(shift)
    }
}

/// `1 / (2π √(LC))`.
pub fn resonance_frequency(l: f64, c: f64) -> Result<f64, ModelError> {
    require_positive("inductance", l)?;
    require_positive("capacitance", c)?;
    Ok(1.0 / (TAU * (l * c).sqrt()))
}

/// Effective inductance `L0 (1 - M²/L0²)` of a coil screened by image currents.
pub fn screened_inductance(l0: f64, m: f64) -> Result<f64, ModelError> {
    require_positive("l0", l0)?;
    if !(m.abs() < l0) {
        return Err(ModelError::ScreeningTooStrong { m, l0 });
    }
    let ratio = m / l0;
    Ok(l0 * (1.0 - ratio * ratio))
}

/// Coupling ratio `M/L0` at pin height `d`.
pub fn mutual_inductance(d: f64, model: &PinCouplingModel) -> Result<f64, ModelError> {
    if !d.is_finite() && d > 0.0 {
        return Ok(0.0);
    }
    if !(d >= model.d_min) {
        return Err(ModelError::BelowMinimumDistance { d, d_min: model.d_min });
    }
    Ok(model.m_max * (-(d - model.d_min) / model.lambda).exp())
}

/// Linear capacitive trim: −0.8 MHz per μm of added finger length.
pub fn coarse_trim(finger_length_increase_um: f64) -> Result<f64, ModelError> {
    if !(finger_length_increase_um >= 0.0) {
        return Err(ModelError::NegativeTrim(finger_length_increase_um));
    }
    Ok(TRIM_HZ_PER_UM * finger_length_increase_um)
}

/// Trimmed but un-screened frequency, i.e. the pin-at-infinity baseline.
pub fn baseline_frequency(params: &ResonatorParams, state: &TuningState) -> Result<f64, ModelError> {
    Ok(resonance_frequency(params.l0, params.c)? + state.trim_shift)
}

/// Resonance frequency with the pin at `state.d`.
///
/// The trim offset shifts the un-screened baseline; screening then scales the
/// trimmed baseline by `√(L0 / L)`, which is exact (no small-coupling expansion).
pub fn tuned_frequency(
    params: &ResonatorParams,
    state: &TuningState,
    pin: &PinCouplingModel,
) -> Result<f64, ModelError> {
    params.validate()?;
    let base = baseline_frequency(params, state)?;
    require_positive("trimmed baseline frequency", base)?;
    let m = mutual_inductance(state.d, pin)?;
    let l = screened_inductance(params.l0, m * params.l0)?;
    Ok(base * (params.l0 / l).sqrt())
}

/// Analytic `df/dd` (Hz/m) of the tuned frequency; negative since the
/// frequency falls as the pin retracts.
pub fn tuning_slope(
    params: &ResonatorParams,
    state: &TuningState,
    pin: &PinCouplingModel,
) -> Result<f64, ModelError> {
    let base = baseline_frequency(params, state)?;
    let m = mutual_inductance(state.d, pin)?;
    let m2 = m * m;
    Ok(-base * m2 / ((1.0 - m2).powf(1.5) * pin.lambda))
}

/// Lowest and highest frequency the pin can reach: `(f(∞), f(d_min))`.
pub fn tuning_band(
    params: &ResonatorParams,
    trim_shift: f64,
    pin: &PinCouplingModel,
) -> Result<(f64, f64), ModelError> {
    let state = TuningState { d: pin.d_min, trim_shift };
    let low = baseline_frequency(params, &state)?;
    let high = tuned_frequency(params, &state, pin)?;
    Ok((low, high))
}

/// Measured anchors that pin down the coupling model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationAnchors {
    /// Resonance with the pin far away (Hz).
    pub f_baseline: f64,
    /// Resonance at the closest approach (Hz).
    pub f_closest: f64,
    /// Closest pin height (m).
    pub d_min: f64,
    /// `|df/dd|` at the closest approach (Hz/m).
    pub peak_sensitivity: f64,
}

/// Solves the coupling model so that it reproduces the anchor shift and slope
/// at `d_min` exactly.
///
/// With `f(d) = f_b / √(1 - m²)` the peak coupling follows from the frequency
/// ratio, and the slope `|df/dd| = f_b m² / ((1 - m²)^{3/2} λ)` then fixes λ.
/// To first order this reduces to `m_max² = 2Δf/f_b`, `λ = 2Δf / S`.
pub fn calibrate_pin_model(anchors: &CalibrationAnchors) -> Result<PinCouplingModel, ModelError> {
    let CalibrationAnchors { f_baseline, f_closest, d_min, peak_sensitivity } = *anchors;
    for (name, v) in [
        ("f_baseline", f_baseline),
        ("f_closest", f_closest),
        ("d_min", d_min),
        ("peak_sensitivity", peak_sensitivity),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(ModelError::Calibration(format!("{name} must be positive, got {v}")));
        }
    }
    if f_closest < f_baseline {
        return Err(ModelError::Calibration(format!(
            "closest-approach frequency {f_closest} Hz is below the baseline {f_baseline} Hz"
        )));
    }
    let ratio = f_baseline / f_closest;
    let m2 = 1.0 - ratio * ratio;
    let m_max = m2.sqrt();
    if m_max >= 1.0 {
        return Err(ModelError::Calibration(format!("implied m_max = {m_max} is not below 1")));
    }
    if m2 == 0.0 {
        // no shift: the decay length is unconstrained
        return Ok(PinCouplingModel { m_max: 0.0, lambda: d_min, d_min });
    }
    let lambda = f_baseline * m2 / ((1.0 - m2).powf(1.5) * peak_sensitivity);
    PinCouplingModel::new(m_max, lambda, d_min)
}

/// Relative mismatch of a model against its anchors: `(shift, slope)`.
pub fn calibration_residuals(
    model: &PinCouplingModel,
    anchors: &CalibrationAnchors,
) -> Result<(f64, f64), ModelError> {
    let params = ResonatorParams::from_frequency(1e-9, anchors.f_baseline, 1.0, 1.0, 0.0)?;
    let state = TuningState::at(anchors.d_min);
    let shift = tuned_frequency(&params, &state, model)? - anchors.f_baseline;
    let want_shift = anchors.f_closest - anchors.f_baseline;
    let slope = tuning_slope(&params, &state, model)?.abs();
    let rel = |got: f64, want: f64| if want == 0.0 { got.abs() } else { (got - want).abs() / want };
    Ok((rel(shift, want_shift), rel(slope, anchors.peak_sensitivity)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::units::*;
    use proptest::prelude::*;

    fn measured_anchors() -> CalibrationAnchors {
        CalibrationAnchors {
            f_baseline: 6.8278 * GHZ,
            f_closest: 6.8454 * GHZ,
            d_min: 40.0 * UM,
            peak_sensitivity: 8.7 * KHZ / (60.0 * NM),
        }
    }

    fn plant() -> (ResonatorParams, PinCouplingModel) {
        let params = ResonatorParams::from_frequency(NH, 6.8278 * GHZ, 35_000.0, 5e5, 0.0).unwrap();
        (params, calibrate_pin_model(&measured_anchors()).unwrap())
    }

    // independent oracle: C = 1 / ((2πf)² L)
    fn capacitance_for(f: f64, l: f64) -> f64 {
        1.0 / ((TAU * f).powi(2) * l)
    }

    #[test]
    fn frequency_from_pre_and_post_trim_capacitance() {
        assert!((capacitance_for(6.8637 * GHZ, NH) / PF - 0.53770).abs() < 5e-5);
        assert!((capacitance_for(6.8278 * GHZ, NH) / PF - 0.54337).abs() < 5e-5);
        let f = resonance_frequency(NH, 0.53770 * PF).unwrap();
        assert!((f / (6.8637 * GHZ) - 1.0).abs() < 1e-4);
        let f = resonance_frequency(NH, 0.54337 * PF).unwrap();
        assert!((f / (6.8278 * GHZ) - 1.0).abs() < 1e-4);
    }

    #[test]
    fn quadrupled_inductance_halves_frequency() {
        let f1 = resonance_frequency(NH, 0.5 * PF).unwrap();
        let f4 = resonance_frequency(4.0 * NH, 0.5 * PF).unwrap();
        assert!((f4 * 2.0 / f1 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn non_positive_lc_rejected() {
        assert!(resonance_frequency(0.0, PF).is_err());
        assert!(resonance_frequency(NH, -1.0).is_err());
        assert!(resonance_frequency(f64::NAN, PF).is_err());
    }

    #[test]
    fn screening_examples() {
        assert_eq!(screened_inductance(NH, 0.0).unwrap(), NH);
        assert!((screened_inductance(NH, 0.1 * NH).unwrap() / NH - 0.99).abs() < 1e-15);
        assert!(screened_inductance(NH, NH).is_err());
        assert!(screened_inductance(NH, -1.5 * NH).is_err());
    }

    #[test]
    fn screening_shift_from_baseline() {
        let l = screened_inductance(NH, 0.0718 * NH).unwrap();
        assert!((1.0 - l / NH - 5.155e-3).abs() < 1e-5);
        let c = capacitance_for(6.8278 * GHZ, NH);
        let exact = resonance_frequency(l, c).unwrap() - 6.8278 * GHZ;
        let first_order = 6.8278 * GHZ * 0.0718f64.powi(2) / 2.0;
        assert!((exact - 17.6 * MHZ).abs() < 0.1 * MHZ, "exact shift {exact}");
        assert!((exact - first_order).abs() / first_order < 5e-3);
    }

    #[test]
    fn coupling_profile() {
        let pin = PinCouplingModel::new(0.07, 240.0 * UM, 40.0 * UM).unwrap();
        assert_eq!(mutual_inductance(pin.d_min, &pin).unwrap(), 0.07);
        let m = mutual_inductance(pin.d_min + pin.lambda, &pin).unwrap();
        assert!((m - 0.07 / std::f64::consts::E).abs() < 1e-15);
        assert!(mutual_inductance(1.0, &pin).unwrap() < 1e-100);
        assert!(matches!(
            mutual_inductance(39.0 * UM, &pin),
            Err(ModelError::BelowMinimumDistance { .. })
        ));
    }

    #[test]
    fn invalid_model_types_rejected() {
        assert!(PinCouplingModel::new(1.0, 1e-4, 1e-5).is_err());
        assert!(PinCouplingModel::new(-0.1, 1e-4, 1e-5).is_err());
        assert!(PinCouplingModel::new(0.1, 0.0, 1e-5).is_err());
        assert!(ResonatorParams::new(NH, PF, 1e4, 1e5, 1.6).is_err());
        assert!(ResonatorParams::new(NH, PF, 0.0, 1e5, 0.0).is_err());
    }

    /// Bisection on the exact model: find the m at which f_b/√(1-m²) hits f_c,
    /// then find λ so that a central-difference slope at d_min matches.
    fn calibrate_by_root_finding(a: &CalibrationAnchors) -> (f64, f64) {
        let bisect = |mut lo: f64, mut hi: f64, g: &dyn Fn(f64) -> f64| {
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if g(lo).signum() == g(mid).signum() {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        };
        let m_max = bisect(0.0, 0.999, &|m: f64| a.f_baseline / (1.0 - m * m).sqrt() - a.f_closest);
        let slope_err = |lambda: f64| {
            let f = |d: f64| {
                let m = m_max * (-(d - a.d_min) / lambda).exp();
                a.f_baseline / (1.0 - m * m).sqrt()
            };
            let h = 1e-9;
            (f(a.d_min - h) - f(a.d_min + h)) / (2.0 * h) - a.peak_sensitivity
        };
        let lambda = bisect(1e-6, 1e-2, &slope_err);
        (m_max, lambda)
    }

    #[test]
    fn calibration_matches_root_finding_oracle() {
        let a = measured_anchors();
        let model = calibrate_pin_model(&a).unwrap();
        let (m_oracle, lambda_oracle) = calibrate_by_root_finding(&a);
        assert!((model.m_max / m_oracle - 1.0).abs() < 1e-9);
        assert!((model.lambda / lambda_oracle - 1.0).abs() < 1e-5);
        assert!((model.m_max - 0.072).abs() < 0.001, "m_max {}", model.m_max);
        assert!((model.lambda - 2.4e-4).abs() < 0.05e-4, "lambda {}", model.lambda);
        let first_order = 2.0 * (a.f_closest - a.f_baseline) / a.peak_sensitivity;
        assert!((model.lambda / first_order - 1.0).abs() < 0.02);
    }

    #[test]
    fn calibration_round_trip_residuals() {
        let a = measured_anchors();
        let model = calibrate_pin_model(&a).unwrap();
        let (shift, slope) = calibration_residuals(&model, &a).unwrap();
        assert!(shift < 1e-6, "{shift}");
        assert!(slope < 1e-3, "{slope}");
    }

    #[test]
    fn calibration_edge_cases() {
        let mut a = measured_anchors();
        a.f_closest = a.f_baseline;
        assert_eq!(calibrate_pin_model(&a).unwrap().m_max, 0.0);
        let mut b = measured_anchors();
        b.f_closest = 6.8 * GHZ;
        assert!(matches!(calibrate_pin_model(&b), Err(ModelError::Calibration(_))));
        let mut c = measured_anchors();
        c.peak_sensitivity = 0.0;
        assert!(calibrate_pin_model(&c).is_err());
    }

    #[test]
    fn flat_tail_at_600_um() {
        let (params, pin) = plant();
        let f_inf = params.base_frequency();
        let range = tuned_frequency(&params, &TuningState::at(pin.d_min), &pin).unwrap() - f_inf;
        let tail = tuned_frequency(&params, &TuningState::at(600.0 * UM), &pin).unwrap() - f_inf;
        assert!(tail / range < 0.02, "residual {}", tail / range);
    }

    #[test]
    fn tuned_frequency_examples() {
        let (params, pin) = plant();
        let far = tuned_frequency(&params, &TuningState::at(1.0), &pin).unwrap();
        assert!((far / (6.8278 * GHZ) - 1.0).abs() < 1e-12);
        let inf = tuned_frequency(&params, &TuningState::at(f64::INFINITY), &pin).unwrap();
        assert_eq!(inf, params.base_frequency());
        let close = tuned_frequency(&params, &TuningState::at(40.0 * UM), &pin).unwrap();
        assert!((close / (6.8454 * GHZ) - 1.0).abs() < 1e-3);
        assert!(((close - far) - 17.6 * MHZ).abs() < 0.01 * 17.6 * MHZ);
    }

    #[test]
    fn tuned_frequency_monotone_on_grid() {
        let (params, pin) = plant();
        let mut prev = f64::INFINITY;
        for i in 0..1000 {
            let d = pin.d_min + (1e-3 - pin.d_min) * i as f64 / 999.0;
            let f = tuned_frequency(&params, &TuningState::at(d), &pin).unwrap();
            assert!(f < prev, "not decreasing at d = {d}");
            assert!(f >= params.base_frequency());
            prev = f;
        }
    }

    #[test]
    fn trim_shifts_baseline() {
        assert_eq!(coarse_trim(100.0).unwrap(), -80.0 * MHZ);
        assert_eq!(coarse_trim(0.0).unwrap(), 0.0);
        assert!((coarse_trim(44.9).unwrap() + 35.9 * MHZ).abs() < 0.05 * MHZ);
        assert!(coarse_trim(-1.0).is_err());

        let params = ResonatorParams::new(NH, 0.53770 * PF, 35_000.0, 5e5, 0.0).unwrap();
        let mut state = TuningState::at(1.0);
        let shift = state.apply_trim(44.9).unwrap();
        assert_eq!(state.trim_shift, shift);
        let pin = calibrate_pin_model(&measured_anchors()).unwrap();
        let f = tuned_frequency(&params, &state, &pin).unwrap();
        let bare = 1.0 / (2.0 * std::f64::consts::PI * (NH * 0.53770 * PF).sqrt());
        assert!((f - (bare + shift)).abs() < 1e-3);
        assert!((f - 6.8278 * GHZ).abs() < 0.5 * MHZ);
    }

    #[test]
    fn analytic_slope_matches_finite_difference() {
        let (params, pin) = plant();
        for d_um in [41.0, 100.0, 250.0, 600.0] {
            let d = d_um * UM;
            let h = 1e-9;
            let f = |d| tuned_frequency(&params, &TuningState::at(d), &pin).unwrap();
            let fd = (f(d + h) - f(d - h)) / (2.0 * h);
            let an = tuning_slope(&params, &TuningState::at(d), &pin).unwrap();
            assert!((fd / an - 1.0).abs() < 1e-4, "d = {d_um} um: {fd} vs {an}");
        }
    }

    proptest! {
        #[test]
        fn screened_inductance_bounded(ratio in -0.999f64..0.999) {
            let l = screened_inductance(NH, ratio * NH).unwrap();
            prop_assert!(l > 0.0 && l <= NH);
            prop_assert_eq!(l == NH, ratio == 0.0);
        }

        #[test]
        fn frequency_inductance_consistency(l in 1e-12f64..1e-6, c in 1e-15f64..1e-9) {
            let f = resonance_frequency(l, c).unwrap();
            prop_assert!(((TAU * f).powi(2) * l * c - 1.0).abs() < 1e-14);
        }

        #[test]
        fn trim_is_additive(a in 0u32..200_000, b in 0u32..200_000) {
            // multiples of 1/1024 um keep both sums and products exact
            let (a, b) = (a as f64 / 1024.0, b as f64 / 1024.0);
            prop_assert_eq!(
                coarse_trim(a + b).unwrap(),
                coarse_trim(a).unwrap() + coarse_trim(b).unwrap()
            );
        }
    }
}
