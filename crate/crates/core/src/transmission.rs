//! Forward model of the measured transmission through the feed line.
//!
//! Covers the notch lineshape, quality-factor composition, synthetic VNA
//! sweeps (with additive noise and pin-vibration jitter), photon-number
//! bookkeeping and the power-dependent internal loss.

use std::f64::consts::TAU;
use std::sync::OnceLock;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::resonator::{self, ModelError, PinCouplingModel, ResonatorParams, TuningState};
use crate::units::{dbm_to_watts, HBAR};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TransmissionError {
    #[error("loaded Q {q_l} is not below external Q {q_e}; internal Q would be infinite or negative")]
    NonPhysicalQ { q_l: f64, q_e: f64 },
    #[error("{0} must be positive and finite")]
    NonPositive(&'static str),
    #[error("invalid sweep: {0}")]
    InvalidSweep(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// `|1 - (Q_L/Q_e) e^{iφ} / (1 + 2i Q_L (f - f_r)/f_r)|²`.
pub fn s21_power(f: f64, f_r: f64, q_l: f64, q_e: f64, phi: f64) -> f64 {
    let y = 2.0 * q_l * (f - f_r) / f_r;
    let g = Complex64::from_polar(q_l / q_e, phi) / Complex64::new(1.0, y);
    (Complex64::new(1.0, 0.0) - g).norm_sqr()
}

/// Harmonic composition `1/Q_L = 1/Q_i + 1/Q_e`.
pub fn loaded_q(q_i: f64, q_e: f64) -> f64 {
    1.0 / (1.0 / q_i + 1.0 / q_e)
}

/// Inverse of [`loaded_q`]; fails when the implied internal Q is not positive.
pub fn internal_q(q_l: f64, q_e: f64) -> Result<f64, TransmissionError> {
    if !(q_l > 0.0) || !(q_e > 0.0) {
        return Err(TransmissionError::NonPositive("quality factor"));
    }
    if q_l >= q_e {
        return Err(TransmissionError::NonPhysicalQ { q_l, q_e });
    }
    Ok(1.0 / (1.0 / q_l - 1.0 / q_e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub f_start: f64,
    pub f_stop: f64,
    pub n_points: usize,
    /// Power arriving at the resonator (dBm).
    pub p_in_dbm: f64,
    pub duration_s: f64,
    /// Session clock at the start of the sweep (s).
    #[serde(default)]
    pub start_time_s: f64,
}

impl SweepConfig {
    pub fn centered(center: f64, span: f64, n_points: usize, p_in_dbm: f64) -> Self {
        Self {
            f_start: center - 0.5 * span,
            f_stop: center + 0.5 * span,
            n_points,
            p_in_dbm,
            duration_s: 160.0,
            start_time_s: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), TransmissionError> {
        if !(self.f_start.is_finite() && self.f_stop.is_finite() && self.f_start < self.f_stop) {
            return Err(TransmissionError::InvalidSweep(format!(
                "f_start ({}) must be below f_stop ({})",
                self.f_start, self.f_stop
            )));
        }
        if self.f_start <= 0.0 {
            return Err(TransmissionError::InvalidSweep("f_start must be positive".into()));
        }
        if self.n_points < 2 {
            return Err(TransmissionError::InvalidSweep(format!(
                "n_points must be at least 2, got {}",
                self.n_points
            )));
        }
        if !(self.duration_s > 0.0) {
            return Err(TransmissionError::InvalidSweep("duration_s must be positive".into()));
        }
        Ok(())
    }

    pub fn frequencies(&self) -> Vec<f64> {
        let step = (self.f_stop - self.f_start) / (self.n_points - 1) as f64;
        (0..self.n_points)
            .map(|i| if i + 1 == self.n_points { self.f_stop } else { self.f_start + step * i as f64 })
            .collect()
    }
}

/// A transmission sweep, measured or synthesized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTrace {
    pub frequencies: Vec<f64>,
    /// `P_out / P_in` per point.
    pub power_ratio: Vec<f64>,
    pub p_in_dbm: f64,
    pub timestamp: f64,
}

impl SweepTrace {
    pub fn new(
        frequencies: Vec<f64>,
        power_ratio: Vec<f64>,
        p_in_dbm: f64,
        timestamp: f64,
    ) -> Result<Self, TransmissionError> {
        let t = Self { frequencies, power_ratio, p_in_dbm, timestamp };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), TransmissionError> {
        if self.frequencies.len() != self.power_ratio.len() {
            return Err(TransmissionError::InvalidSweep(format!(
                "{} frequencies but {} power ratios",
                self.frequencies.len(),
                self.power_ratio.len()
            )));
        }
        if self.frequencies.iter().any(|f| !f.is_finite()) {
            return Err(TransmissionError::InvalidSweep("non-finite frequency".into()));
        }
        if let Some(i) = self.frequencies.windows(2).position(|w| !(w[0] < w[1])) {
            return Err(TransmissionError::InvalidSweep(format!(
                "frequencies not strictly increasing at index {}",
                i + 1
            )));
        }
        if let Some(i) = self.power_ratio.iter().position(|p| !(*p >= 0.0 && p.is_finite())) {
            return Err(TransmissionError::InvalidSweep(format!(
                "power ratio at index {i} is negative or non-finite"
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frequencies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frequencies.is_empty()
    }

    pub fn span(&self) -> (f64, f64) {
        (self.frequencies[0], self.frequencies[self.len() - 1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Standard deviation of the relative Gaussian error on each power ratio.
    pub sigma_rel: f64,
    /// Amplitude of the mechanical pin vibration (m).
    pub vib_amplitude: f64,
    /// Vibration phases averaged into each point. A point's dwell spans many
    /// vibration cycles, so the analyzer reports the mean over the phases;
    /// 1 gives a single instantaneous draw per point.
    #[serde(default = "default_vib_samples")]
    pub vib_samples: usize,
    pub seed: u64,
}

pub const DEFAULT_VIB_SAMPLES: usize = 64;

fn default_vib_samples() -> usize {
    DEFAULT_VIB_SAMPLES
}

impl NoiseModel {
    pub const NONE: NoiseModel =
        NoiseModel { sigma_rel: 0.0, vib_amplitude: 0.0, vib_samples: DEFAULT_VIB_SAMPLES, seed: 0 };

    pub fn validate(&self) -> Result<(), TransmissionError> {
        if !(self.sigma_rel >= 0.0 && self.sigma_rel.is_finite()) {
            return Err(TransmissionError::NonPositive("sigma_rel"));
        }
        if !(self.vib_amplitude >= 0.0 && self.vib_amplitude.is_finite()) {
            return Err(TransmissionError::NonPositive("vib_amplitude"));
        }
        if self.vib_samples == 0 {
            return Err(TransmissionError::NonPositive("vib_samples"));
        }
        Ok(())
    }
}

/// Mixes a seed and a counter into an independent 64-bit stream key
/// (SplitMix64 finalizer).
pub(crate) fn stream_key(seed: u64, counter: u64) -> u64 {
    let mut z = seed ^ counter.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Synthesizes a VNA sweep of the tuned resonator.
///
/// Each point sees the resonance displaced by `A sin(2πu)` with `u` uniform,
/// i.e. an arcsine-distributed offset whose amplitude `A` is the local tuning
/// slope times the vibration amplitude. The point averages the lineshape over
/// `vib_samples` stratified phases `u_k = (k + r) / K` with a random `r`.
/// Relative Gaussian noise is then applied to the power ratio. Draws are keyed on `(seed, point index)`, so
/// the result does not depend on evaluation order.
pub fn synthesize_sweep(
    config: &SweepConfig,
    params: &ResonatorParams,
    state: &TuningState,
    pin: &PinCouplingModel,
    noise: &NoiseModel,
) -> Result<SweepTrace, TransmissionError> {
    config.validate()?;
    noise.validate()?;
    params.validate()?;
    state.validate(pin)?;
    let f_r = resonator::tuned_frequency(params, state, pin)?;
    let jitter = if noise.vib_amplitude > 0.0 {
        resonator::tuning_slope(params, state, pin)?.abs() * noise.vib_amplitude
    } else {
        0.0
    };
    let q_l = loaded_q(params.qi0, params.qe);

    let frequencies = config.frequencies();
    let power_ratio = frequencies
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_key(noise.seed, i as u64));
            let phase: f64 = rng.random();
            let gauss: f64 = rng.sample(StandardNormal);
            let clean = if jitter > 0.0 {
                let k = noise.vib_samples as f64;
                (0..noise.vib_samples)
                    .map(|j| {
                        let u = (j as f64 + phase) / k;
                        s21_power(f, f_r + jitter * (TAU * u).sin(), q_l, params.qe, params.phi)
                    })
                    .sum::<f64>()
                    / k
            } else {
                s21_power(f, f_r, q_l, params.qe, params.phi)
            };
            if noise.sigma_rel > 0.0 {
                (clean * (1.0 + noise.sigma_rel * gauss)).max(0.0)
            } else {
                clean
            }
        })
        .collect();

    Ok(SweepTrace {
        frequencies,
        power_ratio,
        p_in_dbm: config.p_in_dbm,
        timestamp: config.start_time_s,
    })
}

/// Power at the resonator after a chain of cold attenuators.
pub fn input_chain_power(source_dbm: f64, attenuators_db: &[f64]) -> f64 {
    source_dbm - attenuators_db.iter().sum::<f64>()
}

/// Calibration point of the photon-number scale: −131 dBm at the resonator
/// with these parameters holds 11 photons on average.
pub const PHOTON_ANCHOR: PhotonAnchor = PhotonAnchor {
    p_in_dbm: -131.0,
    f_r: 6.828e9,
    q_l: 32_710.0,
    q_e: 5e5,
    photons: 11.0,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhotonAnchor {
    pub p_in_dbm: f64,
    pub f_r: f64,
    pub q_l: f64,
    pub q_e: f64,
    pub photons: f64,
}

fn stored_energy_factor(p_in_dbm: f64, f_r: f64, q_l: f64, q_e: f64) -> f64 {
    let omega = TAU * f_r;
    q_l * q_l / q_e * dbm_to_watts(p_in_dbm) / (HBAR * omega * omega)
}

/// Dimensionless prefactor that places the photon anchor exactly.
pub fn default_kappa() -> f64 {
    static KAPPA: OnceLock<f64> = OnceLock::new();
    *KAPPA.get_or_init(|| {
        let a = PHOTON_ANCHOR;
        a.photons / stored_energy_factor(a.p_in_dbm, a.f_r, a.q_l, a.q_e)
    })
}

/// Mean intracavity photon number `κ (Q_L²/Q_e) P / (ħ ω_r²)`.
pub fn photon_number(p_in_dbm: f64, f_r: f64, q_l: f64, q_e: f64, kappa: f64) -> f64 {
    kappa * stored_energy_factor(p_in_dbm, f_r, q_l, q_e)
}

/// Saturable two-level-system loss on top of a power-independent residual.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TlsLossModel {
    /// TLS-limited internal Q at vanishing power.
    pub q_tls_low: f64,
    pub p_sat_dbm: f64,
    /// Power-independent internal Q.
    pub q_other: f64,
}

impl TlsLossModel {
    pub fn validate(&self) -> Result<(), TransmissionError> {
        if !(self.q_tls_low > 0.0 && self.q_tls_low.is_finite()) {
            return Err(TransmissionError::NonPositive("q_tls_low"));
        }
        if !(self.q_other > 0.0 && self.q_other.is_finite()) {
            return Err(TransmissionError::NonPositive("q_other"));
        }
        if !self.p_sat_dbm.is_finite() {
            return Err(TransmissionError::NonPositive("p_sat_dbm"));
        }
        Ok(())
    }
}

impl Default for TlsLossModel {
    /// Low-power internal Q of 35 000.
    fn default() -> Self {
        Self { q_tls_low: 40_000.0, p_sat_dbm: -125.0, q_other: 280_000.0 }
    }
}

/// `1/Q_i = 1/(q_tls_low √(1 + P/P_sat)) + 1/q_other`.
pub fn power_dependent_qi(p_in_dbm: f64, tls: &TlsLossModel) -> f64 {
    let saturation = dbm_to_watts(p_in_dbm) / dbm_to_watts(tls.p_sat_dbm);
    let tls_loss = 1.0 / (tls.q_tls_low * (1.0 + saturation).sqrt());
    1.0 / (tls_loss + 1.0 / tls.q_other)
}

/// Linewidth `f_r / Q_L` (Hz).
pub fn linewidth(f_r: f64, q_l: f64) -> f64 {
    f_r / q_l
}
