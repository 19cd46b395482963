//! Drift and vibration metrics on resonance-frequency time series.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::{num_complex::Complex64, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::units::SECONDS_PER_HOUR;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StabilityError {
    #[error("invalid series: {0}")]
    InvalidSeries(String),
    #[error("no oscillation above the noise floor")]
    NoOscillation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyTimeSeries {
    pub timestamps: Vec<f64>,
    pub f_r: Vec<f64>,
    /// Reference frequency for fractional quantities (Hz).
    pub f0: f64,
}

impl FrequencyTimeSeries {
    pub fn new(timestamps: Vec<f64>, f_r: Vec<f64>, f0: f64) -> Result<Self, StabilityError> {
        let s = Self { timestamps, f_r, f0 };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), StabilityError> {
        if self.timestamps.len() != self.f_r.len() {
            return Err(StabilityError::InvalidSeries(format!(
                "{} timestamps but {} frequencies",
                self.timestamps.len(),
                self.f_r.len()
            )));
        }
        if let Some(i) = self.timestamps.windows(2).position(|w| !(w[0] < w[1])) {
            return Err(StabilityError::InvalidSeries(format!(
                "timestamps not strictly increasing at index {}",
                i + 1
            )));
        }
        if self.f_r.iter().chain(&self.timestamps).any(|v| !v.is_finite()) {
            return Err(StabilityError::InvalidSeries("non-finite value".into()));
        }
        if !(self.f0 > 0.0 && self.f0.is_finite()) {
            return Err(StabilityError::InvalidSeries("reference f0 must be positive".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.f_r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f_r.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftRate {
    pub slope_hz_per_hour: f64,
    pub ppb_per_hour: f64,
}

/// Ordinary least-squares slope of `f_r` against time.
pub fn drift_rate(series: &FrequencyTimeSeries) -> Result<DriftRate, StabilityError> {
    series.validate()?;
    let n = series.len();
    if n < 3 {
        return Err(StabilityError::InvalidSeries(format!("need at least 3 samples, got {n}")));
    }
    let t_mean = series.timestamps.iter().sum::<f64>() / n as f64;
    let f_mean = series.f_r.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (t, f) in series.timestamps.iter().zip(&series.f_r) {
        let dt = t - t_mean;
        sxy += dt * (f - f_mean);
        sxx += dt * dt;
    }
    if !(sxx > 0.0) {
        return Err(StabilityError::InvalidSeries("degenerate time span".into()));
    }
    let slope_hz_per_hour = sxy / sxx * SECONDS_PER_HOUR;
    Ok(DriftRate { slope_hz_per_hour, ppb_per_hour: slope_hz_per_hour / series.f0 * 1e9 })
}

pub fn peak_to_peak_deviation(series: &FrequencyTimeSeries) -> Result<f64, StabilityError> {
    if series.is_empty() {
        return Err(StabilityError::InvalidSeries("empty series".into()));
    }
    let max = series.f_r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = series.f_r.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(max - min)
}

/// Overlapping Allan deviation of the fractional frequency `f_r/f0 - 1` at
/// averaging factors `m` (tau = m × sample interval). Assumes uniform
/// sampling; factors with fewer than two usable pairs are skipped.
pub fn allan_deviation(series: &FrequencyTimeSeries, factors: &[usize]) -> Vec<(f64, f64)> {
    let n = series.len();
    if n < 3 {
        return Vec::new();
    }
    let dt = (series.timestamps[n - 1] - series.timestamps[0]) / (n - 1) as f64;
    let y: Vec<f64> = series.f_r.iter().map(|f| f / series.f0 - 1.0).collect();
    let mut prefix = vec![0.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + y[i];
    }
    factors
        .iter()
        .filter(|&&m| m > 0 && 2 * m < n)
        .map(|&m| {
            let mean = |i: usize| (prefix[i + m] - prefix[i]) / m as f64;
            let pairs = n - 2 * m + 1;
            let sum: f64 = (0..pairs).map(|i| (mean(i + m) - mean(i)).powi(2)).sum();
            (m as f64 * dt, (sum / (2.0 * pairs as f64)).sqrt())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Oscillation {
    /// Modulation frequency (Hz).
    pub frequency: f64,
    /// Amplitude in the units of the input samples.
    pub amplitude: f64,
    /// Peak periodogram power over the estimated noise level.
    pub snr: f64,
}

fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (TAU * i as f64 / n as f64).cos()).collect()
}

/// Least-squares sinusoid amplitude at a fixed frequency, with the mean removed.
fn sine_fit(x: &[f64], rate: f64, nu: f64) -> (f64, f64) {
    let n = x.len() as f64;
    let (mut scc, mut sss, mut scs, mut sxc, mut sxs) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let (mut sc, mut ss) = (0.0, 0.0);
    let mean = x.iter().sum::<f64>() / n;
    for (i, &v) in x.iter().enumerate() {
        let ph = TAU * nu * i as f64 / rate;
        let (s, c) = ph.sin_cos();
        let v = v - mean;
        scc += c * c;
        sss += s * s;
        scs += c * s;
        sxc += v * c;
        sxs += v * s;
        sc += c;
        ss += s;
    }
    // remove the mean from the regressors as well
    scc -= sc * sc / n;
    sss -= ss * ss / n;
    scs -= sc * ss / n;
    let det = scc * sss - scs * scs;
    if det.abs() < 1e-300 {
        return (0.0, 0.0);
    }
    let a = (sxc * sss - sxs * scs) / det;
    let b = (sxs * scc - sxc * scs) / det;
    let amp = a.hypot(b);
    let resid: f64 = x
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ph = TAU * nu * i as f64 / rate;
            let r = v - mean - a * ph.cos() - b * ph.sin();
            r * r
        })
        .sum();
    (amp, resid)
}

/// Finds the dominant periodic modulation in uniformly sampled data.
///
/// A Hann-windowed periodogram locates the strongest non-DC peak; it counts
/// as an oscillation only if it clears the exponential-distribution
/// false-alarm level of the periodogram noise. Frequency and amplitude are
/// then refined by a least-squares sinusoid fit around the peak bin.
pub fn detect_oscillation(samples: &[f64], sample_rate: f64) -> Result<Oscillation, StabilityError> {
    let n = samples.len();
    if n < 64 {
        return Err(StabilityError::InvalidSeries(format!("need at least 64 samples, got {n}")));
    }
    if !(sample_rate > 0.0) || samples.iter().any(|v| !v.is_finite()) {
        return Err(StabilityError::InvalidSeries("sample rate and samples must be finite".into()));
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let window = hann(n);
    let mut buf: Vec<Complex64> = samples
        .iter()
        .zip(&window)
        .map(|(v, w)| Complex64::new((v - mean) * w, 0.0))
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let half = n / 2;
    let power: Vec<f64> = buf[..=half].iter().map(|c| c.norm_sqr()).collect();

    // skip DC and its window leakage
    let first = 2;
    let (peak, &peak_power) = power[first..]
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, p)| (i + first, p))
        .expect("at least one bin");
    let mut rest: Vec<f64> = power[first..]
        .iter()
        .enumerate()
        .filter(|(i, _)| (*i + first).abs_diff(peak) > 3)
        .map(|(_, p)| *p)
        .collect();
    rest.sort_by(f64::total_cmp);
    let noise_mean = rest[rest.len() / 2] / std::f64::consts::LN_2;
    let bins = (half - first + 1) as f64;
    let threshold = noise_mean * (bins.ln() + 12.0);
    let snr = if noise_mean > 0.0 { peak_power / noise_mean } else { f64::INFINITY };
    if !(peak_power > threshold) || peak_power == 0.0 {
        return Err(StabilityError::NoOscillation);
    }

    // golden-section search on the residual of a sinusoid fit within ±1 bin
    let df = sample_rate / n as f64;
    let (mut a, mut b) = ((peak as f64 - 1.0) * df, (peak as f64 + 1.0) * df);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let cost = |nu: f64| sine_fit(samples, sample_rate, nu).1;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (cost(c), cost(d));
    for _ in 0..60 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = cost(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = cost(d);
        }
    }
    let frequency = 0.5 * (a + b);
    let (amplitude, _) = sine_fit(samples, sample_rate, frequency);
    Ok(Oscillation { frequency, amplitude, snr })
}

/// Detects an oscillation in repeated `|S21|²` samples taken at a fixed probe
/// frequency and reports it as resonance-frequency jitter.
///
/// Each sample is mapped back to the resonance frequency that would produce
/// it, searching on the side of the probe where `f_r` lies. For small
/// excursions this is division by the local slope `|dP/df_r|`; the exact
/// inversion keeps jitter comparable to the linewidth from being
/// underestimated. The excursion must not carry the resonance across the
/// probe.
pub fn detect_s21_oscillation(
    samples: &[f64],
    sample_rate: f64,
    probe_f: f64,
    f_r: f64,
    q_l: f64,
    q_e: f64,
    phi: f64,
) -> Result<Oscillation, StabilityError> {
    if !(f_r > 0.0 && q_l > 0.0 && q_e > 0.0) || f_r == probe_f {
        return Err(StabilityError::InvalidSeries(
            "probe must be detuned from a valid resonance".into(),
        ));
    }
    let side = (f_r - probe_f).signum();
    let lw = f_r / q_l;
    let p = |t: f64| crate::transmission::s21_power(probe_f, probe_f + side * t * lw, q_l, q_e, phi);
    let t0 = (f_r - probe_f).abs() / lw;
    let (lo, hi) = (1e-6 * t0, 100.0 * t0.max(1.0));
    let rising = p(hi) > p(lo);
    let invert = |target: f64| {
        let (mut a, mut b) = (lo, hi);
        for _ in 0..100 {
            let m = 0.5 * (a + b);
            if (p(m) < target) == rising {
                a = m;
            } else {
                b = m;
            }
        }
        probe_f + side * 0.5 * (a + b) * lw
    };
    let resonance: Vec<f64> = samples.iter().map(|&v| invert(v)).collect();
    detect_oscillation(&resonance, sample_rate)
}

/// Generator for drift records: linear trend plus a random walk reflected
/// into `[-bound/2, bound/2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftGenerator {
    pub f0: f64,
    pub duration_s: f64,
    pub cadence_s: f64,
    pub linear_drift_hz: f64,
    pub walk_step_hz: f64,
    pub bound_hz: f64,
    pub seed: u64,
}

impl Default for DriftGenerator {
    /// 70 hours sampled every 2 minutes, wandering within 1 kHz.
    fn default() -> Self {
        Self {
            f0: 6.827_815e9,
            duration_s: 70.0 * SECONDS_PER_HOUR,
            cadence_s: 120.0,
            linear_drift_hz: 0.0,
            walk_step_hz: 20.0,
            bound_hz: 990.0,
            seed: 1,
        }
    }
}

impl DriftGenerator {
    pub fn generate(&self) -> FrequencyTimeSeries {
        let n = (self.duration_s / self.cadence_s).floor() as usize + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let half = 0.5 * self.bound_hz;
        let mut walk = 0.0f64;
        let mut t = Vec::with_capacity(n);
        let mut f = Vec::with_capacity(n);
        for i in 0..n {
            let ti = i as f64 * self.cadence_s;
            if i > 0 {
                let step: f64 = rng.sample(StandardNormal);
                walk += self.walk_step_hz * step;
                // reflect until inside
                while walk.abs() > half {
                    walk = walk.signum() * 2.0 * half - walk;
                }
            }
            t.push(ti);
            f.push(self.f0 + self.linear_drift_hz * ti / self.duration_s + walk);
        }
        FrequencyTimeSeries { timestamps: t, f_r: f, f0: self.f0 }
    }
}

/// Uniformly sampled sinusoidal modulation of `f0` with optional white noise.
pub fn modulated_series(
    f0: f64,
    n: usize,
    sample_rate: f64,
    amplitude: f64,
    frequency: f64,
    noise_sd: f64,
    seed: u64,
) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase: f64 = rng.random::<f64>() * TAU;
    (0..n)
        .map(|i| {
            let e: f64 = rng.sample(StandardNormal);
            f0 + amplitude * (TAU * frequency * i as f64 / sample_rate + phase).sin() + noise_sd * e
        })
        .collect()
}
