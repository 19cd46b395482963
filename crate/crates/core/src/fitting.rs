//! Resonance extraction by damped least squares on the notch lineshape.
//!
//! The optimizer works on `[u, ln Q_L, ln Q_e, φ]` where
//! `f_r = f_ref + u · f_scale`, with `f_ref` and `f_scale` taken from the
//! initial guess (dip position and linewidth). The log parameterization keeps
//! both quality factors positive without constraints, and the centered,
//! linewidth-scaled frequency keeps the normal equations well conditioned.

use std::f64::consts::FRAC_PI_2;

use nalgebra::{Matrix4, Vector4};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::transmission::{internal_q, s21_power, SweepTrace};

pub const MAX_ITERATIONS: usize = 200;
const STEP_TOLERANCE: f64 = 1e-8;
const COST_TOLERANCE: f64 = 1e-12;
const INITIAL_DAMPING: f64 = 1e-3;
const MAX_DAMPING: f64 = 1e16;
const MIN_POINTS: usize = 16;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FitError {
    #[error("no resonance found: {0}")]
    NoResonance(String),
    #[error("fit did not converge within {MAX_ITERATIONS} iterations")]
    ConvergenceFailure { best: Box<FitResult> },
    #[error("non-physical fit: Q_L = {:.6e} is not below Q_e = {:.6e}", best.q_l, best.q_e)]
    NonPhysicalFit { best: Box<FitResult> },
    #[error("invalid trace: {0}")]
    InvalidTrace(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitialGuess {
    pub f_r: f64,
    pub q_l: f64,
    pub q_e: f64,
    pub phi: f64,
    /// Set when the dip touches the edge of the sweep.
    #[serde(default)]
    pub low_confidence: bool,
}

/// One-sigma standard errors, assuming independent homoscedastic noise.
/// Indicative only.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamUncertainties {
    pub f_r: f64,
    pub q_l: f64,
    pub q_e: f64,
    pub q_i: f64,
    pub phi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub f_r: f64,
    pub q_l: f64,
    pub q_e: f64,
    /// NaN when `Q_L >= Q_e`.
    pub q_i: f64,
    pub phi: f64,
    pub param_uncertainties: ParamUncertainties,
    pub rms_residual: f64,
    pub initial_rms_residual: f64,
    pub n_iterations: usize,
    pub converged: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl FitResult {
    pub fn linewidth(&self) -> f64 {
        self.f_r / self.q_l
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v[((v.len() - 1) as f64 * q).round() as usize]
}

/// Point-to-point noise estimate from the MAD of first differences; the
/// differencing removes the smooth lineshape.
pub fn noise_floor(ratios: &[f64]) -> f64 {
    if ratios.len() < 3 {
        return 0.0;
    }
    let mut diffs: Vec<f64> = ratios.windows(2).map(|w| w[1] - w[0]).collect();
    let center = median(&mut diffs.clone());
    let mut dev: Vec<f64> = diffs.iter_mut().map(|d| (*d - center).abs()).collect();
    1.4826 * median(&mut dev) / std::f64::consts::SQRT_2
}

fn smoothed(ratios: &[f64]) -> Vec<f64> {
    if ratios.len() < 64 {
        return ratios.to_vec();
    }
    let n = ratios.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(2);
            let hi = (i + 2).min(n - 1);
            ratios[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

/// Contiguous index ranges where the trace sits below `level`.
/// Index ranges where `ratios` sits below `level`. Neighbouring ranges are
/// merged unless the trace climbs back above `recover` between them, so noise
/// around the crossing does not split one dip into several.
fn dips_below(ratios: &[f64], level: f64, recover: f64) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    let mut start = None;
    let mut recovered = true;
    for (i, &r) in ratios.iter().enumerate() {
        if r > recover {
            recovered = true;
        }
        match (r < level, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                match out.last_mut() {
                    Some(last) if !recovered => last.1 = i - 1,
                    _ => out.push((s, i - 1)),
                }
                start = None;
                recovered = false;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        match out.last_mut() {
            Some(last) if !recovered => last.1 = ratios.len() - 1,
            _ => out.push((s, ratios.len() - 1)),
        }
    }
    out
}

struct DipScan {
    guess: InitialGuess,
    /// Index window holding only the deepest dip.
    window: (usize, usize),
    warnings: Vec<String>,
}

fn interpolate_crossing(f: &[f64], r: &[f64], inside: usize, outside: usize, level: f64) -> f64 {
    let (r0, r1) = (r[inside], r[outside]);
    if r1 == r0 {
        return f[outside];
    }
    let t = ((level - r0) / (r1 - r0)).clamp(0.0, 1.0);
    f[inside] + t * (f[outside] - f[inside])
}

fn scan_dip(trace: &SweepTrace) -> Result<DipScan, FitError> {
    trace.validate().map_err(|e| FitError::InvalidTrace(e.to_string()))?;
    let n = trace.len();
    if n < MIN_POINTS {
        return Err(FitError::InvalidTrace(format!(
            "need at least {MIN_POINTS} points, got {n}"
        )));
    }
    let f = &trace.frequencies;
    let r = smoothed(&trace.power_ratio);
    let baseline = percentile(&trace.power_ratio, 0.9);
    let (i_min, &r_min) = r
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty trace");
    let depth = baseline - r_min;
    let sigma = noise_floor(&trace.power_ratio);
    if !(depth > 3.0 * sigma) || !(depth > 1e-12 * baseline.max(1e-300)) {
        return Err(FitError::NoResonance(format!(
            "dip depth {depth:.3e} does not exceed 3x the noise floor {sigma:.3e}"
        )));
    }
    let level = r_min + 0.5 * depth;

    let mut warnings = Vec::new();
    let dips = dips_below(&r, level, r_min + 0.8 * depth);
    let k = dips.iter().position(|&(a, b)| a <= i_min && i_min <= b).unwrap_or(0);
    let mut window = (0, n - 1);
    if dips.len() > 1 {
        warnings.push(format!(
            "{} dips found; fitting the deepest at {:.9e} Hz",
            dips.len(),
            f[i_min]
        ));
        if k > 0 {
            window.0 = (dips[k - 1].1 + dips[k].0) / 2;
        }
        if k + 1 < dips.len() {
            window.1 = (dips[k].1 + dips[k + 1].0) / 2;
        }
    }

    let (lo, hi) = dips[k];
    let left = (lo > window.0).then(|| interpolate_crossing(f, &r, lo, lo - 1, level));
    let right = (hi < window.1).then(|| interpolate_crossing(f, &r, hi, hi + 1, level));
    let f_r = f[i_min];
    let width = match (left, right) {
        (Some(a), Some(b)) => b - a,
        (Some(a), None) => 2.0 * (f_r - a),
        (None, Some(b)) => 2.0 * (b - f_r),
        (None, None) => f[window.1] - f[window.0],
    };
    let width = width.max(f[1] - f[0]);
    let low_confidence = i_min == 0 || i_min == n - 1 || left.is_none() || right.is_none();
    if low_confidence {
        warnings.push("dip touches the sweep edge; initial guess is low confidence".into());
    }

    let q_l = f_r / width;
    let rel_min = (r_min / baseline).clamp(0.0, 1.0);
    let q_e = q_l / (1.0 - rel_min.sqrt()).clamp(1e-9, 0.999);
    Ok(DipScan {
        guess: InitialGuess { f_r, q_l, q_e, phi: 0.0, low_confidence },
        window,
        warnings,
    })
}

/// Starting point for the optimizer from the deepest dip of the trace.
pub fn initial_guess(trace: &SweepTrace) -> Result<InitialGuess, FitError> {
    scan_dip(trace).map(|s| s.guess)
}

/// Parameter frame of the optimizer.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Frame {
    pub f_ref: f64,
    pub f_scale: f64,
}

impl Frame {
    pub fn unpack(self, p: &Vector4<f64>) -> (f64, f64, f64, f64) {
        (self.f_ref + p[0] * self.f_scale, p[1].exp(), p[2].exp(), p[3])
    }

    pub fn pack(self, f_r: f64, q_l: f64, q_e: f64, phi: f64) -> Vector4<f64> {
        Vector4::new((f_r - self.f_ref) / self.f_scale, q_l.ln(), q_e.ln(), phi)
    }
}

/// Model value and its gradient with respect to `[u, ln Q_L, ln Q_e, φ]`.
pub(crate) fn model_and_gradient(frame: Frame, p: &Vector4<f64>, f: f64) -> (f64, Vector4<f64>) {
    let (f_r, q_l, q_e, phi) = frame.unpack(p);
    let y = 2.0 * q_l * (f - f_r) / f_r;
    let denom = Complex64::new(1.0, y);
    let g = Complex64::from_polar(q_l / q_e, phi) / denom;
    let s = Complex64::new(1.0, 0.0) - g;
    let value = s.norm_sqr();

    // dg/dy = -i g / (1 + iy)
    let dg_dy = -Complex64::i() * g / denom;
    let dy_dfr = -2.0 * q_l * f / (f_r * f_r);
    let dg = [
        dg_dy * (dy_dfr * frame.f_scale),
        g + dg_dy * y,
        -g,
        Complex64::i() * g,
    ];
    // dP = -2 Re(conj(S) dg)
    let grad = Vector4::from_fn(|k, _| -2.0 * (s.conj() * dg[k]).re);
    (value, grad)
}

fn cost_at(frame: Frame, p: &Vector4<f64>, f: &[f64], data: &[f64]) -> f64 {
    let (f_r, q_l, q_e, phi) = frame.unpack(p);
    if !(f_r > 0.0 && q_l.is_finite() && q_e.is_finite() && phi.abs() < FRAC_PI_2) {
        return f64::INFINITY;
    }
    0.5 * f
        .iter()
        .zip(data)
        .map(|(&fi, &di)| {
            let r = s21_power(fi, f_r, q_l, q_e, phi) - di;
            r * r
        })
        .sum::<f64>()
}

fn normal_equations(frame: Frame, p: &Vector4<f64>, f: &[f64], data: &[f64]) -> (Matrix4<f64>, Vector4<f64>) {
    let mut jtj = Matrix4::zeros();
    let mut jtr = Vector4::zeros();
    for (&fi, &di) in f.iter().zip(data) {
        let (value, grad) = model_and_gradient(frame, p, fi);
        jtj += grad * grad.transpose();
        jtr += grad * (value - di);
    }
    (jtj, jtr)
}

/// Fits the notch lineshape to a trace. With `guess = None` the starting point
/// comes from [`initial_guess`].
pub fn fit_resonance(trace: &SweepTrace, guess: Option<InitialGuess>) -> Result<FitResult, FitError> {
    let scan = scan_dip(trace);
    let (guess, window, mut warnings) = match (guess, scan) {
        (Some(g), Ok(s)) => (g, s.window, s.warnings),
        (Some(g), Err(FitError::NoResonance(_))) => (g, (0, trace.len() - 1), Vec::new()),
        (_, Err(e)) => return Err(e),
        (None, Ok(s)) => (s.guess, s.window, s.warnings),
    };
    if !(guess.f_r > 0.0 && guess.q_l > 0.0 && guess.q_e > 0.0) {
        return Err(FitError::InvalidTrace("initial guess must have positive f_r, Q_L, Q_e".into()));
    }
    let f = &trace.frequencies[window.0..=window.1];
    let data = &trace.power_ratio[window.0..=window.1];
    let n = f.len();

    let frame = Frame { f_ref: guess.f_r, f_scale: guess.f_r / guess.q_l };
    let mut p = frame.pack(guess.f_r, guess.q_l, guess.q_e, guess.phi);
    let mut cost = cost_at(frame, &p, f, data);
    let initial_cost = cost;
    let mut damping = INITIAL_DAMPING;
    let mut converged = cost == 0.0;
    let mut iterations = 0;

    while !converged && iterations < MAX_ITERATIONS {
        iterations += 1;
        let (jtj, jtr) = normal_equations(frame, &p, f, data);
        let diag_floor = 1e-12 * jtj.diagonal().max();
        let mut accepted = false;
        while damping <= MAX_DAMPING {
            let mut a = jtj;
            for k in 0..4 {
                a[(k, k)] += damping * jtj[(k, k)].max(diag_floor);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&(-jtr))) else {
                damping *= 10.0;
                continue;
            };
            let trial = p + step;
            let trial_cost = cost_at(frame, &trial, f, data);
            let small_step = step.norm() < STEP_TOLERANCE * (p.norm() + STEP_TOLERANCE);
            if trial_cost < cost {
                let decrease = cost - trial_cost;
                p = trial;
                cost = trial_cost;
                damping = (damping / 10.0).max(1e-15);
                accepted = true;
                converged = small_step || decrease < COST_TOLERANCE * cost || cost == 0.0;
                break;
            }
            if small_step {
                // no representable improvement left
                converged = true;
                break;
            }
            damping *= 10.0;
        }
        if !accepted && !converged {
            converged = true;
        }
    }

    let (f_r, q_l, q_e, phi) = frame.unpack(&p);
    let q_i = internal_q(q_l, q_e).unwrap_or(f64::NAN);
    let (jtj, _) = normal_equations(frame, &p, f, data);
    let param_uncertainties = uncertainties(frame, &p, &jtj, cost, n);
    let (lo, hi) = trace.span();
    if converged && !(lo..=hi).contains(&f_r) {
        warnings.push(format!("fitted resonance {f_r:.9e} Hz lies outside the sweep"));
    }
    let result = FitResult {
        f_r,
        q_l,
        q_e,
        q_i,
        phi,
        param_uncertainties,
        rms_residual: (2.0 * cost / n as f64).sqrt(),
        initial_rms_residual: (2.0 * initial_cost / n as f64).sqrt(),
        n_iterations: iterations,
        converged: converged && (lo..=hi).contains(&f_r),
        warnings,
    };
    if !result.converged {
        return Err(FitError::ConvergenceFailure { best: Box::new(result) });
    }
    if q_l >= q_e {
        return Err(FitError::NonPhysicalFit { best: Box::new(result) });
    }
    Ok(result)
}

fn uncertainties(
    frame: Frame,
    p: &Vector4<f64>,
    jtj: &Matrix4<f64>,
    cost: f64,
    n: usize,
) -> ParamUncertainties {
    if n <= 4 {
        return ParamUncertainties::default();
    }
    let Some(inv) = jtj.try_inverse() else {
        return ParamUncertainties::default();
    };
    let cov = inv * (2.0 * cost / (n - 4) as f64);
    let (_, q_l, q_e, _) = frame.unpack(p);
    let sd = |k: usize| cov[(k, k)].max(0.0).sqrt();
    // Q_i = 1/(1/Q_L - 1/Q_e): dQ_i/dlnQ_L = Q_i²/Q_L, dQ_i/dlnQ_e = -Q_i²/Q_e
    let q_i_sd = match internal_q(q_l, q_e) {
        Ok(q_i) => {
            let j = Vector4::new(0.0, q_i * q_i / q_l, -q_i * q_i / q_e, 0.0);
            (j.transpose() * cov * j)[(0, 0)].max(0.0).sqrt()
        }
        Err(_) => f64::NAN,
    };
    ParamUncertainties {
        f_r: sd(0) * frame.f_scale,
        q_l: sd(1) * q_l,
        q_e: sd(2) * q_e,
        q_i: q_i_sd,
        phi: sd(3),
    }
}

/// Per-trace fits ordered by input power. Failures stay in their slot.
pub fn fit_power_series(traces: &[SweepTrace]) -> Vec<(f64, Result<FitResult, FitError>)> {
    let mut out: Vec<_> = traces.iter().map(|t| (t.p_in_dbm, fit_resonance(t, None))).collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}
