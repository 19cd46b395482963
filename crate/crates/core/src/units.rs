//! Physical constants and unit conversions shared across the toolkit.
//!
//! Internally everything is SI: hertz, meters, henries, farads, watts.

/// Reduced Planck constant (J·s).
pub const HBAR: f64 = 1.054_571_817e-34;

/// Ground-state hyperfine splitting of ⁸⁷Rb (Hz).
pub const F_RB: f64 = 6.834_683e9;

pub const GHZ: f64 = 1e9;
pub const MHZ: f64 = 1e6;
pub const KHZ: f64 = 1e3;
pub const UM: f64 = 1e-6;
pub const NM: f64 = 1e-9;
pub const NH: f64 = 1e-9;
pub const PF: f64 = 1e-12;
pub const SECONDS_PER_HOUR: f64 = 3600.0;

/// `P_W = 10^((dBm - 30) / 10)`.
pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn watts_to_dbm(watts: f64) -> f64 {
    10.0 * watts.log10() + 30.0
}

/// Fractional deviation expressed in parts per million.
pub fn ppm(delta: f64, reference: f64) -> f64 {
    delta / reference * 1e6
}
