//! CODATA 2018 constants and SI conversions.
//!
//! Internally the dynamics use hbar = k_B = 1 with frequencies in rad/s and
//! time in seconds, so energies and temperatures are both expressed in rad/s.
//! These constants are only touched at the I/O boundary.

/// Reduced Planck constant (J s).
pub const HBAR: f64 = 1.054_571_817e-34;
/// Boltzmann constant (J/K).
pub const K_B: f64 = 1.380_649e-23;
/// Atomic mass unit (kg).
pub const AMU: f64 = 1.660_539_066_60e-27;
/// Elementary charge (C), used for eV conversion.
pub const E_CHARGE: f64 = 1.602_176_634e-19;

pub const TWO_PI: f64 = std::f64::consts::TAU;

/// Ordinary frequency (Hz) to angular frequency (rad/s).
pub fn hz_to_angular(f_hz: f64) -> f64 {
    TWO_PI * f_hz
}

pub fn angular_to_hz(omega: f64) -> f64 {
    omega / TWO_PI
}

/// Temperature in kelvin to its angular-frequency equivalent k_B T / hbar.
pub fn kelvin_to_angular(t_kelvin: f64) -> f64 {
    K_B * t_kelvin / HBAR
}

pub fn angular_to_kelvin(t_angular: f64) -> f64 {
    HBAR * t_angular / K_B
}

/// Energy expressed as an angular frequency to joules.
pub fn angular_to_joule(e_angular: f64) -> f64 {
    HBAR * e_angular
}
