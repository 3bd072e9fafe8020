//! Tapered-trap geometry and the engine parameters derived from it.

use serde::Serialize;

use crate::error::{invalid, EngineError, Result};
use crate::scalar::Real;
use crate::units;

/// Physical trap: opening angle, radius at z = 0, ion mass and the two
/// trap frequencies (rad/s). The x/y splitting is folded into one mean
/// radial frequency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrapGeometry<T> {
    pub theta: T,
    pub r0: T,
    pub mass: T,
    pub omega_r: T,
    pub omega_z: T,
}

impl<T: Real> TrapGeometry<T> {
    pub fn new(theta: T, r0: T, mass: T, omega_r: T, omega_z: T) -> Result<Self> {
        let geom = Self { theta, r0, mass, omega_r, omega_z };
        geom.validate()?;
        Ok(geom)
    }

    pub fn validate(&self) -> Result<()> {
        let half_pi = T::FRAC_PI_2();
        if !(self.theta > T::zero() && self.theta < half_pi) {
            return Err(invalid("theta", format!("{} rad not in (0, pi/2)", self.theta)));
        }
        if !(self.r0 > T::zero()) || !self.r0.is_finite() {
            return Err(invalid("r0", "must be positive"));
        }
        if !(self.mass > T::zero()) {
            return Err(invalid("mass", "must be positive"));
        }
        if !(self.omega_z > T::zero()) {
            return Err(invalid("omega_z", "must be positive"));
        }
        if !(self.omega_r > self.omega_z) {
            return Err(invalid("omega_r", "radial frequency must exceed axial frequency"));
        }
        Ok(())
    }

    /// epsilon = tan(theta) / r0.
    pub fn epsilon(&self) -> T {
        self.theta.tan() / self.r0
    }

    /// Linear taper coefficient g = 4 epsilon of the approximate potential.
    pub fn g(&self) -> T {
        T::lit(4.0) * self.epsilon()
    }

    /// Axial zero-point length sqrt(hbar / (2 m omega_z)).
    pub fn axial_zero_point(&self) -> T {
        (T::lit(units::HBAR) / (T::lit(2.0) * self.mass * self.omega_z)).sqrt()
    }

    pub fn with_r0(&self, r0: T) -> Self {
        Self { r0, ..*self }
    }
}

/// Radial-axial coupling beta = g omega_r sqrt(hbar / 2 m omega_z), in rad/s.
///
/// Valid for theta in [0, pi/2); theta = 0 gives an untapered trap and beta = 0.
pub fn compute_beta<T: Real>(geom: &TrapGeometry<T>) -> T {
    geom.g() * geom.omega_r * geom.axial_zero_point()
}

/// Mean Bose occupation 1 / (exp(hbar omega / k_B T) - 1) for a temperature in kelvin.
pub fn planck_occupation<T: Real>(omega: T, temperature_k: T) -> Result<T> {
    if !(temperature_k > T::zero()) {
        return Err(EngineError::Domain(format!(
            "temperature must be positive, got {temperature_k} K"
        )));
    }
    if !(omega > T::zero()) {
        return Err(EngineError::Domain(format!("frequency must be positive, got {omega}")));
    }
    let kt = T::lit(units::K_B) * temperature_k / T::lit(units::HBAR);
    Ok(planck_occupation_scaled(omega / kt))
}

/// Occupation as a function of the ratio x = hbar omega / k_B T.
pub fn planck_occupation_scaled<T: Real>(x: T) -> T {
    let d = x.exp_m1();
    if d.is_infinite() {
        T::zero()
    } else {
        d.recip()
    }
}

/// Which closed form of the trap potential to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PotentialForm {
    /// U with omega_r(z) = omega_r / (1 + epsilon z)^2.
    Exact,
    /// V = m/2 omega_r^2 r^2 (1 - g z) + m/2 omega_z^2 z^2.
    Approx,
}

/// Trap potential at (r, z) in metres, returned in eV.
pub fn potential<T: Real>(geom: &TrapGeometry<T>, r: T, z: T, form: PotentialForm) -> Result<T> {
    let half_m = T::lit(0.5) * geom.mass;
    let axial = half_m * geom.omega_z * geom.omega_z * z * z;
    let radial_scale = match form {
        PotentialForm::Exact => {
            let ez = geom.epsilon() * z;
            if ez <= -T::one() {
                return Err(EngineError::SingularGeometry(ez.as_f64()));
            }
            (T::one() + ez).powi(-4)
        }
        PotentialForm::Approx => T::one() - geom.g() * z,
    };
    let radial = half_m * geom.omega_r * geom.omega_r * r * r * radial_scale;
    Ok((radial + axial) / T::lit(units::E_CHARGE))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PotentialSample<T> {
    pub r: T,
    pub z: T,
    pub value_exact: T,
    pub value_approx: T,
}

pub fn sample_potential<T: Real>(geom: &TrapGeometry<T>, r: T, z: T) -> Result<PotentialSample<T>> {
    Ok(PotentialSample {
        r,
        z,
        value_exact: potential(geom, r, z, PotentialForm::Exact)?,
        value_approx: potential(geom, r, z, PotentialForm::Approx)?,
    })
}

/// Everything the dynamics needs, in internal units: frequencies and rates
/// in rad/s, temperatures in kelvin, times in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EngineParams<T> {
    pub omega_r: T,
    pub omega_z: T,
    pub beta: T,
    pub kappa_a: T,
    pub kappa_h: T,
    pub kappa_b: T,
    pub t_h: T,
    pub t_a: T,
    pub t_b: T,
    pub t_0: T,
    pub nbar_h: T,
    pub nbar_a: T,
    pub nbar_b: T,
    pub heating_period: T,
    pub heating_duty: T,
}

/// Bath rates in rad/s.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BathRates<T> {
    pub kappa_a: T,
    pub kappa_h: T,
    pub kappa_b: T,
}

/// Bath and initial temperatures in kelvin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperatures<T> {
    pub t_h: T,
    pub t_a: T,
    pub t_b: T,
    pub t_0: T,
}

impl<T: Real> EngineParams<T> {
    /// Builds the parameter set with occupations from the Planck formula.
    /// `heating_period` and `heating_duty` default to two axial periods and 0.5.
    pub fn new(
        omega_r: T,
        omega_z: T,
        beta: T,
        rates: BathRates<T>,
        temps: Temperatures<T>,
        heating_period: Option<T>,
        heating_duty: Option<T>,
    ) -> Result<Self> {
        let two = T::lit(2.0);
        let params = Self {
            omega_r,
            omega_z,
            beta,
            kappa_a: rates.kappa_a,
            kappa_h: rates.kappa_h,
            kappa_b: rates.kappa_b,
            t_h: temps.t_h,
            t_a: temps.t_a,
            t_b: temps.t_b,
            t_0: temps.t_0,
            nbar_h: planck_occupation(omega_r, temps.t_h)?,
            nbar_a: planck_occupation(omega_r, temps.t_a)?,
            nbar_b: planck_occupation(omega_z, temps.t_b)?,
            heating_period: heating_period.unwrap_or(two * T::TAU() / omega_z),
            heating_duty: heating_duty.unwrap_or(T::lit(0.5)),
        };
        params.validate()?;
        Ok(params)
    }

    pub fn from_geometry(
        geom: &TrapGeometry<T>,
        rates: BathRates<T>,
        temps: Temperatures<T>,
        heating_period: Option<T>,
        heating_duty: Option<T>,
    ) -> Result<Self> {
        Self::new(
            geom.omega_r,
            geom.omega_z,
            compute_beta(geom),
            rates,
            temps,
            heating_period,
            heating_duty,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.omega_r > self.omega_z && self.omega_z > T::zero()) {
            return Err(invalid("omega_r", "need omega_r > omega_z > 0"));
        }
        if !(self.beta >= T::zero()) {
            return Err(invalid("beta", "must be non-negative"));
        }
        if !(self.beta < self.omega_r) {
            return Err(invalid(
                "beta",
                "beta must be smaller than the radial frequency for the local master equation",
            ));
        }
        for (name, v) in [
            ("kappa_a", self.kappa_a),
            ("kappa_h", self.kappa_h),
            ("kappa_b", self.kappa_b),
            ("T_h", self.t_h),
            ("T_a", self.t_a),
            ("T_b", self.t_b),
            ("T_0", self.t_0),
            ("heating_period", self.heating_period),
        ] {
            if !(v > T::zero()) || !v.is_finite() {
                return Err(invalid(name, format!("must be positive and finite, got {v}")));
            }
        }
        if !(self.heating_duty > T::zero() && self.heating_duty < T::one()) {
            return Err(invalid("heating_duty", "must lie in the open interval (0, 1)"));
        }
        Ok(())
    }

    /// Same parameters with a different coupling, occupations unchanged.
    pub fn with_beta(&self, beta: T) -> Self {
        Self { beta, ..*self }
    }

    /// Equivalent temperature k_B T / hbar in rad/s.
    pub fn temperature_angular(t_kelvin: T) -> T {
        T::lit(units::K_B) * t_kelvin / T::lit(units::HBAR)
    }

    /// Period of the axial oscillation, 2 pi / omega_z.
    pub fn axial_period(&self) -> T {
        T::TAU() / self.omega_z
    }
}
