//! Expectation values and phase-space diagnostics of density-matrix snapshots.
//!
//! Quadrature variances use the convention X = (a + a^dag)/2,
//! P = i(a^dag - a)/2, so the vacuum variance is 1/4. Second moments are
//! assembled from the normal-ordered moments <a>, <a^2>, <a^dag a>, which the
//! truncated matrices represent exactly, with the canonical commutator
//! supplying the ordering constant.

use std::io::Write;

use nalgebra::DMatrix;
use num_traits::Zero;
use serde::Serialize;

use crate::error::Result;
use crate::fock::{DensityMatrix, FockDims};
use crate::lindblad::{LindbladGenerator, Snapshot};
use crate::scalar::{cplx, Cplx, Real};
use crate::trap::EngineParams;
use crate::units;

/// Normal-ordered single-mode moments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeMoments<T: Real> {
    pub mean: Cplx<T>,
    pub mean_sq: Cplx<T>,
    pub number: T,
}

impl<T: Real> ModeMoments<T> {
    /// Moments of a single-mode density matrix.
    pub fn from_state(rho: &DMatrix<Cplx<T>>) -> Self {
        let n = rho.nrows();
        let mut mean = Cplx::<T>::zero();
        let mut mean_sq = Cplx::<T>::zero();
        let mut number = T::zero();
        for k in 0..n {
            let kk = T::from_usize_lossy(k);
            number += kk * rho[(k, k)].re;
            // Tr[rho a] = sum_k sqrt(k) rho[k, k-1]
            if k >= 1 {
                mean += rho[(k, k - 1)] * kk.sqrt();
            }
            if k >= 2 {
                mean_sq += rho[(k, k - 2)] * (kk * (kk - T::one())).sqrt();
            }
        }
        Self { mean, mean_sq, number }
    }

    /// Var X with X = (a + a^dag)/2.
    pub fn var_x(&self) -> T {
        let q = T::lit(0.25);
        q * (T::lit(2.0) * self.mean_sq.re + T::lit(2.0) * self.number + T::one()) - self.mean.re * self.mean.re
    }

    /// Var P with P = i(a^dag - a)/2.
    pub fn var_p(&self) -> T {
        let q = T::lit(0.25);
        q * (-T::lit(2.0) * self.mean_sq.re + T::lit(2.0) * self.number + T::one()) - self.mean.im * self.mean.im
    }

    /// Symmetrized covariance (XP + PX)/2 - <X><P>.
    pub fn cov_xp(&self) -> T {
        T::lit(0.5) * self.mean_sq.im - self.mean.re * self.mean.im
    }

    /// Principal-variance ratio of the (X, P) covariance matrix, >= 1.
    pub fn eccentricity(&self) -> T {
        covariance_eccentricity_from(self.var_x(), self.var_p(), self.cov_xp())
    }

    /// <q^2> for q = (a + a^dag)/sqrt 2.
    pub fn q_sq(&self) -> T {
        self.mean_sq.re + self.number + T::lit(0.5)
    }
}

fn covariance_eccentricity_from<T: Real>(vx: T, vp: T, c: T) -> T {
    let half_tr = T::lit(0.5) * (vx + vp);
    let disc = (T::lit(0.25) * (vx - vp) * (vx - vp) + c * c).sqrt();
    let hi = half_tr + disc;
    let lo = half_tr - disc;
    if lo > T::zero() {
        hi / lo
    } else {
        T::infinity()
    }
}

/// Ratio of principal variances of a single-mode state: 1 for thermal
/// states, > 1 when squeezed.
pub fn covariance_eccentricity<T: Real>(rho_single_mode: &DMatrix<Cplx<T>>) -> T {
    ModeMoments::from_state(rho_single_mode).eccentricity()
}

/// Tr[rho (R (x) Z)] for single-mode operators R (radial) and Z (axial).
pub fn expect_product<T: Real>(rho: &DensityMatrix<T>, radial: &DMatrix<Cplx<T>>, axial: &DMatrix<Cplx<T>>) -> Cplx<T> {
    let dims = rho.dims;
    let nz_of = |m: &DMatrix<Cplx<T>>| -> Vec<(usize, usize, Cplx<T>)> {
        let mut v = Vec::new();
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                if !m[(i, j)].is_zero() {
                    v.push((i, j, m[(i, j)]));
                }
            }
        }
        v
    };
    let r = nz_of(radial);
    let z = nz_of(axial);
    let mut acc = Cplx::<T>::zero();
    // Tr[rho O] = sum_{ij} O_ij rho_ji
    for &(m, mp, rv) in &r {
        for &(k, kp, zv) in &z {
            acc += rv * zv * rho.entries[(dims.index(mp, kp), dims.index(m, k))];
        }
    }
    acc
}

/// 2 q_r^2 = a^2 + a^dag^2 + 2 a^dag a + 1 on `n` radial levels.
fn radial_q_sq_twice<T: Real>(n: usize) -> DMatrix<Cplx<T>> {
    let mut m = DMatrix::zeros(n, n);
    for k in 0..n {
        let kk = T::from_usize_lossy(k);
        m[(k, k)] = Cplx::new(T::lit(2.0) * kk + T::one(), T::zero());
        if k + 2 < n {
            let s = Cplx::new(((kk + T::one()) * (kk + T::lit(2.0))).sqrt(), T::zero());
            m[(k, k + 2)] = s;
            m[(k + 2, k)] = s;
        }
    }
    m
}

/// p_z = i (b^dag - b)/sqrt 2 on `n` axial levels.
fn axial_p<T: Real>(n: usize) -> DMatrix<Cplx<T>> {
    let mut m = DMatrix::zeros(n, n);
    let s = T::FRAC_1_SQRT_2();
    for k in 1..n {
        let r = T::from_usize_lossy(k).sqrt() * s;
        // b^dag |k-1> = sqrt k |k>, b |k> = sqrt k |k-1>
        m[(k, k - 1)] = cplx(T::zero(), r);
        m[(k - 1, k)] = cplx(T::zero(), -r);
    }
    m
}

/// One row of an observable time series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ObservableRow<T: Real> {
    pub time: T,
    pub n_r: T,
    pub n_z: T,
    pub var_qr: T,
    pub var_pr: T,
    pub cov_qp_r: T,
    /// <q_r^2 p_z> - <q_r^2><p_z>.
    pub corr_qr2_pz: T,
    pub qr_sq: T,
    pub pz_mean: T,
    /// <b + b^dag>.
    pub qz_displacement: T,
    pub a_mean: (T, T),
    pub a_sq_mean: (T, T),
    pub hot_on: T,
}

impl<T: Real> ObservableRow<T> {
    pub fn radial_moments(&self) -> ModeMoments<T> {
        ModeMoments {
            mean: cplx(self.a_mean.0, self.a_mean.1),
            mean_sq: cplx(self.a_sq_mean.0, self.a_sq_mean.1),
            number: self.n_r,
        }
    }

    /// Right-hand side of d<n_z>/dt = (beta/sqrt 2)<q_r^2 p_z> - kappa_b (<n_z> - nbar_b).
    pub fn ehrenfest_rate(&self, params: &EngineParams<T>) -> T {
        let moment = self.corr_qr2_pz + self.qr_sq * self.pz_mean;
        params.beta * T::FRAC_1_SQRT_2() * moment - params.kappa_b * (self.n_z - params.nbar_b)
    }
}

/// d<n_z>/dt = Tr[n_z L(rho)] straight from the generator.
pub fn axial_number_rate<T: Real>(generator: &LindbladGenerator<T>, rho: &DensityMatrix<T>) -> T {
    let d = rho.dims.dim();
    let mut out = vec![Cplx::<T>::zero(); d * d];
    generator.rhs(rho.entries.as_slice(), &mut out);
    (0..d).map(|i| T::from_usize_lossy(i % rho.dims.n_z) * out[i + i * d].re).sum()
}

/// Expectation values of one state.
pub fn expectations<T: Real>(rho: &DensityMatrix<T>, time: T, hot_on: T) -> ObservableRow<T> {
    let FockDims { n_r, n_z } = rho.dims;
    let radial = ModeMoments::from_state(&rho.radial_state());
    let axial = ModeMoments::from_state(&rho.axial_state());
    let qr2_twice = radial_q_sq_twice::<T>(n_r);
    let p_z = axial_p::<T>(n_z);
    let joint = expect_product(rho, &qr2_twice, &p_z).re * T::lit(0.5);
    let qr_sq = radial.q_sq();
    let pz_mean = T::SQRT_2() * axial.mean.im;
    ObservableRow {
        time,
        n_r: radial.number,
        n_z: axial.number,
        var_qr: radial.var_x(),
        var_pr: radial.var_p(),
        cov_qp_r: radial.cov_xp(),
        corr_qr2_pz: joint - qr_sq * pz_mean,
        qr_sq,
        pz_mean,
        qz_displacement: T::lit(2.0) * axial.mean.re,
        a_mean: (radial.mean.re, radial.mean.im),
        a_sq_mean: (radial.mean_sq.re, radial.mean_sq.im),
        hot_on,
    }
}

pub fn expectations_of_snapshot<T: Real>(snap: &Snapshot<'_, T>) -> ObservableRow<T> {
    expectations(snap.rho, snap.time, snap.hot_on)
}

/// P_dis = hbar omega_z kappa_b (<n_z> - nbar_b), in watts.
pub fn dissipated_power<T: Real>(n_z: T, params: &EngineParams<T>) -> T {
    T::lit(units::HBAR) * dissipated_power_angular(n_z, params)
}

/// P_dis with hbar = 1, i.e. in rad^2/s^2.
pub fn dissipated_power_angular<T: Real>(n_z: T, params: &EngineParams<T>) -> T {
    params.omega_z * params.kappa_b * (n_z - params.nbar_b)
}

/// P_dis / (hbar omega_z^2): power in units of hbar omega_z per inverse axial angular frequency.
pub fn dissipated_power_scaled<T: Real>(n_z: T, params: &EngineParams<T>) -> T {
    dissipated_power_angular(n_z, params) / (params.omega_z * params.omega_z)
}

/// Time series of [`ObservableRow`]s.
#[derive(Debug, Clone, Default)]
pub struct ObservableTrace<T: Real> {
    pub rows: Vec<ObservableRow<T>>,
}

pub const TRACE_CSV_HEADER: [&str; 9] =
    ["time_s", "scaled_time", "n_r", "n_z", "var_qr", "var_pr", "corr_qr2_pz", "P_dis_w", "u_t"];

impl<T: Real> ObservableTrace<T> {
    pub fn new() -> Self {
        Self { rows: Vec::new() }
    }

    pub fn push(&mut self, row: ObservableRow<T>) {
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn times(&self) -> Vec<T> {
        self.rows.iter().map(|r| r.time).collect()
    }

    pub fn column<F: Fn(&ObservableRow<T>) -> T>(&self, f: F) -> Vec<T> {
        self.rows.iter().map(f).collect()
    }

    /// Smallest var_qr * var_pr over the trace.
    pub fn min_uncertainty_product(&self) -> T {
        self.rows.iter().map(|r| r.var_qr * r.var_pr).fold(T::infinity(), T::min)
    }

    /// Time average of P_dis (W) by the trapezoid rule.
    pub fn mean_power(&self, params: &EngineParams<T>) -> T {
        let p: Vec<T> = self.rows.iter().map(|r| dissipated_power(r.n_z, params)).collect();
        let t = self.times();
        if t.len() < 2 {
            return p.first().copied().unwrap_or(T::zero());
        }
        let mut acc = T::zero();
        for i in 1..t.len() {
            acc += T::lit(0.5) * (p[i] + p[i - 1]) * (t[i] - t[i - 1]);
        }
        acc / (t[t.len() - 1] - t[0])
    }

    /// Trapezoid time average of an arbitrary column.
    pub fn time_average<F: Fn(&ObservableRow<T>) -> T>(&self, f: F) -> T {
        let v = self.column(f);
        let t = self.times();
        if t.len() < 2 {
            return v.first().copied().unwrap_or(T::zero());
        }
        let mut acc = T::zero();
        for i in 1..t.len() {
            acc += T::lit(0.5) * (v[i] + v[i - 1]) * (t[i] - t[i - 1]);
        }
        acc / (t[t.len() - 1] - t[0])
    }

    /// Writes the trace in the documented CSV schema.
    pub fn write_csv<W: Write>(&self, out: W, params: &EngineParams<T>) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(TRACE_CSV_HEADER)?;
        for r in &self.rows {
            let scaled = params.omega_z * r.time / T::TAU();
            w.write_record([
                format!("{:e}", r.time.as_f64()),
                format!("{}", scaled.as_f64()),
                format!("{}", r.n_r.as_f64()),
                format!("{}", r.n_z.as_f64()),
                format!("{}", r.var_qr.as_f64()),
                format!("{}", r.var_pr.as_f64()),
                format!("{}", r.corr_qr2_pz.as_f64()),
                format!("{:e}", dissipated_power(r.n_z, params).as_f64()),
                format!("{}", r.hot_on.as_f64()),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
