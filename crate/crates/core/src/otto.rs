//! Effective Otto cycle of the radial mode.
//!
//! Replacing the axial displacement operator by its expectation value q_z
//! leaves the radial Hamiltonian
//!   H_red = (w_r - b q_z/2) a^dag a - (b q_z/4)(a^2 + a^dag^2) - b q_z/4,
//! which a Bogoliubov rotation c = cosh(x) a - sinh(x) a^dag with
//! tanh 2x = b q_z / (2 w_r - b q_z) brings to w_eff c^dag c + offset.
//! Energies and temperatures here use hbar = k_B = 1 (rad/s).

use nalgebra::{DMatrix, RealField};
use num_traits::Float;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, EngineError, Result};
use crate::fock::{build_hamiltonian, gibbs_state, FockDims, ModelKind};
use crate::lindblad::{engine_baths, run_limit_cycle, CycleStatus, PropagationOptions, RunHealth, Snapshot};
use crate::observables::{expectations_of_snapshot, ModeMoments, ObservableRow, ObservableTrace};
use crate::scalar::{Cplx, Real};
use crate::trap::{compute_beta, EngineParams, TrapGeometry};
use crate::units;

/// Semi-classical radial frame at one axial displacement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BogoliubovFrame<T> {
    pub q_z: T,
    /// Squeeze parameter with tanh 2x = b q_z / (2 w_r - b q_z).
    pub x: T,
    pub omega_eff: T,
    /// Ground energy of H_red.
    pub offset: T,
    /// Coefficient of a^dag a in H_red.
    pub number_coeff: T,
    /// Coefficient of (a^2 + a^dag^2) in H_red.
    pub pair_coeff: T,
    /// Constant term of H_red.
    pub constant: T,
}

/// Bogoliubov reduction at axial displacement `q_z` = <b + b^dag>.
pub fn bogoliubov_reduce<T: Real>(params: &EngineParams<T>, q_z: T) -> Result<BogoliubovFrame<T>> {
    let bq = params.beta * q_z;
    let wr = params.omega_r;
    if !bq.is_finite() || !q_z.is_finite() {
        return Err(invalid("q_z", "not finite"));
    }
    if bq >= wr {
        return Err(EngineError::ReductionSingular { beta_qz: bq.as_f64(), omega_r: wr.as_f64() });
    }
    let half = T::lit(0.5);
    let quarter = T::lit(0.25);
    let tanh_2x = bq / (T::lit(2.0) * wr - bq);
    let x = half * tanh_2x.atanh();
    let (s2, c2) = ((T::lit(2.0) * x).sinh(), (T::lit(2.0) * x).cosh());
    let omega_eff = (wr - half * bq) * c2 - half * bq * s2;
    let sh = x.sinh();
    let offset = wr * sh * sh - quarter * bq * (s2 + c2);
    Ok(BogoliubovFrame {
        q_z,
        x,
        omega_eff,
        offset,
        number_coeff: wr - half * bq,
        pair_coeff: -quarter * bq,
        constant: -quarter * bq,
    })
}

impl<T: Real> BogoliubovFrame<T> {
    /// <c^dag c> from normal-ordered radial moments.
    pub fn quasiparticle_number(&self, m: &ModeMoments<T>) -> T {
        let two_x = T::lit(2.0) * self.x;
        let sh = self.x.sinh();
        two_x.cosh() * m.number + sh * sh - two_x.sinh() * m.mean_sq.re
    }

    /// U = <H_red> = w_eff n_c + offset.
    pub fn energy(&self, m: &ModeMoments<T>) -> T {
        self.omega_eff * self.quasiparticle_number(m) + self.offset
    }

    /// H_red on `levels` radial Fock states.
    pub fn reduced_hamiltonian(&self, levels: usize) -> DMatrix<Cplx<T>> {
        let mut h = DMatrix::zeros(levels, levels);
        for k in 0..levels {
            let kk = T::from_usize_lossy(k);
            h[(k, k)] = Cplx::new(self.number_coeff * kk + self.constant, T::zero());
            if k + 2 < levels {
                let v = self.pair_coeff * ((kk + T::one()) * (kk + T::lit(2.0))).sqrt();
                h[(k, k + 2)] = Cplx::new(v, T::zero());
                h[(k + 2, k)] = Cplx::new(v, T::zero());
            }
        }
        h
    }
}

/// S = (1 + n) ln(1 + n) - n ln n of a thermal quasiparticle occupation.
pub fn effective_entropy<T: Real>(n_c: T) -> Result<T> {
    if !(n_c >= T::zero()) {
        return Err(EngineError::Domain(format!("quasiparticle number {n_c} is negative")));
    }
    if n_c == T::zero() {
        return Ok(T::zero());
    }
    Ok((T::one() + n_c) * n_c.ln_1p() - n_c * n_c.ln())
}

/// T_eff = w_eff / ln(1 + 1/n_c), in rad/s.
pub fn effective_temperature<T: Real>(omega_eff: T, n_c: T) -> Result<T> {
    if !(n_c >= T::zero()) {
        return Err(EngineError::Domain(format!("quasiparticle number {n_c} is negative")));
    }
    if n_c == T::zero() {
        return Ok(T::zero());
    }
    Ok(omega_eff / n_c.recip().ln_1p())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Stroke {
    #[serde(rename = "A->B")]
    HotIsochore,
    #[serde(rename = "B->C")]
    Expansion,
    #[serde(rename = "C->D")]
    ColdIsochore,
    #[serde(rename = "D->A")]
    Compression,
}

impl Stroke {
    pub fn label(&self) -> &'static str {
        match self {
            Stroke::HotIsochore => "A->B",
            Stroke::Expansion => "B->C",
            Stroke::ColdIsochore => "C->D",
            Stroke::Compression => "D->A",
        }
    }
}

/// One point of the effective cycle; energies and temperatures in rad/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CyclePoint<T> {
    pub time: T,
    pub q_z: T,
    pub omega_eff: T,
    pub n_c: T,
    pub u: T,
    pub t_eff: T,
    pub s: T,
    pub stroke: Stroke,
}

/// Where the isochores sit inside one heating period.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrokeWindows<T> {
    /// Length of the hot isochore after the switch-on edge (s).
    pub hot: T,
    /// Length of the cold isochore after the switch-off edge (s).
    pub cold: T,
}

impl<T: Real> StrokeWindows<T> {
    /// Three radial relaxation times of the respective bath configuration.
    pub fn for_params(params: &EngineParams<T>) -> Self {
        let three = T::lit(3.0);
        Self { hot: three / (params.kappa_a + params.kappa_h), cold: three / params.kappa_a }
    }

    fn validate(&self, params: &EngineParams<T>) -> Result<()> {
        let on = params.heating_duty * params.heating_period;
        let off = params.heating_period - on;
        if !(self.hot > T::zero() && self.hot < on) {
            return Err(invalid("isochore_hot", "must be positive and shorter than the heating window"));
        }
        if !(self.cold > T::zero() && self.cold < off) {
            return Err(invalid("isochore_cold", "must be positive and shorter than the cooling window"));
        }
        Ok(())
    }

    /// Stroke at phase `tau` in [0, period] measured from a switch-on edge.
    pub fn stroke_at(&self, params: &EngineParams<T>, tau: T) -> Stroke {
        let on = params.heating_duty * params.heating_period;
        if tau < self.hot {
            Stroke::HotIsochore
        } else if tau < on {
            Stroke::Expansion
        } else if tau < on + self.cold {
            Stroke::ColdIsochore
        } else {
            Stroke::Compression
        }
    }
}

/// Effective cycle extracted from a limit-cycle trace.
#[derive(Debug, Clone, Serialize)]
pub struct CycleRecord<T> {
    pub points: Vec<CyclePoint<T>>,
    pub period: T,
    /// Net work W = loop integral of T dS, in units of hbar w_z. Evaluated as
    /// the loop integral of w_eff dn_c, which is the same differential.
    pub w_net: T,
    pub w_net_joule: T,
    /// Area of the sampled T-S polygon. It converges to `w_net` as snapshots
    /// are refined, but slowly where the isochores are fast.
    pub w_ts_polygon: T,
    /// Heat intake over the hot isochore, in units of hbar w_z.
    pub q_in: T,
    pub q_in_joule: T,
    pub efficiency: T,
    /// W_net / period, in watts.
    pub power_w: T,
    /// Relative variation (max - min)/mean of w_eff within each isochore.
    pub hot_isochore_variation: T,
    pub cold_isochore_variation: T,
    pub degenerate: bool,
    pub warnings: Vec<String>,
}

/// Signed loop integral of y dx over the closed polygon (x_i, y_i) (shoelace form).
pub fn loop_integral<T: Real>(x: &[T], y: &[T]) -> T {
    let n = x.len();
    let mut acc = T::zero();
    for i in 0..n {
        let j = (i + 1) % n;
        acc += x[j] * y[i] - x[i] * y[j];
    }
    T::lit(0.5) * acc
}

/// Loop integral of y dx by the trapezoid rule, closing the polygon.
pub fn loop_integral_trapezoid<T: Real>(x: &[T], y: &[T]) -> T {
    let n = x.len();
    let mut acc = T::zero();
    for i in 0..n {
        let j = (i + 1) % n;
        acc += T::lit(0.5) * (y[i] + y[j]) * (x[j] - x[i]);
    }
    acc
}

fn relative_variation<T: Real>(v: &[T]) -> T {
    if v.is_empty() {
        return T::zero();
    }
    let lo = v.iter().copied().fold(T::infinity(), T::min);
    let hi = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mean = v.iter().copied().sum::<T>() / T::from_usize_lossy(v.len());
    (hi - lo) / Float::abs(mean)
}

/// Builds the effective cycle from one period of observables starting at a
/// switch-on edge at `cycle_start`.
pub fn extract_cycle<T: Real>(
    rows: &[ObservableRow<T>],
    params: &EngineParams<T>,
    cycle_start: T,
    windows: StrokeWindows<T>,
) -> Result<CycleRecord<T>> {
    windows.validate(params)?;
    if rows.len() < 4 {
        return Err(invalid("trace", "needs at least four snapshots"));
    }
    // the closing snapshot duplicates the opening one on a converged cycle
    let mut rows: Vec<&ObservableRow<T>> = rows.iter().collect();
    let period = params.heating_period;
    if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
        if last.time - first.time >= period * (T::one() - T::lit(1e-9)) {
            rows.pop();
        }
    }
    let mut points = Vec::with_capacity(rows.len());
    for r in rows {
        let frame = bogoliubov_reduce(params, r.qz_displacement)?;
        let m = r.radial_moments();
        let n_c = frame.quasiparticle_number(&m);
        // rounding can leave -1e-16 on a pure state
        let n_c = if n_c < T::zero() && n_c > -T::lit(1e-12) { T::zero() } else { n_c };
        let tau = r.time - cycle_start;
        points.push(CyclePoint {
            time: r.time,
            q_z: r.qz_displacement,
            omega_eff: frame.omega_eff,
            n_c,
            u: frame.omega_eff * n_c + frame.offset,
            t_eff: effective_temperature(frame.omega_eff, n_c)?,
            s: effective_entropy(n_c)?,
            stroke: windows.stroke_at(params, tau),
        });
    }

    let s: Vec<T> = points.iter().map(|p| p.s).collect();
    let t: Vec<T> = points.iter().map(|p| p.t_eff).collect();
    let n_c: Vec<T> = points.iter().map(|p| p.n_c).collect();
    let omegas: Vec<T> = points.iter().map(|p| p.omega_eff).collect();
    let wz = params.omega_z;
    // T dS = w_eff dn_c exactly. Quadrature of the T-S form is poor when the
    // isochores are fast: the heating and cooling branches are sampled at
    // different points of a curved T(S) and the chords enclose spurious area.
    // w_eff varies slowly, so the trapezoid rule on w_eff dn_c is accurate.
    let mut w = loop_integral_trapezoid(&n_c, &omegas);
    let w_ts = loop_integral(&s, &t);

    // heat intake along the hot isochore, including the step into it
    let mut q = T::zero();
    for i in 0..points.len() {
        let j = (i + 1) % points.len();
        if points[j].stroke == Stroke::HotIsochore {
            q += T::lit(0.5) * (omegas[i] + omegas[j]) * (n_c[j] - n_c[i]);
        }
    }

    let of = |k: Stroke| -> Vec<T> { points.iter().filter(|p| p.stroke == k).map(|p| p.omega_eff).collect() };
    let hot_var = relative_variation(&of(Stroke::HotIsochore));
    let cold_var = relative_variation(&of(Stroke::ColdIsochore));

    let mut warnings = Vec::new();
    let s_range = span(&s);
    let t_range = span(&t);
    let omega_var = relative_variation(&omegas);
    let degenerate = omega_var < T::lit(1e-9) || Float::abs(w) <= T::lit(1e-9) * s_range * t_range;
    if degenerate {
        warnings.push(format!(
            "degenerate T-S loop (omega_eff variation {:e}, area {:e}); net work set to zero",
            omega_var.as_f64(),
            (w / wz).as_f64()
        ));
        w = T::zero();
    }
    for (k, n) in [
        (Stroke::HotIsochore, "hot"),
        (Stroke::Expansion, "expansion"),
        (Stroke::ColdIsochore, "cold"),
        (Stroke::Compression, "compression"),
    ] {
        if !points.iter().any(|p| p.stroke == k) {
            warnings.push(format!("no snapshot falls in the {n} stroke"));
        }
    }
    let hbar = T::lit(units::HBAR);
    let efficiency = if q > T::zero() { w / q } else { T::zero() };
    Ok(CycleRecord {
        points,
        period,
        w_net: w / wz,
        w_net_joule: w * hbar,
        w_ts_polygon: w_ts / wz,
        q_in: q / wz,
        q_in_joule: q * hbar,
        efficiency,
        power_w: w * hbar / period,
        hot_isochore_variation: hot_var,
        cold_isochore_variation: cold_var,
        degenerate,
        warnings,
    })
}

fn span<T: Real>(v: &[T]) -> T {
    let lo = v.iter().copied().fold(T::infinity(), T::min);
    let hi = v.iter().copied().fold(T::neg_infinity(), T::max);
    hi - lo
}

impl<T: Real> CycleRecord<T> {
    /// (omega_eff, U) pairs in units of w_z, with stroke labels.
    pub fn write_energy_frequency_csv<W: std::io::Write>(&self, out: W, omega_z: T) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["time_s", "omega_eff_over_omega_z", "U_hbar_omega_z", "stroke"])?;
        for p in &self.points {
            w.write_record([
                format!("{:e}", p.time.as_f64()),
                format!("{}", (p.omega_eff / omega_z).as_f64()),
                format!("{}", (p.u / omega_z).as_f64()),
                p.stroke.label().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// (S, T_eff) pairs, T_eff in units of hbar w_z / k_B, with stroke labels.
    pub fn write_entropy_temperature_csv<W: std::io::Write>(&self, out: W, omega_z: T) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["time_s", "S", "T_eff_hbar_omega_z", "T_eff_k", "n_c", "stroke"])?;
        for p in &self.points {
            w.write_record([
                format!("{:e}", p.time.as_f64()),
                format!("{}", p.s.as_f64()),
                format!("{}", (p.t_eff / omega_z).as_f64()),
                format!("{:e}", units::angular_to_kelvin(p.t_eff.as_f64())),
                format!("{}", p.n_c.as_f64()),
                p.stroke.label().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Settings of one engine limit-cycle run.
#[derive(Debug, Clone, Copy)]
pub struct EngineRunOptions<T> {
    pub dims: FockDims,
    pub model: ModelKind,
    pub cycles: usize,
    pub residual_threshold: f64,
    pub propagation: PropagationOptions<T>,
    pub windows: Option<StrokeWindows<T>>,
}

impl<T: Real> EngineRunOptions<T> {
    pub fn for_params(params: &EngineParams<T>) -> Self {
        Self {
            dims: FockDims::default(),
            model: ModelKind::Cm,
            cycles: 2,
            residual_threshold: 1e-6,
            propagation: PropagationOptions::for_params(params),
            windows: None,
        }
    }
}

/// Observables of the last period of a limit-cycle run.
#[derive(Debug, Clone)]
pub struct EngineRun<T: Real> {
    pub trace: ObservableTrace<T>,
    pub cycle_start: T,
    pub residuals: Vec<f64>,
    pub status: CycleStatus,
    pub health: RunHealth,
    /// Largest top-level population (radial, axial) seen in the recorded cycle.
    pub top_populations: (T, T),
}

/// Runs the engine from the Gibbs state at T_0 into its limit cycle.
pub fn run_engine<T: Real + RealField>(params: &EngineParams<T>, opts: &EngineRunOptions<T>) -> Result<EngineRun<T>> {
    run_engine_observed(params, opts, |_| {})
}

/// `run_engine` that also hands every recorded snapshot to `observer`.
pub fn run_engine_observed<T, F>(params: &EngineParams<T>, opts: &EngineRunOptions<T>, mut observer: F) -> Result<EngineRun<T>>
where
    T: Real + RealField,
    F: FnMut(&Snapshot<'_, T>),
{
    params.validate()?;
    let h = build_hamiltonian(opts.model, params, opts.dims)?;
    let rho0 = gibbs_state(&h, params.t_0)?;
    let mut trace = ObservableTrace::new();
    let mut top = (T::zero(), T::zero());
    let lc = run_limit_cycle(
        &h,
        rho0,
        &engine_baths(params),
        opts.cycles,
        opts.residual_threshold,
        PropagationOptions { keep_states: false, ..opts.propagation },
        |snap| {
            trace.push(expectations_of_snapshot(snap));
            let (r, z) = snap.rho.top_level_populations();
            top = (Float::max(top.0, r), Float::max(top.1, z));
            observer(snap);
        },
    )?;
    Ok(EngineRun {
        trace,
        cycle_start: lc.cycle_start,
        residuals: lc.residuals,
        status: lc.status,
        health: lc.health,
        top_populations: top,
    })
}

/// Limit-cycle run followed by cycle extraction.
pub fn run_otto<T: Real + RealField>(
    params: &EngineParams<T>,
    opts: &EngineRunOptions<T>,
) -> Result<(EngineRun<T>, CycleRecord<T>)> {
    let run = run_engine(params, opts)?;
    let windows = opts.windows.unwrap_or_else(|| StrokeWindows::for_params(params));
    let record = extract_cycle(&run.trace.rows, params, run.cycle_start, windows)?;
    Ok((run, record))
}

/// One row of the work-versus-radius table.
#[derive(Debug, Clone, Serialize)]
pub struct RadiusRow<T> {
    pub r0_um: T,
    pub beta_khz: T,
    pub w_hbar_omega_z: Option<T>,
    pub eta: Option<T>,
    pub error: Option<String>,
}

/// Net work and efficiency for each trap radius at fixed angle and frequencies.
/// Radii with beta >= w_r or a failed run keep their row with an error marker.
pub fn work_vs_radius<T: Real + RealField>(
    geometry: &TrapGeometry<T>,
    template: &EngineParams<T>,
    radii: &[T],
    opts: &EngineRunOptions<T>,
) -> Vec<RadiusRow<T>> {
    radii
        .par_iter()
        .map(|&r0| {
            let geom = geometry.with_r0(r0);
            let beta = compute_beta(&geom);
            let mut row = RadiusRow {
                r0_um: r0 * T::lit(1e6),
                beta_khz: beta / T::TAU() * T::lit(1e-3),
                w_hbar_omega_z: None,
                eta: None,
                error: None,
            };
            let params = template.with_beta(beta);
            match params.validate().and_then(|_| run_otto(&params, opts)) {
                Ok((_, rec)) => {
                    row.w_hbar_omega_z = Some(rec.w_net);
                    row.eta = Some(rec.efficiency);
                }
                Err(e) => row.error = Some(e.to_string()),
            }
            row
        })
        .collect()
}

pub fn write_radius_csv<T: Real, W: std::io::Write>(rows: &[RadiusRow<T>], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["r0_um", "beta_khz", "W_hbar_omega_z", "eta", "error"])?;
    let opt = |v: Option<T>| v.map(|x| format!("{}", x.as_f64())).unwrap_or_default();
    for r in rows {
        w.write_record([
            format!("{}", r.r0_um.as_f64()),
            format!("{}", r.beta_khz.as_f64()),
            opt(r.w_hbar_omega_z),
            opt(r.eta),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trap::{BathRates, Temperatures};
    use crate::trap::planck_occupation_scaled;
    use approx::assert_relative_eq;
    use nalgebra::SymmetricEigen;
    use proptest::prelude::*;

    fn params(beta_hz: f64) -> EngineParams<f64> {
        let w = units::hz_to_angular;
        EngineParams::new(
            w(1e6),
            w(5e4),
            w(beta_hz),
            BathRates { kappa_a: w(2e5), kappa_h: w(2e5), kappa_b: w(5e4) },
            Temperatures { t_h: 166e-6, t_a: 4e-6, t_b: 4e-6, t_0: 10e-6 },
            Some(20.0 * units::TWO_PI / w(5e4)),
            None,
        )
        .unwrap()
    }

    fn real_spectrum(h: &DMatrix<Cplx<f64>>) -> Vec<f64> {
        let re = h.map(|z| z.re);
        let mut ev: Vec<f64> = SymmetricEigen::new(re).eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ev
    }

    #[test]
    fn decoupled_point() {
        let p = params(1e5);
        let f = bogoliubov_reduce(&p, 0.0).unwrap();
        assert_eq!(f.x, 0.0);
        assert_eq!(f.omega_eff, p.omega_r);
        assert_eq!(f.offset, 0.0);
    }

    #[test]
    fn closed_form_at_forty_percent() {
        let p = params(1e5);
        let q = 0.4 * p.omega_r / p.beta;
        let f = bogoliubov_reduce(&p, q).unwrap();
        assert_relative_eq!((2.0 * f.x).tanh(), 0.25, max_relative = 1e-14);
        assert_relative_eq!(f.x, 0.127_706, max_relative = 1e-5);
        // w_eff = sqrt(w_r^2 - w_r b q_z)
        assert_relative_eq!(f.omega_eff / p.omega_r, 0.6f64.sqrt(), max_relative = 1e-12);
    }

    #[test]
    fn singular_reduction_is_reported() {
        let p = params(1e5);
        let q = p.omega_r / p.beta;
        assert!(matches!(bogoliubov_reduce(&p, q), Err(EngineError::ReductionSingular { .. })));
        assert!(bogoliubov_reduce(&p, -3.0 * q).is_ok());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]
        #[test]
        fn level_spacing_matches_numerical_diagonalization(beta_khz in 1.0f64..900.0, frac in -0.9f64..0.6) {
            let p = params(beta_khz * 1e3);
            let q = frac * p.omega_r / p.beta;
            let f = bogoliubov_reduce(&p, q).unwrap();
            let ev = real_spectrum(&f.reduced_hamiltonian(160));
            prop_assert!(((ev[1] - ev[0]) / f.omega_eff - 1.0).abs() < 1e-8);
            prop_assert!(((ev[0] - f.offset) / p.omega_r).abs() < 1e-8);
        }

        #[test]
        fn energy_matches_reduced_hamiltonian(nbar in 0.0f64..3.0, frac in -0.5f64..0.5, phase in 0.0f64..6.28) {
            // a displaced-free squeezed-ish test state: thermal plus a coherence between |0> and |2>
            let p = params(1e5);
            let q = frac * p.omega_r / p.beta;
            let f = bogoliubov_reduce(&p, q).unwrap();
            let n = 50;
            let mut rho = crate::fock::thermal_single_mode::<f64>(n, nbar);
            let c = 0.1 * rho[(0, 0)].re.min(rho[(2, 2)].re).sqrt() * Cplx::from_polar(1.0, phase);
            rho[(0, 2)] += c;
            rho[(2, 0)] += c.conj();
            let h = f.reduced_hamiltonian(n);
            let direct = (&rho * &h).trace().re;
            let m = ModeMoments::from_state(&rho);
            prop_assert!(((f.energy(&m) - direct) / p.omega_r).abs() < 1e-8);
        }
    }

    #[test]
    fn ground_state_of_reduced_hamiltonian_has_no_quasiparticles() {
        let p = params(1e5);
        let f = bogoliubov_reduce(&p, 0.5 * p.omega_r / p.beta).unwrap();
        let h = f.reduced_hamiltonian(120).map(|z| z.re);
        let eig = SymmetricEigen::new(h);
        let k = eig.eigenvalues.imin();
        let v = eig.eigenvectors.column(k);
        let rho = DMatrix::from_fn(120, 120, |i, j| Cplx::new(v[i] * v[j], 0.0));
        let m = ModeMoments::from_state(&rho);
        assert!(f.quasiparticle_number(&m).abs() < 1e-10);
    }

    #[test]
    fn entropy_and_temperature_values() {
        assert_eq!(effective_entropy(0.0).unwrap(), 0.0);
        assert_relative_eq!(effective_entropy(1.0).unwrap(), 2.0 * 2f64.ln(), max_relative = 1e-14);
        assert_relative_eq!(effective_temperature(3.0, 1.0).unwrap(), 3.0 / 2f64.ln(), max_relative = 1e-14);
        assert!(effective_entropy(-0.1).is_err());
        assert!(effective_temperature(1.0, -0.1).is_err());
    }

    proptest! {
        #[test]
        fn planck_inverts_effective_temperature(n in 1e-3f64..50.0, w in 0.1f64..10.0) {
            let t = effective_temperature(w, n).unwrap();
            prop_assert!((planck_occupation_scaled(w / t) - n).abs() < 1e-12 * n.max(1.0));
        }

        #[test]
        fn thermodynamic_consistency(n in 0.05f64..20.0, w in 0.1f64..10.0) {
            let h = 1e-5 * n;
            let ds = (effective_entropy(n + h).unwrap() - effective_entropy(n - h).unwrap()) / (2.0 * h);
            let expected = w / effective_temperature(w, n).unwrap();
            prop_assert!((ds - expected).abs() < 1e-6 * expected.max(1.0));
        }

        #[test]
        fn monotone_in_occupation(n in 0.01f64..20.0) {
            prop_assert!(effective_entropy(n * 1.01).unwrap() > effective_entropy(n).unwrap());
            prop_assert!(effective_temperature(1.0, n * 1.01).unwrap() > effective_temperature(1.0, n).unwrap());
        }

        #[test]
        fn frequency_form_matches_refined_ts_loop(a in 0.2f64..2.0, b in 0.01f64..0.1, lag in 0.3f64..2.5) {
            // smooth loop n(phi), w(phi); a fine T-S polygon converges to the w dn integral
            let k = 20_000;
            let phi = |j: usize| std::f64::consts::TAU * j as f64 / k as f64;
            let n: Vec<f64> = (0..k).map(|j| 0.5 + a * (1.0 + phi(j).sin())).collect();
            let w: Vec<f64> = (0..k).map(|j| 1.0 + b * (phi(j) - lag).cos()).collect();
            let s: Vec<f64> = n.iter().map(|&x| effective_entropy(x).unwrap()).collect();
            let t: Vec<f64> = n.iter().zip(&w).map(|(&x, &o)| effective_temperature(o, x).unwrap()).collect();
            let wdn = loop_integral_trapezoid(&n, &w);
            let tds = loop_integral(&s, &t);
            prop_assert!((wdn - tds).abs() < 1e-5 * wdn.abs().max(1e-3));
        }

        #[test]
        fn loop_area_is_shift_invariant(shift in 0usize..40) {
            let n = 40;
            let x: Vec<f64> = (0..n).map(|k| (k as f64 * 0.157).cos() * 2.0 + 0.3 * (k as f64).sin()).collect();
            let y: Vec<f64> = (0..n).map(|k| (k as f64 * 0.157).sin() + 0.1 * k as f64 / n as f64).collect();
            let a = loop_integral(&x, &y);
            let mut xs = x.clone();
            let mut ys = y.clone();
            xs.rotate_left(shift);
            ys.rotate_left(shift);
            prop_assert!((loop_integral(&xs, &ys) - a).abs() < 1e-10);
            prop_assert!((loop_integral_trapezoid(&xs, &ys) - a).abs() < 1e-10);
        }
    }

    #[test]
    fn loop_orientation() {
        // clockwise square in (S, T): heat in at T = 2, out at T = 1, W = 1
        let s = [0.0, 1.0, 1.0, 0.0];
        let t = [2.0, 2.0, 1.0, 1.0];
        assert_relative_eq!(loop_integral(&s, &t), 1.0);
    }

    fn synthetic_rows(p: &EngineParams<f64>, beta_on: bool) -> Vec<ObservableRow<f64>> {
        // occupation switches with the hot bath; q_z follows it with a lag
        let n = 400;
        let period = p.heating_period;
        (0..=n)
            .map(|k| {
                let t = period * k as f64 / n as f64;
                let phase = t / period;
                let hot = phase < 0.5;
                let nr = if hot { 1.5 * (1.0 - (-p.omega_r * t * 0.4).exp()) } else { 1.5 * (-(t - 0.5 * period) * 1e6).exp() };
                let qz = if beta_on { 1.0 + (std::f64::consts::TAU * phase - 1.0).sin() } else { 0.0 };
                ObservableRow {
                    time: t,
                    n_r: nr,
                    n_z: 0.0,
                    var_qr: 0.0,
                    var_pr: 0.0,
                    cov_qp_r: 0.0,
                    corr_qr2_pz: 0.0,
                    qr_sq: 0.0,
                    pz_mean: 0.0,
                    qz_displacement: qz,
                    a_mean: (0.0, 0.0),
                    a_sq_mean: (0.0, 0.0),
                    hot_on: if hot { 1.0 } else { 0.0 },
                }
            })
            .collect()
    }

    #[test]
    fn constant_frequency_loop_does_no_work_at_any_sampling() {
        // out and back along one isotherm-free path, sampled at different points
        let omega = [2.0; 7];
        let n = [0.0, 0.9, 2.5, 3.0, 1.7, 0.4, 0.05];
        assert!(loop_integral_trapezoid(&n, &omega).abs() < 1e-15);
        let s: Vec<f64> = n.iter().map(|&x| effective_entropy(x).unwrap()).collect();
        let t: Vec<f64> = n.iter().map(|&x| effective_temperature(2.0, x).unwrap()).collect();
        // the T-S polygon encloses spurious area here
        assert!(loop_integral(&s, &t).abs() > 1e-2);
    }

    #[test]
    fn zero_coupling_gives_degenerate_loop() {
        let p = params(1e5);
        let rows = synthetic_rows(&p, false);
        let rec = extract_cycle(&rows, &p, 0.0, StrokeWindows::for_params(&p)).unwrap();
        assert!(rec.degenerate);
        assert_eq!(rec.w_net, 0.0);
        assert!(!rec.warnings.is_empty());
    }

    #[test]
    fn strokes_partition_the_cycle() {
        let p = params(1e5);
        let rows = synthetic_rows(&p, true);
        let rec = extract_cycle(&rows, &p, 0.0, StrokeWindows::for_params(&p)).unwrap();
        assert_eq!(rec.points.len(), rows.len() - 1);
        for k in [Stroke::HotIsochore, Stroke::Expansion, Stroke::ColdIsochore, Stroke::Compression] {
            assert!(rec.points.iter().any(|q| q.stroke == k));
        }
        // strokes appear in cyclic order
        let order: Vec<Stroke> = rec.points.iter().map(|q| q.stroke).fold(Vec::new(), |mut v, s| {
            if v.last() != Some(&s) {
                v.push(s);
            }
            v
        });
        assert_eq!(order, vec![Stroke::HotIsochore, Stroke::Expansion, Stroke::ColdIsochore, Stroke::Compression]);
        assert!(rec.w_net != 0.0);
    }

    #[test]
    fn windows_must_fit() {
        let p = params(1e5);
        let rows = synthetic_rows(&p, true);
        let bad = StrokeWindows { hot: p.heating_period, cold: 1e-6 };
        assert!(extract_cycle(&rows, &p, 0.0, bad).is_err());
    }
}
