//! Classical stochastic counterpart of the engine: Euler-Maruyama integration
//! of the quadrature Langevin equations over a trajectory ensemble.
//!
//! Quadratures follow v = (X + iY)/sqrt 2, so the classical phonon number is
//! (X^2 + Y^2)/2 and a bath (kappa, nbar) drives each quadrature with a Wiener
//! increment of width sqrt(kappa nbar dt).

use nalgebra::RealField;
use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, EngineError, Result};
use crate::lindblad::Modulation;
use crate::observables::dissipated_power;
use crate::otto::{run_engine, EngineRunOptions};
use crate::scalar::Real;
use crate::trap::{planck_occupation, EngineParams};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LangevinState<T> {
    pub x_r: T,
    pub y_r: T,
    pub x_z: T,
    pub y_z: T,
    pub t: T,
}

impl<T: Real> LangevinState<T> {
    pub fn n_r(&self) -> T {
        T::lit(0.5) * (self.x_r * self.x_r + self.y_r * self.y_r)
    }

    pub fn n_z(&self) -> T {
        T::lit(0.5) * (self.x_z * self.x_z + self.y_z * self.y_z)
    }

    pub fn is_finite(&self) -> bool {
        self.x_r.is_finite() && self.y_r.is_finite() && self.x_z.is_finite() && self.y_z.is_finite()
    }

    /// Classical energy w_r n_r + w_z n_z - (sqrt2 b / 4)(2 X_r^2 + 1) X_z.
    pub fn energy(&self, params: &EngineParams<T>) -> T {
        let c = T::SQRT_2() * params.beta * T::lit(0.25);
        params.omega_r * self.n_r() + params.omega_z * self.n_z()
            - c * (T::lit(2.0) * self.x_r * self.x_r + T::one()) * self.x_z
    }
}

/// Radial-position drive on the axial momentum quadrature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AxialDrive {
    /// (sqrt2 b / 4)(2 X_r^2 + 1): Hamilton's equation of the classical coupling,
    /// consistent with the sqrt2 b X_r X_z force on the radial mode.
    #[default]
    Hamiltonian,
    /// (sqrt2 b / 4)(4 X_r^2 + 1).
    Doubled,
}

/// Standard-normal draws for one step, one per quadrature per bath.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NoiseDraws<T> {
    pub cold_r: [T; 2],
    pub hot_r: [T; 2],
    pub axial: [T; 2],
}

/// Drift-only right-hand side, without damping or noise.
fn hamiltonian_drift<T: Real>(s: &LangevinState<T>, params: &EngineParams<T>, drive: AxialDrive) -> [T; 4] {
    let c = T::SQRT_2() * params.beta * T::lit(0.25);
    let xr2 = s.x_r * s.x_r;
    let push = match drive {
        AxialDrive::Hamiltonian => c * (T::lit(2.0) * xr2 + T::one()),
        AxialDrive::Doubled => c * (T::lit(4.0) * xr2 + T::one()),
    };
    [
        params.omega_r * s.y_r,
        -params.omega_r * s.x_r + T::SQRT_2() * params.beta * s.x_r * s.x_z,
        params.omega_z * s.y_z,
        -params.omega_z * s.x_z + push,
    ]
}

/// One Euler-Maruyama step with hot-bath switch value `hot` in [0, 1].
pub fn step<T: Real>(
    s: &LangevinState<T>,
    params: &EngineParams<T>,
    dt: T,
    hot: T,
    noise: &NoiseDraws<T>,
    drive: AxialDrive,
) -> LangevinState<T> {
    let half = T::lit(0.5);
    let drift = hamiltonian_drift(s, params, drive);
    let gamma_r = half * (params.kappa_a + hot * params.kappa_h);
    let gamma_z = half * params.kappa_b;
    let w_cold = (params.kappa_a * params.nbar_a * dt).sqrt();
    let w_hot = (hot * params.kappa_h * params.nbar_h * dt).sqrt();
    let w_ax = (params.kappa_b * params.nbar_b * dt).sqrt();
    LangevinState {
        x_r: s.x_r + (drift[0] - gamma_r * s.x_r) * dt + w_cold * noise.cold_r[0] + w_hot * noise.hot_r[0],
        y_r: s.y_r + (drift[1] - gamma_r * s.y_r) * dt + w_cold * noise.cold_r[1] + w_hot * noise.hot_r[1],
        x_z: s.x_z + (drift[2] - gamma_z * s.x_z) * dt + w_ax * noise.axial[0],
        y_z: s.y_z + (drift[3] - gamma_z * s.y_z) * dt + w_ax * noise.axial[1],
        t: s.t + dt,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsembleOptions<T> {
    pub trajectories: usize,
    pub t_end: T,
    /// Largest step (s); steps are shortened so switching edges land on the grid.
    pub dt_max: T,
    pub seed: u64,
    /// Record every this many steps, plus at every switching edge.
    pub record_stride: usize,
    pub drive: AxialDrive,
    /// Turns the hot-bath square wave off entirely.
    pub hot_bath: bool,
}

impl<T: Real> EnsembleOptions<T> {
    /// dt = 2e-3 / w_r and a record every 100 steps.
    pub fn for_params(params: &EngineParams<T>, trajectories: usize, t_end: T, seed: u64) -> Self {
        Self {
            trajectories,
            t_end,
            dt_max: T::lit(2e-3) / params.omega_r,
            seed,
            record_stride: 100,
            drive: AxialDrive::default(),
            hot_bath: true,
        }
    }
}

/// Ensemble means and standard errors on the record grid.
#[derive(Debug, Clone, Serialize)]
pub struct EnsembleStats<T> {
    pub trajectories: usize,
    pub failed: usize,
    pub seed: u64,
    pub dt: T,
    pub times: Vec<T>,
    pub mean_n_z: Vec<T>,
    pub stderr_n_z: Vec<T>,
    pub mean_n_r: Vec<T>,
    pub stderr_n_r: Vec<T>,
    /// P_dis = hbar w_z kappa_b (<n_z> - nbar_b), in watts.
    pub mean_power: Vec<T>,
    pub stderr_power: Vec<T>,
    /// <X_r^2>, <Y_r^2>, <X_z^2>, <Y_z^2> at the final time.
    pub final_second_moments: [T; 4],
}

struct Segment<T> {
    steps: usize,
    dt: T,
    hot: T,
}

struct Schedule<T> {
    segments: Vec<Segment<T>>,
    times: Vec<T>,
    stride: usize,
}

impl<T: Real> Schedule<T> {
    fn new(params: &EngineParams<T>, opts: &EnsembleOptions<T>) -> Self {
        let wave = Modulation::SquareWave { period: params.heating_period, duty: params.heating_duty, phase: T::zero() };
        let mut bounds = if opts.hot_bath { wave.edges(T::zero(), opts.t_end) } else { Vec::new() };
        bounds.push(opts.t_end);
        let mut segments = Vec::new();
        let mut times = vec![T::zero()];
        let mut start = T::zero();
        let mut since = 0usize;
        for end in bounds {
            let len = end - start;
            let n = Float::ceil(len / opts.dt_max).to_usize().unwrap_or(1).max(1);
            let dt = len / T::from_usize_lossy(n);
            let mid = start + T::lit(0.5) * len;
            let hot = if opts.hot_bath { wave.value(mid) } else { T::zero() };
            for k in 0..n {
                since += 1;
                if since >= opts.record_stride || k + 1 == n {
                    times.push(if k + 1 == n { end } else { start + dt * T::from_usize_lossy(k + 1) });
                    since = 0;
                }
            }
            segments.push(Segment { steps: n, dt, hot });
            start = end;
        }
        Self { segments, times, stride: opts.record_stride }
    }
}

/// Thermal classical initial condition: each quadrature Gaussian with variance nbar(T_0).
fn initial_state<T: Real>(params: &EngineParams<T>, rng: &mut ChaCha8Rng) -> Result<LangevinState<T>> {
    let sr = planck_occupation(params.omega_r, params.t_0)?.sqrt();
    let sz = planck_occupation(params.omega_z, params.t_0)?.sqrt();
    let mut g = || T::lit(StandardNormal.sample(rng));
    Ok(LangevinState { x_r: sr * g(), y_r: sr * g(), x_z: sz * g(), y_z: sz * g(), t: T::zero() })
}

/// Per-record sums over a block of trajectories.
#[derive(Clone)]
struct BlockSums<T> {
    n_z: Vec<T>,
    n_z2: Vec<T>,
    n_r: Vec<T>,
    n_r2: Vec<T>,
    moments: [T; 4],
    ok: usize,
    failed: usize,
}

impl<T: Real> BlockSums<T> {
    fn zeros(n: usize) -> Self {
        Self {
            n_z: vec![T::zero(); n],
            n_z2: vec![T::zero(); n],
            n_r: vec![T::zero(); n],
            n_r2: vec![T::zero(); n],
            moments: [T::zero(); 4],
            ok: 0,
            failed: 0,
        }
    }

    fn absorb(&mut self, other: &Self) {
        for (a, b) in self.n_z.iter_mut().zip(&other.n_z) {
            *a += *b;
        }
        for (a, b) in self.n_z2.iter_mut().zip(&other.n_z2) {
            *a += *b;
        }
        for (a, b) in self.n_r.iter_mut().zip(&other.n_r) {
            *a += *b;
        }
        for (a, b) in self.n_r2.iter_mut().zip(&other.n_r2) {
            *a += *b;
        }
        for k in 0..4 {
            self.moments[k] += other.moments[k];
        }
        self.ok += other.ok;
        self.failed += other.failed;
    }
}

const BLOCK: usize = 64;

fn run_trajectory<T: Real>(
    params: &EngineParams<T>,
    opts: &EnsembleOptions<T>,
    schedule: &Schedule<T>,
    index: usize,
    nz: &mut [T],
    nr: &mut [T],
) -> Result<Option<LangevinState<T>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(index as u64);
    let mut s = initial_state(params, &mut rng)?;
    let mut rec = 0;
    nz[rec] = s.n_z();
    nr[rec] = s.n_r();
    rec += 1;
    let mut since = 0usize;
    let g = |rng: &mut ChaCha8Rng| -> T { T::lit(StandardNormal.sample(rng)) };
    for seg in &schedule.segments {
        let cold_active = params.nbar_a > T::zero();
        let hot_active = seg.hot > T::zero() && params.nbar_h > T::zero();
        let axial_active = params.nbar_b > T::zero();
        for k in 0..seg.steps {
            let mut noise = NoiseDraws::default();
            if cold_active {
                noise.cold_r = [g(&mut rng), g(&mut rng)];
            }
            if hot_active {
                noise.hot_r = [g(&mut rng), g(&mut rng)];
            }
            if axial_active {
                noise.axial = [g(&mut rng), g(&mut rng)];
            }
            s = step(&s, params, seg.dt, seg.hot, &noise, opts.drive);
            since += 1;
            if since >= schedule.stride || k + 1 == seg.steps {
                if !s.is_finite() {
                    return Ok(None);
                }
                nz[rec] = s.n_z();
                nr[rec] = s.n_r();
                rec += 1;
                since = 0;
            }
        }
    }
    debug_assert_eq!(rec, nz.len());
    Ok(if s.is_finite() { Some(s) } else { None })
}

/// Runs `trajectories` independent realisations and reduces them in fixed
/// blocks of 64, so results do not depend on the thread count.
pub fn ensemble_run<T: Real>(params: &EngineParams<T>, opts: &EnsembleOptions<T>) -> Result<EnsembleStats<T>> {
    params.validate()?;
    if opts.trajectories < 100 {
        return Err(invalid("trajectories", "at least 100 trajectories are required"));
    }
    if !(opts.dt_max > T::zero()) || !(opts.t_end > T::zero()) {
        return Err(invalid("dt", "time step and duration must be positive"));
    }
    if opts.record_stride == 0 {
        return Err(invalid("record_stride", "must be at least 1"));
    }
    let schedule = Schedule::new(params, opts);
    let n_rec = schedule.times.len();
    let n_blocks = opts.trajectories.div_ceil(BLOCK);
    let blocks: Vec<Result<BlockSums<T>>> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let mut sums = BlockSums::zeros(n_rec);
            let mut nz = vec![T::zero(); n_rec];
            let mut nr = vec![T::zero(); n_rec];
            for i in (b * BLOCK)..((b + 1) * BLOCK).min(opts.trajectories) {
                match run_trajectory(params, opts, &schedule, i, &mut nz, &mut nr)? {
                    Some(last) => {
                        for k in 0..n_rec {
                            sums.n_z[k] += nz[k];
                            sums.n_z2[k] += nz[k] * nz[k];
                            sums.n_r[k] += nr[k];
                            sums.n_r2[k] += nr[k] * nr[k];
                        }
                        sums.moments[0] += last.x_r * last.x_r;
                        sums.moments[1] += last.y_r * last.y_r;
                        sums.moments[2] += last.x_z * last.x_z;
                        sums.moments[3] += last.y_z * last.y_z;
                        sums.ok += 1;
                    }
                    None => sums.failed += 1,
                }
            }
            Ok(sums)
        })
        .collect();
    let mut total = BlockSums::zeros(n_rec);
    for b in blocks {
        total.absorb(&b?);
    }
    if total.failed * 100 > opts.trajectories {
        return Err(EngineError::EnsembleDiverged { failed: total.failed, total: opts.trajectories });
    }
    let n = T::from_usize_lossy(total.ok);
    let stats = |sum: &[T], sum2: &[T]| -> (Vec<T>, Vec<T>) {
        sum.iter()
            .zip(sum2)
            .map(|(&s, &s2)| {
                let mean = s / n;
                let var = Float::max((s2 - n * mean * mean) / (n - T::one()), T::zero());
                (mean, (var / n).sqrt())
            })
            .unzip()
    };
    let (mean_n_z, stderr_n_z) = stats(&total.n_z, &total.n_z2);
    let (mean_n_r, stderr_n_r) = stats(&total.n_r, &total.n_r2);
    let mean_power = mean_n_z.iter().map(|&m| dissipated_power(m, params)).collect();
    let scale = dissipated_power(params.nbar_b + T::one(), params);
    let stderr_power = stderr_n_z.iter().map(|&s| s * scale).collect();
    Ok(EnsembleStats {
        trajectories: total.ok,
        failed: total.failed,
        seed: opts.seed,
        dt: opts.dt_max,
        times: schedule.times,
        mean_n_z,
        stderr_n_z,
        mean_n_r,
        stderr_n_r,
        mean_power,
        stderr_power,
        final_second_moments: total.moments.map(|m| m / n),
    })
}

impl<T: Real> EnsembleStats<T> {
    /// Index range of records with time in [t0, t1].
    pub fn window(&self, t0: T, t1: T) -> std::ops::Range<usize> {
        let lo = self.times.iter().position(|&t| t >= t0).unwrap_or(self.times.len());
        let hi = self.times.iter().rposition(|&t| t <= t1).map(|i| i + 1).unwrap_or(lo);
        lo..hi.max(lo)
    }

    /// (max mean power, its standard error, time) over records in [t0, t1].
    pub fn max_power(&self, t0: T, t1: T) -> Option<(T, T, T)> {
        self.window(t0, t1)
            .max_by(|&a, &b| self.mean_power[a].partial_cmp(&self.mean_power[b]).unwrap())
            .map(|k| (self.mean_power[k], self.stderr_power[k], self.times[k]))
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["time_s", "mean_n_z", "stderr_n_z", "P_dis_w", "stderr_P_dis_w"])?;
        for k in 0..self.times.len() {
            w.write_record([
                format!("{:e}", self.times[k].as_f64()),
                format!("{}", self.mean_n_z[k].as_f64()),
                format!("{:e}", self.stderr_n_z[k].as_f64()),
                format!("{:e}", self.mean_power[k].as_f64()),
                format!("{:e}", self.stderr_power[k].as_f64()),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Quantum and classical maximum dissipated power at one coupling.
#[derive(Debug, Clone, Serialize)]
pub struct CrossoverRow<T> {
    pub beta_khz: T,
    pub p_quantum_w: Option<T>,
    pub p_classical_w: Option<T>,
    pub stderr_classical_w: Option<T>,
    /// (P_q - P_c) / stderr_c.
    pub significance: Option<T>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CrossoverTable<T> {
    pub rows: Vec<CrossoverRow<T>>,
    /// Smallest swept coupling (kHz) from which the quantum excess stays above two standard errors.
    pub crossover_beta_khz: Option<T>,
}

/// Sweeps beta; for each value runs both engines into their limit cycles and
/// compares the maxima of P_dis over the last heating period.
pub fn power_crossover_sweep<T: Real + RealField>(
    betas: &[T],
    params: &EngineParams<T>,
    quantum: &EngineRunOptions<T>,
    classical: &EnsembleOptions<T>,
) -> Result<CrossoverTable<T>> {
    if betas.is_empty() {
        return Err(invalid("beta_sweep", "sweep axis empty"));
    }
    let rows: Vec<CrossoverRow<T>> = betas
        .iter()
        .map(|&beta| {
            let p = params.with_beta(beta);
            let mut row = CrossoverRow {
                beta_khz: beta / T::TAU() * T::lit(1e-3),
                p_quantum_w: None,
                p_classical_w: None,
                stderr_classical_w: None,
                significance: None,
                error: None,
            };
            if let Err(e) = p.validate() {
                row.error = Some(e.to_string());
                return row;
            }
            match run_engine(&p, quantum) {
                Ok(run) => {
                    let pmax = run
                        .trace
                        .rows
                        .iter()
                        .map(|r| dissipated_power(r.n_z, &p))
                        .fold(T::neg_infinity(), Float::max);
                    row.p_quantum_w = Some(pmax);
                }
                Err(e) => row.error = Some(format!("quantum: {e}")),
            }
            let t_end = p.heating_period * T::from_usize_lossy(quantum.cycles);
            let copts = EnsembleOptions { t_end, ..*classical };
            match ensemble_run(&p, &copts) {
                Ok(stats) => {
                    if let Some((pc, se, _)) = stats.max_power(t_end - p.heating_period, t_end) {
                        row.p_classical_w = Some(pc);
                        row.stderr_classical_w = Some(se);
                    }
                }
                Err(e) => {
                    let msg = format!("classical: {e}");
                    row.error = Some(match row.error.take() {
                        Some(prev) => format!("{prev}; {msg}"),
                        None => msg,
                    });
                }
            }
            if let (Some(q), Some(c), Some(se)) = (row.p_quantum_w, row.p_classical_w, row.stderr_classical_w) {
                row.significance = Some(if se > T::zero() { (q - c) / se } else { T::zero() });
            }
            row
        })
        .collect();
    let mut crossover = None;
    for r in rows.iter().rev() {
        match r.significance {
            Some(s) if s > T::lit(2.0) => crossover = Some(r.beta_khz),
            _ => break,
        }
    }
    Ok(CrossoverTable { rows, crossover_beta_khz: crossover })
}

impl<T: Real> CrossoverTable<T> {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["beta_khz", "P_q", "P_c", "stderr_c", "significance", "error"])?;
        let opt = |v: Option<T>| v.map(|x| format!("{:e}", x.as_f64())).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                format!("{}", r.beta_khz.as_f64()),
                opt(r.p_quantum_w),
                opt(r.p_classical_w),
                opt(r.stderr_classical_w),
                r.significance.map(|x| format!("{}", x.as_f64())).unwrap_or_default(),
                r.error.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
