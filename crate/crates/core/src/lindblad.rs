//! Time propagation of the two-mode master equation with a periodically
//! switched hot bath.
//!
//! The generator is assembled from dense operators and then compiled into
//! constant-offset diagonals: H and the jump operators have only a handful of
//! them, so one right-hand side costs O(D^2) per diagonal instead of O(D^3).
//! Integration is fixed-step RK4 with every modulation edge on the step grid.

use nalgebra::{Cholesky, DMatrix, RealField};
use num_traits::{Float, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{EngineError, Result};
use crate::fock::{conj_transpose, mode_operators, DensityMatrix, FockDims, OperatorMatrix};
use crate::scalar::{cplx, creal, Cplx, Real};
use crate::trap::EngineParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Radial,
    Axial,
}

/// Time dependence of a bath rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Modulation<T> {
    Constant,
    /// u(t) = 1 on [phase + k P, phase + k P + duty P), 0 otherwise.
    SquareWave { period: T, duty: T, phase: T },
}

impl<T: Real> Modulation<T> {
    pub fn value(&self, t: T) -> T {
        match *self {
            Modulation::Constant => T::one(),
            Modulation::SquareWave { period, duty, phase } => {
                let x = (t - phase) / period;
                let frac = x - x.floor();
                if frac < duty {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }

    /// Switching instants strictly inside (t0, t1).
    pub fn edges(&self, t0: T, t1: T) -> Vec<T> {
        let Modulation::SquareWave { period, duty, phase } = *self else {
            return Vec::new();
        };
        let mut out = Vec::new();
        let k0 = ((t0 - phase) / period).floor() - T::one();
        let mut k = k0;
        loop {
            let on = phase + k * period;
            if on >= t1 {
                break;
            }
            for e in [on, on + duty * period] {
                if e > t0 && e < t1 {
                    out.push(e);
                }
            }
            k += T::one();
        }
        out
    }

    pub fn period(&self) -> Option<T> {
        match *self {
            Modulation::Constant => None,
            Modulation::SquareWave { period, .. } => Some(period),
        }
    }
}

/// One thermal bath coupled to a mode: rate kappa, occupation nbar.
/// Expands to the two channels kappa (nbar + 1) D[c] and kappa nbar D[c^dag].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BathSpec<T> {
    pub mode: Mode,
    pub rate: T,
    pub nbar: T,
    pub modulation: Modulation<T>,
}

impl<T: Real> BathSpec<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.rate >= T::zero()) || !(self.nbar >= T::zero()) {
            return Err(EngineError::Config("bath rate and occupation must be non-negative".into()));
        }
        if let Modulation::SquareWave { period, duty, .. } = self.modulation {
            if !(period > T::zero()) || duty < T::zero() || duty > T::one() {
                return Err(EngineError::Config("square wave needs period > 0 and duty in [0, 1]".into()));
            }
        }
        Ok(())
    }
}

/// The three baths of the engine: cold radial (kappa_a), switched hot radial
/// (kappa_h u(t)) and cold axial (kappa_b).
pub fn engine_baths<T: Real>(params: &EngineParams<T>) -> Vec<BathSpec<T>> {
    vec![
        BathSpec { mode: Mode::Radial, rate: params.kappa_a, nbar: params.nbar_a, modulation: Modulation::Constant },
        BathSpec {
            mode: Mode::Radial,
            rate: params.kappa_h,
            nbar: params.nbar_h,
            modulation: Modulation::SquareWave {
                period: params.heating_period,
                duty: params.heating_duty,
                phase: T::zero(),
            },
        },
        BathSpec { mode: Mode::Axial, rate: params.kappa_b, nbar: params.nbar_b, modulation: Modulation::Constant },
    ]
}

/// Single-channel Lindblad dissipator L rho L^dag - 1/2 {L^dag L, rho} (dense reference form).
pub fn lindblad_dissipator<T: Real>(rho: &DMatrix<Cplx<T>>, l: &DMatrix<Cplx<T>>) -> DMatrix<Cplx<T>> {
    let l_dag = conj_transpose(l);
    let ltl = &l_dag * l;
    let half = creal(T::lit(0.5));
    l * rho * &l_dag - (&ltl * rho + rho * &ltl).map(|x| x * half)
}

/// kappa (nbar + 1) D[op] rho + kappa nbar D[op^dag] rho.
pub fn dissipator_apply<T: Real>(
    rho: &DMatrix<Cplx<T>>,
    op: &OperatorMatrix<T>,
    kappa: T,
    nbar: T,
) -> DMatrix<Cplx<T>> {
    let down = lindblad_dissipator(rho, &op.entries).map(|x| x * creal(kappa * (nbar + T::one())));
    if nbar == T::zero() {
        return down;
    }
    let op_dag = conj_transpose(&op.entries);
    down + lindblad_dissipator(rho, &op_dag).map(|x| x * creal(kappa * nbar))
}

/// Coefficients of one diagonal, specialised so that purely real or purely
/// imaginary diagonals (the common case for ladder operators) cost a real
/// times complex product.
#[derive(Debug, Clone)]
enum Coeffs<T> {
    Real(Vec<T>),
    Imag(Vec<T>),
    Complex(Vec<Cplx<T>>),
}

/// One constant-offset diagonal: entries M[i, i + offset] for i in lo..lo + len.
#[derive(Debug, Clone)]
struct Diagonal<T> {
    offset: isize,
    lo: usize,
    len: usize,
    coeffs: Coeffs<T>,
}

/// A matrix stored as its nonzero diagonals. In the radial-major product
/// basis every ladder-built operator has only a few distinct offsets, and the
/// inner loops over a diagonal are contiguous.
#[derive(Debug, Clone)]
struct DiagonalForm<T> {
    diagonals: Vec<Diagonal<T>>,
}

impl<T: Real> DiagonalForm<T> {
    fn from_dense(m: &DMatrix<Cplx<T>>) -> Self {
        let d = m.nrows() as isize;
        let mut diagonals = Vec::new();
        for offset in (1 - d)..d {
            let lo = (-offset).max(0) as usize;
            let hi = (d - offset).min(d) as usize;
            let vals: Vec<Cplx<T>> = (lo..hi).map(|i| m[(i, (i as isize + offset) as usize)]).collect();
            let Some(first) = vals.iter().position(|v| !v.is_zero()) else { continue };
            let last = vals.iter().rposition(|v| !v.is_zero()).unwrap_or(first);
            let vals = &vals[first..=last];
            let coeffs = if vals.iter().all(|v| v.im == T::zero()) {
                Coeffs::Real(vals.iter().map(|v| v.re).collect())
            } else if vals.iter().all(|v| v.re == T::zero()) {
                Coeffs::Imag(vals.iter().map(|v| v.im).collect())
            } else {
                Coeffs::Complex(vals.to_vec())
            };
            diagonals.push(Diagonal { offset, lo: lo + first, len: vals.len(), coeffs });
        }
        Self { diagonals }
    }

    fn is_real(&self) -> bool {
        self.diagonals.iter().all(|g| matches!(g.coeffs, Coeffs::Real(_)))
    }
}

impl<T: Real> Diagonal<T> {
    /// dst[i] += M[i, i + offset] * src[i + offset] over the stored range.
    #[inline(always)]
    fn axpy(&self, src: &[Cplx<T>], dst: &mut [Cplx<T>]) {
        let from = (self.lo as isize + self.offset) as usize;
        let src = &src[from..from + self.len];
        let dst = &mut dst[self.lo..self.lo + self.len];
        match &self.coeffs {
            Coeffs::Real(c) => {
                for ((y, &c), &r) in dst.iter_mut().zip(c).zip(src) {
                    *y += r * c;
                }
            }
            Coeffs::Imag(c) => {
                for ((y, &c), &r) in dst.iter_mut().zip(c).zip(src) {
                    y.re -= r.im * c;
                    y.im += r.re * c;
                }
            }
            Coeffs::Complex(c) => {
                for ((y, &c), &r) in dst.iter_mut().zip(c).zip(src) {
                    *y += c * r;
                }
            }
        }
    }

    /// Like `axpy` with every coefficient multiplied by the real scalar `s`.
    #[inline(always)]
    fn axpy_real_scaled(&self, src: &[Cplx<T>], dst: &mut [Cplx<T>], s: T) {
        let from = (self.lo as isize + self.offset) as usize;
        let src = &src[from..from + self.len];
        let dst = &mut dst[self.lo..self.lo + self.len];
        if let Coeffs::Real(c) = &self.coeffs {
            for ((y, &c), &r) in dst.iter_mut().zip(c).zip(src) {
                *y += r * (c * s);
            }
        }
    }

    /// Like `axpy` with every coefficient multiplied by the complex scalar `s`.
    #[inline(always)]
    fn axpy_scaled(&self, src: &[Cplx<T>], dst: &mut [Cplx<T>], s: Cplx<T>) {
        let from = (self.lo as isize + self.offset) as usize;
        let src = &src[from..from + self.len];
        let dst = &mut dst[self.lo..self.lo + self.len];
        for (k, (y, &r)) in dst.iter_mut().zip(src).enumerate() {
            *y += self.value(k) * r * s;
        }
    }

    #[inline(always)]
    fn value(&self, k: usize) -> Cplx<T> {
        match &self.coeffs {
            Coeffs::Real(c) => creal(c[k]),
            Coeffs::Imag(c) => cplx(T::zero(), c[k]),
            Coeffs::Complex(c) => c[k],
        }
    }

    fn value_at(&self, i: usize) -> Option<Cplx<T>> {
        if i >= self.lo && i < self.lo + self.len {
            Some(self.value(i - self.lo))
        } else {
            None
        }
    }
}

/// All dissipative terms sharing one jump operator.
#[derive(Debug, Clone)]
struct Channel<T: Real> {
    jump: DiagonalForm<T>,
    real_jump: bool,
    l_dag_l: DMatrix<Cplx<T>>,
    terms: Vec<(T, Modulation<T>)>,
}

impl<T: Real> Channel<T> {
    fn rate_at(&self, t: T) -> T {
        self.terms.iter().fold(T::zero(), |acc, (r, m)| acc + *r * m.value(t))
    }
}

/// Compiled right-hand side of the master equation.
#[derive(Debug, Clone)]
pub struct LindbladGenerator<T: Real> {
    dims: FockDims,
    hamiltonian: DMatrix<Cplx<T>>,
    channels: Vec<Channel<T>>,
    // -i H_eff with H_eff = H - i/2 sum gamma L^dag L at the current modulation values.
    minus_i_h_eff: DiagonalForm<T>,
    active_rates: Vec<T>,
}

impl<T: Real> LindbladGenerator<T> {
    pub fn new(h: &OperatorMatrix<T>, baths: &[BathSpec<T>]) -> Result<Self> {
        let dims = h.dims;
        let ops = mode_operators::<T>(dims);
        // (mode, raising) -> channel index
        let mut keys: Vec<(Mode, bool)> = Vec::new();
        let mut channels: Vec<Channel<T>> = Vec::new();
        for bath in baths {
            bath.validate()?;
            let lower = match bath.mode {
                Mode::Radial => &ops.a,
                Mode::Axial => &ops.b,
            };
            let raise = lower.adjoint();
            let pairs = [(lower, false, bath.rate * (bath.nbar + T::one())), (&raise, true, bath.rate * bath.nbar)];
            for (op, raising, rate) in pairs {
                if rate == T::zero() {
                    continue;
                }
                let key = (bath.mode, raising);
                match keys.iter().position(|k| *k == key) {
                    Some(idx) => channels[idx].terms.push((rate, bath.modulation)),
                    None => {
                        let jump = DiagonalForm::from_dense(&op.entries);
                        keys.push(key);
                        channels.push(Channel {
                            real_jump: jump.is_real(),
                            jump,
                            l_dag_l: conj_transpose(&op.entries) * &op.entries,
                            terms: vec![(rate, bath.modulation)],
                        });
                    }
                }
            }
        }
        let mut generator = Self {
            dims,
            hamiltonian: h.entries.clone(),
            minus_i_h_eff: DiagonalForm { diagonals: Vec::new() },
            channels,
            active_rates: Vec::new(),
        };
        generator.rebuild(T::zero());
        Ok(generator)
    }

    pub fn dims(&self) -> FockDims {
        self.dims
    }

    /// All switching instants of the baths in (t0, t1), sorted and deduplicated.
    pub fn edges(&self, t0: T, t1: T) -> Vec<T> {
        let mut e: Vec<T> =
            self.channels.iter().flat_map(|c| c.terms.iter().flat_map(move |(_, m)| m.edges(t0, t1))).collect();
        e.sort_by(|a, b| a.partial_cmp(b).unwrap());
        e.dedup();
        e
    }

    /// Evaluates modulations at `t` and rebuilds H_eff when a rate changed.
    pub fn set_time(&mut self, t: T) {
        let rates: Vec<T> = self.channels.iter().map(|c| c.rate_at(t)).collect();
        if rates != self.active_rates {
            self.rebuild(t);
        }
    }

    fn rebuild(&mut self, t: T) {
        let rates: Vec<T> = self.channels.iter().map(|c| c.rate_at(t)).collect();
        let mut h_eff = self.hamiltonian.clone();
        for (c, &g) in self.channels.iter().zip(&rates) {
            if g != T::zero() {
                let s = cplx(T::zero(), -g * T::lit(0.5));
                h_eff += c.l_dag_l.map(|x| x * s);
            }
        }
        h_eff *= cplx(T::zero(), -T::one());
        self.minus_i_h_eff = DiagonalForm::from_dense(&h_eff);
        self.active_rates = rates;
    }

    /// Power-iteration estimate of the largest |eigenvalue| (rad/s) at the
    /// currently set modulation values. Approaches the spectral radius from below.
    pub fn spectral_radius_estimate(&self, iterations: usize) -> T {
        let d = self.dims.dim();
        // fixed pseudo-random Hermitian start so that every mode is excited
        let x = |k: usize| T::lit(((k.wrapping_mul(2_654_435_761) >> 7) % 1000) as f64 / 1000.0 - 0.5);
        let mut v = vec![Cplx::<T>::zero(); d * d];
        for j in 0..d {
            for i in 0..=j {
                let z = if i == j { creal(x(i * d + j)) } else { cplx(x(i * d + j), x(j * d + i)) };
                v[i + j * d] = z;
                v[j + i * d] = z.conj();
            }
        }
        let norm = |v: &[Cplx<T>]| v.iter().fold(T::zero(), |a, z| a + z.norm_sqr()).sqrt();
        let n0 = norm(&v);
        v.iter_mut().for_each(|z| *z = z.unscale(n0));
        let mut w = vec![Cplx::<T>::zero(); d * d];
        let mut estimate = T::zero();
        for k in 0..iterations {
            self.rhs(&v, &mut w);
            let n = norm(&w);
            if n == T::zero() {
                return T::zero();
            }
            // the ratio oscillates when the dominant eigenvalues are a complex pair
            if k + 20 >= iterations {
                estimate = Float::max(estimate, n);
            }
            v.iter_mut().zip(&w).for_each(|(a, b)| *a = b.unscale(n));
        }
        estimate
    }

    /// d rho / dt at the currently set modulation values. Slices are column-major D x D.
    pub fn rhs(&self, rho: &[Cplx<T>], out: &mut [Cplx<T>]) {
        #[cfg(target_arch = "x86_64")]
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the avx2 feature was detected on this CPU.
            unsafe { self.rhs_avx2(rho, out) };
            return;
        }
        self.rhs_portable(rho, out);
    }

    /// Same kernel compiled with 256-bit vectors. No fused operations are
    /// enabled, so results are bit-identical to the portable build.
    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn rhs_avx2(&self, rho: &[Cplx<T>], out: &mut [Cplx<T>]) {
        self.rhs_portable(rho, out);
    }

    #[inline(always)]
    fn rhs_portable(&self, rho: &[Cplx<T>], out: &mut [Cplx<T>]) {
        let d = self.dims.dim();
        debug_assert_eq!(rho.len(), d * d);
        debug_assert_eq!(out.len(), d * d);
        out.fill(Cplx::zero());

        for j in 0..d {
            let col = &rho[j * d..(j + 1) * d];
            let out_col = &mut out[j * d..(j + 1) * d];
            // Y = -i H_eff rho
            for g in &self.minus_i_h_eff.diagonals {
                g.axpy(col, out_col);
            }
            // Y += 1/2 sum gamma L rho L^dag; column j picks up rho[:, j + o_b] conj(L[j, j + o_b])
            for (c, &rate) in self.channels.iter().zip(&self.active_rates) {
                if rate == T::zero() {
                    continue;
                }
                let half = rate * T::lit(0.5);
                for gb in &c.jump.diagonals {
                    let Some(lb) = gb.value_at(j) else { continue };
                    let jc = (j as isize + gb.offset) as usize;
                    let src = &rho[jc * d..(jc + 1) * d];
                    for ga in &c.jump.diagonals {
                        if c.real_jump {
                            ga.axpy_real_scaled(src, out_col, lb.re * half);
                        } else {
                            ga.axpy_scaled(src, out_col, lb.conj() * half);
                        }
                    }
                }
            }
        }

        // d rho / dt = Y + Y^dag, Hermitian by construction; tiled for cache locality
        const TILE: usize = 32;
        for jb in (0..d).step_by(TILE) {
            for ib in (0..=jb).step_by(TILE) {
                for j in jb..(jb + TILE).min(d) {
                    for i in ib..(ib + TILE).min(j) {
                        let s = out[i + j * d] + out[j + i * d].conj();
                        out[i + j * d] = s;
                        out[j + i * d] = s.conj();
                    }
                }
            }
        }
        for j in 0..d {
            let diag = out[j + j * d];
            out[j + j * d] = creal(diag.re + diag.re);
        }
    }
}

/// Tolerances of the monitored state invariants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub trace: f64,
    pub hermiticity: f64,
    /// Abort when the smallest eigenvalue drops below -positivity.
    pub positivity: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { trace: 1e-8, hermiticity: 1e-10, positivity: 1e-6 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropagationOptions<T> {
    /// Largest RK4 step (s); actual steps are shortened so edges land on the grid.
    pub dt_max: T,
    /// Snapshot every this many steps, plus at every modulation edge.
    pub snapshot_stride: usize,
    pub keep_states: bool,
    /// Positivity check every this many steps; 0 disables it.
    pub positivity_interval: usize,
    pub tolerances: Tolerances,
}

impl<T: Real> PropagationOptions<T> {
    /// dt = 0.05 / omega_r, snapshots every 20 steps, positivity every 50 steps.
    pub fn for_params(params: &EngineParams<T>) -> Self {
        Self {
            dt_max: T::lit(0.05) / params.omega_r,
            snapshot_stride: 20,
            keep_states: false,
            positivity_interval: 50,
            tolerances: Tolerances::default(),
        }
    }
}

/// Per-snapshot numerical health.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SnapshotDiagnostics {
    pub trace_error: f64,
    pub hermiticity_error: f64,
}

/// Aggregate health over a propagation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct RunHealth {
    pub steps: usize,
    pub max_trace_error: f64,
    pub max_hermiticity_error: f64,
    pub positivity_checks: usize,
    pub positivity_failures: usize,
}

impl RunHealth {
    fn merge(&mut self, other: &RunHealth) {
        self.steps += other.steps;
        self.max_trace_error = self.max_trace_error.max(other.max_trace_error);
        self.max_hermiticity_error = self.max_hermiticity_error.max(other.max_hermiticity_error);
        self.positivity_checks += other.positivity_checks;
        self.positivity_failures += other.positivity_failures;
    }
}

/// A state at one instant of the trajectory, handed to observers.
pub struct Snapshot<'a, T: Real> {
    pub time: T,
    pub rho: &'a DensityMatrix<T>,
    /// Hot-bath switching function at `time` (left-continuous square wave).
    pub hot_on: T,
}

#[derive(Debug, Clone)]
pub struct PropagationResult<T: Real> {
    pub times: Vec<T>,
    pub states: Vec<DensityMatrix<T>>,
    pub diagnostics: Vec<SnapshotDiagnostics>,
    pub health: RunHealth,
}

/// Stateful integrator holding rho(t).
pub struct Propagator<T: Real> {
    generator: LindbladGenerator<T>,
    hot: Modulation<T>,
    rho: DensityMatrix<T>,
    time: T,
    options: PropagationOptions<T>,
    k: [Vec<Cplx<T>>; 4],
    stage: Vec<Cplx<T>>,
    steps_since_positivity: usize,
}

impl<T: Real + RealField> Propagator<T> {
    pub fn new(
        h: &OperatorMatrix<T>,
        baths: &[BathSpec<T>],
        rho0: DensityMatrix<T>,
        options: PropagationOptions<T>,
    ) -> Result<Self> {
        if rho0.dims != h.dims {
            return Err(EngineError::Config("initial state and Hamiltonian dimensions differ".into()));
        }
        if !(options.dt_max > T::zero()) {
            return Err(EngineError::Config("dt must be positive".into()));
        }
        let generator = LindbladGenerator::new(h, baths)?;
        let n = h.dims.dim() * h.dims.dim();
        let hot = baths
            .iter()
            .map(|b| b.modulation)
            .find(|m| matches!(m, Modulation::SquareWave { .. }))
            .unwrap_or(Modulation::Constant);
        Ok(Self {
            generator,
            hot,
            rho: rho0,
            time: T::zero(),
            options,
            k: std::array::from_fn(|_| vec![Cplx::zero(); n]),
            stage: vec![Cplx::zero(); n],
            steps_since_positivity: 0,
        })
    }

    pub fn time(&self) -> T {
        self.time
    }

    pub fn state(&self) -> &DensityMatrix<T> {
        &self.rho
    }

    /// The switched (hot) modulation, if any bath has one.
    pub fn hot_modulation(&self) -> Modulation<T> {
        self.hot
    }

    fn hot_value(&self, t: T) -> T {
        match self.hot {
            Modulation::Constant => T::zero(),
            m => m.value(t),
        }
    }

    /// Integrates up to `t_end`, calling `observer` at t = now, every
    /// `snapshot_stride` steps, at every modulation edge and at `t_end`.
    pub fn advance<F>(&mut self, t_end: T, observer: &mut F) -> Result<RunHealth>
    where
        F: FnMut(&Snapshot<'_, T>),
    {
        let mut health = RunHealth::default();
        self.observe(observer, &mut health)?;
        let t_start = self.time;
        if !(t_end > t_start) {
            return Ok(health);
        }
        let mut breaks = self.generator.edges(t_start, t_end);
        breaks.push(t_end);

        let mut since_snapshot = 0usize;
        let mut seg_start = t_start;
        for &seg_end in &breaks {
            let len = seg_end - seg_start;
            let n = Float::ceil(len / self.options.dt_max).to_usize().unwrap_or(1).max(1);
            let dt = len / T::from_usize_lossy(n);
            // modulation is constant on the open segment
            self.generator.set_time(seg_start + T::lit(0.5) * len);
            for s in 0..n {
                self.rk4_step(dt);
                self.time = if s + 1 == n { seg_end } else { seg_start + dt * T::from_usize_lossy(s + 1) };
                health.steps += 1;
                since_snapshot += 1;
                self.steps_since_positivity += 1;
                if self.options.positivity_interval > 0
                    && self.steps_since_positivity >= self.options.positivity_interval
                {
                    self.check_positivity(&mut health)?;
                }
                if since_snapshot >= self.options.snapshot_stride && s + 1 < n {
                    self.observe(observer, &mut health)?;
                    since_snapshot = 0;
                }
            }
            self.observe(observer, &mut health)?;
            since_snapshot = 0;
            seg_start = seg_end;
        }
        Ok(health)
    }

    fn rk4_step(&mut self, dt: T) {
        let half = dt * T::lit(0.5);
        let sixth = dt / T::lit(6.0);
        let rho = self.rho.entries.as_mut_slice();
        let [k1, k2, k3, k4] = &mut self.k;
        let stage = &mut self.stage;
        let gen = &mut self.generator;

        gen.rhs(rho, k1);
        for ((s, r), k) in stage.iter_mut().zip(rho.iter()).zip(k1.iter()) {
            *s = *r + *k * half;
        }
        gen.rhs(stage, k2);
        for ((s, r), k) in stage.iter_mut().zip(rho.iter()).zip(k2.iter()) {
            *s = *r + *k * half;
        }
        gen.rhs(stage, k3);
        for ((s, r), k) in stage.iter_mut().zip(rho.iter()).zip(k3.iter()) {
            *s = *r + *k * dt;
        }
        gen.rhs(stage, k4);
        let two = T::lit(2.0);
        // Decaying coherences would otherwise drift into the subnormal range,
        // where arithmetic is several times slower.
        let floor = Float::sqrt(T::min_positive_value());
        for i in 0..rho.len() {
            let mut z = rho[i] + (k1[i] + (k2[i] + k3[i]) * two + k4[i]) * sixth;
            if Float::abs(z.re) < floor {
                z.re = T::zero();
            }
            if Float::abs(z.im) < floor {
                z.im = T::zero();
            }
            rho[i] = z;
        }
    }

    fn check_positivity(&mut self, health: &mut RunHealth) -> Result<()> {
        self.steps_since_positivity = 0;
        health.positivity_checks += 1;
        let tol = T::lit(self.options.tolerances.positivity);
        let d = self.rho.dims.dim();
        let shifted = &self.rho.entries + DMatrix::<Cplx<T>>::identity(d, d).map(|x| x * creal(tol));
        if Cholesky::new(shifted).is_none() {
            health.positivity_failures += 1;
            let lmin = self.rho.min_eigenvalue().as_f64();
            return Err(EngineError::InvariantViolation {
                name: "positivity",
                time: self.time.as_f64(),
                detail: format!("smallest eigenvalue {lmin:e}"),
            });
        }
        Ok(())
    }

    fn observe<F>(&self, observer: &mut F, health: &mut RunHealth) -> Result<()>
    where
        F: FnMut(&Snapshot<'_, T>),
    {
        let diag = self.snapshot_diagnostics()?;
        health.max_trace_error = health.max_trace_error.max(diag.trace_error);
        health.max_hermiticity_error = health.max_hermiticity_error.max(diag.hermiticity_error);
        observer(&Snapshot { time: self.time, rho: &self.rho, hot_on: self.hot_value(self.time) });
        Ok(())
    }

    fn snapshot_diagnostics(&self) -> Result<SnapshotDiagnostics> {
        let t = self.time.as_f64();
        if !self.rho.is_finite() {
            return Err(EngineError::NonFinite(t));
        }
        let trace_error = Float::abs(self.rho.trace().re - T::one()).as_f64();
        let hermiticity_error = self.rho.hermiticity_residual().as_f64();
        let tol = self.options.tolerances;
        if trace_error > tol.trace {
            return Err(EngineError::InvariantViolation {
                name: "trace",
                time: t,
                detail: format!("|Tr rho - 1| = {trace_error:e}"),
            });
        }
        if hermiticity_error > tol.hermiticity {
            return Err(EngineError::InvariantViolation {
                name: "hermiticity",
                time: t,
                detail: format!("max |rho - rho^dag| = {hermiticity_error:e}"),
            });
        }
        Ok(SnapshotDiagnostics { trace_error, hermiticity_error })
    }
}

/// Propagates rho0 from t = 0 to `t_end`, returning the snapshot times,
/// their diagnostics and (if `keep_states`) the states themselves.
pub fn propagate<T: Real + RealField>(
    h: &OperatorMatrix<T>,
    rho0: DensityMatrix<T>,
    baths: &[BathSpec<T>],
    t_end: T,
    options: PropagationOptions<T>,
) -> Result<PropagationResult<T>> {
    propagate_observed(h, rho0, baths, t_end, options, |_| {})
}

pub fn propagate_observed<T, F>(
    h: &OperatorMatrix<T>,
    rho0: DensityMatrix<T>,
    baths: &[BathSpec<T>],
    t_end: T,
    options: PropagationOptions<T>,
    mut observer: F,
) -> Result<PropagationResult<T>>
where
    T: Real + RealField,
    F: FnMut(&Snapshot<'_, T>),
{
    let mut prop = Propagator::new(h, baths, rho0, options)?;
    let mut times = Vec::new();
    let mut states = Vec::new();
    let mut diagnostics = Vec::new();
    let keep = options.keep_states;
    let health = prop.advance(t_end, &mut |snap: &Snapshot<'_, T>| {
        times.push(snap.time);
        diagnostics.push(SnapshotDiagnostics {
            trace_error: Float::abs(snap.rho.trace().re - T::one()).as_f64(),
            hermiticity_error: snap.rho.hermiticity_residual().as_f64(),
        });
        if keep {
            states.push(snap.rho.clone());
        }
        observer(snap);
    })?;
    Ok(PropagationResult { times, states, diagnostics, health })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CycleStatus {
    Converged,
    /// Periodicity residual still above threshold after the requested cycles.
    NotConverged,
}

/// Last period of a periodically driven run.
#[derive(Debug, Clone)]
pub struct LimitCycle<T: Real> {
    pub period: T,
    /// Start time of the returned cycle.
    pub cycle_start: T,
    pub result: PropagationResult<T>,
    /// max |rho(k P) - rho((k-1) P)| for k = 1..cycles.
    pub residuals: Vec<f64>,
    pub status: CycleStatus,
    pub health: RunHealth,
}

/// Runs `cycles` periods of the hot-bath square wave and returns the last
/// one; the first `cycles - 1` act as transient.
pub fn run_limit_cycle<T, F>(
    h: &OperatorMatrix<T>,
    rho0: DensityMatrix<T>,
    baths: &[BathSpec<T>],
    cycles: usize,
    residual_threshold: f64,
    options: PropagationOptions<T>,
    mut observer: F,
) -> Result<LimitCycle<T>>
where
    T: Real + RealField,
    F: FnMut(&Snapshot<'_, T>),
{
    let period = baths
        .iter()
        .find_map(|b| b.modulation.period())
        .ok_or_else(|| EngineError::Config("limit cycle needs a modulated bath".into()))?;
    if cycles == 0 {
        return Err(EngineError::Config("cycle count must be at least 1".into()));
    }
    let mut prop = Propagator::new(h, baths, rho0, options)?;
    let mut health = RunHealth::default();
    let mut residuals = Vec::with_capacity(cycles);
    for k in 1..cycles {
        let before = prop.state().clone();
        let h_k = prop.advance(period * T::from_usize_lossy(k), &mut |_| {})?;
        health.merge(&h_k);
        residuals.push(prop.state().max_abs_diff(&before).as_f64());
    }
    let before = prop.state().clone();
    let cycle_start = prop.time();
    let mut times = Vec::new();
    let mut states = Vec::new();
    let mut diagnostics = Vec::new();
    let keep = options.keep_states;
    let h_last = prop.advance(period * T::from_usize_lossy(cycles), &mut |snap: &Snapshot<'_, T>| {
        times.push(snap.time);
        diagnostics.push(SnapshotDiagnostics {
            trace_error: Float::abs(snap.rho.trace().re - T::one()).as_f64(),
            hermiticity_error: snap.rho.hermiticity_residual().as_f64(),
        });
        if keep {
            states.push(snap.rho.clone());
        }
        observer(snap);
    })?;
    health.merge(&h_last);
    let last_residual = prop.state().max_abs_diff(&before).as_f64();
    residuals.push(last_residual);
    let status = if last_residual <= residual_threshold {
        CycleStatus::Converged
    } else {
        CycleStatus::NotConverged
    };
    Ok(LimitCycle {
        period,
        cycle_start,
        result: PropagationResult { times, states, diagnostics, health: h_last },
        residuals,
        status,
        health,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::{build_hamiltonian, max_abs, ModelKind};
    use crate::trap::{BathRates, Temperatures};
    use crate::units;
    use proptest::prelude::*;

    fn params(beta_hz: f64) -> EngineParams<f64> {
        let w = units::hz_to_angular;
        EngineParams::new(
            w(1e6),
            w(5e4),
            w(beta_hz),
            BathRates { kappa_a: w(2e5), kappa_h: w(2e5), kappa_b: w(5e4) },
            Temperatures { t_h: 166e-6, t_a: 4e-6, t_b: 4e-6, t_0: 10e-6 },
            None,
            None,
        )
        .unwrap()
    }

    #[test]
    fn single_phonon_decay() {
        let dims = FockDims::new(2, 3).unwrap();
        let ops = mode_operators::<f64>(dims);
        let rho = DensityMatrix::<f64>::basis_state(dims, 0, 1);
        let kappa = 2.5;
        let out = dissipator_apply(&rho.entries, &ops.b, kappa, 0.0);
        let expected = (DensityMatrix::<f64>::basis_state(dims, 0, 0).entries - &rho.entries)
            .map(|x| x * creal(kappa));
        assert!(max_abs(&(out - expected)) < 1e-15);
        let vac = DensityMatrix::<f64>::basis_state(dims, 0, 0);
        assert!(max_abs(&dissipator_apply(&vac.entries, &ops.b, kappa, 0.0)) < 1e-15);
    }

    fn random_hermitian(d: usize, seed: &[f64]) -> DMatrix<Cplx<f64>> {
        let mut m = DMatrix::from_fn(d, d, |i, j| {
            let k = (i * d + j) % seed.len();
            cplx(seed[k], seed[(k + 7) % seed.len()])
        });
        m = &m + conj_transpose(&m);
        let tr = m.trace();
        m / Cplx::new(tr.re.max(1.0), 0.0)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn dissipator_is_traceless(seed in prop::collection::vec(-1.0f64..1.0, 13),
                                   kappa in 0.1f64..5.0, nbar in 0.0f64..4.0) {
            let dims = FockDims::new(3, 3).unwrap();
            let ops = mode_operators::<f64>(dims);
            let rho = random_hermitian(dims.dim(), &seed);
            for op in [&ops.a, &ops.b] {
                let out = dissipator_apply(&rho, op, kappa, nbar);
                let tr = out.trace();
                prop_assert!(tr.norm() < 1e-12);
                prop_assert!(crate::fock::hermiticity_residual(&out) < 1e-12);
            }
        }
    }

    #[test]
    fn compiled_generator_matches_dense_reference() {
        let dims = FockDims::new(4, 5).unwrap();
        let p = params(1e5);
        let h = build_hamiltonian(ModelKind::Cm, &p, dims).unwrap();
        let baths = engine_baths(&p);
        let mut gen = LindbladGenerator::new(&h, &baths).unwrap();
        gen.set_time(0.1 * p.heating_period); // hot bath on
        let seed: Vec<f64> = (0..29).map(|k| ((k * 37 % 17) as f64 - 8.0) / 9.0).collect();
        let rho = random_hermitian(dims.dim(), &seed);
        let mut out = vec![Cplx::zero(); dims.dim() * dims.dim()];
        gen.rhs(rho.as_slice(), &mut out);
        let out = DMatrix::from_column_slice(dims.dim(), dims.dim(), &out);

        let ops = mode_operators::<f64>(dims);
        let minus_i = cplx(0.0, -1.0);
        let mut reference = (&h.entries * &rho - &rho * &h.entries).map(|x| x * minus_i);
        reference += dissipator_apply(&rho, &ops.a, p.kappa_a, p.nbar_a);
        reference += dissipator_apply(&rho, &ops.a, p.kappa_h, p.nbar_h);
        reference += dissipator_apply(&rho, &ops.b, p.kappa_b, p.nbar_b);
        let scale = max_abs(&reference);
        assert!(max_abs(&(out - reference)) < 1e-12 * scale);
    }

    #[test]
    fn spectral_radius_of_pure_commutator_is_the_level_spread() {
        // without baths the generator is -i[H, .] with eigenvalues i(E_j - E_k)
        let dims = FockDims::new(3, 4).unwrap();
        let p = params(0.0);
        let h = build_hamiltonian(ModelKind::Cm, &p, dims).unwrap();
        let gen = LindbladGenerator::new(&h, &[]).unwrap();
        let spread = 2.0 * p.omega_r + 3.0 * p.omega_z;
        let est = gen.spectral_radius_estimate(200);
        assert!((est - spread).abs() < 1e-4 * spread, "{est} vs {spread}");
    }

    #[test]
    fn propagation_keeps_state_out_of_subnormal_range() {
        let dims = FockDims::new(3, 3).unwrap();
        let p = params(0.0);
        let h = build_hamiltonian(ModelKind::Om, &p, dims).unwrap();
        let mut rho0 = DensityMatrix::thermal_product(dims, 0.1, 0.5);
        rho0.entries[(0, 8)] = cplx(1e-310, 0.0);
        rho0.entries[(8, 0)] = cplx(1e-310, 0.0);
        let mut prop = Propagator::new(&h, &engine_baths(&p), rho0, PropagationOptions::for_params(&p)).unwrap();
        prop.advance(1e-3 / p.omega_r, &mut |_| {}).unwrap();
        assert!(prop.state().entries.iter().all(|z| !z.re.is_subnormal() && !z.im.is_subnormal()));
    }

    #[test]
    fn square_wave_is_left_continuous() {
        let m = Modulation::SquareWave { period: 2.0, duty: 0.25, phase: 0.0 };
        assert_eq!(m.value(0.0), 1.0);
        assert_eq!(m.value(0.49), 1.0);
        assert_eq!(m.value(0.5), 0.0);
        assert_eq!(m.value(2.0), 1.0);
        assert_eq!(m.edges(0.0, 4.0), vec![0.5, 2.0, 2.5]);
        let never = Modulation::SquareWave { period: 2.0, duty: 0.0, phase: 0.0 };
        assert_eq!(never.value(0.0), 0.0);
    }

    #[test]
    fn edges_land_on_step_grid() {
        let dims = FockDims::new(3, 3).unwrap();
        let mut p = params(0.0);
        p.heating_duty = 0.3;
        let h = build_hamiltonian(ModelKind::Om, &p, dims).unwrap();
        let rho0 = DensityMatrix::thermal_product(dims, 0.1, 0.5);
        let mut opts = PropagationOptions::for_params(&p);
        opts.dt_max = p.heating_period / 1997.0;
        opts.snapshot_stride = 1000;
        let res = propagate(&h, rho0, &engine_baths(&p), 2.0 * p.heating_period, opts).unwrap();
        let edge = 0.3 * p.heating_period;
        assert!(res.times.iter().any(|&t| (t - edge).abs() < 1e-18));
        assert!(res.times.iter().any(|&t| (t - p.heating_period).abs() < 1e-18));
        assert_eq!(*res.times.last().unwrap(), 2.0 * p.heating_period);
    }

    #[test]
    fn decoupled_axial_mode_limit_cycle_is_thermal() {
        let dims = FockDims::new(3, 10).unwrap();
        let p = params(0.0);
        let h = build_hamiltonian(ModelKind::Om, &p, dims).unwrap();
        let rho0 = DensityMatrix::thermal_product(dims, 0.5, 2.0);
        let mut opts = PropagationOptions::for_params(&p);
        opts.dt_max = 0.1 / p.omega_r;
        opts.keep_states = true;
        opts.snapshot_stride = 500;
        let lc = run_limit_cycle(&h, rho0, &engine_baths(&p), 4, 1e-6, opts, |_| {}).unwrap();
        let expected = crate::fock::thermal_single_mode(dims.n_z, p.nbar_b);
        for rho in &lc.result.states {
            assert!(max_abs(&(rho.axial_state() - &expected)) < 1e-6);
        }
        assert_eq!(lc.status, CycleStatus::Converged, "{:?}", lc.residuals);
    }

    #[test]
    fn limit_cycle_requires_modulation() {
        let dims = FockDims::new(3, 3).unwrap();
        let p = params(1e5);
        let h = build_hamiltonian(ModelKind::Om, &p, dims).unwrap();
        let baths: Vec<_> = engine_baths(&p)
            .into_iter()
            .filter(|b| matches!(b.modulation, Modulation::Constant))
            .collect();
        let rho0 = DensityMatrix::thermal_product(dims, 0.0, 1.0);
        let opts = PropagationOptions::for_params(&p);
        assert!(run_limit_cycle(&h, rho0, &baths, 3, 1e-6, opts, |_| {}).is_err());
    }

    #[test]
    fn nonpositive_step_rejected() {
        let dims = FockDims::new(3, 3).unwrap();
        let p = params(1e5);
        let h = build_hamiltonian(ModelKind::Om, &p, dims).unwrap();
        let mut opts = PropagationOptions::for_params(&p);
        opts.dt_max = 0.0;
        let rho0 = DensityMatrix::thermal_product(dims, 0.0, 1.0);
        assert!(Propagator::new(&h, &engine_baths(&p), rho0, opts).is_err());
    }
}
