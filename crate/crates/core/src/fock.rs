//! Operators and states on the truncated two-mode Fock space.
//!
//! Basis ordering is radial-major: |n_r, n_z> has index `n_r * dims.n_z + n_z`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, RealField};
use num_traits::{Float, One, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{EngineError, Result};
use crate::scalar::{cplx, creal, Cplx, Real};
use crate::trap::EngineParams;
use crate::units;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FockDims {
    pub n_r: usize,
    pub n_z: usize,
}

impl FockDims {
    pub fn new(n_r: usize, n_z: usize) -> Result<Self> {
        if n_r < 2 || n_z < 2 {
            return Err(EngineError::Config(format!(
                "Fock truncation needs at least 2 levels per mode, got ({n_r}, {n_z})"
            )));
        }
        Ok(Self { n_r, n_z })
    }

    /// Composite dimension n_r * n_z.
    pub fn dim(&self) -> usize {
        self.n_r * self.n_z
    }

    #[inline]
    pub fn index(&self, nr: usize, nz: usize) -> usize {
        nr * self.n_z + nz
    }

    pub fn enlarged(&self, extra: usize) -> Self {
        Self { n_r: self.n_r + extra, n_z: self.n_z + extra }
    }
}

impl Default for FockDims {
    fn default() -> Self {
        Self { n_r: 12, n_z: 16 }
    }
}

/// Dense operator on the composite space.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorMatrix<T: Real> {
    pub dims: FockDims,
    pub entries: DMatrix<Cplx<T>>,
    pub hermitian_hint: bool,
}

impl<T: Real> OperatorMatrix<T> {
    pub fn new(dims: FockDims, entries: DMatrix<Cplx<T>>, hermitian_hint: bool) -> Self {
        assert_eq!(entries.nrows(), dims.dim(), "operator size does not match dims");
        assert_eq!(entries.ncols(), dims.dim(), "operator must be square");
        Self { dims, entries, hermitian_hint }
    }

    pub fn zeros(dims: FockDims) -> Self {
        Self::new(dims, DMatrix::zeros(dims.dim(), dims.dim()), true)
    }

    pub fn identity(dims: FockDims) -> Self {
        Self::new(dims, DMatrix::identity(dims.dim(), dims.dim()), true)
    }

    pub fn adjoint(&self) -> Self {
        Self::new(self.dims, conj_transpose(&self.entries), self.hermitian_hint)
    }

    pub fn scale(&self, s: T) -> Self {
        let c = creal(s);
        Self::new(self.dims, self.entries.map(|x| x * c), self.hermitian_hint)
    }

    pub fn add(&self, other: &Self) -> Self {
        Self::new(
            self.dims,
            &self.entries + &other.entries,
            self.hermitian_hint && other.hermitian_hint,
        )
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self::new(
            self.dims,
            &self.entries - &other.entries,
            self.hermitian_hint && other.hermitian_hint,
        )
    }

    pub fn matmul(&self, other: &Self) -> Self {
        Self::new(self.dims, &self.entries * &other.entries, false)
    }

    pub fn commutator(&self, other: &Self) -> Self {
        self.matmul(other).sub(&other.matmul(self))
    }

    pub fn trace(&self) -> Cplx<T> {
        self.entries.diagonal().iter().fold(Cplx::zero(), |acc, x| acc + *x)
    }

    /// max |A - A^dagger| relative to max |A| (absolute when A = 0).
    pub fn hermiticity_residual(&self) -> T {
        let scale = max_abs(&self.entries);
        let res = hermiticity_residual(&self.entries);
        if scale > T::zero() {
            res / scale
        } else {
            res
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        max_abs(&(&self.entries - &other.entries))
    }
}

pub(crate) fn conj_transpose<T: Real>(m: &DMatrix<Cplx<T>>) -> DMatrix<Cplx<T>> {
    m.transpose().map(|x| x.conj())
}

pub(crate) fn max_abs<T: Real>(m: &DMatrix<Cplx<T>>) -> T {
    m.iter().fold(T::zero(), |acc, x| acc.max(x.norm()))
}

pub(crate) fn hermiticity_residual<T: Real>(m: &DMatrix<Cplx<T>>) -> T {
    let n = m.nrows();
    let mut worst = T::zero();
    for j in 0..n {
        for i in 0..=j {
            worst = worst.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    worst
}

/// Single-mode annihilation operator on `n` levels.
pub fn annihilation<T: Real>(n: usize) -> DMatrix<Cplx<T>> {
    let mut m = DMatrix::zeros(n, n);
    for k in 1..n {
        m[(k - 1, k)] = creal(T::from_usize_lossy(k).sqrt());
    }
    m
}

pub fn number<T: Real>(n: usize) -> DMatrix<Cplx<T>> {
    DMatrix::from_fn(n, n, |i, j| if i == j { creal(T::from_usize_lossy(i)) } else { Cplx::zero() })
}

fn kron<T: Real>(left: &DMatrix<Cplx<T>>, right: &DMatrix<Cplx<T>>) -> DMatrix<Cplx<T>> {
    left.kronecker(right)
}

/// Ladder, number and quadrature operators of both modes, each acting as
/// identity on the other factor. Quadratures use q = (a + a^dag)/sqrt 2,
/// p = i (a^dag - a)/sqrt 2.
#[derive(Debug, Clone)]
pub struct ModeOperators<T: Real> {
    pub a: OperatorMatrix<T>,
    pub a_dag: OperatorMatrix<T>,
    pub b: OperatorMatrix<T>,
    pub b_dag: OperatorMatrix<T>,
    pub n_r: OperatorMatrix<T>,
    pub n_z: OperatorMatrix<T>,
    pub q_r: OperatorMatrix<T>,
    pub p_r: OperatorMatrix<T>,
    pub q_z: OperatorMatrix<T>,
    pub p_z: OperatorMatrix<T>,
}

pub fn mode_operators<T: Real>(dims: FockDims) -> ModeOperators<T> {
    let id_r = DMatrix::<Cplx<T>>::identity(dims.n_r, dims.n_r);
    let id_z = DMatrix::<Cplx<T>>::identity(dims.n_z, dims.n_z);
    let a1 = annihilation::<T>(dims.n_r);
    let b1 = annihilation::<T>(dims.n_z);
    let op = |m: DMatrix<Cplx<T>>, herm: bool| OperatorMatrix::new(dims, m, herm);

    let a = op(kron(&a1, &id_z), false);
    let b = op(kron(&id_r, &b1), false);
    let a_dag = a.adjoint();
    let b_dag = b.adjoint();
    let (q_r, p_r) = quadratures(&a, &a_dag);
    let (q_z, p_z) = quadratures(&b, &b_dag);
    ModeOperators {
        n_r: op(kron(&number::<T>(dims.n_r), &id_z), true),
        n_z: op(kron(&id_r, &number::<T>(dims.n_z)), true),
        a,
        a_dag,
        b,
        b_dag,
        q_r,
        p_r,
        q_z,
        p_z,
    }
}

fn quadratures<T: Real>(
    lower: &OperatorMatrix<T>,
    raise: &OperatorMatrix<T>,
) -> (OperatorMatrix<T>, OperatorMatrix<T>) {
    let s = T::FRAC_1_SQRT_2();
    let q = raise.add(lower).scale(s);
    let i_s = cplx(T::zero(), s);
    let p = OperatorMatrix::new(lower.dims, (&raise.entries - &lower.entries).map(|x| x * i_s), true);
    (OperatorMatrix { hermitian_hint: true, ..q }, p)
}

/// The four coupling models: full centre-of-mass (A0), optomechanical (A1),
/// classical drive (A2) and squeezing (A3).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Cm,
    Om,
    Class,
    Sq,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Cm, ModelKind::Om, ModelKind::Class, ModelKind::Sq];

    pub fn label(&self) -> &'static str {
        match self {
            ModelKind::Cm => "A0",
            ModelKind::Om => "A1",
            ModelKind::Class => "A2",
            ModelKind::Sq => "A3",
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Cm => "cm",
            ModelKind::Om => "om",
            ModelKind::Class => "class",
            ModelKind::Sq => "sq",
        }
    }

    /// Whether the coupling contains a^2 terms (needs at least three radial levels).
    fn uses_two_phonon_terms(&self) -> bool {
        matches!(self, ModelKind::Cm | ModelKind::Sq)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cm" | "a0" => Ok(ModelKind::Cm),
            "om" | "a1" => Ok(ModelKind::Om),
            "class" | "a2" => Ok(ModelKind::Class),
            "sq" | "a3" => Ok(ModelKind::Sq),
            other => Err(EngineError::Config(format!("unknown model `{other}`"))),
        }
    }
}

/// Interaction part of the model Hamiltonian (everything except
/// omega_r n_r + omega_z n_z), in rad/s.
pub fn coupling_term<T: Real>(kind: ModelKind, beta: T, dims: FockDims) -> OperatorMatrix<T> {
    let a1 = annihilation::<T>(dims.n_r);
    let a1_dag = conj_transpose(&a1);
    let b1 = annihilation::<T>(dims.n_z);
    let displacement = &b1 + conj_transpose(&b1);
    let id_r = DMatrix::<Cplx<T>>::identity(dims.n_r, dims.n_r);
    let n1 = number::<T>(dims.n_r);
    let quarter = creal(-beta / T::lit(4.0));

    let two_phonon = || &a1 * &a1 + &a1_dag * &a1_dag;
    let radial = match kind {
        // a^2 + a^dag^2 + 2 a^dag a + 1
        ModelKind::Cm => two_phonon() + n1.map(|x| x * creal(T::lit(2.0))) + &id_r,
        ModelKind::Om => n1.map(|x| x * creal(T::lit(2.0))),
        ModelKind::Class => id_r,
        ModelKind::Sq => two_phonon(),
    };
    OperatorMatrix::new(dims, kron(&radial, &displacement).map(|x| x * quarter), true)
}

/// Free part omega_r n_r + omega_z n_z (zero-point constants dropped).
pub fn free_hamiltonian<T: Real>(omega_r: T, omega_z: T, dims: FockDims) -> OperatorMatrix<T> {
    let d = dims.dim();
    let mut m = DMatrix::zeros(d, d);
    for nr in 0..dims.n_r {
        for nz in 0..dims.n_z {
            let i = dims.index(nr, nz);
            m[(i, i)] = creal(omega_r * T::from_usize_lossy(nr) + omega_z * T::from_usize_lossy(nz));
        }
    }
    OperatorMatrix::new(dims, m, true)
}

pub fn build_hamiltonian<T: Real>(
    kind: ModelKind,
    params: &EngineParams<T>,
    dims: FockDims,
) -> Result<OperatorMatrix<T>> {
    if !(params.beta < params.omega_r) {
        return Err(EngineError::Config("beta must be smaller than omega_r".into()));
    }
    if kind.uses_two_phonon_terms() && dims.n_r < 3 {
        return Err(EngineError::Config(format!(
            "model {kind} needs at least 3 radial levels, got {}",
            dims.n_r
        )));
    }
    let h0 = free_hamiltonian(params.omega_r, params.omega_z, dims);
    Ok(h0.add(&coupling_term(kind, params.beta, dims)))
}

/// Hermitian, unit-trace state on the composite space.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix<T: Real> {
    pub dims: FockDims,
    pub entries: DMatrix<Cplx<T>>,
}

/// Result of checking the state invariants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StateDiagnostics {
    pub trace_error: f64,
    pub hermiticity_error: f64,
    pub min_eigenvalue: Option<f64>,
}

impl<T: Real> DensityMatrix<T> {
    pub fn new(dims: FockDims, entries: DMatrix<Cplx<T>>) -> Self {
        assert_eq!(entries.nrows(), dims.dim());
        assert_eq!(entries.ncols(), dims.dim());
        Self { dims, entries }
    }

    /// |nr, nz><nr, nz|.
    pub fn basis_state(dims: FockDims, nr: usize, nz: usize) -> Self {
        let mut m = DMatrix::zeros(dims.dim(), dims.dim());
        let i = dims.index(nr, nz);
        m[(i, i)] = Cplx::one();
        Self::new(dims, m)
    }

    /// rho_r (x) rho_z from single-mode states.
    pub fn product(dims: FockDims, radial: &DMatrix<Cplx<T>>, axial: &DMatrix<Cplx<T>>) -> Self {
        Self::new(dims, radial.kronecker(axial))
    }

    /// Product of truncated single-mode thermal states.
    pub fn thermal_product(dims: FockDims, nbar_r: T, nbar_z: T) -> Self {
        Self::product(dims, &thermal_single_mode(dims.n_r, nbar_r), &thermal_single_mode(dims.n_z, nbar_z))
    }

    pub fn trace(&self) -> Cplx<T> {
        self.entries.diagonal().iter().fold(Cplx::zero(), |acc, x| acc + *x)
    }

    pub fn hermiticity_residual(&self) -> T {
        hermiticity_residual(&self.entries)
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|x| x.re.is_finite() && x.im.is_finite())
    }

    /// Tr[rho O].
    pub fn expect(&self, op: &OperatorMatrix<T>) -> Cplx<T> {
        let d = self.dims.dim();
        let mut acc = Cplx::zero();
        for i in 0..d {
            for j in 0..d {
                let o = op.entries[(i, j)];
                if !o.is_zero() {
                    acc += o * self.entries[(j, i)];
                }
            }
        }
        acc
    }

    /// Reduced state of the radial mode, Tr_z rho.
    pub fn radial_state(&self) -> DMatrix<Cplx<T>> {
        let FockDims { n_r, n_z } = self.dims;
        DMatrix::from_fn(n_r, n_r, |m, mp| {
            (0..n_z).fold(Cplx::zero(), |acc, k| {
                acc + self.entries[(self.dims.index(m, k), self.dims.index(mp, k))]
            })
        })
    }

    /// Reduced state of the axial mode, Tr_r rho.
    pub fn axial_state(&self) -> DMatrix<Cplx<T>> {
        let FockDims { n_r, n_z } = self.dims;
        DMatrix::from_fn(n_z, n_z, |m, mp| {
            (0..n_r).fold(Cplx::zero(), |acc, k| {
                acc + self.entries[(self.dims.index(k, m), self.dims.index(k, mp))]
            })
        })
    }

    /// Population of the highest retained level of each mode.
    pub fn top_level_populations(&self) -> (T, T) {
        let rr = self.radial_state();
        let rz = self.axial_state();
        (rr[(self.dims.n_r - 1, self.dims.n_r - 1)].re, rz[(self.dims.n_z - 1, self.dims.n_z - 1)].re)
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        max_abs(&(&self.entries - &other.entries))
    }
}

impl<T: Real + RealField> DensityMatrix<T> {
    pub fn min_eigenvalue(&self) -> T {
        self.entries
            .clone()
            .symmetric_eigenvalues()
            .iter()
            .fold(<T as Float>::infinity(), |acc, &x| Float::min(acc, x))
    }

    pub fn diagnostics(&self, with_eigen: bool) -> StateDiagnostics {
        StateDiagnostics {
            trace_error: (self.trace() - Cplx::one()).norm().as_f64(),
            hermiticity_error: self.hermiticity_residual().as_f64(),
            min_eigenvalue: with_eigen.then(|| self.min_eigenvalue().as_f64()),
        }
    }

    /// Checks Hermiticity, unit trace and positivity against the given tolerances.
    pub fn check(&self, herm_tol: f64, trace_tol: f64, eig_tol: f64) -> Result<()> {
        let d = self.diagnostics(true);
        let fail = |detail: String| EngineError::InvariantViolation { name: "density_matrix", time: 0.0, detail };
        if d.hermiticity_error > herm_tol {
            return Err(fail(format!("hermiticity error {:e}", d.hermiticity_error)));
        }
        if d.trace_error > trace_tol {
            return Err(fail(format!("trace error {:e}", d.trace_error)));
        }
        if let Some(lmin) = d.min_eigenvalue {
            if lmin < -eig_tol {
                return Err(fail(format!("negative eigenvalue {lmin:e}")));
            }
        }
        Ok(())
    }
}

/// Truncated thermal state sum_n p_n |n><n| with p_n proportional to (n/(n+1))^n.
pub fn thermal_single_mode<T: Real>(levels: usize, nbar: T) -> DMatrix<Cplx<T>> {
    let ratio = if nbar > T::zero() { nbar / (nbar + T::one()) } else { T::zero() };
    let weights: Vec<T> = (0..levels)
        .map(|n| if n == 0 { T::one() } else { ratio.powi(n as i32) })
        .collect();
    let z: T = weights.iter().copied().sum();
    DMatrix::from_fn(levels, levels, |i, j| if i == j { creal(weights[i] / z) } else { Cplx::zero() })
}

/// Canonical state exp(-H / k_B T) / Z for a temperature in kelvin.
pub fn gibbs_state<T: Real + RealField>(h: &OperatorMatrix<T>, temperature_k: T) -> Result<DensityMatrix<T>> {
    if !(temperature_k > T::zero()) {
        return Err(EngineError::Domain(format!(
            "Gibbs temperature must be positive, got {temperature_k} K"
        )));
    }
    let kt = T::lit(units::K_B) * temperature_k / T::lit(units::HBAR);
    gibbs_state_scaled(h, kt)
}

/// Gibbs state for a temperature already expressed in rad/s. The spectrum
/// is shifted by its minimum before exponentiation so that T -> 0 yields the
/// ground state instead of overflowing.
pub fn gibbs_state_scaled<T: Real + RealField>(h: &OperatorMatrix<T>, kt: T) -> Result<DensityMatrix<T>> {
    let eig = h.entries.clone().symmetric_eigen();
    let e_min = eig.eigenvalues.iter().fold(<T as Float>::infinity(), |acc, &x| Float::min(acc, x));
    let weights: Vec<T> = eig.eigenvalues.iter().map(|&e| Float::exp(-(e - e_min) / kt)).collect();
    let z: T = weights.iter().copied().sum();
    let d = h.dims.dim();
    let v = &eig.eigenvectors;
    let mut rho = DMatrix::<Cplx<T>>::zeros(d, d);
    for (k, &w) in weights.iter().enumerate() {
        let p = w / z;
        if p == T::zero() {
            continue;
        }
        let col = v.column(k);
        for j in 0..d {
            let cj = col[j].conj() * creal(p);
            if cj.is_zero() {
                continue;
            }
            for i in 0..d {
                rho[(i, j)] += col[i] * cj;
            }
        }
    }
    let mut state = DensityMatrix::new(h.dims, rho);
    symmetrize(&mut state.entries);
    Ok(state)
}

/// Replaces m by (m + m^dagger) / 2.
pub(crate) fn symmetrize<T: Real>(m: &mut DMatrix<Cplx<T>>) {
    let n = m.nrows();
    let half = T::lit(0.5);
    for j in 0..n {
        for i in 0..j {
            let avg = (m[(i, j)] + m[(j, i)].conj()) * half;
            m[(i, j)] = avg;
            m[(j, i)] = avg.conj();
        }
        m[(j, j)] = creal(m[(j, j)].re);
    }
}
