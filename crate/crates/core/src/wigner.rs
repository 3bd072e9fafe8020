//! Wigner function of a single-mode state by the displaced-parity formula
//!   W(q, p) = (1/pi) sum_mn rho_mn (-1)^m <n| D(2 alpha) |m>,  alpha = (q + i p)/sqrt 2,
//! with q = (a + a^dag)/sqrt 2, so the vacuum is exp(-q^2 - p^2)/pi.

use std::io::Write;

use nalgebra::DMatrix;
use num_traits::Float;
use serde::Serialize;

use crate::error::{EngineError, Result};
use crate::scalar::{cplx, Cplx, Real};

/// Wigner function sampled on a rectangular (q, p) grid.
#[derive(Debug, Clone, Serialize)]
pub struct WignerGrid<T: Real> {
    pub q: Vec<T>,
    pub p: Vec<T>,
    /// values[(i, j)] = W(q[i], p[j]).
    #[serde(skip)]
    pub values: DMatrix<T>,
}

/// Uniform axis of `n` points on [-half_width, half_width].
pub fn axis<T: Real>(half_width: T, n: usize) -> Vec<T> {
    let step = T::lit(2.0) * half_width / T::from_usize_lossy(n.max(2) - 1);
    (0..n).map(|k| -half_width + step * T::from_usize_lossy(k)).collect()
}

/// Matrix of <n|D(beta)|m> for n, m < levels.
pub fn displacement_elements<T: Real>(beta: Cplx<T>, levels: usize) -> DMatrix<Cplx<T>> {
    let x = beta.norm_sqr();
    let gauss = (-T::lit(0.5) * x).exp();
    let mut out = DMatrix::zeros(levels, levels);
    // powers of beta and -conj(beta)
    let mut pow_b = vec![Cplx::new(T::one(), T::zero()); levels];
    let mut pow_mb = vec![Cplx::new(T::one(), T::zero()); levels];
    for k in 1..levels {
        pow_b[k] = pow_b[k - 1] * beta;
        pow_mb[k] = pow_mb[k - 1] * (-beta.conj());
    }
    for d in 0..levels {
        let a = T::from_usize_lossy(d);
        // generalized Laguerre L_k^(d)(x) by upward recurrence
        let kmax = levels - d;
        let mut lag = vec![T::one(); kmax];
        if kmax > 1 {
            lag[1] = T::one() + a - x;
        }
        for k in 1..kmax.saturating_sub(1) {
            let kk = T::from_usize_lossy(k);
            lag[k + 1] = ((T::lit(2.0) * kk + T::one() + a - x) * lag[k] - (kk + a) * lag[k - 1]) / (kk + T::one());
        }
        for m in 0..kmax {
            let n = m + d;
            // sqrt(m!/n!)
            let mut ratio = T::one();
            for j in (m + 1)..=n {
                ratio /= T::from_usize_lossy(j);
            }
            let c = ratio.sqrt() * gauss * lag[m];
            out[(n, m)] = pow_b[d] * c;
            if d > 0 {
                out[(m, n)] = pow_mb[d] * c;
            }
        }
    }
    out
}

/// Wigner function of `rho` on the grid q x p.
pub fn wigner_unchecked<T: Real>(rho: &DMatrix<Cplx<T>>, q: &[T], p: &[T]) -> WignerGrid<T> {
    let levels = rho.nrows();
    let inv_pi = T::FRAC_1_PI();
    let mut values = DMatrix::zeros(q.len(), p.len());
    for (i, &qi) in q.iter().enumerate() {
        for (j, &pj) in p.iter().enumerate() {
            // 2 alpha = sqrt 2 (q + i p)
            let beta = cplx(qi, pj) * T::SQRT_2();
            let d = displacement_elements(beta, levels);
            let mut acc = Cplx::<T>::new(T::zero(), T::zero());
            for m in 0..levels {
                let sign = if m % 2 == 0 { T::one() } else { -T::one() };
                for n in 0..levels {
                    acc += rho[(m, n)] * d[(n, m)] * sign;
                }
            }
            values[(i, j)] = acc.re * inv_pi;
        }
    }
    WignerGrid { q: q.to_vec(), p: p.to_vec(), values }
}

/// Wigner function with a normalization check: fails when the grid misses more than 2% of the weight.
pub fn wigner<T: Real>(rho: &DMatrix<Cplx<T>>, q: &[T], p: &[T]) -> Result<WignerGrid<T>> {
    let grid = wigner_unchecked(rho, q, p);
    let norm = grid.normalization();
    if !(Float::abs(norm - T::one()) <= T::lit(0.02)) {
        return Err(EngineError::WignerNormalization(norm.as_f64()));
    }
    Ok(grid)
}

/// Default 121 x 121 grid over +-6.
pub fn wigner_default<T: Real>(rho: &DMatrix<Cplx<T>>) -> Result<WignerGrid<T>> {
    let ax = axis(T::lit(6.0), 121);
    wigner(rho, &ax, &ax)
}

/// <q|rho|q> from Hermite functions.
pub fn position_distribution<T: Real>(rho: &DMatrix<Cplx<T>>, q: &[T]) -> Vec<T> {
    let levels = rho.nrows();
    q.iter()
        .map(|&x| {
            let psi = hermite_functions(x, levels);
            let mut acc = T::zero();
            for m in 0..levels {
                for n in 0..levels {
                    acc += rho[(m, n)].re * psi[m] * psi[n];
                }
            }
            acc
        })
        .collect()
}

fn hermite_functions<T: Real>(x: T, levels: usize) -> Vec<T> {
    let mut psi = vec![T::zero(); levels];
    psi[0] = T::PI().powf(-T::lit(0.25)) * (-T::lit(0.5) * x * x).exp();
    if levels > 1 {
        psi[1] = T::SQRT_2() * x * psi[0];
    }
    for n in 1..levels.saturating_sub(1) {
        let nn = T::from_usize_lossy(n);
        psi[n + 1] = (T::lit(2.0) / (nn + T::one())).sqrt() * x * psi[n] - (nn / (nn + T::one())).sqrt() * psi[n - 1];
    }
    psi
}

impl<T: Real> WignerGrid<T> {
    fn steps(&self) -> (T, T) {
        let dq = if self.q.len() > 1 { self.q[1] - self.q[0] } else { T::one() };
        let dp = if self.p.len() > 1 { self.p[1] - self.p[0] } else { T::one() };
        (dq, dp)
    }

    /// Riemann sum of W dq dp.
    pub fn normalization(&self) -> T {
        let (dq, dp) = self.steps();
        self.values.iter().copied().sum::<T>() * dq * dp
    }

    /// Marginal over p at each q.
    pub fn q_marginal(&self) -> Vec<T> {
        let (_, dp) = self.steps();
        (0..self.q.len()).map(|i| self.values.row(i).iter().copied().sum::<T>() * dp).collect()
    }

    /// (Var q, Var p, Cov(q, p)) of the sampled distribution, in q units (vacuum 1/2).
    pub fn covariance(&self) -> (T, T, T) {
        let (dq, dp) = self.steps();
        let w = dq * dp;
        let (mut m0, mut mq, mut mp, mut mqq, mut mpp, mut mqp) =
            (T::zero(), T::zero(), T::zero(), T::zero(), T::zero(), T::zero());
        for (i, &q) in self.q.iter().enumerate() {
            for (j, &p) in self.p.iter().enumerate() {
                let v = self.values[(i, j)] * w;
                m0 += v;
                mq += v * q;
                mp += v * p;
                mqq += v * q * q;
                mpp += v * p * p;
                mqp += v * q * p;
            }
        }
        let (eq, ep) = (mq / m0, mp / m0);
        (mqq / m0 - eq * eq, mpp / m0 - ep * ep, mqp / m0 - eq * ep)
    }

    /// Ratio of the principal axes' variances of the sampled distribution.
    pub fn axis_ratio(&self) -> T {
        let (a, b, c) = self.covariance();
        let half_tr = T::lit(0.5) * (a + b);
        let disc = (T::lit(0.25) * (a - b) * (a - b) + c * c).sqrt();
        (half_tr + disc) / (half_tr - disc)
    }

    /// CSV matrix: the header row holds the p axis, the first column the q axis.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["q\\p".to_string()];
        header.extend(self.p.iter().map(|p| format!("{}", p.as_f64())));
        w.write_record(&header)?;
        for (i, q) in self.q.iter().enumerate() {
            let mut row = vec![format!("{}", q.as_f64())];
            row.extend(self.values.row(i).iter().map(|v| format!("{:e}", v.as_f64())));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::thermal_single_mode;
    use crate::observables::ModeMoments;
    use approx::assert_relative_eq;

    fn squeezed_thermal(levels: usize, r: f64, nbar: f64) -> DMatrix<Cplx<f64>> {
        // S(r) rho_th S(r)^dag via the matrix exponential of the generator on a larger space
        let big = levels + 30;
        let a = crate::fock::annihilation::<f64>(big);
        let ad = a.adjoint();
        let gen = (&a * &a - &ad * &ad) * Cplx::new(0.5 * r, 0.0);
        let s = gen.exp();
        let th = thermal_single_mode::<f64>(big, nbar);
        let full = &s * th * s.adjoint();
        let mut out = full.view((0, 0), (levels, levels)).into_owned();
        let tr = out.trace();
        out /= tr;
        out
    }

    #[test]
    fn displacement_of_vacuum_is_coherent_state() {
        let beta: Cplx<f64> = cplx(0.7, -0.4);
        let d = displacement_elements(beta, 20);
        let mut fact = 1.0;
        for n in 0..20 {
            if n > 0 {
                fact *= n as f64;
            }
            let expected: Cplx<f64> = beta.powu(n as u32) * ((-0.5 * beta.norm_sqr()).exp() / fact.sqrt());
            assert!((d[(n, 0)] - expected).norm() < 1e-14);
        }
    }

    #[test]
    fn displacement_is_unitary_on_low_levels() {
        let d = displacement_elements(cplx(0.3, 0.5), 60);
        let u = d.adjoint() * &d;
        for i in 0..10 {
            for j in 0..10 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((u[(i, j)].re - e).abs() < 1e-10 && u[(i, j)].im.abs() < 1e-10);
            }
        }
    }

    #[test]
    fn vacuum_peak() {
        let rho = thermal_single_mode::<f64>(6, 0.0);
        let g = wigner_unchecked(&rho, &[0.0], &[0.0]);
        assert_relative_eq!(g.values[(0, 0)], std::f64::consts::FRAC_1_PI, max_relative = 1e-12);
    }

    #[test]
    fn thermal_peak_and_normalization() {
        let nbar = 1.3;
        let rho = thermal_single_mode::<f64>(40, nbar);
        let g = wigner_default(&rho).unwrap();
        assert_relative_eq!(g.values[(60, 60)], 1.0 / (std::f64::consts::PI * (2.0 * nbar + 1.0)), max_relative = 1e-6);
        assert_relative_eq!(g.normalization(), 1.0, epsilon = 0.02);
        assert_relative_eq!(g.axis_ratio(), 1.0, epsilon = 1e-6);
    }

    #[test]
    fn narrow_grid_is_rejected() {
        let rho = thermal_single_mode::<f64>(40, 3.0);
        let ax = axis(1.0, 21);
        assert!(matches!(wigner(&rho, &ax, &ax), Err(EngineError::WignerNormalization(_))));
    }

    #[test]
    fn marginal_matches_position_distribution() {
        let rho = squeezed_thermal(30, 0.3, 0.5);
        let g = wigner_default(&rho).unwrap();
        let marg = g.q_marginal();
        let exact = position_distribution(&rho, &g.q);
        let dq = g.q[1] - g.q[0];
        let l1: f64 = marg.iter().zip(&exact).map(|(a, b)| (a - b).abs()).sum::<f64>() * dq;
        assert!(l1 < 0.02, "L1 distance {l1}");
    }

    #[test]
    fn contour_ratio_matches_quadrature_variances() {
        let rho = squeezed_thermal(30, 0.25, 0.3);
        let g = wigner_default(&rho).unwrap();
        let m = ModeMoments::from_state(&rho);
        assert_relative_eq!(g.axis_ratio(), m.eccentricity(), max_relative = 1e-3);
        // variances in q units are twice the X-convention ones
        let (vq, vp, _) = g.covariance();
        assert_relative_eq!(vq, 2.0 * m.var_x(), max_relative = 1e-3);
        assert_relative_eq!(vp, 2.0 * m.var_p(), max_relative = 1e-3);
    }

    #[test]
    fn csv_layout() {
        let rho = thermal_single_mode::<f64>(4, 0.0);
        let ax = axis(1.0, 3);
        let g = wigner_unchecked(&rho, &ax, &ax);
        let mut buf = Vec::new();
        g.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "q\\p,-1,0,1");
    }
}
