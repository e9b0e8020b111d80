//! Fourier-division solvers for constant-coefficient and diagonal equations.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::analytic::AnalyticFunction;
use crate::error::{Error, Result};
use crate::lattice::{divisor_weight, MultiIndex};
use crate::smalldiv::FrequencyTable;

type C = Complex64;

/// `D = diag [i(ω·ℓ + Ω(j)) + μ(j)]`; the damping `μ` is absent for
/// Hamiltonian operators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagonalModel {
    pub table: FrequencyTable,
    pub omega: Vec<f64>,
    #[serde(default)]
    pub damping: Option<FrequencyTable>,
}

impl DiagonalModel {
    /// With `real` set, `Ω` must be odd.
    pub fn new(table: FrequencyTable, omega: &[f64], real: bool) -> Result<Self> {
        if real && table.oddness_defect() > 0.0 {
            return Err(Error::InvalidInput(format!(
                "Ω is not odd (defect {:e})",
                table.oddness_defect()
            )));
        }
        Ok(Self {
            table,
            omega: omega.to_vec(),
            damping: None,
        })
    }

    /// Attach a damping table; with `real` set it must be even.
    pub fn with_damping(mut self, damping: FrequencyTable, real: bool) -> Result<Self> {
        if damping.jmax() < self.table.jmax() {
            return Err(Error::InvalidInput("damping table shorter than frequency table".into()));
        }
        if real {
            let jm = damping.jmax() as i64;
            let defect = (1..=jm)
                .map(|j| (damping.get(j) - damping.get(-j)).abs())
                .fold(0.0, f64::max);
            if defect > 0.0 {
                return Err(Error::InvalidInput(format!("damping is not even (defect {defect:e})")));
            }
        }
        self.damping = Some(damping);
        Ok(self)
    }

    /// True when `D` maps real-on-real functions to real-on-real functions.
    pub fn preserves_reality(&self) -> bool {
        let even = self.damping.as_ref().is_none_or(|d| {
            (1..=d.jmax() as i64).all(|j| d.get(j) == d.get(-j))
        });
        even && self.table.oddness_defect() == 0.0
    }

    fn mu(&self, j: i64) -> f64 {
        self.damping.as_ref().map_or(0.0, |d| d.get(j))
    }

    /// `Ω(j) = −λ₃j³ + λ₁j`.
    pub fn airy(jmax: usize, lambda3: f64, lambda1: f64, omega: &[f64]) -> Self {
        Self {
            table: FrequencyTable::airy(jmax, lambda3, lambda1),
            omega: omega.to_vec(),
            damping: None,
        }
    }

    pub fn eigenvalue(&self, l: &MultiIndex, j: i64) -> C {
        C::new(self.mu(j), l.dot(&self.omega) + self.table.get(j))
    }

    /// `D h` on `j ≠ 0` (the `j = 0` modes are dropped).
    pub fn apply(&self, h: &AnalyticFunction) -> AnalyticFunction {
        let lat = h.lattice().clone();
        let w = h.width();
        let jm = h.jmax() as i64;
        let mut out = h.coeffs().to_vec();
        for k in 0..lat.len() {
            let l = lat.index(k);
            for j in -jm..=jm {
                let i = k * w + (j + jm) as usize;
                out[i] = if j == 0 { C::new(0.0, 0.0) } else { out[i] * self.eigenvalue(l, j) };
            }
        }
        AnalyticFunction::from_raw(&lat, h.jmax(), out, h.is_real() && self.preserves_reality())
    }
}

/// Diagnostics of one division.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivisionReport {
    /// `max 1/|divisor|` over modes where the right-hand side is nonzero.
    pub amplification: f64,
    /// `max 1/floor` over the same modes.
    pub bound: f64,
    /// `min |divisor|/floor`.
    pub min_margin: f64,
    pub modes: usize,
}

fn divide(
    f: &AnalyticFunction,
    mut divisor: impl FnMut(&MultiIndex, i64) -> C,
    mut floor: impl FnMut(&MultiIndex, i64) -> Result<f64>,
    real: bool,
) -> Result<(AnalyticFunction, DivisionReport)> {
    if !f.zero_x_average() {
        return Err(Error::InvalidInput("right-hand side must have zero x-average".into()));
    }
    let lat = f.lattice().clone();
    let w = f.width();
    let jm = f.jmax() as i64;
    let mut out = vec![C::new(0.0, 0.0); f.coeffs().len()];
    let mut rep = DivisionReport {
        amplification: 0.0,
        bound: 0.0,
        min_margin: f64::INFINITY,
        modes: 0,
    };
    for k in 0..lat.len() {
        let l = lat.index(k);
        for j in (-jm..=jm).filter(|&j| j != 0) {
            let i = k * w + (j + jm) as usize;
            let c = f.coeffs()[i];
            if c == C::new(0.0, 0.0) {
                continue;
            }
            let d = divisor(l, j);
            let fl = floor(l, j)?;
            let a = d.norm();
            if a < fl {
                return Err(Error::SmallDivisor {
                    ell: l.clone(),
                    j,
                    h: j,
                    value: a,
                    floor: fl,
                });
            }
            out[i] = -c / d;
            rep.amplification = rep.amplification.max(1.0 / a);
            rep.bound = rep.bound.max(1.0 / fl);
            rep.min_margin = rep.min_margin.min(a / fl);
            rep.modes += 1;
        }
    }
    Ok((AnalyticFunction::from_raw(&lat, f.jmax(), out, real), rep))
}

/// `h` with `(ω·∂_φ + ∂_x³)h + f = 0`; divisors below `γ₀/d(ℓ)` are errors.
pub fn solve_l0(f: &AnalyticFunction, omega: &[f64], gamma0: f64) -> Result<AnalyticFunction> {
    solve_l0_report(f, omega, gamma0).map(|r| r.0)
}

pub fn solve_l0_report(f: &AnalyticFunction, omega: &[f64], gamma0: f64) -> Result<(AnalyticFunction, DivisionReport)> {
    divide(
        f,
        |l, j| C::new(0.0, l.dot(omega) - (j * j * j) as f64),
        |l, _| Ok(gamma0 / divisor_weight(l)?),
        f.is_real(),
    )
}

/// `h` with `D h + f = 0`; divisors whose modulus is below `γ|j|³/d(ℓ)` are
/// errors.
pub fn solve_diagonal(model: &DiagonalModel, f: &AnalyticFunction, gamma: f64) -> Result<AnalyticFunction> {
    solve_diagonal_report(model, f, gamma).map(|r| r.0)
}

pub fn solve_diagonal_report(
    model: &DiagonalModel,
    f: &AnalyticFunction,
    gamma: f64,
) -> Result<(AnalyticFunction, DivisionReport)> {
    if model.table.jmax() < f.jmax() {
        return Err(Error::InvalidInput("frequency table shorter than truncation".into()));
    }
    let real = f.is_real() && model.preserves_reality();
    divide(
        f,
        |l, j| model.eigenvalue(l, j),
        |l, j| Ok(gamma * (j.abs().pow(3)) as f64 / divisor_weight(l)?),
        real,
    )
}

/// `(ω·∂_φ)^{−1} rhs` for a φ-only right-hand side of zero average; the
/// divisor floor is `γ ∏ 1/(1+ℓ_i² i²)`.
pub fn solve_scalar_phi(rhs: &AnalyticFunction, omega: &[f64], gamma: f64) -> Result<AnalyticFunction> {
    if !rhs.is_phi_only() {
        return Err(Error::InvalidInput("right-hand side depends on x".into()));
    }
    rhs.om_dphi_inv(omega, gamma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{Lattice, LatticeParams};
    use std::sync::Arc;

    fn lat(m: usize, k: f64) -> Arc<Lattice> {
        Lattice::new(LatticeParams::new(1.0, m, k)).unwrap()
    }

    #[test]
    fn single_mode_quotient() {
        // ω·ℓ = 0.5 and j = 1: divisor i(0.5 − 1) = −0.5i, so h = −2i·e
        let l = lat(1, 1.0);
        let e1 = MultiIndex::unit(1, 1);
        let f = AnalyticFunction::from_entries(&l, 2, &[(e1.clone(), 1, C::new(1.0, 0.0))]).unwrap();
        let h = solve_l0(&f, &[0.5], 0.01).unwrap();
        assert!((h.coeff(&e1, 1) - C::new(0.0, -2.0)).norm() < 1e-15);
    }

    #[test]
    fn zero_rhs_and_x_average_rejected() {
        let l = lat(1, 1.0);
        let z = AnalyticFunction::zeros(&l, 3);
        assert!(solve_l0(&z, &[1.5], 0.1).unwrap().is_zero());
        let c = AnalyticFunction::constant(&l, 3, 1.0);
        assert!(solve_l0(&c, &[1.5], 0.1).is_err());
    }

    #[test]
    fn diagonal_reduces_to_l0() {
        let l = lat(2, 3.0);
        let om = [1.3, 1.7];
        let e = MultiIndex::from_pairs(&[(1, 1), (2, -1)]).unwrap();
        let f = AnalyticFunction::real_from_entries(&l, 4, &[(e, 2, C::new(0.3, 0.1))]).unwrap();
        let a = solve_l0(&f, &om, 0.01).unwrap();
        let b = solve_diagonal(&DiagonalModel::airy(4, 1.0, 0.0, &om), &f, 0.001).unwrap();
        assert!((&a - &b).max_abs() < 1e-16);
        assert!(b.is_real());
    }

    #[test]
    fn resonant_mode_reports_witness() {
        let l = lat(1, 1.0);
        let e1 = MultiIndex::unit(1, 1);
        let f = AnalyticFunction::from_entries(&l, 2, &[(e1, 1, C::new(1.0, 0.0))]).unwrap();
        match solve_l0(&f, &[1.0], 0.1) {
            Err(Error::SmallDivisor { j, value, .. }) => {
                assert_eq!(j, 1);
                assert_eq!(value, 0.0);
            }
            other => panic!("expected small divisor, got {other:?}"),
        }
    }

    #[test]
    fn scalar_phi_single_mode() {
        let l = lat(1, 1.0);
        let cos = AnalyticFunction::real_from_entries(&l, 2, &[(MultiIndex::unit(1, 1), 0, C::new(0.5, 0.0))]).unwrap();
        let b = solve_scalar_phi(&cos, &[1.25], 0.1).unwrap();
        // sin φ₁ / ω₁ has coefficient −i/(2ω₁) at ℓ = e₁
        assert!((b.coeff(&MultiIndex::unit(1, 1), 0) - C::new(0.0, -0.4)).norm() < 1e-15);
    }
}
