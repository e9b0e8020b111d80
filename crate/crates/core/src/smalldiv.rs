//! Non-resonance predicates on truncated index sets, and Monte Carlo
//! estimates of their acceptance fractions.
//!
//! Convention: the spectrum of `ω·∂_φ + ∂_x³` on `e^{i(ℓ·φ+jx)}` is
//! `i(ω·ℓ − j³)`. Scans run over `j ∈ [−jmax, jmax]` on a lattice closed
//! under negation, so either sign of `j³` gives the same set of moduli.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{diophantine_weight, divisor_weight, Lattice, MultiIndex};

/// Frequency vector with entries in `[1, 2]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyVector(Vec<f64>);

impl FrequencyVector {
    pub fn new(omega: Vec<f64>) -> Result<Self> {
        if omega.is_empty() {
            return Err(Error::InvalidInput("empty frequency vector".into()));
        }
        for (i, w) in omega.iter().enumerate() {
            if !w.is_finite() || !(1.0..=2.0).contains(w) {
                return Err(Error::InvalidInput(format!("ω_{} = {w} not in [1,2]", i + 1)));
            }
        }
        Ok(Self(omega))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `γ₀ < γ̄/2` and `γ_n = (1 − 2^{−n}) γ_{n−1}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiophantineParams {
    pub gamma0: f64,
    pub gbar: f64,
}

impl DiophantineParams {
    pub fn new(gamma0: f64, gbar: f64) -> Result<Self> {
        if !(gamma0 > 0.0 && gamma0 < 1.0) {
            return Err(Error::InvalidInput(format!("γ₀ = {gamma0} not in (0,1)")));
        }
        if !(gamma0 < 0.5 * gbar) {
            return Err(Error::InvalidInput(format!("need γ₀ < γ̄/2, got γ₀={gamma0}, γ̄={gbar}")));
        }
        Ok(Self { gamma0, gbar })
    }

    /// `γ_n`, with `γ_0 = γ₀`.
    pub fn gamma(&self, n: usize) -> f64 {
        let mut g = self.gamma0;
        for k in 1..=n {
            g *= 1.0 - 0.5f64.powi(k as i32);
        }
        g
    }

    pub fn schedule(&self, n: usize) -> Vec<f64> {
        (0..n).map(|k| self.gamma(k)).collect()
    }
}

/// Tabulated `Ω(j)` for `|j| ≤ jmax`. `Ω(0)` is stored but only used by scans
/// that include `j = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyTable {
    jmax: usize,
    values: Vec<f64>,
}

impl FrequencyTable {
    pub fn from_fn(jmax: usize, f: impl Fn(i64) -> f64) -> Self {
        let values = (-(jmax as i64)..=jmax as i64).map(f).collect();
        Self { jmax, values }
    }

    /// `Ω₀(j) = −λ₃j³ + λ₁j`.
    pub fn airy(jmax: usize, lambda3: f64, lambda1: f64) -> Self {
        Self::from_fn(jmax, |j| -lambda3 * (j * j * j) as f64 + lambda1 * j as f64)
    }

    pub fn jmax(&self) -> usize {
        self.jmax
    }

    pub fn get(&self, j: i64) -> f64 {
        self.values[(j + self.jmax as i64) as usize]
    }

    pub fn set(&mut self, j: i64, v: f64) {
        self.values[(j + self.jmax as i64) as usize] = v;
    }

    /// `max_j |Ω(−j) + Ω(j)|`.
    pub fn oddness_defect(&self) -> f64 {
        (1..=self.jmax as i64)
            .map(|j| (self.get(j) + self.get(-j)).abs())
            .fold(self.get(0).abs(), f64::max)
    }

    /// `(j, Ω(j))` pairs in increasing `j`.
    pub fn entries(&self) -> impl Iterator<Item = (i64, f64)> + '_ {
        self.values
            .iter()
            .enumerate()
            .map(|(i, &v)| (i as i64 - self.jmax as i64, v))
    }
}

/// A triple `(ℓ, j, h)` where a bound was tested, with the divisor modulus
/// and the floor it was compared against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub ell: Vec<(usize, i64)>,
    pub j: i64,
    pub h: i64,
    pub value: f64,
    pub floor: f64,
}

impl Witness {
    fn new(ell: &MultiIndex, j: i64, h: i64, value: f64, floor: f64) -> Self {
        Self {
            ell: ell.pairs(),
            j,
            h,
            value,
            floor,
        }
    }

    /// `value / floor`; below 1 means a violation.
    pub fn margin(&self) -> f64 {
        self.value / self.floor
    }

    pub fn multi_index(&self) -> MultiIndex {
        MultiIndex::from_pairs(&self.ell).expect("witness index")
    }

    pub fn into_error(self) -> Error {
        Error::SmallDivisor {
            ell: self.multi_index(),
            j: self.j,
            h: self.h,
            value: self.value,
            floor: self.floor,
        }
    }
}

/// Result of a membership scan: the first violation, if any, and the tightest
/// tested case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Membership {
    pub passed: bool,
    pub violation: Option<Witness>,
    pub worst: Option<Witness>,
}

struct Scan {
    violation: Option<Witness>,
    worst: Option<Witness>,
}

impl Scan {
    fn new() -> Self {
        Self {
            violation: None,
            worst: None,
        }
    }

    fn push(&mut self, w: Witness, fails: bool) {
        let m = w.margin();
        if self.worst.as_ref().is_none_or(|b| m < b.margin()) {
            self.worst = Some(w.clone());
        }
        if fails && self.violation.is_none() {
            self.violation = Some(w);
        }
    }

    fn finish(self) -> Membership {
        Membership {
            passed: self.violation.is_none(),
            violation: self.violation,
            worst: self.worst,
        }
    }
}

fn d_of(l: &MultiIndex) -> Result<f64> {
    divisor_weight(l)
}

/// `|ω·ℓ| > γ ∏ 1/(1+ℓ_i² i²)` for every enumerated `ℓ ≠ 0`.
pub fn in_dgamma(omega: &[f64], gamma: f64, lattice: &Lattice) -> Result<Membership> {
    let mut s = Scan::new();
    for l in lattice.indices().iter().filter(|l| !l.is_zero()) {
        let value = l.dot(omega).abs();
        let floor = gamma * diophantine_weight(l)?;
        s.push(Witness::new(l, 0, 0, value, floor), value <= floor);
    }
    Ok(s.finish())
}

/// `|ω·ℓ + j³| ≥ γ₀/d(ℓ)` for enumerated `ℓ`, `|j| ≤ jmax`, `(ℓ,j) ≠ (0,0)`.
pub fn in_o0(omega: &[f64], gamma0: f64, lattice: &Lattice, jmax: usize) -> Result<Membership> {
    let mut s = Scan::new();
    let jm = jmax as i64;
    for l in lattice.indices() {
        let wl = l.dot(omega);
        let floor = gamma0 / d_of(l)?;
        for j in -jm..=jm {
            if j == 0 && l.is_zero() {
                continue;
            }
            let value = (wl + (j * j * j) as f64).abs();
            s.push(Witness::new(l, j, j, value, floor), value < floor);
        }
    }
    Ok(s.finish())
}

/// `|ω·ℓ + Ω(j)| ≥ γ|j|³/d(ℓ)` for enumerated `ℓ` and `0 < |j| ≤ jmax`.
pub fn first_melnikov(omega: &[f64], table: &FrequencyTable, gamma: f64, lattice: &Lattice) -> Result<Membership> {
    let mut s = Scan::new();
    let jm = table.jmax() as i64;
    for l in lattice.indices() {
        let wl = l.dot(omega);
        let d = d_of(l)?;
        for j in (-jm..=jm).filter(|&j| j != 0) {
            let value = (wl + table.get(j)).abs();
            let floor = gamma * (j.abs().pow(3)) as f64 / d;
            s.push(Witness::new(l, j, j, value, floor), value < floor);
        }
    }
    Ok(s.finish())
}

/// `|ω·ℓ + Ω(j) − Ω(h)| ≥ 2γ|j³ − h³|/d(ℓ)` for `j ≠ h`; the `j = h`, `ℓ ≠ 0`
/// cases are delegated to [`in_dgamma`] at `gbar`.
pub fn second_melnikov(
    omega: &[f64],
    table: &FrequencyTable,
    gamma: f64,
    gbar: f64,
    lattice: &Lattice,
) -> Result<Membership> {
    let mut s = Scan::new();
    let jm = table.jmax() as i64;
    for l in lattice.indices() {
        let wl = l.dot(omega);
        let d = d_of(l)?;
        for j in (-jm..=jm).filter(|&j| j != 0) {
            for h in (-jm..=jm).filter(|&h| h != 0 && h != j) {
                let value = (wl + table.get(j) - table.get(h)).abs();
                let floor = 2.0 * gamma * (j * j * j - h * h * h).abs() as f64 / d;
                s.push(Witness::new(l, j, h, value, floor), value < floor);
            }
        }
    }
    let diag = in_dgamma(omega, gbar, lattice)?;
    if let Some(w) = diag.worst {
        s.push(w, false);
    }
    if let Some(w) = diag.violation {
        s.push(w, true);
    }
    Ok(s.finish())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasureEstimate {
    pub samples: usize,
    pub accepted: usize,
    pub fraction: f64,
    /// 95% Wilson score interval.
    pub ci: (f64, f64),
}

/// Fraction of `ω ~ U([1,2]^m)` accepted by `pred`.
pub fn measure_estimate(
    m: usize,
    n_samples: usize,
    seed: u64,
    mut pred: impl FnMut(&[f64]) -> Result<bool>,
) -> Result<MeasureEstimate> {
    if n_samples < 100 {
        return Err(Error::InvalidInput(format!("need at least 100 samples, got {n_samples}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut omega = vec![0.0; m];
    let mut accepted = 0;
    for _ in 0..n_samples {
        for w in omega.iter_mut() {
            *w = rng.gen_range(1.0..=2.0);
        }
        if pred(&omega)? {
            accepted += 1;
        }
    }
    let n = n_samples as f64;
    let p = accepted as f64 / n;
    let z = 1.959_963_984_540_054;
    let denom = 1.0 + z * z / n;
    let centre = (p + z * z / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / denom;
    Ok(MeasureEstimate {
        samples: n_samples,
        accepted,
        fraction: p,
        ci: ((centre - half).max(0.0), (centre + half).min(1.0)),
    })
}

/// What a divisor report scans.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScanMode {
    /// `(ℓ, j, h)` with `j, h ≠ 0`, excluding `ℓ = 0, j = h`; weight `d(ℓ)/max(1,|j³−h³|)`.
    Triples,
    /// `(ℓ, j)` with `|j| ≤ jmax`, `(ℓ, j) ≠ (0, 0)`; weight `d(ℓ)`.
    Diagonal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivisorReport {
    pub mode: ScanMode,
    pub min_weighted: Option<f64>,
    pub witness: Option<Witness>,
    pub note: String,
}

/// Smallest weighted divisor over the truncated index set.
pub fn smallest_divisor_report(
    omega: &[f64],
    table: &FrequencyTable,
    lattice: &Lattice,
    mode: ScanMode,
) -> Result<DivisorReport> {
    let jm = table.jmax() as i64;
    let mut best: Option<Witness> = None;
    let mut consider = |w: Witness| {
        if best.as_ref().is_none_or(|b| w.value < b.value) {
            best = Some(w);
        }
    };
    for l in lattice.indices() {
        let wl = l.dot(omega);
        let d = d_of(l)?;
        match mode {
            ScanMode::Triples => {
                for j in (-jm..=jm).filter(|&j| j != 0) {
                    for h in (-jm..=jm).filter(|&h| h != 0) {
                        if l.is_zero() && j == h {
                            continue;
                        }
                        let div = (wl + table.get(j) - table.get(h)).abs();
                        let norm = ((j * j * j - h * h * h).abs() as f64).max(1.0);
                        consider(Witness::new(l, j, h, div * d / norm, 1.0));
                    }
                }
            }
            ScanMode::Diagonal => {
                for j in -jm..=jm {
                    if l.is_zero() && j == 0 {
                        continue;
                    }
                    let div = (wl + table.get(j)).abs();
                    consider(Witness::new(l, j, j, div * d, 1.0));
                }
            }
        }
    }
    let note = if best.is_none() {
        "no nontrivial triples".to_string()
    } else {
        String::new()
    };
    Ok(DivisorReport {
        mode,
        min_weighted: best.as_ref().map(|w| w.value),
        witness: best,
        note,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::LatticeParams;

    fn lat(m: usize, k: f64) -> std::sync::Arc<Lattice> {
        Lattice::new(LatticeParams::new(1.0, m, k)).unwrap()
    }

    #[test]
    fn gamma_schedule_decreases_to_positive_limit() {
        let p = DiophantineParams::new(0.1, 0.5).unwrap();
        let s = p.schedule(40);
        assert_eq!(s[0], 0.1);
        assert!((s[1] - 0.05).abs() < 1e-15);
        assert!(s.windows(2).all(|w| w[1] < w[0]));
        assert!(s[39] > 0.028 && s[39] < 0.029);
        assert!(DiophantineParams::new(0.3, 0.5).is_err());
    }

    #[test]
    fn resonant_dgamma_has_witness() {
        let l = lat(2, 3.0);
        let m = in_dgamma(&[1.0, 1.0], 0.1, &l).unwrap();
        assert!(!m.passed);
        let w = m.violation.unwrap();
        let ell = w.multi_index();
        assert_eq!(ell.dot(&[1.0, 1.0]), 0.0);
    }

    #[test]
    fn o0_resonance_and_witness_replay() {
        // ω·(1,0) = 1 = −(−1)³
        let l = lat(2, 2.0);
        let m = in_o0(&[1.0, 1.5], 0.01, &l, 4).unwrap();
        assert!(!m.passed);
        let w = m.violation.unwrap();
        let ell = w.multi_index();
        let v = (ell.dot(&[1.0, 1.5]) + (w.j * w.j * w.j) as f64).abs();
        assert_eq!(v, w.value);
        assert!(v < 0.01 / divisor_weight(&ell).unwrap());
    }

    #[test]
    fn first_melnikov_trivial_table() {
        let l = lat(1, 0.5);
        let t = FrequencyTable::airy(5, 1.0, 0.0);
        assert!(first_melnikov(&[1.3], &t, 1.0, &l).unwrap().passed);
    }

    #[test]
    fn divisor_report_single_mode() {
        // only j = 0 and ℓ ∈ {0, ±e₁}: the minimum is ω₁·d(e₁) = 2ω₁
        let l = lat(1, 1.0);
        let t = FrequencyTable::from_fn(0, |_| 0.0);
        let r = smallest_divisor_report(&[1.25], &t, &l, ScanMode::Diagonal).unwrap();
        assert_eq!(r.min_weighted, Some(2.5));
        let r = smallest_divisor_report(&[1.25], &t, &l, ScanMode::Triples).unwrap();
        assert_eq!(r.note, "no nontrivial triples");
        assert!(r.witness.is_none());
    }

    #[test]
    fn measure_trivial_predicates() {
        let a = measure_estimate(2, 100, 1, |_| Ok(true)).unwrap();
        assert_eq!(a.fraction, 1.0);
        let b = measure_estimate(2, 100, 1, |_| Ok(false)).unwrap();
        assert_eq!(b.fraction, 0.0);
        assert!(measure_estimate(2, 99, 1, |_| Ok(true)).is_err());
    }
}
