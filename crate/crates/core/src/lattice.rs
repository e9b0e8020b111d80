//! Finitely supported integer multi-indices, their weights, and truncated enumeration.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;
use std::ops::{Add, Neg, Sub};
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Integer vector on sites `1, 2, ...` with finite support.
///
/// Stored densely up to the last nonzero site; trailing zeros are trimmed so
/// that equality and hashing are structural.
#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct MultiIndex {
    entries: Vec<i64>,
}

impl MultiIndex {
    pub fn zero() -> Self {
        Self::default()
    }

    /// `entries[0]` is site 1.
    pub fn new(mut entries: Vec<i64>) -> Self {
        while entries.last() == Some(&0) {
            entries.pop();
        }
        Self { entries }
    }

    /// `value` at `site` (1-based), zero elsewhere.
    pub fn unit(site: usize, value: i64) -> Self {
        assert!(site >= 1, "sites start at 1");
        let mut v = vec![0; site];
        v[site - 1] = value;
        Self::new(v)
    }

    /// Build from sparse `(site, value)` pairs. Repeated sites accumulate.
    pub fn from_pairs(pairs: &[(usize, i64)]) -> Result<Self> {
        let mut v: Vec<i64> = Vec::new();
        for &(site, value) in pairs {
            if site == 0 {
                return Err(Error::InvalidInput("multi-index sites start at 1".into()));
            }
            if v.len() < site {
                v.resize(site, 0);
            }
            v[site - 1] += value;
        }
        Ok(Self::new(v))
    }

    /// Nonzero entries as `(site, value)`, sites ascending.
    pub fn pairs(&self) -> Vec<(usize, i64)> {
        self.support().collect()
    }

    pub fn support(&self) -> impl Iterator<Item = (usize, i64)> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(|(i, &v)| (i + 1, v))
    }

    pub fn get(&self, site: usize) -> i64 {
        if site == 0 {
            return 0;
        }
        self.entries.get(site - 1).copied().unwrap_or(0)
    }

    /// Highest site with a nonzero entry (0 for the zero index).
    pub fn max_site(&self) -> usize {
        self.entries.len()
    }

    pub fn is_zero(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[i64] {
        &self.entries
    }

    pub fn eta_norm(&self, eta: f64) -> f64 {
        eta_norm(self, eta)
    }

    pub fn l1_norm(&self) -> i64 {
        self.entries.iter().map(|v| v.abs()).sum()
    }

    /// `ω·ℓ`. Sites beyond `omega.len()` must be zero.
    pub fn dot(&self, omega: &[f64]) -> f64 {
        assert!(
            self.entries.len() <= omega.len(),
            "multi-index has support beyond the frequency vector"
        );
        self.entries
            .iter()
            .zip(omega)
            .map(|(&l, &w)| l as f64 * w)
            .sum()
    }

    fn padded_cmp(&self, other: &Self) -> Ordering {
        let n = self.entries.len().max(other.entries.len());
        for i in 1..=n {
            match self.get(i).cmp(&other.get(i)) {
                Ordering::Equal => continue,
                o => return o,
            }
        }
        Ordering::Equal
    }
}

impl PartialOrd for MultiIndex {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Lexicographic on entries, missing sites read as 0.
impl Ord for MultiIndex {
    fn cmp(&self, other: &Self) -> Ordering {
        self.padded_cmp(other)
    }
}

impl fmt::Debug for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ℓ{:?}", self.entries)
    }
}

impl fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (k, v) in self.entries.iter().enumerate() {
            if k > 0 {
                write!(f, ",")?;
            }
            write!(f, "{v}")?;
        }
        write!(f, ")")
    }
}

impl Neg for &MultiIndex {
    type Output = MultiIndex;
    fn neg(self) -> MultiIndex {
        MultiIndex {
            entries: self.entries.iter().map(|v| -v).collect(),
        }
    }
}

impl Neg for MultiIndex {
    type Output = MultiIndex;
    fn neg(self) -> MultiIndex {
        -&self
    }
}

impl Add for &MultiIndex {
    type Output = MultiIndex;
    fn add(self, rhs: &MultiIndex) -> MultiIndex {
        let n = self.entries.len().max(rhs.entries.len());
        MultiIndex::new((1..=n).map(|i| self.get(i) + rhs.get(i)).collect())
    }
}

impl Sub for &MultiIndex {
    type Output = MultiIndex;
    fn sub(self, rhs: &MultiIndex) -> MultiIndex {
        let n = self.entries.len().max(rhs.entries.len());
        MultiIndex::new((1..=n).map(|i| self.get(i) - rhs.get(i)).collect())
    }
}

/// `|ℓ|_η = Σ i^η |ℓ_i|`.
pub fn eta_norm(l: &MultiIndex, eta: f64) -> f64 {
    l.support()
        .map(|(i, v)| (i as f64).powf(eta) * v.unsigned_abs() as f64)
        .sum()
}

/// Exact `∏ (1 + |ℓ_i|⁵ i⁵)`, or `None` on overflow of `u128`.
pub fn divisor_weight_exact(l: &MultiIndex) -> Option<u128> {
    let mut acc: u128 = 1;
    for (i, v) in l.support() {
        let base = (v.unsigned_abs() as u128).checked_mul(i as u128)?;
        let p5 = base.checked_pow(5)?;
        acc = acc.checked_mul(p5.checked_add(1)?)?;
    }
    Some(acc)
}

/// `d(ℓ)` as a float. Overflow of the exact product is an error.
pub fn divisor_weight(l: &MultiIndex) -> Result<f64> {
    divisor_weight_exact(l)
        .map(|d| d as f64)
        .ok_or_else(|| Error::Overflow(format!("divisor weight of {l} exceeds u128")))
}

/// `∏ 1/(1 + ℓ_i² i²)` for `ℓ ≠ 0`.
pub fn diophantine_weight(l: &MultiIndex) -> Result<f64> {
    if l.is_zero() {
        return Err(Error::InvalidInput(
            "diophantine weight undefined at ℓ = 0".into(),
        ));
    }
    Ok(l.support()
        .map(|(i, v)| {
            let t = v as f64 * i as f64;
            1.0 / (1.0 + t * t)
        })
        .product())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatticeParams {
    pub eta: f64,
    /// Active sites `1..=m`.
    pub m: usize,
    /// Cutoff on `|ℓ|_η`.
    pub k: f64,
}

impl LatticeParams {
    pub fn new(eta: f64, m: usize, k: f64) -> Self {
        Self { eta, m, k }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidInput(format!("eta must be > 0, got {}", self.eta)));
        }
        if self.m == 0 {
            return Err(Error::InvalidInput("M must be ≥ 1".into()));
        }
        if !(self.k >= 0.0 && self.k.is_finite()) {
            return Err(Error::InvalidInput(format!("K must be finite ≥ 0, got {}", self.k)));
        }
        Ok(())
    }
}

const NORM_SLACK: f64 = 1e-9;

/// All `ℓ` with support in `{1..M}` and `|ℓ|_η ≤ K`, ordered by norm then
/// lexicographically.
pub fn enumerate(params: &LatticeParams) -> Vec<MultiIndex> {
    let mut out = Vec::new();
    let mut cur = vec![0i64; params.m];
    fill(params, 0, params.k, &mut cur, &mut out);
    let mut keyed: Vec<(f64, MultiIndex)> = out
        .into_iter()
        .map(|l| (eta_norm(&l, params.eta), l))
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
    keyed.into_iter().map(|(_, l)| l).collect()
}

fn fill(p: &LatticeParams, site: usize, budget: f64, cur: &mut Vec<i64>, out: &mut Vec<MultiIndex>) {
    if site == p.m {
        out.push(MultiIndex::new(cur.clone()));
        return;
    }
    let w = ((site + 1) as f64).powf(p.eta);
    let vmax = ((budget + NORM_SLACK) / w).floor().max(0.0) as i64;
    for v in -vmax..=vmax {
        cur[site] = v;
        fill(p, site + 1, budget - w * v.abs() as f64, cur, out);
    }
    cur[site] = 0;
}

/// `max_ℓ d(ℓ) e^{−ρ|ℓ|_η}` over the enumeration.
pub fn weight_bound_report(rho: f64, eta: f64, params: &LatticeParams) -> Result<f64> {
    let mut best: f64 = 0.0;
    for l in enumerate(params) {
        let d = divisor_weight(&l)?;
        let n = eta_norm(&l, eta);
        // d·e^{−ρn} computed in log space so that huge d and huge ρ stay finite
        let v = (d.ln() - rho * n).exp();
        best = best.max(v);
    }
    Ok(best)
}

/// `Σ |ℓ|₁³ / d(ℓ)` over the enumeration.
pub fn palline_partial_sum(params: &LatticeParams) -> Result<f64> {
    let mut s = 0.0;
    for l in enumerate(params) {
        let n1 = l.l1_norm() as f64;
        s += n1 * n1 * n1 / divisor_weight(&l)?;
    }
    Ok(s)
}

/// An enumerated truncation with lookup tables, shared by functions and
/// operators built on it.
pub struct Lattice {
    params: LatticeParams,
    indices: Vec<MultiIndex>,
    norms: Vec<f64>,
    lookup: HashMap<MultiIndex, usize>,
    neg: Vec<usize>,
    add: OnceLock<Vec<u32>>,
    box_max: Vec<i64>,
}

impl fmt::Debug for Lattice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Lattice")
            .field("params", &self.params)
            .field("len", &self.indices.len())
            .finish()
    }
}

pub const NO_INDEX: u32 = u32::MAX;

impl Lattice {
    pub fn new(params: LatticeParams) -> Result<Arc<Self>> {
        params.validate()?;
        let indices = enumerate(&params);
        let norms = indices.iter().map(|l| eta_norm(l, params.eta)).collect();
        let lookup: HashMap<MultiIndex, usize> =
            indices.iter().cloned().enumerate().map(|(k, l)| (l, k)).collect();
        let neg = indices.iter().map(|l| lookup[&(-l)]).collect();
        let mut box_max = vec![0i64; params.m];
        for l in &indices {
            for (i, v) in l.support() {
                box_max[i - 1] = box_max[i - 1].max(v.abs());
            }
        }
        Ok(Arc::new(Self {
            params,
            indices,
            norms,
            lookup,
            neg,
            add: OnceLock::new(),
            box_max,
        }))
    }

    pub fn params(&self) -> &LatticeParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[MultiIndex] {
        &self.indices
    }

    pub fn index(&self, k: usize) -> &MultiIndex {
        &self.indices[k]
    }

    pub fn norm_of(&self, k: usize) -> f64 {
        self.norms[k]
    }

    pub fn position(&self, l: &MultiIndex) -> Option<usize> {
        self.lookup.get(l).copied()
    }

    /// Position of `−ℓ_k`.
    pub fn neg_of(&self, k: usize) -> usize {
        self.neg[k]
    }

    /// Position of the zero index (always 0 in the ordering).
    pub fn zero(&self) -> usize {
        0
    }

    /// Largest `|ℓ_i|` present, per site.
    pub fn box_max(&self) -> &[i64] {
        &self.box_max
    }

    /// Position of `ℓ_a + ℓ_b`, or `NO_INDEX` when outside the truncation.
    pub fn add_of(&self, a: usize, b: usize) -> u32 {
        let n = self.indices.len();
        let table = self.add.get_or_init(|| {
            let mut t = vec![NO_INDEX; n * n];
            for a in 0..n {
                for b in 0..n {
                    let s = &self.indices[a] + &self.indices[b];
                    if let Some(&p) = self.lookup.get(&s) {
                        t[a * n + b] = p as u32;
                    }
                }
            }
            t
        });
        table[a * n + b]
    }

    pub fn same_as(&self, other: &Lattice) -> bool {
        self.params == other.params
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ml(v: &[i64]) -> MultiIndex {
        MultiIndex::new(v.to_vec())
    }

    #[test]
    fn eta_norm_examples() {
        assert_eq!(eta_norm(&MultiIndex::zero(), 1.0), 0.0);
        assert_eq!(eta_norm(&ml(&[2, -1]), 1.0), 4.0);
        assert!((eta_norm(&MultiIndex::unit(3, 1), 2.0) - 9.0).abs() < 1e-12);
    }

    #[test]
    fn divisor_weight_examples() {
        assert_eq!(divisor_weight(&MultiIndex::zero()).unwrap(), 1.0);
        assert_eq!(divisor_weight(&ml(&[1])).unwrap(), 2.0);
        // hand expansion: (1 + 2^5)(1 + 1^5 2^5)
        assert_eq!(divisor_weight(&ml(&[2, 1])).unwrap(), 1089.0);
    }

    #[test]
    fn divisor_weight_overflow_is_reported() {
        let big = MultiIndex::from_pairs(&[(1, 1 << 20), (2, 1 << 20), (3, 1 << 20)]).unwrap();
        assert!(matches!(divisor_weight(&big), Err(Error::Overflow(_))));
    }

    #[test]
    fn diophantine_weight_examples() {
        assert_eq!(diophantine_weight(&ml(&[1])).unwrap(), 0.5);
        assert_eq!(diophantine_weight(&ml(&[0, 1])).unwrap(), 0.2);
        assert!((diophantine_weight(&ml(&[1, -2])).unwrap() - 1.0 / 34.0).abs() < 1e-15);
        assert!(diophantine_weight(&MultiIndex::zero()).is_err());
    }

    #[test]
    fn enumerate_small() {
        assert_eq!(enumerate(&LatticeParams::new(1.0, 1, 0.5)), vec![MultiIndex::zero()]);
        let e = enumerate(&LatticeParams::new(1.0, 1, 2.0));
        assert_eq!(e, vec![ml(&[]), ml(&[-1]), ml(&[1]), ml(&[-2]), ml(&[2])]);
        // brute-force double loop over |ℓ₁| + 2|ℓ₂| ≤ 2
        let mut count = 0;
        for a in -3i64..=3 {
            for b in -3i64..=3 {
                if a.abs() + 2 * b.abs() <= 2 {
                    count += 1;
                }
            }
        }
        assert_eq!(count, 7);
        assert_eq!(enumerate(&LatticeParams::new(1.0, 2, 2.0)).len(), count);
    }

    #[test]
    fn ordering_pads_with_zero() {
        assert!(ml(&[1, -1]) < ml(&[1]));
        assert!(ml(&[1]) < ml(&[1, 1]));
    }

    #[test]
    fn lattice_tables() {
        let lat = Lattice::new(LatticeParams::new(1.0, 2, 3.0)).unwrap();
        for k in 0..lat.len() {
            assert_eq!(lat.index(lat.neg_of(k)), &(-lat.index(k)));
            assert_eq!(lat.add_of(k, lat.zero()) as usize, k);
        }
        assert_eq!(lat.box_max(), &[3, 1]);
    }
}
