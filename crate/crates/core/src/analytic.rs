//! Truncated Fourier series `u(φ, x) = Σ u_j(ℓ) e^{i(ℓ·φ + jx)}` on the
//! lattice truncation `|ℓ|_η ≤ K`, `|j| ≤ jmax`.

use std::ops::{Add, Mul, Neg, Sub};
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, GridOptions};
use crate::lattice::{diophantine_weight, Lattice, LatticeParams, MultiIndex, NO_INDEX};

type C = Complex64;
const ZERO: C = C { re: 0.0, im: 0.0 };

/// Truncated analytic function with dense storage over the truncation.
#[derive(Clone)]
pub struct AnalyticFunction {
    lattice: Arc<Lattice>,
    jmax: usize,
    coeffs: Vec<C>,
    real: bool,
    zero_x_average: bool,
}

impl std::fmt::Debug for AnalyticFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let nz = self.coeffs.iter().filter(|c| **c != ZERO).count();
        f.debug_struct("AnalyticFunction")
            .field("params", self.lattice.params())
            .field("jmax", &self.jmax)
            .field("nonzero", &nz)
            .field("real", &self.real)
            .finish()
    }
}

impl AnalyticFunction {
    pub fn zeros(lattice: &Arc<Lattice>, jmax: usize) -> Self {
        Self {
            lattice: lattice.clone(),
            jmax,
            coeffs: vec![ZERO; lattice.len() * (2 * jmax + 1)],
            real: true,
            zero_x_average: true,
        }
    }

    pub fn constant(lattice: &Arc<Lattice>, jmax: usize, c: f64) -> Self {
        let mut u = Self::zeros(lattice, jmax);
        u.coeffs[jmax] = C::new(c, 0.0);
        u.refresh();
        u
    }

    /// Build from explicit `(ℓ, j, c)` entries (duplicates accumulate). The
    /// reality flag is set when the data is conjugate symmetric.
    pub fn from_entries(lattice: &Arc<Lattice>, jmax: usize, entries: &[(MultiIndex, i64, C)]) -> Result<Self> {
        let mut u = Self::zeros(lattice, jmax);
        for (l, j, c) in entries {
            let i = u.flat(l, *j).ok_or_else(|| {
                Error::InvalidInput(format!("mode ({l}, {j}) outside the truncation"))
            })?;
            u.coeffs[i] += c;
        }
        u.real = u.reality_residual() == 0.0;
        u.refresh();
        Ok(u)
    }

    /// Real-on-real function from half the data: each `(ℓ, j, c)` also sets
    /// `(−ℓ, −j)` to `conj(c)`. Self-conjugate entries keep their real part.
    pub fn real_from_entries(lattice: &Arc<Lattice>, jmax: usize, entries: &[(MultiIndex, i64, C)]) -> Result<Self> {
        let mut full = Vec::with_capacity(2 * entries.len());
        for (l, j, c) in entries {
            if l.is_zero() && *j == 0 {
                full.push((l.clone(), 0, C::new(c.re, 0.0)));
            } else {
                full.push((l.clone(), *j, *c));
                full.push((-l, -*j, c.conj()));
            }
        }
        let mut u = Self::from_entries(lattice, jmax, &full)?;
        u.real = true;
        u.symmetrize();
        Ok(u)
    }

    /// Coefficient array on another truncation (modes outside are dropped).
    pub fn embed(&self, lattice: &Arc<Lattice>, jmax: usize) -> Self {
        let mut u = Self::zeros(lattice, jmax);
        let w = u.width();
        for (k, l) in self.lattice.indices().iter().enumerate() {
            if let Some(k2) = lattice.position(l) {
                for j in -(self.jmax.min(jmax) as i64)..=(self.jmax.min(jmax) as i64) {
                    u.coeffs[k2 * w + (j + jmax as i64) as usize] = self.at(k, j);
                }
            }
        }
        u.real = self.real;
        u.refresh();
        u
    }

    pub fn lattice(&self) -> &Arc<Lattice> {
        &self.lattice
    }

    pub fn params(&self) -> &LatticeParams {
        self.lattice.params()
    }

    pub fn jmax(&self) -> usize {
        self.jmax
    }

    pub fn width(&self) -> usize {
        2 * self.jmax + 1
    }

    pub fn coeffs(&self) -> &[C] {
        &self.coeffs
    }

    pub fn is_real(&self) -> bool {
        self.real
    }

    pub fn zero_x_average(&self) -> bool {
        self.zero_x_average
    }

    fn flat(&self, l: &MultiIndex, j: i64) -> Option<usize> {
        if j.unsigned_abs() as usize > self.jmax {
            return None;
        }
        let k = self.lattice.position(l)?;
        Some(k * self.width() + (j + self.jmax as i64) as usize)
    }

    /// Coefficient at lattice position `k`, spatial mode `j`.
    pub fn at(&self, k: usize, j: i64) -> C {
        if j.unsigned_abs() as usize > self.jmax {
            return ZERO;
        }
        self.coeffs[k * self.width() + (j + self.jmax as i64) as usize]
    }

    pub fn coeff(&self, l: &MultiIndex, j: i64) -> C {
        self.flat(l, j).map(|i| self.coeffs[i]).unwrap_or(ZERO)
    }

    /// Overwrite one coefficient. The reality flag is dropped unless the
    /// result is still conjugate symmetric.
    pub fn set(&mut self, l: &MultiIndex, j: i64, c: C) -> Result<()> {
        let i = self
            .flat(l, j)
            .ok_or_else(|| Error::InvalidInput(format!("mode ({l}, {j}) outside the truncation")))?;
        self.coeffs[i] = c;
        self.real = self.reality_residual() == 0.0;
        self.refresh();
        Ok(())
    }

    /// Crate-internal constructor from raw storage.
    pub(crate) fn from_raw(lattice: &Arc<Lattice>, jmax: usize, coeffs: Vec<C>, real: bool) -> Self {
        assert_eq!(coeffs.len(), lattice.len() * (2 * jmax + 1));
        let mut u = Self {
            lattice: lattice.clone(),
            jmax,
            coeffs,
            real,
            zero_x_average: false,
        };
        if real {
            u.symmetrize();
        }
        u.refresh();
        u
    }

    fn refresh(&mut self) {
        let w = self.width();
        let jm = self.jmax;
        self.zero_x_average = (0..self.lattice.len()).all(|k| self.coeffs[k * w + jm] == ZERO);
    }

    fn mirror(&self, i: usize) -> usize {
        let w = self.width();
        let k = i / w;
        let jj = i % w;
        self.lattice.neg_of(k) * w + (w - 1 - jj)
    }

    /// Project onto conjugate-symmetric data; afterwards the symmetry holds
    /// bit-exactly.
    fn symmetrize(&mut self) {
        for i in 0..self.coeffs.len() {
            let m = self.mirror(i);
            if m < i {
                continue;
            }
            if m == i {
                self.coeffs[i].im = 0.0;
            } else {
                let a = self.coeffs[i];
                let b = self.coeffs[m];
                let s = (a + b.conj()) * 0.5;
                self.coeffs[i] = s;
                self.coeffs[m] = s.conj();
            }
        }
    }

    /// `max |u_j(ℓ) − conj(u_{−j}(−ℓ))|`.
    pub fn reality_residual(&self) -> f64 {
        (0..self.coeffs.len())
            .map(|i| (self.coeffs[i] - self.coeffs[self.mirror(i)].conj()).norm())
            .fold(0.0, f64::max)
    }

    /// Declare the function real-on-real, projecting away any antisymmetric
    /// part.
    pub fn into_real(mut self) -> Self {
        self.real = true;
        self.symmetrize();
        self.refresh();
        self
    }

    /// True when only `j = 0` modes are nonzero.
    pub fn is_phi_only(&self) -> bool {
        let w = self.width();
        self.coeffs
            .iter()
            .enumerate()
            .all(|(i, c)| i % w == self.jmax || *c == ZERO)
    }

    /// True when only `ℓ = 0` modes are nonzero.
    pub fn is_x_only(&self) -> bool {
        self.coeffs[self.width()..].iter().all(|c| *c == ZERO)
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|c| *c == ZERO)
    }

    fn check_compatible(&self, other: &Self) {
        assert!(
            self.jmax == other.jmax && self.lattice.same_as(&other.lattice),
            "incompatible truncations"
        );
    }

    /// `Σ e^{σ(|ℓ|_η + |j|)} |u_j(ℓ)|`.
    pub fn norm(&self, sigma: f64) -> f64 {
        let w = self.width();
        let mut s = 0.0;
        for k in 0..self.lattice.len() {
            let nl = self.lattice.norm_of(k);
            for jj in 0..w {
                let c = self.coeffs[k * w + jj];
                if c != ZERO {
                    let j = (jj as i64 - self.jmax as i64).abs() as f64;
                    s += (sigma * (nl + j)).exp() * c.norm();
                }
            }
        }
        s
    }

    /// `max |u_j(ℓ)|`.
    pub fn max_abs(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm()).fold(0.0, f64::max)
    }

    fn map_coeffs(&self, real: bool, f: impl Fn(usize, i64, C) -> C) -> Self {
        let w = self.width();
        let coeffs = self
            .coeffs
            .iter()
            .enumerate()
            .map(|(i, &c)| f(i / w, (i % w) as i64 - self.jmax as i64, c))
            .collect();
        Self::from_raw(&self.lattice, self.jmax, coeffs, real)
    }

    pub fn scale(&self, a: f64) -> Self {
        self.map_coeffs(self.real, |_, _, c| c * a)
    }

    pub fn scale_complex(&self, a: C) -> Self {
        self.map_coeffs(self.real && a.im == 0.0, |_, _, c| c * a)
    }

    /// `self + a·other`.
    pub fn axpy(&self, a: f64, other: &Self) -> Self {
        self.check_compatible(other);
        let coeffs = self.coeffs.iter().zip(&other.coeffs).map(|(x, y)| x + y * a).collect();
        Self::from_raw(&self.lattice, self.jmax, coeffs, self.real && other.real)
    }

    pub fn add_constant(&self, c: f64) -> Self {
        let mut u = self.clone();
        u.coeffs[self.jmax] += c;
        u.refresh();
        u
    }

    /// Mean over `(φ, x)`: the `(0, 0)` coefficient.
    pub fn mean(&self) -> C {
        self.coeffs[self.jmax]
    }

    fn nonzero_rows(&self) -> Vec<usize> {
        let w = self.width();
        (0..self.lattice.len())
            .filter(|&k| self.coeffs[k * w..(k + 1) * w].iter().any(|c| *c != ZERO))
            .collect()
    }

    /// Spectral product by direct convolution, truncated back.
    pub fn multiply(&self, other: &Self) -> Self {
        self.check_compatible(other);
        let w = self.width();
        let jm = self.jmax as i64;
        let mut out = vec![ZERO; self.coeffs.len()];
        let ra = self.nonzero_rows();
        let rb = other.nonzero_rows();
        for &ka in &ra {
            for ja in -jm..=jm {
                let ca = self.coeffs[ka * w + (ja + jm) as usize];
                if ca == ZERO {
                    continue;
                }
                for &kb in &rb {
                    let kc = self.lattice.add_of(ka, kb);
                    if kc == NO_INDEX {
                        continue;
                    }
                    let kc = kc as usize;
                    let lo = (-jm).max(-jm - ja);
                    let hi = jm.min(jm - ja);
                    for jb in lo..=hi {
                        let cb = other.coeffs[kb * w + (jb + jm) as usize];
                        out[kc * w + (ja + jb + jm) as usize] += ca * cb;
                    }
                }
            }
        }
        Self::from_raw(&self.lattice, self.jmax, out, self.real && other.real)
    }

    /// `∂_x^order`: coefficients times `(ij)^order`.
    pub fn dx(&self, order: u32) -> Self {
        let i = C::new(0.0, 1.0);
        self.map_coeffs(self.real, |_, j, c| c * (i * j as f64).powu(order))
    }

    /// `∂_x^{−1}` on zero x-average data.
    pub fn dx_inv(&self) -> Result<Self> {
        if !self.zero_x_average {
            return Err(Error::InvalidInput(
                "∂_x^{-1} requires zero x-average".into(),
            ));
        }
        let i = C::new(0.0, 1.0);
        Ok(self.map_coeffs(self.real, |_, j, c| if j == 0 { ZERO } else { c / (i * j as f64) }))
    }

    /// `ω·∂_φ`: coefficients times `i ω·ℓ`.
    pub fn om_dphi(&self, omega: &[f64]) -> Self {
        let lat = self.lattice.clone();
        self.map_coeffs(self.real, |k, _, c| c * C::new(0.0, lat.index(k).dot(omega)))
    }

    /// `(ω·∂_φ)^{−1}` on zero φ-average data. A divisor `|ω·ℓ|` at or below
    /// `γ ∏ 1/(1+ℓ_i² i²)` is an error naming `ℓ`.
    pub fn om_dphi_inv(&self, omega: &[f64], gamma: f64) -> Result<Self> {
        let w = self.width();
        if self.coeffs[..w].iter().any(|c| *c != ZERO) {
            return Err(Error::InvalidInput(
                "(ω·∂_φ)^{-1} requires zero φ-average".into(),
            ));
        }
        let mut out = vec![ZERO; self.coeffs.len()];
        for k in 1..self.lattice.len() {
            let row = &self.coeffs[k * w..(k + 1) * w];
            if row.iter().all(|c| *c == ZERO) {
                continue;
            }
            let l = self.lattice.index(k);
            let d = l.dot(omega);
            let floor = gamma * diophantine_weight(l)?;
            if d.abs() <= floor {
                return Err(Error::SmallDivisor {
                    ell: l.clone(),
                    j: 0,
                    h: 0,
                    value: d.abs(),
                    floor,
                });
            }
            for (o, c) in out[k * w..(k + 1) * w].iter_mut().zip(row) {
                *o = c / C::new(0.0, d);
            }
        }
        Ok(Self::from_raw(&self.lattice, self.jmax, out, self.real))
    }

    /// `π₀`: the x-average, keeping only `j = 0`.
    pub fn pi0(&self) -> Self {
        self.map_coeffs(self.real, |_, j, c| if j == 0 { c } else { ZERO })
    }

    pub fn pi0_perp(&self) -> Self {
        self.map_coeffs(self.real, |_, j, c| if j == 0 { ZERO } else { c })
    }

    /// `Π_N`: keep `|ℓ|_η ≤ N`.
    pub fn project_n(&self, n: f64) -> Self {
        let lat = self.lattice.clone();
        self.map_coeffs(self.real, |k, _, c| if lat.norm_of(k) <= n + 1e-9 { c } else { ZERO })
    }

    pub fn project_n_perp(&self, n: f64) -> Self {
        let lat = self.lattice.clone();
        self.map_coeffs(self.real, |k, _, c| if lat.norm_of(k) <= n + 1e-9 { ZERO } else { c })
    }

    /// The `ℓ = 0` part (average over the infinite torus).
    pub fn phi_average(&self) -> Self {
        self.map_coeffs(self.real, |k, _, c| if k == 0 { c } else { ZERO })
    }

    pub fn phi_average_perp(&self) -> Self {
        self.map_coeffs(self.real, |k, _, c| if k == 0 { ZERO } else { c })
    }

    /// Pointwise value.
    pub fn eval(&self, phi: &[f64], x: f64) -> C {
        let w = self.width();
        let mut acc = ZERO;
        for k in self.nonzero_rows() {
            let l = self.lattice.index(k);
            let arg: f64 = l.support().map(|(i, v)| v as f64 * phi[i - 1]).sum();
            for jj in 0..w {
                let c = self.coeffs[k * w + jj];
                if c != ZERO {
                    let j = jj as f64 - self.jmax as f64;
                    acc += c * C::from_polar(1.0, arg + j * x);
                }
            }
        }
        acc
    }

    pub fn grid(&self, opts: &GridOptions) -> Grid {
        Grid::new(self.lattice.clone(), self.jmax, opts)
    }

    /// Values on the collocation grid.
    pub fn grid_values(&self, grid: &Grid) -> Vec<C> {
        grid.synthesize(&self.coeffs)
    }

    /// Re-expand grid values, checking the resolved tail against
    /// `opts.alias_tol` (relative).
    pub fn from_grid(grid: &Grid, values: &[C], real: bool, opts: &GridOptions) -> Result<Self> {
        let a = grid.analyze(values);
        let rel = if a.total > 0.0 { a.tail / a.total } else { 0.0 };
        if rel > opts.alias_tol && a.tail > opts.alias_floor {
            return Err(Error::Aliasing {
                energy: a.tail,
                relative: rel,
                tol: opts.alias_tol,
            });
        }
        Ok(Self::from_raw(grid.lattice(), grid.jmax(), a.coeffs, real))
    }

    /// Relative tail that a grid round trip of `values` leaves outside the
    /// truncation.
    pub fn tail_fraction(grid: &Grid, values: &[C]) -> f64 {
        let a = grid.analyze(values);
        if a.total > 0.0 {
            a.tail / a.total
        } else {
            0.0
        }
    }

    fn require_real(&self, what: &str) -> Result<()> {
        if !self.real {
            return Err(Error::InvalidInput(format!("{what} must be real-on-real")));
        }
        Ok(())
    }

    fn require_phi_only(&self, what: &str) -> Result<()> {
        if !self.is_phi_only() {
            return Err(Error::InvalidInput(format!("{what} must depend on φ only")));
        }
        Ok(())
    }

    /// `u(φ, x + α(φ, x))`.
    pub fn compose_x_diffeo(&self, alpha: &Self) -> Result<Self> {
        self.compose_x_diffeo_with(alpha, &GridOptions::default())
    }

    pub fn compose_x_diffeo_with(&self, alpha: &Self, opts: &GridOptions) -> Result<Self> {
        self.check_compatible(alpha);
        alpha.require_real("α")?;
        let g = self.grid(opts);
        let av = alpha.grid_values(&g);
        let ys: Vec<f64> = (0..g.len()).map(|i| g.x_point(i % g.nx()) + av[i].re).collect();
        let vals = g.evaluate(&self.coeffs, None, Some(&ys));
        Self::from_grid(&g, &vals, self.real, opts)
    }

    /// `u(φ + ωβ(φ), x)`.
    pub fn compose_phi_shift(&self, beta: &Self, omega: &[f64]) -> Result<Self> {
        self.compose_phi_shift_with(beta, omega, &GridOptions::default())
    }

    pub fn compose_phi_shift_with(&self, beta: &Self, omega: &[f64], opts: &GridOptions) -> Result<Self> {
        self.check_compatible(beta);
        beta.require_real("β")?;
        beta.require_phi_only("β")?;
        let g = self.grid(opts);
        let thetas = shifted_phi(&g, beta, omega);
        let vals = g.evaluate(&self.coeffs, Some(&thetas), None);
        Self::from_grid(&g, &vals, self.real, opts)
    }

    /// `u(φ, x + p(φ))`.
    pub fn compose_x_translation(&self, p: &Self) -> Result<Self> {
        self.compose_x_translation_with(p, &GridOptions::default())
    }

    pub fn compose_x_translation_with(&self, p: &Self, opts: &GridOptions) -> Result<Self> {
        self.check_compatible(p);
        p.require_real("p")?;
        p.require_phi_only("p")?;
        if p.is_zero() {
            return Ok(self.clone());
        }
        if p.is_x_only() {
            // constant translation: exact phase law
            let c = p.mean().re;
            return Ok(self.map_coeffs(self.real, |_, j, z| z * C::from_polar(1.0, j as f64 * c)));
        }
        let g = self.grid(opts);
        let pv = g.evaluate_phi(&p.coeffs, None);
        let ys: Vec<f64> = (0..g.len())
            .map(|i| g.x_point(i % g.nx()) + pv[i / g.nx()].re)
            .collect();
        let vals = g.evaluate(&self.coeffs, None, Some(&ys));
        Self::from_grid(&g, &vals, self.real, opts)
    }

    /// `f ∘ u` evaluated on the grid, `‖u‖_0` must lie inside the radius of `f`.
    pub fn moser_compose(&self, f: &ScalarMap) -> Result<Self> {
        self.moser_compose_with(f, &GridOptions::default())
    }

    pub fn moser_compose_with(&self, f: &ScalarMap, opts: &GridOptions) -> Result<Self> {
        let n = self.norm(0.0);
        let radius = f.radius();
        if n >= radius {
            return Err(Error::Radius { norm: n, radius });
        }
        if matches!(f, ScalarMap::Identity) {
            return Ok(self.clone());
        }
        let g = self.grid(opts);
        let vals: Vec<C> = self.grid_values(&g).into_iter().map(|z| f.apply(z)).collect();
        Self::from_grid(&g, &vals, self.real, opts)
    }

    pub fn to_doc(&self) -> FunctionDoc {
        let p = self.params();
        let w = self.width();
        let mut entries = Vec::new();
        for (i, c) in self.coeffs.iter().enumerate() {
            if *c != ZERO {
                let l = self.lattice.index(i / w);
                entries.push((l.pairs(), (i % w) as i64 - self.jmax as i64, c.re, c.im));
            }
        }
        FunctionDoc {
            eta: p.eta,
            m: p.m,
            k: p.k,
            jmax: self.jmax,
            real: self.real,
            entries,
        }
    }

    pub fn from_doc(doc: &FunctionDoc) -> Result<Self> {
        let lat = Lattice::new(LatticeParams::new(doc.eta, doc.m, doc.k))?;
        Self::from_doc_on(doc, &lat)
    }

    /// Read a document onto an existing lattice with matching parameters.
    pub fn from_doc_on(doc: &FunctionDoc, lat: &Arc<Lattice>) -> Result<Self> {
        if *lat.params() != LatticeParams::new(doc.eta, doc.m, doc.k) {
            return Err(Error::InvalidInput("lattice parameters differ from document".into()));
        }
        let mut u = Self::zeros(lat, doc.jmax);
        for (pairs, j, re, im) in &doc.entries {
            let l = MultiIndex::from_pairs(pairs)?;
            let i = u
                .flat(&l, *j)
                .ok_or_else(|| Error::InvalidInput(format!("mode ({l}, {j}) outside the truncation")))?;
            u.coeffs[i] = C::new(*re, *im);
        }
        u.real = doc.real;
        if doc.real && u.reality_residual() != 0.0 {
            return Err(Error::InvalidInput("document flagged real but not conjugate symmetric".into()));
        }
        u.refresh();
        Ok(u)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_doc())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_doc(&serde_json::from_str(s)?)
    }
}

/// Grid φ points shifted by `ωβ(φ)`, flattened `nphi × M`.
pub(crate) fn shifted_phi(g: &Grid, beta: &AnalyticFunction, omega: &[f64]) -> Vec<f64> {
    let m = g.sites();
    let bv = g.evaluate_phi(beta.coeffs(), None);
    let mut out = g.phi_points();
    for p in 0..g.nphi() {
        for a in 0..m {
            out[p * m + a] += omega[a] * bv[p].re;
        }
    }
    out
}

/// Serialized form: nonzero entries as `[[ℓ sparse pairs], j, re, im]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionDoc {
    pub eta: f64,
    pub m: usize,
    pub k: f64,
    pub jmax: usize,
    pub real: bool,
    pub entries: Vec<(Vec<(usize, i64)>, i64, f64, f64)>,
}

/// Scalar maps applied pointwise by `moser_compose`.
#[derive(Clone, Debug, PartialEq)]
pub enum ScalarMap {
    Identity,
    /// `(1+z)^p`, principal branch.
    OnePlusPow(f64),
    Exp,
    /// `Σ c_k z^k`.
    Polynomial(Vec<f64>),
}

impl ScalarMap {
    pub fn radius(&self) -> f64 {
        match self {
            ScalarMap::OnePlusPow(p) if *p >= 0.0 && p.fract() == 0.0 => f64::INFINITY,
            ScalarMap::OnePlusPow(_) => 1.0,
            _ => f64::INFINITY,
        }
    }

    pub fn apply(&self, z: C) -> C {
        match self {
            ScalarMap::Identity => z,
            ScalarMap::OnePlusPow(p) => {
                let b = C::new(1.0, 0.0) + z;
                if b.im == 0.0 && b.re > 0.0 {
                    C::new(b.re.powf(*p), 0.0)
                } else {
                    b.powf(*p)
                }
            }
            ScalarMap::Exp => z.exp(),
            ScalarMap::Polynomial(cs) => cs.iter().rev().fold(ZERO, |acc, &c| acc * z + c),
        }
    }
}

/// Result of a fixed-point diffeomorphism inversion.
#[derive(Clone, Debug)]
pub struct Inversion {
    pub tilde: AnalyticFunction,
    pub iterations: usize,
    /// Max grid residual of both composition orders, using the truncated
    /// inverse.
    pub residual: f64,
}

pub const FIXED_POINT_TOL: f64 = 1e-13;
pub const FIXED_POINT_MAX_ITER: usize = 100;

/// `α̃` with `x = y + α̃(φ, y)` inverting `y = x + α(φ, x)`.
pub fn invert_x_diffeo(alpha: &AnalyticFunction) -> Result<Inversion> {
    invert_x_diffeo_with(alpha, &GridOptions::default())
}

pub fn invert_x_diffeo_with(alpha: &AnalyticFunction, opts: &GridOptions) -> Result<Inversion> {
    alpha.require_real("α")?;
    let g = alpha.grid(opts);
    let ax = alpha.dx(1).grid_values(&g);
    let lip = ax.iter().map(|z| z.re.abs()).fold(0.0, f64::max);
    if lip >= 1.0 {
        return Err(Error::NonContraction(format!("sup |α_x| = {lip} ≥ 1")));
    }
    let nx = g.nx();
    let xs: Vec<f64> = (0..g.len()).map(|i| g.x_point(i % nx)).collect();
    let mut a = vec![0.0; g.len()];
    let mut iterations = 0;
    loop {
        iterations += 1;
        let ys: Vec<f64> = xs.iter().zip(&a).map(|(x, t)| x + t).collect();
        let v = g.evaluate(alpha.coeffs(), None, Some(&ys));
        let mut diff: f64 = 0.0;
        for (t, z) in a.iter_mut().zip(&v) {
            diff = diff.max((*t + z.re).abs());
            *t = -z.re;
        }
        if diff <= FIXED_POINT_TOL {
            break;
        }
        if iterations >= FIXED_POINT_MAX_ITER {
            return Err(Error::NonContraction(format!(
                "x-diffeo inversion stalled at step change {diff:e}"
            )));
        }
    }
    let vals: Vec<C> = a.iter().map(|&t| C::new(t, 0.0)).collect();
    let tilde = AnalyticFunction::from_grid(&g, &vals, true, opts)?;
    // both composition orders with truncated series
    let tv = tilde.grid_values(&g);
    let y1: Vec<f64> = xs.iter().zip(&tv).map(|(x, t)| x + t.re).collect();
    let r1 = g.evaluate(alpha.coeffs(), None, Some(&y1));
    let mut residual: f64 = 0.0;
    for (r, t) in r1.iter().zip(&tv) {
        residual = residual.max((r.re + t.re).abs());
    }
    let av = alpha.grid_values(&g);
    let y2: Vec<f64> = xs.iter().zip(&av).map(|(x, t)| x + t.re).collect();
    let r2 = g.evaluate(tilde.coeffs(), None, Some(&y2));
    for (r, t) in r2.iter().zip(&av) {
        residual = residual.max((r.re + t.re).abs());
    }
    Ok(Inversion {
        tilde,
        iterations,
        residual,
    })
}

/// `β̃` with `φ = ϑ + ωβ̃(ϑ)` inverting `ϑ = φ + ωβ(φ)`.
pub fn invert_phi_shift(beta: &AnalyticFunction, omega: &[f64]) -> Result<Inversion> {
    invert_phi_shift_with(beta, omega, &GridOptions::default())
}

pub fn invert_phi_shift_with(beta: &AnalyticFunction, omega: &[f64], opts: &GridOptions) -> Result<Inversion> {
    beta.require_real("β")?;
    beta.require_phi_only("β")?;
    let g = beta.grid(opts);
    let m = g.sites();
    let db = beta.om_dphi(omega);
    let lip = g
        .evaluate_phi(db.coeffs(), None)
        .iter()
        .map(|z| z.re.abs())
        .fold(0.0, f64::max);
    if lip >= 1.0 {
        return Err(Error::NonContraction(format!("sup |ω·∂_φβ| = {lip} ≥ 1")));
    }
    let base = g.phi_points();
    let np = g.nphi();
    let mut b = vec![0.0; np];
    let shift = |b: &[f64]| -> Vec<f64> {
        let mut t = base.clone();
        for p in 0..np {
            for a in 0..m {
                t[p * m + a] += omega[a] * b[p];
            }
        }
        t
    };
    let mut iterations = 0;
    loop {
        iterations += 1;
        let v = g.evaluate_phi(beta.coeffs(), Some(&shift(&b)));
        let mut diff: f64 = 0.0;
        for (t, z) in b.iter_mut().zip(&v) {
            diff = diff.max((*t + z.re).abs());
            *t = -z.re;
        }
        if diff <= FIXED_POINT_TOL {
            break;
        }
        if iterations >= FIXED_POINT_MAX_ITER {
            return Err(Error::NonContraction(format!(
                "φ-shift inversion stalled at step change {diff:e}"
            )));
        }
    }
    // lift to the full grid (constant in x) and re-expand
    let nx = g.nx();
    let vals: Vec<C> = (0..g.len()).map(|i| C::new(b[i / nx], 0.0)).collect();
    let tilde = AnalyticFunction::from_grid(&g, &vals, true, opts)?.pi0();
    let tv = g.evaluate_phi(tilde.coeffs(), None);
    let tvr: Vec<f64> = tv.iter().map(|z| z.re).collect();
    let r1 = g.evaluate_phi(beta.coeffs(), Some(&shift(&tvr)));
    let mut residual: f64 = 0.0;
    for (r, t) in r1.iter().zip(&tv) {
        residual = residual.max((r.re + t.re).abs());
    }
    let bv = g.evaluate_phi(beta.coeffs(), None);
    let bvr: Vec<f64> = bv.iter().map(|z| z.re).collect();
    let r2 = g.evaluate_phi(tilde.coeffs(), Some(&shift(&bvr)));
    for (r, t) in r2.iter().zip(&bv) {
        residual = residual.max((r.re + t.re).abs());
    }
    Ok(Inversion {
        tilde,
        iterations,
        residual,
    })
}

/// Finite-sample Lipschitz norm: `sup_ω ‖u‖_σ + γ max ‖u_a − u_b‖_σ / |ω_a − ω_b|_∞`.
pub fn lipschitz_norm(samples: &[(Vec<f64>, AnalyticFunction)], gamma: f64, sigma: f64) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::InvalidInput("need at least two ω samples".into()));
    }
    let sup = samples.iter().map(|(_, u)| u.norm(sigma)).fold(0.0, f64::max);
    let mut lip: f64 = 0.0;
    for a in 0..samples.len() {
        for b in a + 1..samples.len() {
            let h = samples[a]
                .0
                .iter()
                .zip(&samples[b].0)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            if h == 0.0 {
                return Err(Error::InvalidInput("duplicate ω in Lipschitz samples".into()));
            }
            lip = lip.max((&samples[a].1 - &samples[b].1).norm(sigma) / h);
        }
    }
    Ok(sup + gamma * lip)
}

impl Add for &AnalyticFunction {
    type Output = AnalyticFunction;
    fn add(self, rhs: &AnalyticFunction) -> AnalyticFunction {
        self.axpy(1.0, rhs)
    }
}

impl Sub for &AnalyticFunction {
    type Output = AnalyticFunction;
    fn sub(self, rhs: &AnalyticFunction) -> AnalyticFunction {
        self.axpy(-1.0, rhs)
    }
}

impl Mul for &AnalyticFunction {
    type Output = AnalyticFunction;
    fn mul(self, rhs: &AnalyticFunction) -> AnalyticFunction {
        self.multiply(rhs)
    }
}

impl Neg for &AnalyticFunction {
    type Output = AnalyticFunction;
    fn neg(self) -> AnalyticFunction {
        self.scale(-1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lat(m: usize, k: f64) -> Arc<Lattice> {
        Lattice::new(LatticeParams::new(1.0, m, k)).unwrap()
    }

    fn cos_x(l: &Arc<Lattice>, jmax: usize, a: f64) -> AnalyticFunction {
        AnalyticFunction::real_from_entries(l, jmax, &[(MultiIndex::zero(), 1, C::new(a / 2.0, 0.0))]).unwrap()
    }

    fn sin_x(l: &Arc<Lattice>, jmax: usize, a: f64) -> AnalyticFunction {
        AnalyticFunction::real_from_entries(l, jmax, &[(MultiIndex::zero(), 1, C::new(0.0, -a / 2.0))]).unwrap()
    }

    #[test]
    fn norm_examples() {
        let l = lat(1, 2.0);
        assert_eq!(AnalyticFunction::zeros(&l, 4).norm(1.0), 0.0);
        let two_cos = cos_x(&l, 4, 2.0);
        assert!((two_cos.norm(0.0) - 2.0).abs() < 1e-15);
        let c = cos_x(&l, 4, 1.0);
        assert!((c.norm(1.0) - 1.0f64.exp()).abs() < 1e-14);
    }

    #[test]
    fn products_and_derivatives() {
        let l = lat(1, 2.0);
        let c = cos_x(&l, 4, 1.0);
        let one = AnalyticFunction::constant(&l, 4, 1.0);
        assert_eq!((&c * &one).coeffs(), c.coeffs());
        let cc = &c * &c;
        assert!((cc.coeff(&MultiIndex::zero(), 0).re - 0.5).abs() < 1e-15);
        assert!((cc.coeff(&MultiIndex::zero(), 2).re - 0.25).abs() < 1e-15);
        let ds = c.dx(1);
        let ms = sin_x(&l, 4, -1.0);
        assert!((&ds - &ms).max_abs() < 1e-15);
        let inv = c.dx_inv().unwrap();
        assert!((&inv - &sin_x(&l, 4, 1.0)).max_abs() < 1e-15);
        assert!(one.dx_inv().is_err());
    }

    #[test]
    fn om_dphi_inverse_single_mode() {
        let l = lat(2, 2.0);
        let om = [1.3, 1.7];
        let e = AnalyticFunction::from_entries(&l, 2, &[(MultiIndex::unit(1, 1), 0, C::new(1.0, 0.0))]).unwrap();
        let h = e.om_dphi_inv(&om, 0.1).unwrap();
        let expect = C::new(1.0, 0.0) / C::new(0.0, 1.3);
        assert!((h.coeff(&MultiIndex::unit(1, 1), 0) - expect).norm() < 1e-15);
        assert!((&h.om_dphi(&om) - &e).max_abs() < 1e-15);
    }

    #[test]
    fn om_dphi_inverse_reports_resonance() {
        let l = lat(2, 3.0);
        let om = [1.5, 1.5];
        let ell = MultiIndex::new(vec![1, -1]);
        let e = AnalyticFunction::from_entries(&l, 2, &[(ell.clone(), 0, C::new(1.0, 0.0))]).unwrap();
        match e.om_dphi_inv(&om, 0.01) {
            Err(Error::SmallDivisor { ell: w, .. }) => assert_eq!(w, ell),
            other => panic!("expected small divisor, got {other:?}"),
        }
    }

    #[test]
    fn constant_translation_phase_law() {
        let l = lat(1, 2.0);
        let u = AnalyticFunction::from_entries(&l, 4, &[(MultiIndex::zero(), 1, C::new(1.0, 0.0))]).unwrap();
        let a = AnalyticFunction::constant(&l, 4, 0.3);
        let v = u.compose_x_diffeo(&a).unwrap();
        assert!((v.coeff(&MultiIndex::zero(), 1) - C::from_polar(1.0, 0.3)).norm() < 1e-14);
        let w = u.compose_x_translation(&a).unwrap();
        assert!((w.coeff(&MultiIndex::zero(), 1) - C::from_polar(1.0, 0.3)).norm() < 1e-15);
    }

    #[test]
    fn x_diffeo_inverse_is_self_verifying() {
        let l = lat(1, 2.0);
        let a = sin_x(&l, 16, 0.1);
        let inv = invert_x_diffeo(&a).unwrap();
        assert!(inv.residual < 1e-12, "residual {}", inv.residual);
        let c = AnalyticFunction::constant(&l, 16, 0.25);
        let ic = invert_x_diffeo(&c).unwrap();
        assert!((ic.tilde.mean().re + 0.25).abs() < 1e-13);
        assert!(invert_x_diffeo(&sin_x(&l, 16, 1.5)).is_err());
    }

    #[test]
    fn moser_power_matches_pointwise() {
        let l = lat(1, 2.0);
        let u = cos_x(&l, 16, 0.2);
        let f = u.moser_compose(&ScalarMap::OnePlusPow(-1.0 / 3.0)).unwrap();
        for &x in &[0.0, 0.7, 2.1, 4.4] {
            let exact = (1.0 + 0.2 * f64::cos(x)).powf(-1.0 / 3.0);
            assert!((f.eval(&[0.0], x).re - exact).abs() < 1e-13);
        }
        assert!(cos_x(&l, 4, 3.0).moser_compose(&ScalarMap::OnePlusPow(0.5)).is_err());
    }

    #[test]
    fn json_round_trip_is_exact() {
        let l = lat(2, 3.0);
        let u = AnalyticFunction::real_from_entries(
            &l,
            3,
            &[
                (MultiIndex::new(vec![1, 1]), 2, C::new(0.1 / 3.0, 1e-17)),
                (MultiIndex::unit(2, -1), -1, C::new(std::f64::consts::PI, -2.5)),
            ],
        )
        .unwrap();
        let s = u.to_json().unwrap();
        let v = AnalyticFunction::from_json(&s).unwrap();
        assert_eq!(u.coeffs(), v.coeffs());
        assert!(v.is_real());
    }
}
