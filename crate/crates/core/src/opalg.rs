//! Linear operators on the truncated basis `e^{i(ℓ·φ + jx)}`, `j ≠ 0`.
//!
//! An operator is Töplitz in `ℓ`: `(Ru)_j(ℓ) = Σ R_j^{j'}(ℓ − ℓ') u_{j'}(ℓ')`,
//! stored as one dense `2jmax × 2jmax` block per lattice index, plus an
//! optional multiple of `ω·∂_φ` (which is diagonal but not Töplitz).

use std::sync::Arc;

use num_complex::Complex64;

use crate::analytic::AnalyticFunction;
use crate::error::{Error, Result};
use crate::lattice::{Lattice, NO_INDEX};

type C = Complex64;
const ZERO: C = C { re: 0.0, im: 0.0 };

/// Largest number of series terms in exponentials.
pub const SERIES_CAP: usize = 60;

/// Position of spatial mode `j ≠ 0` inside a block row/column.
#[inline]
pub fn jidx(j: i64, jmax: usize) -> usize {
    debug_assert!(j != 0 && j.unsigned_abs() as usize <= jmax);
    if j < 0 {
        (j + jmax as i64) as usize
    } else {
        (j + jmax as i64 - 1) as usize
    }
}

#[inline]
pub fn jval(idx: usize, jmax: usize) -> i64 {
    let v = idx as i64 - jmax as i64;
    if v < 0 {
        v
    } else {
        v + 1
    }
}

#[derive(Clone)]
pub struct OperatorMatrix {
    lattice: Arc<Lattice>,
    jmax: usize,
    blocks: Vec<Option<Vec<C>>>,
    dphi: f64,
    omega: Vec<f64>,
    real: bool,
}

impl std::fmt::Debug for OperatorMatrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OperatorMatrix")
            .field("params", self.lattice.params())
            .field("jmax", &self.jmax)
            .field("blocks", &self.blocks.iter().filter(|b| b.is_some()).count())
            .field("dphi", &self.dphi)
            .finish()
    }
}

impl OperatorMatrix {
    pub fn zero(lattice: &Arc<Lattice>, jmax: usize) -> Self {
        Self {
            lattice: lattice.clone(),
            jmax,
            blocks: vec![None; lattice.len()],
            dphi: 0.0,
            omega: Vec::new(),
            real: true,
        }
    }

    pub fn identity(lattice: &Arc<Lattice>, jmax: usize) -> Self {
        Self::diagonal(lattice, jmax, |_| C::new(1.0, 0.0))
    }

    /// `φ`-independent diagonal operator `e^{ijx} ↦ d(j) e^{ijx}`.
    pub fn diagonal(lattice: &Arc<Lattice>, jmax: usize, d: impl Fn(i64) -> C) -> Self {
        let n = 2 * jmax;
        let mut b = vec![ZERO; n * n];
        let mut real = true;
        for i in 0..n {
            let j = jval(i, jmax);
            b[i * n + i] = d(j);
            if d(-j) != d(j).conj() {
                real = false;
            }
        }
        let mut r = Self::zero(lattice, jmax);
        r.blocks[0] = Some(b);
        r.real = real;
        r
    }

    /// `a(φ, x)·∂_x^order` restricted to `j ≠ 0`; `order = −1` is `π₀⊥ a ∂_x^{−1}`.
    pub fn multiplication(a: &AnalyticFunction, order: i32) -> Self {
        let lat = a.lattice().clone();
        let jmax = a.jmax();
        let n = 2 * jmax;
        let mut r = Self::zero(&lat, jmax);
        let im = C::new(0.0, 1.0);
        for k in 0..lat.len() {
            let mut any = false;
            let mut b = vec![ZERO; n * n];
            for ri in 0..n {
                let j = jval(ri, jmax);
                for ci in 0..n {
                    let jp = jval(ci, jmax);
                    let c = a.at(k, j - jp);
                    if c != ZERO {
                        any = true;
                        b[ri * n + ci] = c * (im * jp as f64).powi(order);
                    }
                }
            }
            if any {
                r.blocks[k] = Some(b);
            }
        }
        r.real = a.is_real();
        r
    }

    /// `coef · ω·∂_φ`.
    pub fn dphi_op(lattice: &Arc<Lattice>, jmax: usize, omega: &[f64], coef: f64) -> Self {
        let mut r = Self::zero(lattice, jmax);
        r.dphi = coef;
        r.omega = omega.to_vec();
        r
    }

    pub fn lattice(&self) -> &Arc<Lattice> {
        &self.lattice
    }

    pub fn jmax(&self) -> usize {
        self.jmax
    }

    pub fn n(&self) -> usize {
        2 * self.jmax
    }

    pub fn dphi(&self) -> f64 {
        self.dphi
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    pub fn is_real(&self) -> bool {
        self.real
    }

    pub fn block(&self, k: usize) -> Option<&[C]> {
        self.blocks[k].as_deref()
    }

    /// Number of stored (nonzero) blocks.
    pub fn block_count(&self) -> usize {
        self.blocks.iter().filter(|b| b.is_some()).count()
    }

    pub(crate) fn block_mut(&mut self, k: usize) -> &mut Vec<C> {
        let n = self.n();
        self.blocks[k].get_or_insert_with(|| vec![ZERO; n * n])
    }

    pub(crate) fn set_real(&mut self, real: bool) {
        self.real = real;
    }

    /// Töplitz entry `R_j^{j'}(ℓ_k)`, excluding the `ω·∂_φ` part.
    pub fn entry(&self, k: usize, j: i64, jp: i64) -> C {
        match &self.blocks[k] {
            Some(b) => b[jidx(j, self.jmax) * self.n() + jidx(jp, self.jmax)],
            None => ZERO,
        }
    }

    fn check_compatible(&self, other: &Self) {
        assert!(
            self.jmax == other.jmax && self.lattice.same_as(&other.lattice),
            "incompatible truncations"
        );
    }

    fn merge_omega(&self, other: &Self) -> Vec<f64> {
        match (self.dphi != 0.0, other.dphi != 0.0) {
            (true, true) => {
                assert_eq!(self.omega, other.omega, "frequency vectors differ");
                self.omega.clone()
            }
            (true, false) => self.omega.clone(),
            (false, true) => other.omega.clone(),
            _ => Vec::new(),
        }
    }

    /// `self + a·other`.
    pub fn axpy(&self, a: C, other: &Self) -> Self {
        self.check_compatible(other);
        let mut out = self.clone();
        for (k, ob) in other.blocks.iter().enumerate() {
            if let Some(ob) = ob {
                let b = out.block_mut(k);
                for (x, y) in b.iter_mut().zip(ob) {
                    *x += a * y;
                }
            }
        }
        out.omega = self.merge_omega(other);
        out.dphi = self.dphi + a.re * other.dphi;
        out.real = self.real && other.real && a.im == 0.0;
        out
    }

    pub fn add(&self, other: &Self) -> Self {
        self.axpy(C::new(1.0, 0.0), other)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.axpy(C::new(-1.0, 0.0), other)
    }

    pub fn scale(&self, a: C) -> Self {
        let mut out = self.clone();
        for b in out.blocks.iter_mut().flatten() {
            for x in b.iter_mut() {
                *x *= a;
            }
        }
        out.dphi *= a.re;
        out.real = self.real && a.im == 0.0;
        out
    }

    /// Drop the `ω·∂_φ` part.
    pub fn toeplitz_part(&self) -> Self {
        let mut out = self.clone();
        out.dphi = 0.0;
        out.omega.clear();
        out
    }

    /// `(Ru)_j(ℓ)` for `j ≠ 0`; the `j = 0` modes of `u` are ignored and those
    /// of the result are zero.
    pub fn apply(&self, u: &AnalyticFunction) -> AnalyticFunction {
        assert!(u.jmax() == self.jmax && u.lattice().same_as(&self.lattice));
        let lat = &self.lattice;
        let n = self.n();
        let jm = self.jmax as i64;
        let w = u.width();
        let mut out = vec![ZERO; u.coeffs().len()];
        let uc = u.coeffs();
        let rows: Vec<usize> = (0..lat.len())
            .filter(|&k| uc[k * w..(k + 1) * w].iter().any(|c| *c != ZERO))
            .collect();
        let mut uv = vec![ZERO; n];
        for &kp in &rows {
            for (ci, slot) in uv.iter_mut().enumerate() {
                *slot = uc[kp * w + (jval(ci, self.jmax) + jm) as usize];
            }
            for (kb, b) in self.blocks.iter().enumerate() {
                let Some(b) = b else { continue };
                let k = lat.add_of(kb, kp);
                if k == NO_INDEX {
                    continue;
                }
                let k = k as usize;
                for ri in 0..n {
                    let row = &b[ri * n..(ri + 1) * n];
                    let mut acc = ZERO;
                    for (x, y) in row.iter().zip(&uv) {
                        acc += x * y;
                    }
                    out[k * w + (jval(ri, self.jmax) + jm) as usize] += acc;
                }
            }
            if self.dphi != 0.0 {
                let f = C::new(0.0, self.dphi * lat.index(kp).dot(&self.omega));
                for (ci, &x) in uv.iter().enumerate() {
                    out[kp * w + (jval(ci, self.jmax) + jm) as usize] += f * x;
                }
            }
        }
        AnalyticFunction::from_raw(lat, self.jmax, out, self.real && u.is_real())
    }

    /// Block-convolution product `RQ`; both factors must be Töplitz.
    pub fn compose(&self, other: &Self) -> Self {
        self.check_compatible(other);
        assert!(
            self.dphi == 0.0 && other.dphi == 0.0,
            "compose is defined for Töplitz operators; use commutator for ω·∂_φ"
        );
        let lat = &self.lattice;
        let n = self.n();
        let mut out = Self::zero(lat, self.jmax);
        let ka: Vec<usize> = (0..lat.len()).filter(|&k| self.blocks[k].is_some()).collect();
        let kb: Vec<usize> = (0..lat.len()).filter(|&k| other.blocks[k].is_some()).collect();
        for &a in &ka {
            let ba = self.blocks[a].as_ref().unwrap();
            for &b in &kb {
                let k = lat.add_of(a, b);
                if k == NO_INDEX {
                    continue;
                }
                let bb = other.blocks[b].as_ref().unwrap();
                let bc = out.block_mut(k as usize);
                matmul_acc(ba, bb, bc, n);
            }
        }
        out.real = self.real && other.real;
        out
    }

    /// `AB − BA`, allowing `ω·∂_φ` parts in either factor.
    pub fn commutator(&self, other: &Self) -> Self {
        let a = self.toeplitz_part();
        let b = other.toeplitz_part();
        let mut out = a.compose(&b).sub(&b.compose(&a));
        if self.dphi != 0.0 {
            out = out.add(&b.dphi_commutator(&self.omega).scale(C::new(self.dphi, 0.0)));
        }
        if other.dphi != 0.0 {
            out = out.sub(&a.dphi_commutator(&other.omega).scale(C::new(other.dphi, 0.0)));
        }
        out.real = self.real && other.real;
        out
    }

    /// `[ω·∂_φ, R]`: blocks multiplied by `iω·ℓ`.
    pub fn dphi_commutator(&self, omega: &[f64]) -> Self {
        let mut out = self.toeplitz_part();
        for (k, b) in out.blocks.iter_mut().enumerate() {
            if let Some(b) = b {
                let f = C::new(0.0, self.lattice.index(k).dot(omega));
                for x in b.iter_mut() {
                    *x *= f;
                }
            }
        }
        out
    }

    /// `Ad_G(B) = [B, G] = BG − GB`.
    pub fn ad(g: &Self, b: &Self) -> Self {
        b.commutator(g)
    }

    /// `Ad_G^k(B)`.
    pub fn ad_power(g: &Self, b: &Self, k: usize) -> Self {
        let mut t = b.clone();
        for _ in 0..k {
            t = Self::ad(g, &t);
        }
        t
    }

    /// `‖R‖_{σ,m} = Σ_ℓ e^{σ|ℓ|_η} sup_{j'} Σ_j e^{σ|j−j'|} |R_j^{j'}(ℓ)| |j'|^{−m}`.
    /// The `ω·∂_φ` part is not in this class and is ignored.
    pub fn op_norm(&self, sigma: f64, m: f64) -> f64 {
        let n = self.n();
        let mut total = 0.0;
        for (k, b) in self.blocks.iter().enumerate() {
            let Some(b) = b else { continue };
            let mut best: f64 = 0.0;
            for ci in 0..n {
                let jp = jval(ci, self.jmax);
                let mut s = 0.0;
                for ri in 0..n {
                    let x = b[ri * n + ci];
                    if x != ZERO {
                        let j = jval(ri, self.jmax);
                        s += (sigma * (j - jp).abs() as f64).exp() * x.norm();
                    }
                }
                best = best.max(s * (jp.abs() as f64).powf(-m));
            }
            total += (sigma * self.lattice.norm_of(k)).exp() * best;
        }
        total
    }

    /// Largest entry modulus of the Töplitz part.
    pub fn max_abs(&self) -> f64 {
        self.blocks
            .iter()
            .flatten()
            .flat_map(|b| b.iter().map(|x| x.norm()))
            .fold(0.0, f64::max)
    }

    /// `Π_N`: keep blocks with `|ℓ|_η ≤ N`.
    pub fn project_n(&self, n: f64) -> Self {
        let mut out = self.toeplitz_part();
        for (k, b) in out.blocks.iter_mut().enumerate() {
            if self.lattice.norm_of(k) > n + 1e-9 {
                *b = None;
            }
        }
        out
    }

    pub fn project_n_perp(&self, n: f64) -> Self {
        let mut out = self.toeplitz_part();
        for (k, b) in out.blocks.iter_mut().enumerate() {
            if self.lattice.norm_of(k) <= n + 1e-9 {
                *b = None;
            }
        }
        out
    }

    /// Drop blocks whose largest entry is at most `tol`.
    pub fn prune(&mut self, tol: f64) {
        for b in self.blocks.iter_mut() {
            if let Some(v) = b {
                if v.iter().all(|x| x.norm() <= tol) {
                    *b = None;
                }
            }
        }
    }

    /// `max |R_j^{j'}(ℓ) − conj(R_{−j}^{−j'}(−ℓ))|`.
    pub fn reality_residual(&self) -> f64 {
        let n = self.n();
        let mut worst: f64 = 0.0;
        for k in 0..self.lattice.len() {
            let km = self.lattice.neg_of(k);
            for ri in 0..n {
                for ci in 0..n {
                    let a = self.blocks[k].as_ref().map_or(ZERO, |b| b[ri * n + ci]);
                    let b = self.blocks[km]
                        .as_ref()
                        .map_or(ZERO, |b| b[(n - 1 - ri) * n + (n - 1 - ci)]);
                    worst = worst.max((a - b.conj()).norm());
                }
            }
        }
        worst
    }

    /// Dense matrix over a list of basis modes `(lattice position, j)`:
    /// entry `[r][c] = ⟨e_r, R e_c⟩`, Töplitz entries for `ℓ_r − ℓ_c` inside
    /// the truncation, plus the `ω·∂_φ` diagonal.
    pub fn dense(&self, modes: &[(usize, i64)]) -> Vec<Vec<C>> {
        let lat = &self.lattice;
        let mut out = vec![vec![ZERO; modes.len()]; modes.len()];
        for (r, &(kr, j)) in modes.iter().enumerate() {
            for (c, &(kc, jp)) in modes.iter().enumerate() {
                let d = lat.index(kr) - lat.index(kc);
                if let Some(kd) = lat.position(&d) {
                    out[r][c] = self.entry(kd, j, jp);
                }
                if r == c && self.dphi != 0.0 {
                    out[r][c] += C::new(0.0, self.dphi * lat.index(kr).dot(&self.omega));
                }
            }
        }
        out
    }
}

fn matmul_acc(a: &[C], b: &[C], c: &mut [C], n: usize) {
    for i in 0..n {
        let crow = &mut c[i * n..(i + 1) * n];
        for k in 0..n {
            let x = a[i * n + k];
            if x == ZERO {
                continue;
            }
            let brow = &b[k * n..(k + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += x * bj;
            }
        }
    }
}

/// Outcome of a truncated exponential series.
#[derive(Clone, Debug)]
pub struct SeriesInfo {
    pub terms: usize,
    pub last_norm: f64,
}

/// Decide whether to stop summing: `norms` holds term norms so far.
pub(crate) fn series_state(norms: &[f64], tol: f64) -> Result<bool> {
    let k = norms.len();
    let last = *norms.last().unwrap();
    if !last.is_finite() {
        return Err(Error::Divergence { terms: k, last });
    }
    if last == 0.0 {
        return Ok(true);
    }
    if k >= 2 {
        let prev = norms[k - 2];
        if prev > 0.0 {
            let q = last / prev;
            if q < 1.0 && last * q / (1.0 - q) <= tol && last <= tol {
                return Ok(true);
            }
            if k > 12 && q >= 1.0 {
                return Err(Error::Divergence { terms: k, last });
            }
        }
    }
    if k >= SERIES_CAP {
        return Err(Error::Divergence { terms: k, last });
    }
    Ok(false)
}

pub(crate) fn term_norm(r: &OperatorMatrix) -> f64 {
    r.op_norm(0.0, 0.0) + r.dphi.abs()
}

/// `e^{−G} B e^{G} = Σ_k Ad_G^k(B)/k!`.
pub fn exp_conjugate(g: &OperatorMatrix, b: &OperatorMatrix, tol: f64) -> Result<(OperatorMatrix, SeriesInfo)> {
    let mut sum = b.clone();
    let mut term = b.clone();
    let mut norms = Vec::new();
    for k in 1..=SERIES_CAP {
        term = OperatorMatrix::ad(g, &term).scale(C::new(1.0 / k as f64, 0.0));
        sum = sum.add(&term);
        norms.push(term_norm(&term));
        if series_state(&norms, tol)? {
            break;
        }
    }
    let info = SeriesInfo {
        terms: norms.len(),
        last_norm: *norms.last().unwrap_or(&0.0),
    };
    Ok((sum, info))
}

/// `e^{G} u = Σ G^k u / k!`.
pub fn exp_apply(g: &OperatorMatrix, u: &AnalyticFunction, tol: f64) -> Result<(AnalyticFunction, SeriesInfo)> {
    let mut sum = u.pi0_perp();
    let mut term = sum.clone();
    let mut norms = Vec::new();
    for k in 1..=SERIES_CAP {
        term = g.apply(&term).scale(1.0 / k as f64);
        sum = &sum + &term;
        norms.push(term.norm(0.0));
        if series_state(&norms, tol)? {
            break;
        }
    }
    let info = SeriesInfo {
        terms: norms.len(),
        last_norm: *norms.last().unwrap_or(&0.0),
    };
    Ok((sum, info))
}

/// `e^{G}` as a Töplitz operator.
pub fn exp_matrix(g: &OperatorMatrix, tol: f64) -> Result<(OperatorMatrix, SeriesInfo)> {
    let id = OperatorMatrix::identity(g.lattice(), g.jmax());
    let mut sum = id.clone();
    let mut term = id;
    let mut norms = Vec::new();
    for k in 1..=SERIES_CAP {
        term = term.compose(g).scale(C::new(1.0 / k as f64, 0.0));
        sum = sum.add(&term);
        norms.push(term_norm(&term));
        if series_state(&norms, tol)? {
            break;
        }
    }
    let info = SeriesInfo {
        terms: norms.len(),
        last_norm: *norms.last().unwrap_or(&0.0),
    };
    Ok((sum, info))
}

/// `[∂_x³, π₀⊥ g ∂_x^{−1}] = 3g_x ∂_x + R` with
/// `R = π₀⊥(3g_xx + g_xxx ∂_x^{−1})` on the `j ≠ 0` space (the `π₀` term of
/// the general identity vanishes there). Returns `(3g_x, R)`.
pub fn commutator_dx3_g(g: &AnalyticFunction) -> Result<(AnalyticFunction, OperatorMatrix)> {
    if !g.zero_x_average() {
        return Err(Error::InvalidInput("g must have zero x-average".into()));
    }
    let lead = g.dx(1).scale(3.0);
    let r = OperatorMatrix::multiplication(&g.dx(2).scale(3.0), 0)
        .add(&OperatorMatrix::multiplication(&g.dx(3), -1));
    Ok((lead, r))
}

/// `ω·∂_φ + λ₃∂_x³ + B∂_x + C`, kept in structured form.
#[derive(Clone, Debug)]
pub struct DifferentialOperator {
    pub lambda3: f64,
    pub b: AnalyticFunction,
    pub c: AnalyticFunction,
    pub omega: Vec<f64>,
}

impl DifferentialOperator {
    pub fn new(lambda3: f64, b: AnalyticFunction, c: AnalyticFunction, omega: &[f64]) -> Self {
        Self {
            lambda3,
            b,
            c,
            omega: omega.to_vec(),
        }
    }

    /// `ω·∂_φ + λ₃∂_x³`.
    pub fn airy(lattice: &Arc<Lattice>, jmax: usize, lambda3: f64, omega: &[f64]) -> Self {
        let z = AnalyticFunction::zeros(lattice, jmax);
        Self::new(lambda3, z.clone(), z, omega)
    }

    /// Mean of `B` over `(φ, x)`.
    pub fn lambda1(&self) -> f64 {
        self.b.mean().re
    }

    /// Largest φ-dependent part of the x-average of `B`.
    pub fn normalization_defect(&self) -> f64 {
        self.b.pi0().phi_average_perp().max_abs()
    }

    /// Structured application (all modes, including `j = 0`).
    pub fn apply(&self, u: &AnalyticFunction) -> AnalyticFunction {
        let mut out = u.om_dphi(&self.omega);
        out = out.axpy(self.lambda3, &u.dx(3));
        out = &out + &self.b.multiply(&u.dx(1));
        &out + &self.c.multiply(u)
    }

    /// Matrix form on the `j ≠ 0` space.
    pub fn materialize(&self) -> OperatorMatrix {
        let lat = self.b.lattice();
        let jmax = self.b.jmax();
        let l3 = self.lambda3;
        let d3 = OperatorMatrix::diagonal(lat, jmax, |j| C::new(0.0, -l3 * (j * j * j) as f64));
        OperatorMatrix::dphi_op(lat, jmax, &self.omega, 1.0)
            .add(&d3)
            .add(&OperatorMatrix::multiplication(&self.b, 1))
            .add(&OperatorMatrix::multiplication(&self.c, 0))
    }
}
