//! One change of variables `T = T₁T₂T₃` with multiplier `r`:
//!
//! * `T₁u = (1+α_x) u(φ, x+α)` makes the third-order coefficient `m₃(φ)`;
//! * `T₂u = u(φ+ωβ(φ), x)` makes it the constant `λ₃⁺`;
//! * `T₃u = u(φ, x+p(φ))` makes the x-average of the first-order
//!   coefficient constant.
//!
//! As an operator product, `Tv(φ,x) = (1+α_x) v(φ+ωβ, x + α + p(φ+ωβ))`.

use std::collections::BTreeMap;
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::analytic::{invert_phi_shift_with, invert_x_diffeo_with, AnalyticFunction, ScalarMap};
use crate::error::{Error, Result, StageExt};
use crate::grid::{Grid, GridOptions};
use crate::lattice::Lattice;
use crate::opalg::DifferentialOperator;

type C = Complex64;

/// `Q(u) = Σ q_{i,j} (∂_x^i u)(∂_x^j u)` over `i ≤ 2`, `j ≤ 3`, `i+j ≤ 4`.
#[derive(Clone, Debug)]
pub struct QuadraticForm {
    lattice: Arc<Lattice>,
    jmax: usize,
    q: BTreeMap<(usize, usize), AnalyticFunction>,
}

impl QuadraticForm {
    pub fn new(lattice: &Arc<Lattice>, jmax: usize) -> Self {
        Self {
            lattice: lattice.clone(),
            jmax,
            q: BTreeMap::new(),
        }
    }

    /// Expansion of `∂_xx(3c₃u_x² + 2c₂uu_x + c₁u²) − ∂_x(c₂u_x² + 2c₁uu_x + 3c₀u²)`;
    /// the `c₁` terms cancel.
    pub fn from_density(lattice: &Arc<Lattice>, jmax: usize, c: [f64; 4]) -> Self {
        let mut out = Self::new(lattice, jmax);
        let k = |v: f64| AnalyticFunction::constant(lattice, jmax, v);
        for (i, j, v) in [
            (2, 2, 6.0 * c[3]),
            (1, 3, 6.0 * c[3]),
            (1, 2, 4.0 * c[2]),
            (0, 3, 2.0 * c[2]),
            (0, 1, -6.0 * c[0]),
        ] {
            if v != 0.0 {
                out.q.insert((i, j), k(v));
            }
        }
        out
    }

    pub fn lattice(&self) -> &Arc<Lattice> {
        &self.lattice
    }

    pub fn jmax(&self) -> usize {
        self.jmax
    }

    pub fn set(&mut self, i: usize, j: usize, f: AnalyticFunction) -> Result<()> {
        if i > 2 || j > 3 || i + j > 4 {
            return Err(Error::InvalidInput(format!("index ({i},{j}) outside i≤2, j≤3, i+j≤4")));
        }
        if f.is_zero() {
            self.q.remove(&(i, j));
        } else {
            self.q.insert((i, j), f);
        }
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize) -> Option<&AnalyticFunction> {
        self.q.get(&(i, j))
    }

    pub fn terms(&self) -> impl Iterator<Item = (&(usize, usize), &AnalyticFunction)> {
        self.q.iter()
    }

    pub fn is_zero(&self) -> bool {
        self.q.is_empty()
    }

    /// `Σ_{i,j} ‖q_{i,j}‖_σ`.
    pub fn norm_sum(&self, sigma: f64) -> f64 {
        self.q.values().map(|f| f.norm(sigma)).sum()
    }

    /// `Q(u)` by collocation (products are formed on the grid, then projected).
    pub fn evaluate(&self, u: &AnalyticFunction, opts: &GridOptions) -> Result<AnalyticFunction> {
        let g = u.grid(opts);
        let vals = self.evaluate_on_grid(u, &g);
        AnalyticFunction::from_grid(&g, &vals, u.is_real(), opts)
    }

    /// `Q(u)` as grid values.
    pub fn evaluate_on_grid(&self, u: &AnalyticFunction, g: &Grid) -> Vec<C> {
        let d: Vec<Vec<C>> = (0..4).map(|k| u.dx(k).grid_values(g)).collect();
        let mut out = vec![C::new(0.0, 0.0); g.len()];
        for (&(i, j), q) in &self.q {
            let qv = q.grid_values(g);
            for (n, o) in out.iter_mut().enumerate() {
                *o += qv[n] * d[i][n] * d[j][n];
            }
        }
        out
    }

    /// Coefficients `d₀..d₃` of `Q'(h)v = Σ_m d_m ∂_x^m v`, with
    /// `d_m = Σ_i q_{i,m} ∂^i h + Σ_j q_{m,j} ∂^j h`.
    pub fn linearize(&self, h: &AnalyticFunction) -> [AnalyticFunction; 4] {
        let mut d: [AnalyticFunction; 4] = std::array::from_fn(|_| AnalyticFunction::zeros(&self.lattice, self.jmax));
        let hd: Vec<AnalyticFunction> = (0..4).map(|k| h.dx(k as u32)).collect();
        for (&(i, j), q) in &self.q {
            d[j] = &d[j] + &q.multiply(&hd[i]);
            d[i] = &d[i] + &q.multiply(&hd[j]);
        }
        d
    }
}

/// Data of one change of variables.
#[derive(Clone, Debug)]
pub struct TransformationData {
    pub alpha: AnalyticFunction,
    pub alpha_tilde: AnalyticFunction,
    pub beta: AnalyticFunction,
    pub beta_tilde: AnalyticFunction,
    pub p: AnalyticFunction,
    pub r: AnalyticFunction,
    pub m3: AnalyticFunction,
    pub lambda3_plus: f64,
    pub lambda1_plus: f64,
    pub omega: Vec<f64>,
}

impl TransformationData {
    pub fn identity(lattice: &Arc<Lattice>, jmax: usize, omega: &[f64], lambda3: f64, lambda1: f64) -> Self {
        let z = AnalyticFunction::zeros(lattice, jmax);
        Self {
            alpha: z.clone(),
            alpha_tilde: z.clone(),
            beta: z.clone(),
            beta_tilde: z.clone(),
            p: z,
            r: AnalyticFunction::constant(lattice, jmax, 1.0),
            m3: AnalyticFunction::constant(lattice, jmax, lambda3),
            lambda3_plus: lambda3,
            lambda1_plus: lambda1,
            omega: omega.to_vec(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.alpha.is_zero() && self.beta.is_zero() && self.p.is_zero()
    }

    /// Points `(φ+ωβ(φ), x+α(φ,x)+p(φ+ωβ(φ)))` on the grid of `g`.
    fn forward_points(&self, g: &Grid) -> (Vec<f64>, Vec<f64>) {
        let m = g.sites();
        let nx = g.nx();
        let bv = g.evaluate_phi(self.beta.coeffs(), None);
        let mut thetas = g.phi_points();
        for p in 0..g.nphi() {
            for a in 0..m {
                thetas[p * m + a] += self.omega[a] * bv[p].re;
            }
        }
        let pv = g.evaluate_phi(self.p.coeffs(), Some(&thetas));
        let av = self.alpha.grid_values(g);
        let ys = (0..g.len())
            .map(|i| g.x_point(i % nx) + av[i].re + pv[i / nx].re)
            .collect();
        (thetas, ys)
    }

    /// Points of the inverse map and the Jacobian factor `(1+α̃_y)` there.
    fn inverse_points(&self, g: &Grid) -> (Vec<f64>, Vec<f64>, Vec<C>) {
        let m = g.sites();
        let nx = g.nx();
        let bv = g.evaluate_phi(self.beta_tilde.coeffs(), None);
        let mut thetas = g.phi_points();
        for p in 0..g.nphi() {
            for a in 0..m {
                thetas[p * m + a] += self.omega[a] * bv[p].re;
            }
        }
        let pv = g.evaluate_phi(self.p.coeffs(), None);
        let yp: Vec<f64> = (0..g.len()).map(|i| g.x_point(i % nx) - pv[i / nx].re).collect();
        let at = g.evaluate(self.alpha_tilde.coeffs(), Some(&thetas), Some(&yp));
        let jac: Vec<C> = g
            .evaluate(self.alpha_tilde.dx(1).coeffs(), Some(&thetas), Some(&yp))
            .into_iter()
            .map(|z| z + 1.0)
            .collect();
        let ys = yp.iter().zip(&at).map(|(y, a)| y + a.re).collect();
        (thetas, ys, jac)
    }

    /// `Tv` as grid values.
    pub fn apply_on_grid(&self, u: &AnalyticFunction, g: &Grid) -> Vec<C> {
        let (thetas, ys) = self.forward_points(g);
        let jac = self.alpha.dx(1).grid_values(g);
        let mut v = g.evaluate(u.coeffs(), Some(&thetas), Some(&ys));
        for (z, j) in v.iter_mut().zip(&jac) {
            *z *= j + 1.0;
        }
        v
    }

    /// `T⁻¹w` as grid values; with `jacobian = false` this is the bare
    /// substitution `w∘Φ⁻¹`.
    pub fn apply_inverse_on_grid(&self, w: &AnalyticFunction, g: &Grid, jacobian: bool) -> Vec<C> {
        let (thetas, ys, jac) = self.inverse_points(g);
        let mut v = g.evaluate(w.coeffs(), Some(&thetas), Some(&ys));
        if jacobian {
            for (z, j) in v.iter_mut().zip(&jac) {
                *z *= j;
            }
        }
        v
    }
}

/// `Tu`.
pub fn apply_t(t: &TransformationData, u: &AnalyticFunction, opts: &GridOptions) -> Result<AnalyticFunction> {
    if t.is_identity() {
        return Ok(u.clone());
    }
    let g = u.grid(opts);
    let v = t.apply_on_grid(u, &g);
    AnalyticFunction::from_grid(&g, &v, u.is_real(), opts)
}

/// `T⁻¹w = (w/(1+α_x))∘Φ⁻¹`.
pub fn apply_t_inverse(t: &TransformationData, w: &AnalyticFunction, opts: &GridOptions) -> Result<AnalyticFunction> {
    if t.is_identity() {
        return Ok(w.clone());
    }
    let g = w.grid(opts);
    let v = t.apply_inverse_on_grid(w, &g, true);
    AnalyticFunction::from_grid(&g, &v, w.is_real(), opts)
}

/// `π₀[(∂_x^{−1}u) v]`, the x-integrated symplectic pairing as a function of φ.
/// The x-average of `u` is discarded.
pub fn symplectic_pairing(u: &AnalyticFunction, v: &AnalyticFunction) -> Result<AnalyticFunction> {
    let ui = u.pi0_perp().dx_inv()?;
    let lat = u.lattice().clone();
    let jm = u.jmax() as i64;
    let mut out = AnalyticFunction::zeros(&lat, u.jmax());
    let mut acc = vec![C::new(0.0, 0.0); lat.len()];
    for a in 0..lat.len() {
        for b in 0..lat.len() {
            let k = lat.add_of(a, b);
            if k == crate::lattice::NO_INDEX {
                continue;
            }
            let mut s = C::new(0.0, 0.0);
            for j in (-jm..=jm).filter(|&j| j != 0) {
                s += ui.at(a, j) * v.at(b, -j);
            }
            acc[k as usize] += s;
        }
    }
    for (k, c) in acc.into_iter().enumerate() {
        if c != C::new(0.0, 0.0) {
            out.set(&lat.index(k).clone(), 0, c)?;
        }
    }
    Ok(out)
}

/// `(α, m₃)` with `(λ₃+d₃)(1+α_x)³ = m₃(φ)`.
pub fn build_x_diffeo(
    lambda3: f64,
    d3: &AnalyticFunction,
    opts: &GridOptions,
) -> Result<(AnalyticFunction, AnalyticFunction)> {
    if lambda3 <= 0.0 {
        return Err(Error::InvalidInput(format!("λ₃ = {lambda3} must be positive")));
    }
    if !d3.is_real() {
        return Err(Error::InvalidInput("d₃ must be real-on-real".into()));
    }
    let lat = d3.lattice();
    let jmax = d3.jmax();
    if d3.is_zero() {
        return Ok((AnalyticFunction::zeros(lat, jmax), AnalyticFunction::constant(lat, jmax, lambda3)));
    }
    let s = lambda3.cbrt();
    // w = (λ₃+d₃)^{-1/3}, w0 its x-average
    let w = d3
        .scale(1.0 / lambda3)
        .moser_compose_with(&ScalarMap::OnePlusPow(-1.0 / 3.0), opts)?
        .scale(1.0 / s);
    let w0 = w.pi0();
    let z = w0.scale(s).add_constant(-1.0);
    let m3 = z.moser_compose_with(&ScalarMap::OnePlusPow(-3.0), opts)?.scale(lambda3);
    let inv_w0 = z.moser_compose_with(&ScalarMap::OnePlusPow(-1.0), opts)?.scale(s);
    let ax = w.multiply(&inv_w0).add_constant(-1.0).pi0_perp();
    let alpha = ax.dx_inv()?;
    Ok((alpha, m3.pi0()))
}

/// `(λ₃⁺, β)` with `λ₃⁺ = ⟨m₃⟩` and `λ₃⁺(1 + ω·∂_φβ) = m₃`.
pub fn build_time_reparam(m3: &AnalyticFunction, omega: &[f64], gamma: f64) -> Result<(f64, AnalyticFunction)> {
    if !m3.is_phi_only() {
        return Err(Error::InvalidInput("m₃ must depend on φ only".into()));
    }
    let l3 = m3.mean().re;
    if l3 <= 0.0 {
        return Err(Error::InvalidInput(format!("⟨m₃⟩ = {l3} must be positive")));
    }
    let rhs = m3.scale(1.0 / l3).add_constant(-1.0).phi_average_perp();
    let beta = rhs.om_dphi_inv(omega, gamma)?;
    Ok((l3, beta))
}

/// `(p, λ₁⁺)` with `ω·∂_φ p = ⟨c₁−a₁⟩_{φ,x} − ⟨c₁−a₁⟩_x` and
/// `λ₁⁺ = λ₁ + ⟨c₁−a₁⟩_{φ,x}`.
pub fn build_translation(
    c1: &AnalyticFunction,
    a1: &AnalyticFunction,
    lambda1: f64,
    omega: &[f64],
    gamma: f64,
) -> Result<(AnalyticFunction, f64)> {
    let diff = c1 - a1;
    let mean = diff.mean().re;
    let rhs = diff.pi0().phi_average_perp().scale(-1.0);
    let p = rhs.om_dphi_inv(omega, gamma)?;
    Ok((p, lambda1 + mean))
}

/// `∂_x^k (J·v∘φ) = Σ_l G_{k,l} (∂^l v)∘φ` for `k ≤ 3`, `J = 1 + ξ_x`.
fn chain_coefficients(jac: &AnalyticFunction) -> [[Option<AnalyticFunction>; 4]; 4] {
    let mut g: [[Option<AnalyticFunction>; 4]; 4] = Default::default();
    g[0][0] = Some(jac.clone());
    for k in 0..3 {
        for l in 0..=k + 1 {
            let mut acc: Option<AnalyticFunction> = None;
            if let Some(x) = &g[k][l] {
                acc = Some(x.dx(1));
            }
            if l >= 1 {
                if let Some(x) = &g[k][l - 1] {
                    let t = jac.multiply(x);
                    acc = Some(match acc {
                        Some(a) => &a + &t,
                        None => t,
                    });
                }
            }
            g[k + 1][l] = acc;
        }
    }
    g
}

/// Tunables of one conjugation step.
#[derive(Clone, Debug)]
pub struct ConjugationOptions {
    pub grid: GridOptions,
    /// Floor constant for the `(ω·∂_φ)^{−1}` divisions.
    pub gamma: f64,
    /// Tolerance for the third-order transport checks (`b₃ = m₃`, `b₂ = 0`).
    pub identity_tol: f64,
    /// A-posteriori check of the conjugation on a window.
    pub verify: Option<Window>,
    /// Largest accepted window residual.
    pub residual_tol: f64,
}

impl Default for ConjugationOptions {
    fn default() -> Self {
        Self {
            grid: GridOptions::default(),
            gamma: 1e-3,
            identity_tol: 1e-8,
            verify: None,
            residual_tol: 1e-8,
        }
    }
}

/// Basis modes `(ℓ, j)` with `|ℓ|_η ≤ ell_norm` and `0 < |j| ≤ j`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub ell_norm: f64,
    pub j: usize,
}

impl Window {
    pub fn modes(&self, lattice: &Lattice) -> Vec<(usize, i64)> {
        let mut out = Vec::new();
        for k in 0..lattice.len() {
            if lattice.norm_of(k) <= self.ell_norm + 1e-9 {
                for j in -(self.j as i64)..=self.j as i64 {
                    if j != 0 {
                        out.push((k, j));
                    }
                }
            }
        }
        out
    }
}

/// Diagnostics of one conjugation step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConjugationReport {
    /// `max |(λ₃+d₃)(1+α_x)³ − m₃|` on the grid.
    pub identity_x_diffeo: f64,
    /// `max |λ₃⁺(1+ω·∂_φβ) − m₃|`.
    pub identity_time: f64,
    /// `max |r·T₂^{−1}(m₃) − λ₃⁺|`.
    pub identity_multiplier: f64,
    /// `‖b₃ − m₃‖₀` after `T₁`.
    pub b3_defect: f64,
    /// `‖b₂‖₀` after `T₁`.
    pub b2_norm: f64,
    /// `‖d₂ − 2∂_x d₃‖₀` of the input.
    pub hamiltonian_defect: f64,
    /// Largest φ-dependent x-average of `a₁⁺`.
    pub normalization_defect: f64,
    pub inversion_residual: f64,
    pub window_residual: Option<f64>,
}

pub struct ConjugationOutcome {
    pub data: TransformationData,
    pub l_plus: DifferentialOperator,
    pub report: ConjugationReport,
}

fn grid_max_abs(v: &[C]) -> f64 {
    v.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Conjugate `L + Q'` with `Q' = Σ d_m ∂_x^m` to `L⁺ = r T^{−1}(L+Q')T`.
pub fn conjugate_step(
    l: &DifferentialOperator,
    d: &[AnalyticFunction; 4],
    opts: &ConjugationOptions,
) -> Result<ConjugationOutcome> {
    let lat = l.b.lattice().clone();
    let jmax = l.b.jmax();
    let omega = l.omega.clone();
    let go = &opts.grid;
    let mut report = ConjugationReport {
        hamiltonian_defect: (&d[2] - &d[3].dx(1).scale(2.0)).norm(0.0),
        ..Default::default()
    };
    if d.iter().all(|x| x.is_zero()) {
        let data = TransformationData::identity(&lat, jmax, &omega, l.lambda3, l.lambda1());
        report.normalization_defect = l.normalization_defect();
        return Ok(ConjugationOutcome {
            data,
            l_plus: l.clone(),
            report,
        });
    }

    // T₁
    let (alpha, m3) = build_x_diffeo(l.lambda3, &d[3], go).stage("x-diffeo")?;
    let inv_a = invert_x_diffeo_with(&alpha, go).stage("x-diffeo inverse")?;
    let alpha_tilde = inv_a.tilde;
    let g = alpha.grid(go);
    {
        let lhs: Vec<C> = d[3]
            .add_constant(l.lambda3)
            .grid_values(&g)
            .into_iter()
            .zip(alpha.dx(1).grid_values(&g))
            .map(|(a, x)| a * (x + 1.0).powi(3))
            .collect();
        let rhs = m3.grid_values(&g);
        report.identity_x_diffeo = lhs.iter().zip(&rhs).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
    }
    let coef = [
        &l.c + &d[0],
        &l.b + &d[1],
        d[2].clone(),
        d[3].add_constant(l.lambda3),
    ];
    let jac = alpha.dx(1).add_constant(1.0);
    let gk = chain_coefficients(&jac);
    let t1 = TransformationData {
        alpha: alpha.clone(),
        alpha_tilde: alpha_tilde.clone(),
        ..TransformationData::identity(&lat, jmax, &omega, l.lambda3, l.lambda1())
    };
    let mut b: Vec<AnalyticFunction> = Vec::with_capacity(4);
    let mut tails = Vec::with_capacity(4);
    for li in 0..4 {
        let mut e = AnalyticFunction::zeros(&lat, jmax);
        for (k, ak) in coef.iter().enumerate().skip(li) {
            if let Some(gkl) = &gk[k][li] {
                e = &e + &ak.multiply(gkl);
            }
        }
        if li == 0 {
            e = &e + &jac.om_dphi(&omega);
        }
        if li == 1 {
            e = &e + &jac.multiply(&alpha.om_dphi(&omega));
        }
        let a = g.analyze(&t1.apply_inverse_on_grid(&e, &g, true));
        tails.push((a.tail, a.total));
        b.push(AnalyticFunction::from_raw(&lat, jmax, a.coeffs, e.is_real()));
    }
    // tails are measured against the whole coefficient set: b₂ is a
    // cancellation residue and has no scale of its own
    let scale = tails.iter().map(|t| t.1).fold(0.0, f64::max);
    let tail = tails.iter().map(|t| t.0).fold(0.0, f64::max);
    if tail > go.alias_tol * scale && tail > go.alias_floor {
        return Err(Error::Aliasing {
            energy: tail,
            relative: tail / scale,
            tol: go.alias_tol,
        })
        .stage("T₁ transport");
    }
    report.b3_defect = (&b[3] - &m3).norm(0.0);
    report.b2_norm = b[2].norm(0.0);
    if report.b3_defect > opts.identity_tol {
        return Err(Error::Conjugation(format!(
            "third-order coefficient after T₁ differs from m₃ by {:e}",
            report.b3_defect
        )));
    }
    if report.b2_norm > opts.identity_tol {
        return Err(Error::Conjugation(format!(
            "second-order coefficient after T₁ has norm {:e}",
            report.b2_norm
        )));
    }

    // T₂ and the multiplier
    let (lambda3_plus, beta) = build_time_reparam(&m3, &omega, opts.gamma).stage("time reparametrization")?;
    let inv_b = invert_phi_shift_with(&beta, &omega, go).stage("φ-shift inverse")?;
    let beta_tilde = inv_b.tilde;
    report.inversion_residual = inv_a.residual.max(inv_b.residual);
    report.identity_time = (&beta.om_dphi(&omega).add_constant(1.0).scale(lambda3_plus) - &m3).max_abs();
    let m3_back = m3.compose_phi_shift_with(&beta_tilde, &omega, go)?;
    let r = m3_back
        .scale(1.0 / lambda3_plus)
        .add_constant(-1.0)
        .moser_compose_with(&ScalarMap::OnePlusPow(-1.0), go)?
        .pi0();
    report.identity_multiplier = {
        let v: Vec<C> = r
            .grid_values(&g)
            .into_iter()
            .zip(m3_back.grid_values(&g))
            .map(|(a, b)| a * b - lambda3_plus)
            .collect();
        grid_max_abs(&v)
    };
    let c1 = r.multiply(&b[1].compose_phi_shift_with(&beta_tilde, &omega, go)?);
    let c0 = r.multiply(&b[0].compose_phi_shift_with(&beta_tilde, &omega, go)?);

    // T₃
    let (p, lambda1_plus) =
        build_translation(&c1, &l.b, l.lambda1(), &omega, opts.gamma).stage("translation")?;
    let a1_plus = &p.om_dphi(&omega) + &c1.compose_x_translation_with(&p.scale(-1.0), go)?;
    let a0_plus = c0.compose_x_translation_with(&p.scale(-1.0), go)?;
    let l_plus = DifferentialOperator::new(lambda3_plus, a1_plus, a0_plus, &omega);
    report.normalization_defect = l_plus.normalization_defect();

    let data = TransformationData {
        alpha,
        alpha_tilde,
        beta,
        beta_tilde,
        p,
        r,
        m3,
        lambda3_plus,
        lambda1_plus,
        omega,
    };
    if let Some(w) = opts.verify {
        let res = conjugation_residual(l, d, &data, &l_plus, &w, go)?;
        report.window_residual = Some(res);
        if res > opts.residual_tol {
            return Err(Error::Conjugation(format!(
                "window residual {res:e} exceeds {:e}",
                opts.residual_tol
            )));
        }
    }
    Ok(ConjugationOutcome { data, l_plus, report })
}

/// `(ω·∂_φ + Σ A_k ∂_x^k) u` as grid values, `A` given as grid values.
fn apply_structured_on_grid(coef: &[Vec<C>; 4], u: &AnalyticFunction, omega: &[f64], g: &Grid) -> Vec<C> {
    let mut out = u.om_dphi(omega).grid_values(g);
    for (k, a) in coef.iter().enumerate() {
        let dv = u.dx(k as u32).grid_values(g);
        for ((o, x), y) in out.iter_mut().zip(a).zip(&dv) {
            *o += x * y;
        }
    }
    out
}

/// `max` over window columns `e_c` of `Σ_{rows in window} |(rT^{−1}(L+Q')T − L⁺) e_c|`.
pub fn conjugation_residual(
    l: &DifferentialOperator,
    d: &[AnalyticFunction; 4],
    t: &TransformationData,
    l_plus: &DifferentialOperator,
    window: &Window,
    opts: &GridOptions,
) -> Result<f64> {
    let lat = l.b.lattice().clone();
    let jmax = l.b.jmax();
    let lenient = GridOptions {
        alias_tol: f64::INFINITY,
        alias_floor: f64::INFINITY,
        ..*opts
    };
    let g = Grid::new(lat.clone(), jmax, &lenient);
    let coef = [
        (&l.c + &d[0]).grid_values(&g),
        (&l.b + &d[1]).grid_values(&g),
        d[2].grid_values(&g),
        d[3].add_constant(l.lambda3).grid_values(&g),
    ];
    let coef_plus = [
        l_plus.c.grid_values(&g),
        l_plus.b.grid_values(&g),
        AnalyticFunction::zeros(&lat, jmax).grid_values(&g),
        AnalyticFunction::constant(&lat, jmax, l_plus.lambda3).grid_values(&g),
    ];
    let rv = t.r.grid_values(&g);
    let modes = window.modes(&lat);
    let mut worst: f64 = 0.0;
    for &(k, j) in &modes {
        let mut e = AnalyticFunction::zeros(&lat, jmax);
        e.set(&lat.index(k).clone(), j, C::new(1.0, 0.0))?;
        let te = AnalyticFunction::from_grid(&g, &t.apply_on_grid(&e, &g), false, &lenient)?;
        let w = AnalyticFunction::from_grid(&g, &apply_structured_on_grid(&coef, &te, &l.omega, &g), false, &lenient)?;
        let mut back = t.apply_inverse_on_grid(&w, &g, true);
        for (z, r) in back.iter_mut().zip(&rv) {
            *z *= r;
        }
        let lhs = AnalyticFunction::from_grid(&g, &back, false, &lenient)?;
        let rhs = AnalyticFunction::from_grid(
            &g,
            &apply_structured_on_grid(&coef_plus, &e, &l_plus.omega, &g),
            false,
            &lenient,
        )?;
        let diff = &lhs - &rhs;
        let s: f64 = modes.iter().map(|&(kr, jr)| diff.at(kr, jr).norm()).sum();
        worst = worst.max(s);
    }
    Ok(worst)
}

/// `Q⁺(v) = r T^{−1} Q(Tv)` in coefficient form.
pub fn push_quadratic(q: &QuadraticForm, t: &TransformationData, opts: &GridOptions) -> Result<QuadraticForm> {
    if t.is_identity() {
        return Ok(q.clone());
    }
    let lat = q.lattice().clone();
    let jmax = q.jmax();
    let jac = t.alpha.dx(1).add_constant(1.0);
    let gk = chain_coefficients(&jac);
    let inv_j = t.alpha.dx(1).moser_compose_with(&ScalarMap::OnePlusPow(-1.0), opts)?;
    let g = Grid::new(lat.clone(), jmax, opts);
    let rv = t.r.grid_values(&g);
    let ijv = inv_j.grid_values(&g);
    // ∂^0 of T v also carries the Jacobian; G_{0,0} = J.
    let mut acc: BTreeMap<(usize, usize), Vec<C>> = BTreeMap::new();
    for (&(i, j), qij) in q.terms() {
        let qv = qij.grid_values(&g);
        for li in 0..=i {
            let Some(gil) = &gk[i][li] else { continue };
            let gilv = gil.grid_values(&g);
            for mi in 0..=j {
                let Some(gjm) = &gk[j][mi] else { continue };
                let gjmv = gjm.grid_values(&g);
                let e = acc.entry((li, mi)).or_insert_with(|| vec![C::new(0.0, 0.0); g.len()]);
                for n in 0..g.len() {
                    e[n] += qv[n] * gilv[n] * gjmv[n] * ijv[n];
                }
            }
        }
    }
    let mut out = QuadraticForm::new(&lat, jmax);
    for ((li, mi), vals) in acc {
        let c = AnalyticFunction::from_grid(&g, &vals, q.terms().all(|(_, f)| f.is_real()), opts)?;
        let back = t.apply_inverse_on_grid(&c, &g, false);
        let pushed: Vec<C> = back.iter().zip(&rv).map(|(a, b)| a * b).collect();
        out.set(li, mi, AnalyticFunction::from_grid(&g, &pushed, c.is_real(), opts)?)?;
    }
    Ok(out)
}
