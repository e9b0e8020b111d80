//! Reduction of `ω·∂_φ + λ₃∂_x³ + a₁∂_x + a₀` to a diagonal operator:
//! one order-one conjugation by `e^G`, `G = π₀⊥ g ∂_x^{−1}`, then KAM steps
//! `e^{Ψ_k}` on the bounded remainder.
//!
//! The diagonal carries a complex correction `z(j) = μ(j) + i r(j)`. For
//! Hamiltonian operators `μ` vanishes; for general real-on-real operators it
//! is even in `j` and is reported as damping.

use std::sync::Arc;
use std::time::Instant;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::analytic::AnalyticFunction;
use crate::conjugation::Window;
use crate::error::{Error, Result};
use crate::homological::{solve_diagonal_report, DiagonalModel, DivisionReport};
use crate::lattice::{diophantine_weight, divisor_weight, Lattice};
use crate::opalg::{exp_apply, exp_conjugate, jidx, jval, series_state, DifferentialOperator, OperatorMatrix, SERIES_CAP};
use crate::smalldiv::FrequencyTable;

type C = Complex64;
const ZERO: C = C::new(0.0, 0.0);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReductionParams {
    /// Second Melnikov constant: `|ω·ℓ + Ω(j) − Ω(j')| ≥ γ|j³−j'³|/d(ℓ)`.
    pub gamma: f64,
    /// Floor constant for `|ω·ℓ|` on the `(ℓ, j, j)` divisors.
    pub gbar: f64,
    /// `N_k = n0·2^k`.
    pub n0: f64,
    pub stop_tol: f64,
    pub max_steps: usize,
    /// Largest accepted φ-dependence of the x-average of `a₁`.
    pub defect_tol: f64,
    /// Record wall time per step (breaks byte reproducibility of traces).
    pub timings: bool,
}

impl Default for ReductionParams {
    fn default() -> Self {
        Self {
            gamma: 1e-3,
            gbar: 1e-3,
            n0: 2.0,
            stop_tol: 1e-10,
            max_steps: 12,
            defect_tol: 1e-6,
            timings: false,
        }
    }
}

/// Output of the order-one step.
#[derive(Clone, Debug)]
pub struct OrderOne {
    pub g: AnalyticFunction,
    pub generator: OperatorMatrix,
    /// `e^{−G} L e^{G} − (ω·∂_φ + λ₃∂_x³ + λ₁∂_x)`.
    pub r0: OperatorMatrix,
    pub series_terms: usize,
}

/// `ω·∂_φ + λ₃∂_x³ + λ₁∂_x` as a matrix.
pub fn constant_part(l: &DifferentialOperator) -> OperatorMatrix {
    let lat = l.b.lattice();
    let jmax = l.b.jmax();
    let b = AnalyticFunction::constant(lat, jmax, l.lambda1());
    DifferentialOperator::new(l.lambda3, b, AnalyticFunction::zeros(lat, jmax), &l.omega).materialize()
}

/// `g = ∂_x^{−1}π₀⊥[λ₁ − a₁]/(3λ₃)`, so that `3λ₃g_x + a₁ = λ₁` up to the
/// x-average of `a₁`.
pub fn order_one_reduction(l: &DifferentialOperator, params: &ReductionParams) -> Result<OrderOne> {
    if l.lambda3 <= 0.0 {
        return Err(Error::InvalidInput(format!("λ₃ = {} must be positive", l.lambda3)));
    }
    let defect = l.normalization_defect();
    if defect > params.defect_tol {
        return Err(Error::InvalidInput(format!(
            "x-average of the first-order coefficient depends on φ (defect {defect:e})"
        )));
    }
    let g = l.b.pi0_perp().scale(-1.0 / (3.0 * l.lambda3)).dx_inv()?;
    let generator = OperatorMatrix::multiplication(&g, -1);
    let tol = 1e-3 * params.stop_tol;
    let (conj, info) = exp_conjugate(&generator, &l.materialize(), tol)?;
    let r0 = conj.sub(&constant_part(l)).toeplitz_part();
    Ok(OrderOne {
        g,
        generator,
        r0,
        series_terms: info.terms,
    })
}

/// State of the KAM iteration: `D_k + P_k` with
/// `D_k = diag [iω·ℓ + iΩ₀(j) + z(j)]`, `Ω₀(j) = −λ₃j³ + λ₁j`.
#[derive(Clone, Debug)]
pub struct KamState {
    pub k: usize,
    pub lambda3: f64,
    pub lambda1: f64,
    pub omega: Vec<f64>,
    /// Accumulated diagonal corrections, indexed by `jidx`.
    pub z: Vec<C>,
    pub p: OperatorMatrix,
    pub generators: Vec<OperatorMatrix>,
}

impl KamState {
    pub fn new(lambda3: f64, lambda1: f64, omega: &[f64], p: OperatorMatrix) -> Self {
        let n = p.n();
        Self {
            k: 0,
            lambda3,
            lambda1,
            omega: omega.to_vec(),
            z: vec![ZERO; n],
            p,
            generators: Vec::new(),
        }
    }

    pub fn jmax(&self) -> usize {
        self.p.jmax()
    }

    pub fn lattice(&self) -> &Arc<Lattice> {
        self.p.lattice()
    }

    pub fn omega0(&self, j: i64) -> f64 {
        -self.lambda3 * (j * j * j) as f64 + self.lambda1 * j as f64
    }

    /// `r_k(j)`.
    pub fn r(&self, j: i64) -> f64 {
        self.z[jidx(j, self.jmax())].im
    }

    /// `μ_k(j)`.
    pub fn damping(&self, j: i64) -> f64 {
        self.z[jidx(j, self.jmax())].re
    }

    /// `iΩ₀(j) + z(j)`.
    pub fn diag(&self, j: i64) -> C {
        C::new(0.0, self.omega0(j)) + self.z[jidx(j, self.jmax())]
    }

    /// `Ω_k(j) = Ω₀(j) + r_k(j)`.
    pub fn frequencies(&self) -> FrequencyTable {
        FrequencyTable::from_fn(self.jmax(), |j| if j == 0 { 0.0 } else { self.omega0(j) + self.r(j) })
    }

    pub fn damping_table(&self) -> FrequencyTable {
        FrequencyTable::from_fn(self.jmax(), |j| if j == 0 { 0.0 } else { self.damping(j) })
    }

    pub fn cutoff(&self, n0: f64) -> f64 {
        n0 * 2f64.powi(self.k as i32)
    }

    pub fn remainder_norm(&self) -> f64 {
        self.p.op_norm(0.0, 0.0)
    }
}

/// One row of the reduction trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KamStepReport {
    pub step: usize,
    pub cutoff: f64,
    pub p_norm: f64,
    pub p_next_norm: f64,
    pub psi_norm: f64,
    /// Smallest `|divisor|/floor` over the scanned triples.
    pub min_margin: f64,
    /// `max |[D,Ψ] + Π_N P − Z| / max |P|`.
    pub homological_residual: f64,
    pub series_terms: usize,
    pub seconds: Option<f64>,
}

/// One KAM step.
pub fn kam_step(state: &KamState, params: &ReductionParams) -> Result<(KamState, KamStepReport)> {
    let start = Instant::now();
    let lat = state.lattice().clone();
    let jmax = state.jmax();
    let n = state.p.n();
    let cut = state.cutoff(params.n0);
    let p = &state.p;
    let p_norm = p.op_norm(0.0, 0.0);
    let p_max = p.max_abs();
    let table = state.frequencies();

    let mut psi = OperatorMatrix::zero(&lat, jmax);
    let mut zdiag = vec![ZERO; n];
    let mut min_margin = f64::INFINITY;
    let mut hom: f64 = 0.0;
    for k in 0..lat.len() {
        if lat.norm_of(k) > cut + 1e-9 {
            continue;
        }
        let l = lat.index(k);
        let wl = l.dot(&state.omega);
        let d = divisor_weight(l)?;
        let zero_block = l.is_zero();
        let pb = p.block(k);
        let mut out: Option<Vec<C>> = None;
        for ri in 0..n {
            let j = jval(ri, jmax);
            for ci in 0..n {
                let jp = jval(ci, jmax);
                let x = pb.map_or(ZERO, |b| b[ri * n + ci]);
                if j == jp && zero_block {
                    zdiag[ri] = x;
                    continue;
                }
                let (value, floor) = if j == jp {
                    (wl.abs(), params.gbar * diophantine_weight(l)?)
                } else {
                    let v = (wl + table.get(j) - table.get(jp)).abs();
                    (v, params.gamma * (j * j * j - jp * jp * jp).abs() as f64 / d)
                };
                min_margin = min_margin.min(value / floor);
                if value < floor {
                    return Err(Error::SmallDivisor {
                        ell: l.clone(),
                        j,
                        h: jp,
                        value,
                        floor,
                    });
                }
                if x == ZERO {
                    continue;
                }
                let div = C::new(0.0, wl) + state.diag(j) - state.diag(jp);
                let y = -x / div;
                hom = hom.max((div * y + x).norm());
                out.get_or_insert_with(|| vec![ZERO; n * n])[ri * n + ci] = y;
            }
        }
        if let Some(b) = out {
            *psi.block_mut(k) = b;
        }
    }
    psi.set_real(p.is_real());

    let zop = OperatorMatrix::diagonal(&lat, jmax, |j| zdiag[jidx(j, jmax)]);
    let w = zop.sub(&p.project_n(cut));
    let mut next = p.project_n_perp(cut);
    let mut tw = w;
    let mut tp = p.clone();
    let mut norms = Vec::new();
    let tol = 1e-3 * params.stop_tol;
    for q in 1..=SERIES_CAP {
        let f = C::new(1.0 / q as f64, 0.0);
        tw = OperatorMatrix::ad(&psi, &tw).scale(f);
        tp = OperatorMatrix::ad(&psi, &tp).scale(f);
        let term = tw.scale(C::new(1.0 / (q + 1) as f64, 0.0)).add(&tp);
        next = next.add(&term);
        norms.push(term.op_norm(0.0, 0.0));
        if series_state(&norms, tol)? {
            break;
        }
    }
    next.prune(0.0);
    next.set_real(p.is_real());

    let mut z = state.z.clone();
    for (a, b) in z.iter_mut().zip(&zdiag) {
        *a += b;
    }
    let report = KamStepReport {
        step: state.k,
        cutoff: cut,
        p_norm,
        p_next_norm: next.op_norm(0.0, 0.0),
        psi_norm: psi.op_norm(0.0, 0.0),
        min_margin,
        homological_residual: if p_max > 0.0 { hom / p_max } else { 0.0 },
        series_terms: norms.len(),
        seconds: params.timings.then(|| start.elapsed().as_secs_f64()),
    };
    let mut generators = state.generators.clone();
    generators.push(psi);
    Ok((
        KamState {
            k: state.k + 1,
            lambda3: state.lambda3,
            lambda1: state.lambda1,
            omega: state.omega.clone(),
            z,
            p: next,
            generators,
        },
        report,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KamStatus {
    Converged,
    MaxSteps,
    /// A step reduced the remainder by less than half.
    Stagnated,
}

/// Result of [`kam_iterate`]; `history[k]` is the state before step `k`.
#[derive(Clone, Debug)]
pub struct KamOutcome {
    pub state: KamState,
    pub status: KamStatus,
    pub steps: Vec<KamStepReport>,
    pub history: Vec<KamState>,
}

pub fn kam_iterate(state0: KamState, params: &ReductionParams) -> Result<KamOutcome> {
    let mut state = state0;
    let mut steps = Vec::new();
    let mut history = Vec::new();
    let status = loop {
        if state.remainder_norm() <= params.stop_tol {
            break KamStatus::Converged;
        }
        if steps.len() >= params.max_steps {
            break KamStatus::MaxSteps;
        }
        let (next, rep) = kam_step(&state, params)?;
        let stalled = rep.p_next_norm > 0.5 * rep.p_norm && rep.p_next_norm > params.stop_tol;
        history.push(std::mem::replace(&mut state, next));
        steps.push(rep);
        if stalled {
            break KamStatus::Stagnated;
        }
    };
    Ok(KamOutcome {
        state,
        status,
        steps,
        history,
    })
}

/// `M = e^{G} e^{Ψ₀} ⋯ e^{Ψ_k}` with `M^{−1} L M = D_∞ + P_∞`.
#[derive(Clone, Debug)]
pub struct Reduction {
    pub lambda3: f64,
    pub lambda1: f64,
    pub omega: Vec<f64>,
    pub g: AnalyticFunction,
    /// `G` followed by the `Ψ_k`.
    pub generators: Vec<OperatorMatrix>,
    pub z: Vec<C>,
    pub status: KamStatus,
    pub steps: Vec<KamStepReport>,
    pub r0_norm: f64,
    pub remainder_norm: f64,
    pub history: Vec<KamState>,
    pub final_state: KamState,
}

/// Per-run summary suitable for JSON output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReductionSummary {
    pub status: KamStatus,
    pub lambda3: f64,
    pub lambda1: f64,
    pub r0_norm: f64,
    pub remainder_norm: f64,
    pub steps: Vec<KamStepReport>,
    pub max_damping: f64,
    pub oddness_defect: f64,
    pub offdiag_residual: Option<f64>,
}

pub fn reduce_operator(l: &DifferentialOperator, params: &ReductionParams) -> Result<Reduction> {
    let one = order_one_reduction(l, params)?;
    let r0_norm = one.r0.op_norm(0.0, 0.0);
    let state0 = KamState::new(l.lambda3, l.lambda1(), &l.omega, one.r0);
    let out = kam_iterate(state0, params)?;
    let mut generators = vec![one.generator];
    generators.extend(out.state.generators.iter().cloned());
    Ok(Reduction {
        lambda3: l.lambda3,
        lambda1: l.lambda1(),
        omega: l.omega.clone(),
        g: one.g,
        generators,
        z: out.state.z.clone(),
        status: out.status,
        r0_norm,
        remainder_norm: out.state.remainder_norm(),
        steps: out.steps,
        history: out.history,
        final_state: out.state,
    })
}

impl Reduction {
    pub fn jmax(&self) -> usize {
        self.final_state.jmax()
    }

    pub fn lattice(&self) -> &Arc<Lattice> {
        self.final_state.lattice()
    }

    /// `Ω_∞(j)`.
    pub fn frequencies(&self) -> FrequencyTable {
        self.final_state.frequencies()
    }

    /// `μ_∞(j)`.
    pub fn damping(&self) -> FrequencyTable {
        self.final_state.damping_table()
    }

    pub fn max_damping(&self) -> f64 {
        self.damping().entries().map(|(_, v)| v.abs()).fold(0.0, f64::max)
    }

    /// `max |Ω_∞(j) + Ω_∞(−j)|`.
    pub fn oddness_defect(&self) -> f64 {
        self.frequencies().oddness_defect()
    }

    pub fn converged(&self) -> bool {
        self.status == KamStatus::Converged
    }

    /// Diagonal entry `i(ω·ℓ + Ω_∞(j)) + μ_∞(j)` at lattice position `k`.
    pub fn eigenvalue(&self, k: usize, j: i64) -> C {
        C::new(0.0, self.lattice().index(k).dot(&self.omega)) + self.final_state.diag(j)
    }

    pub fn diagonal_model(&self) -> Result<DiagonalModel> {
        let m = DiagonalModel::new(self.frequencies(), &self.omega, false)?;
        if self.max_damping() > 0.0 {
            m.with_damping(self.damping(), false)
        } else {
            Ok(m)
        }
    }

    fn series_tol(u: &AnalyticFunction) -> f64 {
        1e-17 * u.norm(0.0).max(f64::MIN_POSITIVE)
    }

    /// `M u`.
    pub fn apply_m(&self, u: &AnalyticFunction) -> Result<AnalyticFunction> {
        let mut v = u.pi0_perp();
        for g in self.generators.iter().rev() {
            let tol = Self::series_tol(&v);
            v = exp_apply(g, &v, tol)?.0;
        }
        Ok(v)
    }

    /// `M^{−1} u`.
    pub fn apply_m_inv(&self, u: &AnalyticFunction) -> Result<AnalyticFunction> {
        let mut v = u.pi0_perp();
        for g in &self.generators {
            let tol = Self::series_tol(&v);
            v = exp_apply(&g.scale(C::new(-1.0, 0.0)), &v, tol)?.0;
        }
        Ok(v)
    }

    /// Column check of `M^{−1} L M` on `window`: the largest column ℓ¹ norm
    /// of off-diagonal window entries, and the largest diagonal mismatch
    /// against the eigenvalues.
    pub fn diagonalization_residual(&self, l: &DifferentialOperator, window: &Window) -> Result<(f64, f64)> {
        let lat = self.lattice().clone();
        let jmax = self.jmax();
        let lm = l.materialize();
        let modes = window.modes(&lat);
        let mut off: f64 = 0.0;
        let mut diag: f64 = 0.0;
        for &(k, j) in &modes {
            let mut e = AnalyticFunction::zeros(&lat, jmax);
            e.set(&lat.index(k).clone(), j, C::new(1.0, 0.0))?;
            let y = self.apply_m_inv(&lm.apply(&self.apply_m(&e)?))?;
            let mut s = 0.0;
            for &(kr, jr) in &modes {
                if (kr, jr) == (k, j) {
                    diag = diag.max((y.at(kr, jr) - self.eigenvalue(k, j)).norm());
                } else {
                    s += y.at(kr, jr).norm();
                }
            }
            off = off.max(s);
        }
        Ok((off, diag))
    }

    pub fn summary(&self, offdiag_residual: Option<f64>) -> ReductionSummary {
        ReductionSummary {
            status: self.status,
            lambda3: self.lambda3,
            lambda1: self.lambda1,
            r0_norm: self.r0_norm,
            remainder_norm: self.remainder_norm,
            steps: self.steps.clone(),
            max_damping: self.max_damping(),
            oddness_defect: self.oddness_defect(),
            offdiag_residual,
        }
    }

    /// Columns: step, op_norm_p, min_margin, seconds.
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("step,op_norm_p,min_margin,seconds\n");
        for r in &self.steps {
            let secs = r.seconds.map(|t| format!("{t:.6}")).unwrap_or_default();
            s.push_str(&format!("{},{:e},{:e},{}\n", r.step, r.p_norm, r.min_margin, secs));
        }
        s.push_str(&format!("{},{:e},,\n", self.steps.len(), self.remainder_norm));
        s
    }

    /// Rows `j, Omega, damping`.
    pub fn omega_table_csv(&self) -> String {
        let mut s = String::from("j,omega,damping\n");
        let f = self.frequencies();
        let d = self.damping();
        for j in -(self.jmax() as i64)..=self.jmax() as i64 {
            if j != 0 {
                s.push_str(&format!("{j},{:e},{:e}\n", f.get(j), d.get(j)));
            }
        }
        s
    }
}

/// Diagnostics of [`invert_via_diagonalization`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionReport {
    pub division: DivisionReport,
    /// `‖π₀⊥(L h + f)‖₀ / ‖f‖₀`.
    pub residual: f64,
    /// `‖π₀(L h)‖₀`; vanishes for operators of the form `∂_x ∘ (…)`.
    pub average_leak: f64,
}

/// `h = −L^{−1} f` computed as `M D_∞^{−1} M^{−1}(−f)`. The first Melnikov
/// floor `γ|j|³/d(ℓ)` is enforced on every divided mode.
pub fn invert_via_diagonalization(
    red: &Reduction,
    l: &DifferentialOperator,
    f: &AnalyticFunction,
    gamma: f64,
) -> Result<(AnalyticFunction, InversionReport)> {
    if !f.zero_x_average() {
        return Err(Error::InvalidInput("right-hand side must have zero x-average".into()));
    }
    let model = red.diagonal_model()?;
    let ft = red.apply_m_inv(f)?;
    let (ht, division) = solve_diagonal_report(&model, &ft, gamma)?;
    let h = red.apply_m(&ht)?;
    let lh = l.apply(&h);
    let fnorm = f.norm(0.0);
    let residual = if fnorm > 0.0 {
        (&lh + f).pi0_perp().norm(0.0) / fnorm
    } else {
        0.0
    };
    let h = if f.is_real() { h.into_real() } else { h };
    Ok((
        h,
        InversionReport {
            division,
            residual,
            average_leak: lh.pi0().norm(0.0),
        },
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDeviation {
    pub step: usize,
    pub p_diff: f64,
    pub r_diff: f64,
    pub psi_diff: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReductionComparison {
    pub steps: Vec<StepDeviation>,
    /// `sup_j |Ω_∞⁺(j) − Ω_∞(j)|`.
    pub omega_diff: f64,
    pub damping_diff: f64,
}

/// Step-by-step deviation of two reductions on matching truncations.
pub fn compare_reductions(a: &Reduction, b: &Reduction) -> Result<ReductionComparison> {
    if a.jmax() != b.jmax() || !a.lattice().same_as(b.lattice()) {
        return Err(Error::InvalidInput("reductions use different truncations".into()));
    }
    let jm = a.jmax() as i64;
    let sup = |f: &dyn Fn(i64) -> f64| (-jm..=jm).filter(|&j| j != 0).map(f).fold(0.0, f64::max);
    let n = a.history.len().min(b.history.len());
    let mut steps = Vec::with_capacity(n);
    for k in 0..n {
        let (sa, sb) = (&a.history[k], &b.history[k]);
        steps.push(StepDeviation {
            step: k,
            p_diff: sa.p.sub(&sb.p).op_norm(0.0, 0.0),
            r_diff: sup(&|j| (sa.r(j) - sb.r(j)).abs()),
            psi_diff: a.generators[k + 1].sub(&b.generators[k + 1]).op_norm(0.0, 0.0),
        });
    }
    let (fa, fb) = (a.frequencies(), b.frequencies());
    let (da, db) = (a.damping(), b.damping());
    Ok(ReductionComparison {
        steps,
        omega_diff: sup(&|j| (fa.get(j) - fb.get(j)).abs()),
        damping_diff: sup(&|j| (da.get(j) - db.get(j)).abs()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{LatticeParams, MultiIndex};

    fn lat(m: usize, k: f64) -> Arc<Lattice> {
        Lattice::new(LatticeParams::new(1.0, m, k)).unwrap()
    }

    fn op(l: &Arc<Lattice>, jmax: usize, omega: &[f64], lambda1: f64, eps_b: f64, eps_c: f64) -> DifferentialOperator {
        let b = AnalyticFunction::real_from_entries(
            l,
            jmax,
            &[
                (MultiIndex::unit(1, 1), 1, C::new(eps_b / 4.0, 0.0)),
                (MultiIndex::unit(1, -1), 1, C::new(eps_b / 4.0, 0.0)),
            ],
        )
        .unwrap()
        .add_constant(lambda1);
        let c =
            AnalyticFunction::real_from_entries(l, jmax, &[(MultiIndex::zero(), 1, C::new(0.0, -eps_c / 2.0))]).unwrap();
        DifferentialOperator::new(1.0, b, c, omega)
    }

    #[test]
    fn constant_coefficients_reduce_trivially() {
        let l = lat(1, 3.0);
        let o = op(&l, 8, &[1.37], 0.4, 0.0, 0.0);
        let red = reduce_operator(&o, &ReductionParams::default()).unwrap();
        assert!(red.converged());
        assert!(red.steps.is_empty());
        assert!(red.g.is_zero());
        for j in 1..=8 {
            assert_eq!(red.frequencies().get(j), -(j * j * j) as f64 + 0.4 * j as f64);
        }
    }

    #[test]
    fn order_one_cos_x() {
        let l = lat(1, 2.0);
        let a1 = AnalyticFunction::real_from_entries(&l, 8, &[(MultiIndex::zero(), 1, C::new(0.5, 0.0))]).unwrap();
        let o = DifferentialOperator::new(1.0, a1.clone(), AnalyticFunction::zeros(&l, 8), &[1.3]);
        let one = order_one_reduction(&o, &ReductionParams::default()).unwrap();
        // g = −⅓ sin x
        assert!((one.g.coeff(&MultiIndex::zero(), 1) - C::new(0.0, 1.0 / 6.0)).norm() < 1e-15);
        assert!((&one.g.dx(1).scale(3.0) + &a1).max_abs() < 1e-15);
    }

    #[test]
    fn diagonal_remainder_converges_in_one_step() {
        let l = lat(1, 2.0);
        let jmax = 6;
        let p = OperatorMatrix::diagonal(&l, jmax, |j| C::new(0.0, 1e-3 * j as f64));
        let s = KamState::new(1.0, 0.0, &[1.3], p);
        let out = kam_iterate(s, &ReductionParams::default()).unwrap();
        assert_eq!(out.status, KamStatus::Converged);
        assert_eq!(out.steps.len(), 1);
        assert!((out.state.r(3) - 3e-3).abs() < 1e-18);
    }

    #[test]
    fn single_block_step_matches_hand_expansion() {
        // P = a (e^{ix}⊗e^{−ix} at ℓ = 0) + conj; Ψ = −P/divisor entrywise.
        let l = lat(1, 1.0);
        let jmax = 2;
        let mut p = OperatorMatrix::zero(&l, jmax);
        let n = p.n();
        let a = C::new(1e-4, 2e-4);
        {
            let b = p.block_mut(0);
            b[jidx(2, jmax) * n + jidx(1, jmax)] = a;
            b[jidx(-2, jmax) * n + jidx(-1, jmax)] = a.conj();
        }
        let s = KamState::new(1.0, 0.0, &[1.3], p.clone());
        let (next, rep) = kam_step(&s, &ReductionParams::default()).unwrap();
        let psi = &next.generators[0];
        let div = C::new(0.0, s.omega0(2) - s.omega0(1));
        assert!((psi.entry(0, 2, 1) + a / div).norm() < 1e-20);
        // P₁ = [P,Ψ] + [[P,Ψ],Ψ]/2 + [−P,Ψ]/2 + [[−P,Ψ],Ψ]/6 + …; here [P,Ψ] = 0
        // because both are strictly lower triangular with one entry each.
        assert!(rep.p_next_norm < 1e-30);
        assert!(rep.homological_residual < 1e-15);
    }

    #[test]
    fn reduction_diagonalizes_small_operator() {
        let l = lat(1, 4.0);
        let jmax = 10;
        let o = op(&l, jmax, &[1.37], 0.2, 1e-3, 1e-3);
        let params = ReductionParams::default();
        let red = reduce_operator(&o, &params).unwrap();
        assert!(red.converged(), "{:?}", red.steps);
        assert!(red.oddness_defect() < 1e-12);
        let (off, diag) = red
            .diagonalization_residual(&o, &Window { ell_norm: 1.0, j: 3 })
            .unwrap();
        assert!(off < 1e-9, "{off:e}");
        assert!(diag < 1e-9, "{diag:e}");
    }

    #[test]
    fn inversion_solves_equation() {
        let l = lat(1, 4.0);
        let jmax = 10;
        let o = op(&l, jmax, &[1.37], 0.2, 1e-3, 0.0);
        let red = reduce_operator(&o, &ReductionParams::default()).unwrap();
        let f = AnalyticFunction::real_from_entries(&l, jmax, &[(MultiIndex::unit(1, 1), 1, C::new(1.0, 0.5))]).unwrap();
        let (h, rep) = invert_via_diagonalization(&red, &o, &f, 1e-4).unwrap();
        assert!(rep.residual < 1e-10, "{rep:?}");
        assert!(h.is_real());
    }
}
