//! Outer Newton-type iteration for
//! `F₀(u) = (ω·∂_φ + ∂_x³)u + Q₀(u) + f = 0`.
//!
//! Step `n` solves `L_n h_n + f_n = 0` through the reduction, conjugates
//! `L_n + Q_n'(h_n)` with `T_{n+1}`, and transports
//! `F_{n+1}(v) = r T^{−1} F_n(h_n + T v)`. The approximate solution is
//! `u_n = h₀ + T₁(h₁ + T₂(h₂ + ⋯))`.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::analytic::{AnalyticFunction, FunctionDoc};
use crate::conjugation::{
    apply_t, apply_t_inverse, conjugate_step, push_quadratic, ConjugationOptions, ConjugationReport, QuadraticForm,
    TransformationData,
};
use crate::error::{Error, Result, StageExt};
use crate::grid::{Grid, GridOptions};
use crate::lattice::{Lattice, LatticeParams};
use crate::opalg::DifferentialOperator;
use crate::reducibility::{invert_via_diagonalization, reduce_operator, ReductionParams};
use crate::smalldiv::{in_o0, DiophantineParams, FrequencyVector};

#[derive(Clone, Debug)]
pub struct ProblemSpec {
    /// Density coefficients `c₀..c₃` of `c₃u_x³ + c₂uu_x² + c₁u²u_x + c₀u³`.
    pub c: [f64; 4],
    /// Real-on-real, zero x-average; its lattice and `jmax` fix the truncation.
    pub forcing: AnalyticFunction,
    pub omega: FrequencyVector,
    pub s_big: f64,
    pub s_bar: f64,
    pub diophantine: DiophantineParams,
    pub reduction: ReductionParams,
    pub grid: GridOptions,
    /// Independent residual at which the run counts as converged.
    pub residual_target: f64,
    pub max_iters: usize,
    /// Oversampling of the independent residual grid.
    pub residual_oversample: usize,
    /// Tolerance of the third-order transport checks inside each conjugation.
    pub identity_tol: f64,
}

impl ProblemSpec {
    pub fn new(c: [f64; 4], forcing: AnalyticFunction, omega: FrequencyVector) -> Result<Self> {
        let spec = Self {
            c,
            forcing,
            omega,
            s_big: 1.0,
            s_bar: 0.0,
            diophantine: DiophantineParams::new(1e-3, 4e-3)?,
            reduction: ReductionParams::default(),
            grid: GridOptions::default(),
            residual_target: 1e-10,
            max_iters: 6,
            residual_oversample: 2,
            identity_tol: 1e-8,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn lattice(&self) -> &Arc<Lattice> {
        self.forcing.lattice()
    }

    pub fn jmax(&self) -> usize {
        self.forcing.jmax()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s_big > self.s_bar && self.s_bar >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "need S > s̄ ≥ 0, got S = {}, s̄ = {}",
                self.s_big, self.s_bar
            )));
        }
        if !self.forcing.is_real() {
            return Err(Error::InvalidInput("forcing must be real-on-real".into()));
        }
        if !self.forcing.zero_x_average() {
            return Err(Error::InvalidInput("forcing must have zero x-average".into()));
        }
        if self.omega.len() != self.lattice().params().m {
            return Err(Error::InvalidInput(format!(
                "ω has {} entries but the lattice has M = {}",
                self.omega.len(),
                self.lattice().params().m
            )));
        }
        if self.residual_oversample < 1 {
            return Err(Error::InvalidInput("residual oversampling must be ≥ 1".into()));
        }
        Ok(())
    }

    /// `σ₋₁ = min(S − s̄, 1)/8`.
    pub fn sigma_minus1(&self) -> f64 {
        (self.s_big - self.s_bar).min(1.0) / 8.0
    }

    /// `(s_n, σ_n)`: `s₀ = S − σ₋₁`, `σ_n = 6σ₋₁/(π²(n+1)²)`,
    /// `s_{n+1} = s_n − 6σ_n`.
    pub fn strip(&self, n: usize) -> (f64, f64) {
        let s1 = self.sigma_minus1();
        let sigma = |k: usize| 6.0 * s1 / (std::f64::consts::PI.powi(2) * ((k + 1) as f64).powi(2));
        let mut s = self.s_big - s1;
        for k in 0..n {
            s -= 6.0 * sigma(k);
        }
        (s, sigma(n))
    }
}

/// `(f_n, L_n, Q_n)` plus the data needed to assemble `u_n`.
#[derive(Clone, Debug)]
pub struct IterationState {
    pub n: usize,
    pub f: AnalyticFunction,
    pub l: DifferentialOperator,
    pub q: QuadraticForm,
    pub transforms: Vec<TransformationData>,
    pub h_list: Vec<AnalyticFunction>,
}

/// Diagnostics of one outer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub s_n: f64,
    pub sigma_n: f64,
    pub gamma_n: f64,
    /// `‖f_n‖` at `s_n`.
    pub norm_f: f64,
    /// `‖h_n‖` at `s_n`.
    pub norm_h: f64,
    /// `‖f_{n+1}‖` at `s_n − 2σ_n`.
    pub norm_f_next: f64,
    pub kam_steps: usize,
    pub min_margin: f64,
    /// `‖L_n h_n + f_n‖/‖f_n‖` on `j ≠ 0`.
    pub inversion_residual: f64,
    pub conjugation: ConjugationReport,
    /// Size of the x-average dropped from `f_{n+1}`.
    pub average_residue: f64,
    /// `Σ ‖q_{i,j}‖` of `Q_{n+1}`.
    pub q_norm_sum: f64,
    pub seconds: Option<f64>,
}

/// `L₀ = ω·∂_φ + ∂_x³`, `Q₀` from the density, `f₀ = f`.
pub fn init(spec: &ProblemSpec) -> Result<IterationState> {
    spec.validate()?;
    let lat = spec.lattice().clone();
    let jmax = spec.jmax();
    let om = spec.omega.as_slice();
    let mem = in_o0(om, spec.diophantine.gamma0, &lat, jmax)?;
    if let Some(w) = mem.violation {
        return Err(w.into_error()).stage("frequency check");
    }
    Ok(IterationState {
        n: 0,
        f: spec.forcing.clone(),
        l: DifferentialOperator::airy(&lat, jmax, 1.0, om),
        q: QuadraticForm::from_density(&lat, jmax, spec.c),
        transforms: Vec::new(),
        h_list: Vec::new(),
    })
}

/// One outer step.
pub fn step(state: &IterationState, spec: &ProblemSpec, timings: bool) -> Result<(IterationState, StepRecord)> {
    let start = Instant::now();
    let n = state.n;
    let (s_n, sigma_n) = spec.strip(n);
    let gamma = spec.diophantine.gamma(n);
    let lat = spec.lattice().clone();
    let jmax = spec.jmax();
    let go = &spec.grid;
    let norm_f = state.f.norm(s_n);
    if state.f.is_zero() {
        let t = TransformationData::identity(&lat, jmax, &state.l.omega, state.l.lambda3, state.l.lambda1());
        let mut next = state.clone();
        next.n += 1;
        next.transforms.push(t);
        next.h_list.push(AnalyticFunction::zeros(&lat, jmax));
        let rec = StepRecord {
            step: n,
            s_n,
            sigma_n,
            gamma_n: gamma,
            norm_f,
            norm_h: 0.0,
            norm_f_next: 0.0,
            kam_steps: 0,
            min_margin: f64::INFINITY,
            inversion_residual: 0.0,
            conjugation: ConjugationReport::default(),
            average_residue: 0.0,
            q_norm_sum: state.q.norm_sum(0.0),
            seconds: timings.then(|| start.elapsed().as_secs_f64()),
        };
        return Ok((next, rec));
    }

    let params = ReductionParams {
        gamma,
        ..spec.reduction.clone()
    };
    let red = reduce_operator(&state.l, &params).stage("reduction")?;
    if !red.converged() {
        return Err(Error::Stagnation(format!(
            "reduction stopped ({:?}) with remainder {:e}",
            red.status, red.remainder_norm
        )))
        .stage("reduction");
    }
    let (h, inv) = invert_via_diagonalization(&red, &state.l, &state.f, gamma).stage("inversion")?;
    let kam_margin = red.steps.iter().map(|s| s.min_margin).fold(f64::INFINITY, f64::min);

    let d = state.q.linearize(&h);
    let copts = ConjugationOptions {
        grid: *go,
        gamma,
        identity_tol: spec.identity_tol,
        verify: None,
        residual_tol: f64::INFINITY,
    };
    let conj = conjugate_step(&state.l, &d, &copts).stage("conjugation")?;
    let t = conj.data;

    // F_n(h_n), then f_{n+1} = r T^{−1} F_n(h_n)
    let full = &(&state.f + &state.l.apply(&h)) + &state.q.evaluate(&h, go).stage("quadratic form")?;
    let back = apply_t_inverse(&t, &full, go).stage("transport")?;
    let g = Grid::new(lat.clone(), jmax, go);
    let vals: Vec<_> = t
        .r
        .grid_values(&g)
        .into_iter()
        .zip(back.grid_values(&g))
        .map(|(a, b)| a * b)
        .collect();
    let f_next = AnalyticFunction::from_grid(&g, &vals, true, go).stage("transport")?;
    let average_residue = f_next.pi0().norm(0.0);
    let f_next = f_next.pi0_perp();
    let q_next = push_quadratic(&state.q, &t, go).stage("quadratic transport")?;

    let rec = StepRecord {
        step: n,
        s_n,
        sigma_n,
        gamma_n: gamma,
        norm_f,
        norm_h: h.norm(s_n),
        norm_f_next: f_next.norm(s_n - 2.0 * sigma_n),
        kam_steps: red.steps.len(),
        min_margin: kam_margin.min(inv.division.min_margin),
        inversion_residual: inv.residual,
        conjugation: conj.report,
        average_residue,
        q_norm_sum: q_next.norm_sum(0.0),
        seconds: timings.then(|| start.elapsed().as_secs_f64()),
    };
    let mut transforms = state.transforms.clone();
    transforms.push(t);
    let mut h_list = state.h_list.clone();
    h_list.push(h);
    Ok((
        IterationState {
            n: n + 1,
            f: f_next,
            l: conj.l_plus,
            q: q_next,
            transforms,
            h_list,
        },
        rec,
    ))
}

/// `u_n = h₀ + T₁(h₁ + T₂(h₂ + ⋯ + T_n h_n))`.
pub fn assemble_solution(state: &IterationState, opts: &GridOptions) -> Result<AnalyticFunction> {
    let Some(last) = state.h_list.last() else {
        return Err(Error::InvalidInput("no completed step".into()));
    };
    let mut v = last.clone();
    for i in (0..state.h_list.len() - 1).rev() {
        v = &state.h_list[i] + &apply_t(&state.transforms[i], &v, opts)?;
    }
    Ok(v)
}

/// Norms of `F₀(u)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    /// ℓ¹ norm of the Fourier coefficients.
    pub coeff_l1: f64,
    /// Largest modulus on the collocation grid.
    pub grid_max: f64,
}

/// `F₀(u)` evaluated on a truncation with doubled `K` and `jmax`, where the
/// quadratic terms are exact, using the density form
/// `∂_x²(3c₃u_x² + 2c₂uu_x + c₁u²) − ∂_x(c₂u_x² + 2c₁uu_x + 3c₀u²)`.
pub fn residual(spec: &ProblemSpec, u: &AnalyticFunction, oversample: usize) -> Result<ResidualReport> {
    let p = *spec.lattice().params();
    let big = Lattice::new(LatticeParams::new(p.eta, p.m, 2.0 * p.k))?;
    let jm = 2 * spec.jmax();
    let opts = GridOptions {
        oversample,
        ..GridOptions::lenient()
    };
    let g = Grid::new(big.clone(), jm, &opts);
    let ub = u.embed(&big, jm);
    let fb = spec.forcing.embed(&big, jm);
    let v = ub.grid_values(&g);
    let vx = ub.dx(1).grid_values(&g);
    let [c0, c1, c2, c3] = spec.c;
    let a: Vec<_> = v
        .iter()
        .zip(&vx)
        .map(|(&u, &ux)| 3.0 * c3 * ux * ux + 2.0 * c2 * u * ux + c1 * u * u)
        .collect();
    let b: Vec<_> = v
        .iter()
        .zip(&vx)
        .map(|(&u, &ux)| c2 * ux * ux + 2.0 * c1 * u * ux + 3.0 * c0 * u * u)
        .collect();
    let a = AnalyticFunction::from_grid(&g, &a, true, &opts)?;
    let b = AnalyticFunction::from_grid(&g, &b, true, &opts)?;
    let om = spec.omega.as_slice();
    let f = &(&(&(&ub.om_dphi(om) + &ub.dx(3)) + &a.dx(2)) - &b.dx(1)) + &fb;
    let grid_max = f.grid_values(&g).iter().map(|z| z.norm()).fold(0.0, f64::max);
    Ok(ResidualReport {
        coeff_l1: f.norm(0.0),
        grid_max,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub converged: bool,
    pub iterations: usize,
    /// Independent residuals `‖F₀(u_n)‖`, starting with `u = 0`.
    pub residuals: Vec<f64>,
    pub residual_grid_max: Vec<f64>,
    pub steps: Vec<StepRecord>,
    /// Stage and message of the failure that ended a non-converged run.
    pub failure: Option<String>,
    pub solution: FunctionDoc,
}

impl SolveReport {
    pub fn final_residual(&self) -> f64 {
        *self.residuals.last().unwrap_or(&f64::NAN)
    }

    /// Columns: step, s_n, sigma_n, norm_f_n, norm_h_n, residual, min_margin, seconds.
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("step,s_n,sigma_n,norm_f_n,norm_h_n,residual,min_margin,seconds\n");
        for (i, r) in self.steps.iter().enumerate() {
            let secs = r.seconds.map(|t| format!("{t:.6}")).unwrap_or_default();
            let res = self.residuals.get(i + 1).copied().unwrap_or(f64::NAN);
            s.push_str(&format!(
                "{},{:e},{:e},{:e},{:e},{:e},{:e},{}\n",
                r.step, r.s_n, r.sigma_n, r.norm_f, r.norm_h, res, r.min_margin, secs
            ));
        }
        s
    }
}

/// Runs [`init`] and [`step`] until the independent residual reaches the
/// target or `max_iters` steps were taken. Numerical failures end the run
/// with a non-converged report; invalid input is an error.
pub fn solve(spec: &ProblemSpec, timings: bool) -> Result<SolveReport> {
    let mut state = init(spec)?;
    let lat = spec.lattice().clone();
    let jmax = spec.jmax();
    let mut u = AnalyticFunction::zeros(&lat, jmax);
    let r0 = residual(spec, &u, spec.residual_oversample)?;
    let mut residuals = vec![r0.coeff_l1];
    let mut grid_max = vec![r0.grid_max];
    let mut steps = Vec::new();
    let mut failure = None;
    while residuals.last().copied().unwrap_or(f64::INFINITY) > spec.residual_target {
        if steps.len() >= spec.max_iters {
            failure = Some(format!("no convergence within {} steps", spec.max_iters));
            break;
        }
        let (next, rec) = match step(&state, spec, timings) {
            Ok(x) => x,
            Err(e) => {
                failure = Some(e.to_string());
                break;
            }
        };
        let diverging = !rec.norm_f_next.is_finite() || rec.norm_f_next > rec.norm_f;
        state = next;
        steps.push(rec);
        u = match assemble_solution(&state, &spec.grid) {
            Ok(u) => u,
            Err(e) => {
                failure = Some(format!("assembly: {e}"));
                break;
            }
        };
        let r = residual(spec, &u, spec.residual_oversample)?;
        residuals.push(r.coeff_l1);
        grid_max.push(r.grid_max);
        if diverging {
            failure = Some(format!(
                "diverging: ‖f_{}‖ = {:e} after ‖f_{}‖ = {:e}",
                state.n,
                steps.last().unwrap().norm_f_next,
                state.n - 1,
                steps.last().unwrap().norm_f
            ));
            break;
        }
    }
    let converged = failure.is_none();
    Ok(SolveReport {
        converged,
        iterations: steps.len(),
        residuals,
        residual_grid_max: grid_max,
        steps,
        failure,
        solution: u.to_doc(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::MultiIndex;
    use num_complex::Complex64;

    fn lat(m: usize, k: f64) -> Arc<Lattice> {
        Lattice::new(LatticeParams::new(1.0, m, k)).unwrap()
    }

    fn forcing(l: &Arc<Lattice>, jmax: usize, eps: f64) -> AnalyticFunction {
        AnalyticFunction::real_from_entries(l, jmax, &[(MultiIndex::unit(1, 1), 1, Complex64::new(eps / 2.0, 0.0))])
            .unwrap()
    }

    #[test]
    fn strips_stay_above_s_bar() {
        let l = lat(1, 2.0);
        let mut spec = ProblemSpec::new([0.0, 0.0, 0.0, 1.0], forcing(&l, 4, 0.0), FrequencyVector::new(vec![1.3]).unwrap()).unwrap();
        spec.s_big = 2.0;
        spec.s_bar = 1.5;
        let s1 = spec.sigma_minus1();
        assert_eq!(s1, 0.5 / 8.0);
        let (s_far, _) = spec.strip(10_000);
        assert!(s_far > spec.s_bar + 0.0);
        let mut sum = 0.0;
        for n in 0..200 {
            sum += spec.strip(n).1;
        }
        assert!(spec.s_bar + sum <= spec.strip(199).0);
    }

    #[test]
    fn zero_forcing_converges_immediately() {
        let l = lat(1, 2.0);
        let spec = ProblemSpec::new([0.0, 0.0, 0.0, 1.0], forcing(&l, 4, 0.0), FrequencyVector::new(vec![1.3]).unwrap()).unwrap();
        let rep = solve(&spec, false).unwrap();
        assert!(rep.converged);
        assert_eq!(rep.iterations, 0);
        assert!(rep.solution.entries.is_empty());
    }

    #[test]
    fn residual_of_zero_is_forcing_norm() {
        let l = lat(1, 2.0);
        let f = forcing(&l, 4, 1e-3);
        let spec = ProblemSpec::new([0.0, 0.0, 0.0, 1.0], f.clone(), FrequencyVector::new(vec![1.3]).unwrap()).unwrap();
        let r = residual(&spec, &AnalyticFunction::zeros(&l, 4), 2).unwrap();
        assert!((r.coeff_l1 - f.norm(0.0)).abs() < 1e-18);
        assert!((r.grid_max - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn small_forcing_converges() {
        let l = lat(1, 4.0);
        let jmax = 10;
        let spec = ProblemSpec::new([0.2, 0.0, 0.3, 1.0], forcing(&l, jmax, 1e-5), FrequencyVector::new(vec![1.37]).unwrap()).unwrap();
        let rep = solve(&spec, false).unwrap();
        assert!(rep.converged, "{:?} {:?}", rep.failure, rep.residuals);
        assert!(rep.final_residual() <= 1e-10);
        assert!(rep.residuals.windows(2).all(|w| w[1] < w[0]), "{:?}", rep.residuals);
    }
}
