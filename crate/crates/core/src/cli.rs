//! Batch front-end. Exit codes: 0 success, 1 input or config error,
//! 2 clean numerical non-convergence (including small-divisor witnesses).

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use num_complex::Complex64 as C;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::analytic::AnalyticFunction;
use crate::config::RunConfig;
use crate::conjugation::{apply_t, apply_t_inverse, TransformationData};
use crate::error::{Error, Result};
use crate::grid::GridOptions;
use crate::homological::solve_l0;
use crate::lattice::{Lattice, LatticeParams, MultiIndex};
use crate::nashmoser::{solve, SolveReport, StepRecord};
use crate::opalg::{commutator_dx3_g, DifferentialOperator, OperatorMatrix};
use crate::reducibility::{reduce_operator, ReductionParams, ReductionSummary};
use crate::smalldiv::{
    first_melnikov, in_dgamma, in_o0, measure_estimate, second_melnikov, smallest_divisor_report, DivisorReport,
    FrequencyTable, MeasureEstimate, Membership, ScanMode,
};

#[derive(Debug, Parser)]
#[command(name = "airy-kam", version, about = "Quasi-periodic response solutions of forced quasi-linear Airy equations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Overrides `seed` from the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub verbose: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Nash-Moser solve of the forced equation.
    Solve,
    /// Reduce a linear operator to constant coefficients.
    Reduce,
    /// Monte Carlo measure of the Diophantine set over a γ grid.
    Measure,
    /// Evaluate every non-resonance predicate at one ω.
    CheckOmega,
    /// Quick invariant checks.
    Selftest,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// 1 for bad input, 2 for numerical failure.
pub fn exit_code(e: &Error) -> i32 {
    match e.root() {
        Error::Config(_) | Error::InvalidInput(_) | Error::Io(_) | Error::Json(_) => 1,
        _ => 2,
    }
}

pub fn run(cli: &Cli) -> Result<i32> {
    if let Command::Selftest = cli.command {
        return Ok(selftest(cli.verbose));
    }
    let path = cli.config.as_ref().ok_or_else(|| Error::Config("--config PATH is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    std::fs::create_dir_all(&cli.out)?;
    match cli.command {
        Command::Solve => cmd_solve(&cfg, &cli.out, cli.verbose),
        Command::Reduce => cmd_reduce(&cfg, &cli.out, cli.verbose),
        Command::Measure => cmd_measure(&cfg, &cli.out),
        Command::CheckOmega => cmd_check_omega(&cfg, &cli.out),
        Command::Selftest => unreachable!(),
    }
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    std::fs::write(dir.join(name), text)?;
    Ok(())
}

fn write_json<T: Serialize>(dir: &Path, name: &str, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    write(dir, name, &s)
}

#[derive(Serialize)]
struct SolveOutput<'a> {
    command: &'static str,
    seed: u64,
    omega: &'a [f64],
    converged: bool,
    iterations: usize,
    final_residual: f64,
    residuals: &'a [f64],
    residual_grid_max: &'a [f64],
    failure: &'a Option<String>,
    steps: &'a [StepRecord],
}

pub fn cmd_solve(cfg: &RunConfig, out: &Path, verbose: bool) -> Result<i32> {
    let spec = cfg.problem_spec()?;
    let rep: SolveReport = solve(&spec, cfg.output.timings)?;
    if verbose {
        for (i, r) in rep.steps.iter().enumerate() {
            eprintln!(
                "step {i}: s_n={:.4} ‖f‖={:.3e} ‖h‖={:.3e} residual={:.3e} kam_steps={}",
                r.s_n,
                r.norm_f,
                r.norm_h,
                rep.residuals[i + 1],
                r.kam_steps
            );
        }
    }
    write_json(
        out,
        "report.json",
        &SolveOutput {
            command: "solve",
            seed: cfg.seed,
            omega: spec.omega.as_slice(),
            converged: rep.converged,
            iterations: rep.iterations,
            final_residual: rep.final_residual(),
            residuals: &rep.residuals,
            residual_grid_max: &rep.residual_grid_max,
            failure: &rep.failure,
            steps: &rep.steps,
        },
    )?;
    write(out, "trace.csv", &rep.trace_csv())?;
    write_json(out, "solution.json", &rep.solution)?;
    if rep.converged {
        println!("converged in {} steps, residual {:e}", rep.iterations, rep.final_residual());
        Ok(0)
    } else {
        println!(
            "not converged after {} steps, residual {:e}: {}",
            rep.iterations,
            rep.final_residual(),
            rep.failure.as_deref().unwrap_or("")
        );
        Ok(2)
    }
}

#[derive(Serialize)]
struct ReduceOutput<'a> {
    command: &'static str,
    omega: &'a [f64],
    converged: bool,
    window_diagonal_residual: Option<f64>,
    summary: ReductionSummary,
}

pub fn cmd_reduce(cfg: &RunConfig, out: &Path, verbose: bool) -> Result<i32> {
    let op = cfg.operator()?;
    let red = match reduce_operator(&op, &cfg.reduction()) {
        Ok(r) => r,
        Err(e) => {
            if let Error::SmallDivisor { .. } = e.root() {
                println!("Melnikov witness: {}", e.root());
            }
            return Err(e);
        }
    };
    if verbose {
        for s in &red.steps {
            eprintln!("kam step {}: ‖P‖={:.3e} margin={:.3e}", s.step, s.p_norm, s.min_margin);
        }
    }
    let window = cfg.operator.as_ref().and_then(|o| o.window);
    let (off, diag) = match window {
        Some(w) => {
            let (o, d) = red.diagonalization_residual(&op, &w)?;
            (Some(o), Some(d))
        }
        None => (None, None),
    };
    write_json(
        out,
        "report.json",
        &ReduceOutput {
            command: "reduce",
            omega: &op.omega,
            converged: red.converged(),
            window_diagonal_residual: diag,
            summary: red.summary(off),
        },
    )?;
    write(out, "trace.csv", &red.trace_csv())?;
    write(out, "omega_table.csv", &red.omega_table_csv())?;
    let off_text = off.map(|o| format!(", off-diagonal {o:e}")).unwrap_or_default();
    println!("{:?} after {} KAM steps, ‖P‖ = {:e}{off_text}", red.status, red.steps.len(), red.remainder_norm);
    Ok(if red.converged() { 0 } else { 2 })
}

#[derive(Serialize)]
struct MeasureRow {
    gamma: f64,
    estimate: MeasureEstimate,
    deficit: f64,
}

#[derive(Serialize)]
struct MeasureOutput {
    command: &'static str,
    seed: u64,
    m: usize,
    k: f64,
    rows: Vec<MeasureRow>,
}

pub fn cmd_measure(cfg: &RunConfig, out: &Path) -> Result<i32> {
    let ms = cfg.measure.as_ref().ok_or_else(|| Error::Config("missing key `measure`".into()))?;
    let lat = Lattice::new(LatticeParams::new(ms.eta, ms.m, ms.k))?;
    let mut rows = Vec::new();
    let mut csv = String::from("gamma,fraction,ci_low,ci_high,deficit\n");
    for &g in &ms.gammas {
        let est = measure_estimate(ms.m, ms.samples, cfg.seed, |w| Ok(in_dgamma(w, g, &lat)?.passed))?;
        let deficit = 1.0 - est.fraction;
        csv.push_str(&format!("{g:e},{:e},{:e},{:e},{deficit:e}\n", est.fraction, est.ci.0, est.ci.1));
        println!("γ = {g}: fraction {:.4} [{:.4}, {:.4}]", est.fraction, est.ci.0, est.ci.1);
        rows.push(MeasureRow {
            gamma: g,
            estimate: est,
            deficit,
        });
    }
    write_json(
        out,
        "report.json",
        &MeasureOutput {
            command: "measure",
            seed: cfg.seed,
            m: ms.m,
            k: ms.k,
            rows,
        },
    )?;
    write(out, "measure.csv", &csv)?;
    Ok(0)
}

#[derive(Serialize)]
struct CheckOutput<'a> {
    command: &'static str,
    omega: &'a [f64],
    in_dgamma: Membership,
    in_o0: Membership,
    first_melnikov: Membership,
    second_melnikov: Membership,
    triples: DivisorReport,
    diagonal: DivisorReport,
}

fn print_membership(name: &str, m: &Membership) {
    let status = if m.passed { "pass" } else { "FAIL" };
    let worst = m
        .worst
        .as_ref()
        .map(|w| format!("worst margin {:e} at ℓ={:?} j={} h={}", w.margin(), w.ell, w.j, w.h))
        .unwrap_or_else(|| "no cases".into());
    println!("{name}: {status}; {worst}");
    if let Some(w) = &m.violation {
        println!(
            "  witness: ℓ={:?} j={} h={} |divisor|={:e} floor={:e}",
            w.ell, w.j, w.h, w.value, w.floor
        );
    }
}

/// Unperturbed `Ω(j) = −λ₃j³ + λ₁j`, taken from `[operator]` when present.
pub fn cmd_check_omega(cfg: &RunConfig, out: &Path) -> Result<i32> {
    let lat = cfg.lattice()?;
    let jmax = cfg.truncation()?.jmax;
    let omega = cfg.omega()?;
    let w = omega.as_slice();
    let (l3, l1) = cfg.operator.as_ref().map_or((1.0, 0.0), |o| (o.lambda3, o.lambda1));
    let table = FrequencyTable::airy(jmax, l3, l1);
    let g0 = cfg.diophantine.gamma0;
    let gbar = cfg.diophantine.gbar;
    let rep = CheckOutput {
        command: "check-omega",
        omega: w,
        in_dgamma: in_dgamma(w, gbar, &lat)?,
        in_o0: in_o0(w, g0, &lat, jmax)?,
        first_melnikov: first_melnikov(w, &table, g0, &lat)?,
        second_melnikov: second_melnikov(w, &table, g0, gbar, &lat)?,
        triples: smallest_divisor_report(w, &table, &lat, ScanMode::Triples)?,
        diagonal: smallest_divisor_report(w, &table, &lat, ScanMode::Diagonal)?,
    };
    println!("ω = {w:?}");
    print_membership("D_γ̄", &rep.in_dgamma);
    print_membership("O0", &rep.in_o0);
    print_membership("first Melnikov", &rep.first_melnikov);
    print_membership("second Melnikov", &rep.second_melnikov);
    for r in [&rep.triples, &rep.diagonal] {
        println!("smallest weighted divisor ({:?}): {:?}", r.mode, r.min_weighted);
    }
    let ok = rep.in_dgamma.passed && rep.in_o0.passed && rep.first_melnikov.passed && rep.second_melnikov.passed;
    write_json(out, "report.json", &rep)?;
    Ok(if ok { 0 } else { 2 })
}

fn random_real(lat: &std::sync::Arc<Lattice>, jmax: usize, jtop: i64, rng: &mut ChaCha8Rng) -> Result<AnalyticFunction> {
    let mut entries = Vec::new();
    for l in lat.indices() {
        for j in 1..=jtop.min(jmax as i64) {
            entries.push((l.clone(), j, C::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))));
        }
    }
    AnalyticFunction::real_from_entries(lat, jmax, &entries)
}

fn check(cond: bool, what: String) -> Result<String> {
    if cond {
        Ok(what)
    } else {
        Err(Error::InvalidInput(what))
    }
}

fn suite_lattice() -> Result<String> {
    let lat = Lattice::new(LatticeParams::new(1.0, 3, 5.0))?;
    let mut bad = 0;
    for k in 0..lat.len() {
        let n = lat.neg_of(k);
        if lat.index(n) != &-lat.index(k) || lat.add_of(k, n) as usize != lat.zero() {
            bad += 1;
        }
    }
    check(bad == 0, format!("{} indices closed under negation", lat.len()))
}

fn suite_homological() -> Result<String> {
    let lat = Lattice::new(LatticeParams::new(1.0, 2, 6.0))?;
    let omega = [1.236_067_977_499_789_6, 1.732_050_807_568_877_2];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let f = random_real(&lat, 16, 16, &mut rng)?;
        let h = solve_l0(&f, &omega, 1e-3)?;
        let r = &(&h.om_dphi(&omega) + &h.dx(3)) + &f;
        worst = worst.max(r.norm(0.0) / f.norm(0.0));
    }
    check(worst <= 1e-12, format!("L0 h + f relative residual {worst:e}"))
}

fn suite_commutator() -> Result<String> {
    let lat = Lattice::new(LatticeParams::new(1.0, 1, 2.0))?;
    let jmax = 12;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g = random_real(&lat, jmax, 3, &mut rng)?;
    let (lead, r) = commutator_dx3_g(&g)?;
    let d3 = OperatorMatrix::diagonal(&lat, jmax, |j| C::new(0.0, -((j * j * j) as f64)));
    let gm = OperatorMatrix::multiplication(&g, -1);
    let brute = d3.compose(&gm).sub(&gm.compose(&d3));
    let closed = OperatorMatrix::multiplication(&lead, 1).add(&r);
    let diff = brute.sub(&closed).max_abs() / brute.max_abs();
    check(diff <= 1e-12, format!("[∂³, G] closed form relative mismatch {diff:e}"))
}

fn suite_round_trip() -> Result<String> {
    let lat = Lattice::new(LatticeParams::new(1.0, 1, 3.0))?;
    let jmax = 8;
    let omega = [1.37];
    let mut t = TransformationData::identity(&lat, jmax, &omega, 1.0, 0.0);
    t.alpha = AnalyticFunction::real_from_entries(&lat, jmax, &[(MultiIndex::unit(1, 1), 1, C::new(1e-3, 0.0))])?;
    t.alpha_tilde = crate::analytic::invert_x_diffeo(&t.alpha)?.tilde;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let u = random_real(&lat, jmax, 2, &mut rng)?.project_n(1.0);
    let opts = GridOptions::lenient();
    let back = apply_t_inverse(&t, &apply_t(&t, &u, &opts)?, &opts)?;
    let err = (&back - &u).max_abs() / u.max_abs();
    check(err <= 1e-8, format!("T⁻¹T u relative error {err:e}"))
}

fn suite_reduction() -> Result<String> {
    let lat = Lattice::new(LatticeParams::new(1.0, 1, 3.0))?;
    let z = AnalyticFunction::zeros(&lat, 8);
    let op = DifferentialOperator::new(1.0, z.add_constant(0.4), z, &[1.37]);
    let red = reduce_operator(&op, &ReductionParams::default())?;
    let f = red.frequencies();
    let worst = (1..=8).map(|j| (f.get(j) - (-((j * j * j) as f64) + 0.4 * j as f64)).abs()).fold(0.0, f64::max);
    check(red.converged() && worst == 0.0, format!("constant coefficients, Ω deviation {worst:e}"))
}

fn suite_measure() -> Result<String> {
    let lat = Lattice::new(LatticeParams::new(1.0, 2, 4.0))?;
    let run = || measure_estimate(2, 200, 9, |w| Ok(in_dgamma(w, 0.1, &lat)?.passed));
    let (a, b) = (run()?, run()?);
    check(a == b, format!("seeded measure fraction {} reproducible", a.fraction))
}

/// Runs each suite and prints a PASS/FAIL line; 0 when all pass.
pub fn selftest(verbose: bool) -> i32 {
    let suites: [(&str, fn() -> Result<String>); 6] = [
        ("lattice", suite_lattice),
        ("homological", suite_homological),
        ("commutator", suite_commutator),
        ("round-trip", suite_round_trip),
        ("reduction", suite_reduction),
        ("measure", suite_measure),
    ];
    let mut failed = 0;
    for (name, f) in suites {
        match f() {
            Ok(msg) => {
                println!("PASS {name}");
                if verbose {
                    println!("  {msg}");
                }
            }
            Err(e) => {
                failed += 1;
                println!("FAIL {name}: {e}");
            }
        }
    }
    if failed == 0 {
        0
    } else {
        2
    }
}
