//! Run configuration (TOML). See `fixtures/` for complete examples.

use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64 as C;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analytic::AnalyticFunction;
use crate::conjugation::Window;
use crate::error::{Error, Result};
use crate::grid::GridOptions;
use crate::lattice::{Lattice, LatticeParams, MultiIndex};
use crate::nashmoser::ProblemSpec;
use crate::opalg::DifferentialOperator;
use crate::reducibility::ReductionParams;
use crate::smalldiv::{in_o0, DiophantineParams, FrequencyVector};

/// How many draws `sample_omega` makes before giving up.
pub const OMEGA_DRAWS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Drawn from `U([1,2]^M)` (restricted to `O⁽⁰⁾`) when absent.
    pub omega: Option<Vec<f64>>,
    pub truncation: Option<Truncation>,
    #[serde(default)]
    pub diophantine: Diophantine,
    #[serde(default)]
    pub schedule: Schedule,
    pub problem: Option<Problem>,
    pub operator: Option<Operator>,
    pub measure: Option<Measure>,
    #[serde(default)]
    pub output: Output,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Truncation {
    #[serde(default = "one")]
    pub eta: f64,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "K")]
    pub k: f64,
    pub jmax: usize,
    #[serde(default = "two")]
    pub oversample: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Diophantine {
    pub gamma0: f64,
    pub gbar: f64,
}

impl Default for Diophantine {
    fn default() -> Self {
        Self { gamma0: 1e-3, gbar: 4e-3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub n0: f64,
    pub stop_tol: f64,
    pub kam_max_steps: usize,
    pub max_iters: usize,
    pub residual_target: f64,
    pub identity_tol: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        let r = ReductionParams::default();
        Self {
            n0: r.n0,
            stop_tol: r.stop_tol,
            kam_max_steps: r.max_steps,
            max_iters: 6,
            residual_target: 1e-10,
            identity_tol: 1e-8,
        }
    }
}

/// One Fourier entry `(ℓ, j, re + i·im)`; the conjugate mode is implied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entry {
    #[serde(default)]
    pub l: Vec<(usize, i64)>,
    pub j: i64,
    #[serde(default)]
    pub re: f64,
    #[serde(default)]
    pub im: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Problem {
    /// `[c₀, c₁, c₂, c₃]`.
    pub c: [f64; 4],
    #[serde(rename = "S", default = "one")]
    pub s_big: f64,
    #[serde(default)]
    pub s_bar: f64,
    #[serde(default)]
    pub forcing: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Operator {
    #[serde(default = "one")]
    pub lambda3: f64,
    /// Constant part of `B`.
    #[serde(default)]
    pub lambda1: f64,
    #[serde(default)]
    pub b: Vec<Entry>,
    #[serde(default)]
    pub c: Vec<Entry>,
    /// Where the off-diagonal residual of `M⁻¹LM` is measured.
    pub window: Option<Window>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Measure {
    #[serde(default = "one")]
    pub eta: f64,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "K")]
    pub k: f64,
    pub samples: usize,
    pub gammas: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Output {
    /// Wall-clock columns; off by default so outputs are byte-reproducible.
    pub timings: bool,
}

fn one() -> f64 {
    1.0
}

fn two() -> usize {
    2
}

fn missing(key: &str) -> Error {
    Error::Config(format!("missing key `{key}`"))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn validate(&self) -> Result<()> {
        let d = &self.diophantine;
        if !(d.gamma0 > 0.0 && d.gamma0 < 1.0) {
            return Err(Error::Config(format!("diophantine.gamma0 = {} not in (0,1)", d.gamma0)));
        }
        if let Some(t) = &self.truncation {
            if !(t.eta > 0.0) {
                return Err(Error::Config(format!("truncation.eta = {} must be > 0", t.eta)));
            }
            if t.jmax == 0 || t.oversample == 0 {
                return Err(Error::Config("truncation.jmax and truncation.oversample must be ≥ 1".into()));
            }
        }
        if let Some(p) = &self.problem {
            if !(p.s_big > p.s_bar && p.s_bar >= 0.0) {
                return Err(Error::Config(format!("need S > s_bar ≥ 0, got S = {}, s_bar = {}", p.s_big, p.s_bar)));
            }
        }
        if let Some(m) = &self.measure {
            if !(m.eta > 0.0) {
                return Err(Error::Config(format!("measure.eta = {} must be > 0", m.eta)));
            }
            if m.gammas.is_empty() {
                return Err(Error::Config("measure.gammas is empty".into()));
            }
        }
        Ok(())
    }

    pub fn truncation(&self) -> Result<&Truncation> {
        self.truncation.as_ref().ok_or_else(|| missing("truncation"))
    }

    pub fn lattice(&self) -> Result<Arc<Lattice>> {
        let t = self.truncation()?;
        Lattice::new(LatticeParams::new(t.eta, t.m, t.k))
    }

    pub fn grid(&self) -> Result<GridOptions> {
        Ok(GridOptions {
            oversample: self.truncation()?.oversample,
            ..GridOptions::default()
        })
    }

    pub fn diophantine(&self) -> Result<DiophantineParams> {
        DiophantineParams::new(self.diophantine.gamma0, self.diophantine.gbar)
    }

    pub fn reduction(&self) -> ReductionParams {
        ReductionParams {
            gamma: self.diophantine.gamma0,
            gbar: self.diophantine.gbar,
            n0: self.schedule.n0,
            stop_tol: self.schedule.stop_tol,
            max_steps: self.schedule.kam_max_steps,
            timings: self.output.timings,
            ..ReductionParams::default()
        }
    }

    /// The configured `ω`, or the first seeded draw in `O⁽⁰⁾`.
    pub fn omega(&self) -> Result<FrequencyVector> {
        if let Some(w) = &self.omega {
            let m = self.truncation()?.m;
            if w.len() != m {
                return Err(Error::Config(format!("omega has {} entries but M = {m}", w.len())));
            }
            return FrequencyVector::new(w.clone()).map_err(|e| Error::Config(e.to_string()));
        }
        let t = self.truncation()?;
        let lat = self.lattice()?;
        sample_omega(t.m, self.seed, |w| Ok(in_o0(w, self.diophantine.gamma0, &lat, t.jmax)?.passed))
    }

    pub fn problem_spec(&self) -> Result<ProblemSpec> {
        let p = self.problem.as_ref().ok_or_else(|| missing("problem"))?;
        let t = self.truncation()?;
        let lat = self.lattice()?;
        let forcing = entries_to_function(&lat, t.jmax, &p.forcing, "problem.forcing")?;
        let mut spec = ProblemSpec::new(p.c, forcing, self.omega()?)?;
        spec.s_big = p.s_big;
        spec.s_bar = p.s_bar;
        spec.diophantine = self.diophantine()?;
        spec.reduction = self.reduction();
        spec.grid = self.grid()?;
        spec.residual_target = self.schedule.residual_target;
        spec.max_iters = self.schedule.max_iters;
        spec.identity_tol = self.schedule.identity_tol;
        spec.validate()?;
        Ok(spec)
    }

    pub fn operator(&self) -> Result<DifferentialOperator> {
        let o = self.operator.as_ref().ok_or_else(|| missing("operator"))?;
        let t = self.truncation()?;
        let lat = self.lattice()?;
        let b = entries_to_function(&lat, t.jmax, &o.b, "operator.b")?.add_constant(o.lambda1);
        let c = entries_to_function(&lat, t.jmax, &o.c, "operator.c")?;
        Ok(DifferentialOperator::new(o.lambda3, b, c, self.omega()?.as_slice()))
    }
}

/// Real-on-real function from half-spectrum entries.
pub fn entries_to_function(lat: &Arc<Lattice>, jmax: usize, entries: &[Entry], key: &str) -> Result<AnalyticFunction> {
    let mut raw = Vec::with_capacity(entries.len());
    for e in entries {
        let l = MultiIndex::from_pairs(&e.l).map_err(|err| Error::Config(format!("{key}: {err}")))?;
        raw.push((l, e.j, C::new(e.re, e.im)));
    }
    AnalyticFunction::real_from_entries(lat, jmax, &raw).map_err(|err| Error::Config(format!("{key}: {err}")))
}

/// First `ω ~ U([1,2]^m)` from the seeded stream accepted by `pred`.
pub fn sample_omega(m: usize, seed: u64, mut pred: impl FnMut(&[f64]) -> Result<bool>) -> Result<FrequencyVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = vec![0.0; m];
    for _ in 0..OMEGA_DRAWS {
        for x in w.iter_mut() {
            *x = rng.gen_range(1.0..=2.0);
        }
        if pred(&w)? {
            return FrequencyVector::new(w);
        }
    }
    Err(Error::InvalidInput(format!("no admissible ω in {OMEGA_DRAWS} draws (seed {seed})")))
}
