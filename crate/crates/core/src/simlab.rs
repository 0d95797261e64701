//! Simulation study: a data-generating process with four correctness
//! scenarios, an oracle for the true effects, and a Monte Carlo engine.
//!
//! Covariates are `x ~ N(0, I_2)`. Each model is driven either by `x` itself
//! or by the distorted features
//!
//! ```text
//! z(x) = (x1 x2, (x1^2 - 1) / sqrt 2)
//! ```
//!
//! which have mean zero and unit variance but are invisible to the linear
//! working models the analyst fits on raw `x`. Scenario (i) drives every
//! model by `x`, (ii) distorts the propensities, (iii) distorts the outcome
//! means, (iv) distorts both.
//!
//! With `zp`, `zo` the propensity and outcome features:
//!
//! ```text
//! d      ~ Bernoulli(expit(a0 + a . zp))
//! t | d=1 ~ Bernoulli(expit(g0 + g . zp)),   t = 0 when d = 0
//! y0     = b0 + b . zo + e,   var(e) = exp(v_d0 + v_d1 x1)
//! y1     = y0 + c0 + c . zo
//! ```
//!
//! External `y0` can be shifted by `-shift * x1` to break mean
//! exchangeability. The trial and external error variances differ, so the
//! variance ratio `r(x)` is non-constant.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::{Mutex, OnceLock};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{CompositeDataset, Observation, OutcomeKind};
use crate::error::{Error, Result};
use crate::estimators::{efficiency_gain_analytic, estimate_with_influence, Estimand, Method};
use crate::inference::{if_variance, replicate_rng};
use crate::nuisance::{expit, fit_nuisances, fit_variance_ratio, NuisanceConfig, NuisanceSet, RatioMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scenario {
    /// Every working model correct.
    #[serde(rename = "i")]
    I,
    /// Outcome models correct, propensity models wrong.
    #[serde(rename = "ii")]
    II,
    /// Propensity models correct, outcome models wrong.
    #[serde(rename = "iii")]
    III,
    /// Both wrong.
    #[serde(rename = "iv")]
    IV,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::I, Scenario::II, Scenario::III, Scenario::IV];

    pub fn outcomes_correct(self) -> bool {
        matches!(self, Scenario::I | Scenario::II)
    }

    pub fn propensities_correct(self) -> bool {
        matches!(self, Scenario::I | Scenario::III)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::I => "i",
            Scenario::II => "ii",
            Scenario::III => "iii",
            Scenario::IV => "iv",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "i" | "1" => Ok(Scenario::I),
            "ii" | "2" => Ok(Scenario::II),
            "iii" | "3" => Ok(Scenario::III),
            "iv" | "4" => Ok(Scenario::IV),
            other => Err(Error::Config(format!("unknown scenario `{other}` (use i, ii, iii or iv)"))),
        }
    }
}

/// Coefficients of the data-generating process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpParams {
    pub selection_intercept: f64,
    pub selection_coef: [f64; 2],
    pub treatment_intercept: f64,
    pub treatment_coef: [f64; 2],
    pub outcome_intercept: f64,
    pub outcome_coef: [f64; 2],
    pub effect_intercept: f64,
    pub effect_coef: [f64; 2],
    /// `(a, b)` in `var(e | x, d=1) = exp(a + b x1)`.
    pub trial_log_variance: [f64; 2],
    pub external_log_variance: [f64; 2],
    /// External `y0` is lowered by `exchangeability_shift * x1`.
    pub exchangeability_shift: f64,
}

impl Default for DgpParams {
    fn default() -> Self {
        Self {
            selection_intercept: 0.0,
            selection_coef: [0.4, -0.4],
            treatment_intercept: 0.0,
            treatment_coef: [0.2, 0.2],
            outcome_intercept: 1.0,
            outcome_coef: [1.0, 0.5],
            effect_intercept: 1.0,
            effect_coef: [0.5, 0.0],
            trial_log_variance: [0.2, 0.2],
            external_log_variance: [0.4, -0.2],
            exchangeability_shift: 0.0,
        }
    }
}

impl DgpParams {
    /// Same process with no treatment effect.
    pub fn null_effect(&self) -> Self {
        Self {
            effect_intercept: 0.0,
            effect_coef: [0.0, 0.0],
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub n: usize,
    #[serde(default = "continuous")]
    pub outcome_kind: OutcomeKind,
    #[serde(default)]
    pub dgp: DgpParams,
    /// Working models; linear in raw `x` when absent.
    #[serde(default)]
    pub analyst: Option<NuisanceConfig>,
}

fn continuous() -> OutcomeKind {
    OutcomeKind::Continuous
}

impl ScenarioConfig {
    pub fn new(scenario: Scenario, n: usize) -> Self {
        Self {
            scenario,
            n,
            outcome_kind: OutcomeKind::Continuous,
            dgp: DgpParams::default(),
            analyst: None,
        }
    }

    pub fn analyst_config(&self) -> NuisanceConfig {
        self.analyst
            .clone()
            .unwrap_or_else(|| NuisanceConfig::linear(2, OutcomeKind::Continuous))
    }

    fn check(&self) -> Result<()> {
        if self.outcome_kind != OutcomeKind::Continuous {
            return Err(Error::Config("the simulation study uses a continuous outcome only".into()));
        }
        if self.n < 20 {
            return Err(Error::Config(format!("n = {} is too small to fit the working models", self.n)));
        }
        Ok(())
    }

    fn outcome_features(&self, x1: f64, x2: f64) -> [f64; 2] {
        if self.scenario.outcomes_correct() {
            [x1, x2]
        } else {
            distort(x1, x2)
        }
    }

    fn propensity_features(&self, x1: f64, x2: f64) -> [f64; 2] {
        if self.scenario.propensities_correct() {
            [x1, x2]
        } else {
            distort(x1, x2)
        }
    }

    /// True `P(D=1 | x)`.
    pub fn selection_probability(&self, x: &[f64]) -> f64 {
        let z = self.propensity_features(x[0], x[1]);
        let g = &self.dgp;
        expit(g.selection_intercept + g.selection_coef[0] * z[0] + g.selection_coef[1] * z[1])
    }

    /// True `E(Y1 - Y0 | x)`.
    pub fn conditional_effect(&self, x: &[f64]) -> f64 {
        let z = self.outcome_features(x[0], x[1]);
        let g = &self.dgp;
        g.effect_intercept + g.effect_coef[0] * z[0] + g.effect_coef[1] * z[1]
    }
}

fn distort(x1: f64, x2: f64) -> [f64; 2] {
    [x1 * x2, (x1 * x1 - 1.0) / std::f64::consts::SQRT_2]
}

/// Potential outcomes hidden from the analyst.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialOutcomes {
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
}

/// Draws one dataset from `rng`.
pub fn generate_with<R: Rng>(cfg: &ScenarioConfig, rng: &mut R) -> Result<(CompositeDataset, PotentialOutcomes)> {
    cfg.check()?;
    let g = &cfg.dgp;
    let mut rows = Vec::with_capacity(cfg.n);
    let mut y0s = Vec::with_capacity(cfg.n);
    let mut y1s = Vec::with_capacity(cfg.n);
    for _ in 0..cfg.n {
        let x1: f64 = rng.sample(StandardNormal);
        let x2: f64 = rng.sample(StandardNormal);
        let zp = cfg.propensity_features(x1, x2);
        let zo = cfg.outcome_features(x1, x2);
        let pi = expit(g.selection_intercept + g.selection_coef[0] * zp[0] + g.selection_coef[1] * zp[1]);
        let d = rng.random::<f64>() < pi;
        let p = expit(g.treatment_intercept + g.treatment_coef[0] * zp[0] + g.treatment_coef[1] * zp[1]);
        let u: f64 = rng.random();
        let t = d && u < p;
        let lv = if d { g.trial_log_variance } else { g.external_log_variance };
        let sd = ((lv[0] + lv[1] * x1) / 2.0).exp();
        let eps: f64 = rng.sample(StandardNormal);
        let mut y0 = g.outcome_intercept + g.outcome_coef[0] * zo[0] + g.outcome_coef[1] * zo[1] + sd * eps;
        if !d {
            y0 -= g.exchangeability_shift * x1;
        }
        let y1 = y0 + g.effect_intercept + g.effect_coef[0] * zo[0] + g.effect_coef[1] * zo[1];
        rows.push(Observation::new(if t { y1 } else { y0 }, vec![x1, x2], t, d));
        y0s.push(y0);
        y1s.push(y1);
    }
    let ds = CompositeDataset::new(rows, vec!["x1".into(), "x2".into()], Some(OutcomeKind::Continuous))?;
    Ok((ds, PotentialOutcomes { y0: y0s, y1: y1s }))
}

/// Draws one dataset; the same seed always gives the same data.
pub fn generate(cfg: &ScenarioConfig, seed: u64) -> Result<(CompositeDataset, PotentialOutcomes)> {
    generate_with(cfg, &mut replicate_rng(seed, 0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrueEffects {
    pub tau: f64,
    pub psi: f64,
    pub xi: f64,
    /// `P(D = 1)`.
    pub q: f64,
    pub tau_se: f64,
    pub psi_se: f64,
    pub xi_se: f64,
    pub draws: u64,
}

impl TrueEffects {
    pub fn get(&self, estimand: Estimand) -> f64 {
        match estimand {
            Estimand::Tau => self.tau,
            Estimand::Psi => self.psi,
            Estimand::Xi => self.xi,
        }
    }
}

pub const ORACLE_DRAWS: u64 = 10_000_000;
const ORACLE_SEED: u64 = 0x0ddc_0ffe_e5ee_d001;
const ORACLE_CHUNK: u64 = 100_000;

/// Oracle for the effects, integrating `pi(x) tau(x)` over `10^7` covariate
/// draws (the selection and outcome noise are integrated out exactly).
/// Results are cached per configuration.
pub fn true_effects(cfg: &ScenarioConfig) -> TrueEffects {
    static CACHE: OnceLock<Mutex<HashMap<String, TrueEffects>>> = OnceLock::new();
    let key = serde_json::to_string(&(cfg.scenario, &cfg.dgp)).expect("serializable");
    let cache = CACHE.get_or_init(Default::default);
    if let Some(t) = cache.lock().expect("cache lock").get(&key) {
        return *t;
    }
    let t = oracle(cfg, ORACLE_DRAWS);
    cache.lock().expect("cache lock").insert(key, t);
    t
}

fn oracle(cfg: &ScenarioConfig, draws: u64) -> TrueEffects {
    // per chunk: sum pi, sum pi tau, sum tau, sum (1 - pi) tau, and squares
    // for the linearised standard errors
    let chunks = draws.div_ceil(ORACLE_CHUNK);
    let parts: Vec<[f64; 9]> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = replicate_rng(ORACLE_SEED, c);
            let m = ORACLE_CHUNK.min(draws - c * ORACLE_CHUNK);
            let mut s = [0.0; 9];
            for _ in 0..m {
                let x = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
                let pi = cfg.selection_probability(&x);
                let tau = cfg.conditional_effect(&x);
                s[0] += pi;
                s[1] += pi * tau;
                s[2] += tau;
                s[3] += (1.0 - pi) * tau;
                s[4] += tau * tau;
                s[5] += pi * pi;
                s[6] += pi * pi * tau;
                s[7] += pi * pi * tau * tau;
                s[8] += pi * tau * tau;
            }
            s
        })
        .collect();
    let mut s = [0.0; 9];
    for p in &parts {
        for k in 0..9 {
            s[k] += p[k];
        }
    }
    let n = draws as f64;
    let m: Vec<f64> = s.iter().map(|v| v / n).collect();
    let q = m[0];
    let tau = m[1] / q;
    let psi = m[2];
    let xi = m[3] / (1.0 - q);
    // var of pi (tau(x) - tau) and (1 - pi)(tau(x) - xi)
    let v_tau = m[7] - 2.0 * tau * m[6] + tau * tau * m[5];
    let e_1mpi_sq = 1.0 - 2.0 * q + m[5];
    let e_1mpi_sq_t = m[2] - 2.0 * m[1] + m[6];
    let e_1mpi_sq_t2 = m[4] - 2.0 * m[8] + m[7];
    let v_xi = e_1mpi_sq_t2 - 2.0 * xi * e_1mpi_sq_t + xi * xi * e_1mpi_sq;
    let v_psi = m[4] - psi * psi;
    TrueEffects {
        tau,
        psi,
        xi,
        q,
        tau_se: (v_tau.max(0.0) / n).sqrt() / q,
        psi_se: (v_psi.max(0.0) / n).sqrt(),
        xi_se: (v_xi.max(0.0) / n).sqrt() / (1.0 - q),
        draws,
    }
}

/// Estimators tracked by the Monte Carlo engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorId {
    TauFull,
    /// Full-data `tau` with a constant variance ratio.
    TauFullConstant,
    TauTrial,
    PsiFull,
    PsiBaseline,
    XiFull,
    XiBaseline,
}

impl EstimatorId {
    pub const ALL: [EstimatorId; 7] = [
        EstimatorId::TauFull,
        EstimatorId::TauFullConstant,
        EstimatorId::TauTrial,
        EstimatorId::PsiFull,
        EstimatorId::PsiBaseline,
        EstimatorId::XiFull,
        EstimatorId::XiBaseline,
    ];

    pub fn estimand(self) -> Estimand {
        match self {
            EstimatorId::TauFull | EstimatorId::TauFullConstant | EstimatorId::TauTrial => Estimand::Tau,
            EstimatorId::PsiFull | EstimatorId::PsiBaseline => Estimand::Psi,
            EstimatorId::XiFull | EstimatorId::XiBaseline => Estimand::Xi,
        }
    }

    pub fn method(self) -> Method {
        match self {
            EstimatorId::TauTrial | EstimatorId::PsiBaseline | EstimatorId::XiBaseline => Method::TrialBased,
            _ => Method::FullData,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorId::TauFull => "tau_full",
            EstimatorId::TauFullConstant => "tau_full_constant",
            EstimatorId::TauTrial => "tau_trial",
            EstimatorId::PsiFull => "psi_full",
            EstimatorId::PsiBaseline => "psi_baseline",
            EstimatorId::XiFull => "xi_full",
            EstimatorId::XiBaseline => "xi_baseline",
        }
    }
}

impl FromStr for EstimatorId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EstimatorId::ALL
            .into_iter()
            .find(|e| e.as_str() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown estimator `{s}`")))
    }
}

/// Default number of retained draws (`reps x estimators`) kept in memory.
pub const DRAW_CAP: usize = 1_000_000;
const BATCH: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McOptions {
    pub reps: usize,
    pub master_seed: u64,
    /// Worker threads; `None` uses the global rayon pool.
    pub jobs: Option<usize>,
    pub estimators: Vec<EstimatorId>,
    pub level: f64,
    /// Keep every replicate's estimates (needed for boxplot export).
    pub retain_draws: bool,
    /// Retained draws kept in memory before spilling to `spill_path`.
    pub memory_cap: usize,
    pub spill_path: Option<PathBuf>,
    pub max_failure_rate: f64,
}

impl Default for McOptions {
    fn default() -> Self {
        Self {
            reps: 1000,
            master_seed: 1,
            jobs: None,
            estimators: vec![EstimatorId::TauFull, EstimatorId::TauFullConstant, EstimatorId::TauTrial],
            level: 0.95,
            retain_draws: false,
            memory_cap: DRAW_CAP,
            spill_path: None,
            max_failure_rate: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub estimator: EstimatorId,
    pub estimand: Estimand,
    pub method: Method,
    /// Successful replicates.
    pub reps: usize,
    pub truth: f64,
    pub mean_estimate: f64,
    pub mean_bias: f64,
    /// Monte Carlo standard deviation (divisor `reps`); absent for one
    /// replicate.
    pub sd: Option<f64>,
    pub mse: f64,
    pub coverage: f64,
    pub mean_variance_estimate: f64,
}

/// One retained estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Draw {
    pub replicate: usize,
    pub estimator: EstimatorId,
    pub estimate: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RawDraws {
    InMemory(Vec<Draw>),
    /// CSV with columns `replicate,estimator,estimate,variance`.
    OnDisk(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub scenario: Scenario,
    pub n: usize,
    pub reps: usize,
    pub master_seed: u64,
    pub failures: usize,
    pub truth: TrueEffects,
    pub summaries: Vec<McSummary>,
    /// Mean over replicates of the plug-in gain formula (per observation).
    pub mean_analytic_gain: Option<f64>,
    /// `n (var(tau_trial) - var(tau_full))` over replicates.
    pub empirical_gain: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub draws: Option<RawDraws>,
}

impl McReport {
    pub fn summary(&self, id: EstimatorId) -> Option<&McSummary> {
        self.summaries.iter().find(|s| s.estimator == id)
    }
}

struct ReplicateOutcome {
    values: Vec<(f64, f64)>,
    gain: Option<f64>,
}

fn run_replicate(cfg: &ScenarioConfig, analyst: &NuisanceConfig, ids: &[EstimatorId], seed: u64, index: usize) -> Result<ReplicateOutcome> {
    let mut rng = replicate_rng(seed, index as u64);
    let (ds, _) = generate_with(cfg, &mut rng)?;
    let full = fit_nuisances(&ds, analyst)?;
    let mut baseline: Option<NuisanceSet> = None;
    let mut constant: Option<NuisanceSet> = None;
    let mut values = Vec::with_capacity(ids.len());
    for &id in ids {
        let nuis = match id {
            EstimatorId::TauTrial | EstimatorId::PsiBaseline | EstimatorId::XiBaseline => {
                if baseline.is_none() {
                    baseline = Some(full.baseline(&ds, &analyst.glm)?);
                }
                baseline.as_ref().expect("set above")
            }
            EstimatorId::TauFullConstant => {
                if constant.is_none() {
                    let r = fit_variance_ratio(&ds, &full.m0, RatioMode::Constant, &analyst.ratio_spec, &analyst.glm)?;
                    constant = Some(full.with_ratio(r));
                }
                constant.as_ref().expect("set above")
            }
            _ => &full,
        };
        let (est, ifv) = estimate_with_influence(&ds, nuis, id.estimand(), id.method())?;
        values.push((est.point, if_variance(&ifv)));
    }
    let gain = if ids.contains(&EstimatorId::TauFull) && ids.contains(&EstimatorId::TauTrial) {
        Some(efficiency_gain_analytic(&ds, &full)?)
    } else {
        None
    };
    Ok(ReplicateOutcome { values, gain })
}

#[derive(Default, Clone)]
struct Acc {
    n: usize,
    sum: f64,
    sum_bias_sq: f64,
    covered: usize,
    sum_var: f64,
    estimates: Vec<f64>,
}

enum DrawSink {
    None,
    Memory(Vec<Draw>),
    Disk(PathBuf, std::io::BufWriter<std::fs::File>),
}

impl DrawSink {
    fn push(&mut self, draw: Draw, cap: usize, spill: &Option<PathBuf>) -> Result<()> {
        if let DrawSink::Memory(v) = self {
            if v.len() < cap {
                v.push(draw);
                return Ok(());
            }
            let path = spill.clone().ok_or_else(|| {
                Error::Config(format!("more than {cap} retained draws; set a spill path"))
            })?;
            let mut w = std::io::BufWriter::new(std::fs::File::create(&path)?);
            writeln!(w, "replicate,estimator,estimate,variance")?;
            for d in v.drain(..) {
                writeln!(w, "{},{},{},{}", d.replicate, d.estimator.as_str(), d.estimate, d.variance)?;
            }
            *self = DrawSink::Disk(path, w);
        }
        if let DrawSink::Disk(_, w) = self {
            writeln!(w, "{},{},{},{}", draw.replicate, draw.estimator.as_str(), draw.estimate, draw.variance)?;
        }
        Ok(())
    }

    fn finish(self) -> Result<Option<RawDraws>> {
        Ok(match self {
            DrawSink::None => None,
            DrawSink::Memory(v) => Some(RawDraws::InMemory(v)),
            DrawSink::Disk(path, mut w) => {
                w.flush()?;
                Some(RawDraws::OnDisk(path))
            }
        })
    }
}

/// Runs `opts.reps` replicates of `cfg` and summarises each estimator
/// against the oracle truth. Output is identical for any `jobs` value.
pub fn run_monte_carlo(cfg: &ScenarioConfig, opts: &McOptions) -> Result<McReport> {
    cfg.check()?;
    if opts.reps == 0 {
        return Err(Error::Config("reps must be at least 1".into()));
    }
    if opts.estimators.is_empty() {
        return Err(Error::Config("no estimators requested".into()));
    }
    let pool = match opts.jobs {
        Some(j) => Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(j.max(1))
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?,
        ),
        None => None,
    };
    let run = || run_inner(cfg, opts);
    match pool {
        Some(p) => p.install(run),
        None => run(),
    }
}

fn run_inner(cfg: &ScenarioConfig, opts: &McOptions) -> Result<McReport> {
    let truth = true_effects(cfg);
    let analyst = cfg.analyst_config();
    let ids = &opts.estimators;
    let z = statrs_quantile(opts.level);
    let mut accs = vec![Acc::default(); ids.len()];
    let mut gains = Vec::new();
    let mut failures = 0usize;
    let mut sink = if opts.retain_draws {
        DrawSink::Memory(Vec::new())
    } else {
        DrawSink::None
    };

    let mut start = 0;
    while start < opts.reps {
        let end = (start + BATCH).min(opts.reps);
        let batch: Vec<Result<ReplicateOutcome>> = (start..end)
            .into_par_iter()
            .map(|i| run_replicate(cfg, &analyst, ids, opts.master_seed, i))
            .collect();
        for (offset, out) in batch.into_iter().enumerate() {
            let rep = start + offset;
            match out {
                Ok(o) => {
                    for (k, (&id, &(est, var))) in ids.iter().zip(&o.values).enumerate() {
                        let th = truth.get(id.estimand());
                        let a = &mut accs[k];
                        a.n += 1;
                        a.sum += est;
                        a.sum_bias_sq += (est - th).powi(2);
                        a.sum_var += var;
                        if (est - th).abs() <= z * var.sqrt() {
                            a.covered += 1;
                        }
                        a.estimates.push(est);
                        sink.push(
                            Draw {
                                replicate: rep,
                                estimator: id,
                                estimate: est,
                                variance: var,
                            },
                            opts.memory_cap,
                            &opts.spill_path,
                        )?;
                    }
                    if let Some(g) = o.gain {
                        gains.push(g);
                    }
                }
                Err(e) => {
                    log::warn!("scenario {} replicate {rep} failed: {e}", cfg.scenario);
                    failures += 1;
                }
            }
        }
        start = end;
    }
    if failures as f64 > opts.max_failure_rate * opts.reps as f64 || failures == opts.reps {
        return Err(Error::TooManyFailures {
            failed: failures,
            total: opts.reps,
        });
    }

    let summaries: Vec<McSummary> = ids
        .iter()
        .zip(&accs)
        .map(|(&id, a)| {
            let m = a.n as f64;
            let th = truth.get(id.estimand());
            let mean = a.sum / m;
            let sd = (a.n >= 2).then(|| (a.estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / m).sqrt());
            McSummary {
                estimator: id,
                estimand: id.estimand(),
                method: id.method(),
                reps: a.n,
                truth: th,
                mean_estimate: mean,
                mean_bias: mean - th,
                sd,
                mse: a.sum_bias_sq / m,
                coverage: a.covered as f64 / m,
                mean_variance_estimate: a.sum_var / m,
            }
        })
        .collect();

    let empirical_gain = {
        let sd_of = |id| summaries.iter().find(|s| s.estimator == id).and_then(|s| s.sd);
        match (sd_of(EstimatorId::TauTrial), sd_of(EstimatorId::TauFull)) {
            (Some(a), Some(b)) => Some((a * a - b * b) * cfg.n as f64),
            _ => None,
        }
    };
    Ok(McReport {
        scenario: cfg.scenario,
        n: cfg.n,
        reps: opts.reps,
        master_seed: opts.master_seed,
        failures,
        truth,
        summaries,
        mean_analytic_gain: (!gains.is_empty()).then(|| gains.iter().sum::<f64>() / gains.len() as f64),
        empirical_gain,
        draws: sink.finish()?,
    })
}

fn statrs_quantile(level: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    Normal::new(0.0, 1.0).expect("valid normal").inverse_cdf(0.5 + level / 2.0)
}

/// Full-data `tau` with the variance ratio forced to a constant, even though
/// the process is heteroscedastic.
pub fn constant_ratio_variant(cfg: &ScenarioConfig, reps: usize, seed: u64) -> Result<McSummary> {
    let opts = McOptions {
        reps,
        master_seed: seed,
        estimators: vec![EstimatorId::TauFullConstant],
        ..McOptions::default()
    };
    let report = run_monte_carlo(cfg, &opts)?;
    Ok(report.summaries.into_iter().next().expect("one estimator requested"))
}

/// Long-format CSV `scenario,estimator,replicate,bias` of every retained
/// draw.
pub fn export_boxplot_data<W: Write>(reports: &[McReport], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["scenario", "estimator", "replicate", "bias"])?;
    for report in reports {
        let truth = |id: EstimatorId| report.truth.get(id.estimand());
        let mut emit = |rep: usize, id: EstimatorId, est: f64| {
            w.write_record([
                report.scenario.as_str().to_string(),
                id.as_str().to_string(),
                rep.to_string(),
                (est - truth(id)).to_string(),
            ])
        };
        match &report.draws {
            Some(RawDraws::InMemory(draws)) => {
                for d in draws {
                    emit(d.replicate, d.estimator, d.estimate)?;
                }
            }
            Some(RawDraws::OnDisk(path)) => {
                let mut r = csv::Reader::from_path(path)?;
                for rec in r.records() {
                    let rec = rec?;
                    let parse = |i: usize| rec.get(i).unwrap_or_default().to_string();
                    let rep: usize = parse(0).parse().map_err(|_| Error::Numeric("bad spill file".into()))?;
                    let id: EstimatorId = parse(1).parse()?;
                    let est: f64 = parse(2).parse().map_err(|_| Error::Numeric("bad spill file".into()))?;
                    emit(rep, id, est)?;
                }
            }
            None => {
                return Err(Error::Config(format!(
                    "scenario {} was run without retained draws",
                    report.scenario
                )))
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Text table with bias, standard deviation, MSE and coverage per
/// estimator.
pub fn render_mc_table(reports: &[McReport]) -> String {
    let mut out = format!(
        "{:<9} {:<18} {:>9} {:>9} {:>9} {:>9} {:>9}\n",
        "scenario", "estimator", "bias", "sd", "mse", "mean var", "coverage"
    );
    for r in reports {
        for s in &r.summaries {
            out.push_str(&format!(
                "{:<9} {:<18} {:>9.4} {:>9} {:>9.5} {:>9.5} {:>9.3}\n",
                r.scenario.as_str(),
                s.estimator.as_str(),
                s.mean_bias,
                s.sd.map_or("-".to_string(), |v| format!("{v:.4}")),
                s.mse,
                s.mean_variance_estimate,
                s.coverage
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenario_parsing() {
        assert_eq!("iii".parse::<Scenario>().unwrap(), Scenario::III);
        assert_eq!("4".parse::<Scenario>().unwrap(), Scenario::IV);
        assert!("v".parse::<Scenario>().is_err());
        assert_eq!(serde_json::to_string(&Scenario::II).unwrap(), "\"ii\"");
    }

    #[test]
    fn distortion_is_standardised() {
        // E z = 0, var z = 1 for x ~ N(0, I)
        let mut rng = replicate_rng(3, 0);
        let m = 200_000;
        let mut s = [0.0; 4];
        for _ in 0..m {
            let z = distort(rng.sample(StandardNormal), rng.sample(StandardNormal));
            s[0] += z[0];
            s[1] += z[1];
            s[2] += z[0] * z[0];
            s[3] += z[1] * z[1];
        }
        let m = m as f64;
        assert!((s[0] / m).abs() < 0.02 && (s[1] / m).abs() < 0.02);
        assert!((s[2] / m - 1.0).abs() < 0.03 && (s[3] / m - 1.0).abs() < 0.03);
    }

    #[test]
    fn masking_and_structure() {
        let cfg = ScenarioConfig::new(Scenario::I, 500);
        let (ds, po) = generate(&cfg, 9).unwrap();
        for (i, r) in ds.rows().iter().enumerate() {
            assert!(r.d || !r.t);
            let expect = if r.t { po.y1[i] } else { po.y0[i] };
            assert_eq!(r.y, expect);
        }
        let (again, _) = generate(&cfg, 9).unwrap();
        assert_eq!(ds, again);
    }

    #[test]
    fn small_oracle_is_consistent() {
        let cfg = ScenarioConfig::new(Scenario::III, 100);
        let t = oracle(&cfg, 200_000);
        assert!((t.psi - (t.q * t.tau + (1.0 - t.q) * t.xi)).abs() < 1e-9);
        let zero = ScenarioConfig {
            dgp: cfg.dgp.null_effect(),
            ..cfg
        };
        let z = oracle(&zero, 10_000);
        assert_eq!((z.tau, z.psi, z.xi), (0.0, 0.0, 0.0));
    }
}
