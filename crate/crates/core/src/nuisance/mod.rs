//! Working models for the nuisance functions.
//!
//! Four regressions feed every estimator: the arm-specific outcome means
//! `m1(x)` and `m0(x)`, the treatment propensity `p(x) = pr(T=1 | x, D=1)`,
//! the selection propensity `pi(x) = pr(D=1 | x)`, and the variance ratio
//! `r(x) = var(Y0 | x, D=1) / var(Y0 | x, D=0)`. All are parametric GLMs over
//! a configurable covariate transform ([`ModelSpec`]).

pub mod glm;
pub mod spec;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use glm::{coefficient_covariance, expit, fit_glm, mean_score, Design, GlmFit, GlmOptions};
pub use spec::{Family, ModelSpec, Term};

use crate::dataset::{CompositeDataset, Observation, OutcomeKind};
use crate::error::{Error, Result};

/// Propensity predictions are clipped into `[TRIM_EPS, 1 - TRIM_EPS]`.
pub const TRIM_EPS: f64 = 1e-3;
/// Floor added inside `log(residual^2 + VAR_FLOOR)`.
pub const VAR_FLOOR: f64 = 1e-8;

/// A fitted working model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedGLM {
    pub spec: ModelSpec,
    pub coef: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub loglik: f64,
    pub n_obs: usize,
}

impl FittedGLM {
    pub fn linear_predictor(&self, x: &[f64]) -> f64 {
        self.spec
            .design_row(x)
            .iter()
            .zip(&self.coef)
            .map(|(a, b)| a * b)
            .sum()
    }

    /// Prediction on the response scale, untrimmed.
    pub fn predict(&self, x: &[f64]) -> f64 {
        let eta = self.linear_predictor(x);
        match self.spec.family {
            Family::Gaussian => eta,
            Family::Binomial => expit(eta),
        }
    }

    /// Probability prediction clipped into `[eps, 1 - eps]`; bumps `counter`
    /// when clipping happens.
    pub fn predict_trimmed(&self, x: &[f64], eps: f64, counter: &mut usize) -> f64 {
        trim_probability(self.predict(x), eps, counter)
    }
}

pub fn trim_probability(p: f64, eps: f64, counter: &mut usize) -> f64 {
    if p < eps {
        *counter += 1;
        eps
    } else if p > 1.0 - eps {
        *counter += 1;
        1.0 - eps
    } else {
        p
    }
}

pub fn design_for<'a>(
    spec: &ModelSpec,
    rows: impl Iterator<Item = &'a Observation>,
    names: &[String],
) -> Design {
    let rows: Vec<Vec<f64>> = rows.map(|r| spec.design_row(&r.x)).collect();
    Design::from_rows(&rows, spec.column_names(names))
}

/// Fits `spec` on the rows selected by `keep`, with `response` giving the
/// regression target for each row.
pub fn fit_on<F, R>(
    ds: &CompositeDataset,
    spec: &ModelSpec,
    opts: &GlmOptions,
    keep: F,
    response: R,
) -> Result<FittedGLM>
where
    F: Fn(&Observation) -> bool,
    R: Fn(&Observation) -> f64,
{
    spec.check(ds.n_covariates())?;
    let rows: Vec<&Observation> = ds.rows().iter().filter(|r| keep(r)).collect();
    let design = design_for(spec, rows.iter().copied(), ds.covariate_names());
    let y: Vec<f64> = rows.iter().map(|r| response(r)).collect();
    let fit = fit_glm(&design, &y, spec.family, None, opts)?;
    Ok(FittedGLM {
        spec: spec.clone(),
        coef: fit.coef,
        converged: fit.converged,
        iterations: fit.iterations,
        loglik: fit.loglik,
        n_obs: rows.len(),
    })
}

fn require(count: usize, what: &str) -> Result<()> {
    if count == 0 {
        Err(Error::EmptyCell(what.to_string()))
    } else {
        Ok(())
    }
}

/// `m1` on treated trial rows.
pub fn fit_treated_outcome(
    ds: &CompositeDataset,
    spec: &ModelSpec,
    opts: &GlmOptions,
) -> Result<FittedGLM> {
    require(
        ds.rows().iter().filter(|r| r.d && r.t).count(),
        "no treated trial units (d=1, t=1)",
    )?;
    fit_on(ds, spec, opts, |r| r.d && r.t, |r| r.y)
}

/// `m0` on all controls when `pool_controls`, otherwise on trial controls.
pub fn fit_control_outcome(
    ds: &CompositeDataset,
    spec: &ModelSpec,
    pool_controls: bool,
    opts: &GlmOptions,
) -> Result<FittedGLM> {
    let keep = |r: &Observation| !r.t && (pool_controls || r.d);
    require(
        ds.rows().iter().filter(|r| keep(r)).count(),
        if pool_controls {
            "no control units (t=0)"
        } else {
            "no trial control units (d=1, t=0)"
        },
    )?;
    fit_on(ds, spec, opts, keep, |r| r.y)
}

pub fn fit_outcome_models(
    ds: &CompositeDataset,
    spec1: &ModelSpec,
    spec0: &ModelSpec,
    pool_controls: bool,
    opts: &GlmOptions,
) -> Result<(FittedGLM, FittedGLM)> {
    Ok((
        fit_treated_outcome(ds, spec1, opts)?,
        fit_control_outcome(ds, spec0, pool_controls, opts)?,
    ))
}

/// Logit of `t` on trial rows.
pub fn fit_treatment_ps(
    ds: &CompositeDataset,
    spec: &ModelSpec,
    opts: &GlmOptions,
) -> Result<FittedGLM> {
    let treated = ds.rows().iter().filter(|r| r.d && r.t).count();
    require(treated, "no treated trial units (d=1, t=1)")?;
    require(
        ds.n1() - treated,
        "no trial controls (d=1, t=0); use treated-only mode",
    )?;
    fit_on(ds, &spec.with_family(Family::Binomial), opts, |r| r.d, |r| f64::from(u8::from(r.t)))
}

/// Logit of `d` on all rows.
pub fn fit_selection_ps(
    ds: &CompositeDataset,
    spec: &ModelSpec,
    opts: &GlmOptions,
) -> Result<FittedGLM> {
    if ds.n2() == 0 {
        return Err(Error::EmptyCell("no external rows (d=0)".into()));
    }
    fit_on(ds, &spec.with_family(Family::Binomial), opts, |_| true, |r| f64::from(u8::from(r.d)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioMode {
    KnownOne,
    Constant,
    Loglinear,
    /// External controls get zero weight; turns the full-data estimators into
    /// their trial-only comparators.
    Zero,
}

/// Working model for `r(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum VarianceRatioModel {
    KnownOne,
    Zero,
    Constant {
        ratio: f64,
        /// Mean squared control residual among trial controls.
        trial_variance: f64,
    },
    /// `r(x) = exp(f1(x) - f0(x))`, with `f_d` the least-squares fit of
    /// `log(residual^2 + floor)` in source group `d`.
    Loglinear {
        spec: ModelSpec,
        trial: Vec<f64>,
        external: Vec<f64>,
        /// Multiplier turning `exp(f1(x))` into a variance (smearing).
        trial_smearing: f64,
    },
}

impl VarianceRatioModel {
    pub fn mode(&self) -> RatioMode {
        match self {
            Self::KnownOne => RatioMode::KnownOne,
            Self::Zero => RatioMode::Zero,
            Self::Constant { .. } => RatioMode::Constant,
            Self::Loglinear { .. } => RatioMode::Loglinear,
        }
    }

    pub fn ratio(&self, x: &[f64]) -> f64 {
        match self {
            Self::KnownOne => 1.0,
            Self::Zero => 0.0,
            Self::Constant { ratio, .. } => *ratio,
            Self::Loglinear {
                spec,
                trial,
                external,
                ..
            } => {
                let row = spec.design_row(x);
                let f1: f64 = row.iter().zip(trial).map(|(a, b)| a * b).sum();
                let f0: f64 = row.iter().zip(external).map(|(a, b)| a * b).sum();
                (f1 - f0).exp()
            }
        }
    }

    /// Estimated `var(Y0 | x, D=1)` for continuous outcomes, when the model
    /// carries one.
    pub fn trial_variance(&self, x: &[f64]) -> Option<f64> {
        match self {
            Self::Constant { trial_variance, .. } => Some(*trial_variance),
            Self::Loglinear {
                spec,
                trial,
                trial_smearing,
                ..
            } => {
                let f1: f64 = spec.design_row(x).iter().zip(trial).map(|(a, b)| a * b).sum();
                Some(trial_smearing * f1.exp())
            }
            Self::KnownOne | Self::Zero => None,
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            Self::KnownOne | Self::Zero => Vec::new(),
            Self::Constant { ratio, .. } => vec![*ratio],
            Self::Loglinear {
                trial, external, ..
            } => trial.iter().chain(external).copied().collect(),
        }
    }
}

/// Fits the variance ratio from squared residuals of `m0`.
pub fn fit_variance_ratio(
    ds: &CompositeDataset,
    m0: &FittedGLM,
    mode: RatioMode,
    spec: &ModelSpec,
    opts: &GlmOptions,
) -> Result<VarianceRatioModel> {
    match mode {
        RatioMode::KnownOne => return Ok(VarianceRatioModel::KnownOne),
        RatioMode::Zero => return Ok(VarianceRatioModel::Zero),
        _ => {}
    }
    let trial_ctrl = |r: &Observation| r.d && !r.t;
    let external = |r: &Observation| !r.d;
    let sq_resid = |keep: &dyn Fn(&Observation) -> bool| -> Vec<f64> {
        ds.rows()
            .iter()
            .filter(|r| keep(r))
            .map(|r| (r.y - m0.predict(&r.x)).powi(2))
            .collect()
    };
    let s1 = sq_resid(&trial_ctrl);
    let s0 = sq_resid(&external);
    if s1.len() < 2 {
        return Err(Error::EmptyCell("fewer than two trial controls for the variance ratio".into()));
    }
    if s0.len() < 2 {
        return Err(Error::EmptyCell("fewer than two external controls for the variance ratio".into()));
    }
    if s1.iter().all(|&v| v < VAR_FLOOR) {
        return Err(Error::DegenerateVariance("trial controls".into()));
    }
    if s0.iter().all(|&v| v < VAR_FLOOR) {
        return Err(Error::DegenerateVariance("external controls".into()));
    }

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    match mode {
        RatioMode::Constant => {
            let (v1, v0) = (mean(&s1), mean(&s0));
            Ok(VarianceRatioModel::Constant {
                ratio: v1 / v0,
                trial_variance: v1,
            })
        }
        RatioMode::Loglinear => {
            let spec = spec.with_family(Family::Gaussian);
            let log_target = |r: &Observation| ((r.y - m0.predict(&r.x)).powi(2) + VAR_FLOOR).ln();
            let f1 = fit_on(ds, &spec, opts, trial_ctrl, log_target)?;
            let f0 = fit_on(ds, &spec, opts, external, log_target)?;
            let smear = ds
                .rows()
                .iter()
                .filter(|r| trial_ctrl(r))
                .zip(&s1)
                .map(|(r, s)| s / f1.linear_predictor(&r.x).exp())
                .sum::<f64>()
                / s1.len() as f64;
            Ok(VarianceRatioModel::Loglinear {
                spec,
                trial: f1.coef,
                external: f0.coef,
                trial_smearing: smear,
            })
        }
        RatioMode::KnownOne | RatioMode::Zero => unreachable!(),
    }
}

/// Everything needed to fit a [`NuisanceSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NuisanceConfig {
    pub m1: ModelSpec,
    pub m0: ModelSpec,
    pub p: ModelSpec,
    pub pi: ModelSpec,
    pub ratio_mode: RatioMode,
    pub ratio_spec: ModelSpec,
    pub pool_controls: bool,
    pub treated_only: bool,
    pub trim_eps: f64,
    pub glm: GlmOptions,
}

impl NuisanceConfig {
    /// Linear specs in every covariate; outcome family follows the outcome
    /// kind, and binary outcomes get `r = 1`.
    pub fn linear(n_covariates: usize, kind: OutcomeKind) -> Self {
        let outcome_family = match kind {
            OutcomeKind::Binary => Family::Binomial,
            OutcomeKind::Continuous => Family::Gaussian,
        };
        Self {
            m1: ModelSpec::linear(outcome_family, n_covariates),
            m0: ModelSpec::linear(outcome_family, n_covariates),
            p: ModelSpec::linear(Family::Binomial, n_covariates),
            pi: ModelSpec::linear(Family::Binomial, n_covariates),
            ratio_mode: match kind {
                OutcomeKind::Binary => RatioMode::KnownOne,
                OutcomeKind::Continuous => RatioMode::Loglinear,
            },
            ratio_spec: ModelSpec::linear(Family::Gaussian, n_covariates),
            pool_controls: true,
            treated_only: false,
            trim_eps: TRIM_EPS,
            glm: GlmOptions::default(),
        }
    }

    pub fn for_dataset(ds: &CompositeDataset) -> Self {
        Self::linear(ds.n_covariates(), ds.outcome_kind())
    }
}

/// The fitted working models used by one analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceSet {
    /// Absent in treated-only mode.
    pub m1: Option<FittedGLM>,
    pub m0: FittedGLM,
    /// Absent in treated-only mode, where `p = 1`.
    pub p: Option<FittedGLM>,
    /// Absent without external rows.
    pub pi: Option<FittedGLM>,
    pub r: VarianceRatioModel,
    pub m0_pooled: bool,
    pub trim_eps: f64,
    pub outcome_kind: OutcomeKind,
}

pub fn fit_nuisances(ds: &CompositeDataset, cfg: &NuisanceConfig) -> Result<NuisanceSet> {
    let opts = &cfg.glm;
    let m1 = if cfg.treated_only {
        None
    } else {
        Some(fit_treated_outcome(ds, &cfg.m1, opts)?)
    };
    let m0 = fit_control_outcome(ds, &cfg.m0, cfg.pool_controls, opts)?;
    let p = if cfg.treated_only {
        None
    } else {
        Some(fit_treatment_ps(ds, &cfg.p, opts)?)
    };
    let pi = if ds.n2() > 0 {
        Some(fit_selection_ps(ds, &cfg.pi, opts)?)
    } else {
        None
    };
    let mode = if ds.n2() == 0 {
        RatioMode::Zero
    } else if cfg.treated_only {
        // with p = 1 the ratio cancels from every weight
        RatioMode::KnownOne
    } else if ds.outcome_kind() == OutcomeKind::Binary && cfg.ratio_mode != RatioMode::KnownOne {
        log::info!("binary outcome: variance ratio mode set to known_one (r = 1)");
        RatioMode::KnownOne
    } else {
        cfg.ratio_mode
    };
    let r = fit_variance_ratio(ds, &m0, mode, &cfg.ratio_spec, opts)?;
    Ok(NuisanceSet {
        m1,
        m0,
        p,
        pi,
        r,
        m0_pooled: cfg.pool_controls,
        trim_eps: cfg.trim_eps,
        outcome_kind: ds.outcome_kind(),
    })
}

impl NuisanceSet {
    /// The comparator set: `m0` refit on trial controls only and `r = 0`,
    /// sharing the other models.
    pub fn baseline(&self, ds: &CompositeDataset, opts: &GlmOptions) -> Result<NuisanceSet> {
        let m0 = fit_control_outcome(ds, &self.m0.spec, false, opts)?;
        Ok(NuisanceSet {
            m0,
            m0_pooled: false,
            r: VarianceRatioModel::Zero,
            ..self.clone()
        })
    }

    pub fn with_ratio(&self, r: VarianceRatioModel) -> NuisanceSet {
        NuisanceSet {
            r,
            ..self.clone()
        }
    }

    /// Short hash of every fitted coefficient and mode flag.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        let mut feed = |tag: &str, coef: &[f64]| {
            h.update(tag.as_bytes());
            h.update((coef.len() as u64).to_le_bytes());
            for c in coef {
                h.update(c.to_bits().to_le_bytes());
            }
        };
        for (tag, m) in [("m1", &self.m1), ("p", &self.p), ("pi", &self.pi)] {
            match m {
                Some(m) => feed(tag, &m.coef),
                None => feed(tag, &[]),
            }
        }
        feed("m0", &self.m0.coef);
        feed(&format!("r:{:?}", self.r.mode()), &self.r.params());
        feed(&format!("pool:{}", self.m0_pooled), &[self.trim_eps]);
        let digest = h.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Evaluates every model at every row of `ds`.
    pub fn predict_rows(&self, ds: &CompositeDataset) -> RowPredictions {
        let mut trimmed = vec![false; ds.n()];
        let mut m1 = Vec::with_capacity(ds.n());
        let mut m0 = Vec::with_capacity(ds.n());
        let mut p = self.p.as_ref().map(|_| Vec::with_capacity(ds.n()));
        let mut pi = self.pi.as_ref().map(|_| Vec::with_capacity(ds.n()));
        let mut r = Vec::with_capacity(ds.n());
        for (i, row) in ds.rows().iter().enumerate() {
            let mut count = 0;
            m1.push(self.m1.as_ref().map_or(f64::NAN, |m| m.predict(&row.x)));
            m0.push(self.m0.predict(&row.x));
            if let (Some(model), Some(out)) = (&self.p, p.as_mut()) {
                out.push(model.predict_trimmed(&row.x, self.trim_eps, &mut count));
            }
            if let (Some(model), Some(out)) = (&self.pi, pi.as_mut()) {
                out.push(model.predict_trimmed(&row.x, self.trim_eps, &mut count));
            }
            r.push(self.r.ratio(&row.x));
            trimmed[i] = count > 0;
        }
        RowPredictions {
            m1,
            m0,
            p,
            pi,
            r,
            trimmed,
        }
    }

    /// Estimated `var(Y0 | x, D=1)`: `m0 (1 - m0)` for binary outcomes,
    /// otherwise the variance model's trial-group fit.
    pub fn trial_variance(&self, x: &[f64]) -> Result<f64> {
        match self.outcome_kind {
            OutcomeKind::Binary => {
                let m = self.m0.predict(x);
                Ok(m * (1.0 - m))
            }
            OutcomeKind::Continuous => self.r.trial_variance(x).ok_or_else(|| {
                Error::Config(
                    "continuous outcomes need a constant or loglinear variance model here".into(),
                )
            }),
        }
    }
}

/// Per-row nuisance predictions. `trimmed[i]` records whether row `i` had a
/// propensity clipped.
#[derive(Debug, Clone, PartialEq)]
pub struct RowPredictions {
    pub m1: Vec<f64>,
    pub m0: Vec<f64>,
    pub p: Option<Vec<f64>>,
    pub pi: Option<Vec<f64>>,
    pub r: Vec<f64>,
    pub trimmed: Vec<bool>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds_from(rows: Vec<Observation>) -> CompositeDataset {
        let k = rows[0].x.len();
        CompositeDataset::new(rows, (0..k).map(|j| format!("x{j}")).collect(), None).unwrap()
    }

    #[test]
    fn predict_examples() {
        let logit = FittedGLM {
            spec: ModelSpec::intercept_only(Family::Binomial),
            coef: vec![0.0],
            converged: true,
            iterations: 0,
            loglik: 0.0,
            n_obs: 1,
        };
        assert_eq!(logit.predict(&[]), 0.5);

        let ident = FittedGLM {
            spec: ModelSpec::linear(Family::Gaussian, 1),
            coef: vec![1.0, 2.0],
            converged: true,
            iterations: 1,
            loglik: 0.0,
            n_obs: 2,
        };
        assert_eq!(ident.predict(&[1.0]), 3.0);

        let mut counter = 0;
        let p = trim_probability(0.9999, 1e-3, &mut counter);
        assert!((p - 0.999).abs() < 1e-15);
        assert_eq!(counter, 1);
        assert_eq!(trim_probability(0.5, 1e-3, &mut counter), 0.5);
        assert_eq!(counter, 1);
    }

    fn composite() -> CompositeDataset {
        let mut rows = Vec::new();
        for i in 0..40 {
            let x = (i as f64) / 10.0 - 2.0;
            let t = i % 2 == 0;
            rows.push(Observation::new(1.0 + x + if t { 1.0 } else { 0.0 } + 0.1 * ((i * 7 % 5) as f64 - 2.0), vec![x], t, true));
        }
        for i in 0..30 {
            let x = (i as f64) / 10.0 - 1.0;
            rows.push(Observation::new(1.0 + x + 0.2 * ((i * 3 % 7) as f64 - 3.0), vec![x], false, false));
        }
        ds_from(rows)
    }

    #[test]
    fn outcome_models_use_the_right_strata() {
        let ds = composite();
        let spec = ModelSpec::linear(Family::Gaussian, 1);
        let opts = GlmOptions::default();
        let (m1, m0) = fit_outcome_models(&ds, &spec, &spec, true, &opts).unwrap();
        assert_eq!(m1.n_obs, 20);
        assert_eq!(m0.n_obs, 50);
        let (_, m0t) = fit_outcome_models(&ds, &spec, &spec, false, &opts).unwrap();
        assert_eq!(m0t.n_obs, 20);
    }

    #[test]
    fn treated_only_trial_errors_for_treatment_ps() {
        let rows = vec![
            Observation::new(1.0, vec![0.0], true, true),
            Observation::new(2.0, vec![1.0], true, true),
            Observation::new(0.0, vec![0.5], false, false),
        ];
        let ds = ds_from(rows);
        let spec = ModelSpec::linear(Family::Binomial, 1);
        let err = fit_treatment_ps(&ds, &spec, &GlmOptions::default()).unwrap_err();
        assert!(matches!(err, Error::EmptyCell(_)));
        let err = fit_control_outcome(&ds, &spec, false, &GlmOptions::default()).unwrap_err();
        assert!(matches!(err, Error::EmptyCell(_)));
    }

    #[test]
    fn selection_ps_intercept_only_is_logit_q() {
        let ds = composite();
        let fit = fit_selection_ps(&ds, &ModelSpec::intercept_only(Family::Binomial), &GlmOptions::default())
            .unwrap();
        let q = ds.q_hat();
        assert!((fit.coef[0] - (q / (1.0 - q)).ln()).abs() < 1e-10);

        let trial_only = ds_from(ds.rows().iter().filter(|r| r.d).cloned().collect());
        assert!(matches!(
            fit_selection_ps(&trial_only, &ModelSpec::intercept_only(Family::Binomial), &GlmOptions::default()),
            Err(Error::EmptyCell(_))
        ));
    }

    #[test]
    fn known_one_predicts_one() {
        let ds = composite();
        let spec = ModelSpec::linear(Family::Gaussian, 1);
        let opts = GlmOptions::default();
        let m0 = fit_control_outcome(&ds, &spec, true, &opts).unwrap();
        let r = fit_variance_ratio(&ds, &m0, RatioMode::KnownOne, &spec, &opts).unwrap();
        for x in [-3.0, 0.0, 17.0] {
            assert_eq!(r.ratio(&[x]), 1.0);
        }
        let c = fit_variance_ratio(&ds, &m0, RatioMode::Constant, &spec, &opts).unwrap();
        assert!(c.ratio(&[0.0]) > 0.0);
        let l = fit_variance_ratio(&ds, &m0, RatioMode::Loglinear, &spec, &opts).unwrap();
        assert!(l.ratio(&[5.0]) > 0.0 && l.trial_variance(&[0.0]).unwrap() > 0.0);
    }

    #[test]
    fn degenerate_variance() {
        let mut rows = Vec::new();
        for i in 0..6 {
            let x = i as f64;
            rows.push(Observation::new(2.0 * x, vec![x], i % 2 == 0, true));
            rows.push(Observation::new(2.0 * x + 1.0, vec![x + 0.5], false, false));
        }
        let ds = ds_from(rows);
        let spec = ModelSpec::linear(Family::Gaussian, 1);
        let opts = GlmOptions::default();
        let m0 = fit_control_outcome(&ds, &spec, true, &opts).unwrap();
        let err = fit_variance_ratio(&ds, &m0, RatioMode::Constant, &spec, &opts).unwrap_err();
        assert!(matches!(err, Error::DegenerateVariance(_)), "{err:?}");
    }

    #[test]
    fn fingerprint_tracks_coefficients() {
        let ds = composite();
        let cfg = NuisanceConfig::for_dataset(&ds);
        let a = fit_nuisances(&ds, &cfg).unwrap();
        let b = fit_nuisances(&ds, &cfg).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 16);
        let base = a.baseline(&ds, &cfg.glm).unwrap();
        assert_ne!(a.fingerprint(), base.fingerprint());
    }
}
