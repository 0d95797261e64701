//! Variances, confidence intervals and tests, plus the diagnostics that go
//! with external controls: the mean-exchangeability test, overlap summaries
//! and the bias factor under violated exchangeability.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::dataset::{CompositeDataset, OutcomeKind};
use crate::error::{Error, Result};
use crate::estimators::{combined_denominator, estimate_with_influence, Estimand, Estimate, IfVector, Method, DENOM_EPS};
use crate::nuisance::{coefficient_covariance, fit_glm, Design, Family, GlmOptions, ModelSpec, NuisanceSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sidedness {
    TwoSided,
    /// Alternative `theta > null`.
    Greater,
    Less,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMethod {
    InfluenceFunction,
    Bootstrap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub estimate: Estimate,
    pub variance: f64,
    pub se: f64,
    /// Two-sided interval at `level`.
    pub ci: (f64, f64),
    pub level: f64,
    pub z: f64,
    pub p_value: f64,
    pub null_value: f64,
    pub sidedness: Sidedness,
    pub variance_method: VarianceMethod,
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("valid normal")
}

/// Sample variance of the influence values divided by `n`.
pub fn if_variance(ifv: &IfVector) -> f64 {
    let n = ifv.values.len() as f64;
    let mean = ifv.mean();
    ifv.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n / n
}

/// One-sample z-test and normal-approximation interval.
pub fn z_test(
    estimate: &Estimate,
    variance: f64,
    null_value: f64,
    sidedness: Sidedness,
    level: f64,
    method: VarianceMethod,
) -> Result<InferenceResult> {
    if !(variance > 0.0) || !variance.is_finite() {
        return Err(Error::DegenerateVariance(format!(
            "variance {variance} of the {} estimate is not positive",
            estimate.estimand.as_str()
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("level {level} must lie in (0, 1)")));
    }
    let norm = std_normal();
    let se = variance.sqrt();
    let z = (estimate.point - null_value) / se;
    let p_value = match sidedness {
        Sidedness::Greater => norm.cdf(-z),
        Sidedness::Less => norm.cdf(z),
        Sidedness::TwoSided => (2.0 * norm.cdf(-z.abs())).min(1.0),
    };
    let crit = norm.inverse_cdf(0.5 + level / 2.0);
    Ok(InferenceResult {
        estimate: estimate.clone(),
        variance,
        se,
        ci: (estimate.point - crit * se, estimate.point + crit * se),
        level,
        z,
        p_value,
        null_value,
        sidedness,
        variance_method: method,
    })
}

/// Point estimate, influence-function variance and z-test in one call.
pub fn infer(
    ds: &CompositeDataset,
    nuis: &NuisanceSet,
    estimand: Estimand,
    method: Method,
    null_value: f64,
    sidedness: Sidedness,
    level: f64,
) -> Result<InferenceResult> {
    let (est, ifv) = estimate_with_influence(ds, nuis, estimand, method)?;
    z_test(&est, if_variance(&ifv), null_value, sidedness, level, VarianceMethod::InfluenceFunction)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapOptions {
    pub reps: usize,
    pub seed: u64,
    pub level: f64,
    /// Resample within trial and external rows, keeping `n1` and `n2` fixed.
    pub stratify: bool,
    /// Sort rows into a canonical order before resampling, so results do not
    /// depend on input row order.
    pub canonical_sort: bool,
    /// Largest tolerated fraction of failed replicates.
    pub max_failure_rate: f64,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        Self {
            reps: 500,
            seed: 0,
            level: 0.95,
            stratify: false,
            canonical_sort: false,
            max_failure_rate: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    /// Resample variance (divisor `reps - failures - 1`).
    pub variance: f64,
    /// Percentile interval.
    pub ci: (f64, f64),
    pub level: f64,
    pub reps: usize,
    pub failures: usize,
    pub mean: f64,
}

/// Row permutation that sorts by `(d, t, y, x)`; rows with equal keys are
/// indistinguishable, so resampling from this order is invariant to the
/// input order.
pub fn canonical_order(ds: &CompositeDataset) -> Vec<usize> {
    let rows = ds.rows();
    let mut idx: Vec<usize> = (0..rows.len()).collect();
    idx.sort_by(|&a, &b| {
        let (ra, rb) = (&rows[a], &rows[b]);
        ra.d.cmp(&rb.d)
            .then(ra.t.cmp(&rb.t))
            .then(ra.y.total_cmp(&rb.y))
            .then_with(|| {
                ra.x.iter()
                    .zip(&rb.x)
                    .map(|(u, v)| u.total_cmp(v))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
    });
    idx
}

/// Per-replicate generator: a fixed key and one stream per replicate, so
/// draws do not depend on scheduling.
pub fn replicate_rng(seed: u64, index: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn quantile_sorted(v: &[f64], prob: f64) -> f64 {
    let h = (v.len() - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// Nonparametric bootstrap of an arbitrary estimator. `estimator` should
/// refit every nuisance model on the resample it receives. Replicates run
/// on the current rayon pool.
pub fn bootstrap_variance<F>(ds: &CompositeDataset, estimator: F, opts: &BootstrapOptions) -> Result<BootstrapResult>
where
    F: Fn(&CompositeDataset) -> Result<f64> + Sync,
{
    if opts.reps < 2 {
        return Err(Error::Config("bootstrap needs at least 2 replicates (100 or more recommended)".into()));
    }
    let base: Vec<usize> = if opts.canonical_sort {
        canonical_order(ds)
    } else {
        (0..ds.n()).collect()
    };
    let (trial, external): (Vec<usize>, Vec<usize>) = base.iter().partition(|&&i| ds.rows()[i].d);

    let draws: Vec<Option<f64>> = (0..opts.reps)
        .into_par_iter()
        .map(|b| {
            let mut rng = replicate_rng(opts.seed, b as u64);
            let idx: Vec<usize> = if opts.stratify {
                let mut out = Vec::with_capacity(base.len());
                for group in [&trial, &external] {
                    for _ in 0..group.len() {
                        out.push(group[rng.random_range(0..group.len())]);
                    }
                }
                out
            } else {
                (0..base.len()).map(|_| base[rng.random_range(0..base.len())]).collect()
            };
            let resample = ds.select(&idx).ok()?;
            match estimator(&resample) {
                Ok(v) if v.is_finite() => Some(v),
                Ok(_) => {
                    log::warn!("bootstrap replicate {b}: non-finite estimate");
                    None
                }
                Err(e) => {
                    log::warn!("bootstrap replicate {b}: {e}");
                    None
                }
            }
        })
        .collect();

    let mut ok: Vec<f64> = draws.into_iter().flatten().collect();
    let failures = opts.reps - ok.len();
    if failures as f64 > opts.max_failure_rate * opts.reps as f64 || ok.len() < 2 {
        return Err(Error::TooManyFailures {
            failed: failures,
            total: opts.reps,
        });
    }
    let m = ok.len() as f64;
    let mean = ok.iter().sum::<f64>() / m;
    let variance = ok.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
    ok.sort_by(f64::total_cmp);
    let alpha = 1.0 - opts.level;
    Ok(BootstrapResult {
        variance,
        ci: (quantile_sorted(&ok, alpha / 2.0), quantile_sorted(&ok, 1.0 - alpha / 2.0)),
        level: opts.level,
        reps: opts.reps,
        failures,
        mean,
    })
}

/// Wald test for a single coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientTest {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExchangeabilityTest {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    pub coefficients_tested: Vec<String>,
    /// Shift between trial and external control means, reported apart from
    /// the interaction test.
    pub d_main_effect: CoefficientTest,
    pub n_controls: usize,
}

/// Tests `E(Y | X, D=1, T=0) = E(Y | X, D=0, T=0)` through the `d x f(x)`
/// interactions in a regression of `y` on `(1, f(x), d, d f(x))` over all
/// controls, where `f` is the term list of `spec`. The family follows the
/// outcome kind.
pub fn test_mean_exchangeability(ds: &CompositeDataset, spec: &ModelSpec, opts: &GlmOptions) -> Result<ExchangeabilityTest> {
    spec.check(ds.n_covariates())?;
    if spec.terms.is_empty() {
        return Err(Error::Config("exchangeability test needs at least one covariate term".into()));
    }
    let controls: Vec<_> = ds.rows().iter().filter(|r| !r.t).collect();
    let n_trial = controls.iter().filter(|r| r.d).count();
    if n_trial == 0 {
        return Err(Error::EmptyCell("no trial controls for the exchangeability test".into()));
    }
    if n_trial == controls.len() {
        return Err(Error::EmptyCell("no external controls for the exchangeability test".into()));
    }
    let k = spec.terms.len();
    let names_x = ds.covariate_names();
    let mut names = vec!["(intercept)".to_string()];
    names.extend(spec.terms.iter().map(|t| t.label(names_x)));
    names.push("d".into());
    names.extend(spec.terms.iter().map(|t| format!("d:{}", t.label(names_x))));

    let rows: Vec<Vec<f64>> = controls
        .iter()
        .map(|r| {
            let f: Vec<f64> = spec.terms.iter().map(|t| t.eval(&r.x)).collect();
            let d = if r.d { 1.0 } else { 0.0 };
            let mut row = Vec::with_capacity(2 * k + 2);
            row.push(1.0);
            row.extend_from_slice(&f);
            row.push(d);
            row.extend(f.iter().map(|v| d * v));
            row
        })
        .collect();
    let y: Vec<f64> = controls.iter().map(|r| r.y).collect();
    let design = Design::from_rows(&rows, names.clone());
    let family = match ds.outcome_kind() {
        OutcomeKind::Binary => Family::Binomial,
        OutcomeKind::Continuous => Family::Gaussian,
    };
    let fit = fit_glm(&design, &y, family, None, opts)?;
    let cov = coefficient_covariance(&design, &y, family, &fit.coef)?;

    let block: Vec<usize> = (k + 2..2 * k + 2).collect();
    let beta = nalgebra::DVector::from_iterator(k, block.iter().map(|&j| fit.coef[j]));
    let v = nalgebra::DMatrix::from_fn(k, k, |a, b| cov[(block[a], block[b])]);
    let statistic = match v.clone().cholesky() {
        Some(c) => beta.dot(&c.solve(&beta)),
        None => {
            return Err(Error::Numeric("interaction covariance block is singular".into()));
        }
    }
    .max(0.0);
    let chi = ChiSquared::new(k as f64).map_err(|e| Error::Numeric(e.to_string()))?;
    let p_value = if statistic == 0.0 { 1.0 } else { (1.0 - chi.cdf(statistic)).clamp(0.0, 1.0) };

    let jd = k + 1;
    let se_d = cov[(jd, jd)].sqrt();
    let z_d = fit.coef[jd] / se_d;
    Ok(ExchangeabilityTest {
        statistic,
        df: k,
        p_value,
        coefficients_tested: block.iter().map(|&j| names[j].clone()).collect(),
        d_main_effect: CoefficientTest {
            name: "d".into(),
            estimate: fit.coef[jd],
            se: se_d,
            z: z_d,
            p_value: 2.0 * std_normal().cdf(-z_d.abs()),
        },
        n_controls: controls.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasBound {
    pub lambda_estimate: Option<f64>,
    pub lambda_abs_bound: Option<f64>,
    /// `E[(pi/q) (1 - pi) r / (pi (1 - p) + (1 - pi) r)]`.
    pub weight_factor: f64,
}

/// Per-row factor `(pi/q) (1 - pi) r / (pi (1 - p) + (1 - pi) r)` that turns
/// an exchangeability violation `b(x)` into bias of the full-data `tau`
/// estimator. A missing `p` model means a treated-only trial (`p = 1`), a
/// missing `pi` model means no external rows (`pi = 1`).
pub fn bias_weights(ds: &CompositeDataset, nuis: &NuisanceSet) -> Vec<f64> {
    let pr = nuis.predict_rows(ds);
    let q = ds.q_hat();
    (0..ds.n())
        .map(|i| {
            let pi = pr.pi.as_ref().map_or(1.0, |v| v[i]);
            let p = pr.p.as_ref().map_or(1.0, |v| v[i]);
            let r = pr.r[i];
            let (den, _) = combined_denominator(pi, p, r);
            pi / q * (1.0 - pi) * r / den
        })
        .collect()
}

/// Bias of the full-data `tau` estimator when external control means differ
/// from trial control means by `b(x)` (`Y0` mean in the external population
/// is `m0(x) - b(x)`), and a bound on its size when `|b| <= bound`.
pub fn bias_bound(
    ds: &CompositeDataset,
    nuis: &NuisanceSet,
    bound: Option<f64>,
    b: Option<&dyn Fn(&[f64]) -> f64>,
) -> Result<BiasBound> {
    if let Some(bb) = bound {
        if !(bb >= 0.0) {
            return Err(Error::Config(format!("bias bound {bb} must be non-negative")));
        }
    }
    let w = bias_weights(ds, nuis);
    let n = w.len() as f64;
    let factor = w.iter().sum::<f64>() / n;
    let lambda_estimate = b.map(|f| ds.rows().iter().zip(&w).map(|(r, wi)| wi * f(&r.x)).sum::<f64>() / n);
    Ok(BiasBound {
        lambda_estimate,
        lambda_abs_bound: bound.map(|bb| bb * factor),
        weight_factor: factor,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub min: f64,
    pub q05: f64,
    pub median: f64,
    pub q95: f64,
    pub max: f64,
    pub mean: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(Self {
            min: v[0],
            q05: quantile_sorted(&v, 0.05),
            median: quantile_sorted(&v, 0.5),
            q95: quantile_sorted(&v, 0.95),
            max: v[v.len() - 1],
            mean: v.iter().sum::<f64>() / v.len() as f64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub pi: Option<Summary>,
    pub p: Option<Summary>,
    pub pi_times_p: Option<Summary>,
    pub denominator: Option<Summary>,
    pub trimmed: usize,
    pub floored: usize,
    /// 1-based rows with `pi p > 1 - DENOM_EPS`.
    pub flagged_rows: Vec<usize>,
    pub notes: Vec<String>,
}

pub fn overlap_diagnostics(ds: &CompositeDataset, nuis: &NuisanceSet) -> OverlapReport {
    let pr = nuis.predict_rows(ds);
    let mut notes = Vec::new();
    let n = ds.n();
    let p: Vec<f64> = match &pr.p {
        Some(v) => v.clone(),
        None => {
            notes.push("treated-only trial: p = 1, so overlap requires pi < 1".into());
            vec![1.0; n]
        }
    };
    let (pi, have_pi) = match &pr.pi {
        Some(v) => (v.clone(), true),
        None => {
            notes.push(
                "no external rows: pi = 1 and external weights are undefined; use the trial-based estimator".into(),
            );
            (vec![1.0; n], false)
        }
    };
    let prod: Vec<f64> = pi.iter().zip(&p).map(|(a, b)| a * b).collect();
    let dens: Vec<(f64, bool)> = (0..n).map(|i| combined_denominator(pi[i], p[i], pr.r[i])).collect();
    let flagged_rows: Vec<usize> = prod
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 1.0 - DENOM_EPS)
        .map(|(i, _)| i + 1)
        .collect();
    if !flagged_rows.is_empty() {
        notes.push(format!("{} rows with pi p numerically 1", flagged_rows.len()));
    }
    OverlapReport {
        pi: if have_pi { Summary::of(&pi) } else { None },
        p: pr.p.as_ref().and_then(|v| Summary::of(v)),
        pi_times_p: Summary::of(&prod),
        denominator: if have_pi {
            Summary::of(&dens.iter().map(|d| d.0).collect::<Vec<_>>())
        } else {
            None
        },
        trimmed: pr.trimmed.iter().filter(|&&t| t).count(),
        floored: dens.iter().filter(|d| d.1).count(),
        flagged_rows,
        notes,
    }
}

fn label(e: &Estimate) -> String {
    let sym = match e.estimand {
        Estimand::Tau => "tau",
        Estimand::Psi => "psi",
        Estimand::Xi => "xi",
    };
    let m = match e.method {
        Method::FullData => "full data",
        Method::TrialBased => "trial based",
        Method::TreatedOnly => "treated only",
    };
    format!("{sym} ({m})")
}

/// Text table: point estimate x 10^2, variance x 10^4 and p-value.
pub fn render_table(results: &[InferenceResult]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<24} {:>10} {:>12} {:>8}  {}\n",
        "estimator", "est x1e2", "var x1e4", "p-value", "variance"
    ));
    for r in results {
        let vm = match r.variance_method {
            VarianceMethod::InfluenceFunction => "influence function",
            VarianceMethod::Bootstrap => "bootstrap",
        };
        out.push_str(&format!(
            "{:<24} {:>10.2} {:>12.2} {:>8.3}  {}\n",
            label(&r.estimate),
            r.estimate.point * 1e2,
            r.variance * 1e4,
            r.p_value,
            vm
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn est(point: f64) -> Estimate {
        Estimate {
            estimand: Estimand::Tau,
            method: Method::FullData,
            point,
            n_used: 1,
            nuisance_fingerprint: String::new(),
            trim_count: 0,
        }
    }

    #[test]
    fn zero_point_two_sided_is_one() {
        let r = z_test(&est(0.0), 0.3, 0.0, Sidedness::TwoSided, 0.95, VarianceMethod::InfluenceFunction).unwrap();
        assert_eq!(r.p_value, 1.0);
        assert!((r.ci.1 - 1.959963984540054 * 0.3f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn non_positive_variance_rejected() {
        assert!(z_test(&est(1.0), 0.0, 0.0, Sidedness::Greater, 0.95, VarianceMethod::InfluenceFunction).is_err());
    }

    #[test]
    fn zero_if_has_zero_variance() {
        let ifv = IfVector {
            values: vec![0.0; 10],
            estimand: Estimand::Tau,
            method: Method::FullData,
        };
        assert_eq!(if_variance(&ifv), 0.0);
    }

    #[test]
    fn quantiles_interpolate() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile_sorted(&v, 0.5), 3.0);
        assert_eq!(quantile_sorted(&v, 0.0), 1.0);
        assert!((quantile_sorted(&v, 0.05) - 1.2).abs() < 1e-12);
    }
}
